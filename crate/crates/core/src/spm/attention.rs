use candle_core::Tensor;

use crate::error::Result;
pub use crate::nn::AttentionParams;

/// Multi-head `softmax(QKᵀ/√d)·V` with projections from `params`.
///
/// Accepts unbatched `[n, dim]` or batched `[B, n, dim]` inputs and returns the
/// same rank.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    if q.rank() == 2 && k.rank() == 2 && v.rank() == 2 {
        let out = params.forward(&q.unsqueeze(0)?, &k.unsqueeze(0)?, &v.unsqueeze(0)?, None)?;
        return Ok(out.squeeze(0)?);
    }
    params.forward(q, k, v, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;
    use candle_core::{DType, Device};

    pub(crate) fn identity_params(width: usize, heads: usize) -> AttentionParams {
        let dev = Device::Cpu;
        let mut pb = ParamBuilder::new(0, DType::F64, &dev);
        let mut p = AttentionParams::new(&mut pb, "a", width, width, width, heads, false).unwrap();
        let eye = Tensor::eye(width, DType::F64, &dev).unwrap();
        for lin in [&mut p.q, &mut p.k, &mut p.v, &mut p.out] {
            lin.weight = eye.clone();
            lin.bias = Some(Tensor::zeros(width, DType::F64, &dev).unwrap());
        }
        p
    }

    fn t2(rows: &[&[f64]]) -> Tensor {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (n, d), &Device::Cpu).unwrap()
    }

    #[test]
    fn hand_evaluated_single_head() {
        // scores [1/√2, 0]; weights = softmax -> [0.66976, 0.33024]
        let p = identity_params(2, 1);
        let q = t2(&[&[1.0, 0.0]]);
        let k = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = t2(&[&[2.0, 0.0], &[0.0, 2.0]]);
        let out = attention(&q, &k, &v, &p).unwrap().to_vec2::<f64>().unwrap();
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        assert!((w0 - 0.6698).abs() < 1e-4);
        assert!((out[0][0] - 2.0 * w0).abs() < 1e-12);
        assert!((out[0][1] - 2.0 * (1.0 - w0)).abs() < 1e-12);
        assert!((out[0][0] - 1.3396).abs() < 1e-4);
        assert!((out[0][1] - 0.6604).abs() < 1e-4);
    }

    #[test]
    fn single_key_returns_its_value() {
        let p = identity_params(4, 2);
        let k = t2(&[&[0.3, -1.0, 2.0, 0.5]]);
        let v = t2(&[&[1.0, 2.0, 3.0, 4.0]]);
        for q in [t2(&[&[9.0, 0.0, 0.0, 1.0]]), t2(&[&[-3.0, 4.0, 0.2, 0.0]])] {
            let out = attention(&q, &k, &v, &p).unwrap().to_vec2::<f64>().unwrap();
            assert_eq!(out[0], vec![1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let p = identity_params(2, 1);
        let q = t2(&[&[0.7, -0.2]]);
        let k = t2(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let v = t2(&[&[3.0, 0.0], &[0.0, 3.0], &[3.0, 3.0]]);
        let out = attention(&q, &k, &v, &p).unwrap().to_vec2::<f64>().unwrap();
        assert!((out[0][0] - 2.0).abs() < 1e-12);
        assert!((out[0][1] - 2.0).abs() < 1e-12);
    }
}
