use candle_core::Tensor;

use crate::encoders::TextEncoder;
use crate::error::Result;
use crate::params::{Group, Init, ParamBuilder};

/// Learnable continuous prompts for the two classes, `[M, D_text]` each.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub real: Tensor,
    pub fake: Tensor,
}

/// Unit-norm class embeddings produced by the text encoder.
#[derive(Clone, Debug)]
pub struct ClassEmbeddings {
    pub real: Tensor,
    pub fake: Tensor,
}

impl ClassEmbeddings {
    /// `[2, D]` with row 0 = real, row 1 = fake.
    pub fn stacked(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&[&self.real, &self.fake], 0)?)
    }
}

impl PromptBank {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, prompt_len: usize, width: usize, tunable: bool) -> Result<Self> {
        let prev = pb.group();
        pb.set_group(if tunable { Group::Tunable } else { Group::Frozen });
        let real = pb.param(&format!("{prefix}.real"), &[prompt_len, width], Init::Normal(0.02))?;
        let fake = pb.param(&format!("{prefix}.fake"), &[prompt_len, width], Init::Normal(0.02))?;
        pb.set_group(prev);
        Ok(Self { real, fake })
    }

    pub fn prompt_len(&self) -> usize {
        self.real.dims()[0]
    }

    /// Encodes both prompt sequences in one text-encoder pass. Always computed
    /// from the current prompt values, so the embeddings never go stale.
    pub fn class_embeddings(&self, text: &TextEncoder) -> Result<ClassEmbeddings> {
        let prompts = Tensor::stack(&[&self.real, &self.fake], 0)?;
        let t = text.encode(&prompts)?;
        Ok(ClassEmbeddings {
            real: t.get(0)?,
            fake: t.get(1)?,
        })
    }
}
