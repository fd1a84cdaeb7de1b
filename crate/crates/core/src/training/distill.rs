use crate::decoding::decode_aic;
use crate::error::Result;
use crate::model::{InferenceModel, SceneFeatures};
use crate::nn::Scalar;
use crate::tokens::TokenId;

/// Teacher beam width used to produce distilled targets.
pub const DISTILL_BEAM: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistilledTarget {
    pub tokens: Vec<TokenId>,
    /// False if the teacher hit the length limit; `tokens` is then the
    /// truncated output.
    pub terminated: bool,
}

/// One beam-search decode of the teacher per scene.
pub fn generate_distillation_set<'a, T: Scalar>(
    teacher: &InferenceModel<T>,
    scenes: impl IntoIterator<Item = &'a SceneFeatures>,
    beam: usize,
    max_len: usize,
) -> Result<Vec<DistilledTarget>> {
    scenes
        .into_iter()
        .map(|feat| {
            let mem = teacher.encode(feat)?;
            let h = decode_aic(teacher, &mem, beam, max_len)?;
            Ok(DistilledTarget {
                tokens: h.tokens,
                terminated: h.terminated,
            })
        })
        .collect()
}
