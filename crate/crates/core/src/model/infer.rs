use crate::error::{contract, dim_err, Result};
use crate::masks::AttentionMask;
use crate::nn::ops::{affine, layer_norm, multi_head_attention, RelativeTables, LAYER_NORM_EPS};
use crate::nn::{ParamId, Scalar, Tensor};
use crate::tokens::TokenId;

use super::params::{AttnIds, FfnIds, ModelIds, NormIds};
use super::{Memory, ModelConfig, ModelParams, SceneFeatures};

/// Frozen parameters converted to the inference element type.
///
/// Read-only after construction, so one instance can serve concurrent
/// decodes.
#[derive(Clone, Debug)]
pub struct InferenceModel<T: Scalar = f32> {
    config: ModelConfig,
    ids: ModelIds,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> InferenceModel<T> {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            config: params.config,
            ids: params.ids.clone(),
            tensors: params.store.ids().map(|id| params.store.value(id).cast()).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn p(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.index()]
    }

    fn linear(&self, x: &Tensor<T>, w: ParamId, b: ParamId) -> Result<Tensor<T>> {
        affine(x, self.p(w), self.p(b))
    }

    fn norm(&self, x: &Tensor<T>, n: &NormIds) -> Result<Tensor<T>> {
        layer_norm(x, self.p(n.gain), self.p(n.bias), LAYER_NORM_EPS)
    }

    fn attention(
        &self,
        x: &Tensor<T>,
        kv: &Tensor<T>,
        a: &AttnIds,
        rel: Option<RelativeTables<'_, T>>,
        mask: Option<&AttentionMask>,
    ) -> Result<Tensor<T>> {
        let q = self.linear(x, a.wq, a.bq)?;
        let k = self.linear(kv, a.wk, a.bk)?;
        let v = self.linear(kv, a.wv, a.bv)?;
        let o = multi_head_attention(&q, &k, &v, self.config.heads, rel, mask)?;
        self.linear(&o, a.wo, a.bo)
    }

    fn ffn(&self, x: &Tensor<T>, f: &FfnIds) -> Result<Tensor<T>> {
        let h = self.linear(x, f.w1, f.b1)?.map(|v| v.max(T::zero()));
        self.linear(&h, f.w2, f.b2)
    }

    fn residual_norm(&self, x: &Tensor<T>, delta: &Tensor<T>, n: &NormIds) -> Result<Tensor<T>> {
        let mut s = x.clone();
        s.add_assign(delta)?;
        self.norm(&s, n)
    }

    /// Encodes region features; regions attend to each other without any
    /// positional signal.
    pub fn encode(&self, feat: &SceneFeatures) -> Result<Memory<T>> {
        if feat.dim() != self.config.feature_dim {
            return dim_err(format!(
                "features of width {} for a model expecting {}",
                feat.dim(),
                self.config.feature_dim
            ));
        }
        let x = feat.vectors.cast::<T>();
        let mut h = self.linear(&x, self.ids.feat_w, self.ids.feat_b)?;
        for layer in &self.ids.encoder {
            let a = self.attention(&h, &h, &layer.attn, None, None)?;
            h = self.residual_norm(&h, &a, &layer.norm1)?;
            let f = self.ffn(&h, &layer.ffn)?;
            h = self.residual_norm(&h, &f, &layer.norm2)?;
        }
        Ok(Memory::new(h))
    }

    /// Vocabulary logits for every position of `tokens`.
    pub fn decoder_forward(&self, tokens: &[TokenId], mem: &Memory<T>, mask: &AttentionMask) -> Result<Tensor<T>> {
        let n = tokens.len();
        if mask.rows() != n || mask.cols() != n {
            return dim_err(format!("{}x{} mask for {n} tokens", mask.rows(), mask.cols()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return contract(format!("token {bad} outside vocabulary"));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = self.p(self.ids.embedding).gather_rows(&ids)?;
        let m = mem.encoded();
        for layer in &self.ids.decoder {
            let rel = RelativeTables {
                keys: self.p(layer.rel_keys),
                values: self.p(layer.rel_values),
                window: self.config.rpr_window,
            };
            let s = self.attention(&x, &x, &layer.self_attn, Some(rel), Some(mask))?;
            x = self.residual_norm(&x, &s, &layer.norm1)?;
            let c = self.attention(&x, m, &layer.cross_attn, None, None)?;
            x = self.residual_norm(&x, &c, &layer.norm2)?;
            let f = self.ffn(&x, &layer.ffn)?;
            x = self.residual_norm(&x, &f, &layer.norm3)?;
        }
        self.linear(&x, self.ids.out_w, self.ids.out_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::MASK;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 16,
            d_ff: 24,
            heads: 4,
            vocab_size: 12,
            rpr_window: 2,
            max_len: 16,
            feature_dim: 6,
        }
    }

    fn features(n: usize, seed: u64) -> SceneFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        SceneFeatures::new(Tensor::matrix(n, 6, data).unwrap()).unwrap()
    }

    #[test]
    fn zero_features_encode_to_finite_values() {
        let params = ModelParams::init(cfg(), 0).unwrap();
        let model = InferenceModel::<f64>::new(&params);
        let feat = SceneFeatures::new(Tensor::zeros(&[3, 6])).unwrap();
        let mem = model.encode(&feat).unwrap();
        assert_eq!(mem.encoded().shape(), &[3, 16]);
        assert!(mem.encoded().is_finite());
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let params = ModelParams::init(cfg(), 1).unwrap();
        let model = InferenceModel::<f64>::new(&params);
        let feat = features(4, 2);
        let perm = [2, 0, 3, 1];
        let permuted = SceneFeatures::new(feat.vectors.gather_rows(&perm).unwrap()).unwrap();
        let a = model.encode(&feat).unwrap();
        let b = model.encode(&permuted).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            for (x, y) in b.encoded().row(r).iter().zip(a.encoded().row(p)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_rejects_wrong_width_and_is_deterministic() {
        let params = ModelParams::init(cfg(), 1).unwrap();
        let model = InferenceModel::<f32>::new(&params);
        let bad = SceneFeatures::new(Tensor::zeros(&[2, 5])).unwrap();
        assert!(model.encode(&bad).is_err());
        let feat = features(3, 7);
        assert_eq!(model.encode(&feat).unwrap(), model.encode(&feat).unwrap());
    }

    #[test]
    fn causal_logits_ignore_the_future() {
        let params = ModelParams::init(cfg(), 3).unwrap();
        let model = InferenceModel::<f64>::new(&params);
        let mem = model.encode(&features(3, 4)).unwrap();
        let mask = AttentionMask::causal(5).unwrap();
        let a = model.decoder_forward(&[1, 5, 6, 7, 8], &mem, &mask).unwrap();
        let b = model.decoder_forward(&[1, 5, 6, 10, 4], &mem, &mask).unwrap();
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn full_mask_logits_see_the_future() {
        let params = ModelParams::init(cfg(), 3).unwrap();
        let model = InferenceModel::<f64>::new(&params);
        let mem = model.encode(&features(3, 4)).unwrap();
        let mask = AttentionMask::full(2).unwrap();
        let a = model.decoder_forward(&[6, MASK], &mem, &mask).unwrap();
        let b = model.decoder_forward(&[6, 7], &mem, &mask).unwrap();
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn decoder_rejects_out_of_vocabulary_tokens() {
        let params = ModelParams::init(cfg(), 3).unwrap();
        let model = InferenceModel::<f64>::new(&params);
        let mem = model.encode(&features(2, 4)).unwrap();
        let mask = AttentionMask::full(2).unwrap();
        assert!(model.decoder_forward(&[6, 12], &mem, &mask).is_err());
        assert!(model.decoder_forward(&[6], &mem, &mask).is_err());
    }
}
