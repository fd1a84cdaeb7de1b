//! The same forward pass as [`super::InferenceModel`], recorded on an
//! autodiff [`Graph`] for training.

use crate::error::{contract, dim_err, Result};
use crate::masks::AttentionMask;
use crate::nn::{Graph, ParamStore, Var};
use crate::tokens::TokenId;

use super::params::{AttnIds, FfnIds, NormIds};
use super::{ModelParams, SceneFeatures};

struct Ctx<'a> {
    g: &'a mut Graph,
    store: &'a ParamStore,
    heads: usize,
}

impl Ctx<'_> {
    fn linear(&mut self, x: Var, w: crate::nn::ParamId, b: crate::nn::ParamId) -> Result<Var> {
        let (w, b) = (self.g.param(self.store, w), self.g.param(self.store, b));
        self.g.affine(x, w, b)
    }

    fn attention(
        &mut self,
        x: Var,
        kv: Var,
        a: &AttnIds,
        rel: Option<(Var, Var, usize)>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let q = self.linear(x, a.wq, a.bq)?;
        let k = self.linear(kv, a.wk, a.bk)?;
        let v = self.linear(kv, a.wv, a.bv)?;
        let o = self.g.attention(q, k, v, self.heads, rel, mask)?;
        self.linear(o, a.wo, a.bo)
    }

    fn ffn(&mut self, x: Var, f: &FfnIds) -> Result<Var> {
        let h = self.linear(x, f.w1, f.b1)?;
        let h = self.g.relu(h);
        self.linear(h, f.w2, f.b2)
    }

    fn residual_norm(&mut self, x: Var, delta: Var, n: &NormIds) -> Result<Var> {
        let s = self.g.add(x, delta)?;
        let (gain, bias) = (self.g.param(self.store, n.gain), self.g.param(self.store, n.bias));
        self.g.layer_norm(s, gain, bias)
    }
}

/// Records the encoder on `g` and returns the memory node.
pub fn encode_graph(g: &mut Graph, params: &ModelParams, feat: &SceneFeatures) -> Result<Var> {
    let cfg = &params.config;
    if feat.dim() != cfg.feature_dim {
        return dim_err(format!("features of width {} for {}", feat.dim(), cfg.feature_dim));
    }
    let ids = &params.ids;
    let mut c = Ctx {
        g,
        store: &params.store,
        heads: cfg.heads,
    };
    let x = c.g.constant(feat.vectors.clone());
    let mut h = c.linear(x, ids.feat_w, ids.feat_b)?;
    for layer in &ids.encoder {
        let a = c.attention(h, h, &layer.attn, None, None)?;
        h = c.residual_norm(h, a, &layer.norm1)?;
        let f = c.ffn(h, &layer.ffn)?;
        h = c.residual_norm(h, f, &layer.norm2)?;
    }
    Ok(h)
}

/// Records the decoder on `g` and returns the `n × vocab` logits node.
pub fn decoder_logits_graph(
    g: &mut Graph,
    params: &ModelParams,
    tokens: &[TokenId],
    memory: Var,
    mask: &AttentionMask,
) -> Result<Var> {
    let cfg = &params.config;
    let n = tokens.len();
    if mask.rows() != n || mask.cols() != n {
        return dim_err(format!("{}x{} mask for {n} tokens", mask.rows(), mask.cols()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return contract(format!("token {bad} outside vocabulary"));
    }
    let ids = &params.ids;
    let mut c = Ctx {
        g,
        store: &params.store,
        heads: cfg.heads,
    };
    let table = c.g.param(c.store, ids.embedding);
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = c.g.embed(table, &idx)?;
    for layer in &ids.decoder {
        let rel = (
            c.g.param(c.store, layer.rel_keys),
            c.g.param(c.store, layer.rel_values),
            cfg.rpr_window,
        );
        let s = c.attention(x, x, &layer.self_attn, Some(rel), Some(mask))?;
        x = c.residual_norm(x, s, &layer.norm1)?;
        let cr = c.attention(x, memory, &layer.cross_attn, None, None)?;
        x = c.residual_norm(x, cr, &layer.norm2)?;
        let f = c.ffn(x, &layer.ffn)?;
        x = c.residual_norm(x, f, &layer.norm3)?;
    }
    c.linear(x, ids.out_w, ids.out_b)
}
