use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tensor};

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub attn: AttnIds,
    pub norm1: NormIds,
    pub ffn: FfnIds,
    pub norm2: NormIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    /// `(2w+1) × d_head` relative key embeddings.
    pub rel_keys: ParamId,
    /// `(2w+1) × d_head` relative value embeddings.
    pub rel_values: ParamId,
    pub norm1: NormIds,
    pub cross_attn: AttnIds,
    pub norm2: NormIds,
    pub ffn: FfnIds,
    pub norm3: NormIds,
}

/// Where every named tensor lives in the store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIds {
    pub feat_w: ParamId,
    pub feat_b: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub embedding: ParamId,
    pub decoder: Vec<DecoderLayerIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

type MakeParam<'a> = dyn FnMut(&str, &[usize], Init) -> Result<Tensor> + 'a;

struct Builder<'a> {
    store: ParamStore,
    make: &'a mut MakeParam<'a>,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = (self.make)(name, shape, init)?;
        Ok(self.store.add(name, t))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(ParamId, ParamId)> {
        let a = 1.0 / (fan_in as f64).sqrt();
        Ok((
            self.add(&format!("{prefix}.w"), &[fan_in, fan_out], Init::Uniform(a))?,
            self.add(&format!("{prefix}.b"), &[fan_out], Init::Zeros)?,
        ))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d)?;
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d)?;
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d)?;
        let (wo, bo) = self.linear(&format!("{prefix}.o"), d, d)?;
        Ok(AttnIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.add(&format!("{prefix}.gain"), &[d], Init::Ones)?,
            bias: self.add(&format!("{prefix}.bias"), &[d], Init::Zeros)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> Result<FfnIds> {
        let (w1, b1) = self.linear(&format!("{prefix}.1"), d, d_ff)?;
        let (w2, b2) = self.linear(&format!("{prefix}.2"), d_ff, d)?;
        Ok(FfnIds { w1, b1, w2, b2 })
    }
}

fn build(cfg: &ModelConfig, make: &mut MakeParam<'_>) -> Result<(ParamStore, ModelIds)> {
    cfg.validate()?;
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let buckets = 2 * cfg.rpr_window + 1;
    let mut b = Builder {
        store: ParamStore::new(),
        make,
    };
    let (feat_w, feat_b) = b.linear("enc.feat", cfg.feature_dim, d)?;
    let mut encoder = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        encoder.push(EncoderLayerIds {
            attn: b.attn(&format!("enc.{l}.attn"), d)?,
            norm1: b.norm(&format!("enc.{l}.norm1"), d)?,
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, cfg.d_ff)?,
            norm2: b.norm(&format!("enc.{l}.norm2"), d)?,
        });
    }
    let embedding = b.add("dec.embed", &[cfg.vocab_size, d], Init::Uniform(0.5))?;
    let mut decoder = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let rel_scale = Init::Uniform(1.0 / (dh as f64).sqrt());
        decoder.push(DecoderLayerIds {
            self_attn: b.attn(&format!("dec.{l}.self"), d)?,
            rel_keys: b.add(&format!("dec.{l}.rel.k"), &[buckets, dh], rel_scale)?,
            rel_values: b.add(&format!("dec.{l}.rel.v"), &[buckets, dh], rel_scale)?,
            norm1: b.norm(&format!("dec.{l}.norm1"), d)?,
            cross_attn: b.attn(&format!("dec.{l}.cross"), d)?,
            norm2: b.norm(&format!("dec.{l}.norm2"), d)?,
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, cfg.d_ff)?,
            norm3: b.norm(&format!("dec.{l}.norm3"), d)?,
        });
    }
    let (out_w, out_b) = b.linear("dec.out", d, cfg.vocab_size)?;
    Ok((
        b.store,
        ModelIds {
            feat_w,
            feat_b,
            encoder,
            embedding,
            decoder,
            out_w,
            out_b,
        },
    ))
}

/// The single parameter set shared by every decoding role.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelIds,
}

impl ModelParams {
    /// Seeded initialization; every value is representable in `f32`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |_: &str, shape: &[usize], init: Init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a) as f32 as f64).collect(),
            };
            Tensor::new(shape.to_vec(), data)
        };
        let (store, ids) = build(&config, &mut make)?;
        Ok(Self { config, store, ids })
    }

    /// Assembles parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut pool: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut make = |name: &str, shape: &[usize], _: Init| {
            let t = pool
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let (store, ids) = build(&config, &mut make)?;
        if let Some(extra) = pool.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, store, ids })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// FNV-1a over the bit patterns of every value, in store order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in self.store.ids() {
            for v in self.store.value(id).data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
