//! Checkpoint container.
//!
//! ```text
//! SAICCKPT 1
//! config layers=2 d_model=64 ...
//! meta <key> <value>          (zero or more)
//! tensor <name> <d0>x<d1>...  (directory, in payload order)
//! end
//! <little-endian f32 payloads>
//! ```
//!
//! Values are stored as `f32`. Anything not exactly representable is
//! rejected on write, so a write/read cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore, Tensor};

use super::{ModelConfig, ModelParams};

const MAGIC: &str = "SAICCKPT 1";
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

/// Adam bookkeeping saved next to the weights so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn of(adam: &Adam) -> Self {
        let (m, v) = adam.moments();
        Self {
            step: adam.steps_taken(),
            first: m.to_vec(),
            second: v.to_vec(),
        }
    }

    pub fn restore(self, store: &ParamStore) -> Result<Adam> {
        Adam::with_state(store, self.step, self.first, self.second)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Free-form annotations such as the training step; keys contain no
    /// whitespace and values no newlines.
    pub meta: Vec<(String, String)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            meta: Vec::new(),
            optimizer: None,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn directory(ck: &Checkpoint) -> Vec<(String, &Tensor)> {
    let store = &ck.params.store;
    let mut out: Vec<(String, &Tensor)> = store
        .ids()
        .map(|id| (store.name(id).to_string(), store.value(id)))
        .collect();
    if let Some(opt) = &ck.optimizer {
        for (prefix, moments) in [(MOMENT1, &opt.first), (MOMENT2, &opt.second)] {
            for (id, t) in store.ids().zip(moments) {
                out.push((format!("{prefix}{}", store.name(id)), t));
            }
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut bytes = Vec::new();
    encode(ck, &mut bytes)?;
    write_atomic(path, &bytes)
}

fn encode(ck: &Checkpoint, out: &mut Vec<u8>) -> Result<()> {
    let mut header = format!("{MAGIC}\nconfig");
    for (k, v) in ck.params.config.to_pairs() {
        header.push_str(&format!(" {k}={v}"));
    }
    header.push('\n');
    for (k, v) in &ck.meta {
        if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
            return fmt_err(format!("meta entry {k:?} cannot be stored"));
        }
        header.push_str(&format!("meta {k} {v}\n"));
    }
    if let Some(opt) = &ck.optimizer {
        header.push_str(&format!("meta adam_step {}\n", opt.step));
    }
    let dir = directory(ck);
    for (name, t) in &dir {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {}\n", dims.join("x")));
    }
    header.push_str("end\n");
    out.extend_from_slice(header.as_bytes());
    for (name, t) in &dir {
        for &v in t.data() {
            let f = v as f32;
            if f as f64 != v {
                return fmt_err(format!("tensor {name} holds {v}, not representable as f32"));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::Missing(format!("checkpoint {}: {e}", path.display())))?;
    decode(&mut BufReader::new(file))
}

fn next_line(r: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return fmt_err("checkpoint header ends early");
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn decode(r: &mut impl BufRead) -> Result<Checkpoint> {
    if next_line(r)? != MAGIC {
        return fmt_err("not a checkpoint file");
    }
    let cfg_line = next_line(r)?;
    let Some(pairs) = cfg_line.strip_prefix("config") else {
        return fmt_err("missing config line");
    };
    let mut config = ModelConfig::desk(0, 0);
    let mut seen = 0;
    for pair in pairs.split_whitespace() {
        let Some((k, v)) = pair.split_once('=') else {
            return fmt_err(format!("bad config entry {pair}"));
        };
        let v: usize = v
            .parse()
            .map_err(|_| Error::Format(format!("bad config value {pair}")))?;
        if !config.set(k, v) {
            return fmt_err(format!("unknown config key {k}"));
        }
        seen += 1;
    }
    if seen != config.to_pairs().len() {
        return fmt_err("incomplete config line");
    }

    let mut meta = Vec::new();
    let mut dir: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let line = next_line(r)?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let Some((name, dims)) = rest.rsplit_once(' ') else {
                return fmt_err(format!("bad tensor entry {rest}"));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("bad shape {dims}")))?;
            dir.push((name.to_string(), shape));
        } else {
            return fmt_err(format!("unexpected header line {line:?}"));
        }
    }

    let mut tensors = Vec::with_capacity(dir.len());
    for (name, shape) in dir {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("payload for {name} is truncated")))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return fmt_err("trailing bytes after payload");
    }

    let adam_step = meta.iter().position(|(k, _)| k == "adam_step");
    let adam_step = match adam_step {
        Some(i) => {
            let (_, v) = meta.remove(i);
            Some(v.parse::<u64>().map_err(|_| Error::Format("bad adam_step".into()))?)
        }
        None => None,
    };
    let (mut first, mut second, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (name, t) in tensors {
        if let Some(p) = name.strip_prefix(MOMENT1) {
            first.push((p.to_string(), t));
        } else if let Some(p) = name.strip_prefix(MOMENT2) {
            second.push((p.to_string(), t));
        } else {
            weights.push((name, t));
        }
    }
    let params = ModelParams::from_named(config, weights)?;
    let optimizer = match adam_step {
        None if first.is_empty() && second.is_empty() => None,
        None => return fmt_err("optimizer moments without adam_step"),
        Some(step) => {
            let order = |v: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                if v.len() != params.store.len() {
                    return fmt_err("optimizer moments do not cover every parameter");
                }
                params
                    .store
                    .ids()
                    .zip(v)
                    .map(|(id, (name, t))| {
                        if name != params.store.name(id) || t.shape() != params.store.value(id).shape() {
                            return fmt_err(format!("optimizer moment {name} out of place"));
                        }
                        Ok(t)
                    })
                    .collect()
            };
            Some(OptimizerState {
                step,
                first: order(first)?,
                second: order(second)?,
            })
        }
    };
    Ok(Checkpoint {
        params,
        meta,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 8,
            d_ff: 8,
            heads: 2,
            vocab_size: 7,
            rpr_window: 2,
            max_len: 6,
            feature_dim: 3,
        };
        ModelParams::init(cfg, 11).unwrap()
    }

    fn round_trip(ck: &Checkpoint) -> Checkpoint {
        let mut bytes = Vec::new();
        encode(ck, &mut bytes).unwrap();
        decode(&mut bytes.as_slice()).unwrap()
    }

    #[test]
    fn weights_and_meta_round_trip_bit_exact() {
        let mut ck = Checkpoint::new(params());
        ck.meta.push(("step".into(), "42".into()));
        ck.meta.push(("note".into(), "teacher run".into()));
        let back = round_trip(&ck);
        assert_eq!(back, ck);
        assert_eq!(back.params.checksum(), ck.params.checksum());
        assert_eq!(back.meta("note"), Some("teacher run"));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let p = params();
        let mut adam = Adam::new(&p.store);
        let mut store = p.store.clone();
        let mut g = crate::nn::Graph::new();
        let x = g.param(&store, p.ids.out_w);
        let loss = g.sum(x);
        g.backward(loss, &mut store).unwrap();
        adam.step(&mut store, 1e-2);
        store.zero_grads();
        let ck = Checkpoint {
            params: ModelParams { store, ..p },
            meta: vec![],
            optimizer: Some(OptimizerState::of(&adam)),
        };
        assert_eq!(round_trip(&ck), ck);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint::new(params());
        let mut bytes = Vec::new();
        encode(&ck, &mut bytes).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(decode(&mut &truncated[..]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode(&mut trailing.as_slice()).is_err());
        assert!(decode(&mut &b"SAICCKPT 2\n"[..]).is_err());
    }

    #[test]
    fn non_f32_values_refuse_to_serialize() {
        let mut p = params();
        let id = p.store.ids().next().unwrap();
        p.store.value_mut(id).data_mut()[0] = 0.1;
        let mut bytes = Vec::new();
        assert!(encode(&Checkpoint::new(p), &mut bytes).is_err());
    }

    #[test]
    fn missing_file_is_a_missing_error() {
        let err = read_checkpoint(Path::new("/nonexistent/ck.bin")).unwrap_err();
        assert!(matches!(err, Error::Missing(_)));
    }
}
