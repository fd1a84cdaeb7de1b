use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::decoding::{decode_aic, decode_saic};
use crate::error::{contract, Error, Result};
use crate::model::{encode_graph, read_checkpoint, Checkpoint, InferenceModel, ModelParams, OptimizerState};
use crate::nn::{Adam, Graph, Var};
use crate::seed::rng_for;

use super::curriculum::CurriculumSchedule;
use super::examples::{build_training_batch, loss_for, ExampleKind, TrainPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Plain autoregressive plus parallel training on raw captions.
    Teacher,
    /// Curriculum fine-tuning with hybrid distillation.
    Saic,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Teacher => "teacher",
            TrainMode::Saic => "saic",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(TrainMode::Teacher),
            "saic" => Ok(TrainMode::Saic),
            _ => Err(Error::Format(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub k: usize,
    pub p_hybr: f64,
    pub lambda: f64,
    pub epochs: usize,
    /// Epochs over which `p_g` ramps from 0 to 1.
    pub curriculum_epochs: usize,
    /// Caption pairs per step; each yields two examples.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Stop as soon as validation exact match reaches this rate.
    pub target_exact: Option<f64>,
    /// Length limit for validation decoding.
    pub max_len: usize,
}

impl TrainConfig {
    pub fn teacher() -> Self {
        Self {
            mode: TrainMode::Teacher,
            k: 4,
            p_hybr: 0.5,
            lambda: 1.0,
            epochs: 30,
            curriculum_epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.9,
            decay_every: 5,
            clip_norm: Some(1.0),
            seed: 0,
            patience: 5,
            target_exact: None,
            max_len: 32,
        }
    }

    pub fn saic() -> Self {
        Self {
            mode: TrainMode::Saic,
            epochs: 25,
            curriculum_epochs: 15,
            lr: 5e-4,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.curriculum_epochs == 0 || self.decay_every == 0 {
            return contract("epochs, curriculum_epochs, batch_size and decay_every must be positive");
        }
        if self.k == 0 || (self.mode == TrainMode::Saic && self.k < 2) {
            return contract("group-aware training needs k >= 2");
        }
        if !(0.0..=1.0).contains(&self.p_hybr) {
            return contract("p_hybr must lie in [0, 1]");
        }
        if [self.lambda, self.lr, self.lr_decay]
            .iter()
            .any(|x| x.is_nan() || *x <= 0.0)
        {
            return contract("lambda, lr and lr_decay must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub p_g: f64,
    pub lr: f64,
    /// Mean loss per example kind, indexed by [`ExampleKind::index`].
    pub losses: [Option<f64>; 4],
}

impl LogRow {
    pub const HEADER: &'static str = "step\tepoch\tp_g\tlr\tloss_aic\tloss_naic\tloss_outliner\tloss_filler";

    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{}\t{}\t{:e}", self.step, self.epoch, self.p_g, self.lr);
        for l in self.losses {
            match l {
                Some(v) => s.push_str(&format!("\t{v:.6}")),
                None => s.push_str("\t-"),
            }
        }
        s
    }

    /// Equal-weight mean over the kinds present.
    pub fn combined(&self) -> f64 {
        let present: Vec<f64> = self.losses.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_exact: Option<f64>,
    pub stop: bool,
}

/// Mini-batch trainer over one shared parameter set.
///
/// Each step draws its batch from a per-epoch shuffle and its sampling
/// randomness from a per-step stream, so state saved at an epoch boundary
/// resumes bit-identically.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    params: ModelParams,
    adam: Adam,
    step: u64,
    epoch: usize,
    best: f64,
    stale: usize,
    train: &'a [TrainPair],
    val: &'a [TrainPair],
    log: Vec<LogRow>,
    finished: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, params: ModelParams, train: &'a [TrainPair], val: &'a [TrainPair]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return contract("no training pairs");
        }
        let mut adam = Adam::new(&params.store);
        adam.clip_norm = cfg.clip_norm;
        Ok(Self {
            cfg,
            params,
            adam,
            step: 0,
            epoch: 0,
            best: f64::NEG_INFINITY,
            stale: 0,
            train,
            val,
            log: Vec::new(),
            finished: false,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: Checkpoint, train: &'a [TrainPair], val: &'a [TrainPair]) -> Result<Self> {
        let get = |key: &str| {
            ck.meta(key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks training field {key}")))
                .map(str::to_string)
        };
        let parse_err = |key: &str| Error::Format(format!("bad training field {key}"));
        let step: u64 = get("step")?.parse().map_err(|_| parse_err("step"))?;
        let epoch: usize = get("epoch")?.parse().map_err(|_| parse_err("epoch"))?;
        let best: f64 = get("best_val")?.parse().map_err(|_| parse_err("best_val"))?;
        let stale: usize = get("stale")?.parse().map_err(|_| parse_err("stale"))?;
        let finished = get("finished")? == "1";
        let opt = ck
            .optimizer
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        let mut t = Self::new(cfg, ck.params, train, val)?;
        t.adam = opt.restore(&t.params.store)?;
        t.adam.clip_norm = cfg.clip_norm;
        t.step = step;
        t.epoch = epoch;
        t.best = best;
        t.stale = stale;
        t.finished = finished;
        Ok(t)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.finished || self.epoch >= self.cfg.epochs
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        let total = (self.cfg.curriculum_epochs as u64 * self.steps_per_epoch()).saturating_sub(1);
        CurriculumSchedule::new(total.max(1), self.cfg.lambda).expect("validated config")
    }

    pub fn p_g(&self, step: u64) -> f64 {
        match self.cfg.mode {
            TrainMode::Teacher => 0.0,
            TrainMode::Saic => self.schedule().rate(step),
        }
    }

    /// Weights, optimizer state and trainer position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.meta = vec![
            ("mode".into(), self.cfg.mode.to_string()),
            ("k".into(), self.cfg.k.to_string()),
            ("step".into(), self.step.to_string()),
            ("epoch".into(), self.epoch.to_string()),
            ("best_val".into(), format!("{:e}", self.best)),
            ("stale".into(), self.stale.to_string()),
            ("finished".into(), (self.finished as u8).to_string()),
        ];
        ck.optimizer = Some(OptimizerState::of(&self.adam));
        ck
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&TrainPair]) -> Result<LogRow> {
        let p_g = self.p_g(self.step);
        let lr = self.cfg.lr_at(self.epoch);
        let mut rng = rng_for(self.cfg.seed, &format!("batch/{}", self.step));
        let examples = build_training_batch(batch, p_g, self.cfg.p_hybr, &mut rng)?;

        let mut counts = [0usize; 4];
        for e in &examples {
            counts[e.kind.index()] += 1;
        }
        let kinds = counts.iter().filter(|&&c| c > 0).count() as f64;
        let mut sums = [0.0f64; 4];

        self.params.store.zero_grads();
        let k = self.cfg.k;
        for (i, pair) in batch.iter().enumerate() {
            let mut g = Graph::new();
            let mem = encode_graph(&mut g, &self.params, &pair.features)?;
            let mut total: Option<Var> = None;
            for e in examples.iter().filter(|e| e.pair == i) {
                let l = loss_for(&mut g, &self.params, mem, e.kind, &e.chosen, k)?;
                sums[e.kind.index()] += g.value(l).data()[0];
                let w = 1.0 / (counts[e.kind.index()] as f64 * kinds);
                let scaled = g.scale(l, w);
                total = Some(match total {
                    None => scaled,
                    Some(t) => g.add(t, scaled)?,
                });
            }
            if let Some(t) = total {
                g.backward(t, &mut self.params.store)?;
            }
        }
        self.adam.step(&mut self.params.store, lr);

        let mut losses = [None; 4];
        for kind in ExampleKind::ALL {
            let c = counts[kind.index()];
            if c > 0 {
                losses[kind.index()] = Some(sums[kind.index()] / c as f64);
            }
        }
        let row = LogRow {
            step: self.step,
            epoch: self.epoch,
            p_g,
            lr,
            losses,
        };
        self.step += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Exact-match rate on the validation pairs with the decoder this mode
    /// trains for: greedy autoregressive for the teacher, outline-then-fill
    /// with beam 1 otherwise.
    pub fn validation_exact_match(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let model = InferenceModel::<f32>::new(&self.params);
        let mut hits = 0;
        for p in self.val {
            let mem = model.encode(&p.features)?;
            let h = match self.cfg.mode {
                TrainMode::Teacher => decode_aic(&model, &mem, 1, self.cfg.max_len)?,
                TrainMode::Saic => decode_saic(&model, &mem, self.cfg.k, 1, 1, self.cfg.max_len)?,
            };
            hits += (h.tokens == p.raw) as usize;
        }
        Ok(Some(hits as f64 / self.val.len() as f64))
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        if self.is_finished() {
            return contract("training already finished");
        }
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, &format!("epoch/{}", self.epoch)));
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &self.train[i]).collect();
            loss_sum += self.train_step(&batch)?.combined();
            steps += 1;
        }
        let val_exact = self.validation_exact_match()?;
        let curriculum_done = self.cfg.mode == TrainMode::Teacher || self.epoch + 1 >= self.cfg.curriculum_epochs;
        let mut stop = false;
        if let (Some(v), true) = (val_exact, curriculum_done) {
            if self.cfg.target_exact.is_some_and(|t| v >= t) {
                stop = true;
            }
            if v > self.best {
                self.best = v;
                self.stale = 0;
            } else {
                self.stale += 1;
                stop |= self.stale >= self.cfg.patience;
            }
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            mean_loss: loss_sum / steps as f64,
            val_exact,
            stop,
        };
        self.epoch += 1;
        self.finished = stop;
        Ok(summary)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochSummary, &Trainer<'a>) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let s = self.run_epoch()?;
            on_epoch(&s, self)?;
        }
        Ok(())
    }
}

/// Loads the teacher a fine-tuning run starts from.
pub fn load_teacher(path: &Path) -> Result<ModelParams> {
    if !path.exists() {
        return Err(Error::Missing(format!(
            "teacher checkpoint {} (train a teacher first)",
            path.display()
        )));
    }
    Ok(read_checkpoint(path)?.params)
}

/// Fine-tunes the teacher at `teacher` for outline-then-fill decoding.
pub fn train_saic(
    train: &[TrainPair],
    val: &[TrainPair],
    teacher: &Path,
    cfg: TrainConfig,
    on_epoch: impl FnMut(&EpochSummary, &Trainer<'_>) -> Result<()>,
) -> Result<(ModelParams, Vec<LogRow>)> {
    if cfg.mode != TrainMode::Saic {
        return contract("train_saic needs a saic-mode configuration");
    }
    if train.iter().any(|p| p.distilled.is_none()) {
        return Err(Error::Missing("distilled targets for every training pair".into()));
    }
    let params = load_teacher(teacher)?;
    let mut t = Trainer::new(cfg, params, train, val)?;
    t.run(on_epoch)?;
    let log = t.log().to_vec();
    Ok((t.into_params(), log))
}
