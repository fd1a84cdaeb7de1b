use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::CommandFactory;
use saic_core::bench::{cost_of, measure_latency, CostModel, CostReport};
use saic_core::dataset::{
    read_dataset, tsv, write_atomic, write_dataset, write_distilled, Record, StoredDataset, SPLIT_HEADER,
};
use saic_core::decoding::{DecodeConfig, DecodeRecord, LengthSource, Strategy};
use saic_core::experiment::{
    default_grid, mask_table, plot_data, run_masking_experiment, run_refinement_check, teacher_hypotheses,
    ExperimentInputs, MaskExpConfig, MaskFamily, RefineRow, HYPOTHESIS_BEAM,
};
use saic_core::metrics::evaluate;
use saic_core::model::{read_checkpoint, write_checkpoint, InferenceModel, ModelConfig, ModelParams, SceneFeatures};
use saic_core::seed::derive;
use saic_core::taskgen::gen_dataset;
use saic_core::tokens::TokenId;
use saic_core::training::{
    generate_distillation_set, load_teacher, LogRow, TrainConfig, TrainPair, Trainer, DISTILL_BEAM,
};

use crate::config::ConfigFile;
use crate::{
    BenchArgs, Cli, DecodeArgs, DistillArgs, EvalArgs, GenArgs, MaskExpArgs, SaicArgs, TeacherArgs, TrainCommon,
};

const DEFAULT_MAX_LEN: usize = 32;

fn path(f: &ConfigFile, key: &str, flag: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
    f.get(key, flag.clone(), PathBuf::from(default))
}

fn dataset(f: &ConfigFile, flag: &Option<PathBuf>) -> Result<(PathBuf, StoredDataset)> {
    let dir = path(f, "data", flag, "data")?;
    let ds = read_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok((dir, ds))
}

fn model(path: &Path, what: &str) -> Result<InferenceModel> {
    let ck = read_checkpoint(path).with_context(|| format!("loading {what} checkpoint"))?;
    Ok(InferenceModel::new(&ck.params))
}

/// Writes `text` to `out`, or to stdout without one.
fn emit(out: Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(&p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
        None => stdout(text),
    }
}

/// A closed pipe downstream is not an error.
fn stdout(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn usage_error(msg: String) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, msg).exit()
}

pub fn gen(f: &ConfigFile, seed: u64, a: &GenArgs) -> Result<()> {
    let n = f.get("n", a.n, 2000usize)?;
    let out = path(f, "out", &a.out, "data")?;
    let ds = gen_dataset(n, seed)?;
    write_dataset(&out, &ds).with_context(|| format!("writing dataset to {}", out.display()))?;
    eprintln!(
        "wrote {n} scenes to {} ({}/{}/{} train/val/test)",
        out.display(),
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.test.len()
    );
    Ok(())
}

fn train_config(f: &ConfigFile, seed: u64, a: &TrainCommon, base: TrainConfig, label: &str) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        epochs: f.get("epochs", a.epochs, base.epochs)?,
        curriculum_epochs: f.get("curriculum_epochs", a.curriculum_epochs, base.curriculum_epochs)?,
        batch_size: f.get("batch_size", a.batch_size, base.batch_size)?,
        lr: f.get("lr", a.lr, base.lr)?,
        lr_decay: f.get("lr_decay", a.lr_decay, base.lr_decay)?,
        decay_every: f.get("decay_every", a.decay_every, base.decay_every)?,
        clip_norm: f.get_maybe("clip_norm", a.clip_norm.clone(), base.clip_norm)?,
        patience: f.get("patience", a.patience, base.patience)?,
        target_exact: f.get_maybe("target_exact", a.target_exact.clone(), base.target_exact)?,
        k: f.get("k", a.k, base.k)?,
        p_hybr: f.get("p_hybr", a.p_hybr, base.p_hybr)?,
        lambda: f.get("lambda", a.lambda, base.lambda)?,
        max_len: f.get("max_len", a.max_len, base.max_len)?,
        seed: derive(seed, label),
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains, writing the checkpoint and the log after every epoch.
fn run_training(
    f: &ConfigFile,
    a: &TrainCommon,
    cfg: TrainConfig,
    init: impl FnOnce() -> Result<ModelParams>,
    train: &[TrainPair],
    val: &[TrainPair],
    default_out: &str,
) -> Result<()> {
    let out = path(f, "out", &a.out, default_out)?;
    let log = f.get(
        "log",
        a.log.clone(),
        PathBuf::from(format!("{}.log.tsv", out.display())),
    )?;
    let header = format!("{}\n", LogRow::HEADER);
    let (mut trainer, mut log_text) = if f.get("resume", a.resume, false)? {
        let ck = read_checkpoint(&out).with_context(|| format!("resuming from {}", out.display()))?;
        let text = fs::read_to_string(&log).unwrap_or_else(|_| header.clone());
        (Trainer::resume(cfg, ck, train, val)?, text)
    } else {
        (Trainer::new(cfg, init()?, train, val)?, header)
    };
    if trainer.is_finished() {
        eprintln!("{} is already fully trained", out.display());
        return Ok(());
    }
    let mut written = 0;
    trainer.run(|s, t| {
        for row in &t.log()[written..] {
            log_text.push_str(&row.to_line());
            log_text.push('\n');
        }
        written = t.log().len();
        write_atomic(&log, log_text.as_bytes())?;
        write_checkpoint(&out, &t.checkpoint())?;
        let val = s.val_exact.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        eprintln!(
            "epoch {:>2}  step {:>5}  p_g {:.2}  loss {:.4}  val_exact {val}",
            s.epoch,
            t.step(),
            t.p_g(t.step().saturating_sub(1)),
            s.mean_loss
        );
        Ok(())
    })?;
    eprintln!("wrote {} and {}", out.display(), log.display());
    Ok(())
}

pub fn train_teacher(f: &ConfigFile, seed: u64, a: &TeacherArgs) -> Result<()> {
    let (_, ds) = dataset(f, &a.train.data)?;
    let cfg = train_config(f, seed, &a.train, TrainConfig::teacher(), "train/teacher")?;
    let mut mc = ModelConfig::desk(ds.vocab.len(), ds.feature_dim());
    mc.rpr_window = cfg.k;
    mc.max_len = cfg.max_len;
    for (key, flag) in [
        ("layers", a.layers),
        ("d_model", a.d_model),
        ("d_ff", a.d_ff),
        ("heads", a.heads),
        ("rpr_window", a.rpr_window),
    ] {
        let current = mc
            .to_pairs()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .unwrap_or(0);
        mc.set(key, f.get(key, flag, current)?);
    }
    let train = ds.pairs("train")?;
    let val = ds.pairs("val")?;
    let init = || Ok(ModelParams::init(mc, derive(seed, "init"))?);
    run_training(f, &a.train, cfg, init, &train, &val, "teacher.ckpt")
}

pub fn distill(f: &ConfigFile, a: &DistillArgs) -> Result<()> {
    let (dir, mut ds) = dataset(f, &a.data)?;
    let teacher_path = path(f, "teacher", &a.teacher, "teacher.ckpt")?;
    let teacher = model(&teacher_path, "teacher")?;
    let beam = f.get("beam", a.beam, DISTILL_BEAM)?;
    let max_len = f.get("max_len", a.max_len, DEFAULT_MAX_LEN)?;
    let records = ds.split("train")?.to_vec();
    let targets = generate_distillation_set(
        &teacher,
        records.iter().map(|r| &ds.features[r.scene_id]),
        beam,
        max_len,
    )?;
    let cut = targets.iter().filter(|t| !t.terminated).count();
    let map: BTreeMap<usize, Vec<TokenId>> = records
        .iter()
        .zip(targets)
        .map(|(r, t)| (r.scene_id, t.tokens))
        .collect();
    write_distilled(&dir, &mut ds, &map)?;
    eprintln!("distilled {} training captions ({cut} hit the length limit)", map.len());
    Ok(())
}

pub fn train_saic(f: &ConfigFile, seed: u64, a: &SaicArgs) -> Result<()> {
    let (dir, ds) = dataset(f, &a.train.data)?;
    let cfg = train_config(f, seed, &a.train, TrainConfig::saic(), "train/saic")?;
    let teacher = path(f, "teacher", &a.teacher, "teacher.ckpt")?;
    let train = ds.pairs("train")?;
    if train.iter().any(|p| p.distilled.is_none()) {
        bail!("{} has no distilled targets; run `saic distill` first", dir.display());
    }
    let val = ds.pairs("val")?;
    let init = || Ok(load_teacher(&teacher)?);
    if !f.get("resume", a.train.resume, false)? {
        load_teacher(&teacher)?;
    }
    run_training(f, &a.train, cfg, init, &train, &val, "saic.ckpt")
}

fn parse_length(s: &str) -> Result<LengthSource> {
    if s == "oracle" {
        return Ok(LengthSource::Oracle);
    }
    s.parse()
        .map(LengthSource::Fixed)
        .map_err(|_| anyhow!("length must be `oracle` or a number, got {s:?}"))
}

pub fn decode(f: &ConfigFile, a: &DecodeArgs) -> Result<()> {
    let strategy: Strategy = f.get("strategy", a.strategy.clone(), "saic".to_string())?.parse()?;
    let m_out = f.get("m_out", a.m_out, 1usize)?;
    let m_fill = f.get("m_fill", a.m_fill, 1usize)?;
    if m_fill > m_out {
        usage_error(format!(
            "--m-fill ({m_fill}) must not exceed --m-out ({m_out}): the filler completes outliner candidates"
        ));
    }
    let cfg = DecodeConfig {
        strategy,
        k: f.get("k", a.k, 4usize)?,
        m_out,
        m_fill,
        iterations: f.get("iters", a.iters, 1usize)?,
        max_len: f.get("max_len", a.max_len, DEFAULT_MAX_LEN)?,
        length: parse_length(&f.get("length", a.length.clone(), "oracle".to_string())?)?,
    };
    cfg.validate()?;
    let timing = f.get("timing", a.timing, true)?;
    let (_, ds) = dataset(f, &a.data)?;
    let ckpt = path(f, "checkpoint", &a.checkpoint, "saic.ckpt")?;
    let model = model(&ckpt, "model")?;
    let split = f.get("split", a.split.clone(), "test".to_string())?;
    let mut lines = Vec::new();
    for r in ds.split(&split)? {
        let (mut rec, _) = DecodeRecord::timed(
            r.scene_id.to_string(),
            &model,
            &ds.features[r.scene_id],
            &cfg,
            Some(&r.raw),
        )?;
        if !timing {
            rec.latency_us = 0.0;
        }
        lines.push(rec.to_line());
    }
    emit(f.get_opt("out", a.out.clone())?, &tsv(DecodeRecord::HEADER, lines))
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(item)
        .collect()
}

pub fn mask_exp(f: &ConfigFile, seed: u64, a: &MaskExpArgs) -> Result<()> {
    let (_, ds) = dataset(f, &a.data)?;
    let teacher = model(&path(f, "teacher", &a.teacher, "teacher.ckpt")?, "teacher")?;
    let filler = model(&path(f, "filler", &a.filler, "saic.ckpt")?, "filler")?;
    let defaults = MaskExpConfig::default();
    let grid = match f.get_opt::<String>("grid", a.grid.clone())? {
        Some(s) => parse_list(&s, |t| t.parse::<f64>().map_err(|_| anyhow!("bad masking rate {t:?}")))?,
        None => default_grid(),
    };
    let families = match f.get_opt::<String>("strategies", a.strategies.clone())? {
        Some(s) => parse_list(&s, |t| Ok(MaskFamily::parse(t)?))?,
        None => defaults.families.clone(),
    };
    let cfg = MaskExpConfig {
        families,
        grid,
        random_runs: f.get("random_runs", a.random_runs, defaults.random_runs)?,
        filler_k: f.get("filler_k", a.filler_k, defaults.filler_k)?,
        seed: derive(seed, "mask-exp"),
    };
    let split = f.get("split", a.split.clone(), "test".to_string())?;
    let records = ds.split(&split)?;
    let feats: Vec<&SceneFeatures> = records.iter().map(|r| &ds.features[r.scene_id]).collect();
    let max_len = f.get("max_len", a.max_len, DEFAULT_MAX_LEN)?;
    let hyps = teacher_hypotheses(&teacher, &feats, HYPOTHESIS_BEAM, max_len)?;
    let refs = records.iter().map(|r| r.raw.clone()).collect();
    let inputs = ExperimentInputs::new(&filler, &feats, hyps, refs)?;
    let rows = run_masking_experiment(&filler, &inputs, &cfg)?;
    let refine = run_refinement_check(&filler, &inputs, cfg.filler_k, &[(1, 1), (1, 5), (5, 1), (5, 5)])?;

    let out = path(f, "out", &a.out, "mask-exp")?;
    fs::create_dir_all(&out)?;
    let table = mask_table(&rows);
    write_atomic(&out.join("mask_table.tsv"), table.as_bytes())?;
    write_atomic(&out.join("mask_plot.dat"), plot_data(&rows).as_bytes())?;
    let refine_text = tsv(RefineRow::HEADER, refine.iter().map(RefineRow::to_line));
    write_atomic(&out.join("refine.tsv"), refine_text.as_bytes())?;
    stdout(&format!("{table}\n{refine_text}"))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

const GRID_N: [u64; 4] = [8, 16, 32, 64];
const GRID_K: [u64; 4] = [2, 3, 4, 8];
const GRID_I: [u64; 3] = [1, 3, 5];

fn analytic_table() -> Result<String> {
    let mut rows = Vec::new();
    for q in [CostModel::Constant, CostModel::Linear] {
        for n in GRID_N {
            for s in Strategy::ALL {
                let settings: Vec<(u64, u64)> = match s {
                    Strategy::Saic => GRID_K.iter().map(|&k| (k, 1)).collect(),
                    Strategy::IrNaic => GRID_I.iter().map(|&i| (1, i)).collect(),
                    _ => vec![(1, 1)],
                };
                for (k, i) in settings {
                    let c = cost_of(s, n, k, i, q)?;
                    rows.push(format!("{q}\t{s}\t{n}\t{k}\t{i}\t{}\t{}", c.steps, c.cost));
                }
            }
        }
    }
    Ok(tsv(
        "cost_model\tstrategy\tn\tk\titerations\tsteps\tabstract_cost",
        rows,
    ))
}

pub fn bench(f: &ConfigFile, a: &BenchArgs) -> Result<()> {
    let q: CostModel = f
        .get("cost_model", a.cost_model.clone(), "linear".to_string())?
        .parse()?;
    let out = f.get_opt("out", a.out.clone())?;
    if f.get("analytic", a.analytic, false)? {
        return emit(out, &analytic_table()?);
    }
    let (_, ds) = dataset(f, &a.data)?;
    let teacher = model(&path(f, "teacher", &a.teacher, "teacher.ckpt")?, "teacher")?;
    let saic = model(&path(f, "checkpoint", &a.checkpoint, "saic.ckpt")?, "model")?;
    let k = f.get("k", a.k, 4usize)?;
    let base = DecodeConfig {
        k,
        max_len: f.get("max_len", a.max_len, DEFAULT_MAX_LEN)?,
        ..DecodeConfig::default()
    };
    let configs = [
        DecodeConfig {
            strategy: Strategy::Aic,
            ..base
        },
        DecodeConfig {
            strategy: Strategy::Naic,
            ..base
        },
        DecodeConfig {
            strategy: Strategy::IrNaic,
            iterations: f.get("iters", a.iters, 5usize)?,
            ..base
        },
        base,
        DecodeConfig { m_out: 5, ..base },
    ];
    let split = f.get("split", a.split.clone(), "test".to_string())?;
    let records = ds.split(&split)?;
    let scenes: Vec<(&SceneFeatures, &[TokenId])> = records
        .iter()
        .map(|r| (&ds.features[r.scene_id], r.raw.as_slice()))
        .collect();
    let runs = f.get("runs", a.runs, 3usize)?;
    let mean_len = records.iter().map(|r| r.raw.len()).sum::<usize>() as f64 / records.len().max(1) as f64;
    eprintln!(
        "timing {} scenes (mean caption length {mean_len:.2}) over {runs} runs",
        records.len()
    );
    let reports = measure_latency(&teacher, &saic, &configs, &scenes, runs, q)?;
    emit(out, &tsv(CostReport::HEADER, reports.iter().map(CostReport::to_line)))
}

/// Outputs by scene id from decode records or a split file.
fn read_outputs(path: &Path) -> Result<BTreeMap<usize, Vec<TokenId>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let mut out = BTreeMap::new();
    for line in lines {
        let (id, tokens) = if header == DecodeRecord::HEADER {
            let r = DecodeRecord::parse(line)?;
            (
                r.id.parse::<usize>().map_err(|_| anyhow!("bad scene id {:?}", r.id))?,
                r.tokens,
            )
        } else if header == SPLIT_HEADER {
            let r = Record::parse(line)?;
            (r.scene_id, r.raw)
        } else {
            bail!("{} is neither decode output nor a split file", path.display());
        };
        if out.insert(id, tokens).is_some() {
            bail!("scene {id} appears twice in {}", path.display());
        }
    }
    Ok(out)
}

pub fn eval(f: &ConfigFile, a: &EvalArgs) -> Result<()> {
    let (_, ds) = dataset(f, &a.data)?;
    let input: PathBuf = f
        .get_opt("input", a.input.clone())?
        .ok_or_else(|| anyhow!("eval needs --input (decode records or a split file)"))?;
    let split = f.get("split", a.split.clone(), "test".to_string())?;
    let mut outputs = read_outputs(&input)?;
    let records = ds.split(&split)?;
    let mut hyps = Vec::with_capacity(records.len());
    for r in records {
        hyps.push(
            outputs
                .remove(&r.scene_id)
                .ok_or_else(|| anyhow!("{} has no output for scene {}", input.display(), r.scene_id))?,
        );
    }
    if let Some(id) = outputs.keys().next() {
        bail!(
            "{} has output for scene {id}, which is not in the {split} split",
            input.display()
        );
    }
    let refs: Vec<Vec<TokenId>> = records.iter().map(|r| r.raw.clone()).collect();
    let rep = evaluate(&hyps, &refs)?;
    let line = format!(
        "{split}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.2}",
        records.len(),
        rep.exact_match,
        rep.bleu4,
        rep.repetition_rate,
        rep.mean_length
    );
    emit(
        f.get_opt("out", a.out.clone())?,
        &tsv("split\tcount\texact_match\tbleu4\trepetition_rate\tmean_length", [line]),
    )
}
