//! End-to-end pipelines behind the subcommands. Each writes into its own run
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mlim_core::config::RunConfig;
use mlim_core::data::{generate_pair_split, sample_corpus, sample_eval_corpus, PairExample};
use mlim_core::eval::{self, AblationData, AblationEvent, AblationReport, Asymmetry, ProbeCurve};
use mlim_core::rng::{stream, Stream};
use mlim_core::training::{self, hex, Corpus, Finetuner, Pretrainer};
use mlim_core::{Error, Mlim, ParamStore};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Dtype};
use crate::error::{AppError, AppResult};
use crate::manifest;
use crate::report;
use crate::settings;
use crate::trainlog::{CsvLog, FINETUNE_COLUMNS, PRETRAIN_COLUMNS};

pub const CONFIG_ECHO: &str = "config.json";
pub const PRETRAIN_LOG: &str = "train_log.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const PRETRAINED: &str = "pretrained.ckpt";
pub const FINETUNED: &str = "finetuned.ckpt";
pub const METRICS: &str = "metrics.json";
pub const PROBE_RESULTS: &str = "probe.json";
pub const ABLATION_RESULTS: &str = "ablation.json";

const CHECKPOINT_EVERY: usize = 500;
const LOG_EVERY: usize = 100;

/// Creates `<out>/<command>-<UTC timestamp>`, adding a counter on collision,
/// and writes the resolved config there.
pub fn create_run_dir(out: &Path, command: &str, cfg: &RunConfig) -> AppResult<PathBuf> {
    fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{command}-{stamp}");
    let mut dir = out.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = out.join(format!("{base}-{k}"));
        k += 1;
    }
    fs::create_dir(&dir).map_err(|e| AppError::io(&dir, e))?;
    let echo = dir.join(CONFIG_ECHO);
    fs::write(&echo, settings::to_pretty_json(cfg)).map_err(|e| AppError::io(&echo, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s).map_err(|e| AppError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::format(path, e.to_string()))
}

/// Pre-training corpus: loaded from `data.corpus_dir` or sampled from the seed.
pub fn corpus(cfg: &RunConfig) -> AppResult<Corpus> {
    let side = cfg.model.image_side;
    match &cfg.data.corpus_dir {
        Some(dir) => manifest::load_corpus(Path::new(dir), side),
        None => Ok(Corpus::from_items(&sample_corpus(cfg.data.n_items, cfg.seed, side)?, side)?),
    }
}

/// Train/test pairs: read from `data.corpus_dir` when it holds pair files,
/// otherwise generated from the seed.
pub fn pairs(cfg: &RunConfig) -> AppResult<(Vec<PairExample>, Vec<PairExample>)> {
    if let Some(dir) = &cfg.data.corpus_dir {
        let (train, test) = (Path::new(dir).join(manifest::PAIRS_TRAIN), Path::new(dir).join(manifest::PAIRS_TEST));
        if train.exists() && test.exists() {
            return Ok((manifest::read_pairs(&train)?, manifest::read_pairs(&test)?));
        }
    }
    let d = &cfg.data;
    Ok(generate_pair_split(d.n_pairs_train, d.n_pairs_test, cfg.seed, d.match_fraction, cfg.model.image_side)?)
}

/// Held-out probe items, disjoint in sampling stream from the training corpus.
pub fn eval_corpus(cfg: &RunConfig) -> AppResult<Corpus> {
    let side = cfg.model.image_side;
    Ok(Corpus::from_items(&sample_eval_corpus(cfg.probe.n_eval, cfg.seed, side)?, side)?)
}

pub fn gen_data(cfg: &RunConfig, dir: &Path) -> AppResult<()> {
    let side = cfg.model.image_side;
    let items = sample_corpus(cfg.data.n_items, cfg.seed, side)?;
    manifest::write_corpus(&items, side, dir)?;
    let d = &cfg.data;
    let (train, test) = generate_pair_split(d.n_pairs_train, d.n_pairs_test, cfg.seed, d.match_fraction, side)?;
    manifest::write_pairs(&train, &dir.join(manifest::PAIRS_TRAIN))?;
    manifest::write_pairs(&test, &dir.join(manifest::PAIRS_TEST))?;
    info!("wrote {} items, {} train and {} test pairs to {}", items.len(), train.len(), test.len(), dir.display());
    Ok(())
}

fn abort(err: Error, last_good: Option<&(PathBuf, usize)>) -> AppError {
    match (err, last_good) {
        (Error::NonFinite(what), Some((path, step))) => AppError::Core(Error::NonFinite(format!(
            "{what}; last good checkpoint: {} (after {step} steps)",
            path.display()
        ))),
        (Error::NonFinite(what), None) => {
            AppError::Core(Error::NonFinite(format!("{what}; no checkpoint was written before the failure")))
        }
        (e, _) => e.into(),
    }
}

/// Pre-trains from a fresh initialization; returns the checkpoint path.
pub fn pretrain(cfg: &RunConfig, dir: &Path) -> AppResult<PathBuf> {
    let model = Mlim::new(cfg.model.clone())?;
    let corpus = corpus(cfg)?;
    let mut params = model.init_params(&mut stream(cfg.seed, Stream::Init));
    info!("pre-training {} parameters on {} items for {} steps", params.numel(), corpus.len(), cfg.pretrain.steps);
    let mut log = CsvLog::create(&dir.join(PRETRAIN_LOG), &PRETRAIN_COLUMNS)?;
    let mut trainer = Pretrainer::new(&model, &params, &corpus, &cfg.pretrain, &cfg.mam, cfg.seed)?;
    let path = dir.join(PRETRAINED);
    let mut last_good = None;
    while !trainer.finished() {
        let rec = trainer.step(&mut params).map_err(|e| abort(e, last_good.as_ref()))?;
        log.pretrain(&rec)?;
        let done = trainer.steps_done();
        if done % LOG_EVERY == 0 {
            info!("step {done}: mlm {:.4} recon {:.4} total {:.4}", rec.mlm, rec.recon, rec.total);
        }
        if done % CHECKPOINT_EVERY == 0 || trainer.finished() {
            log.flush()?;
            let ckpt = Checkpoint { params: params.clone(), optimizer: Some(trainer.optimizer.clone()), config: cfg.clone() };
            checkpoint::save(&ckpt, &path, Dtype::F32)?;
            last_good = Some((path.clone(), done));
        }
    }
    log.flush()?;
    Ok(path)
}

/// Loads a checkpoint and checks it against the model in `cfg`.
pub fn load_params(cfg: &RunConfig, path: &Path) -> AppResult<(Mlim, ParamStore)> {
    let ckpt = checkpoint::load(path)?;
    let model = Mlim::new(cfg.model.clone())?;
    model.check_params(&ckpt.params).map_err(|e| AppError::format(path, e.to_string()))?;
    Ok((model, ckpt.params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pr_auc: f64,
    pub n_test: usize,
    pub steps: usize,
    pub mdo: bool,
}

/// Fine-tunes a pre-trained checkpoint on the pair task and scores the test
/// split.
pub fn finetune(cfg: &RunConfig, from: &Path, dir: &Path) -> AppResult<Metrics> {
    let (model, mut params) = load_params(cfg, from)?;
    let (train, test) = pairs(cfg)?;
    let mut log = CsvLog::create(&dir.join(FINETUNE_LOG), &FINETUNE_COLUMNS)?;
    let mut trainer = Finetuner::new(&model, &params, &train, &cfg.finetune, &cfg.mdo, cfg.seed)?;
    let path = dir.join(FINETUNED);
    let mut last_good = None;
    while !trainer.finished() {
        let rec = trainer.step(&mut params).map_err(|e| abort(e, last_good.as_ref()))?;
        log.finetune(&rec)?;
        let done = trainer.steps_done();
        if done % LOG_EVERY == 0 {
            info!("step {done}: loss {:.4}", rec.loss);
        }
        if done % CHECKPOINT_EVERY == 0 || trainer.finished() {
            log.flush()?;
            let ckpt = Checkpoint { params: params.clone(), optimizer: Some(trainer.optimizer.clone()), config: cfg.clone() };
            checkpoint::save(&ckpt, &path, Dtype::F32)?;
            last_good = Some((path.clone(), done));
        }
    }
    log.flush()?;
    let scores = training::score_pairs(&model, &params, &test)?;
    let labels: Vec<u8> = test.iter().map(|p| p.label).collect();
    let metrics = Metrics { pr_auc: eval::pr_auc(&scores, &labels)?, n_test: test.len(), steps: cfg.finetune.steps, mdo: cfg.mdo.enabled };
    write_json(&dir.join(METRICS), &metrics)?;
    info!("test PR-AUC {:.4}", metrics.pr_auc);
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResults {
    pub curves: Vec<ProbeCurve>,
    pub asymmetry: Option<Asymmetry>,
}

pub fn probe(cfg: &RunConfig, from: &Path, dir: &Path) -> AppResult<ProbeResults> {
    let (model, params) = load_params(cfg, from)?;
    let corpus = eval_corpus(cfg)?;
    let curves = eval::probe_all(&model, &params, &corpus, &cfg.probe, cfg.seed)?;
    let results = ProbeResults { asymmetry: eval::asymmetry(&curves), curves };
    write_json(&dir.join(PROBE_RESULTS), &results)?;
    report::emit_report(&results.curves, &[], results.asymmetry.as_ref(), dir)?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seed: u64,
    pub variant: String,
    pub init_sha256: String,
    pub pretrain_order_sha256: String,
    pub finetune_order_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub rows: Vec<eval::AblationRow>,
    pub fair: bool,
    pub audits: Vec<AuditRecord>,
}

impl From<&AblationReport> for AblationResults {
    fn from(r: &AblationReport) -> Self {
        AblationResults {
            rows: r.rows.clone(),
            fair: r.is_fair(),
            audits: r
                .audits
                .iter()
                .map(|a| AuditRecord {
                    seed: a.seed,
                    variant: a.variant.clone(),
                    init_sha256: hex(&a.init),
                    pretrain_order_sha256: hex(&a.pretrain_order),
                    finetune_order_sha256: hex(&a.finetune_order),
                })
                .collect(),
        }
    }
}

pub fn ablate(cfg: &RunConfig, dir: &Path) -> AppResult<AblationResults> {
    let corpus = corpus(cfg)?;
    let (train, test) = pairs(cfg)?;
    let data = AblationData { corpus: &corpus, train_pairs: &train, test_pairs: &test };
    let report = eval::run_ablation(cfg, &cfg.ablation.variants, &cfg.ablation.seeds, &data, |ev| match ev {
        AblationEvent::Started { variant, seed } => info!("variant `{variant}`, seed {seed}"),
        AblationEvent::Finished { variant, seed, pr_auc } => info!("variant `{variant}`, seed {seed}: PR-AUC {pr_auc:.4}"),
        AblationEvent::Pretrained { .. } => {}
    })?;
    let results = AblationResults::from(&report);
    write_json(&dir.join(ABLATION_RESULTS), &results)?;
    report::emit_report(&[], &results.rows, None, dir)?;
    Ok(results)
}

/// Re-renders the CSV/SVG report from the results of an earlier probe or
/// ablation run.
pub fn report(from: &Path, dir: &Path) -> AppResult<Vec<PathBuf>> {
    let probe = from.join(PROBE_RESULTS);
    let ablation = from.join(ABLATION_RESULTS);
    let probe: Option<ProbeResults> = probe.exists().then(|| read_json(&probe)).transpose()?;
    let ablation: Option<AblationResults> = ablation.exists().then(|| read_json(&ablation)).transpose()?;
    if probe.is_none() && ablation.is_none() {
        return Err(AppError::Config(format!(
            "{} holds neither {PROBE_RESULTS} nor {ABLATION_RESULTS}",
            from.display()
        )));
    }
    let curves = probe.as_ref().map(|p| p.curves.as_slice()).unwrap_or(&[]);
    let rows = ablation.as_ref().map(|a| a.rows.as_slice()).unwrap_or(&[]);
    report::emit_report(curves, rows, probe.as_ref().and_then(|p| p.asymmetry.as_ref()), dir)
}
