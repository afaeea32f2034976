//! Training loops: the reference model on the curated subset, the main
//! alignment run with residue selection, and grids of ablation runs.
//!
//! All randomness is derived from the run seed and the epoch / batch
//! counters, so a run resumed from an end-of-epoch checkpoint replays the
//! uninterrupted run exactly.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    self, Batch, ProteinRecord, DEFAULT_BATCH_RECORDS, DEFAULT_MASK_RATE, DEFAULT_MAX_LEN,
};
use crate::error::{Error, Result};
use crate::losses::{self, LossValues, LossWeights, SelectionMasks};
use crate::model::{
    ModelBundle, PlmConfig, DEFAULT_PEAK_LR_BACKBONE, DEFAULT_PEAK_LR_HEADS, DEFAULT_WEIGHT_DECAY,
};
use crate::nn::{adamw_step, clip_grad_norm, lr_at, AdamWConfig, AdamWState, Schedule, Tape};
use crate::rng::{derive_seed, stream};
use crate::selection::{selection_masks, AuditWriter, SelectionStrategy, StrategyKind};
use crate::synthgen::{surrogate_gnn_embed, EmbedConfig};
use crate::tokenizer::{self, Codebook};

pub const METRICS_FILE: &str = "logs/metrics.jsonl";
pub const AUDIT_FILE: &str = "logs/selection_audit.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.json";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.json";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr_backbone: f64,
    pub peak_lr_heads: f64,
    pub weight_decay: f64,
    pub rho: f64,
    pub gamma_latent: f64,
    pub gamma_physical: f64,
    pub strategy: StrategyKind,
    /// When false, every residue is kept and the selection code is never
    /// consulted.
    pub selection: bool,
    pub seed: u64,
    pub batch_records: usize,
    pub max_len: usize,
    pub mask_rate: f64,
    pub val_fraction: f64,
    pub clip_norm: Option<f64>,
    /// Write the per-residue selection log.
    pub audit: bool,
    pub model: PlmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 2,
            peak_lr_backbone: DEFAULT_PEAK_LR_BACKBONE,
            peak_lr_heads: DEFAULT_PEAK_LR_HEADS,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            rho: 0.8,
            gamma_latent: 0.5,
            gamma_physical: 0.5,
            strategy: StrategyKind::Excess,
            selection: true,
            seed: 0,
            batch_records: DEFAULT_BATCH_RECORDS,
            max_len: DEFAULT_MAX_LEN,
            mask_rate: DEFAULT_MASK_RATE,
            val_fraction: 0.1,
            clip_norm: None,
            audit: false,
            model: PlmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "need warmup_epochs ({}) < epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.peak_lr_backbone > 0.0 && self.peak_lr_heads > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho {} outside (0, 1]", self.rho));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask rate {} outside (0, 1)", self.mask_rate));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!(
                "validation fraction {} outside [0, 1)",
                self.val_fraction
            ));
        }
        if self.batch_records == 0 || self.max_len < 2 || self.max_len > self.model.max_len {
            return bad(format!(
                "batch size {} / truncation length {} invalid for model max_len {}",
                self.batch_records, self.max_len, self.model.max_len
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip norm must be positive".into());
            }
        }
        self.weights()?;
        self.strategy()?;
        self.model.validate()
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.gamma_latent, self.gamma_physical)
    }

    pub fn strategy(&self) -> Result<SelectionStrategy> {
        let rho = if self.strategy == StrategyKind::Full {
            1.0
        } else {
            self.rho
        };
        SelectionStrategy::new(self.strategy, rho)
    }
}

/// Mean loss components over one epoch of training and over validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub train: LossValues,
    pub val: Option<LossValues>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_val: Option<f64>,
}

impl History {
    pub fn last_val(&self) -> Option<LossValues> {
        self.epochs.last().and_then(|e| e.val)
    }
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub history: History,
}

/// Where a run writes its artifacts. Without a directory nothing is written.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from this end-of-epoch checkpoint.
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs (used to produce mid-run
    /// checkpoints); the schedule still spans the configured epochs.
    pub stop_after: Option<usize>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    step: usize,
    epoch: usize,
    lr_backbone: f64,
    lr_heads: f64,
    #[serde(flatten)]
    losses: &'a LossValues,
    residues: usize,
    masked: usize,
    selected_a2g: usize,
    selected_g2a: usize,
    selected_physical: usize,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    step: usize,
    epoch: usize,
    split: &'static str,
    #[serde(flatten)]
    losses: &'a LossValues,
}

/// Fills in missing structure embeddings (with the surrogate encoder) and
/// missing structure tokens (with a codebook fit to the corpus). Returns the
/// codebook when one had to be fit.
pub fn ensure_structure_inputs(
    records: &mut [ProteinRecord],
    model: &PlmConfig,
    seed: u64,
) -> Result<Option<Codebook>> {
    let embed = EmbedConfig {
        dim: model.gnn_dim,
        ..EmbedConfig::default()
    };
    for r in records.iter_mut() {
        if r.gnn_embedding.is_none() {
            r.gnn_embedding = Some(surrogate_gnn_embed(&r.coords, &embed)?);
        }
        if r.embed_dim() != Some(model.gnn_dim) {
            return Err(Error::Data(format!(
                "record {} has structure embeddings of width {:?}, model expects {}",
                r.id,
                r.embed_dim(),
                model.gnn_dim
            )));
        }
    }
    if records.iter().all(|r| r.structure_tokens.is_some()) {
        if let Some(r) = records.iter().find(|r| {
            r.structure_tokens
                .as_ref()
                .unwrap()
                .iter()
                .any(|&t| t >= model.struct_vocab)
        }) {
            return Err(Error::Data(format!(
                "record {} has structure tokens beyond K = {}",
                r.id, model.struct_vocab
            )));
        }
        return Ok(None);
    }
    let cb = tokenizer::fit_codebook(
        &tokenizer::corpus_descriptors(records)?,
        model.struct_vocab,
        seed,
        tokenizer::DEFAULT_MAX_ITERS,
    )?;
    tokenizer::tokenize_corpus(records, &cb)?;
    Ok(Some(cb))
}

fn mean_values(vals: &[LossValues]) -> LossValues {
    let n = vals.len().max(1) as f64;
    let mut m = LossValues::default();
    for v in vals {
        m.mlm += v.mlm / n;
        m.a2g += v.a2g / n;
        m.g2a += v.g2a / n;
        m.latent += v.latent / n;
        m.physical += v.physical / n;
        m.overall += v.overall / n;
    }
    m
}

/// Validation losses with every residue selected. Masking depends only on
/// the run seed and the epoch, so runs that differ in strategy or weights
/// see the same validation inputs.
pub fn validation_losses(
    bundle: &ModelBundle,
    val: &[ProteinRecord],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossValues> {
    let weights = cfg.weights()?;
    let batches = corpus::make_batches(
        val,
        cfg.batch_records,
        cfg.max_len,
        derive_seed(cfg.seed, &[stream::VAL_MASK]),
    )?;
    let mut vals = Vec::with_capacity(batches.len());
    for (b, recs) in batches.into_iter().enumerate() {
        let batch = Batch::with_masking(
            recs,
            cfg.mask_rate,
            derive_seed(cfg.seed, &[stream::VAL_MASK, epoch as u64, b as u64]),
        )?;
        vals.push(losses::evaluate(bundle, &batch, &weights)?);
    }
    Ok(mean_values(&vals))
}

struct Artifacts {
    dir: PathBuf,
    metrics: File,
    audit: Option<AuditWriter>,
}

impl Artifacts {
    fn open(dir: &Path, cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<Self> {
        for sub in ["checkpoints", "logs"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?)
            .map_err(|e| Error::io(&cfg_path, e))?;
        let mpath = dir.join(METRICS_FILE);
        let cpath = dir.join(CURVES_FILE);
        let apath = dir.join(AUDIT_FILE);
        let metrics = match resume {
            Some(c) => {
                truncate_jsonl(&mpath, c.step, c.epoch)?;
                truncate_curves(&cpath, c.epoch)?;
                OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(&mpath)
                    .map_err(|e| Error::io(&mpath, e))?
            }
            None => {
                let mut f = File::create(&cpath).map_err(|e| Error::io(&cpath, e))?;
                writeln!(f, "{}", CURVES_HEADER).map_err(|e| Error::io(&cpath, e))?;
                File::create(&mpath).map_err(|e| Error::io(&mpath, e))?
            }
        };
        let audit = if cfg.audit {
            Some(if resume.is_some() {
                AuditWriter::append(&apath)?
            } else {
                AuditWriter::create(&apath)?
            })
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            audit,
        })
    }

    fn line<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let s = serde_json::to_string(v)?;
        writeln!(self.metrics, "{}", s).map_err(|e| Error::io(self.dir.join(METRICS_FILE), e))
    }

    fn curve(&mut self, rec: &EpochRecord) -> Result<()> {
        let p = self.dir.join(CURVES_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        let v = rec.val.unwrap_or(LossValues {
            mlm: f64::NAN,
            a2g: f64::NAN,
            g2a: f64::NAN,
            latent: f64::NAN,
            physical: f64::NAN,
            overall: f64::NAN,
        });
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            rec.epoch,
            rec.step,
            rec.train.overall,
            v.mlm,
            v.a2g,
            v.g2a,
            v.latent,
            v.physical,
            v.overall
        )
        .map_err(|e| Error::io(&p, e))
    }
}

pub const CURVES_HEADER: &str =
    "epoch,step,train_overall,val_mlm,val_a2g,val_g2a,val_latent,val_physical,val_overall";

fn truncate_jsonl(path: &Path, step: usize, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut keep = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        let s = v["step"].as_u64().unwrap_or(u64::MAX) as usize;
        let e = v["epoch"].as_u64().unwrap_or(u64::MAX) as usize;
        let is_epoch_line = v.get("split").is_some();
        if s <= step && (!is_epoch_line || e < epoch) {
            keep.push(line);
        }
    }
    let mut out = keep.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn truncate_curves(path: &Path, epoch: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_else(|_| format!("{}\n", CURVES_HEADER));
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < epoch);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_compatible(a: &PlmConfig, b: &PlmConfig) -> Result<()> {
    if a.struct_vocab != b.struct_vocab || a.gnn_dim != b.gnn_dim {
        return Err(Error::InvalidArgument(format!(
            "reference model (K = {}, D_g = {}) does not match (K = {}, D_g = {})",
            b.struct_vocab, b.gnn_dim, a.struct_vocab, a.gnn_dim
        )));
    }
    Ok(())
}

/// The shared training loop.
fn run(
    mut bundle: ModelBundle,
    records: &[ProteinRecord],
    reference: Option<&ModelBundle>,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let strategy = cfg.strategy()?;
    let weights = cfg.weights()?;
    let use_reference = cfg.selection && strategy.needs_reference();
    if use_reference {
        let r = reference.ok_or_else(|| {
            Error::InvalidArgument("the excess strategy needs a reference model".into())
        })?;
        check_compatible(&bundle.config, &r.config)?;
    }
    if cfg.max_len > bundle.config.max_len {
        return Err(Error::InvalidArgument(
            "truncation length exceeds model max_len".into(),
        ));
    }
    bundle.set_learning_rates(cfg.peak_lr_backbone, cfg.peak_lr_heads, cfg.weight_decay)?;

    let (train, val) = if cfg.val_fraction > 0.0 && records.len() > 1 {
        corpus::split_validation(records, cfg.val_fraction, cfg.seed)
    } else {
        (records.to_vec(), Vec::new())
    };
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "no training records after the validation split".into(),
        ));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_records);
    let schedule = Schedule::new(
        (cfg.warmup_epochs * steps_per_epoch).max(1),
        cfg.epochs * steps_per_epoch,
    )?;

    let mut opt = AdamWState::new(&bundle.groups, AdamWConfig::default());
    let mut step = 0;
    let mut start_epoch = 0;
    let mut history = History::default();
    if let Some(c) = &opts.resume {
        if c.seed != cfg.seed {
            return Err(Error::InvalidArgument(format!(
                "checkpoint seed {} differs from run seed {}",
                c.seed, cfg.seed
            )));
        }
        bundle = c.bundle()?;
        opt = c
            .optimizer_state()?
            .ok_or_else(|| Error::Data("checkpoint has no optimizer state".into()))?;
        step = c.step;
        start_epoch = c.epoch;
        history = serde_json::from_value(c.extra.clone()).unwrap_or_default();
    }
    let mut art = match &opts.out_dir {
        Some(d) => Some(Artifacts::open(d, cfg, opts.resume.as_ref())?),
        None => None,
    };
    let last_good = |art: &Option<Artifacts>| {
        art.as_ref()
            .map(|a| a.dir.join(LAST_CHECKPOINT).display().to_string())
            .unwrap_or_else(|| "none (no run directory)".into())
    };

    let end_epoch = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in start_epoch..end_epoch {
        let batches = corpus::make_batches(
            &train,
            cfg.batch_records,
            cfg.max_len,
            derive_seed(cfg.seed, &[stream::SHUFFLE, epoch as u64]),
        )?;
        let mut epoch_vals = Vec::with_capacity(batches.len());
        for (b, recs) in batches.into_iter().enumerate() {
            step += 1;
            let batch = Batch::with_masking(
                recs,
                cfg.mask_rate,
                derive_seed(cfg.seed, &[stream::MASK, epoch as u64, b as u64]),
            )?;
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape, true)?;
            let graph = losses::residue_graph(&mut tape, &bound, &batch)?;
            let current = graph.values(&tape);
            let ref_losses = match (use_reference, reference) {
                (true, Some(r)) => Some(losses::residue_losses(r, &batch)?.0),
                _ => None,
            };
            let masks = if cfg.selection {
                selection_masks(&strategy, &current, ref_losses.as_ref())?
            } else {
                SelectionMasks::all(current.len())
            };
            let (loss, values) = losses::combine(&mut tape, &graph, &weights, &masks)?;
            if !values.overall.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {}; last good checkpoint: {}",
                    step,
                    last_good(&art)
                )));
            }
            let grads = tape.backward(loss)?;
            let mut grads = bound.collect_grads(&tape, &grads);
            if grads.iter().flatten().any(|t| !t.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at step {}; last good checkpoint: {}",
                    step,
                    last_good(&art)
                )));
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(bundle.groups_mut()?, &grads, &mut opt, step, &schedule)?;
            bundle.clamp_scale()?;

            if let Some(a) = art.as_mut() {
                let counts = masks.counts();
                a.line(&StepLine {
                    step,
                    epoch,
                    lr_backbone: lr_at(step, &schedule, bundle.groups[0].peak_lr),
                    lr_heads: lr_at(step, &schedule, bundle.groups[1].peak_lr),
                    losses: &values,
                    residues: batch.total_residues(),
                    masked: batch.masked_targets().0.len(),
                    selected_a2g: counts[0],
                    selected_g2a: counts[1],
                    selected_physical: counts[2],
                })?;
                if let Some(w) = a.audit.as_mut() {
                    w.record(step, &current, ref_losses.as_ref(), &masks)?;
                }
            }
            epoch_vals.push(values);
        }

        let val = if val.is_empty() {
            None
        } else {
            Some(validation_losses(&bundle, &val, cfg, epoch)?)
        };
        let rec = EpochRecord {
            epoch,
            step,
            train: mean_values(&epoch_vals),
            val,
        };
        log::info!(
            "epoch {} step {} train {:.4} val {}",
            epoch,
            step,
            rec.train.overall,
            val.map_or("-".to_string(), |v| format!("{:.4}", v.overall))
        );
        let improved = match (val, history.best_val) {
            (Some(v), Some(best)) => v.overall < best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            history.best_val = val.map(|v| v.overall);
        }
        history.epochs.push(rec.clone());
        if let Some(a) = art.as_mut() {
            if let Some(v) = &val {
                a.line(&EpochLine {
                    step,
                    epoch,
                    split: "val",
                    losses: v,
                })?;
            }
            a.curve(&rec)?;
            if let Some(w) = a.audit.as_mut() {
                w.flush()?;
            }
            a.metrics
                .flush()
                .map_err(|e| Error::io(a.dir.join(METRICS_FILE), e))?;
            let mut ck = Checkpoint::new(&bundle, Some(&opt), cfg.seed, step, epoch + 1);
            ck.extra = serde_json::to_value(&history)?;
            if improved {
                ck.save(&a.dir.join(BEST_CHECKPOINT))?;
            }
            ck.save(&a.dir.join(LAST_CHECKPOINT))?;
        }
    }
    if let Some(a) = &art {
        if end_epoch == cfg.epochs {
            let mut ck = Checkpoint::new(&bundle, Some(&opt), cfg.seed, step, end_epoch);
            ck.extra = serde_json::to_value(&history)?;
            ck.save(&a.dir.join(FINAL_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome { bundle, history })
}

/// Trains the smaller reference model on the curated subset with every
/// residue selected and returns it frozen.
pub fn train_reference(
    reference_corpus: &[ProteinRecord],
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if reference_corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "reference corpus is empty; loosen the quality thresholds".into(),
        ));
    }
    let mut rcfg = cfg.clone();
    rcfg.strategy = StrategyKind::Full;
    rcfg.rho = 1.0;
    rcfg.model = cfg.model.reference();
    let init = ModelBundle::init(&rcfg.model, derive_seed(cfg.seed, &[stream::INIT, 1]))?;
    let mut out = run(init, reference_corpus, None, &rcfg, opts)?;
    out.bundle.freeze();
    Ok(out)
}

/// Main alignment run starting from `init`.
pub fn align(
    init: ModelBundle,
    records: &[ProteinRecord],
    reference: Option<&ModelBundle>,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if init.config != cfg.model {
        return Err(Error::InvalidArgument(
            "initial model config differs from the training config".into(),
        ));
    }
    run(init, records, reference, cfg, opts)
}
