use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use serde::Serialize;
use structalign::ablation::{run_ablation_grid, write_grid_csv, GridSpec};
use structalign::checkpoint::{load_bundle, save_bundle, Checkpoint};
use structalign::corpus::{
    self, curate_reference, encode_sequence, load_corpus, save_corpus, ProteinRecord,
};
use structalign::eval::{
    export_embeddings, probe_contact, probe_ss, pseudo_perplexity, score_variants, spearman,
    Mutation, ProbeConfig,
};
use structalign::model::ModelBundle;
use structalign::rng::{derive_seed, stream};
use structalign::synthgen::{generate, GeneratorConfig};
use structalign::tokenizer::{self, Codebook};
use structalign::trainer::{
    self, align, ensure_structure_inputs, train_reference, RunOptions, TrainConfig,
};

use crate::manifest::{OutputLock, RunManifest};
use crate::{
    explicit, AblateArgs, AlignArgs, Cli, Command, ExportArgs, FitTokenizerArgs, GenArgs, PplArgs,
    ProbeArgs, ProbeTask, ReplayArgs, ScoreArgs, TrainArgs, TrainRefArgs, UsageError, SEED_ENV,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
pub const CODEBOOK_FILE: &str = "codebook.json";
pub const REFERENCE_FILE: &str = "reference.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GRID_CSV: &str = "grid.csv";
pub const GRID_JSON: &str = "grid.json";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// The environment variable wins over `--seed` when set.
fn resolve_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{}={:?} is not an unsigned integer", SEED_ENV, v))),
        Err(_) => Ok(flag),
    }
}

/// Argument vector with `--seed` replaced by the resolved value, so that a
/// replay does not depend on the environment.
fn args_with_seed(args: &[String], seed: u64) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len() + 2);
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == "--seed" {
            skip = true;
            continue;
        }
        if a.starts_with("--seed=") {
            continue;
        }
        out.push(a.clone());
    }
    out.push("--seed".into());
    out.push(seed.to_string());
    out
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!(structalign::Error::Data(format!(
            "{} {} does not exist",
            what,
            path.display()
        )));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))?;
    }
    Ok(())
}

/// Output owned by one command: a directory (manifest and lock inside) or
/// a single file (manifest and lock next to it).
struct Output {
    manifest_path: PathBuf,
    manifest: RunManifest,
    _lock: OutputLock,
}

impl Output {
    fn dir(dir: &Path, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let lock = OutputLock::acquire(dir.join(LOCK_FILE))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        manifest.write(&manifest_path)?;
        Ok(Self {
            manifest_path,
            manifest,
            _lock: lock,
        })
    }

    fn file(out: &Path, manifest: RunManifest) -> Result<Self> {
        ensure_parent(out)?;
        let lock = OutputLock::acquire(sidecar(out, ".lock"))?;
        let manifest_path = sidecar(out, ".manifest.json");
        manifest.write(&manifest_path)?;
        Ok(Self {
            manifest_path,
            manifest,
            _lock: lock,
        })
    }

    fn finish<T>(mut self, result: Result<T>) -> Result<T> {
        self.manifest.finish(&self.manifest_path, result.is_ok())?;
        result
    }
}

pub fn dispatch(command: Command, m: &ArgMatches, args: Vec<String>) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a, args),
        Command::FitTokenizer(a) => fit_tokenizer(a, args),
        Command::TrainRef(a) => train_ref(a, m, args),
        Command::Align(a) => align_cmd(a, m, args),
        Command::Probe(a) => probe(a, args),
        Command::Ppl(a) => ppl(a, args),
        Command::Score(a) => score(a, args),
        Command::Ablate(a) => ablate(a, args),
        Command::Export(a) => export(a, args),
        Command::Replay(a) => replay(a),
    }
}

fn gen(a: GenArgs, args: Vec<String>) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let cfg = GeneratorConfig {
        n_proteins: a.n,
        length_range: (a.len_min, a.len_max),
        helix_fraction: a.helix_frac,
        strand_fraction: a.strand_frac,
        seq_structure_coupling: a.coupling,
        noise_fraction: a.noise_frac,
        coord_noise_sigma: a.noise_sigma,
        embed_dim: a.embed_dim,
        k_neighbors: a.k_neighbors,
        compactness: a.compactness,
        seed,
    };
    cfg.validate()?;
    let manifest = RunManifest::new(
        "gen",
        args_with_seed(&args, seed),
        serde_json::to_value(&cfg)?,
        Some(seed),
        &[],
    )?;
    let out = Output::file(&a.out, manifest)?;
    let result = (|| -> Result<()> {
        let recs = generate(&cfg)?;
        save_corpus(&a.out, &recs)?;
        log::info!("wrote {} records to {}", recs.len(), a.out.display());
        Ok(())
    })();
    out.finish(result)
}

fn fit_tokenizer(a: FitTokenizerArgs, args: Vec<String>) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    require_file(&a.corpus, "corpus")?;
    if a.k == 0 || a.max_iters == 0 {
        return Err(usage("--k and --max-iters must be positive"));
    }
    let config = serde_json::json!({"k": a.k, "max_iters": a.max_iters, "seed": seed});
    let manifest = RunManifest::new(
        "fit-tokenizer",
        args_with_seed(&args, seed),
        config,
        Some(seed),
        &[&a.corpus],
    )?;
    let out = Output::file(&a.out, manifest)?;
    let result = (|| -> Result<()> {
        let mut recs = load_corpus(&a.corpus)?;
        let points = tokenizer::corpus_descriptors(&recs)?;
        let (cb, objective) = tokenizer::fit_codebook_traced(&points, a.k, seed, a.max_iters)?;
        cb.save(&a.out)?;
        log::info!(
            "fit K = {} on {} residues; objective {:.4} after {} iterations",
            a.k,
            points.len(),
            objective.last().copied().unwrap_or(f64::NAN),
            objective.len()
        );
        if let Some(p) = &a.tokenized_out {
            ensure_parent(p)?;
            tokenizer::tokenize_corpus(&mut recs, &cb)?;
            save_corpus(p, &recs)?;
        }
        Ok(())
    })();
    out.finish(result)
}

/// Base config from `--config` (or defaults) with command-line flags on
/// top. Without a config file every flag applies, which reproduces the
/// documented defaults.
fn train_config(t: &TrainArgs, m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = match &t.config {
        Some(p) => {
            require_file(p, "config")?;
            let s =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&s)
                .with_context(|| format!("{} is not a training config", p.display()))?
        }
        None => TrainConfig::default(),
    };
    let all = t.config.is_none();
    let set = |id: &str| all || explicit(m, id);
    if set("epochs") {
        cfg.epochs = t.epochs;
    }
    if set("warmup_epochs") {
        cfg.warmup_epochs = t.warmup_epochs;
    }
    if set("lr_backbone") {
        cfg.peak_lr_backbone = t.lr_backbone;
    }
    if set("lr_heads") {
        cfg.peak_lr_heads = t.lr_heads;
    }
    if set("weight_decay") {
        cfg.weight_decay = t.weight_decay;
    }
    if set("batch_records") {
        cfg.batch_records = t.batch_records;
    }
    if set("max_len") {
        cfg.max_len = t.max_len;
        cfg.model.max_len = t.max_len;
    }
    if set("mask_rate") {
        cfg.mask_rate = t.mask_rate;
    }
    if set("val_fraction") {
        cfg.val_fraction = t.val_fraction;
    }
    if t.clip_norm.is_some() {
        cfg.clip_norm = t.clip_norm;
    }
    if set("hidden") {
        cfg.model.hidden = t.hidden;
    }
    if set("layers") {
        cfg.model.layers = t.layers;
    }
    if set("heads") {
        cfg.model.heads = t.heads;
    }
    if set("proj_dim") {
        cfg.model.proj_dim = t.proj_dim;
    }
    if set("struct_vocab") {
        cfg.model.struct_vocab = t.struct_vocab;
    }
    if set("seed") || std::env::var(SEED_ENV).is_ok() {
        cfg.seed = resolve_seed(t.seed)?;
    }
    Ok(cfg)
}

/// Fills structure embeddings and tokens. Records that already carry
/// tokens keep them; otherwise the given codebook is used, or one is fit to
/// the corpus. Returns the codebook used, if any.
fn prepare_structure(
    recs: &mut [ProteinRecord],
    cfg: &mut TrainConfig,
    codebook: Option<&Path>,
    struct_vocab_explicit: bool,
) -> Result<Option<Codebook>> {
    if let Some(w) = recs.iter().find_map(|r| r.embed_dim()) {
        cfg.model.gnn_dim = w;
    }
    let have_tokens = recs.iter().all(|r| r.structure_tokens.is_some());
    match codebook {
        Some(p) if !have_tokens => {
            require_file(p, "codebook")?;
            let cb = Codebook::load(p)?;
            if cb.k != cfg.model.struct_vocab {
                if struct_vocab_explicit {
                    return Err(usage(format!(
                        "--struct-vocab {} disagrees with codebook {} (K = {})",
                        cfg.model.struct_vocab,
                        p.display(),
                        cb.k
                    )));
                }
                log::info!("using K = {} from {}", cb.k, p.display());
                cfg.model.struct_vocab = cb.k;
            }
            ensure_structure_inputs(recs, &cfg.model, cfg.seed)?;
            tokenizer::tokenize_corpus(recs, &cb)?;
            Ok(Some(cb))
        }
        _ => Ok(ensure_structure_inputs(recs, &cfg.model, cfg.seed)?),
    }
}

fn train_ref(a: TrainRefArgs, m: &ArgMatches, args: Vec<String>) -> Result<()> {
    require_file(&a.corpus, "corpus")?;
    let mut cfg = train_config(&a.train, m)?;
    cfg.strategy = structalign::selection::StrategyKind::Full;
    let mut recs = load_corpus(&a.corpus)?;
    let cb = prepare_structure(
        &mut recs,
        &mut cfg,
        a.codebook.as_deref(),
        explicit(m, "struct_vocab"),
    )?;
    cfg.validate()?;
    let curated = curate_reference(&recs, a.res_max, a.rfree_max);
    if curated.is_empty() {
        bail!(structalign::Error::Data(format!(
            "no record has resolution < {} and R-free < {}",
            a.res_max, a.rfree_max
        )));
    }
    let config = serde_json::json!({"train": cfg, "res_max": a.res_max, "rfree_max": a.rfree_max, "reference_records": curated.len()});
    let mut inputs: Vec<&Path> = vec![&a.corpus];
    if let Some(p) = &a.codebook {
        inputs.push(p);
    }
    let manifest = RunManifest::new(
        "train-ref",
        args_with_seed(&args, cfg.seed),
        config,
        Some(cfg.seed),
        &inputs,
    )?;
    let out = Output::dir(&a.out, manifest)?;
    let result = (|| -> Result<()> {
        if let Some(cb) = &cb {
            cb.save(&a.out.join(CODEBOOK_FILE))?;
        }
        log::info!(
            "training reference model on {} of {} records",
            curated.len(),
            recs.len()
        );
        let opts = RunOptions {
            out_dir: Some(a.out.clone()),
            ..RunOptions::default()
        };
        let outcome = train_reference(&curated, &cfg, &opts)?;
        save_bundle(&outcome.bundle, &a.out.join(REFERENCE_FILE))?;
        write_summary(&a.out, &outcome.history)?;
        Ok(())
    })();
    out.finish(result)
}

fn write_summary(dir: &Path, history: &trainer::History) -> Result<()> {
    let summary = serde_json::json!({
        "epochs": history.epochs.len(),
        "best_val_overall": history.best_val,
        "final_val": history.last_val(),
        "final_train": history.epochs.last().map(|e| e.train),
    });
    let p = dir.join(SUMMARY_FILE);
    fs::write(&p, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("cannot write {}", p.display()))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// A checkpoint file, or a run directory holding one.
fn resolve_ckpt(p: &Path) -> Result<PathBuf> {
    if p.is_dir() {
        for c in [
            trainer::FINAL_CHECKPOINT,
            REFERENCE_FILE,
            trainer::LAST_CHECKPOINT,
        ] {
            let f = p.join(c);
            if f.is_file() {
                return Ok(f);
            }
        }
        bail!(structalign::Error::Data(format!(
            "no checkpoint found in {}",
            p.display()
        )));
    }
    require_file(p, "checkpoint")?;
    Ok(p.to_path_buf())
}

fn align_cmd(a: AlignArgs, m: &ArgMatches, args: Vec<String>) -> Result<()> {
    require_file(&a.corpus, "corpus")?;
    let mut cfg = train_config(&a.train, m)?;
    let all = a.train.config.is_none();
    if all || explicit(m, "strategy") {
        cfg.strategy = a.strategy.into();
    }
    if all || explicit(m, "rho") {
        cfg.rho = a.rho;
    }
    if all || explicit(m, "gamma_latent") {
        cfg.gamma_latent = a.gamma_latent;
    }
    if all || explicit(m, "gamma_physical") {
        cfg.gamma_physical = a.gamma_physical;
    }
    if a.no_selection {
        cfg.selection = false;
    }
    if a.audit {
        cfg.audit = true;
    }
    let needs_ref = cfg.selection && cfg.strategy == structalign::selection::StrategyKind::Excess;
    if needs_ref && a.reference.is_none() {
        return Err(usage("--strategy excess needs a reference model (--ref)"));
    }
    let init = match &a.init {
        Some(p) => {
            let p = resolve_ckpt(p)?;
            let mut b = load_bundle(&p)?;
            if b.frozen {
                return Err(usage(format!(
                    "{} is a frozen reference model and cannot be trained",
                    p.display()
                )));
            }
            if b.config.hidden != cfg.model.hidden || b.config.layers != cfg.model.layers {
                log::info!("model shape taken from {}", p.display());
            }
            b.reset_alignment_heads(derive_seed(cfg.seed, &[stream::INIT, 2]))?;
            cfg.model = b.config.clone();
            cfg.max_len = cfg.max_len.min(cfg.model.max_len);
            Some(b)
        }
        None => None,
    };
    let reference = match &a.reference {
        Some(p) if needs_ref => Some(load_bundle(&resolve_ckpt(p)?)?),
        Some(_) => {
            log::info!("strategy {} ignores the reference model", cfg.strategy);
            None
        }
        None => None,
    };
    let codebook = a.codebook.clone().or_else(|| {
        a.reference
            .as_ref()
            .map(|r| r.join(CODEBOOK_FILE))
            .filter(|p| p.is_file())
    });
    let mut recs = load_corpus(&a.corpus)?;
    let cb = prepare_structure(
        &mut recs,
        &mut cfg,
        codebook.as_deref(),
        explicit(m, "struct_vocab"),
    )?;
    let init = match init {
        Some(b) => {
            if b.config != cfg.model {
                bail!(structalign::Error::Data(format!(
                    "corpus structure inputs (D_g = {}, K = {}) do not fit the initial model (D_g = {}, K = {})",
                    cfg.model.gnn_dim, cfg.model.struct_vocab, b.config.gnn_dim, b.config.struct_vocab
                )));
            }
            b
        }
        None => ModelBundle::init(&cfg.model, derive_seed(cfg.seed, &[stream::INIT]))?,
    };
    if let Some(r) = &reference {
        if r.config.gnn_dim != cfg.model.gnn_dim || r.config.struct_vocab != cfg.model.struct_vocab
        {
            bail!(structalign::Error::Data(
                "reference model was trained with different structure inputs".into()
            ));
        }
    }
    cfg.validate()?;
    let mut inputs: Vec<&Path> = vec![&a.corpus];
    let ref_file = a.reference.as_ref().map(|p| resolve_ckpt(p)).transpose()?;
    let init_file = a.init.as_ref().map(|p| resolve_ckpt(p)).transpose()?;
    for p in [&ref_file, &init_file, &codebook].into_iter().flatten() {
        inputs.push(p);
    }
    let manifest = RunManifest::new(
        "align",
        args_with_seed(&args, cfg.seed),
        serde_json::to_value(&cfg)?,
        Some(cfg.seed),
        &inputs,
    )?;
    let out = Output::dir(&a.out, manifest)?;
    let result = (|| -> Result<()> {
        if let Some(cb) = &cb {
            cb.save(&a.out.join(CODEBOOK_FILE))?;
        }
        let resume = if a.resume {
            let p = a.out.join(trainer::LAST_CHECKPOINT);
            require_file(&p, "checkpoint to resume from")?;
            Some(Checkpoint::load(&p)?)
        } else {
            None
        };
        let opts = RunOptions {
            out_dir: Some(a.out.clone()),
            resume,
            stop_after: a.stop_after,
        };
        let outcome = align(init, &recs, reference.as_ref(), &cfg, &opts)?;
        write_summary(&a.out, &outcome.history)
    })();
    out.finish(result)
}

fn probe(a: ProbeArgs, args: Vec<String>) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    require_file(&a.corpus, "corpus")?;
    let ckpt = resolve_ckpt(&a.ckpt)?;
    let cfg = ProbeConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        hidden: a.hidden,
        test_fraction: a.test_fraction,
        pairs_per_protein: a.pairs_per_protein,
        seed,
        ..ProbeConfig::default()
    };
    cfg.validate()?;
    let task = match a.task {
        ProbeTask::Contact => "contact",
        ProbeTask::Ss => "ss",
    };
    let config = serde_json::json!({"task": task, "probe": cfg});
    let manifest = RunManifest::new(
        "probe",
        args_with_seed(&args, seed),
        config,
        Some(seed),
        &[&ckpt, &a.corpus],
    )?;
    let out = Output::file(&a.out, manifest)?;
    let result = (|| -> Result<()> {
        let bundle = load_bundle(&ckpt)?;
        let recs = load_corpus(&a.corpus)?;
        let report = match a.task {
            ProbeTask::Contact => probe_contact(&bundle, &recs, &cfg)?,
            ProbeTask::Ss => probe_ss(&bundle, &recs, &cfg)?,
        };
        fs::write(&a.out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("cannot write {}", a.out.display()))?;
        println!("{} {} = {:.4}", report.task, report.metric, report.value);
        Ok(())
    })();
    out.finish(result)
}

fn truncated_sequence(r: &ProteinRecord, max_len: usize) -> &[u8] {
    if r.len() > max_len {
        log::warn!(
            "{}: scored on its first {} of {} residues",
            r.id,
            max_len,
            r.len()
        );
    }
    &r.sequence[..r.len().min(max_len)]
}

fn ppl(a: PplArgs, args: Vec<String>) -> Result<()> {
    require_file(&a.corpus, "corpus")?;
    let ckpt = resolve_ckpt(&a.ckpt)?;
    let manifest = RunManifest::new(
        "ppl",
        args,
        serde_json::Value::Null,
        None,
        &[&ckpt, &a.corpus],
    )?;
    let out = Output::file(&a.out, manifest)?;
    let result = (|| -> Result<()> {
        let bundle = load_bundle(&ckpt)?;
        let recs = load_corpus(&a.corpus)?;
        let mut s = String::from("protein_id,length,pseudo_perplexity\n");
        let mut total = 0.0;
        for r in &recs {
            let seq = truncated_sequence(r, bundle.config.max_len);
            let v = pseudo_perplexity(&bundle, seq)?;
            total += v;
            s.push_str(&format!("{},{},{}\n", r.id, seq.len(), v));
        }
        fs::write(&a.out, s).with_context(|| format!("cannot write {}", a.out.display()))?;
        println!(
            "mean pseudo-perplexity {:.4} over {} proteins",
            total / recs.len().max(1) as f64,
            recs.len()
        );
        Ok(())
    })();
    out.finish(result)
}

fn read_wild_type(wt: &str) -> Result<Vec<u8>> {
    let p = Path::new(wt);
    let text = if p.is_file() {
        fs::read_to_string(p)
            .with_context(|| format!("cannot read {}", p.display()))?
            .lines()
            .filter(|l| !l.starts_with('>'))
            .map(str::trim)
            .collect::<String>()
    } else {
        wt.trim().to_string()
    };
    Ok(encode_sequence(&text)?)
}

/// Parses `A12G` or `A12G:K15R` against the wild type (1-based positions).
pub fn parse_variant(s: &str, wt: &[u8]) -> std::result::Result<Vec<Mutation>, String> {
    s.split(':')
        .map(|sub| {
            let sub = sub.trim();
            let chars: Vec<char> = sub.chars().collect();
            if chars.len() < 3 {
                return Err(format!("bad substitution {:?}", sub));
            }
            let from = corpus::residue_index(chars[0] as u8)
                .ok_or_else(|| format!("bad residue in {:?}", sub))?;
            let to = corpus::residue_index(chars[chars.len() - 1] as u8)
                .ok_or_else(|| format!("bad residue in {:?}", sub))?;
            let pos: usize = chars[1..chars.len() - 1]
                .iter()
                .collect::<String>()
                .parse()
                .map_err(|_| format!("bad position in {:?}", sub))?;
            if pos == 0 || pos > wt.len() {
                return Err(format!("{:?}: position outside 1..={}", sub, wt.len()));
            }
            if wt[pos - 1] != from {
                return Err(format!(
                    "{:?}: wild type has {} at {}",
                    sub,
                    corpus::residue_symbol(wt[pos - 1]),
                    pos
                ));
            }
            Ok((pos - 1, to))
        })
        .collect()
}

fn content_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let s = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(s.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

#[derive(Serialize)]
struct ScoredVariant {
    variant: String,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<f64>,
}

fn score(a: ScoreArgs, args: Vec<String>) -> Result<()> {
    require_file(&a.mutations, "mutations file")?;
    if let Some(l) = &a.labels {
        require_file(l, "labels file")?;
    }
    let ckpt = resolve_ckpt(&a.ckpt)?;
    let wt = read_wild_type(&a.wt)?;
    let mut inputs: Vec<&Path> = vec![&ckpt, &a.mutations];
    if let Some(l) = &a.labels {
        inputs.push(l);
    }
    let wt_path = Path::new(&a.wt);
    if wt_path.is_file() {
        inputs.push(wt_path);
    }
    let manifest = RunManifest::new(
        "score",
        args,
        serde_json::json!({"wild_type_length": wt.len()}),
        None,
        &inputs,
    )?;
    let out = Output::file(&a.out, manifest)?;
    let result = (|| -> Result<()> {
        let data = |path: &Path, line: usize, message: String| structalign::Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let lines = content_lines(&a.mutations)?;
        let mut names = Vec::with_capacity(lines.len());
        let mut variants = Vec::with_capacity(lines.len());
        for (n, l) in &lines {
            variants.push(parse_variant(l, &wt).map_err(|e| data(&a.mutations, *n, e))?);
            names.push(l.clone());
        }
        let labels = match &a.labels {
            Some(p) => {
                let ls = content_lines(p)?;
                if ls.len() != variants.len() {
                    bail!(structalign::Error::Data(format!(
                        "{} labels for {} variants",
                        ls.len(),
                        variants.len()
                    )));
                }
                let mut v = Vec::with_capacity(ls.len());
                for (n, l) in &ls {
                    v.push(l.parse::<f64>().map_err(|e| data(p, *n, e.to_string()))?);
                }
                Some(v)
            }
            None => None,
        };
        let bundle = load_bundle(&ckpt)?;
        if wt.len() > bundle.config.max_len {
            return Err(usage(format!(
                "wild type has {} residues; the model takes at most {}",
                wt.len(),
                bundle.config.max_len
            )));
        }
        let scores = score_variants(&bundle, &wt, &variants)?;
        let rho = match &labels {
            Some(l) => Some(spearman(&scores, l)?),
            None => None,
        };
        let rows: Vec<ScoredVariant> = names
            .into_iter()
            .enumerate()
            .map(|(i, variant)| ScoredVariant {
                variant,
                score: scores[i],
                label: labels.as_ref().map(|l| l[i]),
            })
            .collect();
        let report = serde_json::json!({"variants": rows, "spearman": rho});
        fs::write(&a.out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("cannot write {}", a.out.display()))?;
        if let Some(r) = rho {
            println!("spearman {:.4} over {} variants", r, scores.len());
        }
        Ok(())
    })();
    out.finish(result)
}

fn ablate(a: AblateArgs, args: Vec<String>) -> Result<()> {
    require_file(&a.corpus, "corpus")?;
    require_file(&a.grid, "grid file")?;
    let s =
        fs::read_to_string(&a.grid).with_context(|| format!("cannot read {}", a.grid.display()))?;
    let mut spec: GridSpec = serde_json::from_str(&s)
        .map_err(|e| structalign::Error::Data(format!("{}: {}", a.grid.display(), e)))?;
    if a.seed.is_some() || std::env::var(SEED_ENV).is_ok() {
        spec.base.seed = resolve_seed(a.seed.unwrap_or(spec.base.seed))?;
    }
    let recs = load_corpus(&a.corpus)?;
    if let Some(w) = recs.iter().find_map(|r| r.embed_dim()) {
        spec.base.model.gnn_dim = w;
    }
    spec.validate()?;
    let seed = spec.base.seed;
    let manifest = RunManifest::new(
        "ablate",
        args_with_seed(&args, seed),
        serde_json::to_value(&spec)?,
        Some(seed),
        &[&a.corpus, &a.grid],
    )?;
    let out = Output::dir(&a.out, manifest)?;
    let result = (|| -> Result<()> {
        let rows = run_ablation_grid(&recs, &spec, Some(&a.out))?;
        write_grid_csv(&a.out.join(GRID_CSV), &rows)?;
        let p = a.out.join(GRID_JSON);
        fs::write(&p, serde_json::to_string_pretty(&rows)?)
            .with_context(|| format!("cannot write {}", p.display()))?;
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "{}", structalign::ablation::GRID_HEADER)?;
        for r in &rows {
            writeln!(stdout, "{}", r.csv_line())?;
        }
        Ok(())
    })();
    out.finish(result)
}

fn export(a: ExportArgs, args: Vec<String>) -> Result<()> {
    require_file(&a.corpus, "corpus")?;
    let ckpt = resolve_ckpt(&a.ckpt)?;
    let manifest = RunManifest::new(
        "export",
        args,
        serde_json::Value::Null,
        None,
        &[&ckpt, &a.corpus],
    )?;
    let out = Output::file(&a.out, manifest)?;
    let result = (|| -> Result<()> {
        let bundle = load_bundle(&ckpt)?;
        let recs = load_corpus(&a.corpus)?;
        let n = export_embeddings(&bundle, &recs, &a.out)?;
        log::info!("wrote {} residue embeddings to {}", n, a.out.display());
        Ok(())
    })();
    out.finish(result)
}

fn replay(a: ReplayArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let m = RunManifest::load(&a.manifest)?;
    if m.command == "replay" || m.args.get(1).map(String::as_str) == Some("replay") {
        return Err(usage("a replay manifest cannot be replayed"));
    }
    log::info!("replaying {}: {}", m.command, m.args.join(" "));
    let matches = Cli::command()
        .try_get_matches_from(&m.args)
        .map_err(|e| usage(format!("manifest arguments no longer parse: {}", e)))?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| usage(e.to_string()))?;
    let sub = matches
        .subcommand()
        .map(|(_, s)| s.clone())
        .expect("subcommand required");
    dispatch(cli.command, &sub, m.args)
}
