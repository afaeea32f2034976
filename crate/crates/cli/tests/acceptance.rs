//! Acceptance criteria, one test each. Every test writes a single
//! `[PASS]` / `[FAIL]` line to stderr before asserting.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use structalign::corpus::{curate_reference, Batch, ProteinRecord, NUM_RESIDUES, VOCAB_SIZE};
use structalign::eval::{
    probe_contact, pseudo_perplexity, score_variants, spearman, MaskedPredictor, Mutation,
    ProbeConfig,
};
use structalign::losses::{self, LossWeights, SelectionMasks};
use structalign::model::{ModelBundle, PlmConfig};
use structalign::nn::{grad_check_many, GroupGrads, ParamGroup, Tape, Tensor};
use structalign::rng::rng_for;
use structalign::selection::{select, SelectionStrategy, StrategyKind};
use structalign::synthgen::{generate, substitution_fitness, GeneratorConfig};
use structalign::tokenizer::{corpus_descriptors, fit_codebook, tokenize_corpus};
use structalign::trainer::{
    align, ensure_structure_inputs, train_reference, RunOptions, TrainConfig,
};

const BIN: &str = env!("CARGO_BIN_EXE_structalign");
const SEEDS: u64 = 3;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[{}] criterion {:>2} {}: {}",
        tag,
        n,
        name,
        detail
    );
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// -- shared experiment setup --------------------------------------------------

/// Reduced model used by the directional experiments.
fn small_model() -> PlmConfig {
    PlmConfig {
        hidden: 32,
        layers: 2,
        heads: 4,
        max_len: 40,
        proj_dim: 16,
        gnn_dim: 16,
        struct_vocab: 20,
        ..PlmConfig::default()
    }
}

/// 512 training plus 64 validation proteins.
fn experiment_corpus(seed: u64, noise_fraction: f64) -> Vec<ProteinRecord> {
    let mut recs = generate(&GeneratorConfig {
        n_proteins: 576,
        length_range: (24, 40),
        seq_structure_coupling: 0.8,
        noise_fraction,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap();
    ensure_structure_inputs(&mut recs, &small_model(), 0).unwrap();
    recs
}

fn held_out(n: usize, seed: u64) -> Vec<ProteinRecord> {
    generate(&GeneratorConfig {
        n_proteins: n,
        length_range: (24, 40),
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn experiment_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        warmup_epochs: 1,
        peak_lr_backbone: 1e-3,
        peak_lr_heads: 1e-3,
        strategy: StrategyKind::Full,
        seed,
        batch_records: 16,
        max_len: 40,
        val_fraction: 64.0 / 576.0,
        model: small_model(),
        ..TrainConfig::default()
    }
}

/// (γ_latent, γ_physical) of the dual-task ablation cells.
const DUAL_CELLS: [(&str, f64, f64); 4] = [
    ("full-dual", 0.5, 0.5),
    ("w/o-dual", 0.0, 0.0),
    ("w/o-latent", 0.0, 0.5),
    ("w/o-physical", 0.5, 0.0),
];

struct DualRuns {
    /// Trained bundles per seed, in `DUAL_CELLS` order.
    bundles: Vec<Vec<ModelBundle>>,
    /// Contact P@L/5 per seed and cell.
    contact: Vec<Vec<f64>>,
    seconds: f64,
}

fn dual_runs() -> &'static DualRuns {
    static RUNS: OnceLock<DualRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let model = small_model();
        let (mut bundles, mut contact) = (Vec::new(), Vec::new());
        for s in 0..SEEDS {
            let recs = experiment_corpus(100 + s, 0.0);
            let mut probe = generate(&GeneratorConfig {
                n_proteins: 400,
                length_range: (24, 40),
                seed: 900 + s,
                ..GeneratorConfig::default()
            })
            .unwrap();
            ensure_structure_inputs(&mut probe, &model, 0).unwrap();
            let pc = ProbeConfig {
                seed: s,
                test_fraction: 0.5,
                ..ProbeConfig::default()
            };
            let (mut bs, mut cs) = (Vec::new(), Vec::new());
            for &(_, gl, gp) in &DUAL_CELLS {
                let cfg = TrainConfig {
                    gamma_latent: gl,
                    gamma_physical: gp,
                    ..experiment_config(s)
                };
                let init = ModelBundle::init(&model, s).unwrap();
                let out = align(init, &recs, None, &cfg, &RunOptions::default()).unwrap();
                cs.push(probe_contact(&out.bundle, &probe, &pc).unwrap().value);
                bs.push(out.bundle);
            }
            bundles.push(bs);
            contact.push(cs);
        }
        DualRuns {
            bundles,
            contact,
            seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

// -- 1 ------------------------------------------------------------------------

const LOSS_NAMES: [&str; 6] = ["mlm", "a2g", "g2a", "latent", "physical", "overall"];

/// Every training loss from one forward pass, with one gradient per loss.
fn all_losses(
    cfg: &PlmConfig,
    batch: &Batch,
    groups: &[ParamGroup],
    with_grad: bool,
) -> structalign::Result<(Vec<f64>, Option<Vec<GroupGrads>>)> {
    let bundle = ModelBundle {
        config: cfg.clone(),
        groups: groups.to_vec(),
        frozen: false,
    };
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, with_grad)?;
    let g = losses::residue_graph(&mut tape, &bound, batch)?;
    let all = SelectionMasks::all(batch.total_residues());
    let mlm = tape.mean(g.mlm);
    let a2g = tape.mean(g.a2g);
    let g2a = tape.mean(g.g2a);
    let sum = tape.add(a2g, g2a)?;
    let latent = tape.scale(sum, 0.5);
    let physical = tape.mean(g.physical);
    let overall = losses::combine(&mut tape, &g, &LossWeights::default(), &all)?.0;
    let outs = [mlm, a2g, g2a, latent, physical, overall];
    let values = outs.iter().map(|&v| tape.value(v).item()).collect();
    let grads = if with_grad {
        let mut gs = Vec::with_capacity(outs.len());
        for &v in &outs {
            gs.push(bound.collect_grads(&tape, &tape.backward(v)?));
        }
        Some(gs)
    } else {
        None
    };
    Ok((values, grads))
}

#[test]
fn c01_gradient_correctness() {
    let t0 = Instant::now();
    let mut worst = [0.0f64; 6];
    for seed in 0..3u64 {
        let cfg = PlmConfig::default();
        let mut recs = generate(&GeneratorConfig {
            n_proteins: 4,
            length_range: (12, 12),
            seed,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cb = fit_codebook(
            &corpus_descriptors(&recs).unwrap(),
            cfg.struct_vocab,
            seed,
            50,
        )
        .unwrap();
        tokenize_corpus(&mut recs, &cb).unwrap();
        recs.truncate(2);
        let batch = Batch::with_masking(recs, 0.15, seed).unwrap();
        let bundle = ModelBundle::init(&cfg, seed).unwrap();
        let mut obj = |g: &[ParamGroup], w: bool| all_losses(&cfg, &batch, g, w);
        let errs = grad_check_many(&mut obj, &bundle.groups, 1e-5, seed).unwrap();
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().copied().fold(0.0, f64::max);
    let pass = max < 1e-4 && secs < 120.0;
    let per = LOSS_NAMES
        .iter()
        .zip(&worst)
        .map(|(n, e)| format!("{} {:.1e}", n, e))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "max relative error {} (< 1e-4) on 3 seeds, {:.0}s (< 120s)",
            per, secs
        ),
    );
    assert!(pass);
}

// -- 2 ------------------------------------------------------------------------

#[test]
fn c02_analytic_loss_values() {
    let mut errs = Vec::new();
    let mut recs = held_out(3, 5);
    let cb = fit_codebook(&corpus_descriptors(&recs).unwrap(), 20, 5, 50).unwrap();
    tokenize_corpus(&mut recs, &cb).unwrap();
    let batch = Batch::with_masking(recs.clone(), 0.15, 5).unwrap();
    let n = batch.total_residues();

    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[n, VOCAB_SIZE]));
    let mlm = losses::mlm_losses(&mut tape, logits, &batch).unwrap();
    let m = tape.mean(mlm);
    errs.push((
        "mlm",
        (tape.value(m).item() - (VOCAB_SIZE as f64).ln()).abs(),
    ));

    for k in [2usize, 17, 64] {
        let d = tape.constant(Tensor::full(&[k, k], -0.3));
        let a = losses::a2g_losses(&mut tape, d).unwrap();
        let g = losses::g2a_losses(&mut tape, d).unwrap();
        let worst = tape
            .value(a)
            .data()
            .iter()
            .chain(tape.value(g).data())
            .map(|v| (v - (k as f64).ln()).abs())
            .fold(0.0, f64::max);
        errs.push(("contrastive", worst));
    }

    for k in [20usize, 512] {
        let mut b = batch.clone();
        for r in b.records.iter_mut() {
            // any valid token: the loss is ln K regardless
            r.structure_tokens = Some((0..r.len()).map(|i| (i * 37) % k).collect());
        }
        let logits = tape.constant(Tensor::zeros(&[n, k]));
        let p = losses::physical_losses(&mut tape, logits, &b).unwrap();
        let worst = tape
            .value(p)
            .data()
            .iter()
            .map(|v| (v - (k as f64).ln()).abs())
            .fold(0.0, f64::max);
        errs.push(("physical", worst));
    }

    let one = tape.constant(Tensor::full(&[1, 1], 3.7));
    let a = losses::a2g_losses(&mut tape, one).unwrap();
    let g = losses::g2a_losses(&mut tape, one).unwrap();
    let single_zero = tape.value(a).data()[0] == 0.0 && tape.value(g).data()[0] == 0.0;

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let pass = worst < 1e-9 && single_zero;
    report(
        2,
        "analytic loss values",
        pass,
        &format!("max |loss - ln n| {:.1e} (< 1e-9) over mlm/contrastive/physical; N=1 contrastive exactly 0: {}", worst, single_zero),
    );
    assert!(pass);
}

// -- 3 ------------------------------------------------------------------------

#[test]
fn c03_selection_contract() {
    let mut rng = rng_for(3, &[]);
    let mut bad = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..500usize);
        let rho = rng.random_range(0.0001..1.0f64);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let want = ((n as f64 * rho).floor() as usize).max(1);
        for kind in [
            StrategyKind::Excess,
            StrategyKind::LossLarge,
            StrategyKind::LossSmall,
        ] {
            let got = select(&values, &SelectionStrategy::new(kind, rho).unwrap())
                .iter()
                .filter(|&&b| b)
                .count();
            bad += (got != want) as usize;
        }
    }

    let model = PlmConfig {
        hidden: 16,
        layers: 2,
        heads: 2,
        max_len: 24,
        proj_dim: 8,
        struct_vocab: 8,
        ..PlmConfig::default()
    };
    let mut recs = generate(&GeneratorConfig {
        n_proteins: 24,
        length_range: (16, 24),
        seed: 3,
        ..GeneratorConfig::default()
    })
    .unwrap();
    ensure_structure_inputs(&mut recs, &model, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        strategy: StrategyKind::Full,
        batch_records: 8,
        max_len: 24,
        model: model.clone(),
        ..TrainConfig::default()
    };
    let full = align(
        ModelBundle::init(&model, 3).unwrap(),
        &recs,
        None,
        &cfg,
        &RunOptions::default(),
    )
    .unwrap();
    let off = TrainConfig {
        selection: false,
        ..cfg
    };
    let plain = align(
        ModelBundle::init(&model, 3).unwrap(),
        &recs,
        None,
        &off,
        &RunOptions::default(),
    )
    .unwrap();
    let bitwise = full.bundle.groups == plain.bundle.groups && full.history == plain.history;

    let pass = bad == 0 && bitwise;
    report(
        3,
        "selection contract",
        pass,
        &format!("{} count mismatches over 100 (N, rho) pairs x 3 strategies; full == selection disabled bitwise over 3 epochs: {}", bad, bitwise),
    );
    assert!(pass);
}

// -- 4 ------------------------------------------------------------------------

#[test]
fn c04_transpose_duality() {
    let mut rng = rng_for(4, &[]);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.random_range(2..40usize);
        let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d = Tensor::matrix(n, n, data).unwrap();
        let mut tape = Tape::new();
        let dv = tape.constant(d.clone());
        let dt = tape.constant(d.transpose());
        let a = losses::a2g_losses(&mut tape, dv).unwrap();
        let g = losses::g2a_losses(&mut tape, dt).unwrap();
        worst = worst.max((mean(tape.value(a).data()) - mean(tape.value(g).data())).abs());
    }
    let pass = worst <= 1e-12;
    report(
        4,
        "transpose duality",
        pass,
        &format!(
            "max |mean a2g(d) - mean g2a(d^T)| {:.1e} (<= 1e-12) on 10 matrices",
            worst
        ),
    );
    assert!(pass);
}

// -- 5 ------------------------------------------------------------------------

#[test]
fn c05_dual_task_directional() {
    let runs = dual_runs();
    let cell_mean = |c: usize| mean(&runs.contact.iter().map(|s| s[c]).collect::<Vec<_>>());
    let means: Vec<f64> = (0..DUAL_CELLS.len()).map(cell_mean).collect();
    let margin = means[0] - means[1];
    let pass =
        margin >= 0.03 && means[0] >= means[2] && means[0] >= means[3] && runs.seconds < 900.0;
    let cells = DUAL_CELLS
        .iter()
        .zip(&means)
        .map(|((n, _, _), m)| format!("{} {:.4}", n, m))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        5,
        "dual-task directional",
        pass,
        &format!(
            "mean contact P@L/5 {}; full-dual - w/o-dual = {:.4} (>= 0.03); {:.0}s (< 900s)",
            cells, margin, runs.seconds
        ),
    );
    assert!(pass);
}

// -- 6 ------------------------------------------------------------------------

#[test]
fn c06_selection_directional() {
    let kinds = [
        StrategyKind::Excess,
        StrategyKind::LossSmall,
        StrategyKind::Full,
    ];
    let mut latent = vec![Vec::new(); kinds.len()];
    for s in 0..SEEDS {
        let recs = experiment_corpus(300 + s, 0.3);
        let base = TrainConfig {
            rho: 0.8,
            ..experiment_config(s)
        };
        let clean = curate_reference(&recs, 2.0, 0.2);
        let reference = train_reference(&clean, &base, &RunOptions::default())
            .unwrap()
            .bundle;
        for (k, &kind) in kinds.iter().enumerate() {
            let cfg = TrainConfig {
                strategy: kind,
                ..base.clone()
            };
            let init = ModelBundle::init(&small_model(), s).unwrap();
            let out = align(init, &recs, Some(&reference), &cfg, &RunOptions::default()).unwrap();
            latent[k].push(out.history.last_val().unwrap().latent);
        }
    }
    let m: Vec<f64> = latent.iter().map(|v| mean(v)).collect();
    let per_seed_small = (0..SEEDS as usize).all(|s| latent[0][s] < latent[1][s]);
    let pass = m[0] < m[1] && per_seed_small && m[0] <= m[2];
    report(
        6,
        "selection directional",
        pass,
        &format!(
            "mean final validation latent loss: excess {:.4}, loss-small {:.4}, full {:.4}; excess < loss-small on every seed: {}; excess <= full: {}",
            m[0], m[1], m[2], per_seed_small, m[0] <= m[2]
        ),
    );
    assert!(pass);
}

// -- 7 ------------------------------------------------------------------------

struct Uniform;

impl MaskedPredictor for Uniform {
    fn residue_log_probs(&self, sequences: &[Vec<u8>]) -> structalign::Result<Vec<Tensor>> {
        let lp = -(NUM_RESIDUES as f64).ln();
        Ok(sequences
            .iter()
            .map(|s| Tensor::full(&[s.len(), NUM_RESIDUES], lp))
            .collect())
    }
}

fn mean_ppl<P: MaskedPredictor>(model: &P, recs: &[ProteinRecord]) -> f64 {
    mean(
        &recs
            .iter()
            .map(|r| pseudo_perplexity(model, &r.sequence).unwrap())
            .collect::<Vec<_>>(),
    )
}

/// The MLM-only model is pretrained on sequences alone; the aligned model
/// continues from it with both structure tasks at the default fine-tuning
/// learning rates.
#[test]
fn c07_pseudo_perplexity() {
    let uniform = mean_ppl(&Uniform, &held_out(10, 70));
    let model = small_model();
    let (mut mlm_only, mut aligned) = (Vec::new(), Vec::new());
    for s in 0..SEEDS {
        let recs = experiment_corpus(100 + s, 0.0);
        let held = held_out(60, 700 + s);
        let pre = TrainConfig {
            epochs: 60,
            gamma_latent: 0.0,
            gamma_physical: 0.0,
            ..experiment_config(s)
        };
        let base = align(
            ModelBundle::init(&model, s).unwrap(),
            &recs,
            None,
            &pre,
            &RunOptions::default(),
        )
        .unwrap()
        .bundle;
        let mut init = base.clone();
        init.reset_alignment_heads(s + 1).unwrap();
        let cfg = TrainConfig {
            warmup_epochs: 2,
            peak_lr_backbone: 1e-4,
            peak_lr_heads: 1e-3,
            ..experiment_config(s)
        };
        let out = align(init, &recs, None, &cfg, &RunOptions::default())
            .unwrap()
            .bundle;
        mlm_only.push(mean_ppl(&base, &held));
        aligned.push(mean_ppl(&out, &held));
    }
    let (b, a) = (mean(&mlm_only), mean(&aligned));
    let finite = mlm_only.iter().chain(&aligned).all(|v| v.is_finite());
    let pass = (uniform - 20.0).abs() < 1e-12 && finite && a > b;
    report(
        7,
        "pseudo-perplexity",
        pass,
        &format!(
            "uniform model {} (|ppl - 20| < 1e-12); mean over seeds: MLM-only {:.4}, aligned {:.4}, gap {:+.4} (aligned must exceed); per seed MLM-only {:?}, aligned {:?}",
            uniform,
            b,
            a,
            a - b,
            mlm_only.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(),
            aligned.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

// -- 8 ------------------------------------------------------------------------

#[test]
fn c08_zero_shot_scoring() {
    let runs = dual_runs();
    let (mut model_rho, mut random_rho) = (Vec::new(), Vec::new());
    for s in 0..SEEDS {
        let bundle = &runs.bundles[s as usize][0];
        let held = held_out(20, 700 + s);
        let mut rng = rng_for(s, &[77]);
        let (mut sa, mut sr) = (Vec::new(), Vec::new());
        for r in &held {
            let muts: Vec<Vec<Mutation>> = (0..r.len())
                .flat_map(|p| {
                    (0..NUM_RESIDUES as u8)
                        .filter(move |&a| a != r.sequence[p])
                        .map(move |a| vec![(p, a)])
                })
                .collect();
            let labels = r.ss_labels.as_ref().unwrap();
            let fitness: Vec<f64> = muts
                .iter()
                .map(|m| substitution_fitness(&r.sequence, labels, m, 0.8).unwrap())
                .collect();
            let scores = score_variants(bundle, &r.sequence, &muts).unwrap();
            let noise: Vec<f64> = muts.iter().map(|_| rng.random()).collect();
            sa.push(spearman(&scores, &fitness).unwrap());
            sr.push(spearman(&noise, &fitness).unwrap());
        }
        model_rho.push(mean(&sa));
        random_rho.push(mean(&sr));
    }
    let x = [1.0, 2.0, 3.0, 4.0];
    let units = [
        spearman(&x, &x).unwrap(),
        spearman(&x, &[-1.0, -2.0, -3.0, -4.0]).unwrap(),
        spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap(),
    ];
    let units_ok = units[0] == 1.0 && units[1] == -1.0 && (units[2] - 0.8).abs() < 1e-15;
    let (a, r) = (mean(&model_rho), mean(&random_rho));
    let pass = a > r && a > 0.2 && units_ok;
    report(
        8,
        "zero-shot scoring",
        pass,
        &format!(
            "mean Spearman aligned {:.4} (> 0.2) vs random {:.4}; unit values {:?} (1, -1, 0.8)",
            a, r, units
        ),
    );
    assert!(pass);
}

// -- 9 and 10 -----------------------------------------------------------------

fn cli(args: &[&str]) {
    let out = Command::new(BIN)
        .args(args)
        .env_remove("STRUCTALIGN_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{:?}: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn c09_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus.jsonl");
    cli(&[
        "gen",
        "--n",
        "40",
        "--len-min",
        "16",
        "--len-max",
        "24",
        "--seed",
        "9",
        "--out",
        p(&corpus),
    ]);
    let common = [
        "--strategy",
        "loss-large",
        "--rho",
        "0.7",
        "--epochs",
        "4",
        "--warmup-epochs",
        "1",
        "--hidden",
        "16",
        "--layers",
        "2",
        "--heads",
        "2",
        "--proj-dim",
        "8",
        "--struct-vocab",
        "8",
        "--max-len",
        "24",
        "--batch-records",
        "8",
        "--seed",
        "9",
    ];
    let align_into = |name: &str, extra: &[&str]| {
        let out = d.join(name);
        let mut args = vec!["align", "--corpus", p(&corpus), "--out", p(&out)];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        cli(&args);
        out
    };
    let a = align_into("a", &[]);
    let b = align_into("b", &[]);
    align_into("c", &["--stop-after", "2"]);
    let c = align_into("c", &["--resume"]);
    let read = |dir: &Path, f: &str| fs::read(dir.join(f)).unwrap();
    let metrics = "logs/metrics.jsonl";
    let same_twice = read(&a, metrics) == read(&b, metrics);
    let resumed = read(&a, metrics) == read(&c, metrics)
        && read(&a, "checkpoints/final.json") == read(&c, "checkpoints/final.json");
    let pass = same_twice && resumed;
    report(
        9,
        "determinism",
        pass,
        &format!("metrics.jsonl byte-identical across two runs: {}; run stopped after 2 of 4 epochs and resumed matches the uninterrupted run (metrics and final checkpoint): {}", same_twice, resumed),
    );
    assert!(pass);
}

#[test]
fn c10_codebook_ablation_harness() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus.jsonl");
    cli(&[
        "gen",
        "--n",
        "60",
        "--len-min",
        "16",
        "--len-max",
        "24",
        "--seed",
        "10",
        "--out",
        p(&corpus),
    ]);
    let grid = d.join("grid.json");
    let spec = serde_json::json!({
        "base": {
            "epochs": 3, "warmup_epochs": 1, "batch_records": 8, "max_len": 24, "strategy": "excess",
            "model": {"hidden": 16, "layers": 2, "heads": 2, "max_len": 24, "proj_dim": 8}
        },
        "probe": {"epochs": 3, "hidden": 16},
        "cells": [{"name": "k20", "struct_vocab": 20}, {"name": "k512", "struct_vocab": 512}]
    });
    fs::write(&grid, spec.to_string()).unwrap();
    let out = d.join("ablate");
    cli(&[
        "ablate",
        "--corpus",
        p(&corpus),
        "--grid",
        p(&grid),
        "--out",
        p(&out),
    ]);
    let csv = fs::read_to_string(out.join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let metric_cols = [
        "contact_precision_at_l5",
        "ss_accuracy",
        "pseudo_perplexity",
    ];
    let idx: Vec<usize> = metric_cols
        .iter()
        .map(|m| header.iter().position(|h| h == m).unwrap())
        .collect();
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    let populated = rows.iter().all(|r| {
        idx.iter()
            .all(|&i| r[i].parse::<f64>().map(f64::is_finite).unwrap_or(false))
    });
    let vocab = header.iter().position(|h| *h == "struct_vocab").unwrap();
    let ks: Vec<&str> = rows.iter().map(|r| r[vocab]).collect();
    let pass = rows.len() == 2 && populated && ks == ["20", "512"];
    report(
        10,
        "codebook ablation harness",
        pass,
        &format!(
            "{} rows, K = {:?}, probe metrics populated: {}",
            rows.len(),
            ks,
            populated
        ),
    );
    assert!(pass);
}
