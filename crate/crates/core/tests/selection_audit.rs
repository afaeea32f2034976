//! Excess-loss selection on a corpus with known coordinate corruption.

use structalign::corpus::{
    curate_reference, Batch, ProteinRecord, REFERENCE_MAX_RESOLUTION, REFERENCE_MAX_RFREE,
};
use structalign::losses::residue_losses;
use structalign::model::{ModelBundle, PlmConfig};
use structalign::selection::{excess_losses, StrategyKind};
use structalign::synthgen::{generate, GeneratorConfig};
use structalign::trainer::{
    align, ensure_structure_inputs, train_reference, RunOptions, TrainConfig,
};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn corrupted_residues_have_lower_excess_than_clean_hard_ones() {
    let model = PlmConfig {
        hidden: 16,
        layers: 2,
        heads: 2,
        max_len: 32,
        proj_dim: 8,
        gnn_dim: 16,
        struct_vocab: 12,
        ..PlmConfig::default()
    };
    let mut recs = generate(&GeneratorConfig {
        n_proteins: 160,
        length_range: (20, 32),
        noise_fraction: 0.3,
        seed: 41,
        ..GeneratorConfig::default()
    })
    .unwrap();
    ensure_structure_inputs(&mut recs, &model, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        warmup_epochs: 1,
        peak_lr_backbone: 1e-3,
        peak_lr_heads: 1e-3,
        strategy: StrategyKind::Excess,
        batch_records: 16,
        max_len: 32,
        seed: 41,
        model: model.clone(),
        ..TrainConfig::default()
    };
    let clean = curate_reference(&recs, REFERENCE_MAX_RESOLUTION, REFERENCE_MAX_RFREE);
    assert_eq!(clean.len(), 112);
    let reference = train_reference(&clean, &cfg, &RunOptions::default())
        .unwrap()
        .bundle;
    let init = ModelBundle::init(&model, 41).unwrap();
    let current = align(init, &recs, Some(&reference), &cfg, &RunOptions::default())
        .unwrap()
        .bundle;

    // every residue of every record, in batches of 16
    let is_noisy = |r: &ProteinRecord| r.resolution > REFERENCE_MAX_RESOLUTION;
    let (mut noisy, mut clean_d) = (Vec::new(), Vec::new());
    for (b, chunk) in recs.chunks(16).enumerate() {
        let batch = Batch::with_masking(chunk.to_vec(), 0.15, b as u64).unwrap();
        let (cur, _) = residue_losses(&current, &batch).unwrap();
        let (refl, _) = residue_losses(&reference, &batch).unwrap();
        let d = excess_losses(&cur, &refl).unwrap();
        let offs = batch.offsets();
        for (k, r) in chunk.iter().enumerate() {
            for i in offs[k]..offs[k] + r.len() {
                let row = (cur.a2g[i], d.a2g[i]);
                if is_noisy(r) {
                    noisy.push(row)
                } else {
                    clean_d.push(row)
                }
            }
        }
    }
    // clean residues at least as hard for the current model as the median corrupted one
    let mut noisy_cur: Vec<f64> = noisy.iter().map(|r| r.0).collect();
    noisy_cur.sort_by(f64::total_cmp);
    let median = noisy_cur[noisy_cur.len() / 2];
    let hard: Vec<f64> = clean_d
        .iter()
        .filter(|r| r.0 >= median)
        .map(|r| r.1)
        .collect();
    let noisy_d: Vec<f64> = noisy.iter().map(|r| r.1).collect();
    eprintln!(
        "noisy {} mean d {:.4}; clean-hard {} mean d {:.4}; median cur {:.3}",
        noisy_d.len(),
        mean(&noisy_d),
        hard.len(),
        mean(&hard),
        median
    );
    assert!(hard.len() > 20);
    assert!(mean(&noisy_d) < mean(&hard));
}
