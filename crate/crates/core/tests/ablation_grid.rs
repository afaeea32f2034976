//! A two-cell codebook-size grid run end to end.

use structalign::ablation::{run_ablation_grid, write_grid_csv, GridCell, GridSpec, GRID_HEADER};
use structalign::eval::ProbeConfig;
use structalign::model::PlmConfig;
use structalign::selection::StrategyKind;
use structalign::synthgen::{generate, GeneratorConfig};
use structalign::trainer::TrainConfig;

#[test]
fn codebook_size_grid_fills_every_metric() {
    let recs = generate(&GeneratorConfig {
        n_proteins: 60,
        length_range: (16, 24),
        seed: 8,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let spec = GridSpec {
        base: TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_records: 8,
            max_len: 24,
            strategy: StrategyKind::Excess,
            model: PlmConfig {
                hidden: 16,
                layers: 2,
                heads: 2,
                max_len: 24,
                proj_dim: 8,
                gnn_dim: 16,
                ..PlmConfig::default()
            },
            ..TrainConfig::default()
        },
        probe: ProbeConfig {
            epochs: 3,
            hidden: 16,
            ..ProbeConfig::default()
        },
        cells: [20, 512]
            .iter()
            .map(|&k| GridCell {
                name: format!("k{}", k),
                struct_vocab: Some(k),
                ..GridCell::default()
            })
            .collect(),
        ..GridSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let rows = run_ablation_grid(&recs, &spec, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].struct_vocab, 20);
    assert_eq!(rows[1].struct_vocab, 512);
    for r in &rows {
        assert!(r.val.overall.is_finite());
        assert!((0.0..=1.0).contains(&r.contact_precision_at_l5));
        assert!((0.0..=1.0).contains(&r.ss_accuracy));
        assert!(r.pseudo_perplexity.is_finite() && r.pseudo_perplexity > 1.0);
    }
    assert!(dir.path().join("cells/k20").is_dir());
    assert!(dir.path().join("reference-k20").is_dir());

    let csv = dir.path().join("grid.csv");
    write_grid_csv(&csv, &rows).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], GRID_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1..]
        .iter()
        .all(|l| !l.split(',').skip(7).any(|f| f.is_empty() || f == "NaN")));
}
