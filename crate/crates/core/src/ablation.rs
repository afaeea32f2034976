//! Grids of alignment runs that differ in one or two settings, each
//! evaluated with the same probes on the same held-out proteins.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    curate_reference, ProteinRecord, REFERENCE_MAX_RESOLUTION, REFERENCE_MAX_RFREE,
};
use crate::error::{Error, Result};
use crate::eval::{probe_contact, probe_ss, pseudo_perplexity, ProbeConfig};
use crate::losses::LossValues;
use crate::model::ModelBundle;
use crate::rng::{derive_seed, rng_for, stream};
use crate::selection::StrategyKind;
use crate::synthgen::{surrogate_gnn_embed, EmbedConfig};
use crate::trainer::{align, ensure_structure_inputs, train_reference, RunOptions, TrainConfig};

/// One row of the grid. Unset fields keep the base configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub name: String,
    pub strategy: Option<StrategyKind>,
    pub rho: Option<f64>,
    pub gamma_latent: Option<f64>,
    pub gamma_physical: Option<f64>,
    /// Codebook size; structure tokens are refit at this size.
    pub struct_vocab: Option<usize>,
    /// Neighbour count of the structure encoder; embeddings are recomputed.
    pub k_neighbors: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub probe: ProbeConfig,
    /// Fraction of proteins held out from training for the probes.
    pub probe_fraction: f64,
    pub res_max: f64,
    pub rfree_max: f64,
    pub cells: Vec<GridCell>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            probe: ProbeConfig::default(),
            probe_fraction: 0.2,
            res_max: REFERENCE_MAX_RESOLUTION,
            rfree_max: REFERENCE_MAX_RFREE,
            cells: Vec::new(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::InvalidArgument("ablation grid has no cells".into()));
        }
        if !(self.probe_fraction > 0.0 && self.probe_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "probe_fraction {} outside (0, 1)",
                self.probe_fraction
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.cells {
            if c.name.is_empty()
                || c.name.contains(['/', ',', '\\'])
                || !seen.insert(c.name.as_str())
            {
                return Err(Error::InvalidArgument(format!(
                    "bad or duplicate cell name {:?}",
                    c.name
                )));
            }
            self.cell_config(c)?.validate()?;
            if c.k_neighbors == Some(0) {
                return Err(Error::InvalidArgument(format!(
                    "cell {}: k_neighbors must be positive",
                    c.name
                )));
            }
        }
        self.base.validate()?;
        self.probe.validate()
    }

    pub fn cell_config(&self, cell: &GridCell) -> Result<TrainConfig> {
        let mut cfg = self.base.clone();
        if let Some(s) = cell.strategy {
            cfg.strategy = s;
        }
        if let Some(r) = cell.rho {
            cfg.rho = r;
        }
        if let Some(g) = cell.gamma_latent {
            cfg.gamma_latent = g;
        }
        if let Some(g) = cell.gamma_physical {
            cfg.gamma_physical = g;
        }
        if let Some(k) = cell.struct_vocab {
            cfg.model.struct_vocab = k;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub strategy: StrategyKind,
    pub rho: f64,
    pub gamma_latent: f64,
    pub gamma_physical: f64,
    pub struct_vocab: usize,
    pub k_neighbors: Option<usize>,
    pub val: LossValues,
    pub contact_precision_at_l5: f64,
    pub ss_accuracy: f64,
    pub pseudo_perplexity: f64,
}

pub const GRID_HEADER: &str =
    "name,strategy,rho,gamma_latent,gamma_physical,struct_vocab,k_neighbors,\
val_mlm,val_a2g,val_g2a,val_latent,val_physical,val_overall,\
contact_precision_at_l5,ss_accuracy,pseudo_perplexity";

impl GridRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.name,
            self.strategy,
            self.rho,
            self.gamma_latent,
            self.gamma_physical,
            self.struct_vocab,
            self.k_neighbors.map(|k| k.to_string()).unwrap_or_default(),
            self.val.mlm,
            self.val.a2g,
            self.val.g2a,
            self.val.latent,
            self.val.physical,
            self.val.overall,
            self.contact_precision_at_l5,
            self.ss_accuracy,
            self.pseudo_perplexity
        )
    }
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut s = String::from(GRID_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Seeded split of record indices into (train, probe).
fn probe_holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::PROBE, 9]));
    let n_probe = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut probe = order[..n_probe].to_vec();
    let mut train = order[n_probe..].to_vec();
    probe.sort_unstable();
    train.sort_unstable();
    (train, probe)
}

/// Records with structure inputs matching a cell: embeddings recomputed
/// when the cell changes the encoder, tokens refit when it changes the
/// codebook. Train and probe records share one codebook, fit on train.
fn prepare(
    train: &[ProteinRecord],
    probe: &[ProteinRecord],
    cfg: &TrainConfig,
    cell: &GridCell,
) -> Result<(Vec<ProteinRecord>, Vec<ProteinRecord>)> {
    let mut train = train.to_vec();
    let mut probe = probe.to_vec();
    for r in train.iter_mut().chain(probe.iter_mut()) {
        if let Some(k) = cell.k_neighbors {
            let embed = EmbedConfig {
                k_neighbors: k,
                dim: cfg.model.gnn_dim,
                ..EmbedConfig::default()
            };
            r.gnn_embedding = Some(surrogate_gnn_embed(&r.coords, &embed)?);
        }
        if cell.struct_vocab.is_some() {
            r.structure_tokens = None;
        }
    }
    if let Some(cb) = ensure_structure_inputs(&mut train, &cfg.model, cfg.seed)? {
        crate::tokenizer::tokenize_corpus(&mut probe, &cb)?;
    }
    ensure_structure_inputs(&mut probe, &cfg.model, cfg.seed)?;
    Ok((train, probe))
}

/// Trains one aligned model per cell from the same seed and evaluates each
/// on a shared held-out probe split. Reference models are trained once per
/// distinct (codebook size, encoder) combination that needs one. When
/// `out_dir` is given every cell gets its own run directory under it.
pub fn run_ablation_grid(
    corpus: &[ProteinRecord],
    spec: &GridSpec,
    out_dir: Option<&Path>,
) -> Result<Vec<GridRow>> {
    spec.validate()?;
    if corpus.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "ablation needs at least 4 proteins, got {}",
            corpus.len()
        )));
    }
    let (train_idx, probe_idx) = probe_holdout(corpus.len(), spec.probe_fraction, spec.base.seed);
    let train: Vec<ProteinRecord> = train_idx.iter().map(|&i| corpus[i].clone()).collect();
    let probe: Vec<ProteinRecord> = probe_idx.iter().map(|&i| corpus[i].clone()).collect();
    let mut references: BTreeMap<(usize, Option<usize>), ModelBundle> = BTreeMap::new();
    let mut rows = Vec::with_capacity(spec.cells.len());
    for cell in &spec.cells {
        let cfg = spec.cell_config(cell)?;
        log::info!("ablation cell {}: {:?}", cell.name, cell);
        let (cell_train, cell_probe) = prepare(&train, &probe, &cfg, cell)?;
        let key = (cfg.model.struct_vocab, cell.k_neighbors);
        if cfg.strategy().map(|s| s.needs_reference())? && !references.contains_key(&key) {
            let curated = curate_reference(&cell_train, spec.res_max, spec.rfree_max);
            let opts = RunOptions {
                out_dir: out_dir.map(|d| {
                    d.join(match key.1 {
                        Some(n) => format!("reference-k{}-n{}", key.0, n),
                        None => format!("reference-k{}", key.0),
                    })
                }),
                ..RunOptions::default()
            };
            references.insert(key, train_reference(&curated, &cfg, &opts)?.bundle);
        }
        let init = ModelBundle::init(&cfg.model, derive_seed(cfg.seed, &[stream::INIT]))?;
        let opts = RunOptions {
            out_dir: out_dir.map(|d| -> PathBuf { d.join("cells").join(&cell.name) }),
            ..RunOptions::default()
        };
        let out = align(init, &cell_train, references.get(&key), &cfg, &opts)?;
        let probe_cfg = ProbeConfig {
            seed: cfg.seed,
            ..spec.probe.clone()
        };
        let contact = probe_contact(&out.bundle, &cell_probe, &probe_cfg)?;
        let ss = probe_ss(&out.bundle, &cell_probe, &probe_cfg)?;
        let mut ppl = 0.0;
        for r in &cell_probe {
            let seq = &r.sequence[..r.len().min(cfg.model.max_len)];
            ppl += pseudo_perplexity(&out.bundle, seq)?;
        }
        rows.push(GridRow {
            name: cell.name.clone(),
            strategy: cfg.strategy,
            rho: cfg.rho,
            gamma_latent: cfg.gamma_latent,
            gamma_physical: cfg.gamma_physical,
            struct_vocab: cfg.model.struct_vocab,
            k_neighbors: cell.k_neighbors,
            val: out.history.last_val().unwrap_or_default(),
            contact_precision_at_l5: contact.value,
            ss_accuracy: ss.value,
            pseudo_perplexity: ppl / cell_probe.len() as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_is_rejected() {
        let spec = GridSpec::default();
        assert!(spec.validate().is_err());
        assert!(run_ablation_grid(&[], &spec, None).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let cell = GridCell {
            name: "a".into(),
            ..GridCell::default()
        };
        let spec = GridSpec {
            cells: vec![cell.clone(), cell],
            ..GridSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn cell_overrides_apply() {
        let spec = GridSpec::default();
        let cell = GridCell {
            name: "no-latent".into(),
            gamma_latent: Some(0.0),
            struct_vocab: Some(512),
            ..GridCell::default()
        };
        let cfg = spec.cell_config(&cell).unwrap();
        assert_eq!((cfg.gamma_latent, cfg.gamma_physical), (0.0, 0.5));
        assert_eq!(cfg.model.struct_vocab, 512);
        assert_eq!(cfg.rho, spec.base.rho);
    }

    #[test]
    fn holdout_partitions_indices() {
        let (a, b) = probe_holdout(50, 0.2, 3);
        assert_eq!((a.len(), b.len()), (40, 10));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
