//! Training objectives: masked-residue cross-entropy, residue-level
//! contrastive losses in both directions, structure-token prediction, and
//! their weighted combination with per-family residue selection.

use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::model::{Bound, ModelBundle};
use crate::nn::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub latent: f64,
    pub physical: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            latent: 0.5,
            physical: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(latent: f64, physical: f64) -> Result<Self> {
        let w = Self { latent, physical };
        w.validate()?;
        Ok(w)
    }

    /// Both weights non-negative; when both tasks are on they sum to 1.
    pub fn validate(&self) -> Result<()> {
        if !(self.latent >= 0.0 && self.physical >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights ({}, {}) must be >= 0",
                self.latent, self.physical
            )));
        }
        if self.latent > 0.0
            && self.physical > 0.0
            && (self.latent + self.physical - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights ({}, {}) must sum to 1",
                self.latent, self.physical
            )));
        }
        Ok(())
    }
}

/// Per-residue values of the three structural loss families, indexed by flat
/// batch position.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidueLossSet {
    pub a2g: Vec<f64>,
    pub g2a: Vec<f64>,
    pub physical: Vec<f64>,
    /// `index[flat] = (record, residue)`.
    pub index: Vec<(usize, usize)>,
}

impl ResidueLossSet {
    pub fn len(&self) -> usize {
        self.a2g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a2g.is_empty()
    }

    pub fn families(&self) -> [(&'static str, &[f64]); 3] {
        [
            ("a2g", &self.a2g),
            ("g2a", &self.g2a),
            ("physical", &self.physical),
        ]
    }
}

/// One boolean per residue per family; `true` keeps the residue's loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMasks {
    pub a2g: Vec<bool>,
    pub g2a: Vec<bool>,
    pub physical: Vec<bool>,
}

impl SelectionMasks {
    pub fn all(n: usize) -> Self {
        Self {
            a2g: vec![true; n],
            g2a: vec![true; n],
            physical: vec![true; n],
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        let c = |m: &[bool]| m.iter().filter(|&&b| b).count();
        [c(&self.a2g), c(&self.g2a), c(&self.physical)]
    }
}

/// Scalar summary of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub mlm: f64,
    pub a2g: f64,
    pub g2a: f64,
    pub latent: f64,
    pub physical: f64,
    pub overall: f64,
}

/// Per-residue loss vectors of one forward pass, still on the tape.
pub struct ResidueGraph {
    pub mlm: Var,
    pub a2g: Var,
    pub g2a: Var,
    pub physical: Var,
    pub index: Vec<(usize, usize)>,
}

impl ResidueGraph {
    pub fn values(&self, tape: &Tape) -> ResidueLossSet {
        ResidueLossSet {
            a2g: tape.value(self.a2g).data().to_vec(),
            g2a: tape.value(self.g2a).data().to_vec(),
            physical: tape.value(self.physical).data().to_vec(),
            index: self.index.clone(),
        }
    }
}

/// Cross-entropy at every masked position. Returns a vector var with one
/// loss per masked position, in flat order.
pub fn mlm_losses(tape: &mut Tape, mlm_logits: Var, batch: &Batch) -> Result<Var> {
    let (positions, targets) = batch.masked_targets();
    if positions.is_empty() {
        return Err(Error::InvalidArgument(
            "batch has no masked positions".into(),
        ));
    }
    let picked = tape.gather_rows(mlm_logits, &positions)?;
    let targets: Vec<usize> = targets.into_iter().collect();
    tape.cross_entropy(picked, &targets)
}

/// Row-wise cross-entropy of `delta` against its diagonal: each sequence
/// residue should pick out its own structure residue.
pub fn a2g_losses(tape: &mut Tape, delta: Var) -> Result<Var> {
    let (r, c) = (tape.value(delta).rows(), tape.value(delta).cols());
    if r != c || r == 0 {
        return Err(Error::Shape(format!("similarity matrix is {}x{}", r, c)));
    }
    let diag: Vec<usize> = (0..r).collect();
    tape.cross_entropy(delta, &diag)
}

/// Column-wise counterpart of [`a2g_losses`]: each structure residue should
/// pick out its own sequence residue.
pub fn g2a_losses(tape: &mut Tape, delta: Var) -> Result<Var> {
    let t = tape.transpose(delta);
    a2g_losses(tape, t)
}

/// Mean of the two contrastive directions.
pub fn latent_loss(a2g_mean: f64, g2a_mean: f64) -> f64 {
    0.5 * (a2g_mean + g2a_mean)
}

/// Cross-entropy of structure-token logits against every residue's token.
pub fn physical_losses(tape: &mut Tape, struct_logits: Var, batch: &Batch) -> Result<Var> {
    let tokens = batch.flat_tokens()?;
    let k = tape.value(struct_logits).cols();
    if let Some(&t) = tokens.iter().find(|&&t| t >= k) {
        return Err(Error::Data(format!(
            "structure token {} outside a vocabulary of {}",
            t, k
        )));
    }
    tape.cross_entropy(struct_logits, &tokens)
}

/// One forward pass over the masked batch producing every per-residue loss.
pub fn residue_graph(tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<ResidueGraph> {
    let segments = batch.segments();
    let hidden = bound.encode(tape, &batch.flat_inputs(), &segments)?;
    let mlm_logits = bound.mlm_logits(tape, hidden)?;
    let mlm = mlm_losses(tape, mlm_logits, batch)?;
    let gnn = tape.constant(batch.gnn_matrix()?);
    let delta = bound.similarity(tape, hidden, gnn)?;
    let a2g = a2g_losses(tape, delta)?;
    let g2a = g2a_losses(tape, delta)?;
    let struct_logits = bound.struct_logits(tape, hidden)?;
    let physical = physical_losses(tape, struct_logits, batch)?;
    Ok(ResidueGraph {
        mlm,
        a2g,
        g2a,
        physical,
        index: batch.index_map(),
    })
}

fn selected_mean(tape: &mut Tape, losses: Var, mask: &[bool], family: &str) -> Result<Var> {
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "no {} residues selected",
            family
        )));
    }
    let w = 1.0 / count as f64;
    let weights = mask.iter().map(|&b| if b { w } else { 0.0 }).collect();
    tape.weighted_sum(losses, weights)
}

/// `mlm + γ_latent·latent + γ_physical·physical`, each structural family
/// averaged over its selected residues. Returns the scalar loss var and the
/// component values.
pub fn combine(
    tape: &mut Tape,
    graph: &ResidueGraph,
    weights: &LossWeights,
    masks: &SelectionMasks,
) -> Result<(Var, LossValues)> {
    weights.validate()?;
    let mlm = tape.mean(graph.mlm);
    let a2g = selected_mean(tape, graph.a2g, &masks.a2g, "a2g")?;
    let g2a = selected_mean(tape, graph.g2a, &masks.g2a, "g2a")?;
    let physical = selected_mean(tape, graph.physical, &masks.physical, "physical")?;
    let sum = tape.add(a2g, g2a)?;
    let latent = tape.scale(sum, 0.5);
    let wl = tape.scale(latent, weights.latent);
    let wp = tape.scale(physical, weights.physical);
    let s = tape.add(mlm, wl)?;
    let overall = tape.add(s, wp)?;
    let v = |x: Var| tape.value(x).item();
    let values = LossValues {
        mlm: v(mlm),
        a2g: v(a2g),
        g2a: v(g2a),
        latent: v(latent),
        physical: v(physical),
        overall: v(overall),
    };
    Ok((overall, values))
}

/// Per-residue losses of a model that is not being trained (no gradients).
pub fn residue_losses(bundle: &ModelBundle, batch: &Batch) -> Result<(ResidueLossSet, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, false)?;
    let g = residue_graph(&mut tape, &bound, batch)?;
    let mlm = tape.value(g.mlm).data().to_vec();
    Ok((g.values(&tape), mlm))
}

/// Objective value without gradients, with every residue selected.
pub fn evaluate(bundle: &ModelBundle, batch: &Batch, weights: &LossWeights) -> Result<LossValues> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, false)?;
    let g = residue_graph(&mut tape, &bound, batch)?;
    let masks = SelectionMasks::all(batch.total_residues());
    combine(&mut tape, &g, weights, &masks).map(|(_, v)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn ce_by_hand(row: &[f64], target: usize) -> f64 {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - row[target]
    }

    #[test]
    fn uniform_similarity_gives_log_n() {
        for n in [2usize, 17, 64] {
            let mut tape = Tape::new();
            let d = tape.constant(Tensor::full(&[n, n], 0.37));
            let a = a2g_losses(&mut tape, d).unwrap();
            let g = g2a_losses(&mut tape, d).unwrap();
            for v in tape.value(a).data().iter().chain(tape.value(g).data()) {
                assert!((v - (n as f64).ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_residue_contrastive_loss_is_zero() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::full(&[1, 1], 3.0));
        let a = a2g_losses(&mut tape, d).unwrap();
        assert_eq!(tape.value(a).item(), 0.0);
    }

    #[test]
    fn scaled_identity_matches_hand_value() {
        let mut m = vec![0.0; 9];
        for i in 0..3 {
            m[i * 4] = 10.0;
        }
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::matrix(3, 3, m).unwrap());
        let a = a2g_losses(&mut tape, d).unwrap();
        let want = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((tape.value(a).data()[0] - want).abs() < 1e-15);
        assert!((want - 9.08e-5).abs() < 1e-6);
    }

    #[test]
    fn transpose_duality_on_random_matrices() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(11, &[]);
        for _ in 0..10 {
            let n = rng.random_range(1..9);
            let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let t = Tensor::matrix(n, n, data).unwrap();
            let mut tape = Tape::new();
            let d = tape.constant(t.clone());
            let dt = tape.constant(t.transpose());
            let a = a2g_losses(&mut tape, d).unwrap();
            let g = g2a_losses(&mut tape, dt).unwrap();
            let ma = tape.value(a).sum() / n as f64;
            let mg = tape.value(g).sum() / n as f64;
            assert!((ma - mg).abs() < 1e-12);
            // hand-computed row losses
            for i in 0..n {
                let want = ce_by_hand(t.row(i), i);
                assert!((tape.value(a).data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn latent_is_arithmetic_mean() {
        assert_eq!(latent_loss(0.0, 0.0), 0.0);
        assert!((latent_loss(0.2, 0.4) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.5, 0.5).is_ok());
        assert!(LossWeights::new(0.0, 0.5).is_ok());
        assert!(LossWeights::new(1.0, 0.0).is_ok());
        assert!(LossWeights::new(0.6, 0.6).is_err());
        assert!(LossWeights::new(-0.1, 0.0).is_err());
    }
}
