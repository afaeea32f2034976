//! Evaluation on a frozen model: contact and secondary-structure probes,
//! pseudo-perplexity, zero-shot substitution scoring, rank correlation and
//! residue embedding export.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{residue_symbol, ProteinRecord, SsLabel, NUM_RESIDUES};
use crate::error::{Error, Result};
use crate::model::{mask_position, ModelBundle};
use crate::nn::kernels::log_softmax;
use crate::nn::{adamw_step, AdamWConfig, AdamWState, ParamGroup, Schedule, Tape, Tensor};
use crate::rng::{derive_seed, rng_for, stream};
use crate::synthgen::{contacts, CONTACT_MIN_SEPARATION, CONTACT_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    /// Fraction of proteins held out for scoring the probe.
    pub test_fraction: f64,
    /// Training pairs drawn per protein for the contact probe.
    pub pairs_per_protein: usize,
    /// Proteins longer than this are cut before embedding.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            hidden: 128,
            test_fraction: 0.2,
            pairs_per_protein: 256,
            max_len: 512,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta2 > 0.0
            && self.weight_decay >= 0.0
            && self.hidden > 0
            && self.test_fraction > 0.0
            && self.test_fraction < 1.0
            && self.pairs_per_protein > 0
            && self.max_len > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid probe config {:?}",
                self
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub per_protein: Vec<(String, f64)>,
    pub seed: u64,
}

/// Anything that gives log-probabilities over the residue alphabet at every
/// position of a batch of (possibly masked) sequences.
pub trait MaskedPredictor {
    /// One `L×20` tensor per sequence, rows normalized over the 20 residues.
    fn residue_log_probs(&self, sequences: &[Vec<u8>]) -> Result<Vec<Tensor>>;
}

/// Sequences per forward pass when scoring many masked copies.
const MASKED_CHUNK: usize = 64;

impl MaskedPredictor for ModelBundle {
    fn residue_log_probs(&self, sequences: &[Vec<u8>]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(sequences.len());
        for chunk in sequences.chunks(MASKED_CHUNK) {
            for t in self.mlm_log_probs(chunk)? {
                // renormalize over residues only; mask and pad are never targets
                let rows: Vec<Vec<f64>> = (0..t.rows())
                    .map(|i| log_softmax(&t.row(i)[..NUM_RESIDUES]))
                    .collect();
                out.push(Tensor::from_rows(&rows)?);
            }
        }
        Ok(out)
    }
}

/// `log p(a_i | a with only position i masked)` for every position.
pub fn masked_marginals<P: MaskedPredictor + ?Sized>(
    model: &P,
    sequence: &[u8],
) -> Result<Vec<Vec<f64>>> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if let Some(&t) = sequence.iter().find(|&&t| t as usize >= NUM_RESIDUES) {
        return Err(Error::InvalidArgument(format!(
            "token {} is not a residue",
            t
        )));
    }
    let copies: Vec<Vec<u8>> = (0..sequence.len())
        .map(|i| mask_position(sequence, i))
        .collect();
    let lps = model.residue_log_probs(&copies)?;
    Ok(lps
        .iter()
        .enumerate()
        .map(|(i, t)| t.row(i).to_vec())
        .collect())
}

/// `exp` of the mean negative log-likelihood of each residue with only that
/// position masked.
pub fn pseudo_perplexity<P: MaskedPredictor + ?Sized>(model: &P, sequence: &[u8]) -> Result<f64> {
    let m = masked_marginals(model, sequence)?;
    let nll: f64 = sequence
        .iter()
        .zip(&m)
        .map(|(&a, lp)| -lp[a as usize])
        .sum::<f64>()
        / sequence.len() as f64;
    Ok(nll.exp())
}

/// A substitution: position and new residue index.
pub type Mutation = (usize, u8);

fn check_mutations(sequence: &[u8], muts: &[Mutation]) -> Result<()> {
    for &(p, r) in muts {
        if p >= sequence.len() {
            return Err(Error::InvalidArgument(format!(
                "mutation position {} outside a sequence of length {}",
                p,
                sequence.len()
            )));
        }
        if r as usize >= NUM_RESIDUES {
            return Err(Error::InvalidArgument(format!(
                "mutant residue {} is not a residue",
                r
            )));
        }
    }
    Ok(())
}

/// Sum over mutated positions of `log p(mut) − log p(wt)`, each position
/// scored with only itself masked.
pub fn zero_shot_score<P: MaskedPredictor + ?Sized>(
    model: &P,
    wild_type: &[u8],
    mutations: &[Mutation],
) -> Result<f64> {
    Ok(score_variants(model, wild_type, &[mutations.to_vec()])?[0])
}

/// Scores many variants of one wild type, reusing the masked marginals.
pub fn score_variants<P: MaskedPredictor + ?Sized>(
    model: &P,
    wild_type: &[u8],
    variants: &[Vec<Mutation>],
) -> Result<Vec<f64>> {
    for v in variants {
        check_mutations(wild_type, v)?;
    }
    let m = masked_marginals(model, wild_type)?;
    Ok(variants
        .iter()
        .map(|v| {
            v.iter()
                .map(|&(p, r)| m[p][r as usize] - m[p][wild_type[p] as usize])
                .sum()
        })
        .collect())
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs two equal-length series of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "non-finite value in correlation input".into(),
        ));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Fraction of the top `⌊L/5⌋` (at least 1) scored pairs that are contacts.
/// `scored` holds `(i, j, score)` for eligible pairs; equal scores keep the
/// lower `(i, j)` first. Returns `None` when no pair is eligible.
pub fn precision_at_l5(
    scored: &[(usize, usize, f64)],
    true_contacts: &HashSet<(usize, usize)>,
    len: usize,
) -> Option<f64> {
    if scored.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .2
            .total_cmp(&scored[a].2)
            .then((scored[a].0, scored[a].1).cmp(&(scored[b].0, scored[b].1)))
    });
    let k = (len / 5).max(1).min(scored.len());
    let hits = order[..k]
        .iter()
        .filter(|&&o| {
            let (i, j, _) = scored[o];
            true_contacts.contains(&(i.min(j), i.max(j)))
        })
        .count();
    Some(hits as f64 / k as f64)
}

/// Pairs eligible for contact evaluation: `j − i > 6`.
pub fn eligible_pairs(len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..len {
        for j in i + CONTACT_MIN_SEPARATION + 1..len {
            out.push((i, j));
        }
    }
    out
}

fn truncated(records: &[ProteinRecord], max_len: usize) -> Vec<ProteinRecord> {
    records
        .iter()
        .map(|r| {
            if r.len() > max_len {
                r.window(0, max_len)
            } else {
                r.clone()
            }
        })
        .collect()
}

/// Seeded protein-level split into (train, test).
fn probe_split(n: usize, cfg: &ProbeConfig) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(cfg.seed, &[stream::PROBE, 0]));
    let n_test = ((cfg.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// One-hidden-layer classifier trained on fixed features.
struct ProbeHead {
    groups: Vec<ParamGroup>,
}

impl ProbeHead {
    fn new(input: usize, hidden: usize, classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let mut rng = rng_for(cfg.seed, &[stream::PROBE, 1]);
        let mut g = ParamGroup::new("probe", cfg.lr, cfg.weight_decay)?;
        let mut init = |rows: usize, cols: usize| {
            let std = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            Tensor::matrix(rows, cols, data).expect("shape")
        };
        g.push("w1", init(input, hidden));
        g.push("b1", Tensor::zeros(&[hidden]));
        g.push("w2", init(hidden, classes));
        g.push("b2", Tensor::zeros(&[classes]));
        Ok(Self { groups: vec![g] })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: Tensor,
        trainable: bool,
    ) -> Result<(Vec<crate::nn::Var>, crate::nn::Var)> {
        let vars: Vec<_> = self.groups[0]
            .params
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let x = tape.constant(x);
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add_row(h, vars[1])?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, vars[2])?;
        let o = tape.add_row(o, vars[3])?;
        Ok((vars, o))
    }

    fn logits(&self, x: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, o) = self.forward(&mut tape, x, false)?;
        Ok(tape.value(o).clone())
    }

    /// Mini-batch training on `n` examples. `features(indices)` builds the
    /// input rows for a batch.
    fn train<F>(
        &mut self,
        n: usize,
        labels: &[usize],
        cfg: &ProbeConfig,
        mut features: F,
    ) -> Result<()>
    where
        F: FnMut(&[usize]) -> Result<Tensor>,
    {
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total = cfg.epochs * steps_per_epoch;
        let schedule = Schedule::new(steps_per_epoch.min(total - 1).max(1), total.max(2))?;
        let mut opt = AdamWState::new(
            &self.groups,
            AdamWConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                ..AdamWConfig::default()
            },
        );
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_for(cfg.seed, &[stream::PROBE, 2, epoch as u64]));
            for idx in order.chunks(cfg.batch_size) {
                step += 1;
                let x = features(idx)?;
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let mut tape = Tape::new();
                let (vars, o) = self.forward(&mut tape, x, true)?;
                let ce = tape.cross_entropy(o, &y)?;
                let loss = tape.mean(ce);
                let g = tape.backward(loss)?;
                let grads = vec![vars
                    .iter()
                    .map(|&v| g.get_or_zeros(v, tape.shape(v)))
                    .collect()];
                adamw_step(&mut self.groups, &grads, &mut opt, step, &schedule)?;
            }
        }
        Ok(())
    }
}

fn embed_all(bundle: &ModelBundle, records: &[ProteinRecord]) -> Result<Vec<Tensor>> {
    let seqs: Vec<Vec<u8>> = records.iter().map(|r| r.sequence.clone()).collect();
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(MASKED_CHUNK) {
        out.extend(bundle.hidden_states(chunk)?);
    }
    Ok(out)
}

fn pair_features(h: &Tensor, i: usize, j: usize, out: &mut Vec<f64>) {
    let (a, b) = (h.row(i), h.row(j));
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.extend(a.iter().zip(b).map(|(x, y)| x * y));
    out.extend(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
}

/// Contact probe: a small classifier on pairwise residue features of the
/// frozen encoder, scored by top-L/5 precision on held-out proteins.
pub fn probe_contact(
    bundle: &ModelBundle,
    records: &[ProteinRecord],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "contact probe needs at least 2 proteins".into(),
        ));
    }
    let records = truncated(records, cfg.max_len);
    let hidden = embed_all(bundle, &records)?;
    let contact_sets: Vec<HashSet<(usize, usize)>> = records
        .iter()
        .map(|r| {
            contacts(&r.coords, CONTACT_THRESHOLD, CONTACT_MIN_SEPARATION)
                .into_iter()
                .collect()
        })
        .collect();
    let (train, test) = probe_split(records.len(), cfg);

    // (protein, i, j) in random orientation, sampled per protein
    let mut examples: Vec<(usize, usize, usize)> = Vec::new();
    let mut labels = Vec::new();
    for &p in &train {
        let pairs = eligible_pairs(records[p].len());
        if pairs.is_empty() {
            continue;
        }
        let mut rng = rng_for(cfg.seed, &[stream::PROBE, 3, p as u64]);
        let take = pairs.len().min(cfg.pairs_per_protein);
        for k in sample(&mut rng, pairs.len(), take) {
            let (i, j) = pairs[k];
            let flip: bool = rng.random();
            examples.push(if flip { (p, j, i) } else { (p, i, j) });
            labels.push(contact_sets[p].contains(&(i, j)) as usize);
        }
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "no eligible residue pairs in the probe training set".into(),
        ));
    }
    let width = 4 * bundle.config.hidden;
    let mut head = ProbeHead::new(width, cfg.hidden, 2, cfg)?;
    head.train(examples.len(), &labels, cfg, |idx| {
        let mut data = Vec::with_capacity(idx.len() * width);
        for &e in idx {
            let (p, i, j) = examples[e];
            pair_features(&hidden[p], i, j, &mut data);
        }
        Tensor::matrix(idx.len(), width, data)
    })?;

    let mut per_protein = Vec::new();
    for &p in &test {
        let l = records[p].len();
        let pairs = eligible_pairs(l);
        if pairs.is_empty() {
            log::warn!(
                "protein {} (L = {}) has no eligible pair; skipped",
                records[p].id,
                l
            );
            continue;
        }
        let mut data = Vec::with_capacity(2 * pairs.len() * width);
        for &(i, j) in &pairs {
            pair_features(&hidden[p], i, j, &mut data);
            pair_features(&hidden[p], j, i, &mut data);
        }
        let logits = head.logits(Tensor::matrix(2 * pairs.len(), width, data)?)?;
        let score = |r: usize| logits.get2(r, 1) - logits.get2(r, 0);
        let scored: Vec<(usize, usize, f64)> = pairs
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| (i, j, 0.5 * (score(2 * k) + score(2 * k + 1))))
            .collect();
        if let Some(prec) = precision_at_l5(&scored, &contact_sets[p], l) {
            per_protein.push((records[p].id.clone(), prec));
        }
    }
    if per_protein.is_empty() {
        return Err(Error::InvalidArgument(
            "no held-out protein could be scored".into(),
        ));
    }
    let value = per_protein.iter().map(|(_, v)| v).sum::<f64>() / per_protein.len() as f64;
    Ok(ProbeReport {
        task: "contact".into(),
        metric: "precision_at_l5".into(),
        value,
        per_protein,
        seed: cfg.seed,
    })
}

/// Secondary-structure probe: per-residue 3-class classifier on the frozen
/// encoder's hidden states, scored by accuracy on held-out proteins.
pub fn probe_ss(
    bundle: &ModelBundle,
    records: &[ProteinRecord],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "secondary-structure probe needs at least 2 proteins".into(),
        ));
    }
    let records = truncated(records, cfg.max_len);
    let labels_of = |r: &ProteinRecord| -> Result<Vec<usize>> {
        r.ss_labels
            .as_ref()
            .map(|l| l.iter().map(|s| s.index()).collect())
            .ok_or_else(|| {
                Error::Data(format!("record {} has no secondary-structure labels", r.id))
            })
    };
    let all_labels: Vec<Vec<usize>> = records.iter().map(labels_of).collect::<Result<_>>()?;
    let hidden = embed_all(bundle, &records)?;
    let (train, test) = probe_split(records.len(), cfg);
    let width = bundle.config.hidden;
    let features: Vec<&[f64]> = train
        .iter()
        .flat_map(|&p| (0..records[p].len()).map(move |i| (p, i)))
        .map(|(p, i)| hidden[p].row(i))
        .collect();
    let labels: Vec<usize> = train
        .iter()
        .flat_map(|&p| all_labels[p].iter().copied())
        .collect();
    let per_protein = train_and_score_ss(&features, &labels, width, cfg, |head| {
        test.iter()
            .map(|&p| {
                let logits = head.logits(hidden[p].clone())?;
                let correct = (0..records[p].len())
                    .filter(|&i| argmax(logits.row(i)) == all_labels[p][i])
                    .count();
                Ok((
                    records[p].id.clone(),
                    correct as f64 / records[p].len() as f64,
                    records[p].len(),
                ))
            })
            .collect()
    })?;
    let total: usize = per_protein.iter().map(|x| x.2).sum();
    let value = per_protein.iter().map(|x| x.1 * x.2 as f64).sum::<f64>() / total as f64;
    Ok(ProbeReport {
        task: "ss".into(),
        metric: "accuracy".into(),
        value,
        per_protein: per_protein.into_iter().map(|(id, v, _)| (id, v)).collect(),
        seed: cfg.seed,
    })
}

fn train_and_score_ss<F>(
    features: &[&[f64]],
    labels: &[usize],
    width: usize,
    cfg: &ProbeConfig,
    score: F,
) -> Result<Vec<(String, f64, usize)>>
where
    F: FnOnce(&ProbeHead) -> Result<Vec<(String, f64, usize)>>,
{
    let mut head = ProbeHead::new(width, cfg.hidden, SsLabel::ALL.len(), cfg)?;
    head.train(features.len(), labels, cfg, |idx| {
        let mut data = Vec::with_capacity(idx.len() * width);
        for &k in idx {
            data.extend_from_slice(features[k]);
        }
        Tensor::matrix(idx.len(), width, data)
    })?;
    score(&head)
}

/// Per-residue 3-class probe on arbitrary fixed features (used to check
/// that a feature set is linearly informative).
pub fn ss_probe_on_features(
    features: &[Vec<Vec<f64>>],
    labels: &[Vec<SsLabel>],
    cfg: &ProbeConfig,
) -> Result<f64> {
    cfg.validate()?;
    let n = features.len();
    if n < 2 || labels.len() != n {
        return Err(Error::InvalidArgument(
            "need at least 2 labeled proteins".into(),
        ));
    }
    let width = features[0].first().map_or(0, Vec::len);
    let (train, test) = probe_split(n, cfg);
    let rows: Vec<&[f64]> = train
        .iter()
        .flat_map(|&p| features[p].iter().map(Vec::as_slice))
        .collect();
    let ys: Vec<usize> = train
        .iter()
        .flat_map(|&p| labels[p].iter().map(|l| l.index()))
        .collect();
    let scored = train_and_score_ss(&rows, &ys, width, cfg, |head| {
        test.iter()
            .map(|&p| {
                let logits = head.logits(Tensor::from_rows(&features[p])?)?;
                let correct = (0..features[p].len())
                    .filter(|&i| argmax(logits.row(i)) == labels[p][i].index())
                    .count();
                Ok((
                    String::new(),
                    correct as f64 / features[p].len() as f64,
                    features[p].len(),
                ))
            })
            .collect()
    })?;
    let total: usize = scored.iter().map(|x| x.2).sum();
    Ok(scored.iter().map(|x| x.1 * x.2 as f64).sum::<f64>() / total as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// CSV with one row per residue: protein id, index, residue, label, and the
/// encoder's hidden state.
pub fn export_embeddings(
    bundle: &ModelBundle,
    records: &[ProteinRecord],
    path: &Path,
) -> Result<usize> {
    let hidden = embed_all(bundle, records)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let cols: Vec<String> = (0..bundle.config.hidden)
        .map(|k| format!("h{}", k))
        .collect();
    writeln!(w, "protein_id,index,residue,ss,{}", cols.join(",")).map_err(io)?;
    let mut rows = 0;
    for (r, h) in records.iter().zip(&hidden) {
        let labels = r.ss_labels.as_ref().ok_or_else(|| {
            Error::Data(format!("record {} has no secondary-structure labels", r.id))
        })?;
        for i in 0..r.len() {
            let vals: Vec<String> = h.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                r.id,
                i,
                residue_symbol(r.sequence[i]),
                labels[i].as_char(),
                vals.join(",")
            )
            .map_err(io)?;
            rows += 1;
        }
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

/// Probe seed for repeat `k` of a base seed.
pub fn repeat_seed(base: u64, k: u64) -> u64 {
    derive_seed(base, &[stream::PROBE, 100 + k])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed conditional probabilities per position, independent of context.
    struct Table(Vec<Vec<f64>>);

    impl MaskedPredictor for Table {
        fn residue_log_probs(&self, sequences: &[Vec<u8>]) -> Result<Vec<Tensor>> {
            sequences
                .iter()
                .map(|s| {
                    let rows: Vec<Vec<f64>> = (0..s.len())
                        .map(|i| self.0[i].iter().map(|p| p.ln()).collect())
                        .collect();
                    Tensor::from_rows(&rows)
                })
                .collect()
        }
    }

    fn probs(pairs: &[(usize, f64)]) -> Vec<f64> {
        let rest = 1.0 - pairs.iter().map(|p| p.1).sum::<f64>();
        let free = NUM_RESIDUES - pairs.len();
        let mut v = vec![rest / free as f64; NUM_RESIDUES];
        for &(i, p) in pairs {
            v[i] = p;
        }
        v
    }

    #[test]
    fn hand_set_pseudo_perplexity() {
        let t = Table(vec![probs(&[(0, 0.5)]), probs(&[(1, 0.25)])]);
        let ppl = pseudo_perplexity(&t, &[0, 1]).unwrap();
        assert!((ppl - 8f64.sqrt()).abs() < 1e-12);
        let uniform = Table(vec![vec![1.0 / 20.0; 20]; 5]);
        assert!((pseudo_perplexity(&uniform, &[3, 4, 5, 6, 7]).unwrap() - 20.0).abs() < 1e-12);
        let perfect = Table(vec![probs(&[(2, 1.0 - 1e-15)]); 3]);
        assert!((pseudo_perplexity(&perfect, &[2, 2, 2]).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hand_set_substitution_score() {
        let t = Table(vec![probs(&[(0, 0.5), (3, 0.25)]), probs(&[])]);
        let s = zero_shot_score(&t, &[0, 1], &[(0, 3)]).unwrap();
        assert!((s + 2f64.ln()).abs() < 1e-12);
        assert_eq!(zero_shot_score(&t, &[0, 1], &[(0, 0)]).unwrap(), 0.0);
        // positions 1 are uniform, so p(mut) = p(wt)
        assert_eq!(zero_shot_score(&t, &[0, 1], &[(1, 7)]).unwrap(), 0.0);
        let double = zero_shot_score(&t, &[0, 1], &[(0, 3), (1, 7)]).unwrap();
        assert!((double - s).abs() < 1e-15);
        assert!(zero_shot_score(&t, &[0, 1], &[(2, 3)]).is_err());
        assert!(zero_shot_score(&t, &[0, 1], &[(0, 20)]).is_err());
    }

    #[test]
    fn spearman_unit_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &x).unwrap(), 1.0);
        assert_eq!(spearman(&x, &[-1.0, -2.0, -3.0, -4.0]).unwrap(), -1.0);
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(spearman(&x, &[2.0; 4]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 5.0]),
            vec![2.5, 4.0, 2.5, 1.0]
        );
    }

    #[test]
    fn oracle_scorer_is_perfect_and_floor_rule_holds() {
        let l = 20;
        let truth: HashSet<(usize, usize)> =
            [(0, 10), (2, 15), (3, 19), (5, 12)].into_iter().collect();
        let scored: Vec<_> = eligible_pairs(l)
            .into_iter()
            .map(|(i, j)| (i, j, truth.contains(&(i, j)) as u8 as f64))
            .collect();
        assert_eq!(precision_at_l5(&scored, &truth, l), Some(1.0));
        // L = 9: one pair, (0, 8) or (1, 8)/(0, 7)... only j - i > 6
        let small = eligible_pairs(9);
        assert_eq!(small, vec![(0, 7), (0, 8), (1, 8)]);
        let s: Vec<_> = small.iter().map(|&(i, j)| (i, j, 0.0)).collect();
        let t: HashSet<_> = [(0, 7)].into_iter().collect();
        // all tied: the lowest pair is taken, and only one is counted
        assert_eq!(precision_at_l5(&s, &t, 9), Some(1.0));
        assert_eq!(precision_at_l5(&[], &t, 9), None);
    }

    #[test]
    fn random_scores_match_contact_density() {
        let l = 30;
        let pairs = eligible_pairs(l);
        let truth: HashSet<(usize, usize)> = pairs
            .iter()
            .copied()
            .filter(|&(i, j)| (i * 7 + j) % 5 == 0)
            .collect();
        let expected = truth.len() as f64 / pairs.len() as f64;
        let mut rng = rng_for(3, &[]);
        let trials = 4000;
        let mut total = 0.0;
        for _ in 0..trials {
            let s: Vec<_> = pairs
                .iter()
                .map(|&(i, j)| (i, j, rng.random::<f64>()))
                .collect();
            total += precision_at_l5(&s, &truth, l).unwrap();
        }
        assert!((total / trials as f64 - expected).abs() < 0.02);
    }

    #[test]
    fn separable_features_are_learned() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for p in 0..10 {
            let ls: Vec<SsLabel> = (0..30).map(|i| SsLabel::ALL[(i + p) % 3]).collect();
            feats.push(
                ls.iter()
                    .map(|l| {
                        let mut v = vec![0.0; 3];
                        v[l.index()] = 1.0;
                        v
                    })
                    .collect(),
            );
            labels.push(ls);
        }
        let cfg = ProbeConfig {
            epochs: 30,
            hidden: 16,
            lr: 1e-2,
            ..ProbeConfig::default()
        };
        let acc = ss_probe_on_features(&feats, &labels, &cfg).unwrap();
        assert!(acc > 0.99, "{}", acc);
        assert_eq!(acc, ss_probe_on_features(&feats, &labels, &cfg).unwrap());
    }

    #[test]
    fn constant_features_give_chance_accuracy() {
        let labels: Vec<Vec<SsLabel>> = (0..10)
            .map(|p| (0..30).map(|i| SsLabel::ALL[(i + p) % 3]).collect())
            .collect();
        let feats: Vec<Vec<Vec<f64>>> = labels
            .iter()
            .map(|l| vec![vec![1.0, 1.0]; l.len()])
            .collect();
        let cfg = ProbeConfig {
            epochs: 5,
            hidden: 8,
            ..ProbeConfig::default()
        };
        let acc = ss_probe_on_features(&feats, &labels, &cfg).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 0.01, "{}", acc);
    }
}
