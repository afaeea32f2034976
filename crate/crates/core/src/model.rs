//! Transformer-encoder protein language model with an MLM head, a
//! structure-token head, and the two projections into the shared space used
//! for residue-level contrastive alignment.
//!
//! Parameters live in two [`ParamGroup`]s: `backbone` (embeddings and encoder
//! layers) and `heads` (everything else). A forward pass first binds every
//! tensor onto a [`Tape`], either as a differentiable leaf or as a constant.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{MASK_TOKEN, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::nn::kernels::log_softmax;
use crate::nn::{Gradients, ParamGroup, Segment, Tape, Tensor, Var};
use crate::rng::{derive_seed, rng_for, stream};

pub const BACKBONE: &str = "backbone";
pub const HEADS: &str = "heads";
pub const DEFAULT_PEAK_LR_BACKBONE: f64 = 1e-4;
pub const DEFAULT_PEAK_LR_HEADS: f64 = 1e-3;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const INIT_LOG_SCALE: f64 = 2.659_260_036_932_778_5; // ln(1 / 0.07)
pub const MAX_LOG_SCALE: f64 = 4.605_170_185_988_092; // ln(100)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlmConfig {
    pub vocab: usize,
    /// Width of the encoder's hidden states.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Width of the shared projection space.
    pub proj_dim: usize,
    /// Width of the frozen structure embeddings.
    pub gnn_dim: usize,
    /// Number of structure tokens.
    pub struct_vocab: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ffn_mult: usize,
}

impl Default for PlmConfig {
    fn default() -> Self {
        Self {
            vocab: VOCAB_SIZE,
            hidden: 64,
            layers: 4,
            heads: 4,
            max_len: 64,
            proj_dim: 32,
            gnn_dim: 16,
            struct_vocab: 20,
            ffn_mult: 2,
        }
    }
}

impl PlmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab != VOCAB_SIZE {
            return bad(format!("vocab must be {}, got {}", VOCAB_SIZE, self.vocab));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 || self.max_len == 0 || self.ffn_mult == 0 {
            return bad("layers, max_len and ffn_mult must be positive".into());
        }
        if self.proj_dim < 4 {
            return bad(format!("projection width {} must be >= 4", self.proj_dim));
        }
        if self.gnn_dim == 0 || self.struct_vocab < 2 {
            return bad("gnn_dim must be positive and struct_vocab >= 2".into());
        }
        Ok(())
    }

    /// The smaller model used as the selection reference: half the layers and
    /// half the hidden width (rounded to a multiple of the head count).
    pub fn reference(&self) -> Self {
        let heads = self.heads.min((self.hidden / 2).max(1));
        let hidden = ((self.hidden / 2).max(heads) / heads) * heads;
        Self {
            hidden,
            heads,
            layers: (self.layers / 2).max(1),
            ..self.clone()
        }
    }

    pub fn param_count(&self) -> usize {
        param_shapes(self)
            .iter()
            .map(|(_, _, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// (group, name, shape) for every parameter, in binding order.
fn param_shapes(c: &PlmConfig) -> Vec<(&'static str, String, Vec<usize>)> {
    let d = c.hidden;
    let f = c.hidden * c.ffn_mult;
    let mut out = vec![
        (BACKBONE, "tok_emb".to_string(), vec![c.vocab, d]),
        (BACKBONE, "pos_emb".to_string(), vec![c.max_len, d]),
    ];
    for l in 0..c.layers {
        let p = |s: &str| format!("layer{}.{}", l, s);
        out.extend([
            (BACKBONE, p("ln1.g"), vec![d]),
            (BACKBONE, p("ln1.b"), vec![d]),
            (BACKBONE, p("wq"), vec![d, d]),
            (BACKBONE, p("bq"), vec![d]),
            (BACKBONE, p("wk"), vec![d, d]),
            (BACKBONE, p("bk"), vec![d]),
            (BACKBONE, p("wv"), vec![d, d]),
            (BACKBONE, p("bv"), vec![d]),
            (BACKBONE, p("wo"), vec![d, d]),
            (BACKBONE, p("bo"), vec![d]),
            (BACKBONE, p("ln2.g"), vec![d]),
            (BACKBONE, p("ln2.b"), vec![d]),
            (BACKBONE, p("ff1.w"), vec![d, f]),
            (BACKBONE, p("ff1.b"), vec![f]),
            (BACKBONE, p("ff2.w"), vec![f, d]),
            (BACKBONE, p("ff2.b"), vec![d]),
        ]);
    }
    out.extend([
        (BACKBONE, "lnf.g".to_string(), vec![d]),
        (BACKBONE, "lnf.b".to_string(), vec![d]),
        (HEADS, "mlm.w1".to_string(), vec![d, d]),
        (HEADS, "mlm.b1".to_string(), vec![d]),
        (HEADS, "mlm.w2".to_string(), vec![d, c.vocab]),
        (HEADS, "mlm.b2".to_string(), vec![c.vocab]),
        (HEADS, "struct.w1".to_string(), vec![d, d]),
        (HEADS, "struct.b1".to_string(), vec![d]),
        (HEADS, "struct.w2".to_string(), vec![d, c.struct_vocab]),
        (HEADS, "struct.b2".to_string(), vec![c.struct_vocab]),
        (HEADS, "proj_a".to_string(), vec![d, c.proj_dim]),
        (HEADS, "proj_g".to_string(), vec![c.gnn_dim, c.proj_dim]),
        (HEADS, "log_scale".to_string(), vec![1]),
    ]);
    out
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if name == "log_scale" {
        return Tensor::new(shape.to_vec(), vec![INIT_LOG_SCALE]).expect("scalar");
    }
    if leaf == "g" {
        return Tensor::full(shape, 1.0);
    }
    if shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let std = if name.ends_with("_emb") {
        0.02
    } else {
        1.0 / (shape[0] as f64).sqrt()
    };
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// All trainable state of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: PlmConfig,
    /// `[backbone, heads]`.
    pub groups: Vec<ParamGroup>,
    pub frozen: bool,
}

impl ModelBundle {
    pub fn init(config: &PlmConfig, seed: u64) -> Result<Self> {
        Self::init_with_rates(
            config,
            seed,
            DEFAULT_PEAK_LR_BACKBONE,
            DEFAULT_PEAK_LR_HEADS,
            DEFAULT_WEIGHT_DECAY,
        )
    }

    pub fn init_with_rates(
        config: &PlmConfig,
        seed: u64,
        lr_backbone: f64,
        lr_heads: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        config.validate()?;
        let mut backbone = ParamGroup::new(BACKBONE, lr_backbone, weight_decay)?;
        let mut heads = ParamGroup::new(HEADS, lr_heads, weight_decay)?;
        for (k, (group, name, shape)) in param_shapes(config).into_iter().enumerate() {
            // one stream per tensor so that resetting a subset is reproducible
            let mut rng = rng_for(seed, &[stream::INIT, k as u64]);
            let t = init_tensor(&name, &shape, &mut rng);
            if group == BACKBONE {
                backbone.push(name, t);
            } else {
                heads.push(name, t);
            }
        }
        Ok(Self {
            config: config.clone(),
            groups: vec![backbone, heads],
            frozen: false,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.groups
            .iter()
            .find_map(|g| g.position(name).map(|i| &g.params[i]))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::Frozen(format!("cannot modify {}", name)));
        }
        self.groups
            .iter_mut()
            .find_map(|g| g.position(name).map(move |i| &mut g.params[i]))
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {}", name)))
    }

    /// Mutable access for the optimizer; refused once the bundle is frozen.
    pub fn groups_mut(&mut self) -> Result<&mut [ParamGroup]> {
        if self.frozen {
            return Err(Error::Frozen("parameter update attempted".into()));
        }
        Ok(&mut self.groups)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn set_learning_rates(
        &mut self,
        lr_backbone: f64,
        lr_heads: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (g, lr) in self.groups_mut()?.iter_mut().zip([lr_backbone, lr_heads]) {
            let fresh = ParamGroup::new(g.name.clone(), lr, weight_decay)?;
            g.peak_lr = fresh.peak_lr;
            g.weight_decay = fresh.weight_decay;
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.param("log_scale")
            .map(|t| t.item().exp())
            .unwrap_or(f64::NAN)
    }

    /// Keeps the contrastive scale at or below 100.
    pub fn clamp_scale(&mut self) -> Result<()> {
        let t = self.param_mut("log_scale")?;
        let v = t.data()[0].min(MAX_LOG_SCALE);
        t.data_mut()[0] = v;
        Ok(())
    }

    /// Re-draws the structure head, both projections and the scale, leaving
    /// the encoder and MLM head untouched.
    pub fn reset_alignment_heads(&mut self, seed: u64) -> Result<()> {
        let shapes = param_shapes(&self.config);
        for (k, (_, name, shape)) in shapes.into_iter().enumerate() {
            if name.starts_with("struct.") || name.starts_with("proj_") || name == "log_scale" {
                let mut rng = rng_for(derive_seed(seed, &[1]), &[stream::INIT, k as u64]);
                *self.param_mut(&name)? = init_tensor(&name, &shape, &mut rng);
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.groups
            .iter()
            .flat_map(|g| &g.params)
            .all(Tensor::is_finite)
    }

    /// Order-sensitive checksum over every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.groups.iter().flat_map(|g| &g.params) {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Puts every parameter on `tape`: as leaves when `trainable`, otherwise
    /// as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut vars: Vec<Vec<Var>> = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            vars.push(
                g.params
                    .iter()
                    .map(|t| {
                        if trainable {
                            tape.leaf(t.clone())
                        } else {
                            tape.constant(t.clone())
                        }
                    })
                    .collect(),
            );
        }
        let flat: Vec<Var> = vars.iter().flatten().copied().collect();
        let mut it = flat.into_iter();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::Shape("parameter list too short".into()))
        };
        let tok_emb = next()?;
        let pos_emb = next()?;
        let mut layers = Vec::with_capacity(self.config.layers);
        for _ in 0..self.config.layers {
            layers.push(LayerVars {
                ln1_g: next()?,
                ln1_b: next()?,
                wq: next()?,
                bq: next()?,
                wk: next()?,
                bk: next()?,
                wv: next()?,
                bv: next()?,
                wo: next()?,
                bo: next()?,
                ln2_g: next()?,
                ln2_b: next()?,
                ff1_w: next()?,
                ff1_b: next()?,
                ff2_w: next()?,
                ff2_b: next()?,
            });
        }
        let lnf_g = next()?;
        let lnf_b = next()?;
        let mlm = HeadVars {
            w1: next()?,
            b1: next()?,
            w2: next()?,
            b2: next()?,
        };
        let structure = HeadVars {
            w1: next()?,
            b1: next()?,
            w2: next()?,
            b2: next()?,
        };
        Ok(Bound {
            config: self.config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            mlm,
            structure,
            proj_a: next()?,
            proj_g: next()?,
            log_scale: next()?,
            vars,
        })
    }

    /// Final hidden states for a set of unpadded sequences, one tensor each.
    pub fn hidden_states(&self, sequences: &[Vec<u8>]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let (flat, segments) = pack(sequences);
        let h = bound.encode(&mut tape, &flat, &segments)?;
        let hv = tape.value(h);
        Ok(segments
            .iter()
            .map(|s| hv.slice_rows(s.start, s.start + s.len))
            .collect())
    }

    /// Softmax over the MLM vocabulary at every position of every sequence.
    pub fn mlm_log_probs(&self, sequences: &[Vec<u8>]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let (flat, segments) = pack(sequences);
        let h = bound.encode(&mut tape, &flat, &segments)?;
        let logits = bound.mlm_logits(&mut tape, h)?;
        let mut lv = tape.value(logits).clone();
        let c = lv.cols();
        for row in lv.data_mut().chunks_mut(c) {
            let lp = log_softmax(row);
            row.copy_from_slice(&lp);
        }
        Ok(segments
            .iter()
            .map(|s| lv.slice_rows(s.start, s.start + s.len))
            .collect())
    }
}

/// Concatenates sequences and returns their row segments.
pub fn pack(sequences: &[Vec<u8>]) -> (Vec<u8>, Vec<Segment>) {
    let mut flat = Vec::with_capacity(sequences.iter().map(Vec::len).sum());
    let mut segments = Vec::with_capacity(sequences.len());
    for s in sequences {
        segments.push(Segment {
            start: flat.len(),
            len: s.len(),
        });
        flat.extend_from_slice(s);
    }
    (flat, segments)
}

struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    ff1_w: Var,
    ff1_b: Var,
    ff2_w: Var,
    ff2_b: Var,
}

struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// A bundle's parameters placed on a tape.
pub struct Bound {
    config: PlmConfig,
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
    mlm: HeadVars,
    structure: HeadVars,
    proj_a: Var,
    proj_g: Var,
    log_scale: Var,
    /// Tape handles in group layout, for collecting gradients.
    pub vars: Vec<Vec<Var>>,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn mlp(tape: &mut Tape, x: Var, head: &HeadVars) -> Result<Var> {
    let h = linear(tape, x, head.w1, head.b1)?;
    let h = tape.gelu(h);
    linear(tape, h, head.w2, head.b2)
}

impl Bound {
    pub fn config(&self) -> &PlmConfig {
        &self.config
    }

    /// Gradients in group layout; parameters the loss ignores get zeros.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Vec<Tensor>> {
        self.vars
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&v| grads.get_or_zeros(v, tape.shape(v)))
                    .collect()
            })
            .collect()
    }

    /// Encoder over packed sequences; attention never crosses a segment.
    /// Returns `N×hidden`.
    pub fn encode(&self, tape: &mut Tape, tokens: &[u8], segments: &[Segment]) -> Result<Var> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token {} outside the vocabulary",
                t
            )));
        }
        let mut positions = Vec::with_capacity(tokens.len());
        for s in segments {
            if s.len > self.config.max_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence of length {} exceeds max_len {}",
                    s.len, self.config.max_len
                )));
            }
            positions.extend(0..s.len);
        }
        if positions.len() != tokens.len() {
            return Err(Error::Shape("segments do not cover the token list".into()));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let te = tape.gather_rows(self.tok_emb, &idx)?;
        let pe = tape.gather_rows(self.pos_emb, &positions)?;
        let mut x = tape.add(te, pe)?;
        for l in &self.layers {
            let h = tape.layer_norm(x, l.ln1_g, l.ln1_b)?;
            let q = linear(tape, h, l.wq, l.bq)?;
            let k = linear(tape, h, l.wk, l.bk)?;
            let v = linear(tape, h, l.wv, l.bv)?;
            let a = tape.attention(q, k, v, segments, self.config.heads)?;
            let a = linear(tape, a, l.wo, l.bo)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, l.ln2_g, l.ln2_b)?;
            let h = linear(tape, h, l.ff1_w, l.ff1_b)?;
            let h = tape.gelu(h);
            let h = linear(tape, h, l.ff2_w, l.ff2_b)?;
            x = tape.add(x, h)?;
        }
        tape.layer_norm(x, self.lnf_g, self.lnf_b)
    }

    pub fn mlm_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        mlp(tape, hidden, &self.mlm)
    }

    pub fn struct_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        mlp(tape, hidden, &self.structure)
    }

    /// Sequence-side projection into the shared space, rows unit-normalized.
    pub fn project_a(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let p = tape.matmul(hidden, self.proj_a)?;
        tape.row_normalize(p)
    }

    /// Structure-side projection into the shared space, rows unit-normalized.
    pub fn project_g(&self, tape: &mut Tape, gnn: Var) -> Result<Var> {
        if tape.value(gnn).cols() != self.config.gnn_dim {
            return Err(Error::Shape(format!(
                "structure embeddings of width {} for a model expecting {}",
                tape.value(gnn).cols(),
                self.config.gnn_dim
            )));
        }
        let p = tape.matmul(gnn, self.proj_g)?;
        tape.row_normalize(p)
    }

    /// `s · Pa Pgᵀ` over every residue pair in the batch.
    pub fn similarity(&self, tape: &mut Tape, hidden: Var, gnn: Var) -> Result<Var> {
        let pa = self.project_a(tape, hidden)?;
        let pg = self.project_g(tape, gnn)?;
        let dots = tape.matmul_t(pa, pg)?;
        let s = tape.exp(self.log_scale);
        tape.mul_scalar(dots, s)
    }
}

/// Token sequence with position `i` replaced by the mask symbol.
pub fn mask_position(sequence: &[u8], i: usize) -> Vec<u8> {
    let mut s = sequence.to_vec();
    s[i] = MASK_TOKEN;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PlmConfig {
        PlmConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            max_len: 12,
            proj_dim: 8,
            gnn_dim: 6,
            struct_vocab: 5,
            ..PlmConfig::default()
        }
    }

    #[test]
    fn reference_config_halves_depth_and_width() {
        let r = PlmConfig::default().reference();
        assert_eq!((r.layers, r.hidden, r.heads), (2, 32, 4));
        r.validate().unwrap();
        assert!(PlmConfig {
            hidden: 30,
            heads: 4,
            ..PlmConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = ModelBundle::init(&small(), 1).unwrap();
        let hs = m
            .hidden_states(&[vec![3], vec![1, 2, 3, 4], vec![1, 2, 3, 4]])
            .unwrap();
        assert_eq!(hs[0].shape(), &[1, 16]);
        assert_eq!(hs[1], hs[2]);
        assert!(m.hidden_states(&[vec![30]]).is_err());
        assert!(m.hidden_states(&[vec![0; 13]]).is_err());
    }

    #[test]
    fn packing_does_not_leak_between_sequences() {
        let m = ModelBundle::init(&small(), 2).unwrap();
        let alone = m.hidden_states(&[vec![5, 6, 7]]).unwrap();
        let packed = m.hidden_states(&[vec![1, 1, 1, 1], vec![5, 6, 7]]).unwrap();
        assert!(alone[0].max_abs_diff(&packed[1]) < 1e-12);
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let mut m = ModelBundle::init(&small(), 3).unwrap();
        let pe = m.param_mut("pos_emb").unwrap();
        pe.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let seq = vec![4u8, 9, 1, 17, 2];
        let perm = [3usize, 0, 4, 2, 1];
        let permuted: Vec<u8> = perm.iter().map(|&p| seq[p]).collect();
        let h = m.hidden_states(&[seq, permuted]).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in h[1].row(i).iter().zip(h[0].row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_hidden_gives_head_bias_image() {
        let mut m = ModelBundle::init(&small(), 4).unwrap();
        m.param_mut("mlm.b2").unwrap().data_mut()[3] = 0.7;
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false).unwrap();
        let z = tape.constant(Tensor::zeros(&[2, 16]));
        let logits = b.mlm_logits(&mut tape, z).unwrap();
        // gelu(0) = 0, so the first layer contributes nothing
        assert_eq!(tape.value(logits).row(1), m.param("mlm.b2").unwrap().data());
        let sl = b.struct_logits(&mut tape, z).unwrap();
        assert_eq!(tape.shape(sl), &[2, 5]);
    }

    #[test]
    fn projections_are_unit_rows_and_scale_invariant() {
        let m = ModelBundle::init(&small(), 5).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false).unwrap();
        let x = Tensor::from_rows(&[
            vec![0.3; 6],
            vec![1.5; 6],
            vec![-0.2, 0.1, 0.5, 0.9, -1.0, 0.0],
        ])
        .unwrap();
        let x = tape.constant(x);
        let p = b.project_g(&mut tape, x).unwrap();
        let pv = tape.value(p).clone();
        assert_eq!(pv.cols(), 8);
        for i in 0..3 {
            let n: f64 = pv.row(i).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-9);
        }
        // rows 0 and 1 differ by a factor of 5
        assert!(pv
            .row(0)
            .iter()
            .zip(pv.row(1))
            .all(|(a, c)| (a - c).abs() < 1e-12));
        let zero = tape.constant(Tensor::zeros(&[1, 6]));
        assert!(b.project_g(&mut tape, zero).is_err());
    }

    #[test]
    fn log_probs_rows_normalize() {
        let m = ModelBundle::init(&small(), 6).unwrap();
        let lp = m.mlm_log_probs(&[vec![1, 2, 3]]).unwrap();
        for i in 0..3 {
            let s: f64 = lp[0].row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_bundle_refuses_updates() {
        let mut m = ModelBundle::init(&small(), 7).unwrap();
        m.freeze();
        assert!(matches!(m.groups_mut(), Err(Error::Frozen(_))));
        assert!(m.clamp_scale().is_err());
    }

    #[test]
    fn resetting_alignment_heads_keeps_the_encoder() {
        let mut m = ModelBundle::init(&small(), 8).unwrap();
        let before = m.clone();
        m.reset_alignment_heads(99).unwrap();
        assert_eq!(m.param("tok_emb"), before.param("tok_emb"));
        assert_eq!(m.param("mlm.w1"), before.param("mlm.w1"));
        assert_ne!(m.param("proj_a"), before.param("proj_a"));
        assert_eq!(m.scale(), before.scale());
    }

    #[test]
    fn scale_clamps_at_one_hundred() {
        let mut m = ModelBundle::init(&small(), 9).unwrap();
        assert!((m.scale() - 1.0 / 0.07).abs() < 1e-9);
        m.param_mut("log_scale").unwrap().data_mut()[0] = 9.0;
        m.clamp_scale().unwrap();
        assert!((m.scale() - 100.0).abs() < 1e-9);
    }
}
