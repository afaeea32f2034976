//! Synthetic protein-like corpora.
//!
//! Backbones are chains of ideal helix, ideal strand, and random-coil
//! segments. An element that follows a loop is packed antiparallel against
//! the element before the loop (hairpins, sheets, helix pairs), so most
//! long-range contacts follow from the secondary-structure pattern. Residue
//! identities depend on the segment's secondary structure, with a tunable
//! coupling strength. Structure embeddings come from a frozen,
//! geometry-only feature map so that anything a sequence model learns about
//! them must come through the structure.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    ProteinRecord, SsLabel, NUM_RESIDUES, REFERENCE_MAX_RESOLUTION, REFERENCE_MAX_RFREE,
};
use crate::error::{Error, Result};
use crate::geometry::{self, V3};
use crate::rng::{rng_for, stream};
use crate::tokenizer::{tokenize, Codebook};

pub const CA_STEP: f64 = 3.8;
pub const HELIX_RADIUS: f64 = 2.3;
pub const HELIX_RISE: f64 = 1.5;
pub const HELIX_TURN_DEG: f64 = 100.0;
pub const STRAND_RISE: f64 = 3.3;

pub const CONTACT_THRESHOLD: f64 = 8.0;
pub const CONTACT_MIN_SEPARATION: usize = 6;

/// Residue groups favoured by each secondary-structure class. They
/// partition the alphabet, so full coupling gives disjoint supports.
const HELIX_FORMERS: &[u8] = b"AELMQKRH";
const STRAND_FORMERS: &[u8] = b"VIYFWTC";
const COIL_FORMERS: &[u8] = b"GPNDS";

fn formers(label: SsLabel) -> &'static [u8] {
    match label {
        SsLabel::Helix => HELIX_FORMERS,
        SsLabel::Strand => STRAND_FORMERS,
        SsLabel::Coil => COIL_FORMERS,
    }
}

/// Probability of each residue index given the secondary-structure class.
pub fn residue_distribution(label: SsLabel, coupling: f64) -> [f64; NUM_RESIDUES] {
    let mut p = [(1.0 - coupling) / NUM_RESIDUES as f64; NUM_RESIDUES];
    let set = formers(label);
    for &c in set {
        let i = crate::corpus::residue_index(c).expect("alphabet letter") as usize;
        p[i] += coupling / set.len() as f64;
    }
    p
}

/// Synthetic fitness of a set of substitutions: summed log-ratio of the
/// mutant and wild-type residue probabilities under each site's
/// secondary-structure class.
pub fn substitution_fitness(
    wild_type: &[u8],
    labels: &[SsLabel],
    mutations: &[(usize, u8)],
    coupling: f64,
) -> Result<f64> {
    if wild_type.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} residues but {} structure labels",
            wild_type.len(),
            labels.len()
        )));
    }
    let mut f = 0.0;
    for &(pos, mutant) in mutations {
        if pos >= wild_type.len()
            || mutant as usize >= NUM_RESIDUES
            || wild_type[pos] as usize >= NUM_RESIDUES
        {
            return Err(Error::InvalidArgument(format!(
                "substitution {}:{} out of range",
                pos, mutant
            )));
        }
        let p = residue_distribution(labels[pos], coupling);
        f += p[mutant as usize].ln() - p[wild_type[pos] as usize].ln();
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_proteins: usize,
    pub length_range: (usize, usize),
    pub helix_fraction: f64,
    pub strand_fraction: f64,
    pub seq_structure_coupling: f64,
    pub noise_fraction: f64,
    pub coord_noise_sigma: f64,
    pub embed_dim: usize,
    pub k_neighbors: usize,
    /// Pull of random-coil steps toward the chain centroid, in [0, 1).
    pub compactness: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_proteins: 256,
            length_range: (24, 64),
            helix_fraction: 0.4,
            strand_fraction: 0.3,
            seq_structure_coupling: 0.8,
            noise_fraction: 0.0,
            coord_noise_sigma: 2.0,
            embed_dim: 16,
            k_neighbors: 8,
            compactness: 0.35,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{} = {} outside [0, 1]",
                    name, v
                )))
            }
        };
        frac("helix_fraction", self.helix_fraction)?;
        frac("strand_fraction", self.strand_fraction)?;
        frac("seq_structure_coupling", self.seq_structure_coupling)?;
        frac("noise_fraction", self.noise_fraction)?;
        frac("compactness", self.compactness)?;
        if self.helix_fraction + self.strand_fraction > 1.0 {
            return Err(Error::InvalidArgument(
                "helix_fraction + strand_fraction exceeds 1".into(),
            ));
        }
        let (lo, hi) = self.length_range;
        if lo < 8 || hi < lo {
            return Err(Error::InvalidArgument(format!(
                "length range ({}, {}) needs 8 <= min <= max",
                lo, hi
            )));
        }
        if self.k_neighbors + 1 > lo {
            return Err(Error::InvalidArgument(format!(
                "k_neighbors {} too large for minimum length {}",
                self.k_neighbors, lo
            )));
        }
        if self.embed_dim == 0 || !(self.coord_noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "embed_dim must be positive and sigma >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Generates `n_proteins` records with structure embeddings and
/// secondary-structure labels. Exactly `round(noise_fraction·n)` records,
/// chosen by seeded permutation, are corrupted. Structure tokens are left
/// empty; they depend on a codebook fit to the corpus.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<ProteinRecord>> {
    config.validate()?;
    let n = config.n_proteins;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(config.seed, &[stream::GENERATE, u64::MAX]));
    let n_noisy = (config.noise_fraction * n as f64).round() as usize;
    let mut noisy = vec![false; n];
    for &i in &order[..n_noisy] {
        noisy[i] = true;
    }

    let embed = EmbedConfig {
        k_neighbors: config.k_neighbors,
        dim: config.embed_dim,
        ..EmbedConfig::default()
    };
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let mut rng = rng_for(config.seed, &[stream::GENERATE, p as u64]);
        let (lo, hi) = config.length_range;
        let len = rng.random_range(lo..=hi);
        let labels = sample_labels(&mut rng, len, config);
        let coords = build_backbone(&mut rng, &labels, config.compactness);
        let sequence = labels
            .iter()
            .map(|&l| sample_residue(&mut rng, l, config.seq_structure_coupling))
            .collect();
        let record = ProteinRecord {
            id: format!("syn{:05}", p),
            sequence,
            gnn_embedding: Some(surrogate_gnn_embed(&coords, &embed)?),
            coords,
            structure_tokens: None,
            resolution: rng.random_range(1.2..1.9),
            r_free: rng.random_range(0.12..0.19),
            ss_labels: Some(labels),
        };
        let record = if noisy[p] {
            corrupt(
                &record,
                config.coord_noise_sigma,
                crate::rng::derive_seed(config.seed, &[stream::CORRUPT, p as u64]),
                &embed,
                None,
            )?
        } else {
            record
        };
        out.push(record);
    }
    Ok(out)
}

fn sample_labels(rng: &mut ChaCha8Rng, len: usize, config: &GeneratorConfig) -> Vec<SsLabel> {
    let coil = 1.0 - config.helix_fraction - config.strand_fraction;
    let classes = [config.helix_fraction, config.strand_fraction, coil]
        .iter()
        .filter(|&&p| p > 0.0)
        .count();
    let mut labels = Vec::with_capacity(len);
    let mut prev = None;
    while labels.len() < len {
        let label = loop {
            let u: f64 = rng.random();
            let l = if u < config.helix_fraction {
                SsLabel::Helix
            } else if u < config.helix_fraction + config.strand_fraction {
                SsLabel::Strand
            } else {
                SsLabel::Coil
            };
            // two runs of the same class back to back would read as one
            if classes < 2 || Some(l) != prev {
                break l;
            }
        };
        let seg_len = match label {
            SsLabel::Helix => rng.random_range(6..=14),
            SsLabel::Strand => rng.random_range(4..=9),
            SsLabel::Coil => rng.random_range(3..=8),
        };
        for _ in 0..seg_len.min(len - labels.len()) {
            labels.push(label);
        }
        prev = Some(label);
    }
    labels
}

fn sample_residue(rng: &mut ChaCha8Rng, label: SsLabel, coupling: f64) -> u8 {
    let p = residue_distribution(label, coupling);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i as u8;
        }
    }
    (NUM_RESIDUES - 1) as u8
}

/// Ideal segment geometry in a local frame, first atom at the origin.
fn ideal_segment(label: SsLabel, n: usize) -> Vec<V3> {
    match label {
        SsLabel::Helix => {
            let t = HELIX_TURN_DEG.to_radians();
            (0..n)
                .map(|k| {
                    let a = k as f64 * t;
                    [
                        HELIX_RADIUS * a.cos() - HELIX_RADIUS,
                        HELIX_RADIUS * a.sin(),
                        HELIX_RISE * k as f64,
                    ]
                })
                .collect()
        }
        SsLabel::Strand => {
            let half = ((CA_STEP * CA_STEP - STRAND_RISE * STRAND_RISE).sqrt()) / 2.0;
            (0..n)
                .map(|k| {
                    let off = if k % 2 == 0 { 0.0 } else { 2.0 * half };
                    [off, 0.0, STRAND_RISE * k as f64]
                })
                .collect()
        }
        SsLabel::Coil => Vec::new(),
    }
}

fn min_dist_to(coords: &[V3], p: V3, skip_last: usize) -> f64 {
    let end = coords.len().saturating_sub(skip_last);
    coords[..end]
        .iter()
        .map(|&q| geometry::dist(p, q))
        .fold(f64::INFINITY, f64::min)
}

fn centroid(coords: &[V3]) -> V3 {
    let n = coords.len().max(1) as f64;
    let s = coords
        .iter()
        .fold([0.0; 3], |acc, &p| geometry::add(acc, p));
    geometry::scale(s, 1.0 / n)
}

fn biased_direction(rng: &mut ChaCha8Rng, coords: &[V3], compactness: f64) -> V3 {
    let u = geometry::random_unit(rng);
    let last = *coords.last().expect("non-empty chain");
    match geometry::normalize(geometry::sub(centroid(coords), last)) {
        Some(c) if compactness > 0.0 && coords.len() > 2 => {
            let mixed = geometry::add(
                geometry::scale(u, 1.0 - compactness),
                geometry::scale(c, compactness),
            );
            geometry::normalize(mixed).unwrap_or(u)
        }
        _ => u,
    }
}

/// An ideal helix or strand as placed in the chain.
struct Placed {
    label: SsLabel,
    rot: geometry::Rot,
    start: usize,
    len: usize,
}

fn column(r: &geometry::Rot, j: usize) -> V3 {
    [r[0][j], r[1][j], r[2][j]]
}

/// Lateral spacing between packed elements: Cα–Cα across neighbouring
/// strands, axis to axis across packed helices, helix axis to strand.
const STRAND_PAIR_GAP: f64 = 4.8;
const HELIX_PAIR_GAP: f64 = 9.0;
const MIXED_PAIR_GAP: f64 = 7.5;
/// Folds that would come closer than this to the rest of the chain are
/// dropped in favour of a free placement.
const HAIRPIN_MIN_CLEARANCE: f64 = 3.6;

/// `n` points on a circular arc from `from` to `to` (both excluded) with
/// every consecutive spacing equal to `CA_STEP`, bulging along `bulge`.
fn loop_arc(from: V3, to: V3, n: usize, bulge: V3) -> Option<Vec<V3>> {
    let d = geometry::dist(from, to);
    let chords = (n + 1) as f64;
    if n == 0 || d >= 0.98 * chords * CA_STEP || d < 1e-9 {
        return None;
    }
    let a = geometry::scale(geometry::sub(to, from), 1.0 / d);
    let b = geometry::normalize(geometry::sub(
        bulge,
        geometry::scale(a, geometry::dot(bulge, a)),
    ))?;
    // arc angle decreases with radius; bisect between a full turn and a nearly straight arc
    let span = |r: f64| 2.0 * r * (chords * (CA_STEP / (2.0 * r)).asin()).sin() - d;
    let mut lo = CA_STEP / (2.0 * (std::f64::consts::PI / chords).sin());
    let mut hi = 1e6;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if span(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    let theta = 2.0 * (CA_STEP / (2.0 * r)).asin();
    let total = chords * theta;
    let mid = geometry::scale(geometry::add(from, to), 0.5);
    let center = geometry::sub(mid, geometry::scale(b, r * (total / 2.0).cos()));
    Some(
        (1..=n)
            .map(|m| {
                let psi = -total / 2.0 + m as f64 * theta;
                geometry::add(
                    center,
                    geometry::add(
                        geometry::scale(a, r * psi.sin()),
                        geometry::scale(b, r * psi.cos()),
                    ),
                )
            })
            .collect(),
    )
}

/// Axis point of a placed element level with its last residue.
fn end_axis_point(coords: &[V3], prev: &Placed) -> V3 {
    match prev.label {
        SsLabel::Helix => {
            let height = HELIX_RISE * (prev.len - 1) as f64;
            geometry::add(
                coords[prev.start],
                geometry::rotate(&prev.rot, [-HELIX_RADIUS, 0.0, height]),
            )
        }
        _ => coords[prev.start + prev.len - 1],
    }
}

/// Folds a new element of class `label` back onto the previous element,
/// antiparallel, joined by a loop of `loop_len` residues. Returns the loop
/// and element coordinates with the new element's frame, or `None` when
/// every candidate side clashes with the chain.
fn hairpin(
    coords: &[V3],
    prev: &Placed,
    loop_len: usize,
    label: SsLabel,
    n: usize,
) -> Option<(Vec<V3>, geometry::Rot)> {
    let axis = column(&prev.rot, 2);
    let side = column(&prev.rot, 1);
    let pleat = column(&prev.rot, 0);
    // rotation by pi about the local x axis turns the element around
    let mut rot = prev.rot;
    for row in rot.iter_mut() {
        row[1] = -row[1];
        row[2] = -row[2];
    }
    let prev_pts = &coords[prev.start..prev.start + prev.len];
    let last = *prev_pts.last()?;
    let sheet = prev.label == SsLabel::Strand && label == SsLabel::Strand;
    let sides: Vec<V3> = if sheet {
        vec![side, geometry::scale(side, -1.0)]
    } else {
        (0..8)
            .map(|k| {
                let t = k as f64 * std::f64::consts::FRAC_PI_4;
                geometry::add(
                    geometry::scale(side, t.cos()),
                    geometry::scale(pleat, t.sin()),
                )
            })
            .collect()
    };
    let gap = match (prev.label, label) {
        (SsLabel::Strand, SsLabel::Strand) => STRAND_PAIR_GAP,
        (SsLabel::Helix, SsLabel::Helix) => HELIX_PAIR_GAP,
        _ => MIXED_PAIR_GAP,
    };
    let mut best: Option<(Vec<V3>, f64)> = None;
    for u in sides {
        let element: Vec<V3> = if sheet {
            // residue k pairs with the k-th residue back from the end
            let mut e: Vec<V3> = Vec::with_capacity(n);
            for k in 0..n {
                let p = if k < prev.len {
                    geometry::add(prev_pts[prev.len - 1 - k], geometry::scale(u, gap))
                } else if k >= 2 {
                    geometry::sub(e[k - 2], geometry::scale(axis, 2.0 * STRAND_RISE))
                } else {
                    return None;
                };
                e.push(p);
            }
            e
        } else {
            let axis_pt = geometry::add(end_axis_point(coords, prev), geometry::scale(u, gap));
            let origin = match label {
                SsLabel::Helix => {
                    geometry::add(axis_pt, geometry::rotate(&rot, [HELIX_RADIUS, 0.0, 0.0]))
                }
                _ => axis_pt,
            };
            ideal_segment(label, n)
                .into_iter()
                .map(|p| geometry::add(geometry::rotate(&rot, p), origin))
                .collect()
        };
        let Some(arc) = loop_arc(last, element[0], loop_len, axis) else {
            continue;
        };
        let placed: Vec<V3> = arc.into_iter().chain(element).collect();
        let clearance = placed
            .iter()
            .map(|&p| min_dist_to(coords, p, 1))
            .fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|(_, c)| clearance > *c) {
            best = Some((placed, clearance));
        }
    }
    match best {
        Some((placed, c)) if c >= HAIRPIN_MIN_CLEARANCE => Some((placed, rot)),
        _ => None,
    }
}

fn build_backbone(rng: &mut ChaCha8Rng, labels: &[SsLabel], compactness: f64) -> Vec<V3> {
    let mut coords: Vec<V3> = vec![[0.0; 3]];
    // first residue already placed; segments are walked from the label runs
    let mut runs: Vec<(SsLabel, usize)> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some((pl, n)) if *pl == l => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    runs[0].1 -= 1;
    let mut placed_last: Option<Placed> = None;
    let mut r = 0;
    while r < runs.len() {
        let (label, n) = runs[r];
        if n == 0 {
            r += 1;
            continue;
        }
        // element, loop, element: pack the second element against the first
        if label == SsLabel::Coil && r + 1 < runs.len() {
            let (next, next_n) = runs[r + 1];
            if let Some(prev) = placed_last
                .as_ref()
                .filter(|p| p.start + p.len == coords.len())
            {
                if let Some((pts, rot)) = hairpin(&coords, prev, n, next, next_n) {
                    let start = coords.len() + n;
                    coords.extend(pts);
                    placed_last = Some(Placed {
                        label: next,
                        rot,
                        start,
                        len: next_n,
                    });
                    r += 2;
                    continue;
                }
            }
        }
        match label {
            SsLabel::Coil => {
                for _ in 0..n {
                    let last = *coords.last().unwrap();
                    let mut best = None;
                    for _ in 0..40 {
                        let dir = biased_direction(rng, &coords, compactness);
                        let p = geometry::add(last, geometry::scale(dir, CA_STEP));
                        let clearance = min_dist_to(&coords, p, 1);
                        if clearance >= 4.0 {
                            best = Some((p, clearance));
                            break;
                        }
                        if best.is_none_or(|(_, c)| clearance > c) {
                            best = Some((p, clearance));
                        }
                    }
                    coords.push(best.unwrap().0);
                }
            }
            _ => {
                let local = ideal_segment(label, n);
                let last = *coords.last().unwrap();
                let mut best: Option<(Vec<V3>, geometry::Rot, f64)> = None;
                for _ in 0..30 {
                    let dir = biased_direction(rng, &coords, compactness);
                    let start = geometry::add(last, geometry::scale(dir, CA_STEP));
                    let rot = geometry::random_rotation(rng);
                    let placed: Vec<V3> = local
                        .iter()
                        .map(|&p| geometry::add(geometry::rotate(&rot, p), start))
                        .collect();
                    let clearance = placed
                        .iter()
                        .map(|&p| min_dist_to(&coords, p, 1))
                        .fold(f64::INFINITY, f64::min);
                    let done = clearance >= 4.0;
                    if best.as_ref().is_none_or(|(_, _, c)| clearance > *c) {
                        best = Some((placed, rot, clearance));
                    }
                    if done {
                        break;
                    }
                }
                let (placed, rot, _) = best.unwrap();
                placed_last = Some(Placed {
                    label,
                    rot,
                    start: coords.len(),
                    len: placed.len(),
                });
                coords.extend(placed);
            }
        }
        r += 1;
    }
    debug_assert_eq!(coords.len(), labels.len());
    coords
}

/// Settings of the frozen structure-embedding surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub k_neighbors: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 8,
            dim: 16,
            seed: 0x5EED_0F_6E0E,
        }
    }
}

const OFFSET_CAP: f64 = 16.0;
const PER_NEIGHBOR: usize = 5;
const GLOBAL_FEATURES: usize = 5;

fn feature_width(k: usize) -> usize {
    k * PER_NEIGHBOR + GLOBAL_FEATURES
}

/// Rotation- and translation-invariant description of residue `i`'s
/// surroundings: for each of the `k` nearest residues, distance, offset
/// along the chain, and direction relative to the local chain tangent; plus
/// bend, torsion, and burial counts.
fn local_features(coords: &[V3], i: usize, k: usize) -> Vec<f64> {
    let l = coords.len();
    let mut nbrs: Vec<(f64, usize)> = (0..l)
        .filter(|&j| j != i)
        .map(|j| (geometry::dist(coords[i], coords[j]), j))
        .collect();
    nbrs.sort_by_key(|&(d, j)| (geometry::tie_key(d), j));
    let ti = geometry::tangent(coords, i);
    let mut f = Vec::with_capacity(feature_width(k));
    for &(d, j) in nbrs.iter().take(k) {
        let off = j as f64 - i as f64;
        let v = geometry::sub(coords[j], coords[i]);
        f.push(4.0 / d);
        f.push(off.signum() * off.abs().min(OFFSET_CAP) / OFFSET_CAP);
        f.push(off.signum() * (1.0 + off.abs()).ln() / (1.0 + OFFSET_CAP).ln());
        f.push(geometry::cos_angle(ti, v));
        f.push(geometry::cos_angle(ti, geometry::tangent(coords, j)));
    }
    let bend = if i > 0 && i + 1 < l {
        geometry::cos_angle(
            geometry::sub(coords[i - 1], coords[i]),
            geometry::sub(coords[i + 1], coords[i]),
        )
    } else {
        0.0
    };
    let torsion = if l >= 4 {
        let a = i.saturating_sub(1).min(l - 4);
        geometry::dihedral(coords[a], coords[a + 1], coords[a + 2], coords[a + 3])
    } else {
        None
    };
    f.push(bend);
    f.push(torsion.map_or(0.0, f64::cos));
    f.push(torsion.map_or(0.0, f64::sin));
    let count = |r: f64| nbrs.iter().filter(|(d, _)| *d <= r).count() as f64;
    f.push(count(8.0) / 8.0);
    f.push(count(12.0) / 16.0);
    f
}

/// Frozen surrogate for a pretrained structure encoder: local geometric
/// features mapped through a fixed seeded random projection and `tanh`.
pub fn surrogate_gnn_embed(coords: &[V3], config: &EmbedConfig) -> Result<Vec<Vec<f64>>> {
    let l = coords.len();
    let k = config.k_neighbors;
    if l < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} residues for {} neighbours, got {}",
            k + 1,
            k,
            l
        )));
    }
    for i in 0..l {
        for j in i + 1..l {
            if geometry::dist(coords[i], coords[j]) < 1e-6 {
                return Err(Error::Data(format!(
                    "residues {} and {} have coincident coordinates",
                    i, j
                )));
            }
        }
    }
    let fw = feature_width(k);
    let mut rng = rng_for(config.seed, &[stream::EMBED, k as u64, config.dim as u64]);
    let scale = 1.0 / (fw as f64).sqrt() * 2.0;
    let proj: Vec<f64> = (0..fw * config.dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    let bias: Vec<f64> = (0..config.dim)
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    Ok((0..l)
        .map(|i| {
            let f = local_features(coords, i, k);
            (0..config.dim)
                .map(|d| {
                    let s: f64 = f
                        .iter()
                        .enumerate()
                        .map(|(r, x)| x * proj[r * config.dim + d])
                        .sum();
                    (s + bias[d]).tanh()
                })
                .collect()
        })
        .collect())
}

/// Adds isotropic Gaussian noise to the coordinates, recomputes the
/// structure embedding (and the tokens, when a codebook is given), and
/// degrades the quality metadata past the reference-set thresholds.
pub fn corrupt(
    record: &ProteinRecord,
    coord_noise_sigma: f64,
    seed: u64,
    embed: &EmbedConfig,
    codebook: Option<&Codebook>,
) -> Result<ProteinRecord> {
    if !(coord_noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma {} must be >= 0",
            coord_noise_sigma
        )));
    }
    let mut rng = rng_for(seed, &[stream::CORRUPT]);
    let mut out = record.clone();
    if coord_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, coord_noise_sigma).expect("sigma checked");
        for p in out.coords.iter_mut() {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        out.gnn_embedding = Some(surrogate_gnn_embed(&out.coords, embed)?);
        out.structure_tokens = match (codebook, &record.structure_tokens) {
            (Some(cb), _) => Some(tokenize(&out.coords, cb)?),
            (None, _) => None,
        };
    }
    out.resolution = REFERENCE_MAX_RESOLUTION + rng.random_range(0.5..1.5);
    out.r_free = REFERENCE_MAX_RFREE + rng.random_range(0.02..0.10);
    Ok(out)
}

/// Residue pairs `(i, j)`, `i < j`, with `j - i > min_separation` and Cα
/// distance at most `threshold`.
pub fn contacts(coords: &[V3], threshold: f64, min_separation: usize) -> Vec<(usize, usize)> {
    let l = coords.len();
    let mut out = Vec::new();
    for i in 0..l {
        for j in i + min_separation + 1..l {
            if geometry::dist(coords[i], coords[j]) <= threshold {
                out.push((i, j));
            }
        }
    }
    out
}
