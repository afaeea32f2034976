//! Discrete structure tokens: a per-residue geometric descriptor relative to
//! the spatially closest non-adjacent residue, quantized with k-means.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ProteinRecord;
use crate::error::{Error, Result};
use crate::geometry::{self, V3};
use crate::rng::{rng_for, stream};

pub const DESCRIPTOR_DIM: usize = 7;
pub const DEFAULT_CODEBOOK_SIZE: usize = 20;
pub const LARGE_CODEBOOK_SIZE: usize = 512;
pub const DEFAULT_MAX_ITERS: usize = 100;

/// Index of the residue closest to `i` in space among those at least two
/// positions away along the chain. Distances equal to within 1e-9 Å go to the
/// lower index.
pub fn nearest_partner(coords: &[V3], i: usize) -> Option<usize> {
    (0..coords.len())
        .filter(|&j| j.abs_diff(i) >= 2)
        .min_by_key(|&j| (geometry::tie_key(geometry::dist(coords[i], coords[j])), j))
}

fn bend(coords: &[V3], i: usize) -> f64 {
    let (a, b) = geometry::segment_ends(coords.len(), i);
    geometry::cos_angle(
        geometry::sub(coords[a], coords[i]),
        geometry::sub(coords[b], coords[i]),
    )
}

/// Rotation- and translation-invariant descriptor of residue `i`:
/// scaled distance to its partner, sign of the sequence offset, the three
/// pairwise angle cosines between the two local chain directions and the
/// connecting vector, and the bend at each end.
pub fn descriptor(coords: &[V3], i: usize) -> Result<Vec<f64>> {
    if coords.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "descriptor needs at least 4 residues, got {}",
            coords.len()
        )));
    }
    if i >= coords.len() {
        return Err(Error::InvalidArgument(format!(
            "residue {} out of range",
            i
        )));
    }
    let j = nearest_partner(coords, i).expect("L >= 4 leaves a partner");
    let v = geometry::sub(coords[j], coords[i]);
    let ti = geometry::tangent(coords, i);
    let tj = geometry::tangent(coords, j);
    Ok(vec![
        geometry::norm(v) / 10.0,
        if j > i { 1.0 } else { -1.0 },
        geometry::cos_angle(ti, tj),
        geometry::cos_angle(ti, v),
        geometry::cos_angle(tj, v),
        bend(coords, i),
        bend(coords, j),
    ])
}

pub fn descriptors(coords: &[V3]) -> Result<Vec<Vec<f64>>> {
    (0..coords.len()).map(|i| descriptor(coords, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<Vec<f64>>,
    pub fit_seed: u64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.centroids.len() != self.k {
            return Err(Error::Data(format!(
                "codebook declares K = {} with {} centroids",
                self.k,
                self.centroids.len()
            )));
        }
        if self.centroids.iter().any(|c| c.len() != self.dim) {
            return Err(Error::Data("centroid width differs from dim".into()));
        }
        for a in 0..self.k {
            for b in a + 1..self.k {
                if sq_dist(&self.centroids[a], &self.centroids[b]) == 0.0 {
                    return Err(Error::Data(format!("centroids {} and {} coincide", a, b)));
                }
            }
        }
        Ok(())
    }

    /// Nearest centroid; ties go to the lower id.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "descriptor of width {} for a codebook of width {}",
                x.len(),
                self.dim
            )));
        }
        let mut best = (f64::INFINITY, 0);
        for (c, centroid) in self.centroids.iter().enumerate() {
            let d = sq_dist(x, centroid);
            if d < best.0 {
                best = (d, c);
            }
        }
        Ok(best.1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cb: Codebook = serde_json::from_str(&s)?;
        cb.validate()?;
        Ok(cb)
    }
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best.0 {
                    best = (d, c);
                }
            }
            (best.1, best.0)
        })
        .unzip()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_for(seed, &[stream::KMEANS]);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "only {} distinct descriptors for K = {}",
                centroids.len(),
                k
            )));
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        let c = points[pick].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// k-means with seeded k-means++ initialization. Returns the codebook and the
/// objective (sum of squared distances) measured after each assignment step.
pub fn fit_codebook_traced(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Codebook, Vec<f64>)> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K = {} must be >= 2", k)));
    }
    if points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} descriptors cannot fill K = {} clusters",
            points.len(),
            k
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("descriptors of differing width".into()));
    }
    let mut centroids = kmeans_pp(points, k, seed)?;
    let mut history = Vec::new();
    let mut prev_assign: Option<Vec<usize>> = None;
    for _ in 0..max_iters.max(1) {
        let (assign, dists) = assign_all(points, &centroids);
        history.push(dists.iter().sum());
        if prev_assign.as_ref() == Some(&assign) {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // reseed to the point farthest from its centroid
                let far = dists
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .expect("points >= K");
                taken[far] = true;
                centroids[c] = points[far].clone();
            }
        }
        prev_assign = Some(assign);
    }
    let cb = Codebook {
        k,
        dim,
        centroids,
        fit_seed: seed,
    };
    Ok((cb, history))
}

pub fn fit_codebook(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Codebook> {
    fit_codebook_traced(points, k, seed, max_iters).map(|(cb, _)| cb)
}

/// Nearest-centroid token for every residue.
pub fn tokenize(coords: &[V3], codebook: &Codebook) -> Result<Vec<usize>> {
    descriptors(coords)?
        .iter()
        .map(|d| codebook.assign(d))
        .collect()
}

/// Descriptors of every residue of every record, concatenated.
pub fn corpus_descriptors(records: &[ProteinRecord]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(descriptors(&r.coords)?);
    }
    Ok(out)
}

/// Fills in structure tokens for every record.
pub fn tokenize_corpus(records: &mut [ProteinRecord], codebook: &Codebook) -> Result<()> {
    for r in records.iter_mut() {
        r.structure_tokens = Some(tokenize(&r.coords, codebook)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, GeneratorConfig, HELIX_RADIUS, HELIX_RISE, HELIX_TURN_DEG};

    fn helix(n: usize) -> Vec<V3> {
        let t = HELIX_TURN_DEG.to_radians();
        (0..n)
            .map(|k| {
                let a = k as f64 * t;
                [
                    HELIX_RADIUS * a.cos(),
                    HELIX_RADIUS * a.sin(),
                    HELIX_RISE * k as f64,
                ]
            })
            .collect()
    }

    #[test]
    fn helix_partner_is_three_residues_away() {
        let c = helix(20);
        for i in 3..17 {
            // brute force over all admissible partners
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..20usize {
                if j.abs_diff(i) >= 2 {
                    let d = geometry::dist(c[i], c[j]);
                    if d < best.0 - 1e-9 {
                        best = (d, j);
                    }
                }
            }
            assert_eq!(nearest_partner(&c, i), Some(best.1));
            assert_eq!(best.1.abs_diff(i), 3);
        }
    }

    #[test]
    fn descriptor_is_rigid_motion_invariant_and_finite_at_ends() {
        let recs = generate(&GeneratorConfig {
            n_proteins: 2,
            length_range: (20, 30),
            ..GeneratorConfig::default()
        })
        .unwrap();
        let c = &recs[1].coords;
        let rot = geometry::random_rotation(&mut rng_for(4, &[]));
        let moved = geometry::rigid_motion(c, &rot, [3.0, 1.0, -7.0]);
        for i in 0..c.len() {
            let a = descriptor(c, i).unwrap();
            let b = descriptor(&moved, i).unwrap();
            assert_eq!(a.len(), DESCRIPTOR_DIM);
            assert!(a.iter().all(|v| v.is_finite()));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert!(descriptor(&c[..3], 0).is_err());
    }

    #[test]
    fn one_point_per_cluster_has_zero_error() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let (cb, hist) = fit_codebook_traced(&pts, 6, 1, 100).unwrap();
        assert_eq!(*hist.last().unwrap(), 0.0);
        cb.validate().unwrap();
        assert!(fit_codebook(&pts, 7, 1, 10).is_err());
    }

    #[test]
    fn objective_is_non_increasing() {
        let recs = generate(&GeneratorConfig {
            n_proteins: 20,
            length_range: (20, 40),
            ..GeneratorConfig::default()
        })
        .unwrap();
        let pts = corpus_descriptors(&recs).unwrap();
        for seed in 0..3 {
            let (_, hist) = fit_codebook_traced(&pts, DEFAULT_CODEBOOK_SIZE, seed, 100).unwrap();
            for w in hist.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", hist);
            }
        }
    }

    #[test]
    fn assignment_ties_and_centroid_hits() {
        let cb = Codebook {
            k: 3,
            dim: 1,
            centroids: vec![vec![0.0], vec![2.0], vec![5.0]],
            fit_seed: 0,
        };
        assert_eq!(cb.assign(&[2.0]).unwrap(), 1);
        assert_eq!(cb.assign(&[1.0]).unwrap(), 0);
        assert!(cb.assign(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn helix_interior_is_one_token_run() {
        let recs = generate(&GeneratorConfig {
            n_proteins: 30,
            length_range: (24, 48),
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cb = fit_codebook(&corpus_descriptors(&recs).unwrap(), 20, 0, 100).unwrap();
        let toks = tokenize(&helix(24), &cb).unwrap();
        // partners of residues 3 and 20 sit at the chain ends
        let interior = &toks[4..20];
        assert!(interior.iter().all(|&t| t == interior[0]), "{:?}", toks);
        let rot = geometry::random_rotation(&mut rng_for(8, &[]));
        let moved = geometry::rigid_motion(&recs[0].coords, &rot, [1.0, 1.0, 1.0]);
        assert_eq!(
            tokenize(&recs[0].coords, &cb).unwrap(),
            tokenize(&moved, &cb).unwrap()
        );
    }

    #[test]
    fn token_distribution_is_not_degenerate() {
        let recs = generate(&GeneratorConfig {
            n_proteins: 60,
            length_range: (24, 64),
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cb = fit_codebook(&corpus_descriptors(&recs).unwrap(), 20, 0, 100).unwrap();
        let mut counts = vec![0usize; 20];
        let mut total = 0;
        for r in &recs {
            for t in tokenize(&r.coords, &cb).unwrap() {
                counts[t] += 1;
                total += 1;
            }
        }
        let max = *counts.iter().max().unwrap() as f64 / total as f64;
        assert!(max < 0.6, "{:?}", counts);
    }

    #[test]
    fn codebook_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cb.json");
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.5 * i as f64]).collect();
        let cb = fit_codebook(&pts, 3, 2, 50).unwrap();
        cb.save(&p).unwrap();
        assert_eq!(Codebook::load(&p).unwrap(), cb);
        let raw = std::fs::read_to_string(&p).unwrap();
        assert!(raw.contains("\"K\"") && raw.contains("fit_seed"));
    }
}
