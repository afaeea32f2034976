//! Minimal 3-vector helpers for Cα traces.

use rand::Rng;
use rand_distr::StandardNormal;

pub type V3 = [f64; 3];

#[inline]
pub fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: V3, c: f64) -> V3 {
    [a[0] * c, a[1] * c, a[2] * c]
}

#[inline]
pub fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: V3, b: V3) -> f64 {
    norm(sub(a, b))
}

/// Unit vector along `a`, or `None` for a (near-)zero vector.
pub fn normalize(a: V3) -> Option<V3> {
    let n = norm(a);
    (n > 1e-12).then(|| scale(a, 1.0 / n))
}

pub fn random_unit<R: Rng>(rng: &mut R) -> V3 {
    loop {
        let v = [
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ];
        if let Some(u) = normalize(v) {
            return u;
        }
    }
}

/// Integer sort key that treats distances equal to within 1e-9 Å as ties,
/// so that symmetric neighbourhoods order the same way everywhere.
pub fn tie_key(d: f64) -> i64 {
    (d * 1e9).round() as i64
}

/// Row-major 3×3 rotation matrix.
pub type Rot = [[f64; 3]; 3];

/// Uniformly distributed rotation (from a random unit quaternion).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Rot {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

#[inline]
pub fn rotate(r: &Rot, v: V3) -> V3 {
    [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
}

/// Applies `x ↦ R x + t` to every point.
pub fn rigid_motion(coords: &[V3], r: &Rot, t: V3) -> Vec<V3> {
    coords.iter().map(|&p| add(rotate(r, p), t)).collect()
}

/// Cosine of the angle between `a` and `b`; 0 when either is degenerate.
pub fn cos_angle(a: V3, b: V3) -> f64 {
    match (normalize(a), normalize(b)) {
        (Some(u), Some(v)) => dot(u, v).clamp(-1.0, 1.0),
        _ => 0.0,
    }
}

/// Dihedral angle (radians) of four points; `None` when three are colinear.
pub fn dihedral(p0: V3, p1: V3, p2: V3, p3: V3) -> Option<f64> {
    let b0 = sub(p0, p1);
    let b1 = sub(p2, p1);
    let b2 = sub(p3, p2);
    let b1n = normalize(b1)?;
    let v = sub(b0, scale(b1n, dot(b0, b1n)));
    let w = sub(b2, scale(b1n, dot(b2, b1n)));
    if norm(v) < 1e-9 || norm(w) < 1e-9 {
        return None;
    }
    let x = dot(v, w);
    let y = dot(cross(b1n, v), w);
    Some(y.atan2(x))
}

/// Neighbour indices used for a residue's local direction: the residues
/// before and after, or a one-sided pair at the chain ends.
pub fn segment_ends(len: usize, i: usize) -> (usize, usize) {
    if len < 2 {
        return (i, i);
    }
    if i == 0 {
        (0, 1)
    } else if i + 1 == len {
        (len - 2, len - 1)
    } else {
        (i - 1, i + 1)
    }
}

/// Chain direction at residue `i`.
pub fn tangent(coords: &[V3], i: usize) -> V3 {
    let (a, b) = segment_ends(coords.len(), i);
    sub(coords[b], coords[a])
}
