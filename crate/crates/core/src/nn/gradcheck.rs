//! Finite-difference gradient verification.

use rand::seq::index::sample;

use super::optim::ParamGroup;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Coordinates checked per tensor, at most.
pub const MAX_COORDS_PER_TENSOR: usize = 64;

pub type GroupGrads = Vec<Vec<Tensor>>;

/// A scalar function of parameter groups that can also report its gradient.
pub trait Objective {
    fn evaluate(
        &mut self,
        groups: &[ParamGroup],
        with_grad: bool,
    ) -> Result<(f64, Option<GroupGrads>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[ParamGroup], bool) -> Result<(f64, Option<GroupGrads>)>,
{
    fn evaluate(
        &mut self,
        groups: &[ParamGroup],
        with_grad: bool,
    ) -> Result<(f64, Option<GroupGrads>)> {
        self(groups, with_grad)
    }
}

/// Several scalar losses computed from one forward pass.
pub trait MultiObjective {
    fn evaluate(
        &mut self,
        groups: &[ParamGroup],
        with_grad: bool,
    ) -> Result<(Vec<f64>, Option<Vec<GroupGrads>>)>;
}

impl<F> MultiObjective for F
where
    F: FnMut(&[ParamGroup], bool) -> Result<(Vec<f64>, Option<Vec<GroupGrads>>)>,
{
    fn evaluate(
        &mut self,
        groups: &[ParamGroup],
        with_grad: bool,
    ) -> Result<(Vec<f64>, Option<Vec<GroupGrads>>)> {
        self(groups, with_grad)
    }
}

/// Largest `|analytic - central| / max(1, |central|)` over a seeded sample of
/// coordinates (up to [`MAX_COORDS_PER_TENSOR`] per tensor).
pub fn grad_check<O: Objective>(
    objective: &mut O,
    groups: &[ParamGroup],
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    let mut multi = |g: &[ParamGroup], with_grad: bool| {
        let (v, grads) = objective.evaluate(g, with_grad)?;
        Ok((vec![v], grads.map(|g| vec![g])))
    };
    Ok(grad_check_many(&mut multi, groups, epsilon, seed)?[0])
}

/// [`grad_check`] for every output of `objective` at once, sharing each
/// perturbed evaluation. Returns the worst relative error per output.
pub fn grad_check_many<O: MultiObjective>(
    objective: &mut O,
    groups: &[ParamGroup],
    epsilon: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {} outside [1e-7, 1e-3]",
            epsilon
        )));
    }
    let (base, grads) = objective.evaluate(groups, true)?;
    if let Some(v) = base.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("loss is {} at the base point", v)));
    }
    let grads =
        grads.ok_or_else(|| Error::InvalidArgument("objective returned no gradient".into()))?;
    if grads.len() != base.len() {
        return Err(Error::Shape(format!(
            "{} losses but {} gradients",
            base.len(),
            grads.len()
        )));
    }

    let mut work = groups.to_vec();
    let mut worst = vec![0.0f64; base.len()];
    for gi in 0..groups.len() {
        for pi in 0..groups[gi].params.len() {
            let n = groups[gi].params[pi].len();
            let mut rng = rng_for(seed, &[stream::GRADCHECK, gi as u64, pi as u64]);
            let mut coords = sample(&mut rng, n, n.min(MAX_COORDS_PER_TENSOR)).into_vec();
            coords.sort_unstable();
            for c in coords {
                let orig = groups[gi].params[pi].data()[c];
                work[gi].params[pi].data_mut()[c] = orig + epsilon;
                let (plus, _) = objective.evaluate(&work, false)?;
                work[gi].params[pi].data_mut()[c] = orig - epsilon;
                let (minus, _) = objective.evaluate(&work, false)?;
                work[gi].params[pi].data_mut()[c] = orig;
                for (o, w) in worst.iter_mut().enumerate() {
                    if !plus[o].is_finite() || !minus[o].is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite loss when perturbing {}/{}[{}]",
                            groups[gi].name, groups[gi].names[pi], c
                        )));
                    }
                    let central = (plus[o] - minus[o]) / (2.0 * epsilon);
                    let analytic = grads[o][gi][pi].data()[c];
                    *w = w.max((analytic - central).abs() / central.abs().max(1.0));
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(groups: &[ParamGroup], with_grad: bool) -> Result<(f64, Option<GroupGrads>)> {
        let p = &groups[0].params[0];
        let v = p.data().iter().map(|x| x * x).sum();
        let g = with_grad.then(|| {
            vec![vec![Tensor::vector(
                p.data().iter().map(|x| 2.0 * x).collect(),
            )]]
        });
        Ok((v, g))
    }

    fn groups() -> Vec<ParamGroup> {
        let mut g = ParamGroup::new("backbone", 1e-4, 0.0).unwrap();
        g.push("x", Tensor::vector(vec![1.0, 2.0, 3.0]));
        vec![g]
    }

    #[test]
    fn polynomial_gradient_passes() {
        let gs = groups();
        let (_, grads) = sum_of_squares(&gs, true).unwrap();
        assert_eq!(grads.unwrap()[0][0].data(), &[2.0, 4.0, 6.0]);
        let err = grad_check(&mut sum_of_squares, &gs, 1e-5, 0).unwrap();
        assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut wrong = |g: &[ParamGroup], w: bool| {
            let (v, grads) = sum_of_squares(g, w)?;
            Ok((
                v,
                grads.map(|mut gr| {
                    gr[0][0].data_mut()[1] += 0.5;
                    gr
                }),
            ))
        };
        let err = grad_check(&mut wrong, &groups(), 1e-5, 0).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let mut blowup = |g: &[ParamGroup], w: bool| {
            let x = g[0].params[0].data()[2];
            let v = if x > 3.0 { f64::NAN } else { x };
            Ok((
                v,
                w.then(|| vec![vec![Tensor::vector(vec![0.0, 0.0, 1.0])]]),
            ))
        };
        let err = grad_check(&mut blowup, &groups(), 1e-5, 0).unwrap_err();
        assert!(err.to_string().contains("x[2]"), "{}", err);
    }

    #[test]
    fn many_reports_each_output_separately() {
        let mut two = |g: &[ParamGroup], w: bool| {
            let (v, grads) = sum_of_squares(g, w)?;
            let grads = grads.map(|good| {
                let mut bad = good.clone();
                bad[0][0].data_mut()[0] += 1.0;
                vec![good, bad]
            });
            Ok((vec![v, v], grads))
        };
        let errs = grad_check_many(&mut two, &groups(), 1e-5, 0).unwrap();
        assert!(errs[0] < 1e-6 && errs[1] > 0.1, "{:?}", errs);
    }

    #[test]
    fn epsilon_range_enforced() {
        assert!(grad_check(&mut sum_of_squares, &groups(), 1e-2, 0).is_err());
    }
}
