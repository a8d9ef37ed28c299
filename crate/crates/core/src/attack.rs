//! Projected gradient ascent on the input, under an l-inf or l2 budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::numeric::{Matrix, Norm, RngStream};

/// Budget and schedule of a PGD attack. The random stream used for the
/// random start is owned by the caller and passed to [`pgd_attack`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackSpec {
    /// 10 steps of size eps/4 from a random start.
    pub fn training(norm: Norm, epsilon: f64) -> Self {
        Self {
            norm,
            epsilon,
            step_size: epsilon / 4.0,
            steps: 10,
            random_start: true,
        }
    }

    /// 20 steps of size eps/8 from the clean input.
    pub fn evaluation(norm: Norm, epsilon: f64) -> Self {
        Self {
            norm,
            epsilon,
            step_size: epsilon / 8.0,
            steps: 20,
            random_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("attack epsilon {} must be >= 0", self.epsilon)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("attack step size {} must be >= 0", self.step_size)));
        }
        Ok(())
    }
}

/// Steepest-ascent direction for the given norm, per example (row).
/// A zero gradient maps to no move.
pub fn step_direction(grad: &Matrix, norm: Norm) -> Matrix {
    let mut out = grad.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        match norm {
            Norm::Linf => row.iter_mut().for_each(|g| {
                *g = if *g > 0.0 {
                    1.0
                } else if *g < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Norm::L2 => {
                let n = row.iter().map(|g| g * g).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|g| *g /= n);
                } else {
                    row.iter_mut().for_each(|g| *g = 0.0);
                }
            }
        }
    }
    out
}

/// Projects `candidate` onto the `epsilon` ball around `anchor`, then
/// clamps into the `[0, 1]` box.
pub fn project(candidate: &Matrix, anchor: &Matrix, norm: Norm, epsilon: f64) -> Result<Matrix> {
    if candidate.rows() != anchor.rows() || candidate.cols() != anchor.cols() {
        return Err(Error::Shape(format!(
            "candidate {}x{} vs anchor {}x{}",
            candidate.rows(),
            candidate.cols(),
            anchor.rows(),
            anchor.cols()
        )));
    }
    let mut out = candidate.clone();
    for i in 0..out.rows() {
        let a = anchor.row(i);
        let row = out.row_mut(i);
        match norm {
            Norm::Linf => {
                for (x, &ax) in row.iter_mut().zip(a) {
                    *x = ax + (*x - ax).clamp(-epsilon, epsilon);
                }
            }
            Norm::L2 => {
                let dist = row
                    .iter()
                    .zip(a)
                    .map(|(x, ax)| (x - ax) * (x - ax))
                    .sum::<f64>()
                    .sqrt();
                if dist > epsilon {
                    let scale = epsilon / dist;
                    for (x, &ax) in row.iter_mut().zip(a) {
                        *x = ax + (*x - ax) * scale;
                    }
                }
            }
        }
        row.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    }
    Ok(out)
}

fn random_start(anchor: &Matrix, norm: Norm, epsilon: f64, rng: &mut RngStream) -> Matrix {
    let d = anchor.cols();
    let mut out = anchor.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        match norm {
            Norm::Linf => row
                .iter_mut()
                .for_each(|x| *x += epsilon * rng.uniform_range(-1.0, 1.0)),
            Norm::L2 => {
                let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let n = dir.iter().map(|g| g * g).sum::<f64>().sqrt();
                let radius = epsilon * rng.uniform().powf(1.0 / d as f64);
                if n > 0.0 {
                    for (x, g) in row.iter_mut().zip(&dir) {
                        *x += radius * g / n;
                    }
                }
            }
        }
    }
    out
}

/// Iterates `x' <- project(x' + step_size * step_direction(grad))` for
/// `spec.steps` steps, maximizing the model's cross-entropy.
pub fn pgd_attack(model: &Model, batch: &Batch, spec: &AttackSpec, rng: &mut RngStream) -> Result<Matrix> {
    spec.validate()?;
    if batch.inputs.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "model expects {} features, batch has {}",
            model.input_dim(),
            batch.inputs.cols()
        )));
    }
    let anchor = &batch.inputs;
    let mut x = if spec.random_start {
        project(&random_start(anchor, spec.norm, spec.epsilon, rng), anchor, spec.norm, spec.epsilon)?
    } else {
        anchor.clone()
    };
    if batch.is_empty() {
        return Ok(x);
    }
    for _ in 0..spec.steps {
        let grads = model.backward(&batch.with_inputs(x.clone()))?;
        let dir = step_direction(&grads.inputs, spec.norm);
        for (xv, dv) in x.as_mut_slice().iter_mut().zip(dir.as_slice()) {
            *xv += spec.step_size * dv;
        }
        x = project(&x, anchor, spec.norm, spec.epsilon)?;
    }
    Ok(x)
}
