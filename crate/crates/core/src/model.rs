//! Fully-connected classifiers with exact reverse-mode gradients.
//!
//! Parameters are stored flat, layer by layer: the `fan_out x fan_in`
//! weight matrix in row-major order followed by the `fan_out` biases.
//! Hidden layers apply the activation; the last layer emits raw logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{LayoutId, Matrix, ParameterVector, RngStream};

/// Upper bound on the number of weight layers.
pub const MAX_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// A labelled minibatch with inputs in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(v) = inputs.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("input value {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same labels, different inputs (used for adversarial copies).
    pub fn with_inputs(&self, inputs: Matrix) -> Batch {
        Batch {
            inputs,
            labels: self.labels.clone(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Output of [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub params: ParameterVector,
    pub inputs: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: ParameterVector,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.len() > MAX_LAYERS + 1 {
        return Err(Error::Config(format!(
            "an MLP needs 1..={MAX_LAYERS} layers, got sizes {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::Config(format!("zero-width layer in {sizes:?}")));
    }
    Ok(())
}

impl Model {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, params: ParameterVector) -> Result<Self> {
        check_sizes(&layer_sizes)?;
        let expected = param_count(&layer_sizes);
        let layout = LayoutId::from_sizes(&layer_sizes);
        if params.len() != expected || params.layout() != layout {
            return Err(Error::Layout {
                expected: format!("{layout} ({expected} values)"),
                found: format!("{} ({} values)", params.layout(), params.len()),
            });
        }
        Ok(Self {
            layer_sizes,
            activation,
            params,
        })
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(layer_sizes: Vec<usize>, activation: Activation, rng: &mut RngStream) -> Result<Self> {
        check_sizes(&layer_sizes)?;
        let mut values = Vec::with_capacity(param_count(&layer_sizes));
        for w in layer_sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                values.push(rng.uniform_range(-bound, bound));
            }
        }
        let params = ParameterVector::new(values, LayoutId::from_sizes(&layer_sizes))?;
        Self::new(layer_sizes, activation, params)
    }

    pub fn zeros(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        check_sizes(&layer_sizes)?;
        let params = ParameterVector::zeros(param_count(&layer_sizes), LayoutId::from_sizes(&layer_sizes));
        Self::new(layer_sizes, activation, params)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn layout(&self) -> LayoutId {
        self.params.layout()
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParameterVector) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ParameterVector) -> Result<Model> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let start = offset;
            offset += (w[0] + 1) * w[1];
            (start, w[0], w[1])
        })
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "model expects {} input features, got {}",
                self.input_dim(),
                inputs.cols()
            )));
        }
        Ok(())
    }

    /// Pre-activations and activations of every layer; the last entry of
    /// `pre` is the logits matrix.
    fn forward_cache(&self, inputs: &Matrix) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        self.check_input(inputs)?;
        let p = self.params.as_slice();
        let n = inputs.rows();
        let last = self.layer_sizes.len() - 2;
        let mut acts = vec![inputs.clone()];
        let mut pre = Vec::with_capacity(last + 1);
        for (l, (start, fan_in, fan_out)) in self.layers().enumerate() {
            let w = &p[start..start + fan_in * fan_out];
            let b = &p[start + fan_in * fan_out..start + (fan_in + 1) * fan_out];
            let a = &acts[l];
            let mut z = Matrix::zeros(n, fan_out);
            for i in 0..n {
                let x = a.row(i);
                let zi = z.row_mut(i);
                for (o, zo) in zi.iter_mut().enumerate() {
                    let wr = &w[o * fan_in..(o + 1) * fan_in];
                    let mut s = b[o];
                    for (wk, xk) in wr.iter().zip(x) {
                        s += wk * xk;
                    }
                    *zo = s;
                }
            }
            if z.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            if l < last {
                let mut h = z.clone();
                h.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = self.activation.apply(*v));
                acts.push(h);
            }
            pre.push(z);
        }
        Ok((pre, acts))
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        let (mut pre, _) = self.forward_cache(inputs)?;
        Ok(pre.pop().expect("at least one layer"))
    }

    /// Arg-max class per row; ties resolve to the lowest index.
    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(inputs)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    /// Mean cross-entropy and its exact gradients with respect to the
    /// parameters and the inputs.
    pub fn backward(&self, batch: &Batch) -> Result<Gradients> {
        if batch.is_empty() {
            return Err(Error::Domain("backward on an empty batch".into()));
        }
        let (pre, acts) = self.forward_cache(&batch.inputs)?;
        let logits = pre.last().expect("at least one layer");
        let loss = loss_ce(logits, &batch.labels)?;
        let n = batch.len();
        let k = self.classes();

        let mut delta = Matrix::zeros(n, k);
        for i in 0..n {
            let probs = softmax(logits.row(i));
            let d = delta.row_mut(i);
            for (c, (dc, pc)) in d.iter_mut().zip(&probs).enumerate() {
                let target = if c == batch.labels[i] { 1.0 } else { 0.0 };
                *dc = (pc - target) / n as f64;
            }
        }

        let p = self.params.as_slice();
        let mut grad = vec![0.0; p.len()];
        let layers: Vec<_> = self.layers().collect();
        let mut grad_inputs = Matrix::zeros(0, 0);
        for (l, &(start, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let a = &acts[l];
            let w = &p[start..start + fan_in * fan_out];
            {
                let (gw, gb) = grad[start..start + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for i in 0..n {
                    let di = delta.row(i);
                    let ai = a.row(i);
                    for o in 0..fan_out {
                        let g = di[o];
                        gb[o] += g;
                        for (gwk, ak) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(ai) {
                            *gwk += g * ak;
                        }
                    }
                }
            }
            let mut prev = Matrix::zeros(n, fan_in);
            for i in 0..n {
                let di = delta.row(i);
                let pi = prev.row_mut(i);
                for o in 0..fan_out {
                    let g = di[o];
                    for (pk, wk) in pi.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *pk += g * wk;
                    }
                }
            }
            if l > 0 {
                let z = &pre[l - 1];
                let h = &acts[l];
                for ((pv, zv), hv) in prev.as_mut_slice().iter_mut().zip(z.as_slice()).zip(h.as_slice()) {
                    *pv *= self.activation.derivative(*zv, *hv);
                }
                if prev.as_slice().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { layer: l });
                }
                delta = prev;
            } else {
                grad_inputs = prev;
            }
        }
        let params = ParameterVector::new(grad, self.layout()).map_err(|_| Error::NonFinite { layer: 0 })?;
        Ok(Gradients {
            loss,
            params,
            inputs: grad_inputs,
        })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Cross-entropy of a single logit row against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn per_example_ce(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Shape(format!("label {l} beyond {} classes", logits.cols())));
    }
    Ok(logits
        .iter_rows()
        .zip(labels)
        .map(|(r, &y)| cross_entropy(r, y))
        .collect())
}

/// Mean softmax cross-entropy.
pub fn loss_ce(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Domain("cross-entropy of an empty batch".into()));
    }
    let losses = per_example_ce(logits, labels)?;
    Ok(losses.iter().sum::<f64>() / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_grad;

    fn linear_identity() -> Model {
        let sizes = vec![2, 2];
        let params = ParameterVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], LayoutId::from_sizes(&sizes)).unwrap();
        Model::new(sizes, Activation::Relu, params).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = Model::zeros(vec![3, 4, 2], Activation::Tanh).unwrap();
        let x = Matrix::from_rows(&[vec![0.2, 0.9, 0.4], vec![1.0, 0.0, 0.5]]).unwrap();
        assert!(m.forward(&x).unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(linear_identity().forward(&x).unwrap().as_slice(), &[1.0, 0.0]);
    }

    /// Independent scalar-loop forward for a 2-2-2 tanh net.
    fn scalar_forward_222(p: &[f64], x: [f64; 2]) -> [f64; 2] {
        let h0 = (p[0] * x[0] + p[1] * x[1] + p[4]).tanh();
        let h1 = (p[2] * x[0] + p[3] * x[1] + p[5]).tanh();
        [p[6] * h0 + p[7] * h1 + p[10], p[8] * h0 + p[9] * h1 + p[11]]
    }

    #[test]
    fn tanh_222_matches_scalar_oracle() {
        let mut rng = RngStream::new(0, 0);
        let m = Model::init(vec![2, 2, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let out = m.forward(&x).unwrap();
        let oracle = scalar_forward_222(m.params().as_slice(), [0.5, 0.5]);
        assert!((out.get(0, 0) - oracle[0]).abs() < 1e-15);
        assert!((out.get(0, 1) - oracle[1]).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Matrix::from_rows(&[vec![0.3, 0.3]]).unwrap();
        assert!((loss_ce(&uniform, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let saturated = Matrix::from_rows(&[vec![1e6, 0.0, 0.0]]).unwrap();
        assert!(loss_ce(&saturated, &[0]).unwrap().abs() < 1e-12);
        let l = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss_ce(&l, &[0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.313262).abs() < 1e-6);
        assert!(matches!(loss_ce(&Matrix::zeros(0, 2), &[]), Err(Error::Domain(_))));
        assert!(matches!(loss_ce(&l, &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in 2..7 {
            let l = Matrix::from_rows(&[vec![-0.4; k]]).unwrap();
            assert!((loss_ce(&l, &[k - 1]).unwrap() - (k as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = linear_identity();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn symmetric_stationary_point() {
        // zero weights and biases give equal logits; balanced labels cancel
        let m = Model::zeros(vec![2, 3, 2], Activation::Tanh).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        let batch = Batch::new(x, vec![0, 1], 2).unwrap();
        let g = m.backward(&batch).unwrap();
        assert!(g.params.as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn linear_model_input_gradient_closed_form() {
        let sizes = vec![3, 2];
        let p = vec![0.5, -1.0, 2.0, 0.25, 0.75, -0.5, 0.1, -0.2];
        let params = ParameterVector::new(p.clone(), LayoutId::from_sizes(&sizes)).unwrap();
        let m = Model::new(sizes, Activation::Relu, params).unwrap();
        let x = Matrix::from_rows(&[vec![0.2, 0.4, 0.6], vec![0.9, 0.1, 0.0]]).unwrap();
        let labels = vec![1, 0];
        let batch = Batch::new(x.clone(), labels.clone(), 2).unwrap();
        let g = m.backward(&batch).unwrap();
        let logits = m.forward(&x).unwrap();
        for i in 0..2 {
            let s = softmax(logits.row(i));
            for k in 0..3 {
                let mut expect = 0.0;
                for c in 0..2 {
                    let onehot = if c == labels[i] { 1.0 } else { 0.0 };
                    expect += p[c * 3 + k] * (s[c] - onehot) / 2.0;
                }
                assert!((g.inputs.get(i, k) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_243() {
        let mut rng = RngStream::new(5, 1);
        let m = Model::init(vec![2, 4, 3], Activation::Tanh, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.uniform(), rng.uniform()]).collect();
        let labels: Vec<usize> = (0..8).map(|_| rng.below(3)).collect();
        let batch = Batch::new(Matrix::from_rows(&rows).unwrap(), labels.clone(), 3).unwrap();
        let g = m.backward(&batch).unwrap();
        let fd = finite_diff_grad(
            |p| loss_ce(&m.with_params(p.clone()).unwrap().forward(&batch.inputs).unwrap(), &labels).unwrap(),
            m.params(),
            1e-5,
        )
        .unwrap();
        for (a, f) in g.params.as_slice().iter().zip(fd.as_slice()) {
            assert!((a - f).abs() / a.abs().max(f.abs()).max(1e-4) < 1e-4, "{a} vs {f}");
        }
    }

    #[test]
    fn batch_validation() {
        let x = Matrix::from_rows(&[vec![1.2]]).unwrap();
        assert!(Batch::new(x, vec![0], 2).is_err());
        let x = Matrix::from_rows(&[vec![0.2]]).unwrap();
        assert!(Batch::new(x.clone(), vec![2], 2).is_err());
        assert!(Batch::new(x, vec![0, 1], 2).is_err());
    }
}
