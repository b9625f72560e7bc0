//! Fully connected classifier with homogeneous-coordinate biases.
//!
//! Layer `l` holds `W_l` of shape `n_out × (n_in + 1)`; the last column is
//! the bias and every activation `a_{l-1}` carries a trailing 1, so
//! `h_l = W_l a_{l-1}`. All batched quantities are stored one example per row.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// f′(x); ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    /// f″(x); zero for piecewise-linear activations.
    #[inline]
    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

/// Per-layer gradients, shaped like [`MlpParams::layers`].
pub type LayerGrads = Vec<Matrix>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Matrix>,
    /// Activation after each hidden layer; the output layer is linear.
    pub activations: Vec<Activation>,
}

impl MlpParams {
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::contract("a network needs at least input and output sizes"));
        }
        let layers = sizes.windows(2).map(|w| Matrix::zeros(w[1], w[0] + 1)).collect();
        Ok(MlpParams {
            layers,
            activations: vec![activation; sizes.len() - 2],
        })
    }

    /// He-style uniform init: `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut p = MlpParams::zeros(sizes, activation)?;
        for w in &mut p.layers {
            let fan_in = w.cols() - 1;
            let limit = (6.0 / fan_in as f64).sqrt();
            for i in 0..w.rows() {
                for j in 0..fan_in {
                    w[(i, j)] = rng.uniform_range(-limit, limit);
                }
            }
        }
        Ok(p)
    }

    pub fn from_layers(layers: Vec<Matrix>, activations: Vec<Activation>) -> Result<Self> {
        let p = MlpParams { layers, activations };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("network has no layers"));
        }
        if self.activations.len() + 1 != self.layers.len() {
            return Err(Error::contract(format!(
                "{} layers need {} hidden activations, got {}",
                self.layers.len(),
                self.layers.len() - 1,
                self.activations.len()
            )));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() + 1 {
                return Err(Error::contract(format!(
                    "layer {} outputs {} units but layer {} expects {}",
                    l + 1,
                    pair[0].rows(),
                    l + 2,
                    pair[1].cols() - 1
                )));
            }
        }
        if self.layers.iter().any(|w| !w.is_finite()) {
            return Err(Error::contract("non-finite weight"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Matrix::rows)
    }

    /// `[n_in, n_1, …, n_out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Matrix::rows));
        s
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Matrix::shape).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|w| w.rows() * w.cols()).sum()
    }

    pub fn same_shape(&self, other_layers: &[Matrix]) -> bool {
        self.layers.len() == other_layers.len()
            && self.layers.iter().zip(other_layers).all(|(a, b)| a.shape() == b.shape())
    }

    /// Concatenation of the column-stacked layers.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(Matrix::vec_columns).collect()
    }

    /// Inverse of [`MlpParams::flatten`], keeping this network's shapes.
    pub fn unflatten(&self, v: &[f64]) -> Result<MlpParams> {
        if v.len() != self.num_params() {
            return Err(Error::contract("flat parameter length mismatch"));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for w in &self.layers {
            let n = w.rows() * w.cols();
            layers.push(Matrix::from_vec_columns(w.rows(), w.cols(), &v[offset..offset + n])?);
            offset += n;
        }
        Ok(MlpParams {
            layers,
            activations: self.activations.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &MlpParams) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.sub(b).max_abs())
            .fold(0.0, f64::max)
    }
}

/// Activations (with the homogeneous 1) and pre-activations of one batch.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `a_0 … a_{L−1}`, each `B × (n + 1)`.
    pub inputs: Vec<Matrix>,
    /// `h_1 … h_L`, each `B × n_out`.
    pub preacts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        self.preacts.last().expect("forward cache has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.logits().rows()
    }
}

fn with_ones(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let (r, c) = m.shape();
    let mut out = Matrix::zeros(r, c + 1);
    for i in 0..r {
        let src = m.row(i);
        let dst = out.row_mut(i);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = f(s);
        }
        dst[c] = 1.0;
    }
    out
}

pub fn forward(params: &MlpParams, inputs: &Matrix) -> Result<ForwardCache> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::contract(format!(
            "input width {} but network expects {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    let l_total = params.num_layers();
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(l_total),
        preacts: Vec::with_capacity(l_total),
    };
    let mut a = with_ones(inputs, |x| x);
    for (l, w) in params.layers.iter().enumerate() {
        let h = a.matmul_tr(w);
        cache.inputs.push(a);
        if l + 1 < l_total {
            let act = params.activations[l];
            a = with_ones(&h, |x| act.apply(x));
        } else {
            a = Matrix::zeros(0, 0);
        }
        cache.preacts.push(h);
    }
    Ok(cache)
}

/// Class probabilities of each row of `logits`.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let s = softmax(logits.row(i));
        p.row_mut(i).copy_from_slice(&s);
    }
    p
}

/// Mean negative log likelihood of `labels` under a categorical over `logits`.
pub fn nll_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::contract(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::contract(format!("label {y} out of range")));
        }
        total -= log_softmax(logits.row(i))[y];
    }
    Ok(total / labels.len() as f64)
}

/// Weight gradients and per-example pre-activation gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub grads: LayerGrads,
    /// `g_l = ∂E/∂h_l`, one row per example, for `l = 1 … L`.
    pub preact_grads: Vec<Matrix>,
}

/// Propagates output gradients `∂E/∂h_L` (rows = examples) to every layer.
pub fn backprop_from_output(params: &MlpParams, cache: &ForwardCache, output_grad: Matrix) -> Vec<Matrix> {
    let l_total = params.num_layers();
    let mut gs = vec![Matrix::zeros(0, 0); l_total];
    gs[l_total - 1] = output_grad;
    for l in (1..l_total).rev() {
        let upstream = gs[l].matmul(&params.layers[l]);
        let h = &cache.preacts[l - 1];
        let act = params.activations[l - 1];
        let mut g = Matrix::zeros(h.rows(), h.cols());
        for i in 0..h.rows() {
            let up = upstream.row(i);
            let hr = h.row(i);
            for (j, gij) in g.row_mut(i).iter_mut().enumerate() {
                *gij = up[j] * act.derivative(hr[j]);
            }
        }
        gs[l - 1] = g;
    }
    gs
}

/// `∂E/∂W_l = Σ_examples g_l a_{l−1}ᵀ`.
pub fn weight_grads(cache: &ForwardCache, preact_grads: &[Matrix]) -> LayerGrads {
    preact_grads
        .iter()
        .zip(&cache.inputs)
        .map(|(g, a)| g.tr_matmul(a))
        .collect()
}

/// Exact gradients of the mean NLL.
pub fn backward(params: &MlpParams, cache: &ForwardCache, labels: &[usize]) -> Result<Backward> {
    let logits = cache.logits();
    if logits.rows() != labels.len() {
        return Err(Error::contract("label count does not match cached batch"));
    }
    let b = labels.len() as f64;
    let mut g = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        g[(i, y)] -= 1.0;
    }
    g.scale(1.0 / b);
    let preact_grads = backprop_from_output(params, cache, g);
    let grads = weight_grads(cache, &preact_grads);
    Ok(Backward { grads, preact_grads })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1000;

pub fn predict(params: &MlpParams, set: &LabeledSet) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let cache = forward(params, &set.gather(chunk))?;
        let logits = cache.logits();
        preds.extend((0..logits.rows()).map(|i| argmax(logits.row(i))));
    }
    Ok(preds)
}

/// Fraction of examples whose arg-max class equals the label.
pub fn accuracy(params: &MlpParams, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(params, set)?;
    let correct = preds
        .iter()
        .zip(set.labels())
        .filter(|(&p, &l)| p == l as usize)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Mean NLL of a whole set, evaluated in chunks.
pub fn dataset_nll(params: &MlpParams, set: &LabeledSet) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let cache = forward(params, &set.gather(chunk))?;
        total += nll_loss(cache.logits(), &set.gather_labels(chunk))? * chunk.len() as f64;
    }
    Ok(total / set.len().max(1) as f64)
}
