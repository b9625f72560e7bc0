//! Per-layer curvature of the negative log likelihood: diagonal Fisher,
//! Kronecker-factored Fisher, and Kronecker-factored Gauss–Newton via the
//! backward recursion for the pre-activation Hessian.
//!
//! A Kronecker block stores the data averages `Q = E[a aᵀ]` and `G` plus the
//! dataset size `N` in `scale`; the operator it represents is
//! `N · (Q ⊗ G)` acting on column-stacked weight matrices. Diagonal blocks
//! store the averaged squared gradients shaped like the weight matrix.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::network::{backprop_from_output, backward, forward, softmax_rows, MlpParams};
use crate::numerics::{check_psd, kron, Matrix, Rng};

/// Eigenvalue floor used by the PSD checks, relative to the trace.
pub const PSD_REL_TOL: f64 = 1e-8;

/// Examples processed per forward pass during estimation.
const CHUNK: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureMethod {
    #[serde(rename = "diag", alias = "diag-fisher")]
    DiagFisher,
    #[serde(rename = "kf", alias = "kf-fisher")]
    KfFisher,
    KfGn,
}

impl CurvatureMethod {
    pub fn is_kronecker(self) -> bool {
        !matches!(self, CurvatureMethod::DiagFisher)
    }

    pub fn tag(self) -> &'static str {
        match self {
            CurvatureMethod::DiagFisher => "diag",
            CurvatureMethod::KfFisher => "kf",
            CurvatureMethod::KfGn => "kf-gn",
        }
    }
}

/// How the Fisher expectation over model labels is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LabelSampling {
    /// `samples` draws of ŷ ~ p(y | x, θ) per data point.
    MonteCarlo { samples: usize },
    /// Exact sum over all classes weighted by the predictive probabilities.
    Exact,
}

impl Default for LabelSampling {
    fn default() -> Self {
        LabelSampling::MonteCarlo { samples: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Averaged squared gradients, shaped like the layer's weight matrix.
    Diagonal(Matrix),
    /// `q`: `(n_in+1)²`, `g`: `n_out²`.
    Kronecker { q: Matrix, g: Matrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureBlock {
    pub layer: usize,
    pub kind: BlockKind,
    /// Effective dataset size multiplying the averaged factors.
    pub scale: f64,
}

impl CurvatureBlock {
    /// `(n_out, n_in + 1)` of the layer this block belongs to.
    pub fn weight_shape(&self) -> (usize, usize) {
        match &self.kind {
            BlockKind::Diagonal(d) => d.shape(),
            BlockKind::Kronecker { q, g } => (g.rows(), q.rows()),
        }
    }

    /// Curvature-vector product reshaped to the weight matrix:
    /// `N · G Δ Q` or `N · diag ∘ Δ`.
    pub fn apply(&self, delta: &Matrix) -> Matrix {
        debug_assert_eq!(delta.shape(), self.weight_shape());
        match &self.kind {
            BlockKind::Diagonal(d) => d.hadamard(delta).scaled(self.scale),
            BlockKind::Kronecker { q, g } => {
                let mut out = g.matmul(delta).matmul(q);
                out.scale(self.scale);
                out
            }
        }
    }

    /// `vec(Δ)ᵀ H vec(Δ)`.
    pub fn quadratic(&self, delta: &Matrix) -> f64 {
        delta.inner(&self.apply(delta))
    }

    /// Dense averaged block (without `scale`) in column-stacked order.
    pub fn dense_average(&self) -> Matrix {
        match &self.kind {
            BlockKind::Diagonal(d) => Matrix::from_diagonal(&d.vec_columns()),
            BlockKind::Kronecker { q, g } => kron(q, g),
        }
    }

    /// Dense operator `scale · block`.
    pub fn dense(&self) -> Matrix {
        self.dense_average().scaled(self.scale)
    }

    pub fn is_zero(&self) -> bool {
        match &self.kind {
            BlockKind::Diagonal(d) => d.max_abs() == 0.0,
            BlockKind::Kronecker { q, g } => q.max_abs() == 0.0 || g.max_abs() == 0.0,
        }
    }

    /// Eigenvalue floor check on each stored factor.
    pub fn check_psd(&self) -> Result<()> {
        let fail = |what: &str, min: f64| {
            Error::contract(format!("layer {} {what} has eigenvalue {min:e}", self.layer))
        };
        match &self.kind {
            BlockKind::Diagonal(d) => match d.as_slice().iter().copied().find(|&x| x < 0.0) {
                Some(x) => Err(fail("diagonal", x)),
                None => Ok(()),
            },
            BlockKind::Kronecker { q, g } => {
                check_psd(q, PSD_REL_TOL).map_err(|m| fail("Q factor", m))?;
                check_psd(g, PSD_REL_TOL).map_err(|m| fail("G factor", m))
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.scale.is_finite()
            && match &self.kind {
                BlockKind::Diagonal(d) => d.is_finite(),
                BlockKind::Kronecker { q, g } => q.is_finite() && g.is_finite(),
            }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSet {
    pub method: CurvatureMethod,
    pub blocks: Vec<CurvatureBlock>,
}

impl CurvatureSet {
    pub fn matches(&self, params: &MlpParams) -> bool {
        self.blocks.len() == params.num_layers()
            && self
                .blocks
                .iter()
                .zip(&params.layers)
                .all(|(b, w)| b.weight_shape() == w.shape())
    }

    pub fn check_psd(&self) -> Result<()> {
        self.blocks.iter().try_for_each(CurvatureBlock::check_psd)
    }

    /// Copy with every block's scale multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> CurvatureSet {
        let mut c = self.clone();
        c.blocks.iter_mut().for_each(|b| b.scale *= factor);
        c
    }
}

/// Draws the model labels for a chunk, example-major: all samples of
/// example 0, then example 1, and so on.
fn draw_labels(probs: &Matrix, samples: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    (0..probs.rows())
        .map(|i| (0..samples).map(|_| rng.categorical(probs.row(i))).collect())
        .collect()
}

/// Output-layer gradient slices. Each slice holds one row per example;
/// summing `g gᵀ` over slices (divided by `denominator`) gives that
/// example's contribution to the Fisher expectation over labels.
fn output_grad_slices(probs: &Matrix, sampling: LabelSampling, rng: &mut Rng) -> Result<(Vec<Matrix>, f64)> {
    let (b, c) = probs.shape();
    match sampling {
        LabelSampling::MonteCarlo { samples } => {
            if samples == 0 {
                return Err(Error::contract("samples_per_point must be at least 1"));
            }
            let labels = draw_labels(probs, samples, rng);
            let slices = (0..samples)
                .map(|s| {
                    let mut g = probs.clone();
                    for (i, ls) in labels.iter().enumerate() {
                        g[(i, ls[s])] -= 1.0;
                    }
                    g
                })
                .collect();
            Ok((slices, samples as f64))
        }
        LabelSampling::Exact => {
            let slices = (0..c)
                .map(|y| {
                    Matrix::from_fn(b, c, |i, k| {
                        let onehot = if k == y { 1.0 } else { 0.0 };
                        probs[(i, y)].sqrt() * (probs[(i, k)] - onehot)
                    })
                })
                .collect();
            Ok((slices, 1.0))
        }
    }
}

fn check_inputs(params: &MlpParams, set: &LabeledSet) -> Result<()> {
    params.validate()?;
    if set.is_empty() {
        return Err(Error::contract("curvature needs at least one data point"));
    }
    if set.input_dim() != params.input_dim() {
        return Err(Error::contract("data width does not match the network"));
    }
    Ok(())
}

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(CHUNK).map(<[usize]>::to_vec).collect()
}

/// Diagonal of the Fisher: mean over data and model labels of the squared
/// per-example gradient of `log p(ŷ | x, θ)`.
pub fn diagonal_fisher(params: &MlpParams, set: &LabeledSet, sampling: LabelSampling, rng: &mut Rng) -> Result<CurvatureSet> {
    check_inputs(params, set)?;
    let mut diag: Vec<Matrix> = params.layers.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    let mut denom = 1.0;
    for idx in chunks(set.len()) {
        let cache = forward(params, &set.gather(&idx))?;
        let probs = softmax_rows(cache.logits());
        let (slices, d) = output_grad_slices(&probs, sampling, rng)?;
        denom = d;
        let a_sq: Vec<Matrix> = cache.inputs.iter().map(|a| a.map(|x| x * x)).collect();
        for out in slices {
            let gs = backprop_from_output(params, &cache, out);
            for ((acc, g), a2) in diag.iter_mut().zip(&gs).zip(&a_sq) {
                acc.add_tr_matmul(1.0, &g.map(|x| x * x), a2);
            }
        }
    }
    let n = set.len() as f64;
    let blocks = diag
        .into_iter()
        .enumerate()
        .map(|(layer, mut d)| {
            d.scale(1.0 / (n * denom));
            CurvatureBlock {
                layer,
                kind: BlockKind::Diagonal(d),
                scale: n,
            }
        })
        .collect();
    Ok(CurvatureSet {
        method: CurvatureMethod::DiagFisher,
        blocks,
    })
}

fn finish_kronecker(method: CurvatureMethod, qs: Vec<Matrix>, gs: Vec<Matrix>, n: f64, g_denom: f64) -> CurvatureSet {
    let blocks = qs
        .into_iter()
        .zip(gs)
        .enumerate()
        .map(|(layer, (mut q, mut g))| {
            q.scale(1.0 / n);
            g.scale(1.0 / (n * g_denom));
            q.symmetrize();
            g.symmetrize();
            CurvatureBlock {
                layer,
                kind: BlockKind::Kronecker { q, g },
                scale: n,
            }
        })
        .collect();
    CurvatureSet { method, blocks }
}

fn zero_factors(params: &MlpParams) -> (Vec<Matrix>, Vec<Matrix>) {
    let qs = params.layers.iter().map(|w| Matrix::zeros(w.cols(), w.cols())).collect();
    let gs = params.layers.iter().map(|w| Matrix::zeros(w.rows(), w.rows())).collect();
    (qs, gs)
}

/// Kronecker-factored Fisher: `Q_l = E[a_{l−1} a_{l−1}ᵀ]`,
/// `G_l = E[g_l g_lᵀ]` with `g_l = −∂ log p(ŷ|x,θ)/∂h_l`, ŷ from the model.
pub fn kf_fisher(params: &MlpParams, set: &LabeledSet, sampling: LabelSampling, rng: &mut Rng) -> Result<CurvatureSet> {
    check_inputs(params, set)?;
    let (mut qs, mut gs) = zero_factors(params);
    let mut denom = 1.0;
    for idx in chunks(set.len()) {
        let cache = forward(params, &set.gather(&idx))?;
        for (q, a) in qs.iter_mut().zip(&cache.inputs) {
            q.add_tr_matmul(1.0, a, a);
        }
        let probs = softmax_rows(cache.logits());
        let (slices, d) = output_grad_slices(&probs, sampling, rng)?;
        denom = d;
        for out in slices {
            let pre = backprop_from_output(params, &cache, out);
            for (g_acc, g) in gs.iter_mut().zip(&pre) {
                g_acc.add_tr_matmul(1.0, g, g);
            }
        }
    }
    Ok(finish_kronecker(CurvatureMethod::KfFisher, qs, gs, set.len() as f64, denom))
}

/// Hessian of softmax cross-entropy w.r.t. the logits: `diag(p) − p pᵀ`.
pub fn softmax_ce_hessian(probs: &[f64]) -> Matrix {
    let n = probs.len();
    Matrix::from_fn(n, n, |i, j| {
        let d = if i == j { probs[i] } else { 0.0 };
        d - probs[i] * probs[j]
    })
}

/// Weight matrix without its bias column.
fn drop_bias(w: &Matrix) -> Matrix {
    Matrix::from_fn(w.rows(), w.cols() - 1, |i, j| w[(i, j)])
}

/// Per-example pre-activation Hessians of the NLL of the true labels,
/// `𝓗_l = B_l W̃ᵀ_{l+1} 𝓗_{l+1} W̃_{l+1} B_l + D_l`, seeded with
/// `𝓗_L = diag(p) − p pᵀ`. `W̃` excludes the bias column.
/// Returns `[example][layer]`.
pub fn preact_hessians(params: &MlpParams, inputs: &Matrix, labels: &[usize]) -> Result<Vec<Vec<Matrix>>> {
    let cache = forward(params, inputs)?;
    let l_total = params.num_layers();
    let probs = softmax_rows(cache.logits());
    // Per-example (not batch-averaged) gradients of the true-label NLL.
    let mut out_grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        out_grad[(i, y)] -= 1.0;
    }
    let pre = backprop_from_output(params, &cache, out_grad);
    let stripped: Vec<Matrix> = params.layers.iter().map(drop_bias).collect();
    let mut result = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let mut hs = vec![Matrix::zeros(0, 0); l_total];
        hs[l_total - 1] = softmax_ce_hessian(probs.row(i));
        for l in (0..l_total - 1).rev() {
            let w = &stripped[l + 1];
            let act = params.activations[l];
            let h_row = cache.preacts[l].row(i);
            let mut m = w.tr_matmul(&hs[l + 1].matmul(w));
            // ∂E/∂a_l = W̃ᵀ_{l+1} g_{l+1}
            let de_da = w.tr_matmul(&Matrix::from_vec(w.rows(), 1, pre[l + 1].row(i).to_vec())?);
            let n = m.rows();
            for r in 0..n {
                let br = act.derivative(h_row[r]);
                for c in 0..n {
                    m[(r, c)] *= br * act.derivative(h_row[c]);
                }
                m[(r, r)] += act.second_derivative(h_row[r]) * de_da[(r, 0)];
            }
            hs[l] = m;
        }
        result.push(hs);
    }
    Ok(result)
}

/// Kronecker factors with `G_l` the data average of the recursive
/// pre-activation Hessian (Gauss–Newton for piecewise-linear activations).
pub fn kf_preact_gn(params: &MlpParams, set: &LabeledSet) -> Result<CurvatureSet> {
    check_inputs(params, set)?;
    let (mut qs, mut gs) = zero_factors(params);
    for idx in chunks(set.len()) {
        let x = set.gather(&idx);
        let cache = forward(params, &x)?;
        for (q, a) in qs.iter_mut().zip(&cache.inputs) {
            q.add_tr_matmul(1.0, a, a);
        }
        for hs in preact_hessians(params, &x, &set.gather_labels(&idx))? {
            for (g, h) in gs.iter_mut().zip(&hs) {
                g.axpy(1.0, h);
            }
        }
    }
    Ok(finish_kronecker(CurvatureMethod::KfGn, qs, gs, set.len() as f64, 1.0))
}

pub fn estimate(
    method: CurvatureMethod,
    params: &MlpParams,
    set: &LabeledSet,
    sampling: LabelSampling,
    rng: &mut Rng,
) -> Result<CurvatureSet> {
    match method {
        CurvatureMethod::DiagFisher => diagonal_fisher(params, set, sampling, rng),
        CurvatureMethod::KfFisher => kf_fisher(params, set, sampling, rng),
        CurvatureMethod::KfGn => kf_preact_gn(params, set),
    }
}

/// Largest layer (in parameters) the dense oracle accepts.
pub const ORACLE_MAX_LAYER_PARAMS: usize = 2000;

/// Dense per-layer block of the sampled Fisher, built one example and one
/// label at a time from plain backpropagation: the average of
/// `vec(∇_W)vec(∇_W)ᵀ`. Consumes random draws in the same order as the
/// factored estimators so both see identical labels. Verification only.
pub fn full_fisher_oracle(params: &MlpParams, set: &LabeledSet, sampling: LabelSampling, rng: &mut Rng) -> Result<Vec<Matrix>> {
    check_inputs(params, set)?;
    if let Some(w) = params.layers.iter().find(|w| w.rows() * w.cols() > ORACLE_MAX_LAYER_PARAMS) {
        return Err(Error::contract(format!(
            "dense oracle limited to {ORACLE_MAX_LAYER_PARAMS} parameters per layer, got {}",
            w.rows() * w.cols()
        )));
    }
    let mut dense: Vec<Matrix> = params
        .layers
        .iter()
        .map(|w| Matrix::zeros(w.rows() * w.cols(), w.rows() * w.cols()))
        .collect();
    let mut total_weight = 0.0;
    for i in 0..set.len() {
        let cache = forward(params, &set.gather(&[i]))?;
        let probs = softmax_rows(cache.logits());
        let draws: Vec<(usize, f64)> = match sampling {
            LabelSampling::MonteCarlo { samples } => {
                if samples == 0 {
                    return Err(Error::contract("samples_per_point must be at least 1"));
                }
                (0..samples).map(|_| (rng.categorical(probs.row(0)), 1.0)).collect()
            }
            LabelSampling::Exact => probs.row(0).iter().copied().enumerate().collect(),
        };
        for (y, weight) in draws {
            let grads = backward(params, &cache, &[y])?.grads;
            for (acc, g) in dense.iter_mut().zip(&grads) {
                let v = g.vec_columns();
                let row = Matrix::from_vec(1, v.len(), v)?;
                acc.add_tr_matmul(weight, &row, &row);
            }
            total_weight += weight;
        }
    }
    let norm = match sampling {
        LabelSampling::MonteCarlo { samples } => (set.len() * samples) as f64,
        LabelSampling::Exact => set.len() as f64,
    };
    debug_assert!((total_weight - norm).abs() < 1e-6 * norm);
    dense.iter_mut().for_each(|d| d.scale(1.0 / norm));
    Ok(dense)
}
