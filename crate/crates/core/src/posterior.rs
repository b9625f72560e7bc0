//! Gaussian approximate posterior carried from task to task.
//!
//! The precision is kept exactly as `τI + Σ_i λ_i H_i`, one stored term per
//! task: a sum of Kronecker products is not itself Kronecker factored, so
//! nothing is folded unless [`PosteriorState::compacted`] is asked for.

use serde::{Deserialize, Serialize};

use crate::curvature::{BlockKind, CurvatureBlock, CurvatureSet};
use crate::error::{Error, Result};
use crate::network::LayerGrads;
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One accumulated precision centered at the latest mode.
    Online,
    /// One penalty per task, each centered at that task's mode (EWC-style).
    PerTask,
    /// All curvatures re-evaluated at the latest mode after every task.
    Approximate,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Online => "online",
            Variant::PerTask => "per-task",
            Variant::Approximate => "approximate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTerm {
    pub center: Vec<Matrix>,
    pub blocks: CurvatureSet,
    /// λ multiplier on this term's curvature.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub variant: Variant,
    /// τ, the precision of the isotropic Gaussian prior.
    pub prior_precision: f64,
    pub prior_center: Vec<Matrix>,
    pub terms: Vec<PenaltyTerm>,
    pub current_mode: Option<Vec<Matrix>>,
    pub tasks_seen: usize,
    /// Set once terms have been folded by [`PosteriorState::compacted`].
    pub compacted: bool,
}

fn zeros_like(shapes: &[(usize, usize)]) -> Vec<Matrix> {
    shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::contract(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    Ok(())
}

/// Zero-mean isotropic prior with precision `τ` and no task terms.
pub fn init_posterior(variant: Variant, prior_precision: f64, shapes: &[(usize, usize)]) -> Result<PosteriorState> {
    if !(prior_precision.is_finite() && prior_precision >= 0.0) {
        return Err(Error::contract(format!("prior precision must be ≥ 0, got {prior_precision}")));
    }
    Ok(PosteriorState {
        variant,
        prior_precision,
        prior_center: zeros_like(shapes),
        terms: Vec::new(),
        current_mode: None,
        tasks_seen: 0,
        compacted: false,
    })
}

impl PosteriorState {
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.prior_center.iter().map(Matrix::shape).collect()
    }

    fn check_shapes(&self, theta: &[Matrix]) -> Result<()> {
        if theta.len() != self.prior_center.len()
            || theta.iter().zip(&self.prior_center).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::contract("parameter shapes do not match the posterior"));
        }
        Ok(())
    }

    fn check_curvature(&self, curvature: &CurvatureSet) -> Result<()> {
        let ok = curvature.blocks.len() == self.prior_center.len()
            && curvature
                .blocks
                .iter()
                .zip(&self.prior_center)
                .all(|(b, c)| b.weight_shape() == c.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::contract("curvature blocks do not match the network"))
        }
    }

    fn require(&self, variant: Variant) -> Result<()> {
        if self.variant != variant {
            return Err(Error::contract(format!(
                "{} update applied to a {} posterior",
                variant.tag(),
                self.variant.tag()
            )));
        }
        Ok(())
    }

    /// `½(θ − μ)ᵀ Λ (θ − μ)` with the variant's centers, and its gradient.
    pub fn penalty_and_grad(&self, theta: &[Matrix]) -> Result<(f64, LayerGrads)> {
        self.check_shapes(theta)?;
        let tau = self.prior_precision;
        let mut value = 0.0;
        let mut grads: LayerGrads = Vec::with_capacity(theta.len());
        for (w, c) in theta.iter().zip(&self.prior_center) {
            let mut d = w.sub(c);
            value += 0.5 * tau * d.inner(&d);
            d.scale(tau);
            grads.push(d);
        }
        for term in &self.terms {
            if term.weight == 0.0 {
                continue;
            }
            for ((block, w), (c, g)) in term
                .blocks
                .blocks
                .iter()
                .zip(theta)
                .zip(term.center.iter().zip(grads.iter_mut()))
            {
                if block.is_zero() {
                    continue;
                }
                let delta = w.sub(c);
                let hd = block.apply(&delta);
                value += 0.5 * term.weight * delta.inner(&hd);
                g.axpy(term.weight, &hd);
            }
        }
        Ok((value, grads))
    }

    pub fn penalty(&self, theta: &[Matrix]) -> Result<f64> {
        Ok(self.penalty_and_grad(theta)?.0)
    }

    pub fn penalty_grad(&self, theta: &[Matrix]) -> Result<LayerGrads> {
        Ok(self.penalty_and_grad(theta)?.1)
    }

    /// Adds `λ H(μ_{t+1})` to the precision and moves every center, the
    /// prior's included, to the new mode.
    pub fn online_update(&self, new_mode: &[Matrix], curvature: CurvatureSet, lambda: f64) -> Result<PosteriorState> {
        self.require(Variant::Online)?;
        self.check_shapes(new_mode)?;
        self.check_curvature(&curvature)?;
        check_lambda(lambda)?;
        let mut next = self.clone();
        next.terms.push(PenaltyTerm {
            center: new_mode.to_vec(),
            blocks: curvature,
            weight: lambda,
        });
        for t in &mut next.terms {
            t.center = new_mode.to_vec();
        }
        next.prior_center = new_mode.to_vec();
        next.current_mode = Some(new_mode.to_vec());
        next.tasks_seen += 1;
        Ok(next)
    }

    /// Adds a penalty centered at this task's own mode; earlier centers and
    /// the zero-centered prior stay where they are.
    pub fn per_task_update(&self, new_mode: &[Matrix], curvature: CurvatureSet, lambda: f64) -> Result<PosteriorState> {
        self.require(Variant::PerTask)?;
        self.check_shapes(new_mode)?;
        self.check_curvature(&curvature)?;
        check_lambda(lambda)?;
        let mut next = self.clone();
        next.terms.push(PenaltyTerm {
            center: new_mode.to_vec(),
            blocks: curvature,
            weight: lambda,
        });
        next.current_mode = Some(new_mode.to_vec());
        next.tasks_seen += 1;
        Ok(next)
    }

    /// Replaces every term with curvatures of tasks `1..=t+1` evaluated at
    /// the new mode, all centered there.
    pub fn approximate_refresh(
        &self,
        new_mode: &[Matrix],
        curvatures: Vec<CurvatureSet>,
        lambda: f64,
    ) -> Result<PosteriorState> {
        self.require(Variant::Approximate)?;
        self.check_shapes(new_mode)?;
        check_lambda(lambda)?;
        if curvatures.len() != self.tasks_seen + 1 {
            return Err(Error::contract(format!(
                "approximate refresh after {} tasks needs {} curvature sets, got {}",
                self.tasks_seen,
                self.tasks_seen + 1,
                curvatures.len()
            )));
        }
        for c in &curvatures {
            self.check_curvature(c)?;
        }
        let mut next = self.clone();
        next.terms = curvatures
            .into_iter()
            .map(|blocks| PenaltyTerm {
                center: new_mode.to_vec(),
                blocks,
                weight: lambda,
            })
            .collect();
        next.prior_center = new_mode.to_vec();
        next.current_mode = Some(new_mode.to_vec());
        next.tasks_seen += 1;
        Ok(next)
    }

    /// Dispatches to the update matching this posterior's variant. For the
    /// approximate variant `curvatures` holds one set per task so far;
    /// the others take exactly one set.
    pub fn update(&self, new_mode: &[Matrix], mut curvatures: Vec<CurvatureSet>, lambda: f64) -> Result<PosteriorState> {
        match self.variant {
            Variant::Approximate => self.approximate_refresh(new_mode, curvatures, lambda),
            _ => {
                if curvatures.len() != 1 {
                    return Err(Error::contract("online and per-task updates take one curvature set"));
                }
                let c = curvatures.pop().expect("length checked");
                if self.variant == Variant::Online {
                    self.online_update(new_mode, c, lambda)
                } else {
                    self.per_task_update(new_mode, c, lambda)
                }
            }
        }
    }

    /// Folds all terms of a single-center posterior into one block per layer.
    ///
    /// Diagonal terms add exactly. Kronecker terms are approximated by the
    /// product of sums, `mean_i(Q_i) ⊗ Σ_i λ_i N_i G_i`, which is exact for
    /// one term and approximate otherwise.
    pub fn compacted(&self) -> Result<PosteriorState> {
        if self.variant == Variant::PerTask {
            return Err(Error::contract("per-task terms have distinct centers and cannot be folded"));
        }
        let Some(first) = self.terms.first() else {
            return Ok(self.clone());
        };
        let k = self.terms.len() as f64;
        let mut blocks = Vec::with_capacity(first.blocks.blocks.len());
        for (layer, proto) in first.blocks.blocks.iter().enumerate() {
            let kind = match &proto.kind {
                BlockKind::Diagonal(d0) => {
                    let mut acc = Matrix::zeros(d0.rows(), d0.cols());
                    for t in &self.terms {
                        let b = &t.blocks.blocks[layer];
                        let BlockKind::Diagonal(d) = &b.kind else {
                            return Err(Error::contract("cannot fold mixed curvature kinds"));
                        };
                        acc.axpy(t.weight * b.scale, d);
                    }
                    BlockKind::Diagonal(acc)
                }
                BlockKind::Kronecker { q: q0, g: g0 } => {
                    let mut q_acc = Matrix::zeros(q0.rows(), q0.cols());
                    let mut g_acc = Matrix::zeros(g0.rows(), g0.cols());
                    for t in &self.terms {
                        let b = &t.blocks.blocks[layer];
                        let BlockKind::Kronecker { q, g } = &b.kind else {
                            return Err(Error::contract("cannot fold mixed curvature kinds"));
                        };
                        q_acc.axpy(1.0 / k, q);
                        g_acc.axpy(t.weight * b.scale, g);
                    }
                    BlockKind::Kronecker { q: q_acc, g: g_acc }
                }
            };
            blocks.push(CurvatureBlock { layer, kind, scale: 1.0 });
        }
        let mut next = self.clone();
        next.terms = vec![PenaltyTerm {
            center: first.center.clone(),
            blocks: CurvatureSet {
                method: first.blocks.method,
                blocks,
            },
            weight: 1.0,
        }];
        next.compacted = true;
        Ok(next)
    }

    /// Dense Hessian of the penalty over the flattened parameters (layers in
    /// order, each column-stacked). Only sensible for tiny networks.
    pub fn dense_hessian(&self) -> Matrix {
        let sizes: Vec<usize> = self.prior_center.iter().map(|c| c.rows() * c.cols()).collect();
        let total: usize = sizes.iter().sum();
        let mut h = Matrix::identity(total).scaled(self.prior_precision);
        for term in &self.terms {
            let mut offset = 0;
            for (block, &n) in term.blocks.blocks.iter().zip(&sizes) {
                let d = block.dense();
                for i in 0..n {
                    for j in 0..n {
                        h[(offset + i, offset + j)] += term.weight * d[(i, j)];
                    }
                }
                offset += n;
            }
        }
        h
    }
}
