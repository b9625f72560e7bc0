mod common;

use common::*;
use kflaplace::curvature::{
    diagonal_fisher, full_fisher_oracle, kf_fisher, kf_preact_gn, preact_hessians, BlockKind, CurvatureBlock,
    CurvatureMethod, CurvatureSet, LabelSampling,
};
use kflaplace::dataset::LabeledSet;
use kflaplace::network::{backward, forward, nll_loss, Activation, MlpParams};
use kflaplace::numerics::{Matrix, Rng};
use kflaplace::posterior::{init_posterior, Variant};

fn kron_set(q: Matrix, g: Matrix, scale: f64) -> CurvatureSet {
    CurvatureSet {
        method: CurvatureMethod::KfFisher,
        blocks: vec![CurvatureBlock {
            layer: 0,
            kind: BlockKind::Kronecker { q, g },
            scale,
        }],
    }
}

#[test]
fn kronecker_penalty_matches_dense_product() {
    let mut rng = Rng::new(11);
    for trial in 0..50 {
        let n_out = 1 + (rng.next_u64() % 8) as usize;
        let n_in1 = 1 + (rng.next_u64() % 8) as usize;
        let q = random_psd(n_in1, 1 + trial % 4, &mut rng);
        let g = random_psd(n_out, 1 + trial % 3, &mut rng);
        let n = rng.uniform_range(1.0, 100.0);
        let lambda = rng.uniform_range(0.1, 10.0);
        let mu = random_matrix(n_out, n_in1, &mut rng);
        let delta = random_matrix(n_out, n_in1, &mut rng);
        let theta = mu.add(&delta);

        let post = init_posterior(Variant::Online, 0.0, &[(n_out, n_in1)])
            .unwrap()
            .online_update(&[mu], kron_set(q.clone(), g.clone(), n), lambda)
            .unwrap();
        let (value, grad) = post.penalty_and_grad(&[theta]).unwrap();

        let dense = naive_kron(&q, &g);
        let v = vec_cols(&delta);
        let hv = matvec(&dense, &v);
        let want_value = 0.5 * lambda * n * dot(&v, &hv);
        let want_grad: Vec<f64> = hv.iter().map(|x| lambda * n * x).collect();

        assert!(rel_err(value, want_value) < 1e-10, "trial {trial}: {value} vs {want_value}");
        assert!(rel_err_slices(&vec_cols(&grad[0]), &want_grad) < 1e-10, "trial {trial} gradient");
    }
}

fn loss_at(params: &MlpParams, x: &Matrix, y: &[usize]) -> f64 {
    nll_loss(forward(params, x).unwrap().logits(), y).unwrap()
}

#[test]
fn backprop_matches_central_differences() {
    for act in [Activation::Relu, Activation::Tanh, Activation::Identity] {
        let mut rng = Rng::new(5);
        let params = random_params(&[5, 3, 2], act, &mut rng);
        let x = random_matrix(4, 5, &mut rng);
        let y = [0, 1, 1, 0];
        let grads = backward(&params, &forward(&params, &x).unwrap(), &y).unwrap().grads;
        let eps = 1e-5;
        for (l, w) in params.layers.iter().enumerate() {
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let mut plus = params.clone();
                    plus.layers[l][(i, j)] += eps;
                    let mut minus = params.clone();
                    minus.layers[l][(i, j)] -= eps;
                    let fd = (loss_at(&plus, &x, &y) - loss_at(&minus, &x, &y)) / (2.0 * eps);
                    let an = grads[l][(i, j)];
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    assert!(err < 1e-6, "{act:?} layer {l} ({i},{j}): fd {fd} vs {an}");
                }
            }
        }
    }
}

#[test]
fn preactivation_recursion_matches_finite_difference_hessian() {
    for act in [Activation::Identity, Activation::Tanh] {
        let mut rng = Rng::new(21);
        let params = random_params(&[4, 5, 3, 3], act, &mut rng);
        let x = random_matrix(3, 4, &mut rng);
        let labels = [2, 0, 1];
        let hs = preact_hessians(&params, &x, &labels).unwrap();
        let cache = forward(&params, &x).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            for l in 0..params.num_layers() {
                let h0 = cache.preacts[l].row(i).to_vec();
                let fd = fd_hessian(|h| nll_from_preact(&params, l, h, y), &h0, 1e-4);
                let err = rel_err_slices(fd.as_slice(), hs[i][l].as_slice());
                assert!(err < 1e-5, "{act:?} example {i} layer {l}: relative error {err:e}");
            }
        }
    }
}

#[test]
fn single_example_output_block_equals_weight_hessian() {
    // For the last layer the exact Hessian of the NLL w.r.t. W_L is a aᵀ ⊗ 𝓗_L.
    let mut rng = Rng::new(8);
    let params = random_params(&[3, 4, 3], Activation::Tanh, &mut rng);
    let set = random_set(1, 3, 3, &mut rng);
    let y = set.label(0);
    let x = set.images();
    let gn = kf_preact_gn(&params, &set).unwrap();
    let last = params.num_layers() - 1;
    let w0 = vec_cols(&params.layers[last]);
    let (r, c) = params.layers[last].shape();
    let f = |v: &[f64]| {
        let mut p = params.clone();
        p.layers[last] = Matrix::from_vec_columns(r, c, v).unwrap();
        loss_at(&p, &x, &[y])
    };
    let fd = fd_hessian(f, &w0, 1e-4);
    let dense = gn.blocks[last].dense();
    assert!(rel_err_slices(fd.as_slice(), dense.as_slice()) < 1e-5);
}

fn oracle_params(rng: &mut Rng) -> (MlpParams, LabeledSet) {
    let params = random_params(&[4, 5, 3], Activation::Relu, rng);
    let set = random_set(20, 4, 3, rng);
    (params, set)
}

#[test]
fn diagonal_fisher_equals_dense_fisher_diagonal() {
    let samplings = [
        LabelSampling::MonteCarlo { samples: 1 },
        LabelSampling::MonteCarlo { samples: 3 },
        LabelSampling::Exact,
    ];
    for sampling in samplings {
        let mut rng = Rng::new(2);
        let (params, set) = oracle_params(&mut rng);
        let diag = diagonal_fisher(&params, &set, sampling, &mut Rng::new(77)).unwrap();
        let dense = full_fisher_oracle(&params, &set, sampling, &mut Rng::new(77)).unwrap();
        for (block, full) in diag.blocks.iter().zip(&dense) {
            let BlockKind::Diagonal(d) = &block.kind else { panic!("diagonal expected") };
            let err = rel_err_slices(&vec_cols(d), &full.diagonal());
            assert!(err < 1e-10, "{sampling:?} layer {}: {err:e}", block.layer);
            assert_eq!(block.scale, set.len() as f64);
        }
    }
}

#[test]
fn single_example_kronecker_fisher_is_exact() {
    for sampling in [LabelSampling::MonteCarlo { samples: 1 }, LabelSampling::Exact] {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let params = random_params(&[4, 5, 3], Activation::Relu, &mut rng);
            let set = random_set(1, 4, 3, &mut rng);
            let kf = kf_fisher(&params, &set, sampling, &mut Rng::new(seed + 100)).unwrap();
            let dense = full_fisher_oracle(&params, &set, sampling, &mut Rng::new(seed + 100)).unwrap();
            for (block, full) in kf.blocks.iter().zip(&dense) {
                let BlockKind::Kronecker { q, g } = &block.kind else { panic!("kronecker expected") };
                let err = rel_err_slices(naive_kron(q, g).as_slice(), full.as_slice());
                // Exact expectation is rank ≤ C per example, still Q ⊗ E[g gᵀ] for one input.
                assert!(err < 1e-10, "{sampling:?} seed {seed} layer {}: {err:e}", block.layer);
            }
        }
    }
}

#[test]
fn duplicated_data_doubles_scale_only() {
    let mut rng = Rng::new(4);
    let (params, set) = oracle_params(&mut rng);
    let doubled = set.repeated(2);
    let sampling = LabelSampling::Exact;
    let once = kf_fisher(&params, &set, sampling, &mut Rng::new(1)).unwrap();
    let twice = kf_fisher(&params, &doubled, sampling, &mut Rng::new(1)).unwrap();
    for (a, b) in once.blocks.iter().zip(&twice.blocks) {
        assert_eq!(b.scale, 2.0 * a.scale);
        assert!(rel_err_slices(a.dense_average().as_slice(), b.dense_average().as_slice()) < 1e-12);
        assert!(rel_err_slices(a.dense().scaled(2.0).as_slice(), b.dense().as_slice()) < 1e-12);
    }
    let d1 = diagonal_fisher(&params, &set, sampling, &mut Rng::new(1)).unwrap();
    let d2 = diagonal_fisher(&params, &doubled, sampling, &mut Rng::new(1)).unwrap();
    for (a, b) in d1.blocks.iter().zip(&d2.blocks) {
        assert!(rel_err_slices(a.dense().scaled(2.0).as_slice(), b.dense().as_slice()) < 1e-12);
    }
}

#[test]
fn exact_fisher_equals_gauss_newton_for_relu() {
    // Σ_y p_y (p − e_y)(p − e_y)ᵀ = diag(p) − ppᵀ, and ReLU contributes no
    // second-derivative term, so every layer's G must coincide.
    let mut rng = Rng::new(6);
    let params = random_params(&[4, 5, 4, 3], Activation::Relu, &mut rng);
    let set = random_set(20, 4, 3, &mut rng);
    let f = kf_fisher(&params, &set, LabelSampling::Exact, &mut Rng::new(0)).unwrap();
    let gn = kf_preact_gn(&params, &set).unwrap();
    for (a, b) in f.blocks.iter().zip(&gn.blocks) {
        assert!(rel_err_slices(a.dense().as_slice(), b.dense().as_slice()) < 1e-12, "layer {}", a.layer);
    }
}
