#![allow(dead_code)]

use std::path::PathBuf;

use kflaplace::dataset::{LabeledSet, Splits};
use kflaplace::network::{Activation, MlpParams};
use kflaplace::numerics::{Matrix, Rng};

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// `A Aᵀ` for a random `n × k` matrix; rank ≤ k.
pub fn random_psd(n: usize, k: usize, rng: &mut Rng) -> Matrix {
    let a = random_matrix(n, k, rng);
    a.matmul_tr(&a)
}

pub fn random_params(sizes: &[usize], act: Activation, rng: &mut Rng) -> MlpParams {
    let mut p = MlpParams::zeros(sizes, act).unwrap();
    for w in &mut p.layers {
        *w = random_matrix(w.rows(), w.cols(), rng).scaled(0.7);
    }
    p
}

/// Uniform [0, 1] inputs with labels cycling through `classes`.
pub fn random_set(n: usize, dim: usize, classes: usize, rng: &mut Rng) -> LabeledSet {
    let images = Matrix::from_fn(n, dim, |_, _| rng.uniform());
    let labels = (0..n).map(|i| (i % classes) as u8).collect();
    LabeledSet::new(images, labels).unwrap()
}

/// Dense Kronecker product written out entry by entry.
pub fn naive_kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Column-stacked vec.
pub fn vec_cols(m: &Matrix) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.rows() * m.cols());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Largest entrywise difference relative to the larger max-abs of the two.
pub fn rel_err_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Smallest eigenvalue against the `-tol · trace` floor, computed by
/// cyclic Jacobi rotations so the check does not share code with the crate.
pub fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn assert_psd(m: &Matrix, what: &str) {
    let trace: f64 = (0..m.rows()).map(|i| m[(i, i)]).sum();
    let min = jacobi_eigenvalues(m)[0];
    assert!(
        min >= -1e-8 * trace.abs().max(1e-300),
        "{what}: eigenvalue {min:e} below floor (trace {trace:e})"
    );
}

/// MNIST directory from `KFLAPLACE_DATA_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("KFLAPLACE_DATA_DIR").map(PathBuf::from),
        Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join("train-images-idx3-ubyte").is_file())
}

/// Small synthetic "image" splits: ten Gaussian class clusters in `dim`
/// dimensions, pixel values clipped to [0, 1].
pub fn synthetic_splits(train: usize, val: usize, test: usize, dim: usize, seed: u64) -> Splits {
    let mut rng = Rng::new(seed);
    let centers: Vec<Vec<f64>> = (0..10).map(|_| (0..dim).map(|_| rng.uniform()).collect()).collect();
    let mut make = |n: usize| {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let images = Matrix::from_fn(n, dim, |i, j| {
            (centers[labels[i] as usize][j] + 0.15 * rng.normal()).clamp(0.0, 1.0)
        });
        LabeledSet::new(images, labels).unwrap()
    };
    Splits {
        train: make(train),
        val: make(val),
        test: make(test),
    }
}

/// NLL of label `y` as a function of layer `l`'s pre-activation.
pub fn nll_from_preact(params: &MlpParams, l: usize, h: &[f64], y: usize) -> f64 {
    let mut h = h.to_vec();
    for k in l + 1..params.num_layers() {
        let act = params.activations[k - 1];
        let w = &params.layers[k];
        let a: Vec<f64> = h.iter().map(|&v| act.apply(v)).chain([1.0]).collect();
        h = matvec(w, &a);
    }
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - h[y]
}

pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Matrix {
    let n = x.len();
    Matrix::from_fn(n, n, |i, j| {
        let at = |si: f64, sj: f64| {
            let mut z = x.to_vec();
            z[i] += si * eps;
            z[j] += sj * eps;
            f(&z)
        };
        (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * eps * eps)
    })
}
