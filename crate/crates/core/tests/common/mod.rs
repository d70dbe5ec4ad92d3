//! Reference implementations used as test oracles.
#![allow(dead_code)]

use energynet::energy::SubspaceBank;
use energynet::ksubspaces::{assign, assigned_energy, AssignMode};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(q: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((q, d), |_| rng.sample(StandardNormal))
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn eigenvalues_desc(m: ArrayView2<'_, f64>) -> Vec<f64> {
    let d = m.nrows();
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| m[[i, j]]));
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Top-`r` principal directions of `x` (uncentered), as rows.
pub fn pca_rows(x: ArrayView2<'_, f64>, r: usize) -> Array2<f64> {
    let g = x.t().dot(&x);
    let d = g.nrows();
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| g[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Array2::from_shape_fn((r, d), |(a, t)| eig.eigenvectors[(t, order[a])])
}

/// Noiseless points drawn from `k` random `r`-dimensional subspaces of R^d.
pub fn union_of_subspaces(k: usize, r: usize, d: usize, per: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let parts: Vec<Array2<f64>> = (0..k)
        .map(|_| {
            let basis = pca_rows(gaussian(d, d, rng).view(), r);
            gaussian(per, r, rng).dot(&basis)
        })
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

/// Full-batch EM K-Subspaces: residual assignment, then exact top-r PCA per
/// cluster, until assignments stop changing. Returns the final energy.
pub fn em_k_subspaces(x: ArrayView2<'_, f64>, mut bank: SubspaceBank, max_iter: usize) -> f64 {
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..max_iter {
        let a = assign(x, &bank, AssignMode::Full);
        if prev.as_ref() == Some(&a) {
            break;
        }
        for j in 0..bank.subspaces() {
            let idx: Vec<usize> = (0..a.len()).filter(|&i| a[i] == j).collect();
            if idx.len() >= bank.rank() {
                let v = pca_rows(x.select(Axis(0), &idx).view(), bank.rank());
                let mut basis = bank.basis().clone();
                basis.index_axis_mut(Axis(0), j).assign(&v);
                bank = SubspaceBank::new(basis, bank.channels(), bank.kernel()).unwrap();
            }
        }
        prev = Some(a);
    }
    assigned_energy(x, &bank, AssignMode::Full)
}

/// All permutations of 0..n (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = vec![a.clone()];
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Largest total weight of a perfect matching, by enumeration.
pub fn brute_force_max_matching(table: &Array2<i64>) -> i64 {
    permutations(table.nrows())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| table[[i, j]]).sum())
        .max()
        .unwrap_or(0)
}
