//! Convolutional ZCA whitening.
//!
//! The transform flattens the top `n_components` eigenvalues of the patch
//! correlation matrix down to the `n_components`-th largest and passes the
//! rest through. Only the row for the center pixel is kept, which turns the
//! patch-space transform into a single convolution kernel.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PatchGeometry, PatchMatrix};
use crate::error::{Error, Result};
use crate::seed;

/// Number of patches sampled to estimate the correlation matrix.
pub const DEFAULT_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZcaConfig {
    pub kernel_size: usize,
    pub n_components: usize,
}

impl ZcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "ZCA kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.n_components > self.kernel_size * self.kernel_size {
            return Err(Error::Config(format!(
                "ZCA components {} exceed kernel_size^2 = {}",
                self.n_components,
                self.kernel_size * self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Single-channel whitening kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ZcaFilter {
    pub kernel: Array2<f32>,
    pub n_components: usize,
}

impl ZcaFilter {
    pub fn identity(kernel_size: usize) -> Self {
        let mut kernel = Array2::zeros((kernel_size, kernel_size));
        kernel[[kernel_size / 2, kernel_size / 2]] = 1.0;
        ZcaFilter {
            kernel,
            n_components: 0,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn center(&self) -> f32 {
        let c = self.kernel_size() / 2;
        self.kernel[[c, c]]
    }
}

/// `(1/q) XᵀX` over the patch rows.
pub fn estimate_correlation(patches: &PatchMatrix) -> Result<Array2<f64>> {
    if patches.is_empty() {
        return Err(Error::Config("correlation needs at least one patch".into()));
    }
    let x = patches.rows().mapv(|v| v as f64);
    let q = x.nrows() as f64;
    let c = x.t().dot(&x) / q;
    Ok((&c + &c.t()) * 0.5)
}

/// Symmetric whitening transform `E diag(g) Eᵀ` with
/// `g_i = sqrt(λ_n / λ_i)` for the top `n_white - 1` eigenvalues and 1 elsewhere.
pub fn build_transform(corr: ArrayView2<'_, f64>, n_white: usize) -> Result<Array2<f64>> {
    let d = corr.nrows();
    if corr.ncols() != d {
        return Err(Error::Shape("correlation matrix must be square".into()));
    }
    if n_white > d {
        return Err(Error::Config(format!(
            "cannot whiten {n_white} eigenvalues of a {d}x{d} matrix"
        )));
    }
    let scale = corr.iter().fold(0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..d {
        for j in 0..i {
            if (corr[[i, j]] - corr[[j, i]]).abs() > 1e-8 * scale {
                return Err(Error::Numerical("correlation matrix is not symmetric".into()));
            }
        }
    }
    if n_white <= 1 {
        return Ok(Array2::eye(d));
    }

    let m = DMatrix::from_fn(d, d, |i, j| corr[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let lmax = lambda[0];
    if lmax <= 0.0 {
        return Ok(Array2::eye(d));
    }
    if lambda[d - 1] < -1e-8 * lmax {
        return Err(Error::Numerical(format!(
            "correlation matrix has negative eigenvalue {:.3e}",
            lambda[d - 1]
        )));
    }
    let floor = 1e-12 * lmax;
    let clamped: Vec<f64> = lambda.iter().map(|&l| l.max(floor)).collect();
    let target = clamped[n_white - 1];
    let gains: Vec<f64> = (0..d)
        .map(|i| if i < n_white { (target / clamped[i]).sqrt() } else { 1.0 })
        .collect();

    let mut w = Array2::<f64>::zeros((d, d));
    for (pos, &col) in order.iter().enumerate() {
        let g = gains[pos];
        if g == 1.0 {
            // Contributes e eᵀ; handled below through the identity.
            continue;
        }
        let e = eig.eigenvectors.column(col);
        for i in 0..d {
            let ei = e[i] * (g - 1.0);
            for j in 0..d {
                w[[i, j]] += ei * e[j];
            }
        }
    }
    // W = I + Σ (g_i - 1) e_i e_iᵀ, equal to E diag(g) Eᵀ for orthonormal E.
    for i in 0..d {
        w[[i, i]] += 1.0;
    }
    Ok((&w + &w.t()) * 0.5)
}

/// Center row of the patch-space transform, reshaped to a `p × p` kernel.
pub fn build_filter(
    transform: ArrayView2<'_, f64>,
    kernel_size: usize,
    n_components: usize,
) -> Result<ZcaFilter> {
    if kernel_size % 2 == 0 {
        return Err(Error::Config(format!(
            "even ZCA kernel size {kernel_size} has no center pixel"
        )));
    }
    let d = kernel_size * kernel_size;
    if transform.dim() != (d, d) {
        return Err(Error::Shape(format!(
            "transform is {:?}, expected {d}x{d}",
            transform.dim()
        )));
    }
    let center = d / 2;
    let row = transform.row(center);
    let kernel = Array2::from_shape_fn((kernel_size, kernel_size), |(y, x)| {
        row[y * kernel_size + x] as f32
    });
    Ok(ZcaFilter {
        kernel,
        n_components,
    })
}

/// Fits the whitening filter from patches sampled uniformly over images and
/// valid (unpadded) locations.
pub fn fit_zca(
    images: ArrayView4<'_, f32>,
    config: ZcaConfig,
    samples: usize,
    seed: u64,
) -> Result<ZcaFilter> {
    config.validate()?;
    let p = config.kernel_size;
    if config.n_components <= 1 {
        return Ok(ZcaFilter::identity(p));
    }
    let (n, m, h, w) = images.dim();
    if m != 1 {
        return Err(Error::Shape("ZCA expects single-channel images".into()));
    }
    if n == 0 {
        return Err(Error::Config("ZCA fit needs at least one image".into()));
    }
    let geom = PatchGeometry::new(1, h, w, p, 0)?;
    let ow = geom.out_width();
    let locs = geom.locations();
    let mut rng = seed::rng(seed, &[seed::ZCA_SAMPLE]);
    let mut rows = Array2::<f32>::zeros((samples, geom.dim()));
    for mut row in rows.outer_iter_mut() {
        let i = rng.random_range(0..n);
        let l = rng.random_range(0..locs);
        geom.patch_into(
            images.index_axis(Axis(0), i),
            l / ow,
            l % ow,
            row.as_slice_mut().expect("standard layout"),
        );
    }
    let patches = PatchMatrix::new(rows, 1, p)?;
    let corr = estimate_correlation(&patches)?;
    let transform = build_transform(corr.view(), config.n_components)?;
    build_filter(transform.view(), p, config.n_components)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Same-size cross-correlation with reflection padding.
pub fn apply_conv_zca(x: ArrayView4<'_, f32>, filter: &ZcaFilter) -> Result<Array4<f32>> {
    let (n, m, h, w) = x.dim();
    if m != 1 {
        return Err(Error::Shape(format!("ZCA expects 1 channel, got {m}")));
    }
    let p = filter.kernel_size();
    let half = (p / 2) as isize;
    if half as usize >= h || half as usize >= w {
        return Err(Error::Shape(format!(
            "reflection padding of {half} needs images larger than {h}x{w}"
        )));
    }
    let mut out = Array4::<f32>::zeros((n, 1, h, w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut o, img)| {
            let img = img.index_axis(Axis(0), 0);
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0f32;
                    for dy in 0..p {
                        let iy = reflect(y as isize + dy as isize - half, h);
                        for dx in 0..p {
                            let ix = reflect(xx as isize + dx as isize - half, w);
                            acc += filter.kernel[[dy, dx]] * img[[iy, ix]];
                        }
                    }
                    o[[0, y, xx]] = acc;
                }
            }
        });
    Ok(out)
}

/// Relative size of the uncancelled center: `(center - Σ max(0, -k)) / center`.
pub fn dc_fraction(filter: &ZcaFilter) -> Result<f64> {
    if filter.kernel_size() % 2 == 0 {
        return Err(Error::Config("dc fraction needs an odd kernel".into()));
    }
    let center = filter.center() as f64;
    if center <= 0.0 {
        return Err(Error::Numerical(format!(
            "kernel center {center} is not positive"
        )));
    }
    let negative: f64 = filter.kernel.iter().map(|&v| (-(v as f64)).max(0.0)).sum();
    Ok((center - negative) / center)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::SeedableRng;

    /// Cyclic Jacobi eigenvalues, independent of the nalgebra path.
    fn jacobi_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut a = a.clone();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[[i, j]].powi(2))
                .sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[[k, p]], a[[k, q]]);
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    fn random_psd(d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = Array::from_shape_fn((d + 3, d), |_| rng.random::<f64>() - 0.3);
        b.t().dot(&b) / (d as f64)
    }

    #[test]
    fn correlation_of_scaled_basis_is_identity() {
        let d = 4;
        let rows = Array2::eye(d) * (d as f32).sqrt();
        let c = estimate_correlation(&PatchMatrix::from_vectors(rows)).unwrap();
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c[[i, j]] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn correlation_zero_and_brute_force() {
        let z = estimate_correlation(&PatchMatrix::from_vectors(Array2::zeros((5, 3)))).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Array::from_shape_fn((100, 9), |_| rng.random::<f32>());
        let c = estimate_correlation(&PatchMatrix::from_vectors(x.clone())).unwrap();
        let mut brute = Array2::<f64>::zeros((9, 9));
        for r in x.outer_iter() {
            for i in 0..9 {
                for j in 0..9 {
                    brute[[i, j]] += r[i] as f64 * r[j] as f64;
                }
            }
        }
        brute /= 100.0;
        for (a, b) in c.iter().zip(brute.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..9 {
            for j in 0..9 {
                assert!((c[[i, j]] - c[[j, i]]).abs() < 1e-10);
            }
        }
        assert!(estimate_correlation(&PatchMatrix::from_vectors(Array2::zeros((0, 3)))).is_err());
    }

    #[test]
    fn identity_is_already_white() {
        for n in 0..=4 {
            let w = build_transform(Array2::eye(4).view(), n).unwrap();
            assert!(w.iter().zip(Array2::<f64>::eye(4).iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn diag_4_1_whitens_to_half_one() {
        let c = array![[4.0, 0.0], [0.0, 1.0]];
        let w = build_transform(c.view(), 2).unwrap();
        let want = array![[0.5, 0.0], [0.0, 1.0]];
        for (a, b) in w.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let ev = jacobi_eigenvalues(&w.dot(&c).dot(&w.t()));
        assert!((ev[0] - 1.0).abs() < 1e-10 && (ev[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_components_is_identity() {
        let c = random_psd(5, 3);
        let w = build_transform(c.view(), 0).unwrap();
        assert_eq!(w, Array2::<f64>::eye(5));
        let w = build_transform(c.view(), 1).unwrap();
        assert_eq!(w, Array2::<f64>::eye(5));
    }

    #[test]
    fn rejects_non_psd_and_oversized_n() {
        let c = array![[1.0, 0.0], [0.0, -1.0]];
        assert!(matches!(build_transform(c.view(), 2), Err(Error::Numerical(_))));
        assert!(build_transform(Array2::eye(2).view(), 3).is_err());
    }

    proptest! {
        #[test]
        fn flattening_symmetry_and_gains(seed in 0u64..500, d in 2usize..9, nw in 2usize..9) {
            let nw = nw.min(d);
            let c = random_psd(d, seed);
            let w = build_transform(c.view(), nw).unwrap();
            for i in 0..d {
                for j in 0..d {
                    prop_assert!((w[[i, j]] - w[[j, i]]).abs() < 1e-8);
                }
            }
            let before = jacobi_eigenvalues(&c);
            let after = jacobi_eigenvalues(&w.dot(&c).dot(&w.t()));
            let target = before[nw - 1];
            for &v in &after[..nw] {
                prop_assert!((v - target).abs() <= 1e-8 * before[0]);
            }
            // Everything else passes through.
            let mut rest_before = before[nw..].to_vec();
            let mut rest_after = after[nw..].to_vec();
            rest_before.sort_by(|a, b| a.total_cmp(b));
            rest_after.sort_by(|a, b| a.total_cmp(b));
            for (a, b) in rest_before.iter().zip(&rest_after) {
                prop_assert!((a - b).abs() <= 1e-8 * before[0]);
            }
            // Gains never amplify: the whitened matrix is dominated by the input.
            let diff = &c - &w.dot(&c).dot(&w.t());
            let ev = jacobi_eigenvalues(&diff);
            prop_assert!(ev[d - 1] >= -1e-8 * before[0]);
        }
    }

    #[test]
    fn identity_transform_gives_delta_kernel() {
        let f = build_filter(Array2::eye(9).view(), 3, 0).unwrap();
        assert_eq!(f, ZcaFilter::identity(3));
        assert!(build_filter(Array2::eye(16).view(), 4, 0).is_err());
    }

    #[test]
    fn kernel_is_center_row() {
        let t = Array::from_shape_fn((25, 25), |(i, j)| (i * 25 + j) as f64);
        let f = build_filter(t.view(), 5, 3).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(f.kernel[[y, x]], t[[12, y * 5 + x]] as f32);
            }
        }
    }

    #[test]
    fn delta_kernel_is_identity_conv() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Array::from_shape_fn((2, 1, 6, 7), |_| rng.random::<f32>());
        let y = apply_conv_zca(x.view(), &ZcaFilter::identity(5)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constant_image_scales_by_kernel_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let kernel = Array::from_shape_fn((5, 5), |_| rng.random::<f32>() - 0.5);
        let sum: f32 = kernel.sum();
        let f = ZcaFilter {
            kernel,
            n_components: 3,
        };
        let x = Array4::from_elem((1, 1, 8, 8), 0.7f32);
        let y = apply_conv_zca(x.view(), &f).unwrap();
        assert!(y.iter().all(|&v| (v - 0.7 * sum).abs() < 1e-5));
    }

    proptest! {
        #[test]
        fn conv_zca_is_linear(seed in 0u64..200, a in -2f32..2.0, b in -2f32..2.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let kernel = Array::from_shape_fn((3, 3), |_| rng.random::<f32>() - 0.5);
            let f = ZcaFilter { kernel, n_components: 2 };
            let x = Array::from_shape_fn((1, 1, 5, 6), |_| rng.random::<f32>());
            let y = Array::from_shape_fn((1, 1, 5, 6), |_| rng.random::<f32>());
            let lhs = apply_conv_zca((&x * a + &y * b).view(), &f).unwrap();
            let rhs = apply_conv_zca(x.view(), &f).unwrap() * a + apply_conv_zca(y.view(), &f).unwrap() * b;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
    }

    #[test]
    fn dc_fraction_cases() {
        assert_eq!(dc_fraction(&ZcaFilter::identity(3)).unwrap(), 1.0);
        let mut k = Array2::zeros((3, 3));
        k[[1, 1]] = 2.0;
        k[[0, 0]] = -0.25;
        k[[2, 1]] = -0.75;
        k[[0, 2]] = 0.5;
        let f = ZcaFilter { kernel: k, n_components: 2 };
        assert!((dc_fraction(&f).unwrap() - 0.5).abs() < 1e-12);
        let f = ZcaFilter { kernel: Array2::zeros((3, 3)), n_components: 2 };
        assert!(dc_fraction(&f).is_err());
    }

    #[test]
    fn even_kernels_rejected_at_config() {
        assert!(ZcaConfig { kernel_size: 4, n_components: 2 }.validate().is_err());
        assert!(ZcaConfig { kernel_size: 3, n_components: 10 }.validate().is_err());
        assert!(ZcaConfig { kernel_size: 9, n_components: 9 }.validate().is_ok());
    }

    #[test]
    fn fit_on_smooth_images_flattens_spectrum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let base = Array::from_shape_fn((50, 1, 12, 12), |_| rng.random::<f32>());
        // Smooth the noise so that neighbouring pixels correlate.
        let smooth = apply_conv_zca(
            base.view(),
            &ZcaFilter { kernel: Array2::from_elem((3, 3), 1.0 / 9.0), n_components: 0 },
        )
        .unwrap();
        let f = fit_zca(smooth.view(), ZcaConfig { kernel_size: 3, n_components: 4 }, 20_000, 1).unwrap();
        // Gains never exceed one, so the center stays below one.
        assert!(f.center() > 0.0 && f.center() < 1.0);
        assert!(f.kernel.iter().any(|&v| v < 0.0));
    }
}
