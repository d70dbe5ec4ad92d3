//! Inference through one convolutional energy layer.
//!
//! S-maps are plain cross-correlations with the `k·r` rows of the subspace
//! bank. C-maps take the Euclidean norm of each group of `r` S-maps. The
//! C-vector at every location is then soft-thresholded at its `(w+1)`-st
//! largest entry and rescaled to the norm of the input patch.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{patch_norm_map_view, PatchGeometry};
use crate::error::{Error, Result};

pub const MAX_SUBSPACES: usize = 64;
pub const MAX_RANK: usize = 16;

/// Column budget (in f32 values) for one im2col chunk.
const IM2COL_BUDGET: usize = 1 << 24;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyLayerConfig {
    /// Number of subspaces `k` (C-maps produced).
    pub subspaces: usize,
    /// Subspace rank `r` (S-maps per C-map).
    pub rank: usize,
    /// Winners `w` kept by the adaptive threshold.
    pub winners: usize,
    pub kernel_size: usize,
    pub padding: usize,
    #[serde(default = "default_true")]
    pub rescale: bool,
}

impl EnergyLayerConfig {
    pub fn new(subspaces: usize, rank: usize, winners: usize, kernel_size: usize, padding: usize) -> Self {
        EnergyLayerConfig {
            subspaces,
            rank,
            winners,
            kernel_size,
            padding,
            rescale: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if !(2..=MAX_SUBSPACES).contains(&c.subspaces) {
            return Err(Error::Config(format!("subspaces {} outside [2, {MAX_SUBSPACES}]", c.subspaces)));
        }
        if !(1..=MAX_RANK).contains(&c.rank) {
            return Err(Error::Config(format!("rank {} outside [1, {MAX_RANK}]", c.rank)));
        }
        if c.winners < 1 || c.winners > c.subspaces {
            return Err(Error::Config(format!(
                "winners {} outside [1, {}]",
                c.winners, c.subspaces
            )));
        }
        if c.kernel_size < 1 {
            return Err(Error::Config("kernel size must be at least 1".into()));
        }
        if c.padding > c.kernel_size / 2 {
            return Err(Error::Config(format!(
                "padding {} exceeds floor({}/2)",
                c.padding, c.kernel_size
            )));
        }
        Ok(())
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        (input + 2 * self.padding + 1).checked_sub(self.kernel_size).filter(|&e| e >= 1)
    }
}

/// `k` matrices of shape `[r, m·p²]` with orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBank {
    basis: Array3<f64>,
    channels: usize,
    kernel: usize,
}

impl SubspaceBank {
    pub fn new(basis: Array3<f64>, channels: usize, kernel: usize) -> Result<Self> {
        if basis.dim().2 != channels * kernel * kernel {
            return Err(Error::Shape(format!(
                "bank rows have length {}, expected {channels}*{kernel}^2",
                basis.dim().2
            )));
        }
        Ok(SubspaceBank {
            basis,
            channels,
            kernel,
        })
    }

    pub fn subspaces(&self) -> usize {
        self.basis.dim().0
    }

    pub fn rank(&self) -> usize {
        self.basis.dim().1
    }

    pub fn dim(&self) -> usize {
        self.basis.dim().2
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn basis(&self) -> &Array3<f64> {
        &self.basis
    }

    pub fn subspace(&self, j: usize) -> ArrayView2<'_, f64> {
        self.basis.index_axis(Axis(0), j)
    }

    pub(crate) fn set_subspace(&mut self, j: usize, v: &Array2<f64>) {
        self.basis.index_axis_mut(Axis(0), j).assign(v);
    }

    /// `‖V_j V_jᵀ − I‖_F`.
    pub fn orthonormality_error(&self, j: usize) -> f64 {
        orthonormality_error(self.subspace(j))
    }

    pub fn max_orthonormality_error(&self) -> f64 {
        (0..self.subspaces())
            .map(|j| self.orthonormality_error(j))
            .fold(0.0, f64::max)
    }

    /// All rows stacked as `[k·r, d]` in f32, subspace-major.
    pub fn stacked_f32(&self) -> Array2<f32> {
        let (k, r, d) = self.basis.dim();
        self.basis
            .mapv(|v| v as f32)
            .into_shape_with_order((k * r, d))
            .expect("contiguous")
    }

    /// Rounds every entry to the nearest f32 so the bank survives a 32-bit round trip.
    pub fn round_to_f32(&mut self) {
        self.basis.mapv_inplace(|v| v as f32 as f64);
    }
}

pub fn orthonormality_error(v: ArrayView2<'_, f64>) -> f64 {
    let g = v.dot(&v.t());
    let mut s = 0.0;
    for ((i, j), &x) in g.indexed_iter() {
        let e = if i == j { x - 1.0 } else { x };
        s += e * e;
    }
    s.sqrt()
}

fn check_bank(x: ArrayView4<'_, f32>, bank: &SubspaceBank, cfg: &EnergyLayerConfig) -> Result<PatchGeometry> {
    if bank.subspaces() != cfg.subspaces || bank.rank() != cfg.rank || bank.kernel() != cfg.kernel_size {
        return Err(Error::Shape(format!(
            "bank is {}x{} with kernel {}, config wants {}x{} with kernel {}",
            bank.subspaces(),
            bank.rank(),
            bank.kernel(),
            cfg.subspaces,
            cfg.rank,
            cfg.kernel_size
        )));
    }
    let (_, m, h, w) = x.dim();
    if m != bank.channels() {
        return Err(Error::Shape(format!(
            "input has {m} channels, bank expects {}",
            bank.channels()
        )));
    }
    PatchGeometry::new(m, h, w, cfg.kernel_size, cfg.padding)
}

fn chunk_len(geom: &PatchGeometry) -> usize {
    (IM2COL_BUDGET / (geom.dim() * geom.locations()).max(1)).max(1)
}

fn s_forward_chunk(x: ArrayView4<'_, f32>, weights: &Array2<f32>, geom: &PatchGeometry) -> Array4<f32> {
    let n = x.dim().0;
    let locs = geom.locations();
    let cols = geom.im2col(x);
    let g = weights.dot(&cols);
    let kr = weights.nrows();
    let mut s = Array4::<f32>::zeros((n, kr, geom.out_height(), geom.out_width()));
    for i in 0..n {
        let block = g.slice(s![.., i * locs..(i + 1) * locs]);
        let mut dst = s.index_axis_mut(Axis(0), i);
        let mut dst = dst
            .view_mut()
            .into_shape_with_order((kr, locs))
            .expect("contiguous");
        dst.assign(&block);
    }
    s
}

/// Step 1: `k·r` S-maps, no bias or threshold.
pub fn s_forward(x: ArrayView4<'_, f32>, bank: &SubspaceBank, cfg: &EnergyLayerConfig) -> Result<Array4<f32>> {
    let geom = check_bank(x, bank, cfg)?;
    let weights = bank.stacked_f32();
    let chunk = chunk_len(&geom);
    let n = x.dim().0;
    let mut out = Array4::<f32>::zeros((n, weights.nrows(), geom.out_height(), geom.out_width()));
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(x.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut o, xc)| o.assign(&s_forward_chunk(xc, &weights, &geom)));
    Ok(out)
}

/// Step 2: Euclidean norm over each contiguous group of `rank` S-maps.
pub fn c_forward(s: ArrayView4<'_, f32>, rank: usize) -> Result<Array4<f32>> {
    let (n, kr, h, w) = s.dim();
    if rank == 0 || kr % rank != 0 {
        return Err(Error::Shape(format!("{kr} S-maps do not split into groups of {rank}")));
    }
    let k = kr / rank;
    let mut c = Array4::<f32>::zeros((n, k, h, w));
    for i in 0..n {
        for j in 0..k {
            let mut dst = c.slice_mut(s![i, j, .., ..]);
            if rank == 1 {
                dst.zip_mut_with(&s.slice(s![i, j, .., ..]), |d, &v| *d = v.abs());
                continue;
            }
            for a in 0..rank {
                dst.zip_mut_with(&s.slice(s![i, j * rank + a, .., ..]), |d, &v| *d += v * v);
            }
            dst.mapv_inplace(f32::sqrt);
        }
    }
    Ok(c)
}

/// Soft threshold at the `(w+1)`-st largest entry; `τ = 0` when `w ≥ len`.
pub fn threshold_vector(f: &mut [f32], winners: usize, scratch: &mut Vec<f32>) {
    let k = f.len();
    let tau = if winners >= k {
        0.0
    } else {
        scratch.clear();
        scratch.extend_from_slice(f);
        let (_, nth, _) = scratch.select_nth_unstable_by(winners, |a, b| b.total_cmp(a));
        *nth
    };
    for v in f.iter_mut() {
        *v = (*v - tau).max(0.0);
    }
}

/// Step 3: per-location W-winners-take-all soft threshold.
pub fn adaptive_threshold(c: ArrayView4<'_, f32>, winners: usize) -> Array4<f32> {
    let mut out = c.to_owned();
    threshold_in_place(&mut out, winners);
    out
}

fn threshold_in_place(c: &mut Array4<f32>, winners: usize) {
    let (n, k, h, w) = c.dim();
    let mut f = vec![0f32; k];
    let mut scratch = Vec::with_capacity(k);
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for j in 0..k {
                    f[j] = c[[i, j, y, x]];
                }
                threshold_vector(&mut f, winners, &mut scratch);
                for j in 0..k {
                    c[[i, j, y, x]] = f[j];
                }
            }
        }
    }
}

/// Step 4: scale each location's C-vector to unit length, then by the input patch norm.
pub fn rescale(c: ArrayView4<'_, f32>, norms: ArrayView3<'_, f32>) -> Result<Array4<f32>> {
    let mut out = c.to_owned();
    rescale_in_place(&mut out, norms)?;
    Ok(out)
}

fn rescale_in_place(c: &mut Array4<f32>, norms: ArrayView3<'_, f32>) -> Result<()> {
    let (n, k, h, w) = c.dim();
    if norms.dim() != (n, h, w) {
        return Err(Error::Shape(format!(
            "norm map {:?} does not match C-maps {:?}",
            norms.dim(),
            (n, h, w)
        )));
    }
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let len = (0..k)
                    .map(|j| (c[[i, j, y, x]] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let target = norms[[i, y, x]] as f64;
                let scale = if len == 0.0 || target == 0.0 { 0.0 } else { target / len };
                for j in 0..k {
                    c[[i, j, y, x]] = (c[[i, j, y, x]] as f64 * scale) as f32;
                }
            }
        }
    }
    Ok(())
}

/// S-maps → C-maps → threshold → (optional) rescale, chunked over images.
pub fn layer_forward(x: ArrayView4<'_, f32>, bank: &SubspaceBank, cfg: &EnergyLayerConfig) -> Result<Array4<f32>> {
    let geom = check_bank(x, bank, cfg)?;
    let weights = bank.stacked_f32();
    let chunk = chunk_len(&geom);
    let n = x.dim().0;
    let mut out = Array4::<f32>::zeros((n, cfg.subspaces, geom.out_height(), geom.out_width()));
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(x.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .try_for_each(|(mut o, xc)| -> Result<()> {
            let s = s_forward_chunk(xc, &weights, &geom);
            let mut c = c_forward(s.view(), cfg.rank)?;
            drop(s);
            threshold_in_place(&mut c, cfg.winners);
            if cfg.rescale {
                let norms = patch_norm_map_view(xc, cfg.kernel_size, cfg.padding)?;
                rescale_in_place(&mut c, norms.view())?;
            }
            o.assign(&c);
            Ok(())
        })?;
    Ok(out)
}
