//! Minibatch K-Subspaces.
//!
//! Each iteration assigns the minibatch's patches to the subspace with the
//! smallest reconstruction residual and then applies one orthogonal power
//! iteration per subspace: `V ← Uᵀ` where `U S Wᵀ = X_kᵀ X_k V_kᵀ`. The first
//! `warmup_iters` iterations assign using only each subspace's first row
//! while still updating the full rank-`r` subspaces.

use std::ops::Range;
use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extract_patches_view, Locations, PatchMatrix};
use crate::energy::{EnergyLayerConfig, SubspaceBank};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Standard deviation of the noise rows used at initialization.
pub const INIT_NOISE_SIGMA: f64 = 0.01;
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignMode {
    Full,
    /// Warmup: only the first row of each subspace takes part.
    FirstDimOnly,
}

/// Flips `v` so that its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Orthogonalizes `v` against `rows` (two Gram–Schmidt passes) and normalizes.
/// Returns `false` if nothing is left of `v`.
fn orthonormalize_against(v: &mut [f64], rows: &[Vec<f64>]) -> bool {
    let before = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..2 {
        for r in rows {
            let dot: f64 = r.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, a)| *x -= dot * a);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-10 * before.max(f64::MIN_POSITIVE)) || norm == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

fn rows_to_array(rows: Vec<Vec<f64>>) -> Array2<f64> {
    let (r, d) = (rows.len(), rows[0].len());
    Array2::from_shape_vec((r, d), rows.into_iter().flatten().collect()).expect("rectangular")
}

/// One subspace seeded from a patch: row 1 is the patch direction, the
/// remaining rows are Gaussian noise made orthonormal by Gram–Schmidt.
pub fn init_subspace(patch: ArrayView1<'_, f64>, rank: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    let d = patch.len();
    if rank > d {
        return Err(Error::Config(format!("rank {rank} exceeds patch dimension {d}")));
    }
    let norm = patch.dot(&patch).sqrt();
    if norm == 0.0 {
        return Err(Error::Numerical("cannot seed a subspace from a zero patch".into()));
    }
    let noise = Normal::new(0.0, INIT_NOISE_SIGMA).expect("valid sigma");
    let mut rows = vec![patch.iter().map(|x| x / norm).collect::<Vec<_>>()];
    while rows.len() < rank {
        let mut ok = false;
        for _ in 0..MAX_REDRAWS {
            let mut v: Vec<f64> = (0..d).map(|_| noise.sample(rng)).collect();
            if orthonormalize_against(&mut v, &rows) {
                rows.push(v);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Numerical("could not complete an orthonormal basis".into()));
        }
    }
    Ok(rows_to_array(rows))
}

/// Seeds `k` subspaces from distinct randomly chosen non-zero patches.
pub fn init_bank(patches: &PatchMatrix, subspaces: usize, rank: usize, rng: &mut Rng) -> Result<SubspaceBank> {
    let x = patches.rows();
    let q = x.nrows();
    if q < subspaces {
        return Err(Error::Config(format!(
            "{q} patches cannot seed {subspaces} subspaces"
        )));
    }
    let d = patches.dim();
    let mut basis = Array3::<f64>::zeros((subspaces, rank, d));
    let mut j = 0;
    // Candidates in random order; zero patches are skipped (re-drawn).
    for idx in index::sample(rng, q, q).into_iter() {
        if j == subspaces {
            break;
        }
        let row = x.row(idx).mapv(f64::from);
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let v = init_subspace(row.view(), rank, rng)?;
        basis.index_axis_mut(Axis(0), j).assign(&v);
        j += 1;
    }
    if j < subspaces {
        return Err(Error::Numerical(format!(
            "only {j} non-zero patches available to seed {subspaces} subspaces"
        )));
    }
    SubspaceBank::new(basis, patches.channels(), patches.kernel())
}

/// Squared projection norms `‖V_j x‖²`, `[q, k]`.
fn projection_energy(x: ArrayView2<'_, f64>, bank: &SubspaceBank, mode: AssignMode) -> Array2<f64> {
    let (k, r, d) = bank.basis().dim();
    let used = match mode {
        AssignMode::Full => r,
        AssignMode::FirstDimOnly => 1,
    };
    let rows = bank
        .basis()
        .slice(ndarray::s![.., 0..used, ..])
        .to_owned()
        .into_shape_with_order((k * used, d))
        .expect("contiguous");
    let proj = x.dot(&rows.t());
    let mut out = Array2::<f64>::zeros((x.nrows(), k));
    for (mut o, p) in out.outer_iter_mut().zip(proj.outer_iter()) {
        for j in 0..k {
            o[j] = (0..used).map(|a| p[j * used + a].powi(2)).sum();
        }
    }
    out
}

/// Assigns each patch to the subspace with the smallest residual
/// `‖x − VᵀVx‖`, i.e. the largest projection `‖Vx‖` for orthonormal rows.
/// Ties go to the lowest index.
pub fn assign(x: ArrayView2<'_, f64>, bank: &SubspaceBank, mode: AssignMode) -> Vec<usize> {
    let e = projection_energy(x, bank, mode);
    e.outer_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One orthogonal power iteration for a single subspace.
///
/// Rows of the result are the left singular vectors of `XᵀX Vᵀ` in order of
/// decreasing singular value, sign-normalized. Directions lost to rank
/// deficiency are filled from the previous basis, then with seeded noise.
pub fn power_update(x: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, rng: &mut Rng) -> Result<Array2<f64>> {
    let (q, d) = x.dim();
    let r = v.nrows();
    if q == 0 {
        return Err(Error::Numerical("power update on an empty cluster".into()));
    }
    if v.ncols() != d {
        return Err(Error::Shape(format!("subspace has {} columns, patches {d}", v.ncols())));
    }
    let m = x.t().dot(&x.dot(&v.t()));
    let dm = DMatrix::from_fn(d, r, |i, j| m[[i, j]]);
    let svd = dm.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let smax = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
    let tol = smax * 1e-10;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(r);
    for &i in &order {
        if smax == 0.0 || svd.singular_values[i] <= tol {
            break;
        }
        let mut col: Vec<f64> = u.column(i).iter().copied().collect();
        if !orthonormalize_against(&mut col, &rows) {
            continue;
        }
        fix_sign(&mut col);
        rows.push(col);
    }
    // Too few patches to fill the rank: keep what the previous basis had in
    // the missing directions before falling back to noise.
    for old in v.outer_iter() {
        if rows.len() == r {
            break;
        }
        let mut col = old.to_vec();
        if orthonormalize_against(&mut col, &rows) {
            fix_sign(&mut col);
            rows.push(col);
        }
    }
    let mut redraws = 0;
    while rows.len() < r {
        let mut g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if orthonormalize_against(&mut g, &rows) {
            fix_sign(&mut g);
            rows.push(g);
        } else {
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::Numerical("orthonormal completion failed".into()));
            }
        }
    }
    Ok(rows_to_array(rows))
}

/// `Σ_u ‖x_u − V_aᵀ V_a x_u‖²` over the given assignment.
pub fn minibatch_energy(x: ArrayView2<'_, f64>, bank: &SubspaceBank, assignments: &[usize]) -> f64 {
    let groups = group_by_cluster(assignments, bank.subspaces());
    groups
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(j, g)| cluster_energy(x.select(Axis(0), g).view(), bank.subspace(j)))
        .sum()
}

fn cluster_energy(xk: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> f64 {
    let recon = xk.dot(&v.t()).dot(&v);
    let mut e = 0.0;
    for (a, b) in xk.iter().zip(recon.iter()) {
        e += (a - b) * (a - b);
    }
    e
}

fn group_by_cluster(assignments: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        groups[a].push(i);
    }
    groups
}

/// Energy of `x` under its best assignment.
pub fn assigned_energy(x: ArrayView2<'_, f64>, bank: &SubspaceBank, mode: AssignMode) -> f64 {
    minibatch_energy(x, bank, &assign(x, bank, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub batch_size: usize,
    /// Patch locations sampled per image per minibatch; 0 means every location.
    pub patches_per_image: usize,
    pub warmup_iters: usize,
    /// A subspace left empty this many iterations in a row is reseeded.
    pub reinit_after: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 512,
            patches_per_image: 10,
            warmup_iters: 10,
            reinit_after: 5,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.reinit_after == 0 {
            return Err(Error::Config("reinit_after must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    /// 1-based.
    pub iteration: usize,
    pub patches: usize,
    pub warmup: bool,
    /// Minibatch energy per patch, measured before the update.
    pub energy: f64,
    /// Probe-set energy per patch after the update, when a probe is attached.
    pub probe_energy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub iterations: Vec<IterationStats>,
    pub reinits: usize,
}

impl TrainTrace {
    /// Two or three whitespace-separated columns: iteration, energy, probe energy.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# iteration minibatch_energy probe_energy\n");
        for it in &self.iterations {
            match it.probe_energy {
                Some(p) => s.push_str(&format!("{} {:.9e} {:.9e}\n", it.iteration, it.energy, p)),
                None => s.push_str(&format!("{} {:.9e}\n", it.iteration, it.energy)),
            }
        }
        s
    }
}

/// Held-out patches whose energy is tracked during training.
#[derive(Debug, Clone)]
pub struct EnergyProbe {
    pub patches: Array2<f64>,
    pub every: usize,
}

/// Mutable state of one layer's K-Subspaces run.
#[derive(Debug, Clone)]
pub struct KSubspacesTrainer {
    rank: usize,
    subspaces: usize,
    schedule: TrainSchedule,
    seed: u64,
    bank: Option<SubspaceBank>,
    iteration: usize,
    empty_streak: Vec<usize>,
    trace: TrainTrace,
}

impl KSubspacesTrainer {
    pub fn new(subspaces: usize, rank: usize, schedule: TrainSchedule, seed: u64) -> Self {
        KSubspacesTrainer {
            rank,
            subspaces,
            schedule,
            seed,
            bank: None,
            iteration: 0,
            empty_streak: vec![0; subspaces],
            trace: TrainTrace::default(),
        }
    }

    pub fn bank(&self) -> Option<&SubspaceBank> {
        self.bank.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn warmup_remaining(&self) -> usize {
        self.schedule.warmup_iters.saturating_sub(self.iteration)
    }

    pub fn trace(&self) -> &TrainTrace {
        &self.trace
    }

    pub fn into_parts(self) -> (Option<SubspaceBank>, TrainTrace) {
        (self.bank, self.trace)
    }

    fn mode(&self) -> AssignMode {
        if self.iteration < self.schedule.warmup_iters {
            AssignMode::FirstDimOnly
        } else {
            AssignMode::Full
        }
    }

    /// One minibatch iteration on the given patches.
    pub fn step(&mut self, patches: &PatchMatrix, probe: Option<&EnergyProbe>) -> Result<IterationStats> {
        let x = patches.rows().mapv(f64::from);
        if self.bank.is_none() {
            let mut rng = seed::rng(self.seed, &[seed::INIT]);
            self.bank = Some(init_bank(patches, self.subspaces, self.rank, &mut rng)?);
        }
        let mode = self.mode();
        let bank = self.bank.as_ref().expect("initialized");
        let assignments = assign(x.view(), bank, mode);
        let energy = minibatch_energy(x.view(), bank, &assignments);
        let groups = group_by_cluster(&assignments, self.subspaces);

        let iteration = self.iteration as u64;
        let seed_base = self.seed;
        let updates: Vec<Option<Array2<f64>>> = groups
            .par_iter()
            .enumerate()
            .map(|(j, g)| -> Result<Option<Array2<f64>>> {
                if g.is_empty() {
                    return Ok(None);
                }
                let xk = x.select(Axis(0), g);
                let mut rng = seed::rng(seed_base, &[seed::COMPLETION, iteration, j as u64]);
                power_update(xk.view(), bank.subspace(j), &mut rng).map(Some)
            })
            .collect::<Result<_>>()?;

        let bank = self.bank.as_mut().expect("initialized");
        for (j, update) in updates.into_iter().enumerate() {
            match update {
                Some(v) => {
                    bank.set_subspace(j, &v);
                    self.empty_streak[j] = 0;
                }
                None => {
                    self.empty_streak[j] += 1;
                    if self.empty_streak[j] >= self.schedule.reinit_after {
                        let mut rng = seed::rng(seed_base, &[seed::REINIT, iteration, j as u64]);
                        let v = reseed_from_minibatch(x.view(), self.rank, &mut rng)?;
                        bank.set_subspace(j, &v);
                        self.empty_streak[j] = 0;
                        self.trace.reinits += 1;
                    }
                }
            }
        }
        self.iteration += 1;

        let probe_energy = match probe {
            Some(p) if p.every > 0 && self.iteration % p.every == 0 => {
                let bank = self.bank.as_ref().expect("initialized");
                Some(assigned_energy(p.patches.view(), bank, mode) / p.patches.nrows().max(1) as f64)
            }
            _ => None,
        };
        let stats = IterationStats {
            iteration: self.iteration,
            patches: x.nrows(),
            warmup: mode == AssignMode::FirstDimOnly,
            energy: energy / x.nrows().max(1) as f64,
            probe_energy,
        };
        self.trace.iterations.push(stats);
        Ok(stats)
    }
}

fn reseed_from_minibatch(x: ArrayView2<'_, f64>, rank: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    for _ in 0..MAX_REDRAWS {
        let i = rng.random_range(0..x.nrows());
        let row = x.row(i);
        if row.iter().any(|&v| v != 0.0) {
            return init_subspace(row, rank, rng);
        }
    }
    Err(Error::Numerical("no non-zero patch available to reseed an empty subspace".into()))
}

/// Minibatches of feature maps for layer training, addressed by image range.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;
    fn fetch(&self, range: Range<usize>) -> Result<Array4<f32>>;
}

impl FeatureSource for ArrayView4<'_, f32> {
    fn len(&self) -> usize {
        self.dim().0
    }

    fn fetch(&self, range: Range<usize>) -> Result<Array4<f32>> {
        Ok(self.slice(ndarray::s![range, .., .., ..]).to_owned())
    }
}

impl FeatureSource for Array4<f32> {
    fn len(&self) -> usize {
        self.dim().0
    }

    fn fetch(&self, range: Range<usize>) -> Result<Array4<f32>> {
        Ok(self.slice(ndarray::s![range, .., .., ..]).to_owned())
    }
}

/// Optional extras for [`train_layer`].
#[derive(Debug, Clone, Default)]
pub struct TrainHooks<'a> {
    pub probe: Option<&'a EnergyProbe>,
    pub deadline: Option<(Instant, f64)>,
}

/// Samples this iteration's training patches from a minibatch of feature maps.
pub fn minibatch_patches(
    feats: ArrayView4<'_, f32>,
    cfg: &EnergyLayerConfig,
    schedule: &TrainSchedule,
    seed: u64,
    iteration: usize,
) -> Result<PatchMatrix> {
    let locations = if schedule.patches_per_image == 0 {
        Locations::All
    } else {
        Locations::Sample {
            count: schedule.patches_per_image,
            seed: seed::derive(seed, &[seed::PATCHES, iteration as u64]),
        }
    };
    extract_patches_view(feats, cfg.kernel_size, cfg.padding, locations)
}

/// Trains one layer's bank with a single pass over `source`.
pub fn train_layer(
    source: &dyn FeatureSource,
    cfg: &EnergyLayerConfig,
    schedule: &TrainSchedule,
    seed: u64,
    hooks: TrainHooks<'_>,
) -> Result<(SubspaceBank, TrainTrace)> {
    cfg.validate()?;
    schedule.validate()?;
    let n = source.len();
    if n == 0 {
        return Err(Error::Config("no training images".into()));
    }
    let mut trainer = KSubspacesTrainer::new(cfg.subspaces, cfg.rank, *schedule, seed);
    let mut start = 0;
    while start < n {
        if let Some((deadline, budget)) = hooks.deadline {
            if Instant::now() > deadline {
                return Err(Error::TimeBudget(budget));
            }
        }
        // A short tail joins the last full minibatch rather than driving a
        // power step on its own.
        let mut end = (start + schedule.batch_size).min(n);
        if n - end < schedule.batch_size {
            end = n;
        }
        let feats = source.fetch(start..end)?;
        let patches = minibatch_patches(feats.view(), cfg, schedule, seed, trainer.iteration())?;
        trainer.step(&patches, hooks.probe)?;
        start = end;
    }
    let (bank, trace) = trainer.into_parts();
    let mut bank = bank.expect("at least one iteration ran");
    bank.round_to_f32();
    Ok((bank, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use crate::seed::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(s: u64) -> Rng {
        Rng::seed_from_u64(s)
    }

    fn random_matrix(q: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array::from_shape_fn((q, d), |_| r.sample(StandardNormal))
    }

    fn random_bank(k: usize, r: usize, d: usize, seed: u64) -> SubspaceBank {
        let x = random_matrix(k, d, seed).mapv(|v| v as f32);
        let mut g = rng(seed + 1);
        init_bank(&PatchMatrix::from_vectors(x), k, r, &mut g).unwrap()
    }

    #[test]
    fn single_patch_init_normalizes() {
        let p = PatchMatrix::from_vectors(array![[3.0f32, 4.0]]);
        let bank = init_bank(&p, 1, 1, &mut rng(0)).unwrap();
        assert!((bank.basis()[[0, 0, 0]] - 0.6).abs() < 1e-12);
        assert!((bank.basis()[[0, 0, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn init_is_orthonormal_and_deterministic() {
        let x = random_matrix(50, 12, 1).mapv(|v| v as f32);
        let p = PatchMatrix::from_vectors(x);
        let a = init_bank(&p, 6, 4, &mut rng(3)).unwrap();
        let b = init_bank(&p, 6, 4, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.max_orthonormality_error() < 1e-6);
        // Row 1 keeps the chosen patch's direction.
        for j in 0..6 {
            let row = a.basis().slice(ndarray::s![j, 0, ..]).to_owned();
            let hit = p.rows().outer_iter().any(|r| {
                let r = r.mapv(f64::from);
                let n: f64 = r.dot(&r).sqrt();
                let c: f64 = r.dot(&row);
                (c / n - 1.0).abs() < 1e-9
            });
            assert!(hit);
        }
    }

    #[test]
    fn init_errors() {
        let p = PatchMatrix::from_vectors(Array2::zeros((3, 4)));
        assert!(init_bank(&p, 2, 1, &mut rng(0)).is_err());
        let p = PatchMatrix::from_vectors(random_matrix(2, 4, 0).mapv(|v| v as f32));
        assert!(init_bank(&p, 3, 1, &mut rng(0)).is_err());
        assert!(init_bank(&p, 2, 5, &mut rng(0)).is_err());
        // One zero patch among enough good ones is skipped.
        let mut x = random_matrix(3, 4, 1).mapv(|v| v as f32);
        x.row_mut(0).fill(0.0);
        let p = PatchMatrix::from_vectors(x);
        assert!(init_bank(&p, 2, 2, &mut rng(0)).is_ok());
    }

    #[test]
    fn assign_examples() {
        let basis = array![[[1.0, 0.0]], [[0.0, 1.0]]];
        let bank = SubspaceBank::new(basis, 2, 1).unwrap();
        let x = array![[1.0, 0.1], [0.0, 2.0], [0.5, 0.5]];
        // Exact tie goes to the lower index.
        assert_eq!(assign(x.view(), &bank, AssignMode::Full), vec![0, 1, 0]);
    }

    #[test]
    fn assign_matches_residual_oracle() {
        let bank = random_bank(4, 2, 6, 7);
        let x = random_matrix(50, 6, 8);
        let got = assign(x.view(), &bank, AssignMode::Full);
        for (i, row) in x.outer_iter().enumerate() {
            let residuals: Vec<f64> = (0..4)
                .map(|j| {
                    let v = bank.subspace(j);
                    let rec = v.t().dot(&v.dot(&row));
                    (&row - &rec).mapv(|e| e * e).sum()
                })
                .collect();
            let mut best = 0;
            for j in 1..4 {
                if residuals[j] < residuals[best] {
                    best = j;
                }
            }
            assert_eq!(got[i], best);
        }
    }

    #[test]
    fn first_dim_only_uses_row_one() {
        let basis = array![[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]];
        let bank = SubspaceBank::new(basis.mapv(|v: f64| v), 3, 1).unwrap();
        let x = array![[0.5, 0.0, 0.6]];
        assert_eq!(assign(x.view(), &bank, AssignMode::FirstDimOnly), vec![1]);
        let x = array![[0.5, 3.0, 0.6]];
        assert_eq!(assign(x.view(), &bank, AssignMode::Full), vec![1]);
        assert_eq!(assign(x.view(), &bank, AssignMode::FirstDimOnly), vec![1]);
    }

    #[test]
    fn point_inside_subspace_has_zero_residual() {
        let bank = random_bank(3, 2, 5, 9);
        let v = bank.subspace(2);
        let x = (&v.row(0) * 0.3 + &v.row(1) * -1.2).insert_axis(Axis(0));
        assert_eq!(assign(x.view(), &bank, AssignMode::Full), vec![2]);
        assert!(minibatch_energy(x.view(), &bank, &[2]) < 1e-20);
    }

    #[test]
    fn rank_one_update_finds_the_axis() {
        let mut x = Array2::<f64>::zeros((5, 4));
        x.column_mut(0).fill(1.0);
        let v = array![[-0.3, 0.5, 0.2, 0.78]];
        let out = power_update(x.view(), v.view(), &mut rng(0)).unwrap();
        let want = array![[1.0, 0.0, 0.0, 0.0]];
        for (a, b) in out.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Top-r principal directions by eigen-decomposition of XᵀX.
    fn pca_rows(x: ArrayView2<'_, f64>, r: usize) -> Array2<f64> {
        let g = x.t().dot(&x);
        let d = g.nrows();
        let eig = nalgebra::SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| g[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        Array2::from_shape_fn((r, d), |(a, t)| eig.eigenvectors[(t, order[a])])
    }

    fn projector(v: ArrayView2<'_, f64>) -> Array2<f64> {
        v.t().dot(&v)
    }

    #[test]
    fn subspace_recovered_by_power_iterations() {
        let basis = pca_rows(random_matrix(8, 7, 3).view(), 3);
        let coeffs = random_matrix(40, 3, 4);
        let x = coeffs.dot(&basis);
        let mut v = random_bank(1, 3, 7, 5).subspace(0).to_owned();
        for _ in 0..3 {
            v = power_update(x.view(), v.view(), &mut rng(1)).unwrap();
        }
        let diff = projector(v.view()) - projector(basis.view());
        assert!(diff.iter().all(|e| e.abs() < 1e-9));
        let bank = SubspaceBank::new(v.insert_axis(Axis(0)), 7, 1).unwrap();
        assert!(minibatch_energy(x.view(), &bank, &vec![0; 40]) < 1e-18 * x.mapv(|e| e * e).sum().max(1.0) + 1e-20);
    }

    #[test]
    fn principal_subspace_is_a_fixed_point() {
        let x = random_matrix(60, 6, 10);
        let top = pca_rows(x.view(), 2);
        let next = power_update(x.view(), top.view(), &mut rng(2)).unwrap();
        let diff = projector(next.view()) - projector(top.view());
        assert!(diff.iter().all(|e| e.abs() < 1e-9));
    }

    #[test]
    fn rank_deficient_cluster_is_completed() {
        let mut x = Array2::<f64>::zeros((3, 5));
        x.column_mut(1).fill(2.0);
        let v = random_bank(1, 3, 5, 11).subspace(0).to_owned();
        let out = power_update(x.view(), v.view(), &mut rng(4)).unwrap();
        assert!(orthonormality_ok(out.view()));
        assert!((out[[0, 1]] - 1.0).abs() < 1e-12);
        let again = power_update(x.view(), v.view(), &mut rng(4)).unwrap();
        assert_eq!(out, again);
        assert!(power_update(Array2::<f64>::zeros((0, 5)).view(), v.view(), &mut rng(0)).is_err());
    }

    fn orthonormality_ok(v: ArrayView2<'_, f64>) -> bool {
        crate::energy::orthonormality_error(v) < 1e-6
    }

    proptest! {
        #[test]
        fn power_update_stays_orthonormal(seed in 0u64..10_000, q in 1usize..30, d in 2usize..12, r in 1usize..5) {
            let r = r.min(d);
            let x = random_matrix(q, d, seed);
            let v = random_bank(1, r, d, seed ^ 0xabc).subspace(0).to_owned();
            let out = power_update(x.view(), v.view(), &mut rng(seed)).unwrap();
            prop_assert!(orthonormality_ok(out.view()));
        }

        #[test]
        fn power_update_ignores_patch_order(seed in 0u64..1000) {
            let x = random_matrix(30, 6, seed);
            let v = random_bank(1, 2, 6, seed + 1).subspace(0).to_owned();
            let mut idx: Vec<usize> = (0..30).collect();
            idx.reverse();
            idx.swap(3, 17);
            let a = power_update(x.view(), v.view(), &mut rng(0)).unwrap();
            let b = power_update(x.select(Axis(0), &idx).view(), v.view(), &mut rng(0)).unwrap();
            for (u, w) in a.iter().zip(b.iter()) {
                prop_assert!((u - w).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn energy_examples_and_naive_oracle() {
        let basis = array![[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]]];
        let bank = SubspaceBank::new(basis, 3, 1).unwrap();
        let x = array![[2.0, 0.0, 0.0], [0.0, 0.0, 3.0]];
        assert_eq!(minibatch_energy(x.view(), &bank, &[0, 1]), 9.0);

        let bank = random_bank(3, 2, 5, 12);
        let x = random_matrix(40, 5, 13);
        let a: Vec<usize> = (0..40).map(|i| (i * 7) % 3).collect();
        let mut naive = 0.0;
        for (i, row) in x.outer_iter().enumerate() {
            let v = bank.subspace(a[i]);
            for t in 0..5 {
                let mut rec = 0.0;
                for s in 0..2 {
                    let mut proj = 0.0;
                    for u in 0..5 {
                        proj += v[[s, u]] * row[u];
                    }
                    rec += v[[s, t]] * proj;
                }
                naive += (row[t] - rec).powi(2);
            }
        }
        assert!((minibatch_energy(x.view(), &bank, &a) - naive).abs() < 1e-10 * naive);
    }

    /// Full-batch EM: residual assignment, then top-r PCA per cluster.
    fn em_oracle(x: ArrayView2<'_, f64>, mut bank: SubspaceBank, iters: usize) -> f64 {
        for _ in 0..iters {
            let a = assign(x, &bank, AssignMode::Full);
            let groups = group_by_cluster(&a, bank.subspaces());
            for (j, g) in groups.iter().enumerate() {
                if g.len() >= bank.rank() {
                    let v = pca_rows(x.select(Axis(0), g).view(), bank.rank());
                    bank.set_subspace(j, &v);
                }
            }
        }
        assigned_energy(x, &bank, AssignMode::Full)
    }

    fn union_of_subspaces(k: usize, r: usize, d: usize, per: usize, seed: u64) -> Array2<f64> {
        let mut parts = Vec::new();
        for j in 0..k {
            let basis = pca_rows(random_matrix(d, d, seed * 31 + j as u64).view(), r);
            parts.push(random_matrix(per, r, seed * 17 + j as u64 + 100).dot(&basis));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).unwrap()
    }

    #[test]
    fn minibatch_matches_full_batch_em_on_union_of_subspaces() {
        let x = union_of_subspaces(3, 2, 10, 100, 1);
        let total = x.mapv(|v| v * v).sum();
        let sched = TrainSchedule { batch_size: 64, patches_per_image: 0, warmup_iters: 10, reinit_after: 5 };
        let best_mb = (0..5u64)
            .map(|s| {
                let mut t = KSubspacesTrainer::new(3, 2, sched, s);
                let mut order = rng(s + 50);
                for _ in 0..60 {
                    let idx: Vec<usize> = index::sample(&mut order, 300, 64).into_vec();
                    let p = PatchMatrix::from_vectors(x.select(Axis(0), &idx).mapv(|v| v as f32));
                    t.step(&p, None).unwrap();
                }
                assigned_energy(x.view(), t.bank().unwrap(), AssignMode::Full)
            })
            .fold(f64::INFINITY, f64::min);
        let best_em = (0..5u64)
            .map(|s| {
                let p = PatchMatrix::from_vectors(x.mapv(|v| v as f32));
                let bank = init_bank(&p, 3, 2, &mut seed::rng(s, &[seed::INIT])).unwrap();
                em_oracle(x.view(), bank, 50)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best_mb <= 1.05 * best_em + 1e-6 * total, "{best_mb} vs {best_em} (total {total})");
    }

    #[test]
    fn trainer_warmup_and_reinit_bookkeeping() {
        let sched = TrainSchedule {
            batch_size: 10,
            patches_per_image: 0,
            warmup_iters: 3,
            reinit_after: 2,
        };
        // Every patch on one axis: only one subspace ever wins, the others
        // stay empty and get reseeded.
        let mut x = Array2::<f32>::zeros((20, 4));
        for i in 0..20 {
            x[[i, 0]] = 1.0 + i as f32;
        }
        let p = PatchMatrix::from_vectors(x);
        let mut t = KSubspacesTrainer::new(3, 1, sched, 5);
        assert_eq!(t.warmup_remaining(), 3);
        let s1 = t.step(&p, None).unwrap();
        assert!(s1.warmup);
        t.step(&p, None).unwrap();
        t.step(&p, None).unwrap();
        let s4 = t.step(&p, None).unwrap();
        assert!(!s4.warmup);
        assert_eq!(t.warmup_remaining(), 0);
        assert!(t.trace().reinits >= 2);
        assert!(t.bank().unwrap().max_orthonormality_error() < 1e-6);
    }

    #[test]
    fn train_layer_is_deterministic() {
        let mut r = rng(21);
        let imgs = Array::from_shape_fn((40, 1, 8, 8), |_| r.random::<f32>());
        let cfg = EnergyLayerConfig::new(4, 2, 2, 3, 1);
        let sched = TrainSchedule { batch_size: 8, ..TrainSchedule::default() };
        let (a, ta) = train_layer(&imgs, &cfg, &sched, 3, TrainHooks::default()).unwrap();
        let (b, tb) = train_layer(&imgs, &cfg, &sched, 3, TrainHooks::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.iterations.len(), 5);
        let (c, _) = train_layer(&imgs, &cfg, &sched, 4, TrainHooks::default()).unwrap();
        assert_ne!(a, c);
        assert!(a.max_orthonormality_error() < 1e-6);
        // Rounded to f32 precision.
        assert!(a.basis().iter().all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn short_tail_joins_last_minibatch() {
        let mut r = rng(22);
        let imgs = Array::from_shape_fn((43, 1, 8, 8), |_| r.random::<f32>());
        let cfg = EnergyLayerConfig::new(4, 2, 2, 3, 1);
        let sched = TrainSchedule { batch_size: 8, patches_per_image: 1, ..TrainSchedule::default() };
        let (_, t) = train_layer(&imgs, &cfg, &sched, 3, TrainHooks::default()).unwrap();
        assert_eq!(t.iterations.len(), 5);
        let small = imgs.slice(ndarray::s![..5, .., .., ..]).to_owned();
        let (_, t) = train_layer(&small, &cfg, &sched, 3, TrainHooks::default()).unwrap();
        assert_eq!(t.iterations.len(), 1);
    }

    #[test]
    fn deadline_aborts_training() {
        let imgs = Array4::<f32>::from_elem((4, 1, 5, 5), 0.5);
        let cfg = EnergyLayerConfig::new(2, 1, 1, 3, 0);
        let hooks = TrainHooks {
            probe: None,
            deadline: Some((Instant::now() - std::time::Duration::from_secs(1), 0.0)),
        };
        assert!(matches!(
            train_layer(&imgs, &cfg, &TrainSchedule::default(), 0, hooks),
            Err(Error::TimeBudget(_))
        ));
    }
}
