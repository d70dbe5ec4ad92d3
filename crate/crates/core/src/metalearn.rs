//! Supervised search over network hyperparameters.
//!
//! Each trial trains a fresh network without labels, clusters the training
//! representations and scores them against a fixed labelled subset. Trials
//! are persisted one JSON object per line so a search can resume.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::energy::{EnergyLayerConfig, MAX_RANK, MAX_SUBSPACES};
use crate::error::{Error, Result};
use crate::evaluation::{kmeans, match_and_score, KMeansConfig};
use crate::ksubspaces::TrainSchedule;
use crate::network::{train_stack, Ablations, NetworkSpec, StackOptions, MAX_DEPTH};
use crate::seed::{self, Rng};
use crate::zca::{fit_zca, ZcaConfig, ZcaFilter, DEFAULT_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub input_extent: usize,
    pub max_zca_kernel: usize,
    pub max_depth: usize,
    pub max_subspaces: usize,
    pub max_rank: usize,
    /// Largest allowed patch dimension `channels · kernel²` of any layer.
    pub max_patch_dim: usize,
    /// Largest allowed S-map multiply-accumulates per image over the stack.
    pub max_macs_per_image: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            input_extent: 28,
            max_zca_kernel: 11,
            max_depth: MAX_DEPTH,
            max_subspaces: MAX_SUBSPACES,
            max_rank: MAX_RANK,
            max_patch_dim: 8192,
            max_macs_per_image: 4.0e8,
        }
    }
}

const MAX_DRAWS: usize = 10_000;

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.max_zca_kernel == 0
            || self.max_depth == 0
            || self.max_depth > MAX_DEPTH
            || self.max_subspaces < 2
            || self.max_subspaces > MAX_SUBSPACES
            || self.max_rank == 0
            || self.max_rank > MAX_RANK
            || self.input_extent < 2
        {
            return Err(Error::Config(format!("invalid search space {self:?}")));
        }
        Ok(())
    }

    /// Geometry plus the compute limits of this space.
    pub fn admits(&self, spec: &NetworkSpec) -> bool {
        let shapes = match spec.geometry(self.input_extent, self.input_extent) {
            Ok(s) => s,
            Err(_) => return false,
        };
        let mut channels = 1;
        let mut macs = 0.0;
        for (cfg, out) in spec.effective_layers().iter().zip(&shapes) {
            let dim = channels * cfg.kernel_size * cfg.kernel_size;
            if dim > self.max_patch_dim {
                return false;
            }
            macs += (dim * cfg.subspaces * cfg.rank * out.height * out.width) as f64;
            channels = cfg.subspaces;
        }
        macs <= self.max_macs_per_image
    }

    /// One uniform draw per range, with conditional bounds; may be invalid.
    fn draw(&self, rng: &mut Rng) -> NetworkSpec {
        let zk = 2 * rng.random_range(0..self.max_zca_kernel.div_ceil(2)) + 1;
        let zn = rng.random_range(0..=zk * zk);
        let depth = rng.random_range(1..=self.max_depth);
        let mut extent = self.input_extent;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            let k = rng.random_range(2..=self.max_subspaces);
            let r = rng.random_range(1..=self.max_rank);
            let w = rng.random_range(1..=k);
            let p = rng.random_range(1..=extent.max(1));
            let pad = rng.random_range(0..=p / 2);
            let cfg = EnergyLayerConfig::new(k, r, w, p, pad);
            extent = cfg.out_extent(extent).unwrap_or(1);
            layers.push(cfg);
        }
        NetworkSpec {
            zca: Some(ZcaConfig {
                kernel_size: zk,
                n_components: zn,
            }),
            layers,
            ablations: Ablations::default(),
        }
    }

    /// Rejection sampling until the spec is admitted.
    pub fn sample(&self, rng: &mut Rng) -> Result<NetworkSpec> {
        for _ in 0..MAX_DRAWS {
            let spec = self.draw(rng);
            if self.admits(&spec) {
                return Ok(spec);
            }
        }
        Err(Error::Config(format!("no admissible spec after {MAX_DRAWS} draws")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub spec: NetworkSpec,
    pub seed: u64,
    pub label_budget: usize,
    pub train_error: f64,
    pub test_error: Option<f64>,
    pub wall_time: f64,
    pub status: TrialStatus,
}

impl TrialRecord {
    /// Equality on everything except the wall-clock time.
    pub fn same_outcome(&self, other: &TrialRecord) -> bool {
        TrialRecord {
            wall_time: 0.0,
            ..self.clone()
        } == TrialRecord {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

/// Proposes the spec for trial `index` from a snapshot of finished trials.
pub trait Sampler: Sync {
    fn name(&self) -> &str;
    fn propose(&self, index: usize, space: &SearchSpace, history: &[TrialRecord], rng: &mut Rng) -> Result<NetworkSpec>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomSampler;

impl Sampler for RandomSampler {
    fn name(&self) -> &str {
        "random"
    }

    fn propose(&self, _: usize, space: &SearchSpace, _: &[TrialRecord], rng: &mut Rng) -> Result<NetworkSpec> {
        space.sample(rng)
    }
}

/// Replays fixed specs first, then defers to another sampler.
pub struct ForcedSampler<S> {
    pub specs: Vec<NetworkSpec>,
    pub then: S,
}

impl<S: Sampler> Sampler for ForcedSampler<S> {
    fn name(&self) -> &str {
        "forced"
    }

    fn propose(&self, index: usize, space: &SearchSpace, history: &[TrialRecord], rng: &mut Rng) -> Result<NetworkSpec> {
        match self.specs.get(index) {
            Some(s) => {
                s.validate()?;
                Ok(s.clone())
            }
            None => self.then.propose(index, space, history, rng),
        }
    }
}

/// Tree-structured Parzen style ranking: random candidates are scored by the
/// density ratio between the best `gamma` fraction of past trials and the rest.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveSampler {
    pub startup: usize,
    pub candidates: usize,
    pub gamma: f64,
    pub bandwidth: f64,
}

impl Default for AdaptiveSampler {
    fn default() -> Self {
        AdaptiveSampler {
            startup: 10,
            candidates: 24,
            gamma: 0.25,
            bandwidth: 0.15,
        }
    }
}

fn features(spec: &NetworkSpec, space: &SearchSpace) -> Vec<f64> {
    let norm = |v: usize, hi: usize| v as f64 / hi.max(1) as f64;
    let z = spec.zca.unwrap_or(ZcaConfig {
        kernel_size: 1,
        n_components: 0,
    });
    let mut f = vec![
        norm(spec.layers.len(), space.max_depth),
        norm(z.kernel_size, space.max_zca_kernel),
        norm(z.n_components, z.kernel_size * z.kernel_size),
    ];
    for i in 0..space.max_depth {
        match spec.layers.get(i) {
            Some(c) => f.extend([
                norm(c.subspaces, space.max_subspaces),
                norm(c.rank, space.max_rank),
                norm(c.winners, c.subspaces),
                norm(c.kernel_size, space.input_extent),
                norm(c.padding, (c.kernel_size / 2).max(1)),
            ]),
            None => f.extend([-1.0; 5]),
        }
    }
    f
}

fn density(x: &[f64], points: &[Vec<f64>], bw: f64) -> f64 {
    let s: f64 = points
        .iter()
        .map(|p| {
            let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            (-0.5 * d2 / (bw * bw)).exp()
        })
        .sum();
    (s + 1e-12) / (points.len() as f64 + 1.0)
}

impl Sampler for AdaptiveSampler {
    fn name(&self) -> &str {
        "adaptive"
    }

    fn propose(&self, _: usize, space: &SearchSpace, history: &[TrialRecord], rng: &mut Rng) -> Result<NetworkSpec> {
        if history.len() < self.startup.max(2) {
            return space.sample(rng);
        }
        let mut sorted: Vec<&TrialRecord> = history.iter().collect();
        sorted.sort_by(|a, b| a.train_error.total_cmp(&b.train_error).then(a.index.cmp(&b.index)));
        let cut = ((sorted.len() as f64 * self.gamma).ceil() as usize).clamp(1, sorted.len() - 1);
        let good: Vec<Vec<f64>> = sorted[..cut].iter().map(|t| features(&t.spec, space)).collect();
        let bad: Vec<Vec<f64>> = sorted[cut..].iter().map(|t| features(&t.spec, space)).collect();
        let mut best: Option<(f64, NetworkSpec)> = None;
        for _ in 0..self.candidates.max(1) {
            let cand = space.sample(rng)?;
            let f = features(&cand, space);
            let score = density(&f, &good, self.bandwidth) / density(&f, &bad, self.bandwidth);
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, cand));
            }
        }
        Ok(best.expect("at least one candidate").1)
    }
}

/// Training data, the fixed scoring subset and optional test data for a search.
pub struct TrialData {
    pub train: ImageSet,
    pub test: Option<ImageSet>,
    /// Indices into `train` whose labels are revealed to the scorer.
    pub label_subset: Vec<usize>,
}

impl TrialData {
    pub fn new(train: ImageSet, test: Option<ImageSet>, label_budget: usize, seed: u64) -> Result<Self> {
        if train.labels().is_none() {
            return Err(Error::Labels("search needs labelled training images".into()));
        }
        if label_budget == 0 || label_budget > train.len() {
            return Err(Error::Config(format!(
                "label budget {label_budget} outside 1..={}",
                train.len()
            )));
        }
        let mut rng = seed::rng(seed, &[seed::LABEL_SUBSET]);
        let mut label_subset = index::sample(&mut rng, train.len(), label_budget).into_vec();
        label_subset.sort_unstable();
        Ok(TrialData {
            train,
            test,
            label_subset,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrialOptions {
    pub schedule: TrainSchedule,
    pub kmeans: KMeansConfig,
    pub time_cap: Option<Duration>,
    pub zca_samples: usize,
}

impl Default for TrialOptions {
    fn default() -> Self {
        TrialOptions {
            schedule: TrainSchedule::default(),
            kmeans: KMeansConfig::default(),
            time_cap: Some(Duration::from_secs(15 * 60)),
            zca_samples: DEFAULT_SAMPLES,
        }
    }
}

/// ZCA filters fitted once per `(kernel, components)` pair.
#[derive(Default)]
pub struct ZcaCache {
    seed: u64,
    filters: Mutex<HashMap<(usize, usize), ZcaFilter>>,
}

impl ZcaCache {
    pub fn new(seed: u64) -> Self {
        ZcaCache {
            seed,
            filters: Mutex::new(HashMap::new()),
        }
    }

    fn get(&self, images: &ImageSet, cfg: ZcaConfig, samples: usize) -> Result<ZcaFilter> {
        let key = (cfg.kernel_size, cfg.n_components);
        if let Some(f) = self.filters.lock().expect("cache lock").get(&key) {
            return Ok(f.clone());
        }
        let f = fit_zca(images.pixels(), cfg, samples, seed::derive(self.seed, &[seed::ZCA_SAMPLE]))?;
        self.filters.lock().expect("cache lock").insert(key, f.clone());
        Ok(f)
    }
}

fn score_trial(spec: &NetworkSpec, data: &TrialData, seed: u64, opts: &TrialOptions, zca: Option<&ZcaCache>) -> Result<(f64, Option<f64>)> {
    let start = Instant::now();
    let deadline = opts.time_cap.map(|c| (start + c, c.as_secs_f64()));
    let zca_cache = match (zca, spec.zca_config()) {
        (Some(cache), Some(cfg)) => Some(cache.get(&data.train, cfg, opts.zca_samples)?),
        _ => None,
    };
    let stack = StackOptions {
        schedule: opts.schedule,
        seed,
        zca_samples: opts.zca_samples,
        zca_cache,
        deadline,
        ..StackOptions::default()
    };
    let (model, _) = train_stack(data.train.pixels(), spec, &stack)?;
    let over = |d: Option<(Instant, f64)>| -> Result<()> {
        match d {
            Some((t, b)) if Instant::now() > t => Err(Error::TimeBudget(b)),
            _ => Ok(()),
        }
    };
    over(deadline)?;
    let rep = model.infer(data.train.pixels())?;
    if rep.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite representation".into()));
    }
    over(deadline)?;
    let km = kmeans(rep.view(), &opts.kmeans, seed::derive(seed, &[seed::KMEANS]))?;
    let labels = data.train.labels().expect("checked in TrialData::new");
    let a: Vec<usize> = data.label_subset.iter().map(|&i| km.assignments[i]).collect();
    let l: Vec<u8> = data.label_subset.iter().map(|&i| labels[i]).collect();
    let train_error = match_and_score(&a, &l)?.error;
    let test_error = match &data.test {
        Some(test) => {
            over(deadline)?;
            let rep = model.infer(test.pixels())?;
            let km = kmeans(rep.view(), &opts.kmeans, seed::derive(seed, &[seed::KMEANS, 1]))?;
            let labels = test
                .labels()
                .ok_or_else(|| Error::Labels("test images carry no labels".into()))?;
            Some(match_and_score(&km.assignments, labels)?.error)
        }
        None => None,
    };
    Ok((train_error, test_error))
}

/// Trains and scores one spec from fresh weights. Failures are recorded with
/// error 1.0 rather than propagated.
pub fn run_trial(index: usize, spec: &NetworkSpec, data: &TrialData, seed: u64, opts: &TrialOptions, zca: Option<&ZcaCache>) -> TrialRecord {
    let start = Instant::now();
    let outcome = score_trial(spec, data, seed, opts, zca);
    let wall_time = start.elapsed().as_secs_f64();
    let (train_error, test_error, status) = match outcome {
        Ok((tr, te)) => (tr, te, TrialStatus::Ok),
        Err(e) => (1.0, None, TrialStatus::Failed(e.to_string())),
    };
    TrialRecord {
        index,
        spec: spec.clone(),
        seed,
        label_budget: data.label_subset.len(),
        train_error,
        test_error,
        wall_time,
        status,
    }
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub budget: usize,
    pub workers: usize,
    pub seed: u64,
    pub trial: TrialOptions,
}

pub fn trial_seed(search_seed: u64, index: usize) -> u64 {
    seed::derive(search_seed, &[seed::TRIAL, index as u64])
}

/// Reads a JSON-lines history; any malformed line is an error.
pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line)
            .map_err(|e| Error::History(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn append_history(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: TrialRecord,
    pub history: Vec<TrialRecord>,
}

/// Lowest train error, earliest trial on ties.
pub fn best_of(history: &[TrialRecord]) -> Option<&TrialRecord> {
    history
        .iter()
        .reduce(|b, r| if r.train_error < b.train_error { r } else { b })
}

/// Runs trials in rounds of `workers`; each round samples from the history
/// as it stood at the start of the round. With `history_path` set, records
/// already in the file are kept and the search continues after them.
pub fn search(
    space: &SearchSpace,
    data: &TrialData,
    sampler: &dyn Sampler,
    cfg: &SearchConfig,
    history_path: Option<&Path>,
) -> Result<SearchOutcome> {
    space.validate()?;
    if cfg.budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    let workers = cfg.workers.max(1);
    let mut history = match history_path {
        Some(p) if p.exists() => read_history(p)?,
        _ => Vec::new(),
    };
    for (i, r) in history.iter().enumerate() {
        if r.index != i || r.seed != trial_seed(cfg.seed, i) {
            return Err(Error::History(format!(
                "record {i} has index {} and seed {}; not from this search",
                r.index, r.seed
            )));
        }
        if r.label_budget != data.label_subset.len() {
            return Err(Error::History(format!(
                "record {i} used a label budget of {}, this search uses {}",
                r.label_budget,
                data.label_subset.len()
            )));
        }
    }
    history.truncate(cfg.budget);
    let zca = ZcaCache::new(cfg.seed);
    while history.len() < cfg.budget {
        let first = history.len();
        let round_start = first - first % workers;
        let end = (round_start + workers).min(cfg.budget);
        let snapshot = &history[..round_start];
        let specs: Vec<Result<NetworkSpec>> = (first..end)
            .map(|i| {
                let mut rng = seed::rng(cfg.seed, &[seed::SAMPLER, i as u64]);
                sampler.propose(i, space, snapshot, &mut rng)
            })
            .collect();
        let records: Vec<TrialRecord> = specs
            .into_par_iter()
            .enumerate()
            .map(|(o, spec)| {
                let i = first + o;
                let seed = trial_seed(cfg.seed, i);
                match spec {
                    Ok(spec) => run_trial(i, &spec, data, seed, &cfg.trial, Some(&zca)),
                    Err(e) => TrialRecord {
                        index: i,
                        spec: NetworkSpec {
                            zca: None,
                            layers: Vec::new(),
                            ablations: Ablations::default(),
                        },
                        seed,
                        label_budget: data.label_subset.len(),
                        train_error: 1.0,
                        test_error: None,
                        wall_time: 0.0,
                        status: TrialStatus::Failed(e.to_string()),
                    },
                }
            })
            .collect();
        if let Some(p) = history_path {
            append_history(p, &records)?;
        }
        history.extend(records);
    }
    let best = best_of(&history).expect("budget >= 1").clone();
    Ok(SearchOutcome { best, history })
}
