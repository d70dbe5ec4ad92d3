//! ZCA, stacked energy layers and 2×2 pooling, trained greedily layer by layer.

use std::fmt;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4, ArrayView4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{extract_patches_view, Locations};
use crate::energy::{layer_forward, EnergyLayerConfig, SubspaceBank};
use crate::error::{Error, Result};
use crate::ksubspaces::{self, init_bank, minibatch_patches, EnergyProbe, FeatureSource, TrainHooks, TrainSchedule, TrainTrace};
use crate::seed;
use crate::zca::{apply_conv_zca, fit_zca, ZcaConfig, ZcaFilter, DEFAULT_SAMPLES};

pub const MAX_DEPTH: usize = 4;
pub const INPUT_EXTENT: usize = 28;

/// Images per chunk when running the frozen stack.
const FORWARD_CHUNK: usize = 256;

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    #[serde(default = "yes")]
    pub zca_enabled: bool,
    #[serde(default = "yes")]
    pub rescaling_enabled: bool,
    #[serde(default)]
    pub force_r1: bool,
    #[serde(default)]
    pub random_subspaces: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            zca_enabled: true,
            rescaling_enabled: true,
            force_r1: false,
            random_subspaces: false,
        }
    }
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = ["no-zca", "no-rescaling", "no-zca-no-rescaling", "1d", "random"];

    pub fn apply(&mut self, name: &str) -> Result<()> {
        match name {
            "no-zca" => self.zca_enabled = false,
            "no-rescaling" => self.rescaling_enabled = false,
            "no-zca-no-rescaling" => {
                self.zca_enabled = false;
                self.rescaling_enabled = false;
            }
            "1d" | "force-r1" => self.force_r1 = true,
            "random" | "random-subspaces" => self.random_subspaces = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zca: Option<ZcaConfig>,
    pub layers: Vec<EnergyLayerConfig>,
    #[serde(default)]
    pub ablations: Ablations,
}

/// Shape of the maps after one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl NetworkSpec {
    pub fn zca_config(&self) -> Option<ZcaConfig> {
        self.zca.filter(|_| self.ablations.zca_enabled)
    }

    /// Layer configs after applying the ablation switches.
    pub fn effective_layers(&self) -> Vec<EnergyLayerConfig> {
        self.layers
            .iter()
            .map(|c| EnergyLayerConfig {
                rank: if self.ablations.force_r1 { 1 } else { c.rank },
                rescale: c.rescale && self.ablations.rescaling_enabled,
                ..*c
            })
            .collect()
    }

    pub fn validate(&self) -> Result<Vec<MapShape>> {
        self.geometry(INPUT_EXTENT, INPUT_EXTENT)
    }

    /// Checks the chain for `height × width` single-channel input and returns
    /// the output shape of every layer.
    pub fn geometry(&self, height: usize, width: usize) -> Result<Vec<MapShape>> {
        if self.layers.is_empty() || self.layers.len() > MAX_DEPTH {
            return Err(Error::Config(format!(
                "network needs 1 to {MAX_DEPTH} layers, got {}",
                self.layers.len()
            )));
        }
        if let Some(z) = self.zca_config() {
            z.validate()?;
            if z.kernel_size / 2 >= height.min(width) {
                return Err(Error::Config(format!(
                    "ZCA kernel {} too large for {height}x{width} input",
                    z.kernel_size
                )));
            }
        }
        let mut shape = MapShape {
            channels: 1,
            height,
            width,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, cfg) in self.effective_layers().iter().enumerate() {
            cfg.validate()
                .map_err(|e| Error::Config(format!("layer {}: {e}", i + 1)))?;
            let (h, w) = match (cfg.out_extent(shape.height), cfg.out_extent(shape.width)) {
                (Some(h), Some(w)) => (h, w),
                _ => {
                    return Err(Error::Config(format!(
                        "layer {}: kernel {} with padding {} does not fit a {}x{} input",
                        i + 1,
                        cfg.kernel_size,
                        cfg.padding,
                        shape.height,
                        shape.width
                    )))
                }
            };
            let dim = shape.channels * cfg.kernel_size * cfg.kernel_size;
            if cfg.rank > dim {
                return Err(Error::Config(format!(
                    "layer {}: rank {} exceeds patch dimension {dim}",
                    i + 1,
                    cfg.rank
                )));
            }
            shape = MapShape {
                channels: cfg.subspaces,
                height: h,
                width: w,
            };
            out.push(shape);
        }
        if shape.height < 2 || shape.width < 2 {
            return Err(Error::Config(format!(
                "final maps are {}x{}, pooling needs at least 2x2",
                shape.height, shape.width
            )));
        }
        Ok(out)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|c| c.subspaces * 4).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub data_digest: String,
    pub n_train: usize,
    pub version: String,
    pub schedule: TrainSchedule,
    pub zca_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    /// `None` when ZCA is disabled.
    pub zca_filter: Option<ZcaFilter>,
    pub banks: Vec<SubspaceBank>,
    pub provenance: Provenance,
}

/// SHA-256 over the tensor shape and its little-endian f32 values.
pub fn data_digest(x: ArrayView4<'_, f32>) -> String {
    let mut h = Sha256::new();
    let (n, c, hh, w) = x.dim();
    for d in [n, c, hh, w] {
        h.update((d as u64).to_le_bytes());
    }
    let mut buf = Vec::with_capacity(1 << 16);
    for v in x.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
        if buf.len() >= 1 << 16 {
            h.update(&buf);
            buf.clear();
        }
    }
    h.update(&buf);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Frozen front part of a network.
#[derive(Debug, Clone)]
struct Pipeline {
    zca: Option<ZcaFilter>,
    layers: Vec<(SubspaceBank, EnergyLayerConfig)>,
}

impl Pipeline {
    fn run(&self, x: ArrayView4<'_, f32>, depth: usize) -> Result<Array4<f32>> {
        let mut cur = match &self.zca {
            Some(f) => apply_conv_zca(x, f)?,
            None => x.to_owned(),
        };
        for (bank, cfg) in &self.layers[..depth] {
            cur = layer_forward(cur.view(), bank, cfg)?;
        }
        Ok(cur)
    }
}

struct StackSource<'a> {
    pixels: ArrayView4<'a, f32>,
    pipeline: &'a Pipeline,
    depth: usize,
}

impl FeatureSource for StackSource<'_> {
    fn len(&self) -> usize {
        self.pixels.dim().0
    }

    fn fetch(&self, range: Range<usize>) -> Result<Array4<f32>> {
        self.pipeline
            .run(self.pixels.slice(s![range, .., .., ..]), self.depth)
    }
}

/// Held-out images whose per-layer energy is tracked during training.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub images: Array4<f32>,
    pub patches_per_image: usize,
    pub every: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StackOptions {
    pub schedule: TrainSchedule,
    pub seed: u64,
    /// Patches for the ZCA correlation estimate; 0 selects the default.
    pub zca_samples: usize,
    /// Keep this model's ZCA filter and leading banks instead of retraining them.
    pub resume: Option<(TrainedModel, usize)>,
    /// Pre-fitted ZCA filter to use instead of fitting one.
    pub zca_cache: Option<ZcaFilter>,
    pub probe: Option<ProbeSet>,
    pub deadline: Option<(Instant, f64)>,
}

fn check_deadline(deadline: Option<(Instant, f64)>) -> Result<()> {
    match deadline {
        Some((t, budget)) if Instant::now() > t => Err(Error::TimeBudget(budget)),
        _ => Ok(()),
    }
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed::derive(seed, &[seed::LAYER, layer as u64])
}

/// Draws a random bank through the same path as training initialization.
fn random_bank(
    source: &dyn FeatureSource,
    cfg: &EnergyLayerConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<SubspaceBank> {
    let n = source.len().min(schedule.batch_size);
    let feats = source.fetch(0..n)?;
    let patches = minibatch_patches(feats.view(), cfg, schedule, seed, 0)?;
    let mut bank = init_bank(&patches, cfg.subspaces, cfg.rank, &mut seed::rng(seed, &[seed::INIT]))?;
    bank.round_to_f32();
    Ok(bank)
}

/// Fits ZCA (if enabled) and trains each layer on the frozen output of the
/// layers below it. Takes pixels only: labels never reach this path.
pub fn train_stack(
    pixels: ArrayView4<'_, f32>,
    spec: &NetworkSpec,
    opts: &StackOptions,
) -> Result<(TrainedModel, Vec<TrainTrace>)> {
    let (n, m, h, w) = pixels.dim();
    if m != 1 {
        return Err(Error::Shape(format!("expected single-channel images, got {m} channels")));
    }
    if n == 0 {
        return Err(Error::Config("no training images".into()));
    }
    spec.geometry(h, w)?;
    opts.schedule.validate()?;
    let digest = data_digest(pixels);
    let zca_samples = if opts.zca_samples == 0 { DEFAULT_SAMPLES } else { opts.zca_samples };
    let provenance = Provenance {
        seed: opts.seed,
        data_digest: digest,
        n_train: n,
        version: env!("CARGO_PKG_VERSION").to_string(),
        schedule: opts.schedule,
        zca_samples,
    };

    let layers = spec.effective_layers();
    let mut pipeline = Pipeline {
        zca: None,
        layers: Vec::new(),
    };
    let mut start = 0;
    if let Some((model, keep)) = &opts.resume {
        if model.provenance.data_digest != provenance.data_digest {
            return Err(Error::Config("resume model was trained on different data".into()));
        }
        if *keep > model.banks.len() || *keep > layers.len() {
            return Err(Error::Config(format!(
                "cannot keep {keep} layers of a {}-layer model",
                model.banks.len()
            )));
        }
        if model.spec.zca_config() != spec.zca_config()
            || model.spec.effective_layers()[..*keep] != layers[..*keep]
        {
            return Err(Error::Config("resume model's leading layers differ from the spec".into()));
        }
        pipeline.zca = model.zca_filter.clone();
        for (bank, cfg) in model.banks[..*keep].iter().zip(&layers) {
            pipeline.layers.push((bank.clone(), *cfg));
        }
        start = *keep;
    } else if let Some(z) = spec.zca_config() {
        check_deadline(opts.deadline)?;
        pipeline.zca = Some(match &opts.zca_cache {
            Some(f) if f.kernel_size() == z.kernel_size && f.n_components == z.n_components => f.clone(),
            _ => fit_zca(pixels, z, zca_samples, seed::derive(opts.seed, &[seed::ZCA_SAMPLE]))?,
        });
    }

    let mut traces = Vec::new();
    for (i, cfg) in layers.iter().enumerate().skip(start) {
        check_deadline(opts.deadline)?;
        let lseed = layer_seed(opts.seed, i);
        let source = StackSource {
            pixels,
            pipeline: &pipeline,
            depth: i,
        };
        let bank = if spec.ablations.random_subspaces {
            traces.push(TrainTrace::default());
            random_bank(&source, cfg, &opts.schedule, lseed)?
        } else {
            let probe = match &opts.probe {
                Some(p) => Some(probe_patches(&pipeline, p, i, cfg, lseed)?),
                None => None,
            };
            let hooks = TrainHooks {
                probe: probe.as_ref(),
                deadline: opts.deadline,
            };
            let (bank, trace) = ksubspaces::train_layer(&source, cfg, &opts.schedule, lseed, hooks)?;
            traces.push(trace);
            bank
        };
        pipeline.layers.push((bank, *cfg));
    }

    let model = TrainedModel {
        spec: spec.clone(),
        zca_filter: pipeline.zca,
        banks: pipeline.layers.into_iter().map(|(b, _)| b).collect(),
        provenance,
    };
    Ok((model, traces))
}

fn probe_patches(
    pipeline: &Pipeline,
    probe: &ProbeSet,
    depth: usize,
    cfg: &EnergyLayerConfig,
    seed: u64,
) -> Result<EnergyProbe> {
    let feats = pipeline.run(probe.images.view(), depth)?;
    let loc = if probe.patches_per_image == 0 {
        Locations::All
    } else {
        Locations::Sample {
            count: probe.patches_per_image,
            seed: seed::derive(seed, &[seed::PATCHES, u64::MAX]),
        }
    };
    let patches = extract_patches_view(feats.view(), cfg.kernel_size, cfg.padding, loc)?;
    Ok(EnergyProbe {
        patches: patches.rows().mapv(f64::from),
        every: probe.every,
    })
}

/// Where along the network a representation is read out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tap {
    Pixels,
    Zca,
    /// 1-based layer index.
    Layer(usize),
    Pooled,
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tap::Pixels => write!(f, "pixels"),
            Tap::Zca => write!(f, "zca"),
            Tap::Layer(i) => write!(f, "layer{i}"),
            Tap::Pooled => write!(f, "pooled"),
        }
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Tap> {
        let t = s.trim().to_ascii_lowercase().replace(['_', ' '], "");
        match t.as_str() {
            "pixels" => Ok(Tap::Pixels),
            "zca" => Ok(Tap::Zca),
            "pooled" | "pool" | "2x2pool" => Ok(Tap::Pooled),
            _ => t
                .strip_prefix("layer")
                .and_then(|i| i.parse::<usize>().ok())
                .filter(|&i| i >= 1)
                .map(Tap::Layer)
                .ok_or_else(|| Error::Config(format!("unknown tap {s:?}"))),
        }
    }
}

impl Tap {
    /// Every tap of a `depth`-layer model, in network order.
    pub fn all(depth: usize) -> Vec<Tap> {
        let mut v = vec![Tap::Pixels, Tap::Zca];
        v.extend((1..=depth).map(Tap::Layer));
        v.push(Tap::Pooled);
        v
    }
}

/// Averages each map over a 2×2 partition; the first block in each
/// direction takes the extra row/column when the extent is odd.
pub fn pool_2x2(x: ArrayView4<'_, f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let hs = [0..h.div_ceil(2), h.div_ceil(2)..h];
    let ws = [0..w.div_ceil(2), w.div_ceil(2)..w];
    let mut out = Array4::<f32>::zeros((n, c, 2, 2));
    for i in 0..n {
        for ch in 0..c {
            for (a, hr) in hs.iter().enumerate() {
                for (b, wr) in ws.iter().enumerate() {
                    let block = x.slice(s![i, ch, hr.clone(), wr.clone()]);
                    let count = block.len();
                    let sum: f64 = block.iter().map(|&v| v as f64).sum();
                    out[[i, ch, a, b]] = if count == 0 { 0.0 } else { (sum / count as f64) as f32 };
                }
            }
        }
    }
    out
}

impl TrainedModel {
    pub fn depth(&self) -> usize {
        self.banks.len()
    }

    fn pipeline(&self) -> Pipeline {
        Pipeline {
            zca: self.zca_filter.clone(),
            layers: self
                .banks
                .iter()
                .cloned()
                .zip(self.spec.effective_layers())
                .collect(),
        }
    }

    /// Feature maps at a tap (pooled maps for [`Tap::Pooled`]).
    pub fn maps(&self, x: ArrayView4<'_, f32>, tap: Tap) -> Result<Array4<f32>> {
        let depth = self.depth();
        if let Tap::Layer(i) = tap {
            if i > depth {
                return Err(Error::Config(format!("tap {tap} beyond a {depth}-layer model")));
            }
        }
        let m = x.dim().1;
        if m != 1 {
            return Err(Error::Shape(format!("expected single-channel images, got {m} channels")));
        }
        let pipeline = self.pipeline();
        Ok(match tap {
            Tap::Pixels => x.to_owned(),
            Tap::Zca => pipeline.run(x, 0)?,
            Tap::Layer(i) => pipeline.run(x, i)?,
            Tap::Pooled => pool_2x2(pipeline.run(x, depth)?.view()),
        })
    }

    /// Flattened (channel-major) representation at a tap, `[n, features]`.
    pub fn represent(&self, x: ArrayView4<'_, f32>, tap: Tap) -> Result<Array2<f32>> {
        let n = x.dim().0;
        let mut out: Option<Array2<f32>> = None;
        for start in (0..n).step_by(FORWARD_CHUNK) {
            let end = (start + FORWARD_CHUNK).min(n);
            let maps = self.maps(x.slice(s![start..end, .., .., ..]), tap)?;
            let (b, c, h, w) = maps.dim();
            let flat = maps.into_shape_with_order((b, c * h * w)).expect("contiguous");
            let dst = out.get_or_insert_with(|| Array2::zeros((n, c * h * w)));
            dst.slice_mut(s![start..end, ..]).assign(&flat);
        }
        Ok(out.unwrap_or_else(|| Array2::zeros((0, 0))))
    }

    /// The final pooled representation, `[n, k_last·4]`.
    pub fn infer(&self, x: ArrayView4<'_, f32>) -> Result<Array2<f32>> {
        self.represent(x, Tap::Pooled)
    }
}

// Model file layout (all integers little-endian):
//   magic "ENRGYNET" | version u32 | header length u64 | JSON header
//   | f32 payload | CRC32 of all preceding bytes.
// The payload holds the ZCA kernel (row-major) if present, then every bank as
// [k, r, d] row-major.

const MAGIC: &[u8; 8] = b"ENRGYNET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BankShape {
    subspaces: usize,
    rank: usize,
    channels: usize,
    kernel: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    provenance: Provenance,
    zca_kernel: Option<usize>,
    zca_components: Option<usize>,
    banks: Vec<BankShape>,
    payload_floats: usize,
}

impl BankShape {
    fn floats(&self) -> usize {
        self.subspaces * self.rank * self.channels * self.kernel * self.kernel
    }
}

pub fn model_to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let banks: Vec<BankShape> = model
        .banks
        .iter()
        .map(|b| BankShape {
            subspaces: b.subspaces(),
            rank: b.rank(),
            channels: b.channels(),
            kernel: b.kernel(),
        })
        .collect();
    let zca_floats = model.zca_filter.as_ref().map_or(0, |f| f.kernel.len());
    let header = Header {
        spec: model.spec.clone(),
        provenance: model.provenance.clone(),
        zca_kernel: model.zca_filter.as_ref().map(|f| f.kernel_size()),
        zca_components: model.zca_filter.as_ref().map(|f| f.n_components),
        payload_floats: zca_floats + banks.iter().map(BankShape::floats).sum::<usize>(),
        banks,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(24 + json.len() + 4 * header.payload_floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    if let Some(f) = &model.zca_filter {
        for v in f.kernel.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for b in &model.banks {
        for &v in b.basis().iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

pub fn model_from_bytes(raw: &[u8]) -> Result<TrainedModel> {
    if raw.len() < 24 || &raw[..8] != MAGIC {
        return Err(bad("not a model file (bad magic or truncated)"));
    }
    let version = u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let (body, trailer) = raw.split_at(raw.len() - 4);
    let crc = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != crc {
        return Err(bad("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(raw[12..20].try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| bad("header length overflow"))?;
    let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[20..hend]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &body[hend..];
    if payload.len() != 4 * header.payload_floats {
        return Err(bad(format!(
            "payload holds {} bytes, header declares {} floats",
            payload.len(),
            header.payload_floats
        )));
    }
    let zca_floats = header.zca_kernel.map_or(0, |p| p * p);
    let expected = zca_floats + header.banks.iter().map(BankShape::floats).sum::<usize>();
    if expected != header.payload_floats {
        return Err(bad("header shapes disagree with payload length"));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    if let Some(bad_at) = payload
        .chunks_exact(4)
        .position(|c| !f32::from_le_bytes(c.try_into().expect("4 bytes")).is_finite())
    {
        return Err(bad(format!("non-finite value at payload index {bad_at}")));
    }
    let zca_filter = match (header.zca_kernel, header.zca_components) {
        (Some(p), Some(nc)) => {
            let k: Vec<f32> = floats.by_ref().take(p * p).collect();
            Some(ZcaFilter {
                kernel: Array2::from_shape_vec((p, p), k).expect("sized"),
                n_components: nc,
            })
        }
        (None, None) => None,
        _ => return Err(bad("incomplete ZCA header")),
    };
    let mut banks = Vec::with_capacity(header.banks.len());
    for b in &header.banks {
        let d = b.channels * b.kernel * b.kernel;
        let vals: Vec<f64> = floats.by_ref().take(b.floats()).map(f64::from).collect();
        let basis = Array3::from_shape_vec((b.subspaces, b.rank, d), vals).expect("sized");
        banks.push(SubspaceBank::new(basis, b.channels, b.kernel).map_err(|e| bad(e.to_string()))?);
    }
    let model = TrainedModel {
        spec: header.spec,
        zca_filter,
        banks,
        provenance: header.provenance,
    };
    check_model(&model)?;
    Ok(model)
}

fn check_model(model: &TrainedModel) -> Result<()> {
    let layers = model.spec.effective_layers();
    if layers.len() != model.banks.len() {
        return Err(bad(format!(
            "spec has {} layers but file holds {} banks",
            layers.len(),
            model.banks.len()
        )));
    }
    if model.spec.zca_config().is_some() != model.zca_filter.is_some() {
        return Err(bad("ZCA filter presence disagrees with the spec"));
    }
    let mut channels = 1;
    for (i, (b, c)) in model.banks.iter().zip(&layers).enumerate() {
        if b.subspaces() != c.subspaces || b.rank() != c.rank || b.kernel() != c.kernel_size || b.channels() != channels {
            return Err(bad(format!("bank {} does not match its layer config", i + 1)));
        }
        channels = c.subspaces;
    }
    Ok(())
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model_to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&raw)
}
