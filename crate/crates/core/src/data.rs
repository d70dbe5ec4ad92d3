//! Image containers, the IDX file format, and patch extraction.
//!
//! Feature maps are stored as `[n, channels, height, width]` arrays of `f32`.
//! Patches are flattened channel-major, then row-major, and that order is used
//! everywhere a patch becomes a vector (training, inference, norms).

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// A stack of feature maps with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    tensor: Array4<f32>,
    labels: Option<Vec<u8>>,
}

impl ImageSet {
    pub fn new(tensor: Array4<f32>, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(bad) = tensor.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at flat index {bad}")));
        }
        if let Some(l) = &labels {
            check_labels(l, tensor.dim().0)?;
        }
        Ok(ImageSet { tensor, labels })
    }

    pub fn len(&self) -> usize {
        self.tensor.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim().1
    }

    pub fn height(&self) -> usize {
        self.tensor.dim().2
    }

    pub fn width(&self) -> usize {
        self.tensor.dim().3
    }

    pub fn tensor(&self) -> &Array4<f32> {
        &self.tensor
    }

    /// The pixel tensor without labels. Training entry points take this view
    /// so that labels cannot reach the unsupervised path.
    pub fn pixels(&self) -> ArrayView4<'_, f32> {
        self.tensor.view()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn into_tensor(self) -> Array4<f32> {
        self.tensor
    }

    pub fn slice(&self, range: Range<usize>) -> ImageSet {
        ImageSet {
            tensor: self.tensor.slice(s![range.clone(), .., .., ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
        }
    }

    pub fn select(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            tensor: self.tensor.select(Axis(0), indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// First `n` images (or all of them if fewer).
    pub fn head(&self, n: usize) -> ImageSet {
        self.slice(0..n.min(self.len()))
    }
}

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Labels(format!(
            "{} labels for {} images",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Labels(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

/// Which of the two MNIST IDX containers a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

impl IdxKind {
    fn magic(self) -> u32 {
        match self {
            IdxKind::Images => IDX_IMAGES_MAGIC,
            IdxKind::Labels => IDX_LABELS_MAGIC,
        }
    }
}

/// Raw contents of an unsigned-byte IDX file.
#[derive(Debug, Clone)]
pub struct IdxData {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub fn parse_idx(raw: &[u8], kind: IdxKind) -> Result<IdxData> {
    if raw.len() < 4 {
        return Err(Error::Idx("file shorter than the magic number".into()));
    }
    let magic = u32::from_be_bytes(raw[0..4].try_into().unwrap());
    if magic != kind.magic() {
        return Err(Error::Idx(format!(
            "bad magic number {magic:#010x}, expected {:#010x}",
            kind.magic()
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if raw.len() < header {
        return Err(Error::Idx("truncated header".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(raw[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &raw[header..];
    if payload.len() < expected {
        return Err(Error::Idx(format!(
            "truncated payload: {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Idx(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    Ok(IdxData {
        dims,
        bytes: payload.to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image file as `[n, 1, rows, cols]`, scaling bytes to `[0, 1]`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Array4<f32>> {
    let idx = parse_idx(&read_file(path.as_ref())?, IdxKind::Images)?;
    let (n, h, w) = (idx.dims[0], idx.dims[1], idx.dims[2]);
    let values: Vec<f32> = idx.bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Array4::from_shape_vec((n, 1, h, w), values).expect("payload length checked"))
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(parse_idx(&read_file(path.as_ref())?, IdxKind::Labels)?.bytes)
}

/// Loads a paired image/label file set.
pub fn load_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<ImageSet> {
    let tensor = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != tensor.dim().0 {
        return Err(Error::Idx(format!(
            "image file holds {} items but label file holds {}",
            tensor.dim().0,
            labels.len()
        )));
    }
    ImageSet::new(tensor, Some(labels))
}

fn encode_idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes a single-channel image set as an IDX image file (values quantized to bytes).
pub fn write_idx_images(path: impl AsRef<Path>, images: &ImageSet) -> Result<()> {
    if images.channels() != 1 {
        return Err(Error::Shape("IDX image files hold single-channel images".into()));
    }
    let payload: Vec<u8> = images
        .tensor
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let dims = [images.len(), images.height(), images.width()];
    write_file(path.as_ref(), &encode_idx(IDX_IMAGES_MAGIC, &dims, &payload))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    write_file(
        path.as_ref(),
        &encode_idx(IDX_LABELS_MAGIC, &[labels.len()], labels),
    )
}

/// Standard MNIST file names inside a data directory.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<ImageSet> {
    let dir = dir.as_ref();
    let (img, lab) = match split {
        Split::Train => (MNIST_FILES[0], MNIST_FILES[1]),
        Split::Test => (MNIST_FILES[2], MNIST_FILES[3]),
    };
    load_idx_pair(dir.join(img), dir.join(lab))
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

/// Stride-1 convolution geometry with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl PatchGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::Config("kernel size must be at least 1".into()));
        }
        if pad > kernel / 2 {
            return Err(Error::Config(format!(
                "padding {pad} exceeds floor(kernel/2) for kernel {kernel}"
            )));
        }
        if kernel > height + 2 * pad || kernel > width + 2 * pad {
            return Err(Error::Shape(format!(
                "kernel {kernel} larger than padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        Ok(PatchGeometry {
            channels,
            height,
            width,
            kernel,
            pad,
        })
    }

    pub fn for_images(x: &ImageSet, kernel: usize, pad: usize) -> Result<Self> {
        Self::new(x.channels(), x.height(), x.width(), kernel, pad)
    }

    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    pub fn locations(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Length of a flattened patch, `m * p * p`.
    pub fn dim(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Copies the patch whose top-left corner (in padded coordinates) is `(oy, ox)`.
    pub fn patch_into(&self, img: ArrayView3<'_, f32>, oy: usize, ox: usize, out: &mut [f32]) {
        let p = self.kernel;
        let mut k = 0;
        for c in 0..self.channels {
            for dy in 0..p {
                let iy = (oy + dy) as isize - self.pad as isize;
                for dx in 0..p {
                    let ix = (ox + dx) as isize - self.pad as isize;
                    out[k] = if iy >= 0
                        && ix >= 0
                        && (iy as usize) < self.height
                        && (ix as usize) < self.width
                    {
                        img[[c, iy as usize, ix as usize]]
                    } else {
                        0.0
                    };
                    k += 1;
                }
            }
        }
    }

    /// Column matrix `[dim, n * locations]` for a chunk of images; column
    /// `i * locations + oy * out_width + ox` holds image `i`'s patch at `(oy, ox)`.
    pub fn im2col(&self, images: ArrayView4<'_, f32>) -> Array2<f32> {
        let n = images.dim().0;
        let (oh, ow, p) = (self.out_height(), self.out_width(), self.kernel);
        let locs = oh * ow;
        let mut cols = Array2::<f32>::zeros((self.dim(), n * locs));
        let pad = self.pad as isize;
        for c in 0..self.channels {
            for dy in 0..p {
                for dx in 0..p {
                    let row_idx = (c * p + dy) * p + dx;
                    let mut row = cols.row_mut(row_idx);
                    let row = row.as_slice_mut().expect("standard layout");
                    // Output columns whose input column falls inside the image.
                    let ox_lo = (pad - dx as isize).max(0) as usize;
                    let ox_hi = ((self.width as isize + pad - dx as isize).min(ow as isize)).max(0)
                        as usize;
                    for i in 0..n {
                        let img = images.index_axis(Axis(0), i);
                        let chan = img.index_axis(Axis(0), c);
                        for oy in 0..oh {
                            let iy = oy as isize + dy as isize - pad;
                            if iy < 0 || iy as usize >= self.height || ox_lo >= ox_hi {
                                continue;
                            }
                            let src = chan.row(iy as usize);
                            let base = i * locs + oy * ow;
                            for ox in ox_lo..ox_hi {
                                let ix = (ox as isize + dx as isize - pad) as usize;
                                row[base + ox] = src[ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }
}

/// Flattened patches, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    rows: Array2<f32>,
    channels: usize,
    kernel: usize,
}

impl PatchMatrix {
    pub fn new(rows: Array2<f32>, channels: usize, kernel: usize) -> Result<Self> {
        if rows.ncols() != channels * kernel * kernel {
            return Err(Error::Shape(format!(
                "patch rows have length {}, expected {channels}*{kernel}^2",
                rows.ncols()
            )));
        }
        Ok(PatchMatrix {
            rows,
            channels,
            kernel,
        })
    }

    /// Bare vectors with no spatial meaning (kernel recorded as 1).
    pub fn from_vectors(rows: Array2<f32>) -> Self {
        let channels = rows.ncols();
        PatchMatrix {
            rows,
            channels,
            kernel: 1,
        }
    }

    pub fn rows(&self) -> ArrayView2<'_, f32> {
        self.rows.view()
    }

    pub fn into_rows(self) -> Array2<f32> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn select(&self, indices: &[usize]) -> PatchMatrix {
        PatchMatrix {
            rows: self.rows.select(Axis(0), indices),
            channels: self.channels,
            kernel: self.kernel,
        }
    }
}

/// Which output locations to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Locations {
    All,
    /// `count` locations per image, drawn uniformly from a seeded stream.
    Sample { count: usize, seed: u64 },
}

pub fn extract_patches(
    x: &ImageSet,
    kernel: usize,
    pad: usize,
    locations: Locations,
) -> Result<PatchMatrix> {
    extract_patches_view(x.pixels(), kernel, pad, locations)
}

pub fn extract_patches_view(
    x: ArrayView4<'_, f32>,
    kernel: usize,
    pad: usize,
    locations: Locations,
) -> Result<PatchMatrix> {
    let (n, m, h, w) = x.dim();
    let geom = PatchGeometry::new(m, h, w, kernel, pad)?;
    let locs = geom.locations();
    let ow = geom.out_width();
    let picks: Vec<(usize, usize)> = match locations {
        Locations::All => (0..n)
            .flat_map(|i| (0..locs).map(move |l| (i, l)))
            .collect(),
        Locations::Sample { count, seed } => {
            if count == 0 {
                return Err(Error::Config("sample count must be at least 1".into()));
            }
            let mut rng = seed::rng(seed, &[seed::PATCHES]);
            let mut picks = Vec::with_capacity(n * count);
            for i in 0..n {
                if count <= locs {
                    for l in index::sample(&mut rng, locs, count).into_iter() {
                        picks.push((i, l));
                    }
                } else {
                    for _ in 0..count {
                        picks.push((i, rng.random_range(0..locs)));
                    }
                }
            }
            picks
        }
    };
    let mut rows = Array2::<f32>::zeros((picks.len(), geom.dim()));
    for (row, &(i, l)) in rows.outer_iter_mut().zip(&picks) {
        let mut row = row;
        geom.patch_into(
            x.index_axis(Axis(0), i),
            l / ow,
            l % ow,
            row.as_slice_mut().expect("standard layout"),
        );
    }
    PatchMatrix::new(rows, m, kernel)
}

/// Euclidean norm of the flattened patch at every output location, `[n, H', W']`.
pub fn patch_norm_map(x: &ImageSet, kernel: usize, pad: usize) -> Result<Array3<f32>> {
    patch_norm_map_view(x.pixels(), kernel, pad)
}

pub fn patch_norm_map_view(x: ArrayView4<'_, f32>, kernel: usize, pad: usize) -> Result<Array3<f32>> {
    let (n, m, h, w) = x.dim();
    let geom = PatchGeometry::new(m, h, w, kernel, pad)?;
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Array3::<f32>::zeros((n, oh, ow));
    let mut sq = vec![0f64; ph * pw];
    let mut rows = vec![0f64; ph * ow];
    for i in 0..n {
        sq.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..m {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[i, c, y, xx]] as f64;
                    sq[(y + pad) * pw + xx + pad] += v * v;
                }
            }
        }
        // Window sums are formed directly (no running differences), so an
        // all-zero window sums to exactly zero.
        for y in 0..ph {
            for ox in 0..ow {
                rows[y * ow + ox] = sq[y * pw + ox..y * pw + ox + kernel].iter().sum();
            }
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let s: f64 = (0..kernel).map(|dy| rows[(oy + dy) * ow + ox]).sum();
                out[[i, oy, ox]] = s.sqrt() as f32;
            }
        }
    }
    Ok(out)
}
