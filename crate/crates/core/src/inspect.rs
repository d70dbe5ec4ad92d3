//! Grayscale PNG dumps of kernels, the whitening filter and C-maps.
//!
//! Every image is min-max scaled to 0..255 on its own; the scale used is
//! listed in a `scaling.txt` sidecar next to the images.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::network::{Tap, TrainedModel};
use crate::zca::dc_fraction;

/// One written image and the value range mapped to 0..255.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub min: f32,
    pub max: f32,
}

fn scale_to_u8(img: ArrayView2<'_, f32>) -> (Vec<u8>, f32, f32) {
    let min = img.iter().copied().fold(f32::INFINITY, f32::min);
    let max = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = max - min;
    let px = img
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    (px, min, max)
}

pub fn write_gray_png(path: &Path, img: ArrayView2<'_, f32>) -> Result<ImageEntry> {
    let (h, w) = img.dim();
    let (px, min, max) = scale_to_u8(img.as_standard_layout().view());
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(&px).map_err(io)?;
    writer.finish().map_err(io)?;
    Ok(ImageEntry {
        path: path.to_path_buf(),
        min,
        max,
    })
}

/// Tiles `[count, h, w]` tiles into a grid with `cols` columns and 1-pixel
/// gutters filled with the tiles' minimum.
pub fn tile(tiles: ArrayView3<'_, f32>, cols: usize) -> Array2<f32> {
    let (n, h, w) = tiles.dim();
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let fill = tiles.iter().copied().fold(f32::INFINITY, f32::min);
    let fill = if fill.is_finite() { fill } else { 0.0 };
    let mut out = Array2::from_elem((rows * (h + 1) - 1, cols * (w + 1) - 1), fill);
    for t in 0..n {
        let (r, c) = (t / cols, t % cols);
        out.slice_mut(s![r * (h + 1)..r * (h + 1) + h, c * (w + 1)..c * (w + 1) + w])
            .assign(&tiles.slice(s![t, .., ..]));
    }
    out
}

pub fn write_sidecar(dir: &Path, entries: &[ImageEntry], notes: &[String]) -> Result<PathBuf> {
    let mut text = String::from("# image min max (each image min-max scaled to 0..255)\n");
    for e in entries {
        let name = e.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(text, "{name} {:.6e} {:.6e}", e.min, e.max);
    }
    for n in notes {
        let _ = writeln!(text, "# {n}");
    }
    let path = dir.join("scaling.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// One image per S-row of a layer (channels side by side), plus a grid with
/// one row per subspace.
pub fn dump_kernels(model: &TrainedModel, layer: usize, dir: &Path) -> Result<Vec<ImageEntry>> {
    let bank = model
        .banks
        .get(layer.wrapping_sub(1))
        .ok_or_else(|| Error::Config(format!("layer {layer} not in a {}-layer model", model.depth())))?;
    let (k, r, _) = bank.basis().dim();
    let (m, p) = (bank.channels(), bank.kernel());
    let mut entries = Vec::new();
    let mut all = ndarray::Array3::<f32>::zeros((k * r, p, m * p));
    for j in 0..k {
        for a in 0..r {
            let row = bank.basis().slice(s![j, a, ..]);
            let mut img = Array2::<f32>::zeros((p, m * p));
            for c in 0..m {
                for y in 0..p {
                    for x in 0..p {
                        img[[y, c * p + x]] = row[c * p * p + y * p + x] as f32;
                    }
                }
            }
            let path = dir.join(format!("layer{layer}_s{j:02}_r{a}.png"));
            entries.push(write_gray_png(&path, img.view())?);
            all.slice_mut(s![j * r + a, .., ..]).assign(&img);
        }
    }
    let grid = tile(all.view(), r);
    entries.push(write_gray_png(&dir.join(format!("layer{layer}_grid.png")), grid.view())?);
    Ok(entries)
}

/// The whitening kernel as-is and with its center zeroed (the center
/// otherwise dominates the scale). Returns the images and the DC fraction.
pub fn dump_zca(model: &TrainedModel, dir: &Path) -> Result<(Vec<ImageEntry>, f64)> {
    let f = model
        .zca_filter
        .as_ref()
        .ok_or_else(|| Error::Config("model has no ZCA filter".into()))?;
    let raw = write_gray_png(&dir.join("zca_kernel.png"), f.kernel.view())?;
    let mut no_center = f.kernel.clone();
    let c = f.kernel_size() / 2;
    no_center[[c, c]] = 0.0;
    let display = write_gray_png(&dir.join("zca_kernel_surround.png"), no_center.view())?;
    Ok((vec![raw, display], dc_fraction(f)?))
}

/// C-map grids for each layer of each given image, `[n, 1, h, w]`.
pub fn dump_maps(model: &TrainedModel, images: ndarray::ArrayView4<'_, f32>, names: &[String], dir: &Path) -> Result<Vec<ImageEntry>> {
    let mut entries = Vec::new();
    for l in 1..=model.depth() {
        let maps = model.maps(images, Tap::Layer(l))?;
        let k = maps.dim().1;
        let cols = (k as f64).sqrt().ceil() as usize;
        for (i, name) in names.iter().enumerate().take(maps.dim().0) {
            let grid = tile(maps.slice(s![i, .., .., ..]), cols);
            entries.push(write_gray_png(&dir.join(format!("maps_{name}_layer{l}.png")), grid.view())?);
        }
    }
    Ok(entries)
}
