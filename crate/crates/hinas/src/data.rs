//! Synthetic datasets, corruption models, the W/A/V split, the 64×64 patch
//! protocol with flip/rotation augmentation, tiled inference, and PNG I/O.
//!
//! Everything here is deterministic given its explicit seed: generating a
//! dataset twice, splitting twice, or re-sampling a patch with the same seed
//! reproduces identical bytes. Degraded instances are materialized once when
//! a dataset is built, so evaluation targets stay fixed across a run.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, HinasError, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::bicubic_resize;
use crate::tensor::{Shape, Tape, Tensor};

/// A planar CHW image buffer, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<F> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Image<F> {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * h * w, "image buffer does not match {c}x{h}x{w}");
        Image { c, h, w, data }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Image { c, h, w, data: vec![F::zero(); c * h * w] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> F {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// Views the image as a batch-of-one constant on the given tape.
    pub fn to_tensor(&self, tape: &mut Tape<F>) -> Tensor<F> {
        tape.constant(self.data.clone(), Shape::new(1, self.c, self.h, self.w))
    }

    /// Copies a batch-of-one tensor back out of the graph.
    pub fn from_tensor(t: &Tensor<F>) -> Self {
        let s = t.shape();
        assert_eq!(s.n, 1, "from_tensor expects a single-item batch");
        Image::new(s.c, s.h, s.w, t.data().to_vec())
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.h && x0 + w <= self.w, "crop out of bounds");
        let mut data = Vec::with_capacity(self.c * h * w);
        for c in 0..self.c {
            for y in 0..h {
                let row = (c * self.h + y0 + y) * self.w + x0;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        Image::new(self.c, h, w, data)
    }

    /// Rotates a quarter turn clockwise (the output is `w × h`).
    pub fn rot90(&self) -> Self {
        let mut out = Image::zeros(self.c, self.w, self.h);
        for c in 0..self.c {
            for y in 0..self.w {
                for x in 0..self.h {
                    out.data[(c * self.w + y) * self.h + x] = self.at(c, self.h - 1 - x, y);
                }
            }
        }
        out
    }

    /// Mirrors left–right.
    pub fn flip_h(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.data[(c * self.h + y) * self.w + x] = self.at(c, y, self.w - 1 - x);
                }
            }
        }
        out
    }

    /// Mirrors top–bottom.
    pub fn flip_v(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.c {
            for y in 0..self.h {
                let src = (c * self.h + self.h - 1 - y) * self.w;
                let dst = (c * self.h + y) * self.w;
                out.data[dst..dst + self.w].copy_from_slice(&self.data[src..src + self.w]);
            }
        }
        out
    }

    pub fn variance(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| Scalar::to_f64(v)).sum::<f64>() / n;
        self.data.iter().map(|&v| (Scalar::to_f64(v) - mean).powi(2)).sum::<f64>() / n
    }
}

/// A clean/degraded pair sharing an id. For super-resolution the degraded
/// member is exactly `scale` times smaller on each axis.
#[derive(Clone, Debug)]
pub struct ImagePair<F> {
    pub clean: Image<F>,
    pub degraded: Image<F>,
    pub id: String,
}

impl<F: Scalar> ImagePair<F> {
    pub fn new(clean: Image<F>, degraded: Image<F>, id: String) -> Result<Self, DataError> {
        if clean.c != degraded.c {
            return Err(DataError::BadImage {
                path: PathBuf::from(&id),
                detail: format!("{} vs {} channels", clean.c, degraded.c),
            });
        }
        if degraded.h == 0
            || clean.h % degraded.h != 0
            || clean.h / degraded.h * degraded.w != clean.w
        {
            return Err(DataError::BadImage {
                path: PathBuf::from(&id),
                detail: format!(
                    "clean {}x{} is not an integer multiple of degraded {}x{}",
                    clean.h, clean.w, degraded.h, degraded.w
                ),
            });
        }
        Ok(ImagePair { clean, degraded, id })
    }

    /// Spatial ratio between the members: 1 for denoising pairs.
    pub fn scale(&self) -> usize {
        self.clean.h / self.degraded.h
    }
}

/// How the id list is partitioned into kernel-training (W), architecture
/// (A), and validation (V) subsets.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub frac_val: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { frac_val: 0.02, seed: 0 }
    }
}

/// Procedural image families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Textures,
    Gradients,
    Mixed,
}

fn texture_image<F: Scalar>(size: usize, rng: &mut ChaCha8Rng) -> Image<F> {
    // Band-limited noise from a bilinearly upsampled coarse grid, plus an
    // oriented sinusoidal stripe field.
    let coarse = size / 8 + 2;
    let grid: Vec<f64> = (0..coarse * coarse).map(|_| rng.gen_range(0.0..1.0)).collect();
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.gen_range(2.0..8.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let stripe_w: f64 = rng.gen_range(0.3..0.7);
    let mut lum = vec![0.0f64; size * size];
    let step = (coarse - 1) as f64 / (size - 1) as f64;
    for y in 0..size {
        for x in 0..size {
            let gy = y as f64 * step;
            let gx = x as f64 * step;
            let (y0, x0) = (gy as usize, gx as usize);
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let y1 = (y0 + 1).min(coarse - 1);
            let x1 = (x0 + 1).min(coarse - 1);
            let noise = grid[y0 * coarse + x0] * (1.0 - fy) * (1.0 - fx)
                + grid[y0 * coarse + x1] * (1.0 - fy) * fx
                + grid[y1 * coarse + x0] * fy * (1.0 - fx)
                + grid[y1 * coarse + x1] * fy * fx;
            let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / size as f64;
            let stripes = (std::f64::consts::TAU * freq * u + phase).sin();
            lum[y * size + x] = (1.0 - stripe_w) * noise + stripe_w * 0.5 * (stripes + 1.0);
        }
    }
    colorize(size, lum, rng)
}

fn gradient_image<F: Scalar>(size: usize, rng: &mut ChaCha8Rng) -> Image<F> {
    // A smooth oriented ramp with a Gaussian bump somewhere inside it.
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let cy: f64 = rng.gen_range(0.2..0.8) * size as f64;
    let cx: f64 = rng.gen_range(0.2..0.8) * size as f64;
    let radius: f64 = rng.gen_range(0.15..0.4) * size as f64;
    let bump: f64 = rng.gen_range(-0.8..0.8);
    let mut lum = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let ramp = (x as f64 * theta.cos() + y as f64 * theta.sin()) / size as f64;
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            lum[y * size + x] = ramp + bump * (-d2 / (2.0 * radius * radius)).exp();
        }
    }
    colorize(size, lum, rng)
}

/// Normalizes a luminance field into [0.02, 0.98] and tints three channels.
fn colorize<F: Scalar>(size: usize, lum: Vec<f64>, rng: &mut ChaCha8Rng) -> Image<F> {
    let lo = lum.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let tints: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.06..0.06)).collect();
    let mut data = Vec::with_capacity(3 * size * size);
    for tint in tints {
        data.extend(lum.iter().map(|&v| {
            let base = 0.02 + 0.96 * (v - lo) / span;
            F::from_f64((base + tint).clamp(0.0, 1.0))
        }));
    }
    Image::new(3, size, size, data)
}

/// Generates `count` clean procedural images of side `size`.
pub fn synth_dataset<F: Scalar>(
    kind: SynthKind,
    count: usize,
    size: usize,
    seed: u64,
) -> Vec<Image<F>> {
    assert!(size >= 32, "synthetic images need size >= 32, got {size}");
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let sub: u64 = master.gen();
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            match kind {
                SynthKind::Textures => texture_image(size, &mut rng),
                SynthKind::Gradients => gradient_image(size, &mut rng),
                SynthKind::Mixed => {
                    if i % 2 == 0 {
                        texture_image(size, &mut rng)
                    } else {
                        gradient_image(size, &mut rng)
                    }
                }
            }
        })
        .collect()
}

/// Adds white Gaussian noise at `sigma_255` (on the 0–255 scale) and clips
/// back to the unit range.
pub fn add_gaussian_noise<F: Scalar>(
    img: &Image<F>,
    sigma_255: f64,
    seed: u64,
) -> Result<Image<F>, DataError> {
    if sigma_255 < 0.0 {
        return Err(DataError::NegativeSigma(sigma_255));
    }
    if sigma_255 == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma_255 / 255.0).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data
        .iter()
        .map(|&v| F::from_f64((Scalar::to_f64(v) + normal.sample(&mut rng)).clamp(0.0, 1.0)))
        .collect();
    Ok(Image::new(img.c, img.h, img.w, data))
}

/// Downscales by `scale` with the bicubic kernel (the same resampler used
/// inside the networks).
pub fn bicubic_degrade<F: Scalar>(img: &Image<F>, scale: usize) -> Result<Image<F>, DataError> {
    if !(2..=4).contains(&scale) {
        return Err(DataError::BadScale(scale));
    }
    if img.h % scale != 0 || img.w % scale != 0 {
        return Err(DataError::NotDivisible { h: img.h, w: img.w, scale });
    }
    let mut tape = Tape::inference();
    let x = img.to_tensor(&mut tape);
    let small = bicubic_resize(&mut tape, &x, img.h / scale, img.w / scale);
    Ok(Image::from_tensor(&small))
}

/// Partitions ids into (W, A, V): V holds `frac_val` of the ids (at least
/// one), the rest splits evenly with any odd leftover going to W.
pub fn split_wav(
    ids: &[String],
    spec: &SplitSpec,
) -> Result<(Vec<String>, Vec<String>, Vec<String>), DataError> {
    let n = ids.len();
    if n < 3 {
        return Err(DataError::TooFewIds(n));
    }
    let v_count = ((n as f64 * spec.frac_val).floor() as usize).max(1);
    let rest = n - v_count;
    let a_count = rest / 2;
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let val: Vec<String> = shuffled.drain(..v_count).collect();
    let arch: Vec<String> = shuffled.drain(..a_count).collect();
    Ok((shuffled, arch, val))
}

/// Cuts an aligned random patch from both members of a pair; augmentation
/// applies one of the four axis rotations plus independent H/V flips,
/// identically to both members.
pub fn sample_patch<F: Scalar>(
    pair: &ImagePair<F>,
    patch: usize,
    augment: bool,
    seed: u64,
) -> Result<ImagePair<F>, DataError> {
    let s = pair.scale();
    if patch % s != 0 {
        return Err(DataError::PatchNotDivisible { patch, scale: s });
    }
    let lr = patch / s;
    if lr > pair.degraded.h || lr > pair.degraded.w {
        return Err(DataError::PatchTooLarge { patch, h: pair.clean.h, w: pair.clean.w });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ly = rng.gen_range(0..=pair.degraded.h - lr);
    let lx = rng.gen_range(0..=pair.degraded.w - lr);
    let mut degraded = pair.degraded.crop(ly, lx, lr, lr);
    let mut clean = pair.clean.crop(s * ly, s * lx, patch, patch);
    if augment {
        let quarter_turns = rng.gen_range(0..4u32);
        let fh = rng.gen_bool(0.5);
        let fv = rng.gen_bool(0.5);
        for _ in 0..quarter_turns {
            clean = clean.rot90();
            degraded = degraded.rot90();
        }
        if fh {
            clean = clean.flip_h();
            degraded = degraded.flip_h();
        }
        if fv {
            clean = clean.flip_v();
            degraded = degraded.flip_v();
        }
    }
    Ok(ImagePair { clean, degraded, id: pair.id.clone() })
}

/// Reflects an out-of-range coordinate back into `0..n` without repeating
/// the border sample, bouncing as many times as needed.
fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n as isize - 2;
    let m = i.rem_euclid(period);
    if m >= n as isize { (period - m) as usize } else { m as usize }
}

/// Runs `net` over adjacent `tile`×`tile` crops and stitches the outputs.
/// Right/bottom remainders are reflect-padded to a full tile and cropped
/// after the call, so every invocation sees the same input size. The net's
/// spatial scale factor is inferred from its first output.
pub fn tiled_inference<F: Scalar, E>(
    img: &Image<F>,
    tile: usize,
    mut net: impl FnMut(&Image<F>) -> Result<Image<F>, E>,
) -> Result<Image<F>, E> {
    assert!(tile > 0, "tile size must be positive");
    let tiles_y = img.h.div_ceil(tile);
    let tiles_x = img.w.div_ceil(tile);
    let mut outputs: Vec<(usize, usize, Image<F>)> = Vec::with_capacity(tiles_y * tiles_x);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut data = Vec::with_capacity(img.c * tile * tile);
            for c in 0..img.c {
                for y in 0..tile {
                    let sy = mirror_index((ty * tile + y) as isize, img.h);
                    for x in 0..tile {
                        let sx = mirror_index((tx * tile + x) as isize, img.w);
                        data.push(img.at(c, sy, sx));
                    }
                }
            }
            let out = net(&Image::new(img.c, tile, tile, data))?;
            assert_eq!(out.h % tile, 0, "net output is not an integer scale of its input");
            assert_eq!(out.w, out.h / tile * tile, "net output is not square-scaled");
            outputs.push((ty, tx, out));
        }
    }
    let scale = outputs[0].2.h / tile;
    let c_out = outputs[0].2.c;
    let mut result = Image::zeros(c_out, scale * img.h, scale * img.w);
    for (ty, tx, out) in outputs {
        assert_eq!((out.c, out.h), (c_out, scale * tile), "inconsistent tile outputs");
        let valid_h = scale * (img.h - ty * tile).min(tile);
        let valid_w = scale * (img.w - tx * tile).min(tile);
        let (oy, ox) = (scale * ty * tile, scale * tx * tile);
        for c in 0..c_out {
            for y in 0..valid_h {
                let src = (c * out.h + y) * out.w;
                let dst = (c * result.h + oy + y) * result.w + ox;
                result.data[dst..dst + valid_w].copy_from_slice(&out.data[src..src + valid_w]);
            }
        }
    }
    Ok(result)
}

/// Writes an image as 8-bit RGB PNG, rounding and clamping each channel.
pub fn save_png<F: Scalar>(img: &Image<F>, path: &Path) -> Result<()> {
    if img.c != 3 {
        return Err(DataError::BadImage {
            path: path.to_path_buf(),
            detail: format!("PNG export needs 3 channels, image has {}", img.c),
        }
        .into());
    }
    let bytes = quantize_rgb(img);
    let buffer = image::RgbImage::from_raw(img.w as u32, img.h as u32, bytes)
        .expect("buffer sized to image");
    buffer.save(path).map_err(|e| {
        HinasError::from(DataError::BadImage { path: path.to_path_buf(), detail: e.to_string() })
    })
}

/// Interleaved RGB bytes as they would be written to disk.
pub fn quantize_rgb<F: Scalar>(img: &Image<F>) -> Vec<u8> {
    let plane = img.h * img.w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = Scalar::to_f64(img.data[c * plane + i]);
            bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    bytes
}

/// Loads an 8-bit RGB PNG into a unit-range image.
pub fn load_png<F: Scalar>(path: &Path) -> Result<Image<F>> {
    let decoded = image::open(path).map_err(|e| {
        HinasError::from(DataError::BadImage { path: path.to_path_buf(), detail: e.to_string() })
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::zeros(3, h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.data[(c * h + y as usize) * w + x as usize] = F::from_f64(px.0[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

/// One dataset entry on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub clean_path: String,
    pub degraded_path: String,
}

/// Index of a materialized dataset: task, corruption level, and file list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u32>,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn validate(&self) -> Result<(), DataError> {
        match self.task.as_str() {
            "denoise" => {}
            "sr" => {
                let s = self.scale.ok_or_else(|| {
                    DataError::BadManifest("sr manifest is missing its scale".into())
                })?;
                if !(2..=4).contains(&s) {
                    return Err(DataError::BadScale(s as usize));
                }
            }
            other => {
                return Err(DataError::BadManifest(format!(
                    "unknown task {other:?} (expected \"denoise\" or \"sr\")"
                )))
            }
        }
        if self.items.is_empty() {
            return Err(DataError::BadManifest("empty item list".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(HinasError::json(path))?;
        std::fs::write(path, text + "\n").map_err(HinasError::io(path))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(HinasError::io(path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(HinasError::json(path))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Loads every referenced pair, resolving paths relative to `root`.
    pub fn load_pairs<F: Scalar>(&self, root: &Path) -> Result<Vec<ImagePair<F>>> {
        self.items
            .iter()
            .map(|item| {
                let clean = load_png(&root.join(&item.clean_path))?;
                let degraded = load_png(&root.join(&item.degraded_path))?;
                Ok(ImagePair::new(clean, degraded, item.id.clone())?)
            })
            .collect()
    }
}
