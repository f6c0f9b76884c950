//! Synthetic multispectral scenes with a derived SAR channel pair, artificial
//! cloud masks, and dataset assembly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{MSI_BANDS, SAR_BANDS};
use crate::tensor::Tensor;

pub const SCENE_FRAMES: usize = 6;
pub const DEFAULT_CLASSES: usize = 5;
pub const TEXTURE_SIGMA: f64 = 0.02;
pub const SAR_NOISE_LEVEL: f64 = 0.05;
pub const MAX_STEP_CHANGE: f64 = 0.3;
pub const DEFAULT_CLOUD_SIZE: f64 = 0.3;
pub const MASK_FRACTION_BAND: (f64, f64) = (0.02, 0.70);
pub const MASK_RETRIES: usize = 20;
pub const TRAIN_FRACTION: f64 = 0.8;

/// Indices of the red-edge and near-infrared bands (B7, B8, B8A) that carry
/// the monotone seasonal trend.
pub const NIR_BANDS: [usize; 3] = [6, 7, 8];

/// Band weights of the two radar channels (VV-like, VH-like).
pub const SAR_MIXING: [[f64; MSI_BANDS]; SAR_BANDS] = [
    [0.2, -0.3, -0.2, -0.6, 0.1, 0.4, 0.7, 0.9, 0.8, -0.4, -0.5],
    [-0.1, 0.5, 0.4, 0.2, -0.3, -0.2, 0.3, 0.2, 0.1, 0.9, 0.8],
];
pub const SAR_GAIN: f64 = 4.0;
pub const SAR_OFFSET: [f64; SAR_BANDS] = [-0.1, -3.8];

/// Derives an independent seed from `(master, stream, index)` with a splitmix64 finalizer.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SCENE: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_SAR_NOISE: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[T, 11, H, W]` in `[0, 1]`.
    pub msi: Tensor<f32>,
    /// `[T, 2, H, W]` in `[0, 1]`.
    pub sar: Tensor<f32>,
    /// Row-major `H × W` class labels.
    pub class_map: Vec<u16>,
}

fn check_extents(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 5 != 0 || width % 5 != 0 {
        return Err(Error::config(format!("scene extents must be positive multiples of 5, got {height}×{width}")));
    }
    Ok(())
}

/// Per-class `[date][band]` reflectance trajectories.
fn class_trajectories(rng: &mut ChaCha8Rng, n_classes: usize, frames: usize) -> Vec<Vec<[f64; MSI_BANDS]>> {
    (0..n_classes)
        .map(|_| {
            let mut level = [0.0f64; MSI_BANDS];
            for v in level.iter_mut() {
                *v = rng.random_range(0.08..0.6);
            }
            let trend = rng.random_range(-0.06..0.06);
            let mut out = Vec::with_capacity(frames);
            for t in 0..frames {
                if t > 0 {
                    for (b, v) in level.iter_mut().enumerate() {
                        let mut step: f64 = rng.random_range(-0.05..0.05);
                        if NIR_BANDS.contains(&b) {
                            step += trend;
                        }
                        *v = (*v + step).clamp(0.02, 0.95);
                    }
                }
                out.push(level);
            }
            out
        })
        .collect()
}

/// Voronoi labels from `3·n_classes` random sites; the first `n_classes`
/// sites take each class once so every class is present.
fn voronoi_labels(rng: &mut ChaCha8Rng, n_classes: usize, height: usize, width: usize) -> Vec<u16> {
    let n_sites = 3 * n_classes;
    let sites: Vec<(f64, f64, u16)> = (0..n_sites)
        .map(|i| {
            let y = rng.random_range(0.0..height as f64);
            let x = rng.random_range(0.0..width as f64);
            let class = if i < n_classes { i } else { rng.random_range(0..n_classes) };
            (y, x, class as u16)
        })
        .collect();
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u16);
            for &(y, x, class) in &sites {
                let d = (y - py).powi(2) + (x - px).powi(2);
                if d < best.0 {
                    best = (d, class);
                }
            }
            labels.push(best.1);
        }
    }
    labels
}

/// Standard-normal noise used for the radar channels of the scene drawn from `seed`.
pub fn sar_noise(seed: u64, frames: usize, height: usize, width: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SAR_NOISE, 0));
    Tensor::from_fn([frames, SAR_BANDS, height, width], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z as f32
    })
}

/// `clamp(σ(gain·(M·x) + offset) · (1 + 0.05·noise), 0, 1)` per pixel and date.
pub fn sar_from_msi(msi: &Tensor<f32>, noise: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = msi.shape();
    if s.len() != 4 || s[1] != MSI_BANDS {
        return Err(Error::shape(format!("expected msi [T, {MSI_BANDS}, H, W], got {s:?}")));
    }
    let (frames, plane) = (s[0], s[2] * s[3]);
    if noise.shape() != [frames, SAR_BANDS, s[2], s[3]] {
        return Err(Error::shape(format!("sar noise {:?} does not match msi {s:?}", noise.shape())));
    }
    let (x, n) = (msi.data(), noise.data());
    let mut out = vec![0.0f32; frames * SAR_BANDS * plane];
    for t in 0..frames {
        for (ch, row) in SAR_MIXING.iter().enumerate() {
            for px in 0..plane {
                let mixed: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(b, w)| w * x[(t * MSI_BANDS + b) * plane + px] as f64)
                    .sum();
                let squashed = 1.0 / (1.0 + (-(SAR_GAIN * mixed + SAR_OFFSET[ch])).exp());
                let i = (t * SAR_BANDS + ch) * plane + px;
                out[i] = (squashed * (1.0 + SAR_NOISE_LEVEL * n[i] as f64)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new([frames, SAR_BANDS, s[2], s[3]], out)
}

/// Six-date scene; see [`generate_scene_frames`].
pub fn generate_scene(seed: u64, height: usize, width: usize, n_classes: usize) -> Result<Scene> {
    generate_scene_frames(seed, SCENE_FRAMES, height, width, n_classes)
}

/// Voronoi field of classes, each following its own smooth spectral trajectory,
/// plus a static per-band texture and the derived radar pair.
pub fn generate_scene_frames(seed: u64, frames: usize, height: usize, width: usize, n_classes: usize) -> Result<Scene> {
    check_extents(height, width)?;
    if n_classes < 2 {
        return Err(Error::config(format!("n_classes must be at least 2, got {n_classes}")));
    }
    if frames == 0 {
        return Err(Error::config("scenes need at least one date"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SCENE, 0));
    let class_map = voronoi_labels(&mut rng, n_classes, height, width);
    let traj = class_trajectories(&mut rng, n_classes, frames);
    let texture_dist = Normal::new(0.0, TEXTURE_SIGMA).expect("valid sigma");
    let plane = height * width;
    let texture: Vec<f64> = (0..MSI_BANDS * plane).map(|_| texture_dist.sample(&mut rng)).collect();

    let msi = Tensor::from_fn([frames, MSI_BANDS, height, width], |i| {
        let px = i % plane;
        let b = (i / plane) % MSI_BANDS;
        let t = i / (plane * MSI_BANDS);
        let v = traj[class_map[px] as usize][t][b] + texture[b * plane + px];
        v.clamp(0.0, 1.0) as f32
    });
    let sar = sar_from_msi(&msi, &sar_noise(seed, frames, height, width))?;
    Ok(Scene { msi, sar, class_map })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudMask {
    /// `[T, H, W]`, 1 = occluded.
    pub mask: Tensor<f32>,
    pub cloud_count: usize,
    pub cloud_size: f64,
    pub seed: u64,
}

impl CloudMask {
    pub fn fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.numel() as f64
    }

    pub fn frame_fractions(&self) -> Vec<f64> {
        let s = self.mask.shape();
        self.mask
            .data()
            .chunks_exact(s[1] * s[2])
            .map(|f| f.iter().map(|&v| v as f64).sum::<f64>() / f.len() as f64)
            .collect()
    }
}

/// Clouds assigned to `frame`: an even share plus one of the remainder, round-robin.
pub fn clouds_in_frame(n_clouds: usize, frames: usize, frame: usize) -> usize {
    n_clouds / frames + usize::from(frame < n_clouds % frames)
}

/// Union of the half-peak regions of `count` random anisotropic Gaussian bumps.
fn cloud_frame(rng: &mut ChaCha8Rng, count: usize, height: usize, width: usize, cloud_size: f64) -> Vec<f32> {
    let mut field = vec![0.0f64; height * width];
    let base = cloud_size * height as f64 / 4.0;
    for _ in 0..count {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let sy = rng.random_range(0.5..1.5) * base;
        let sx = rng.random_range(0.5..1.5) * base;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        for r in 0..height {
            for c in 0..width {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                let bump = (-0.5 * (u * u / (sx * sx) + v * v / (sy * sy))).exp();
                let cell = &mut field[r * width + c];
                if bump > *cell {
                    *cell = bump;
                }
            }
        }
    }
    field.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
}

/// Binary `[T, H, W]` occlusion mask. Frames holding at least one cloud are
/// redrawn until their covered fraction lies in [`MASK_FRACTION_BAND`].
pub fn generate_cloud_mask(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    n_clouds: usize,
    cloud_size: f64,
) -> Result<CloudMask> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::config(format!("mask extents must be positive, got {frames}×{height}×{width}")));
    }
    if !(cloud_size > 0.0 && cloud_size <= 1.0) {
        return Err(Error::config(format!("cloud_size must lie in (0, 1], got {cloud_size}")));
    }
    let plane = height * width;
    let mut data = Vec::with_capacity(frames * plane);
    for f in 0..frames {
        let count = clouds_in_frame(n_clouds, frames, f);
        if count == 0 {
            data.extend(std::iter::repeat_n(0.0f32, plane));
            continue;
        }
        let mut accepted = None;
        for attempt in 0..=MASK_RETRIES {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, f as u64, attempt as u64));
            let frame = cloud_frame(&mut rng, count, height, width, cloud_size);
            let frac = frame.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            if (MASK_FRACTION_BAND.0..=MASK_FRACTION_BAND.1).contains(&frac) {
                accepted = Some(frame);
                break;
            }
        }
        let frame = accepted.ok_or_else(|| {
            Error::Data(format!(
                "cloud mask frame {f}: coverage stayed outside {MASK_FRACTION_BAND:?} after {MASK_RETRIES} retries \
                 ({count} clouds, size {cloud_size}, {height}×{width})"
            ))
        })?;
        data.extend(frame);
    }
    Ok(CloudMask { mask: Tensor::new([frames, height, width], data)?, cloud_count: n_clouds, cloud_size, seed })
}

/// `x · (1 − m)` with the `[T, H, W]` mask broadcast over channels of `[T, C, H, W]`.
pub fn apply_cloud_mask(msi: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (s, m) = (msi.shape(), mask.shape());
    if s.len() != 4 || m.len() != 3 || s[0] != m[0] || s[2] != m[1] || s[3] != m[2] {
        return Err(Error::shape(format!("mask {m:?} does not broadcast over raster {s:?}")));
    }
    let plane = s[2] * s[3];
    let channels = s[1];
    Ok(Tensor::from_fn(s.to_vec(), |i| {
        let t = i / (channels * plane);
        msi.data()[i] * (1.0 - mask.data()[t * plane + i % plane])
    }))
}

/// Elementwise OR of two binary masks.
pub fn combine_masks(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("masks {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(Tensor::from_fn(a.shape().to_vec(), |i| if a.data()[i] > 0.0 || b.data()[i] > 0.0 { 1.0 } else { 0.0 }))
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[T, 11, H, W]`, zero under clouds.
    pub msi_clouded: Tensor<f32>,
    /// `[T, 2, H, W]`; absent for optical-only datasets.
    pub sar: Option<Tensor<f32>>,
    /// `[T, H, W]`.
    pub mask: Tensor<f32>,
    /// `[T, 11, H, W]` cloud-free reference.
    pub target: Tensor<f32>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.target.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.target.shape()[3]
    }

    /// Replaces the mask and recomputes the clouded input from the target.
    pub fn with_mask(&self, mask: Tensor<f32>) -> Result<Sample> {
        Ok(Sample { msi_clouded: apply_cloud_mask(&self.target, &mask)?, sar: self.sar.clone(), mask, target: self.target.clone() })
    }
}

/// Samples in index order; the first `n_train` are the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_train: usize,
}

/// Training-split size for `n` samples.
pub fn train_count(n: usize) -> usize {
    (n as f64 * TRAIN_FRACTION).floor() as usize
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        let n_train = train_count(samples.len());
        Dataset { samples, n_train }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.n_train]
    }

    pub fn val(&self) -> &[Sample] {
        &self.samples[self.n_train..]
    }

    pub fn has_sar(&self) -> bool {
        self.samples.first().is_some_and(|s| s.sar.is_some())
    }

    /// Same scenes under freshly drawn masks.
    pub fn remask(&self, seed: u64, n_clouds: usize, cloud_size: f64) -> Result<Dataset> {
        let samples = self
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = derive_seed(seed, STREAM_MASK, i as u64);
                let m = generate_cloud_mask(seed, s.frames(), s.height(), s.width(), n_clouds, cloud_size)?;
                s.with_mask(m.mask)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples, n_train: self.n_train })
    }

    /// Drops the radar channels.
    pub fn without_sar(mut self) -> Dataset {
        self.samples.iter_mut().for_each(|s| s.sar = None);
        self
    }
}

/// Seeds of sample `index`: (scene, mask).
pub fn sample_seeds(seed: u64, index: usize) -> (u64, u64) {
    (derive_seed(seed, STREAM_SCENE, index as u64), derive_seed(seed, STREAM_MASK, index as u64))
}

/// `n_samples` independent clouded scenes split 80/20 by index.
pub fn make_dataset(
    seed: u64,
    n_samples: usize,
    height: usize,
    width: usize,
    n_clouds: usize,
    cloud_size: f64,
) -> Result<Dataset> {
    if n_samples < 5 {
        return Err(Error::config(format!("datasets need at least 5 samples, got {n_samples}")));
    }
    check_extents(height, width)?;
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let (scene_seed, mask_seed) = sample_seeds(seed, i);
            let scene = generate_scene(scene_seed, height, width, DEFAULT_CLASSES)?;
            let mask = generate_cloud_mask(mask_seed, SCENE_FRAMES, height, width, n_clouds, cloud_size)?;
            Ok(Sample {
                msi_clouded: apply_cloud_mask(&scene.msi, &mask.mask)?,
                sar: Some(scene.sar),
                mask: mask.mask,
                target: scene.msi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples))
}
