//! Synthetic nested-ellipsoid volumes, z-score preprocessing and
//! augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One `C×H×W×D` image with its `H×W×D` label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub image: Tensor<f64>,
    pub label: Vec<u8>,
}

impl SegmentationSample {
    pub fn new(image: Tensor<f64>, label: Vec<u8>) -> Result<Self> {
        let s = Self { image, label };
        s.check_layout()?;
        Ok(s)
    }

    fn check_layout(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 4 {
            return Err(Error::Data(format!("image must be C×H×W×D, got {shape:?}")));
        }
        let vox: usize = shape[1..].iter().product();
        if self.label.len() != vox {
            return Err(Error::Data(format!(
                "label has {} voxels, image has {vox}",
                self.label.len()
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    /// Checks the sample invariants: labels below `num_classes`, finite image.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.check_layout()?;
        if let Some(i) = self.label.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::Data(format!(
                "label {} at voxel {i} is not below {num_classes}",
                self.label[i]
            )));
        }
        if let Some(index) = self.image.first_non_finite() {
            return Err(Error::NonFinite {
                context: "sample image".into(),
                index,
            });
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel-centre coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        let q: f64 = (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum();
        q <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub channels: usize,
    pub size: [usize; 3],
    pub num_classes: usize,
    /// Outer (class 1) radius range as a fraction of each axis length.
    pub outer_radius: [f64; 2],
    pub noise_std: f64,
}

impl SynthConfig {
    pub fn new(size: [usize; 3], num_classes: usize) -> Self {
        Self {
            channels: 4,
            size,
            num_classes,
            outer_radius: [0.22, 0.3],
            noise_std: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&n| n == 0 || n % 8 != 0) {
            return Err(Error::Config(format!(
                "synthetic size {:?} must be positive multiples of 8",
                self.size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config(
                "synthetic data needs at least one channel".into(),
            ));
        }
        let [lo, hi] = self.outer_radius;
        if !(0.0 < lo && lo <= hi && hi <= 0.3) {
            return Err(Error::Config(format!(
                "outer_radius {:?} must satisfy 0 < lo <= hi <= 0.3",
                self.outer_radius
            )));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Fraction of each axis covered by the tissue envelope's radius.
const ENVELOPE: f64 = 0.46;
/// Largest tumour-centre displacement from the volume centre, per axis.
const JITTER: f64 = 0.12;
const MAX_ATTEMPTS: usize = 64;
/// Radius ratio between consecutive nested classes.
const SHRINK: [f64; 2] = [0.75, 0.85];

/// Mean intensity of `class` in channel `ch`. Every class differs from its
/// neighbours in every channel, by a channel-dependent amount.
fn class_offset(ch: usize, class: usize) -> f64 {
    if class == 0 {
        return 0.0;
    }
    let gain = 0.6 + 0.3 * ((ch + class) % 3) as f64;
    gain * class as f64
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws nested tumour ellipsoids (outermost first); one per foreground class.
fn draw_shapes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let mid = cfg.size.map(|n| (n as f64 - 1.0) / 2.0);
    let center: [f64; 3] =
        std::array::from_fn(|a| mid[a] + rng.gen_range(-JITTER..=JITTER) * cfg.size[a] as f64);
    let [lo, hi] = cfg.outer_radius;
    let mut radii: [f64; 3] = std::array::from_fn(|a| rng.gen_range(lo..=hi) * cfg.size[a] as f64);
    let mut shapes = vec![Ellipsoid { center, radii }];
    for _ in 2..cfg.num_classes.min(4) {
        let shrink = rng.gen_range(SHRINK[0]..SHRINK[1]);
        radii = radii.map(|r| r * shrink);
        shapes.push(Ellipsoid { center, radii });
    }
    shapes
}

/// One synthetic sample plus the ellipsoids that define its label.
pub fn generate_sample(
    cfg: &SynthConfig,
    seed: u64,
    index: usize,
) -> Result<(SegmentationSample, Vec<Ellipsoid>)> {
    cfg.validate()?;
    let mut rng = sample_rng(seed, index);
    let [h, w, d] = cfg.size;
    let vox = h * w * d;
    let fg_classes = cfg.num_classes.min(4) - 1;
    for _ in 0..MAX_ATTEMPTS {
        let shapes = draw_shapes(cfg, &mut rng);
        let mut label = vec![0u8; vox];
        let mut present = vec![false; fg_classes + 1];
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let class = shapes.iter().take_while(|e| e.contains([i, j, k])).count();
                    label[(i * w + j) * d + k] = class as u8;
                    present[class] = true;
                }
            }
        }
        if !present.iter().all(|&p| p) {
            continue;
        }
        let envelope = Ellipsoid {
            center: cfg.size.map(|n| (n as f64 - 1.0) / 2.0),
            radii: cfg.size.map(|n| ENVELOPE * n as f64),
        };
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = vec![0.0; cfg.channels * vox];
        for ch in 0..cfg.channels {
            let base = 1.0 + 0.2 * ch as f64;
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        let v = (i * w + j) * d + k;
                        if envelope.contains([i, j, k]) {
                            let class = label[v] as usize;
                            data[ch * vox + v] =
                                base + class_offset(ch, class) + noise.sample(&mut rng);
                        }
                    }
                }
            }
        }
        let image = Tensor::new(vec![cfg.channels, h, w, d], data)?;
        return Ok((SegmentationSample::new(image, label)?, shapes));
    }
    Err(Error::Data(format!(
        "could not place every class in a {:?} volume after {MAX_ATTEMPTS} attempts",
        cfg.size
    )))
}

/// `n` raw samples; sample `i` depends only on `(seed, i)`.
pub fn generate_with(
    cfg: &SynthConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<(SegmentationSample, Vec<Ellipsoid>)>> {
    (0..n)
        .into_par_iter()
        .map(|i| generate_sample(cfg, seed, i))
        .collect()
}

/// Generated and z-score normalised samples with four channels.
pub fn gen_synthetic_dataset(
    n: usize,
    size: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<Vec<SegmentationSample>> {
    let cfg = SynthConfig::new(size, num_classes);
    generate_with(&cfg, n, seed)?
        .into_iter()
        .map(|(s, _)| preprocess(s))
        .collect()
}

/// Voxels that are non-zero in any channel.
pub fn foreground_mask(image: &Tensor<f64>) -> Vec<bool> {
    let c = image.shape()[0];
    let vox = image.numel() / c.max(1);
    let data = image.data();
    (0..vox)
        .map(|v| (0..c).any(|ch| data[ch * vox + v] != 0.0))
        .collect()
}

pub const ZSCORE_EPS: f64 = 1e-8;

/// Per-channel standardisation over the masked voxels; voxels outside the
/// mask are left as they are.
pub fn zscore_normalize(image: &Tensor<f64>, mask: &[bool]) -> Result<Tensor<f64>> {
    let c = image.shape()[0];
    let vox = image.numel() / c.max(1);
    if mask.len() != vox {
        return Err(Error::Data(format!(
            "mask has {} voxels, image has {vox}",
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count < 2 {
        return Err(Error::Data(format!(
            "z-score mask selects {count} voxels, need at least 2"
        )));
    }
    let mut out = image.clone();
    for chan in out.data_mut().chunks_mut(vox) {
        let mean = chan
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .sum::<f64>()
            / count as f64;
        let var = chan
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| (v - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt() + ZSCORE_EPS;
        for (v, _) in chan.iter_mut().zip(mask).filter(|(_, &m)| m) {
            *v = (*v - mean) / std;
        }
    }
    Ok(out)
}

/// Z-score normalisation over the non-zero envelope.
pub fn preprocess(sample: SegmentationSample) -> Result<SegmentationSample> {
    let mask = foreground_mask(&sample.image);
    let image = zscore_normalize(&sample.image, &mask)?;
    SegmentationSample::new(image, sample.label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentToggles {
    pub crop: bool,
    pub flip: bool,
    pub intensity_shift: bool,
}

impl AugmentToggles {
    pub const NONE: Self = Self {
        crop: false,
        flip: false,
        intensity_shift: false,
    };
    pub const ALL: Self = Self {
        crop: true,
        flip: true,
        intensity_shift: true,
    };
}

pub const INTENSITY_SHIFT: f64 = 0.1;

/// Copies the `size` window at `origin` out of the sample.
pub fn crop(
    sample: &SegmentationSample,
    origin: [usize; 3],
    size: [usize; 3],
) -> Result<SegmentationSample> {
    let dims = sample.dims();
    if (0..3).any(|a| origin[a] + size[a] > dims[a]) {
        return Err(Error::Data(format!(
            "crop {size:?} at {origin:?} exceeds volume {dims:?}"
        )));
    }
    let c = sample.channels();
    let (vox, out_vox) = (
        dims.iter().product::<usize>(),
        size.iter().product::<usize>(),
    );
    let mut data = Vec::with_capacity(c * out_vox);
    let mut label = Vec::with_capacity(out_vox);
    let src = sample.image.data();
    for ch in 0..c {
        for i in 0..size[0] {
            for j in 0..size[1] {
                let start = ((origin[0] + i) * dims[1] + origin[1] + j) * dims[2] + origin[2];
                data.extend_from_slice(&src[ch * vox + start..][..size[2]]);
                if ch == 0 {
                    label.extend_from_slice(&sample.label[start..][..size[2]]);
                }
            }
        }
    }
    SegmentationSample::new(
        Tensor::new(vec![c, size[0], size[1], size[2]], data)?,
        label,
    )
}

/// Mirrors image and label along spatial axis `axis` (0 = H, 1 = W, 2 = D).
pub fn flip(sample: &SegmentationSample, axis: usize) -> SegmentationSample {
    let [h, w, d] = sample.dims();
    let vox = h * w * d;
    let src = |i: usize, j: usize, k: usize| match axis {
        0 => ((h - 1 - i) * w + j) * d + k,
        1 => (i * w + (w - 1 - j)) * d + k,
        _ => (i * w + j) * d + (d - 1 - k),
    };
    let mut perm = Vec::with_capacity(vox);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                perm.push(src(i, j, k));
            }
        }
    }
    let image = sample.image.data();
    let data = (0..sample.channels())
        .flat_map(|ch| perm.iter().map(move |&p| image[ch * vox + p]))
        .collect();
    SegmentationSample {
        image: Tensor::new(sample.image.shape().to_vec(), data).expect("same shape"),
        label: perm.iter().map(|&p| sample.label[p]).collect(),
    }
}

/// Random crop to `size` (a centred crop when cropping is off), independent
/// mirror flips per axis with probability 1/2, and a uniform per-channel
/// intensity shift. Random draws happen in that order and only for enabled
/// toggles.
pub fn augment(
    sample: &SegmentationSample,
    toggles: AugmentToggles,
    size: [usize; 3],
    rng: &mut impl Rng,
) -> Result<SegmentationSample> {
    let dims = sample.dims();
    if (0..3).any(|a| size[a] > dims[a]) {
        return Err(Error::Data(format!(
            "crop {size:?} is larger than volume {dims:?}"
        )));
    }
    let origin: [usize; 3] = if toggles.crop {
        std::array::from_fn(|a| rng.gen_range(0..=dims[a] - size[a]))
    } else {
        std::array::from_fn(|a| (dims[a] - size[a]) / 2)
    };
    let mut out = if size == dims {
        sample.clone()
    } else {
        crop(sample, origin, size)?
    };
    if toggles.flip {
        for axis in 0..3 {
            if rng.gen_bool(0.5) {
                out = flip(&out, axis);
            }
        }
    }
    if toggles.intensity_shift {
        let vox: usize = size.iter().product();
        for chan in out.image.data_mut().chunks_mut(vox) {
            let shift = rng.gen_range(-INTENSITY_SHIFT..=INTENSITY_SHIFT);
            chan.iter_mut().for_each(|v| *v += shift);
        }
    }
    Ok(out)
}
