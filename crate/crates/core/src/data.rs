//! Synthetic segmentation data: noisy grayscale images of ellipse and
//! polygon blobs, one intensity per class, with exact label masks.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Inclusive range of blobs drawn per foreground class.
    pub blobs_per_class: [usize; 2],
    /// Std of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    /// Random flips and ±15° rotations of training batches.
    pub augment: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            num_classes: 4,
            train_samples: 8,
            val_samples: 4,
            blobs_per_class: [1, 2],
            noise: 0.05,
            seed: 7,
            augment: false,
        }
    }
}

/// Minimum pixel count for a class to count as present.
const MIN_CLASS_PIXELS: usize = 8;
const MAX_ATTEMPTS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`.
    pub image: Tensor<f32>,
    pub mask: SegMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "data: {}x{} image is too small",
                self.height, self.width
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "data.num_classes: {} not in 2..=255",
                self.num_classes
            )));
        }
        let [lo, hi] = self.blobs_per_class;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "data.blobs_per_class: bad range [{lo}, {hi}]"
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "data.noise: {} is not a finite non-negative std",
                self.noise
            )));
        }
        Ok(())
    }

    /// Mean intensity of class `k`.
    pub fn intensity(&self, k: usize) -> f64 {
        if k == 0 {
            0.1
        } else {
            0.3 + 0.7 * (k - 1) as f64 / (self.num_classes - 1).max(1) as f64
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    Polygon {
        cy: f64,
        cx: f64,
        radii: [f64; 6],
        sides: usize,
        phase: f64,
    },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Shape {
        let side = h.min(w) as f64;
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let cx = rng.random_range(0.2..0.8) * w as f64;
        if rng.random_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry: rng.random_range(0.08..0.2) * side,
                rx: rng.random_range(0.08..0.2) * side,
                angle: rng.random_range(0.0..PI),
            }
        } else {
            let sides = rng.random_range(3..=6);
            let mut radii = [0.0; 6];
            radii
                .iter_mut()
                .for_each(|r| *r = rng.random_range(0.1..0.22) * side);
            Shape::Polygon {
                cy,
                cx,
                radii,
                sides,
                phase: rng.random_range(0.0..2.0 * PI),
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon {
                cy,
                cx,
                radii,
                sides,
                phase,
            } => {
                let vert = |i: usize| {
                    let a = phase + 2.0 * PI * i as f64 / sides as f64;
                    (cy + radii[i] * a.sin(), cx + radii[i] * a.cos())
                };
                // intersection of the half-planes bounded by each edge
                (0..sides).all(|i| {
                    let (ay, ax) = vert(i);
                    let (by, bx) = vert((i + 1) % sides);
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                })
            }
        }
    }
}

fn draw_labels(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u8; h * w];
    for k in 1..spec.num_classes {
        let n = rng.random_range(spec.blobs_per_class[0]..=spec.blobs_per_class[1]);
        for _ in 0..n {
            let shape = Shape::random(rng, h, w);
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        labels[y * w + x] = k as u8;
                    }
                }
            }
        }
    }
    labels
}

fn all_present(labels: &[u8], k: usize) -> bool {
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    counts.iter().all(|&c| c >= MIN_CLASS_PIXELS)
}

/// One sample from its own seed.
pub fn gen_sample(spec: &SynthSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = draw_labels(spec, &mut rng);
    for _ in 1..MAX_ATTEMPTS {
        if all_present(&labels, spec.num_classes) {
            break;
        }
        labels = draw_labels(spec, &mut rng);
    }
    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let plane: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let n = if spec.noise > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (spec.intensity(l as usize) + n) as f32
        })
        .collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Ok(Sample {
        image: Tensor::new(vec![3, h, w], data)?,
        mask: SegMask::new(h, w, labels)?,
    })
}

/// Train and validation samples, fully determined by `spec`.
pub fn gen_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let seeds: Vec<u64> = (0..spec.train_samples + spec.val_samples)
        .map(|_| rng.random())
        .collect();
    let mut samples = seeds
        .iter()
        .map(|&s| gen_sample(spec, s))
        .collect::<Result<Vec<_>>>()?;
    let val = samples.split_off(spec.train_samples);
    Ok(Dataset {
        spec: spec.clone(),
        train: samples,
        val,
    })
}

/// Stacks samples into a `[B, 3, H, W]` batch and `[B, H, W]` labels.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::dim("stack", "empty batch"))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut labels = Vec::new();
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::shapes("stack", first.image.shape(), s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask.labels);
    }
    Ok((Tensor::new(shape, data)?, labels))
}

/// Random horizontal/vertical flip and rotation within ±15°, nearest-pixel
/// resampling; uncovered pixels become background.
pub fn augment(sample: &Sample, background: f32, rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = (sample.mask.height, sample.mask.width);
    let flip_x = rng.random_bool(0.5);
    let flip_y = rng.random_bool(0.5);
    let theta = rng.random_range(-15.0f64..=15.0).to_radians();
    let (s, c) = theta.sin_cos();
    let (oy, ox) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let channels = sample.image.shape()[0];
    let src = sample.image.data();
    let mut img = vec![background; channels * h * w];
    let mut lab = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - oy, x as f64 - ox);
            let sy = (c * dy - s * dx + oy).round();
            let sx = (s * dy + c * dx + ox).round();
            if sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            let mut sy = sy as usize;
            let mut sx = sx as usize;
            if flip_y {
                sy = h - 1 - sy;
            }
            if flip_x {
                sx = w - 1 - sx;
            }
            lab[y * w + x] = sample.mask.labels[sy * w + sx];
            for ch in 0..channels {
                img[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Sample {
        image: Tensor::new(vec![channels, h, w], img).expect("augmented image keeps its shape"),
        mask: SegMask::new(h, w, lab).expect("augmented mask keeps its shape"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SynthSpec,
    pub files: Vec<CachedFile>,
}

pub const DATASET_FORMAT: &str = "synthetic-segmentation-v1";
pub const MANIFEST_NAME: &str = "manifest.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn sample_files(split: &str, i: usize) -> (String, String) {
    (
        format!("{split}_{i:04}_image.mstf"),
        format!("{split}_{i:04}_labels.mstf"),
    )
}

/// Writes every sample as tensor dumps plus a manifest of their hashes.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (split, samples) in [("train", &ds.train), ("val", &ds.val)] {
        for (i, s) in samples.iter().enumerate() {
            let (img_name, lab_name) = sample_files(split, i);
            let labels = Tensor::new(
                vec![s.mask.height, s.mask.width],
                s.mask.labels.iter().map(|&l| l as f32).collect(),
            )?;
            for (name, t) in [(img_name, &s.image), (lab_name, &labels)] {
                let path = dir.join(&name);
                write_tensor(t, &path)?;
                files.push(CachedFile {
                    sha256: sha256_hex(&fs::read(&path)?),
                    name,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        spec: ds.spec.clone(),
        files,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(manifest)
}

/// Reads a dataset written by [`save_dataset`], verifying every hash.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "unknown dataset format {:?}",
            manifest.format
        )));
    }
    for f in &manifest.files {
        let got = sha256_hex(&fs::read(dir.join(&f.name))?);
        if got != f.sha256 {
            return Err(Error::Format(format!("{}: hash mismatch", f.name)));
        }
    }
    let spec = manifest.spec;
    let load = |split: &str, n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|i| {
                let (img_name, lab_name) = sample_files(split, i);
                let image: Tensor<f32> = read_tensor(&dir.join(img_name))?;
                let lab: Tensor<f32> = read_tensor(&dir.join(lab_name))?;
                let (h, w) = (lab.shape()[0], lab.shape()[1]);
                let mask = SegMask::new(h, w, lab.data().iter().map(|&v| v as u8).collect())?;
                Ok(Sample { image, mask })
            })
            .collect()
    };
    Ok(Dataset {
        train: load("train", spec.train_samples)?,
        val: load("val", spec.val_samples)?,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec::default();
        assert_eq!(gen_dataset(&spec).unwrap(), gen_dataset(&spec).unwrap());
        let other = SynthSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(
            gen_dataset(&other).unwrap().train,
            gen_dataset(&spec).unwrap().train
        );
    }

    #[test]
    fn classes_present_in_nearly_all_samples() {
        let spec = SynthSpec::default();
        let ok = (0..100u64)
            .filter(|&s| all_present(&gen_sample(&spec, s).unwrap().mask.labels, spec.num_classes))
            .count();
        assert!(ok >= 95, "{ok} of 100 samples contain every class");
    }

    #[test]
    fn noiseless_regions_are_constant() {
        let spec = SynthSpec {
            noise: 0.0,
            ..Default::default()
        };
        let s = gen_sample(&spec, 3).unwrap();
        for (i, &l) in s.mask.labels.iter().enumerate() {
            for ch in 0..3 {
                assert_eq!(
                    s.image.data()[ch * 64 * 64 + i],
                    spec.intensity(l as usize) as f32
                );
            }
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(gen_dataset(&SynthSpec {
            num_classes: 1,
            ..Default::default()
        })
        .is_err());
        assert!(gen_dataset(&SynthSpec {
            height: 2,
            ..Default::default()
        })
        .is_err());
        assert!(gen_dataset(&SynthSpec {
            blobs_per_class: [3, 1],
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn stack_lays_out_batch() {
        let ds = gen_dataset(&SynthSpec::default()).unwrap();
        let (x, y) = stack(&[&ds.train[1], &ds.train[0]]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 64, 64]);
        assert_eq!(&x.data()[..3 * 4096], ds.train[1].image.data());
        assert_eq!(&y[4096..], &ds.train[0].mask.labels[..]);
    }

    #[test]
    fn augmentation_keeps_image_and_labels_aligned() {
        let spec = SynthSpec {
            noise: 0.0,
            ..Default::default()
        };
        let s = gen_sample(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = augment(&s, spec.intensity(0) as f32, &mut rng);
            for (i, &l) in a.mask.labels.iter().enumerate() {
                assert_eq!(a.image.data()[i], spec.intensity(l as usize) as f32);
            }
        }
    }

    #[test]
    fn cache_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&SynthSpec {
            train_samples: 2,
            val_samples: 1,
            ..Default::default()
        })
        .unwrap();
        let m1 = save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let other = tempfile::tempdir().unwrap();
        assert_eq!(save_dataset(&ds, other.path()).unwrap(), m1);
        let victim = dir.path().join(&m1.files[0].name);
        let mut bytes = fs::read(&victim).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(&victim, bytes).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
