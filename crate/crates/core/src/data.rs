//! Synthetic dataset generators, Gaussian corruption, and raw f64 dataset IO.
//!
//! Generators are pure functions of (parameters, seed). Per-sample noise
//! seeds derive from (base_seed, index) so subsetting never reshuffles noise.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Sample {
    /// H x W x C image with pixels in [0, 1] before corruption.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    /// clip((1-rho)*image + rho*g, 0, 1)
    Blend,
    /// clip(image + rho*g, 0, 1)
    Additive,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Blend
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Blend rate in [0, 1].
    pub rho: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_noise_seed")]
    pub seed: u64,
    #[serde(default)]
    pub model: NoiseModel,
}

fn default_sigma() -> f64 {
    1.0
}

fn default_noise_seed() -> u64 {
    7
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            rho: 0.0,
            sigma: 1.0,
            seed: 7,
            model: NoiseModel::Blend,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.sigma < 0.0 {
            return Err(Error::config("sigma must be non-negative"));
        }
        Ok(())
    }
}

const GLYPH_LO: f64 = 0.85;
const BACKGROUND_HI: f64 = 0.25;

// Class -> (anchor-y fraction, anchor-x fraction, glyph height, glyph width).
// Positions/orientations are distinct enough for a linear probe on frozen
// features to separate them.
const PATTERN_GLYPHS: [(f64, f64, usize, usize); 8] = [
    (0.10, 0.10, 4, 4),
    (0.70, 0.70, 4, 4),
    (0.10, 0.70, 4, 4),
    (0.70, 0.10, 4, 4),
    (0.40, 0.15, 2, 8),
    (0.15, 0.40, 8, 2),
    (0.40, 0.60, 2, 8),
    (0.60, 0.40, 8, 2),
];

/// Class c places a bright position/orientation-coded glyph on a noisy
/// background; classes are balanced (counts differ by at most one).
pub fn gen_pattern_task(
    n: usize,
    num_classes: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if !(2..=8).contains(&num_classes) {
        return Err(Error::config(format!(
            "pattern task supports 2..=8 classes, got {num_classes}"
        )));
    }
    if height < 12 || width < 12 {
        return Err(Error::config("pattern task needs at least 12x12 images"));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let mut rng = Rng::seeded(mix_seed(seed, i as u64));
        let mut img = vec![0.0; height * width];
        for px in img.iter_mut() {
            *px = rng.uniform(0.0, BACKGROUND_HI);
        }
        let (fy, fx, gh, gw) = PATTERN_GLYPHS[label];
        let max_y = height - gh - 1;
        let max_x = width - gw - 1;
        let jy = rng.below(3) as i64 - 1;
        let jx = rng.below(3) as i64 - 1;
        let y0 = (((fy * max_y as f64).round() as i64 + jy).clamp(0, max_y as i64)) as usize;
        let x0 = (((fx * max_x as f64).round() as i64 + jx).clamp(0, max_x as i64)) as usize;
        for y in y0..y0 + gh {
            for x in x0..x0 + gw {
                img[y * width + x] = rng.uniform(GLYPH_LO, 1.0);
            }
        }
        samples.push(Sample {
            image: Tensor::new(vec![height, width, 1], img)?,
            label,
        });
    }
    Ok(samples)
}

const COUNT_SQUARE: usize = 3;

/// label = number of bright, mutually non-touching 3x3 squares (0..=max);
/// balanced over counts. Fails if placement stays infeasible after bounded
/// retries.
pub fn gen_count_task(
    n: usize,
    max_objects: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if max_objects == 0 {
        return Err(Error::config("count task needs max_objects >= 1"));
    }
    if height >= 12 && max_objects > 6 && height <= 16 && width <= 16 {
        return Err(Error::config("max_objects must be <= 6 for 16x16 images"));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % (max_objects + 1);
        let mut rng = Rng::seeded(mix_seed(seed.wrapping_add(0x5eed), i as u64));
        let mut img = vec![0.0; height * width];
        for px in img.iter_mut() {
            *px = rng.uniform(0.0, BACKGROUND_HI);
        }
        let mut placed: Vec<(usize, usize)> = Vec::new();
        let mut attempts = 0;
        while placed.len() < label {
            attempts += 1;
            if attempts > 200 {
                return Err(Error::Data(format!(
                    "could not place {label} squares in {height}x{width} after 200 attempts"
                )));
            }
            let y = rng.below(height - COUNT_SQUARE + 1);
            let x = rng.below(width - COUNT_SQUARE + 1);
            // keep at least one empty pixel between squares in both axes
            let touches = placed.iter().any(|&(py, px)| {
                (y as i64 - py as i64).abs() < COUNT_SQUARE as i64 + 1
                    && (x as i64 - px as i64).abs() < COUNT_SQUARE as i64 + 1
            });
            if touches {
                continue;
            }
            placed.push((y, x));
        }
        for &(y0, x0) in &placed {
            for y in y0..y0 + COUNT_SQUARE {
                for x in x0..x0 + COUNT_SQUARE {
                    img[y * width + x] = rng.uniform(GLYPH_LO, 1.0);
                }
            }
        }
        samples.push(Sample {
            image: Tensor::new(vec![height, width, 1], img)?,
            label,
        });
    }
    Ok(samples)
}

/// Connected-component count over pixels > 0.5 (4-connectivity). Test oracle
/// for the count task.
pub fn count_components(image: &Tensor) -> usize {
    let h = image.shape()[0];
    let w = image.shape()[1];
    let v = image.values();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || v[start] <= 0.5 {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && v[q] > 0.5 {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
    }
    count
}

/// Gaussian corruption of one sample; `index` selects the per-sample noise
/// stream. rho=0 is the bit-exact identity.
pub fn corrupt(sample: &Sample, spec: &NoiseSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    if spec.rho == 0.0 {
        return Ok(sample.clone());
    }
    let mut rng = Rng::seeded(mix_seed(spec.seed, index as u64));
    let mut out = sample.image.clone();
    for px in out.values_mut() {
        let g = rng.normal(0.5, spec.sigma);
        let v = match spec.model {
            NoiseModel::Blend => (1.0 - spec.rho) * *px + spec.rho * g,
            NoiseModel::Additive => *px + spec.rho * g,
        };
        *px = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        image: out,
        label: sample.label,
    })
}

pub fn corrupt_all(samples: &[Sample], spec: &NoiseSpec) -> Result<Vec<Sample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| corrupt(s, spec, i))
        .collect()
}

// ── raw dataset IO ───────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
}

/// Writes samples as headerless little-endian f64 buffers plus a JSON
/// manifest; returns the manifest path.
pub fn save_raw_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.f64");
        let path = dir.join(&name);
        let mut bytes = Vec::with_capacity(s.image.numel() * 8);
        for v in s.image.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        entries.push(ManifestEntry { file: name, label: s.label });
    }
    let manifest = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&manifest, json).map_err(|e| Error::io(manifest.display().to_string(), e))?;
    Ok(manifest)
}

/// Loads a manifest of {file, label} entries, validating buffer sizes against
/// the expected H x W x C and labels against `num_classes`.
pub fn load_raw_dataset(
    manifest_path: &Path,
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let expect_bytes = height * width * channels * 8;
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let path = dir.join(&e.file);
        let mut f = std::fs::File::open(&path).map_err(|err| Error::io(path.display().to_string(), err))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|err| Error::io(path.display().to_string(), err))?;
        if bytes.len() != expect_bytes {
            return Err(Error::Data(format!(
                "{}: expected {} bytes for {height}x{width}x{channels} f64, found {}",
                path.display(),
                expect_bytes,
                bytes.len()
            )));
        }
        if e.label >= num_classes {
            return Err(Error::Data(format!(
                "{}: label {} out of range for {num_classes} classes",
                path.display(),
                e.label
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(Sample {
            image: Tensor::new(vec![height, width, channels], values)?,
            label: e.label,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_equal(a: &Sample, b: &Sample) -> bool {
        a.label == b.label
            && a.image
                .values()
                .iter()
                .zip(b.image.values())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn pattern_generator_is_deterministic_and_balanced() {
        let a = gen_pattern_task(37, 4, 16, 16, 5).unwrap();
        let b = gen_pattern_task(37, 4, 16, 16, 5).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| images_equal(x, y)));

        let mut counts = [0usize; 4];
        for s in &a {
            counts[s.label] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        assert!(max - min <= 1, "{counts:?}");
        assert!(a.iter().all(|s| s.image.values().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn pattern_rejects_class_counts_outside_range() {
        assert!(gen_pattern_task(8, 1, 16, 16, 0).is_err());
        assert!(gen_pattern_task(8, 9, 16, 16, 0).is_err());
    }

    #[test]
    fn count_labels_match_component_oracle() {
        let samples = gen_count_task(60, 4, 16, 16, 11).unwrap();
        for s in &samples {
            assert_eq!(count_components(&s.image), s.label);
        }
        let a = gen_count_task(20, 3, 16, 16, 2).unwrap();
        let b = gen_count_task(20, 3, 16, 16, 2).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| images_equal(x, y)));
    }

    #[test]
    fn count_max_one_is_binary_presence() {
        let samples = gen_count_task(10, 1, 16, 16, 3).unwrap();
        assert!(samples.iter().all(|s| s.label <= 1));
        assert!(samples.iter().any(|s| s.label == 0));
        assert!(samples.iter().any(|s| s.label == 1));
    }

    #[test]
    fn corrupt_rho_zero_is_identity() {
        let samples = gen_pattern_task(3, 2, 16, 16, 1).unwrap();
        let spec = NoiseSpec { rho: 0.0, ..NoiseSpec::default() };
        for (i, s) in samples.iter().enumerate() {
            let c = corrupt(s, &spec, i).unwrap();
            assert!(images_equal(s, &c));
        }
    }

    #[test]
    fn corrupt_rho_one_ignores_the_input() {
        let a = gen_pattern_task(1, 2, 16, 16, 1).unwrap().remove(0);
        let b = gen_pattern_task(1, 2, 16, 16, 99).unwrap().remove(0);
        let spec = NoiseSpec { rho: 1.0, ..NoiseSpec::default() };
        let ca = corrupt(&a, &spec, 0).unwrap();
        let cb = corrupt(&b, &spec, 0).unwrap();
        assert!(ca
            .image
            .values()
            .iter()
            .zip(cb.image.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupted_mean_drifts_toward_half() {
        // dark image: mean must move toward 0.5 as rho -> 1
        let image = Tensor::full(vec![16, 16, 1], 0.05);
        let s = Sample { image, label: 0 };
        let mut last = 0.05;
        for rho in [0.25, 0.5, 0.75, 1.0] {
            let spec = NoiseSpec { rho, ..NoiseSpec::default() };
            let c = corrupt(&s, &spec, 0).unwrap();
            let mean = c.image.values().iter().sum::<f64>() / c.image.numel() as f64;
            assert!(mean > last - 0.02, "rho {rho}: mean {mean} below {last}");
            last = mean;
        }
        // with sigma 1 and clamping, rho=1 noise has mean 0.5 within 3 sigma
        let spec = NoiseSpec { rho: 1.0, ..NoiseSpec::default() };
        let c = corrupt(&s, &spec, 0).unwrap();
        let n = c.image.numel() as f64;
        let mean = c.image.values().iter().sum::<f64>() / n;
        // clamped normal(0.5, 1) keeps mean 0.5; sd of clipped values < 0.5
        let tol = 3.0 * 0.5 / n.sqrt();
        assert!((mean - 0.5).abs() < tol, "mean {mean} tol {tol}");
    }

    #[test]
    fn additive_model_shifts_without_blending() {
        // additive: clip(image + rho*g); a mid-gray image with small rho stays
        // near image + rho*mean(g) = 0.4 + 0.1*0.5
        let image = Tensor::full(vec![16, 16, 1], 0.4);
        let s = Sample { image, label: 0 };
        let spec = NoiseSpec {
            rho: 0.1,
            model: NoiseModel::Additive,
            ..NoiseSpec::default()
        };
        let c = corrupt(&s, &spec, 0).unwrap();
        let n = c.image.numel() as f64;
        let mean = c.image.values().iter().sum::<f64>() / n;
        assert!((mean - 0.45).abs() < 3.0 * 0.1 / n.sqrt(), "mean {mean}");
        assert!(c.image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // rho=0 additive is also the identity
        let id = corrupt(&s, &NoiseSpec { rho: 0.0, model: NoiseModel::Additive, ..NoiseSpec::default() }, 0).unwrap();
        assert!(images_equal(&s, &id));
    }

    #[test]
    fn corrupt_is_order_independent() {
        let samples = gen_pattern_task(5, 2, 16, 16, 4).unwrap();
        let spec = NoiseSpec { rho: 0.4, ..NoiseSpec::default() };
        let full = corrupt_all(&samples, &spec).unwrap();
        // corrupting sample 3 alone gives the same bytes as within the batch
        let alone = corrupt(&samples[3], &spec, 3).unwrap();
        assert!(images_equal(&full[3], &alone));
    }

    #[test]
    fn raw_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_count_task(9, 3, 16, 16, 8).unwrap();
        let manifest = save_raw_dataset(dir.path(), &samples).unwrap();
        let loaded = load_raw_dataset(&manifest, 16, 16, 1, 4).unwrap();
        assert_eq!(loaded.len(), samples.len());
        assert!(samples.iter().zip(loaded.iter()).all(|(a, b)| images_equal(a, b)));
    }

    #[test]
    fn empty_manifest_loads_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.json");
        std::fs::write(&manifest, "[]").unwrap();
        let loaded = load_raw_dataset(&manifest, 16, 16, 1, 4).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn wrong_byte_length_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("short.f64");
        std::fs::write(&bad, [0u8; 24]).unwrap();
        let manifest = dir.path().join("manifest.json");
        std::fs::write(&manifest, r#"[{"file": "short.f64", "label": 0}]"#).unwrap();
        let err = load_raw_dataset(&manifest, 16, 16, 1, 4).unwrap_err();
        assert!(err.to_string().contains("short.f64"), "{err}");

        let manifest2 = dir.path().join("manifest2.json");
        std::fs::write(&manifest2, r#"[{"file": "missing.f64", "label": 0}]"#).unwrap();
        let err = load_raw_dataset(&manifest2, 16, 16, 1, 4).unwrap_err();
        assert!(err.to_string().contains("missing.f64"), "{err}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_pattern_task(2, 2, 16, 16, 5).unwrap();
        let manifest = save_raw_dataset(dir.path(), &samples).unwrap();
        // the data holds labels {0, 1}; claim only 1 class
        let err = load_raw_dataset(&manifest, 16, 16, 1, 1).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }
}
