//! Synthetic spectral scenes, the tensor/checkpoint containers and client
//! dataset splitting.

pub mod checkpoint;
pub mod tensorfile;

use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::HyperspectralCube;
use crate::rng::{substream, Rng, STREAM_DATA, STREAM_SPLIT};

pub use checkpoint::{Checkpoint, CheckpointWriter, Manifest, ManifestEntry, TensorRole};
pub use tensorfile::{decode_tensor, encode_tensor, load_tensor, save_tensor};

/// Sum of Gaussian bumps, each with a smooth spectral profile, min-max
/// normalised to [0,1].
///
/// `smoothness` trades detail for regularity: the scene has
/// `⌈8/smoothness⌉` bumps (capped at 64), `⌊3/smoothness⌋` cosine harmonics
/// in each profile (capped at 3) and bump widths that grow with it. Very large
/// values give a single bump with a flat profile, i.e. a rank-1 cube.
pub fn gen_synthetic_cube(
    rng: &mut Rng,
    height: usize,
    width: usize,
    bands: usize,
    smoothness: f64,
) -> Result<HyperspectralCube> {
    if !(smoothness.is_finite() && smoothness > 0.0) {
        return Err(Error::invalid(format!(
            "smoothness {smoothness} must be > 0"
        )));
    }
    if height == 0 || width == 0 || bands == 0 {
        return Err(Error::invalid("cube dims must be positive"));
    }
    let bumps = ((8.0 / smoothness).ceil() as usize).clamp(1, 64);
    let harmonics = ((3.0 / smoothness).floor() as usize).min(3);
    let base_sigma = height.min(width) as f64 * (0.12 + 0.06 * smoothness.min(4.0));
    let mut acc = vec![0.0f64; height * width * bands];
    for _ in 0..bumps {
        let cy = rng.random::<f64>() * height as f64;
        let cx = rng.random::<f64>() * width as f64;
        let sigma = base_sigma * (0.6 + 0.8 * rng.random::<f64>());
        let amp = 0.3 + 0.7 * rng.random::<f64>();
        let terms: Vec<(f64, f64)> = (1..=harmonics)
            .map(|k| {
                (
                    (rng.random::<f64>() - 0.5) / k as f64,
                    rng.random::<f64>() * 2.0 * PI,
                )
            })
            .collect();
        let profile: Vec<f64> = (0..bands)
            .map(|n| {
                let x = if bands > 1 {
                    n as f64 / (bands - 1) as f64
                } else {
                    0.0
                };
                1.0 + terms
                    .iter()
                    .enumerate()
                    .map(|(k, (a, ph))| a * (PI * (k + 1) as f64 * x + ph).cos())
                    .sum::<f64>()
            })
            .collect();
        for r in 0..height {
            for c in 0..width {
                let d2 = (r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2);
                let g = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                for (n, p) in profile.iter().enumerate() {
                    acc[(r * width + c) * bands + n] += g * p;
                }
            }
        }
    }
    let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let values = acc
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range) as f32
            } else {
                0.0
            }
        })
        .collect();
    HyperspectralCube::new(height, width, bands, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    /// Directory of `FHT1` cubes (H×W×Nλ), taken in file-name order.
    Files(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_source")]
    pub source: DataSource,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Fraction of cubes used for training; the rest is the shared test set.
    pub split: f64,
    #[serde(default = "default_smoothness")]
    pub smoothness: f64,
    /// Overrides the experiment seed for data generation when set.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_source() -> DataSource {
    DataSource::Synthetic
}

fn default_smoothness() -> f64 {
    2.0
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::invalid(format!(
                "split {} outside (0,1)",
                self.split
            )));
        }
        if self.count < 2 {
            return Err(Error::invalid("dataset needs at least two cubes"));
        }
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::invalid("dataset dims must be positive"));
        }
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return Err(Error::invalid("smoothness must be > 0"));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        ((self.count as f64 * self.split).round() as usize).clamp(1, self.count - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<HyperspectralCube>,
    pub test: Vec<HyperspectralCube>,
}

/// Generates or loads `spec.count` cubes and splits them into train/test.
pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let seed = spec.seed.unwrap_or(seed);
    let cubes = match &spec.source {
        DataSource::Synthetic => {
            let mut rng = substream(seed, STREAM_DATA);
            (0..spec.count)
                .map(|_| {
                    gen_synthetic_cube(
                        &mut rng,
                        spec.height,
                        spec.width,
                        spec.bands,
                        spec.smoothness,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        }
        DataSource::Files(dir) => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "fht"))
                .collect();
            files.sort();
            if files.len() < spec.count {
                return Err(Error::invalid(format!(
                    "{} holds {} cubes, config asks for {}",
                    dir.display(),
                    files.len(),
                    spec.count
                )));
            }
            files[..spec.count]
                .iter()
                .map(|p| {
                    let cube = HyperspectralCube::from_tensor(&load_tensor(p)?)?;
                    if (cube.height(), cube.width(), cube.bands())
                        != (spec.height, spec.width, spec.bands)
                    {
                        return Err(Error::shape(
                            p.display().to_string(),
                            &[spec.height, spec.width, spec.bands],
                            &[cube.height(), cube.width(), cube.bands()],
                        ));
                    }
                    Ok(cube)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let n_train = spec.train_count();
    let mut cubes = cubes;
    let test = cubes.split_off(n_train);
    Ok(Dataset { train: cubes, test })
}

/// Deterministic shuffled partition of `0..n` into `clients` parts whose
/// sizes differ by at most one.
pub fn split_dataset(n: usize, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::invalid("cannot split across zero clients"));
    }
    if n < clients {
        return Err(Error::invalid(format!(
            "{n} items cannot give each of {clients} clients at least one"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, STREAM_SPLIT));
    let base = n / clients;
    let extra = n % clients;
    let mut out = Vec::with_capacity(clients);
    let mut at = 0;
    for c in 0..clients {
        let len = base + usize::from(c < extra);
        out.push(idx[at..at + len].to_vec());
        at += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let p = split_dataset(9, 3, 1).unwrap();
        assert!(p.iter().all(|c| c.len() == 3));
        let p = split_dataset(10, 3, 1).unwrap();
        let mut sizes: Vec<usize> = p.iter().map(|c| c.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert_eq!(split_dataset(10, 3, 1).unwrap(), p);
        assert!(split_dataset(2, 3, 1).is_err());
        assert!(split_dataset(2, 0, 1).is_err());
    }

    #[test]
    fn synthetic_cube_is_normalised() {
        let mut rng = substream(3, 0);
        for s in [0.5, 2.0, 10.0] {
            let c = gen_synthetic_cube(&mut rng, 16, 16, 4, s).unwrap();
            let lo = c.values().iter().copied().fold(f32::MAX, f32::min);
            let hi = c.values().iter().copied().fold(f32::MIN, f32::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
        assert!(gen_synthetic_cube(&mut rng, 4, 4, 2, 0.0).is_err());
    }

    #[test]
    fn dataset_spec_validation() {
        let mut spec = DatasetSpec {
            source: DataSource::Synthetic,
            count: 8,
            height: 8,
            width: 8,
            bands: 2,
            split: 0.75,
            smoothness: 2.0,
            seed: None,
        };
        let d = build_dataset(&spec, 1).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (6, 2));
        spec.split = 1.0;
        assert!(spec.validate().is_err());
        spec.split = 0.5;
        spec.count = 1;
        assert!(spec.validate().is_err());
    }
}
