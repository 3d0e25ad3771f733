//! Coded-aperture snapshot spectral imaging forward model.
//!
//! A cube `X` (H×W×Nλ) is modulated by a coded aperture `M` (H×W), each
//! spectral band is displaced horizontally by a dispersive element and all
//! bands integrate on a single H×(W+Δ) sensor:
//!
//! `Y[h, w + offset(n)] += M[h, w] · X[h, w, n]`
//!
//! with `offset(n) = s·(n − n*)` translated so the smallest offset is column 0,
//! which for integer `s ≥ 0` is simply `s·n`, and `Δ = s·(Nλ − 1)`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

/// Ground-truth spectral cube, stored `h`-major with the band index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperspectralCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

impl HyperspectralCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::invalid(format!(
                "cube dims must be positive, got {height}x{width}x{bands}"
            )));
        }
        if values.len() != height * width * bands {
            return Err(Error::shape(
                "cube values",
                &[height * width * bands],
                &[values.len()],
            ));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::invalid(format!("cube value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [h, w, n] => Self::new(h, w, n, t.data().to_vec()),
            _ => Err(Error::invalid(format!(
                "cube tensor must be rank 3, got shape {:?}",
                t.shape()
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, n: usize) -> f32 {
        self.values[(h * self.width + w) * self.bands + n]
    }

    /// H×W×Nλ tensor sharing the cube's layout.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.height, self.width, self.bands],
            self.values.clone(),
        )
        .expect("cube dims are consistent")
    }

    /// Band-planar Nλ×H×W copy, the layout the reconstruction network uses.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.bands];
        for (p, px) in self.values.chunks_exact(self.bands).enumerate() {
            for (n, &v) in px.iter().enumerate() {
                out[n * plane + p] = v;
            }
        }
        out
    }

    /// One band as an H×W plane.
    pub fn band(&self, n: usize) -> Vec<f32> {
        self.values
            .chunks_exact(self.bands)
            .map(|px| px[n])
            .collect()
    }
}

/// Per-pixel transmittance pattern of the physical mask, entries in [0,1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodedAperture {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl CodedAperture {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let mask = Self {
            height,
            width,
            values,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.height * self.width {
            return Err(Error::shape(
                "coded aperture",
                &[self.height * self.width],
                &[self.values.len()],
            ));
        }
        if let Some(v) = self
            .values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::invalid(format!("mask value {v} outside [0,1]")));
        }
        Ok(())
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [h, w] => Self::new(h, w, t.data().to_vec()),
            _ => Err(Error::invalid(format!(
                "mask tensor must be rank 2, got shape {:?}",
                t.shape()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.height, self.width], self.values.clone())
            .expect("mask dims are consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// Integer-pixel dispersion: band `n` lands `step·(n − anchor)` columns from
/// the anchor band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersionModel {
    pub step: usize,
    #[serde(default)]
    pub anchor: usize,
}

impl Default for DispersionModel {
    fn default() -> Self {
        Self { step: 2, anchor: 0 }
    }
}

impl DispersionModel {
    pub fn new(step: usize, anchor: usize) -> Self {
        Self { step, anchor }
    }

    pub fn validate(&self, bands: usize) -> Result<()> {
        if self.anchor >= bands {
            return Err(Error::invalid(format!(
                "anchor band {} outside 0..{bands}",
                self.anchor
            )));
        }
        Ok(())
    }

    /// Total widening Δ of the sensor plane.
    pub fn spread(&self, bands: usize) -> usize {
        self.step * bands.saturating_sub(1)
    }

    /// Column where band `n` starts on the sensor. Offsets relative to the
    /// anchor are `step·(n − anchor)`; translating the smallest to 0 gives `step·n`.
    pub fn offset(&self, n: usize) -> usize {
        let rel = self.step as i64 * (n as i64 - self.anchor as i64);
        let min = -(self.step as i64 * self.anchor as i64);
        (rel - min) as usize
    }

    pub fn offsets(&self, bands: usize) -> Vec<usize> {
        (0..bands).map(|n| self.offset(n)).collect()
    }
}

/// Where the coded aperture acts relative to dispersion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPlacement {
    /// Each band is modulated by `M` in the scene plane and then dispersed.
    #[default]
    BeforeDispersion,
    /// The dispersed cube is modulated on the sensor plane by `M` occupying
    /// columns `0..W`; columns `W..W+Δ` are blocked.
    SensorPlane,
}

/// 2D snapshot on the sensor, H×(W+Δ).
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Measurement {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "measurement",
                &[height * width],
                &[values.len()],
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurement".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.height, self.width], self.values.clone())
            .expect("measurement dims are consistent")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseModel {
    #[default]
    None,
    AdditiveGaussian {
        sigma: f64,
    },
}

impl NoiseModel {
    pub fn sigma(&self) -> f64 {
        match self {
            NoiseModel::None => 0.0,
            NoiseModel::AdditiveGaussian { sigma } => *sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.sigma();
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::invalid(format!("noise sigma {s} must be >= 0")));
        }
        Ok(())
    }
}

/// Sampling law of a client's coded apertures. Two distributions are
/// distribution-equal iff they compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskDistribution {
    Bernoulli {
        p: f64,
    },
    SmoothedThreshold {
        correlation_length: f64,
        threshold: f64,
        #[serde(default = "default_true")]
        binarize: bool,
    },
    PerturbedReference {
        reference: CodedAperture,
        flip_rate: f64,
    },
}

fn default_true() -> bool {
    true
}

impl MaskDistribution {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name}={v} outside [0,1]")))
            }
        };
        match self {
            MaskDistribution::Bernoulli { p } => unit("p", *p),
            MaskDistribution::SmoothedThreshold {
                correlation_length,
                threshold,
                ..
            } => {
                if !(correlation_length.is_finite() && *correlation_length > 0.0) {
                    return Err(Error::invalid(format!(
                        "correlation length {correlation_length} must be > 0"
                    )));
                }
                if !(*threshold > 0.0 && *threshold < 1.0) {
                    return Err(Error::invalid(format!(
                        "threshold {threshold} outside (0,1)"
                    )));
                }
                Ok(())
            }
            MaskDistribution::PerturbedReference {
                reference,
                flip_rate,
            } => {
                reference.validate()?;
                unit("flip_rate", *flip_rate)
            }
        }
    }
}

/// Multiplies each band by `mask`, disperses and integrates on the sensor.
/// Noise is added last. Accumulation is f64, band-major ascending.
pub fn encode(
    cube: &HyperspectralCube,
    mask: &CodedAperture,
    disp: &DispersionModel,
    noise: &NoiseModel,
    rng: &mut Rng,
) -> Result<Measurement> {
    encode_with(
        cube,
        mask,
        disp,
        MaskPlacement::BeforeDispersion,
        noise,
        rng,
    )
}

pub fn encode_with(
    cube: &HyperspectralCube,
    mask: &CodedAperture,
    disp: &DispersionModel,
    placement: MaskPlacement,
    noise: &NoiseModel,
    rng: &mut Rng,
) -> Result<Measurement> {
    let clean = encode_array(&cube.to_tensor(), mask, disp, placement)?;
    let width = clean.shape()[1];
    let mut values = clean.into_data();
    add_noise(&mut values, noise, rng)?;
    Measurement::new(cube.height(), width, values)
}

/// Noise-free encoder over an arbitrary real H×W×Nλ array (no [0,1] range
/// requirement, so linear combinations of cubes can be encoded).
pub fn encode_array(
    x: &Tensor<f32>,
    mask: &CodedAperture,
    disp: &DispersionModel,
    placement: MaskPlacement,
) -> Result<Tensor<f32>> {
    let [h, w, bands] = *x.shape() else {
        return Err(Error::invalid(format!(
            "encoder input must be rank 3, got {:?}",
            x.shape()
        )));
    };
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape(
            "mask vs cube spatial dims",
            &[h, w],
            &[mask.height(), mask.width()],
        ));
    }
    disp.validate(bands)?;
    let out_w = w + disp.spread(bands);
    let xs = x.data();
    let m = mask.values();
    let mut acc = vec![0.0f64; h * out_w];
    match placement {
        MaskPlacement::BeforeDispersion => {
            for n in 0..bands {
                let off = disp.offset(n);
                for r in 0..h {
                    for c in 0..w {
                        acc[r * out_w + c + off] +=
                            m[r * w + c] as f64 * xs[(r * w + c) * bands + n] as f64;
                    }
                }
            }
        }
        MaskPlacement::SensorPlane => {
            for n in 0..bands {
                let off = disp.offset(n);
                for r in 0..h {
                    for c in 0..w {
                        let col = c + off;
                        if col < w {
                            acc[r * out_w + col] +=
                                m[r * w + col] as f64 * xs[(r * w + c) * bands + n] as f64;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, out_w], acc.into_iter().map(|v| v as f32).collect())
}

fn add_noise(values: &mut [f32], noise: &NoiseModel, rng: &mut Rng) -> Result<()> {
    noise.validate()?;
    if let NoiseModel::AdditiveGaussian { sigma } = *noise {
        if sigma > 0.0 {
            for v in values.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = (*v as f64 + sigma * z) as f32;
            }
        }
    }
    Ok(())
}

/// Places every band at its dispersed column offset on an H×(W+Δ)×Nλ grid,
/// zero elsewhere.
pub fn shift(cube: &HyperspectralCube, disp: &DispersionModel) -> Result<HyperspectralCube> {
    let (h, w, bands) = (cube.height(), cube.width(), cube.bands());
    disp.validate(bands)?;
    let out_w = w + disp.spread(bands);
    let mut out = vec![0.0f32; h * out_w * bands];
    for n in 0..bands {
        let off = disp.offset(n);
        for r in 0..h {
            for c in 0..w {
                out[(r * out_w + c + off) * bands + n] = cube.get(r, c, n);
            }
        }
    }
    HyperspectralCube::new(h, out_w, bands, out)
}

/// Reconstruction-input initialisation: band `n` is the width-W window of
/// the measurement starting at that band's offset. Returns H×W×Nλ.
pub fn shift_back(y: &Measurement, disp: &DispersionModel, bands: usize) -> Result<Tensor<f32>> {
    if bands == 0 {
        return Err(Error::invalid("band count must be positive"));
    }
    disp.validate(bands)?;
    let spread = disp.spread(bands);
    if y.width() <= spread {
        return Err(Error::invalid(format!(
            "measurement width {} leaves no window for spread {spread}",
            y.width()
        )));
    }
    let (h, yw) = (y.height(), y.width());
    let w = yw - spread;
    let ys = y.values();
    let mut out = vec![0.0f32; h * w * bands];
    for n in 0..bands {
        let off = disp.offset(n);
        for r in 0..h {
            for c in 0..w {
                out[(r * w + c) * bands + n] = ys[r * yw + c + off];
            }
        }
    }
    Tensor::new(vec![h, w, bands], out)
}

/// Draws one coded aperture from `dist`.
pub fn sample_mask(
    dist: &MaskDistribution,
    height: usize,
    width: usize,
    rng: &mut Rng,
) -> Result<CodedAperture> {
    dist.validate()?;
    let n = height * width;
    let values = match dist {
        MaskDistribution::Bernoulli { p } => (0..n)
            .map(|_| if rng.random::<f64>() < *p { 1.0 } else { 0.0 })
            .collect(),
        MaskDistribution::SmoothedThreshold {
            correlation_length,
            threshold,
            binarize,
        } => {
            let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let radius = correlation_length.ceil() as usize;
            let smooth = box_filter(&noise, height, width, radius);
            if *binarize {
                let mut sorted = smooth.clone();
                sorted.sort_by(f64::total_cmp);
                let q = sorted[((threshold * (n - 1) as f64).floor()) as usize];
                smooth
                    .iter()
                    .map(|&v| if v > q { 1.0 } else { 0.0 })
                    .collect()
            } else {
                let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let range = hi - lo;
                smooth
                    .iter()
                    .map(|&v| {
                        if range > 0.0 {
                            ((v - lo) / range) as f32
                        } else {
                            0.5
                        }
                    })
                    .collect()
            }
        }
        MaskDistribution::PerturbedReference {
            reference,
            flip_rate,
        } => {
            if reference.height() != height || reference.width() != width {
                return Err(Error::shape(
                    "reference mask",
                    &[height, width],
                    &[reference.height(), reference.width()],
                ));
            }
            reference
                .values()
                .iter()
                .map(|&v| {
                    if rng.random::<f64>() < *flip_rate {
                        1.0 - v
                    } else {
                        v
                    }
                })
                .collect()
        }
    };
    CodedAperture::new(height, width, values)
}

/// Mean over the in-bounds part of a (2r+1)² window.
fn box_filter(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let mut s = 0.0;
            for yy in y0..=y1 {
                s += src[yy * w + x0..=yy * w + x1].iter().sum::<f64>();
            }
            out[y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    HardwareShaking,
    ManufacturingDiscrepancy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub clients: usize,
    pub masks_per_client: usize,
    /// One shared distribution (shaking) or one per client.
    pub distributions: Vec<MaskDistribution>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.masks_per_client == 0 {
            return Err(Error::invalid(
                "scenario needs at least one client and one mask per client",
            ));
        }
        for d in &self.distributions {
            d.validate()?;
        }
        let all_equal = self.distributions.windows(2).all(|p| p[0] == p[1]);
        match self.kind {
            ScenarioKind::HardwareShaking => {
                let n = self.distributions.len();
                if !(n == 1 || (n == self.clients && all_equal)) {
                    return Err(Error::invalid(
                        "hardware shaking needs one shared distribution",
                    ));
                }
            }
            ScenarioKind::ManufacturingDiscrepancy => {
                if self.distributions.len() != self.clients {
                    return Err(Error::invalid(format!(
                        "manufacturing discrepancy needs {} distributions, got {}",
                        self.clients,
                        self.distributions.len()
                    )));
                }
                if self.clients > 1 && all_equal {
                    return Err(Error::invalid(
                        "manufacturing discrepancy needs at least two distinct distributions",
                    ));
                }
            }
        }
        Ok(())
    }

    /// The distribution client `c` samples from.
    pub fn distribution_index(&self, client: usize) -> usize {
        match self.kind {
            ScenarioKind::HardwareShaking => 0,
            ScenarioKind::ManufacturingDiscrepancy => client,
        }
    }

    pub fn distribution(&self, client: usize) -> &MaskDistribution {
        &self.distributions[self.distribution_index(client)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientMasks {
    pub distribution_index: usize,
    pub distribution: MaskDistribution,
    pub masks: Vec<CodedAperture>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub clients: Vec<ClientMasks>,
}

/// Samples `K` masks per client. Client `c` draws from its own substream of a
/// base seed taken from `rng`.
pub fn make_scenario(
    spec: &ScenarioSpec,
    height: usize,
    width: usize,
    rng: &mut Rng,
) -> Result<Scenario> {
    spec.validate()?;
    let base: u64 = rng.random();
    let clients = (0..spec.clients)
        .map(|c| {
            let idx = spec.distribution_index(c);
            let dist = spec.distributions[idx].clone();
            let mut stream = substream(base, c as u64);
            let masks = (0..spec.masks_per_client)
                .map(|_| sample_mask(&dist, height, width, &mut stream))
                .collect::<Result<Vec<_>>>()?;
            Ok(ClientMasks {
                distribution_index: idx,
                distribution: dist,
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scenario {
        kind: spec.kind,
        clients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn cube(h: usize, w: usize, n: usize, seed: u64) -> HyperspectralCube {
        let mut rng = substream(seed, 0);
        let v = (0..h * w * n).map(|_| rng.random::<f32>()).collect();
        HyperspectralCube::new(h, w, n, v).unwrap()
    }

    #[test]
    fn cube_rejects_out_of_range_and_nan() {
        assert!(HyperspectralCube::new(1, 1, 1, vec![1.5]).is_err());
        assert!(HyperspectralCube::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(HyperspectralCube::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn shift_single_band_is_identity() {
        let x = cube(3, 4, 1, 1);
        for s in 0..4 {
            assert_eq!(shift(&x, &DispersionModel::new(s, 0)).unwrap(), x);
        }
    }

    #[test]
    fn shift_two_band_pixel() {
        let x = HyperspectralCube::new(1, 1, 2, vec![0.25, 0.75]).unwrap();
        let y = shift(&x, &DispersionModel::new(1, 0)).unwrap();
        assert_eq!(y.width(), 2);
        assert_eq!(y.band(0), vec![0.25, 0.0]);
        assert_eq!(y.band(1), vec![0.0, 0.75]);
    }

    #[test]
    fn anchor_does_not_move_translated_placement() {
        let d0 = DispersionModel::new(2, 0);
        let d2 = DispersionModel::new(2, 2);
        assert_eq!(d0.offsets(4), vec![0, 2, 4, 6]);
        assert_eq!(d2.offsets(4), d0.offsets(4));
        assert!(DispersionModel::new(2, 4).validate(4).is_err());
    }

    #[test]
    fn encode_identity_and_annihilator() {
        let x = cube(4, 5, 1, 2);
        let mut rng = substream(0, 0);
        let ones = CodedAperture::filled(4, 5, 1.0).unwrap();
        let y = encode(
            &x,
            &ones,
            &DispersionModel::default(),
            &NoiseModel::None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(y.values(), x.band(0).as_slice());

        let x = cube(4, 5, 3, 3);
        let zeros = CodedAperture::filled(4, 5, 0.0).unwrap();
        let y = encode(
            &x,
            &zeros,
            &DispersionModel::default(),
            &NoiseModel::None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(y.width(), 9);
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_mask_mismatch() {
        let x = cube(4, 5, 2, 2);
        let m = CodedAperture::filled(5, 4, 1.0).unwrap();
        let mut rng = substream(0, 0);
        let err = encode(
            &x,
            &m,
            &DispersionModel::default(),
            &NoiseModel::None,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn encode_two_by_two_by_two() {
        // bands a (n=0) and b (n=1), s=1, mask m:
        // Y[r,0] = m[r,0]a[r,0]
        // Y[r,1] = m[r,1]a[r,1] + m[r,0]b[r,0]
        // Y[r,2] = m[r,1]b[r,1]
        let x =
            HyperspectralCube::new(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let m = CodedAperture::new(2, 2, vec![1.0, 0.5, 0.0, 0.25]).unwrap();
        let mut rng = substream(0, 0);
        let y = encode(
            &x,
            &m,
            &DispersionModel::new(1, 0),
            &NoiseModel::None,
            &mut rng,
        )
        .unwrap();
        let expect = [
            (1.0f64 * 0.1) as f32,
            (0.5f64 * 0.3 + 1.0 * 0.2) as f32,
            (0.5f64 * 0.4) as f32,
            0.0,
            (0.25f64 * 0.7 + 0.0 * 0.6) as f32,
            (0.25f64 * 0.8) as f32,
        ];
        assert_eq!(y.height(), 2);
        assert_eq!(y.width(), 3);
        for (a, b) in y.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn sensor_plane_placement_blocks_overhang() {
        let x = HyperspectralCube::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = CodedAperture::new(1, 2, vec![1.0, 0.5]).unwrap();
        let y = encode_array(
            &x.to_tensor(),
            &m,
            &DispersionModel::new(1, 0),
            MaskPlacement::SensorPlane,
        )
        .unwrap();
        // col0: m0*a0; col1: m1*(a1 + b0); col2: blocked
        assert_eq!(y.data(), &[0.1, (0.5f64 * (0.3 + 0.2)) as f32, 0.0]);
    }

    #[test]
    fn gaussian_noise_is_seeded() {
        let x = cube(4, 4, 2, 5);
        let m = CodedAperture::filled(4, 4, 1.0).unwrap();
        let noise = NoiseModel::AdditiveGaussian { sigma: 0.1 };
        let d = DispersionModel::default();
        let a = encode(&x, &m, &d, &noise, &mut substream(9, 1)).unwrap();
        let b = encode(&x, &m, &d, &noise, &mut substream(9, 1)).unwrap();
        let clean = encode(&x, &m, &d, &NoiseModel::None, &mut substream(9, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, clean);
        assert!(NoiseModel::AdditiveGaussian { sigma: -1.0 }
            .validate()
            .is_err());
    }

    #[test]
    fn shift_back_cases() {
        let d = DispersionModel::new(0, 0);
        let y = Measurement::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = shift_back(&y, &d, 3).unwrap();
        assert_eq!(t.shape(), &[2, 3, 3]);
        for n in 0..3 {
            let band: Vec<f32> = t.data().chunks(3).map(|p| p[n]).collect();
            assert_eq!(band, y.values());
        }

        let y = Measurement::new(1, 2, vec![0.3, 0.9]).unwrap();
        let t = shift_back(&y, &DispersionModel::new(1, 0), 2).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.3, 0.9]);

        assert!(shift_back(&y, &DispersionModel::new(2, 0), 2).is_err());
    }

    #[test]
    fn shift_back_recovers_single_band() {
        let x = cube(5, 6, 1, 4);
        let ones = CodedAperture::filled(5, 6, 1.0).unwrap();
        let d = DispersionModel::new(3, 0);
        let y = encode(&x, &ones, &d, &NoiseModel::None, &mut substream(0, 0)).unwrap();
        assert_eq!(shift_back(&y, &d, 1).unwrap().data(), x.values());
    }

    #[test]
    fn mask_samplers_trivial_cases() {
        let mut rng = substream(1, 1);
        let m = sample_mask(&MaskDistribution::Bernoulli { p: 1.0 }, 8, 8, &mut rng).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));

        let reference =
            sample_mask(&MaskDistribution::Bernoulli { p: 0.5 }, 8, 8, &mut rng).unwrap();
        let dist = MaskDistribution::PerturbedReference {
            reference: reference.clone(),
            flip_rate: 0.0,
        };
        assert_eq!(sample_mask(&dist, 8, 8, &mut rng).unwrap(), reference);
        let flip_all = MaskDistribution::PerturbedReference {
            reference: reference.clone(),
            flip_rate: 1.0,
        };
        let flipped = sample_mask(&flip_all, 8, 8, &mut rng).unwrap();
        for (a, b) in flipped.values().iter().zip(reference.values()) {
            assert_eq!(*a, 1.0 - b);
        }
        assert!(sample_mask(&dist, 8, 9, &mut rng).is_err());
    }

    #[test]
    fn smoothed_threshold_open_fraction_follows_threshold() {
        let mut rng = substream(2, 2);
        let dist = MaskDistribution::SmoothedThreshold {
            correlation_length: 1.5,
            threshold: 0.7,
            binarize: true,
        };
        let m = sample_mask(&dist, 32, 32, &mut rng).unwrap();
        assert!((m.mean() - 0.3).abs() < 0.01, "{}", m.mean());

        let soft = MaskDistribution::SmoothedThreshold {
            correlation_length: 2.0,
            threshold: 0.5,
            binarize: false,
        };
        let m = sample_mask(&soft, 16, 16, &mut rng).unwrap();
        let lo = m.values().iter().copied().fold(f32::MAX, f32::min);
        let hi = m.values().iter().copied().fold(f32::MIN, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(m.values().iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(MaskDistribution::Bernoulli { p: 1.1 }.validate().is_err());
        let st = |l, t| MaskDistribution::SmoothedThreshold {
            correlation_length: l,
            threshold: t,
            binarize: true,
        };
        assert!(st(0.0, 0.5).validate().is_err());
        assert!(st(1.0, 1.0).validate().is_err());
        assert!(st(1.0, 0.5).validate().is_ok());
    }

    fn bern(p: f64) -> MaskDistribution {
        MaskDistribution::Bernoulli { p }
    }

    #[test]
    fn shaking_scenario_draws_distinct_masks_from_one_law() {
        let spec = ScenarioSpec {
            kind: ScenarioKind::HardwareShaking,
            clients: 3,
            masks_per_client: 2,
            distributions: vec![bern(0.5)],
        };
        let s = make_scenario(&spec, 16, 16, &mut substream(4, 0)).unwrap();
        let all: Vec<&CodedAperture> = s.clients.iter().flat_map(|c| &c.masks).collect();
        assert_eq!(all.len(), 6);
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert!(s
            .clients
            .iter()
            .all(|c| c.distribution_index == 0 && c.distribution == bern(0.5)));
    }

    #[test]
    fn scenario_invariants_enforced() {
        let mut spec = ScenarioSpec {
            kind: ScenarioKind::ManufacturingDiscrepancy,
            clients: 3,
            masks_per_client: 1,
            distributions: vec![bern(0.5); 3],
        };
        assert!(spec.validate().is_err());
        spec.distributions[2] = bern(0.7);
        assert!(spec.validate().is_ok());
        spec.distributions.pop();
        assert!(spec.validate().is_err());

        let shaking = ScenarioSpec {
            kind: ScenarioKind::HardwareShaking,
            clients: 2,
            masks_per_client: 1,
            distributions: vec![bern(0.5), bern(0.6)],
        };
        assert!(make_scenario(&shaking, 4, 4, &mut substream(0, 0)).is_err());
    }

    #[test]
    fn single_client_scenarios_coincide() {
        let mk = |kind| ScenarioSpec {
            kind,
            clients: 1,
            masks_per_client: 3,
            distributions: vec![bern(0.4)],
        };
        let a = make_scenario(
            &mk(ScenarioKind::HardwareShaking),
            8,
            8,
            &mut substream(5, 0),
        )
        .unwrap();
        let b = make_scenario(
            &mk(ScenarioKind::ManufacturingDiscrepancy),
            8,
            8,
            &mut substream(5, 0),
        )
        .unwrap();
        assert_eq!(a.clients, b.clients);
    }
}
