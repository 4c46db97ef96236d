//! Sensor-to-sensor band resampling and band bookkeeping.

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crate::kernels::{apply_stats, standardize, Stats};

/// FWHM = 2*sqrt(2 ln 2) * sigma for a Gaussian response.
pub const FWHM_TO_SIGMA: f64 = 2.3548;

/// Spectral layout of a sensor: band centers and FWHMs in nanometers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub name: String,
    pub centers_nm: Vec<f64>,
    pub fwhm_nm: Vec<f64>,
}

impl SensorSpec {
    pub fn new(name: impl Into<String>, centers_nm: Vec<f64>, fwhm_nm: Vec<f64>) -> Result<Self> {
        if centers_nm.len() != fwhm_nm.len() {
            return Err(Error::InvalidArgument(format!(
                "sensor spec: {} centers vs {} FWHMs",
                centers_nm.len(),
                fwhm_nm.len()
            )));
        }
        if centers_nm.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("band centers must be strictly increasing".into()));
        }
        if fwhm_nm.iter().any(|&f| f <= 0.0) {
            return Err(Error::InvalidArgument("FWHMs must be positive".into()));
        }
        Ok(SensorSpec { name: name.into(), centers_nm, fwhm_nm })
    }

    pub fn bands(&self) -> usize {
        self.centers_nm.len()
    }

    /// Uniformly spaced helper spec.
    pub fn uniform(name: impl Into<String>, start_nm: f64, step_nm: f64, bands: usize, fwhm_nm: f64) -> Self {
        let centers: Vec<f64> = (0..bands).map(|i| start_nm + step_nm * i as f64).collect();
        SensorSpec::new(name, centers, vec![fwhm_nm; bands]).unwrap()
    }
}

/// H x W x B hyperspectral cube with its sensor spec.
#[derive(Debug, Clone)]
pub struct HsiCube {
    /// `[H, W, B]`, channel-last.
    pub values: ArrayD<f32>,
    pub spec: SensorSpec,
    /// Ground sample distance in meters (metadata only).
    pub gsd_m: f64,
}

impl HsiCube {
    pub fn new(values: ArrayD<f32>, spec: SensorSpec, gsd_m: f64) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::shape("HsiCube", "[H,W,B]", format!("{:?}", values.shape())));
        }
        if values.shape()[2] != spec.bands() {
            return Err(Error::shape(
                "HsiCube bands",
                format!("{} (sensor {})", spec.bands(), spec.name),
                format!("{}", values.shape()[2]),
            ));
        }
        Ok(HsiCube { values, spec, gsd_m })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn bands(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Per-target-band resampling weights over source bands. Each row is
/// non-negative and sums to 1.
pub fn resample_weights(source: &SensorSpec, target: &SensorSpec) -> Result<Array2<f64>> {
    let mut w = Array2::<f64>::zeros((target.bands(), source.bands()));
    for (t, (&center, &fwhm)) in target.centers_nm.iter().zip(target.fwhm_nm.iter()).enumerate() {
        let sigma = fwhm / FWHM_TO_SIGMA;
        let support = 2.0 * fwhm;
        let mut sum = 0.0;
        for (s, &sc) in source.centers_nm.iter().enumerate() {
            let d = sc - center;
            if d.abs() > support {
                continue;
            }
            let g = (-d * d / (2.0 * sigma * sigma)).exp();
            w[[t, s]] = g;
            sum += g;
        }
        if sum <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "target band {t} ({center} nm, FWHM {fwhm} nm) overlaps no source band"
            )));
        }
        for s in 0..source.bands() {
            w[[t, s]] /= sum;
        }
    }
    Ok(w)
}

/// Resample a cube to the spectral layout of `target`, assuming a Gaussian
/// per-band response for the target sensor (sigma = FWHM / 2.3548, support
/// truncated at +-2 FWHM). Applied identically at every pixel; linear in the
/// pixel values.
pub fn resample_bands(cube: &HsiCube, target: &SensorSpec) -> Result<HsiCube> {
    let w = resample_weights(&cube.spec, target)?;
    let (h, wd, b) = (cube.height(), cube.width(), cube.bands());
    let bt = target.bands();
    let flat = cube.values.view().into_shape_with_order((h * wd, b)).unwrap();
    let wt = w.mapv(|v| v as f32);
    let out = flat.dot(&wt.t());
    HsiCube::new(
        out.into_shape_with_order((h, wd, bt)).unwrap().into_dyn(),
        target.clone(),
        cube.gsd_m,
    )
}

/// Remove the listed band indices from values and spec consistently.
pub fn exclude_bands(cube: &HsiCube, band_indices: &[usize]) -> Result<HsiCube> {
    let b = cube.bands();
    let mut seen = vec![false; b];
    for &i in band_indices {
        if i >= b {
            return Err(Error::InvalidArgument(format!("band index {i} out of range for {b} bands")));
        }
        if seen[i] {
            return Err(Error::InvalidArgument(format!("duplicate band index {i}")));
        }
        seen[i] = true;
    }
    let keep: Vec<usize> = (0..b).filter(|&i| !seen[i]).collect();
    let values = cube.values.select(ndarray::Axis(2), &keep);
    let spec = SensorSpec::new(
        cube.spec.name.clone(),
        keep.iter().map(|&i| cube.spec.centers_nm[i]).collect(),
        keep.iter().map(|&i| cube.spec.fwhm_nm[i]).collect(),
    )?;
    HsiCube::new(values.into_dyn(), spec, cube.gsd_m)
}
