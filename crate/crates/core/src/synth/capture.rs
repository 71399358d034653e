//! Posed sampling of a screen field through an RGGB colour filter array.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Camera pose relative to the screen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapturePose {
    /// Sub-pixel offset in sensor pixels, `(x, y)`.
    pub translation: (f64, f64),
    /// Radians.
    pub rotation: f64,
    /// Sampling-pitch ratio screen/camera.
    pub scale: f64,
}

impl CapturePose {
    pub fn identity() -> Self {
        CapturePose {
            translation: (0.0, 0.0),
            rotation: 0.0,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.5 && self.scale < 2.0) {
            return Err(Error::Config(format!("scale {} outside (0.5, 2.0)", self.scale)));
        }
        if self.rotation.abs() > 0.1 {
            return Err(Error::Config(format!("rotation {} exceeds 0.1 rad", self.rotation)));
        }
        if !self.translation.0.is_finite() || !self.translation.1.is_finite() {
            return Err(Error::Config("translation must be finite".into()));
        }
        Ok(())
    }
}

/// RGGB channel (0 = R, 1 = G, 2 = B) of sensor pixel `(y, x)`.
pub fn cfa_channel(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Where the field is read: an `S x S` grid of points spread over each
/// sensor pixel's full footprint, mapped through the pose.
#[derive(Clone, Copy, Debug)]
pub struct Sampler {
    pub pitch: usize,
    pub samples: usize,
}

impl Sampler {
    pub fn new(pitch: usize, samples: usize) -> Result<Self> {
        if pitch < 2 || samples == 0 || samples % pitch != 0 {
            return Err(Error::Config(format!(
                "samples per axis ({samples}) must be a positive multiple of the pitch ({pitch})"
            )));
        }
        Ok(Sampler { pitch, samples })
    }

    /// Box-filtered reading of every sensor pixel. `read(fy, fx, y, x)`
    /// returns the field value at integer cell `(fy, fx)` for sensor pixel
    /// `(y, x)`; the result is the mean over the aperture samples.
    fn integrate(
        &self,
        field_hw: (usize, usize),
        pose: &CapturePose,
        sensor: (usize, usize),
        mut read: impl FnMut(usize, usize, usize, usize) -> f64,
        out_channels: usize,
        mut store: impl FnMut(&mut Vec<f64>, usize, usize, usize, f64),
    ) -> Result<Vec<f64>> {
        pose.validate()?;
        let (fh, fw) = field_hw;
        let (sh, sw) = sensor;
        let step = self.pitch as f64 / pose.scale;
        let (sin, cos) = pose.rotation.sin_cos();
        let (cy, cx) = (fh as f64 / 2.0, fw as f64 / 2.0);
        let s = self.samples;
        let offs: Vec<f64> = (0..s).map(|a| (a as f64 + 0.5) / s as f64 - 0.5).collect();
        let norm = 1.0 / (s * s) as f64;
        let mut out = vec![0.0; sh * sw * out_channels];
        for y in 0..sh {
            let ry = y as f64 + 0.5 - sh as f64 / 2.0 + pose.translation.1;
            for x in 0..sw {
                let rx = x as f64 + 0.5 - sw as f64 / 2.0 + pose.translation.0;
                let mut acc = 0.0;
                for &oy in &offs {
                    for &ox in &offs {
                        let (py, px) = ((ry + oy) * step, (rx + ox) * step);
                        let fy = cy + sin * px + cos * py;
                        let fx = cx + cos * px - sin * py;
                        if !(fy >= 0.0 && fx >= 0.0 && fy < fh as f64 && fx < fw as f64) {
                            return Err(Error::Config(format!(
                                "sensor pixel ({y},{x}) samples outside the {fh}x{fw} field"
                            )));
                        }
                        acc += read(fy as usize, fx as usize, y, x);
                    }
                }
                store(&mut out, y, x, sw, acc * norm);
            }
        }
        Ok(out)
    }
}

/// Bayer mosaic `[sensor_h, sensor_w]` of a stripe field. Each pixel sees
/// only its CFA primary, which occupies a third of every screen pixel, so
/// the aperture mean is scaled by 3 and clamped to `[0, 1]`.
pub fn capture_cfa(
    field: &Tensor,
    pose: &CapturePose,
    sampler: &Sampler,
    sensor_h: usize,
    sensor_w: usize,
) -> Result<Tensor> {
    let &[fh, fw, 3] = field.shape() else {
        return Err(Error::dim(format!("field must be [H,W,3], got {:?}", field.shape())));
    };
    let fd = field.data();
    let data = sampler.integrate(
        (fh, fw),
        pose,
        (sensor_h, sensor_w),
        |fy, fx, y, x| fd[(fy * fw + fx) * 3 + cfa_channel(y, x)],
        1,
        |out, y, x, sw, v| out[y * sw + x] = (3.0 * v).clamp(0.0, 1.0),
    )?;
    Ok(Tensor::from_raw(vec![sensor_h, sensor_w], data))
}

/// Full-colour capture `[sensor_h, sensor_w, 3]` of the content shown as a
/// flat (subpixel-free) field: what an ideal camera without a CFA records.
pub fn capture_flat(
    content: &Tensor,
    pose: &CapturePose,
    sampler: &Sampler,
    sensor_h: usize,
    sensor_w: usize,
) -> Result<Tensor> {
    let &[h, w, 3] = content.shape() else {
        return Err(Error::dim(format!("content must be [H,W,3], got {:?}", content.shape())));
    };
    let p = sampler.pitch;
    let cd = content.data();
    let mut planes = Vec::with_capacity(3);
    for c in 0..3 {
        planes.push(sampler.integrate(
            (h * p, w * p),
            pose,
            (sensor_h, sensor_w),
            |fy, fx, _, _| cd[((fy / p) * w + fx / p) * 3 + c],
            1,
            |out, y, x, sw, v| out[y * sw + x] = v.clamp(0.0, 1.0),
        )?);
    }
    let data = (0..sensor_h * sensor_w)
        .flat_map(|i| [planes[0][i], planes[1][i], planes[2][i]])
        .collect();
    Ok(Tensor::from_raw(vec![sensor_h, sensor_w, 3], data))
}
