//! Laplacian-of-Gaussian curriculum smoothing.
//!
//! Early in training, feature maps are filtered with a zero-sum LoG kernel whose
//! width parameter `sigma` decays every `interval_epochs` epochs. Once `sigma`
//! reaches the floor the filter is switched off and features pass through
//! unchanged.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Continuous LoG response at integer offset `(x, y)`, before zero-sum correction.
pub fn log_response(x: f64, y: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let q = (x * x + y * y) / (2.0 * s2);
    -(1.0 / (PI * s2 * s2)) * (1.0 - q) * (-q).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoGKernel {
    sigma: f64,
    radius: usize,
    /// `(2r+1)²` weights, row-major, offset `(dy, dx)` at `[(dy+r)*(2r+1) + dx+r]`.
    weights: Vec<f64>,
}

impl LoGKernel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn width(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at signed offset `(dy, dx)`.
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        let w = self.width() as isize;
        self.weights[((dy + r) * w + dx + r) as usize]
    }
}

/// Samples the LoG on the integer grid `[-radius, radius]²` and subtracts the mean
/// so the weights sum to zero.
pub fn log_kernel(sigma: f64, radius: usize) -> Result<LoGKernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("LoG sigma must be positive, got {sigma}")));
    }
    if radius < 1 {
        return Err(Error::invalid("LoG radius must be at least 1"));
    }
    let r = radius as isize;
    let mut weights = Vec::with_capacity((2 * radius + 1).pow(2));
    for y in -r..=r {
        for x in -r..=r {
            weights.push(log_response(x as f64, y as f64, sigma));
        }
    }
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    for w in &mut weights {
        *w -= mean;
    }
    Ok(LoGKernel {
        sigma,
        radius,
        weights,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub sigma0: f64,
    pub decay_factor: f64,
    pub interval_epochs: usize,
    pub sigma_min: f64,
    /// Fixed for the whole schedule so feature shapes never change.
    pub radius: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            decay_factor: 0.9,
            interval_epochs: 5,
            sigma_min: 0.4,
            radius: 3,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) {
            return Err(Error::config("curriculum.sigma_min", "must be positive"));
        }
        if !(self.sigma0 >= self.sigma_min) {
            return Err(Error::config("curriculum.sigma0", "must be >= sigma_min"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config("curriculum.decay_factor", "must lie in (0, 1)"));
        }
        if self.interval_epochs < 1 {
            return Err(Error::config("curriculum.interval_epochs", "must be >= 1"));
        }
        if self.radius < 1 {
            return Err(Error::config("curriculum.radius", "must be >= 1"));
        }
        Ok(())
    }

    /// Kernel for `epoch`, or `None` once the curriculum has finished.
    pub fn kernel_at(&self, epoch: usize) -> Result<Option<LoGKernel>> {
        if curriculum_active(self, epoch) {
            log_kernel(schedule_sigma(self, epoch), self.radius).map(Some)
        } else {
            Ok(None)
        }
    }
}

pub fn schedule_sigma(s: &CurriculumSchedule, epoch: usize) -> f64 {
    let steps = (epoch / s.interval_epochs.max(1)) as i32;
    (s.sigma0 * s.decay_factor.powi(steps)).max(s.sigma_min)
}

pub fn curriculum_active(s: &CurriculumSchedule, epoch: usize) -> bool {
    schedule_sigma(s, epoch) > s.sigma_min
}

fn check_map(shape: &[usize], kernel: &LoGKernel) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("curriculum expects N×C×H×W, got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if h < kernel.width() || w < kernel.width() {
        return Err(Error::shape(format!(
            "feature map {h}×{w} is smaller than the {k}×{k} LoG kernel",
            k = kernel.width()
        )));
    }
    Ok((shape[0] * shape[1], h, w))
}

/// Depthwise zero-padded 2-D filtering of every channel; `None` is the identity.
pub fn apply_curriculum(feature_map: &Tensor, kernel: Option<&LoGKernel>) -> Result<Tensor> {
    let Some(kernel) = kernel else {
        return Ok(feature_map.clone());
    };
    let (planes, h, w) = check_map(feature_map.shape(), kernel)?;
    let mut out = Tensor::zeros(feature_map.shape());
    let r = kernel.radius as isize;
    let kw = kernel.width();
    let src = feature_map.data();
    let dst = out.data_mut();
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let row = base + yy as usize * w;
                    let krow = (dy + r) as usize * kw;
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += src[row + xx as usize] * kernel.weights[krow + (dx + r) as usize];
                    }
                }
                dst[base + y as usize * w + x as usize] = acc;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`apply_curriculum`]: maps an output gradient to the input gradient.
pub fn apply_curriculum_backward(grad_out: &Tensor, kernel: Option<&LoGKernel>) -> Result<Tensor> {
    let Some(kernel) = kernel else {
        return Ok(grad_out.clone());
    };
    let (planes, h, w) = check_map(grad_out.shape(), kernel)?;
    let mut gin = Tensor::zeros(grad_out.shape());
    let r = kernel.radius as isize;
    let kw = kernel.width();
    let g = grad_out.data();
    let dst = gin.data_mut();
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let go = g[base + y as usize * w + x as usize];
                if go == 0.0 {
                    continue;
                }
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let row = base + yy as usize * w;
                    let krow = (dy + r) as usize * kw;
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        dst[row + xx as usize] += go * kernel.weights[krow + (dx + r) as usize];
                    }
                }
            }
        }
    }
    Ok(gin)
}
