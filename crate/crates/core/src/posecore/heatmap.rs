use crate::numerics::Tensor;
use crate::{Error, Result};

use super::PoseVector;

/// Per-joint Gaussian maps, stored `[joint][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMapStack {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    maps: Vec<f64>,
}

impl HeatMapStack {
    pub fn joint_count(&self) -> usize {
        self.maps.len() / (self.width * self.height)
    }

    pub fn map(&self, j: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.maps[j * n..(j + 1) * n]
    }

    pub fn at(&self, j: usize, row: usize, col: usize) -> f64 {
        self.map(j)[row * self.width + col]
    }

    /// `[J, h, w]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.joint_count(), self.height, self.width], self.maps.clone()).expect("sized")
    }
}

/// 1.5 pixels at width 32, proportional elsewhere.
pub fn default_sigma(width: usize) -> f64 {
    1.5 * width as f64 / 32.0
}

/// Map a normalized coordinate in `[-1, 1]` onto `[0, size]`.
pub(crate) fn to_pixel(v: f64, size: usize) -> f64 {
    (v + 1.0) * 0.5 * size as f64
}

/// Evaluate `exp(-‖p − l_j‖² / σ²)` at every pixel centre `(i + ½, j + ½)`.
pub fn heatmap_encode(pose: &PoseVector, sigma: f64, width: usize, height: usize) -> Result<HeatMapStack> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Invalid("heat map size must be at least 1x1".into()));
    }
    let inv = 1.0 / (sigma * sigma);
    let mut maps = Vec::with_capacity(pose.joint_count() * width * height);
    for j in 0..pose.joint_count() {
        let (x, y) = pose.joint(j);
        let (lx, ly) = (to_pixel(x, width), to_pixel(y, height));
        for row in 0..height {
            let dy = row as f64 + 0.5 - ly;
            for col in 0..width {
                let dx = col as f64 + 0.5 - lx;
                maps.push((-(dx * dx + dy * dy) * inv).exp());
            }
        }
    }
    Ok(HeatMapStack { width, height, sigma, maps })
}
