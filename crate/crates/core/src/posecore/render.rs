use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

use super::heatmap::to_pixel;
use super::{PoseVector, SkeletonSpec};

/// Planar RGB image with values in `[0, 1]`, stored `[channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn black(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; Self::CHANNELS * width * height] }
    }

    pub fn from_tensor(t: &Tensor) -> crate::Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != Self::CHANNELS {
            return Err(crate::Error::Dimension(format!("image needs 3 channels, got {c}")));
        }
        Ok(Self { width: w, height: h, data: t.data().to_vec() })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[Self::CHANNELS, self.height, self.width], self.data.clone()).expect("sized")
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let n = self.width * self.height;
        let i = row * self.width + col;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    /// Interleaved 8-bit RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push((self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StickStyle {
    /// Bone thickness in pixels.
    pub bone_width: f64,
    pub joint_radius: f64,
    pub color: [f64; 3],
}

impl StickStyle {
    /// 2 px bones and 1.5 px joints at width 32, scaled with the image.
    pub fn for_width(width: usize) -> Self {
        let k = width as f64 / 32.0;
        Self { bone_width: 2.0 * k, joint_radius: 1.5 * k, color: [1.0, 1.0, 1.0] }
    }

    pub fn with_color(self, color: [f64; 3]) -> Self {
        Self { color, ..self }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Draw bones as anti-aliased segments and joints as discs on black.
pub fn render_stick_figure(pose: &PoseVector, spec: &SkeletonSpec, width: usize, height: usize, style: &StickStyle) -> Image {
    render_figure(pose, &spec.bones, width, height, style)
}

/// [`render_stick_figure`] with an explicit bone list.
pub fn render_figure(pose: &PoseVector, bones: &[(usize, usize)], width: usize, height: usize, style: &StickStyle) -> Image {
    let joints: Vec<(f64, f64)> = (0..pose.joint_count())
        .map(|j| {
            let (x, y) = pose.joint(j);
            (to_pixel(x, width), to_pixel(y, height))
        })
        .collect();
    let half = style.bone_width / 2.0;
    let mut img = Image::black(width, height);
    let n = width * height;
    for row in 0..height {
        for col in 0..width {
            let p = (col as f64 + 0.5, row as f64 + 0.5);
            let mut cover: f64 = 0.0;
            for &(a, b) in bones {
                let d = segment_distance(p, joints[a], joints[b]);
                cover = cover.max((half - d + 0.5).clamp(0.0, 1.0));
            }
            for &j in &joints {
                let d = ((p.0 - j.0).powi(2) + (p.1 - j.1).powi(2)).sqrt();
                cover = cover.max((style.joint_radius - d + 0.5).clamp(0.0, 1.0));
            }
            if cover > 0.0 {
                let i = row * width + col;
                for c in 0..3 {
                    img.data[c * n + i] = cover * style.color[c];
                }
            }
        }
    }
    img
}
