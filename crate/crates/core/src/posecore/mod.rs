//! Pose data model, normalization, heat maps and stick-figure rendering.

mod heatmap;
mod render;

pub use heatmap::{default_sigma, heatmap_encode, HeatMapStack};
pub use render::{render_figure, render_stick_figure, Image, StickStyle};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Joint names and bone topology of a 2-D skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    /// Parent-child joint index pairs forming a tree rooted at `hip_index`.
    pub bones: Vec<(usize, usize)>,
    pub hip_index: usize,
    /// Joint pair whose length fixes the scale of a normalized pose.
    pub reference_bone: (usize, usize),
    /// Length of `reference_bone` after normalization.
    pub reference_length: f64,
}

impl SkeletonSpec {
    pub fn new(
        joint_names: Vec<String>,
        bones: Vec<(usize, usize)>,
        hip_index: usize,
        reference_bone: (usize, usize),
        reference_length: f64,
    ) -> Result<Self> {
        let j = joint_names.len();
        if j < 2 {
            return Err(Error::Invalid(format!("skeleton needs at least 2 joints, got {j}")));
        }
        if hip_index >= j || reference_bone.0 >= j || reference_bone.1 >= j || reference_bone.0 == reference_bone.1 {
            return Err(Error::Invalid("hip or reference bone index out of range".into()));
        }
        if !(reference_length > 0.0 && reference_length.is_finite()) {
            return Err(Error::Invalid(format!("reference length {reference_length} must be positive")));
        }
        if bones.len() != j - 1 {
            return Err(Error::Invalid(format!("a tree over {j} joints has {} bones, got {}", j - 1, bones.len())));
        }
        // Every joint must be reachable from the hip through the bone list.
        let mut seen = vec![false; j];
        seen[hip_index] = true;
        let mut stack = vec![hip_index];
        while let Some(n) = stack.pop() {
            for &(a, b) in &bones {
                if a >= j || b >= j {
                    return Err(Error::Invalid(format!("bone ({a}, {b}) out of range")));
                }
                for (from, to) in [(a, b), (b, a)] {
                    if from == n && !seen[to] {
                        seen[to] = true;
                        stack.push(to);
                    }
                }
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!("joint {orphan} is not connected to the hip")));
        }
        Ok(Self { joint_names, bones, hip_index, reference_bone, reference_length })
    }

    /// Seven joints: hip, neck, head, two hands, two feet; six bones with
    /// hip→neck as the reference bone.
    pub fn desk() -> Self {
        let names = ["hip", "neck", "head", "left_hand", "right_hand", "left_foot", "right_foot"];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            vec![(0, 1), (1, 2), (1, 3), (1, 4), (0, 5), (0, 6)],
            0,
            (0, 1),
            0.4,
        )
        .expect("valid default skeleton")
    }

    /// Two joints joined by one bone; used by toy problems.
    pub fn pair() -> Self {
        Self::new(vec!["root".into(), "tip".into()], vec![(0, 1)], 0, (0, 1), 0.5).expect("valid pair skeleton")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    /// Width of a pose vector, `2J`.
    pub fn pose_width(&self) -> usize {
        2 * self.joint_count()
    }
}

/// Joint coordinates laid out as `(x₁, y₁, …, x_J, y_J)`; `y` grows downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseVector(Vec<f64>);

impl PoseVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || !coords.len().is_multiple_of(2) {
            return Err(Error::Dimension(format!("pose vector needs an even, nonzero length, got {}", coords.len())));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("pose coordinates must be finite".into()));
        }
        Ok(Self(coords))
    }

    pub fn zeros(joints: usize) -> Self {
        Self(vec![0.0; 2 * joints])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn joint_count(&self) -> usize {
        self.0.len() / 2
    }

    pub fn joint(&self, j: usize) -> (f64, f64) {
        (self.0[2 * j], self.0[2 * j + 1])
    }

    pub fn distance(&self, other: &PoseVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// Index into a class vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn one_hot(self, classes: usize) -> Result<Vec<f64>> {
        if self.0 >= classes {
            return Err(Error::Dimension(format!("class {} out of range for {classes} classes", self.0)));
        }
        let mut v = vec![0.0; classes];
        v[self.0] = 1.0;
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<PoseVector>,
    pub class: ClassId,
    pub fps: f64,
}

impl PoseSequence {
    pub fn new(frames: Vec<PoseVector>, class: ClassId, fps: f64) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Invalid("a sequence needs at least one frame".into()));
        };
        let width = first.coords().len();
        if let Some(t) = frames.iter().position(|f| f.coords().len() != width) {
            return Err(Error::Dimension(format!("frame {t} has {} coordinates, expected {width}", frames[t].coords().len())));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, class, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames[0].joint_count()
    }

    /// Mean L2 distance between consecutive frames.
    pub fn mean_step(&self) -> f64 {
        if self.frames.len() < 2 {
            return 0.0;
        }
        let total: f64 = self.frames.windows(2).map(|w| w[0].distance(&w[1])).sum();
        total / (self.frames.len() - 1) as f64
    }
}

/// Translate the hip to the origin and scale so the reference bone has
/// `spec.reference_length`.
pub fn normalize_pose(raw: &PoseVector, spec: &SkeletonSpec) -> Result<PoseVector> {
    if raw.joint_count() != spec.joint_count() {
        return Err(Error::Dimension(format!("pose has {} joints, skeleton {}", raw.joint_count(), spec.joint_count())));
    }
    let (hx, hy) = raw.joint(spec.hip_index);
    let (ax, ay) = raw.joint(spec.reference_bone.0);
    let (bx, by) = raw.joint(spec.reference_bone.1);
    let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
    if len < 1e-12 {
        return Err(Error::Invalid("reference bone has zero length".into()));
    }
    let k = spec.reference_length / len;
    let coords = raw
        .coords()
        .chunks(2)
        .flat_map(|p| [(p[0] - hx) * k, (p[1] - hy) * k])
        .collect();
    PoseVector::new(coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_spec() -> SkeletonSpec {
        SkeletonSpec { reference_length: 1.0, ..SkeletonSpec::desk() }
    }

    fn raw_pose() -> PoseVector {
        PoseVector::new(vec![5.0, 7.0, 5.0, 5.0, 5.0, 4.0, 4.0, 6.0, 6.0, 6.0, 4.5, 9.0, 5.5, 9.0]).unwrap()
    }

    #[test]
    fn hip_moves_to_origin() {
        let n = normalize_pose(&raw_pose(), &unit_spec()).unwrap();
        assert_eq!(n.joint(0), (0.0, 0.0));
    }

    #[test]
    fn reference_length_two_halves_coordinates() {
        // hip→neck has length 2 in raw_pose.
        let raw = raw_pose();
        let n = normalize_pose(&raw, &unit_spec()).unwrap();
        for j in 0..7 {
            let (x, y) = raw.joint(j);
            let (nx, ny) = n.joint(j);
            assert!((nx - (x - 5.0) / 2.0).abs() < 1e-15 && (ny - (y - 7.0) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let spec = SkeletonSpec::desk();
        let once = normalize_pose(&raw_pose(), &spec).unwrap();
        let twice = normalize_pose(&once, &spec).unwrap();
        assert!(once.distance(&twice) < 1e-12);
    }

    #[test]
    fn zero_reference_bone_is_an_error() {
        let p = PoseVector::new(vec![1.0; 14]).unwrap();
        assert!(normalize_pose(&p, &SkeletonSpec::desk()).is_err());
    }

    #[test]
    fn skeleton_validation() {
        assert!(SkeletonSpec::new(vec!["a".into()], vec![], 0, (0, 0), 1.0).is_err());
        let names = vec!["a".into(), "b".into(), "c".into()];
        assert!(SkeletonSpec::new(names.clone(), vec![(0, 1), (0, 1)], 0, (0, 1), 1.0).is_err());
        assert!(SkeletonSpec::new(names, vec![(0, 1), (1, 2)], 0, (0, 1), 1.0).is_ok());
    }

    #[test]
    fn one_hot_sums_to_one() {
        assert_eq!(ClassId(2).one_hot(4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(ClassId(4).one_hot(4).is_err());
    }

    proptest! {
        #[test]
        fn normalize_ignores_translation_and_scale(dx in -50.0..50.0f64, dy in -50.0..50.0f64, s in 0.05..20.0f64) {
            let spec = SkeletonSpec::desk();
            let raw = raw_pose();
            let moved = PoseVector::new(raw.coords().chunks(2).flat_map(|p| [p[0] * s + dx, p[1] * s + dy]).collect()).unwrap();
            let a = normalize_pose(&raw, &spec).unwrap();
            let b = normalize_pose(&moved, &spec).unwrap();
            for (x, y) in a.coords().iter().zip(b.coords()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
