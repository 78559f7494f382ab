//! Procedural motion classes, sequence files and fps subsampling.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pose_gan::LabeledPoses;
use crate::posecore::{normalize_pose, ClassId, PoseSequence, PoseVector, SkeletonSpec};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Inclusive range a jittered parameter is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn fixed(v: f64) -> Self {
        Range(v, v)
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        rng::uniform(rng, self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Displacement of one coordinate over normalized time `u ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// `amplitude · sin(2π·cycles·u + phase)`
    Sinusoid { amplitude: Range, cycles: Range, phase: Range },
    /// Linear from `from` to `to` over the whole sequence.
    Ramp { from: Range, to: Range },
    /// Linear from 0 to `to` until `until`, then held.
    RampHold { to: Range, until: Range },
    /// Constant offset.
    Hold { offset: Range },
}

#[derive(Debug, Clone, Copy)]
enum Drawn {
    Sinusoid { amplitude: f64, cycles: f64, phase: f64 },
    Ramp { from: f64, to: f64 },
    RampHold { to: f64, until: f64 },
    Hold(f64),
}

impl Primitive {
    fn draw(&self, rng: &mut Rng) -> Drawn {
        match self {
            Primitive::Sinusoid { amplitude, cycles, phase } => {
                Drawn::Sinusoid { amplitude: amplitude.draw(rng), cycles: cycles.draw(rng), phase: phase.draw(rng) }
            }
            Primitive::Ramp { from, to } => Drawn::Ramp { from: from.draw(rng), to: to.draw(rng) },
            Primitive::RampHold { to, until } => Drawn::RampHold { to: to.draw(rng), until: until.draw(rng).max(1e-6) },
            Primitive::Hold { offset } => Drawn::Hold(offset.draw(rng)),
        }
    }
}

impl Drawn {
    fn at(&self, u: f64) -> f64 {
        match *self {
            Drawn::Sinusoid { amplitude, cycles, phase } => amplitude * (std::f64::consts::TAU * cycles * u + phase).sin(),
            Drawn::Ramp { from, to } => from + (to - from) * u,
            Drawn::RampHold { to, until } => to * (u / until).min(1.0),
            Drawn::Hold(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMotion {
    pub joint: usize,
    pub axis: Axis,
    pub primitive: Primitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionClassSpec {
    pub name: String,
    pub motions: Vec<JointMotion>,
}

/// Global per-sequence variation applied before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceJitter {
    /// Raw-space body scale.
    pub scale: Range,
    /// Raw-space translation of the whole figure.
    pub offset: Range,
}

impl SequenceJitter {
    pub fn none() -> Self {
        Self { scale: Range::fixed(1.0), offset: Range::fixed(0.0) }
    }
}

impl Default for SequenceJitter {
    fn default() -> Self {
        Self { scale: Range(0.8, 1.25), offset: Range(-0.3, 0.3) }
    }
}

/// Rest pose of [`SkeletonSpec::desk`] in raw units (hip→neck length 0.4).
pub fn desk_rest_pose() -> Vec<f64> {
    vec![
        0.0, 0.0, // hip
        0.0, -0.4, // neck
        0.0, -0.55, // head
        -0.25, -0.15, // left hand
        0.25, -0.15, // right hand
        -0.15, 0.5, // left foot
        0.15, 0.5, // right foot
    ]
}

fn motion(joint: usize, axis: Axis, primitive: Primitive) -> JointMotion {
    JointMotion { joint, axis, primitive }
}

fn sine(amp: (f64, f64), cycles: (f64, f64)) -> Primitive {
    Primitive::Sinusoid {
        amplitude: Range(amp.0, amp.1),
        cycles: Range(cycles.0, cycles.1),
        phase: Range(-0.3, 0.3),
    }
}

fn hold(lo: f64, hi: f64) -> Primitive {
    Primitive::Hold { offset: Range(lo, hi) }
}

/// Five classes covering periodic, transient and static motion.
pub fn default_class_specs() -> Vec<MotionClassSpec> {
    use Axis::{X, Y};
    vec![
        MotionClassSpec {
            name: "march".into(),
            motions: vec![
                motion(5, Y, sine((0.12, 0.16), (1.5, 2.0))),
                motion(6, Y, sine((-0.16, -0.12), (1.5, 2.0))),
                motion(3, X, sine((0.08, 0.12), (1.5, 2.0))),
                motion(4, X, sine((-0.12, -0.08), (1.5, 2.0))),
                motion(3, X, hold(0.1, 0.14)),
                motion(4, X, hold(-0.14, -0.1)),
                motion(5, Y, hold(-0.08, -0.05)),
                motion(6, Y, hold(-0.08, -0.05)),
            ],
        },
        MotionClassSpec {
            name: "wave".into(),
            motions: vec![
                motion(4, Y, hold(-0.45, -0.38)),
                motion(4, X, hold(0.0, 0.05)),
                motion(4, X, sine((0.12, 0.18), (2.0, 3.0))),
            ],
        },
        MotionClassSpec {
            name: "crouch".into(),
            motions: vec![
                motion(5, Y, Primitive::Ramp { from: Range::fixed(0.0), to: Range(-0.3, -0.25) }),
                motion(6, Y, Primitive::Ramp { from: Range::fixed(0.0), to: Range(-0.3, -0.25) }),
                motion(5, X, Primitive::Ramp { from: Range::fixed(0.0), to: Range(-0.15, -0.1) }),
                motion(6, X, Primitive::Ramp { from: Range::fixed(0.0), to: Range(0.1, 0.15) }),
                motion(3, Y, hold(0.1, 0.14)),
                motion(4, Y, hold(0.1, 0.14)),
            ],
        },
        MotionClassSpec {
            name: "crouch-hold".into(),
            motions: vec![
                motion(5, Y, Primitive::RampHold { to: Range(-0.3, -0.25), until: Range(0.3, 0.45) }),
                motion(6, Y, Primitive::RampHold { to: Range(-0.3, -0.25), until: Range(0.3, 0.45) }),
                motion(5, X, Primitive::RampHold { to: Range(-0.15, -0.1), until: Range(0.3, 0.45) }),
                motion(6, X, Primitive::RampHold { to: Range(0.1, 0.15), until: Range(0.3, 0.45) }),
                motion(3, X, hold(0.1, 0.14)),
                motion(4, X, hold(-0.14, -0.1)),
                motion(3, Y, hold(-0.2, -0.15)),
                motion(4, Y, hold(-0.2, -0.15)),
            ],
        },
        MotionClassSpec {
            name: "sway".into(),
            motions: vec![
                motion(1, X, sine((0.1, 0.14), (1.0, 1.5))),
                motion(2, X, sine((0.14, 0.2), (1.0, 1.5))),
                motion(3, X, hold(-0.25, -0.2)),
                motion(4, X, hold(0.2, 0.25)),
                motion(3, Y, hold(-0.15, -0.1)),
                motion(4, Y, hold(-0.15, -0.1)),
            ],
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<PoseSequence>,
    pub classes: Vec<String>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn joint_count(&self) -> usize {
        self.sequences.first().map_or(0, PoseSequence::joint_count)
    }

    pub fn sequence_length(&self) -> usize {
        self.sequences.first().map_or(0, PoseSequence::len)
    }

    pub fn split(&self, which: Split) -> Vec<&PoseSequence> {
        self.sequences.iter().zip(&self.splits).filter(|(_, s)| **s == which).map(|(q, _)| q).collect()
    }

    /// A dataset holding only one split.
    pub fn subset(&self, which: Split) -> Dataset {
        let keep: Vec<usize> = (0..self.sequences.len()).filter(|&i| self.splits[i] == which).collect();
        Dataset {
            sequences: keep.iter().map(|&i| self.sequences[i].clone()).collect(),
            classes: self.classes.clone(),
            splits: keep.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    /// Every frame of the chosen split, labeled by its sequence's class.
    pub fn frames(&self, which: Option<Split>) -> LabeledPoses {
        let mut poses = Vec::new();
        let mut labels = Vec::new();
        for (s, sp) in self.sequences.iter().zip(&self.splits) {
            if which.is_some_and(|w| w != *sp) {
                continue;
            }
            for f in &s.frames {
                poses.push(f.clone());
                labels.push(s.class);
            }
        }
        LabeledPoses { poses, labels, classes: self.classes.len() }
    }

    /// Sequences must share a length and every class must have one.
    pub fn validate_uniform(&self) -> Result<()> {
        let t = self.sequence_length();
        if let Some(i) = self.sequences.iter().position(|s| s.len() != t) {
            return Err(Error::Dimension(format!("sequence {i} has {} frames, expected {t}", self.sequences[i].len())));
        }
        let mut seen = vec![false; self.classes.len()];
        for s in &self.sequences {
            seen[s.class.0] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::MissingClass(self.classes[c].clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub per_class: usize,
    pub length: usize,
    pub fps: f64,
    /// Fraction of each class assigned to the test split.
    pub test_fraction: f64,
    pub jitter: SequenceJitter,
    /// When false every parameter range collapses to its midpoint.
    pub vary: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { per_class: 40, length: 16, fps: 16.0, test_fraction: 0.25, jitter: SequenceJitter::default(), vary: true }
    }
}

fn collapse(p: &Primitive) -> Primitive {
    let mid = |r: &Range| Range::fixed(0.5 * (r.0 + r.1));
    match p {
        Primitive::Sinusoid { amplitude, cycles, phase } => Primitive::Sinusoid { amplitude: mid(amplitude), cycles: mid(cycles), phase: mid(phase) },
        Primitive::Ramp { from, to } => Primitive::Ramp { from: mid(from), to: mid(to) },
        Primitive::RampHold { to, until } => Primitive::RampHold { to: mid(to), until: mid(until) },
        Primitive::Hold { offset } => Primitive::Hold { offset: mid(offset) },
    }
}

/// Build a labeled, normalized dataset from class specs.
pub fn generate_dataset(
    specs: &[MotionClassSpec],
    skeleton: &SkeletonSpec,
    rest_pose: &[f64],
    opts: &GenerateOptions,
    seed: u64,
) -> Result<Dataset> {
    if opts.per_class < 2 {
        return Err(Error::Invalid("per_class must be at least 2 so both splits are populated".into()));
    }
    if opts.length == 0 {
        return Err(Error::Invalid("sequence length must be at least 1".into()));
    }
    if rest_pose.len() != skeleton.pose_width() {
        return Err(Error::Dimension(format!("rest pose width {} != {}", rest_pose.len(), skeleton.pose_width())));
    }
    let mut rng = rng::substream(seed, "synthdata");
    let n_test = ((opts.per_class as f64 * opts.test_fraction).round() as usize).clamp(1, opts.per_class - 1);
    let mut sequences = Vec::new();
    let mut splits = Vec::new();
    for (ci, spec) in specs.iter().enumerate() {
        for k in 0..opts.per_class {
            let motions: Vec<(usize, Axis, Drawn)> = spec
                .motions
                .iter()
                .map(|m| {
                    let prim = if opts.vary { m.primitive } else { collapse(&m.primitive) };
                    (m.joint, m.axis, prim.draw(&mut rng))
                })
                .collect();
            let jitter = if opts.vary { opts.jitter } else { SequenceJitter::none() };
            let scale = jitter.scale.draw(&mut rng);
            let (ox, oy) = (jitter.offset.draw(&mut rng), jitter.offset.draw(&mut rng));
            let mut frames = Vec::with_capacity(opts.length);
            for t in 0..opts.length {
                let u = if opts.length > 1 { t as f64 / (opts.length - 1) as f64 } else { 0.0 };
                let mut p = rest_pose.to_vec();
                for (j, axis, d) in &motions {
                    let idx = 2 * j + if *axis == Axis::X { 0 } else { 1 };
                    p[idx] += d.at(u);
                }
                let raw: Vec<f64> = p.chunks(2).flat_map(|q| [q[0] * scale + ox, q[1] * scale + oy]).collect();
                frames.push(normalize_pose(&PoseVector::new(raw)?, skeleton)?);
            }
            sequences.push(PoseSequence::new(frames, ClassId(ci), opts.fps)?);
            splits.push(if k < opts.per_class - n_test { Split::Train } else { Split::Test });
        }
    }
    Ok(Dataset { sequences, classes: specs.iter().map(|s| s.name.clone()).collect(), splits })
}

/// The default five-class dataset on the desk skeleton.
pub fn default_dataset(opts: &GenerateOptions, seed: u64) -> Result<Dataset> {
    generate_dataset(&default_class_specs(), &SkeletonSpec::desk(), &desk_rest_pose(), opts, seed)
}

/// Two classes on a two-joint skeleton, each a pair of fixed poses plus
/// Gaussian noise. Poses are `(0, 0, x, y)` with the tip displaced ±0.1 from the class mean.
pub fn toy_pose_set(per_mode: usize, noise: f64, seed: u64) -> LabeledPoses {
    let means = [[0.0, 0.0, -0.5, 0.3], [0.0, 0.0, 0.5, -0.3]];
    let mut rng = rng::substream(seed, "toy_pose_set");
    let mut poses = Vec::new();
    let mut labels = Vec::new();
    for (c, m) in means.iter().enumerate() {
        for mode in [-0.1, 0.1] {
            for _ in 0..per_mode {
                let coords: Vec<f64> = m
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + if i == 3 { mode } else { 0.0 } + noise * rng::normal(&mut rng))
                    .collect();
                poses.push(PoseVector::new(coords).expect("finite"));
                labels.push(ClassId(c));
            }
        }
    }
    LabeledPoses { poses, labels, classes: 2 }
}

/// Two classes of a two-joint figure whose tip swings around the root
/// (slow/wide vs fast/narrow), `length` frames each.
pub fn toy_oscillation_dataset(per_class: usize, length: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng::substream(seed, "toy_oscillation");
    let mut sequences = Vec::new();
    let mut splits = Vec::new();
    let n_test = (per_class / 4).max(1);
    for (c, (amp, cycles)) in [(0.6, 1.0), (0.3, 2.0)].into_iter().enumerate() {
        for k in 0..per_class {
            let a = amp * rng::uniform(&mut rng, 0.9, 1.1);
            let f = cycles * rng::uniform(&mut rng, 0.9, 1.1);
            let phase = rng::uniform(&mut rng, -0.5, 0.5);
            let frames = (0..length)
                .map(|t| {
                    let u = t as f64 / (length.max(2) - 1) as f64;
                    let ang = a * (std::f64::consts::TAU * f * u + phase).sin();
                    PoseVector::new(vec![0.0, 0.0, 0.5 * ang.sin(), -0.5 * ang.cos()])
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(PoseSequence::new(frames, ClassId(c), 16.0)?);
            splits.push(if k < per_class - n_test { Split::Train } else { Split::Test });
        }
    }
    Ok(Dataset { sequences, classes: vec!["slow".into(), "fast".into()], splits })
}

/// Keep frames at nearest-index stride `fps / target_fps`.
pub fn subsample_fps(seq: &PoseSequence, target_fps: f64) -> Result<PoseSequence> {
    if !(target_fps > 0.0) || target_fps > seq.fps {
        return Err(Error::Invalid(format!("target fps {target_fps} must be in (0, {}]", seq.fps)));
    }
    let stride = seq.fps / target_fps;
    let count = ((seq.len() as f64 / stride).floor() as usize).max(1);
    let frames = (0..count)
        .map(|k| {
            let idx = ((k as f64 * stride).round() as usize).min(seq.len() - 1);
            seq.frames[idx].clone()
        })
        .collect();
    PoseSequence::new(frames, seq.class, target_fps)
}

#[derive(Serialize, Deserialize)]
struct Record {
    class: String,
    fps: f64,
    frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// Serialize one sequence as a line of the sequence file format.
pub fn sequence_to_line(seq: &PoseSequence, classes: &[String], split: Option<Split>) -> Result<String> {
    let class = classes
        .get(seq.class.0)
        .ok_or_else(|| Error::Dimension(format!("class {} missing from vocabulary", seq.class.0)))?
        .clone();
    let rec = Record { class, fps: seq.fps, frames: seq.frames.iter().map(|f| f.coords().to_vec()).collect(), split };
    serde_json::to_string(&rec).map_err(|e| Error::Invalid(e.to_string()))
}

/// One line per sequence; the split tag is omitted when `ds.splits` is empty.
pub fn write_sequences<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    if !ds.splits.is_empty() && ds.splits.len() != ds.sequences.len() {
        return Err(Error::Dimension(format!("{} split tags for {} sequences", ds.splits.len(), ds.sequences.len())));
    }
    for (i, s) in ds.sequences.iter().enumerate() {
        writeln!(out, "{}", sequence_to_line(s, &ds.classes, ds.splits.get(i).copied())?)?;
    }
    Ok(())
}

pub fn save_sequences(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sequences(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parse the line-delimited format. Classes are numbered in order of first
/// appearance; records without a split tag count as training data.
pub fn read_sequences<R: BufRead>(input: R) -> Result<Dataset> {
    let mut ds = Dataset { sequences: Vec::new(), classes: Vec::new(), splits: Vec::new() };
    let mut joints = None;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Format { line: line_no, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        if rec.frames.is_empty() {
            return Err(fail("sequence has no frames".into()));
        }
        let width = rec.frames[0].len();
        if width == 0 || !width.is_multiple_of(2) {
            return Err(fail(format!("frame 0 has {width} coordinates; expected an even, nonzero count")));
        }
        if let Some(t) = rec.frames.iter().position(|f| f.len() != width) {
            return Err(fail(format!("frame {t} has {} coordinates, frame 0 has {width}", rec.frames[t].len())));
        }
        match joints {
            None => joints = Some(width / 2),
            Some(j) if j != width / 2 => return Err(fail(format!("{} joints, earlier records have {j}", width / 2))),
            _ => {}
        }
        let class = match ds.classes.iter().position(|c| *c == rec.class) {
            Some(c) => c,
            None => {
                ds.classes.push(rec.class.clone());
                ds.classes.len() - 1
            }
        };
        let frames = rec
            .frames
            .into_iter()
            .enumerate()
            .map(|(t, f)| PoseVector::new(f).map_err(|e| fail(format!("frame {t}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let seq = PoseSequence::new(frames, ClassId(class), rec.fps).map_err(|e| fail(e.to_string()))?;
        ds.sequences.push(seq);
        ds.splits.push(rec.split.unwrap_or(Split::Train));
    }
    if ds.sequences.is_empty() {
        return Err(Error::Format { line: 0, message: "no sequences in file".into() });
    }
    Ok(ds)
}

pub fn load_sequences(path: &Path) -> Result<Dataset> {
    read_sequences(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        default_dataset(&GenerateOptions { per_class: 4, ..Default::default() }, 11).unwrap()
    }

    #[test]
    fn bookkeeping() {
        let ds = default_dataset(&GenerateOptions::default(), 1).unwrap();
        assert_eq!(ds.sequences.len(), 200);
        assert!(ds.sequences.iter().all(|s| s.len() == 16));
        for c in 0..5 {
            for sp in [Split::Train, Split::Test] {
                assert!(ds.sequences.iter().zip(&ds.splits).any(|(s, x)| s.class.0 == c && *x == sp));
            }
        }
        ds.validate_uniform().unwrap();
    }

    #[test]
    fn coordinates_stay_in_unit_box_and_are_normalized() {
        let ds = default_dataset(&GenerateOptions::default(), 2).unwrap();
        let spec = SkeletonSpec::desk();
        for s in &ds.sequences {
            for f in &s.frames {
                assert!(f.coords().iter().all(|v| v.abs() <= 1.0), "{f:?}");
                let again = normalize_pose(f, &spec).unwrap();
                assert!(again.distance(f) < 1e-12);
            }
        }
    }

    #[test]
    fn zero_jitter_gives_identical_class_members() {
        let ds = default_dataset(&GenerateOptions { per_class: 3, vary: false, ..Default::default() }, 3).unwrap();
        for c in 0..5 {
            let members: Vec<_> = ds.sequences.iter().filter(|s| s.class.0 == c).collect();
            assert!(members.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(small(), small());
        let other = default_dataset(&GenerateOptions { per_class: 4, ..Default::default() }, 12).unwrap();
        assert_ne!(small(), other);
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small();
        let mut buf = Vec::new();
        write_sequences(&ds, &mut buf).unwrap();
        let back = read_sequences(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn parse_errors_name_the_problem() {
        let empty = r#"{"class":"a","fps":16,"frames":[]}"#;
        assert!(matches!(read_sequences(empty.as_bytes()), Err(Error::Format { line: 1, .. })));
        let ragged = "{\"class\":\"a\",\"fps\":16,\"frames\":[[0,0]]}\n{\"class\":\"a\",\"fps\":16,\"frames\":[[0,0,1,1],[0,0]]}";
        match read_sequences(ragged.as_bytes()) {
            Err(Error::Format { line: 2, message }) => assert!(message.contains("frame 1"), "{message}"),
            other => panic!("{other:?}"),
        }
        assert!(read_sequences("".as_bytes()).is_err());
        assert!(read_sequences("not json".as_bytes()).is_err());
    }

    #[test]
    fn subsampling() {
        let frames: Vec<PoseVector> = (0..50).map(|i| PoseVector::new(vec![i as f64, 0.0]).unwrap()).collect();
        let s = PoseSequence::new(frames, ClassId(0), 50.0).unwrap();
        let sub = subsample_fps(&s, 16.0).unwrap();
        assert_eq!(sub.len(), 16);
        assert_eq!(sub.fps, 16.0);
        // stride 3.125 with nearest-index rounding
        assert_eq!(sub.frames[1].coords()[0], 3.0);
        assert_eq!(sub.frames[3].coords()[0], 9.0);
        assert_eq!(subsample_fps(&s, 50.0).unwrap(), s);
        assert!(subsample_fps(&s, 60.0).is_err());

        let frames: Vec<PoseVector> = (0..10).map(|i| PoseVector::new(vec![i as f64, 0.0]).unwrap()).collect();
        let s = PoseSequence::new(frames, ClassId(0), 10.0).unwrap();
        let idx: Vec<f64> = subsample_fps(&s, 5.0).unwrap().frames.iter().map(|f| f.coords()[0]).collect();
        assert_eq!(idx, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn class_means_are_separable() {
        // Nearest class-mean on per-sequence mean poses.
        let ds = default_dataset(&GenerateOptions::default(), 4).unwrap();
        let mean_pose = |s: &PoseSequence| {
            let w = s.frames[0].coords().len();
            let mut m = vec![0.0; w];
            for f in &s.frames {
                for (a, b) in m.iter_mut().zip(f.coords()) {
                    *a += b / s.len() as f64;
                }
            }
            PoseVector::new(m).unwrap()
        };
        let train = ds.split(Split::Train);
        let mut centroids = vec![vec![0.0; 14]; 5];
        let mut counts = [0usize; 5];
        for s in &train {
            counts[s.class.0] += 1;
            for (a, b) in centroids[s.class.0].iter_mut().zip(mean_pose(s).coords()) {
                *a += b;
            }
        }
        let centroids: Vec<PoseVector> = centroids
            .into_iter()
            .zip(counts)
            .map(|(c, n)| PoseVector::new(c.into_iter().map(|v| v / n as f64).collect()).unwrap())
            .collect();
        let test = ds.split(Split::Test);
        let correct = test
            .iter()
            .filter(|s| {
                let m = mean_pose(s);
                let best = (0..5).min_by(|&a, &b| m.distance(&centroids[a]).total_cmp(&m.distance(&centroids[b]))).unwrap();
                best == s.class.0
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.95, "{correct}/{}", test.len());
    }
}
