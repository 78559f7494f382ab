//! Pose/motion two-stream action classifier and Inception Scores.

use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Mlp, Params};
use crate::numerics::{backward, log_sum_exp, AdamHyper, AdamState, Tape, Tensor};
use crate::pose_gan::one_hot_batch;
use crate::posecore::{ClassId, PoseSequence};
use crate::rng;
use crate::synthdata::{Dataset, Split};
use crate::{Error, Result};

/// Default number of splits for the Inception Score.
pub const DEFAULT_SPLITS: usize = 10;
/// Default number of generated sequences scored per evaluation.
pub const DEFAULT_SAMPLES: usize = 320;

/// Appearance stream over single poses and motion stream over pose deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionClassifier {
    pub pose: Mlp,
    pub motion: Mlp,
    pub joints: usize,
    pub classes: usize,
}

fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (r, c) = logits.dims2()?;
    Ok((0..r)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            row.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

fn frames_tensor(seq: &PoseSequence) -> Result<Tensor> {
    let w = 2 * seq.joint_count();
    Ok(Tensor::matrix(seq.len(), w, seq.frames.iter().flat_map(|f| f.coords().iter().copied()).collect())?)
}

/// Frame differences in units per second.
fn deltas_tensor(seq: &PoseSequence) -> Result<Tensor> {
    let w = 2 * seq.joint_count();
    let mut data = Vec::with_capacity((seq.len() - 1) * w);
    for p in seq.frames.windows(2) {
        data.extend(p[1].coords().iter().zip(p[0].coords()).map(|(b, a)| (b - a) * seq.fps));
    }
    Ok(Tensor::matrix(seq.len() - 1, w, data)?)
}

impl ActionClassifier {
    pub fn new(joints: usize, classes: usize, hidden: usize, rng: &mut rng::Rng) -> Self {
        let widths = [2 * joints, hidden, classes];
        Self {
            pose: Mlp::init(&widths, Activation::LeakyRelu, Activation::Identity, rng),
            motion: Mlp::init(&widths, Activation::LeakyRelu, Activation::Identity, rng),
            joints,
            classes,
        }
    }

    fn check(&self, seq: &PoseSequence) -> Result<()> {
        if seq.joint_count() != self.joints {
            return Err(Error::Dimension(format!("sequence has {} joints, classifier {}", seq.joint_count(), self.joints)));
        }
        Ok(())
    }

    /// Pose-stream class distribution of every frame.
    pub fn frame_distributions(&self, seq: &PoseSequence) -> Result<Vec<Vec<f64>>> {
        self.check(seq)?;
        softmax_rows(&self.pose.eval(frames_tensor(seq)?)?)
    }

    /// Softmax of the averaged mean log-probabilities of the two streams.
    /// A single-frame sequence uses the pose stream alone.
    pub fn video_distribution(&self, seq: &PoseSequence) -> Result<Vec<f64>> {
        self.check(seq)?;
        let mean_logp = |logits: Tensor| -> Result<Vec<f64>> {
            let (r, c) = logits.dims2()?;
            let mut m = vec![0.0; c];
            for i in 0..r {
                for (a, b) in m.iter_mut().zip(log_softmax(&logits.data()[i * c..(i + 1) * c])) {
                    *a += b / r as f64;
                }
            }
            Ok(m)
        };
        let pose = mean_logp(self.pose.eval(frames_tensor(seq)?)?)?;
        let fused = if seq.len() >= 2 {
            let motion = mean_logp(self.motion.eval(deltas_tensor(seq)?)?)?;
            pose.iter().zip(&motion).map(|(a, b)| 0.5 * (a + b)).collect()
        } else {
            pose
        };
        let lse = log_sum_exp(&fused);
        Ok(fused.iter().map(|v| (v - lse).exp()).collect())
    }

    pub fn classify(&self, seq: &PoseSequence) -> Result<ClassId> {
        let d = self.video_distribution(seq)?;
        Ok(ClassId((0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b])).expect("classes ≥ 1")))
    }

    /// Fraction of sequences whose fused argmax equals their label.
    pub fn accuracy(&self, seqs: &[&PoseSequence]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut hits = 0;
        for s in seqs {
            if self.classify(s)? == s.class {
                hits += 1;
            }
        }
        Ok(hits as f64 / seqs.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 40,
            batch_size: 64,
            adam: AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_factor: 1.0, decay_epoch: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub classifier: ActionClassifier,
    /// Video-level accuracy on the test split.
    pub test_accuracy: f64,
    pub train_accuracy: f64,
}

fn train_stream(mlp: &mut Mlp, x: &Tensor, labels: &[ClassId], classes: usize, cfg: &ClassifierConfig, rng: &mut rng::Rng) -> Result<()> {
    let (n, w) = x.dims2()?;
    let mut opt = AdamState::new(cfg.adam, &mlp.params());
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        let order = rng::permutation(rng, n);
        for batch in order.chunks(cfg.batch_size) {
            let xb = Tensor::matrix(batch.len(), w, batch.iter().flat_map(|&i| x.data()[i * w..(i + 1) * w].iter().copied()).collect())?;
            let yb = one_hot_batch(&batch.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes)?;
            let mut tape = Tape::new();
            let ids = mlp.bind(&mut tape)?;
            let xi = tape.leaf(xb)?;
            let l = mlp.forward(&mut tape, &ids, xi)?;
            let lp = tape.log_softmax_rows(l)?;
            let picked = tape.mul_const(lp, yb)?;
            let s = tape.sum(picked)?;
            let loss = tape.scale(s, -1.0 / batch.len() as f64)?;
            let mut g = backward(&tape, loss, &ids)?;
            let grads: Vec<Tensor> = ids.iter().map(|i| g.take(*i).expect("requested")).collect();
            opt.step(&mut mlp.params_mut(), &grads)?;
        }
    }
    Ok(())
}

/// Cross-entropy training of both streams on the train split.
pub fn train_classifier(ds: &Dataset, cfg: &ClassifierConfig, seed: u64) -> Result<TrainedClassifier> {
    if ds.class_count() < 2 {
        return Err(Error::Invalid(format!("a classifier needs at least 2 classes, dataset has {}", ds.class_count())));
    }
    let train = ds.split(Split::Train);
    let test = ds.split(Split::Test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid("dataset needs both train and test sequences".into()));
    }
    let joints = ds.joint_count();
    let mut init = rng::substream(seed, "evalscore/init");
    let mut rng = rng::substream(seed, "evalscore/train");
    let mut clf = ActionClassifier::new(joints, ds.class_count(), cfg.hidden, &mut init);

    let w = 2 * joints;
    let (mut fx, mut fy, mut dx, mut dy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &train {
        for f in &s.frames {
            fx.extend_from_slice(f.coords());
            fy.push(s.class);
        }
        if s.len() >= 2 {
            dx.extend_from_slice(deltas_tensor(s)?.data());
            dy.extend(std::iter::repeat_n(s.class, s.len() - 1));
        }
    }
    let classes = ds.class_count();
    train_stream(&mut clf.pose, &Tensor::matrix(fy.len(), w, fx)?, &fy, classes, cfg, &mut rng)?;
    if !dy.is_empty() {
        train_stream(&mut clf.motion, &Tensor::matrix(dy.len(), w, dx)?, &dy, classes, cfg, &mut rng)?;
    }
    let test_accuracy = clf.accuracy(&test)?;
    let train_accuracy = clf.accuracy(&train)?;
    Ok(TrainedClassifier { classifier: clf, test_accuracy, train_accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn validate_dist(i: usize, d: &[f64], c: usize) -> Result<()> {
    if d.len() != c {
        return Err(Error::Dimension(format!("distribution {i} has {} classes, expected {c}", d.len())));
    }
    if d.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("distribution {i} is not a probability vector")));
    }
    Ok(())
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` on each of `splits` interleaved subsets
/// (sample `i` goes to split `i mod k`, so class-sorted input still mixes);
/// mean and population standard deviation across splits. The split count
/// is capped at the number of distributions.
pub fn inception_score(dists: &[Vec<f64>], splits: usize) -> Result<MeanStd> {
    let first = dists.first().ok_or(Error::EmptyBatch)?;
    if splits == 0 {
        return Err(Error::Invalid("splits must be at least 1".into()));
    }
    let c = first.len();
    for (i, d) in dists.iter().enumerate() {
        validate_dist(i, d, c)?;
    }
    let n = dists.len();
    let k = splits.min(n);
    let scores: Vec<f64> = (0..k)
        .map(|s| {
            let part: Vec<&Vec<f64>> = dists.iter().skip(s).step_by(k).collect();
            let mut marginal = vec![0.0; c];
            for d in &part {
                for (m, p) in marginal.iter_mut().zip(d.iter()) {
                    *m += p / part.len() as f64;
                }
            }
            let kl: f64 = part
                .iter()
                .map(|d| d.iter().zip(&marginal).filter(|(p, _)| **p > 0.0).map(|(p, m)| p * (p / m).ln()).sum::<f64>())
                .sum::<f64>()
                / part.len() as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / k as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k as f64;
    Ok(MeanStd { mean, std: var.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub frame_is: MeanStd,
    pub video_is: MeanStd,
    /// Frame IS over the `t`-th frame of every sequence, one split.
    pub per_timestep: Vec<f64>,
    pub samples: usize,
}

/// Frame, video and per-timestep Inception Scores of equal-length sequences.
pub fn score_sequences(seqs: &[&PoseSequence], clf: &ActionClassifier, splits: usize) -> Result<ScoreReport> {
    let first = seqs.first().ok_or(Error::EmptyBatch)?;
    let t = first.len();
    if seqs.iter().any(|s| s.len() != t) {
        return Err(Error::Dimension("scored sequences must share a length".into()));
    }
    let frames: Vec<Vec<Vec<f64>>> = seqs.iter().map(|s| clf.frame_distributions(s)).collect::<Result<_>>()?;
    let pooled: Vec<Vec<f64>> = frames.iter().flatten().cloned().collect();
    let frame_is = inception_score(&pooled, splits)?;
    let per_timestep = (0..t)
        .map(|i| inception_score(&frames.iter().map(|f| f[i].clone()).collect::<Vec<_>>(), 1).map(|s| s.mean))
        .collect::<Result<Vec<_>>>()?;
    let videos: Vec<Vec<f64>> = seqs.iter().map(|s| clf.video_distribution(s)).collect::<Result<_>>()?;
    let video_is = inception_score(&videos, splits)?;
    Ok(ScoreReport { frame_is, video_is, per_timestep, samples: seqs.len() })
}
