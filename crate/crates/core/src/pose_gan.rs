//! Conditional single-pose generator and critic trained with the
//! gradient-penalized Wasserstein objective.

use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Mlp, Params};
use crate::numerics::{backward, gradient_node, AdamHyper, AdamState, NodeId, Tape, Tensor};
use crate::posecore::{ClassId, PoseVector};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Maps `z₀ ⊕ one_hot(c)` to a pose vector with coordinates in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinglePoseGenerator {
    pub mlp: Mlp,
    pub latent_dim: usize,
    pub classes: usize,
    pub joints: usize,
}

impl SinglePoseGenerator {
    pub fn new(latent_dim: usize, classes: usize, joints: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut widths = vec![latent_dim + classes];
        widths.extend_from_slice(hidden);
        widths.push(2 * joints);
        Self { mlp: Mlp::init(&widths, Activation::LeakyRelu, Activation::Tanh, rng), latent_dim, classes, joints }
    }

    /// `z` is `[b, m]`, `onehot` is `[b, C]`.
    pub fn forward(&self, tape: &mut Tape, ids: &[NodeId], z: NodeId, onehot: NodeId) -> Result<NodeId> {
        if tape.shape(z)[1] != self.latent_dim {
            return Err(Error::Dimension(format!("latent width {} != {}", tape.shape(z)[1], self.latent_dim)));
        }
        let input = tape.concat_cols(&[z, onehot])?;
        Ok(self.mlp.forward(tape, ids, input)?)
    }

    /// Decode one latent vector.
    pub fn generate(&self, z0: &[f64], class: ClassId) -> Result<PoseVector> {
        if z0.len() != self.latent_dim {
            return Err(Error::Dimension(format!("z0 has {} entries, generator expects {}", z0.len(), self.latent_dim)));
        }
        if z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("z0 must be finite".into()));
        }
        let out = self.generate_batch(&Tensor::row(z0), &[class])?;
        PoseVector::new(out.into_data())
    }

    /// Decode a `[b, m]` batch.
    pub fn generate_batch(&self, z: &Tensor, classes: &[ClassId]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape)?;
        let zi = tape.leaf(z.clone())?;
        let c = tape.leaf(one_hot_batch(classes, self.classes)?)?;
        let out = self.forward(&mut tape, &ids, zi, c)?;
        Ok(tape.value(out).clone())
    }
}

impl Params for SinglePoseGenerator {
    fn params(&self) -> Vec<&Tensor> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

/// Scores `pose ⊕ one_hot(c)` with an unbounded real.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseCritic {
    pub mlp: Mlp,
    pub classes: usize,
    pub joints: usize,
}

impl PoseCritic {
    pub fn new(classes: usize, joints: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut widths = vec![2 * joints + classes];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self { mlp: Mlp::init(&widths, Activation::LeakyRelu, Activation::Identity, rng), classes, joints }
    }

    /// `x` is `[b, 2J]`, `onehot` is `[b, C]`; returns `[b, 1]`.
    pub fn forward(&self, tape: &mut Tape, ids: &[NodeId], x: NodeId, onehot: NodeId) -> Result<NodeId> {
        let input = tape.concat_cols(&[x, onehot])?;
        Ok(self.mlp.forward(tape, ids, input)?)
    }

    pub fn score(&self, poses: &Tensor, classes: &[ClassId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape)?;
        let x = tape.leaf(poses.clone())?;
        let c = tape.leaf(one_hot_batch(classes, self.classes)?)?;
        let out = self.forward(&mut tape, &ids, x, c)?;
        Ok(tape.value(out).data().to_vec())
    }
}

impl Params for PoseCritic {
    fn params(&self) -> Vec<&Tensor> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

pub fn one_hot_batch(classes: &[ClassId], count: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(classes.len() * count);
    for c in classes {
        data.extend(c.one_hot(count)?);
    }
    Ok(Tensor::matrix(classes.len(), count, data)?)
}

pub fn stack_poses(poses: &[PoseVector]) -> Result<Tensor> {
    let width = poses.first().ok_or(Error::EmptyBatch)?.coords().len();
    let mut data = Vec::with_capacity(poses.len() * width);
    for p in poses {
        if p.coords().len() != width {
            return Err(Error::Dimension("poses in a batch must share a width".into()));
        }
        data.extend_from_slice(p.coords());
    }
    Ok(Tensor::matrix(poses.len(), width, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WganTrainConfig {
    pub gp_weight: f64,
    pub critic_iters_per_gen: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    /// Generator updates; each is preceded by `critic_iters_per_gen` critic updates.
    pub steps: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl Default for WganTrainConfig {
    fn default() -> Self {
        Self {
            gp_weight: 10.0,
            critic_iters_per_gen: 5,
            batch_size: 64,
            adam: AdamHyper::pose_gan(),
            steps: 2000,
            latent_dim: 8,
            hidden: 128,
        }
    }
}

impl WganTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gp_weight >= 0.0) {
            return Err(Error::Invalid("gp_weight must be non-negative".into()));
        }
        if self.critic_iters_per_gen == 0 || self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::Invalid("critic_iters_per_gen, batch_size and latent_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// A scalar loss recorded on its own tape.
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub loss: NodeId,
    /// Parameter leaves of the model being trained, in `Params` order.
    pub params: Vec<NodeId>,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).item()
    }

    pub fn gradients(&self) -> Result<Vec<Tensor>> {
        let mut g = backward(&self.tape, self.loss, &self.params)?;
        Ok(self.params.iter().map(|p| g.take(*p).expect("requested")).collect())
    }
}

#[derive(Debug)]
pub struct CriticLoss {
    pub graph: LossGraph,
    /// `mean D(fake) − mean D(real)`
    pub wasserstein: f64,
    /// Unweighted `mean (‖∇D(x̂)‖ − 1)²`.
    pub penalty: f64,
}

/// Critic objective with gradient penalty on random interpolates
/// `x̂ = ε·real + (1 − ε)·fake`, one `ε ~ U(0, 1)` per sample.
pub fn critic_loss(
    critic: &PoseCritic,
    real: &Tensor,
    fake: &Tensor,
    classes: &[ClassId],
    gp_weight: f64,
    rng: &mut Rng,
) -> Result<CriticLoss> {
    let (b, w) = real.dims2()?;
    if b == 0 || classes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if fake.shape() != real.shape() || classes.len() != b {
        return Err(Error::Dimension(format!("real {:?}, fake {:?}, {} labels", real.shape(), fake.shape(), classes.len())));
    }
    let eps: Vec<f64> = (0..b).map(|_| rng::uniform(rng, 0.0, 1.0)).collect();
    let mut mixed = Vec::with_capacity(b * w);
    for i in 0..b {
        for j in 0..w {
            let k = i * w + j;
            mixed.push(eps[i] * real.data()[k] + (1.0 - eps[i]) * fake.data()[k]);
        }
    }

    let mut tape = Tape::new();
    let ids = critic.bind(&mut tape)?;
    let c = tape.leaf(one_hot_batch(classes, critic.classes)?)?;
    let xr = tape.leaf(real.clone())?;
    let xf = tape.leaf(fake.clone())?;
    let xh = tape.leaf(Tensor::matrix(b, w, mixed)?)?;

    let dr = critic.forward(&mut tape, &ids, xr, c)?;
    let df = critic.forward(&mut tape, &ids, xf, c)?;
    let mr = tape.mean(dr)?;
    let mf = tape.mean(df)?;
    let wdist = tape.sub(mf, mr)?;

    let dh = critic.forward(&mut tape, &ids, xh, c)?;
    let total = tape.sum(dh)?;
    let grad = gradient_node(&mut tape, total, xh)?;
    let norm = tape.row_norm(grad)?;
    let dev = tape.add_scalar(norm, -1.0)?;
    let sq = tape.square(dev)?;
    let pen = tape.mean(sq)?;
    let weighted = tape.scale(pen, gp_weight)?;
    let loss = tape.add(wdist, weighted)?;

    let wasserstein = tape.value(wdist).item();
    let penalty = tape.value(pen).item();
    Ok(CriticLoss { graph: LossGraph { tape, loss, params: ids }, wasserstein, penalty })
}

/// `−mean D(G(z|c)|c)`, differentiable in the generator's parameters.
pub fn generator_loss(gen: &SinglePoseGenerator, critic: &PoseCritic, z: &Tensor, classes: &[ClassId]) -> Result<LossGraph> {
    if classes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let gids = gen.bind(&mut tape)?;
    let cids = critic.bind(&mut tape)?;
    let c = tape.leaf(one_hot_batch(classes, gen.classes)?)?;
    let zi = tape.leaf(z.clone())?;
    let fake = gen.forward(&mut tape, &gids, zi, c)?;
    let score = critic.forward(&mut tape, &cids, fake, c)?;
    let m = tape.mean(score)?;
    let loss = tape.scale(m, -1.0)?;
    Ok(LossGraph { tape, loss, params: gids })
}

/// `‖∇ₓ D(x̂|c)‖` for each interpolate between `real` and `fake`.
pub fn critic_gradient_norms(critic: &PoseCritic, real: &Tensor, fake: &Tensor, classes: &[ClassId], rng: &mut Rng) -> Result<Vec<f64>> {
    let (b, w) = real.dims2()?;
    let mut mixed = Vec::with_capacity(b * w);
    for i in 0..b {
        let e = rng::uniform(rng, 0.0, 1.0);
        for j in 0..w {
            let k = i * w + j;
            mixed.push(e * real.data()[k] + (1.0 - e) * fake.data()[k]);
        }
    }
    let mut tape = Tape::new();
    let ids = critic.bind(&mut tape)?;
    let c = tape.leaf(one_hot_batch(classes, critic.classes)?)?;
    let xh = tape.leaf(Tensor::matrix(b, w, mixed)?)?;
    let d = critic.forward(&mut tape, &ids, xh, c)?;
    let s = tape.sum(d)?;
    let g = backward(&tape, s, &[xh])?;
    let g = g.get(xh).expect("requested");
    Ok((0..b).map(|i| g.data()[i * w..(i + 1) * w].iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
}

/// Labeled single poses for the first training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoses {
    pub poses: Vec<PoseVector>,
    pub labels: Vec<ClassId>,
    pub classes: usize,
}

impl LabeledPoses {
    pub fn joint_count(&self) -> usize {
        self.poses.first().map_or(0, PoseVector::joint_count)
    }

    /// Mean pose of each class.
    pub fn class_means(&self) -> Vec<PoseVector> {
        let w = self.poses.first().map_or(0, |p| p.coords().len());
        let mut sums = vec![vec![0.0; w]; self.classes];
        let mut counts = vec![0usize; self.classes];
        for (p, c) in self.poses.iter().zip(&self.labels) {
            counts[c.0] += 1;
            for (s, v) in sums[c.0].iter_mut().zip(p.coords()) {
                *s += v;
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, n)| PoseVector::new(s.into_iter().map(|v| v / n.max(1) as f64).collect()).expect("finite"))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.poses.len() != self.labels.len() {
            return Err(Error::Dimension("pose and label counts differ".into()));
        }
        let mut present = vec![false; self.classes];
        for c in &self.labels {
            if c.0 >= self.classes {
                return Err(Error::Dimension(format!("label {} out of range", c.0)));
            }
            present[c.0] = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(Error::MissingClass(missing.to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseGanStep {
    pub step: usize,
    pub critic_loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    pub generator_loss: f64,
}

fn sample_batch(data: &LabeledPoses, size: usize, rng: &mut Rng) -> Result<(Tensor, Vec<ClassId>)> {
    let idx: Vec<usize> = (0..size).map(|_| rng::index(rng, data.poses.len())).collect();
    let poses: Vec<PoseVector> = idx.iter().map(|&i| data.poses[i].clone()).collect();
    Ok((stack_poses(&poses)?, idx.iter().map(|&i| data.labels[i]).collect()))
}

/// Train `G₀` and `D₀` by alternating critic and generator updates.
pub fn train_single_pose(
    data: &LabeledPoses,
    cfg: &WganTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&PoseGanStep),
) -> Result<(SinglePoseGenerator, PoseCritic, Vec<PoseGanStep>)> {
    cfg.validate()?;
    data.validate()?;
    let joints = data.joint_count();
    let mut init = rng::substream(seed, "pose_gan/init");
    let mut rng = rng::substream(seed, "pose_gan/train");
    let mut gen = SinglePoseGenerator::new(cfg.latent_dim, data.classes, joints, &[cfg.hidden, cfg.hidden], &mut init);
    let mut critic = PoseCritic::new(data.classes, joints, &[cfg.hidden, cfg.hidden], &mut init);
    let mut g_opt = AdamState::new(cfg.adam, &gen.params());
    let mut d_opt = AdamState::new(cfg.adam, &critic.params());
    let mut history = Vec::with_capacity(cfg.steps);
    let n = data.poses.len();

    for step in 0..cfg.steps {
        let epoch = step * cfg.batch_size / n;
        g_opt.set_epoch(epoch);
        d_opt.set_epoch(epoch);
        let mut last = None;
        for _ in 0..cfg.critic_iters_per_gen {
            let (real, labels) = sample_batch(data, cfg.batch_size, &mut rng)?;
            let z = Tensor::matrix(cfg.batch_size, cfg.latent_dim, rng::uniform_vec(&mut rng, cfg.batch_size * cfg.latent_dim, -1.0, 1.0))?;
            let fake = gen.generate_batch(&z, &labels)?;
            let cl = critic_loss(&critic, &real, &fake, &labels, cfg.gp_weight, &mut rng)?;
            let grads = cl.graph.gradients()?;
            d_opt.step(&mut critic.params_mut(), &grads)?;
            last = Some((cl.graph.value(), cl.wasserstein, cl.penalty));
        }
        let labels: Vec<ClassId> = (0..cfg.batch_size).map(|_| data.labels[rng::index(&mut rng, n)]).collect();
        let z = Tensor::matrix(cfg.batch_size, cfg.latent_dim, rng::uniform_vec(&mut rng, cfg.batch_size * cfg.latent_dim, -1.0, 1.0))?;
        let gl = generator_loss(&gen, &critic, &z, &labels)?;
        let grads = gl.gradients()?;
        g_opt.step(&mut gen.params_mut(), &grads)?;
        let (critic_loss, wasserstein, penalty) = last.expect("at least one critic iteration");
        let rec = PoseGanStep { step, critic_loss, wasserstein, penalty, generator_loss: gl.value() };
        on_step(&rec);
        history.push(rec);
    }
    Ok((gen, critic, history))
}
