//! Latent-shift sequence generator on top of a frozen single-pose
//! generator, and a bidirectional recurrent discriminator.

use serde::{Deserialize, Serialize};

use crate::nn::{LstmCell, Linear, Params};
use crate::numerics::{AdamHyper, AdamState, NodeId, Tape, Tensor};
use crate::pose_gan::{one_hot_batch, LossGraph, SinglePoseGenerator};
use crate::posecore::{ClassId, PoseSequence, PoseVector};
use crate::rng::{self, Rng};
use crate::synthdata::Dataset;
use crate::{Error, Result};

/// Bounds of the latent path.
pub const LATENT_RANGE: (f64, f64) = (-1.0, 1.0);

/// `z_{t+1} = clamp(z_t + s_t, −1, 1)`, starting from `z0`.
pub fn integrate_shifts(z0: &[f64], shifts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut path = vec![z0.to_vec()];
    for (t, s) in shifts.iter().enumerate() {
        if s.len() != z0.len() {
            return Err(Error::Dimension(format!("shift {t} has {} entries, z0 has {}", s.len(), z0.len())));
        }
        let last = path.last().expect("non-empty");
        let next = last.iter().zip(s).map(|(z, d)| (z + d).clamp(LATENT_RANGE.0, LATENT_RANGE.1)).collect();
        path.push(next);
    }
    Ok(path)
}

/// [`integrate_shifts`] recorded on a tape; every node is `[b, m]`.
pub fn integrate_on_tape(tape: &mut Tape, z0: NodeId, shifts: &[NodeId]) -> Result<Vec<NodeId>> {
    let mut path = vec![z0];
    for &s in shifts {
        let last = *path.last().expect("non-empty");
        let sum = tape.add(last, s)?;
        path.push(tape.clamp(sum, LATENT_RANGE.0, LATENT_RANGE.1)?);
    }
    Ok(path)
}

/// Emits `T − 1` latent shifts from noise `z`, conditioned on `z₀` and the class.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGenerator {
    /// `z₀ ⊕ one_hot(c)` → initial hidden state.
    pub init: Linear,
    pub cell: LstmCell,
    /// Hidden state → shift.
    pub project: Linear,
    pub noise_dim: usize,
    pub latent_dim: usize,
    pub classes: usize,
    pub length: usize,
}

/// Tape nodes of one generator rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub shifts: Vec<NodeId>,
    pub path: Vec<NodeId>,
    pub frames: Vec<NodeId>,
}

impl SequenceGenerator {
    pub fn new(noise_dim: usize, latent_dim: usize, classes: usize, length: usize, hidden: usize, rng: &mut Rng) -> Self {
        let init = Linear::init(latent_dim + classes, hidden, rng);
        let cell = LstmCell::init(noise_dim, hidden, rng);
        // Small output weights so an untrained generator drifts slowly.
        let project = Linear::init_scaled(hidden, latent_dim, 0.01, rng);
        Self { init, cell, project, noise_dim, latent_dim, classes, length }
    }

    pub fn hidden(&self) -> usize {
        self.cell.hidden
    }

    /// Shift nodes for `steps` steps; `z` is `[b, n]`, `z0` is `[b, m]`.
    pub fn shifts(&self, tape: &mut Tape, ids: &[NodeId], z: NodeId, z0: NodeId, onehot: NodeId, steps: usize) -> Result<Vec<NodeId>> {
        if tape.shape(z)[1] != self.noise_dim || tape.shape(z0)[1] != self.latent_dim {
            return Err(Error::Dimension(format!(
                "noise {:?} / z0 {:?} do not match n={} m={}",
                tape.shape(z),
                tape.shape(z0),
                self.noise_dim,
                self.latent_dim
            )));
        }
        let b = tape.shape(z)[0];
        let cond = tape.concat_cols(&[z0, onehot])?;
        let h0 = tape.linear(cond, ids[0], ids[1])?;
        let mut h = tape.tanh(h0)?;
        let mut c = tape.leaf(Tensor::zeros(&[b, self.hidden()]))?;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            (h, c) = self.cell.step(tape, &ids[2..4], z, h, c)?;
            out.push(tape.linear(h, ids[4], ids[5])?);
        }
        Ok(out)
    }

    /// Shifts, latent path and decoded frames for a `length`-frame sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        g0: &SinglePoseGenerator,
        g0_ids: &[NodeId],
        z: NodeId,
        z0: NodeId,
        onehot: NodeId,
        length: usize,
    ) -> Result<Rollout> {
        if length == 0 {
            return Err(Error::Invalid("sequence length must be at least 1".into()));
        }
        let shifts = self.shifts(tape, ids, z, z0, onehot, length - 1)?;
        let path = integrate_on_tape(tape, z0, &shifts)?;
        let frames = path.iter().map(|&p| g0.forward(tape, g0_ids, p, onehot)).collect::<Result<Vec<_>>>()?;
        Ok(Rollout { shifts, path, frames })
    }

    fn check(&self, g0: &SinglePoseGenerator) -> Result<()> {
        if g0.latent_dim != self.latent_dim || g0.classes != self.classes {
            return Err(Error::Dimension(format!(
                "pose generator has m={} C={}, sequence generator m={} C={}",
                g0.latent_dim, g0.classes, self.latent_dim, self.classes
            )));
        }
        Ok(())
    }

    /// Decoded frames of a batch as `length` tensors of shape `[b, 2J]`.
    pub fn generate_frames(
        &self,
        g0: &SinglePoseGenerator,
        z: &Tensor,
        z0: &Tensor,
        classes: &[ClassId],
        length: usize,
    ) -> Result<Vec<Tensor>> {
        self.generate_frames_split(g0, z, z0, classes, classes, length)
    }

    /// Like [`generate_frames`](Self::generate_frames), but the latent
    /// dynamics follow `motion_classes` while `g0` decodes with `pose_classes`.
    pub fn generate_frames_split(
        &self,
        g0: &SinglePoseGenerator,
        z: &Tensor,
        z0: &Tensor,
        motion_classes: &[ClassId],
        pose_classes: &[ClassId],
        length: usize,
    ) -> Result<Vec<Tensor>> {
        self.check(g0)?;
        if length == 0 {
            return Err(Error::Invalid("sequence length must be at least 1".into()));
        }
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape)?;
        let gids = g0.bind(&mut tape)?;
        let zi = tape.leaf(z.clone())?;
        let z0i = tape.leaf(z0.clone())?;
        let cm = tape.leaf(one_hot_batch(motion_classes, self.classes)?)?;
        let cp = tape.leaf(one_hot_batch(pose_classes, self.classes)?)?;
        let shifts = self.shifts(&mut tape, &ids, zi, z0i, cm, length - 1)?;
        let path = integrate_on_tape(&mut tape, z0i, &shifts)?;
        path.iter()
            .map(|&p| {
                let f = g0.forward(&mut tape, &gids, p, cp)?;
                Ok(tape.value(f).clone())
            })
            .collect()
    }

    /// Latent path for one sample.
    pub fn latent_path(&self, z: &[f64], z0: &[f64], class: ClassId, length: usize) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape)?;
        let zi = tape.leaf(Tensor::row(z))?;
        let z0i = tape.leaf(Tensor::row(z0))?;
        let c = tape.leaf(Tensor::row(&class.one_hot(self.classes)?))?;
        let shifts = self.shifts(&mut tape, &ids, zi, z0i, c, length.saturating_sub(1))?;
        let shifts: Vec<Vec<f64>> = shifts.iter().map(|&s| tape.value(s).data().to_vec()).collect();
        integrate_shifts(z0, &shifts)
    }
}

impl Params for SequenceGenerator {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.init.weight, &self.init.bias, &self.cell.weight, &self.cell.bias, &self.project.weight, &self.project.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.init.weight,
            &mut self.init.bias,
            &mut self.cell.weight,
            &mut self.cell.bias,
            &mut self.project.weight,
            &mut self.project.bias,
        ]
    }
}

/// Decode one generated sequence of the generator's configured length.
pub fn gps_forward(gen: &SequenceGenerator, g0: &SinglePoseGenerator, z: &[f64], z0: &[f64], class: ClassId) -> Result<PoseSequence> {
    gps_forward_len(gen, g0, z, z0, class, gen.length)
}

/// [`gps_forward`] unrolled for an arbitrary number of frames.
pub fn gps_forward_len(
    gen: &SequenceGenerator,
    g0: &SinglePoseGenerator,
    z: &[f64],
    z0: &[f64],
    class: ClassId,
    length: usize,
) -> Result<PoseSequence> {
    if z.len() != gen.noise_dim || z0.len() != gen.latent_dim {
        return Err(Error::Dimension(format!("z has {}, z0 has {}; expected {} and {}", z.len(), z0.len(), gen.noise_dim, gen.latent_dim)));
    }
    let frames = gen.generate_frames(g0, &Tensor::row(z), &Tensor::row(z0), &[class], length)?;
    let frames = frames.into_iter().map(|f| PoseVector::new(f.into_data())).collect::<Result<Vec<_>>>()?;
    PoseSequence::new(frames, class, 16.0)
}

/// Bidirectional LSTM over `ΔV_t ⊕ V_t ⊕ one_hot(c)`, `t = 0..T−2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDiscriminator {
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
    /// Concatenated final states → logit.
    pub head: Linear,
    pub joints: usize,
    pub classes: usize,
}

impl SequenceDiscriminator {
    pub fn new(joints: usize, classes: usize, hidden: usize, rng: &mut Rng) -> Self {
        let inputs = 4 * joints + classes;
        Self {
            forward_cell: LstmCell::init(inputs, hidden, rng),
            backward_cell: LstmCell::init(inputs, hidden, rng),
            head: Linear::init(2 * hidden, 1, rng),
            joints,
            classes,
        }
    }

    /// Logits `[b, 1]` for frames given as `[b, 2J]` nodes.
    pub fn logits(&self, tape: &mut Tape, ids: &[NodeId], frames: &[NodeId], onehot: NodeId) -> Result<NodeId> {
        if frames.len() < 2 {
            return Err(Error::Invalid(format!("the sequence discriminator needs at least 2 frames, got {}", frames.len())));
        }
        let w = tape.shape(frames[0])[1];
        if w != 2 * self.joints {
            return Err(Error::Dimension(format!("frame width {w} != {}", 2 * self.joints)));
        }
        let b = tape.shape(frames[0])[0];
        let mut steps = Vec::with_capacity(frames.len() - 1);
        for t in 0..frames.len() - 1 {
            let d = tape.sub(frames[t + 1], frames[t])?;
            steps.push(tape.concat_cols(&[d, frames[t], onehot])?);
        }
        let hs = self.forward_cell.hidden;
        let zeros = Tensor::zeros(&[b, hs]);
        let mut hf = tape.leaf(zeros.clone())?;
        let mut cf = tape.leaf(zeros.clone())?;
        for &x in &steps {
            (hf, cf) = self.forward_cell.step(tape, &ids[0..2], x, hf, cf)?;
        }
        let mut hb = tape.leaf(zeros.clone())?;
        let mut cb = tape.leaf(zeros)?;
        for &x in steps.iter().rev() {
            (hb, cb) = self.backward_cell.step(tape, &ids[2..4], x, hb, cb)?;
        }
        let both = tape.concat_cols(&[hf, hb])?;
        Ok(tape.linear(both, ids[4], ids[5])?)
    }

    /// Probability that each sequence in a batch is real.
    pub fn probabilities(&self, frames: &[Tensor], classes: &[ClassId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape)?;
        let f = frames.iter().map(|t| tape.leaf(t.clone())).collect::<crate::numerics::Result<Vec<_>>>()?;
        let c = tape.leaf(one_hot_batch(classes, self.classes)?)?;
        let l = self.logits(&mut tape, &ids, &f, c)?;
        let p = tape.sigmoid(l)?;
        Ok(tape.value(p).data().to_vec())
    }
}

impl Params for SequenceDiscriminator {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.forward_cell.weight,
            &self.forward_cell.bias,
            &self.backward_cell.weight,
            &self.backward_cell.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.forward_cell.weight,
            &mut self.forward_cell.bias,
            &mut self.backward_cell.weight,
            &mut self.backward_cell.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }
}

/// `D_PS(V | c)` for a single sequence.
pub fn dps_forward(disc: &SequenceDiscriminator, seq: &PoseSequence, class: ClassId) -> Result<f64> {
    let frames = seq.frames.iter().map(|f| Tensor::row(f.coords())).collect::<Vec<_>>();
    Ok(disc.probabilities(&frames, &[class])?[0])
}

/// Frames of several sequences stacked per time step.
pub fn stack_sequences(seqs: &[&PoseSequence]) -> Result<Vec<Tensor>> {
    let first = seqs.first().ok_or(Error::EmptyBatch)?;
    let (t, w) = (first.len(), 2 * first.joint_count());
    (0..t)
        .map(|i| {
            let mut data = Vec::with_capacity(seqs.len() * w);
            for s in seqs {
                if s.len() != t || s.joint_count() != first.joint_count() {
                    return Err(Error::Dimension("sequences in a batch must share length and joint count".into()));
                }
                data.extend_from_slice(s.frames[i].coords());
            }
            Ok(Tensor::matrix(seqs.len(), w, data)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqTrainConfig {
    pub l2_shift_weight: f64,
    pub batch_size: usize,
    pub adam: AdamHyper,
    /// Generator updates.
    pub steps: usize,
    pub disc_iters_per_gen: usize,
    pub noise_dim: usize,
    pub hidden: usize,
    pub disc_hidden: usize,
}

impl Default for SeqTrainConfig {
    fn default() -> Self {
        Self {
            l2_shift_weight: 0.1,
            batch_size: 32,
            adam: AdamHyper::sequence_gan(),
            steps: 3000,
            disc_iters_per_gen: 1,
            noise_dim: 64,
            hidden: 64,
            disc_hidden: 32,
        }
    }
}

impl SeqTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_shift_weight >= 0.0) {
            return Err(Error::Invalid(format!("l2_shift_weight {} must be non-negative", self.l2_shift_weight)));
        }
        if self.batch_size == 0 || self.disc_iters_per_gen == 0 || self.noise_dim == 0 || self.hidden == 0 || self.disc_hidden == 0 {
            return Err(Error::Invalid("batch size, iteration counts and widths must be positive".into()));
        }
        Ok(())
    }
}

/// `−mean log D(real) − mean log(1 − D(fake))`.
pub fn discriminator_loss(disc: &SequenceDiscriminator, real: &[Tensor], fake: &[Tensor], classes: &[ClassId]) -> Result<LossGraph> {
    if classes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let ids = disc.bind(&mut tape)?;
    let c = tape.leaf(one_hot_batch(classes, disc.classes)?)?;
    let r = real.iter().map(|t| tape.leaf(t.clone())).collect::<crate::numerics::Result<Vec<_>>>()?;
    let f = fake.iter().map(|t| tape.leaf(t.clone())).collect::<crate::numerics::Result<Vec<_>>>()?;
    let lr = disc.logits(&mut tape, &ids, &r, c)?;
    let lf = disc.logits(&mut tape, &ids, &f, c)?;
    let a = tape.log_sigmoid(lr)?;
    let neg = tape.scale(lf, -1.0)?;
    let b = tape.log_sigmoid(neg)?;
    let ma = tape.mean(a)?;
    let mb = tape.mean(b)?;
    let s = tape.add(ma, mb)?;
    let loss = tape.scale(s, -1.0)?;
    Ok(LossGraph { tape, loss, params: ids })
}

#[derive(Debug)]
pub struct GeneratorLoss {
    pub graph: LossGraph,
    /// Unweighted `mean ‖s_t‖²` over batch and steps.
    pub shift_penalty: f64,
}

/// `−mean log D(G(z)) + w · mean ‖s_t‖²`, differentiable in the sequence generator only.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    gen: &SequenceGenerator,
    g0: &SinglePoseGenerator,
    disc: &SequenceDiscriminator,
    z: &Tensor,
    z0: &Tensor,
    classes: &[ClassId],
    length: usize,
    shift_weight: f64,
) -> Result<GeneratorLoss> {
    gen.check(g0)?;
    if classes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let ids = gen.bind(&mut tape)?;
    let gids = g0.bind(&mut tape)?;
    let dids = disc.bind(&mut tape)?;
    let zi = tape.leaf(z.clone())?;
    let z0i = tape.leaf(z0.clone())?;
    let c = tape.leaf(one_hot_batch(classes, gen.classes)?)?;
    let r = gen.rollout(&mut tape, &ids, g0, &gids, zi, z0i, c, length)?;
    let l = disc.logits(&mut tape, &dids, &r.frames, c)?;
    let ls = tape.log_sigmoid(l)?;
    let m = tape.mean(ls)?;
    let adv = tape.scale(m, -1.0)?;
    let mut total = None;
    for &s in &r.shifts {
        let sq = tape.square(s)?;
        let ss = tape.sum(sq)?;
        total = Some(match total {
            None => ss,
            Some(t) => tape.add(t, ss)?,
        });
    }
    let total = total.expect("length ≥ 2 checked by the discriminator");
    let pen = tape.scale(total, 1.0 / (classes.len() * r.shifts.len()) as f64)?;
    let weighted = tape.scale(pen, shift_weight)?;
    let loss = tape.add(adv, weighted)?;
    let shift_penalty = tape.value(pen).item();
    Ok(GeneratorLoss { graph: LossGraph { tape, loss, params: ids }, shift_penalty })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqGanStep {
    pub step: usize,
    pub disc_loss: f64,
    pub generator_loss: f64,
    pub shift_penalty: f64,
}

/// Noise `z ~ N(0, I)` and start latents `z₀ ~ U(−1, 1)` for a batch.
pub fn sample_latents(rng: &mut Rng, batch: usize, noise_dim: usize, latent_dim: usize) -> Result<(Tensor, Tensor)> {
    let z = Tensor::matrix(batch, noise_dim, rng::normal_vec(rng, batch * noise_dim))?;
    let z0 = Tensor::matrix(batch, latent_dim, rng::uniform_vec(rng, batch * latent_dim, -1.0, 1.0))?;
    Ok((z, z0))
}

/// Train the sequence generator and discriminator against a frozen `g0`.
pub fn train_sequence(
    data: &Dataset,
    g0: &SinglePoseGenerator,
    cfg: &SeqTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&SeqGanStep),
) -> Result<(SequenceGenerator, SequenceDiscriminator, Vec<SeqGanStep>)> {
    cfg.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::EmptyBatch);
    }
    data.validate_uniform()?;
    let (t, joints, classes) = (data.sequence_length(), data.joint_count(), data.class_count());
    if t < 2 {
        return Err(Error::Invalid("training sequences need at least 2 frames".into()));
    }
    if g0.joints != joints || g0.classes != classes {
        return Err(Error::Dimension(format!(
            "pose generator has J={} C={}, data has J={joints} C={classes}",
            g0.joints, g0.classes
        )));
    }
    let mut init = rng::substream(seed, "seq_gan/init");
    let mut rng = rng::substream(seed, "seq_gan/train");
    let mut gen = SequenceGenerator::new(cfg.noise_dim, g0.latent_dim, classes, t, cfg.hidden, &mut init);
    let mut disc = SequenceDiscriminator::new(joints, classes, cfg.disc_hidden, &mut init);
    let mut g_opt = AdamState::new(cfg.adam, &gen.params());
    let mut d_opt = AdamState::new(cfg.adam, &disc.params());
    let n = data.sequences.len();
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let epoch = step * cfg.batch_size / n;
        g_opt.set_epoch(epoch);
        d_opt.set_epoch(epoch);
        let mut disc_loss = 0.0;
        for _ in 0..cfg.disc_iters_per_gen {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng::index(&mut rng, n)).collect();
            let seqs: Vec<&PoseSequence> = idx.iter().map(|&i| &data.sequences[i]).collect();
            let labels: Vec<ClassId> = seqs.iter().map(|s| s.class).collect();
            let real = stack_sequences(&seqs)?;
            let (z, z0) = sample_latents(&mut rng, cfg.batch_size, cfg.noise_dim, g0.latent_dim)?;
            let fake = gen.generate_frames(g0, &z, &z0, &labels, t)?;
            let dl = discriminator_loss(&disc, &real, &fake, &labels)?;
            let grads = dl.gradients()?;
            d_opt.step(&mut disc.params_mut(), &grads)?;
            disc_loss = dl.value();
        }
        let labels: Vec<ClassId> = (0..cfg.batch_size).map(|_| data.sequences[rng::index(&mut rng, n)].class).collect();
        let (z, z0) = sample_latents(&mut rng, cfg.batch_size, cfg.noise_dim, g0.latent_dim)?;
        let gl = generator_loss(&gen, g0, &disc, &z, &z0, &labels, t, cfg.l2_shift_weight)?;
        let grads = gl.graph.gradients()?;
        g_opt.step(&mut gen.params_mut(), &grads)?;
        let rec = SeqGanStep { step, disc_loss, generator_loss: gl.graph.value(), shift_penalty: gl.shift_penalty };
        on_step(&rec);
        history.push(rec);
    }
    Ok((gen, disc, history))
}

/// Fraction of sequences classified correctly at threshold 0.5, real and
/// fake weighted equally.
pub fn discriminator_accuracy(disc: &SequenceDiscriminator, real: &[&PoseSequence], fake: &[&PoseSequence]) -> Result<f64> {
    let score = |seqs: &[&PoseSequence]| -> Result<Vec<f64>> {
        let frames = stack_sequences(seqs)?;
        disc.probabilities(&frames, &seqs.iter().map(|s| s.class).collect::<Vec<_>>())
    };
    let pr = score(real)?;
    let pf = score(fake)?;
    let hits_r = pr.iter().filter(|&&p| p > 0.5).count() as f64 / pr.len() as f64;
    let hits_f = pf.iter().filter(|&&p| p <= 0.5).count() as f64 / pf.len() as f64;
    Ok(0.5 * (hits_r + hits_f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn models(seed: u64) -> (SinglePoseGenerator, SequenceGenerator, SequenceDiscriminator) {
        let mut r = rng::seeded(seed);
        let g0 = SinglePoseGenerator::new(4, 2, 2, &[8], &mut r);
        let gen = SequenceGenerator::new(6, 4, 2, 5, 8, &mut r);
        let disc = SequenceDiscriminator::new(2, 2, 6, &mut r);
        (g0, gen, disc)
    }

    #[test]
    fn accumulation_and_clamp() {
        let p = integrate_shifts(&[0.5], &[vec![0.2], vec![-0.3]]).unwrap();
        assert!((p[1][0] - 0.7).abs() < 1e-15 && (p[2][0] - 0.4).abs() < 1e-15);
        assert_eq!(p.len(), 3);
        assert_eq!(integrate_shifts(&[0.9], &[vec![0.2]]).unwrap()[1], vec![1.0]);
        let flat = integrate_shifts(&[0.1, -0.2], &vec![vec![0.0, 0.0]; 4]).unwrap();
        assert!(flat.iter().all(|z| *z == vec![0.1, -0.2]));
        assert!(integrate_shifts(&[0.0], &[vec![0.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn path_stays_in_range(z0 in prop::collection::vec(-1.0f64..=1.0, 3usize),
                               shifts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3usize), 0..12usize)) {
            for z in integrate_shifts(&z0, &shifts).unwrap() {
                prop_assert!(z.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn tape_integration_matches_direct() {
        let mut tape = Tape::new();
        let z0 = tape.leaf(Tensor::row(&[0.9, -0.5])).unwrap();
        let s1 = tape.leaf(Tensor::row(&[0.3, 0.1])).unwrap();
        let s2 = tape.leaf(Tensor::row(&[-0.4, -0.7])).unwrap();
        let path = integrate_on_tape(&mut tape, z0, &[s1, s2]).unwrap();
        let direct = integrate_shifts(&[0.9, -0.5], &[vec![0.3, 0.1], vec![-0.4, -0.7]]).unwrap();
        for (n, d) in path.iter().zip(&direct) {
            assert_eq!(tape.value(*n).data(), d.as_slice());
        }
    }

    #[test]
    fn generator_shapes_and_determinism() {
        let (g0, gen, _) = models(1);
        let z = [0.1, -0.2, 0.3, 0.0, 1.0, -1.0];
        let z0 = [0.2, 0.1, -0.3, 0.5];
        let s = gps_forward(&gen, &g0, &z, &z0, ClassId(1)).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.joint_count(), 2);
        assert_eq!(s, gps_forward(&gen, &g0, &z, &z0, ClassId(1)).unwrap());
        assert_eq!(gen.latent_path(&z, &z0, ClassId(1), 5).unwrap().len(), 5);
        assert_eq!(gps_forward_len(&gen, &g0, &z, &z0, ClassId(1), 9).unwrap().len(), 9);
        assert!(gps_forward(&gen, &g0, &z[..3], &z0, ClassId(1)).is_err());
    }

    #[test]
    fn zero_shift_generator_repeats_g0() {
        let (g0, mut gen, _) = models(2);
        gen.project.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let z0 = [0.2, 0.1, -0.3, 0.5];
        let s = gps_forward(&gen, &g0, &[0.4; 6], &z0, ClassId(0)).unwrap();
        let base = g0.generate(&z0, ClassId(0)).unwrap();
        assert!(s.frames.iter().all(|f| *f == base));
    }

    #[test]
    fn discriminator_range_and_zero_head() {
        let (g0, gen, mut disc) = models(3);
        let s = gps_forward(&gen, &g0, &[0.5; 6], &[0.3; 4], ClassId(1)).unwrap();
        let p = dps_forward(&disc, &s, ClassId(1)).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let mut rev = s.clone();
        rev.frames.reverse();
        // Untied cells: reversal generally changes the score.
        assert_ne!(dps_forward(&disc, &rev, ClassId(1)).unwrap(), p);
        for t in [&mut disc.head.weight, &mut disc.head.bias] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(dps_forward(&disc, &s, ClassId(1)).unwrap(), 0.5);
        let short = PoseSequence::new(vec![s.frames[0].clone()], ClassId(0), 16.0).unwrap();
        assert!(dps_forward(&disc, &short, ClassId(0)).is_err());
    }

    #[test]
    fn generator_loss_includes_weighted_shift_penalty() {
        let (g0, gen, disc) = models(4);
        let mut r = rng::seeded(9);
        let (z, z0) = sample_latents(&mut r, 3, 6, 4).unwrap();
        let labels = [ClassId(0), ClassId(1), ClassId(0)];
        let a = generator_loss(&gen, &g0, &disc, &z, &z0, &labels, 5, 0.0).unwrap();
        let b = generator_loss(&gen, &g0, &disc, &z, &z0, &labels, 5, 0.1).unwrap();
        assert!(a.shift_penalty > 0.0);
        assert!((b.graph.value() - a.graph.value() - 0.1 * a.shift_penalty).abs() < 1e-12);
    }

    #[test]
    fn training_is_seeded_and_leaves_g0_untouched() {
        let mut data = crate::synthdata::toy_oscillation_dataset(4, 5, 0).unwrap();
        data.sequences.truncate(8);
        let mut r = rng::seeded(0);
        let g0 = SinglePoseGenerator::new(4, 2, 2, &[8], &mut r);
        let before = g0.clone();
        let cfg = SeqTrainConfig { steps: 3, batch_size: 4, noise_dim: 6, hidden: 8, disc_hidden: 6, ..Default::default() };
        let (ga, da, ha) = train_sequence(&data, &g0, &cfg, 5, |_| {}).unwrap();
        let (gb, db, hb) = train_sequence(&data, &g0, &cfg, 5, |_| {}).unwrap();
        assert_eq!((ga, da, ha), (gb, db, hb));
        assert_eq!(g0, before);
    }

    #[test]
    fn training_rejects_bad_data() {
        let mut data = crate::synthdata::toy_oscillation_dataset(4, 5, 0).unwrap();
        let mut r = rng::seeded(0);
        let g0 = SinglePoseGenerator::new(4, 2, 2, &[8], &mut r);
        let cfg = SeqTrainConfig { steps: 1, batch_size: 2, ..Default::default() };
        let mut mixed = data.clone();
        mixed.sequences[0].frames.pop();
        assert!(train_sequence(&mixed, &g0, &cfg, 0, |_| {}).is_err());
        data.sequences.retain(|s| s.class.0 == 0);
        data.splits.truncate(data.sequences.len());
        assert!(matches!(train_sequence(&data, &g0, &cfg, 0, |_| {}), Err(Error::MissingClass(_))));
        let bad = SeqTrainConfig { l2_shift_weight: -1.0, ..cfg };
        assert!(bad.validate().is_err());
    }
}
