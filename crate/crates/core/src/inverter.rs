//! Prediction and completion by latent inversion of the generator stack,
//! followed by temporal Poisson blending.

use serde::{Deserialize, Serialize};

use crate::nn::Params;
use crate::numerics::{backward, lbfgsb_minimize, BoundBox, LbfgsbConfig, LbfgsbStatus, NodeId, NumericsError, Tape, Tensor};
use crate::pose_gan::SinglePoseGenerator;
use crate::posecore::{ClassId, PoseSequence, PoseVector};
use crate::rng::{self, Rng};
use crate::seq_gan::{SequenceDiscriminator, SequenceGenerator};
use crate::{Error, Result};

/// Discriminator outputs are clamped to this range before the log.
pub const PROB_FLOOR: f64 = 1e-6;

/// Pinned frames of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    entries: Vec<(usize, PoseVector)>,
    pub class: ClassId,
}

impl ConstraintSet {
    /// Entries may come in any order; indices must be unique.
    pub fn new(mut entries: Vec<(usize, PoseVector)>, class: ClassId) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("a constraint set needs at least one frame".into()));
        }
        entries.sort_by_key(|e| e.0);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Invalid(format!("frame {} is constrained twice", w[0].0)));
        }
        let j = entries[0].1.joint_count();
        if entries.iter().any(|e| e.1.joint_count() != j) {
            return Err(Error::Dimension("constraint poses must share a joint count".into()));
        }
        Ok(Self { entries, class })
    }

    /// Frames `0..t` of `seq`.
    pub fn prefix(seq: &PoseSequence, t: usize) -> Result<Self> {
        Self::from_indices(seq, &(0..t).collect::<Vec<_>>())
    }

    pub fn from_indices(seq: &PoseSequence, indices: &[usize]) -> Result<Self> {
        let entries = indices
            .iter()
            .map(|&i| {
                seq.frames
                    .get(i)
                    .map(|f| (i, f.clone()))
                    .ok_or_else(|| Error::Invalid(format!("frame {i} outside a {}-frame sequence", seq.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, seq.class)
    }

    pub fn entries(&self) -> &[(usize, PoseVector)] {
        &self.entries
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn joint_count(&self) -> usize {
        self.entries[0].1.joint_count()
    }

    /// Number of constrained scalars, `|I| · 2J`.
    pub fn coordinate_count(&self) -> usize {
        self.entries.len() * 2 * self.joint_count()
    }

    pub fn check_length(&self, length: usize) -> Result<()> {
        let last = self.entries.last().expect("non-empty").0;
        if last >= length {
            return Err(Error::Invalid(format!("constraint at frame {last} outside a {length}-frame sequence")));
        }
        Ok(())
    }
}

/// Optimization variable `z₀ ⊕ z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z0: Vec<f64>,
    pub z: Vec<f64>,
}

impl LatentState {
    pub fn to_vec(&self) -> Vec<f64> {
        self.z0.iter().chain(&self.z).copied().collect()
    }

    pub fn from_slice(x: &[f64], latent_dim: usize) -> Self {
        Self { z0: x[..latent_dim].to_vec(), z: x[latent_dim..].to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub alpha: f64,
    pub restarts: usize,
    pub pool_size: usize,
    pub lbfgsb: LbfgsbConfig,
    /// `z₀ ∈ [−z0_bound, z0_bound]`
    pub z0_bound: f64,
    /// `z ∈ [−z_bound, z_bound]`
    pub z_bound: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { alpha: 0.1, restarts: 3, pool_size: 64, lbfgsb: LbfgsbConfig::default(), z0_bound: 1.0, z_bound: 3.0 }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Invalid(format!("alpha {} must be non-negative", self.alpha)));
        }
        if self.restarts == 0 || self.pool_size == 0 {
            return Err(Error::Invalid("restarts and pool size must be at least 1".into()));
        }
        if !(self.z0_bound > 0.0 && self.z_bound > 0.0) {
            return Err(Error::Invalid("latent bounds must be positive".into()));
        }
        Ok(())
    }
}

/// The trained generator stack, read-only.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub g0: &'a SinglePoseGenerator,
    pub gen: &'a SequenceGenerator,
    pub disc: &'a SequenceDiscriminator,
    pub length: usize,
}

impl<'a> Models<'a> {
    pub fn new(g0: &'a SinglePoseGenerator, gen: &'a SequenceGenerator, disc: &'a SequenceDiscriminator) -> Self {
        Self { g0, gen, disc, length: gen.length }
    }

    pub fn with_length(self, length: usize) -> Self {
        Self { length, ..self }
    }

    fn bounds(&self, cfg: &InversionConfig) -> Result<BoundBox> {
        let a = BoundBox::uniform(self.gen.latent_dim, -cfg.z0_bound, cfg.z0_bound)?;
        let b = BoundBox::uniform(self.gen.noise_dim, -cfg.z_bound, cfg.z_bound)?;
        Ok(a.join(&b))
    }

    fn check(&self, constraints: &ConstraintSet) -> Result<()> {
        constraints.check_length(self.length)?;
        if constraints.joint_count() != self.g0.joints {
            return Err(Error::Dimension(format!("constraints have {} joints, model {}", constraints.joint_count(), self.g0.joints)));
        }
        if constraints.class.0 >= self.gen.classes {
            return Err(Error::Dimension(format!("class {} out of range", constraints.class.0)));
        }
        Ok(())
    }

    /// `G(z)` as a pose sequence.
    pub fn generate(&self, state: &LatentState, class: ClassId) -> Result<PoseSequence> {
        crate::seq_gan::gps_forward_len(self.gen, self.g0, &state.z, &state.z0, class, self.length)
    }
}

/// Terms of the inversion objective at one latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub contextual: f64,
    pub perceptual: f64,
    /// Gradient with respect to `z₀ ⊕ z`.
    pub gradient: Vec<f64>,
}

struct Recorded {
    tape: Tape,
    z0: NodeId,
    z: NodeId,
    total: NodeId,
    contextual: NodeId,
    perceptual: Option<NodeId>,
}

fn record(models: &Models, constraints: &ConstraintSet, state: &LatentState, alpha: f64, with_perceptual: bool) -> Result<Recorded> {
    models.check(constraints)?;
    let mut tape = Tape::new();
    let ids = models.gen.bind(&mut tape)?;
    let gids = models.g0.bind(&mut tape)?;
    let z0 = tape.leaf(Tensor::row(&state.z0))?;
    let z = tape.leaf(Tensor::row(&state.z))?;
    let c = tape.leaf(Tensor::row(&constraints.class.one_hot(models.gen.classes)?))?;
    let r = models.gen.rollout(&mut tape, &ids, models.g0, &gids, z, z0, c, models.length)?;
    let mut terms = Vec::with_capacity(constraints.entries.len());
    for (t, pose) in &constraints.entries {
        let target = tape.leaf(Tensor::row(pose.coords()))?;
        let d = tape.sub(r.frames[*t], target)?;
        let a = tape.abs(d)?;
        terms.push(tape.sum(a)?);
    }
    let mut contextual = terms[0];
    for &t in &terms[1..] {
        contextual = tape.add(contextual, t)?;
    }
    let mut total = contextual;
    let mut perceptual = None;
    if with_perceptual && models.length >= 2 {
        let dids = models.disc.bind(&mut tape)?;
        let l = models.disc.logits(&mut tape, &dids, &r.frames, c)?;
        let p = tape.sigmoid(l)?;
        let p = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
        let lp = tape.log(p)?;
        let lp = tape.sum(lp)?;
        let neg = tape.scale(lp, -1.0)?;
        perceptual = Some(neg);
        if alpha != 0.0 {
            let w = tape.scale(neg, alpha)?;
            total = tape.add(contextual, w)?;
        }
    }
    Ok(Recorded { tape, z0, z, total, contextual, perceptual })
}

/// `Σ_{t∈I} ‖G(z)_t − I_t‖₁`.
pub fn contextual_loss(state: &LatentState, constraints: &ConstraintSet, models: &Models) -> Result<f64> {
    let r = record(models, constraints, state, 0.0, false)?;
    Ok(r.tape.value(r.contextual).item())
}

/// `−log D_PS(G(z) | c)` with `D` clamped away from 0 and 1.
pub fn perceptual_loss(state: &LatentState, class: ClassId, models: &Models) -> Result<f64> {
    let p = models.disc.probabilities(
        &models.gen.generate_frames(models.g0, &Tensor::row(&state.z), &Tensor::row(&state.z0), &[class], models.length)?,
        &[class],
    )?[0];
    Ok(-p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln())
}

/// `L_c + α·L_p` and its analytic gradient. With `α = 0` the perceptual term
/// is not evaluated.
pub fn objective(state: &LatentState, constraints: &ConstraintSet, models: &Models, alpha: f64) -> Result<Objective> {
    let r = record(models, constraints, state, alpha, alpha != 0.0)?;
    let g = backward(&r.tape, r.total, &[r.z0, r.z])?;
    let mut gradient = g.get(r.z0).expect("requested").data().to_vec();
    gradient.extend_from_slice(g.get(r.z).expect("requested").data());
    Ok(Objective {
        value: r.tape.value(r.total).item(),
        contextual: r.tape.value(r.contextual).item(),
        perceptual: r.perceptual.map_or(0.0, |p| r.tape.value(p).item()),
        gradient,
    })
}

/// `z₀ ~ U(−1, 1)` and `z ~ N(0, I)`, clipped into the optimizer box.
pub fn sample_prior(models: &Models, cfg: &InversionConfig, rng: &mut Rng) -> LatentState {
    let b0 = cfg.z0_bound.min(1.0);
    let z0 = rng::uniform_vec(rng, models.gen.latent_dim, -b0, b0);
    let z = rng::normal_vec(rng, models.gen.noise_dim).into_iter().map(|v| v.clamp(-cfg.z_bound, cfg.z_bound)).collect();
    LatentState { z0, z }
}

/// Objective values of a pool, in pool order.
pub fn score_pool(pool: &[LatentState], constraints: &ConstraintSet, models: &Models, alpha: f64) -> Result<Vec<f64>> {
    models.check(constraints)?;
    if pool.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = pool.len();
    let z = Tensor::matrix(b, models.gen.noise_dim, pool.iter().flat_map(|s| s.z.iter().copied()).collect())?;
    let z0 = Tensor::matrix(b, models.gen.latent_dim, pool.iter().flat_map(|s| s.z0.iter().copied()).collect())?;
    let classes = vec![constraints.class; b];
    let frames = models.gen.generate_frames(models.g0, &z, &z0, &classes, models.length)?;
    let w = 2 * models.g0.joints;
    let mut values = vec![0.0; b];
    for (t, pose) in &constraints.entries {
        for (i, v) in values.iter_mut().enumerate() {
            let row = &frames[*t].data()[i * w..(i + 1) * w];
            *v += row.iter().zip(pose.coords()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
    }
    if alpha != 0.0 && models.length >= 2 {
        let p = models.disc.probabilities(&frames, &classes)?;
        for (v, p) in values.iter_mut().zip(p) {
            *v += alpha * -p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln();
        }
    }
    Ok(values)
}

/// Pool indices sorted by objective, best first; ties keep pool order.
pub fn rank_pool(pool: &[LatentState], constraints: &ConstraintSet, models: &Models, alpha: f64) -> Result<Vec<(usize, f64)>> {
    let mut ranked: Vec<(usize, f64)> = score_pool(pool, constraints, models, alpha)?.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(ranked)
}

/// Draw a pool from the priors and keep the best sample.
pub fn initialize(constraints: &ConstraintSet, models: &Models, cfg: &InversionConfig, seed: u64) -> Result<LatentState> {
    cfg.validate()?;
    let mut rng = rng::substream(seed, "inverter/pool");
    let pool: Vec<LatentState> = (0..cfg.pool_size).map(|_| sample_prior(models, cfg, &mut rng)).collect();
    let best = rank_pool(&pool, constraints, models, cfg.alpha)?[0].0;
    Ok(pool[best].clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub start: LatentState,
    pub latent: LatentState,
    pub objective: f64,
    pub contextual: f64,
    /// Objective at the start and at every accepted iterate.
    pub trace: Vec<f64>,
    pub status: Option<LbfgsbStatus>,
    /// Set when the optimizer aborted; `latent` is then the start point.
    pub error: Option<String>,
}

impl RestartReport {
    pub fn contextual_per_coordinate(&self, constraints: &ConstraintSet) -> f64 {
        self.contextual / constraints.coordinate_count() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    /// Blended output; constrained frames equal the constraints exactly.
    pub sequence: PoseSequence,
    /// `G(ẑ)` before blending.
    pub generated: PoseSequence,
    pub latent: LatentState,
    pub objective: f64,
    pub contextual: f64,
    pub restarts: Vec<RestartReport>,
    /// False when no restart reached a stopping tolerance.
    pub converged: bool,
    pub blend_residual: f64,
}

fn optimize(start: &LatentState, constraints: &ConstraintSet, models: &Models, cfg: &InversionConfig) -> Result<RestartReport> {
    let bounds = models.bounds(cfg)?;
    let m = models.gen.latent_dim;
    let mut inner: Option<Error> = None;
    let run = lbfgsb_minimize(
        |x| match objective(&LatentState::from_slice(x, m), constraints, models, cfg.alpha) {
            Ok(o) => Ok((o.value, o.gradient)),
            Err(e) => {
                inner = Some(e);
                Err(NumericsError::NonFinite { op: "inversion objective" })
            }
        },
        &start.to_vec(),
        &bounds,
        &cfg.lbfgsb,
    );
    match run {
        Ok(res) => {
            let latent = LatentState::from_slice(&res.x, m);
            let contextual = contextual_loss(&latent, constraints, models)?;
            Ok(RestartReport {
                start: start.clone(),
                latent,
                objective: res.f,
                contextual,
                trace: res.trace,
                status: Some(res.status),
                error: None,
            })
        }
        Err(e) => {
            let o = objective(start, constraints, models, cfg.alpha);
            let (objective, contextual) = o.as_ref().map_or((f64::INFINITY, f64::INFINITY), |o| (o.value, o.contextual));
            Ok(RestartReport {
                start: start.clone(),
                latent: start.clone(),
                objective,
                contextual,
                trace: Vec::new(),
                status: None,
                error: Some(inner.map_or_else(|| e.to_string(), |i| i.to_string())),
            })
        }
    }
}

/// Restarts from the `K` best pool samples, keep the best optimum, blend.
pub fn complete(constraints: &ConstraintSet, models: &Models, cfg: &InversionConfig, seed: u64) -> Result<CompletionResult> {
    cfg.validate()?;
    models.check(constraints)?;
    let mut rng = rng::substream(seed, "inverter/pool");
    let pool: Vec<LatentState> = (0..cfg.pool_size).map(|_| sample_prior(models, cfg, &mut rng)).collect();
    complete_from_pool(constraints, models, cfg, &pool)
}

/// [`complete`] with an explicit initialization pool.
pub fn complete_from_pool(constraints: &ConstraintSet, models: &Models, cfg: &InversionConfig, pool: &[LatentState]) -> Result<CompletionResult> {
    cfg.validate()?;
    let ranked = rank_pool(pool, constraints, models, cfg.alpha)?;
    let restarts = ranked
        .iter()
        .take(cfg.restarts)
        .map(|&(i, _)| optimize(&pool[i], constraints, models, cfg))
        .collect::<Result<Vec<_>>>()?;
    let best = restarts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
        .map(|(i, _)| i)
        .expect("at least one restart");
    let converged = restarts
        .iter()
        .any(|r| matches!(r.status, Some(LbfgsbStatus::Converged) | Some(LbfgsbStatus::FunctionTolerance)));
    let latent = restarts[best].latent.clone();
    let generated = models.generate(&latent, constraints.class)?;
    let blend = poisson_blend(&generated, constraints)?;
    Ok(CompletionResult {
        sequence: blend.sequence,
        generated,
        objective: restarts[best].objective,
        contextual: restarts[best].contextual,
        latent,
        restarts,
        converged,
        blend_residual: blend.residual,
    })
}

/// Constrain the first `prefix.len()` frames and complete the rest.
pub fn predict(prefix: &[PoseVector], class: ClassId, models: &Models, cfg: &InversionConfig, seed: u64) -> Result<CompletionResult> {
    let t = prefix.len();
    if t == 0 || t >= models.length {
        return Err(Error::Invalid(format!("prefix of {t} frames must satisfy 1 ≤ t < {}", models.length)));
    }
    let constraints = ConstraintSet::new(prefix.iter().cloned().enumerate().collect(), class)?;
    complete(&constraints, models, cfg, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendResult {
    pub sequence: PoseSequence,
    /// Max absolute residual of the normal equations over free frames.
    pub residual: f64,
}

/// Solve a tridiagonal system in place; `sub[0]` and `sup[n−1]` are ignored.
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = diag[0];
    c[0] = sup[0] / d;
    rhs[0] /= d;
    for i in 1..n {
        d = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / d;
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / d;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Match the generated frame-to-frame differences while pinning the
/// constrained frames. Solved for the correction `x − G`, whose second
/// difference vanishes on free frames.
pub fn poisson_blend(generated: &PoseSequence, constraints: &ConstraintSet) -> Result<BlendResult> {
    let t_len = generated.len();
    constraints.check_length(t_len)?;
    if constraints.joint_count() != generated.joint_count() {
        return Err(Error::Dimension("constraint and sequence joint counts differ".into()));
    }
    let width = 2 * generated.joint_count();
    let mut fixed: Vec<Option<&PoseVector>> = vec![None; t_len];
    for (t, p) in &constraints.entries {
        fixed[*t] = Some(p);
    }
    let free: Vec<usize> = (0..t_len).filter(|&t| fixed[t].is_none()).collect();
    let mut pos = vec![usize::MAX; t_len];
    for (k, &t) in free.iter().enumerate() {
        pos[t] = k;
    }
    let mut out: Vec<Vec<f64>> = generated.frames.iter().map(|f| f.coords().to_vec()).collect();
    for (t, p) in &constraints.entries {
        out[*t] = p.coords().to_vec();
    }
    let g = |t: usize, k: usize| generated.frames[t].coords()[k];

    if !free.is_empty() {
        let n = free.len();
        let (mut sub, mut diag, mut sup) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (i, &t) in free.iter().enumerate() {
            for nb in [t.checked_sub(1), Some(t + 1).filter(|&u| u < t_len)].into_iter().flatten() {
                diag[i] += 1.0;
                if fixed[nb].is_none() {
                    if nb < t {
                        sub[i] = -1.0;
                    } else {
                        sup[i] = -1.0;
                    }
                }
            }
        }
        for k in 0..width {
            let mut rhs = vec![0.0; n];
            for (i, &t) in free.iter().enumerate() {
                for nb in [t.checked_sub(1), Some(t + 1).filter(|&u| u < t_len)].into_iter().flatten() {
                    if let Some(p) = fixed[nb] {
                        rhs[i] += p.coords()[k] - g(nb, k);
                    }
                }
            }
            thomas(&sub, &diag, &sup, &mut rhs);
            for (i, &t) in free.iter().enumerate() {
                out[t][k] = g(t, k) + rhs[i];
            }
        }
    }

    let mut residual: f64 = 0.0;
    for &t in &free {
        for k in 0..width {
            let mut r = 0.0;
            for nb in [t.checked_sub(1), Some(t + 1).filter(|&u| u < t_len)].into_iter().flatten() {
                r += (out[t][k] - out[nb][k]) - (g(t, k) - g(nb, k));
            }
            residual = residual.max(r.abs());
        }
    }
    let frames = out.into_iter().map(PoseVector::new).collect::<Result<Vec<_>>>()?;
    Ok(BlendResult { sequence: PoseSequence::new(frames, generated.class, generated.fps)?, residual })
}

/// Latent `z₀` whose decoded pose is closest in squared L2 to `pose`,
/// best over `starts` random initializations.
pub fn invert_pose(g0: &SinglePoseGenerator, pose: &PoseVector, class: ClassId, starts: usize, seed: u64) -> Result<(Vec<f64>, f64)> {
    if pose.joint_count() != g0.joints {
        return Err(Error::Dimension(format!("pose has {} joints, generator {}", pose.joint_count(), g0.joints)));
    }
    let onehot = Tensor::row(&class.one_hot(g0.classes)?);
    let target = Tensor::row(pose.coords());
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let ids = g0.bind(&mut tape)?;
        let z = tape.leaf(Tensor::row(x))?;
        let c = tape.leaf(onehot.clone())?;
        let y = g0.forward(&mut tape, &ids, z, c)?;
        let t = tape.leaf(target.clone())?;
        let d = tape.sub(y, t)?;
        let sq = tape.square(d)?;
        let loss = tape.sum(sq)?;
        let g = backward(&tape, loss, &[z])?;
        Ok((tape.value(loss).item(), g.get(z).expect("requested").data().to_vec()))
    };
    let bounds = BoundBox::uniform(g0.latent_dim, -1.0, 1.0)?;
    let mut rng = rng::substream(seed, "inverter/pose");
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..starts.max(1) {
        let x0 = rng::uniform_vec(&mut rng, g0.latent_dim, -1.0, 1.0);
        let mut inner = None;
        let res = lbfgsb_minimize(
            |x| {
                f(x).map_err(|e| {
                    inner = Some(e);
                    NumericsError::NonFinite { op: "pose inversion" }
                })
            },
            &x0,
            &bounds,
            &LbfgsbConfig::default(),
        );
        let res = match (res, inner) {
            (_, Some(e)) => return Err(e),
            (r, None) => r?,
        };
        if best.as_ref().is_none_or(|b| res.f < b.1) {
            best = Some((res.x, res.f));
        }
    }
    Ok(best.expect("at least one start"))
}
