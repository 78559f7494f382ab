use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use poseforge::checkpoint::{Checkpoint, Persist};
use poseforge::evalscore::{score_sequences, train_classifier, ActionClassifier};
use poseforge::inverter::{complete, ConstraintSet, Models};
use poseforge::pose_gan::{train_single_pose, PoseCritic, SinglePoseGenerator};
use poseforge::posecore::{default_sigma, ClassId, PoseSequence, PoseVector};
use poseforge::rng;
use poseforge::seq_gan::{sample_latents, train_sequence, SequenceDiscriminator, SequenceGenerator};
use poseforge::skel2img::{synthetic_pairs, train_s2i, TransformerF};
use poseforge::synthdata::{default_dataset, load_sequences, save_sequences, toy_oscillation_dataset, Dataset, Split};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::*;
use crate::error::CliError;
use crate::render::{render_animation, RenderOptions};

/// Line-delimited JSON records, to stdout and to `<dir>/<command>.log.jsonl`.
pub struct Logger {
    command: &'static str,
    file: BufWriter<File>,
}

impl Logger {
    pub fn new(command: &'static str, dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(format!("{command}.log.jsonl"));
        let file = File::create(&path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        Ok(Self { command, file: BufWriter::new(file) })
    }

    pub fn record(&mut self, event: &str, body: impl Serialize) -> Result<(), CliError> {
        let mut v = json!({ "command": self.command, "event": event });
        if let Value::Object(extra) = serde_json::to_value(body).map_err(|e| CliError::Other(e.to_string()))? {
            v.as_object_mut().expect("object").extend(extra);
        }
        let line = v.to_string();
        println!("{line}");
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.file.flush()?;
        Ok(())
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub ws: Workspace,
    pub log: Logger,
}

fn shown(p: &Path) -> String {
    p.display().to_string()
}

fn load_checkpoint<P: Persist>(path: &Path, expect: &[(&str, usize)]) -> Result<P, CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::at(path, e))?;
    ck.expect_kind(P::KIND).map_err(|e| CliError::at(path, e))?;
    for &(key, want) in expect {
        let have = ck.dim(key).map_err(|e| CliError::at(path, e))?;
        if have != want {
            return Err(CliError::Config(format!("{}: checkpoint has {key}={have}, config has {want}", path.display())));
        }
    }
    P::from_checkpoint(&ck).map_err(|e| CliError::at(path, e))
}

fn save_checkpoint<P: Persist>(model: &P, path: &Path) -> Result<(), CliError> {
    model.save(path).map_err(|e| CliError::at(path, e))
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn data_path(&self, flag: Option<&PathBuf>) -> PathBuf {
        flag.cloned().unwrap_or_else(|| self.ws.data())
    }

    /// Dataset checked against the configured `J`, `C` and `T`.
    fn load_dataset(&self, path: &Path) -> Result<Dataset, CliError> {
        let ds = load_sequences(path).map_err(|e| CliError::at(path, e))?;
        let d = self.cfg.dims;
        if ds.joint_count() != d.joints || ds.class_count() != d.classes {
            return Err(CliError::Config(format!(
                "{}: data has J={} C={}, config has J={} C={}",
                path.display(),
                ds.joint_count(),
                ds.class_count(),
                d.joints,
                d.classes
            )));
        }
        ds.validate_uniform().map_err(|e| CliError::at(path, e))?;
        if ds.sequence_length() != d.length {
            return Err(CliError::Config(format!("{}: data has T={}, config has T={}", path.display(), ds.sequence_length(), d.length)));
        }
        Ok(ds)
    }

    /// Sequences from `path` with class ids mapped into `vocab` by name.
    fn load_input(&self, path: &Path, vocab: &[String]) -> Result<Vec<PoseSequence>, CliError> {
        let ds = load_sequences(path).map_err(|e| CliError::at(path, e))?;
        if ds.joint_count() != self.cfg.dims.joints {
            return Err(CliError::Config(format!("{}: sequences have J={}, config has J={}", path.display(), ds.joint_count(), self.cfg.dims.joints)));
        }
        ds.sequences
            .into_iter()
            .map(|mut s| {
                let name = &ds.classes[s.class.0];
                let id = vocab
                    .iter()
                    .position(|v| v == name)
                    .ok_or_else(|| CliError::Config(format!("{}: class `{name}` is not in the training vocabulary", path.display())))?;
                s.class = ClassId(id);
                Ok(s)
            })
            .collect()
    }

    fn vocabulary(&self) -> Result<Vec<String>, CliError> {
        let path = self.ws.data();
        Ok(load_sequences(&path).map_err(|e| CliError::at(&path, e))?.classes)
    }

    fn pose_generator(&self) -> Result<SinglePoseGenerator, CliError> {
        let d = self.cfg.dims;
        load_checkpoint(&self.ws.file(POSE_GENERATOR), &[("m", d.m), ("C", d.classes), ("J", d.joints)])
    }

    fn sequence_models(&self) -> Result<(SequenceGenerator, SequenceDiscriminator), CliError> {
        let d = self.cfg.dims;
        let gen = load_checkpoint(&self.ws.file(SEQ_GENERATOR), &[("n", d.n), ("m", d.m), ("C", d.classes), ("T", d.length)])?;
        let disc = load_checkpoint(&self.ws.file(SEQ_DISCRIMINATOR), &[("J", d.joints), ("C", d.classes)])?;
        Ok((gen, disc))
    }

    fn write_dataset(&mut self, ds: &Dataset, path: &Path) -> Result<(), CliError> {
        save_sequences(ds, path).map_err(|e| CliError::at(path, e))
    }
}

pub fn gen_data(ctx: &mut Ctx, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| ctx.ws.data());
    let cfg = &ctx.cfg;
    let ds = match cfg.skeleton.as_str() {
        "pair" => toy_oscillation_dataset(cfg.data.per_class, cfg.data.length, cfg.seed)?,
        _ => default_dataset(&cfg.data, cfg.seed)?,
    };
    ctx.write_dataset(&ds, &out)?;
    let (train, test) = (ds.split(Split::Train).len(), ds.split(Split::Test).len());
    ctx.log.record("done", json!({ "path": shown(&out), "sequences": ds.sequences.len(), "train": train, "test": test, "classes": ds.classes }))
}

pub fn train_pose(ctx: &mut Ctx, data: Option<PathBuf>) -> Result<(), CliError> {
    let path = ctx.data_path(data.as_ref());
    let ds = ctx.load_dataset(&path)?;
    let frames = ds.frames(Some(Split::Train));
    let cfg = ctx.cfg.pose_gan;
    let seed = ctx.seed();
    let mut records = Vec::new();
    let (gen, critic, _) = train_single_pose(&frames, &cfg, seed, |s| records.push(*s))?;
    for r in &records {
        ctx.log.record("step", r)?;
    }
    let (gp, cp) = (ctx.ws.file(POSE_GENERATOR), ctx.ws.file(POSE_CRITIC));
    save_checkpoint(&gen, &gp)?;
    save_checkpoint::<PoseCritic>(&critic, &cp)?;
    ctx.log.record("done", json!({ "generator": shown(&gp), "critic": shown(&cp), "poses": frames.poses.len() }))
}

pub fn train_seq(ctx: &mut Ctx, data: Option<PathBuf>) -> Result<(), CliError> {
    let path = ctx.data_path(data.as_ref());
    let ds = ctx.load_dataset(&path)?.subset(Split::Train);
    let g0 = ctx.pose_generator()?;
    let cfg = ctx.cfg.seq_gan;
    let mut records = Vec::new();
    let (gen, disc, _) = train_sequence(&ds, &g0, &cfg, ctx.seed(), |s| records.push(*s))?;
    for r in &records {
        ctx.log.record("step", r)?;
    }
    let (gp, dp) = (ctx.ws.file(SEQ_GENERATOR), ctx.ws.file(SEQ_DISCRIMINATOR));
    save_checkpoint(&gen, &gp)?;
    save_checkpoint(&disc, &dp)?;
    ctx.log.record("done", json!({ "generator": shown(&gp), "discriminator": shown(&dp), "sequences": ds.sequences.len() }))
}

pub fn train_s2i_cmd(ctx: &mut Ctx, data: Option<PathBuf>) -> Result<(), CliError> {
    let path = ctx.data_path(data.as_ref());
    let ds = ctx.load_dataset(&path)?.subset(Split::Train);
    let skeleton = ctx.cfg.skeleton_spec()?;
    let pairs = synthetic_pairs(&ds, &skeleton, ctx.cfg.s2i.pairs, ctx.cfg.dims.w, ctx.seed())?;
    let mut records = Vec::new();
    let (f, _, _) = train_s2i(&pairs, &ctx.cfg.s2i.train, ctx.seed(), |e| records.push(*e))?;
    for r in &records {
        ctx.log.record("epoch", r)?;
    }
    let fp = ctx.ws.file(S2I);
    save_checkpoint(&f, &fp)?;
    ctx.log.record("done", json!({ "transformer": shown(&fp), "pairs": pairs.len() }))
}

pub fn generate(ctx: &mut Ctx, count: Option<usize>, length: Option<usize>, class: Option<String>, out: Option<PathBuf>) -> Result<(), CliError> {
    let count = count.unwrap_or(ctx.cfg.eval.count);
    let length = length.unwrap_or(ctx.cfg.dims.length);
    if count == 0 || length == 0 {
        return Err(CliError::Usage("--count and --length must be positive".into()));
    }
    let vocab = ctx.vocabulary()?;
    let fixed = class
        .map(|name| vocab.iter().position(|v| *v == name).map(ClassId).ok_or_else(|| CliError::Usage(format!("unknown class `{name}`"))))
        .transpose()?;
    let g0 = ctx.pose_generator()?;
    let (gen, _) = ctx.sequence_models()?;
    let classes: Vec<ClassId> = (0..count).map(|i| fixed.unwrap_or(ClassId(i % vocab.len()))).collect();
    let mut r = rng::substream(ctx.seed(), "cli/generate");
    let (z, z0) = sample_latents(&mut r, count, gen.noise_dim, gen.latent_dim)?;
    let frames = gen.generate_frames(&g0, &z, &z0, &classes, length)?;
    let w = 2 * g0.joints;
    let sequences = (0..count)
        .map(|i| {
            let poses = frames.iter().map(|f| PoseVector::new(f.data()[i * w..(i + 1) * w].to_vec())).collect::<poseforge::Result<Vec<_>>>()?;
            Ok(PoseSequence::new(poses, classes[i], ctx.cfg.data.fps)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let out = out.unwrap_or_else(|| ctx.ws.file("generated.jsonl"));
    let ds = Dataset { sequences, classes: vocab, splits: Vec::new() };
    ctx.write_dataset(&ds, &out)?;
    ctx.log.record("done", json!({ "path": shown(&out), "count": count, "length": length }))
}

/// Which frames of each input sequence are pinned.
pub enum Pins {
    Prefix(usize),
    Indices(Vec<String>),
}

fn resolve_pins(pins: &Pins, len: usize) -> Result<Vec<usize>, CliError> {
    let out: Vec<usize> = match pins {
        Pins::Prefix(k) => {
            if *k == 0 || *k >= len {
                return Err(CliError::Usage(format!("--frames must be in 1..{len}, got {k}")));
            }
            (0..*k).collect()
        }
        Pins::Indices(raw) => raw
            .iter()
            .map(|p| match p.as_str() {
                "last" => Ok(len - 1),
                s => s.parse::<usize>().ok().filter(|&i| i < len).ok_or_else(|| CliError::Usage(format!("--pin `{s}` is not a frame index below {len} or `last`"))),
            })
            .collect::<Result<_, _>>()?,
    };
    if out.is_empty() {
        return Err(CliError::Usage("at least one pinned frame is required".into()));
    }
    Ok(out)
}

pub fn invert(ctx: &mut Ctx, pins: Pins, input: Option<PathBuf>, count: usize, out: Option<PathBuf>, default_out: &str) -> Result<(), CliError> {
    let vocab = ctx.vocabulary()?;
    let seqs = match &input {
        Some(p) => ctx.load_input(p, &vocab)?,
        None => {
            let path = ctx.ws.data();
            ctx.load_dataset(&path)?.split(Split::Test).into_iter().cloned().collect()
        }
    };
    if seqs.is_empty() {
        return Err(CliError::Usage("no input sequences".into()));
    }
    let g0 = ctx.pose_generator()?;
    let (gen, disc) = ctx.sequence_models()?;
    let mut outputs = Vec::new();
    for (i, seq) in seqs.iter().take(count.max(1)).enumerate() {
        let idx = resolve_pins(&pins, seq.len())?;
        let cs = ConstraintSet::from_indices(seq, &idx)?;
        let models = Models::new(&g0, &gen, &disc).with_length(seq.len());
        let res = complete(&cs, &models, &ctx.cfg.inversion, ctx.seed().wrapping_add(i as u64))?;
        let good = res.restarts.iter().filter(|r| r.error.is_none()).count();
        ctx.log.record(
            "sequence",
            json!({
                "index": i,
                "pinned": idx,
                "objective": res.objective,
                "contextual_per_coordinate": res.contextual / cs.coordinate_count() as f64,
                "converged": res.converged,
                "restarts_ok": good,
                "blend_residual": res.blend_residual,
            }),
        )?;
        outputs.push(res.sequence);
    }
    let out = out.unwrap_or_else(|| ctx.ws.file(default_out));
    let n = outputs.len();
    ctx.write_dataset(&Dataset { sequences: outputs, classes: vocab, splits: Vec::new() }, &out)?;
    ctx.log.record("done", json!({ "path": shown(&out), "count": n }))
}

pub fn score(ctx: &mut Ctx, input: Option<PathBuf>, splits: Option<usize>, out: Option<PathBuf>) -> Result<(), CliError> {
    let data_path = ctx.ws.data();
    let ds = ctx.load_dataset(&data_path)?;
    let cp = ctx.ws.file(CLASSIFIER);
    let d = ctx.cfg.dims;
    let clf: ActionClassifier = if cp.exists() {
        load_checkpoint(&cp, &[("J", d.joints), ("C", d.classes)])?
    } else {
        let trained = train_classifier(&ds, &ctx.cfg.classifier, ctx.seed())?;
        ctx.log.record("classifier", json!({ "test_accuracy": trained.test_accuracy, "train_accuracy": trained.train_accuracy, "path": shown(&cp) }))?;
        save_checkpoint(&trained.classifier, &cp)?;
        trained.classifier
    };
    let seqs = match &input {
        Some(p) => ctx.load_input(p, &ds.classes)?,
        None => ds.sequences.clone(),
    };
    let refs: Vec<&PoseSequence> = seqs.iter().collect();
    let report = score_sequences(&refs, &clf, splits.unwrap_or(ctx.cfg.eval.splits))?;
    let out = out.unwrap_or_else(|| ctx.ws.file("score.json"));
    let source = input.as_deref().map_or_else(|| shown(&data_path), shown);
    let body = json!({ "input": source, "report": report });
    std::fs::write(&out, serde_json::to_string_pretty(&body).expect("serializable") + "\n").map_err(|e| CliError::io(&out, e))?;
    ctx.log.record("done", json!({ "path": shown(&out), "frame_is": report.frame_is, "video_is": report.video_is, "samples": report.samples }))
}

pub fn render(ctx: &mut Ctx, input: Option<PathBuf>, index: usize, pixels: bool, scale: u32, out: Option<PathBuf>) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| ctx.ws.data());
    let f = if pixels {
        let fp = ctx.ws.file(S2I);
        if !fp.exists() {
            return Err(CliError::Missing(format!("--pixels needs a skeleton-to-image checkpoint at {} (run train-s2i)", fp.display())));
        }
        Some(load_checkpoint::<TransformerF>(&fp, &[("J", ctx.cfg.dims.joints)])?)
    } else {
        None
    };
    let ds = load_sequences(&input).map_err(|e| CliError::at(&input, e))?;
    let seq = ds
        .sequences
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("--index {index} out of range ({} sequences)", ds.sequences.len())))?;
    let skeleton = ctx.cfg.skeleton_spec()?;
    if seq.joint_count() != skeleton.joint_count() {
        return Err(CliError::Config(format!("sequence has {} joints, skeleton {}", seq.joint_count(), skeleton.joint_count())));
    }
    let size = ctx.cfg.dims.w;
    let sigma = ctx.cfg.s2i.train.sigma.unwrap_or_else(|| default_sigma(size));
    let opts = RenderOptions { skeleton: &skeleton, size, scale: scale.max(1), pixels: f.as_ref().map(|f| (f, sigma)) };
    let out = out.unwrap_or_else(|| ctx.ws.file("render"));
    let files = render_animation(seq, &opts, &out)?;
    ctx.log.record("done", json!({ "dir": shown(&out), "files": files.len() }))
}
