use std::path::{Path, PathBuf};

use poseforge::evalscore::{ClassifierConfig, DEFAULT_SAMPLES, DEFAULT_SPLITS};
use poseforge::inverter::InversionConfig;
use poseforge::pose_gan::WganTrainConfig;
use poseforge::posecore::SkeletonSpec;
use poseforge::seq_gan::SeqTrainConfig;
use poseforge::skel2img::S2iTrainConfig;
use poseforge::synthdata::{default_class_specs, GenerateOptions};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const SEED_ENV: &str = "POSEFORGE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "J")]
    pub joints: usize,
    pub m: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub length: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2iSection {
    #[serde(flatten)]
    pub train: S2iTrainConfig,
    /// Synthetic training pairs drawn from the dataset.
    pub pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub splits: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `"desk"` (five motion classes) or `"pair"` (two-class oscillation toy).
    pub skeleton: String,
    pub dims: Dims,
    pub data: GenerateOptions,
    pub pose_gan: WganTrainConfig,
    pub seq_gan: SeqTrainConfig,
    pub s2i: S2iSection,
    pub inversion: InversionConfig,
    pub classifier: ClassifierConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = GenerateOptions::default();
        let pose_gan = WganTrainConfig::default();
        let seq_gan = SeqTrainConfig::default();
        Self {
            seed: 0,
            skeleton: "desk".into(),
            dims: Dims {
                joints: SkeletonSpec::desk().joint_count(),
                m: pose_gan.latent_dim,
                n: seq_gan.noise_dim,
                length: data.length,
                classes: default_class_specs().len(),
                w: 32,
                h: 32,
            },
            data,
            pose_gan,
            seq_gan,
            s2i: S2iSection { train: S2iTrainConfig::default(), pairs: 500 },
            inversion: InversionConfig::default(),
            classifier: ClassifierConfig::default(),
            eval: EvalSection { splits: DEFAULT_SPLITS, count: DEFAULT_SAMPLES },
        }
    }
}

/// Recursively overlay `patch` on `base`; keys absent from `base` are errors.
fn merge(base: &mut Value, patch: Value, at: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None => return Err(CliError::Config(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(root, patch, "")
}

impl RunConfig {
    /// Defaults, then the config file, then `--set key=value` overrides,
    /// then the seed (`--seed`, else `POSEFORGE_SEED`).
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
            merge(&mut tree, patch, "")?;
        }
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
            set_path(&mut tree, k.trim(), v.trim())?;
        }
        let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn skeleton_spec(&self) -> Result<SkeletonSpec, CliError> {
        match self.skeleton.as_str() {
            "desk" => Ok(SkeletonSpec::desk()),
            "pair" => Ok(SkeletonSpec::pair()),
            other => Err(CliError::Config(format!("unknown skeleton `{other}` (expected desk or pair)"))),
        }
    }

    /// Cross-field consistency; runs before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dims;
        let mismatch = |what: &str, a: usize, b: usize| Err(CliError::Config(format!("{what}: {a} vs {b}")));
        let j = self.skeleton_spec()?.joint_count();
        if d.joints != j {
            return mismatch("dims.J vs skeleton joint count", d.joints, j);
        }
        if d.m != self.pose_gan.latent_dim {
            return mismatch("dims.m vs pose_gan.latent_dim", d.m, self.pose_gan.latent_dim);
        }
        if d.n != self.seq_gan.noise_dim {
            return mismatch("dims.n vs seq_gan.noise_dim", d.n, self.seq_gan.noise_dim);
        }
        if d.length != self.data.length {
            return mismatch("dims.T vs data.length", d.length, self.data.length);
        }
        if d.length < 2 {
            return Err(CliError::Config("dims.T must be at least 2".into()));
        }
        let builtin = if self.skeleton == "desk" { default_class_specs().len() } else { 2 };
        if d.classes != builtin {
            return mismatch("dims.C vs built-in motion classes", d.classes, builtin);
        }
        if d.w != d.h {
            return Err(CliError::Config(format!("images must be square, got {}x{}", d.w, d.h)));
        }
        let wrap = |e: poseforge::Error| CliError::Config(e.to_string());
        self.s2i.train.arch.validate(d.w, d.h).map_err(wrap)?;
        self.pose_gan.validate().map_err(wrap)?;
        self.seq_gan.validate().map_err(wrap)?;
        self.s2i.train.validate().map_err(wrap)?;
        self.inversion.validate().map_err(wrap)?;
        if self.eval.splits == 0 {
            return Err(CliError::Config("eval.splits must be at least 1".into()));
        }
        Ok(())
    }
}

/// Standard file names inside the run directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn data(&self) -> PathBuf {
        self.file("data.jsonl")
    }
}

pub const POSE_GENERATOR: &str = "pose_generator.pfg";
pub const POSE_CRITIC: &str = "pose_critic.pfg";
pub const SEQ_GENERATOR: &str = "seq_generator.pfg";
pub const SEQ_DISCRIMINATOR: &str = "seq_discriminator.pfg";
pub const S2I: &str = "s2i.pfg";
pub const CLASSIFIER: &str = "classifier.pfg";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 5, "pose_gan": {"steps": 7}}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), &["pose_gan.steps=9".into(), "s2i.lambda=0.5".into()], None).unwrap();
        assert_eq!(c.pose_gan.steps, 9);
        assert_eq!(c.s2i.train.lambda, 0.5);
        assert_eq!(RunConfig::resolve(Some(&p), &[], Some(3)).unwrap().seed, 3);
    }

    #[test]
    fn mismatches_rejected() {
        for set in ["dims.J=8", "dims.m=3", "dims.n=2", "dims.T=20", "dims.C=4", "dims.w=64"] {
            assert!(matches!(RunConfig::resolve(None, &[set.into()], None), Err(CliError::Config(_))), "{set}");
        }
        assert!(matches!(RunConfig::resolve(None, &["nope=1".into()], None), Err(CliError::Config(_))));
        assert!(RunConfig::resolve(None, &["dims.T=20".into(), "data.length=20".into()], None).is_ok());
    }
}
