//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PFG1"  u32 version  u8 kind_len  kind
//! u32 dim_count   { u16 key_len  key  u64 value }*
//! u32 tensor_count { u8 rank  u64 dim*rank  f64 data* }*
//! sha256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::evalscore::ActionClassifier;
use crate::nn::{load_params, Activation, Conv, Linear, LstmCell, Mlp, Params};
use crate::numerics::Tensor;
use crate::pose_gan::{PoseCritic, SinglePoseGenerator};
use crate::seq_gan::{SequenceDiscriminator, SequenceGenerator};
use crate::skel2img::{Architecture, TransformerF};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFG1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    /// Ordered integer header.
    pub dims: Vec<(String, u64)>,
    pub tensors: Vec<Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("header string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn new(kind: &str, dims: Vec<(&str, usize)>, tensors: Vec<Tensor>) -> Self {
        Self { kind: kind.into(), dims: dims.into_iter().map(|(k, v)| (k.to_string(), v as u64)).collect(), tensors }
    }

    pub fn dim(&self, key: &str) -> Result<usize> {
        self.dims
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v as usize)
            .ok_or_else(|| bad(format!("{} checkpoint lacks header field `{key}`", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.len() as u8);
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for (k, v) in &self.dims {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(bad("not a poseforge checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let n = r.u8()? as usize;
        let kind = r.string(n)?;
        let nd = r.u32()? as usize;
        let mut dims = Vec::with_capacity(nd.min(1024));
        for _ in 0..nd {
            let n = r.u16()? as usize;
            dims.push((r.string(n)?, r.u64()?));
        }
        let nt = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(nt.min(1024));
        for _ in 0..nt {
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor size overflows"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?);
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes after payload", body.len() - r.pos)));
        }
        Ok(Self { kind, dims, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Models that round-trip through a [`Checkpoint`].
pub trait Persist: Sized {
    const KIND: &'static str;
    fn to_checkpoint(&self) -> Checkpoint;
    fn from_checkpoint(ck: &Checkpoint) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn fill<P: Params + ?Sized>(model: &mut P, ck: &Checkpoint) -> Result<()> {
    load_params(model, ck.tensors.clone()).map_err(|e| bad(format!("{}: {e}", ck.kind)))
}

fn mlp_dims(prefix: &str, mlp: &Mlp) -> Vec<(String, usize)> {
    let w = mlp.widths();
    let mut d = vec![(format!("{prefix}layers"), w.len() - 1)];
    d.extend(w.iter().enumerate().map(|(i, &v)| (format!("{prefix}width{i}"), v)));
    d
}

fn mlp_from(ck: &Checkpoint, prefix: &str, hidden: Activation, output: Activation) -> Result<Mlp> {
    let n = ck.dim(&format!("{prefix}layers"))?;
    let widths = (0..=n).map(|i| ck.dim(&format!("{prefix}width{i}"))).collect::<Result<Vec<_>>>()?;
    let layers = widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
    Ok(Mlp { layers, hidden, output })
}

fn owned(kind: &str, dims: Vec<(String, usize)>, tensors: Vec<Tensor>) -> Checkpoint {
    Checkpoint { kind: kind.into(), dims: dims.into_iter().map(|(k, v)| (k, v as u64)).collect(), tensors }
}

fn cloned<P: Params>(p: &P) -> Vec<Tensor> {
    p.params().into_iter().cloned().collect()
}

impl Persist for SinglePoseGenerator {
    const KIND: &'static str = "pose-generator";

    fn to_checkpoint(&self) -> Checkpoint {
        let mut dims = vec![("m".into(), self.latent_dim), ("C".into(), self.classes), ("J".into(), self.joints)];
        dims.extend(mlp_dims("", &self.mlp));
        owned(Self::KIND, dims, cloned(self))
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Self::KIND)?;
        let mut g = Self {
            mlp: mlp_from(ck, "", Activation::LeakyRelu, Activation::Tanh)?,
            latent_dim: ck.dim("m")?,
            classes: ck.dim("C")?,
            joints: ck.dim("J")?,
        };
        if g.mlp.input_width() != g.latent_dim + g.classes || g.mlp.output_width() != 2 * g.joints {
            return Err(bad("pose generator widths disagree with m, C, J"));
        }
        fill(&mut g, ck)?;
        Ok(g)
    }
}

impl Persist for PoseCritic {
    const KIND: &'static str = "pose-critic";

    fn to_checkpoint(&self) -> Checkpoint {
        let mut dims = vec![("C".into(), self.classes), ("J".into(), self.joints)];
        dims.extend(mlp_dims("", &self.mlp));
        owned(Self::KIND, dims, cloned(self))
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Self::KIND)?;
        let mut d = Self { mlp: mlp_from(ck, "", Activation::LeakyRelu, Activation::Identity)?, classes: ck.dim("C")?, joints: ck.dim("J")? };
        if d.mlp.input_width() != 2 * d.joints + d.classes || d.mlp.output_width() != 1 {
            return Err(bad("pose critic widths disagree with C, J"));
        }
        fill(&mut d, ck)?;
        Ok(d)
    }
}

impl Persist for SequenceGenerator {
    const KIND: &'static str = "sequence-generator";

    fn to_checkpoint(&self) -> Checkpoint {
        let dims = vec![
            ("n".into(), self.noise_dim),
            ("m".into(), self.latent_dim),
            ("C".into(), self.classes),
            ("T".into(), self.length),
            ("hidden".into(), self.hidden()),
        ];
        owned(Self::KIND, dims, cloned(self))
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Self::KIND)?;
        let (n, m, c, h) = (ck.dim("n")?, ck.dim("m")?, ck.dim("C")?, ck.dim("hidden")?);
        let mut g = Self {
            init: Linear::zeros(m + c, h),
            cell: LstmCell { weight: Tensor::zeros(&[n + h, 4 * h]), bias: Tensor::zeros(&[1, 4 * h]), hidden: h },
            project: Linear::zeros(h, m),
            noise_dim: n,
            latent_dim: m,
            classes: c,
            length: ck.dim("T")?,
        };
        fill(&mut g, ck)?;
        Ok(g)
    }
}

impl Persist for SequenceDiscriminator {
    const KIND: &'static str = "sequence-discriminator";

    fn to_checkpoint(&self) -> Checkpoint {
        let dims = vec![("J".into(), self.joints), ("C".into(), self.classes), ("hidden".into(), self.forward_cell.hidden)];
        owned(Self::KIND, dims, cloned(self))
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Self::KIND)?;
        let (j, c, h) = (ck.dim("J")?, ck.dim("C")?, ck.dim("hidden")?);
        let cell = || LstmCell { weight: Tensor::zeros(&[4 * j + c + h, 4 * h]), bias: Tensor::zeros(&[1, 4 * h]), hidden: h };
        let mut d = Self { forward_cell: cell(), backward_cell: cell(), head: Linear::zeros(2 * h, 1), joints: j, classes: c };
        fill(&mut d, ck)?;
        Ok(d)
    }
}

fn conv_dims(prefix: &str, c: &Conv) -> Vec<(String, usize)> {
    vec![
        (format!("{prefix}in"), c.inputs()),
        (format!("{prefix}out"), c.outputs()),
        (format!("{prefix}k"), c.kernel),
        (format!("{prefix}s"), c.stride),
    ]
}

fn conv_from(ck: &Checkpoint, prefix: &str) -> Result<Conv> {
    let (i, o, k) = (ck.dim(&format!("{prefix}in"))?, ck.dim(&format!("{prefix}out"))?, ck.dim(&format!("{prefix}k"))?);
    Ok(Conv { weight: Tensor::zeros(&[o, i * k * k]), bias: Tensor::zeros(&[o, 1]), kernel: k, stride: ck.dim(&format!("{prefix}s"))? })
}

impl Persist for TransformerF {
    const KIND: &'static str = "skeleton-to-image";

    fn to_checkpoint(&self) -> Checkpoint {
        let mut dims = vec![("J".into(), self.joints), ("encoder".into(), self.encoder.len()), ("decoder".into(), self.decoder.len())];
        for (i, c) in self.encoder.iter().enumerate() {
            dims.extend(conv_dims(&format!("e{i}."), c));
        }
        for (i, (module, skip)) in self.decoder.iter().zip(&self.skips).enumerate() {
            dims.push((format!("d{i}.convs"), module.len()));
            // 0 = network input, i + 1 = encoder layer i.
            dims.push((format!("d{i}.skip"), match skip {
                crate::skel2img::Skip::Input => 0,
                crate::skel2img::Skip::Encoder(e) => e + 1,
            }));
            for (j, c) in module.iter().enumerate() {
                dims.extend(conv_dims(&format!("d{i}.{j}."), c));
            }
        }
        dims.extend(conv_dims("head.", &self.head));
        owned(Self::KIND, dims, cloned(self))
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Self::KIND)?;
        let encoder = (0..ck.dim("encoder")?).map(|i| conv_from(ck, &format!("e{i}."))).collect::<Result<Vec<_>>>()?;
        let mut decoder = Vec::new();
        let mut skips = Vec::new();
        for i in 0..ck.dim("decoder")? {
            let convs = (0..ck.dim(&format!("d{i}.convs"))?).map(|j| conv_from(ck, &format!("d{i}.{j}."))).collect::<Result<Vec<_>>>()?;
            decoder.push(convs);
            skips.push(match ck.dim(&format!("d{i}.skip"))? {
                0 => crate::skel2img::Skip::Input,
                e if e <= encoder.len() => crate::skel2img::Skip::Encoder(e - 1),
                e => return Err(bad(format!("skip source {e} out of range"))),
            });
        }
        let mut f = Self { encoder, decoder, head: conv_from(ck, "head.")?, skips, joints: ck.dim("J")? };
        fill(&mut f, ck)?;
        Ok(f)
    }
}

impl TransformerF {
    /// Layer layout this network was built from.
    pub fn architecture(&self) -> Architecture {
        Architecture {
            encoder: self.encoder.iter().map(|c| (c.outputs(), c.stride)).collect(),
            encoder_kernel: self.encoder.first().map_or(5, |c| c.kernel),
            decoder: self.decoder.iter().map(|m| (m[0].outputs(), m.len())).collect(),
        }
    }
}

impl Persist for ActionClassifier {
    const KIND: &'static str = "action-classifier";

    fn to_checkpoint(&self) -> Checkpoint {
        let mut dims = vec![("J".into(), self.joints), ("C".into(), self.classes)];
        dims.extend(mlp_dims("pose.", &self.pose));
        dims.extend(mlp_dims("motion.", &self.motion));
        let mut t = cloned(&self.pose);
        t.extend(cloned(&self.motion));
        owned(Self::KIND, dims, t)
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Self::KIND)?;
        let mut pose = mlp_from(ck, "pose.", Activation::LeakyRelu, Activation::Identity)?;
        let mut motion = mlp_from(ck, "motion.", Activation::LeakyRelu, Activation::Identity)?;
        let split = pose.params().len();
        if ck.tensors.len() < split {
            return Err(bad("action classifier payload too short"));
        }
        load_params(&mut pose, ck.tensors[..split].to_vec()).map_err(|e| bad(format!("pose stream: {e}")))?;
        load_params(&mut motion, ck.tensors[split..].to_vec()).map_err(|e| bad(format!("motion stream: {e}")))?;
        Ok(Self { pose, motion, joints: ck.dim("J")?, classes: ck.dim("C")? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn round_trip<P: Persist + PartialEq + std::fmt::Debug>(model: &P) {
        let bytes = model.to_checkpoint().to_bytes();
        let back = P::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(&back, model);
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn every_model_round_trips() {
        let mut r = rng::seeded(1);
        round_trip(&SinglePoseGenerator::new(8, 5, 7, &[16, 16], &mut r));
        round_trip(&PoseCritic::new(5, 7, &[16, 16], &mut r));
        round_trip(&SequenceGenerator::new(6, 8, 5, 16, 12, &mut r));
        round_trip(&SequenceDiscriminator::new(7, 5, 9, &mut r));
        round_trip(&TransformerF::new(&Architecture::small(), 7, &mut r).unwrap());
        round_trip(&ActionClassifier::new(7, 5, 10, &mut r));
    }

    #[test]
    fn architecture_recovered() {
        let mut r = rng::seeded(2);
        let f = TransformerF::new(&Architecture::full(), 3, &mut r).unwrap();
        assert_eq!(f.architecture(), Architecture::full());
    }

    #[test]
    fn corruption_is_detected() {
        let mut r = rng::seeded(3);
        let bytes = SinglePoseGenerator::new(2, 2, 2, &[4], &mut r).to_checkpoint().to_bytes();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(PoseCritic::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn layout_prefix() {
        let ck = Checkpoint::new("x", vec![("a", 3)], vec![Tensor::row(&[1.5])]);
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"PFG1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], b'x');
        assert_eq!(b.len(), 4 + 4 + 2 + 4 + (2 + 1 + 8) + 4 + (1 + 16 + 8) + 32);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), ck);
    }
}
