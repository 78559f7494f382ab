//! Skeleton-to-image network: a small U-Net over joint heat maps and a
//! reference image, trained with pixel BCE plus a random-feature
//! perceptual term.

use serde::{Deserialize, Serialize};

use crate::nn::{accumulate_grads, Conv, Params};
use crate::numerics::{backward, AdamHyper, AdamState, NodeId, Tape, Tensor};
use crate::posecore::{default_sigma, heatmap_encode, render_stick_figure, HeatMapStack, Image, PoseVector, SkeletonSpec, StickStyle};
use crate::rng::{self, Rng};
use crate::synthdata::Dataset;
use crate::{Error, Result};

/// Guard applied to predictions before taking logs.
pub const BCE_EPS: f64 = 1e-6;

/// Layer layout. Encoder convs use `encoder_kernel`, decoder convs 3×3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `(out_channels, stride)` per encoder conv.
    pub encoder: Vec<(usize, usize)>,
    pub encoder_kernel: usize,
    /// Per decoder module: output channels and conv count after the 2× upsample.
    pub decoder: Vec<(usize, usize)>,
}

impl Architecture {
    /// Four 5×5 encoder convs (strides 2, 1, 2, 1) and two
    /// (upsample, conv, conv) modules, for 32×32 images.
    pub fn small() -> Self {
        Self { encoder: vec![(8, 2), (8, 1), (16, 2), (16, 1)], encoder_kernel: 5, decoder: vec![(16, 2), (8, 2)] }
    }

    /// Eight encoder convs and four decoder modules, for 128×128 images.
    pub fn full() -> Self {
        Self {
            encoder: vec![(16, 2), (16, 1), (32, 2), (32, 1), (64, 2), (64, 1), (64, 2), (64, 1)],
            encoder_kernel: 5,
            decoder: vec![(64, 2), (32, 2), (16, 2), (16, 1)],
        }
    }

    fn downsampling(&self) -> usize {
        self.encoder.iter().filter(|e| e.1 == 2).count()
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.encoder.is_empty() || self.encoder.iter().any(|e| e.0 == 0 || !(e.1 == 1 || e.1 == 2)) {
            return Err(Error::Invalid("encoder layers need positive channels and stride 1 or 2".into()));
        }
        if self.decoder.len() != self.downsampling() || self.decoder.iter().any(|d| d.0 == 0 || d.1 == 0) {
            return Err(Error::Invalid(format!(
                "{} downsampling encoder layers need as many decoder modules, got {}",
                self.downsampling(),
                self.decoder.len()
            )));
        }
        let k = 1 << self.downsampling();
        if !width.is_multiple_of(k) || !height.is_multiple_of(k) {
            return Err(Error::Invalid(format!("image size {width}x{height} must be divisible by {k}")));
        }
        Ok(())
    }
}

/// Where a decoder module's skip input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Skip {
    /// The network input.
    Input,
    /// Output of the given encoder layer.
    Encoder(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerF {
    pub encoder: Vec<Conv>,
    /// One list of convs per decoder module.
    pub decoder: Vec<Vec<Conv>>,
    pub head: Conv,
    pub skips: Vec<Skip>,
    pub joints: usize,
}

impl TransformerF {
    pub fn new(arch: &Architecture, joints: usize, rng: &mut Rng) -> Result<Self> {
        arch.validate(1 << arch.downsampling(), 1 << arch.downsampling())?;
        let in_c = Image::CHANNELS + joints;
        let mut encoder = Vec::new();
        let mut c = in_c;
        // Scale level (number of halvings) after each encoder layer.
        let mut levels = Vec::new();
        let mut level = 0;
        for &(out, stride) in &arch.encoder {
            encoder.push(Conv::init(c, out, arch.encoder_kernel, stride, rng));
            c = out;
            if stride == 2 {
                level += 1;
            }
            levels.push(level);
        }
        let mut decoder = Vec::new();
        let mut skips = Vec::new();
        for &(out, convs) in &arch.decoder {
            level -= 1;
            // Deepest encoder output at the level reached after upsampling.
            let skip = match levels.iter().rposition(|&l| l == level) {
                Some(i) if level > 0 => Skip::Encoder(i),
                _ => Skip::Input,
            };
            let skip_c = match skip {
                Skip::Input => in_c,
                Skip::Encoder(i) => arch.encoder[i].0,
            };
            let mut module = vec![Conv::init(c + skip_c, out, 3, 1, rng)];
            for _ in 1..convs {
                module.push(Conv::init(out, out, 3, 1, rng));
            }
            decoder.push(module);
            skips.push(skip);
            c = out;
        }
        let head = Conv::init(c, Image::CHANNELS, 3, 1, rng);
        Ok(Self { encoder, decoder, head, skips, joints })
    }

    pub fn input_channels(&self) -> usize {
        Image::CHANNELS + self.joints
    }

    /// Pre-sigmoid output `[3, h, w]` for an input `[3 + J, h, w]`.
    pub fn logits(&self, tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let (c, h, w) = tape.value(x).dims3()?;
        if c != self.input_channels() {
            return Err(Error::Dimension(format!("input has {c} channels, network expects {}", self.input_channels())));
        }
        let k = 1 << self.skips.len();
        if h % k != 0 || w % k != 0 {
            return Err(Error::Dimension(format!("image size {w}x{h} must be divisible by {k}")));
        }
        let mut p = 0;
        let mut outs = Vec::with_capacity(self.encoder.len());
        let mut cur = x;
        for conv in &self.encoder {
            let y = conv.forward(tape, &ids[p..p + 2], cur)?;
            cur = tape.leaky_relu(y)?;
            outs.push(cur);
            p += 2;
        }
        for (module, skip) in self.decoder.iter().zip(&self.skips) {
            let up = tape.upsample2x(cur)?;
            let s = match *skip {
                Skip::Input => x,
                Skip::Encoder(i) => outs[i],
            };
            cur = tape.concat_channels(&[up, s])?;
            for conv in module {
                let y = conv.forward(tape, &ids[p..p + 2], cur)?;
                cur = tape.leaky_relu(y)?;
                p += 2;
            }
        }
        Ok(self.head.forward(tape, &ids[p..p + 2], cur)?)
    }

    /// Image for a prepared `[3 + J, h, w]` input.
    pub fn predict(&self, input: &Tensor) -> Result<Image> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape)?;
        let x = tape.leaf(input.clone())?;
        let l = self.logits(&mut tape, &ids, x)?;
        let y = tape.sigmoid(l)?;
        Image::from_tensor(tape.value(y))
    }
}

impl Params for TransformerF {
    fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.encoder.iter().flat_map(|c| c.params()).collect();
        v.extend(self.decoder.iter().flatten().flat_map(|c| c.params()));
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.encoder.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.decoder.iter_mut().flatten().flat_map(|c| c.params_mut()));
        v.extend(self.head.params_mut());
        v
    }
}

/// Heat maps stacked after the reference image's channels.
pub fn network_input(heat: &HeatMapStack, reference: &Image) -> Result<Tensor> {
    if (heat.width, heat.height) != (reference.width, reference.height) {
        return Err(Error::Dimension(format!(
            "heat maps are {}x{}, reference {}x{}",
            heat.width, heat.height, reference.width, reference.height
        )));
    }
    let mut data = reference.data.clone();
    data.extend_from_slice(heat.to_tensor().data());
    Ok(Tensor::new(&[Image::CHANNELS + heat.joint_count(), heat.height, heat.width], data)?)
}

/// `F(S | y₀)`.
pub fn f_forward(heat: &HeatMapStack, reference: &Image, f: &TransformerF) -> Result<Image> {
    if heat.joint_count() != f.joints {
        return Err(Error::Dimension(format!("{} heat maps for a {}-joint network", heat.joint_count(), f.joints)));
    }
    f.predict(&network_input(heat, reference)?)
}

/// Mean pixel-channel binary cross entropy, predictions clamped to `[ε, 1 − ε]`.
pub fn bce_loss(pred: &Image, truth: &Image) -> Result<f64> {
    if pred.data.len() != truth.data.len() || pred.width != truth.width {
        return Err(Error::Dimension("prediction and truth sizes differ".into()));
    }
    let k = pred.data.len() as f64;
    let s: f64 = pred
        .data
        .iter()
        .zip(&truth.data)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            (1.0 - y) * (1.0 - p).ln() + y * p.ln()
        })
        .sum();
    Ok(-s / k)
}

/// A tap reads the activations after `after` layers (0 = the image itself).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub after: usize,
    pub weight: f64,
}

/// Fixed random conv stack standing in for a pretrained perception network.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionNet {
    pub layers: Vec<Conv>,
    pub taps: Vec<Tap>,
}

impl PerceptionNet {
    /// Five 3×3 convs (strides 1, 2, 1, 2, 1) with a tap after each; tap
    /// weights are the reciprocal element counts at the given image size.
    pub fn random(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, "skel2img/perception");
        let channels = 8;
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let (mut h, mut w, mut c) = (height, width, Image::CHANNELS);
        for (i, stride) in [1, 2, 1, 2, 1].into_iter().enumerate() {
            layers.push(Conv::init(c, channels, 3, stride, &mut rng));
            c = channels;
            h = h.div_ceil(stride);
            w = w.div_ceil(stride);
            taps.push(Tap { after: i + 1, weight: 1.0 / (c * h * w) as f64 });
        }
        Self { layers, taps }
    }

    /// Pixelwise L1 with weight 1.
    pub fn identity() -> Self {
        Self { layers: Vec::new(), taps: vec![Tap { after: 0, weight: 1.0 }] }
    }

    fn depth(&self) -> usize {
        self.taps.iter().map(|t| t.after).max().unwrap_or(0)
    }

    /// Tap activations recorded on `tape`, in tap order. Parameters enter as constants.
    pub fn features(&self, tape: &mut Tape, x: NodeId) -> Result<Vec<NodeId>> {
        let mut acts = vec![x];
        let mut cur = x;
        for conv in &self.layers[..self.depth().min(self.layers.len())] {
            let w = tape.leaf(conv.weight.clone())?;
            let b = tape.leaf(conv.bias.clone())?;
            let y = conv.forward(tape, &[w, b], cur)?;
            cur = tape.leaky_relu(y)?;
            acts.push(cur);
        }
        self.taps
            .iter()
            .map(|t| acts.get(t.after).copied().ok_or_else(|| Error::Invalid(format!("tap after layer {} beyond the stack", t.after))))
            .collect()
    }

    pub fn feature_values(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.leaf(img.clone())?;
        let f = self.features(&mut tape, x)?;
        Ok(f.iter().map(|&n| tape.value(n).clone()).collect())
    }

    /// `Σ_l λ_l ‖Φ_l(pred) − Φ_l(truth)‖₁` on the tape, truth features given.
    fn loss_node(&self, tape: &mut Tape, pred: NodeId, truth_features: &[Tensor]) -> Result<NodeId> {
        let fp = self.features(tape, pred)?;
        let mut total: Option<NodeId> = None;
        for ((tap, &f), t) in self.taps.iter().zip(&fp).zip(truth_features) {
            let tgt = tape.leaf(t.clone())?;
            let d = tape.sub(f, tgt)?;
            let a = tape.abs(d)?;
            let s = tape.sum(a)?;
            let s = tape.scale(s, tap.weight)?;
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        total.ok_or_else(|| Error::Invalid("perception net has no taps".into()))
    }
}

pub fn feature_match_loss(pred: &Image, truth: &Image, phi: &PerceptionNet) -> Result<f64> {
    let a = phi.feature_values(&pred.to_tensor())?;
    let b = phi.feature_values(&truth.to_tensor())?;
    Ok(phi.taps.iter().zip(a.iter().zip(&b)).map(|(t, (x, y))| t.weight * x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum::<f64>()).sum())
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct S2iPair {
    pub pose: PoseVector,
    pub reference: Image,
    pub truth: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2iTrainConfig {
    pub lambda: f64,
    pub adam: AdamHyper,
    pub batch_size: usize,
    pub epochs: usize,
    pub arch: Architecture,
    /// Heat-map width; `None` uses the image-size default.
    pub sigma: Option<f64>,
}

impl Default for S2iTrainConfig {
    fn default() -> Self {
        Self { lambda: 0.01, adam: AdamHyper::skeleton_to_image(), batch_size: 8, epochs: 30, arch: Architecture::small(), sigma: None }
    }
}

impl S2iTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Invalid(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch means of the loss terms over the training updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S2iEpoch {
    pub epoch: usize,
    pub bce: f64,
    pub feature_match: f64,
    pub total: f64,
}

/// Terms of the combined loss for one example, with parameter gradients.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub bce: f64,
    pub feature_match: f64,
    pub total: f64,
    pub gradients: Vec<Tensor>,
}

/// `BCE(F(x), y) + λ·feature_match(F(x), y)`. BCE is taken on the logits,
/// which equals [`bce_loss`] away from the clamp.
pub fn sample_loss(f: &TransformerF, phi: &PerceptionNet, input: &Tensor, truth: &Tensor, truth_features: &[Tensor], lambda: f64) -> Result<SampleLoss> {
    let mut tape = Tape::new();
    let ids = f.bind(&mut tape)?;
    let x = tape.leaf(input.clone())?;
    let l = f.logits(&mut tape, &ids, x)?;
    if tape.shape(l) != truth.shape() {
        return Err(Error::Dimension(format!("output {:?} vs truth {:?}", tape.shape(l), truth.shape())));
    }
    let k = truth.len() as f64;
    let pos = tape.log_sigmoid(l)?;
    let nl = tape.scale(l, -1.0)?;
    let neg = tape.log_sigmoid(nl)?;
    let a = tape.mul_const(pos, truth.clone())?;
    let b = tape.mul_const(neg, truth.map(|y| 1.0 - y))?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s)?;
    let bce = tape.scale(s, -1.0 / k)?;
    let mut total = bce;
    let mut fm_value = 0.0;
    if lambda != 0.0 {
        let pred = tape.sigmoid(l)?;
        let fm = phi.loss_node(&mut tape, pred, truth_features)?;
        fm_value = tape.value(fm).item();
        let w = tape.scale(fm, lambda)?;
        total = tape.add(bce, w)?;
    }
    let mut g = backward(&tape, total, &ids)?;
    let gradients = ids.iter().map(|i| g.take(*i).expect("requested")).collect();
    Ok(SampleLoss { bce: tape.value(bce).item(), feature_match: fm_value, total: tape.value(total).item(), gradients })
}

/// Pairs whose truth is the figure rendered in a per-sequence colour and
/// whose reference is that sequence's first frame.
pub fn synthetic_pairs(data: &Dataset, skeleton: &SkeletonSpec, count: usize, size: usize, seed: u64) -> Result<Vec<S2iPair>> {
    if data.sequences.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = rng::substream(seed, "skel2img/pairs");
    let base = StickStyle::for_width(size);
    let colours: Vec<[f64; 3]> = data
        .sequences
        .iter()
        .map(|_| {
            let mut c = [0.0; 3];
            c.iter_mut().for_each(|v| *v = rng::uniform(&mut rng, 0.3, 1.0));
            c
        })
        .collect();
    (0..count)
        .map(|_| {
            let s = rng::index(&mut rng, data.sequences.len());
            let seq = &data.sequences[s];
            let pose = seq.frames[rng::index(&mut rng, seq.len())].clone();
            let style = base.with_color(colours[s]);
            Ok(S2iPair {
                reference: render_stick_figure(&seq.frames[0], skeleton, size, size, &style),
                truth: render_stick_figure(&pose, skeleton, size, size, &style),
                pose,
            })
        })
        .collect()
}

pub fn pair_input(pair: &S2iPair, sigma: f64) -> Result<Tensor> {
    let heat = heatmap_encode(&pair.pose, sigma, pair.truth.width, pair.truth.height)?;
    network_input(&heat, &pair.reference)
}

/// Minimize the combined loss with Adam over shuffled mini-batches.
pub fn train_s2i(
    pairs: &[S2iPair],
    cfg: &S2iTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&S2iEpoch),
) -> Result<(TransformerF, PerceptionNet, Vec<S2iEpoch>)> {
    cfg.validate()?;
    let first = pairs.first().ok_or(Error::EmptyBatch)?;
    let (w, h, joints) = (first.truth.width, first.truth.height, first.pose.joint_count());
    cfg.arch.validate(w, h)?;
    if let Some(i) = pairs.iter().position(|p| {
        (p.truth.width, p.truth.height) != (w, h) || (p.reference.width, p.reference.height) != (w, h) || p.pose.joint_count() != joints
    }) {
        return Err(Error::Dimension(format!("pair {i} differs in size or joint count from pair 0")));
    }
    let sigma = cfg.sigma.unwrap_or_else(|| default_sigma(w));
    let inputs = pairs.iter().map(|p| pair_input(p, sigma)).collect::<Result<Vec<_>>>()?;
    let truths: Vec<Tensor> = pairs.iter().map(|p| p.truth.to_tensor()).collect();

    let mut init = rng::substream(seed, "skel2img/init");
    let mut rng = rng::substream(seed, "skel2img/train");
    let mut f = TransformerF::new(&cfg.arch, joints, &mut init)?;
    let phi = PerceptionNet::random(w, h, seed);
    let truth_features = if cfg.lambda != 0.0 {
        truths.iter().map(|t| phi.feature_values(t)).collect::<Result<Vec<_>>>()?
    } else {
        vec![Vec::new(); truths.len()]
    };
    let mut opt = AdamState::new(cfg.adam, &f.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        let order = rng::permutation(&mut rng, pairs.len());
        let (mut bce, mut fm, mut total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = None;
            for &i in batch {
                let s = sample_loss(&f, &phi, &inputs[i], &truths[i], &truth_features[i], cfg.lambda)?;
                bce += s.bce;
                fm += s.feature_match;
                total += s.total;
                accumulate_grads(&mut acc, s.gradients);
            }
            let mut grads = acc.expect("non-empty batch");
            let k = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
            opt.step(&mut f.params_mut(), &grads)?;
        }
        let n = pairs.len() as f64;
        let rec = S2iEpoch { epoch, bce: bce / n, feature_match: fm / n, total: total / n };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok((f, phi, history))
}
