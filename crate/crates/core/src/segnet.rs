//! Small U-shaped fully convolutional segmentation network.
//!
//! Encoder level `i` applies two 3x3 conv + ReLU layers of width
//! `base_width·2^i` and halves the resolution. A bottleneck keeps the last
//! encoder width. Each decoder level upsamples bilinearly, concatenates the
//! matching encoder output and applies two 3x3 conv + ReLU layers. A 1x1
//! head with per-class sigmoid gives the probabilities. The feature maps
//! used for region pooling are the outputs of the last convolution in the
//! last two decoder levels, taken before their ReLU, brought to input
//! resolution and stacked along channels.
//!
//! Pooling before the ReLU matters for the contrastive term. Cosine
//! separation of two nonnegative vectors is only possible by giving them
//! disjoint supports, and chasing that drives decoder units to zero until
//! the head sees nothing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::Segmenter;
use crate::spectral::Image;
use crate::tape::{BoundParams, ParamSet, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 8,
            depth: 3,
            num_classes: 2,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Config(format!("in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.base_width < 4 || self.depth < 2 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "need base_width >= 4, depth >= 2, num_classes >= 1; got {}, {}, {}",
                self.base_width, self.depth, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level.min(self.depth - 1)
    }

    /// Channels of the pooled feature maps.
    pub fn feature_channels(&self) -> usize {
        self.width(1) + self.width(0)
    }

    /// Input sides must be divisible by this.
    pub fn stride_multiple(&self) -> usize {
        1 << self.depth
    }

    /// `(name, [out, in, k, k])` for every convolution, in parameter order.
    fn convs(&self) -> Vec<(String, [usize; 4])> {
        let mut out = Vec::new();
        let mut prev = self.in_channels;
        for i in 0..self.depth {
            let w = self.width(i);
            out.push((format!("enc{i}.conv1"), [w, prev, 3, 3]));
            out.push((format!("enc{i}.conv2"), [w, w, 3, 3]));
            prev = w;
        }
        out.push(("mid.conv1".into(), [prev, prev, 3, 3]));
        out.push(("mid.conv2".into(), [prev, prev, 3, 3]));
        for i in (0..self.depth).rev() {
            let w = self.width(i);
            out.push((format!("dec{i}.conv1"), [w, prev + w, 3, 3]));
            out.push((format!("dec{i}.conv2"), [w, w, 3, 3]));
            prev = w;
        }
        out.push(("head".into(), [self.num_classes, prev, 1, 1]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|(_, s)| s.iter().product::<usize>() + s[0]).sum()
    }
}

/// Shifts every filter to zero mean and restores the He variance.
///
/// Layers after a ReLU see inputs with a large shared positive component.
/// An uncentred filter responds to that component with the sign of its
/// weight sum, and a negative sum leaves the unit dead over the whole
/// batch from the first step.
fn center_filters(w: &mut [f32], fan_in: usize) {
    let gain = (fan_in as f32 / (fan_in as f32 - 1.0)).sqrt();
    for filter in w.chunks_mut(fan_in) {
        let mean = filter.iter().sum::<f32>() / fan_in as f32;
        for v in filter {
            *v = (*v - mean) * gain;
        }
    }
}

/// He-normal weights scaled by fan-in, zero biases. Filters reading ReLU
/// outputs are centred.
pub fn init_params(cfg: &SegNetConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = Vec::new();
    for (name, shape) in cfg.convs() {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let mut w: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        if name != "head" && name != "enc0.conv1" {
            center_filters(&mut w, shape[1] * shape[2] * shape[3]);
        }
        named.push((format!("{name}.weight"), Tensor::new(shape.to_vec(), w)?));
        named.push((format!("{name}.bias"), Tensor::zeros(&[shape[0]])));
    }
    ParamSet::new(named)
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[N, classes, H, W]` in `[0, 1]`.
    pub probs: Var,
    /// `[N, width(1) + width(0), H, W]`, pre-activation.
    pub feats: Var,
}

/// Stacks images into a `[N, C, H, W]` tensor.
pub fn image_batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::shape("image_batch", "no images"))?;
    let dims = first.dims();
    let mut data = Vec::with_capacity(images.len() * dims.0 * dims.1 * dims.2);
    for img in images {
        if img.dims() != dims {
            return Err(Error::shape("image_batch", format!("{:?} vs {:?}", img.dims(), dims)));
        }
        data.extend(img.to_planar().into_iter().map(T::of));
    }
    Tensor::new(vec![images.len(), dims.2, dims.0, dims.1], data)
}

fn check_input(cfg: &SegNetConfig, shape: &[usize]) -> Result<()> {
    let m = cfg.stride_multiple();
    match *shape {
        [_, c, h, w] if c == cfg.in_channels && h % m == 0 && w % m == 0 && h > 0 && w > 0 => Ok(()),
        _ => Err(Error::shape(
            "segnet",
            format!("input {shape:?}; need [N, {}, H, W] with H, W multiples of {m}", cfg.in_channels),
        )),
    }
}

fn conv_relu<T: Real>(tape: &mut Tape<T>, p: &BoundParams, idx: &mut usize, x: Var) -> Result<Var> {
    let y = tape.conv2d(x, p.get(*idx), Some(p.get(*idx + 1)), 1, 1)?;
    *idx += 2;
    Ok(tape.relu(y))
}

/// Records the network on `tape` for an input batch `x` (`[N, C, H, W]`).
pub fn forward<T: Real>(tape: &mut Tape<T>, cfg: &SegNetConfig, params: &BoundParams, x: Var) -> Result<ForwardOutput> {
    check_input(cfg, tape.shape(x))?;
    if params.vars().len() != 2 * cfg.convs().len() {
        return Err(Error::ParamMismatch(format!(
            "{} parameter tensors for a network with {}",
            params.vars().len(),
            2 * cfg.convs().len()
        )));
    }
    let mut idx = 0;
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x;
    for _ in 0..cfg.depth {
        h = conv_relu(tape, params, &mut idx, h)?;
        h = conv_relu(tape, params, &mut idx, h)?;
        skips.push(h);
        h = tape.max_pool2(h)?;
    }
    h = conv_relu(tape, params, &mut idx, h)?;
    h = conv_relu(tape, params, &mut idx, h)?;
    let mut decoded = Vec::with_capacity(cfg.depth);
    for skip in skips.into_iter().rev() {
        let up = tape.upsample2x(h)?;
        let cat = tape.concat(&[up, skip], 1)?;
        h = conv_relu(tape, params, &mut idx, cat)?;
        let pre = tape.conv2d(h, params.get(idx), Some(params.get(idx + 1)), 1, 1)?;
        idx += 2;
        h = tape.relu(pre);
        decoded.push(pre);
    }
    let logits = tape.conv2d(h, params.get(idx), Some(params.get(idx + 1)), 1, 0)?;
    let probs = tape.sigmoid(logits);
    let dec1 = decoded[decoded.len() - 2];
    let up1 = tape.upsample2x(dec1)?;
    let feats = tape.concat(&[up1, decoded[decoded.len() - 1]], 1)?;
    Ok(ForwardOutput { probs, feats })
}

/// Class probabilities for a batch of images.
pub fn predict_probs<T: Real>(cfg: &SegNetConfig, params: &ParamSet<T>, images: &[&Image]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(image_batch(images)?);
    let out = forward(&mut tape, cfg, &bound, x)?;
    Ok(tape.value(out.probs).clone())
}

/// A trained network paired with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub config: SegNetConfig,
    pub params: ParamSet<f32>,
}

impl SegNet {
    /// Images per forward pass during batched prediction.
    const CHUNK: usize = 16;
}

impl Segmenter for SegNet {
    fn predict(&self, image: &Image) -> Result<Vec<BinaryMask>> {
        Ok(self.predict_batch(&[image])?.pop().expect("one image in, one out"))
    }

    /// Thresholds each class probability at 0.5.
    fn predict_batch(&self, images: &[&Image]) -> Result<Vec<Vec<BinaryMask>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(Self::CHUNK) {
            let probs = predict_probs(&self.config, &self.params, chunk)?;
            let &[_, c, h, w] = probs.shape() else { unreachable!("network output is 4-D") };
            for sample in probs.data().chunks(c * h * w) {
                let masks = sample
                    .chunks(h * w)
                    .map(|plane| BinaryMask::new(h, w, plane.iter().map(|&p| p >= 0.5).collect()))
                    .collect::<Result<_>>()?;
                out.push(masks);
            }
        }
        Ok(out)
    }
}
