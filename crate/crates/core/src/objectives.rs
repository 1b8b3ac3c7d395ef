//! Segmentation and boundary objectives: soft Dice loss, boundary and
//! background band extraction, masked average pooling, the pairwise
//! contrastive loss and its average over positive pairs.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tape::{Real, Tape, Tensor, Var};

/// Smoothing constant in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Stacks labels into a constant `[N, classes, H, W]` target tensor.
pub fn label_tensor<T: Real>(labels: &[&Label]) -> Result<Tensor<T>> {
    let first = labels.first().ok_or_else(|| Error::shape("label_tensor", "no labels"))?;
    let (h, w) = first.dims();
    let classes = first.num_classes();
    let mut data = Vec::with_capacity(labels.len() * classes * h * w);
    for l in labels {
        if l.dims() != (h, w) || l.num_classes() != classes {
            return Err(Error::shape("label_tensor", "labels differ in shape"));
        }
        data.extend(l.to_planar().into_iter().map(T::of));
    }
    Tensor::new(vec![labels.len(), classes, h, w], data)
}

/// Soft Dice loss of `probs` (`[N, C, H, W]`) against a binary `target` of
/// the same shape: `1 − (2Σpy + s)/(Σp + Σy + s)` per sample and class,
/// averaged over both.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(probs) != target.shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("probs {:?} vs target {:?}", tape.shape(probs), target.shape()),
        ));
    }
    if let Some(v) = target.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
        return Err(Error::NonBinaryLabel(v.f64()));
    }
    let &[n, c, h, w] = target.shape() else {
        return Err(Error::shape("dice_loss", format!("{:?} is not 4-D", target.shape())));
    };
    let s = T::of(DICE_SMOOTH);
    let y_sum: Vec<T> = target.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() + s).collect();
    let y = tape.constant(target.clone());
    let py = tape.mul(probs, y)?;
    let inter = tape.sum_spatial(py)?;
    let num = tape.scale(inter, T::of(2.0));
    let num = tape.add_scalar(num, s);
    let p_sum = tape.sum_spatial(probs)?;
    let y_sum = tape.constant(Tensor::new(vec![n, c], y_sum)?);
    let den = tape.add(p_sum, y_sum)?;
    let ratio = tape.div(num, den)?;
    let mean = tape.mean(ratio);
    let neg = tape.scale(mean, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// Boundary band and surrounding background ring of one class mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryMasks {
    pub bd: BinaryMask,
    pub bg: BinaryMask,
}

impl BoundaryMasks {
    /// Both regions nonempty, so both embeddings exist.
    pub fn usable(&self) -> bool {
        !self.bd.is_empty() && !self.bg.is_empty()
    }
}

/// `bd = dilate(y, r_bd) XOR erode(y, r_bd)` and
/// `bg = dilate(y, r_bd + r_bg) AND NOT dilate(y, r_bd)`.
///
/// An empty label, or one whose dilation fills the frame, gives an empty
/// region; check [`BoundaryMasks::usable`] before pooling.
pub fn extract_boundary_masks(y: &BinaryMask, r_bd: usize, r_bg: usize) -> Result<BoundaryMasks> {
    if r_bd < 1 || r_bg <= r_bd {
        return Err(Error::Config(format!("need r_bg > r_bd >= 1, got r_bd={r_bd}, r_bg={r_bg}")));
    }
    let inner = y.dilate(r_bd);
    let bd = inner.xor(&y.erode(r_bd))?;
    let bg = y.dilate(r_bd + r_bg).and_not(&inner)?;
    Ok(BoundaryMasks { bd, bg })
}

pub fn label_boundary_masks(label: &Label, r_bd: usize, r_bg: usize) -> Result<Vec<BoundaryMasks>> {
    label.masks().iter().map(|m| extract_boundary_masks(m, r_bd, r_bg)).collect()
}

/// Per-channel mean of `feat[sample]` over the mask. Gradients flow into
/// the features only.
pub fn masked_average_pool<T: Real>(tape: &mut Tape<T>, feat: Var, sample: usize, mask: &BinaryMask) -> Result<Var> {
    let weights: Vec<T> = mask.data().iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    tape.masked_mean(feat, sample, &weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Adds the positive term to the denominator.
    pub infonce_standard: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            infonce_standard: false,
        }
    }
}

/// Region embeddings of one class: boundary and background vectors, one of
/// each per image distribution (the local image first).
#[derive(Clone, Debug)]
pub struct RegionSet {
    pub bd: Vec<Var>,
    pub bg: Vec<Var>,
}

impl RegionSet {
    /// `[bd_0 .. bd_{K−1}, bg_0 .. bg_{K−1}]`.
    fn ordered(&self) -> Vec<Var> {
        self.bd.iter().chain(&self.bg).copied().collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::OutOfRange {
            name: "tau",
            value: tau,
            range: "(0, inf)",
        });
    }
    Ok(())
}

/// Lazily computed `cos(h_i, h_j) / τ` on the tape.
struct Similarities<'a> {
    embeddings: &'a [Var],
    inv_tau: f64,
    cache: Vec<Option<Var>>,
}

impl<'a> Similarities<'a> {
    fn new(embeddings: &'a [Var], tau: f64) -> Self {
        Self {
            embeddings,
            inv_tau: 1.0 / tau,
            cache: vec![None; embeddings.len() * embeddings.len()],
        }
    }

    fn get<T: Real>(&mut self, tape: &mut Tape<T>, i: usize, j: usize) -> Result<Var> {
        let n = self.embeddings.len();
        let key = i.min(j) * n + i.max(j);
        if let Some(v) = self.cache[key] {
            return Ok(v);
        }
        let cos = tape.cosine_similarity(self.embeddings[i], self.embeddings[j])?;
        let v = tape.scale(cos, T::of(self.inv_tau));
        self.cache[key] = Some(v);
        Ok(v)
    }
}

/// `ℓ(h_m, h_p)` where `is_negative(m, q)` selects the denominator terms.
fn pair_loss<T: Real>(
    tape: &mut Tape<T>,
    sims: &mut Similarities<'_>,
    m: usize,
    p: usize,
    is_negative: &dyn Fn(usize, usize) -> bool,
    standard: bool,
) -> Result<Var> {
    let n = sims.embeddings.len();
    let positive = sims.get(tape, m, p)?;
    let mut denom: Option<Var> = None;
    for q in (0..n).filter(|&q| q != m && (is_negative(m, q) || (standard && q == p))) {
        let s = sims.get(tape, m, q)?;
        let e = tape.exp(s);
        denom = Some(match denom {
            Some(d) => tape.add(d, e)?,
            None => e,
        });
    }
    let denom = denom.ok_or_else(|| Error::Config("contrastive loss has no denominator terms".into()))?;
    let log_denom = tape.log(denom)?;
    tape.sub(log_denom, positive)
}

/// Contrastive loss of the pair `(m, p)` within `embeddings`, where
/// `classes[i]` tags each embedding and pairs of different tags are the
/// negatives.
pub fn info_nce_pair<T: Real>(
    tape: &mut Tape<T>,
    m: usize,
    p: usize,
    embeddings: &[Var],
    classes: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    check_tau(cfg.tau)?;
    if classes.len() != embeddings.len() || m >= embeddings.len() || p >= embeddings.len() || m == p {
        return Err(Error::shape(
            "info_nce_pair",
            format!("pair ({m}, {p}) over {} embeddings, {} tags", embeddings.len(), classes.len()),
        ));
    }
    let mut sims = Similarities::new(embeddings, cfg.tau);
    pair_loss(tape, &mut sims, m, p, &|a, b| classes[a] != classes[b], cfg.infonce_standard)
}

/// Sum of the pair loss over same-region pairs `m < p` of
/// `[bd_0 .. bd_{K−1}, bg_0 .. bg_{K−1}]`, divided by `2·C(K, 2)`.
pub fn boundary_loss<T: Real>(tape: &mut Tape<T>, regions: &RegionSet, cfg: &ContrastiveConfig) -> Result<Var> {
    check_tau(cfg.tau)?;
    let k = regions.bd.len();
    if regions.bg.len() != k {
        return Err(Error::shape(
            "boundary_loss",
            format!("{} boundary vs {} background embeddings", k, regions.bg.len()),
        ));
    }
    if k < 2 {
        return Err(Error::Config(format!("boundary loss needs at least 2 distributions, got {k}")));
    }
    let embeddings = regions.ordered();
    let is_negative = |a: usize, b: usize| (a < k) != (b < k);
    let mut sims = Similarities::new(&embeddings, cfg.tau);
    let mut total: Option<Var> = None;
    for m in 0..2 * k {
        for p in m + 1..2 * k {
            if is_negative(m, p) {
                continue;
            }
            let l = pair_loss(tape, &mut sims, m, p, &is_negative, cfg.infonce_standard)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
    }
    let pairs = k * (k - 1);
    Ok(tape.scale(total.expect("k >= 2 gives pairs"), T::of(1.0 / pairs as f64)))
}
