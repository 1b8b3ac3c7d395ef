//! Episodic training step: an SGD inner update on the local batch, a meta
//! objective on its style-transformed copies at the updated parameters, and
//! one Adam step on the sum of both gradients.
//!
//! The meta gradient is first order: the gradient taken at `θ̂` is applied to
//! `θ` unchanged, ignoring the curvature of the inner update. A checking
//! mode estimates the exact meta gradient by central differences through the
//! inner update, for small models only.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::objectives::{
    boundary_loss, dice_loss, label_tensor, masked_average_pool, BoundaryMasks, ContrastiveConfig, RegionSet,
};
use crate::segnet::{forward, image_batch, SegNetConfig};
use crate::spectral::Image;
use crate::tape::{adam_step, AdamConfig, AdamState, BoundParams, ParamSet, Real, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum MetaGradMode {
    #[default]
    FirstOrder,
    /// First-order update, plus a central-difference estimate of the exact
    /// meta gradient reported alongside.
    FiniteDifferenceCheck { eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodicConfig {
    pub beta: f64,
    pub gamma: f64,
    pub contrastive: ContrastiveConfig,
    pub meta_grad_mode: MetaGradMode,
}

impl Default for EpisodicConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            gamma: 0.1,
            contrastive: ContrastiveConfig::default(),
            meta_grad_mode: MetaGradMode::FirstOrder,
        }
    }
}

impl EpisodicConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, value, range| Err(Error::OutOfRange { name, value, range });
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", self.beta, "(0, inf)");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", self.gamma, "[0, inf)");
        }
        if !(self.contrastive.tau > 0.0 && self.contrastive.tau.is_finite()) {
            return bad("tau", self.contrastive.tau, "(0, inf)");
        }
        Ok(())
    }
}

/// Meta-objective terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MetaTerms {
    pub seg: Var,
    /// Absent when the boundary weight is zero or no class had usable
    /// regions.
    pub boundary: Option<Var>,
    pub total: Var,
}

/// One episode's data and losses, independent of how parameters are
/// updated.
pub trait Episode<T: Real> {
    /// Segmentation loss on the meta-train batch.
    fn train_loss(&self, tape: &mut Tape<T>, params: &BoundParams) -> Result<Var>;

    /// `L_seg(t) + γ·L_boundary(x, t)` at the given parameters.
    fn meta_loss(&self, tape: &mut Tape<T>, params: &BoundParams, gamma: f64) -> Result<MetaTerms>;
}

/// Loss recorded by `build` and its gradient with respect to every
/// parameter, flattened.
fn value_and_grad<T: Real>(
    params: &ParamSet<T>,
    build: impl FnOnce(&mut Tape<T>, &BoundParams) -> Result<Var>,
) -> Result<(f64, Vec<T>)> {
    let mut work = params.frozen();
    let mut tape = Tape::new();
    let bound = work.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    let value = tape.item(loss).f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    tape.backward(loss)?;
    work.accumulate_grads(&tape, &bound)?;
    Ok((value, work.flatten_grads()?))
}

/// `θ̂ = θ − β·∇θ L_seg(x; θ)`. Returns `θ̂`, the gradient and the loss;
/// `theta` is not modified.
pub fn inner_update<T: Real>(
    theta: &ParamSet<T>,
    episode: &impl Episode<T>,
    beta: f64,
) -> Result<(ParamSet<T>, Vec<T>, f64)> {
    let (loss, grad) = value_and_grad(theta, |tape, p| episode.train_loss(tape, p))?;
    let step = T::of(beta);
    let updated: Vec<T> = theta.flatten().iter().zip(&grad).map(|(&w, &g)| w - step * g).collect();
    Ok((theta.unflatten(&updated)?, grad, loss))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaValue {
    pub seg: f64,
    pub boundary: f64,
    pub total: f64,
}

/// Value of the meta objective at `theta_hat`.
pub fn meta_objective<T: Real>(theta_hat: &ParamSet<T>, episode: &impl Episode<T>, gamma: f64) -> Result<MetaValue> {
    let mut tape = Tape::new();
    let bound = theta_hat.bind(&mut tape);
    let terms = episode.meta_loss(&mut tape, &bound, gamma)?;
    Ok(MetaValue {
        seg: tape.item(terms.seg).f64(),
        boundary: terms.boundary.map_or(0.0, |b| tape.item(b).f64()),
        total: tape.item(terms.total).f64(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_seg_inner: f64,
    pub l_seg_meta: f64,
    pub l_boundary: f64,
    /// Relative distance between the first-order and the finite-difference
    /// meta gradients, in checking mode.
    pub meta_grad_rel_error: Option<f64>,
}

/// Gradients produced by one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeGradients<T> {
    pub inner: Vec<T>,
    pub meta_first_order: Vec<T>,
    /// Exact meta gradient by central differences, in checking mode.
    pub meta_exact: Option<Vec<f64>>,
    pub record: LossRecord,
}

impl<T: Real> EpisodeGradients<T> {
    pub fn total(&self) -> Vec<T> {
        self.inner.iter().zip(&self.meta_first_order).map(|(&a, &b)| a + b).collect()
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// `∇θ L_meta(θ − β∇θ L_seg(θ))` by central differences over every
/// parameter element. Cost is two inner updates and two meta evaluations
/// per element.
pub fn finite_difference_meta_gradient<T: Real>(
    theta: &ParamSet<T>,
    episode: &impl Episode<T>,
    cfg: &EpisodicConfig,
    eps: f64,
) -> Result<Vec<f64>> {
    let base = theta.flatten();
    let objective = |flat: &[T]| -> Result<f64> {
        let shifted = theta.unflatten(flat)?;
        let (theta_hat, _, _) = inner_update(&shifted, episode, cfg.beta)?;
        Ok(meta_objective(&theta_hat, episode, cfg.gamma)?.total)
    };
    (0..base.len())
        .map(|j| {
            let mut plus = base.clone();
            plus[j] = T::of(base[j].f64() + eps);
            let mut minus = base.clone();
            minus[j] = T::of(base[j].f64() - eps);
            Ok((objective(&plus)? - objective(&minus)?) / (2.0 * eps))
        })
        .collect()
}

/// Inner gradient, first-order meta gradient and losses for one episode.
pub fn episode_gradients<T: Real>(
    theta: &ParamSet<T>,
    episode: &impl Episode<T>,
    cfg: &EpisodicConfig,
) -> Result<EpisodeGradients<T>> {
    cfg.validate()?;
    let (theta_hat, inner, l_seg_inner) = inner_update(theta, episode, cfg.beta)?;
    let mut seg = 0.0;
    let mut bd = 0.0;
    let (_, meta_first_order) = value_and_grad(&theta_hat, |tape, p| {
        let terms = episode.meta_loss(tape, p, cfg.gamma)?;
        seg = tape.item(terms.seg).f64();
        bd = terms.boundary.map_or(0.0, |b| tape.item(b).f64());
        Ok(terms.total)
    })?;
    let mut record = LossRecord {
        l_seg_inner,
        l_seg_meta: seg,
        l_boundary: bd,
        meta_grad_rel_error: None,
    };
    let meta_exact = match cfg.meta_grad_mode {
        MetaGradMode::FirstOrder => None,
        MetaGradMode::FiniteDifferenceCheck { eps } => {
            let exact = finite_difference_meta_gradient(theta, episode, cfg, eps)?;
            let approx: Vec<f64> = meta_first_order.iter().map(|v| v.f64()).collect();
            record.meta_grad_rel_error = Some(relative_error(&approx, &exact));
            Some(exact)
        }
    };
    Ok(EpisodeGradients {
        inner,
        meta_first_order,
        meta_exact,
        record,
    })
}

fn apply<T: Real>(params: &mut ParamSet<T>, grad: &[T], adam: &mut AdamState<T>, adam_cfg: &AdamConfig) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    params.set_grads(grad)?;
    adam_step(params, adam, adam_cfg)?;
    params.zero_grad();
    Ok(())
}

/// One combined update: Adam on `∇θ L_seg(x; θ) + ∇θ̂ L_meta(x, t; θ̂)`.
pub fn episodic_step<T: Real>(
    params: &mut ParamSet<T>,
    episode: &impl Episode<T>,
    cfg: &EpisodicConfig,
    adam: &mut AdamState<T>,
    adam_cfg: &AdamConfig,
) -> Result<LossRecord> {
    let grads = episode_gradients(params, episode, cfg)?;
    apply(params, &grads.total(), adam, adam_cfg)?;
    Ok(grads.record)
}

/// Adam on the meta-train segmentation loss alone.
pub fn plain_step<T: Real>(
    params: &mut ParamSet<T>,
    episode: &impl Episode<T>,
    adam: &mut AdamState<T>,
    adam_cfg: &AdamConfig,
) -> Result<LossRecord> {
    let (loss, grad) = value_and_grad(params, |tape, p| episode.train_loss(tape, p))?;
    apply(params, &grad, adam, adam_cfg)?;
    Ok(LossRecord {
        l_seg_inner: loss,
        ..LossRecord::default()
    })
}

/// Adam on `L_seg(x; θ) + L_seg(t; θ)`, both at the current parameters,
/// with no inner update and no boundary term.
pub fn joint_step<T: Real>(
    params: &mut ParamSet<T>,
    episode: &impl Episode<T>,
    adam: &mut AdamState<T>,
    adam_cfg: &AdamConfig,
) -> Result<LossRecord> {
    let mut parts = (0.0, 0.0);
    let (_, grad) = value_and_grad(params, |tape, p| {
        let train = episode.train_loss(tape, p)?;
        let meta = episode.meta_loss(tape, p, 0.0)?;
        parts = (tape.item(train).f64(), tape.item(meta.seg).f64());
        tape.add(train, meta.seg)
    })?;
    apply(params, &grad, adam, adam_cfg)?;
    Ok(LossRecord {
        l_seg_inner: parts.0,
        l_seg_meta: parts.1,
        ..LossRecord::default()
    })
}

/// Segmentation episode: a local batch, its transformed copies and the
/// boundary regions of every local label.
pub struct SegEpisode<'a> {
    pub net: SegNetConfig,
    pub x: Vec<&'a Image>,
    pub labels: Vec<&'a Label>,
    /// `t[j][b]` is the `j`-th transformed copy of `x[b]`.
    pub t: Vec<Vec<Image>>,
    /// Per local sample, one entry per class.
    pub regions: Vec<&'a [BoundaryMasks]>,
    pub contrastive: ContrastiveConfig,
}

impl SegEpisode<'_> {
    fn validate_local(&self) -> Result<()> {
        let b = self.x.len();
        if b == 0 || self.labels.len() != b || self.regions.len() != b {
            return Err(Error::shape(
                "episode",
                format!("{b} images, {} labels, {} region sets", self.labels.len(), self.regions.len()),
            ));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.validate_local()?;
        let b = self.x.len();
        if self.t.is_empty() || self.t.iter().any(|copy| copy.len() != b) {
            return Err(Error::shape("episode", "each transformed copy must match the local batch"));
        }
        Ok(())
    }

    /// Mean over samples of the class-averaged boundary loss. Classes whose
    /// regions are empty or whose pooled features vanish contribute zero.
    fn boundary_term<T: Real>(&self, tape: &mut Tape<T>, feats: Var) -> Result<Option<Var>> {
        let b = self.x.len();
        let copies = self.t.len() + 1;
        let classes = self.labels[0].num_classes();
        let mut total: Option<Var> = None;
        for s in 0..b {
            for region in self.regions[s].iter().take(classes) {
                if !region.usable() {
                    continue;
                }
                let mut set = RegionSet {
                    bd: Vec::with_capacity(copies),
                    bg: Vec::with_capacity(copies),
                };
                for j in 0..copies {
                    let idx = j * b + s;
                    set.bd.push(masked_average_pool(tape, feats, idx, &region.bd)?);
                    set.bg.push(masked_average_pool(tape, feats, idx, &region.bg)?);
                }
                let degenerate = set
                    .bd
                    .iter()
                    .chain(&set.bg)
                    .any(|&v| tape.value(v).sq_norm().f64() <= 1e-20);
                if degenerate {
                    continue;
                }
                let l = boundary_loss(tape, &set, &self.contrastive)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
        }
        Ok(total.map(|t| tape.scale(t, T::of(1.0 / (b * classes) as f64))))
    }
}

impl<T: Real> Episode<T> for SegEpisode<'_> {
    fn train_loss(&self, tape: &mut Tape<T>, params: &BoundParams) -> Result<Var> {
        self.validate_local()?;
        let x = tape.constant(image_batch(&self.x)?);
        let out = forward(tape, &self.net, params, x)?;
        dice_loss(tape, out.probs, &label_tensor(&self.labels)?)
    }

    fn meta_loss(&self, tape: &mut Tape<T>, params: &BoundParams, gamma: f64) -> Result<MetaTerms> {
        self.validate()?;
        let b = self.x.len();
        let with_boundary = gamma > 0.0;
        let mut images: Vec<&Image> = if with_boundary { self.x.clone() } else { Vec::new() };
        images.extend(self.t.iter().flatten());
        let input = tape.constant(image_batch(&images)?);
        let out = forward(tape, &self.net, params, input)?;
        let t_probs = if with_boundary {
            tape.narrow(out.probs, b, b * self.t.len())?
        } else {
            out.probs
        };
        let repeated: Vec<&Label> = (0..self.t.len()).flat_map(|_| self.labels.iter().copied()).collect();
        let seg = dice_loss(tape, t_probs, &label_tensor(&repeated)?)?;
        let boundary = if with_boundary { self.boundary_term(tape, out.feats)? } else { None };
        let total = match boundary {
            Some(bd) => {
                let weighted = tape.scale(bd, T::of(gamma));
                tape.add(seg, weighted)?
            }
            None => seg,
        };
        Ok(MetaTerms { seg, boundary, total })
    }
}
