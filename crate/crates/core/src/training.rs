//! Objectives, optimizer, augmentation and the two-stage training loops.
//!
//! Stage 1 fits the Bayesian network (no GSUA/MSUA, aleatoric head) with an
//! MC-attenuated cross-entropy, then caches ground-truth-centred uncertainty
//! maps for every training image. Stage 2 fits SSU-Net on those maps with the
//! four-branch deep-supervision loss.

use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, ArchConfig, BundleVars, ModelParams, ParamVars, PredictionBundle, Stage};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, tags, Rng};
use crate::tensor::ops;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::uncertainty::{self, Centering, UncertaintyMaps};

pub use crate::tensor::ops::binary_cross_entropy as bce;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rms_decay: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `[α1, α2, α3, αF]`.
    pub loss_weights: [f64; 4],
    pub augment: bool,
    /// MC passes per training image when caching stage-1 maps.
    pub n_mc_train: usize,
    /// Noise draws inside the stage-1 attenuated loss.
    pub hetero_samples: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            momentum: 0.9,
            weight_decay: 1e-8,
            rms_decay: 0.99,
            epsilon: 1e-8,
            epochs: 100,
            batch_size: 1,
            loss_weights: [1.0; 4],
            augment: false,
            n_mc_train: 16,
            hetero_samples: 8,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        check_weights(&self.loss_weights)?;
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::config("momentum and rms_decay must lie in [0, 1)"));
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("epsilon must be > 0 and weight_decay >= 0"));
        }
        if self.n_mc_train < 1 || self.hetero_samples < 1 {
            return Err(Error::config("n_mc_train and hetero_samples must be >= 1"));
        }
        Ok(())
    }
}

fn check_weights(w: &[f64; 4]) -> Result<()> {
    if w.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
        return Err(Error::config(format!("loss weights must be finite and >= 0, got {w:?}")));
    }
    Ok(())
}

// -- objectives -------------------------------------------------------------

/// `α1·L_s1 + α2·L_s2 + α3·L_s3 + αF·L_F` for already computed sub-losses.
pub fn weighted_total(sub: [f64; 4], weights: &[f64; 4]) -> Result<f64> {
    check_weights(weights)?;
    Ok(sub.iter().zip(weights).map(|(l, a)| l * a).sum())
}

/// Sub-losses `[L_s1, L_s2, L_s3, L_F]` and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub sub: [f64; 4],
    pub total: f64,
}

/// Deep-supervision loss of a prediction bundle against a `[N,1,H,W]` mask.
/// Side outputs are upsampled to the mask resolution and every branch,
/// the fused one included, goes through a sigmoid before its BCE.
pub fn total_loss<T: Real>(
    bundle: &PredictionBundle<T>,
    target: &Tensor<T>,
    weights: &[f64; 4],
) -> Result<LossBreakdown> {
    check_weights(weights)?;
    let (_, _, h, w) = target.dims4()?;
    let branches = [
        bundle.y1.clone(),
        ops::upsample_bilinear(&bundle.y2, h, w)?,
        ops::upsample_bilinear(&bundle.y3, h, w)?,
        bundle.y_f.clone(),
    ];
    let mut sub = [0.0; 4];
    for (s, y) in sub.iter_mut().zip(&branches) {
        *s = bce(&y.map(ops::sigmoid), target)?.as_f64();
    }
    Ok(LossBreakdown {
        sub,
        total: weighted_total(sub, weights)?,
    })
}

/// Graph version of [`total_loss`]; returns the total and the four sub-loss nodes.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<T>,
    b: &BundleVars,
    target: &Tensor<T>,
    weights: &[f64; 4],
) -> Result<(Var, [Var; 4])> {
    check_weights(weights)?;
    let subs = [
        g.bce_with_logits(b.y1, target)?,
        g.bce_with_logits(b.y2_up, target)?,
        g.bce_with_logits(b.y3_up, target)?,
        g.bce_with_logits(b.y_f, target)?,
    ];
    let terms: Vec<(Var, T)> = subs.iter().zip(weights).map(|(&v, &a)| (v, T::lit(a))).collect();
    Ok((g.weighted_sum(&terms)?, subs))
}

/// MC-attenuated BCE: the mean over `t_samples` of
/// `bce(σ(logits + ε·exp(log_var / 2)), target)`, ε standard normal per pixel.
pub fn heteroscedastic_loss_graph<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    log_var: Var,
    target: &Tensor<T>,
    t_samples: usize,
    rng: &mut Rng,
) -> Result<Var> {
    if t_samples < 1 {
        return Err(Error::usage("heteroscedastic loss needs t_samples >= 1"));
    }
    g.value(logits).expect_same_shape(g.value(log_var))?;
    let half = g.scale(log_var, T::lit(0.5));
    let sigma = g.exp(half);
    let shape = g.value(logits).shape().to_vec();
    let numel = g.value(logits).numel();
    let mut terms = Vec::with_capacity(t_samples);
    let inv_t = T::lit(1.0 / t_samples as f64);
    for _ in 0..t_samples {
        let eps: Vec<T> = (0..numel)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let eps = g.constant(Tensor::new(shape.clone(), eps)?);
        let noise = g.mul(sigma, eps)?;
        let perturbed = g.add(logits, noise)?;
        terms.push((g.bce_with_logits(perturbed, target)?, inv_t));
    }
    g.weighted_sum(&terms)
}

/// Value of [`heteroscedastic_loss_graph`] on plain tensors.
pub fn heteroscedastic_loss<T: Real>(
    logits: &Tensor<T>,
    log_var: &Tensor<T>,
    target: &Tensor<T>,
    t_samples: usize,
    rng: &mut Rng,
) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = g.constant(log_var.clone());
    let out = heteroscedastic_loss_graph(&mut g, l, v, target, t_samples, rng)?;
    Ok(g.value(out).item())
}

// -- optimizer --------------------------------------------------------------

/// Per-parameter RMSprop accumulators, in parameter declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T = f32> {
    pub square_avg: IndexMap<String, Tensor<T>>,
    pub momentum: IndexMap<String, Tensor<T>>,
}

impl<T: Real> OptState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        OptState {
            square_avg: zeros(),
            momentum: zeros(),
        }
    }
}

/// One RMSprop-with-momentum update. With `g' = g + wd·w`:
/// `s ← ρs + (1-ρ)g'²`, `m ← μm + g'/√(s+ε)`, `w ← w - lr·m`.
/// Parameters missing from `grads` are treated as having zero gradient.
pub fn rmsprop_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut OptState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let (lr, mu, rho, eps, wd) = (
        T::lit(cfg.lr),
        T::lit(cfg.momentum),
        T::lit(cfg.rms_decay),
        T::lit(cfg.epsilon),
        T::lit(cfg.weight_decay),
    );
    for (name, w) in params.tensors.iter_mut() {
        let s = state
            .square_avg
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("optimizer state lacks {name}")))?;
        let m = state
            .momentum
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("optimizer state lacks {name}")))?;
        let grad = grads.get(name);
        if let Some(gr) = grad {
            w.expect_same_shape(gr)?;
        }
        w.expect_same_shape(s)?;
        let wd_ = w.data_mut();
        for i in 0..wd_.len() {
            let gi = grad.map_or(T::zero(), |t| t.data()[i]) + wd * wd_[i];
            let si = &mut s.data_mut()[i];
            *si = rho * *si + (T::one() - rho) * gi * gi;
            let denom = (*si + eps).sqrt();
            let mi = &mut m.data_mut()[i];
            *mi = mu * *mi + gi / denom;
            wd_[i] -= lr * *mi;
        }
    }
    Ok(())
}

// -- augmentation -----------------------------------------------------------

pub const MAX_SHIFT: f64 = 0.3;
pub const SCALE_RANGE: (f64, f64) = (0.7, 1.3);

/// A translation (fraction of each extent) and an isotropic scale about the
/// image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineDraw {
    pub shift_y: f64,
    pub shift_x: f64,
    pub scale: f64,
}

impl AffineDraw {
    pub const IDENTITY: AffineDraw = AffineDraw {
        shift_y: 0.0,
        shift_x: 0.0,
        scale: 1.0,
    };

    pub fn sample(rng: &mut Rng) -> Self {
        AffineDraw {
            shift_y: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            shift_x: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        }
    }

    /// Source coordinate of output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let sy = (y as f64 - cy - self.shift_y * h as f64) / self.scale + cy;
        let sx = (x as f64 - cx - self.shift_x * w as f64) / self.scale + cx;
        (sy, sx)
    }

    /// Resample every plane of a `[.., H, W]` tensor; zero outside the frame.
    pub fn apply(&self, t: &Tensor<f32>, nearest: bool) -> Result<Tensor<f32>> {
        let shape = t.shape();
        if shape.len() < 2 {
            return Err(Error::usage("augment needs at least [H, W]"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out = Vec::with_capacity(t.numel());
        let at = |plane: &[f32], y: isize, x: isize| -> f32 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                plane[y as usize * w + x as usize]
            }
        };
        for plane in t.data().chunks_exact(h * w) {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.source(y, x, h, w);
                    let v = if nearest {
                        at(plane, sy.round() as isize, sx.round() as isize)
                    } else {
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
                        let (y0, x0) = (y0 as isize, x0 as isize);
                        let top = at(plane, y0, x0) + (at(plane, y0, x0 + 1) - at(plane, y0, x0)) * fx;
                        let bot =
                            at(plane, y0 + 1, x0) + (at(plane, y0 + 1, x0 + 1) - at(plane, y0 + 1, x0)) * fx;
                        top + (bot - top) * fy
                    };
                    out.push(v);
                }
            }
        }
        Tensor::new(shape.to_vec(), out)
    }
}

/// Apply one affine draw to a sample: bilinear on the image, nearest on the mask.
pub fn augment_with(sample: &Sample, draw: &AffineDraw) -> Result<Sample> {
    Sample::new(
        draw.apply(&sample.image, false)?,
        draw.apply(&sample.mask, true)?,
        sample.id.clone(),
        sample.provenance.clone(),
    )
}

pub fn augment(sample: &Sample, rng: &mut Rng) -> Result<Sample> {
    augment_with(sample, &AffineDraw::sample(rng))
}

// -- training loops ---------------------------------------------------------

/// One row of the training log. Stage-1 rows carry only the total.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub iter: usize,
    pub sub: Option<[f64; 4]>,
    pub total: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,iter,L_s1,L_s2,L_s3,L_F,L_total,lr";

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{LOG_HEADER}").unwrap();
    for r in rows {
        let sub = match r.sub {
            Some(s) => s.map(|v| format!("{v:.8e}")).join(","),
            None => ",,,".to_owned(),
        };
        writeln!(out, "{},{},{},{:.8e},{:e}", r.epoch, r.iter, sub, r.total, r.lr).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<LogRow>,
}

/// Stage-1 result: the trained Bayesian network, per-image maps keyed by
/// sample id, and the training log.
#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub params: ModelParams<f32>,
    pub maps: IndexMap<String, UncertaintyMaps<f32>>,
    pub log: Vec<LogRow>,
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    shuffle: Rng,
    dropout: Rng,
    augment: Rng,
    step: usize,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a TrainConfig, seed: u64) -> Self {
        Loop {
            cfg,
            shuffle: rng::substream(seed, tags::SHUFFLE),
            dropout: rng::substream(seed, tags::DROPOUT),
            augment: rng::substream(seed, tags::AUGMENT),
            step: 0,
        }
    }

    fn done(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Shuffled minibatches of indices for one epoch.
    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }
}

fn check_finite(loss: f64, step: usize, cfg: &TrainConfig) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "training diverged: loss is {loss} at step {step} (lr {}); try a smaller lr",
            cfg.lr
        )))
    }
}

fn collect_grads(g: &mut Graph<f32>, p: &ParamVars) -> IndexMap<String, Tensor<f32>> {
    p.iter()
        .filter_map(|(name, v)| g.take_grad(v).map(|t| (name.to_owned(), t)))
        .collect()
}

/// Stack the selected samples (optionally augmented) and their maps.
fn assemble(
    dataset: &[Sample],
    maps: Option<&IndexMap<String, UncertaintyMaps<f32>>>,
    idx: &[usize],
    draws: Option<&[AffineDraw]>,
) -> Result<(Tensor<f32>, Tensor<f32>, Option<UncertaintyMaps<f32>>)> {
    let mut images = Vec::with_capacity(idx.len());
    let mut masks = Vec::with_capacity(idx.len());
    let mut ms = Vec::new();
    for (k, &i) in idx.iter().enumerate() {
        let s = &dataset[i];
        let m = match maps {
            Some(cache) => Some(
                cache
                    .get(&s.id)
                    .ok_or_else(|| Error::usage(format!("no uncertainty maps cached for {}", s.id)))?
                    .clone(),
            ),
            None => None,
        };
        match draws {
            Some(d) => {
                let aug = augment_with(s, &d[k])?;
                images.push(aug.image_batch());
                masks.push(aug.mask_batch());
                if let Some(m) = m {
                    ms.push(UncertaintyMaps::new(d[k].apply(&m.u_e, false)?, d[k].apply(&m.u_a, false)?)?);
                }
            }
            None => {
                images.push(s.image_batch());
                masks.push(s.mask_batch());
                ms.extend(m);
            }
        }
    }
    let maps = if ms.is_empty() {
        None
    } else {
        Some(UncertaintyMaps::stack_batch(&ms.iter().collect::<Vec<_>>())?)
    };
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?, maps))
}

fn check_dataset(dataset: &[Sample], arch: &ArchConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::usage("training dataset is empty"));
    }
    for s in dataset {
        arch.check_input(s.height(), s.width())?;
    }
    Ok(())
}

/// Train the stage-1 Bayesian network (derived from `arch` with
/// [`ArchConfig::bayesian_from`]) and cache ground-truth-centred maps for
/// every training image.
pub fn train_stage1(dataset: &[Sample], cfg: &TrainConfig, arch: &ArchConfig, seed: u64) -> Result<Stage1Outcome> {
    let TrainOutcome { params, log } = fit_stage1(dataset, cfg, arch, seed)?;
    let maps = stage1_maps(&params, dataset, cfg.n_mc_train, seed)?;
    Ok(Stage1Outcome { params, maps, log })
}

/// The stage-1 optimisation loop alone, without caching maps.
pub fn fit_stage1(dataset: &[Sample], cfg: &TrainConfig, arch: &ArchConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = arch.bayesian_from();
    check_dataset(dataset, &arch)?;
    let mut params = backbone::build_model(&arch, Stage::Bayesian, seed)?;
    let mut state = OptState::new(&params);
    let mut noise = rng::substream(seed, tags::HETERO_NOISE);
    let mut lp = Loop::new(cfg, seed);
    let mut log = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        for idx in lp.batches(dataset.len()) {
            if lp.done() {
                break 'epochs;
            }
            let draws: Option<Vec<AffineDraw>> = cfg
                .augment
                .then(|| idx.iter().map(|_| AffineDraw::sample(&mut lp.augment)).collect());
            let (image, mask, _) = assemble(dataset, None, &idx, draws.as_deref())?;
            let mut g = Graph::new();
            let p = ParamVars::register(&mut g, &params, true);
            let x = g.constant(image);
            let b = backbone::forward_graph(&mut g, &params, &p, x, None, true, &mut lp.dropout)?;
            let v = b.v.expect("stage-1 networks carry an aleatoric head");
            let loss = heteroscedastic_loss_graph(&mut g, b.y_f, v, &mask, cfg.hetero_samples, &mut noise)?;
            let total = g.value(loss).item() as f64;
            check_finite(total, lp.step + 1, cfg)?;
            g.backward(loss)?;
            let grads = collect_grads(&mut g, &p);
            rmsprop_step(&mut params, &grads, &mut state, cfg)?;
            lp.step += 1;
            log.push(LogRow {
                epoch,
                iter: lp.step,
                sub: None,
                total,
                lr: cfg.lr,
            });
        }
    }

    Ok(TrainOutcome { params, log })
}

/// Ground-truth-centred maps for each sample from a frozen stage-1 network.
/// Image `k` uses its own MC master seed, so the cache does not depend on
/// processing order.
pub fn stage1_maps(
    params: &ModelParams<f32>,
    dataset: &[Sample],
    n_mc: usize,
    seed: u64,
) -> Result<IndexMap<String, UncertaintyMaps<f32>>> {
    let mut maps = IndexMap::with_capacity(dataset.len());
    for (k, s) in dataset.iter().enumerate() {
        let mc_seed = rng::derive_seed(seed, tags::TRAIN_MAPS + ((k as u64) << 8));
        let samples = uncertainty::mc_sample(params, &s.image_batch(), None, n_mc, mc_seed)?;
        let m = uncertainty::spatial_uncertainty(&samples, Some(&s.mask_batch()), Centering::GroundTruth)?;
        maps.insert(s.id.clone(), m);
    }
    Ok(maps)
}

/// Train SSU-Net with the deep-supervision loss. `maps` must cover every
/// training image when the architecture uses GSUA.
pub fn train_stage2(
    dataset: &[Sample],
    maps: &IndexMap<String, UncertaintyMaps<f32>>,
    cfg: &TrainConfig,
    arch: &ArchConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset, arch)?;
    let use_maps = arch.with_gsua;
    if use_maps {
        if let Some(s) = dataset.iter().find(|s| !maps.contains_key(&s.id)) {
            return Err(Error::usage(format!("no uncertainty maps cached for {}", s.id)));
        }
    }
    let mut params = backbone::build_model(arch, Stage::Ssu, seed)?;
    let mut state = OptState::new(&params);
    let mut lp = Loop::new(cfg, seed);
    let mut log = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        for idx in lp.batches(dataset.len()) {
            if lp.done() {
                break 'epochs;
            }
            let draws: Option<Vec<AffineDraw>> = cfg
                .augment
                .then(|| idx.iter().map(|_| AffineDraw::sample(&mut lp.augment)).collect());
            let (image, mask, u) = assemble(dataset, use_maps.then_some(maps), &idx, draws.as_deref())?;
            let mut g = Graph::new();
            let p = ParamVars::register(&mut g, &params, true);
            let x = g.constant(image);
            let u = u.map(|m| g.constant(m.stacked()));
            let b = backbone::forward_graph(&mut g, &params, &p, x, u, true, &mut lp.dropout)?;
            let (loss, subs) = total_loss_graph(&mut g, &b, &mask, &cfg.loss_weights)?;
            let sub = subs.map(|v| g.value(v).item() as f64);
            let total = g.value(loss).item() as f64;
            check_finite(total, lp.step + 1, cfg)?;
            g.backward(loss)?;
            let grads = collect_grads(&mut g, &p);
            rmsprop_step(&mut params, &grads, &mut state, cfg)?;
            lp.step += 1;
            log.push(LogRow {
                epoch,
                iter: lp.step,
                sub: Some(sub),
                total,
                lr: cfg.lr,
            });
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Both stages back to back. Stage 2 runs on a seed derived from `seed`.
pub fn train_both(
    dataset: &[Sample],
    cfg: &TrainConfig,
    arch: &ArchConfig,
    seed: u64,
) -> Result<(Stage1Outcome, TrainOutcome)> {
    let s1 = train_stage1(dataset, cfg, arch, seed)?;
    let s2 = train_stage2(dataset, &s1.maps, cfg, arch, rng::derive_seed(seed, tags::STAGE2))?;
    Ok((s1, s2))
}

/// Write a maps cache as `<dir>/<id>.ue.f32` and `<dir>/<id>.ua.f32`.
pub fn save_maps(maps: &IndexMap<String, UncertaintyMaps<f32>>, dir: &Path) -> Result<()> {
    for (id, m) in maps {
        crate::io::write_raw(&m.u_e, &dir.join(format!("{id}.ue.f32")))?;
        crate::io::write_raw(&m.u_a, &dir.join(format!("{id}.ua.f32")))?;
    }
    Ok(())
}

pub fn load_maps(dir: &Path, ids: &[&str]) -> Result<IndexMap<String, UncertaintyMaps<f32>>> {
    let mut out = IndexMap::new();
    for &id in ids {
        let read = |suffix: &str| {
            let path = dir.join(format!("{id}.{suffix}.f32"));
            if !path.exists() {
                return Err(Error::usage(format!(
                    "missing stage-1 uncertainty map {}",
                    path.display()
                )));
            }
            crate::io::read_raw(&path)
        };
        out.insert(id.to_owned(), UncertaintyMaps::new(read("ue")?, read("ua")?)?);
    }
    Ok(out)
}
