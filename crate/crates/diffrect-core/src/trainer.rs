//! The training loop: wires the segmentation network, the coloring-embedding
//! branch, the latent rectifier, and the loss stack into one per-iteration
//! procedure, plus the rectification sampler, evaluation, and checkpointing.
//!
//! Determinism is structural: every random draw comes from a stream keyed on
//! `(seed, iteration, purpose)`, so a run resumed from a checkpoint replays
//! exactly the trajectory the uninterrupted run would have taken, and two
//! runs with equal configs produce bit-identical logs.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_weak_image, sample_weak, strong_perturb, weak_perturb, PerturbSpec};
use crate::autodiff::{Tape, Var};
use crate::contract;
use crate::data::{split_labeled, Dataset, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::mask::LabelMask;
use crate::metrics::{calibration_guidance, GuidanceMode, MetricsReport};
use crate::nets::{self, ImageFeatureBundle, NetsConfig};
use crate::params::ParamStore;
use crate::rng::{derive_rng, Stream};
use crate::schedule::{gaussian_latent, make_cosine_schedule, sample_loop, NoiseSchedule};
use crate::scs::{build_color_set, encode_signed, ColorSet};

const CKPT_MAGIC: &[u8; 8] = b"DRCK0001";

/// Header of the per-evaluation `metrics.csv` written by [`fit`].
pub const METRICS_CSV_HEADER: &str = "iter,case,dice,jaccard,hd95,asd";

/// Which parts of the method run during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Weak-to-strong consistency segmentation only.
    Baseline,
    /// Adds the coloring-embedding branch and its decoded supervision, but
    /// rectifies by decoding the weak embedding directly — no diffusion.
    LccOnly,
    /// The full method including the latent diffusion rectifier.
    Full,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "lcc" | "lcc-only" => Ok(Self::LccOnly),
            "full" => Ok(Self::Full),
            other => Err(Error::Contract(format!(
                "unknown ablation mode {other:?} (baseline|lcc|full)"
            ))),
        }
    }
}

/// Everything that determines a training run. Two runs with equal configs on
/// equal datasets produce bit-identical trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial decay `lr·(1 − it/iterations)^power`.
    pub poly_power: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Diffusion steps of the rectifier schedule.
    pub t_steps: usize,
    pub weights: LossWeights,
    pub guidance: GuidanceMode,
    pub ablation: AblationMode,
    /// Rectification runs on iterations whose 0-based index divides by this.
    pub rectify_every: u64,
    /// Iterations before rectified pseudo labels start supervising the
    /// segmentation net. Until the embedding, decoder, and denoiser have had
    /// time to fit, rectified masks are noise and would mislead the student.
    pub rect_warmup: u64,
    pub eval_every: u64,
    /// Fraction of training samples that keep their labels.
    pub labeled_ratio: f64,
    pub seed: u64,
    pub perturb: PerturbSpec,
    pub nets: NetsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            labeled_batch: 1,
            unlabeled_batch: 1,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            grad_clip: 1.0,
            t_steps: 100,
            weights: LossWeights::default(),
            guidance: GuidanceMode::Dice,
            ablation: AblationMode::Full,
            rectify_every: 1,
            rect_warmup: 200,
            eval_every: 200,
            labeled_ratio: 0.1,
            seed: 0,
            perturb: PerturbSpec::default(),
            nets: NetsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.iterations >= 1, "iterations must be positive");
        contract!(
            self.labeled_batch >= 1 && self.unlabeled_batch >= 1,
            "batch sizes must be positive"
        );
        contract!(self.lr.is_finite() && self.lr > 0.0, "lr must be positive, got {}", self.lr);
        contract!(
            (0.0..1.0).contains(&self.momentum),
            "momentum must lie in [0,1), got {}",
            self.momentum
        );
        contract!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        contract!(self.poly_power >= 0.0, "poly_power must be non-negative");
        contract!(self.grad_clip >= 0.0, "grad_clip must be non-negative");
        contract!(self.t_steps >= 1, "t_steps must be positive");
        contract!(
            self.rectify_every >= 1 && self.eval_every >= 1,
            "rectify_every and eval_every must be positive"
        );
        contract!(
            self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0,
            "labeled_ratio must lie in (0,1], got {}",
            self.labeled_ratio
        );
        contract!(
            self.nets.seg.num_classes >= 2,
            "need at least 2 classes, got {}",
            self.nets.seg.num_classes
        );
        self.weights.validate()
    }
}

#[derive(Default)]
struct CallCounters {
    bsem: AtomicU64,
    denoiser: AtomicU64,
    decoder: AtomicU64,
}

/// Point-in-time copy of the rectification call counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallSnapshot {
    pub bsem: u64,
    pub denoiser: u64,
    pub decoder: u64,
}

/// Mutable training state: parameters plus the iteration cursor.
///
/// The embedding, denoiser, and decoder forwards are routed through counting
/// wrappers so tests can prove that plain segmentation inference never
/// touches the rectification stack.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub iteration: u64,
    calls: CallCounters,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(cfg.seed, 0, Stream::Init);
        let store = nets::init_params(&cfg.nets, &mut rng);
        Ok(Self { cfg, store, iteration: 0, calls: CallCounters::default() })
    }

    pub fn color_set(&self) -> Result<ColorSet> {
        build_color_set(self.cfg.nets.seg.num_classes)
    }

    /// Segmentation forward; deliberately not counted — it is the one
    /// network allowed at inference time.
    pub fn seg(&self, tape: &Tape, image: &Array3<f64>) -> Result<(Var, ImageFeatureBundle)> {
        nets::seg_forward(tape, &self.store, &self.cfg.nets.seg, image)
    }

    pub fn embed(&self, tape: &Tape, m: &Array3<f64>, tau: f64) -> Result<Var> {
        self.calls.bsem.fetch_add(1, Ordering::Relaxed);
        nets::bsem_forward(tape, &self.store, &self.cfg.nets.embed, m, tau)
    }

    pub fn denoise(
        &self,
        tape: &Tape,
        z_noisy: Var,
        t: usize,
        z_cond: Var,
        feats: &ImageFeatureBundle,
    ) -> Result<Var> {
        self.calls.denoiser.fetch_add(1, Ordering::Relaxed);
        nets::denoiser_forward(tape, &self.store, &self.cfg.nets, z_noisy, t, z_cond, feats)
    }

    pub fn decode(&self, tape: &Tape, r: Var, factor: usize) -> Result<Var> {
        self.calls.decoder.fetch_add(1, Ordering::Relaxed);
        nets::decode_latent(tape, &self.store, &self.cfg.nets, r, factor)
    }

    /// How often each rectification-only network has run so far.
    pub fn rectification_calls(&self) -> CallSnapshot {
        CallSnapshot {
            bsem: self.calls.bsem.load(Ordering::Relaxed),
            denoiser: self.calls.denoiser.load(Ordering::Relaxed),
            decoder: self.calls.decoder.load(Ordering::Relaxed),
        }
    }
}

fn image_plane(image: &Array2<f64>) -> Array3<f64> {
    image.clone().insert_axis(Axis(0))
}

/// Both augmented views of one unlabeled image with their predictions.
pub struct PseudoOutputs {
    pub weak_logits: Var,
    pub strong_logits: Var,
    /// Softmax of the weak logits, detached.
    pub weak_probs: Array3<f64>,
    /// Argmax pseudo label of the weak view.
    pub y_w: LabelMask,
    /// Argmax pseudo label of the strong view.
    pub y_s: LabelMask,
    /// Image features from the weak view, pooled to the latent grid.
    pub feats: ImageFeatureBundle,
}

/// Runs the segmentation net on a weak and a strong view of `image` and
/// derives argmax pseudo labels. The strong view stacks its photometric
/// perturbations on top of the weak view, so both label fields live in the
/// same geometric frame.
pub fn pseudo_labels(
    state: &TrainState,
    tape: &Tape,
    image: &Array2<f64>,
    weak_rng: &mut ChaCha8Rng,
    strong_rng: &mut ChaCha8Rng,
) -> Result<PseudoOutputs> {
    let t = sample_weak(&state.cfg.perturb, weak_rng);
    let weak = apply_weak_image(image, t)?;
    let strong = strong_perturb(&weak, &state.cfg.perturb, strong_rng)?;
    let (weak_logits, feats) = state.seg(tape, &image_plane(&weak))?;
    let (strong_logits, _) = state.seg(tape, &image_plane(&strong))?;
    let weak_value = tape.value3(weak_logits);
    let weak_probs = losses::softmax(&weak_value.view());
    let y_w = LabelMask::from_scores(weak_value.view())?;
    let y_s = LabelMask::from_scores(tape.value3(strong_logits).view())?;
    Ok(PseudoOutputs { weak_logits, strong_logits, weak_probs, y_w, y_s, feats })
}

/// Colors and embeds the strong/weak pseudo-label pair with a shared
/// calibration guidance τ computed from their agreement.
/// Returns `(z_s, z_w, τ)`.
pub fn lcc_embed_unlabeled(
    state: &TrainState,
    tape: &Tape,
    y_s: &LabelMask,
    y_w: &LabelMask,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var, f64)> {
    let colors = state.color_set()?;
    let tau = calibration_guidance(y_s, y_w, state.cfg.guidance, rng)?;
    let z_s = state.embed(tape, &encode_signed(y_s, &colors)?, tau)?;
    let z_w = state.embed(tape, &encode_signed(y_w, &colors)?, tau)?;
    Ok((z_s, z_w, tau))
}

/// Colors and embeds the labeled prediction / ground-truth pair. Guidance
/// here is always the true foreground Dice between prediction and label,
/// regardless of the configured unlabeled guidance mode.
/// Returns `(z_w_l, z_l, τ)`.
pub fn lcc_embed_labeled(
    state: &TrainState,
    tape: &Tape,
    y_w_l: &LabelMask,
    y_l: &LabelMask,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var, f64)> {
    let colors = state.color_set()?;
    let tau = calibration_guidance(y_w_l, y_l, GuidanceMode::Dice, rng)?;
    let z_w_l = state.embed(tape, &encode_signed(y_w_l, &colors)?, tau)?;
    let z_l = state.embed(tape, &encode_signed(y_l, &colors)?, tau)?;
    Ok((z_w_l, z_l, tau))
}

/// One rectifier training branch, on tape: diffuses the clean latent to
/// timestep `t` with the given noise, predicts that noise with `denoise`,
/// reconstructs ẑ₀ in closed form, and returns the latent MSE together with
/// the reconstruction.
pub fn lfr_branch<F>(
    tape: &Tape,
    z_clean: Var,
    t: usize,
    eta: &Array3<f64>,
    sched: &NoiseSchedule,
    denoise: F,
) -> Result<(Var, Var)>
where
    F: FnOnce(Var) -> Result<Var>,
{
    contract!(
        (1..=sched.t_max()).contains(&t),
        "timestep {t} outside schedule 1..={}",
        sched.t_max()
    );
    let shape = tape.shape(z_clean);
    contract!(
        shape.as_slice() == eta.shape(),
        "noise shape {:?} does not match latent {shape:?}",
        eta.shape()
    );
    let ab = sched.alpha_bar(t);
    let eta_v = tape.input3(eta.clone());
    let z_t = tape.add(tape.scale(z_clean, ab.sqrt()), tape.scale(eta_v, (1.0 - ab).sqrt()));
    let eps_hat = denoise(z_t)?;
    let r = tape.scale(tape.sub(z_t, tape.scale(eps_hat, (1.0 - ab).sqrt())), 1.0 / ab.sqrt());
    let lat = losses::latent_loss(tape, z_clean, r)?;
    Ok((lat, r))
}

/// Latents and features feeding the two rectifier training branches.
pub struct LfrInputs<'a> {
    /// Strong-view embedding — condition of the unlabeled branch.
    pub z_s: Var,
    /// Weak-view embedding — diffusion target of the unlabeled branch.
    pub z_w: Var,
    /// Labeled-prediction embedding — condition of the labeled branch.
    pub z_w_l: Var,
    /// Ground-truth embedding — diffusion target of the labeled branch.
    pub z_l: Var,
    pub feats_u: &'a ImageFeatureBundle,
    pub feats_l: &'a ImageFeatureBundle,
}

pub struct LfrOutputs {
    pub lat_u: Var,
    pub lat_l: Var,
    /// Reconstructed weak latent from the unlabeled branch.
    pub r_w: Var,
    pub t_u: usize,
    pub t_l: usize,
}

/// Runs the strong→weak and prediction→truth rectifier branches. Every
/// timestep of the schedule is visited with fresh noise and the per-step
/// latent losses are averaged — the ancestral sampler needs uniform accuracy
/// across the whole chain, and a one-timestep-per-iteration diet leaves the
/// high-noise steps too inexact for sampling to converge at desk scale. Each
/// term is weighted by ᾱ_t/(1−ᾱ_t), which turns the ẑ₀-space error into the
/// uniform ε-space error: unweighted, the t=T term is amplified by ~1/ᾱ_T
/// and its gradient monopolizes the global-norm clip, starving every other
/// loss. The decoded reconstruction `r_w` is taken at a drawn timestep so
/// the decoder sees reconstructions of varying fidelity.
///
/// Draw order: `t_u`, `t_l` from the timestep stream, then T noise draws for
/// the unlabeled branch followed by T for the labeled branch.
pub fn lfr_train_losses(
    state: &TrainState,
    tape: &Tape,
    inputs: &LfrInputs<'_>,
    sched: &NoiseSchedule,
    t_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
) -> Result<LfrOutputs> {
    let t_u = t_rng.random_range(1..=sched.t_max());
    let t_l = t_rng.random_range(1..=sched.t_max());
    let shape = tape.shape(inputs.z_w);
    let dims = (shape[0], shape[1], shape[2]);
    let branch = |target: Var,
                  cond: Var,
                  feats: &ImageFeatureBundle,
                  keep: usize,
                  noise_rng: &mut ChaCha8Rng|
     -> Result<(Var, Var)> {
        let mut acc = None;
        let mut kept = None;
        for t in 1..=sched.t_max() {
            let eta = gaussian_latent(dims, noise_rng);
            let (lat, r) = lfr_branch(tape, target, t, &eta, sched, |z_t| {
                state.denoise(tape, z_t, t, cond, feats)
            })?;
            let ab = sched.alpha_bar(t);
            let lat = tape.scale(lat, ab / (1.0 - ab));
            acc = Some(match acc {
                None => lat,
                Some(sum) => tape.add(sum, lat),
            });
            if t == keep {
                kept = Some(r);
            }
        }
        let mean = tape.scale(acc.expect("schedule is non-empty"), 1.0 / sched.t_max() as f64);
        Ok((mean, kept.expect("kept timestep is within the schedule")))
    };
    let (lat_u, r_w) = branch(inputs.z_w, inputs.z_s, inputs.feats_u, t_u, noise_rng)?;
    let (lat_l, _) = branch(inputs.z_l, inputs.z_w_l, inputs.feats_l, t_l, noise_rng)?;
    Ok(LfrOutputs { lat_u, lat_l, r_w, t_u, t_l })
}

/// Rectifies a weak pseudo label: embeds it at full guidance (τ = 1), runs
/// the ancestral sampler conditioned on that embedding and the image
/// features, and decodes the result back to a mask. The embedding-only
/// ablation decodes the weak embedding directly without diffusion; in
/// baseline mode rectification is disabled.
///
/// Inference only — every forward runs on a gradient-free tape.
pub fn rectify(
    state: &TrainState,
    y_w: &LabelMask,
    feats: &ImageFeatureBundle,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LabelMask> {
    contract!(
        state.cfg.ablation != AblationMode::Baseline,
        "rectification is disabled in baseline mode"
    );
    let colors = state.color_set()?;
    let (h, _) = y_w.shape();
    let m_w = encode_signed(y_w, &colors)?;
    let z_w = {
        let tape = Tape::inference();
        tape.value3(state.embed(&tape, &m_w, 1.0)?)
    };
    let dims = z_w.dim();
    let latent = match state.cfg.ablation {
        AblationMode::LccOnly => z_w,
        _ => sample_loop(
            |z_t, t, cond: &Array3<f64>, feats: &ImageFeatureBundle| {
                let tape = Tape::inference();
                let z = tape.input3(z_t.clone());
                let c = tape.input3(cond.clone());
                Ok(tape.value3(state.denoise(&tape, z, t, c, feats)?))
            },
            &z_w,
            feats,
            dims,
            sched,
            rng,
        )?,
    };
    let tape = Tape::inference();
    let logits = state.decode(&tape, tape.input3(latent), h / dims.1)?;
    LabelMask::from_scores(tape.value3(logits).view())
}

/// Runs one optimization step over the given batches and advances the
/// iteration counter. Batches longer than one are paired index-wise, cycling
/// the shorter side, and the per-pair losses are averaged.
///
/// Per-iteration random draws, in stream order: the weak stream yields the
/// labeled transform then the unlabeled transform per pair; the strong,
/// guidance, timestep, noise, and rectify streams each yield their draws per
/// pair in pipeline order.
pub fn train_iteration(
    state: &mut TrainState,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    sched: &NoiseSchedule,
) -> Result<LossBreakdown> {
    contract!(!labeled.is_empty(), "labeled batch is empty");
    contract!(!unlabeled.is_empty(), "unlabeled batch is empty");
    contract!(
        sched.t_max() == state.cfg.t_steps,
        "schedule has {} steps but the config asks for {}",
        sched.t_max(),
        state.cfg.t_steps
    );
    let cfg = state.cfg.clone();
    let it = state.iteration;
    contract!(it < cfg.iterations, "iteration {it} is past the configured horizon");
    let mut weak_rng = derive_rng(cfg.seed, it, Stream::WeakAug);
    let mut strong_rng = derive_rng(cfg.seed, it, Stream::StrongAug);
    let mut guide_rng = derive_rng(cfg.seed, it, Stream::Guidance);
    let mut t_rng = derive_rng(cfg.seed, it, Stream::Timestep);
    let mut noise_rng = derive_rng(cfg.seed, it, Stream::DiffusionNoise);
    let mut rect_rng = derive_rng(cfg.seed, it, Stream::Rectify);

    let tape = Tape::new();
    let pairs = labeled.len().max(unlabeled.len());
    let rectify_now = cfg.ablation != AblationMode::Baseline
        && it >= cfg.rect_warmup
        && (it - cfg.rect_warmup) % cfg.rectify_every == 0;

    let mut seg_terms = Vec::new();
    let mut rect_terms = Vec::new();
    let mut lat_semi_terms = Vec::new();
    let mut lat_u_terms = Vec::new();
    let mut lat_l_terms = Vec::new();

    for k in 0..pairs {
        let ls = labeled[k % labeled.len()];
        let us = unlabeled[k % unlabeled.len()];
        let (img_l, y_l, _) = weak_perturb(&ls.image, &ls.mask, &cfg.perturb, &mut weak_rng)?;
        let (labeled_logits, feats_l) = state.seg(&tape, &image_plane(&img_l))?;
        let pseudo = pseudo_labels(state, &tape, &us.image, &mut weak_rng, &mut strong_rng)?;
        seg_terms.push(losses::semi_seg_loss(
            &tape,
            labeled_logits,
            &y_l,
            pseudo.strong_logits,
            &pseudo.weak_probs.view(),
            &cfg.weights,
        )?);
        if cfg.ablation == AblationMode::Baseline {
            continue;
        }
        let (z_s, z_w, _) =
            lcc_embed_unlabeled(state, &tape, &pseudo.y_s, &pseudo.y_w, &mut guide_rng)?;
        let y_w_l = LabelMask::from_scores(tape.value3(labeled_logits).view())?;
        let (z_w_l, z_l, _) = lcc_embed_labeled(state, &tape, &y_w_l, &y_l, &mut guide_rng)?;
        let factor = y_l.shape().0 / tape.shape(z_l)[1];
        // The ground-truth latent is decoded and supervised directly so the
        // decoder learns from iteration one instead of waiting for pseudo
        // labels to clear the confidence gate.
        let anchor = losses::rect_loss(&tape, state.decode(&tape, z_l, factor)?, &y_l)?;
        let decoded_r = match cfg.ablation {
            AblationMode::Full => {
                let inputs =
                    LfrInputs { z_s, z_w, z_w_l, z_l, feats_u: &pseudo.feats, feats_l: &feats_l };
                let lfr =
                    lfr_train_losses(state, &tape, &inputs, sched, &mut t_rng, &mut noise_rng)?;
                lat_u_terms.push(lfr.lat_u);
                lat_l_terms.push(lfr.lat_l);
                state.decode(&tape, lfr.r_w, factor)?
            }
            _ => state.decode(&tape, z_w, factor)?,
        };
        let unsup = losses::masked_pseudo_ce(
            &tape,
            decoded_r,
            &pseudo.weak_probs.view(),
            cfg.weights.pseudo_threshold,
        )?;
        lat_semi_terms.push(tape.add(anchor, unsup));
        if rectify_now {
            let y_r = rectify(state, &pseudo.y_w, &pseudo.feats, sched, &mut rect_rng)?;
            rect_terms.push(losses::rect_loss(&tape, pseudo.weak_logits, &y_r)?);
        }
    }

    let mean = |terms: &[Var]| -> Option<Var> {
        let mut vars = terms.iter().copied();
        let first = vars.next()?;
        let sum = vars.fold(first, |acc, v| tape.add(acc, v));
        Some(tape.scale(sum, 1.0 / terms.len() as f64))
    };
    let seg_mean = mean(&seg_terms).expect("at least one pair");
    let rect_mean = mean(&rect_terms);
    let lat_semi_mean = mean(&lat_semi_terms);
    let lat_u_mean = mean(&lat_u_terms);
    let lat_l_mean = mean(&lat_l_terms);

    let mut total = seg_mean;
    for part in [rect_mean, lat_semi_mean] {
        if let Some(v) = part {
            total = tape.add(total, v);
        }
    }
    if let Some(v) = lat_u_mean {
        total = tape.add(total, tape.scale(v, cfg.weights.lambda1));
    }
    if let Some(v) = lat_l_mean {
        total = tape.add(total, tape.scale(v, cfg.weights.lambda2));
    }

    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let breakdown = losses::total_loss(
        tape.scalar(seg_mean),
        value(rect_mean),
        value(lat_semi_mean),
        value(lat_u_mean),
        value(lat_l_mean),
        &cfg.weights,
    )?;
    let total_value = tape.scalar(total);
    contract!(
        (total_value - breakdown.total).abs() <= 1e-9 * breakdown.total.abs().max(1.0),
        "tape total {total_value} disagrees with the loss breakdown {}",
        breakdown.total
    );

    let grads = tape.backward(total);
    let lr = cfg.lr * (1.0 - it as f64 / cfg.iterations as f64).powf(cfg.poly_power);
    let clip = (cfg.grad_clip > 0.0).then_some(cfg.grad_clip);
    state.store.sgd_step(&grads, lr, cfg.momentum, cfg.weight_decay, clip);
    state.iteration += 1;
    Ok(breakdown)
}

/// Plain segmentation inference over `samples`: one report per case, in
/// order. Never touches the embedding, denoiser, or decoder networks; empty
/// foreground surfaces are scored with the image diagonal as penalty.
pub fn evaluate(state: &TrainState, samples: &[&Sample]) -> Result<Vec<(String, MetricsReport)>> {
    let before = state.rectification_calls();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let tape = Tape::inference();
        let (logits, _) = state.seg(&tape, &image_plane(&s.image))?;
        let pred = LabelMask::from_scores(tape.value3(logits).view())?;
        let (h, w) = s.mask.shape();
        let penalty = ((h * h + w * w) as f64).sqrt();
        out.push((s.id.clone(), MetricsReport::compute(&pred, &s.mask, penalty)?));
    }
    debug_assert_eq!(before, state.rectification_calls());
    Ok(out)
}

/// Mean Dice over per-case reports; NaN when empty.
pub fn mean_dice(reports: &[(String, MetricsReport)]) -> f64 {
    if reports.is_empty() {
        return f64::NAN;
    }
    reports.iter().map(|(_, r)| r.dice_mean).sum::<f64>() / reports.len() as f64
}

/// Writes `state` as magic, config JSON, iteration, and the parameter blob.
/// Round-trips bit-exactly, including optimizer momentum.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let cfg = serde_json::to_vec(&state.cfg)
        .map_err(|e| Error::Contract(format!("config encode: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&state.iteration.to_le_bytes());
    state.store.save(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint written by [`save_checkpoint`]. Call counters restart
/// at zero.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = CKPT_MAGIC.len();
    if bytes.len() < off + 8 || &bytes[..off] != CKPT_MAGIC {
        return Err(Error::parse(path, "not a checkpoint file"));
    }
    let take_u64 = |off: &mut usize| -> Result<u64> {
        let end = *off + 8;
        let raw: [u8; 8] = bytes
            .get(*off..end)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::parse(path, "truncated checkpoint"))?;
        *off = end;
        Ok(u64::from_le_bytes(raw))
    };
    let cfg_len = take_u64(&mut off)? as usize;
    let cfg_end = off
        .checked_add(cfg_len)
        .filter(|&e| e + 8 <= bytes.len())
        .ok_or_else(|| Error::parse(path, "truncated checkpoint"))?;
    let cfg: TrainConfig = serde_json::from_slice(&bytes[off..cfg_end])
        .map_err(|e| Error::parse(path, format!("config decode: {e}")))?;
    cfg.validate()?;
    off = cfg_end;
    let iteration = take_u64(&mut off)?;
    let store = ParamStore::load(&bytes[off..])?;
    Ok(TrainState { cfg, store, iteration, calls: CallCounters::default() })
}

/// Summary of a [`fit`] run.
#[derive(Debug, Clone, Copy)]
pub struct FitReport {
    pub iterations_run: u64,
    /// Best validation mean Dice seen during this run; −∞ if never evaluated.
    pub best_dice: f64,
    /// Mean Dice of the last evaluation; NaN if never evaluated.
    pub final_dice: f64,
}

/// Trains for `cfg.iterations` iterations, writing `config.json`,
/// `losses.csv`, `metrics.csv`, `best.ckpt`, and `last.ckpt` into `out_dir`.
/// `resume` restarts from a checkpoint saved with the identical config and
/// replays the exact trajectory the uninterrupted run would have taken.
pub fn fit(cfg: &TrainConfig, ds: &Dataset, out_dir: &Path, resume: Option<&Path>) -> Result<FitReport> {
    fit_segment(cfg, ds, out_dir, resume, None)
}

/// [`fit`] with an optional early stop after `stop_after` total iterations,
/// which emulates an interrupted run: the learning-rate schedule still spans
/// the full `cfg.iterations`, and `last.ckpt` is written at the stop point.
pub fn fit_segment(
    cfg: &TrainConfig,
    ds: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<FitReport> {
    cfg.validate()?;
    contract!(
        ds.classes == cfg.nets.seg.num_classes,
        "dataset has {} classes but the model expects {}",
        ds.classes,
        cfg.nets.seg.num_classes
    );
    let mut state = match resume {
        Some(path) => {
            let state = load_checkpoint(path)?;
            let same = serde_json::to_string(&state.cfg).ok() == serde_json::to_string(cfg).ok();
            contract!(same, "checkpoint config does not match the requested config");
            state
        }
        None => TrainState::new(cfg.clone())?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Contract(format!("config encode: {e}")))?;
    fs::write(out_dir.join("config.json"), cfg_json).map_err(|e| Error::io(out_dir, e))?;

    let sched = make_cosine_schedule(cfg.t_steps)?;
    let train: Vec<Sample> = ds.train_samples().into_iter().cloned().collect();
    contract!(!train.is_empty(), "dataset has no training samples");
    let spec = SplitSpec { labeled_ratio: cfg.labeled_ratio, seed: cfg.seed };
    let (labeled, mut unlabeled) = split_labeled(&train, &spec)?;
    if unlabeled.is_empty() {
        // Fully labeled corner case: the consistency branch reuses labeled
        // images (their labels stay unused on that path).
        unlabeled = labeled.clone();
    }
    let val = ds.val_samples();

    let mut losses_csv =
        reopen_csv(&out_dir.join("losses.csv"), LossBreakdown::CSV_HEADER, state.iteration)?;
    let mut metrics_csv =
        reopen_csv(&out_dir.join("metrics.csv"), METRICS_CSV_HEADER, state.iteration)?;

    let stop = stop_after.unwrap_or(cfg.iterations).min(cfg.iterations);
    let mut best = f64::NEG_INFINITY;
    let mut final_dice = f64::NAN;
    let start = state.iteration;
    while state.iteration < stop {
        let mut batch_rng = derive_rng(cfg.seed, state.iteration, Stream::Batch);
        let lb: Vec<&Sample> = (0..cfg.labeled_batch)
            .map(|_| &labeled[batch_rng.random_range(0..labeled.len())])
            .collect();
        let ub: Vec<&Sample> = (0..cfg.unlabeled_batch)
            .map(|_| &unlabeled[batch_rng.random_range(0..unlabeled.len())])
            .collect();
        let breakdown = train_iteration(&mut state, &lb, &ub, &sched)?;
        writeln!(losses_csv, "{}", breakdown.csv_row(state.iteration as usize))
            .map_err(|e| Error::io(out_dir, e))?;
        let eval_now = state.iteration % cfg.eval_every == 0 || state.iteration == cfg.iterations;
        if eval_now && !val.is_empty() {
            let reports = evaluate(&state, &val)?;
            for (case, r) in &reports {
                writeln!(
                    metrics_csv,
                    "{},{},{},{},{},{}",
                    state.iteration, case, r.dice_mean, r.jaccard_mean, r.hd95, r.asd
                )
                .map_err(|e| Error::io(out_dir, e))?;
            }
            let dice = mean_dice(&reports);
            final_dice = dice;
            if dice > best {
                best = dice;
                save_checkpoint(&state, &out_dir.join("best.ckpt"))?;
            }
        }
    }
    save_checkpoint(&state, &out_dir.join("last.ckpt"))?;
    Ok(FitReport { iterations_run: state.iteration - start, best_dice: best, final_dice })
}

/// Rewrites a log so it contains the header plus the rows up to iteration
/// `upto` (dropping any rows a longer aborted run left behind), then returns
/// an append handle.
fn reopen_csv(path: &Path, header: &str, upto: u64) -> Result<fs::File> {
    let mut content = format!("{header}\n");
    if upto > 0 && path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().skip(1) {
            let keep = line
                .split(',')
                .next()
                .and_then(|f| f.parse::<u64>().ok())
                .is_some_and(|i| i <= upto);
            if keep {
                content.push_str(line);
                content.push('\n');
            }
        }
    }
    fs::write(path, &content).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}
