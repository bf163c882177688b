//! Training objectives: supervised and consistency segmentation losses, the
//! rectified-label loss, latent reconstruction losses, and the weighted
//! total.
//!
//! Every differentiable loss is built on the `autodiff` tape so one backward
//! pass covers the whole per-iteration objective. `total_loss` is plain
//! arithmetic over already-evaluated scalars; it exists so the logged
//! breakdown and the optimized objective provably agree.

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contract;
use crate::error::Result;
use crate::mask::LabelMask;

/// Smoothing constant shared by every soft-Dice term.
pub const DICE_EPS: f64 = 1e-5;

/// Trade-off factors and the pseudo-label confidence gate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the unlabeled latent reconstruction loss.
    pub lambda1: f64,
    /// Weight of the labeled latent reconstruction loss.
    pub lambda2: f64,
    /// Minimum weak-branch confidence for a pixel to contribute to
    /// consistency losses.
    pub pseudo_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 1.0, pseudo_threshold: 0.95 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.lambda1.is_finite() && self.lambda1 >= 0.0,
            "lambda1 must be finite and ≥ 0, got {}",
            self.lambda1
        );
        contract!(
            self.lambda2.is_finite() && self.lambda2 >= 0.0,
            "lambda2 must be finite and ≥ 0, got {}",
            self.lambda2
        );
        contract!(
            (0.0..=1.0).contains(&self.pseudo_threshold),
            "pseudo_threshold must lie in [0,1], got {}",
            self.pseudo_threshold
        );
        Ok(())
    }
}

/// Per-iteration loss values; `total` is the optimized objective.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg_semi: f64,
    pub rect: f64,
    pub lat_semi: f64,
    pub lat_u: f64,
    pub lat_l: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "iter,seg_semi,rect,lat_semi,lat_u,lat_l,total";

    pub fn csv_row(&self, iter: usize) -> String {
        format!(
            "{iter},{},{},{},{},{},{}",
            self.seg_semi, self.rect, self.lat_semi, self.lat_u, self.lat_l, self.total
        )
    }
}

fn check_logits_vs_mask(tape: &Tape, logits: Var, mask: &LabelMask) -> Result<()> {
    let s = tape.shape(logits);
    let (h, w) = mask.shape();
    contract!(
        s == vec![mask.classes(), h, w],
        "logits shape {s:?} does not match mask {}x{}x{}",
        mask.classes(),
        h,
        w
    );
    Ok(())
}

/// Numerically stable per-pixel softmax over the class axis of `[C,H,W]`
/// logits.
pub fn softmax(logits: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logits[[ci, y, x]]);
            }
            let mut denom = 0.0;
            for ci in 0..c {
                let e = (logits[[ci, y, x]] - max).exp();
                out[[ci, y, x]] = e;
                denom += e;
            }
            for ci in 0..c {
                out[[ci, y, x]] /= denom;
            }
        }
    }
    out
}

/// 1 − mean over classes of the smoothed soft Dice score of
/// softmax(`logits`) against the one-hot `target`.
pub fn soft_dice_loss(tape: &Tape, logits: Var, target: &LabelMask) -> Result<Var> {
    check_logits_vs_mask(tape, logits, target)?;
    Ok(tape.soft_dice(logits, target.to_one_hot(), DICE_EPS))
}

/// Cross-entropy plus soft Dice of the weak-branch logits against a
/// rectified label. The target is an integer mask, so gradients flow only
/// into the logits.
pub fn rect_loss(tape: &Tape, y_w_logits: Var, y_r: &LabelMask) -> Result<Var> {
    check_logits_vs_mask(tape, y_w_logits, y_r)?;
    let one_hot = y_r.to_one_hot();
    let ce = tape.ce_mean(y_w_logits, one_hot.clone(), None);
    let dice = tape.soft_dice(y_w_logits, one_hot, DICE_EPS);
    Ok(tape.add(ce, dice))
}

/// Mean squared difference between a clean latent and its reconstruction.
/// Gradients flow into both sides.
pub fn latent_loss(tape: &Tape, z_clean: Var, r: Var) -> Result<Var> {
    let a = tape.shape(z_clean);
    let b = tape.shape(r);
    contract!(a == b, "latent shapes differ: {a:?} vs {b:?}");
    Ok(tape.mse_mean(z_clean, r))
}

fn check_prob_field(probs: &ArrayView3<f64>) -> Result<()> {
    let (c, h, w) = probs.dim();
    contract!(c >= 2, "probability field needs ≥ 2 classes, got {c}");
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for ci in 0..c {
                let p = probs[[ci, y, x]];
                contract!(
                    p.is_finite() && (-1e-9..=1.0 + 1e-9).contains(&p),
                    "probability out of range at ({y},{x}): {p}"
                );
                sum += p;
            }
            contract!(
                (sum - 1.0).abs() < 1e-6,
                "probabilities at ({y},{x}) sum to {sum}, not 1"
            );
        }
    }
    Ok(())
}

/// Hard pseudo label (argmax, ties to the lower class) and the 0/1 retention
/// map of pixels whose confidence reaches `threshold`.
pub fn pseudo_label(
    probs: &ArrayView3<f64>,
    threshold: f64,
) -> Result<(LabelMask, Array2<f64>)> {
    check_prob_field(probs)?;
    let mask = LabelMask::from_scores(probs.view())?;
    let (c, h, w) = probs.dim();
    let mut keep = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut conf: f64 = 0.0;
            for ci in 0..c {
                conf = conf.max(probs[[ci, y, x]]);
            }
            if conf >= threshold {
                keep[[y, x]] = 1.0;
            }
        }
    }
    Ok((mask, keep))
}

/// Cross-entropy of `logits` against the hard pseudo label of `probs`,
/// averaged over retained pixels only; zero when nothing is retained.
pub fn masked_pseudo_ce(
    tape: &Tape,
    logits: Var,
    probs: &ArrayView3<f64>,
    threshold: f64,
) -> Result<Var> {
    let (pl, keep) = pseudo_label(probs, threshold)?;
    check_logits_vs_mask(tape, logits, &pl)?;
    Ok(tape.ce_mean(logits, pl.to_one_hot(), Some(keep)))
}

/// Supervised CE + Dice on the labeled branch plus confidence-gated
/// consistency CE of the strong branch against weak pseudo labels.
pub fn semi_seg_loss(
    tape: &Tape,
    labeled_logits: Var,
    y_l: &LabelMask,
    strong_logits: Var,
    weak_probs: &ArrayView3<f64>,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    check_logits_vs_mask(tape, labeled_logits, y_l)?;
    let one_hot = y_l.to_one_hot();
    let sup_ce = tape.ce_mean(labeled_logits, one_hot.clone(), None);
    let sup_dice = tape.soft_dice(labeled_logits, one_hot, DICE_EPS);
    let unsup = masked_pseudo_ce(tape, strong_logits, weak_probs, weights.pseudo_threshold)?;
    Ok(tape.add(tape.add(sup_ce, sup_dice), unsup))
}

/// Composes the weighted total from the individual parts. The identity
/// `total = seg_semi + rect + lat_semi + λ1·lat_u + λ2·lat_l` holds exactly.
pub fn total_loss(
    seg_semi: f64,
    rect: f64,
    lat_semi: f64,
    lat_u: f64,
    lat_l: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in [
        ("seg_semi", seg_semi),
        ("rect", rect),
        ("lat_semi", lat_semi),
        ("lat_u", lat_u),
        ("lat_l", lat_l),
    ] {
        contract!(v.is_finite(), "loss component {name} is not finite: {v}");
    }
    let total = seg_semi + rect + lat_semi + weights.lambda1 * lat_u + weights.lambda2 * lat_l;
    Ok(LossBreakdown { seg_semi, rect, lat_semi, lat_u, lat_l, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::{derive_rng, Stream};
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_mask(h: usize, w: usize, classes: usize, seed: u64) -> LabelMask {
        let mut rng = derive_rng(seed, 0, Stream::Data);
        let data = Array2::from_shape_fn((h, w), |_| rng.random_range(0..classes) as u8);
        LabelMask::new(data, classes).unwrap()
    }

    fn random_logits(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = derive_rng(seed, 1, Stream::Data);
        Array3::from_shape_fn((c, h, w), |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn peaked_logits(mask: &LabelMask, margin: f64) -> Array3<f64> {
        let (h, w) = mask.shape();
        let mut out = Array3::zeros((mask.classes(), h, w));
        for y in 0..h {
            for x in 0..w {
                out[[mask.data()[[y, x]] as usize, y, x]] = margin;
            }
        }
        out
    }

    /// Central finite differences on logits bound as a named parameter.
    fn fd_check<F>(c: usize, h: usize, w: usize, seed: u64, f: F)
    where
        F: Fn(&Tape, Var) -> Var,
    {
        let mut store = ParamStore::new();
        store.add_raw("logits", random_logits(c, h, w, seed).into_dyn());
        let eval = |s: &ParamStore| {
            let tape = Tape::new();
            let v = tape.param(s, "logits");
            let loss = f(&tape, v);
            (tape.scalar(loss), tape.backward(loss))
        };
        let (_, grads) = eval(&store);
        let g = grads.get("logits").expect("logit gradient").clone();
        let h_step = 1e-5;
        let n = c * h * w;
        for i in (0..n).step_by(7) {
            let orig = store.value("logits").as_slice().unwrap()[i];
            store.value_mut("logits").as_slice_mut().unwrap()[i] = orig + h_step;
            let (lp, _) = eval(&store);
            store.value_mut("logits").as_slice_mut().unwrap()[i] = orig - h_step;
            let (lm, _) = eval(&store);
            store.value_mut("logits").as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h_step);
            let bp = g.as_slice().unwrap()[i];
            let denom = bp.abs().max(fd.abs()).max(1e-6);
            assert!((bp - fd).abs() / denom < 1e-3, "[{i}]: bp {bp} vs fd {fd}");
        }
    }

    #[test]
    fn soft_dice_saturates_on_peaked_logits() {
        let mask = random_mask(8, 8, 3, 1);
        let tape = Tape::new();
        let v = tape.input3(peaked_logits(&mask, 20.0));
        let loss = soft_dice_loss(&tape, v, &mask).unwrap();
        assert!(tape.scalar(loss) < 0.01);
    }

    #[test]
    fn soft_dice_uniform_closed_form() {
        // Uniform logits → p = 0.5 per class; balanced 8×8 target.
        let mut data = Array2::zeros((8, 8));
        for y in 0..8 {
            for x in 0..8 {
                data[[y, x]] = u8::from(x >= 4);
            }
        }
        let mask = LabelMask::new(data, 2).unwrap();
        let tape = Tape::new();
        let v = tape.input3(Array3::zeros((2, 8, 8)));
        let loss = soft_dice_loss(&tape, v, &mask).unwrap();
        let n = 64.0;
        let g = 32.0;
        let expected = 1.0 - (2.0 * 0.5 * g + DICE_EPS) / (0.5 * n + g + DICE_EPS);
        assert!((tape.scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_gradient_matches_fd() {
        let mask = random_mask(8, 8, 3, 2);
        fd_check(3, 8, 8, 3, |tape, v| soft_dice_loss(tape, v, &mask).unwrap());
    }

    #[test]
    fn rect_loss_values() {
        let mask = random_mask(8, 8, 2, 4);
        let tape = Tape::new();
        let peaked = tape.input3(peaked_logits(&mask, 25.0));
        let lp = rect_loss(&tape, peaked, &mask).unwrap();
        assert!(tape.scalar(lp) < 0.01);

        // Uniform logits: CE term is exactly ln 2; Dice term from the
        // closed form at p = 0.5.
        let uniform = tape.input3(Array3::zeros((2, 8, 8)));
        let lu = rect_loss(&tape, uniform, &mask).unwrap();
        let n = 64.0;
        let counts = [
            mask.data().iter().filter(|&&v| v == 0).count() as f64,
            mask.data().iter().filter(|&&v| v == 1).count() as f64,
        ];
        let dice_exp: f64 = 1.0
            - counts
                .iter()
                .map(|&g| (2.0 * 0.5 * g + DICE_EPS) / (0.5 * n + g + DICE_EPS))
                .sum::<f64>()
                / 2.0;
        let expected = (2.0f64).ln() + dice_exp;
        assert!((tape.scalar(lu) - expected).abs() < 1e-12);
    }

    #[test]
    fn rect_loss_matches_independent_recomputation() {
        let mask = random_mask(8, 8, 3, 5);
        let logits = random_logits(3, 8, 8, 6);
        let tape = Tape::new();
        let v = tape.input3(logits.clone());
        let got = tape.scalar(rect_loss(&tape, v, &mask).unwrap());

        // Re-derive by direct summation.
        let probs = softmax(&logits.view());
        let mut ce = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                ce -= probs[[mask.data()[[y, x]] as usize, y, x]].ln();
            }
        }
        ce /= 64.0;
        let mut dice = 0.0;
        for c in 0..3 {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    let g = f64::from(mask.data()[[y, x]] as usize == c);
                    inter += probs[[c, y, x]] * g;
                    psum += probs[[c, y, x]];
                    gsum += g;
                }
            }
            dice += (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS);
        }
        let expected = ce + 1.0 - dice / 3.0;
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn rect_loss_gradient_matches_fd() {
        let mask = random_mask(8, 8, 3, 7);
        fd_check(3, 8, 8, 8, |tape, v| rect_loss(tape, v, &mask).unwrap());
    }

    #[test]
    fn latent_loss_values_and_gradient() {
        let tape = Tape::new();
        let a = tape.input3(Array3::from_elem((4, 2, 2), 0.3));
        assert_eq!(tape.scalar(latent_loss(&tape, a, a).unwrap()), 0.0);

        let zero = tape.input3(Array3::zeros((4, 2, 2)));
        let ones = tape.input3(Array3::ones((4, 2, 2)));
        assert_eq!(tape.scalar(latent_loss(&tape, zero, ones).unwrap()), 1.0);

        let x = random_logits(4, 2, 2, 9);
        let y = random_logits(4, 2, 2, 10);
        let v = tape.input3(x.clone());
        let w = tape.input3(y.clone());
        let got = tape.scalar(latent_loss(&tape, v, w).unwrap());
        let manual: f64 =
            x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 16.0;
        assert!((got - manual).abs() < 1e-12);

        let b = tape.input3(Array3::zeros((2, 4, 4)));
        assert!(latent_loss(&tape, a, b).is_err());

        let target = random_logits(3, 8, 8, 11);
        fd_check(3, 8, 8, 12, |tape, v| {
            let t = tape.input3(target.clone());
            latent_loss(tape, v, t).unwrap()
        });
    }

    #[test]
    fn semi_seg_loss_threshold_behavior() {
        let y_l = random_mask(8, 8, 2, 13);
        let weights = LossWeights::default();
        let tape = Tape::new();

        // Uniform weak probabilities: nothing reaches the 0.95 gate, so the
        // loss is exactly the supervised part.
        let weak = Array3::from_elem((2, 8, 8), 0.5);
        let labeled = tape.input3(peaked_logits(&y_l, 30.0));
        let strong = tape.input3(random_logits(2, 8, 8, 14));
        let total =
            semi_seg_loss(&tape, labeled, &y_l, strong, &weak.view(), &weights).unwrap();
        let sup_ce = tape.ce_mean(labeled, y_l.to_one_hot(), None);
        let sup_dice = tape.soft_dice(labeled, y_l.to_one_hot(), DICE_EPS);
        let expected = tape.scalar(sup_ce) + tape.scalar(sup_dice);
        assert!((tape.scalar(total) - expected).abs() < 1e-12);
        assert!(tape.scalar(total) < 0.01, "perfect labeled, nothing retained");
    }

    #[test]
    fn semi_seg_loss_single_confident_pixel() {
        // 2×2 case: exactly one pixel is confident; the unsupervised part
        // equals that pixel's CE alone.
        let y_l = random_mask(2, 2, 2, 15);
        let weights = LossWeights::default();
        let mut weak = Array3::from_elem((2, 2, 2), 0.5);
        weak[[0, 0, 1]] = 0.97;
        weak[[1, 0, 1]] = 0.03;
        let strong_logits = random_logits(2, 2, 2, 16);
        let tape = Tape::new();
        let labeled = tape.input3(peaked_logits(&y_l, 30.0));
        let strong = tape.input3(strong_logits.clone());
        let total =
            semi_seg_loss(&tape, labeled, &y_l, strong, &weak.view(), &weights).unwrap();

        let probs = softmax(&strong_logits.view());
        let hand_unsup = -probs[[0, 0, 1]].ln();
        let sup_ce = tape.scalar(tape.ce_mean(labeled, y_l.to_one_hot(), None));
        let sup_dice = tape.scalar(tape.soft_dice(labeled, y_l.to_one_hot(), DICE_EPS));
        assert!((tape.scalar(total) - (sup_ce + sup_dice + hand_unsup)).abs() < 1e-12);
    }

    #[test]
    fn semi_seg_loss_rejects_invalid_probabilities() {
        let y_l = random_mask(4, 4, 2, 17);
        let tape = Tape::new();
        let labeled = tape.input3(random_logits(2, 4, 4, 18));
        let strong = tape.input3(random_logits(2, 4, 4, 19));
        let bad = Array3::from_elem((2, 4, 4), 0.7);
        assert!(semi_seg_loss(
            &tape,
            labeled,
            &y_l,
            strong,
            &bad.view(),
            &LossWeights::default()
        )
        .is_err());
    }

    #[test]
    fn semi_seg_loss_gradient_matches_fd() {
        let y_l = random_mask(8, 8, 3, 20);
        let weak = {
            let logits = random_logits(3, 8, 8, 21);
            softmax(&(logits * 4.0).view())
        };
        let weights = LossWeights { pseudo_threshold: 0.5, ..Default::default() };
        // Gradient w.r.t. the labeled logits...
        let strong_fixed = random_logits(3, 8, 8, 22);
        fd_check(3, 8, 8, 23, |tape, v| {
            let strong = tape.input3(strong_fixed.clone());
            semi_seg_loss(tape, v, &y_l, strong, &weak.view(), &weights).unwrap()
        });
        // ...and w.r.t. the strong logits.
        let labeled_fixed = random_logits(3, 8, 8, 24);
        fd_check(3, 8, 8, 25, |tape, v| {
            let labeled = tape.input3(labeled_fixed.clone());
            semi_seg_loss(tape, labeled, &y_l, v, &weak.view(), &weights).unwrap()
        });
    }

    #[test]
    fn class_relabeling_equivariance() {
        // Permute classes in logits and targets simultaneously; losses are
        // unchanged.
        let perm = [2usize, 0, 1];
        let mask = random_mask(8, 8, 3, 26);
        let logits = random_logits(3, 8, 8, 27);
        let permuted_mask = {
            let data = mask.data().mapv(|v| perm[v as usize] as u8);
            LabelMask::new(data, 3).unwrap()
        };
        let mut permuted_logits = Array3::zeros((3, 8, 8));
        for c in 0..3 {
            permuted_logits
                .index_axis_mut(ndarray::Axis(0), perm[c])
                .assign(&logits.index_axis(ndarray::Axis(0), c));
        }
        let tape = Tape::new();
        let a = tape.input3(logits.clone());
        let b = tape.input3(permuted_logits.clone());
        let ra = tape.scalar(rect_loss(&tape, a, &mask).unwrap());
        let rb = tape.scalar(rect_loss(&tape, b, &permuted_mask).unwrap());
        assert!((ra - rb).abs() < 1e-12);

        let weak = softmax(&random_logits(3, 8, 8, 28).view());
        let mut weak_perm = Array3::zeros((3, 8, 8));
        for c in 0..3 {
            weak_perm
                .index_axis_mut(ndarray::Axis(0), perm[c])
                .assign(&weak.index_axis(ndarray::Axis(0), c));
        }
        let strong = random_logits(3, 8, 8, 29);
        let mut strong_perm = Array3::zeros((3, 8, 8));
        for c in 0..3 {
            strong_perm
                .index_axis_mut(ndarray::Axis(0), perm[c])
                .assign(&strong.index_axis(ndarray::Axis(0), c));
        }
        let w = LossWeights { pseudo_threshold: 0.4, ..Default::default() };
        let sa = {
            let l = tape.input3(logits.clone());
            let s = tape.input3(strong.clone());
            tape.scalar(semi_seg_loss(&tape, l, &mask, s, &weak.view(), &w).unwrap())
        };
        let sb = {
            let l = tape.input3(permuted_logits);
            let s = tape.input3(strong_perm);
            tape.scalar(
                semi_seg_loss(&tape, l, &permuted_mask, s, &weak_perm.view(), &w).unwrap(),
            )
        };
        assert!((sa - sb).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let w = LossWeights::default();
        let zero = total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w).unwrap();
        assert_eq!(zero.total, 0.0);

        let w23 = LossWeights { lambda1: 2.0, lambda2: 3.0, ..Default::default() };
        let b = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, &w23).unwrap();
        assert_eq!(b.total, 8.0);

        let off = LossWeights { lambda1: 0.0, lambda2: 0.0, ..Default::default() };
        let b1 = total_loss(0.5, 0.25, 0.125, 100.0, 7.0, &off).unwrap();
        let b2 = total_loss(0.5, 0.25, 0.125, -0.0, 0.0, &off).unwrap();
        assert_eq!(b1.total, b2.total);

        // Linearity in λ1/λ2: slope equals the respective component.
        let parts = (0.3, 0.7, 0.11, 1.7, 2.9);
        let at = |l1: f64, l2: f64| {
            total_loss(
                parts.0,
                parts.1,
                parts.2,
                parts.3,
                parts.4,
                &LossWeights { lambda1: l1, lambda2: l2, ..Default::default() },
            )
            .unwrap()
            .total
        };
        let slope1 = (at(5.0, 1.0) - at(2.0, 1.0)) / 3.0;
        let slope2 = (at(1.0, 9.0) - at(1.0, 4.0)) / 5.0;
        assert!((slope1 - parts.3).abs() < 1e-9);
        assert!((slope2 - parts.4).abs() < 1e-9);

        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, 0.0, &w).is_err());
        assert!(LossWeights { lambda1: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn breakdown_identity_holds() {
        let w = LossWeights { lambda1: 0.7, lambda2: 1.3, pseudo_threshold: 0.9 };
        let b = total_loss(0.21, 0.11, 0.05, 0.4, 0.6, &w).unwrap();
        let recomposed =
            b.seg_semi + b.rect + b.lat_semi + w.lambda1 * b.lat_u + w.lambda2 * b.lat_l;
        assert!((b.total - recomposed).abs() < 1e-7);
        assert!(b.csv_row(3).starts_with("3,0.21,"));
    }
}
