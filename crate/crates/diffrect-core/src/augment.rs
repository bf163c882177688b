//! Weak (geometric) and strong (photometric) input perturbations.
//!
//! Weak perturbations are exact label-preserving permutations of pixels
//! (mirror + right-angle rotation), so the identical transform applies to
//! images, masks, and colored masks. Strong perturbations touch only the
//! image: Gaussian blur, then contrast, sharpness, and brightness scaling,
//! clipped back to [0,1] at the end.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contract;
use crate::error::Result;
use crate::mask::LabelMask;

/// Sampling ranges for both perturbation families.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub flip_prob: f64,
    pub blur_sigma: (f64, f64),
    pub contrast: (f64, f64),
    pub sharpness: (f64, f64),
    pub brightness: (f64, f64),
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec {
            flip_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            contrast: (0.5, 1.5),
            sharpness: (0.5, 1.5),
            brightness: (0.5, 1.5),
        }
    }
}

/// A sampled weak transform: horizontal mirror first, then clockwise
/// quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeakTransform {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl WeakTransform {
    pub const IDENTITY: WeakTransform = WeakTransform { flip: false, quarter_turns: 0 };
}

/// Sampled strong-perturbation parameters, applied in field order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StrongParams {
    pub sigma: f64,
    pub contrast: f64,
    pub sharpness: f64,
    pub brightness: f64,
}

impl StrongParams {
    pub const IDENTITY: StrongParams =
        StrongParams { sigma: 0.0, contrast: 1.0, sharpness: 1.0, brightness: 1.0 };
}

pub fn sample_weak(spec: &PerturbSpec, rng: &mut ChaCha8Rng) -> WeakTransform {
    let flip = rng.random::<f64>() < spec.flip_prob;
    let quarter_turns = rng.random_range(0..4u8);
    WeakTransform { flip, quarter_turns }
}

pub fn sample_strong(spec: &PerturbSpec, rng: &mut ChaCha8Rng) -> StrongParams {
    StrongParams {
        sigma: rng.random_range(spec.blur_sigma.0..=spec.blur_sigma.1),
        contrast: rng.random_range(spec.contrast.0..=spec.contrast.1),
        sharpness: rng.random_range(spec.sharpness.0..=spec.sharpness.1),
        brightness: rng.random_range(spec.brightness.0..=spec.brightness.1),
    }
}

fn transform_plane<T: Copy + Default>(x: &Array2<T>, t: WeakTransform) -> Array2<T> {
    let (h, w) = x.dim();
    debug_assert_eq!(h, w);
    let mut cur = if t.flip {
        Array2::from_shape_fn((h, w), |(y, xx)| x[[y, w - 1 - xx]])
    } else {
        x.clone()
    };
    for _ in 0..t.quarter_turns % 4 {
        let prev = cur;
        cur = Array2::from_shape_fn((h, w), |(y, xx)| prev[[h - 1 - xx, y]]);
    }
    cur
}

/// Applies a weak transform to a grayscale image.
pub fn apply_weak_image(image: &Array2<f64>, t: WeakTransform) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    contract!(h == w, "weak transforms need square inputs, got {h}x{w}");
    Ok(transform_plane(image, t))
}

/// Applies a weak transform to a label mask.
pub fn apply_weak_mask(mask: &LabelMask, t: WeakTransform) -> Result<LabelMask> {
    let (h, w) = mask.shape();
    contract!(h == w, "weak transforms need square inputs, got {h}x{w}");
    LabelMask::new(transform_plane(mask.data(), t), mask.classes())
}

/// Applies a weak transform channelwise to a `[3,H,W]` colored mask or any
/// channel-first stack.
pub fn apply_weak_planes(x: &Array3<f64>, t: WeakTransform) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    contract!(h == w, "weak transforms need square inputs, got {h}x{w}");
    let mut out = Array3::default((c, h, w));
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ci)
            .assign(&transform_plane(&plane, t));
    }
    Ok(out)
}

/// Samples one weak transform and applies it to the image/mask pair.
pub fn weak_perturb(
    image: &Array2<f64>,
    mask: &LabelMask,
    spec: &PerturbSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, LabelMask, WeakTransform)> {
    let t = sample_weak(spec, rng);
    Ok((apply_weak_image(image, t)?, apply_weak_mask(mask, t)?, t))
}

/// Separable Gaussian blur, kernel truncated at 3σ, mirrored borders. The
/// kernel is normalized, so constant images pass through unchanged; σ ≤ 0 is
/// the identity.
pub fn gaussian_blur(image: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let (h, w) = image.dim();
    let mirror = |idx: i64, n: usize| -> usize {
        let n = n as i64;
        let m = if idx < 0 { -idx - 1 } else if idx >= n { 2 * n - 1 - idx } else { idx };
        m.clamp(0, n - 1) as usize
    };
    let mut rows = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = mirror(x as i64 + ki as i64 - radius, w);
                acc += k * image[[y, sx]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = mirror(y as i64 + ki as i64 - radius, h);
                acc += k * rows[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Applies fixed strong-perturbation parameters: blur, contrast about the
/// global mean, unsharp-style sharpness, brightness scaling, then a final
/// clip to [0,1].
pub fn strong_apply(image: &Array2<f64>, p: StrongParams) -> Result<Array2<f64>> {
    contract!(
        image.iter().all(|v| (0.0..=1.0).contains(v)),
        "strong perturbation expects an image in [0,1]"
    );
    let mut x = gaussian_blur(image, p.sigma);
    if p.contrast != 1.0 {
        let mean = x.mean().unwrap_or(0.0);
        x.mapv_inplace(|v| mean + p.contrast * (v - mean));
    }
    if p.sharpness != 1.0 {
        let smooth = gaussian_blur(&x, 1.0);
        let detail = &x - &smooth;
        x = smooth + detail * p.sharpness;
    }
    if p.brightness != 1.0 {
        x.mapv_inplace(|v| v * p.brightness);
    }
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(x)
}

/// Samples strong-perturbation parameters and applies them.
pub fn strong_perturb(
    image: &Array2<f64>,
    spec: &PerturbSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    strong_apply(image, sample_strong(spec, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, Stream};
    use crate::scs::{build_color_set, encode};

    fn test_image(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = derive_rng(seed, 0, Stream::Data);
        Array2::from_shape_fn((n, n), |_| rng.random::<f64>())
    }

    fn test_mask(n: usize, classes: usize, seed: u64) -> LabelMask {
        let mut rng = derive_rng(seed, 1, Stream::Data);
        let data = Array2::from_shape_fn((n, n), |_| rng.random_range(0..classes) as u8);
        LabelMask::new(data, classes).unwrap()
    }

    #[test]
    fn identity_transform_is_identity() {
        let img = test_image(8, 1);
        let mask = test_mask(8, 3, 1);
        let out = apply_weak_image(&img, WeakTransform::IDENTITY).unwrap();
        assert_eq!(out, img);
        let m = apply_weak_mask(&mask, WeakTransform::IDENTITY).unwrap();
        assert_eq!(m.data(), mask.data());
    }

    #[test]
    fn rng_can_force_identity() {
        let img = test_image(8, 2);
        let mask = test_mask(8, 3, 2);
        let spec = PerturbSpec::default();
        let mut found = false;
        for seed in 0..200 {
            let mut rng = derive_rng(seed, 0, Stream::WeakAug);
            let (i2, m2, t) = weak_perturb(&img, &mask, &spec, &mut rng).unwrap();
            if t == WeakTransform::IDENTITY {
                assert_eq!(i2, img);
                assert_eq!(m2.data(), mask.data());
                found = true;
                break;
            }
        }
        assert!(found, "no identity draw in 200 seeds");
    }

    #[test]
    fn half_turn_is_an_involution() {
        let img = test_image(9, 3);
        let t = WeakTransform { flip: false, quarter_turns: 2 };
        let twice =
            apply_weak_image(&apply_weak_image(&img, t).unwrap(), t).unwrap();
        assert_eq!(twice, img);

        let f = WeakTransform { flip: true, quarter_turns: 0 };
        let mirrored =
            apply_weak_image(&apply_weak_image(&img, f).unwrap(), f).unwrap();
        assert_eq!(mirrored, img);
    }

    #[test]
    fn four_quarter_turns_restore() {
        let img = test_image(6, 4);
        let t = WeakTransform { flip: false, quarter_turns: 1 };
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = apply_weak_image(&cur, t).unwrap();
        }
        assert_eq!(cur, img);
    }

    #[test]
    fn class_histogram_preserved() {
        let mask = test_mask(8, 4, 5);
        let count = |m: &LabelMask, c: u8| m.data().iter().filter(|&&v| v == c).count();
        for flip in [false, true] {
            for q in 0..4 {
                let t = WeakTransform { flip, quarter_turns: q };
                let out = apply_weak_mask(&mask, t).unwrap();
                for c in 0..4 {
                    assert_eq!(count(&mask, c), count(&out, c));
                }
            }
        }
    }

    #[test]
    fn rejects_non_square() {
        let img = Array2::zeros((4, 6));
        assert!(apply_weak_image(&img, WeakTransform::IDENTITY).is_err());
    }

    #[test]
    fn weak_commutes_with_color_encoding() {
        let mask = test_mask(8, 4, 6);
        let cs = build_color_set(4).unwrap();
        for flip in [false, true] {
            for q in 0..4 {
                let t = WeakTransform { flip, quarter_turns: q };
                let enc_then_t = {
                    let rgb = encode(&mask, &cs).unwrap();
                    let planes = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
                        f64::from(rgb[[y, x, c]])
                    });
                    apply_weak_planes(&planes, t).unwrap()
                };
                let t_then_enc = {
                    let m2 = apply_weak_mask(&mask, t).unwrap();
                    let rgb = encode(&m2, &cs).unwrap();
                    Array3::from_shape_fn((3, 8, 8), |(c, y, x)| f64::from(rgb[[y, x, c]]))
                };
                assert_eq!(enc_then_t, t_then_enc);
            }
        }
    }

    #[test]
    fn strong_identity_parameters_are_exact() {
        let img = test_image(12, 7);
        let out = strong_apply(&img, StrongParams::IDENTITY).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn strong_on_constant_images() {
        let c = 0.42;
        let img = Array2::from_elem((16, 16), c);
        // Blur, contrast, and sharpness all fix constants; brightness
        // scales them.
        let p = StrongParams { sigma: 1.3, contrast: 0.8, sharpness: 1.2, brightness: 1.25 };
        let out = strong_apply(&img, p).unwrap();
        for v in out.iter() {
            assert!((v - c * 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn strong_output_stays_in_unit_range() {
        let spec = PerturbSpec::default();
        let img = test_image(16, 8);
        for i in 0..10_000 {
            let mut rng = derive_rng(9, i, Stream::StrongAug);
            let out = strong_perturb(&img, &spec, &mut rng).unwrap();
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn strong_deterministic_given_seed() {
        let img = test_image(16, 10);
        let spec = PerturbSpec::default();
        let a = strong_perturb(&img, &spec, &mut derive_rng(3, 7, Stream::StrongAug)).unwrap();
        let b = strong_perturb(&img, &spec, &mut derive_rng(3, 7, Stream::StrongAug)).unwrap();
        assert_eq!(a, b);
        let c = strong_perturb(&img, &spec, &mut derive_rng(3, 8, Stream::StrongAug)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blur_shrinks_variation_but_keeps_shape() {
        let img = test_image(16, 11);
        let out = gaussian_blur(&img, 1.5);
        assert_eq!(out.dim(), img.dim());
        let var = |x: &Array2<f64>| {
            let m = x.mean().unwrap();
            x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
        };
        assert!(var(&out) < var(&img));
        assert!(strong_apply(&(img * 2.0), StrongParams::IDENTITY).is_err());
    }
}
