//! Semantic Coloring Scheme: a deterministic bijection between class indices
//! and well-separated RGB colors.
//!
//! Class 0 is always black; classes `1..C` take evenly spaced hues at full
//! saturation and value. `encode` paints a mask, `decode` recovers the mask
//! from any real-valued image by nearest color, which is what lets denoised
//! (off-lattice) reconstructions map back to labels.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::contract;
use crate::error::Result;
use crate::mask::LabelMask;

/// RGB-encoded mask, `[H, W, 3]` with channel values in `0..=255`.
pub type SemanticLabel = Array3<u8>;

/// Ordered palette of one RGB color per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorSet {
    colors: Vec<[u8; 3]>,
}

impl ColorSet {
    pub fn classes(&self) -> usize {
        self.colors.len()
    }

    pub fn color(&self, class: usize) -> [u8; 3] {
        self.colors[class]
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    /// Smallest Euclidean RGB distance between any two palette entries.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.colors.len() {
            for j in i + 1..self.colors.len() {
                min = min.min(rgb_distance_sq(self.colors[i], to_f64(self.colors[j])).sqrt());
            }
        }
        min
    }
}

fn to_f64(c: [u8; 3]) -> [f64; 3] {
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

fn rgb_distance_sq(a: [u8; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i]).powi(2)).sum()
}

/// Builds the palette for `classes` classes: black background plus hues
/// `(k-1)·360°/(classes-1)` at full saturation/value for `k = 1..classes`.
pub fn build_color_set(classes: usize) -> Result<ColorSet> {
    contract!(
        (2..=64).contains(&classes),
        "color set supports 2..=64 classes, got {classes}"
    );
    let mut colors = vec![[0u8; 3]];
    for k in 1..classes {
        let hue = (k - 1) as f64 * 360.0 / (classes - 1) as f64;
        colors.push(hue_to_rgb(hue));
    }
    Ok(ColorSet { colors })
}

/// HSV→RGB at S = V = 1 for hue in degrees `[0, 360)`.
fn hue_to_rgb(hue: f64) -> [u8; 3] {
    let x = 1.0 - ((hue / 60.0) % 2.0 - 1.0).abs();
    let (r, g, b) = match (hue / 60.0) as usize % 6 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [quantize(r), quantize(g), quantize(b)]
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

/// Paints a mask with the palette; output is `[H, W, 3]`.
pub fn encode(y: &LabelMask, cs: &ColorSet) -> Result<SemanticLabel> {
    contract!(
        y.classes() == cs.classes(),
        "mask has {} classes but color set has {}",
        y.classes(),
        cs.classes()
    );
    let (h, w) = y.shape();
    let mut out = Array3::zeros((h, w, 3));
    for ((i, j), &c) in y.data().indexed_iter() {
        let rgb = cs.color(c as usize);
        for k in 0..3 {
            out[[i, j, k]] = rgb[k];
        }
    }
    Ok(out)
}

/// Colored mask as network input: `[3, H, W]` with channels mapped from
/// `0..=255` to `[-1, 1]`.
pub fn encode_signed(y: &LabelMask, cs: &ColorSet) -> Result<Array3<f64>> {
    let rgb = encode(y, cs)?;
    let (h, w) = y.shape();
    let mut out = Array3::zeros((3, h, w));
    for ((i, j, k), &v) in rgb.indexed_iter() {
        out[[k, i, j]] = v as f64 / 255.0 * 2.0 - 1.0;
    }
    Ok(out)
}

/// Recovers a mask from an arbitrary real-valued `[H, W, 3]` image in the
/// `0..=255` scale: each pixel takes the nearest palette color, ties going to
/// the lowest class index.
pub fn decode(m: ArrayView3<'_, f64>, cs: &ColorSet) -> Result<LabelMask> {
    contract!(
        m.shape()[2] == 3,
        "expected [H, W, 3] image, got last dim {}",
        m.shape()[2]
    );
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let mut data = ndarray::Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let px = [m[[i, j, 0]], m[[i, j, 1]], m[[i, j, 2]]];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, &color) in cs.colors.iter().enumerate() {
                let d = rgb_distance_sq(color, px);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            data[[i, j]] = best as u8;
        }
    }
    LabelMask::new(data, cs.classes())
}

/// `decode` for exact 8-bit images (e.g. freshly encoded labels).
pub fn decode_u8(m: &SemanticLabel, cs: &ColorSet) -> Result<LabelMask> {
    decode(m.mapv(|v| v as f64).view(), cs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_palettes_match_hand_conversion() {
        assert_eq!(build_color_set(2).unwrap().colors(), &[[0, 0, 0], [255, 0, 0]]);
        assert_eq!(
            build_color_set(4).unwrap().colors(),
            &[[0, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255]]
        );
    }

    #[test]
    fn class_count_bounds_enforced() {
        assert!(build_color_set(1).is_err());
        assert!(build_color_set(65).is_err());
        assert!(build_color_set(64).is_ok());
    }

    #[test]
    fn encode_paints_single_pixel() {
        let cs = build_color_set(2).unwrap();
        let mut data = Array2::zeros((3, 3));
        data[[1, 2]] = 1;
        let m = encode(&LabelMask::new(data, 2).unwrap(), &cs).unwrap();
        assert_eq!(m[[1, 2, 0]], 255);
        assert_eq!(m[[1, 2, 1]], 0);
        assert_eq!(m.map(|&v| v as u32).sum(), 255);
    }

    #[test]
    fn decode_survives_noise_below_half_margin() {
        let cs = build_color_set(5).unwrap();
        let margin = cs.min_pairwise_distance();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..5u8));
        let y = LabelMask::new(data, 5).unwrap();
        let clean = encode(&y, &cs).unwrap().mapv(|v| v as f64);
        // Perturb each channel by less than margin/(2·√3) so the total RGB
        // displacement stays under half the minimum inter-color distance.
        let bound = margin / 2.0 / 3.0f64.sqrt() * 0.99;
        let noisy = clean.mapv(|v| v + rng.random_range(-bound..bound));
        assert_eq!(decode(noisy.view(), &cs).unwrap(), y);
    }

    #[test]
    fn equidistant_pixel_takes_lower_class() {
        let cs = build_color_set(4).unwrap();
        // (128, 128, 0) is equidistant between red and green (and farther
        // from black and blue at distances 181 vs 221).
        let px = Array3::from_shape_fn((1, 1, 3), |(_, _, k)| if k < 2 { 128.0 } else { 0.0 });
        let y = decode(px.view(), &cs).unwrap();
        assert_eq!(y.data()[[0, 0]], 1);
    }

    #[test]
    fn min_distance_shrinks_broadly_with_class_count() {
        // The exact sequence is not monotone: hue sets that land on corners
        // of the RGB hue hexagon (e.g. C=7, spacing 60°) have locally larger
        // minimum distances than their neighbors. What the construction does
        // guarantee is the 4.25·spacing upper envelope, so compare against
        // that instead of the previous C.
        for c in 2..=64 {
            let d = build_color_set(c).unwrap().min_pairwise_distance();
            assert!(d <= 255.0 + 1e-9);
            if c >= 8 {
                let envelope = 255.0 / 60.0 * (360.0 / (c - 1) as f64);
                assert!(d <= envelope + 1e-9, "C={c}: {d} > {envelope}");
            }
        }
    }

    proptest! {
        #[test]
        fn palette_spread_bound_holds(classes in 2usize..=64) {
            let cs = build_color_set(classes).unwrap();
            let min = cs.min_pairwise_distance();
            prop_assert!(min > 0.0);
            prop_assert!(min >= 128.0 * 3.0f64.sqrt() / classes as f64);
        }

        #[test]
        fn encode_decode_round_trip(classes in 2usize..=16, seed in 0u64..1000) {
            let cs = build_color_set(classes).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..classes as u8));
            let y = LabelMask::new(data, classes).unwrap();
            let m = encode(&y, &cs).unwrap();
            prop_assert_eq!(decode_u8(&m, &cs).unwrap(), y);
        }

        #[test]
        fn encode_is_spatially_equivariant(seed in 0u64..1000) {
            let cs = build_color_set(4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((5, 7), |_| rng.random_range(0..4u8));
            let y = LabelMask::new(data.clone(), 4).unwrap();
            let m = encode(&y, &cs).unwrap();
            // Transpose as a representative spatial permutation.
            let yt = LabelMask::new(data.t().to_owned(), 4).unwrap();
            let mt = encode(&yt, &cs).unwrap();
            prop_assert_eq!(mt, m.permuted_axes([1, 0, 2]).to_owned());
        }
    }
}
