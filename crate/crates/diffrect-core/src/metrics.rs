//! Segmentation quality metrics (Dice, Jaccard, HD95, ASD) and the
//! calibration-guidance scalar τ.
//!
//! Surface distances run on boundary point sets: a foreground pixel is a
//! boundary pixel when it touches the image edge or has a background
//! 4-neighbor. Distances are exact Euclidean via a two-pass squared distance
//! transform, so results are oracle-checkable against brute-force all-pairs
//! enumeration.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contract;
use crate::error::{Error, Result};
use crate::mask::LabelMask;

/// How the guidance scalar τ is computed from a pair of masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Dice,
    Jaccard,
    Fixed(f64),
    Random,
    Both,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(GuidanceMode::Dice),
            "jaccard" => Ok(GuidanceMode::Jaccard),
            "fixed" => Ok(GuidanceMode::Fixed(0.5)),
            "random" => Ok(GuidanceMode::Random),
            "both" => Ok(GuidanceMode::Both),
            other => {
                if let Some(v) = other.strip_prefix("fixed:") {
                    let v: f64 = v
                        .parse()
                        .map_err(|_| Error::Contract(format!("bad fixed guidance value {v:?}")))?;
                    contract!((0.0..=1.0).contains(&v), "fixed guidance must be in [0,1], got {v}");
                    Ok(GuidanceMode::Fixed(v))
                } else {
                    Err(Error::Contract(format!(
                        "unknown guidance mode {other:?} (dice|jaccard|fixed[:v]|random|both)"
                    )))
                }
            }
        }
    }
}

fn check_shapes(a: &LabelMask, b: &LabelMask) -> Result<()> {
    contract!(
        a.shape() == b.shape() && a.classes() == b.classes(),
        "mask shapes differ: {:?}/{} vs {:?}/{}",
        a.shape(),
        a.classes(),
        b.shape(),
        b.classes()
    );
    Ok(())
}

/// Per-class Dice coefficients, index 0 = background. A class absent from
/// both masks scores 1.0.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<Vec<f64>> {
    check_shapes(a, b)?;
    let (inter, counts) = overlap_counts(a, b);
    Ok((0..a.classes())
        .map(|c| {
            let denom = counts[c].0 + counts[c].1;
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect())
}

/// Per-class Jaccard indices; empty-union classes score 1.0.
pub fn jaccard(a: &LabelMask, b: &LabelMask) -> Result<Vec<f64>> {
    check_shapes(a, b)?;
    let (inter, counts) = overlap_counts(a, b);
    Ok((0..a.classes())
        .map(|c| {
            let union = counts[c].0 + counts[c].1 - inter[c];
            if union == 0 {
                1.0
            } else {
                inter[c] as f64 / union as f64
            }
        })
        .collect())
}

fn overlap_counts(a: &LabelMask, b: &LabelMask) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut inter = vec![0usize; a.classes()];
    let mut counts = vec![(0usize, 0usize); a.classes()];
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        counts[x as usize].0 += 1;
        counts[y as usize].1 += 1;
        if x == y {
            inter[x as usize] += 1;
        }
    }
    (inter, counts)
}

/// (HD95, ASD) between the foreground unions of two masks, or `None` when
/// either foreground is empty (the caller substitutes its own penalty).
pub fn surface_distances(a: &LabelMask, b: &LabelMask) -> Result<Option<(f64, f64)>> {
    check_shapes(a, b)?;
    let fg_a = a.data().mapv(|v| v != 0);
    let fg_b = b.data().mapv(|v| v != 0);
    Ok(surface_distances_binary(&fg_a, &fg_b))
}

/// (HD95, ASD) for one class treated as binary foreground.
pub fn surface_distances_class(a: &LabelMask, b: &LabelMask, class: u8) -> Result<Option<(f64, f64)>> {
    check_shapes(a, b)?;
    contract!(
        (class as usize) < a.classes(),
        "class {class} out of range for {} classes",
        a.classes()
    );
    let fg_a = a.data().mapv(|v| v == class);
    let fg_b = b.data().mapv(|v| v == class);
    Ok(surface_distances_binary(&fg_a, &fg_b))
}

fn surface_distances_binary(fg_a: &Array2<bool>, fg_b: &Array2<bool>) -> Option<(f64, f64)> {
    if !fg_a.iter().any(|&v| v) || !fg_b.iter().any(|&v| v) {
        return None;
    }
    let ba = boundary(fg_a);
    let bb = boundary(fg_b);
    let dist_to_bb = distance_sq_transform(&bb);
    let dist_to_ba = distance_sq_transform(&ba);
    let mut dists = Vec::new();
    for ((i, j), &on) in ba.indexed_iter() {
        if on {
            dists.push(dist_to_bb[[i, j]].sqrt());
        }
    }
    for ((i, j), &on) in bb.indexed_iter() {
        if on {
            dists.push(dist_to_ba[[i, j]].sqrt());
        }
    }
    dists.sort_by(|x, y| x.total_cmp(y));
    let hd95 = percentile_sorted(&dists, 95.0);
    let asd = dists.iter().sum::<f64>() / dists.len() as f64;
    Some((hd95, asd))
}

/// Boundary pixels: foreground with a background 4-neighbor or on the edge.
pub fn boundary(fg: &Array2<bool>) -> Array2<bool> {
    let (h, w) = fg.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        if !fg[[i, j]] {
            return false;
        }
        if i == 0 || j == 0 || i == h - 1 || j == w - 1 {
            return true;
        }
        !(fg[[i - 1, j]] && fg[[i + 1, j]] && fg[[i, j - 1]] && fg[[i, j + 1]])
    })
}

/// Exact squared Euclidean distance to the nearest `true` pixel, ∞ where the
/// set is empty. Two passes of the 1D lower-envelope-of-parabolas transform.
pub fn distance_sq_transform(set: &Array2<bool>) -> Array2<f64> {
    let (h, w) = set.dim();
    let mut g = Array2::from_shape_fn((h, w), |ix| if set[ix] { 0.0 } else { f64::INFINITY });
    let mut scratch = Scratch::new(h.max(w));
    let mut line = vec![0.0; h.max(w)];
    for i in 0..h {
        for j in 0..w {
            line[j] = g[[i, j]];
        }
        scratch.transform(&line[..w]);
        for j in 0..w {
            g[[i, j]] = scratch.d[j];
        }
    }
    for j in 0..w {
        for i in 0..h {
            line[i] = g[[i, j]];
        }
        scratch.transform(&line[..h]);
        for i in 0..h {
            g[[i, j]] = scratch.d[i];
        }
    }
    g
}

struct Scratch {
    d: Vec<f64>,
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            d: vec![0.0; n],
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    /// 1D squared distance transform of sampled function `f` (∞ allowed).
    fn transform(&mut self, f: &[f64]) {
        let n = f.len();
        let mut k = 0usize;
        let mut any = false;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            if !any {
                any = true;
                self.v[0] = q;
                self.z[0] = f64::NEG_INFINITY;
                self.z[1] = f64::INFINITY;
                continue;
            }
            loop {
                let r = self.v[k];
                let s = ((f[q] + (q * q) as f64) - (f[r] + (r * r) as f64))
                    / (2.0 * (q as f64 - r as f64));
                // s ≤ z[0] = −∞ never holds, so k cannot underflow.
                if s <= self.z[k] {
                    k -= 1;
                } else {
                    k += 1;
                    self.v[k] = q;
                    self.z[k] = s;
                    self.z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        if !any {
            self.d[..n].fill(f64::INFINITY);
            return;
        }
        let mut k = 0usize;
        for q in 0..n {
            while self.z[k + 1] < q as f64 {
                k += 1;
            }
            let r = self.v[k];
            self.d[q] = ((q as f64) - (r as f64)).powi(2) + f[r];
        }
    }
}

/// Percentile with linear interpolation over an ascending-sorted slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn foreground_mean(per_class: &[f64]) -> f64 {
    per_class[1..].iter().sum::<f64>() / (per_class.len() - 1) as f64
}

/// τ between a higher-quality and lower-quality mask. Dice/Jaccard modes
/// average foreground classes only; Both adds the two and so lives in [0,2].
pub fn calibration_guidance(
    y_hi: &LabelMask,
    y_lo: &LabelMask,
    mode: GuidanceMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    check_shapes(y_hi, y_lo)?;
    Ok(match mode {
        GuidanceMode::Dice => foreground_mean(&dice(y_hi, y_lo)?),
        GuidanceMode::Jaccard => foreground_mean(&jaccard(y_hi, y_lo)?),
        GuidanceMode::Fixed(v) => v,
        GuidanceMode::Random => rng.random(),
        GuidanceMode::Both => {
            foreground_mean(&dice(y_hi, y_lo)?) + foreground_mean(&jaccard(y_hi, y_lo)?)
        }
    })
}

/// All four metrics for one foreground class of one mask pair. `hd95`/`asd`
/// hold the substituted penalty when the class is empty on either side.
#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

/// Per-pair metric summary: foreground-class means plus the per-class rows.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub dice_mean: f64,
    pub jaccard_mean: f64,
    pub hd95: f64,
    pub asd: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// Compares prediction `a` against reference `b`. Undefined surface
    /// distances (empty class) are recorded as `penalty`, conventionally the
    /// image diagonal.
    pub fn compute(a: &LabelMask, b: &LabelMask, penalty: f64) -> Result<Self> {
        check_shapes(a, b)?;
        let d = dice(a, b)?;
        let j = jaccard(a, b)?;
        let mut per_class = Vec::new();
        for c in 1..a.classes() {
            let (hd95, asd) = match surface_distances_class(a, b, c as u8)? {
                Some(pair) => pair,
                None => {
                    // Both empty means both agree the class is absent; that
                    // is a perfect surface match, not a failure.
                    let a_empty = !a.data().iter().any(|&v| v as usize == c);
                    let b_empty = !b.data().iter().any(|&v| v as usize == c);
                    if a_empty && b_empty {
                        (0.0, 0.0)
                    } else {
                        (penalty, penalty)
                    }
                }
            };
            per_class.push(ClassMetrics { class: c, dice: d[c], jaccard: j[c], hd95, asd });
        }
        let n = per_class.len() as f64;
        Ok(MetricsReport {
            dice_mean: per_class.iter().map(|m| m.dice).sum::<f64>() / n,
            jaccard_mean: per_class.iter().map(|m| m.jaccard).sum::<f64>() / n,
            hd95: per_class.iter().map(|m| m.hd95).sum::<f64>() / n,
            asd: per_class.iter().map(|m| m.asd).sum::<f64>() / n,
            per_class,
        })
    }

    pub const CSV_HEADER: &'static str = "case_id,class,dice,jaccard,hd95,asd";

    /// One CSV row per foreground class, matching `CSV_HEADER`.
    pub fn csv_rows(&self, case_id: &str) -> String {
        let mut out = String::new();
        for m in &self.per_class {
            out.push_str(&format!(
                "{case_id},{},{},{},{},{}\n",
                m.class, m.dice, m.jaccard, m.hd95, m.asd
            ));
        }
        out
    }
}
