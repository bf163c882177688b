//! Label masks and conversions between index, one-hot, and logit forms.

use ndarray::{Array2, Array3, ArrayView3};

use crate::contract;
use crate::error::Result;

/// A dense segmentation mask: per-pixel class indices in `0..classes`.
///
/// Class `0` is background by convention throughout the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    data: Array2<u8>,
    classes: usize,
}

impl LabelMask {
    /// Wraps an index array, checking every value lies in `0..classes`.
    pub fn new(data: Array2<u8>, classes: usize) -> Result<Self> {
        contract!(classes >= 2, "a mask needs at least 2 classes, got {classes}");
        contract!(classes <= 256, "at most 256 classes fit in u8, got {classes}");
        if let Some(&bad) = data.iter().find(|&&v| (v as usize) >= classes) {
            contract!(false, "mask value {bad} out of range for {classes} classes");
        }
        Ok(Self { data, classes })
    }

    /// An all-background mask.
    pub fn zeros(height: usize, width: usize, classes: usize) -> Result<Self> {
        Self::new(Array2::zeros((height, width)), classes)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[0], s[1])
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    /// One-hot encoding with channel-first layout `[classes, H, W]`.
    pub fn to_one_hot(&self) -> Array3<f64> {
        let (h, w) = self.shape();
        let mut out = Array3::zeros((self.classes, h, w));
        for ((i, j), &c) in self.data.indexed_iter() {
            out[[c as usize, i, j]] = 1.0;
        }
        out
    }

    /// Per-pixel argmax over the channel axis of `[classes, H, W]` scores.
    ///
    /// Ties resolve to the lowest class index, which keeps the operation
    /// deterministic and biased toward background on exactly-flat scores.
    pub fn from_scores(scores: ArrayView3<'_, f64>) -> Result<Self> {
        let (c, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
        contract!(c >= 2 && c <= 256, "scores need 2..=256 channels, got {c}");
        let mut data = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut best = 0usize;
                let mut best_v = scores[[0, i, j]];
                for k in 1..c {
                    let v = scores[[k, i, j]];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                data[[i, j]] = best as u8;
            }
        }
        Self::new(data, c)
    }

    /// Fraction of pixels where the two masks agree.
    pub fn agreement(&self, other: &LabelMask) -> f64 {
        assert_eq!(self.shape(), other.shape());
        let same = self
            .data
            .iter()
            .zip(other.data.iter())
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_hot_round_trip() {
        let m = LabelMask::new(array![[0, 1], [2, 1]], 3).unwrap();
        let oh = m.to_one_hot();
        assert_eq!(oh[[0, 0, 0]], 1.0);
        assert_eq!(oh[[1, 0, 1]], 1.0);
        assert_eq!(oh[[2, 1, 0]], 1.0);
        assert_eq!(oh.sum(), 4.0);
        let back = LabelMask::from_scores(oh.view()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let scores = array![[[1.0, 0.0]], [[1.0, 2.0]], [[0.5, 2.0]]];
        let m = LabelMask::from_scores(scores.view()).unwrap();
        assert_eq!(m.data()[[0, 0]], 0);
        assert_eq!(m.data()[[0, 1]], 1);
    }

    #[test]
    fn out_of_range_value_rejected() {
        assert!(LabelMask::new(array![[0, 3]], 3).is_err());
        assert!(LabelMask::new(array![[0, 2]], 3).is_ok());
    }
}
