//! Body keypoints, Gaussian heatmaps and the part-based coarse warp field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const NUM_KEYPOINTS: usize = 25;

/// 25 body keypoints in normalized `[-1, 1]` image coordinates, x first.
///
/// Invisible entries hold `(0, 0)` and are ignored by every consumer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: [[f64; 2]; NUM_KEYPOINTS],
    pub visible: [bool; NUM_KEYPOINTS],
}

impl Default for KeypointSet {
    fn default() -> Self {
        Self { points: [[0.0; 2]; NUM_KEYPOINTS], visible: [false; NUM_KEYPOINTS] }
    }
}

impl KeypointSet {
    pub fn new(points: [[f64; 2]; NUM_KEYPOINTS], visible: [bool; NUM_KEYPOINTS]) -> Self {
        let mut set = Self { points, visible };
        set.normalize_sentinels();
        set
    }

    /// Resets coordinates of invisible points to the sentinel.
    pub fn normalize_sentinels(&mut self) {
        for k in 0..NUM_KEYPOINTS {
            if !self.visible[k] {
                self.points[k] = [0.0, 0.0];
            }
        }
    }

    pub fn both_visible(&self, other: &KeypointSet, k: usize) -> bool {
        self.visible[k] && other.visible[k]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// `[[x, y, visible], ...]`, the on-disk sidecar layout.
    pub fn to_triples(&self) -> Vec<(f64, f64, bool)> {
        (0..NUM_KEYPOINTS).map(|k| (self.points[k][0], self.points[k][1], self.visible[k])).collect()
    }

    pub fn from_triples(triples: &[(f64, f64, bool)]) -> Result<Self> {
        if triples.len() != NUM_KEYPOINTS {
            return Err(Error::InvalidArgument(format!(
                "expected {NUM_KEYPOINTS} keypoints, got {}",
                triples.len()
            )));
        }
        let mut set = Self::default();
        for (k, &(x, y, v)) in triples.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::InvalidArgument(format!("keypoint {k} is not finite")));
            }
            set.points[k] = [x, y];
            set.visible[k] = v;
        }
        set.normalize_sentinels();
        Ok(set)
    }
}

/// Normalized coordinate to continuous pixel index (pixel centres at
/// integers, align-corners false).
pub fn to_pixel(u: f64, size: usize) -> f64 {
    ((u + 1.0) * size as f64 - 1.0) / 2.0
}

/// Inverse of [`to_pixel`].
pub fn to_normalized(p: f64, size: usize) -> f64 {
    (2.0 * p + 1.0) / size as f64 - 1.0
}

/// `(N, 25, h, w)` stack of per-keypoint Gaussian bumps.
#[derive(Clone, Debug)]
pub struct Heatmap<T: Scalar> {
    pub tensor: Tensor<T>,
}

/// Heatmaps for a batch of keypoint sets. `sigma` is in pixels of the
/// `h x w` grid.
pub fn keypoints_to_heatmaps<T: Scalar>(sets: &[KeypointSet], h: usize, w: usize, sigma: f64) -> Result<Heatmap<T>> {
    if h == 0 || w == 0 || sets.is_empty() {
        return Err(Error::InvalidArgument("empty heatmap request".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let plane = h * w;
    let mut data = vec![T::zero(); sets.len() * NUM_KEYPOINTS * plane];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (n, set) in sets.iter().enumerate() {
        for k in 0..NUM_KEYPOINTS {
            if !set.visible[k] {
                continue;
            }
            let (px, py) = (to_pixel(set.points[k][0], w), to_pixel(set.points[k][1], h));
            let out = &mut data[(n * NUM_KEYPOINTS + k) * plane..][..plane];
            for y in 0..h {
                let dy = y as f64 - py;
                for x in 0..w {
                    let dx = x as f64 - px;
                    out[y * w + x] = T::of((-(dx * dx + dy * dy) * inv).exp());
                }
            }
        }
    }
    Ok(Heatmap { tensor: Tensor::from_vec(Shape::new(sets.len(), NUM_KEYPOINTS, h, w), data)? })
}

/// Heatmap-weighted keypoint translations.
///
/// Each output pixel reads from the reference at `x + W_c(x)` where
/// `W_c(x) = sum_k w_k(x) d_k / (sum_k w_k(x) + w_bg)` and
/// `d_k = p_r,k - p_i,k`. Channels of `weights` provide `w_k`; keypoints not
/// visible in both sets get zero weight. The background term carries zero
/// displacement, so the field fades to identity away from the body.
pub fn coarse_field<T: Scalar>(
    input: &[KeypointSet],
    reference: &[KeypointSet],
    weights: &Heatmap<T>,
    w_bg: f64,
) -> Result<Tensor<T>> {
    let s = weights.tensor.shape();
    if input.len() != s.n() || reference.len() != s.n() || s.c() != NUM_KEYPOINTS {
        return Err(Error::shape(
            "coarse_field",
            format!("{} input / {} reference sets for heatmap {s}", input.len(), reference.len()),
        ));
    }
    if !(w_bg > 0.0) {
        return Err(Error::InvalidArgument(format!("background weight must be positive, got {w_bg}")));
    }
    let plane = s.hw();
    let hm = weights.tensor.data();
    let mut out = vec![T::zero(); s.n() * 2 * plane];
    for n in 0..s.n() {
        let (pi, pr) = (&input[n], &reference[n]);
        let mut num_x = vec![0.0f64; plane];
        let mut num_y = vec![0.0f64; plane];
        let mut den = vec![w_bg; plane];
        for k in 0..NUM_KEYPOINTS {
            if !pi.both_visible(pr, k) {
                continue;
            }
            let dx = pr.points[k][0] - pi.points[k][0];
            let dy = pr.points[k][1] - pi.points[k][1];
            let ch = &hm[(n * NUM_KEYPOINTS + k) * plane..][..plane];
            for i in 0..plane {
                let wk = ch[i].to_f64_lossy();
                num_x[i] += wk * dx;
                num_y[i] += wk * dy;
                den[i] += wk;
            }
        }
        let o = &mut out[n * 2 * plane..(n + 1) * 2 * plane];
        for i in 0..plane {
            o[i] = T::of(num_x[i] / den[i]);
            o[plane + i] = T::of(num_y[i] / den[i]);
        }
    }
    Tensor::from_vec(s.with_c(2), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point(x: f64, y: f64) -> KeypointSet {
        let mut s = KeypointSet::default();
        s.points[3] = [x, y];
        s.visible[3] = true;
        s
    }

    #[test]
    fn pixel_mapping_round_trips() {
        for p in [0.0, 3.5, 15.0] {
            assert!((to_pixel(to_normalized(p, 16), 16) - p).abs() < 1e-12);
        }
        assert_eq!(to_pixel(-1.0, 16), -0.5);
    }

    #[test]
    fn heatmap_peak_and_invisible_channels() {
        let (h, w) = (32, 16);
        let kp = one_point(to_normalized(5.0, w), to_normalized(9.0, h));
        let hm = keypoints_to_heatmaps::<f64>(&[kp], h, w, 1.6).unwrap();
        let d = hm.tensor.data();
        assert_eq!(d[3 * h * w + 9 * w + 5], 1.0);
        assert!(d[..3 * h * w].iter().all(|&v| v == 0.0));
        let empty = keypoints_to_heatmaps::<f32>(&[KeypointSet::default()], h, w, 1.6).unwrap();
        assert!(empty.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn field_is_zero_for_identical_poses() {
        let kp = one_point(0.1, -0.2);
        let hm = keypoints_to_heatmaps::<f32>(std::slice::from_ref(&kp), 32, 16, 1.6).unwrap();
        let f = coarse_field(std::slice::from_ref(&kp), std::slice::from_ref(&kp), &hm, 0.1).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invisible_keypoints_give_zero_field() {
        let mut a = one_point(0.1, 0.1);
        let b = one_point(0.3, 0.1);
        let hm = keypoints_to_heatmaps::<f32>(std::slice::from_ref(&a), 32, 16, 1.6).unwrap();
        a.visible[3] = false;
        let f = coarse_field(&[a], &[b], &hm, 0.1).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sidecar_triples_validate_length() {
        assert!(KeypointSet::from_triples(&[(0.0, 0.0, true)]).is_err());
        let kp = one_point(0.25, 0.5);
        assert_eq!(KeypointSet::from_triples(&kp.to_triples()).unwrap(), kp);
    }
}
