//! Choosing one reference image per input frame.
//!
//! Candidates are ranked by pose similarity (centroid-aligned keypoint
//! distance with a penalty for keypoints seen in only one image) and by the
//! number of mutually matching image patches.

use crate::error::{Error, Result};
use crate::model::{KeypointSet, NUM_KEYPOINTS};
use crate::raster::Image;

pub const LAMBDA_MISS: f64 = 0.2;
pub const MATCH_WEIGHT: f64 = 0.5;
pub const GRID_ROWS: usize = 16;
pub const GRID_COLS: usize = 8;
pub const MATCH_THRESHOLD: f64 = 0.8;

/// Mean distance between jointly visible keypoints after moving each set's
/// jointly visible centroid to the origin, plus `lambda_miss` per keypoint
/// visible in exactly one set. `+inf` when no keypoint is visible in both.
pub fn keypoint_distance(a: &KeypointSet, b: &KeypointSet, lambda_miss: f64) -> f64 {
    let (dist, missing) = distance_parts(a, b, lambda_miss);
    dist + missing
}

fn distance_parts(a: &KeypointSet, b: &KeypointSet, lambda_miss: f64) -> (f64, f64) {
    let joint: Vec<usize> = (0..NUM_KEYPOINTS).filter(|&k| a.both_visible(b, k)).collect();
    let one_sided = (0..NUM_KEYPOINTS).filter(|&k| a.visible[k] != b.visible[k]).count();
    let missing = lambda_miss * one_sided as f64;
    if joint.is_empty() {
        return (f64::INFINITY, missing);
    }
    let centroid = |s: &KeypointSet| {
        let n = joint.len() as f64;
        let sx: f64 = joint.iter().map(|&k| s.points[k][0]).sum();
        let sy: f64 = joint.iter().map(|&k| s.points[k][1]).sum();
        [sx / n, sy / n]
    };
    let (ca, cb) = (centroid(a), centroid(b));
    let total: f64 = joint
        .iter()
        .map(|&k| {
            let dx = (a.points[k][0] - ca[0]) - (b.points[k][0] - cb[0]);
            let dy = (a.points[k][1] - ca[1]) - (b.points[k][1] - cb[1]);
            dx.hypot(dy)
        })
        .sum();
    (total / joint.len() as f64, missing)
}

/// Per-cell normalized intensity patches on a fixed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptors {
    /// `None` for constant cells.
    pub cells: Vec<Option<Vec<f64>>>,
}

impl Descriptors {
    pub fn compute(img: &Image) -> Result<Self> {
        if img.height % GRID_ROWS != 0 || img.width % GRID_COLS != 0 || img.height == 0 || img.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image does not split into a {GRID_ROWS}x{GRID_COLS} grid",
                img.height, img.width
            )));
        }
        let (ch, cw) = (img.height / GRID_ROWS, img.width / GRID_COLS);
        let inv_c = 1.0 / img.channels as f64;
        let mut cells = Vec::with_capacity(GRID_ROWS * GRID_COLS);
        for gy in 0..GRID_ROWS {
            for gx in 0..GRID_COLS {
                let mut patch = Vec::with_capacity(ch * cw);
                for y in gy * ch..(gy + 1) * ch {
                    for x in gx * cw..(gx + 1) * cw {
                        let v: f64 = (0..img.channels).map(|c| img.get(c, y, x) as f64).sum();
                        patch.push(v * inv_c);
                    }
                }
                let mean = patch.iter().sum::<f64>() / patch.len() as f64;
                patch.iter_mut().for_each(|v| *v -= mean);
                let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
                cells.push(if norm > 1e-6 {
                    patch.iter_mut().for_each(|v| *v /= norm);
                    Some(patch)
                } else {
                    None
                });
            }
        }
        Ok(Self { cells })
    }

    pub fn non_degenerate(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the most similar descriptor in `pool`; lowest index wins ties.
fn nearest(d: &[f64], pool: &Descriptors) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, c) in pool.cells.iter().enumerate() {
        if let Some(c) = c {
            let s = dot(d, c);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
    }
    best
}

/// Mutual nearest-neighbour cell pairs with cosine similarity above the
/// threshold.
pub fn count_descriptor_matches(a: &Descriptors, b: &Descriptors) -> usize {
    a.cells
        .iter()
        .enumerate()
        .filter(|(i, d)| {
            let Some(d) = d else { return false };
            let Some((j, s)) = nearest(d, b) else { return false };
            let back = b.cells[j].as_ref().and_then(|e| nearest(e, a));
            s > MATCH_THRESHOLD && back.map(|(k, _)| k) == Some(*i)
        })
        .count()
}

pub fn count_matches(a: &Image, b: &Image) -> Result<usize> {
    if !a.same_geometry(b) {
        return Err(Error::InvalidArgument("count_matches needs images of the same size".into()));
    }
    Ok(count_descriptor_matches(&Descriptors::compute(a)?, &Descriptors::compute(b)?))
}

/// A selectable reference with precomputed descriptors.
#[derive(Clone, Debug)]
pub struct ReferenceEntry {
    pub keypoints: KeypointSet,
    pub descriptors: Descriptors,
}

impl ReferenceEntry {
    pub fn new(image: &Image, keypoints: KeypointSet) -> Result<Self> {
        Ok(Self { keypoints, descriptors: Descriptors::compute(image)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionScore {
    pub kp_distance: f64,
    pub missing_penalty: f64,
    pub match_count: usize,
    pub cell_count: usize,
}

impl SelectionScore {
    pub fn compute(input_kp: &KeypointSet, input_desc: &Descriptors, r: &ReferenceEntry) -> Self {
        let (kp_distance, missing_penalty) = distance_parts(input_kp, &r.keypoints, LAMBDA_MISS);
        Self {
            kp_distance,
            missing_penalty,
            match_count: count_descriptor_matches(input_desc, &r.descriptors),
            cell_count: input_desc.cells.len(),
        }
    }

    /// Higher is better.
    pub fn value(&self) -> f64 {
        -(self.kp_distance + self.missing_penalty) + MATCH_WEIGHT * self.match_count as f64 / self.cell_count as f64
    }
}

/// Index of the best-scoring reference (first one on ties) and all scores.
pub fn select_reference(
    input_kp: &KeypointSet,
    input_desc: &Descriptors,
    refs: &[ReferenceEntry],
) -> Result<(usize, Vec<SelectionScore>)> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("empty reference set".into()));
    }
    let scores: Vec<SelectionScore> = refs.iter().map(|r| SelectionScore::compute(input_kp, input_desc, r)).collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.value() > scores[best].value() {
            best = i;
        }
    }
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(seed: u64) -> KeypointSet {
        let mut s = KeypointSet::default();
        for k in 0..NUM_KEYPOINTS {
            let t = (k as f64 + seed as f64 * 0.37).sin();
            s.points[k] = [0.5 * t, 0.8 * (k as f64 * 0.3).cos()];
            s.visible[k] = true;
        }
        s
    }

    #[test]
    fn distance_basics() {
        let a = pose(1);
        assert_eq!(keypoint_distance(&a, &a, LAMBDA_MISS), 0.0);
        let mut shifted = a.clone();
        shifted.points.iter_mut().for_each(|p| *p = [p[0] + 0.3, p[1] - 0.1]);
        assert!(keypoint_distance(&a, &shifted, LAMBDA_MISS) < 1e-12);
        let mut hidden = a.clone();
        hidden.visible[7] = false;
        hidden.normalize_sentinels();
        assert!((keypoint_distance(&a, &hidden, LAMBDA_MISS) - 0.2).abs() < 1e-12);
        assert_eq!(keypoint_distance(&a, &KeypointSet::default(), LAMBDA_MISS), f64::INFINITY);
    }

    #[test]
    fn self_match_counts_textured_cells() {
        use rand::Rng;
        let mut rng = crate::seed::rng(1, &[]);
        let mut img = Image::filled(128, 64, &[0.5, 0.5, 0.5]);
        for y in 0..64 {
            for x in 0..32 {
                img.set(0, y, x, rng.random_range(0.0..1.0));
            }
        }
        let d = Descriptors::compute(&img).unwrap();
        assert_eq!(d.non_degenerate(), 8 * 4);
        assert_eq!(count_matches(&img, &img).unwrap(), 32);
    }

    #[test]
    fn empty_reference_set_is_an_error() {
        let img = Image::new(3, 128, 64);
        let d = Descriptors::compute(&img).unwrap();
        assert!(select_reference(&pose(0), &d, &[]).is_err());
    }
}
