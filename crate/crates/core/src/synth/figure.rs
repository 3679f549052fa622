//! Articulated capsule figure: subject appearance, poses and rasterization.
//!
//! Figure geometry is expressed in units of the image height. The body is a
//! planar skeleton (x right, y down, z toward the camera at view 0) that is
//! turned about the vertical axis through the pelvis for each view.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::keypoints::to_normalized;
use crate::model::{KeypointSet, NUM_KEYPOINTS};
use crate::raster::Image;
use crate::seed;

/// Fill colour of every pixel outside the figure.
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

/// Subsamples per pixel along each axis; odd so one sits on the centre.
const SUPERSAMPLE: usize = 3;

/// Depth slack when testing keypoints against the depth buffer.
const VISIBILITY_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Stripes,
    Checker,
    Plain,
}

/// Procedural texture of one garment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Garment {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub pattern: Pattern,
    /// Cycles along the part axis.
    pub frequency: f64,
    /// Cycles around the part.
    pub around: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub seed: u64,
    pub torso: f64,
    pub neck: f64,
    pub head_radius: f64,
    pub shoulder_offset: f64,
    pub hip_offset: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
    pub torso_radius: f64,
    pub arm_radius: f64,
    pub leg_radius: f64,
    pub shirt: Garment,
    pub pants: Garment,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    /// Chest emblem, visible from the front only.
    pub emblem: [f64; 3],
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// A saturated colour whose brightness stays clear of the grey background.
fn clothing_color(rng: &mut impl Rng) -> [f64; 3] {
    let v = if rng.random_bool(0.5) { rng.random_range(0.12..0.35) } else { rng.random_range(0.7..0.98) };
    hsv(rng.random(), rng.random_range(0.45..0.95), v)
}

fn garment(rng: &mut impl Rng) -> Garment {
    let base = clothing_color(rng);
    let mut accent = clothing_color(rng);
    // Keep the pattern visible.
    if base.iter().zip(&accent).map(|(a, b)| (a - b).abs()).sum::<f64>() < 0.6 {
        accent = base.map(|v| 1.0 - v);
    }
    let pattern = match rng.random_range(0..5) {
        0 | 1 => Pattern::Stripes,
        2 | 3 => Pattern::Checker,
        _ => Pattern::Plain,
    };
    Garment {
        base,
        accent,
        pattern,
        frequency: rng.random_range(2.0..5.0),
        around: rng.random_range(1.0..3.0f64).round(),
        phase: rng.random_range(0.0..1.0),
    }
}

impl SubjectSpec {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[0x5b1ec7]);
        let mut jitter = |v: f64, amount: f64| v * rng.random_range(1.0 - amount..1.0 + amount);
        let torso = jitter(0.27, 0.06);
        let neck = jitter(0.02, 0.1);
        let head_radius = jitter(0.06, 0.08);
        let shoulder_offset = jitter(0.05, 0.08);
        let hip_offset = jitter(0.045, 0.08);
        let upper_arm = jitter(0.09, 0.04);
        let forearm = jitter(0.08, 0.04);
        let thigh = jitter(0.19, 0.05);
        let shin = jitter(0.18, 0.05);
        let torso_radius = jitter(0.07, 0.1);
        let arm_radius = jitter(0.026, 0.1);
        let leg_radius = jitter(0.035, 0.1);
        let shirt = garment(&mut rng);
        let pants = garment(&mut rng);
        let skin = hsv(rng.random_range(0.02..0.1), rng.random_range(0.25..0.6), rng.random_range(0.35..0.95));
        let hair = hsv(rng.random_range(0.0..0.15), rng.random_range(0.2..0.8), rng.random_range(0.05..0.35));
        let emblem = clothing_color(&mut rng);
        Self {
            seed,
            torso,
            neck,
            head_radius,
            shoulder_offset,
            hip_offset,
            upper_arm,
            forearm,
            thigh,
            shin,
            torso_radius,
            arm_radius,
            leg_radius,
            shirt,
            pants,
            skin,
            hair,
            emblem,
        }
    }

    fn validate(&self) -> Result<()> {
        let lengths = [
            self.torso,
            self.head_radius,
            self.upper_arm,
            self.forearm,
            self.thigh,
            self.shin,
            self.torso_radius,
            self.arm_radius,
            self.leg_radius,
        ];
        if lengths.iter().any(|&l| !(l > 1e-3) || l > 0.5) {
            return Err(Error::InvalidArgument(format!("degenerate limb dimensions in subject {}", self.seed)));
        }
        Ok(())
    }
}

/// Joint angles in radians. Limb angles are measured from hanging straight
/// down, positive away from the body; `[right, left]` in each pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// Pelvis offset from its rest position, in image-height units.
    pub root: [f64; 2],
    pub lean: f64,
    pub head_tilt: f64,
    pub shoulder: [f64; 2],
    pub elbow: [f64; 2],
    pub hip: [f64; 2],
    pub knee: [f64; 2],
}

/// `(min, max)` for each angle group.
pub const LEAN_LIMIT: (f64, f64) = (-0.25, 0.25);
pub const HEAD_LIMIT: (f64, f64) = (-0.35, 0.35);
pub const SHOULDER_LIMIT: (f64, f64) = (-0.3, 1.75);
pub const ELBOW_LIMIT: (f64, f64) = (0.0, 2.0);
pub const HIP_LIMIT: (f64, f64) = (-0.15, 0.6);
pub const KNEE_LIMIT: (f64, f64) = (0.0, 1.2);
pub const ROOT_LIMIT: f64 = 0.05;

impl PoseParams {
    pub fn t_pose() -> Self {
        Self::canonical(FRAC_PI_2, 0.08)
    }

    fn canonical(shoulder: f64, hip: f64) -> Self {
        Self {
            root: [0.0, 0.0],
            lean: 0.0,
            head_tilt: 0.0,
            shoulder: [shoulder; 2],
            elbow: [0.0; 2],
            hip: [hip; 2],
            knee: [0.0; 2],
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let mut r = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        Self {
            root: [r((-0.6 * ROOT_LIMIT, 0.6 * ROOT_LIMIT)), r((-0.3 * ROOT_LIMIT, 0.3 * ROOT_LIMIT))],
            lean: r((-0.15, 0.15)),
            head_tilt: r((-0.25, 0.25)),
            shoulder: [r((0.0, 1.7)), r((0.0, 1.7))],
            elbow: [r((0.0, 1.6)), r((0.0, 1.6))],
            hip: [r((-0.1, 0.45)), r((-0.1, 0.45))],
            knee: [r((0.0, 0.9)), r((0.0, 0.9))],
        }
    }

    /// Straight-line blend toward `other`.
    pub fn lerp(&self, other: &Self, t: f64) -> Self {
        let l = |a: f64, b: f64| a + (b - a) * t;
        let l2 = |a: [f64; 2], b: [f64; 2]| [l(a[0], b[0]), l(a[1], b[1])];
        Self {
            root: l2(self.root, other.root),
            lean: l(self.lean, other.lean),
            head_tilt: l(self.head_tilt, other.head_tilt),
            shoulder: l2(self.shoulder, other.shoulder),
            elbow: l2(self.elbow, other.elbow),
            hip: l2(self.hip, other.hip),
            knee: l2(self.knee, other.knee),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        let ok = within(self.lean, LEAN_LIMIT)
            && within(self.head_tilt, HEAD_LIMIT)
            && self.root.iter().all(|&v| within(v, (-ROOT_LIMIT, ROOT_LIMIT)))
            && self.shoulder.iter().all(|&v| within(v, SHOULDER_LIMIT))
            && self.elbow.iter().all(|&v| within(v, ELBOW_LIMIT))
            && self.hip.iter().all(|&v| within(v, HIP_LIMIT))
            && self.knee.iter().all(|&v| within(v, KNEE_LIMIT));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("pose outside joint limits: {self:?}")))
        }
    }
}

/// Names and poses of the reference set, in generation order.
pub fn canonical_poses() -> Vec<(&'static str, PoseParams)> {
    vec![
        ("tpose", PoseParams::t_pose()),
        ("apose", PoseParams::canonical(0.65, 0.1)),
        ("rest", PoseParams::canonical(0.12, 0.04)),
        ("star", PoseParams::canonical(1.1, 0.35)),
    ]
}

type P3 = [f64; 3];

#[derive(Clone, Copy, PartialEq)]
enum Surface {
    Shirt,
    Pants,
    Skin,
    Head,
}

struct Capsule {
    a: usize,
    b: usize,
    radius: f64,
    surface: Surface,
    /// Cross-section squash seen edge-on (torso is wider than deep).
    depth_ratio: f64,
}

/// Index of the head centre appended after the keypoints.
const HEAD_CENTER: usize = NUM_KEYPOINTS;

/// Body joints in BODY_25 order followed by the head centre, in figure
/// units (z toward the camera at view 0), plus the radius of the part each
/// keypoint sits on.
fn skeleton(s: &SubjectSpec, p: &PoseParams) -> ([P3; NUM_KEYPOINTS + 1], [f64; NUM_KEYPOINTS]) {
    let pelvis = [p.root[0], 0.53 + p.root[1]];
    let up = [p.lean.sin(), -p.lean.cos()];
    let side = [p.lean.cos(), p.lean.sin()];
    let add = |a: [f64; 2], d: [f64; 2], k: f64| [a[0] + d[0] * k, a[1] + d[1] * k];
    // Direction at angle `a` from "down", rotated into the torso frame;
    // `out` = +1 swings toward +x (the figure's left, image right).
    let limb = |a: f64, out: f64| {
        let local = [out * a.sin(), a.cos()];
        [local[0] * side[0] - local[1] * up[0], local[0] * side[1] - local[1] * up[1]]
    };
    let neck = add(pelvis, up, s.torso);
    let head_dir = [
        up[0] * p.head_tilt.cos() - up[1] * p.head_tilt.sin(),
        up[0] * p.head_tilt.sin() + up[1] * p.head_tilt.cos(),
    ];
    let head = add(neck, head_dir, s.neck + s.head_radius);
    let head_side = [-head_dir[1], head_dir[0]];

    let mut k = [[0.0; 3]; NUM_KEYPOINTS + 1];
    let mut radius = [0.0; NUM_KEYPOINTS];
    let put = |k: &mut [P3; NUM_KEYPOINTS + 1], i: usize, xy: [f64; 2], z: f64| k[i] = [xy[0], xy[1], z];
    put(&mut k, HEAD_CENTER, head, 0.0);

    let hr = s.head_radius;
    put(&mut k, 0, add(head, head_dir, -0.1 * hr), 0.95 * hr);
    put(&mut k, 1, neck, 0.0);
    radius[1] = s.torso_radius;
    put(&mut k, 8, pelvis, 0.0);
    radius[8] = s.torso_radius;
    for (side_idx, out) in [(0usize, -1.0f64), (1, 1.0)] {
        let [sh, el, wr, hip, kn, an] = if side_idx == 0 { [2, 3, 4, 9, 10, 11] } else { [5, 6, 7, 12, 13, 14] };
        let shoulder = add(add(neck, side, out * s.shoulder_offset), up, -0.015);
        let a = p.shoulder[side_idx];
        let elbow = add(shoulder, limb(a, out), s.upper_arm);
        let wrist = add(elbow, limb(a + p.elbow[side_idx], out), s.forearm);
        let hip_pt = add(pelvis, side, out * s.hip_offset);
        let l = p.hip[side_idx];
        let knee = add(hip_pt, limb(l, out), s.thigh);
        let ankle = add(knee, limb(l - p.knee[side_idx], out), s.shin);
        for (i, pt, r) in [
            (sh, shoulder, s.arm_radius),
            (el, elbow, s.arm_radius),
            (wr, wrist, s.arm_radius),
            (hip, hip_pt, s.leg_radius),
            (kn, knee, s.leg_radius),
            (an, ankle, s.leg_radius),
        ] {
            put(&mut k, i, pt, 0.0);
            radius[i] = r;
        }
        // Feet stay within the ankle cap so they always project onto it.
        let lr = s.leg_radius;
        let (big, small, heel) = if side_idx == 0 { (22, 23, 24) } else { (19, 20, 21) };
        put(&mut k, big, [ankle[0] - out * 0.25 * lr, ankle[1] + 0.45 * lr], 0.6 * lr);
        put(&mut k, small, [ankle[0] + out * 0.3 * lr, ankle[1] + 0.45 * lr], 0.5 * lr);
        put(&mut k, heel, [ankle[0], ankle[1] + 0.5 * lr], -0.6 * lr);
        for i in [big, small, heel] {
            radius[i] = 0.5 * lr;
        }
        let (eye, ear) = if side_idx == 0 { (15, 17) } else { (16, 18) };
        put(&mut k, eye, add(add(head, head_side, out * 0.38 * hr), head_dir, 0.15 * hr), 0.85 * hr);
        put(&mut k, ear, add(head, head_side, out * 0.92 * hr), 0.0);
    }
    (k, radius)
}

fn capsules(s: &SubjectSpec) -> Vec<Capsule> {
    let c = |a, b, radius, surface, depth_ratio| Capsule { a, b, radius, surface, depth_ratio };
    // Later entries win depth ties.
    vec![
        c(8, 1, s.torso_radius, Surface::Shirt, 0.6),
        c(HEAD_CENTER, HEAD_CENTER, s.head_radius, Surface::Head, 1.0),
        c(9, 10, s.leg_radius, Surface::Pants, 1.0),
        c(12, 13, s.leg_radius, Surface::Pants, 1.0),
        c(10, 11, s.leg_radius * 0.92, Surface::Pants, 1.0),
        c(13, 14, s.leg_radius * 0.92, Surface::Pants, 1.0),
        c(2, 3, s.arm_radius, Surface::Shirt, 1.0),
        c(5, 6, s.arm_radius, Surface::Shirt, 1.0),
        c(3, 4, s.arm_radius * 0.9, Surface::Skin, 1.0),
        c(6, 7, s.arm_radius * 0.9, Surface::Skin, 1.0),
    ]
}

fn garment_color(g: &Garment, t: f64, around: f64) -> [f64; 3] {
    let wave = |v: f64| (2.0 * PI * v).sin();
    let accent = match g.pattern {
        Pattern::Stripes => wave(g.frequency * t + g.phase) > 0.3,
        Pattern::Checker => wave(g.frequency * t + g.phase) * (g.around * around + g.phase).sin() > 0.0,
        Pattern::Plain => false,
    };
    if accent {
        g.accent
    } else {
        g.base
    }
}

/// Renders `(I_gt, M_gt, keypoints)` for one view.
pub fn render_figure(
    subject: &SubjectSpec,
    pose: &PoseParams,
    view: usize,
    n_views: usize,
    height: usize,
    width: usize,
) -> Result<(Image, Image, KeypointSet)> {
    subject.validate()?;
    pose.validate()?;
    if n_views == 0 || view >= n_views || height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!("bad view {view}/{n_views} or size {height}x{width}")));
    }
    let theta = 2.0 * PI * view as f64 / n_views as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let (joints, radius) = skeleton(subject, pose);
    let axis_x = pose.root[0];
    // Rasterize on a finer grid; subsample (SS*y + SS/2, SS*x + SS/2) sits
    // on the centre of output pixel (y, x).
    let (hh, ww) = (height * SUPERSAMPLE, width * SUPERSAMPLE);
    let scale = hh as f64;
    let cx = (ww as f64 - 1.0) / 2.0;
    // (pixel x, pixel y, depth) of a figure point.
    let project = |p: P3| {
        let x = p[0] - axis_x;
        let xs = x * ct + p[2] * st;
        let depth = -x * st + p[2] * ct;
        (cx + (axis_x + xs) * scale, p[1] * scale, depth)
    };
    let pts: Vec<(f64, f64, f64)> = joints.iter().map(|&p| project(p)).collect();

    let mut fine = Image::filled(hh, ww, &BACKGROUND);
    let mut covered = vec![false; hh * ww];
    let mut zbuf = vec![f64::NEG_INFINITY; hh * ww];
    let caps = capsules(subject);
    for cap in &caps {
        let (ax, ay, ad) = pts[cap.a];
        let (bx, by, bd) = pts[cap.b];
        let squash = (ct * ct + cap.depth_ratio * cap.depth_ratio * st * st).sqrt();
        let r = cap.radius * squash * scale;
        let (x0, x1) = ((ax.min(bx) - r).floor().max(0.0) as usize, ((ax.max(bx) + r).ceil() as usize).min(ww - 1));
        let (y0, y1) = ((ay.min(by) - r).floor().max(0.0) as usize, ((ay.max(by) + r).ceil() as usize).min(hh - 1));
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let len = len2.sqrt();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 - ax, y as f64 - ay);
                let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (ex, ey) = (px - t * dx, py - t * dy);
                let d2 = ex * ex + ey * ey;
                if d2 > r * r {
                    continue;
                }
                // Signed offset across the axis, in [-1, 1].
                let across = if len > 0.0 { (ex * dy - ey * dx) / (len * r) } else { ex / r };
                let across = across.clamp(-1.0, 1.0);
                let bulge = (1.0 - d2 / (r * r)).max(0.0).sqrt();
                let depth = ad + t * (bd - ad) + bulge * cap.radius * squash;
                let idx = y * ww + x;
                if depth < zbuf[idx] {
                    continue;
                }
                zbuf[idx] = depth;
                covered[idx] = true;
                // Angle around the part, fixed to the body so texture turns
                // with the view.
                let around = across.asin() + theta;
                let color = match cap.surface {
                    Surface::Shirt => {
                        let emblem = cap.a == 8 && t > 0.5 && t < 0.75 && around.cos() > 0.75;
                        if emblem {
                            subject.emblem
                        } else {
                            garment_color(&subject.shirt, t, around)
                        }
                    }
                    Surface::Pants => garment_color(&subject.pants, t, around),
                    Surface::Skin => subject.skin,
                    Surface::Head => {
                        let v = ey / r;
                        if v < -0.35 || around.cos() < -0.1 {
                            subject.hair
                        } else {
                            subject.skin
                        }
                    }
                };
                let shade = 0.72 + 0.28 * bulge;
                for c in 0..3 {
                    fine.set(c, y, x, (color[c] * shade).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }

    // The mask is point-sampled at pixel centres so it stays binary and
    // background pixels stay pure; colour inside the figure is the box
    // average of all subsamples.
    let ss = SUPERSAMPLE;
    let centre = |y: usize, x: usize| (ss * y + ss / 2) * ww + ss * x + ss / 2;
    let mut gt = Image::filled(height, width, &BACKGROUND);
    let mut mask = Image::new(1, height, width);
    let inv = 1.0 / (ss * ss) as f32;
    for y in 0..height {
        for x in 0..width {
            if !covered[centre(y, x)] {
                continue;
            }
            mask.data[y * width + x] = 1.0;
            for c in 0..3 {
                let mut acc = 0.0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        acc += fine.get(c, ss * y + sy, ss * x + sx);
                    }
                }
                gt.set(c, y, x, acc * inv);
            }
        }
    }

    let mut kp = KeypointSet::default();
    for k in 0..NUM_KEYPOINTS {
        let (fx, fy, depth) = pts[k];
        let to_out = |v: f64| (v - (ss / 2) as f64) / ss as f64;
        let (px, py) = (to_out(fx), to_out(fy));
        let (xi, yi) = (px.round(), py.round());
        if xi < 0.0 || yi < 0.0 || xi >= width as f64 || yi >= height as f64 {
            continue;
        }
        let idx = centre(yi as usize, xi as usize);
        if !covered[idx] {
            continue;
        }
        let own_surface = depth + radius[k];
        if own_surface + VISIBILITY_TOLERANCE >= zbuf[idx] {
            kp.points[k] = [to_normalized(px, width), to_normalized(py, height)];
            kp.visible[k] = true;
        }
    }
    Ok((gt, mask, kp))
}
