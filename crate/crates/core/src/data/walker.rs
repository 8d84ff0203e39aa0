//! A 2D articulated walker rendered as binary silhouettes.
//!
//! Body parts are capsules (segments with a radius) plus a disc for the
//! head. Lengths are fractions of a body scale equal to 0.85 of the frame
//! height. Gait is a sinusoidal hip swing with knee flexion during the swing
//! phase and a counter-swinging near arm; one full cycle takes
//! `FRAME_RATE / cadence` frames.

use std::f64::consts::{PI, TAU};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Condition, SilhouetteSequence};
use crate::error::{GaitError, Result};

/// Frames per second of the synthetic camera.
pub const FRAME_RATE: f64 = 10.0;

/// Documented physical ranges `[lo, hi]` of each identity factor.
pub mod ranges {
    pub const THIGH: (f64, f64) = (0.20, 0.27);
    pub const SHIN: (f64, f64) = (0.20, 0.27);
    pub const UPPER_ARM: (f64, f64) = (0.13, 0.19);
    pub const FOREARM: (f64, f64) = (0.11, 0.17);
    pub const TORSO: (f64, f64) = (0.26, 0.34);
    /// Head radius.
    pub const HEAD: (f64, f64) = (0.05, 0.075);
    /// Gait cycles per second.
    pub const CADENCE: (f64, f64) = (0.8, 1.25);
    /// Peak hip swing in radians.
    pub const STRIDE: (f64, f64) = (0.25, 0.6);
    /// Lag of the arm swing behind the opposite leg, in radians.
    pub const PHASE: (f64, f64) = (0.0, 0.8);
}

/// Per-clip horizontal position jitter in pixels.
pub const CLIP_SHIFT: f64 = 2.5;
/// Per-clip shrink of the whole body (distance to the camera).
pub const CLIP_SCALE: f64 = 0.04;

/// Two identities are distinct when any factor differs by at least this
/// fraction of its range.
pub const SEPARATION: f64 = 0.02;

/// Body shape and gait style of one simulated person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub thigh: f64,
    pub shin: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub torso: f64,
    pub head: f64,
    pub cadence: f64,
    pub stride: f64,
    pub phase: f64,
}

impl IdentitySpec {
    fn factors(&self) -> [(f64, (f64, f64)); 9] {
        use ranges::*;
        [
            (self.thigh, THIGH),
            (self.shin, SHIN),
            (self.upper_arm, UPPER_ARM),
            (self.forearm, FOREARM),
            (self.torso, TORSO),
            (self.head, HEAD),
            (self.cadence, CADENCE),
            (self.stride, STRIDE),
            (self.phase, PHASE),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        const NAMES: [&str; 9] = ["thigh", "shin", "upper_arm", "forearm", "torso", "head", "cadence", "stride", "phase"];
        for (name, (v, (lo, hi))) in NAMES.iter().zip(self.factors()) {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(GaitError::invalid(format!("identity factor `{name}` = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Whether some factor differs from `other` by at least the separation.
    pub fn distinct_from(&self, other: &IdentitySpec) -> bool {
        self.factors()
            .iter()
            .zip(other.factors())
            .any(|((a, (lo, hi)), (b, _))| (a - b).abs() >= SEPARATION * (hi - lo))
    }
}

/// Draws every factor uniformly from its range.
pub fn generate_identity<R: Rng>(rng: &mut R) -> IdentitySpec {
    use ranges::*;
    let mut u = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
    IdentitySpec {
        thigh: u(THIGH),
        shin: u(SHIN),
        upper_arm: u(UPPER_ARM),
        forearm: u(FOREARM),
        torso: u(TORSO),
        head: u(HEAD),
        cadence: u(CADENCE),
        stride: u(STRIDE),
        phase: u(PHASE),
    }
}

/// Camera and capture conditions of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Degrees in `[0, 180]`; 90 is a side view.
    pub view: u32,
    /// Per-pixel flip probability in `[0, 0.2]`.
    pub noise: f64,
    /// Blanked rows as fractions `[start, end)` of the height; less than 40%.
    pub occlusion: Option<(f64, f64)>,
    /// Extra capsule radius in pixels, as from loose clothing.
    pub dilation: f64,
    /// Probability that a frame repeats its predecessor.
    pub frame_drop: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec { view: 90, noise: 0.0, occlusion: None, dilation: 0.0, frame_drop: 0.0 }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.view > 180 {
            return Err(GaitError::invalid(format!("view {} outside [0, 180]", self.view)));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return Err(GaitError::invalid(format!("noise rate {} outside [0, 0.2]", self.noise)));
        }
        if let Some((a, b)) = self.occlusion {
            if !(0.0 <= a && a < b && b <= 1.0 && b - a < 0.4) {
                return Err(GaitError::invalid(format!("occlusion band [{a}, {b}) must lie in [0, 1] and cover < 40%")));
            }
        }
        if !(0.0..=3.0).contains(&self.dilation) {
            return Err(GaitError::invalid(format!("dilation {} outside [0, 3]", self.dilation)));
        }
        if !(0.0..1.0).contains(&self.frame_drop) {
            return Err(GaitError::invalid(format!("frame drop {} outside [0, 1)", self.frame_drop)));
        }
        Ok(())
    }

    /// Occluded row range for a frame height.
    pub fn occluded_rows(&self, h: usize) -> std::ops::Range<usize> {
        match self.occlusion {
            Some((a, b)) => (a * h as f64).floor() as usize..((b * h as f64).floor() as usize).min(h),
            None => 0..0,
        }
    }
}

#[derive(Clone, Copy)]
struct P(f64, f64);

struct Capsule {
    a: P,
    b: P,
    r: f64,
}

impl Capsule {
    fn covers(&self, p: P) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (cx, cy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        cx * cx + cy * cy <= self.r * self.r
    }
}

/// Variation between clips of the same person.
struct ClipJitter {
    phase0: f64,
    cadence: f64,
    stride: f64,
    shift: f64,
    scale: f64,
}

fn pose(id: &IdentitySpec, dom: &DomainSpec, j: &ClipJitter, t: f64, h: usize, w: usize) -> Vec<Capsule> {
    let s = 0.85 * h as f64 * j.scale;
    let view = (dom.view as f64).to_radians();
    let dir = if dom.view > 90 { -1.0 } else { 1.0 };
    let proj = view.sin().abs();
    let depth = view.cos();
    let phi = j.phase0 + TAU * j.cadence * t;
    let (thigh, shin) = (id.thigh * s, id.shin * s);
    let hip_half = 0.05 * s;
    let leg_r = 0.045 * s + dom.dilation;

    // legs relative to the hip
    let mut legs = Vec::new();
    let mut lowest: f64 = 0.0;
    for k in 0..2 {
        let ph = phi + k as f64 * PI;
        let theta = j.stride * ph.sin();
        let flex = 1.1 * j.stride * ph.cos().max(0.0);
        let lat = (k as f64 - 0.5) * 2.0 * hip_half * depth;
        let knee = P(dir * proj * thigh * theta.sin() + lat, thigh * theta.cos());
        let ankle = P(knee.0 + dir * proj * shin * (theta - flex).sin(), knee.1 + shin * (theta - flex).cos());
        let toe = P(ankle.0 + dir * proj * 0.06 * s, ankle.1);
        lowest = lowest.max(ankle.1);
        legs.push((P(lat, 0.0), knee, ankle, toe));
    }
    let ground = h as f64 - 0.04 * h as f64;
    let hip = P(w as f64 / 2.0 + j.shift, ground - lowest - leg_r);
    let at = |p: P| P(hip.0 + p.0, hip.1 + p.1);

    let mut parts = Vec::new();
    for (root, knee, ankle, toe) in legs {
        parts.push(Capsule { a: at(root), b: at(knee), r: leg_r });
        parts.push(Capsule { a: at(knee), b: at(ankle), r: leg_r });
        parts.push(Capsule { a: at(ankle), b: at(toe), r: 0.6 * leg_r });
    }
    let lean: f64 = 0.06;
    let torso = id.torso * s;
    let neck = P(hip.0 + dir * proj * torso * lean.sin(), hip.1 - torso * lean.cos());
    parts.push(Capsule { a: hip, b: neck, r: 0.075 * s * (1.0 + 0.8 * depth.abs()) + dom.dilation });

    let head_r = id.head * s + 0.5 * dom.dilation;
    let head = P(neck.0 + dir * proj * 0.3 * head_r, neck.1 - 1.1 * head_r);
    parts.push(Capsule { a: head, b: head, r: head_r });

    let shoulder = P(neck.0 - hip_half * depth, neck.1 + 0.1 * torso);
    let swing = -0.9 * j.stride * (phi - id.phase).sin();
    let (ua, fa) = (id.upper_arm * s, id.forearm * s);
    let elbow = P(shoulder.0 + dir * proj * ua * swing.sin(), shoulder.1 + ua * swing.cos());
    let bend = swing + 0.3 + 0.4 * (phi - id.phase).cos().max(0.0);
    let wrist = P(elbow.0 + dir * proj * fa * bend.sin(), elbow.1 + fa * bend.cos());
    let arm_r = 0.03 * s + dom.dilation;
    parts.push(Capsule { a: shoulder, b: elbow, r: arm_r });
    parts.push(Capsule { a: elbow, b: wrist, r: arm_r });
    parts
}

/// Renders `t` frames of `id` walking under `dom`. The rng draws the clip's
/// starting phase, small cadence and stride changes, position and apparent
/// size, the frame drops, and the pixel noise.
pub fn render_sequence<R: Rng>(
    id: &IdentitySpec,
    dom: &DomainSpec,
    t: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<Array3<f64>> {
    id.validate()?;
    dom.validate()?;
    if t == 0 || h < 8 || w < 8 {
        return Err(GaitError::invalid(format!("cannot render {t} frames of {h}x{w}")));
    }
    let jitter = ClipJitter {
        phase0: rng.random_range(0.0..TAU),
        cadence: id.cadence * rng.random_range(0.97..=1.03),
        stride: id.stride * rng.random_range(0.95..=1.05),
        shift: rng.random_range(-CLIP_SHIFT..=CLIP_SHIFT),
        scale: rng.random_range(1.0 - CLIP_SCALE..=1.0),
    };
    let mut frames = Array3::<f64>::zeros((t, h, w));
    for k in 0..t {
        if k > 0 && dom.frame_drop > 0.0 && rng.random::<f64>() < dom.frame_drop {
            let prev = frames.index_axis(ndarray::Axis(0), k - 1).to_owned();
            frames.index_axis_mut(ndarray::Axis(0), k).assign(&prev);
            continue;
        }
        let parts = pose(id, dom, &jitter, k as f64 / FRAME_RATE, h, w);
        for y in 0..h {
            for x in 0..w {
                let p = P(x as f64 + 0.5, y as f64 + 0.5);
                if parts.iter().any(|c| c.covers(p)) {
                    frames[[k, y, x]] = 1.0;
                }
            }
        }
    }
    if dom.noise > 0.0 {
        for v in frames.iter_mut() {
            if rng.random::<f64>() < dom.noise {
                *v = 1.0 - *v;
            }
        }
    }
    for y in dom.occluded_rows(h) {
        frames.slice_mut(ndarray::s![.., y, ..]).fill(0.0);
    }
    Ok(frames)
}

/// Wraps a rendered clip as a labeled normal-walking sequence.
pub fn render_labeled<R: Rng>(
    key: String,
    identity: u32,
    domain_id: u32,
    spec: &IdentitySpec,
    dom: &DomainSpec,
    shape: (usize, usize, usize),
    rng: &mut R,
) -> Result<SilhouetteSequence> {
    let frames = render_sequence(spec, dom, shape.0, shape.1, shape.2, rng)?;
    SilhouetteSequence::new(key, frames, identity, domain_id, Condition::NM, dom.view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> IdentitySpec {
        IdentitySpec {
            thigh: 0.24,
            shin: 0.23,
            upper_arm: 0.16,
            forearm: 0.14,
            torso: 0.30,
            head: 0.06,
            cadence: 1.0,
            stride: 0.5,
            phase: 0.3,
        }
    }

    #[test]
    fn identities_are_seeded_bounded_and_distinct() {
        let a = generate_identity(&mut ChaCha8Rng::seed_from_u64(3));
        let b = generate_identity(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            generate_identity(&mut rng).validate().unwrap();
        }
        let ids: Vec<_> = (0..100).map(|_| generate_identity(&mut rng)).collect();
        for i in 0..ids.len() {
            for j in 0..i {
                assert!(ids[i].distinct_from(&ids[j]));
            }
        }
    }

    #[test]
    fn rendering_is_binary_and_reproducible() {
        let dom = DomainSpec::default();
        let a = render_sequence(&spec(), &dom, 6, 32, 22, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = render_sequence(&spec(), &dom, 6, 32, 22, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| *v == 0.0 || *v == 1.0));
        let fg = a.sum() / 6.0;
        assert!(fg > 40.0 && fg < 400.0, "foreground {fg}");
    }

    #[test]
    fn occlusion_blanks_exactly_the_band() {
        let dom = DomainSpec { occlusion: Some((0.25, 0.5)), noise: 0.1, ..DomainSpec::default() };
        let f = render_sequence(&spec(), &dom, 4, 32, 22, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for y in 0..32 {
            let row = f.slice(ndarray::s![.., y, ..]);
            if (8..16).contains(&y) {
                assert!(row.iter().all(|v| *v == 0.0));
            } else {
                assert!(row.iter().any(|v| *v == 1.0), "row {y} should hold noise at least");
            }
        }
    }

    #[test]
    fn autocorrelation_peaks_at_the_gait_period() {
        // cadence 1.25 cycles/s at 10 fps: period 8 frames
        let id = IdentitySpec { cadence: 1.25, ..spec() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = render_sequence(&id, &DomainSpec::default(), 40, 64, 44, &mut rng).unwrap();
        let period = FRAME_RATE / (1.25 * 1.03);
        let corr = |lag: usize| {
            let n = 40 - lag;
            (0..n)
                .map(|k| {
                    let a = f.index_axis(ndarray::Axis(0), k);
                    let b = f.index_axis(ndarray::Axis(0), k + lag);
                    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>()
                })
                .sum::<f64>()
                / n as f64
        };
        let best = (2..=16).max_by(|&a, &b| corr(a).total_cmp(&corr(b))).unwrap();
        let lo = FRAME_RATE / (1.25 * 1.03);
        let hi = FRAME_RATE / (1.25 * 0.97);
        assert!((best as f64) >= lo.floor() && (best as f64) <= hi.ceil(), "peak lag {best}, period {period}");
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let bad = IdentitySpec { thigh: 0.0, ..spec() };
        assert!(render_sequence(&bad, &DomainSpec::default(), 3, 32, 22, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let wide = DomainSpec { occlusion: Some((0.1, 0.6)), ..DomainSpec::default() };
        assert!(wide.validate().is_err());
        let noisy = DomainSpec { noise: 0.3, ..DomainSpec::default() };
        assert!(noisy.validate().is_err());
    }
}
