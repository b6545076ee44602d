//! SE(2) poses, rigid transforms, relative descriptors and Fourier features.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; this keeps -0.0 out of the result
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    /// Expresses the world-frame vector `(dx, dy)` in this pose's frame.
    pub fn to_local_vec(&self, dx: f64, dy: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// World-frame coordinates of a point given in this pose's frame.
    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }

    pub fn to_local(&self, wx: f64, wy: f64) -> (f64, f64) {
        self.to_local_vec(wx - self.x, wy - self.y)
    }
}

/// Rotation about the origin followed by translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2 {
    pub rotation: f64,
    pub translation: (f64, f64),
}

impl RigidTransform2 {
    pub fn identity() -> Self {
        Self::new(0.0, (0.0, 0.0))
    }

    pub fn new(rotation: f64, translation: (f64, f64)) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (c * x - s * y + self.translation.0, s * x + c * y + self.translation.1)
    }

    pub fn rotate_vec(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (c * x - s * y, s * x + c * y)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform2) -> RigidTransform2 {
        let (tx, ty) = self.apply_point(other.translation.0, other.translation.1);
        RigidTransform2::new(self.rotation + other.rotation, (tx, ty))
    }

    pub fn inverse(&self) -> RigidTransform2 {
        let inv = RigidTransform2::new(-self.rotation, (0.0, 0.0));
        let (tx, ty) = inv.apply_point(-self.translation.0, -self.translation.1);
        RigidTransform2::new(-self.rotation, (tx, ty))
    }
}

pub fn apply_se2(g: &RigidTransform2, p: &Pose2) -> Pose2 {
    let (x, y) = g.apply_point(p.x, p.y);
    Pose2::new(x, y, p.heading + g.rotation)
}

/// Pose of `source` seen from `target`, plus their time offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelDescriptor {
    pub distance: f64,
    /// Bearing of the source in the target's frame.
    pub azimuth: f64,
    pub rel_heading: f64,
    /// `target step - source step`.
    pub time_gap: i64,
}

impl RelDescriptor {
    pub fn channels(&self) -> [f64; 4] {
        [self.distance, self.azimuth, self.rel_heading, self.time_gap as f64]
    }
}

pub fn rel_descriptor(source: &Pose2, source_step: i64, target: &Pose2, target_step: i64) -> RelDescriptor {
    let (dx, dy) = (source.x - target.x, source.y - target.y);
    let distance = dx.hypot(dy);
    let azimuth = if distance == 0.0 {
        0.0
    } else {
        let (lx, ly) = target.to_local_vec(dx, dy);
        normalize_angle(ly.atan2(lx))
    };
    RelDescriptor {
        distance,
        azimuth,
        rel_heading: normalize_angle(source.heading - target.heading),
        time_gap: target_step - source_step,
    }
}

/// Fixed geometric frequency bank `base * 2^k`, `k = 0..num_frequencies`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    pub num_frequencies: usize,
    pub base_frequency: f64,
    pub include_raw: bool,
}

impl FourierSpec {
    pub fn new(num_frequencies: usize, base_frequency: f64, include_raw: bool) -> Self {
        Self {
            num_frequencies,
            base_frequency,
            include_raw,
        }
    }

    pub fn frequencies(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.num_frequencies).map(|k| self.base_frequency * 2f64.powi(k as i32))
    }

    pub fn width(&self) -> usize {
        2 * self.num_frequencies + usize::from(self.include_raw)
    }

    pub fn max_frequency(&self) -> f64 {
        self.base_frequency * 2f64.powi(self.num_frequencies.saturating_sub(1) as i32)
    }

    pub fn is_valid(&self) -> bool {
        self.num_frequencies > 0 && self.base_frequency.is_finite() && self.base_frequency > 0.0
    }
}

/// Appends `[sin(2π f_k x), cos(2π f_k x)]` per frequency, then `x` when `include_raw`.
pub fn fourier_features(x: f64, spec: &FourierSpec, out: &mut Vec<f64>) {
    for f in spec.frequencies() {
        let (s, c) = (2.0 * PI * f * x).sin_cos();
        out.push(s);
        out.push(c);
    }
    if spec.include_raw {
        out.push(x);
    }
}

/// Per-channel frequency banks for descriptor embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSpec {
    pub distance: FourierSpec,
    pub azimuth: FourierSpec,
    pub rel_heading: FourierSpec,
    pub time_gap: FourierSpec,
}

impl DescriptorSpec {
    pub fn uniform(spec: FourierSpec) -> Self {
        Self {
            distance: spec,
            azimuth: spec,
            rel_heading: spec,
            time_gap: spec,
        }
    }

    pub fn width(&self) -> usize {
        self.distance.width() + self.azimuth.width() + self.rel_heading.width() + self.time_gap.width()
    }
}

impl Default for DescriptorSpec {
    fn default() -> Self {
        Self {
            distance: FourierSpec::new(6, 1.0 / 64.0, false),
            azimuth: FourierSpec::new(3, 1.0 / (2.0 * PI), true),
            rel_heading: FourierSpec::new(3, 1.0 / (2.0 * PI), true),
            time_gap: FourierSpec::new(2, 1.0 / 32.0, false),
        }
    }
}

/// Channels in fixed order: distance, azimuth, rel_heading, time_gap.
pub fn fourier_embed(d: &RelDescriptor, spec: &DescriptorSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.width());
    let c = d.channels();
    fourier_features(c[0], &spec.distance, &mut out);
    fourier_features(c[1], &spec.azimuth, &mut out);
    fourier_features(c[2], &spec.rel_heading, &mut out);
    fourier_features(c[3], &spec.time_gap, &mut out);
    out
}
