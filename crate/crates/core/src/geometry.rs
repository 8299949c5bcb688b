//! Agent/feature geometry: MPC parameter mappings, virtual-anchor mirroring
//! and plan-view wall occlusion.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("agent and feature positions coincide; bearing is undefined")]
    Coincident,
    #[error("plane normal must be non-zero and finite")]
    DegenerateNormal,
    #[error("wall endpoints must differ")]
    DegenerateWall,
}

/// A 3-vector in meters (positions) or m/s (velocities).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Positions share the vector representation.
pub type Position = Vec3;

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn horizontal_norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Agent pose. Heading is kept wrapped to (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentPose {
    pub position: Position,
    pub heading: f64,
    /// Elevation tilt of the array; 0 in planar scenarios.
    pub tilt: f64,
    pub speed: f64,
}

impl AgentPose {
    pub fn new(position: Position, heading: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            tilt: 0.0,
            speed: 0.0,
        }
    }
}

/// A reflecting plane `{p : normal·p = offset}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    normal: Vec3,
    offset: f64,
}

impl Plane {
    /// Normalizes `normal`; `offset` is interpreted for the unit normal.
    pub fn new(normal: Vec3, offset: f64) -> Result<Self, GeometryError> {
        let n = normal.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(GeometryError::DegenerateNormal);
        }
        Ok(Self {
            normal: normal * (1.0 / n),
            offset,
        })
    }

    pub fn normal(&self) -> Vec3 {
        self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn signed_distance(&self, p: Position) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Mirror image of `pa` across `plane` (virtual anchor).
pub fn mirror_across_plane(pa: Position, plane: &Plane) -> Position {
    pa - plane.normal * (2.0 * plane.signed_distance(pa))
}

/// Wall used for occlusion; only the horizontal footprint matters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallSegment {
    start: Position,
    end: Position,
}

impl WallSegment {
    pub fn new(start: Position, end: Position) -> Result<Self, GeometryError> {
        if start.x == end.x && start.y == end.y {
            return Err(GeometryError::DegenerateWall);
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> Position {
        self.start
    }

    pub fn end(&self) -> Position {
        self.end
    }
}

/// Distance, azimuth and elevation of the MPC from feature `mf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcGeometry {
    pub distance: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

/// Maps agent pose and feature position to MPC parameters.
///
/// `clock_offset` is the clock offset expressed as a distance and is added to
/// the geometric range.
pub fn mpc_geometry(
    agent: &AgentPose,
    mf: Position,
    clock_offset: f64,
) -> Result<MpcGeometry, GeometryError> {
    let delta = mf - agent.position;
    let range = delta.norm();
    if range == 0.0 {
        return Err(GeometryError::Coincident);
    }
    Ok(MpcGeometry {
        distance: range + clock_offset,
        azimuth: wrap_angle(delta.y.atan2(delta.x) - agent.heading),
        elevation: (delta.z / range).clamp(-1.0, 1.0).asin() - agent.tilt,
    })
}

/// Doppler shift in Hz seen by an agent moving with `velocity`.
pub fn doppler_shift(
    agent: &AgentPose,
    velocity: Vec3,
    mf: Position,
    carrier_hz: f64,
) -> Result<f64, GeometryError> {
    let los = mf - agent.position;
    let range = los.norm();
    if range == 0.0 {
        return Err(GeometryError::Coincident);
    }
    Ok(carrier_hz * velocity.dot(los) / (SPEED_OF_LIGHT * range))
}

fn cross2(o: Position, a: Position, b: Position) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment2(p: Position, a: Position, b: Position) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed 2D segment intersection; touching endpoints count as intersecting.
pub fn segments_intersect_2d(p1: Position, p2: Position, q1: Position, q2: Position) -> bool {
    let d1 = cross2(q1, q2, p1);
    let d2 = cross2(q1, q2, p2);
    let d3 = cross2(p1, p2, q1);
    let d4 = cross2(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment2(p1, q1, q2))
        || (d2 == 0.0 && on_segment2(p2, q1, q2))
        || (d3 == 0.0 && on_segment2(q1, p1, p2))
        || (d4 == 0.0 && on_segment2(q2, p1, p2))
}

/// True iff the plan-view segment agent→mf crosses none of `walls`.
pub fn is_visible(agent: Position, mf: Position, walls: &[WallSegment]) -> bool {
    walls
        .iter()
        .all(|w| !segments_intersect_2d(agent, mf, w.start, w.end))
}
