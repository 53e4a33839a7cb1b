//! Pinhole projection of object-frame keypoints under a yaw-only pose.
//!
//! Camera frame: x right, y down, z forward. The object frame shares the
//! camera's vertical axis, so the only rotation is the yaw `r_y` about y.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Pixel shifted by the principal point and divided by the focal length.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizedPixel {
    pub u: f64,
    pub v: f64,
}

impl NormalizedPixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    /// KITTI-like intrinsics for a 1280x384 padded frame.
    pub fn kitti_like() -> Self {
        Self {
            fx: 721.5,
            fy: 721.5,
            cx: 609.6,
            cy: 172.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "camera needs finite intrinsics with positive focal lengths, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, px: Pixel) -> NormalizedPixel {
        NormalizedPixel {
            u: (px.u - self.cx) / self.fx,
            v: (px.v - self.cy) / self.fy,
        }
    }

    pub fn denormalize(&self, npx: NormalizedPixel) -> Pixel {
        Pixel {
            u: npx.u * self.fx + self.cx,
            v: npx.v * self.fy + self.cy,
        }
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_yaw(r: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = r - two_pi * ((r + PI) / two_pi).floor();
    // floor can land exactly on the upper bound through rounding
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    yaw: f64,
    pub t: Point3,
}

impl Pose {
    /// Builds a pose, wrapping the yaw into `[-pi, pi)`.
    pub fn new(yaw: f64, t: Point3) -> Self {
        Self {
            yaw: wrap_yaw(yaw),
            t,
        }
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    /// Ground-truth object depth `z_c`.
    pub fn depth(&self) -> f64 {
        self.t.z
    }
}

/// Rotates an object-frame point by the yaw, giving its offset from the
/// object center expressed in camera axes.
pub fn rotation_apply(yaw: f64, p: Point3) -> Point3 {
    let (s, c) = yaw.sin_cos();
    Point3 {
        x: p.x * c + p.z * s,
        y: p.y,
        z: -p.x * s + p.z * c,
    }
}

/// Object-frame point expressed in the camera frame.
pub fn to_camera(pose: &Pose, p: Point3) -> Point3 {
    let r = rotation_apply(pose.yaw, p);
    Point3 {
        x: pose.t.x + r.x,
        y: pose.t.y + r.y,
        z: pose.t.z + r.z,
    }
}

/// Projects an object-frame point, returning its pixel and camera depth.
pub fn project(cam: &Camera, pose: &Pose, p: Point3) -> Result<(Pixel, f64)> {
    let pc = to_camera(pose, p);
    let s = pc.z;
    if !(s > 0.0) {
        return Err(Error::PointBehindCamera { depth: s });
    }
    Ok((
        Pixel {
            u: cam.fx * pc.x / s + cam.cx,
            v: cam.fy * pc.y / s + cam.cy,
        },
        s,
    ))
}
