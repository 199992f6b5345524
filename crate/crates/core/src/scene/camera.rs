use crate::error::{CodecError, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn add_scaled(a: Vec3, t: f64, d: Vec3) -> Vec3 {
    [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]]
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels and a centered principal point from a horizontal field of view.
    pub fn from_fov(width: usize, height: usize, angle_x: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * angle_x).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }
}

/// Camera-to-world rigid transform. The camera looks down its local −z axis
/// with +y up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub m: [[f64; 4]; 4],
}

impl Pose {
    pub fn new(m: [[f64; 4]; 4]) -> Result<Self> {
        let p = Self { m };
        p.validate()?;
        Ok(p)
    }

    /// Camera at `eye` looking at `target`, keeping world +z up where possible.
    pub fn look_at(eye: Vec3, target: Vec3) -> Self {
        let back = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
        let mut right = cross([0.0, 0.0, 1.0], back);
        if norm(right) < 1e-6 {
            right = cross([0.0, 1.0, 0.0], back);
        }
        let right = normalize(right);
        let up = cross(back, right);
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][0] = right[i];
            m[i][1] = up[i];
            m[i][2] = back[i];
            m[i][3] = eye[i];
        }
        m[3][3] = 1.0;
        Self { m }
    }

    pub fn rotation_col(&self, c: usize) -> Vec3 {
        [self.m[0][c], self.m[1][c], self.m[2][c]]
    }

    pub fn origin(&self) -> Vec3 {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CodecError::Scene("pose has non-finite entries".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(self.rotation_col(i), self.rotation_col(j));
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-5 {
                    return Err(CodecError::Scene(format!(
                        "pose rotation is not orthonormal (column {i}·{j} = {d})"
                    )));
                }
            }
        }
        let det = dot(cross(self.rotation_col(0), self.rotation_col(1)), self.rotation_col(2));
        if det < 0.0 {
            return Err(CodecError::Scene("pose rotation is a reflection".into()));
        }
        let bottom = self.m[3];
        if bottom[0].abs() > 1e-6 || bottom[1].abs() > 1e-6 || bottom[2].abs() > 1e-6 || (bottom[3] - 1.0).abs() > 1e-6 {
            return Err(CodecError::Scene(format!("pose bottom row {bottom:?} is not [0, 0, 0, 1]")));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let o = self.origin();
        let d = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
        [
            dot(self.rotation_col(0), d),
            dot(self.rotation_col(1), d),
            dot(self.rotation_col(2), d),
        ]
    }

    pub fn camera_to_world_dir(&self, d: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.m[i][0] * d[0] + self.m[i][1] * d[1] + self.m[i][2] * d[2];
        }
        out
    }
}

/// Linear RGB image with values in [0, 1], row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    pub alpha: Option<Vec<f32>>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let rgb = (0..width * height).flat_map(|_| color).collect();
        Self {
            width,
            height,
            rgb,
            alpha: None,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Channel-major `[3, h, w]` copy, the layout convolutions consume.
    pub fn planar(&self) -> Vec<f32> {
        let n = self.pixel_count();
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.rgb[3 * i + c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub image: Image,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

/// A ray with unit direction and the scene's near/far distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add_scaled(self.origin, t, self.dir)
    }

    /// Parameter interval where the ray is inside both `[near, far]` and the
    /// cube `[−1, 1]³`.
    pub fn clip_to_cube(&self) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (self.near, self.far);
        for a in 0..3 {
            let (o, d) = (self.origin[a], self.dir[a]);
            if d.abs() < 1e-12 {
                if o.abs() > 1.0 {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((-1.0 - o) / d, (1.0 - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

impl CameraView {
    pub fn new(name: impl Into<String>, image: Image, pose: Pose, intrinsics: Intrinsics) -> Result<Self> {
        let name = name.into();
        pose.validate()?;
        let k = intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(CodecError::Scene(format!("{name}: focal lengths must be positive")));
        }
        if !(k.cx >= 0.0 && k.cx < image.width as f64 && k.cy >= 0.0 && k.cy < image.height as f64) {
            return Err(CodecError::Scene(format!(
                "{name}: principal point ({}, {}) outside the {}x{} image",
                k.cx, k.cy, image.width, image.height
            )));
        }
        if image.rgb.len() != 3 * image.pixel_count() {
            return Err(CodecError::Scene(format!("{name}: pixel buffer size mismatch")));
        }
        Ok(Self {
            name,
            image,
            pose,
            intrinsics,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Continuous pixel coordinates of a world point and whether it lies in
    /// front of the camera and inside the image rectangle.
    pub fn project(&self, p: Vec3) -> ([f64; 2], bool) {
        let c = self.pose.world_to_camera(p);
        let depth = -c[2];
        if depth <= 1e-9 {
            return ([f64::NAN, f64::NAN], false);
        }
        let k = &self.intrinsics;
        let u = k.cx + k.fx * c[0] / depth;
        let v = k.cy - k.fy * c[1] / depth;
        let inside = u >= 0.0 && u < self.width() as f64 && v >= 0.0 && v < self.height() as f64;
        ([u, v], inside)
    }

    /// World point at camera-space depth `depth` behind pixel `uv`.
    pub fn back_project(&self, uv: [f64; 2], depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let c = [
            (uv[0] - k.cx) / k.fx * depth,
            -(uv[1] - k.cy) / k.fy * depth,
            -depth,
        ];
        add_scaled(self.pose.origin(), 1.0, self.pose.camera_to_world_dir(c))
    }

    pub fn ray_through(&self, uv: [f64; 2], near: f64, far: f64) -> Ray {
        let k = &self.intrinsics;
        let d = [(uv[0] - k.cx) / k.fx, -(uv[1] - k.cy) / k.fy, -1.0];
        Ray {
            origin: self.pose.origin(),
            dir: normalize(self.pose.camera_to_world_dir(d)),
            near,
            far,
        }
    }

    /// One ray through each pixel center, row-major.
    pub fn generate_rays(&self, near: f64, far: f64) -> Vec<Ray> {
        let mut out = Vec::with_capacity(self.image.pixel_count());
        for row in 0..self.height() {
            for col in 0..self.width() {
                out.push(self.ray_through([col as f64 + 0.5, row as f64 + 0.5], near, far));
            }
        }
        out
    }
}
