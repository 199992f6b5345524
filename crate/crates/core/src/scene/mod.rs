//! Posed views, ray generation, dataset loading and synthetic scenes.

mod camera;
mod manifest;
mod synth;

use std::path::Path;

pub use camera::{add_scaled, cross, dot, norm, normalize, CameraView, Image, Intrinsics, Pose, Ray, Vec3};
pub use manifest::{load_poses, load_scene, save_scene, Manifest};
pub use synth::{synth_scene, AnalyticField, Extent, Primitive, PrimitiveKind, SynthSpec, ORACLE_SAMPLES};

use crate::error::{io_err, CodecError, Result};

/// What a view is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Fed to the encoder and also used for finetuning.
    EncoderInput,
    Finetune,
    Eval,
}

/// An immutable set of posed views inside the cube `[−1, 1]³`.
#[derive(Clone, Debug)]
pub struct Scene {
    pub views: Vec<CameraView>,
    pub roles: Vec<Role>,
    pub near: f64,
    pub far: f64,
    pub background: [f32; 3],
}

impl Scene {
    pub fn new(views: Vec<CameraView>, roles: Vec<Role>, near: f64, far: f64, background: [f32; 3]) -> Result<Self> {
        if views.is_empty() {
            return Err(CodecError::Scene("no views".into()));
        }
        if views.len() != roles.len() {
            return Err(CodecError::Scene("one role per view required".into()));
        }
        if !(near >= 0.0 && near < far) {
            return Err(CodecError::Scene(format!("near {near} must be below far {far}")));
        }
        let mut names = std::collections::HashSet::new();
        for v in &views {
            if !names.insert(v.name.as_str()) {
                return Err(CodecError::Scene(format!("duplicate frame name {:?}", v.name)));
            }
        }
        let (w, h) = (views[0].width(), views[0].height());
        if views.iter().any(|v| v.width() != w || v.height() != h) {
            return Err(CodecError::Scene("all views must share one image size".into()));
        }
        Ok(Self {
            views,
            roles,
            near,
            far,
            background,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.views[0].width(), self.views[0].height())
    }

    fn with_roles(&self, keep: impl Fn(Role) -> bool) -> Vec<&CameraView> {
        self.views.iter().zip(&self.roles).filter(|(_, r)| keep(**r)).map(|(v, _)| v).collect()
    }

    pub fn encoder_views(&self) -> Vec<&CameraView> {
        self.with_roles(|r| r == Role::EncoderInput)
    }

    /// Finetuning views; a superset of the encoder inputs.
    pub fn finetune_views(&self) -> Vec<&CameraView> {
        self.with_roles(|r| r != Role::Eval)
    }

    pub fn eval_views(&self) -> Vec<&CameraView> {
        self.with_roles(|r| r == Role::Eval)
    }
}

pub fn load_png(path: &Path, background: [f32; 3]) -> Result<Image> {
    let img = image::open(path).map_err(|e| CodecError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let has_alpha = img.color().has_alpha();
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut alpha = Vec::with_capacity(w * h);
    for px in rgba.pixels() {
        let a = px.0[3] as f32 / 255.0;
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            rgb.push(if has_alpha { v * a + background[c] * (1.0 - a) } else { v });
        }
        alpha.push(a);
    }
    Ok(Image {
        width: w,
        height: h,
        rgb,
        alpha: has_alpha.then_some(alpha),
    })
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the (already background-composited) colors as 8-bit RGB.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let buf: Vec<u8> = img.rgb.iter().map(|&v| quantize_u8(v)).collect();
    image::save_buffer(path, &buf, img.width as u32, img.height as u32, image::ColorType::Rgb8).map_err(|e| CodecError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
