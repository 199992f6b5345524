use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_png, save_png, CameraView, Image, Intrinsics, Pose, Role, Scene};
use crate::error::{io_err, CodecError, Result};

/// The JSON pose manifest of a scene directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_angle_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<[f32; 3]>,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Frame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
}

fn default_role() -> Role {
    Role::Finetune
}

pub const MANIFEST_NAME: &str = "transforms.json";

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

/// Loads a scene from a directory holding `transforms.json` (or from the
/// manifest path itself) and the PNG images it references.
fn read_manifest(path: &Path) -> Result<(PathBuf, Manifest)> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CodecError::Parse {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;
    if manifest.frames.is_empty() {
        return Err(CodecError::Scene(format!("{}: empty frame list", mpath.display())));
    }
    Ok((mpath, manifest))
}

fn intrinsics(f: &Frame, angle_x: Option<f64>, width: usize, height: usize) -> Result<Intrinsics> {
    match (f.fx, angle_x) {
        (Some(fx), _) => Ok(Intrinsics {
            fx,
            fy: f.fy.unwrap_or(fx),
            cx: f.cx.unwrap_or(0.5 * width as f64),
            cy: f.cy.unwrap_or(0.5 * height as f64),
        }),
        (None, Some(a)) => Ok(Intrinsics::from_fov(width, height, a)),
        (None, None) => Err(CodecError::Scene(format!(
            "{}: no camera_angle_x and no per-frame focal length",
            f.file_path
        ))),
    }
}

fn view(f: &Frame, image: Image, angle_x: Option<f64>) -> Result<CameraView> {
    let k = intrinsics(f, angle_x, image.width, image.height)?;
    let pose = Pose::new(f.transform_matrix).map_err(|e| CodecError::Scene(format!("{}: {e}", f.file_path)))?;
    CameraView::new(f.file_path.clone(), image, pose, k)
}

/// Loads a scene from a directory holding `transforms.json` (or from the
/// manifest path itself) and the PNG images it references.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let (mpath, manifest) = read_manifest(path)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let background = manifest.background.unwrap_or([1.0; 3]);
    let mut views = Vec::with_capacity(manifest.frames.len());
    let mut roles = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let mut file = dir.join(&f.file_path);
        if file.extension().is_none() {
            file.set_extension("png");
        }
        let image = load_png(&file, background)?;
        views.push(view(f, image, manifest.camera_angle_x)?);
        roles.push(f.role);
    }
    let (near, far) = match (manifest.near, manifest.far) {
        (Some(n), Some(f)) => (n, f),
        _ => default_bounds(&views),
    };
    Scene::new(views, roles, near, far, background)
}

/// Camera poses of a manifest without reading any image. Every view gets a
/// blank `width × height` image; without a size, frames must give `cx, cy`
/// and the size is `(2cx, 2cy)`.
pub fn load_poses(path: &Path, size: Option<(usize, usize)>) -> Result<Scene> {
    let (_, manifest) = read_manifest(path)?;
    let background = manifest.background.unwrap_or([1.0; 3]);
    let mut views = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let (w, h) = match (size, f.cx, f.cy) {
            (Some(s), _, _) => s,
            (None, Some(cx), Some(cy)) => ((2.0 * cx).round() as usize, (2.0 * cy).round() as usize),
            _ => {
                return Err(CodecError::Scene(format!(
                    "{}: image size unknown; give one or per-frame cx and cy",
                    f.file_path
                )))
            }
        };
        views.push(view(f, Image::filled(w, h, background), manifest.camera_angle_x)?);
    }
    let roles = vec![Role::Eval; views.len()];
    let (near, far) = match (manifest.near, manifest.far) {
        (Some(n), Some(f)) => (n, f),
        _ => default_bounds(&views),
    };
    Scene::new(views, roles, near, far, background)
}

/// Near/far that enclose the cube from every camera.
pub(crate) fn default_bounds(views: &[CameraView]) -> (f64, f64) {
    let r = 3f64.sqrt();
    let dists = views.iter().map(|v| super::norm(v.pose.origin()));
    let (lo, hi) = dists.fold((f64::INFINITY, 0.0f64), |(a, b), d| (a.min(d), b.max(d)));
    ((lo - r).max(0.05), hi + r)
}

/// Writes `transforms.json` plus one PNG per view into `dir`.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut frames = Vec::with_capacity(scene.views.len());
    for (v, &role) in scene.views.iter().zip(&scene.roles) {
        let file = format!("{}.png", v.name);
        save_png(&dir.join(&file), &v.image)?;
        let k = v.intrinsics;
        frames.push(Frame {
            file_path: file,
            transform_matrix: v.pose.m,
            role,
            fx: Some(k.fx),
            fy: Some(k.fy),
            cx: Some(k.cx),
            cy: Some(k.cy),
        });
    }
    let manifest = Manifest {
        camera_angle_x: None,
        near: Some(scene.near),
        far: Some(scene.far),
        background: Some(scene.background),
        frames,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(io_err(&path))
}

