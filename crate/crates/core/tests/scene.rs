mod common;

use nerfcodec::scene::{
    load_scene, norm, save_scene, synth_scene, CameraView, Extent, Image, Intrinsics, Pose, Primitive, PrimitiveKind,
    Role, Scene, SynthSpec,
};
use nerfcodec::CodecError;
use proptest::prelude::*;
use rand::Rng;

fn view(eye: [f64; 3], size: usize) -> CameraView {
    let k = Intrinsics::from_fov(size, size, 0.8);
    CameraView::new("v", Image::filled(size, size, [1.0; 3]), Pose::look_at(eye, [0.0; 3]), k).unwrap()
}

fn check_partition(scene: &Scene) {
    let enc = scene.encoder_views();
    let ft = scene.finetune_views();
    let ev = scene.eval_views();
    assert!(enc.iter().all(|v| ft.iter().any(|f| f.name == v.name)));
    assert!(ft.iter().all(|v| ev.iter().all(|e| e.name != v.name)));
}

#[test]
fn optical_axis_projects_to_principal_point() {
    let v = view([0.0, -3.0, 1.0], 32);
    let (uv, inside) = v.project([0.0, 0.0, 0.0]);
    assert!(inside);
    assert!((uv[0] - 16.0).abs() < 1e-9 && (uv[1] - 16.0).abs() < 1e-9);
}

#[test]
fn point_behind_camera_is_outside() {
    let v = view([0.0, 0.0, 4.0], 32);
    assert!(!v.project([0.0, 0.0, 5.0]).1);
}

#[test]
fn project_back_project_round_trip() {
    let mut r = common::rng(1);
    for _ in 0..500 {
        let eye = [0; 3].map(|_| r.random_range(-5.0..5.0));
        if norm(eye) < 2.0 {
            continue;
        }
        let v = view(eye, 40);
        let p = [0; 3].map(|_| r.random_range(-1.0..1.0));
        let (uv, _) = v.project(p);
        let depth = -v.pose.world_to_camera(p)[2];
        let q = v.back_project(uv, depth);
        assert!((0..3).all(|a| (p[a] - q[a]).abs() < 1e-5), "{p:?} vs {q:?}");
    }
}

#[test]
fn rays_share_origin_and_center_ray_is_the_axis() {
    let v = view([3.0, 1.0, 2.0], 33);
    let k = v.intrinsics;
    let rays = v.generate_rays(0.1, 10.0);
    assert_eq!(rays.len(), 33 * 33);
    assert!(rays.iter().all(|r| r.origin == v.pose.origin()));
    let c = v.ray_through([k.cx, k.cy], 0.1, 10.0);
    let axis = v.pose.rotation_col(2).map(|x| -x);
    assert!((0..3).all(|a| (c.dir[a] - axis[a]).abs() < 1e-12));
}

#[test]
fn points_on_a_ray_project_to_its_pixel() {
    let v = view([-2.0, 3.0, 1.5], 24);
    let rays = v.generate_rays(0.5, 8.0);
    for (i, ray) in rays.iter().enumerate() {
        let want = [(i % 24) as f64 + 0.5, (i / 24) as f64 + 0.5];
        for t in [0.6, 2.0, 4.5, 7.9] {
            let (uv, _) = v.project(ray.at(t));
            assert!((uv[0] - want[0]).abs() <= 1e-4 && (uv[1] - want[1]).abs() <= 1e-4);
        }
    }
}

#[test]
fn invalid_cameras_are_rejected() {
    let img = Image::filled(8, 8, [0.0; 3]);
    let pose = Pose::look_at([0.0, 0.0, 3.0], [0.0; 3]);
    let mut k = Intrinsics::from_fov(8, 8, 0.8);
    k.cx = 8.0;
    assert!(CameraView::new("a", img.clone(), pose, k).is_err());
    let mut m = pose.m;
    m[0][0] *= 2.0;
    assert!(Pose::new(m).is_err());
    let k = Intrinsics { fx: -1.0, ..Intrinsics::from_fov(8, 8, 0.8) };
    assert!(CameraView::new("a", img, pose, k).is_err());
}

#[test]
fn synthetic_split_follows_sixteen_twenty_four_twenty_six() {
    let (scene, _) = synth_scene(&SynthSpec::random(4, 50, 8)).unwrap();
    assert_eq!(scene.encoder_views().len(), 16);
    assert_eq!(scene.finetune_views().len(), 24);
    assert_eq!(scene.eval_views().len(), 26);
    check_partition(&scene);
}

#[test]
fn empty_scene_shows_only_background() {
    let mut spec = SynthSpec::empty(6, 10, 3);
    spec.background_rgb = [0.2, 0.4, 0.6];
    let (scene, _) = synth_scene(&spec).unwrap();
    for v in &scene.views {
        assert!(v.image.rgb.chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
    }
}

#[test]
fn sphere_silhouette_matches_projected_radius() {
    let mut spec = SynthSpec::empty(8, 64, 0);
    spec.primitives.push(Primitive {
        kind: PrimitiveKind::Sphere,
        center: [0.0; 3],
        radius_or_halfextent: Extent::Uniform(0.5),
        sigma: 1000.0,
        rgb: [0.0; 3],
    });
    let (scene, _) = synth_scene(&spec).unwrap();
    let f = 32.0 / (0.4f64).tan();
    let want = f * (0.5f64 / 4.0).asin().tan();
    for v in &scene.views {
        let alpha = v.image.alpha.as_ref().unwrap();
        let (mut area, mut cu, mut cv) = (0.0, 0.0, 0.0);
        for (i, &a) in alpha.iter().enumerate() {
            if a > 0.5 {
                area += 1.0;
                cu += (i % 64) as f64 + 0.5;
                cv += (i / 64) as f64 + 0.5;
            }
        }
        let radius = (area / std::f64::consts::PI).sqrt();
        assert!((radius - want).abs() <= 1.0, "{radius} vs {want}");
        assert!((cu / area - 32.0).abs() < 0.5 && (cv / area - 32.0).abs() < 0.5);
    }
}

#[test]
fn synthesis_is_deterministic() {
    let spec = SynthSpec::random(7, 12, 16);
    let (a, _) = synth_scene(&spec).unwrap();
    let (b, _) = synth_scene(&spec).unwrap();
    assert_eq!(a.views, b.views);
    assert_eq!(a.roles, b.roles);
}

#[test]
fn oracle_render_does_not_depend_on_view_order() {
    let (scene, field) = synth_scene(&SynthSpec::random(2, 10, 12)).unwrap();
    for v in scene.views.iter().rev() {
        assert_eq!(field.render_view(v, scene.near, scene.far, scene.background), v.image);
    }
}

#[test]
fn primitives_leaving_the_cube_are_rejected() {
    let mut spec = SynthSpec::empty(4, 8, 0);
    spec.primitives.push(Primitive {
        kind: PrimitiveKind::Box,
        center: [0.8, 0.0, 0.0],
        radius_or_halfextent: Extent::PerAxis([0.3, 0.1, 0.1]),
        sigma: 5.0,
        rgb: [1.0; 3],
    });
    assert!(synth_scene(&spec).is_err());
}

#[test]
fn saved_scenes_load_back() {
    let (scene, _) = synth_scene(&SynthSpec::random(1, 10, 12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_scene(&scene, dir.path()).unwrap();
    let back = load_scene(dir.path()).unwrap();
    assert_eq!(back.roles, scene.roles);
    assert_eq!((back.near, back.far), (scene.near, scene.far));
    for (a, b) in back.views.iter().zip(&scene.views) {
        assert_eq!(a.pose, b.pose);
        let err = a.image.rgb.iter().zip(&b.image.rgb).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
    }
    check_partition(&back);
}

#[test]
fn malformed_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transforms.json");
    std::fs::write(&path, r#"{"camera_angle_x": 0.8, "frames": []}"#).unwrap();
    assert!(matches!(load_scene(dir.path()), Err(CodecError::Scene(_))));
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(load_scene(dir.path()), Err(CodecError::Parse { .. })));

    let (scene, _) = synth_scene(&SynthSpec::random(1, 4, 8)).unwrap();
    save_scene(&scene, dir.path()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["frames"][0]["cx"] = serde_json::json!(40.0);
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(matches!(load_scene(dir.path()), Err(CodecError::Scene(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn role_partition_holds(seed in 0u64..1000, n in 4usize..60) {
        let (scene, _) = synth_scene(&SynthSpec::random(seed, n, 4)).unwrap();
        check_partition(&scene);
        prop_assert!(scene.roles.contains(&Role::Eval));
    }
}
