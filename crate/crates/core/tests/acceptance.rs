//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

mod common;

#[allow(dead_code, unused_imports)]
#[path = "codec.rs"]
mod codec_suite;
#[allow(dead_code, unused_imports)]
#[path = "encoder.rs"]
mod encoder_suite;
#[allow(dead_code, unused_imports)]
#[path = "entropy.rs"]
mod entropy_suite;
#[allow(dead_code, unused_imports)]
#[path = "gradients.rs"]
mod gradient_suite;
#[allow(dead_code, unused_imports)]
#[path = "peft.rs"]
mod peft_suite;
#[allow(dead_code, unused_imports)]
#[path = "render.rs"]
mod render_suite;
#[allow(dead_code, unused_imports)]
#[path = "vq.rs"]
mod vq_suite;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nerfcodec::autodiff::{Boundary, Tape, Tensor, Var};
use nerfcodec::codec::{pack, unpack};
use nerfcodec::entropy::{decode_stream, encode_stream, ideal_bits, megabytes, Bitstream};
use nerfcodec::model::Pretrained;
use nerfcodec::param::Module;
use nerfcodec::peft::{prepare, DeltaFactors, Mode};
use nerfcodec::render::{AdapterParams, Decoder, DenseParams, SceneModel};
use nerfcodec::scene::{synth_scene, Scene, SynthSpec};
use nerfcodec::train::{write_csv, BaseTrainer, FinetuneState, TrainConfig, TrainMode};
use nerfcodec::triplane::Triplanes;
use nerfcodec::Profile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(number: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {number}: {tag} {name} ({secs:.1}s) {detail}");
    outcome.is_ok()
}

fn size_accounting() -> Outcome {
    let p = Profile::objaverse();
    let idx: [Vec<usize>; 3] = std::array::from_fn(|_| vec![0; p.code_res().pow(2)]);
    let mut scene = SceneModel {
        planes: Triplanes::zeros(p.channels, p.resolutions),
        delta: None,
        decoder: Decoder::new(&p, 0),
    };
    let planes = pack(&p, Mode::FullFt, &idx, &scene, None).map_err(|e| e.to_string())?.size_report().feature;
    let delta = DeltaFactors::init(p.channels, p.resolutions, p.delta_rank, 0).map_err(|e| e.to_string())?;
    let matrices = 4 * delta.matrix_entries();
    let side: usize = p.resolutions.iter().map(|v| v * v).sum();
    prepare(&mut scene, Mode::Peft, p.delta_rank, p.lora_rank, 0).map_err(|e| e.to_string())?;
    let adapters = 4 * (AdapterParams(&scene.decoder.coarse).param_count() + AdapterParams(&scene.decoder.fine).param_count());
    let sent = pack(&p, Mode::Peft, &idx, &scene, None).map_err(|e| e.to_string())?.size_report();
    let detail = format!(
        "planes {planes} B = {:.2} MB, M {matrices} B sent with its vectors as {} B = {:.3} MB, adapters {adapters} B = {:.3} MB",
        megabytes(planes),
        sent.feature,
        megabytes(sent.feature),
        megabytes(adapters)
    );
    check(
        planes == 3 * p.channels * side * 4
            && matrices == 3 * p.delta_rank * side * 4
            && sent.feature == matrices + 4 * delta.vector_entries()
            && sent.mlp == adapters
            && format!("{:.2}", megabytes(planes)) == "33.03"
            && format!("{:.3}", megabytes(sent.feature)) == "1.033"
            && (megabytes(adapters) / 0.233 - 1.0).abs() <= 0.15,
        detail,
    )
}

fn codec_round_trip() -> Outcome {
    let mut r = common::rng(2024);
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..1000u64 {
        let n = r.random_range(1..4000);
        let spread = r.random_range(0.5..80.0);
        let symbols = common::random_symbols(&mut r, n, spread);
        let (min, max) = (*symbols.iter().min().unwrap(), *symbols.iter().max().unwrap());
        let table = entropy_suite::randomized(trial).table(min, max).map_err(|e| e.to_string())?;
        let bytes = encode_stream(&symbols, &table, min, max).map_err(|e| e.to_string())?;
        if decode_stream(&bytes, &table, min, n).map_err(|e| e.to_string())? != symbols {
            return Err(format!("stream {trial} decoded differently"));
        }
        let ideal = ideal_bits(&table, &symbols, min) / 8.0;
        let slack = bytes.len() as f64 - (ideal * 1.001 + 64.0);
        worst = worst.max(slack);
        if slack > 0.0 {
            return Err(format!("stream {trial}: {} B against ideal {ideal:.1} B", bytes.len()));
        }
    }
    for i in 0..100 {
        let bs = common::random_bitstream(&mut r);
        let bytes = bs.to_bytes();
        if Bitstream::from_bytes(&bytes).map_err(|e| e.to_string())? != bs || bs.size_report().total != bytes.len() {
            return Err(format!("container {i} changed"));
        }
    }
    Ok(format!("1000 streams and 100 containers exact, largest margin to the bound {:.1} B", -worst))
}

fn end_to_end() -> Outcome {
    let model = Pretrained::new(Profile::desk(), 0).map_err(|e| e.to_string())?;
    let (scene, _) = synth_scene(&SynthSpec::random(31, 10, 32)).map_err(|e| e.to_string())?;
    let idx = model.encode_indices(&scene).map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    for mode in [Mode::WoFt, Mode::Peft, Mode::PeftPlus] {
        let st = codec_suite::finetuned(&model, &scene, &idx, mode);
        let bytes = st.pack(&model.profile, &idx).map_err(|e| e.to_string())?.to_bytes();
        let decoded = unpack(&model, &Bitstream::from_bytes(&bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if decoded.indices != idx || !codec_suite::renders_equal(&st.transmitted(), &decoded.scene, &scene, &model.profile) {
            return Err(format!("{mode}: receiver render differs"));
        }
        sizes.push(format!("{mode} {} B", bytes.len()));
    }
    Ok(format!("bitwise on 32x32 views: {}", sizes.join(", ")))
}

fn checked_leaves(inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = {
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars);
        t.shape(out).to_vec()
    };
    let w = Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0));
    let scalar = move |t: &mut Tape<f64>, v: &[Var]| {
        let out = build(t, v);
        let w = t.constant(w.clone());
        let p = t.mul(out, w).unwrap();
        t.sum(p).unwrap()
    };
    gradient_suite::check_leaves(&inputs, &scalar, 1e-3, 1e-4);
}

fn kernels() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut t = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0));
    let away = Tensor::from_fn(vec![2, 5], |i| (0.1 + 0.08 * i as f64) * if i % 2 == 0 { 1.0 } else { -1.0 });
    let pos = Tensor::from_fn(vec![2, 5], |i| 0.2 + 0.15 * i as f64);
    let coords: Vec<[f64; 2]> = vec![[-0.7, 1.2], [0.3, 3.6], [2.5, 4.9], [1.1, -1.2], [3.4, 2.2]];
    let rows = vec![3, 0, 2, 2, 1];
    let masks: Vec<Tensor<f64>> = (0..3).map(|k| Tensor::from_fn(vec![2, 3], |i| ((i + k) % 3 != 0) as u8 as f64)).collect();
    let cases: Vec<(Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>)> = vec![
        (vec![t(&[3, 4]), t(&[3, 4])], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        (vec![t(&[3, 4]), t(&[3, 4])], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        (vec![t(&[3, 4]), t(&[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        (vec![t(&[5])], Box::new(|t, v| t.affine(v[0], -1.7, 0.3).unwrap())),
        (vec![t(&[4, 3]), t(&[2, 4])], Box::new(|t, v| t.matmul_t(v[0], v[1], true, true).unwrap())),
        (vec![t(&[3, 4]), t(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        (vec![t(&[2, 5, 6]), t(&[3, 2, 3, 3]), t(&[3])], Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap())),
        (vec![t(&[2, 4, 4, 3]), t(&[2, 2, 3, 3, 3]), t(&[2])], Box::new(|t, v| t.conv3d(v[0], v[1], Some(v[2]), 1, 1).unwrap())),
        (vec![t(&[3, 4, 5])], Box::new(move |t, v| t.gather2d(v[0], &coords, Boundary::Zero).unwrap())),
        (vec![t(&[2, 3, 4])], Box::new(|t, v| t.mean_axis(v[0], 1).unwrap())),
        (vec![t(&[2, 3, 4])], Box::new(|t, v| t.sum_axis(v[0], 2).unwrap())),
        (vec![t(&[2, 3]), t(&[2, 2])], Box::new(|t, v| t.concat(v, 1).unwrap())),
        (vec![away.clone()], Box::new(|t, v| t.relu(v[0]).unwrap())),
        (vec![away.clone()], Box::new(|t, v| t.softplus(v[0]).unwrap())),
        (vec![away.clone()], Box::new(|t, v| t.sigmoid(v[0]).unwrap())),
        (vec![away.clone()], Box::new(|t, v| t.tanh(v[0]).unwrap())),
        (vec![away.clone()], Box::new(|t, v| t.exp(v[0]).unwrap())),
        (vec![away], Box::new(|t, v| t.square(v[0]).unwrap())),
        (vec![pos], Box::new(|t, v| t.log(v[0]).unwrap())),
        (vec![t(&[2, 1, 3])], Box::new(|t, v| t.broadcast_to(v[0], &[2, 4, 3]).unwrap())),
        (vec![t(&[2, 3, 4])], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]).unwrap())),
        (vec![t(&[2, 3, 4])], Box::new(|t, v| t.upsample2x(v[0]).unwrap())),
        (vec![t(&[4, 3])], Box::new(move |t, v| t.index_rows(v[0], &rows).unwrap())),
        (vec![t(&[2, 3, 4])], Box::new(|t, v| t.total_variation(v[0]).unwrap())),
        (vec![t(&[2, 2, 3]), t(&[2, 2, 3]), t(&[2, 2, 3])], Box::new(move |t, v| t.masked_mean(v, &masks).unwrap())),
        (vec![t(&[3, 5])], Box::new(|t, v| t.cumsum_exclusive(v[0]).unwrap())),
    ];
    for (i, (inputs, build)) in cases.into_iter().enumerate() {
        checked_leaves(inputs, &*build, i as u64);
    }
}

fn gradient_suite() -> Outcome {
    kernels();
    gradient_suite::check_sample_features_against_differences();
    gradient_suite::check_tv_loss_against_differences();
    gradient_suite::check_vq_loss_routes_each_term_to_one_side();
    gradient_suite::check_materialize_against_differences();
    gradient_suite::check_adapter_forward_against_differences();
    gradient_suite::check_point_evaluation_against_differences();
    gradient_suite::check_rate_against_differences();
    gradient_suite::check_photometric_loss_against_differences_on_a_probe();
    Ok("26 kernels and 8 model operators within 1e-4 (composites 1e-3)".into())
}

fn identity_and_frozen_base() -> Outcome {
    let model = Pretrained::new(Profile::desk(), 0).map_err(|e| e.to_string())?;
    let (scene, _) = synth_scene(&SynthSpec::random(12, 8, 16)).map_err(|e| e.to_string())?;
    let idx = model.encode_indices(&scene).map_err(|e| e.to_string())?;
    let base = model.scene_from_indices(&idx).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default().with_mode(Mode::Peft);
    let fresh = FinetuneState::new(base.clone(), Mode::Peft, &model.profile, &cfg).map_err(|e| e.to_string())?;
    if !codec_suite::renders_equal(&base, &fresh.scene, &scene, &model.profile) {
        return Err("fresh PEFT state renders differently from the base".into());
    }
    let (start, st) = peft_suite::run_steps(Mode::Peft, 500);
    let frozen = st.scene.planes.bit_eq(&start.planes)
        && peft_suite::snapshot(&DenseParams(&st.scene.decoder.coarse)) == peft_suite::snapshot(&DenseParams(&start.decoder.coarse))
        && peft_suite::snapshot(&DenseParams(&st.scene.decoder.fine)) == peft_suite::snapshot(&DenseParams(&start.decoder.fine));
    check(frozen && st.iteration == 500, format!("identity bitwise, base frozen after {} steps", st.iteration))
}

const BASE_STEPS: u64 = 1500;
const BATCH: usize = 128;
const SIZE: usize = 24;
const VIEWS: usize = 50;

fn trained_base() -> Pretrained {
    let p = Profile::desk();
    let scenes: Vec<Scene> = (100..116).map(|i| synth_scene(&SynthSpec::random(i, VIEWS, SIZE)).unwrap().0).collect();
    let cfg = TrainConfig {
        mode: TrainMode::TrainBase,
        iterations: BASE_STEPS,
        batch_rays: BATCH,
        ..TrainConfig::default()
    };
    let mut tr = BaseTrainer::new(Pretrained::new(p, 0).unwrap(), scenes, &cfg).unwrap();
    tr.run(&cfg, |_, _| {}).unwrap();
    tr.model
}

fn psnr_curve(start: SceneModel, mode: Mode, scene: &Scene, p: &Profile, idx: &[Vec<usize>; 3], cfg: &TrainConfig) -> Vec<f64> {
    let mut st = FinetuneState::new(start, mode, p, cfg).unwrap();
    st.run(scene, p, idx, cfg, |_| {}).unwrap().iter().map(|r| r.psnr).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn convergence(model: &Pretrained) -> Outcome {
    let p = &model.profile;
    let mut ok = true;
    let mut lines = Vec::new();
    for s in 0..5 {
        let scene = synth_scene(&SynthSpec::random(s, VIEWS, SIZE)).unwrap().0;
        let idx = model.encode_indices(&scene).unwrap();
        let (mut peft, mut scratch) = (vec![Vec::new(); 3], vec![Vec::new(); 3]);
        for seed in 0..3 {
            let cfg = TrainConfig {
                iterations: 500,
                seed,
                batch_rays: BATCH,
                checkpoints: vec![0, 100, 500],
                ..TrainConfig::default()
            };
            let a = psnr_curve(model.scene_from_indices(&idx).unwrap(), Mode::Peft, &scene, p, &idx, &cfg.clone().with_mode(Mode::Peft));
            let from_scratch = SceneModel {
                planes: Triplanes::random(p.channels, p.resolutions, 0.1, seed),
                delta: None,
                decoder: Decoder::new(p, seed),
            };
            let b = psnr_curve(from_scratch, Mode::FullFt, &scene, p, &idx, &cfg.with_mode(Mode::FullFt));
            for k in 0..3 {
                peft[k].push(a[k]);
                scratch[k].push(b[k]);
            }
        }
        let pm: Vec<f64> = peft.into_iter().map(median).collect();
        let sm: Vec<f64> = scratch.into_iter().map(median).collect();
        let scene_ok = pm[1] > sm[1] && pm[2] > sm[2] && pm[2] - pm[0] >= 5.0;
        ok &= scene_ok;
        lines.push(format!(
            "scene {s}: peft {:.2}/{:.2}/{:.2} scratch {:.2}/{:.2}/{:.2}{}",
            pm[0],
            pm[1],
            pm[2],
            sm[0],
            sm[1],
            sm[2],
            if scene_ok { "" } else { " (miss)" }
        ));
    }
    check(ok, format!("median PSNR at 0/100/500; {}", lines.join("; ")))
}

fn rate_distortion(model: &Pretrained) -> Outcome {
    let p = &model.profile;
    let scene = synth_scene(&SynthSpec::random(0, VIEWS, SIZE)).unwrap().0;
    let idx = model.encode_indices(&scene).unwrap();
    let mut payloads = Vec::new();
    for lambda in [1e-4f32, 1e-3, 1e-2] {
        let cfg = TrainConfig {
            iterations: 500,
            batch_rays: BATCH,
            lambda_rate: lambda,
            checkpoints: vec![],
            ..TrainConfig::default()
        }
        .with_mode(Mode::PeftPlus);
        let mut st = FinetuneState::new(model.scene_from_indices(&idx).unwrap(), Mode::PeftPlus, p, &cfg).unwrap();
        st.run(&scene, p, &idx, &cfg, |_| {}).unwrap();
        payloads.push(st.pack(p, &idx).unwrap().size_report().feature);
    }
    let raw = 1_032_192;
    let ok = payloads.windows(2).all(|w| w[1] as f64 <= 1.05 * w[0] as f64) && payloads.iter().all(|&b| b < raw);
    check(ok, format!("entropy-coded M payloads {payloads:?} B for 1e-4/1e-3/1e-2, raw {raw} B"))
}

fn oracles() -> Outcome {
    vq_suite::check_quantize_matches_exhaustive_search_on_random_codebooks();
    encoder_suite::check_axis_pool_matches_brute_force();
    render_suite::check_homogeneous_slab_matches_closed_form();
    Ok("VQ on 100 codebooks, axis pooling, slab within 1%".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenes: Vec<Scene> = (200..202).map(|i| synth_scene(&SynthSpec::random(i, 10, 16)).unwrap().0).collect();
    let base_cfg = TrainConfig {
        mode: TrainMode::TrainBase,
        iterations: 20,
        batch_rays: 64,
        ..TrainConfig::default()
    };
    let base_run = |tag: &str| {
        let mut tr = BaseTrainer::new(Pretrained::new(Profile::desk(), 3).unwrap(), scenes.clone(), &base_cfg).unwrap();
        tr.run(&base_cfg, |_, _| {}).unwrap();
        let path = dir.path().join(format!("base_{tag}.ckpt"));
        tr.save(&path).unwrap();
        (std::fs::read(path).unwrap(), tr.model)
    };
    let (a, model) = base_run("a");
    let (b, _) = base_run("b");
    if a != b {
        return Err("base checkpoints differ".into());
    }
    let scene = synth_scene(&SynthSpec::random(202, 10, 16)).unwrap().0;
    let idx = model.encode_indices(&scene).unwrap();
    let cfg = TrainConfig {
        iterations: 30,
        batch_rays: 64,
        seed: 4,
        checkpoints: vec![0, 10, 30],
        ..TrainConfig::default()
    }
    .with_mode(Mode::PeftPlus);
    let finetune_run = |tag: &str| {
        let mut st = FinetuneState::new(model.scene_from_indices(&idx).unwrap(), Mode::PeftPlus, &model.profile, &cfg).unwrap();
        let rows = st.run(&scene, &model.profile, &idx, &cfg, |_| {}).unwrap();
        let path = dir.path().join(format!("ft_{tag}.ckpt"));
        st.save(&path).unwrap();
        (write_csv(&rows, false), st.pack(&model.profile, &idx).unwrap().to_bytes(), std::fs::read(path).unwrap())
    };
    let (x, y) = (finetune_run("a"), finetune_run("b"));
    check(
        x == y,
        format!("base checkpoints ({} B), metrics CSV, bitstreams ({} B) and finetune checkpoints identical", a.len(), x.1.len()),
    )
}

fn main() {
    if std::env::var_os("CODEC_THREADS").is_none() {
        std::env::set_var("CODEC_THREADS", "1");
    }
    let mut passed = Vec::new();
    passed.push(run(1, "size accounting", size_accounting));
    passed.push(run(2, "codec round trip", codec_round_trip));
    passed.push(run(3, "end-to-end fidelity", end_to_end));
    passed.push(run(4, "gradient suite", gradient_suite));
    passed.push(run(5, "zero-delta identity and frozen base", identity_and_frozen_base));
    let start = Instant::now();
    let model = trained_base();
    println!("trained base: {BASE_STEPS} steps on 16 scenes in {:.0}s", start.elapsed().as_secs_f64());
    passed.push(run(6, "convergence trend", || convergence(&model)));
    passed.push(run(7, "rate-distortion", || rate_distortion(&model)));
    passed.push(run(8, "oracle equivalences", oracles));
    passed.push(run(9, "determinism", determinism));
    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
