//! Analytic gradients of the model-level operators against central
//! differences, evaluated on f64 tapes.

mod common;

use nerfcodec::autodiff::{Tape, Tensor, Var};
use nerfcodec::entropy::{rate_bits, DensityModel};
use nerfcodec::model::Pretrained;
use nerfcodec::param::{GradMap, Graph, Module, Param, Trainable};
use nerfcodec::peft::{prepare, Mode};
use nerfcodec::render::{render_at, render_rays, Linear, RadianceField, RenderConfig, SceneModel};
use nerfcodec::scene::{synth_scene, SynthSpec};
use nerfcodec::triplane::{materialize, sample_features, tv_loss, DeltaVars, FieldVars, Triplanes};
use nerfcodec::vq::vq_loss;
use nerfcodec::Profile;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const TOL_COMPOSITE: f64 = 1e-3;
const STEP: f32 = 1e-4;

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-8)
}

fn weights(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn project(tape: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> Var {
    let w = tape.constant(w.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

/// Checks tape leaves built from `inputs` by central differences.
pub fn check_leaves(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, eps: f64, tol: f64) {
    let eval = |inputs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).item(), vars.iter().map(|&v| g.wrt(v)).collect())
    };
    let (_, analytic) = eval(inputs);
    for (i, ga) in analytic.iter().enumerate() {
        let mut probe = inputs.to_vec();
        let fd: Vec<f64> = (0..inputs[i].len())
            .map(|j| {
                let x = inputs[i].data()[j];
                probe[i].data_mut()[j] = x + eps;
                let up = eval(&probe).0;
                probe[i].data_mut()[j] = x - eps;
                let down = eval(&probe).0;
                probe[i].data_mut()[j] = x;
                (up - down) / (2.0 * eps)
            })
            .collect();
        let err = rel_error(ga.data(), &fd);
        assert!(err <= tol, "input {i}: relative error {err:e}");
    }
}

fn nudge(m: &mut dyn Module, index: usize, entry: usize, step: f32) -> f32 {
    let mut i = 0;
    let mut moved = 0.0;
    m.visit_mut(&mut |p: &mut Param| {
        if i == index {
            let t = p.make_mut();
            let before = t.data()[entry];
            t.data_mut()[entry] = before + step;
            moved = t.data()[entry] - before;
        }
        i += 1;
    });
    moved
}

/// Checks parameters of `m` by central differences on f32 storage, dividing
/// by the step actually stored. At most `per_param` entries per parameter
/// are probed, favouring those with the largest analytic gradient.
fn check_params<M: Module + Clone>(
    m: &M,
    eval: &dyn Fn(&M, &Trainable) -> (f64, GradMap),
    step: f32,
    per_param: usize,
    tol: f64,
) {
    let all = Trainable::none().with(m);
    let (_, grads) = eval(m, &all);
    let none = Trainable::none();
    let mut params = Vec::new();
    m.visit(&mut |p| params.push(p.clone()));
    let (mut an, mut fd) = (Vec::new(), Vec::new());
    let mut r = common::rng(99);
    for (index, p) in params.iter().enumerate() {
        let g: Vec<f64> = grads.get(p).map_or(vec![0.0; p.len()], |t| t.data().iter().map(|&v| v as f64).collect());
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let mut picks: Vec<usize> = order.iter().take(per_param / 2).copied().collect();
        while picks.len() < per_param.min(p.len()) {
            let j = r.random_range(0..p.len());
            if !picks.contains(&j) {
                picks.push(j);
            }
        }
        for j in picks {
            let (mut up, mut down) = (m.clone(), m.clone());
            let a = nudge(&mut up, index, j, step);
            let b = nudge(&mut down, index, j, -step);
            let diff = (eval(&up, &none).0 - eval(&down, &none).0) / (a as f64 - b as f64);
            an.push(g[j]);
            fd.push(diff);
        }
    }
    let err = rel_error(&an, &fd);
    assert!(err <= tol, "relative error {err:e} over {} probes", an.len());
}

fn points(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| std::array::from_fn(|_| r.random_range(-1.1..1.1))).collect()
}

#[test]
fn sample_features_against_differences() {
    check_sample_features_against_differences();
}

pub fn check_sample_features_against_differences() {
    let mut r = common::rng(1);
    let (c, res, rank) = (2, [2, 3, 4], 2);
    let mut inputs: Vec<Tensor<f64>> = Vec::new();
    for s in 0..3 {
        for _ in 0..3 {
            inputs.push(weights(&mut r, &[c, res[s], res[s]]));
        }
    }
    for s in 0..3 {
        for _ in 0..3 * rank {
            inputs.push(weights(&mut r, &[1, res[s], res[s]]));
        }
    }
    for _ in 0..3 * rank {
        inputs.push(weights(&mut r, &[1, c]));
    }
    let pts = points(&mut r, 12);
    let w = weights(&mut r, &[12, 3 * c]);
    check_leaves(
        &inputs,
        &|tape, v| {
            let field = FieldVars {
                channels: c,
                resolutions: res,
                base: v[..9].to_vec(),
                delta: Some(DeltaVars {
                    rank,
                    matrices: v[9..9 + 9 * rank].to_vec(),
                    vectors: v[9 + 9 * rank..].to_vec(),
                }),
            };
            let f = sample_features(tape, &field, &pts).unwrap();
            project(tape, f, &w)
        },
        1e-3,
        TOL,
    );
}

#[test]
fn tv_loss_against_differences() {
    check_tv_loss_against_differences();
}

pub fn check_tv_loss_against_differences() {
    let mut r = common::rng(2);
    let (c, res) = (2, [2, 3, 3]);
    let mut inputs: Vec<Tensor<f64>> = (0..9).map(|i| weights(&mut r, &[c, res[i / 3], res[i / 3]])).collect();
    inputs.extend((0..9).map(|i| weights(&mut r, &[1, res[i / 3], res[i / 3]])));
    inputs.extend((0..3).map(|_| weights(&mut r, &[1, c])));
    check_leaves(
        &inputs,
        &|tape, v| {
            let field = FieldVars {
                channels: c,
                resolutions: res,
                base: v[..9].to_vec(),
                delta: Some(DeltaVars {
                    rank: 1,
                    matrices: v[9..18].to_vec(),
                    vectors: v[18..].to_vec(),
                }),
            };
            tv_loss(tape, &field).unwrap()
        },
        1e-3,
        TOL,
    );
}

#[test]
fn materialize_against_differences() {
    check_materialize_against_differences();
}

pub fn check_materialize_against_differences() {
    let mut r = common::rng(3);
    let inputs: Vec<Tensor<f64>> = vec![
        weights(&mut r, &[1, 3, 3]),
        weights(&mut r, &[1, 3, 3]),
        weights(&mut r, &[1, 2]),
        weights(&mut r, &[1, 2]),
    ];
    let w = weights(&mut r, &[2, 3, 3]);
    check_leaves(
        &inputs,
        &|tape, v| {
            // Rank 2 at a single scale and plane: matrices for plane 0 only.
            let d = DeltaVars {
                rank: 2,
                matrices: vec![v[0], v[1]],
                vectors: vec![v[2], v[3]],
            };
            let m = materialize(tape, &d, 2, 3, 0, 0).unwrap();
            project(tape, m, &w)
        },
        1e-3,
        TOL,
    );
}

#[test]
fn vq_loss_routes_each_term_to_one_side() {
    check_vq_loss_routes_each_term_to_one_side();
}

pub fn check_vq_loss_routes_each_term_to_one_side() {
    let mut r = common::rng(4);
    let l = weights(&mut r, &[3, 2, 2]);
    let e = weights(&mut r, &[3, 2, 2]);
    let n = l.len() as f64;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    let beta = 0.25;
    let mut tape = Tape::<f64>::new();
    let (lv, ev) = (tape.leaf(l.clone()), tape.leaf(e.clone()));
    let loss = vq_loss(&mut tape, lv, ev, beta).unwrap();
    let g = tape.backward(loss).unwrap();
    let (gl, ge) = (g.wrt(lv), g.wrt(ev));
    let eps = 1e-4;
    let mut fd_l = Vec::new();
    let mut fd_e = Vec::new();
    for j in 0..l.len() {
        let (mut up, mut down) = (l.clone(), l.clone());
        up.data_mut()[j] += eps;
        down.data_mut()[j] -= eps;
        fd_l.push(beta * (sq(up.data(), e.data()) - sq(down.data(), e.data())) / (2.0 * eps));
        let (mut up, mut down) = (e.clone(), e.clone());
        up.data_mut()[j] += eps;
        down.data_mut()[j] -= eps;
        fd_e.push((sq(l.data(), up.data()) - sq(l.data(), down.data())) / (2.0 * eps));
    }
    assert!(rel_error(gl.data(), &fd_l) <= TOL);
    assert!(rel_error(ge.data(), &fd_e) <= TOL);
}

#[test]
fn adapter_forward_against_differences() {
    check_adapter_forward_against_differences();
}

pub fn check_adapter_forward_against_differences() {
    let mut r = common::rng(5);
    let mut layer = Linear::new("probe", 6, 5, 0);
    layer.attach_lora(2, 0);
    let up = Tensor::from_fn([5, 2], |_| r.random_range(-0.5f32..0.5));
    layer.lora.as_mut().unwrap().up.set(up).unwrap();
    let x = weights(&mut r, &[7, 6]);
    let w = weights(&mut r, &[7, 5]);
    check_params(
        &layer,
        &|m, t| {
            let mut g: Graph<f64> = Graph::new(t);
            let xv = g.constant(x.clone());
            let y = m.forward(&mut g, xv).unwrap();
            let l = project(&mut g.tape, y, &w);
            (g.value(l).item(), if t.is_empty() { GradMap::default() } else { g.gradients(l).unwrap() })
        },
        1e-2,
        64,
        TOL,
    );
}

fn small_scene(seed: u64) -> SceneModel {
    let p = Profile::desk();
    let mut s = SceneModel {
        planes: Triplanes::random(p.channels, p.resolutions, 0.5, seed),
        delta: None,
        decoder: Pretrained::new(p.clone(), seed).unwrap().decoder,
    };
    prepare(&mut s, Mode::Peft, 1, 2, seed).unwrap();
    let mut r = common::rng(seed);
    for l in s.decoder.coarse.layers_mut().chain(s.decoder.fine.layers_mut()) {
        let lora = l.lora.as_mut().unwrap();
        let t = Tensor::from_fn(lora.up.shape().to_vec(), |_| r.random_range(-0.1f32..0.1));
        lora.up.set(t).unwrap();
    }
    let d = s.delta.as_mut().unwrap();
    for v in &mut d.vectors {
        let t = Tensor::from_fn(v.shape().to_vec(), |_| r.random_range(-0.5f32..0.5));
        v.set(t).unwrap();
    }
    s
}

#[test]
fn point_evaluation_against_differences() {
    check_point_evaluation_against_differences();
}

pub fn check_point_evaluation_against_differences() {
    let s = small_scene(6);
    let mut r = common::rng(7);
    let pts = points(&mut r, 6);
    let dirs: Vec<[f64; 3]> = (0..6)
        .map(|_| {
            let d: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.map(|v| v / n)
        })
        .collect();
    let (ws, wc) = (weights(&mut r, &[6, 1]), weights(&mut r, &[6, 3]));
    check_params(
        &s,
        &|m, t| {
            let mut g: Graph<f64> = Graph::new(t);
            let bound = m.bind(&mut g, None).unwrap();
            let (sigma, rgb) = bound.query(&mut g, &pts, &dirs, true).unwrap();
            let a = project(&mut g.tape, sigma, &ws);
            let b = project(&mut g.tape, rgb, &wc);
            let l = g.tape.add(a, b).unwrap();
            (g.value(l).item(), if t.is_empty() { GradMap::default() } else { g.gradients(l).unwrap() })
        },
        1e-3,
        8,
        TOL,
    );
}

#[test]
fn rate_against_differences() {
    check_rate_against_differences();
}

pub fn check_rate_against_differences() {
    let mut r = common::rng(8);
    let models = vec![DensityModel::new("rate.0"), DensityModel::new("rate.1")];
    let mut m = models.clone();
    for model in &mut m {
        model.visit_mut(&mut |p| {
            let t = p.value().map(|v| v + 0.3 * (v.abs() + 0.5) * if v > 0.0 { 1.0 } else { -1.0 });
            p.set(t).unwrap();
        });
    }
    let values: Vec<Param> = (0..2)
        .map(|i| {
            let t = Tensor::from_fn([1, 4, 4], |_| r.random_range(-3.0f32..3.0));
            Param::new(format!("values.{i}"), t, nerfcodec::param::LrGroup::Field)
        })
        .collect();
    let noise: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::from_fn([1, 4, 4], |_| r.random_range(-0.5..0.5))).collect();
    let state = (m, values);
    #[derive(Clone)]
    struct State(Vec<DensityModel>, Vec<Param>);
    impl Module for State {
        fn visit(&self, f: &mut dyn FnMut(&Param)) {
            self.0.visit(f);
            self.1.visit(f);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            self.0.visit_mut(f);
            self.1.visit_mut(f);
        }
    }
    check_params(
        &State(state.0, state.1),
        &|s, t| {
            let mut g: Graph<f64> = Graph::new(t);
            let noisy: Vec<Var> = s
                .1
                .iter()
                .zip(&noise)
                .map(|(p, u)| {
                    let v = g.param(p);
                    let u = g.constant(u.clone());
                    g.tape.add(v, u).unwrap()
                })
                .collect();
            let l = rate_bits(&mut g, &s.0, &noisy).unwrap();
            (g.value(l).item(), if t.is_empty() { GradMap::default() } else { g.gradients(l).unwrap() })
        },
        1e-3,
        6,
        TOL,
    );
}

/// The analytic gradient treats fine-pass sample positions as constants, so
/// the differences hold them at their unperturbed values.
#[test]
fn photometric_loss_against_differences_on_a_probe() {
    check_photometric_loss_against_differences_on_a_probe();
}

pub fn check_photometric_loss_against_differences_on_a_probe() {
    let p = Profile::desk();
    let s = small_scene(9);
    let (scene, _) = synth_scene(&SynthSpec::random(9, 2, 4)).unwrap();
    let view = &scene.views[0];
    let rays = view.generate_rays(scene.near, scene.far);
    let keys: Vec<u64> = (0..rays.len() as u64).collect();
    let target = Tensor::<f64>::new([rays.len(), 3], view.image.rgb.iter().map(|&v| v as f64).collect()).unwrap();
    let cfg = RenderConfig::for_profile(&p, scene.background);
    let fine_t = {
        let none = Trainable::none();
        let mut g: Graph<f64> = Graph::new(&none);
        let bound = s.bind(&mut g, None).unwrap();
        let out = render_rays(&mut g, &bound, &rays, &keys, &cfg).unwrap();
        let (again, _) = render_at(&mut g, &bound, &rays, out.fine_t.clone(), &cfg, true).unwrap();
        assert_eq!(g.value(again).data(), g.value(out.fine).data());
        out.fine_t
    };
    check_params(
        &s.planes,
        &|planes, t| {
            let model = SceneModel { planes: planes.clone(), ..s.clone() };
            let mut g: Graph<f64> = Graph::new(t);
            let bound = model.bind(&mut g, None).unwrap();
            let out = render_rays(&mut g, &bound, &rays, &keys, &cfg).unwrap();
            let fine = if t.is_empty() { render_at(&mut g, &bound, &rays, fine_t.clone(), &cfg, true).unwrap().0 } else { out.fine };
            let y = g.constant(target.clone());
            let mut total = None;
            for pred in [out.coarse, fine] {
                let d = g.tape.sub(pred, y).unwrap();
                let d = g.tape.square(d).unwrap();
                let d = g.tape.sum(d).unwrap();
                total = Some(match total {
                    Some(a) => g.tape.add(a, d).unwrap(),
                    None => d,
                });
            }
            let l = g.tape.scale(total.unwrap(), 1.0 / (3 * rays.len()) as f64).unwrap();
            (g.value(l).item(), if t.is_empty() { GradMap::default() } else { g.gradients(l).unwrap() })
        },
        STEP,
        16,
        TOL_COMPOSITE,
    );
}
