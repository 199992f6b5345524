use std::path::Path;

use nerfcodec_autodiff::{Tensor, Var};

use super::{as_divergence, photometric, RaySet, TrainConfig};
use crate::error::{CodecError, Result};
use crate::model::Pretrained;
use crate::param::{Adam, Graph, Trainable};
use crate::render::{RenderConfig, SceneModel};
use crate::rng::{self, tag};
use crate::scene::Scene;
use crate::tensor_io::{assign, module_tensors, TensorFile};
use crate::triplane::{tv_loss, FieldVars, Triplanes};
use crate::vq::{lookup, quantize, vq_loss};
use rand::Rng;

/// Loss terms of one base-training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BaseStep {
    pub scene: usize,
    pub rgb: f64,
    pub vq: f64,
    pub tv: f64,
    pub total: f64,
    /// Codebook rows re-seeded after this step.
    pub reseeded: usize,
}

/// End-to-end training of encoder, code path, generator and decoder over a
/// set of scenes.
pub struct BaseTrainer {
    pub model: Pretrained,
    pub adam: Adam,
    pub iteration: u64,
    scenes: Vec<(Scene, RaySet)>,
    usage: Vec<u64>,
    recent_codes: Vec<Vec<f32>>,
}

impl BaseTrainer {
    pub fn new(model: Pretrained, scenes: Vec<Scene>, cfg: &TrainConfig) -> Result<Self> {
        if scenes.is_empty() {
            return Err(CodecError::Scene("base training needs at least one scene".into()));
        }
        let scenes = scenes
            .into_iter()
            .map(|s| {
                let set = RaySet::training(&s);
                if s.encoder_views().is_empty() || set.rays.is_empty() {
                    Err(CodecError::Scene("every training scene needs encoder-input and training views".into()))
                } else {
                    Ok((s, set))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let k = model.codes.codebook_size();
        Ok(Self {
            model,
            adam: Adam::new(cfg.adam()),
            iteration: 0,
            scenes,
            usage: vec![0; k],
            recent_codes: Vec::new(),
        })
    }

    pub fn scenes(&self) -> usize {
        self.scenes.len()
    }

    pub fn step(&mut self, cfg: &TrainConfig) -> Result<BaseStep> {
        let it = self.iteration;
        self.try_step(cfg).map_err(|e| as_divergence(e, it))
    }

    fn try_step(&mut self, cfg: &TrainConfig) -> Result<BaseStep> {
        let it = self.iteration;
        let si = rng::stream(cfg.seed, &[tag::BATCH, it, 1]).random_range(0..self.scenes.len());
        let (scene, set) = &self.scenes[si];
        let m = &self.model;
        let p = &m.profile;

        let all = Trainable::none().with(m);
        let mut g = Graph::<f32>::new(&all);
        let pooled = m.encoder.planes(&mut g, &scene.encoder_views())?;
        let book = g.param(&m.codes.codebook);
        let mut vq_terms = Vec::with_capacity(3);
        let mut ups = Vec::with_capacity(3);
        let mut used = Vec::new();
        let mut codes_seen = Vec::new();
        for plane in pooled {
            let l = m.codes.downsample(&mut g, plane)?;
            let s = g.tape.shape(l).to_vec();
            let idx = quantize(g.tape.value(book), g.tape.value(l))?;
            let e = lookup(&mut g.tape, book, &idx, s[1], s[2])?;
            vq_terms.push(vq_loss(&mut g.tape, l, e, cfg.lambda_commit)?);
            let lv = g.value(l);
            let n = s[1] * s[2];
            codes_seen.extend((0..n).map(|i| (0..s[0]).map(|c| lv.data()[c * n + i]).collect::<Vec<f32>>()));
            used.extend(idx);
            ups.push(m.codes.upsample(&mut g, l)?);
        }
        let generated = m.generator.forward(&mut g, [ups[0], ups[1], ups[2]])?;
        let vq = sum_scaled(&mut g, &vq_terms, 1.0 / 3.0)?;
        let field = FieldVars {
            channels: p.channels,
            resolutions: p.resolutions,
            base: generated.clone(),
            delta: None,
        };
        let tv = tv_loss(&mut g.tape, &field)?;
        let tv_w = g.tape.scale(tv, cfg.lambda_tv)?;
        let aux = g.tape.add(vq, tv_w)?;

        let planes = Triplanes::from_fn(p.channels, p.resolutions, |s, k| g.value(generated[s * 3 + k]).clone())?;
        let rendered = SceneModel {
            planes,
            delta: None,
            decoder: m.decoder.clone(),
        };
        let render_train = Trainable::none().with(&rendered);
        let rcfg = RenderConfig {
            perturb: true,
            seed: cfg.seed,
            ..RenderConfig::for_profile(p, scene.background)
        };
        let batch = set.sample(cfg.seed, it, cfg.batch_rays);
        let (rgb, mut grads) = photometric(set, &batch, &render_train, &rcfg, it, &rendered, None)?;

        let mut seeds: Vec<(Var, Tensor)> = Vec::with_capacity(10);
        for (i, &v) in generated.iter().enumerate() {
            let plane = rendered.planes.plane(i / 3, i % 3);
            let grad = grads.get(plane).cloned().unwrap_or_else(|| Tensor::zeros(plane.shape().to_vec()));
            seeds.push((v, grad));
        }
        seeds.push((aux, Tensor::scalar(1.0)));
        grads.merge(g.gradients_with(seeds)?);

        let vq_v = g.value(vq).item() as f64;
        let tv_v = g.value(tv).item() as f64;
        let total = rgb + vq_v + cfg.lambda_tv as f64 * tv_v;
        if !total.is_finite() || !grads.is_finite() {
            return Err(CodecError::Diverged {
                iteration: it as usize,
                loss: total as f32,
            });
        }
        drop(g);
        self.adam.step(&mut self.model, &grads);
        for i in used {
            self.usage[i] += 1;
        }
        let keep = self.usage.len().max(64);
        self.recent_codes.extend(codes_seen);
        if self.recent_codes.len() > keep {
            let drop_n = self.recent_codes.len() - keep;
            self.recent_codes.drain(..drop_n);
        }
        self.iteration += 1;
        let mut reseeded = 0;
        if self.iteration % self.scenes.len() as u64 == 0 {
            reseeded = self.model.codes.reseed_dead(&self.usage, &self.recent_codes, cfg.seed ^ self.iteration);
            self.usage.iter_mut().for_each(|u| *u = 0);
        }
        Ok(BaseStep {
            scene: si,
            rgb,
            vq: vq_v,
            tv: tv_v,
            total,
            reseeded,
        })
    }

    pub fn run(&mut self, cfg: &TrainConfig, mut on_step: impl FnMut(u64, &BaseStep)) -> Result<()> {
        while self.iteration < cfg.iterations {
            let s = self.step(cfg)?;
            on_step(self.iteration, &s);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = TensorFile::default();
        f.meta.insert("kind".into(), "base".into());
        f.meta.insert(
            "profile".into(),
            serde_json::to_string(&self.model.profile).expect("profile serializes"),
        );
        f.meta.insert("iteration".into(), self.iteration.to_string());
        f.meta.insert("adam_step".into(), self.adam.steps().to_string());
        f.meta.insert("usage".into(), serde_json::to_string(&self.usage).expect("counts serialize"));
        f.tensors = module_tensors(&self.model);
        f.tensors.extend(self.adam.state().1);
        for (i, c) in self.recent_codes.iter().enumerate() {
            f.tensors.push((format!("recent.{i}"), Tensor::new([c.len()], c.clone())?));
        }
        f.save(path)
    }

    /// Restores model, optimizer and codebook statistics saved by
    /// [`BaseTrainer::save`] into a trainer over the same scenes.
    pub fn resume(mut self, path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let f = TensorFile::load(path)?;
        let bad = |d: &str| CodecError::Parse {
            path: path.to_path_buf(),
            detail: d.to_string(),
        };
        if f.meta("kind") != Some("base") {
            return Err(bad("not a base-training checkpoint"));
        }
        let num = |k: &str| f.meta(k).and_then(|v| v.parse::<u64>().ok()).ok_or_else(|| bad(&format!("missing {k}")));
        self.iteration = num("iteration")?;
        let step = num("adam_step")?;
        self.usage = serde_json::from_str(f.meta("usage").ok_or_else(|| bad("missing usage"))?).map_err(|e| bad(&e.to_string()))?;
        assign(&mut self.model, &f)?;
        let moments: Vec<(String, Tensor)> = f.tensors.iter().filter(|(n, _)| n.starts_with("adam.")).cloned().collect();
        self.adam = Adam::restore(cfg.adam(), step, &moments)?;
        self.recent_codes = f
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("recent."))
            .map(|(_, t)| t.data().to_vec())
            .collect();
        Ok(self)
    }
}

fn sum_scaled(g: &mut Graph<'_, f32>, terms: &[Var], s: f32) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.tape.add(acc, t)?;
    }
    Ok(g.tape.scale(acc, s)?)
}
