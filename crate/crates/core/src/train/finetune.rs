use std::path::Path;
use std::time::Instant;

use nerfcodec_autodiff::Tensor;
use rand_distr::{Distribution, Uniform};

use super::{as_divergence, evaluate, photometric, MetricsRow, RaySet, TrainConfig, TrainMode};
use crate::codec::pack;
use crate::entropy::{megabytes, rate_bits, stream_models, Bitstream, DensityModel};
use crate::error::{CodecError, Result};
use crate::param::{Adam, GradMap, Graph, Module, Param, Trainable};
use crate::peft::{prepare, trainable_params, Mode};
use crate::profile::Profile;
use crate::render::{RenderConfig, SceneModel};
use crate::rng::{self, tag};
use crate::scene::Scene;
use crate::tensor_io::{assign, module_tensors, TensorFile};
use crate::triplane::tv_loss;

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub rgb: f64,
    pub tv: f64,
    /// Bits per delta-matrix entry.
    pub rate: f64,
    pub total: f64,
}

/// Everything a finetuning run updates, plus its optimizer.
#[derive(Clone, Debug)]
pub struct FinetuneState {
    pub mode: Mode,
    pub scene: SceneModel,
    /// One density model per delta matrix in entropy-coded mode, else empty.
    pub models: Vec<DensityModel>,
    pub adam: Adam,
    pub iteration: u64,
}

impl Module for FinetuneState {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.scene.visit(f);
        self.models.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.scene.visit_mut(f);
        self.models.visit_mut(f);
    }
}

impl FinetuneState {
    /// Starts from a feed-forward representation, attaching deltas, adapters
    /// and density models as `mode` requires.
    pub fn new(mut base: SceneModel, mode: Mode, profile: &Profile, cfg: &TrainConfig) -> Result<Self> {
        prepare(&mut base, mode, profile.delta_rank, profile.lora_rank, cfg.seed)?;
        let models = match (mode, &base.delta) {
            (Mode::PeftPlus, Some(d)) => stream_models(d.matrices.len()),
            _ => Vec::new(),
        };
        Ok(Self {
            mode,
            scene: base,
            models,
            adam: Adam::new(cfg.adam()),
            iteration: 0,
        })
    }

    pub fn trainable(&self) -> Result<Trainable> {
        let mut t = trainable_params(&self.scene, self.mode)?;
        t.add(&self.models);
        Ok(t)
    }

    /// Uniform noise on every delta matrix for one iteration.
    pub fn noise(&self, seed: u64, iteration: u64) -> Option<Vec<Tensor>> {
        if self.mode != Mode::PeftPlus {
            return None;
        }
        let u = Uniform::new(-0.5f32, 0.5).expect("valid range");
        let d = self.scene.delta.as_ref()?;
        Some(
            d.matrices
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let mut r = rng::stream(seed, &[tag::NOISE, iteration, i as u64]);
                    Tensor::from_fn(m.shape().to_vec(), |_| u.sample(&mut r))
                })
                .collect(),
        )
    }

    /// Regularizers: smoothness of the effective planes and, in entropy-coded
    /// mode, the rate of the noisy delta matrices.
    fn regularizers(&self, trainable: &Trainable, cfg: &TrainConfig, noise: Option<&[Tensor]>) -> Result<(f64, f64, GradMap)> {
        let mut g = Graph::<f32>::new(trainable);
        let field = self.scene.bind(&mut g, None)?;
        let tv = tv_loss(&mut g.tape, &field.field)?;
        let mut loss = g.tape.scale(tv, cfg.lambda_tv)?;
        let tv_value = g.value(tv).item() as f64;
        let mut rate_value = 0.0;
        let lambda = cfg.effective_lambda_rate();
        if self.mode == Mode::PeftPlus {
            let d = self.scene.delta.as_ref().expect("prepared");
            let noisy = d.bind(&mut g, noise)?;
            let bits = rate_bits(&mut g, &self.models, &noisy.matrices)?;
            let per = g.tape.scale(bits, 1.0 / d.matrix_entries() as f32)?;
            rate_value = g.value(per).item() as f64;
            let weighted = g.tape.scale(per, lambda)?;
            loss = g.tape.add(loss, weighted)?;
        }
        Ok((tv_value, rate_value, g.gradients(loss)?))
    }

    /// One optimizer step on a ray batch. Modes without trainable
    /// parameters only advance the counter.
    pub fn step(&mut self, set: &RaySet, cfg: &TrainConfig, render: &RenderConfig) -> Result<StepLoss> {
        let it = self.iteration;
        let trainable = self.trainable()?;
        if trainable.is_empty() {
            self.iteration += 1;
            return Ok(StepLoss::default());
        }
        let noise = self.noise(cfg.seed, it);
        let batch = set.sample(cfg.seed, it, cfg.batch_rays);
        let rcfg = RenderConfig {
            perturb: true,
            seed: cfg.seed,
            ..render.clone()
        };
        let diverged = |e| as_divergence(e, it);
        let (rgb, mut grads) =
            photometric(set, &batch, &trainable, &rcfg, it, &self.scene, noise.as_deref()).map_err(diverged)?;
        let (tv, rate, reg) = self.regularizers(&trainable, cfg, noise.as_deref()).map_err(diverged)?;
        grads.merge(reg);
        let total = rgb + cfg.lambda_tv as f64 * tv + cfg.effective_lambda_rate() as f64 * rate;
        if !total.is_finite() || !grads.is_finite() {
            return Err(CodecError::Diverged {
                iteration: it as usize,
                loss: total as f32,
            });
        }
        let mut adam = std::mem::replace(&mut self.adam, Adam::new(cfg.adam()));
        adam.step(self, &grads);
        self.adam = adam;
        self.iteration += 1;
        Ok(StepLoss { rgb, tv, rate, total })
    }

    /// The representation as transmitted: entropy-coded mode rounds the
    /// delta matrices.
    pub fn transmitted(&self) -> SceneModel {
        let mut s = self.scene.clone();
        if self.mode == Mode::PeftPlus {
            s.delta = s.delta.map(|d| d.rounded());
        }
        s
    }

    pub fn pack(&self, profile: &Profile, indices: &[Vec<usize>; 3]) -> Result<Bitstream> {
        let models = (self.mode == Mode::PeftPlus).then_some(self.models.as_slice());
        pack(profile, self.mode, indices, &self.transmitted(), models)
    }

    /// Runs until `cfg.iterations`, recording a metrics row at every
    /// configured checkpoint reached (iteration 0 included when listed).
    pub fn run(
        &mut self,
        scene: &Scene,
        profile: &Profile,
        indices: &[Vec<usize>; 3],
        cfg: &TrainConfig,
        mut on_row: impl FnMut(&MetricsRow),
    ) -> Result<Vec<MetricsRow>> {
        let set = RaySet::training(scene);
        if set.rays.is_empty() {
            return Err(CodecError::Scene("no training views".into()));
        }
        let render = RenderConfig::for_profile(profile, scene.background);
        let start = Instant::now();
        let mut rows = Vec::new();
        let mut record = |state: &Self, rows: &mut Vec<MetricsRow>| -> Result<()> {
            let q = evaluate(&state.transmitted(), scene, &render)?;
            let r = state.pack(profile, indices)?.size_report();
            let row = MetricsRow {
                iteration: state.iteration,
                psnr: q.psnr,
                ssim: q.ssim,
                ms_ssim: q.ms_ssim,
                codes_mb: megabytes(r.codes),
                feature_mb: megabytes(r.feature),
                mlp_mb: megabytes(r.mlp),
                total_mb: megabytes(r.total),
                seconds: start.elapsed().as_secs_f64(),
            };
            on_row(&row);
            rows.push(row);
            Ok(())
        };
        if cfg.checkpoints.contains(&self.iteration) {
            record(self, &mut rows)?;
        }
        while self.iteration < cfg.iterations {
            self.step(&set, cfg, &render)?;
            if cfg.checkpoints.contains(&self.iteration) {
                record(self, &mut rows)?;
            }
        }
        Ok(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = TensorFile::default();
        f.meta.insert("kind".into(), "finetune".into());
        f.meta.insert("mode".into(), self.mode.to_string());
        f.meta.insert("iteration".into(), self.iteration.to_string());
        f.meta.insert("adam_step".into(), self.adam.steps().to_string());
        f.tensors = module_tensors(self);
        f.tensors.extend(self.adam.state().1);
        f.save(path)
    }

    /// Restores a checkpoint into a state built by [`FinetuneState::new`]
    /// from the same base representation.
    pub fn resume(mut self, path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let f = TensorFile::load(path)?;
        let bad = |d: &str| CodecError::Parse {
            path: path.to_path_buf(),
            detail: d.to_string(),
        };
        if f.meta("mode") != Some(self.mode.to_string().as_str()) {
            return Err(bad("checkpoint mode differs"));
        }
        let num = |k: &str| f.meta(k).and_then(|v| v.parse::<u64>().ok()).ok_or_else(|| bad(&format!("missing {k}")));
        self.iteration = num("iteration")?;
        let step = num("adam_step")?;
        assign(&mut self, &f)?;
        let moments: Vec<(String, Tensor)> = f.tensors.iter().filter(|(n, _)| n.starts_with("adam.")).cloned().collect();
        self.adam = Adam::restore(cfg.adam(), step, &moments)?;
        Ok(self)
    }
}

impl TrainConfig {
    pub fn finetune_mode(&self) -> Result<Mode> {
        self.mode
            .finetune()
            .ok_or_else(|| CodecError::Config("expected a finetuning mode, got train-base".into()))
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = TrainMode::from(mode);
        self
    }
}
