//! Training loops, their configuration and progress records.

mod base;
mod finetune;

pub use base::{BaseTrainer, BaseStep};
pub use finetune::{FinetuneState, StepLoss};

use std::path::Path;

use nerfcodec_autodiff::{AutodiffError, Tensor, Var};
use rand::Rng;

use crate::error::{io_err, CodecError, Result};
use crate::metrics::{quality, Quality};
use crate::param::{AdamConfig, GradMap, Graph, Trainable};
use crate::peft::Mode;
use crate::render::{render_image, render_rays, RenderConfig, SceneModel, CHUNK};
use crate::rng::{self, tag};
use crate::scene::{Ray, Scene};

/// What a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainMode {
    #[serde(rename = "train-base")]
    TrainBase,
    #[serde(rename = "wo-ft")]
    WoFt,
    #[serde(rename = "full-ft")]
    FullFt,
    #[serde(rename = "peft")]
    Peft,
    #[serde(rename = "peft++")]
    PeftPlus,
}

impl TrainMode {
    pub fn finetune(self) -> Option<Mode> {
        match self {
            TrainMode::TrainBase => None,
            TrainMode::WoFt => Some(Mode::WoFt),
            TrainMode::FullFt => Some(Mode::FullFt),
            TrainMode::Peft => Some(Mode::Peft),
            TrainMode::PeftPlus => Some(Mode::PeftPlus),
        }
    }
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::WoFt => TrainMode::WoFt,
            Mode::FullFt => TrainMode::FullFt,
            Mode::Peft => TrainMode::Peft,
            Mode::PeftPlus => TrainMode::PeftPlus,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: u64,
    pub batch_rays: usize,
    pub lr_field: f32,
    pub lr_network: f32,
    pub lambda_tv: f32,
    pub lambda_commit: f32,
    pub lambda_rate: f32,
    pub seed: u64,
    pub profile: String,
    /// Iterations at which metrics are recorded.
    pub checkpoints: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Peft,
            iterations: 500,
            batch_rays: 256,
            lr_field: 1e-2,
            lr_network: 1e-3,
            lambda_tv: 1e-4,
            lambda_commit: 0.25,
            lambda_rate: 1e-3,
            seed: 0,
            profile: "desk".into(),
            checkpoints: vec![0, 100, 500, 1000, 2000],
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| CodecError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str::<Self>(&text)
            .map_err(|e| CodecError::Parse {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })
            .and_then(|c| c.validate().map(|_| c))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_tv, self.lambda_commit, self.lambda_rate];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(CodecError::Config(format!("loss weights must be finite and nonnegative: {lambdas:?}")));
        }
        if !(self.lr_field.is_finite() && self.lr_field > 0.0 && self.lr_network.is_finite() && self.lr_network > 0.0) {
            return Err(CodecError::Config("learning rates must be positive".into()));
        }
        if self.batch_rays == 0 {
            return Err(CodecError::Config("batch must hold at least one ray".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_field: self.lr_field,
            lr_network: self.lr_network,
            ..AdamConfig::default()
        }
    }

    /// Rate weight actually used: zero outside entropy-coded mode.
    pub fn effective_lambda_rate(&self) -> f32 {
        if self.mode == TrainMode::PeftPlus {
            self.lambda_rate
        } else {
            0.0
        }
    }
}

/// Rays and target colors of a scene's training views.
pub struct RaySet {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f32; 3]>,
}

impl RaySet {
    /// Every pixel of every non-evaluation view.
    pub fn training(scene: &Scene) -> Self {
        let mut rays = Vec::new();
        let mut targets = Vec::new();
        for v in scene.finetune_views() {
            rays.extend(v.generate_rays(scene.near, scene.far));
            targets.extend(v.image.rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
        }
        Self { rays, targets }
    }

    /// Batch of ray indices for one iteration, drawn with replacement.
    pub fn sample(&self, seed: u64, iteration: u64, n: usize) -> Vec<usize> {
        let mut r = rng::stream(seed, &[tag::BATCH, iteration]);
        (0..n).map(|_| r.random_range(0..self.rays.len())).collect()
    }
}

/// Photometric loss `Σ (coarse − y)² + (fine − y)²` over `rays`, divided by
/// `3 · batch`, with gradients for the trainable parameters. Chunks of
/// [`CHUNK`] rays run on separate tapes and are merged in order.
#[allow(clippy::too_many_arguments)]
pub fn photometric(
    set: &RaySet,
    batch: &[usize],
    trainable: &Trainable,
    cfg: &RenderConfig,
    iteration: u64,
    model: &SceneModel,
    noise: Option<&[Tensor]>,
) -> Result<(f64, GradMap)> {
    use rayon::prelude::*;
    let norm = 1.0 / (3 * batch.len()) as f32;
    let parts: Vec<Result<(f64, GradMap)>> = crate::pool().install(|| {
        batch
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, idx)| {
                let mut g = Graph::<f32>::new(trainable);
                let field = model.bind(&mut g, noise)?;
                let rays: Vec<Ray> = idx.iter().map(|&i| set.rays[i].clone()).collect();
                let keys: Vec<u64> = (0..idx.len())
                    .map(|j| iteration.wrapping_mul(1 << 32) + (ci * CHUNK + j) as u64)
                    .collect();
                let out = render_rays(&mut g, &field, &rays, &keys, cfg)?;
                let t: Vec<f32> = idx.iter().flat_map(|&i| set.targets[i]).collect();
                let t = g.constant(Tensor::new([idx.len(), 3], t)?);
                let loss = sq_err(&mut g, out.coarse, t)?;
                let fine = sq_err(&mut g, out.fine, t)?;
                let loss = g.tape.add(loss, fine)?;
                let loss = g.tape.scale(loss, norm)?;
                let value = g.value(loss).item() as f64;
                let grads = if trainable.is_empty() { GradMap::default() } else { g.gradients(loss)? };
                Ok((value, grads))
            })
            .collect()
    });
    let mut total = 0.0;
    let mut grads = GradMap::default();
    for p in parts {
        let (v, g) = p?;
        total += v;
        grads.merge(g);
    }
    Ok((total, grads))
}

/// Non-finite values anywhere in a step count as divergence.
fn as_divergence(e: CodecError, iteration: u64) -> CodecError {
    match e {
        CodecError::Autodiff(AutodiffError::NonFinite { .. }) => CodecError::Diverged {
            iteration: iteration as usize,
            loss: f32::NAN,
        },
        e => e,
    }
}

fn sq_err(g: &mut Graph<'_, f32>, pred: Var, target: Var) -> Result<Var> {
    let d = g.tape.sub(pred, target)?;
    let d = g.tape.square(d)?;
    Ok(g.tape.sum(d)?)
}

/// Mean quality over the evaluation views (all views when none are marked).
pub fn evaluate(model: &SceneModel, scene: &Scene, cfg: &RenderConfig) -> Result<Quality> {
    let mut views = scene.eval_views();
    if views.is_empty() {
        views = scene.views.iter().collect();
    }
    let mut pairs = Vec::with_capacity(views.len());
    for v in views {
        let mut img = render_image(v, scene.near, scene.far, model, cfg)?;
        img.alpha = None;
        pairs.push((img, &v.image));
    }
    quality(&pairs)
}

/// One line of a run's progress table.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub codes_mb: f64,
    pub feature_mb: f64,
    pub mlp_mb: f64,
    pub total_mb: f64,
    pub seconds: f64,
}

/// Writes rows as CSV; `timing` keeps the wall-clock column, which is the
/// only one that varies between identical runs.
pub fn write_csv(rows: &[MetricsRow], timing: bool) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["iteration", "psnr", "ssim", "ms_ssim", "codes_mb", "feature_mb", "mlp_mb", "total_mb"];
    if timing {
        head.push("seconds");
    }
    w.write_record(&head).expect("in-memory write");
    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            format!("{:.6}", r.psnr),
            format!("{:.6}", r.ssim),
            format!("{:.6}", r.ms_ssim),
            format!("{:.6}", r.codes_mb),
            format!("{:.6}", r.feature_mb),
            format!("{:.6}", r.mlp_mb),
            format!("{:.6}", r.total_mb),
        ];
        if timing {
            rec.push(format!("{:.3}", r.seconds));
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flushed")).expect("ascii")
}
