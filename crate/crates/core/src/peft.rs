//! Finetuning state: factorized triplane deltas, decoder adapters and the
//! parameter sets each finetuning mode trains.

use std::fmt;
use std::str::FromStr;

use nerfcodec_autodiff::Tensor;
use rand_distr::{Distribution, Normal};

use crate::error::{CodecError, Result};
use crate::param::{Graph, LrGroup, Module, Param, Trainable};
use crate::precision::Precision;
use crate::render::{AdapterParams, DenseParams, SceneModel, ADAPTER_INIT_STD};
use crate::rng::{self, tag};
use crate::triplane::{DeltaVars, PLANE_NAMES};

/// Rank-`R` delta `Δ_k^s = Σ_r v_r^s ∘ M_{k,r}^s`: one `V_s×V_s` matrix per
/// plane, scale and rank, and one `C`-vector per scale and rank shared by the
/// three planes.
#[derive(Clone, Debug)]
pub struct DeltaFactors {
    pub channels: usize,
    pub resolutions: [usize; 3],
    pub rank: usize,
    /// `[1, V, V]`, indexed `(scale * 3 + plane) * rank + r`.
    pub matrices: Vec<Param>,
    /// `[1, C]`, indexed `scale * rank + r`.
    pub vectors: Vec<Param>,
}

impl DeltaFactors {
    /// Random matrices, zero vectors: the materialized delta is exactly zero.
    pub fn init(channels: usize, resolutions: [usize; 3], rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(CodecError::Config("delta rank must be at least 1".into()));
        }
        let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("finite std");
        let mut matrices = Vec::with_capacity(9 * rank);
        let mut vectors = Vec::with_capacity(3 * rank);
        for (s, &v) in resolutions.iter().enumerate() {
            for (k, name) in PLANE_NAMES.iter().enumerate() {
                for r in 0..rank {
                    let mut g = rng::stream(seed, &[tag::INIT, 500 + ((s * 3 + k) * rank + r) as u64]);
                    matrices.push(Param::new(
                        format!("delta.matrix.{name}.{s}.{r}"),
                        Tensor::from_fn([1, v, v], |_| normal.sample(&mut g)),
                        LrGroup::Field,
                    ));
                }
            }
            for r in 0..rank {
                vectors.push(Param::new(format!("delta.vector.{s}.{r}"), Tensor::zeros([1, channels]), LrGroup::Field));
            }
        }
        Ok(Self {
            channels,
            resolutions,
            rank,
            matrices,
            vectors,
        })
    }

    pub fn matrix(&self, scale: usize, plane: usize, r: usize) -> &Param {
        &self.matrices[(scale * 3 + plane) * self.rank + r]
    }

    pub fn vector(&self, scale: usize, r: usize) -> &Param {
        &self.vectors[scale * self.rank + r]
    }

    pub fn matrix_entries(&self) -> usize {
        self.matrices.iter().map(Param::len).sum()
    }

    pub fn vector_entries(&self) -> usize {
        self.vectors.iter().map(Param::len).sum()
    }

    /// Dense `[C, V, V]` delta of one plane at one scale.
    pub fn materialize(&self, plane: usize, scale: usize) -> Tensor {
        let v = self.resolutions[scale];
        let c = self.channels;
        let mut out = Tensor::zeros([c, v, v]);
        for r in 0..self.rank {
            let m = self.matrix(scale, plane, r).value().data();
            let vec = self.vector(scale, r).value().data();
            for (ch, &a) in vec.iter().enumerate() {
                for (o, &b) in out.data_mut()[ch * v * v..(ch + 1) * v * v].iter_mut().zip(m) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn bind<T: Precision>(&self, g: &mut Graph<'_, T>, noise: Option<&[Tensor]>) -> Result<DeltaVars> {
        if let Some(n) = noise {
            if n.len() != self.matrices.len() {
                return Err(CodecError::Shape(format!("{} noise tensors for {} matrices", n.len(), self.matrices.len())));
            }
        }
        let mut matrices = Vec::with_capacity(self.matrices.len());
        for (i, m) in self.matrices.iter().enumerate() {
            let mv = g.param(m);
            matrices.push(match noise {
                Some(n) => {
                    let u = g.lift(n[i].clone());
                    g.tape.add(mv, u)?
                }
                None => mv,
            });
        }
        Ok(DeltaVars {
            rank: self.rank,
            matrices,
            vectors: self.vectors.iter().map(|p| g.param(p)).collect(),
        })
    }

    /// Matrices rounded half-to-even, as transmitted in entropy-coded mode.
    pub fn rounded(&self) -> Self {
        let mut out = self.clone();
        for m in &mut out.matrices {
            let t = m.value().map(f32::round_ties_even);
            m.set(t).expect("same shape");
        }
        out
    }

    /// Matrix parameters only.
    pub fn matrix_params(&self) -> MatrixParams<'_> {
        MatrixParams(self)
    }
}

impl Module for DeltaFactors {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.matrices.visit(f);
        self.vectors.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.matrices.visit_mut(f);
        self.vectors.visit_mut(f);
    }
}

pub struct MatrixParams<'a>(&'a DeltaFactors);

impl Module for MatrixParams<'_> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.0.matrices.visit(f)
    }
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {
        unreachable!("read-only view")
    }
}

/// How a decoded scene is refined before transmission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    #[serde(rename = "wo-ft")]
    WoFt,
    #[serde(rename = "full-ft")]
    FullFt,
    #[serde(rename = "peft")]
    Peft,
    #[serde(rename = "peft++")]
    PeftPlus,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::WoFt, Mode::FullFt, Mode::Peft, Mode::PeftPlus];

    pub fn code(self) -> u8 {
        match self {
            Mode::WoFt => 0,
            Mode::FullFt => 1,
            Mode::Peft => 2,
            Mode::PeftPlus => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == c)
    }

    pub fn uses_delta(self) -> bool {
        matches!(self, Mode::Peft | Mode::PeftPlus)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::WoFt => "wo-ft",
            Mode::FullFt => "full-ft",
            Mode::Peft => "peft",
            Mode::PeftPlus => "peft++",
        })
    }
}

impl FromStr for Mode {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| CodecError::Config(format!("unknown mode {s:?} (expected wo-ft, full-ft, peft or peft++)")))
    }
}

/// Attaches delta factors and decoder adapters when `mode` needs them.
pub fn prepare(scene: &mut SceneModel, mode: Mode, delta_rank: usize, lora_rank: usize, seed: u64) -> Result<()> {
    if mode.uses_delta() {
        if scene.delta.is_none() {
            scene.delta = Some(DeltaFactors::init(scene.planes.channels, scene.planes.resolutions, delta_rank, seed)?);
        }
        if !scene.decoder.coarse.is_wrapped() {
            scene.decoder.wrap(lora_rank, seed);
        }
    }
    Ok(())
}

/// Parameters a finetuning mode may change. The pretrained encoder, VQ stage
/// and codebook never appear here.
pub fn trainable_params(scene: &SceneModel, mode: Mode) -> Result<Trainable> {
    let mut t = Trainable::none();
    match mode {
        Mode::WoFt => {}
        Mode::FullFt => {
            t.add(&scene.planes);
            t.add(&DenseParams(&scene.decoder.coarse));
            t.add(&DenseParams(&scene.decoder.fine));
        }
        Mode::Peft | Mode::PeftPlus => {
            let delta = scene
                .delta
                .as_ref()
                .ok_or_else(|| CodecError::Config(format!("{mode} needs delta factors; call prepare first")))?;
            if !scene.decoder.coarse.is_wrapped() || !scene.decoder.fine.is_wrapped() {
                return Err(CodecError::Config(format!("{mode} needs decoder adapters; call prepare first")));
            }
            t.add(delta);
            t.add(&AdapterParams(&scene.decoder.coarse));
            t.add(&AdapterParams(&scene.decoder.fine));
        }
    }
    Ok(t)
}
