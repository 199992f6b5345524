//! The pretrained networks shared by sender and receiver.

use std::path::Path;

use crate::encoder::{Encoder, Generator};
use crate::error::{CodecError, Result};
use crate::param::{Graph, Module, Param, Trainable};
use crate::profile::Profile;
use crate::render::{Decoder, SceneModel};
use crate::scene::Scene;
use crate::tensor_io::{assign, module_tensors, TensorFile};
use crate::triplane::Triplanes;
use crate::vq::CodePath;

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub profile: Profile,
    pub encoder: Encoder,
    pub codes: CodePath,
    pub generator: Generator,
    pub decoder: Decoder,
}

impl Pretrained {
    pub fn new(profile: Profile, seed: u64) -> Result<Self> {
        profile.validate()?;
        Ok(Self {
            encoder: Encoder::new(&profile, seed),
            codes: CodePath::new(&profile, seed),
            generator: Generator::new(&profile, seed),
            decoder: Decoder::new(&profile, seed),
            profile,
        })
    }

    /// Code indices of a scene from its encoder-input views, row-major per
    /// plane.
    pub fn encode_indices(&self, scene: &Scene) -> Result<[Vec<usize>; 3]> {
        let views = scene.encoder_views();
        if views.is_empty() {
            return Err(CodecError::Scene("scene has no encoder-input views".into()));
        }
        let none = Trainable::none();
        let mut g = Graph::<f32>::new(&none);
        let planes = self.encoder.planes(&mut g, &views)?;
        Ok(self.codes.encode(&mut g, planes)?.indices)
    }

    /// Triplanes the receiver reconstructs from code indices.
    pub fn planes_from_indices(&self, indices: &[Vec<usize>; 3]) -> Result<Triplanes> {
        let none = Trainable::none();
        let mut g = Graph::<f32>::new(&none);
        let up = self.codes.decode(&mut g, indices, self.profile.code_res())?;
        let planes = self.generator.forward(&mut g, up)?;
        Triplanes::from_fn(self.profile.channels, self.profile.resolutions, |s, k| {
            g.value(planes[s * 3 + k]).clone()
        })
    }

    /// Feed-forward representation: decoded planes and the shared decoder.
    pub fn scene_from_indices(&self, indices: &[Vec<usize>; 3]) -> Result<SceneModel> {
        Ok(SceneModel {
            planes: self.planes_from_indices(indices)?,
            delta: None,
            decoder: self.decoder.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = TensorFile::default();
        f.meta.insert(
            "profile".into(),
            serde_json::to_string(&self.profile).expect("profile serializes"),
        );
        f.tensors = module_tensors(self);
        f.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = TensorFile::load(path)?;
        let profile: Profile = serde_json::from_str(f.meta("profile").ok_or_else(|| CodecError::Parse {
            path: path.to_path_buf(),
            detail: "missing profile metadata".into(),
        })?)
        .map_err(|e| CodecError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut m = Self::new(profile, 0)?;
        assign(&mut m, &f)?;
        Ok(m)
    }
}

impl Module for Pretrained {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.codes.visit(f);
        self.generator.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.codes.visit_mut(f);
        self.generator.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}
