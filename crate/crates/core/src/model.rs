//! The full recognition network: extractor, part pooling with optional
//! knowledge transfer, and the identity head.

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, bind, Bindings, ClassifierHead, ExtractorConfig, SilhouetteSequence};
use crate::error::{GaitError, Result};
use crate::gpak::{self, GpakConfig, GpakVars};
use crate::losses::to_array2;
use crate::params::ParamStore;
use crate::rng::seeded;
use crate::tape::{Tape, Var};

/// Architecture settings shared by every method in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    /// Horizontal part count `m`.
    pub parts: usize,
    /// Repository vertex count `N^r`.
    pub repository_size: usize,
    /// Knowledge transfer through the repository graph. When false, the part
    /// vectors feed the head directly.
    pub transfer: bool,
    pub alpha_init: f64,
}

impl ModelConfig {
    pub fn embedding_width(&self) -> usize {
        self.parts * self.extractor.embed_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        let (h, _) = self.extractor.feature_hw();
        if self.parts == 0 || h % self.parts != 0 {
            return Err(GaitError::config("parts", format!("feature height {h} is not divisible by {}", self.parts)));
        }
        if self.transfer && self.repository_size == 0 {
            return Err(GaitError::config("repository_size", "must be positive"));
        }
        if !(self.alpha_init > 0.0) {
            return Err(GaitError::config("alpha_init", "must be positive"));
        }
        Ok(())
    }

    fn gpak(&self) -> GpakConfig {
        GpakConfig {
            parts: self.parts,
            repository_size: self.repository_size,
            channels: self.extractor.embed_channels(),
            alpha_init: self.alpha_init,
        }
    }
}

/// Tape nodes of one forward pass.
pub struct ForwardPass {
    pub bindings: Bindings,
    pub fmap: Var,
    pub gpak: GpakVars,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaitModel {
    config: ModelConfig,
    params: ParamStore,
}

impl GaitModel {
    /// Fresh parameters. The extractor is drawn from its own seed stream so
    /// every method sharing `seed` starts from the same extractor weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        config.extractor.init_params(&mut params, &mut seeded(seed, "init/extractor"));
        config.gpak().init_params(&mut params, &mut seeded(seed, "init/gpak"));
        if !config.transfer {
            params.remove(gpak::REPOSITORY);
            params.remove(gpak::TRANSFER_WEIGHT);
        }
        ClassifierHead::empty(config.embedding_width()).store(&mut params);
        Ok(GaitModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for name in config.extractor.param_names() {
            params.require(&name)?;
        }
        params.require(gpak::ALPHA_RAW)?;
        if config.transfer {
            params.require(gpak::REPOSITORY)?;
            params.require(gpak::TRANSFER_WEIGHT)?;
        }
        let head = ClassifierHead::from_params(&params)?;
        if head.input_width() != config.embedding_width() {
            return Err(GaitError::invalid("head width does not match part count x channels"));
        }
        Ok(GaitModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head(&self) -> ClassifierHead {
        ClassifierHead::from_params(&self.params).expect("head present")
    }

    pub fn class_count(&self) -> usize {
        self.params.get(backbone::HEAD_BIAS).map_or(0, |b| b.len())
    }

    pub fn repository(&self) -> Option<Array2<f64>> {
        self.params.get(gpak::REPOSITORY).map(to_array2)
    }

    pub fn alpha(&self) -> f64 {
        let raw = self.params.get(gpak::ALPHA_RAW).and_then(|a| a.iter().next().copied()).unwrap_or(0.0);
        gpak::softplus(raw)
    }

    pub fn expand_head<R: Rng>(&mut self, new_classes: usize, rng: &mut R) {
        let head = self.head().expand(new_classes, rng);
        head.store(&mut self.params);
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    /// Records the forward pass for `[S*T, 1, H, W]` frames.
    pub fn forward(&self, tape: &mut Tape, frames: Array4<f64>, needs_grad: bool) -> Result<ForwardPass> {
        let bindings = bind(tape, &self.params, needs_grad);
        let input = tape.constant(frames.into_dyn());
        let fmap = backbone::extract_features_on(tape, &bindings, &self.config.extractor, input)?;
        let g = gpak::gpak_on(tape, &bindings, fmap, self.config.parts, self.config.transfer)?;
        let w = bindings[backbone::HEAD_WEIGHT];
        let b = bindings[backbone::HEAD_BIAS];
        let z = tape.matmul_t(g.embedding, w);
        let logits = tape.add_row(z, b);
        if tape.value(logits).iter().any(|v| !v.is_finite()) {
            return Err(GaitError::numerical("classifier", "non-finite logit"));
        }
        Ok(ForwardPass { bindings, fmap, gpak: g, logits })
    }

    /// Embeddings and logits without gradient tracking.
    pub fn infer(&self, batch: &[&SilhouetteSequence]) -> Result<(Array2<f64>, Array2<f64>)> {
        let frames = backbone::stack_frames(batch, &self.config.extractor)?;
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, frames, false)?;
        Ok((to_array2(tape.value(fp.gpak.embedding)), to_array2(tape.value(fp.logits))))
    }

    /// `[n, m·C]` embeddings, computed in chunks.
    pub fn embed(&self, seqs: &[&SilhouetteSequence]) -> Result<Array2<f64>> {
        const CHUNK: usize = 32;
        let mut out = Array2::<f64>::zeros((seqs.len(), self.config.embedding_width()));
        for (k, chunk) in seqs.chunks(CHUNK).enumerate() {
            let (e, _) = self.infer(chunk)?;
            out.slice_mut(ndarray::s![k * CHUNK..k * CHUNK + chunk.len(), ..]).assign(&e);
        }
        Ok(out)
    }

    pub fn snapshot(&self, step: usize) -> ModelSnapshot {
        ModelSnapshot { hash: self.hash(), model: self.clone(), step }
    }
}

/// Frozen copy of the model at the end of a continual step. It is the
/// teacher for every retrospective loss of the following step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    model: GaitModel,
    step: usize,
    hash: String,
}

impl ModelSnapshot {
    pub fn model(&self) -> &GaitModel {
        &self.model
    }

    /// The continual step this snapshot was taken after.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Parameter hash recorded when the snapshot was taken.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn class_count(&self) -> usize {
        self.model.class_count()
    }

    pub fn repository(&self) -> Option<Array2<f64>> {
        self.model.repository()
    }

    /// A snapshot of a snapshot is the same snapshot.
    pub fn snapshot(&self) -> ModelSnapshot {
        self.clone()
    }

    /// Recomputes the parameter hash; equals [`hash`](Self::hash) unless the
    /// snapshot was corrupted.
    pub fn verify(&self) -> bool {
        self.model.hash() == self.hash
    }
}
