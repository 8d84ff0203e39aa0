//! The continual training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{id_loss_on, stack_frames, ExtractorConfig, SilhouetteSequence};
use crate::baselines::{crl_loss_on, spd_loss_on, Method, MethodConfig, DEFAULT_CRL_MARGIN, DEFAULT_SPD_WEIGHT};
use crate::error::{GaitError, Result};
use crate::eval::StepDataset;
use crate::gpak::{repository_stability_on, REPOSITORY};
use crate::losses::{
    edsn_loss_on, logit_distillation_on, negative_distance_distribution, total_loss, triplet_loss_on, BatchEmbeddings,
    LossComponents, LossWeights,
};
use crate::model::{GaitModel, ModelConfig, ModelSnapshot};
use crate::params::{read_archive, write_archive, ParamStore};
use crate::rng::seeded;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MilestoneUnit {
    /// Milestones count continual steps.
    Step,
    /// Milestones count iterations within a step.
    Iteration,
}

/// Every knob of a training run. The field names are the keys of the flat
/// configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub method: Method,
    /// GaitAdapter ablation switch: repository transfer and its stability loss.
    pub use_gpak: bool,
    /// GaitAdapter ablation switch: negative-pair distance and logit distillation.
    pub use_edsn: bool,
    pub spd_weight: f64,
    pub crl_margin: f64,
    pub identities_per_batch: usize,
    pub samples_per_identity: usize,
    pub sequence_length: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Output channels of each extractor convolution.
    pub channels: Vec<usize>,
    pub parts: usize,
    pub repository_size: usize,
    pub alpha_init: f64,
    pub learning_rate: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub milestone_unit: MilestoneUnit,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub iterations_per_step: usize,
    pub weight_id: f64,
    pub weight_triplet: f64,
    pub weight_distill: f64,
    pub weight_repository: f64,
    pub weight_edsn: f64,
    /// Divide the negative-pair distillation sum by the batch size.
    pub edsn_batch_mean: bool,
    /// Iterations between progress log lines; 0 disables them.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            method: Method::GaitAdapter,
            use_gpak: true,
            use_edsn: true,
            spd_weight: DEFAULT_SPD_WEIGHT,
            crl_margin: DEFAULT_CRL_MARGIN,
            identities_per_batch: 16,
            samples_per_identity: 8,
            sequence_length: 30,
            frame_height: 64,
            frame_width: 44,
            channels: vec![8, 16, 32],
            parts: 16,
            repository_size: 64,
            alpha_init: 3.0,
            learning_rate: 3.5e-4,
            lr_milestones: vec![1, 2, 3],
            lr_decay: 0.1,
            milestone_unit: MilestoneUnit::Step,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            iterations_per_step: 500,
            weight_id: 1.0,
            weight_triplet: 1.0,
            weight_distill: 1.0,
            weight_repository: 1.0,
            weight_edsn: 1.0,
            edsn_batch_mean: false,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Reduced model and batch for single-core desk runs on the synthetic
    /// stream: 32x22 frames, 16-frame clips, 4 identities x 4 samples, and a
    /// constant learning rate.
    pub fn desk() -> Self {
        TrainConfig {
            identities_per_batch: 4,
            samples_per_identity: 4,
            sequence_length: 16,
            frame_height: 32,
            frame_width: 22,
            repository_size: 16,
            learning_rate: 3e-3,
            lr_milestones: Vec::new(),
            ..Self::default()
        }
    }

    pub fn with_method(mut self, m: &MethodConfig) -> Self {
        self.method = m.method;
        self.use_gpak = m.use_gpak;
        self.use_edsn = m.use_edsn;
        self.spd_weight = m.spd_weight;
        self.crl_margin = m.crl_margin;
        self
    }

    pub fn method_config(&self) -> MethodConfig {
        MethodConfig {
            method: self.method,
            use_gpak: self.use_gpak,
            use_edsn: self.use_edsn,
            spd_weight: self.spd_weight,
            crl_margin: self.crl_margin,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                channels: self.channels.clone(),
                frame_height: self.frame_height,
                frame_width: self.frame_width,
                seq_len: self.sequence_length,
            },
            parts: self.parts,
            repository_size: self.repository_size,
            transfer: self.method_config().transfer(),
            alpha_init: self.alpha_init,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            id: self.weight_id,
            triplet: self.weight_triplet,
            distill: self.weight_distill,
            repository: self.weight_repository,
            edsn: self.weight_edsn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities_per_batch < 2 {
            return Err(GaitError::config("identities_per_batch", "must be at least 2"));
        }
        if self.samples_per_identity < 2 {
            return Err(GaitError::config("samples_per_identity", "must be at least 2"));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
            ("adam_eps", self.adam_eps),
            ("alpha_init", self.alpha_init),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GaitError::config(key, "must be a positive finite number"));
            }
        }
        for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(GaitError::config(key, "must lie in [0, 1)"));
            }
        }
        let w = self.loss_weights();
        for (key, v) in [
            ("weight_id", w.id),
            ("weight_triplet", w.triplet),
            ("weight_distill", w.distill),
            ("weight_repository", w.repository),
            ("weight_edsn", w.edsn),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GaitError::config(key, "must be a finite non-negative number"));
            }
        }
        self.method_config().validate()?;
        self.model_config().validate()
    }
}

/// Base rate times `decay^k`, with `k` the number of milestones already
/// passed. Step milestones count as passed once the continual step (1-based)
/// exceeds them; iteration milestones once the iteration (0-based) reaches
/// them.
pub fn lr_schedule(step: usize, iteration: usize, config: &TrainConfig) -> f64 {
    let passed = match config.milestone_unit {
        MilestoneUnit::Step => config.lr_milestones.iter().filter(|&&m| m < step).count(),
        MilestoneUnit::Iteration => config.lr_milestones.iter().filter(|&&m| m <= iteration).count(),
    };
    config.learning_rate * config.lr_decay.powi(passed as i32)
}

/// Adaptive-moment optimizer without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update to every parameter with a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| GaitError::invalid(format!("gradient for unknown parameter `{name}`")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

/// Draws `p` distinct identities and `k` sequences of each, grouped by
/// identity. Identities with fewer than `k` sequences are drawn with
/// replacement.
pub fn sample_batch<'a, R: Rng>(train: &'a [SilhouetteSequence], p: usize, k: usize, rng: &mut R) -> Result<Vec<&'a SilhouetteSequence>> {
    let mut groups: BTreeMap<u32, Vec<&SilhouetteSequence>> = BTreeMap::new();
    for s in train {
        groups.entry(s.identity).or_default().push(s);
    }
    if groups.len() < 2 {
        return Err(GaitError::Data(format!("a batch needs at least 2 identities, the training set has {}", groups.len())));
    }
    let p = if groups.len() < p {
        log::warn!("only {} identities available; batch reduced from {p}", groups.len());
        groups.len()
    } else {
        p
    };
    let mut ids: Vec<u32> = groups.keys().copied().collect();
    ids.shuffle(rng);
    let mut batch = Vec::with_capacity(p * k);
    for id in &ids[..p] {
        let members = &groups[id];
        if members.len() >= k {
            batch.extend(members.choose_multiple(rng, k).copied());
        } else {
            for _ in 0..k {
                batch.push(*members.choose(rng).expect("non-empty group"));
            }
        }
    }
    Ok(batch)
}

/// One logged training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub step: usize,
    pub iteration: usize,
    pub lr: f64,
    pub components: LossComponents,
    /// SPD or CRL term, unweighted.
    pub relation: Option<f64>,
    pub total: f64,
    pub teacher_step: Option<usize>,
}

/// Per-step audit data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub iterations: usize,
    pub teacher_step: Option<usize>,
    pub teacher_hash: Option<String>,
    pub snapshot_hash: String,
    pub classes_before: usize,
    pub classes_after: usize,
    pub new_identities: usize,
    /// Identifiers of every sequence read during the step.
    pub accessed: BTreeSet<String>,
    /// Iterations whose batch held a single identity, leaving the triplet
    /// and EDSN terms at zero.
    #[serde(default)]
    pub single_identity_batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub iterations: Vec<IterationRecord>,
    pub steps: Vec<StepSummary>,
}

/// Mutable state carried between continual steps. The optimizer moments
/// are reset at every step and therefore not part of it.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: GaitModel,
    /// Completed steps.
    pub step: usize,
    /// Snapshot taken at the end of step `step`.
    pub snapshot: Option<ModelSnapshot>,
    /// Global identity to classifier column.
    pub class_map: BTreeMap<u32, usize>,
    /// Identifiers of all training sequences of completed steps.
    pub past_train: BTreeSet<String>,
    pub telemetry: Telemetry,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrainState {
            model: GaitModel::new(config.model_config(), config.seed)?,
            step: 0,
            snapshot: None,
            class_map: BTreeMap::new(),
            past_train: BTreeSet::new(),
            telemetry: Telemetry::default(),
        })
    }
}

/// Deep, immutable copy of the live parameters after step `state.step`.
pub fn snapshot(state: &TrainState) -> ModelSnapshot {
    state.model.snapshot(state.step)
}

/// What the frozen previous-step model says about a batch.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    pub embedding: Array2<f64>,
    pub logits: Array2<f64>,
    pub repository: Option<Array2<f64>>,
}

impl TeacherOutputs {
    pub fn from_snapshot(snap: &ModelSnapshot, batch: &[&SilhouetteSequence]) -> Result<Self> {
        let (embedding, logits) = snap.model().infer(batch)?;
        Ok(TeacherOutputs { embedding, logits, repository: snap.repository() })
    }
}

/// Value of the training objective on one batch with its gradient for
/// every parameter.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub components: LossComponents,
    pub relation: Option<f64>,
    /// Anchors with both a positive and a negative in the batch.
    pub triplet_anchors: usize,
    pub gradients: BTreeMap<String, ArrayD<f64>>,
}

/// Evaluates the step-`step` objective of `config`'s method on `batch`.
/// `teacher` must be given from step 2 on for methods that use one.
pub fn objective(
    model: &GaitModel,
    batch: &[&SilhouetteSequence],
    labels: &[usize],
    teacher: Option<&TeacherOutputs>,
    step: usize,
    config: &TrainConfig,
) -> Result<Objective> {
    let frames = stack_frames(batch, &model.config().extractor)?;
    let mut tape = Tape::new();
    let (losses, fp) = record_losses(&mut tape, model, frames, labels, teacher, step, config)?;
    let grads = tape.backward(losses.total);
    let mut gradients = BTreeMap::new();
    for (name, var) in &fp.bindings {
        if let Some(g) = grads.get(*var) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GaitError::numerical(format!("gradient of `{name}`"), "non-finite entry"));
            }
            gradients.insert(name.clone(), g.clone());
        }
    }
    Ok(Objective {
        total: tape.scalar(losses.total),
        components: losses.components,
        relation: losses.relation,
        triplet_anchors: losses.triplet_anchors,
        gradients,
    })
}

struct IterationLosses {
    total: Var,
    components: LossComponents,
    relation: Option<f64>,
    triplet_anchors: usize,
}

fn record_losses(
    tape: &mut Tape,
    model: &GaitModel,
    frames: ndarray::Array4<f64>,
    labels: &[usize],
    teacher: Option<&TeacherOutputs>,
    step: usize,
    config: &TrainConfig,
) -> Result<(IterationLosses, crate::model::ForwardPass)> {
    let method = config.method_config();
    let w = config.loss_weights();
    let fp = model.forward(tape, frames, true)?;
    let emb = fp.gpak.embedding;
    let id = id_loss_on(tape, fp.logits, labels)?;
    let (tri, triplet_anchors) = triplet_loss_on(tape, emb, labels)?;
    let wid = tape.scale(id, w.id);
    let wtri = tape.scale(tri, w.triplet);
    let mut total = tape.add(wid, wtri);
    let mut c = LossComponents { id: tape.scalar(id), triplet: tape.scalar(tri), ..Default::default() };
    let mut relation = None;
    // step 1 has no snapshot: the retrospective terms are logged as zero
    let zero_or = |used: bool| if used { Some(0.0) } else { None };
    c.distill = zero_or(method.uses_distill());
    c.repository = zero_or(method.uses_repository());
    c.edsn = zero_or(method.uses_edsn());
    if method.uses_relation() {
        relation = Some(0.0);
    }
    if let Some(t) = teacher {
        if method.uses_distill() {
            let d = logit_distillation_on(tape, fp.logits, &t.logits)?;
            c.distill = Some(tape.scalar(d));
            let wd = tape.scale(d, w.distill);
            total = tape.add(total, wd);
        }
        if method.uses_repository() {
            let k_prev = t.repository.as_ref().ok_or_else(|| GaitError::invalid("teacher has no repository"))?;
            let l = repository_stability_on(tape, fp.bindings[REPOSITORY], k_prev);
            c.repository = Some(tape.scalar(l));
            let wl = tape.scale(l, w.repository);
            total = tape.add(total, wl);
        }
        if method.uses_edsn() {
            let old = negative_distance_distribution(&BatchEmbeddings::new(t.embedding.clone(), labels.to_vec())?)?;
            let l = edsn_loss_on(tape, emb, labels, &old, config.edsn_batch_mean)?;
            c.edsn = Some(tape.scalar(l));
            let wl = tape.scale(l, w.edsn);
            total = tape.add(total, wl);
        }
        match method.method {
            Method::Spd => {
                let l = spd_loss_on(tape, emb, &t.embedding)?;
                relation = Some(tape.scalar(l));
                let wl = tape.scale(l, method.spd_weight);
                total = tape.add(total, wl);
            }
            Method::Crl => {
                let l = crl_loss_on(tape, fp.logits, &t.logits, method.crl_margin)?;
                relation = Some(tape.scalar(l));
                total = tape.add(total, l);
            }
            _ => {}
        }
    }
    let check = total_loss(step, &c, &w)?;
    if let Some(r) = relation {
        if !r.is_finite() {
            return Err(GaitError::numerical("loss component `relation`", format!("value {r}")));
        }
    }
    let value = tape.scalar(total);
    if !value.is_finite() {
        return Err(GaitError::numerical("total loss", format!("value {value} (objective terms {check})")));
    }
    Ok((IterationLosses { total, components: c, relation, triplet_anchors }, fp))
}

/// Trains one continual step on `step_data.train` and snapshots the result.
pub fn run_step(mut state: TrainState, step_data: &StepDataset, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let method = config.method_config();
    let s = state.step + 1;
    if step_data.train.is_empty() {
        return Err(GaitError::Data(format!("step {s} (`{}`) has an empty training set", step_data.name)));
    }
    if let Some(seq) = step_data.train.iter().find(|q| state.past_train.contains(&q.key)) {
        return Err(GaitError::Data(format!("training sequence `{}` of step {s} already appeared in an earlier step", seq.key)));
    }
    let teacher_snapshot = match (&state.snapshot, s) {
        (_, 1) => None,
        (Some(snap), _) if snap.step() == s - 1 => Some(snap.clone()),
        (Some(snap), _) => {
            return Err(GaitError::invalid(format!("snapshot is from step {}, expected {}", snap.step(), s - 1)));
        }
        (None, _) => return Err(GaitError::invalid(format!("step {s} requires the snapshot of step {}", s - 1))),
    };
    if let Some(snap) = &teacher_snapshot {
        if !snap.verify() {
            return Err(GaitError::invalid("snapshot parameters no longer match their recorded hash"));
        }
    }

    let classes_before = state.model.class_count();
    let new_ids: BTreeSet<u32> = step_data.train_identities().into_iter().filter(|i| !state.class_map.contains_key(i)).collect();
    for id in &new_ids {
        let next = state.class_map.len();
        state.class_map.insert(*id, next);
    }
    state.model.expand_head(new_ids.len(), &mut seeded(config.seed, &format!("head/{s}")));

    let mut rng = seeded(config.seed, &format!("batches/{s}"));
    let mut adam = Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut accessed = BTreeSet::new();
    let mut single_identity_batches = 0;
    let use_teacher = teacher_snapshot.is_some() && method.needs_teacher();
    for it in 0..config.iterations_per_step {
        let lr = lr_schedule(s, it, config);
        let batch = sample_batch(&step_data.train, config.identities_per_batch, config.samples_per_identity, &mut rng)?;
        accessed.extend(batch.iter().map(|q| q.key.clone()));
        let labels: Vec<usize> = batch.iter().map(|q| state.class_map[&q.identity]).collect();
        let teacher = match (&teacher_snapshot, use_teacher) {
            (Some(snap), true) => Some(TeacherOutputs::from_snapshot(snap, &batch)?),
            _ => None,
        };
        let obj = objective(&state.model, &batch, &labels, teacher.as_ref(), s, config)?;
        adam.step(state.model.params_mut(), &obj.gradients, lr)?;
        if labels.iter().all(|&l| l == labels[0]) {
            single_identity_batches += 1;
        }
        let total = obj.total;
        if config.log_every > 0 && (it + 1) % config.log_every == 0 {
            log::info!("step {s} iteration {}/{} loss {total:.4}", it + 1, config.iterations_per_step);
        }
        state.telemetry.iterations.push(IterationRecord {
            step: s,
            iteration: it,
            lr,
            components: obj.components,
            relation: obj.relation,
            total,
            teacher_step: teacher_snapshot.as_ref().filter(|_| use_teacher).map(|t| t.step()),
        });
    }
    if !state.model.params().all_finite() {
        return Err(GaitError::numerical("parameters", "non-finite value after update"));
    }

    state.step = s;
    let snap = snapshot(&state);
    state.telemetry.steps.push(StepSummary {
        step: s,
        iterations: config.iterations_per_step,
        teacher_step: teacher_snapshot.as_ref().map(|t| t.step()),
        teacher_hash: teacher_snapshot.as_ref().map(|t| t.hash().to_string()),
        snapshot_hash: snap.hash().to_string(),
        classes_before,
        classes_after: state.model.class_count(),
        new_identities: new_ids.len(),
        accessed,
        single_identity_batches,
    });
    state.snapshot = Some(snap);
    state.past_train.extend(step_data.train.iter().map(|q| q.key.clone()));
    Ok(state)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    step: usize,
    config: TrainConfig,
    class_map: Vec<(u32, usize)>,
    past_train: Vec<String>,
    hash: String,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:03}.ckpt"))
}

/// Writes the model and bookkeeping after the latest step.
pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<PathBuf> {
    let manifest = CheckpointManifest {
        step: state.step,
        config: config.clone(),
        class_map: state.class_map.iter().map(|(k, v)| (*k, *v)).collect(),
        past_train: state.past_train.iter().cloned().collect(),
        hash: state.model.hash(),
    };
    let path = checkpoint_path(dir, state.step);
    let value = serde_json::to_value(&manifest).map_err(|e| GaitError::Checkpoint { path: path.clone(), reason: e.to_string() })?;
    write_archive(&path, &value, state.model.params())?;
    Ok(path)
}

/// Restores a state written by [`save_checkpoint`], with its end-of-step
/// snapshot. Telemetry starts empty.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let (value, params) = read_archive(path)?;
    let bad = |reason: String| GaitError::Checkpoint { path: path.to_path_buf(), reason };
    let m: CheckpointManifest = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    let model = GaitModel::from_parts(m.config.model_config(), params)?;
    if model.hash() != m.hash {
        return Err(bad("parameter hash mismatch".into()));
    }
    let state = TrainState {
        snapshot: (m.step > 0).then(|| model.snapshot(m.step)),
        model,
        step: m.step,
        class_map: m.class_map.into_iter().collect(),
        past_train: m.past_train.into_iter().collect(),
        telemetry: Telemetry::default(),
    };
    Ok((state, m.config))
}
