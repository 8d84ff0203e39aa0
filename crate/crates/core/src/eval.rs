//! Continual evaluation protocol: step streams, gallery/probe retrieval
//! metrics, and backtesting of a model against every step seen so far.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{Condition, SilhouetteSequence};
use crate::error::{GaitError, Result};
use crate::model::GaitModel;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Identity partitions of one dataset as successive steps.
    Inner,
    /// One step per dataset; test identities never trained on.
    CrossIndependent,
    /// One step per dataset; gallery sequences merged into training.
    CrossDependent,
    /// Evaluation-only entry.
    Unseen,
}

impl Protocol {
    pub fn parse(tag: &str) -> Result<Protocol> {
        match tag {
            "inner" => Ok(Protocol::Inner),
            "cross-indep" | "cross-independent" => Ok(Protocol::CrossIndependent),
            "cross-dep" | "cross-dependent" => Ok(Protocol::CrossDependent),
            "unseen" => Ok(Protocol::Unseen),
            _ => Err(GaitError::config("protocol", format!("unknown protocol `{tag}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Inner => "inner",
            Protocol::CrossIndependent => "cross-indep",
            Protocol::CrossDependent => "cross-dep",
            Protocol::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Names reserved for aggregate rows in an [`EvalReport`].
pub const SOURCE: &str = "source";
pub const TARGET: &str = "target";
pub const AVERAGE: &str = "average";
/// Condition label of a whole-test-set entry.
pub const ALL: &str = "ALL";

/// One unit of the continual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDataset {
    pub name: String,
    pub domain_id: u32,
    pub protocol: Protocol,
    pub train: Vec<SilhouetteSequence>,
    pub gallery: Vec<SilhouetteSequence>,
    pub probe: Vec<SilhouetteSequence>,
}

impl StepDataset {
    /// Checks split hygiene: no probe sequence is a training sequence, and
    /// outside the subject-dependent protocol no gallery sequence is either.
    pub fn new(
        name: impl Into<String>,
        domain_id: u32,
        protocol: Protocol,
        train: Vec<SilhouetteSequence>,
        gallery: Vec<SilhouetteSequence>,
        probe: Vec<SilhouetteSequence>,
    ) -> Result<Self> {
        let step = StepDataset { name: name.into(), domain_id, protocol, train, gallery, probe };
        step.validate()?;
        Ok(step)
    }

    pub fn validate(&self) -> Result<()> {
        if [SOURCE, TARGET, AVERAGE].contains(&self.name.as_str()) {
            return Err(GaitError::invalid(format!("`{}` is a reserved test-set name", self.name)));
        }
        if self.protocol == Protocol::Unseen && !self.train.is_empty() {
            return Err(GaitError::invalid(format!("unseen entry `{}` has training data", self.name)));
        }
        let train: BTreeSet<(u32, &str)> = self.train.iter().map(|s| (s.identity, s.key.as_str())).collect();
        let clash = |set: &[SilhouetteSequence], what: &str| -> Result<()> {
            match set.iter().find(|s| train.contains(&(s.identity, s.key.as_str()))) {
                Some(s) => Err(GaitError::Data(format!("{what} sequence `{}` of step `{}` is also in its training set", s.key, self.name))),
                None => Ok(()),
            }
        };
        clash(&self.probe, "probe")?;
        if self.protocol != Protocol::CrossDependent {
            clash(&self.gallery, "gallery")?;
        }
        Ok(())
    }

    pub fn is_trainable(&self) -> bool {
        !self.train.is_empty()
    }

    pub fn has_test(&self) -> bool {
        !self.gallery.is_empty() && !self.probe.is_empty()
    }

    pub fn train_identities(&self) -> BTreeSet<u32> {
        self.train.iter().map(|s| s.identity).collect()
    }
}

/// A dataset with a global identity space, before splitting into steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub domain_id: u32,
    pub sequences: Vec<SilhouetteSequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Highest-numbered identities of each dataset held out for testing.
    /// Ignored for unseen entries, which test on every identity.
    pub test_identities: usize,
    /// Sequences per test identity enrolled in the gallery; the rest probe.
    pub gallery_per_identity: usize,
    /// Partitions of an inner-domain stream.
    pub inner_parts: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig { test_identities: 0, gallery_per_identity: 1, inner_parts: 10, seed: 0 }
    }
}

fn by_identity(seqs: &[SilhouetteSequence]) -> BTreeMap<u32, Vec<&SilhouetteSequence>> {
    let mut m: BTreeMap<u32, Vec<&SilhouetteSequence>> = BTreeMap::new();
    for s in seqs {
        m.entry(s.identity).or_default().push(s);
    }
    for v in m.values_mut() {
        v.sort_by(|a, b| a.key.cmp(&b.key));
    }
    m
}

type Split = (Vec<SilhouetteSequence>, Vec<SilhouetteSequence>);

fn gallery_probe(groups: &BTreeMap<u32, Vec<&SilhouetteSequence>>, ids: &[u32], per_id: usize, rng: &mut impl rand::Rng) -> Split {
    let (mut gallery, mut probe) = (Vec::new(), Vec::new());
    for id in ids {
        let mut seqs = groups[id].clone();
        seqs.shuffle(rng);
        for (k, s) in seqs.into_iter().enumerate() {
            if k < per_id { gallery.push(s.clone()) } else { probe.push(s.clone()) }
        }
    }
    (gallery, probe)
}

fn chunks(ids: &[u32], parts: usize) -> Vec<Vec<u32>> {
    let (q, r) = (ids.len() / parts, ids.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for k in 0..parts {
        let n = q + usize::from(k < r);
        out.push(ids[at..at + n].to_vec());
        at += n;
    }
    out
}

/// Splits datasets into an ordered stream of steps.
pub fn build_stream(protocol: Protocol, datasets: &[LabeledDataset], config: &StreamConfig) -> Result<Vec<StepDataset>> {
    if datasets.is_empty() {
        return Err(GaitError::config("datasets", "at least one dataset is required"));
    }
    if config.gallery_per_identity == 0 {
        return Err(GaitError::config("gallery_per_identity", "must be positive"));
    }
    let mut owner: BTreeMap<u32, &str> = BTreeMap::new();
    for d in datasets {
        for s in &d.sequences {
            if let Some(prev) = owner.insert(s.identity, &d.name) {
                if prev != d.name {
                    return Err(GaitError::Data(format!("identity {} appears in both `{prev}` and `{}`", s.identity, d.name)));
                }
            }
        }
    }
    if protocol == Protocol::Inner && datasets.len() != 1 {
        return Err(GaitError::config("datasets", "the inner-domain protocol takes exactly one dataset"));
    }
    let mut steps = Vec::new();
    for d in datasets {
        let groups = by_identity(&d.sequences);
        let ids: Vec<u32> = groups.keys().copied().collect();
        let mut rng = seeded(config.seed, &format!("stream/{}", d.name));
        if protocol == Protocol::Unseen {
            let (gallery, probe) = gallery_probe(&groups, &ids, config.gallery_per_identity, &mut rng);
            steps.push(StepDataset::new(d.name.clone(), d.domain_id, protocol, Vec::new(), gallery, probe)?);
            continue;
        }
        if config.test_identities >= ids.len() {
            return Err(GaitError::config(
                "test_identities",
                format!("`{}` has {} identities; cannot hold out {}", d.name, ids.len(), config.test_identities),
            ));
        }
        let (train_ids, test_ids) = ids.split_at(ids.len() - config.test_identities);
        let collect = |ids: &[u32]| -> Vec<SilhouetteSequence> {
            ids.iter().flat_map(|i| groups[i].iter().map(|s| (*s).clone())).collect()
        };
        match protocol {
            Protocol::Inner => {
                let parts = config.inner_parts;
                if parts == 0 || train_ids.len() < parts || test_ids.len() < parts {
                    return Err(GaitError::config(
                        "inner_parts",
                        format!("{parts} parts need at least that many train and test identities"),
                    ));
                }
                let mut shuffled = train_ids.to_vec();
                shuffled.shuffle(&mut rng);
                let mut test_shuffled = test_ids.to_vec();
                test_shuffled.shuffle(&mut rng);
                for (k, (tr, te)) in chunks(&shuffled, parts).into_iter().zip(chunks(&test_shuffled, parts)).enumerate() {
                    let (gallery, probe) = gallery_probe(&groups, &te, config.gallery_per_identity, &mut rng);
                    steps.push(StepDataset::new(format!("{}#{}", d.name, k + 1), d.domain_id, protocol, collect(&tr), gallery, probe)?);
                }
            }
            Protocol::CrossIndependent | Protocol::CrossDependent => {
                let (gallery, probe) = gallery_probe(&groups, test_ids, config.gallery_per_identity, &mut rng);
                let mut train = collect(train_ids);
                if protocol == Protocol::CrossDependent {
                    train.extend(gallery.iter().cloned());
                }
                steps.push(StepDataset::new(d.name.clone(), d.domain_id, protocol, train, gallery, probe)?);
            }
            Protocol::Unseen => unreachable!(),
        }
    }
    Ok(steps)
}

/// Embeddings of a set of sequences with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub embeddings: Array2<f64>,
    pub labels: Vec<u32>,
    pub keys: Vec<String>,
    pub conditions: Vec<Condition>,
}

impl EmbeddingTable {
    pub fn from_sequences(model: &GaitModel, seqs: &[SilhouetteSequence]) -> Result<Self> {
        let refs: Vec<&SilhouetteSequence> = seqs.iter().collect();
        Ok(EmbeddingTable {
            embeddings: model.embed(&refs)?,
            labels: seqs.iter().map(|s| s.identity).collect(),
            keys: seqs.iter().map(|s| s.key.clone()).collect(),
            conditions: seqs.iter().map(|s| s.condition.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, rows: &[usize]) -> EmbeddingTable {
        EmbeddingTable {
            embeddings: self.embeddings.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            keys: rows.iter().map(|&i| self.keys[i].clone()).collect(),
            conditions: rows.iter().map(|&i| self.conditions[i].clone()).collect(),
        }
    }

    fn concat(tables: &[&EmbeddingTable]) -> Result<EmbeddingTable> {
        let views: Vec<_> = tables.iter().map(|t| t.embeddings.view()).collect();
        Ok(EmbeddingTable {
            embeddings: concatenate(Axis(0), &views).map_err(|e| GaitError::invalid(e.to_string()))?,
            labels: tables.iter().flat_map(|t| t.labels.iter().copied()).collect(),
            keys: tables.iter().flat_map(|t| t.keys.iter().cloned()).collect(),
            conditions: tables.iter().flat_map(|t| t.conditions.iter().cloned()).collect(),
        })
    }
}

/// Gallery and probe embeddings of one step.
pub fn extract_gallery_probe_embeddings(model: &GaitModel, step: &StepDataset) -> Result<(EmbeddingTable, EmbeddingTable)> {
    if step.gallery.is_empty() {
        return Err(GaitError::Data(format!("step `{}` has an empty gallery", step.name)));
    }
    Ok((EmbeddingTable::from_sequences(model, &step.gallery)?, EmbeddingTable::from_sequences(model, &step.probe)?))
}

/// Rank-1 and mAP of one probe set against one gallery, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub rank1: f64,
    pub map: f64,
    pub probes: usize,
    /// Probe rows whose identity has no gallery entry (scored as misses).
    pub flagged: Vec<usize>,
}

fn check_tables(probe: &Array2<f64>, probe_labels: &[u32], gallery: &Array2<f64>, gallery_labels: &[u32]) -> Result<()> {
    if gallery.nrows() == 0 {
        return Err(GaitError::invalid("gallery is empty"));
    }
    if probe.nrows() != probe_labels.len() || gallery.nrows() != gallery_labels.len() {
        return Err(GaitError::invalid("embedding and label counts differ"));
    }
    if probe.ncols() != gallery.ncols() {
        return Err(GaitError::invalid(format!("probe width {} vs gallery width {}", probe.ncols(), gallery.ncols())));
    }
    Ok(())
}

/// Gallery indices sorted by ascending Euclidean distance; ties keep the
/// lower index first.
fn ranking(p: ndarray::ArrayView1<'_, f64>, gallery: &Array2<f64>) -> Vec<usize> {
    let d: Vec<f64> = gallery
        .outer_iter()
        .map(|g| g.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

pub fn retrieve(probe: &Array2<f64>, probe_labels: &[u32], gallery: &Array2<f64>, gallery_labels: &[u32]) -> Result<Retrieval> {
    check_tables(probe, probe_labels, gallery, gallery_labels)?;
    let present: BTreeSet<u32> = gallery_labels.iter().copied().collect();
    let (mut hits, mut ap_sum) = (0usize, 0.0);
    let mut flagged = Vec::new();
    for (i, p) in probe.outer_iter().enumerate() {
        let y = probe_labels[i];
        if !present.contains(&y) {
            flagged.push(i);
            continue;
        }
        let order = ranking(p, gallery);
        if gallery_labels[order[0]] == y {
            hits += 1;
        }
        let (mut found, mut precision_sum) = (0usize, 0.0);
        for (k, &g) in order.iter().enumerate() {
            if gallery_labels[g] == y {
                found += 1;
                precision_sum += found as f64 / (k + 1) as f64;
            }
        }
        ap_sum += precision_sum / found as f64;
    }
    if !flagged.is_empty() {
        log::warn!("{} probe(s) have no same-identity gallery entry; counted as misses", flagged.len());
    }
    let n = probe.nrows();
    let pct = |x: f64| if n == 0 { 0.0 } else { 100.0 * x / n as f64 };
    Ok(Retrieval { rank1: pct(hits as f64), map: pct(ap_sum), probes: n, flagged })
}

pub fn rank1(probe: &Array2<f64>, probe_labels: &[u32], gallery: &Array2<f64>, gallery_labels: &[u32]) -> Result<f64> {
    Ok(retrieve(probe, probe_labels, gallery, gallery_labels)?.rank1)
}

pub fn mean_average_precision(probe: &Array2<f64>, probe_labels: &[u32], gallery: &Array2<f64>, gallery_labels: &[u32]) -> Result<f64> {
    Ok(retrieve(probe, probe_labels, gallery, gallery_labels)?.map)
}

/// One metric cell: a test set (or aggregate) under one condition after a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub step: usize,
    pub test_set: String,
    pub condition: String,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// Backtesting results across steps, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<MetricEntry>,
    /// Keys of probes scored as misses because their identity is absent
    /// from the gallery, per step.
    pub flagged: BTreeMap<usize, Vec<String>>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.entries.extend(other.entries);
        for (k, v) in other.flagged {
            self.flagged.entry(k).or_default().extend(v);
        }
    }

    pub fn steps(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.step).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn last_step(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.step).max()
    }

    /// Test-set names other than aggregates, in first-seen order.
    pub fn test_sets(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if ![SOURCE, TARGET, AVERAGE].contains(&e.test_set.as_str()) && !seen.contains(&e.test_set) {
                seen.push(e.test_set.clone());
            }
        }
        seen
    }

    pub fn get(&self, step: usize, test_set: &str, condition: &str) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.step == step && e.test_set == test_set && e.condition == condition)
    }

    pub fn rank1(&self, step: usize, test_set: &str) -> Option<f64> {
        self.get(step, test_set, ALL).map(|e| e.rank1)
    }

    pub fn source(&self, step: usize) -> Option<f64> {
        self.rank1(step, SOURCE)
    }

    pub fn target(&self, step: usize) -> Option<f64> {
        self.rank1(step, TARGET)
    }

    pub fn average(&self, step: usize) -> Option<f64> {
        self.rank1(step, AVERAGE)
    }

    /// Rank-1 indexed by (step, test set); `None` where not evaluated.
    pub fn accuracy_matrix(&self) -> (Vec<usize>, Vec<String>, Vec<Vec<Option<f64>>>) {
        let steps = self.steps();
        let sets = self.test_sets();
        let m = steps.iter().map(|&s| sets.iter().map(|t| self.rank1(s, t)).collect()).collect();
        (steps, sets, m)
    }
}

fn entry(step: usize, test_set: &str, condition: &str, r: &Retrieval) -> MetricEntry {
    MetricEntry { step, test_set: test_set.to_string(), condition: condition.to_string(), rank1: r.rank1, map: r.map }
}

/// Evaluates `model` after `completed` trainable steps of `stream`.
///
/// Every trainable step up to `completed` and every evaluation-only entry is
/// scored, overall and per probe condition. The source aggregate is the
/// first trainable step; the target aggregate retrieves the union of all
/// seen probes against the union of all seen galleries; the average is the
/// mean rank-1 (and mAP) over seen test sets.
pub fn backtest(model: &GaitModel, stream: &[StepDataset], completed: usize) -> Result<EvalReport> {
    if completed == 0 {
        return Err(GaitError::invalid("backtest needs at least one completed step"));
    }
    let seen: Vec<&StepDataset> = stream.iter().filter(|s| s.is_trainable()).take(completed).collect();
    if seen.len() < completed {
        return Err(GaitError::invalid(format!("stream has only {} trainable steps", seen.len())));
    }
    let unseen = stream.iter().filter(|s| !s.is_trainable());
    let mut report = EvalReport::default();
    let mut seen_tables = Vec::new();
    let mut seen_scores = Vec::new();
    for (k, step) in seen.iter().copied().chain(unseen).enumerate() {
        if !step.has_test() {
            continue;
        }
        let (g, p) = extract_gallery_probe_embeddings(model, step)?;
        let r = retrieve(&p.embeddings, &p.labels, &g.embeddings, &g.labels)?;
        report.entries.push(entry(completed, &step.name, ALL, &r));
        let conditions: BTreeSet<String> = p.conditions.iter().map(|c| c.as_str().to_string()).collect();
        for c in conditions {
            let rows: Vec<usize> = (0..p.len()).filter(|&i| p.conditions[i].as_str() == c).collect();
            let sub = p.select(&rows);
            let rc = retrieve(&sub.embeddings, &sub.labels, &g.embeddings, &g.labels)?;
            report.entries.push(entry(completed, &step.name, &c, &rc));
        }
        if !r.flagged.is_empty() {
            report.flagged.entry(completed).or_default().extend(r.flagged.iter().map(|&i| p.keys[i].clone()));
        }
        if k < seen.len() {
            seen_scores.push(r);
            seen_tables.push((g, p));
        }
    }
    if let Some(first) = seen_scores.first() {
        report.entries.push(entry(completed, SOURCE, ALL, first));
        let galleries: Vec<&EmbeddingTable> = seen_tables.iter().map(|(g, _)| g).collect();
        let probes: Vec<&EmbeddingTable> = seen_tables.iter().map(|(_, p)| p).collect();
        let (g, p) = (EmbeddingTable::concat(&galleries)?, EmbeddingTable::concat(&probes)?);
        let union = retrieve(&p.embeddings, &p.labels, &g.embeddings, &g.labels)?;
        report.entries.push(entry(completed, TARGET, ALL, &union));
        let n = seen_scores.len() as f64;
        let avg = Retrieval {
            rank1: seen_scores.iter().map(|r| r.rank1).sum::<f64>() / n,
            map: seen_scores.iter().map(|r| r.map).sum::<f64>() / n,
            probes: 0,
            flagged: Vec::new(),
        };
        report.entries.push(entry(completed, AVERAGE, ALL, &avg));
    }
    Ok(report)
}
