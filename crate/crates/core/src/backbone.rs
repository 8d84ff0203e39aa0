//! Silhouette-sequence feature extractor and the expandable identity head.
//!
//! The extractor is a small convolution stack: the first 3x3 convolution runs
//! on every frame, followed by ReLU and 2x2 average pooling; frames are then
//! averaged over time and the remaining 3x3 convolutions (each with ReLU) run
//! on the temporally pooled maps. The output feature map therefore has shape
//! `[S, C, 1, H/2, W/2]`.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, Array1, Array2, Array4, Array5, ArrayD, Ix5, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{GaitError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Walking condition of a clip.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Normal walking.
    NM,
    /// Carrying a bag.
    BG,
    /// Wearing a coat.
    CL,
    Other(String),
}

impl Condition {
    pub fn parse(tag: &str) -> Condition {
        match tag.to_ascii_uppercase().as_str() {
            "NM" => Condition::NM,
            "BG" => Condition::BG,
            "CL" => Condition::CL,
            other => Condition::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Condition::NM => "NM",
            Condition::BG => "BG",
            Condition::CL => "CL",
            Condition::Other(s) => s,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labeled gait clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSequence {
    /// Unique sample key, e.g. `00012/nm-03/090`.
    pub key: String,
    /// `[T, H, W]`, values in `[0, 1]`.
    pub frames: ndarray::Array3<f64>,
    /// Global identity label, unique across domains.
    pub identity: u32,
    pub domain_id: u32,
    pub condition: Condition,
    /// View angle in degrees.
    pub view: u32,
}

impl SilhouetteSequence {
    pub fn new(
        key: impl Into<String>,
        frames: ndarray::Array3<f64>,
        identity: u32,
        domain_id: u32,
        condition: Condition,
        view: u32,
    ) -> Result<Self> {
        let seq = SilhouetteSequence { key: key.into(), frames, identity, domain_id, condition, view };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.frames.dim();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.frames.dim();
        if t < 1 || h < 8 || w < 8 {
            return Err(GaitError::invalid(format!("sequence {} has shape {t}x{h}x{w}; need T>=1, H>=8, W>=8", self.key)));
        }
        if let Some(v) = self.frames.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(GaitError::invalid(format!("sequence {} has frame value {v} outside [0,1]", self.key)));
        }
        Ok(())
    }
}

/// Extractor output, `[S, C, T', H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array5<f64>);

impl FeatureMap {
    pub fn shape(&self) -> (usize, usize, usize, usize, usize) {
        self.0.dim()
    }
}

/// Shape of the convolutional extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Output channels of each 3x3 convolution. The first runs per frame;
    /// the last is the embedding channel count `C`.
    pub channels: Vec<usize>,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Clips are clipped or cyclically padded to this length.
    pub seq_len: usize,
}

impl ExtractorConfig {
    pub fn embed_channels(&self) -> usize {
        *self.channels.last().expect("at least one layer")
    }

    /// `(H', W')` of the feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.frame_height / 2, self.frame_width / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(GaitError::config("channels", "need at least two non-zero layer widths"));
        }
        if self.frame_height < 8 || self.frame_width < 8 || self.frame_height % 2 != 0 || self.frame_width % 2 != 0 {
            return Err(GaitError::config("frame_height/frame_width", "must be even and at least 8"));
        }
        if self.seq_len == 0 {
            return Err(GaitError::config("sequence_length", "must be positive"));
        }
        Ok(())
    }

    fn conv_name(i: usize) -> (String, String) {
        (format!("backbone.conv{i}.weight"), format!("backbone.conv{i}.bias"))
    }

    /// He-uniform weights, zero biases.
    pub fn init_params<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) {
        let mut cin = 1;
        for (i, &cout) in self.channels.iter().enumerate() {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("valid bound");
            let w = ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin, 3, 3]), || dist.sample(rng));
            let (wn, bn) = Self::conv_name(i);
            params.insert(wn, w);
            params.insert(bn, ArrayD::zeros(IxDyn(&[cout])));
            cin = cout;
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.channels.len())
            .flat_map(|i| {
                let (w, b) = Self::conv_name(i);
                [w, b]
            })
            .collect()
    }
}

/// Parameters bound onto a tape, by name.
pub type Bindings = BTreeMap<String, Var>;

/// Puts every parameter on the tape as a leaf.
pub fn bind(tape: &mut Tape, params: &ParamStore, needs_grad: bool) -> Bindings {
    params
        .iter()
        .map(|(name, a)| (name.to_string(), tape.leaf(a.clone(), needs_grad)))
        .collect()
}

fn bound(b: &Bindings, name: &str) -> Result<Var> {
    b.get(name).copied().ok_or_else(|| GaitError::invalid(format!("parameter `{name}` not bound")))
}

/// Stacks clips into `[S*T, 1, H, W]`, clipping long clips and cyclically
/// padding short ones to `cfg.seq_len`.
pub fn stack_frames(batch: &[&SilhouetteSequence], cfg: &ExtractorConfig) -> Result<Array4<f64>> {
    if batch.is_empty() {
        return Err(GaitError::invalid("empty batch"));
    }
    let (h, w) = (cfg.frame_height, cfg.frame_width);
    let t = cfg.seq_len;
    let mut out = Array4::<f64>::zeros((batch.len() * t, 1, h, w));
    for (b, seq) in batch.iter().enumerate() {
        if seq.resolution() != (h, w) {
            let (sh, sw) = seq.resolution();
            return Err(GaitError::invalid(format!(
                "sequence {} is {sh}x{sw}, extractor expects {h}x{w}",
                seq.key
            )));
        }
        let len = seq.len();
        if len == 0 {
            return Err(GaitError::invalid(format!("sequence {} has no frames", seq.key)));
        }
        for k in 0..t {
            out.slice_mut(s![b * t + k, 0, .., ..]).assign(&seq.frames.slice(s![k % len, .., ..]));
        }
    }
    Ok(out)
}

/// Records the extractor forward pass for a `[S*T, 1, H, W]` input node.
pub fn extract_features_on(tape: &mut Tape, b: &Bindings, cfg: &ExtractorConfig, input: Var) -> Result<Var> {
    let (w0, b0) = ExtractorConfig::conv_name(0);
    let mut x = tape.frame_encoder(input, bound(b, &w0)?, bound(b, &b0)?, cfg.seq_len);
    for i in 1..cfg.channels.len() {
        let (wn, bn) = ExtractorConfig::conv_name(i);
        x = tape.conv3x3(x, bound(b, &wn)?, bound(b, &bn)?);
        x = tape.relu(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let fmap = tape.reshape(x, &[shape[0], shape[1], 1, shape[2], shape[3]]);
    if tape.value(fmap).iter().any(|v| !v.is_finite()) {
        return Err(GaitError::numerical("extractor", "non-finite activation"));
    }
    Ok(fmap)
}

/// Runs the extractor on a batch without recording gradients.
pub fn extract_features(batch: &[&SilhouetteSequence], params: &ParamStore, cfg: &ExtractorConfig) -> Result<FeatureMap> {
    let frames = stack_frames(batch, cfg)?;
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, false);
    let input = tape.constant(frames.into_dyn());
    let fmap = extract_features_on(&mut tape, &b, cfg, input)?;
    let v = tape
        .value(fmap)
        .clone()
        .into_dimensionality::<Ix5>()
        .map_err(|e| GaitError::invalid(e.to_string()))?;
    Ok(FeatureMap(v))
}

/// Linear identity classifier over concatenated part embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[class_count, input_width]`
    pub weight: Array2<f64>,
    /// `[class_count]`
    pub bias: Array1<f64>,
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

impl ClassifierHead {
    pub fn empty(input_width: usize) -> Self {
        ClassifierHead { weight: Array2::zeros((0, input_width)), bias: Array1::zeros(0) }
    }

    pub fn class_count(&self) -> usize {
        self.weight.nrows()
    }

    pub fn input_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let weight = params
            .require(HEAD_WEIGHT)?
            .clone()
            .into_dimensionality()
            .map_err(|e| GaitError::invalid(e.to_string()))?;
        let bias = params
            .require(HEAD_BIAS)?
            .clone()
            .into_dimensionality()
            .map_err(|e| GaitError::invalid(e.to_string()))?;
        Ok(ClassifierHead { weight, bias })
    }

    pub fn store(&self, params: &mut ParamStore) {
        params.insert(HEAD_WEIGHT, self.weight.clone().into_dyn());
        params.insert(HEAD_BIAS, self.bias.clone().into_dyn());
    }

    /// Logits for a `[S, input_width]` embedding batch.
    pub fn classify(&self, embedding: &Array2<f64>) -> Result<Array2<f64>> {
        if embedding.ncols() != self.input_width() {
            return Err(GaitError::invalid(format!(
                "embedding width {} does not match head input {}",
                embedding.ncols(),
                self.input_width()
            )));
        }
        let logits = embedding.dot(&self.weight.t()) + &self.bias;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(GaitError::numerical("classifier", "non-finite logit"));
        }
        Ok(logits)
    }

    /// Appends `new_classes` rows drawn from `U(-1/sqrt(width), 1/sqrt(width))`
    /// with zero bias; existing rows are copied unchanged.
    pub fn expand<R: Rng>(&self, new_classes: usize, rng: &mut R) -> ClassifierHead {
        if new_classes == 0 {
            return self.clone();
        }
        let width = self.input_width();
        let old = self.class_count();
        let bound = 1.0 / (width.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let mut weight = Array2::<f64>::zeros((old + new_classes, width));
        weight.slice_mut(s![..old, ..]).assign(&self.weight);
        for v in weight.slice_mut(s![old.., ..]).iter_mut() {
            *v = dist.sample(rng);
        }
        let mut bias = Array1::<f64>::zeros(old + new_classes);
        bias.slice_mut(s![..old]).assign(&self.bias);
        ClassifierHead { weight, bias }
    }
}

/// Cross-entropy of `[S, C]` logits against class indices, recorded on a tape.
pub fn id_loss_on(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = {
        let v = tape.value(logits);
        (v.shape()[0], v.shape()[1])
    };
    if labels.len() != n {
        return Err(GaitError::invalid(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(GaitError::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let ls = tape.log_softmax(logits);
    let picked = tape.gather(ls, labels.iter().enumerate().map(|(i, &y)| i * c + y).collect());
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Mean negative log-softmax probability of the true class.
pub fn id_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone().into_dyn());
    let loss = id_loss_on(&mut tape, l, labels)?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ExtractorConfig {
        ExtractorConfig { channels: vec![4, 6, 8], frame_height: 16, frame_width: 12, seq_len: 4 }
    }

    fn seq(key: &str, t: usize, fill: impl Fn(usize, usize, usize) -> f64) -> SilhouetteSequence {
        let frames = ndarray::Array3::from_shape_fn((t, 16, 12), |(a, b, c)| fill(a, b, c));
        SilhouetteSequence::new(key, frames, 0, 0, Condition::NM, 90).unwrap()
    }

    #[test]
    fn zero_frames_with_zero_final_layer_give_zero_map() {
        let c = cfg();
        let mut p = ParamStore::new();
        c.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        p.get_mut("backbone.conv2.weight").unwrap().fill(0.0);
        let s = seq("a", 4, |_, _, _| 0.0);
        let fm = extract_features(&[&s], &p, &c).unwrap();
        assert_eq!(fm.shape(), (1, 8, 1, 8, 6));
        assert!(fm.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_entries_identical_slices_and_padding() {
        let c = cfg();
        let mut p = ParamStore::new();
        c.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(1));
        let a = seq("a", 2, |t, y, x| ((t + y * x) % 3 == 0) as u8 as f64);
        let fm = extract_features(&[&a, &a], &p, &c).unwrap();
        assert_eq!(fm.0.slice(s![0, .., .., .., ..]), fm.0.slice(s![1, .., .., .., ..]));
        // a 2-frame clip cyclically padded to 4 equals the explicit 4-frame repeat
        let b = seq("b", 4, |t, y, x| (((t % 2) + y * x) % 3 == 0) as u8 as f64);
        let fb = extract_features(&[&b], &p, &c).unwrap();
        assert_eq!(fm.0.slice(s![0, .., .., .., ..]), fb.0.slice(s![0, .., .., .., ..]));
    }

    #[test]
    fn mismatched_resolution_rejected() {
        let c = cfg();
        let mut p = ParamStore::new();
        c.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(1));
        let frames = ndarray::Array3::zeros((3, 20, 12));
        let odd = SilhouetteSequence::new("x", frames, 0, 0, Condition::NM, 0).unwrap();
        assert!(matches!(extract_features(&[&odd], &p, &c), Err(GaitError::InvalidInput(_))));
    }

    #[test]
    fn sequence_validation() {
        let bad = ndarray::Array3::from_elem((2, 16, 12), 1.5);
        assert!(SilhouetteSequence::new("x", bad, 0, 0, Condition::NM, 0).is_err());
        let small = ndarray::Array3::zeros((2, 4, 12));
        assert!(SilhouetteSequence::new("x", small, 0, 0, Condition::NM, 0).is_err());
    }

    #[test]
    fn feature_height_divisible_by_supported_parts() {
        let c = ExtractorConfig { channels: vec![8, 16, 32], frame_height: 32, frame_width: 22, seq_len: 8 };
        let (h, _) = c.feature_hw();
        for m in [1, 2, 4, 8, 16] {
            assert_eq!(h % m, 0);
        }
        let c = ExtractorConfig { frame_height: 64, frame_width: 44, ..c };
        for m in [1, 2, 4, 8, 16] {
            assert_eq!(c.feature_hw().0 % m, 0);
        }
    }

    #[test]
    fn classify_zero_and_dimension_mismatch() {
        let head = ClassifierHead { weight: Array2::from_elem((3, 4), 0.7), bias: Array1::zeros(3) };
        let z = head.classify(&Array2::zeros((2, 4))).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(head.classify(&Array2::zeros((2, 5))).is_err());
    }

    #[test]
    fn classify_matches_dense_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = ClassifierHead::empty(7).expand(5, &mut rng);
        let e = Array2::from_shape_fn((3, 7), |_| rng.random_range(-2.0..2.0));
        let z = head.classify(&e).unwrap();
        for i in 0..3 {
            for k in 0..5 {
                let mut acc = head.bias[k];
                for j in 0..7 {
                    acc += e[[i, j]] * head.weight[[k, j]];
                }
                assert!((z[[i, k]] - acc).abs() <= 1e-6 * acc.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn expansion_preserves_old_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h4 = ClassifierHead::empty(6).expand(4, &mut rng);
        assert_eq!(h4.expand(0, &mut rng), h4);
        let h6 = h4.expand(2, &mut rng);
        assert_eq!(h6.class_count(), 6);
        let e = Array2::from_shape_fn((2, 6), |(i, j)| (i as f64) - 0.3 * j as f64);
        let before = h4.classify(&e).unwrap();
        let after = h6.classify(&e).unwrap();
        assert_eq!(after.slice(s![.., ..4]), before);
        let h124 = ClassifierHead::empty(6).expand(74, &mut rng).expand(50, &mut rng);
        assert_eq!(h124.class_count(), 124);
        let bound = 1.0 / 6f64.sqrt();
        assert!(h6.weight.slice(s![4.., ..]).iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn id_loss_values() {
        let uniform = Array2::zeros((2, 4));
        assert!((id_loss(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let mut sat = Array2::zeros((1, 3));
        sat[[0, 1]] = 80.0;
        assert!(id_loss(&sat, &[1]).unwrap() < 1e-30);
        assert!(id_loss(&uniform, &[4, 0]).is_err());

        let logits = ndarray::arr2::<f64, 5>(&[[0.3, -1.2, 2.0, 0.5, 0.0], [1.1, 0.4, -0.7, 2.2, -3.0], [0.0, 0.1, 0.2, 0.3, 0.4]]);
        let labels = [2, 0, 4];
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            oracle -= (logits[[i, y]].exp() / z).ln();
        }
        oracle /= 3.0;
        assert!((id_loss(&logits, &labels).unwrap() - oracle).abs() < 1e-8);
    }

    #[test]
    fn id_loss_gradient_matches_central_differences() {
        let logits = ndarray::arr2(&[[0.3, -1.2, 2.0], [1.1, 0.4, -0.7]]);
        let labels = [2, 1];
        let mut tape = Tape::new();
        let v = tape.leaf(logits.clone().into_dyn(), true);
        let l = id_loss_on(&mut tape, v, &labels).unwrap();
        let g = tape.backward(l).get(v).unwrap().clone();
        let h = 1e-5;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let fd = (id_loss(&p, &labels).unwrap() - id_loss(&m, &labels).unwrap()) / (2.0 * h);
                let a = g[[i, j]];
                assert!((a - fd).abs() / a.abs().max(1e-12) < 1e-5, "{a} vs {fd}");
            }
        }
    }
}
