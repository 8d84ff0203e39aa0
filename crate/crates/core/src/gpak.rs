//! Part-graph knowledge repository.
//!
//! Part features `f` (one vertex per part per sample) and a learnable
//! repository `K` form a bipartite transfer graph. Edges exist only between a
//! part vertex and a repository vertex, weighted by a row-softmax of
//! `-½‖f_i − K_j‖²`. One graph convolution over that graph produces the
//! update `V_f`, which is added back onto `f`. Part vertices never exchange
//! messages with each other directly.

use ndarray::{s, Array1, Array2, ArrayD, ArrayView4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::backbone::{Bindings, FeatureMap};
use crate::error::{GaitError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const REPOSITORY: &str = "gpak.repository";
pub const TRANSFER_WEIGHT: &str = "gpak.transfer_weight";
pub const ALPHA_RAW: &str = "gpak.alpha_raw";

/// Pooled inputs are clamped at this floor so fractional powers stay defined.
pub const GEM_FLOOR: f64 = 1e-6;

/// `ln(e^x - 1)`, the inverse of softplus.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(m·S) x C` matrix of pooled part vectors, part-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PartFeatureSet {
    pub f: Array2<f64>,
    pub parts: usize,
    pub batch: usize,
}

impl PartFeatureSet {
    pub fn new(f: Array2<f64>, parts: usize, batch: usize) -> Result<Self> {
        if f.nrows() != parts * batch {
            return Err(GaitError::invalid(format!("{} rows for {parts} parts x {batch} samples", f.nrows())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(GaitError::numerical("part features", "non-finite entry"));
        }
        Ok(PartFeatureSet { f, parts, batch })
    }
}

/// The learnable repository and its frozen previous-step copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Repository {
    pub k: Array2<f64>,
    pub k_prev: Option<Array2<f64>>,
}

/// GPAK shape settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpakConfig {
    pub parts: usize,
    pub repository_size: usize,
    pub channels: usize,
    pub alpha_init: f64,
}

impl GpakConfig {
    /// Repository `~ N(0, 1/C)` elementwise (std `1/sqrt(C)`), transfer weight
    /// `~ U(±1/sqrt(C))`, GeM exponent stored through softplus.
    pub fn init_params<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) {
        let c = self.channels;
        let std = 1.0 / (c as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let k = ArrayD::from_shape_simple_fn(IxDyn(&[self.repository_size, c]), || normal.sample(rng));
        let uni = Uniform::new_inclusive(-std, std).expect("valid bound");
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[c, c]), || uni.sample(rng));
        params.insert(REPOSITORY, k);
        params.insert(TRANSFER_WEIGHT, w);
        params.insert(ALPHA_RAW, ArrayD::from_elem(IxDyn(&[]), inverse_softplus(self.alpha_init)));
    }
}

/// Splits a feature map into `m` horizontal strips per sample.
///
/// Returns `m·S` tensors `[C, T', H'/m, W']` ordered part-major: entry
/// `i*S + b` is part `i` of sample `b`.
pub fn partition(fmap: &FeatureMap, m: usize) -> Result<Vec<ndarray::Array4<f64>>> {
    let (sn, _, _, h, _) = fmap.shape();
    if m == 0 || h % m != 0 {
        return Err(GaitError::config("parts", format!("feature height {h} not divisible by {m}")));
    }
    let ph = h / m;
    let mut out = Vec::with_capacity(m * sn);
    for i in 0..m {
        for b in 0..sn {
            out.push(fmap.0.slice(s![b, .., .., i * ph..(i + 1) * ph, ..]).to_owned());
        }
    }
    Ok(out)
}

/// Inverse of [`partition`].
pub fn reassemble(parts: &[ndarray::Array4<f64>], m: usize) -> Result<FeatureMap> {
    if m == 0 || parts.is_empty() || parts.len() % m != 0 {
        return Err(GaitError::invalid("part count does not divide the number of strips"));
    }
    let sn = parts.len() / m;
    let (c, t, ph, w) = parts[0].dim();
    let mut out = ndarray::Array5::<f64>::zeros((sn, c, t, ph * m, w));
    for i in 0..m {
        for b in 0..sn {
            out.slice_mut(s![b, .., .., i * ph..(i + 1) * ph, ..]).assign(&parts[i * sn + b]);
        }
    }
    Ok(FeatureMap(out))
}

/// Generalized mean over everything but the channel axis:
/// `(mean(max(x, 0)^α))^(1/α)` per channel.
pub fn gem_pool(part: ArrayView4<'_, f64>, alpha: f64) -> Result<Array1<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(GaitError::invalid(format!("GeM exponent must be positive, got {alpha}")));
    }
    let c = part.dim().0;
    let n = (part.len() / c.max(1)) as f64;
    Ok(Array1::from_shape_fn(c, |ch| {
        let m: f64 = part.slice(s![ch, .., .., ..]).iter().map(|v| v.max(GEM_FLOOR).powf(alpha)).sum::<f64>() / n;
        m.powf(1.0 / alpha)
    }))
}

/// `A_c[i][j] = softmax_j(-½‖f_i − K_j‖²)`.
pub fn cross_adjacency(f: &Array2<f64>, k: &Array2<f64>) -> Result<Array2<f64>> {
    if f.ncols() != k.ncols() {
        return Err(GaitError::invalid(format!("feature width {} vs repository width {}", f.ncols(), k.ncols())));
    }
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone().into_dyn());
    let kv = tape.constant(k.clone().into_dyn());
    let a = cross_adjacency_on(&mut tape, fv, kv);
    Ok(to2(tape.value(a)))
}

fn to2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality().expect("rank-2")
}

/// `[[0, A_c], [A_cᵀ, 0]]`
pub fn build_transfer_graph(a_c: &Array2<f64>) -> Array2<f64> {
    let (n, r) = a_c.dim();
    let mut at = Array2::<f64>::zeros((n + r, n + r));
    at.slice_mut(s![..n, n..]).assign(a_c);
    at.slice_mut(s![n.., ..n]).assign(&a_c.t());
    at
}

/// One graph convolution `relu(A_t · ([f; K] · W_t))`, returning only the
/// first `m·S` rows (the updated part vertices).
pub fn transfer_convolve(a_t: &Array2<f64>, f: &Array2<f64>, k: &Array2<f64>, w_t: &Array2<f64>) -> Result<Array2<f64>> {
    let n = f.nrows();
    let total = n + k.nrows();
    if a_t.dim() != (total, total) || f.ncols() != k.ncols() || w_t.dim() != (f.ncols(), f.ncols()) {
        return Err(GaitError::invalid("inconsistent transfer graph dimensions"));
    }
    let mut vt = Array2::<f64>::zeros((total, f.ncols()));
    vt.slice_mut(s![..n, ..]).assign(f);
    vt.slice_mut(s![n.., ..]).assign(k);
    let vf_all = a_t.dot(&vt.dot(w_t)).mapv(|v| v.max(0.0));
    if vf_all.iter().any(|v| !v.is_finite()) {
        return Err(GaitError::numerical("transfer convolution", "non-finite vertex"));
    }
    Ok(vf_all.slice(s![..n, ..]).to_owned())
}

/// `F = V_f + f`
pub fn inject(v_f: &Array2<f64>, f: &Array2<f64>) -> Result<Array2<f64>> {
    if v_f.dim() != f.dim() {
        return Err(GaitError::invalid(format!("inject shape {:?} vs {:?}", v_f.dim(), f.dim())));
    }
    Ok(v_f + f)
}

/// `(1/N) Σ_i ln(1 + exp(‖K_i − K̃_i‖))`
pub fn repository_stability_loss(k: &Array2<f64>, k_prev: Option<&Array2<f64>>) -> Result<f64> {
    let prev = k_prev.ok_or_else(|| GaitError::invalid("repository stability needs a previous-step repository"))?;
    if prev.dim() != k.dim() {
        return Err(GaitError::invalid("repository snapshot shape mismatch"));
    }
    let mut tape = Tape::new();
    let kv = tape.constant(k.clone().into_dyn());
    let l = repository_stability_on(&mut tape, kv, prev);
    Ok(tape.scalar(l))
}

pub fn cross_adjacency_on(tape: &mut Tape, f: Var, k: Var) -> Var {
    let d = tape.sq_dist(f, k);
    let logits = tape.scale(d, -0.5);
    let ls = tape.log_softmax(logits);
    tape.exp(ls)
}

pub fn repository_stability_on(tape: &mut Tape, k: Var, k_prev: &Array2<f64>) -> Var {
    let prev = tape.constant(k_prev.clone().into_dyn());
    let diff = tape.sub(k, prev);
    let sq = tape.mul(diff, diff);
    let rs = tape.row_sum(sq);
    let dist = tape.safe_sqrt(rs);
    let sp = tape.softplus(dist);
    tape.mean(sp)
}

/// Tape nodes produced by one GPAK pass.
#[derive(Debug, Clone, Copy)]
pub struct GpakVars {
    pub alpha: Var,
    /// `[(m·S), C]` pooled part vertices.
    pub f: Var,
    /// Row-stochastic cross adjacency, present when transfer is enabled.
    pub a_c: Option<Var>,
    pub v_f: Option<Var>,
    /// `[(m·S), C]` after injection (equal to `f` when transfer is disabled).
    pub injected: Var,
    /// `[S, m·C]` concatenated per-sample embedding.
    pub embedding: Var,
}

/// Pooling, optional knowledge transfer, injection and concatenation.
pub fn gpak_on(tape: &mut Tape, b: &Bindings, fmap: Var, parts: usize, transfer: bool) -> Result<GpakVars> {
    let get = |name: &str| b.get(name).copied().ok_or_else(|| GaitError::invalid(format!("parameter `{name}` not bound")));
    let h = tape.value(fmap).shape()[3];
    if parts == 0 || h % parts != 0 {
        return Err(GaitError::config("parts", format!("feature height {h} not divisible by {parts}")));
    }
    let alpha = tape.softplus(get(ALPHA_RAW)?);
    let f = tape.gem_parts(fmap, alpha, parts, GEM_FLOOR);
    let (a_c, v_f, injected) = if transfer {
        let k = get(REPOSITORY)?;
        let w = get(TRANSFER_WEIGHT)?;
        let a_c = cross_adjacency_on(tape, f, k);
        // Rows of A_t for part vertices are [0, A_c], so their convolution
        // output only involves the repository block.
        let kw = tape.matmul(k, w);
        let msg = tape.matmul(a_c, kw);
        let v_f = tape.relu(msg);
        let injected = tape.add(v_f, f);
        (Some(a_c), Some(v_f), injected)
    } else {
        (None, None, f)
    };
    if tape.value(injected).iter().any(|v| !v.is_finite()) {
        return Err(GaitError::numerical("gpak", "non-finite injected feature"));
    }
    let embedding = tape.parts_to_embedding(injected, parts);
    Ok(GpakVars { alpha, f, a_c, v_f, injected, embedding })
}

/// Pools a feature map into part vectors with GeM (no gradient tracking).
pub fn pool_parts(fmap: &FeatureMap, m: usize, alpha: f64) -> Result<PartFeatureSet> {
    let mut tape = Tape::new();
    let x = tape.constant(fmap.0.clone().into_dyn());
    let a = tape.constant_scalar(alpha);
    let h = fmap.shape().3;
    if m == 0 || h % m != 0 {
        return Err(GaitError::config("parts", format!("feature height {h} not divisible by {m}")));
    }
    let f = tape.gem_parts(x, a, m, GEM_FLOOR);
    PartFeatureSet::new(to2(tape.value(f)), m, fmap.shape().0)
}

/// Convenience for tests and inspection: the full `[S, m·C]` embedding from
/// a feature map given GPAK parameters.
pub fn embed_feature_map(fmap: &FeatureMap, params: &ParamStore, parts: usize, transfer: bool) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let b = crate::backbone::bind(&mut tape, params, false);
    let x = tape.constant(fmap.0.clone().into_dyn());
    let vars = gpak_on(&mut tape, &b, x, parts, transfer)?;
    Ok(to2(tape.value(vars.embedding)))
}
