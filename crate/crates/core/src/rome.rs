//! Rank-one editing of an MLP output projection.
//!
//! A key `k*` (the post-activation hidden vector at the edit site) is
//! rewired to a new value `v*` with the covariance-weighted minimal change
//! `ΔW = (v* − W k*)(C⁻¹k*)ᵀ / (k*ᵀ C⁻¹ k*)`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Intervention, TransformerModel};
use crate::tensor::linalg::Cholesky;
use crate::tensor::{dot, gemm, matvec, norm, Tape, Tensor};

/// Ridge relative to the mean diagonal of the raw second moment.
pub const DEFAULT_RIDGE: f64 = 1e-4;
const STATS_MAGIC: &[u8; 4] = b"KSTS";
const STATS_VERSION: u32 = 1;
const CALIBRATION_CHUNK: usize = 64;

/// `C = λI + (1/N) Σ k kᵀ` over calibration keys at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyStats {
    pub layer: usize,
    pub lambda: f64,
    pub d_hidden: usize,
    pub n_samples: usize,
    /// Row-major `d_hidden × d_hidden`.
    pub c: Vec<f64>,
    chol: Cholesky,
}

impl KeyStats {
    /// Adds `lambda` to the diagonal of `moment` and factorizes, raising
    /// `lambda` tenfold until the factorization succeeds.
    pub fn from_moment(layer: usize, moment: &[f64], d: usize, n_samples: usize, lambda: f64) -> Result<Self> {
        if moment.len() != d * d || !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("invalid second moment ({} entries for d={d}) or lambda {lambda}", moment.len())));
        }
        let mut lambda = lambda;
        for _ in 0..12 {
            let mut c = moment.to_vec();
            for i in 0..d {
                c[i * d + i] += lambda;
            }
            if let Some(chol) = Cholesky::factor(&c, d) {
                return Ok(Self { layer, lambda, d_hidden: d, n_samples, c, chol });
            }
            log::warn!("key covariance at layer {layer} not positive definite with lambda {lambda:e}; retrying with {:e}", lambda * 10.0);
            lambda *= 10.0;
        }
        Err(Error::Numeric(format!("key covariance at layer {layer} is singular")))
    }

    /// `C⁻¹ x`.
    pub fn solve(&self, x: &[f64]) -> Vec<f64> {
        self.chol.solve(x)
    }

    pub fn inverse(&self) -> Vec<f64> {
        self.chol.inverse()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + 8 * self.c.len());
        buf.extend_from_slice(STATS_MAGIC);
        buf.extend_from_slice(&STATS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layer as u32).to_le_bytes());
        buf.extend_from_slice(&self.lambda.to_le_bytes());
        buf.extend_from_slice(&(self.d_hidden as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_samples as u64).to_le_bytes());
        for v in &self.c {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Input(format!("key statistics cache: {what}"));
        const HEADER: usize = 4 + 4 + 4 + 8 + 4 + 8;
        if bytes.len() < HEADER + 4 || &bytes[..4] != STATS_MAGIC {
            return Err(bad("bad magic or truncated"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(4) != STATS_VERSION {
            return Err(bad("unsupported version"));
        }
        let layer = u32_at(8) as usize;
        let lambda = f64_at(12);
        let d = u32_at(20) as usize;
        let n_samples = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        if bytes.len() != HEADER + 8 * d * d + 4 {
            return Err(bad("length does not match d_hidden"));
        }
        let body = &bytes[..bytes.len() - 4];
        if crc32fast::hash(body) != u32_at(bytes.len() - 4) {
            return Err(bad("checksum mismatch"));
        }
        let c: Vec<f64> = (0..d * d).map(|i| f64_at(HEADER + 8 * i)).collect();
        let chol = Cholesky::factor(&c, d).ok_or_else(|| bad("matrix is not positive definite"))?;
        Ok(Self { layer, lambda, d_hidden: d, n_samples, c, chol })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Estimates key statistics at `layer` from every position of `prompts`.
/// `lambda` defaults to [`DEFAULT_RIDGE`] × mean diagonal of the raw moment.
pub fn estimate_key_stats(model: &TransformerModel, prompts: &[Vec<u32>], layer: usize, lambda: Option<f64>) -> Result<KeyStats> {
    let d = model.config().d_hidden;
    if layer >= model.config().n_layers {
        return Err(Error::Config(format!("layer {layer} out of range")));
    }
    if prompts.is_empty() {
        return Err(Error::Input("empty calibration corpus".into()));
    }
    let mut moment = vec![0.0; d * d];
    let mut n = 0usize;
    for chunk in prompts.chunks(CALIBRATION_CHUNK) {
        let seqs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let fv = model.record(&mut tape, &seqs, &ForwardOptions::default())?;
        let keys = tape.value(fv.keys[layer]);
        gemm(d, keys.rows(), d, keys.data(), true, keys.data(), false, &mut moment, true);
        n += keys.rows();
    }
    if n < 1000 {
        log::warn!("only {n} calibration keys at layer {layer}");
    }
    moment.iter_mut().for_each(|v| *v /= n as f64);
    let lambda = match lambda {
        Some(l) => l,
        None => {
            let mean_diag = (0..d).map(|i| moment[i * d + i]).sum::<f64>() / d as f64;
            if mean_diag > 0.0 { DEFAULT_RIDGE * mean_diag } else { DEFAULT_RIDGE }
        }
    };
    KeyStats::from_moment(layer, &moment, d, n, lambda)
}

/// Cache file for statistics of `fingerprint` at (`layer`, `lambda`).
pub fn stats_cache_path(dir: &Path, fingerprint: &str, layer: usize, lambda: Option<f64>) -> PathBuf {
    let tag = lambda.map_or_else(|| "auto".to_string(), |l| format!("{:016x}", l.to_bits()));
    dir.join(format!("keystats-{fingerprint}-l{layer}-{tag}.ksts"))
}

/// Loads cached statistics when present, otherwise estimates and caches them.
pub fn key_stats_cached(
    model: &TransformerModel,
    prompts: &[Vec<u32>],
    layer: usize,
    lambda: Option<f64>,
    cache_dir: Option<&Path>,
) -> Result<KeyStats> {
    let Some(dir) = cache_dir else {
        return estimate_key_stats(model, prompts, layer, lambda);
    };
    let path = stats_cache_path(dir, &model.fingerprint(), layer, lambda);
    if path.exists() {
        match KeyStats::load(&path) {
            Ok(s) if s.layer == layer && s.d_hidden == model.config().d_hidden => return Ok(s),
            Ok(_) => log::warn!("ignoring mismatched cache {}", path.display()),
            Err(e) => log::warn!("ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    let stats = estimate_key_stats(model, prompts, layer, lambda)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    stats.save(&path)?;
    Ok(stats)
}

/// The MLP key at (`layer`, `token`) of `ids`.
pub fn compute_key(model: &TransformerModel, ids: &[u32], layer: usize, token: usize) -> Result<Vec<f64>> {
    if token >= ids.len() || layer >= model.config().n_layers {
        return Err(Error::Input(format!("edit site (layer {layer}, token {token}) outside a {}-token prompt", ids.len())));
    }
    let (_, acts) = model.forward(ids, true)?;
    Ok(acts.expect("captured").key(layer, token).to_vec())
}

/// Mean key over `prefixes` prepended to `ids`; plain [`compute_key`] when
/// `prefixes` is empty.
pub fn compute_key_averaged(
    model: &TransformerModel,
    ids: &[u32],
    layer: usize,
    token: usize,
    prefixes: &[Vec<u32>],
) -> Result<Vec<f64>> {
    if prefixes.is_empty() {
        return compute_key(model, ids, layer, token);
    }
    let mut acc = vec![0.0; model.config().d_hidden];
    for p in prefixes {
        let seq: Vec<u32> = p.iter().chain(ids).copied().collect();
        let k = compute_key(model, &seq, layer, token + p.len())?;
        acc.iter_mut().zip(&k).for_each(|(a, b)| *a += b);
    }
    acc.iter_mut().for_each(|a| *a /= prefixes.len() as f64);
    Ok(acc)
}

/// Draws `n` prefixes of up to `max_len` tokens from `pool`, deterministically.
pub fn sample_prefixes(pool: &[Vec<u32>], n: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.choose_multiple(&mut rng, n).map(|p| p[..p.len().min(max_len)].to_vec()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueConfig {
    pub steps: usize,
    pub lr: f64,
    /// `‖v − m‖ ≤ clamp · ‖m‖`.
    pub clamp: f64,
    /// Stop once `−log P(target)` is below this.
    pub early_stop: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self { steps: 25, lr: 0.5, clamp: 4.0, early_stop: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTarget {
    pub v: Vec<f64>,
    /// Pre-edit MLP output at the edit site.
    pub m: Vec<f64>,
    /// Objective at the start and after each accepted step.
    pub trace: Vec<f64>,
    pub steps_run: usize,
    /// `‖v − m‖ / ‖m‖`.
    pub clamp_ratio: f64,
    /// P(target) rose strictly above its pre-edit value.
    pub improved: bool,
}

/// `−log P(target)` and its gradient with the MLP output at the site replaced by `v`.
fn objective(model: &TransformerModel, ids: &[u32], layer: usize, token: usize, target: u32, v: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let value = tape.leaf(Tensor::new(&[1, v.len()], v.to_vec())?, true);
    let opts = ForwardOptions { intervention: Some(Intervention { layer, row: token, value }), ..Default::default() };
    let fv = model.record(&mut tape, &[ids], &opts)?;
    let loss = tape.cross_entropy(fv.logits, &[target as usize])?;
    let f = tape.value(loss).data()[0];
    let mut g = tape.backward(loss)?;
    Ok((f, g.take(value)))
}

fn project(delta: &mut [f64], radius: f64) {
    let n = norm(delta);
    if n > radius {
        let s = radius / n;
        delta.iter_mut().for_each(|x| *x *= s);
    }
}

/// Optimizes `v = m + δ` to make `target` the next token. Steps are adaptive
/// per coordinate; a step that raises the objective is rejected and the step
/// size halved, so accepted objectives never increase.
pub fn optimize_value(
    model: &TransformerModel,
    ids: &[u32],
    layer: usize,
    token: usize,
    target: u32,
    cfg: &ValueConfig,
) -> Result<ValueTarget> {
    if token >= ids.len() || layer >= model.config().n_layers {
        return Err(Error::Input(format!("edit site (layer {layer}, token {token}) outside a {}-token prompt", ids.len())));
    }
    if target as usize >= model.config().vocab_size {
        return Err(Error::Input(format!("target token {target} outside vocabulary")));
    }
    let (_, acts) = model.forward(ids, true)?;
    let m = acts.expect("captured").mlp_output(layer, token).to_vec();
    let radius = cfg.clamp * norm(&m);
    let d = m.len();
    let at = |delta: &[f64]| -> Vec<f64> { m.iter().zip(delta).map(|(a, b)| a + b).collect() };

    let mut delta = vec![0.0; d];
    let (mut f, mut g) = objective(model, ids, layer, token, target, &m)?;
    let f0 = f;
    let mut trace = vec![f];
    let (mut m1, mut m2) = (vec![0.0; d], vec![0.0; d]);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut lr = cfg.lr;
    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        if f < cfg.early_stop {
            break;
        }
        steps_run = step;
        let (c1, c2) = (1.0 - f64::powi(b1, step as i32), 1.0 - f64::powi(b2, step as i32));
        let mut proposal = delta.clone();
        for i in 0..d {
            m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
            proposal[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
        }
        project(&mut proposal, radius);
        let (f2, g2) = objective(model, ids, layer, token, target, &at(&proposal))?;
        if !f2.is_finite() {
            return Err(Error::Numeric(format!("value objective became {f2} at step {step}")));
        }
        if f2 <= f {
            delta = proposal;
            f = f2;
            g = g2;
            trace.push(f);
        } else {
            lr *= 0.5;
        }
    }
    let v = at(&delta);
    let mn = norm(&m);
    Ok(ValueTarget {
        clamp_ratio: if mn > 0.0 { norm(&delta) / mn } else { 0.0 },
        improved: f < f0,
        v,
        m,
        trace,
        steps_run,
    })
}

/// `ΔW = (v − W k)(C⁻¹k)ᵀ / (kᵀC⁻¹k)` for `W` of shape `[d_model, d_hidden]`.
pub fn rank_one_update(w: &Tensor, key: &[f64], value: &[f64], stats: &KeyStats) -> Result<Tensor> {
    if w.shape().len() != 2 || w.cols() != key.len() || w.rows() != value.len() || stats.d_hidden != key.len() {
        return Err(Error::Shape { op: "rank_one_update", lhs: w.shape().to_vec(), rhs: vec![value.len(), key.len()] });
    }
    if key.iter().all(|&x| x == 0.0) {
        return Err(Error::Input("degenerate zero key".into()));
    }
    let c_inv_k = stats.solve(key);
    let denom = dot(key, &c_inv_k);
    if !(denom > 0.0) {
        return Err(Error::Numeric(format!("kᵀC⁻¹k = {denom}")));
    }
    let residual: Vec<f64> = value.iter().zip(matvec(w, key)).map(|(v, wk)| v - wk).collect();
    let mut delta = Tensor::zeros(w.shape());
    for (r, &res) in residual.iter().enumerate() {
        for (x, &u) in delta.row_mut(r).iter_mut().zip(&c_inv_k) {
            *x = res * u / denom;
        }
    }
    Ok(delta)
}

/// A rank-one change to `W_out` at one layer, with exact revert.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneEdit {
    pub layer: usize,
    pub token: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub delta: Tensor,
    /// `W_out` before apply; restored verbatim on revert.
    saved: Option<Tensor>,
}

impl RankOneEdit {
    pub fn new(layer: usize, token: usize, key: Vec<f64>, value: Vec<f64>, delta: Tensor) -> Self {
        Self { layer, token, key, value, delta, saved: None }
    }

    /// Computes the update that maps `key` to `value` at `layer` of `model`.
    pub fn compute(model: &TransformerModel, layer: usize, token: usize, key: Vec<f64>, value: Vec<f64>, stats: &KeyStats) -> Result<Self> {
        if stats.layer != layer {
            return Err(Error::Config(format!("key statistics are for layer {}, edit is at layer {layer}", stats.layer)));
        }
        let delta = rank_one_update(model.w_out(layer), &key, &value, stats)?;
        Ok(Self::new(layer, token, key, value, delta))
    }

    pub fn is_applied(&self) -> bool {
        self.saved.is_some()
    }

    pub fn apply(&mut self, model: &mut TransformerModel) -> Result<()> {
        if self.saved.is_some() {
            return Err(Error::EditState("edit already applied"));
        }
        let w = model.w_out_mut(self.layer);
        if w.shape() != self.delta.shape() {
            return Err(Error::Shape { op: "apply_edit", lhs: w.shape().to_vec(), rhs: self.delta.shape().to_vec() });
        }
        self.saved = Some(w.clone());
        w.data_mut().iter_mut().zip(self.delta.data()).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn revert(&mut self, model: &mut TransformerModel) -> Result<()> {
        let saved = self.saved.take().ok_or(Error::EditState("edit not applied"))?;
        *model.w_out_mut(self.layer) = saved;
        Ok(())
    }

    pub fn delta_frobenius(&self) -> f64 {
        self.delta.frobenius_norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    pub entry_id: String,
    pub layer: usize,
    pub token: usize,
    pub delta_frobenius: f64,
    pub objective_trace: Vec<f64>,
}
