//! Pre-norm decoder-only transformer used as a True/False classifier.
//!
//! Per layer `l` and position `t`:
//!
//! ```text
//! h   += W_o · attn(norm1(h))
//! k    = gelu(W_in · norm2(h))       key,   d_hidden
//! m    = W_out · k                   value, d_model
//! h   += m
//! ```
//!
//! The forward pass records `k_{l,t}` and `m_{l,t}` for every layer and
//! position; these are the quantities the tracer and the editor work on.

pub mod checkpoint;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Differentiable, Tape, Tensor, Var};
pub use tokenizer::{AnswerIds, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self { n_layers: 8, d_model: 128, n_heads: 4, d_hidden: 512, vocab_size, max_seq_len: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.n_layers < 2 {
            return Err(Error::Config(format!("n_layers must be >= 2, got {}", c.n_layers)));
        }
        if c.d_model == 0 || c.n_heads == 0 || c.d_model % c.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", c.d_model, c.n_heads)));
        }
        if c.d_hidden == 0 || c.vocab_size < 2 || c.max_seq_len == 0 {
            return Err(Error::Config(format!("degenerate config {c:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `d_hidden × d_model`
    pub w_in: Tensor,
    /// `d_model × d_hidden`
    pub w_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head: Tensor,
}

/// Replace `m_{layer,position}` with `value` during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Intervention {
    pub layer: usize,
    /// Row in the packed batch.
    pub row: usize,
    /// `[1 × d_model]` variable already recorded on the tape.
    pub value: Var,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record parameters as gradient-requiring leaves.
    pub param_grads: bool,
    /// Watch every `m_{l,·}` so its gradient is available after backward.
    pub watch_mlp_out: bool,
    /// Watch every `k_{l,·}` likewise.
    pub watch_keys: bool,
    pub intervention: Option<Intervention>,
}

/// Variables recorded by [`TransformerModel::record`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[n_sequences × vocab]` logits at each sequence's last position.
    pub logits: Var,
    /// `[N × d_model]` final residual stream over all packed positions.
    pub residual: Var,
    /// Per layer, `[N × d_hidden]`.
    pub keys: Vec<Var>,
    /// Per layer, `[N × d_model]`, after any intervention.
    pub mlp_out: Vec<Var>,
    /// Parameter leaves in [`TransformerModel::named_params`] order.
    pub params: Vec<Var>,
    /// `(start_row, len)` per sequence.
    pub segments: Vec<(usize, usize)>,
}

/// Per-(layer, position) MLP keys and outputs of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTape {
    /// Per layer `[T × d_hidden]`.
    pub keys: Vec<Tensor>,
    /// Per layer `[T × d_model]`.
    pub mlp_out: Vec<Tensor>,
    pub logits: Vec<f64>,
}

impl ActivationTape {
    pub fn key(&self, layer: usize, pos: usize) -> &[f64] {
        self.keys[layer].row(pos)
    }

    pub fn mlp_output(&self, layer: usize, pos: usize) -> &[f64] {
        self.mlp_out[layer].row(pos)
    }

    pub fn len(&self) -> usize {
        self.keys.first().map(Tensor::rows).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthProbs {
    pub p_true: f64,
    pub p_false: f64,
    pub p_other: f64,
}

impl TruthProbs {
    pub fn from_logits(logits: &[f64], answers: AnswerIds) -> Self {
        let probs = softmax(logits);
        let (p_true, p_false) = (probs[answers.true_id as usize], probs[answers.false_id as usize]);
        Self { p_true, p_false, p_other: 1.0 - p_true - p_false }
    }

    /// Probability of `target` and of the opposite answer.
    pub fn target_other(&self, target_truth: bool) -> (f64, f64) {
        if target_truth {
            (self.p_true, self.p_false)
        } else {
            (self.p_false, self.p_true)
        }
    }

    /// Strictly more mass on the `truth` answer than on the other; ties fail.
    pub fn is_correct(&self, truth: bool) -> bool {
        let (a, b) = self.target_other(truth);
        a > b
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    crate::tensor::softmax_in_place(&mut p);
    p
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("valid shape")
}

impl TransformerModel {
    /// GPT-2 style initialization: N(0, 0.02) everywhere, residual output
    /// projections scaled by `1/sqrt(2·n_layers)`, unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, v) = (config.d_model, config.d_hidden, config.vocab_size);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = normal(&mut rng, &[v, d], std);
        let pos_emb = normal(&mut rng, &[config.max_seq_len, d], std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: normal(&mut rng, &[d, d], std),
                wk: normal(&mut rng, &[d, d], std),
                wv: normal(&mut rng, &[d, d], std),
                wo: normal(&mut rng, &[d, d], resid_std),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_in: normal(&mut rng, &[h, d], std),
                w_out: normal(&mut rng, &[d, h], resid_std),
            })
            .collect();
        let head = normal(&mut rng, &[v, d], std);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::filled(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("attn.wq", &l.wq),
                ("attn.wk", &l.wk),
                ("attn.wv", &l.wv),
                ("attn.wo", &l.wo),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
                ("mlp.w_in", &l.w_in),
                ("mlp.w_out", &l.w_out),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf.gain".to_string(), &self.lnf_gain));
        out.push(("lnf.bias".to_string(), &self.lnf_bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable parameters in [`Self::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_in,
                &mut l.w_out,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.head]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn w_out(&self, layer: usize) -> &Tensor {
        &self.layers[layer].w_out
    }

    pub fn w_out_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.layers[layer].w_out
    }

    fn check_sequence(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "prompt of {} tokens exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Records a forward pass over a batch of sequences on `tape`.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, seqs: &[&[u32]], opts: &ForwardOptions) -> Result<ForwardVars> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut segments = Vec::with_capacity(seqs.len());
        let (mut ids, mut pos) = (Vec::new(), Vec::new());
        for s in seqs {
            self.check_sequence(s)?;
            segments.push((ids.len(), s.len()));
            ids.extend(s.iter().map(|&i| i as usize));
            pos.extend(0..s.len());
        }
        let params: Vec<Var> =
            self.named_params().into_iter().map(|(_, t)| tape.leaf_ref(t, opts.param_grads)).collect();
        let n_layers = self.config.n_layers;
        let p = |i: usize| params[i];
        let layer_base = |l: usize| 2 + 10 * l;

        let te = tape.embedding(p(0), &ids)?;
        let pe = tape.embedding(p(1), &pos)?;
        let mut x = tape.add(te, pe)?;
        let mut keys = Vec::with_capacity(n_layers);
        let mut mlp_out = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let b = layer_base(l);
            let a = tape.layer_norm(x, p(b), p(b + 1))?;
            let q = tape.matmul_nt(a, p(b + 2))?;
            let k = tape.matmul_nt(a, p(b + 3))?;
            let v = tape.matmul_nt(a, p(b + 4))?;
            let o = tape.causal_attention(q, k, v, self.config.n_heads, &segments)?;
            let o = tape.matmul_nt(o, p(b + 5))?;
            x = tape.add(x, o)?;

            let n2 = tape.layer_norm(x, p(b + 6), p(b + 7))?;
            let pre = tape.matmul_nt(n2, p(b + 8))?;
            let mut key = tape.gelu(pre);
            if opts.watch_keys {
                key = tape.watch(key);
            }
            let mut m = tape.matmul_nt(key, p(b + 9))?;
            if let Some(iv) = opts.intervention.filter(|iv| iv.layer == l) {
                m = tape.replace_row(m, iv.row, iv.value)?;
            }
            if opts.watch_mlp_out {
                m = tape.watch(m);
            }
            keys.push(key);
            mlp_out.push(m);
            x = tape.add(x, m)?;
        }
        let last_rows: Vec<usize> = segments.iter().map(|&(s, l)| s + l - 1).collect();
        let logits = Self::head_at(tape, x, &params, &last_rows)?;
        Ok(ForwardVars { logits, residual: x, keys, mlp_out, params, segments })
    }

    /// Logits at packed `rows` of the residual stream `x`.
    fn head_at(tape: &mut Tape<'_>, x: Var, params: &[Var], rows: &[usize]) -> Result<Var> {
        let tail = params.len() - 3;
        let xl = tape.select_rows(x, rows)?;
        let hf = tape.layer_norm(xl, params[tail], params[tail + 1])?;
        tape.matmul_nt(hf, params[tail + 2])
    }

    /// Logits at arbitrary packed positions of a recorded pass.
    pub fn logits_at(&self, tape: &mut Tape<'_>, fv: &ForwardVars, rows: &[usize]) -> Result<Var> {
        Self::head_at(tape, fv.residual, &fv.params, rows)
    }

    /// Next-token logits after `ids`, optionally with the full activation record.
    pub fn forward(&self, ids: &[u32], capture: bool) -> Result<(Vec<f64>, Option<ActivationTape>)> {
        let mut tape = Tape::new();
        let fv = self.record(&mut tape, &[ids], &ForwardOptions::default())?;
        let logits = tape.value(fv.logits).data().to_vec();
        let acts = capture.then(|| ActivationTape {
            keys: fv.keys.iter().map(|&k| tape.value(k).clone()).collect(),
            mlp_out: fv.mlp_out.iter().map(|&m| tape.value(m).clone()).collect(),
            logits: logits.clone(),
        });
        Ok((logits, acts))
    }

    /// Last-position logits for many prompts in one packed pass.
    pub fn forward_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let fv = self.record(&mut tape, seqs, &ForwardOptions::default())?;
        let lt = tape.value(fv.logits);
        Ok((0..lt.rows()).map(|r| lt.row(r).to_vec()).collect())
    }

    /// P(True), P(False) and the remaining mass, from one forward pass.
    pub fn truth_probs(&self, ids: &[u32], answers: AnswerIds) -> Result<TruthProbs> {
        let (logits, _) = self.forward(ids, false)?;
        Ok(TruthProbs::from_logits(&logits, answers))
    }

    /// Short hex digest of config and weights; keys on-disk caches.
    pub fn fingerprint(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        let c = &self.config;
        for v in [c.n_layers, c.d_model, c.n_heads, c.d_hidden, c.vocab_size, c.max_seq_len] {
            h.update(&(v as u64).to_le_bytes());
        }
        let mut h2 = crc32fast::Hasher::new_with_initial(0x9e37_79b9);
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(&v.to_le_bytes());
                h2.update(&v.to_bits().rotate_left(17).to_le_bytes());
            }
        }
        format!("{:08x}{:08x}", h.finalize(), h2.finalize())
    }
}

/// Mean next-token cross-entropy of a batch as a function of every model
/// parameter, for finite-difference checking.
pub struct BatchLoss<'m> {
    pub model: &'m TransformerModel,
    pub seqs: Vec<Vec<u32>>,
    pub targets: Vec<usize>,
}

impl BatchLoss<'_> {
    fn with_params(&self, params: &[Tensor]) -> Result<TransformerModel> {
        let mut m = self.model.clone();
        let slots = m.params_mut();
        if slots.len() != params.len() {
            return Err(Error::Input(format!("expected {} parameters, got {}", slots.len(), params.len())));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Shape { op: "BatchLoss", lhs: slot.shape().to_vec(), rhs: p.shape().to_vec() });
            }
            *slot = p.clone();
        }
        Ok(m)
    }

    fn run(&self, params: &[Tensor], grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        let m = self.with_params(params)?;
        let mut tape = Tape::new();
        let seqs: Vec<&[u32]> = self.seqs.iter().map(Vec::as_slice).collect();
        let opts = ForwardOptions { param_grads: grads, ..Default::default() };
        let fv = m.record(&mut tape, &seqs, &opts)?;
        let loss = tape.cross_entropy(fv.logits, &self.targets)?;
        let value = tape.value(loss).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        Ok((value, fv.params.iter().map(|&v| g.wrt(v)).collect()))
    }

    /// Current parameters and their names, in gradient order.
    pub fn params(&self) -> (Vec<String>, Vec<Tensor>) {
        self.model.named_params().into_iter().map(|(n, t)| (n, t.clone())).unzip()
    }
}

impl Differentiable for BatchLoss<'_> {
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        Ok(self.run(params, false)?.0)
    }

    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(params, true)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransformerModel {
        let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_hidden: 32, vocab_size: 20, max_seq_len: 12 };
        TransformerModel::new(cfg, 7).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(50);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk(50);
        c.n_layers = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_normalizes_and_rejects_over_length() {
        let m = small();
        let (logits, acts) = m.forward(&[1, 2, 3], true).unwrap();
        let s: f64 = softmax(&logits).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let acts = acts.unwrap();
        assert_eq!(acts.len(), 3);
        assert_eq!(acts.keys.len(), 2);
        assert_eq!(acts.key(1, 2).len(), 32);
        assert_eq!(acts.mlp_output(0, 0).len(), 16);
        assert!(m.forward(&[1; 13], false).is_err());
        assert!(m.forward(&[], false).is_err());
    }

    #[test]
    fn causal_prefix_activations() {
        let m = small();
        let (_, a) = m.forward(&[3, 4, 5], true).unwrap();
        let (_, b) = m.forward(&[3, 4, 5, 9, 1], true).unwrap();
        let (a, b) = (a.unwrap(), b.unwrap());
        for l in 0..2 {
            for t in 0..3 {
                for (x, y) in a.key(l, t).iter().zip(b.key(l, t)) {
                    assert!((x - y).abs() <= 1e-12);
                }
                for (x, y) in a.mlp_output(l, t).iter().zip(b.mlp_output(l, t)) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_matches_single() {
        let m = small();
        let seqs: [&[u32]; 3] = [&[1, 2, 3], &[4], &[5, 6, 7, 8, 9]];
        let batch = m.forward_batch(&seqs).unwrap();
        for (s, row) in seqs.iter().zip(&batch) {
            let (single, _) = m.forward(s, false).unwrap();
            for (x, y) in single.iter().zip(row) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truth_probs_identity() {
        let m = small();
        let ans = AnswerIds { true_id: 1, false_id: 2 };
        let p = m.truth_probs(&[3, 4], ans).unwrap();
        assert!((p.p_true + p.p_false + p.p_other - 1.0).abs() < 1e-12);
    }

    #[test]
    fn params_order_matches() {
        let mut m = small();
        let names: Vec<Vec<usize>> = m.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let shapes: Vec<Vec<usize>> = m.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(names, shapes);
    }
}
