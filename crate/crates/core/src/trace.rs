//! Gradient tracing: one backward pass of `1 − P(desired) + P(undesired)`,
//! per-(layer, token) gradient norms of the MLP output, and the edit-site
//! selection and bucket statistics built on them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, TransformerModel};
use crate::prompt::WrappedPrompt;
use crate::tensor::{Tape, Var};
use crate::world::Style;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPolicy {
    /// Content tokens except the final one.
    ExceptLast,
    AllContent,
    /// Explicit prompt positions; formatting positions are still dropped.
    Explicit(Vec<usize>),
}

/// Which per-position MLP activation the gradient norm is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// The vector the MLP adds to the residual stream.
    #[default]
    Output,
    /// The post-activation hidden vector (the edit key).
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GTConfig {
    pub token_policy: TokenPolicy,
    pub l_grad: Vec<usize>,
    pub l_ed: Vec<usize>,
    #[serde(default)]
    pub target: GradTarget,
}

impl GTConfig {
    pub fn for_style(style: Style) -> Self {
        match style {
            Style::CfFalse | Style::CfTrue => {
                Self { token_policy: TokenPolicy::ExceptLast, l_grad: vec![0], l_ed: vec![2], target: GradTarget::Output }
            }
            Style::Fact => {
                Self { token_policy: TokenPolicy::AllContent, l_grad: vec![0], l_ed: vec![3], target: GradTarget::Output }
            }
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.l_ed.len() != 1 {
            return Err(Error::Config(format!("l_ed must name exactly one layer, got {:?}", self.l_ed)));
        }
        if self.l_grad.is_empty() {
            return Err(Error::Config("l_grad is empty".into()));
        }
        if let Some(l) = self.l_grad.iter().chain(&self.l_ed).find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!("layer {l} out of range for a {n_layers}-layer model")));
        }
        Ok(())
    }

    pub fn edit_layer(&self) -> usize {
        self.l_ed[0]
    }
}

/// `1 − P(desired) + P(undesired)` recorded on `tape`; returns (loss, watched activations per layer).
pub fn build_loss<'a>(
    model: &'a TransformerModel,
    tape: &mut Tape<'a>,
    prompt: &WrappedPrompt,
    desired: u32,
    undesired: u32,
    target: GradTarget,
) -> Result<(Var, Vec<Var>)> {
    let v = model.config().vocab_size as u32;
    if desired == undesired || desired >= v || undesired >= v {
        return Err(Error::Input(format!("answer tokens must be two distinct single ids, got {desired} and {undesired}")));
    }
    let opts = ForwardOptions {
        watch_mlp_out: target == GradTarget::Output,
        watch_keys: target == GradTarget::Hidden,
        ..Default::default()
    };
    let fv = model.record(tape, &[&prompt.ids], &opts)?;
    let probs = tape.softmax(fv.logits);
    let pd = tape.element(probs, desired as usize)?;
    let pu = tape.element(probs, undesired as usize)?;
    let miss = tape.rsub_const(1.0, pd);
    let loss = tape.add(miss, pu)?;
    let watched = match target {
        GradTarget::Output => fv.mlp_out,
        GradTarget::Hidden => fv.keys,
    };
    Ok((loss, watched))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub loss: f64,
    /// `grad_norms[l][t]`, one row per layer, one column per prompt position.
    pub grad_norms: Vec<Vec<f64>>,
    pub backward_calls: usize,
}

/// Runs exactly one backward pass and returns the gradient-norm matrix.
pub fn trace(model: &TransformerModel, prompt: &WrappedPrompt, desired: u32, undesired: u32, target: GradTarget) -> Result<Trace> {
    trace_scaled(model, prompt, desired, undesired, target, 1.0)
}

pub(crate) fn trace_scaled(
    model: &TransformerModel,
    prompt: &WrappedPrompt,
    desired: u32,
    undesired: u32,
    target: GradTarget,
    scale: f64,
) -> Result<Trace> {
    let mut tape = Tape::new();
    let (loss, watched) = build_loss(model, &mut tape, prompt, desired, undesired, target)?;
    let loss = tape.scale(loss, scale);
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut grad_norms = Vec::with_capacity(watched.len());
    for (l, &w) in watched.iter().enumerate() {
        let g = grads.wrt(w);
        let width = g.len() / prompt.len();
        let row: Vec<f64> = g.chunks(width).map(crate::tensor::norm).collect();
        if let Some(t) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at layer {l}, token {t}")));
        }
        grad_norms.push(row);
    }
    Ok(Trace { loss: value, grad_norms, backward_calls: tape.backward_calls() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub token: usize,
    pub layer: usize,
    /// 𝕋 was empty under the policy and widened to all content tokens.
    pub widened: bool,
}

/// Candidate positions under `policy`, never including formatting tokens.
pub fn candidate_tokens(prompt: &WrappedPrompt, policy: &TokenPolicy) -> Vec<usize> {
    let content = prompt.content_positions();
    match policy {
        TokenPolicy::AllContent => content.collect(),
        TokenPolicy::ExceptLast => content.take(prompt.content.len() - 1).collect(),
        TokenPolicy::Explicit(ts) => {
            let mut v: Vec<usize> = ts.iter().copied().filter(|t| prompt.content.contains(t)).collect();
            v.sort_unstable();
            v.dedup();
            v
        }
    }
}

/// Argmax of `grad_norms` over 𝕋 × 𝕃_grad; ties go to the lowest layer, then the earliest token.
pub fn select_location(grad_norms: &[Vec<f64>], prompt: &WrappedPrompt, cfg: &GTConfig) -> Result<Location> {
    cfg.validate(grad_norms.len())?;
    let mut tokens = candidate_tokens(prompt, &cfg.token_policy);
    let widened = tokens.is_empty();
    if widened {
        log::warn!("no candidate tokens under {:?}; using all content tokens", cfg.token_policy);
        tokens = prompt.content_positions().collect();
    }
    let mut layers = cfg.l_grad.clone();
    layers.sort_unstable();
    let mut best: Option<(f64, usize)> = None;
    for &l in &layers {
        for &t in &tokens {
            let g = grad_norms[l][t];
            if best.map_or(true, |(b, _)| g > b) {
                best = Some((g, t));
            }
        }
    }
    let (_, token) = best.expect("tokens and layers are nonempty");
    Ok(Location { token, layer: cfg.edit_layer(), widened })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    PreSubject,
    SubjectIn,
    SubjectLast,
    PostSubject,
    LastToken,
    Unknown,
}

impl Bucket {
    pub const ALL: [Bucket; 6] =
        [Bucket::PreSubject, Bucket::SubjectIn, Bucket::SubjectLast, Bucket::PostSubject, Bucket::LastToken, Bucket::Unknown];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::PreSubject => "pre_subject",
            Bucket::SubjectIn => "subject_in",
            Bucket::SubjectLast => "subject_last",
            Bucket::PostSubject => "post_subject",
            Bucket::LastToken => "last_token",
            Bucket::Unknown => "unknown",
        }
    }

    pub fn is_subject(self) -> bool {
        matches!(self, Bucket::SubjectIn | Bucket::SubjectLast)
    }
}

impl std::str::FromStr for Bucket {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Bucket::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown bucket {s:?}")))
    }
}

/// Bucket of content position `t`; `None` for formatting positions.
pub fn bucket_of(prompt: &WrappedPrompt, t: usize) -> Option<Bucket> {
    if !prompt.content.contains(&t) {
        return None;
    }
    if t == prompt.last_content() {
        return Some(Bucket::LastToken);
    }
    Some(match &prompt.subject {
        None => Bucket::Unknown,
        Some(s) if t < s.start => Bucket::PreSubject,
        Some(s) if t + 1 == s.end => Bucket::SubjectLast,
        Some(s) if t < s.end => Bucket::SubjectIn,
        Some(_) => Bucket::PostSubject,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatRow {
    pub layer: usize,
    pub bucket: Bucket,
    pub mean_max_grad_norm: f64,
    pub n_prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub rows: Vec<HeatRow>,
    /// Percent of prompts whose argmax at the reference layer falls in each bucket, over all content tokens.
    pub argmax_with_last: BTreeMap<Bucket, f64>,
    /// Same, with the last content token excluded.
    pub argmax_without_last: BTreeMap<Bucket, f64>,
    /// Fraction of prompts whose first-layer max norm is at least the last layer's.
    pub monotone_fraction: f64,
}

fn argmax_bucket(row: &[f64], prompt: &WrappedPrompt, include_last: bool) -> Option<Bucket> {
    let end = if include_last { prompt.content.end } else { prompt.content.end - 1 };
    let mut best: Option<(f64, usize)> = None;
    for t in prompt.content.start..end {
        if best.map_or(true, |(b, _)| row[t] > b) {
            best = Some((row[t], t));
        }
    }
    best.and_then(|(_, t)| bucket_of(prompt, t))
}

/// Aggregates traces into the per-(layer, bucket) heatmap and argmax shares at `ref_layer`.
pub fn bucketize(traces: &[(&[Vec<f64>], &WrappedPrompt)], ref_layer: usize) -> BucketTable {
    let n_layers = traces.first().map_or(0, |(g, _)| g.len());
    let mut sums: BTreeMap<(usize, Bucket), (f64, usize)> = BTreeMap::new();
    let mut with_last: BTreeMap<Bucket, usize> = BTreeMap::new();
    let mut without_last: BTreeMap<Bucket, usize> = BTreeMap::new();
    let (mut monotone, mut n_without) = (0usize, 0usize);
    for (norms, prompt) in traces {
        for (l, row) in norms.iter().enumerate() {
            let mut best: BTreeMap<Bucket, f64> = BTreeMap::new();
            for t in prompt.content_positions() {
                let b = bucket_of(prompt, t).expect("content position");
                let e = best.entry(b).or_insert(f64::NEG_INFINITY);
                *e = e.max(row[t]);
            }
            for (b, m) in best {
                let s = sums.entry((l, b)).or_insert((0.0, 0));
                s.0 += m;
                s.1 += 1;
            }
        }
        if let Some(b) = argmax_bucket(&norms[ref_layer], prompt, true) {
            *with_last.entry(b).or_default() += 1;
        }
        if let Some(b) = argmax_bucket(&norms[ref_layer], prompt, false) {
            *without_last.entry(b).or_default() += 1;
            n_without += 1;
        }
        let layer_max = |l: usize| prompt.content_positions().map(|t| norms[l][t]).fold(f64::NEG_INFINITY, f64::max);
        if n_layers > 0 && layer_max(0) >= layer_max(n_layers - 1) {
            monotone += 1;
        }
    }
    let pct = |m: BTreeMap<Bucket, usize>, n: usize| -> BTreeMap<Bucket, f64> {
        m.into_iter().map(|(b, c)| (b, 100.0 * c as f64 / n.max(1) as f64)).collect()
    };
    BucketTable {
        rows: sums
            .into_iter()
            .map(|((layer, bucket), (s, n))| HeatRow { layer, bucket, mean_max_grad_norm: s / n as f64, n_prompts: n })
            .collect(),
        argmax_with_last: pct(with_last, traces.len()),
        argmax_without_last: pct(without_last, n_without),
        monotone_fraction: monotone as f64 / traces.len().max(1) as f64,
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    layer: usize,
    bucket: String,
    mean_max_grad_norm: f64,
    n_prompts: usize,
}

pub fn export_heatmap(rows: &[HeatRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(CsvRow {
            layer: r.layer,
            bucket: r.bucket.name().to_string(),
            mean_max_grad_norm: r.mean_max_grad_norm,
            n_prompts: r.n_prompts,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn import_heatmap(path: &Path) -> Result<Vec<HeatRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(HeatRow {
                layer: row.layer,
                bucket: row.bucket.parse()?,
                mean_max_grad_norm: row.mean_max_grad_norm,
                n_prompts: row.n_prompts,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub entry_id: String,
    pub grad_norms: Vec<Vec<f64>>,
    pub selected_token: usize,
    pub selected_edit_layer: usize,
    pub bucket: Bucket,
}
