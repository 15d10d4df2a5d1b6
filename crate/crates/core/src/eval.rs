//! The editing benchmark: per-entry locate → edit → score → revert, and the
//! dataset-level scores, intervals and breakdowns built from it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnswerIds, Tokenizer, TransformerModel, TruthProbs};
use crate::prompt::{wrap, WrappedPrompt};
use crate::rome::{
    compute_key_averaged, key_stats_cached, optimize_value, sample_prefixes, KeyStats, RankOneEdit, ValueConfig,
};
use crate::trace::{bucket_of, select_location, trace, Bucket, GTConfig};
use crate::train::{classifier_accuracy, AccuracyReport};
use crate::world::{DatasetManifest, PropositionEntry, Style};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;
/// Prompts per packed forward pass when scoring.
const SCORE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locator {
    GradientTrace,
    SubjectLast,
}

impl Locator {
    pub fn name(self) -> &'static str {
        match self {
            Locator::GradientTrace => "gradient_trace",
            Locator::SubjectLast => "subject_last",
        }
    }
}

impl std::str::FromStr for Locator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" | "gradient_trace" | "gradient-trace" => Ok(Locator::GradientTrace),
            "subject-last" | "subject_last" => Ok(Locator::SubjectLast),
            other => Err(Error::Config(format!("unknown locator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    True,
    False,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub verdict: Verdict,
    pub p_true: f64,
    pub p_false: f64,
}

impl From<TruthProbs> for Classification {
    fn from(p: TruthProbs) -> Self {
        let verdict = if p.p_true > p.p_false {
            Verdict::True
        } else if p.p_false > p.p_true {
            Verdict::False
        } else {
            Verdict::Tie
        };
        Self { verdict, p_true: p.p_true, p_false: p.p_false }
    }
}

pub fn classify(model: &TransformerModel, answers: AnswerIds, prompt: &WrappedPrompt) -> Result<Classification> {
    Ok(model.truth_probs(&prompt.ids, answers)?.into())
}

fn probs_batch(model: &TransformerModel, answers: AnswerIds, prompts: &[WrappedPrompt]) -> Result<Vec<TruthProbs>> {
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(SCORE_CHUNK) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|p| p.ids.as_slice()).collect();
        out.extend(model.forward_batch(&seqs)?.iter().map(|l| TruthProbs::from_logits(l, answers)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub locator: Locator,
    pub gt: GTConfig,
    pub value: ValueConfig,
    /// Ridge for the key covariance; `None` scales with the key moments.
    pub lambda: Option<f64>,
    /// Prefixes averaged into each key; 0 uses the bare prompt.
    pub key_prefixes: usize,
    /// Score only entries the model classifies correctly before editing.
    pub only_pre_correct: bool,
    pub seed: u64,
    pub workers: usize,
}

impl BenchConfig {
    pub fn for_style(style: Style, locator: Locator) -> Self {
        Self {
            locator,
            gt: GTConfig::for_style(style),
            value: ValueConfig::default(),
            lambda: None,
            key_prefixes: 0,
            only_pre_correct: false,
            seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        self.gt.validate(n_layers)?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(self.value.lr > 0.0 && self.value.clamp > 0.0) {
            return Err(Error::Config("value step size and clamp must be positive".into()));
        }
        if self.lambda.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryScore {
    pub id: String,
    pub pre_verdict: Verdict,
    pub pre_efficacy: f64,
    pub pre_generalization: f64,
    pub pre_specificity: f64,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub rephrase_hits: usize,
    pub rephrase_count: usize,
    pub neighbor_hits: usize,
    pub neighbor_count: usize,
    pub pre_rephrase_hits: usize,
    pub pre_neighbor_hits: usize,
    pub locator: Locator,
    pub token: usize,
    /// Offset of the edited token within the proposition.
    pub content_offset: usize,
    pub layer: usize,
    pub bucket: Bucket,
    pub delta_frobenius: f64,
    pub objective_trace: Vec<f64>,
    pub anomalies: Vec<String>,
    /// Largest |logit| change on the revert probe after reverting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revert_drift: Option<f64>,
}

/// Why an entry produced no score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

/// Read-only inputs shared by every entry of a run.
pub struct EditContext<'a> {
    pub tokenizer: &'a Tokenizer,
    pub stats: &'a KeyStats,
    pub prefixes: &'a [Vec<u32>],
    pub config: &'a BenchConfig,
    pub probe: Option<&'a RevertProbe>,
}

/// Fixed prompts and their unedited logits, re-checked after every revert.
#[derive(Debug, Clone)]
pub struct RevertProbe {
    pub prompts: Vec<Vec<u32>>,
    pub baseline: Vec<Vec<f64>>,
}

impl RevertProbe {
    pub fn new(model: &TransformerModel, prompts: Vec<Vec<u32>>) -> Result<Self> {
        let baseline = Self::logits(model, &prompts)?;
        Ok(Self { prompts, baseline })
    }

    fn logits(model: &TransformerModel, prompts: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let seqs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        model.forward_batch(&seqs)
    }

    /// Max absolute logit difference between `model` and the baseline.
    pub fn drift(&self, model: &TransformerModel) -> Result<f64> {
        let now = Self::logits(model, &self.prompts)?;
        Ok(now
            .iter()
            .zip(&self.baseline)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }
}

struct Prompts {
    original: WrappedPrompt,
    rephrases: Vec<WrappedPrompt>,
    neighbors: Vec<WrappedPrompt>,
}

impl Prompts {
    fn new(tok: &Tokenizer, e: &PropositionEntry) -> Result<Self> {
        Ok(Self {
            original: wrap(tok, &e.statement, e.subject.as_deref())?,
            rephrases: e.rephrases.iter().map(|r| wrap(tok, r, None)).collect::<Result<_>>()?,
            neighbors: e.neighborhood.iter().map(|n| wrap(tok, &n.statement, None)).collect::<Result<_>>()?,
        })
    }

    fn all(&self) -> Vec<WrappedPrompt> {
        std::iter::once(&self.original).chain(&self.rephrases).chain(&self.neighbors).cloned().collect()
    }
}

/// (efficacy, rephrase hits, neighbor hits) for the edit toward `target`.
fn tally(probs: &[TruthProbs], n_reph: usize, target: bool) -> (bool, usize, usize) {
    let hit = |p: &TruthProbs| {
        let (t, o) = p.target_other(target);
        t > o
    };
    let stays = |p: &TruthProbs| {
        let (t, o) = p.target_other(target);
        t < o
    };
    let eff = hit(&probs[0]);
    let reph = probs[1..1 + n_reph].iter().filter(|p| hit(p)).count();
    let nb = probs[1 + n_reph..].iter().filter(|p| stays(p)).count();
    (eff, reph, nb)
}

fn ratio(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Locates, edits, scores and reverts one entry. The model is restored to
/// its incoming weights before returning, including on error.
pub fn score_entry(model: &mut TransformerModel, entry: &PropositionEntry, ctx: &EditContext) -> Result<std::result::Result<EntryScore, Skipped>> {
    let cfg = ctx.config;
    let answers = ctx.tokenizer.answer_ids();
    let prompts = Prompts::new(ctx.tokenizer, entry)?;
    let all = prompts.all();
    let n_reph = prompts.rephrases.len();
    let pre = probs_batch(model, answers, &all)?;
    let pre_verdict = Classification::from(pre[0]).verdict;
    if cfg.only_pre_correct && !pre[0].is_correct(entry.truth_value) {
        return Ok(Err(Skipped { id: entry.id.clone(), reason: "misclassified before editing".into() }));
    }

    let target = !entry.truth_value;
    let (target_id, other_id) = (answers.for_truth(target), answers.for_truth(!target));
    let original = &prompts.original;
    let mut anomalies = Vec::new();
    let (token, layer) = match cfg.locator {
        Locator::GradientTrace => {
            let tr = trace(model, original, target_id, other_id, cfg.gt.target)?;
            debug_assert_eq!(tr.backward_calls, 1);
            let loc = select_location(&tr.grad_norms, original, &cfg.gt)?;
            if loc.widened {
                anomalies.push("token set widened to all content tokens".to_string());
            }
            (loc.token, loc.layer)
        }
        Locator::SubjectLast => match &original.subject {
            Some(s) => (s.end - 1, cfg.gt.edit_layer()),
            None => {
                log::warn!("entry {}: subject_last locator needs a subject label; skipped", entry.id);
                return Ok(Err(Skipped { id: entry.id.clone(), reason: "no subject label".into() }));
            }
        },
    };
    if layer != ctx.stats.layer {
        return Err(Error::Config(format!("key statistics are for layer {}, edit layer is {layer}", ctx.stats.layer)));
    }

    let key = compute_key_averaged(model, &original.ids, layer, token, ctx.prefixes)?;
    let value = optimize_value(model, &original.ids, layer, token, target_id, &cfg.value)?;
    if !value.improved {
        anomalies.push("value optimization did not raise P(target)".to_string());
    }
    let mut edit = RankOneEdit::compute(model, layer, token, key, value.v.clone(), ctx.stats)?;
    edit.apply(model)?;
    let post = probs_batch(model, answers, &all);
    edit.revert(model)?;
    let post = post?;
    let revert_drift = ctx.probe.map(|p| p.drift(model)).transpose()?;

    let (pre_eff, pre_reph, pre_nb) = tally(&pre, n_reph, target);
    let (eff, reph, nb) = tally(&post, n_reph, target);
    let n_nb = prompts.neighbors.len();
    Ok(Ok(EntryScore {
        id: entry.id.clone(),
        pre_verdict,
        pre_efficacy: pre_eff as u8 as f64,
        pre_generalization: ratio(pre_reph, n_reph),
        pre_specificity: ratio(pre_nb, n_nb),
        efficacy: eff as u8 as f64,
        generalization: ratio(reph, n_reph),
        specificity: ratio(nb, n_nb),
        rephrase_hits: reph,
        rephrase_count: n_reph,
        neighbor_hits: nb,
        neighbor_count: n_nb,
        pre_rephrase_hits: pre_reph,
        pre_neighbor_hits: pre_nb,
        locator: cfg.locator,
        token,
        content_offset: token - original.content.start,
        layer,
        bucket: bucket_of(original, token).unwrap_or(Bucket::Unknown),
        delta_frobenius: edit.delta_frobenius(),
        objective_trace: value.trace,
        anomalies,
        revert_drift,
    }))
}

/// `3 / (1/e + 1/g + 1/s)`, zero when any component is zero.
pub fn harmonic_total(e: f64, g: f64, s: f64) -> f64 {
    if e <= 0.0 || g <= 0.0 || s <= 0.0 {
        0.0
    } else if e == g && g == s {
        e
    } else {
        3.0 / (1.0 / e + 1.0 / g + 1.0 / s)
    }
}

/// Wilson score interval in percent.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Input("wilson interval of an empty sample".into()));
    }
    if successes > n {
        return Err(Error::Input(format!("{successes} successes out of {n}")));
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Ok((100.0 * (center - half).max(0.0), 100.0 * (center + half).min(1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub total: f64,
}

impl Scores {
    pub fn from_means(efficacy: f64, generalization: f64, specificity: f64) -> Self {
        Self { efficacy, generalization, specificity, total: harmonic_total(efficacy, generalization, specificity) }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn post_scores<'a>(rows: impl Iterator<Item = &'a EntryScore> + Clone) -> Scores {
    Scores::from_means(
        mean(rows.clone().map(|r| r.efficacy)),
        mean(rows.clone().map(|r| r.generalization)),
        mean(rows.map(|r| r.specificity)),
    )
}

fn pre_scores<'a>(rows: impl Iterator<Item = &'a EntryScore> + Clone) -> Scores {
    Scores::from_means(
        mean(rows.clone().map(|r| r.pre_efficacy)),
        mean(rows.clone().map(|r| r.pre_generalization)),
        mean(rows.map(|r| r.pre_specificity)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketGroup {
    SubjectIn,
    SubjectLast,
    NonSubject,
}

impl BucketGroup {
    pub fn of(b: Bucket) -> Option<Self> {
        match b {
            Bucket::SubjectIn => Some(Self::SubjectIn),
            Bucket::SubjectLast => Some(Self::SubjectLast),
            Bucket::PreSubject | Bucket::PostSubject | Bucket::LastToken => Some(Self::NonSubject),
            Bucket::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: BucketGroup,
    pub percent_cases: f64,
    pub n: usize,
    pub scores: Scores,
}

/// Scores grouped by where the edited token sits relative to the subject;
/// entries without a subject and empty groups are left out.
pub fn bucket_breakdown(rows: &[EntryScore]) -> Vec<GroupRow> {
    let mut groups: BTreeMap<BucketGroup, Vec<&EntryScore>> = BTreeMap::new();
    for r in rows {
        if let Some(g) = BucketGroup::of(r.bucket) {
            groups.entry(g).or_default().push(r);
        }
    }
    let total: usize = groups.values().map(Vec::len).sum();
    groups
        .into_iter()
        .map(|(group, rs)| GroupRow {
            group,
            percent_cases: 100.0 * rs.len() as f64 / total as f64,
            n: rs.len(),
            scores: post_scores(rs.iter().copied()),
        })
        .collect()
}

/// Selected-token offsets within the proposition, counted.
pub fn position_histogram(rows: &[EntryScore]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for r in rows {
        *h.entry(r.content_offset).or_default() += 1;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: BenchConfig,
    pub style: Style,
    pub model_fingerprint: String,
    pub n_entries: usize,
    pub n_scored: usize,
    pub pre: Scores,
    pub post: Scores,
    pub wilson: BTreeMap<String, Interval>,
    pub buckets: Vec<GroupRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_histogram: Option<BTreeMap<usize, usize>>,
    pub accuracy: AccuracyReport,
    pub skipped: Vec<Skipped>,
    pub entries: Vec<EntryScore>,
    /// Seconds since the Unix epoch; the only run-dependent field.
    pub timestamp: u64,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn save_entries_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            id: &'a str,
            locator: &'a str,
            layer: usize,
            token: usize,
            bucket: &'a str,
            pre_efficacy: f64,
            pre_generalization: f64,
            pre_specificity: f64,
            efficacy: f64,
            generalization: f64,
            specificity: f64,
            delta_frobenius: f64,
            anomalies: String,
        }
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(Row {
                id: &e.id,
                locator: e.locator.name(),
                layer: e.layer,
                token: e.token,
                bucket: e.bucket.name(),
                pre_efficacy: e.pre_efficacy,
                pre_generalization: e.pre_generalization,
                pre_specificity: e.pre_specificity,
                efficacy: e.efficacy,
                generalization: e.generalization,
                specificity: e.specificity,
                delta_frobenius: e.delta_frobenius,
                anomalies: e.anomalies.join("; "),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn intervals(rows: &[&EntryScore]) -> Result<BTreeMap<String, Interval>> {
    let mut out = BTreeMap::new();
    let n = rows.len();
    let reph: usize = rows.iter().map(|r| r.rephrase_count).sum();
    let nb: usize = rows.iter().map(|r| r.neighbor_count).sum();
    let counts = [
        ("pre_efficacy", rows.iter().filter(|r| r.pre_efficacy > 0.0).count(), n),
        ("efficacy", rows.iter().filter(|r| r.efficacy > 0.0).count(), n),
        ("pre_generalization", rows.iter().map(|r| r.pre_rephrase_hits).sum(), reph),
        ("generalization", rows.iter().map(|r| r.rephrase_hits).sum(), reph),
        ("pre_specificity", rows.iter().map(|r| r.pre_neighbor_hits).sum(), nb),
        ("specificity", rows.iter().map(|r| r.neighbor_hits).sum(), nb),
    ];
    for (name, k, n) in counts {
        if n > 0 {
            let (lower, upper) = wilson_interval(k, n, Z_95)?;
            out.insert(name.to_string(), Interval { lower, upper });
        }
    }
    Ok(out)
}

/// Everything a benchmark run needs besides the model and manifest.
pub struct BenchInputs<'a> {
    pub tokenizer: &'a Tokenizer,
    /// Prompts whose keys estimate the covariance.
    pub calibration: &'a [Vec<u32>],
    pub cache_dir: Option<PathBuf>,
    /// Prompts whose logits are compared before editing and after each revert.
    pub revert_probe: &'a [Vec<u32>],
}

/// Runs the benchmark. Every entry is edited from the incoming weights, so
/// results do not depend on entry order; with `workers > 1` entries are
/// spread over independent model clones.
pub fn run_benchmark(model: &TransformerModel, manifest: &DatasetManifest, cfg: &BenchConfig, inputs: &BenchInputs) -> Result<EvalReport> {
    cfg.validate(model.config().n_layers)?;
    if manifest.entries.is_empty() {
        return Err(Error::Input("empty manifest".into()));
    }
    let layer = cfg.gt.edit_layer();
    let stats = key_stats_cached(model, inputs.calibration, layer, cfg.lambda, inputs.cache_dir.as_deref())?;
    let max_prefix = 6;
    let prefixes = sample_prefixes(inputs.calibration, cfg.key_prefixes, max_prefix, cfg.seed);
    let probe = if inputs.revert_probe.is_empty() { None } else { Some(RevertProbe::new(model, inputs.revert_probe.to_vec())?) };
    let ctx = EditContext { tokenizer: inputs.tokenizer, stats: &stats, prefixes: &prefixes, config: cfg, probe: probe.as_ref() };

    let n = manifest.entries.len();
    let workers = cfg.workers.min(n);
    let mut results: Vec<Option<Result<std::result::Result<EntryScore, Skipped>>>> = (0..n).map(|_| None).collect();
    if workers <= 1 {
        let mut m = model.clone();
        for (slot, e) in results.iter_mut().zip(&manifest.entries) {
            *slot = Some(score_entry(&mut m, e, &ctx));
        }
    } else {
        let ctx = &ctx;
        let parts: Vec<Vec<(usize, Result<std::result::Result<EntryScore, Skipped>>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let mut m = model.clone();
                    s.spawn(move || {
                        (w..n)
                            .step_by(workers)
                            .map(|i| (i, score_entry(&mut m, &manifest.entries[i], ctx)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("benchmark worker panicked")).collect()
        });
        for (i, r) in parts.into_iter().flatten() {
            results[i] = Some(r);
        }
    }

    let mut entries = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    for r in results {
        match r.expect("every entry scored")? {
            Ok(s) => entries.push(s),
            Err(sk) => skipped.push(sk),
        }
    }
    if entries.is_empty() {
        return Err(Error::Input("no entry could be scored".into()));
    }
    // aggregate in id order so sums do not depend on manifest order
    let mut by_id: Vec<EntryScore> = entries.clone();
    by_id.sort_by(|a, b| a.id.cmp(&b.id));
    let refs: Vec<&EntryScore> = by_id.iter().collect();
    Ok(EvalReport {
        config: cfg.clone(),
        style: manifest.style,
        model_fingerprint: model.fingerprint(),
        n_entries: n,
        n_scored: entries.len(),
        pre: pre_scores(by_id.iter()),
        post: post_scores(by_id.iter()),
        wilson: intervals(&refs)?,
        buckets: bucket_breakdown(&by_id),
        position_histogram: (manifest.style == Style::Fact).then(|| position_histogram(&by_id)),
        accuracy: classifier_accuracy(model, inputs.tokenizer, manifest)?,
        skipped,
        entries,
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}
