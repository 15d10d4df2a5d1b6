//! Teaches the toy transformer to answer `True`/`False` after the wrapped
//! prompt, using corpus phrasings only; benchmark phrasings are held out.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnswerIds, ForwardOptions, Tokenizer, TransformerModel, TruthProbs};
use crate::prompt::{wrap, PREFIX, SUFFIX};
use crate::tensor::Tape;
use crate::world::{DatasetManifest, FactWorld, Triple};

/// Prompts per packed forward pass during evaluation.
const EVAL_CHUNK: usize = 64;
/// Examples used to measure the initial and per-epoch loss.
const PROBE_EXAMPLES: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub answer: u32,
    pub truth: bool,
    /// `(position, next token)` pairs for the auxiliary next-token loss;
    /// the proposition tokens of true examples, empty otherwise.
    pub lm_targets: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Example>,
    /// Every fact under every benchmark phrasing, true and false.
    pub held_out: Vec<Example>,
}

impl Corpus {
    pub fn true_fraction(&self) -> f64 {
        self.train.iter().filter(|e| e.truth).count() as f64 / self.train.len() as f64
    }
}

/// Vocabulary covering the wrapper and everything `world` can phrase.
pub fn tokenizer_for(world: &FactWorld) -> Tokenizer {
    let mut texts = world.vocabulary_texts();
    texts.push(PREFIX.to_string());
    texts.push(SUFFIX.to_string());
    Tokenizer::from_texts(texts.iter().map(String::as_str))
}

fn example(tok: &Tokenizer, text: &str, truth: bool) -> Result<Example> {
    let w = wrap(tok, text, None)?;
    let lm_targets = if truth { (w.content.start - 1..w.content.end - 1).map(|p| (p, w.ids[p + 1])).collect() } else { Vec::new() };
    Ok(Example { ids: w.ids, answer: tok.answer_ids().for_truth(truth), truth, lm_targets })
}

fn distractor(world: &FactWorld, t: Triple, rng: &mut ChaCha8Rng) -> Triple {
    let n = world.relations[t.relation].objects.len();
    let o = (t.object + rng.gen_range(1..n)) % n;
    Triple { object: o, ..t }
}

/// One true and one false example per (fact, corpus template), and the same
/// for benchmark templates as the held-out set. False statements swap in a
/// same-relation distractor object.
pub fn build_corpus(world: &FactWorld, tok: &Tokenizer, seed: u64) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut held_out) = (Vec::new(), Vec::new());
    for t in world.triples() {
        let rel = &world.relations[t.relation];
        for tpl in &rel.corpus_templates {
            train.push(example(tok, &world.render(tpl, t), true)?);
            train.push(example(tok, &world.render(tpl, distractor(world, t, &mut rng)), false)?);
        }
        for tpl in rel.benchmark_templates() {
            held_out.push(example(tok, &world.render(tpl, t), true)?);
            held_out.push(example(tok, &world.render(tpl, distractor(world, t, &mut rng)), false)?);
        }
    }
    train.shuffle(&mut rng);
    Ok(Corpus { train, held_out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero over the run.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// First-moment decay; 0 gives a momentum-free adaptive step.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Weight of the next-token loss on true propositions; 0 trains the answer only.
    pub lm_weight: f64,
    /// Target mass moved from the correct answer to the opposite one.
    pub answer_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, lr: 1e-3, schedule: LrSchedule::Linear, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0, lm_weight: 1.0, answer_smoothing: 0.1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps <= 0.0
        {
            return Err(Error::Config("lr must be positive, beta1 and beta2 in [0, 1), eps positive".into()));
        }
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::Config("lm_weight must be non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.answer_smoothing) {
            return Err(Error::Config("answer_smoothing must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    /// Probe-set loss after each epoch.
    pub epoch_loss: Vec<f64>,
    pub curve: Vec<LossPoint>,
    pub held_out_accuracy: f64,
    pub train_accuracy: f64,
}

impl TrainReport {
    pub fn write_curve_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.curve {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean answer cross-entropy over `examples`.
pub fn mean_loss(model: &TransformerModel, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
        for (logits, e) in model.forward_batch(&seqs)?.iter().zip(chunk) {
            let p = crate::model::softmax(logits)[e.answer as usize];
            total -= p.max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(total / examples.len() as f64)
}

/// Fraction of examples whose correct answer token strictly beats the other one.
pub fn example_accuracy(model: &TransformerModel, answers: AnswerIds, examples: &[Example]) -> Result<f64> {
    let mut hits = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
        for (logits, e) in model.forward_batch(&seqs)?.iter().zip(chunk) {
            hits += TruthProbs::from_logits(logits, answers).is_correct(e.truth) as usize;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Per-parameter adaptive step with optional momentum, bias-corrected.
struct Optimizer {
    mom: Vec<Vec<f64>>,
    sq: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    fn update(&mut self, cfg: &TrainConfig, lr: f64, params: Vec<&mut crate::tensor::Tensor>, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (((p, g), sq), mom) in params.into_iter().zip(grads).zip(&mut self.sq).zip(&mut self.mom) {
            for (((w, &gi), s), m) in p.data_mut().iter_mut().zip(g).zip(sq.iter_mut()).zip(mom.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *s = cfg.beta2 * *s + (1.0 - cfg.beta2) * gi * gi;
                *w -= lr * (*m / c1) / ((*s / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Trains `model` in place on `corpus.train`; deterministic for a fixed config.
pub fn train(model: &mut TransformerModel, corpus: &Corpus, answers: AnswerIds, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let probe = &corpus.train[..corpus.train.len().min(PROBE_EXAMPLES)];
    let initial_loss = mean_loss(model, probe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zeros = || model.named_params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut opt = Optimizer { mom: zeros(), sq: zeros(), step: 0 };
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let steps_per_epoch = corpus.train.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let mut curve = Vec::new();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[u32]> = batch.iter().map(|&i| corpus.train[i].ids.as_slice()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| corpus.train[i].answer as usize).collect();
            let opposite: Vec<usize> = batch.iter().map(|&i| answers.for_truth(!corpus.train[i].truth) as usize).collect();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let fv = model.record(&mut tape, &seqs, &ForwardOptions { param_grads: true, ..Default::default() })?;
                let hard = tape.cross_entropy(fv.logits, &targets)?;
                let value = tape.value(hard).data()[0];
                let answer_loss = if cfg.answer_smoothing > 0.0 {
                    let other = tape.cross_entropy(fv.logits, &opposite)?;
                    let a = tape.scale(hard, 1.0 - cfg.answer_smoothing);
                    let b = tape.scale(other, cfg.answer_smoothing);
                    tape.add(a, b)?
                } else {
                    hard
                };
                let (mut rows, mut next) = (Vec::new(), Vec::new());
                for (&i, &(start, _)) in batch.iter().zip(&fv.segments) {
                    for &(p, t) in &corpus.train[i].lm_targets {
                        rows.push(start + p);
                        next.push(t as usize);
                    }
                }
                let loss = if cfg.lm_weight > 0.0 && !rows.is_empty() {
                    let lm_logits = model.logits_at(&mut tape, &fv, &rows)?;
                    let lm = tape.cross_entropy(lm_logits, &next)?;
                    let lm = tape.scale(lm, cfg.lm_weight);
                    tape.add(answer_loss, lm)?
                } else {
                    answer_loss
                };
                let mut g = tape.backward(loss)?;
                (value, fv.params.iter().map(|&p| g.take(p)).collect::<Vec<_>>())
            };
            let step = curve.len();
            if !loss.is_finite() || loss > initial_loss * 10.0 {
                return Err(Error::Diverged { step, loss, initial: initial_loss });
            }
            curve.push(LossPoint { epoch, step, loss });
            let lr = match cfg.schedule {
                LrSchedule::Constant => cfg.lr,
                LrSchedule::Linear => cfg.lr * (1.0 - step as f64 / total_steps),
            };
            opt.update(cfg, lr, model.params_mut(), &grads);
        }
        let l = mean_loss(model, probe)?;
        log::info!("epoch {epoch}: probe loss {l:.4}");
        epoch_loss.push(l);
    }
    let held_out_accuracy = example_accuracy(model, answers, &corpus.held_out)?;
    let train_accuracy = example_accuracy(model, answers, probe)?;
    log::info!("held-out accuracy {held_out_accuracy:.4}, train accuracy {train_accuracy:.4}");
    Ok(TrainReport { initial_loss, epoch_loss, curve, held_out_accuracy, train_accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub originals: f64,
    pub rephrases: f64,
    pub neighborhood: f64,
    pub joint: f64,
}

/// Classification accuracy over a manifest's originals, rephrases and
/// neighborhood statements, separately and pooled. Ties count as wrong.
pub fn classifier_accuracy(model: &TransformerModel, tok: &Tokenizer, manifest: &DatasetManifest) -> Result<AccuracyReport> {
    let answers = tok.answer_ids();
    let mut groups: [Vec<Example>; 3] = Default::default();
    for e in &manifest.entries {
        groups[0].push(example(tok, &e.statement, e.truth_value)?);
        for r in &e.rephrases {
            groups[1].push(example(tok, r, e.truth_value)?);
        }
        for n in &e.neighborhood {
            groups[2].push(example(tok, &n.statement, n.truth_value)?);
        }
    }
    let acc = |g: &[Example]| if g.is_empty() { Ok(0.0) } else { example_accuracy(model, answers, g) };
    let all: Vec<Example> = groups.concat();
    Ok(AccuracyReport {
        originals: acc(&groups[0])?,
        rephrases: acc(&groups[1])?,
        neighborhood: acc(&groups[2])?,
        joint: acc(&all)?,
    })
}

/// Writes a human-readable training summary line per epoch.
pub fn write_summary(report: &TrainReport, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "initial loss {:.4}", report.initial_loss)?;
    for (i, l) in report.epoch_loss.iter().enumerate() {
        writeln!(out, "epoch {i} loss {l:.4}")?;
    }
    writeln!(out, "held-out accuracy {:.4}", report.held_out_accuracy)
}
