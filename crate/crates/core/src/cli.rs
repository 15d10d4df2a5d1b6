//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{classify, run_benchmark, BenchConfig, BenchInputs, EvalReport, Locator};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{ModelConfig, Tokenizer, TransformerModel};
use crate::prompt::wrap;
use crate::rome::{compute_key_averaged, key_stats_cached, optimize_value, sample_prefixes, RankOneEdit, ValueConfig};
use crate::trace::{bucket_of, select_location, trace, Bucket, GTConfig, GradTarget, TokenPolicy, TraceReport};
use crate::train::{build_corpus, tokenizer_for, train, TrainConfig};
use crate::world::{emit_dataset, generate_world, load_dataset, save_dataset, EmitOptions, FactWorld, Style};

#[derive(Debug, Parser)]
#[command(name = "propedit", version, about = "Locate and edit propositions in a toy transformer classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a fact world and benchmark datasets.
    Genworld(GenworldArgs),
    /// Train a classifier on a world's corpus.
    Train(TrainArgs),
    /// Classify one proposition.
    Classify(ClassifyArgs),
    /// Gradient-trace one proposition.
    Trace(TraceArgs),
    /// Edit one proposition and report before/after probabilities.
    Edit(EditArgs),
    /// Run the editing benchmark over a dataset.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenworldArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub entities: usize,
    #[arg(long, default_value_t = 5)]
    pub relations: usize,
    /// Entries per emitted dataset.
    #[arg(long, default_value_t = 200)]
    pub entries: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Output checkpoint; the vocabulary is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lm_weight: Option<f64>,
    /// Answer-label smoothing toward the opposite answer.
    #[arg(long)]
    pub answer_smoothing: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_hidden: Option<usize>,
    /// Loss curve CSV (epoch, step, loss).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prop: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    ExceptLast,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LocatorArg {
    Gt,
    SubjectLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    CfFalse,
    CfTrue,
    Fact,
}

impl From<StyleArg> for Style {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::CfFalse => Style::CfFalse,
            StyleArg::CfTrue => Style::CfTrue,
            StyleArg::Fact => Style::Fact,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct LocateArgs {
    #[arg(long, value_enum)]
    pub token_policy: Option<PolicyArg>,
    /// Comma-separated layers searched for the maximal gradient norm.
    #[arg(long, value_delimiter = ',')]
    pub l_grad: Option<Vec<usize>>,
    /// The edit layer.
    #[arg(long)]
    pub l_ed: Option<usize>,
    /// Take norms of the MLP hidden activation instead of its output.
    #[arg(long)]
    pub hidden_grad: bool,
}

impl LocateArgs {
    fn resolve(&self, style: Style) -> GTConfig {
        let mut gt = GTConfig::for_style(style);
        if let Some(p) = self.token_policy {
            gt.token_policy = match p {
                PolicyArg::ExceptLast => TokenPolicy::ExceptLast,
                PolicyArg::All => TokenPolicy::AllContent,
            };
        }
        if let Some(l) = &self.l_grad {
            gt.l_grad = l.clone();
        }
        if let Some(l) = self.l_ed {
            gt.l_ed = vec![l];
        }
        if self.hidden_grad {
            gt.target = GradTarget::Hidden;
        }
        gt
    }
}

#[derive(Debug, Clone, Args)]
pub struct EditorArgs {
    /// Covariance ridge; defaults to a multiple of the mean key energy.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub v_steps: Option<usize>,
    #[arg(long)]
    pub v_lr: Option<f64>,
    #[arg(long)]
    pub v_clamp: Option<f64>,
    /// Number of corpus prefixes averaged into each key.
    #[arg(long, default_value_t = 0)]
    pub key_prefixes: usize,
    /// Directory for cached key statistics.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

impl EditorArgs {
    fn value(&self) -> ValueConfig {
        let d = ValueConfig::default();
        ValueConfig {
            steps: self.v_steps.unwrap_or(d.steps),
            lr: self.v_lr.unwrap_or(d.lr),
            clamp: self.v_clamp.unwrap_or(d.clamp),
            ..d
        }
    }
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prop: String,
    #[arg(long)]
    pub subject: Option<String>,
    /// Answer to push toward; defaults to the opposite of the current verdict.
    #[arg(long)]
    pub target: Option<bool>,
    #[arg(long, value_enum, default_value = "cf-true")]
    pub style: StyleArg,
    #[command(flatten)]
    pub locate: LocateArgs,
    /// Write the trace as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// World whose corpus calibrates the key statistics.
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub prop: String,
    #[arg(long)]
    pub subject: Option<String>,
    #[arg(long)]
    pub target: Option<bool>,
    #[arg(long, value_enum, default_value = "gt")]
    pub locator: LocatorArg,
    #[arg(long, value_enum, default_value = "cf-true")]
    pub style: StyleArg,
    #[command(flatten)]
    pub locate: LocateArgs,
    #[command(flatten)]
    pub editor: EditorArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the edit: write the edited checkpoint (to --out, or over --model).
    #[arg(long)]
    pub keep: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// World whose corpus calibrates the key statistics.
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, value_enum, default_value = "gt")]
    pub locator: LocatorArg,
    #[command(flatten)]
    pub locate: LocateArgs,
    #[command(flatten)]
    pub editor: EditorArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Score only entries classified correctly before editing.
    #[arg(long)]
    pub only_pre_correct: bool,
    /// Report JSON output.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-entry CSV output.
    #[arg(long)]
    pub entries_csv: Option<PathBuf>,
}

/// Path of the vocabulary written next to a checkpoint.
pub fn vocab_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

pub fn save_model(model: &TransformerModel, tok: &Tokenizer, path: &Path) -> Result<()> {
    save_checkpoint(model, path)?;
    tok.save(&vocab_path(path))
}

pub fn load_model(path: &Path) -> Result<(TransformerModel, Tokenizer)> {
    let model = load_checkpoint(path)?;
    let tok = Tokenizer::load(&vocab_path(path))?;
    if tok.vocab_size() != model.config().vocab_size {
        return Err(Error::Input(format!(
            "vocabulary has {} tokens but the model expects {}",
            tok.vocab_size(),
            model.config().vocab_size
        )));
    }
    Ok((model, tok))
}

fn calibration(world: &FactWorld, tok: &Tokenizer, seed: u64) -> Result<Vec<Vec<u32>>> {
    Ok(build_corpus(world, tok, seed)?.train.into_iter().map(|e| e.ids).collect())
}

fn resolve_locator(l: LocatorArg) -> Locator {
    match l {
        LocatorArg::Gt => Locator::GradientTrace,
        LocatorArg::SubjectLast => Locator::SubjectLast,
    }
}

fn cmd_genworld(a: &GenworldArgs) -> Result<()> {
    let world = generate_world(a.seed, a.entities, a.relations)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let wp = a.out_dir.join("world.json");
    world.save(&wp)?;
    println!("wrote {}", wp.display());
    for style in [Style::CfTrue, Style::CfFalse, Style::Fact] {
        let m = emit_dataset(&world, style, a.entries, a.seed, EmitOptions::default())?;
        let p = a.out_dir.join(format!("{}.json", style.tag()));
        save_dataset(&m, &p)?;
        println!("wrote {} ({} entries)", p.display(), m.entries.len());
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let world = FactWorld::load(&a.world)?;
    let tok = tokenizer_for(&world);
    let corpus = build_corpus(&world, &tok, a.seed)?;
    let mut mc = ModelConfig::desk(tok.vocab_size());
    mc.n_layers = a.layers.unwrap_or(mc.n_layers);
    mc.d_model = a.d_model.unwrap_or(mc.d_model);
    mc.n_heads = a.heads.unwrap_or(mc.n_heads);
    mc.d_hidden = a.d_hidden.unwrap_or(mc.d_hidden);
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lm_weight: a.lm_weight.unwrap_or(d.lm_weight),
        answer_smoothing: a.answer_smoothing.unwrap_or(d.answer_smoothing),
        seed: a.seed,
        ..d
    };
    let mut model = TransformerModel::new(mc, a.seed)?;
    let report = train(&mut model, &corpus, tok.answer_ids(), &cfg)?;
    save_model(&model, &tok, &a.out)?;
    if let Some(p) = &a.curve {
        report.write_curve_csv(p)?;
    }
    println!("initial loss {:.4}", report.initial_loss);
    println!("final loss {:.4}", report.epoch_loss.last().copied().unwrap_or(f64::NAN));
    println!("held-out accuracy {:.4}", report.held_out_accuracy);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_classify(a: &ClassifyArgs) -> Result<()> {
    let (model, tok) = load_model(&a.model)?;
    let w = wrap(&tok, &a.prop, None)?;
    let c = classify(&model, tok.answer_ids(), &w)?;
    println!("verdict: {:?}", c.verdict);
    println!("p_true: {:.6}", c.p_true);
    println!("p_false: {:.6}", c.p_false);
    Ok(())
}

/// Target answer: explicit, or the opposite of the model's current verdict.
fn edit_target(model: &TransformerModel, tok: &Tokenizer, ids: &[u32], explicit: Option<bool>) -> Result<bool> {
    Ok(match explicit {
        Some(t) => t,
        None => !model.truth_probs(ids, tok.answer_ids())?.is_correct(true),
    })
}

fn cmd_trace(a: &TraceArgs) -> Result<()> {
    let (model, tok) = load_model(&a.model)?;
    let gt = a.locate.resolve(a.style.into());
    gt.validate(model.config().n_layers)?;
    let w = wrap(&tok, &a.prop, a.subject.as_deref())?;
    let target = edit_target(&model, &tok, &w.ids, a.target)?;
    let ans = tok.answer_ids();
    let tr = trace(&model, &w, ans.for_truth(target), ans.for_truth(!target), gt.target)?;
    let loc = select_location(&tr.grad_norms, &w, &gt)?;
    let report = TraceReport {
        entry_id: "cli".into(),
        grad_norms: tr.grad_norms,
        selected_token: loc.token,
        selected_edit_layer: loc.layer,
        bucket: bucket_of(&w, loc.token).unwrap_or(Bucket::Unknown),
    };
    println!("target: {}", if target { "True" } else { "False" });
    println!("loss: {:.6}", tr.loss);
    println!("selected token: {} ({:?})", loc.token, tok.word(w.ids[loc.token]));
    println!("edit layer: {}", loc.layer);
    println!("bucket: {}", report.bucket.name());
    match &a.report {
        Some(p) => std::fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(p, e))?,
        None => {
            println!("tokens: {}", w.ids.iter().map(|&i| format!("{:?}", tok.word(i))).collect::<Vec<_>>().join(" "));
            for (l, row) in report.grad_norms.iter().enumerate() {
                println!("L{l}: {}", row.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" "));
            }
        }
    }
    Ok(())
}

fn cmd_edit(a: &EditArgs) -> Result<()> {
    let (mut model, tok) = load_model(&a.model)?;
    let world = FactWorld::load(&a.world)?;
    let gt = a.locate.resolve(a.style.into());
    gt.validate(model.config().n_layers)?;
    let w = wrap(&tok, &a.prop, a.subject.as_deref())?;
    let target = edit_target(&model, &tok, &w.ids, a.target)?;
    let ans = tok.answer_ids();
    let (t_id, o_id) = (ans.for_truth(target), ans.for_truth(!target));
    let (token, layer) = match resolve_locator(a.locator) {
        Locator::GradientTrace => {
            let tr = trace(&model, &w, t_id, o_id, gt.target)?;
            let loc = select_location(&tr.grad_norms, &w, &gt)?;
            (loc.token, loc.layer)
        }
        Locator::SubjectLast => {
            let s = w.subject.as_ref().ok_or_else(|| Error::Config("--locator subject-last needs --subject".into()))?;
            (s.end - 1, gt.edit_layer())
        }
    };
    let calib = calibration(&world, &tok, a.seed)?;
    let stats = key_stats_cached(&model, &calib, layer, a.editor.lambda, a.editor.cache_dir.as_deref())?;
    let prefixes = sample_prefixes(&calib, a.editor.key_prefixes, 6, a.seed);
    let key = compute_key_averaged(&model, &w.ids, layer, token, &prefixes)?;
    let value = optimize_value(&model, &w.ids, layer, token, t_id, &a.editor.value())?;
    let before = model.truth_probs(&w.ids, ans)?;
    let mut edit = RankOneEdit::compute(&model, layer, token, key, value.v, &stats)?;
    edit.apply(&mut model)?;
    let after = model.truth_probs(&w.ids, ans)?;
    println!("edit site: layer {layer}, token {token} ({:?})", tok.word(w.ids[token]));
    println!("target: {}", if target { "True" } else { "False" });
    println!("before: p_true {:.6} p_false {:.6}", before.p_true, before.p_false);
    println!("after:  p_true {:.6} p_false {:.6}", after.p_true, after.p_false);
    println!("|dW|_F: {:.6}", edit.delta_frobenius());
    if a.keep {
        let out = a.out.clone().unwrap_or_else(|| a.model.clone());
        save_model(&model, &tok, &out)?;
        println!("wrote {}", out.display());
    } else {
        edit.revert(&mut model)?;
    }
    Ok(())
}

/// Report document: the resolved run configuration plus the results.
#[derive(Debug, Serialize)]
pub struct BenchOutput<'a> {
    pub model: &'a Path,
    pub dataset: &'a Path,
    pub world: &'a Path,
    pub report: &'a EvalReport,
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let (model, tok) = load_model(&a.model)?;
    let world = FactWorld::load(&a.world)?;
    let data = load_dataset(&a.dataset)?;
    let style = data.manifest.style;
    let cfg = BenchConfig {
        locator: resolve_locator(a.locator),
        gt: a.locate.resolve(style),
        value: a.editor.value(),
        lambda: a.editor.lambda,
        key_prefixes: a.editor.key_prefixes,
        only_pre_correct: a.only_pre_correct,
        seed: a.seed,
        workers: a.workers,
    };
    let calib = calibration(&world, &tok, a.seed)?;
    let inputs = BenchInputs { tokenizer: &tok, calibration: &calib, cache_dir: a.editor.cache_dir.clone(), revert_probe: &calib[..calib.len().min(20)] };
    let report = run_benchmark(&model, &data.manifest, &cfg, &inputs)?;
    println!("entries scored: {} / {}", report.n_scored, report.n_entries);
    println!("{:<8} {:>10} {:>10} {:>10} {:>10}", "", "efficacy", "general.", "specif.", "total");
    for (name, s) in [("pre", report.pre), ("post", report.post)] {
        println!("{name:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", s.efficacy, s.generalization, s.specificity, s.total);
    }
    for g in &report.buckets {
        println!("{:?}: {:.2}% of cases, total {:.4}", g.group, g.percent_cases, g.scores.total);
    }
    if let Some(p) = &a.report {
        let out = BenchOutput { model: &a.model, dataset: &a.dataset, world: &a.world, report: &report };
        std::fs::write(p, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.entries_csv {
        report.save_entries_csv(p)?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Genworld(a) => cmd_genworld(a),
        Command::Train(a) => cmd_train(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
