//! Acceptance checks. Prints one PASS/FAIL line per criterion. Exits
//! nonzero on failure only when `ACCEPTANCE_STRICT=1`.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::Trained;
use propedit::eval::{harmonic_total, run_benchmark, wilson_interval, BenchConfig, BenchInputs, EvalReport, Locator, Z_95};
use propedit::model::{BatchLoss, ModelConfig, TransformerModel};
use propedit::prompt::wrap;
use propedit::rome::{rank_one_update, KeyStats};
use propedit::tensor::{grad_check, Tensor};
use propedit::trace::{trace, Bucket};
use propedit::train::TrainConfig;
use propedit::world::{generate_world, DatasetManifest, Style};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn out_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).expect("output dir");
    d
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig { n_layers: 2, d_model: 32, n_heads: 4, d_hidden: 64, vocab_size: 12, max_seq_len: 8 };
    let model = TransformerModel::new(cfg, 11).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seqs: Vec<Vec<u32>> = [5usize, 7].iter().map(|&n| (0..n).map(|_| rng.gen_range(0..12)).collect()).collect();
    let obj = BatchLoss { model: &model, seqs, targets: vec![3, 9] };
    let (names, params) = obj.params();
    let report = grad_check(&obj, &names, &params, 1e-5, 1e-4).expect("grad check");
    let elapsed = t0.elapsed();
    let worst = report.worst().expect("parameters");
    let n: usize = params.iter().map(Tensor::numel).sum();
    outcome(
        report.passed() && elapsed < Duration::from_secs(120),
        format!(
            "{} tensors, {n} scalars, worst {} rel err {:.2e}, {:.1}s",
            names.len(),
            worst.name,
            worst.max_rel_err,
            elapsed.as_secs_f64()
        ),
    )
}

fn metric_arithmetic() -> Outcome {
    let rows = [((99.76, 95.74, 73.05), 87.82), ((99.9, 95.95, 74.29), 88.51), ((100.0, 86.38, 71.82), 84.51)];
    let mut worst = 0.0f64;
    for ((e, g, s), want) in rows {
        worst = worst.max((harmonic_total(e, g, s) - want).abs());
    }
    outcome(worst <= 0.01, format!("max deviation {worst:.4}"))
}

fn wilson_intervals() -> Outcome {
    let rows = [((97, 100), (91.55, 98.98)), ((96, 100), (90.16, 98.43))];
    let mut worst = 0.0f64;
    for ((k, n), (lo, hi)) in rows {
        let (l, h) = wilson_interval(k, n, Z_95).expect("interval");
        worst = worst.max((l - lo).abs()).max((h - hi).abs());
    }
    outcome(worst <= 0.02, format!("max deviation {worst:.4}"))
}

/// Minimizes `tr(Δ C Δᵀ)` subject to `(W + Δ) k = v` row by row through the
/// KKT system `[2C k; kᵀ 0] [δ; μ] = [0; r]`.
fn constrained_ls(c: &DMatrix<f64>, k: &DVector<f64>, r: &DVector<f64>) -> DMatrix<f64> {
    let d = c.nrows();
    let mut kkt = DMatrix::zeros(d + 1, d + 1);
    kkt.view_mut((0, 0), (d, d)).copy_from(&(c * 2.0));
    kkt.view_mut((0, d), (d, 1)).copy_from(k);
    kkt.view_mut((d, 0), (1, d)).copy_from(&k.transpose());
    let lu = kkt.lu();
    let mut out = DMatrix::zeros(r.len(), d);
    for i in 0..r.len() {
        let mut rhs = DVector::zeros(d + 1);
        rhs[d] = r[i];
        let sol = lu.solve(&rhs).expect("KKT system");
        out.row_mut(i).copy_from(&sol.rows(0, d).transpose());
    }
    out
}

fn rank_one_properties() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut worst_constraint, mut worst_rank, mut worst_oracle) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let dh = rng.gen_range(2..=8);
        let dm = rng.gen_range(2..=6);
        let n = rng.gen_range(dh..dh + 20);
        let keys: Vec<Vec<f64>> = (0..n).map(|_| (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut moment = vec![0.0; dh * dh];
        for k in &keys {
            for i in 0..dh {
                for j in 0..dh {
                    moment[i * dh + j] += k[i] * k[j] / n as f64;
                }
            }
        }
        let lambda = 1e-3;
        let stats = KeyStats::from_moment(0, &moment, dh, n, lambda).expect("stats");
        let w = Tensor::new(&[dm, dh], (0..dm * dh).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("w");
        let k: Vec<f64> = (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..dm).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let delta = rank_one_update(&w, &k, &v, &stats).expect("update");

        let wm = DMatrix::from_row_slice(dm, dh, w.data());
        let dmx = DMatrix::from_row_slice(dm, dh, delta.data());
        let kv = DVector::from_column_slice(&k);
        let vv = DVector::from_column_slice(&v);
        let got = (&wm + &dmx) * &kv;
        worst_constraint = worst_constraint.max((&got - &vv).norm() / vv.norm().max(1e-300));

        let sv = dmx.clone().svd(false, false).singular_values;
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        if s.len() > 1 && s[0] > 0.0 {
            worst_rank = worst_rank.max(s[1] / s[0]);
        }

        let c = DMatrix::from_row_slice(dh, dh, &stats.c);
        let r = &vv - &wm * &kv;
        let oracle = constrained_ls(&c, &kv, &r);
        worst_oracle = worst_oracle.max((&dmx - &oracle).norm() / oracle.norm().max(1e-300));
    }
    let elapsed = t0.elapsed();
    outcome(
        worst_constraint < 1e-8 && worst_rank < 1e-10 && worst_oracle < 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "constraint {worst_constraint:.1e}, sigma2/sigma1 {worst_rank:.1e}, oracle {worst_oracle:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// The trained desk model and everything built on it.
struct Desk {
    trained: Trained,
    manifest: DatasetManifest,
    train_time: Duration,
    gt: EvalReport,
    gt_time: Duration,
}

fn bench(desk: &Trained, manifest: &DatasetManifest, locator: Locator) -> EvalReport {
    let calib = desk.calibration();
    let probe = desk.probe(20);
    let cfg = BenchConfig::for_style(manifest.style, locator);
    let inputs = BenchInputs { tokenizer: &desk.tok, calibration: &calib, cache_dir: None, revert_probe: &probe };
    run_benchmark(&desk.model, manifest, &cfg, &inputs).expect("benchmark")
}

fn build_desk() -> Desk {
    let t0 = Instant::now();
    let world = generate_world(0, 50, 5).expect("world");
    let trained = Trained::new(world, ModelConfig::desk, &TrainConfig::default());
    let train_time = t0.elapsed();
    eprintln!(
        "trained desk model in {:.0}s: held-out accuracy {:.4}",
        train_time.as_secs_f64(),
        trained.report.held_out_accuracy
    );
    let manifest = trained.manifest(Style::CfTrue, 200, 0);
    let t1 = Instant::now();
    let gt = bench(&trained, &manifest, Locator::GradientTrace);
    let gt_time = t1.elapsed();
    gt.save_json(&out_dir().join("cft_gt.json")).expect("report");
    Desk { trained, manifest, train_time, gt, gt_time }
}

fn end_to_end(d: &Desk) -> Outcome {
    let acc = d.trained.report.held_out_accuracy;
    let (pre, post) = (d.gt.pre, d.gt.post);
    let runtime = d.train_time + d.gt_time;
    let pass = acc >= 0.90
        && d.gt.n_scored == d.manifest.entries.len()
        && post.efficacy >= 0.95
        && post.generalization > pre.generalization
        && post.specificity >= 0.5
        && post.total > pre.total
        && runtime < Duration::from_secs(30 * 60);
    outcome(
        pass,
        format!(
            "held-out acc {acc:.4}; {} entries; pre E/G/S/T {:.3}/{:.3}/{:.3}/{:.3}; post {:.3}/{:.3}/{:.3}/{:.3}; {:.0}s",
            d.gt.n_scored,
            pre.efficacy,
            pre.generalization,
            pre.specificity,
            pre.total,
            post.efficacy,
            post.generalization,
            post.specificity,
            post.total,
            runtime.as_secs_f64()
        ),
    )
}

fn locator_comparison(d: &Desk) -> Outcome {
    let sl = bench(&d.trained, &d.manifest, Locator::SubjectLast);
    let dir = out_dir();
    sl.save_json(&dir.join("cft_subject_last.json")).expect("report");
    let emitted = dir.join("cft_gt.json").exists() && dir.join("cft_subject_last.json").exists();
    let in_subject = d.gt.entries.iter().filter(|e| matches!(e.bucket, Bucket::SubjectIn | Bucket::SubjectLast)).count();
    let rate = in_subject as f64 / d.gt.entries.len() as f64;
    outcome(
        emitted && sl.n_scored > 0 && rate > 0.5,
        format!(
            "GT token in subject {:.1}% of {}; totals GT {:.3} vs subject_last {:.3}",
            100.0 * rate,
            d.gt.entries.len(),
            d.gt.post.total,
            sl.post.total
        ),
    )
}

fn revert_exactness(d: &Desk) -> Outcome {
    let drifts: Vec<f64> = d.gt.entries.iter().filter_map(|e| e.revert_drift).collect();
    let worst = drifts.iter().copied().fold(0.0, f64::max);
    let all_checked = drifts.len() == d.gt.entries.len();

    let mut small = d.manifest.clone();
    small.entries.truncate(10);
    let forward = bench(&d.trained, &small, Locator::GradientTrace);
    let mut shuffled = small.clone();
    shuffled.entries.reverse();
    shuffled.entries.swap(0, 4);
    let permuted = bench(&d.trained, &shuffled, Locator::GradientTrace);
    let mut a = forward.entries.clone();
    let mut b = permuted.entries.clone();
    a.sort_by(|x, y| x.id.cmp(&y.id));
    b.sort_by(|x, y| x.id.cmp(&y.id));
    let invariant = a == b && forward.pre == permuted.pre && forward.post == permuted.post;
    outcome(
        all_checked && worst <= 1e-9 && invariant,
        format!("max probe drift {worst:.1e} over {} entries; permutation invariant: {invariant}", drifts.len()),
    )
}

fn single_backward(d: &Desk) -> Outcome {
    let ans = d.trained.tok.answer_ids();
    let mut counts = Vec::new();
    for e in &d.manifest.entries {
        let w = wrap(&d.trained.tok, &e.statement, e.subject.as_deref()).expect("prompt");
        let t = !e.truth_value;
        let tr = trace(&d.trained.model, &w, ans.for_truth(t), ans.for_truth(!t), Default::default()).expect("trace");
        counts.push(tr.backward_calls);
    }
    let ok = counts.iter().all(|&c| c == 1);
    outcome(ok, format!("{} prompts traced, backward passes per prompt: {:?}", counts.len(), {
        let mut u = counts.clone();
        u.sort();
        u.dedup();
        u
    }))
}

fn determinism(d: &Desk) -> Outcome {
    let again = bench(&d.trained, &d.manifest, Locator::GradientTrace);
    let same = again.entries == d.gt.entries && again.pre == d.gt.pre && again.post == d.gt.post;
    outcome(same, format!("{} per-entry scores compared", again.entries.len()))
}

fn main() {
    common::init_logging();
    let mut lines = Vec::new();
    let mut record = |n: usize, name: &str, o: Outcome| {
        let line = format!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        lines.push((o.pass, line));
    };
    record(1, "gradient correctness", gradient_correctness());
    record(2, "harmonic-mean totals", metric_arithmetic());
    record(3, "Wilson intervals", wilson_intervals());
    record(4, "rank-one editor properties", rank_one_properties());
    let desk = build_desk();
    record(5, "end-to-end benchmark", end_to_end(&desk));
    record(6, "locator comparison", locator_comparison(&desk));
    record(7, "revert exactness", revert_exactness(&desk));
    record(8, "single backward per trace", single_backward(&desk));
    record(9, "determinism", determinism(&desk));

    println!("\nsummary:");
    for (_, l) in &lines {
        println!("  {l}");
    }
    let failed = lines.iter().filter(|(p, _)| !p).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
