mod common;

use propedit::eval::{run_benchmark, BenchConfig, BenchInputs, EvalReport, Locator};
use propedit::rome::stats_cache_path;
use propedit::trace::{bucketize, export_heatmap, import_heatmap};
use propedit::world::Style;

fn bench(t: &common::Trained, style: Style, n: usize, workers: usize, cache: Option<&std::path::Path>) -> EvalReport {
    let manifest = t.manifest(style, n, 9);
    let calib = t.calibration();
    let probe = t.probe(20);
    let mut cfg = BenchConfig::for_style(style, Locator::GradientTrace);
    cfg.workers = workers;
    let inputs = BenchInputs {
        tokenizer: &t.tok,
        calibration: &calib,
        cache_dir: cache.map(|p| p.to_path_buf()),
        revert_probe: &probe,
    };
    run_benchmark(&t.model, &manifest, &cfg, &inputs).unwrap()
}

#[test]
fn benchmark_reports_are_consistent() {
    common::init_logging();
    let t = common::small_trained();
    let dir = tempfile::tempdir().unwrap();

    for style in [Style::CfTrue, Style::CfFalse, Style::Fact] {
        let r = bench(&t, style, 6, 1, Some(dir.path()));
        assert_eq!(r.n_entries, 6);
        assert_eq!(r.n_scored + r.skipped.len(), 6);
        assert_eq!(r.position_histogram.is_some(), style == Style::Fact);
        let pct: f64 = r.buckets.iter().map(|g| g.percent_cases).sum();
        assert!(pct <= 100.0 + 1e-9);
        for e in &r.entries {
            assert_eq!(e.revert_drift, Some(0.0), "entry {}", e.id);
            assert!((0.0..=1.0).contains(&e.generalization) && (0.0..=1.0).contains(&e.specificity));
            if style == Style::Fact {
                assert_eq!(e.layer, 3);
            } else {
                assert_eq!(e.layer, 2);
            }
        }
        for (name, iv) in &r.wilson {
            assert!(iv.lower <= iv.upper, "{name}");
        }
        let text = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
    let cached = stats_cache_path(dir.path(), &t.model.fingerprint(), 2, None);
    assert!(cached.exists(), "{cached:?}");
}

#[test]
fn workers_do_not_change_results() {
    let t = common::small_trained();
    let a = bench(&t, Style::CfTrue, 5, 1, None);
    let b = bench(&t, Style::CfTrue, 5, 3, None);
    assert_eq!(a.entries, b.entries);
    assert_eq!(a.post, b.post);
}

#[test]
fn heatmap_round_trip_over_traced_entries() {
    use propedit::prompt::wrap;
    use propedit::trace::trace;
    let t = common::small_trained();
    let m = t.manifest(Style::CfTrue, 8, 1);
    let ans = t.tok.answer_ids();
    let mut traced = Vec::new();
    for e in &m.entries {
        let w = wrap(&t.tok, &e.statement, e.subject.as_deref()).unwrap();
        let tr = trace(&t.model, &w, ans.for_truth(false), ans.for_truth(true), Default::default()).unwrap();
        traced.push((tr.grad_norms, w));
    }
    let refs: Vec<_> = traced.iter().map(|(g, w)| (g.as_slice(), w)).collect();
    let table = bucketize(&refs, 0);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("heat.csv");
    export_heatmap(&table.rows, &p).unwrap();
    let back = import_heatmap(&p).unwrap();
    assert_eq!(back.len(), table.rows.len());
}
