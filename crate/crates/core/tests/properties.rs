use proptest::prelude::*;

use propedit::eval::{harmonic_total, wilson_interval, Z_95};
use propedit::model::checkpoint::{decode, encode};
use propedit::model::{ModelConfig, TransformerModel};
use propedit::prompt::wrap;
use propedit::rome::{rank_one_update, KeyStats};
use propedit::tensor::Tensor;
use propedit::train::tokenizer_for;
use propedit::world::{emit_dataset, generate_world, parse_dataset, EmitOptions, Style};

fn vec_in(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn harmonic_total_bounded_by_components(e in 0.0f64..1.0, g in 0.0f64..1.0, s in 0.0f64..1.0) {
        let t = harmonic_total(e, g, s);
        let (lo, hi) = (e.min(g).min(s), e.max(g).max(s));
        prop_assert!(t >= lo - 1e-12 && t <= hi + 1e-12);
        if lo == 0.0 {
            prop_assert_eq!(t, 0.0);
        }
    }

    #[test]
    fn harmonic_total_of_equal_components(x in 0.0f64..100.0) {
        prop_assert_eq!(harmonic_total(x, x, x), x);
    }

    #[test]
    fn wilson_contains_point_estimate(n in 1usize..500, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).round() as usize;
        let (lo, hi) = wilson_interval(k, n, Z_95).unwrap();
        let p = 100.0 * k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-9 && p <= hi + 1e-9 && hi <= 100.0);
    }

    #[test]
    fn rank_one_meets_constraint(
        (dh, dm) in (2usize..8, 2usize..6),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut moment = vec![0.0; dh * dh];
        for _ in 0..3 * dh {
            let k: Vec<f64> = (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..dh {
                for j in 0..dh {
                    moment[i * dh + j] += k[i] * k[j];
                }
            }
        }
        let stats = KeyStats::from_moment(1, &moment, dh, 3 * dh, 1e-3).unwrap();
        let w = Tensor::new(&[dm, dh], (0..dm * dh).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let k: Vec<f64> = (0..dh).map(|_| rng.gen_range(0.1..1.0)).collect();
        let v: Vec<f64> = (0..dm).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = rank_one_update(&w, &k, &v, &stats).unwrap();
        for r in 0..dm {
            let got: f64 = (0..dh).map(|c| (w.row(r)[c] + d.row(r)[c]) * k[c]).sum();
            prop_assert!((got - v[r]).abs() < 1e-9);
        }
    }

    #[test]
    fn key_stats_round_trip(d in 1usize..6, m in vec_in(36, -1.0, 1.0), layer in 0usize..8) {
        let mut moment = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                moment[i * d + j] = (0..d).map(|t| m[i * 6 + t] * m[j * 6 + t]).sum();
            }
        }
        let s = KeyStats::from_moment(layer, &moment, d, 100, 1e-2).unwrap();
        let back = KeyStats::decode(&s.encode()).unwrap();
        prop_assert_eq!(back.c, s.c);
        prop_assert_eq!(back.layer, layer);
        prop_assert_eq!(back.lambda.to_bits(), s.lambda.to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn datasets_round_trip(seed in 0u64..1000, style_ix in 0usize..3) {
        let style = [Style::CfTrue, Style::CfFalse, Style::Fact][style_ix];
        let world = generate_world(seed, 20, 3).unwrap();
        let m = emit_dataset(&world, style, 8, seed, EmitOptions::default()).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back = parse_dataset(&text).unwrap();
        prop_assert_eq!(back.manifest, m);
    }

    #[test]
    fn wrapped_content_matches_statement(seed in 0u64..1000) {
        let world = generate_world(seed, 20, 3).unwrap();
        let tok = tokenizer_for(&world);
        let m = emit_dataset(&world, Style::CfTrue, 6, seed, EmitOptions::default()).unwrap();
        for e in &m.entries {
            let w = wrap(&tok, &e.statement, e.subject.as_deref()).unwrap();
            prop_assert_eq!(w.formatting.iter().filter(|&&f| f).count(), 7);
            prop_assert_eq!(tok.detokenize(&w.ids[w.content.clone()]), e.statement.clone());
            let s = w.subject.clone().unwrap();
            prop_assert!(w.content.start <= s.start && s.end <= w.content.end);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), layers in 2usize..4) {
        let cfg = ModelConfig { n_layers: layers, d_model: 8, n_heads: 2, d_hidden: 16, vocab_size: 11, max_seq_len: 6 };
        let m = TransformerModel::new(cfg, seed).unwrap();
        let once = decode(&encode(&m)).unwrap();
        for ((_, a), (_, b)) in once.named_params().iter().zip(m.named_params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert_eq!(*x, *y as f32 as f64);
            }
        }
        prop_assert_eq!(decode(&encode(&once)).unwrap(), once);
    }
}
