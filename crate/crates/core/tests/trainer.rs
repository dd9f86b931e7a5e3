use std::collections::BTreeMap;

use genret::config::TrainConfig;
use genret::diffcore::Tensor;
use genret::indexer::IndexerKind;
use genret::params::ParamStore;
use genret::textdata::{synth_corpus, PairRecord};
use genret::trainer::*;

fn corpus() -> Vec<PairRecord> {
    synth_corpus(4, 8, 2, 64, 1).unwrap().records
}

fn tiny(overrides: &[&str]) -> TrainConfig {
    let base = [
        "steps=10",
        "batch_size=16",
        "lr=1e-3",
        "embed_dim=8",
        "enc_hidden=16",
        "dim=8",
        "dec_hidden=16",
        "indexer_hidden=16",
        "log_interval=2",
        "probe_size=32",
    ];
    let all: Vec<String> = base
        .iter()
        .chain(overrides)
        .map(|s| s.to_string())
        .collect();
    TrainConfig::default().with_overrides(&all).unwrap()
}

#[test]
fn smoke_run_logs_finite_losses() {
    for kind in ["mlp", "pq", "rq"] {
        let (ckpt, log) = train(tiny(&[&format!("indexer=\"{kind}\"")]), corpus()).unwrap();
        assert_eq!(ckpt.step, 10);
        assert_eq!(
            log.iter().map(|r| r.step).collect::<Vec<_>>(),
            [2, 4, 6, 8, 10]
        );
        for r in &log {
            assert!(
                r.loss.total.is_finite() && r.grad_norm.is_finite(),
                "{kind}: {r:?}"
            );
            assert!(r.unique_ids >= 1 && r.unique_ids <= r.probe_size);
        }
    }
}

#[test]
fn same_seed_same_trajectory() {
    let run = || {
        let (ckpt, log) = train(tiny(&[]), corpus()).unwrap();
        let text: String = log.iter().map(MetricsRecord::to_json_line).collect();
        (ckpt.params.hash(), text, ckpt.to_bytes())
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    let (c, _) = train(tiny(&["seed=5"]), corpus()).unwrap();
    assert_ne!(c.params.hash(), a.0);
}

#[test]
fn resume_matches_uninterrupted() {
    let records = corpus();
    for kind in ["mlp", "rq"] {
        let cfg = tiny(&[&format!("indexer=\"{kind}\""), "steps_per_epoch=3"]);
        let (full, _) = train(cfg.clone(), records.clone()).unwrap();
        let mut t = Trainer::new(cfg, records.clone()).unwrap();
        for _ in 0..4 {
            t.step().unwrap();
        }
        let bytes = t.checkpoint().to_bytes();
        let mut resumed = Trainer::resume(
            Checkpoint::from_bytes(&bytes).unwrap(),
            records.clone(),
            None,
        )
        .unwrap();
        resumed.run(|_| Ok(()), |_| Ok(())).unwrap();
        assert_eq!(resumed.checkpoint(), full, "{kind}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (ckpt, _) = train(tiny(&["steps=3"]), corpus()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    let mut bad = ckpt.to_bytes();
    bad.truncate(bad.len() - 3);
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}

#[test]
fn disabling_aux_losses_leaves_contrastive_plus_generation() {
    let mut t = Trainer::new(tiny(&["disable_loss=\"di,bot,ib\""]), corpus()).unwrap();
    for _ in 0..5 {
        let r = t.step().unwrap();
        assert!(!r.loss.di_active && !r.loss.bot_active && !r.loss.ib_active);
        assert_eq!(r.loss.total, r.loss.l_c + r.loss.l_ce);
    }
    let mut t = Trainer::new(tiny(&[]), corpus()).unwrap();
    let r = t.step().unwrap();
    let expect =
        r.loss.l_c + r.loss.l_ce + r.loss.lambda * (r.loss.l_di + r.loss.l_bot + r.loss.l_ib);
    assert!((r.loss.total - expect).abs() < 1e-9 * expect.abs().max(1.0));
}

#[test]
fn gold_targets_respect_slices() {
    let cfg = tiny(&[]);
    let space = cfg.model_config(1).id_space();
    let mut t = Trainer::new(cfg, corpus()).unwrap();
    for _ in 0..3 {
        for id in t.step().unwrap().gold {
            space.validate(&id).unwrap();
        }
    }
}

#[test]
fn quantizer_term_only_for_codebook_indexers() {
    for (kind, expect) in [
        (IndexerKind::Mlp, false),
        (IndexerKind::Pq, true),
        (IndexerKind::Rq, true),
    ] {
        let mut cfg = tiny(&[]);
        cfg.indexer = kind;
        let r = Trainer::new(cfg, corpus()).unwrap().step().unwrap();
        assert_eq!(r.loss.quant_active, expect);
        assert_eq!(r.loss.l_quant > 0.0, expect);
    }
}

#[test]
fn schedules() {
    assert_eq!(lambda_schedule(0, 100, 0.25), 0.01);
    assert_eq!(lambda_schedule(100, 100, 0.25), 0.25);
    assert_eq!(lambda_schedule(500, 100, 0.25), 0.25);
    assert!((lambda_schedule(50, 100, 0.25) - 0.13).abs() < 1e-12);
    assert_eq!(lambda_schedule(0, 0, 0.25), 0.25);
    assert_eq!(lr_schedule(0, 10, 1e-4), 0.0);
    assert_eq!(lr_schedule(10, 10, 1e-4), 1e-4);
    assert_eq!(lr_schedule(99, 10, 1e-4), 1e-4);
    assert!((lr_schedule(5, 10, 1e-4) - 5e-5).abs() < 1e-18);
    let cfg = tiny(&["steps=100", "warmup_steps=10", "lr_decay=\"cosine\""]);
    assert_eq!(lr_at(&cfg, 10), cfg.lr);
    assert!(lr_at(&cfg, 100).abs() < 1e-15);
    assert!(lr_at(&cfg, 55) < cfg.lr && lr_at(&cfg, 55) > 0.0);
}

#[test]
fn zero_gradient_only_decays() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
    let mut st = OptState::zeros_like(&p);
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    adamw_step(&mut p, &BTreeMap::new(), &mut st, &opt, 0.1).unwrap();
    let got = p.get("w").unwrap().data().to_vec();
    for (g, w) in got.iter().zip([1.0, -2.0, 0.5]) {
        assert!((g - w * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }
}

#[test]
fn adamw_matches_reference_update() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::vector(vec![0.3, -0.7]));
    let mut st = OptState::zeros_like(&p);
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let grads = [[0.5, -1.0], [0.1, 2.0]];
    let (mut m, mut v, mut w) = ([0.0; 2], [0.0; 2], [0.3, -0.7]);
    for (t, g) in grads.iter().enumerate() {
        let gm = BTreeMap::from([("w".to_string(), Tensor::vector(g.to_vec()))]);
        adamw_step(&mut p, &gm, &mut st, &opt, 0.01).unwrap();
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v[i] / (1.0 - 0.999f64.powi(t as i32 + 1));
            w[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
    }
    for (a, b) in p.get("w").unwrap().data().iter().zip(w) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn clipping_caps_global_norm() {
    let mut g = BTreeMap::from([
        ("a".to_string(), Tensor::vector(vec![3.0, 0.0])),
        ("b".to_string(), Tensor::vector(vec![4.0])),
    ]);
    assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
    assert_eq!(g["a"].data(), [3.0, 0.0]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    let n: f64 = g
        .values()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    assert!((n - 1.0).abs() < 1e-12);
}

#[test]
fn rejects_tiny_corpus_and_bad_resume() {
    assert!(Trainer::new(tiny(&[]), corpus()[..1].to_vec()).is_err());
    let (ckpt, _) = train(tiny(&[]), corpus()).unwrap();
    assert!(Trainer::resume(ckpt, corpus(), Some(5)).is_err());
}
