mod common;

use common::{rng, unit_rows, FD_STEP};
use genret::diffcore::{finite_diff_check_wrt, Bindings, Graph, NodeId, Vars};
use genret::model::*;
use genret::params::{Bound, ParamStore};
use genret::{DocId, IdSpace};
use rand::Rng;

fn config(id_length: usize, codes_per_slot: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        embed_dim: 8,
        enc_hidden: 10,
        dim: 6,
        dec_hidden: 12,
        dec_pre_hidden: 0,
        max_length: 16,
        id_length,
        codes_per_slot,
    }
}

fn store(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_params(cfg, seed, &mut s).unwrap();
    s
}

/// Perturbs every parameter so that checkpoints differ beyond their init.
fn jitter(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for x in store.get_mut(&n).unwrap().data_mut() {
            *x += r.gen_range(-scale..scale);
        }
    }
}

#[test]
fn encoder_contracts() {
    let cfg = config(4, 256);
    let s = store(&cfg, 1);
    let e = encode_batch(&s, &[vec![1, 2, 3], vec![3, 1, 2], vec![7], vec![1, 2, 3]]).unwrap();
    for r in 0..4 {
        let n: f64 = e.row(r).iter().map(|x| x * x).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);
    }
    for (a, b) in e.row(0).iter().zip(e.row(1)) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(e.row(0), e.row(3));
    assert_ne!(e.row(0), e.row(2));
}

fn bind_store(s: &ParamStore) -> (Bindings, Vec<String>) {
    let b: Bindings = s.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    (b, s.names().map(str::to_string).collect())
}

fn bound(v: &Vars, names: &[String]) -> genret::diffcore::Result<Bound> {
    let mut pairs = Vec::new();
    for n in names {
        pairs.push((n.clone(), v.get(n)?));
    }
    Ok(Bound::from_pairs(pairs))
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let cfg = config(2, 4);
    let s = store(&cfg, 2);
    let (b, names) = bind_store(&s);
    let bags = vec![vec![1, 2, 3], vec![4, 4, 9], vec![0, 5]];
    let expr = |g: &mut Graph, v: &Vars| -> genret::diffcore::Result<NodeId> {
        let p = bound(v, &names)?;
        let raw = encode_raw(g, &p, &bags)?;
        let sq = g.square(raw)?;
        g.sum(sq)
    };
    let wrt = [ENC_EMB, ENC_W1, ENC_B1, ENC_W2, ENC_B2];
    let rep = finite_diff_check_wrt(&expr, &b, &wrt, FD_STEP).unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn decoder_gradient_matches_finite_differences() {
    for pre in [0, 5] {
        let cfg = ModelConfig {
            dec_pre_hidden: pre,
            ..config(2, 4)
        };
        let space = cfg.id_space();
        let s = store(&cfg, 3);
        let (mut b, names) = bind_store(&s);
        b.insert("e".into(), unit_rows(&mut rng(4), 3, cfg.dim));
        let gold = vec![DocId(vec![1, 5]), DocId(vec![4, 8]), DocId(vec![2, 5])];
        let expr = |g: &mut Graph, v: &Vars| -> genret::diffcore::Result<NodeId> {
            let p = bound(v, &names)?;
            let z = teacher_forced_logits(g, &p, &space, v.get("e")?, &gold)?;
            Ok(genret::criteria::generation_loss(g, z, &gold, &space)?.0)
        };
        let mut wrt = vec!["e", DEC_COND_W, DEC_COND_B, DEC_EMB, DEC_OUT_W, DEC_OUT_B];
        if pre > 0 {
            wrt.extend([DEC_PRE_W, DEC_PRE_B]);
        }
        let rep = finite_diff_check_wrt(&expr, &b, &wrt, FD_STEP).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}

#[test]
fn teacher_forcing_agrees_with_stepwise_decoding() {
    let cfg = ModelConfig {
        dec_pre_hidden: 7,
        ..config(4, 256)
    };
    let space = cfg.id_space();
    let mut s = store(&cfg, 5);
    jitter(&mut s, 6, 0.3);
    let e = unit_rows(&mut rng(7), 3, cfg.dim);
    let mut r = rng(8);
    let gold: Vec<DocId> = (0..3)
        .map(|_| {
            DocId::from_locals(
                &space,
                &(0..4).map(|_| r.gen_range(0..256)).collect::<Vec<_>>(),
            )
        })
        .collect();
    let mut g = Graph::new();
    let p = s.bind(&mut g).unwrap();
    let x = g.constant(e.clone()).unwrap();
    let z = teacher_forced_logits(&mut g, &p, &space, x, &gold).unwrap();
    let lp = g.log_softmax(z).unwrap();
    let lp = g.value(lp).clone();
    let dec = Decoder::new(&s, space).unwrap();
    for (item, id) in gold.iter().enumerate() {
        let cond = dec.condition(e.row(item)).unwrap();
        let mut total_tf = 0.0;
        let mut total_step = 0.0;
        for pos in 0..4 {
            let code = id.codes()[pos] as usize;
            let row = dec.distribution(&cond, &id.codes()[..pos], false).unwrap();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((row[code].ln() - lp.row(pos * 3 + item)[code]).abs() < 1e-9);
            total_tf += lp.row(pos * 3 + item)[code];
            total_step += row[code].ln();
        }
        assert!((total_tf - total_step).abs() < 1e-9);
        // Masked sequence probability is the product of masked steps.
        let mut masked = 0.0;
        for pos in 0..4 {
            masked += dec.distribution(&cond, &id.codes()[..pos], true).unwrap()
                [id.codes()[pos] as usize]
                .ln();
        }
        assert!((dec.sequence_log_prob(e.row(item), id).unwrap() - masked).abs() < 1e-9);
    }
}

#[test]
fn masked_support_follows_slices() {
    let cfg = config(4, 256);
    let space = cfg.id_space();
    let s = store(&cfg, 9);
    let dec = Decoder::new(&s, space).unwrap();
    let cond = dec
        .condition(unit_rows(&mut rng(10), 1, cfg.dim).row(0))
        .unwrap();
    let row = dec.distribution(&cond, &[17], true).unwrap();
    for (i, &p) in row.iter().enumerate() {
        assert_eq!(p > 0.0, (257..=512).contains(&i), "{i}");
    }
    assert!(dec.distribution(&cond, &[17, 300, 600, 800], true).is_err());
    assert!(dec.distribution(&cond, &[300], true).is_err());
}

#[test]
fn beam_of_one_is_greedy() {
    let cfg = config(4, 256);
    let space = cfg.id_space();
    for seed in 0..100 {
        let mut s = store(&cfg, 100 + seed);
        jitter(&mut s, 200 + seed, 0.5);
        let dec = Decoder::new(&s, space).unwrap();
        let e = unit_rows(&mut rng(300 + seed), 1, cfg.dim);
        let beams = dec.beam_search(e.row(0), 1).unwrap();
        let greedy = dec.greedy(e.row(0)).unwrap();
        assert_eq!(beams.len(), 1);
        assert_eq!(beams[0].id, greedy.id);
        assert!((beams[0].log_prob - greedy.log_prob).abs() < 1e-12);
    }
}

#[test]
fn beams_are_sorted_and_valid() {
    let cfg = config(4, 256);
    let space = cfg.id_space();
    let mut s = store(&cfg, 11);
    jitter(&mut s, 12, 0.5);
    let dec = Decoder::new(&s, space).unwrap();
    let e = unit_rows(&mut rng(13), 20, cfg.dim);
    for r in 0..20 {
        let beams = dec.beam_search(e.row(r), 10).unwrap();
        assert!(beams.len() <= 10);
        for w in beams.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for b in &beams {
            space.validate(&b.id).unwrap();
            assert!((dec.sequence_log_prob(e.row(r), &b.id).unwrap() - b.log_prob).abs() < 1e-9);
        }
    }
    assert!(dec.beam_search(e.row(0), 0).is_err());
}

#[test]
fn full_width_beam_enumerates_support() {
    let cfg = config(2, 4);
    let space = IdSpace::new(2, 4).unwrap();
    for seed in 0..10 {
        let mut s = store(&cfg, 20 + seed);
        jitter(&mut s, 40 + seed, 1.0);
        let dec = Decoder::new(&s, space).unwrap();
        let e = unit_rows(&mut rng(60 + seed), 1, cfg.dim);
        let mut all: Vec<(DocId, f64)> = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                let id = DocId::from_locals(&space, &[a, b]);
                let lp = dec.sequence_log_prob(e.row(0), &id).unwrap();
                all.push((id, lp));
            }
        }
        all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0)));
        let beams = dec.beam_search(e.row(0), 16).unwrap();
        assert_eq!(beams.len(), 16);
        let total: f64 = beams.iter().map(|b| b.log_prob.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for (b, (id, lp)) in beams.iter().zip(&all) {
            assert_eq!(&b.id, id);
            assert!((b.log_prob - lp).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_break_lexicographically() {
    let cfg = config(2, 4);
    let space = IdSpace::new(2, 4).unwrap();
    let mut s = store(&cfg, 70);
    for name in [DEC_OUT_W, DEC_OUT_B] {
        s.get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }
    let dec = Decoder::new(&s, space).unwrap();
    let beams = dec.beam_search(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3).unwrap();
    let ids: Vec<String> = beams.iter().map(|b| b.id.to_string()).collect();
    assert_eq!(ids, ["1,5", "1,6", "1,7"]);
}
