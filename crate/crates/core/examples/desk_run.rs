//! Trains on the desk-scale synthetic corpus and reports held-out retrieval.
//! Arguments are config overrides, e.g. `steps=5000 lr=3e-3`.

use std::time::Instant;

use genret::config::TrainConfig;
use genret::evalkit::{build_store, evaluate, EvalOptions};
use genret::textdata::{documents, split_heldout, synth_corpus};
use genret::trainer::Trainer;

fn main() -> genret::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = TrainConfig::default().with_overrides(&overrides)?;
    let corpus = synth_corpus(16, 125, 2, 4096, 7)?;
    let (train, held) = split_heldout(&corpus.records, 0.1, 7);
    println!("train {} heldout {}", train.len(), held.len());
    let start = Instant::now();
    let mut t = Trainer::new(cfg, train.clone())?;
    t.run(
        |r| {
            println!(
                "{:>6} {:>7.1}s total {:.4} c {:.4} ce {:.4} di {:.4} bot {:.4} ib {:.4} q {:.4} uniq {} gn {:.2}",
                r.step,
                start.elapsed().as_secs_f64(),
                r.loss.total,
                r.loss.l_c,
                r.loss.l_ce,
                r.loss.l_di,
                r.loss.l_bot,
                r.loss.l_ib,
                r.loss.l_quant,
                r.unique_ids,
                r.grad_norm
            );
            Ok(())
        },
        |_| Ok(()),
    )?;
    let ckpt = t.checkpoint();
    let store = build_store(&ckpt, &documents(&train))?;
    let rep = evaluate(&ckpt, &store, &held, &EvalOptions::default())?;
    println!("{}", rep.to_json());
    diagnose(&ckpt, &train, &held)?;
    let rep = evaluate(&ckpt, &store, &train[..500], &EvalOptions::default())?;
    println!(
        "train subset r10 {:.3} mrr {:.3}",
        rep.overall.r10, rep.overall.mrr10
    );
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn diagnose(
    ckpt: &genret::trainer::Checkpoint,
    train: &[genret::textdata::PairRecord],
    held: &[genret::textdata::PairRecord],
) -> genret::Result<()> {
    let docs = documents(train);
    let dtexts: Vec<&str> = docs.iter().map(|(_, t)| t.as_str()).collect();
    let ed = ckpt.encode_texts(&dtexts)?;
    let dids = ckpt.assign_docs(&dtexts)?;
    let idx: std::collections::HashMap<&str, usize> = docs
        .iter()
        .enumerate()
        .map(|(i, (k, _))| (k.as_str(), i))
        .collect();
    for (name, set) in [("train", &train[..400]), ("held", held)] {
        let qtexts: Vec<&str> = set.iter().map(|r| r.query.as_str()).collect();
        let eq = ckpt.encode_texts(&qtexts)?;
        let qids = ckpt.assign_docs(&qtexts)?;
        let dec = ckpt.decoder()?;
        let (mut dense, mut idx_match, mut dec_pos, mut dec_exact) = (0.0, 0.0, [0.0; 4], 0.0);
        for (i, r) in set.iter().enumerate() {
            let t = idx[r.key.as_str()];
            let q = eq.row(i);
            let st: f64 = ed.row(t).iter().zip(q).map(|(a, b)| a * b).sum();
            let better = (0..ed.rows())
                .filter(|&j| ed.row(j).iter().zip(q).map(|(a, b)| a * b).sum::<f64>() > st)
                .count();
            if better < 10 {
                dense += 1.0;
            }
            if qids[i] == dids[t] {
                idx_match += 1.0;
            }
            let g = dec.greedy(q)?;
            for p in 0..4 {
                if g.id.0[p] == dids[t].0[p] {
                    dec_pos[p] += 1.0;
                }
            }
            if g.id == dids[t] {
                dec_exact += 1.0;
            }
        }
        let n = set.len() as f64;
        println!("{name}: dense@10 {:.3} idx-exact {:.3} dec-exact {:.3} dec-pos {:.2} {:.2} {:.2} {:.2}", dense / n, idx_match / n, dec_exact / n, dec_pos[0] / n, dec_pos[1] / n, dec_pos[2] / n, dec_pos[3] / n);
    }
    Ok(())
}
