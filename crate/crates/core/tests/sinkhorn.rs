mod common;

use std::sync::Arc;

use common::{rng, uniform, FD_STEP};
use genret::diffcore::{
    finite_diff_check, forward, gradient, Bindings, Graph, NodeId, Tensor, Vars,
};
use genret::sinkhorn::{sinkhorn, Sinkhorn, SinkhornParams};
use rand::Rng;

fn bind(pairs: Vec<(&str, Tensor)>) -> Bindings {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// The same iterations written with generic graph operators.
fn composite(g: &mut Graph, cost: NodeId, p: SinkhornParams) -> genret::diffcore::Result<NodeId> {
    let (m, n) = (g.shape(cost)[0], g.shape(cost)[1]);
    let k = g.mul_scalar(cost, -1.0 / p.epsilon)?;
    let log_c = (m as f64 / n as f64).ln();
    let mut v = g.constant(Tensor::zeros(&[n]))?;
    for _ in 0..p.iterations {
        let vb = g.expand_rows(v, m)?;
        let kv = g.add(k, vb)?;
        let lse = g.log_sum_exp(kv)?;
        let u = g.mul_scalar(lse, -1.0)?;
        let ub = g.expand_cols(u, n)?;
        let ku = g.add(k, ub)?;
        let kt = g.transpose(ku)?;
        let lse = g.log_sum_exp(kt)?;
        let neg = g.mul_scalar(lse, -1.0)?;
        v = g.add_scalar(neg, log_c)?;
    }
    let vb = g.expand_rows(v, m)?;
    let z = g.add(k, vb)?;
    g.softmax(z)
}

fn probe(g: &mut Graph, plan: NodeId, w: NodeId) -> genret::diffcore::Result<NodeId> {
    let s = g.mul(plan, w)?;
    g.sum(s)
}

#[test]
fn matches_composite_graph() {
    let mut r = rng(1);
    let p = SinkhornParams {
        epsilon: 0.2,
        iterations: 25,
    };
    for _ in 0..3 {
        let cost = uniform(&mut r, 6, 9, 1.0);
        let w = uniform(&mut r, 6, 9, 1.0);
        let b = bind(vec![("c", cost), ("w", w)]);
        let op = Arc::new(Sinkhorn(p));
        let fused = |g: &mut Graph, v: &Vars| {
            let plan = g.custom(op.clone(), &[v.get("c")?])?;
            probe(g, plan, v.get("w")?)
        };
        let plain = |g: &mut Graph, v: &Vars| {
            let plan = composite(g, v.get("c")?, p)?;
            probe(g, plan, v.get("w")?)
        };
        let a = forward(&fused, &b).unwrap().item().unwrap();
        let c = forward(&plain, &b).unwrap().item().unwrap();
        assert!((a - c).abs() < 1e-9, "{a} vs {c}");
        let ga = gradient(&fused, &b, &["c"]).unwrap();
        let gc = gradient(&plain, &b, &["c"]).unwrap();
        for (x, y) in ga["c"].data().iter().zip(gc["c"].data()) {
            assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-3), "{x} vs {y}");
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut r = rng(2);
    let op = Arc::new(Sinkhorn(SinkhornParams {
        epsilon: 0.5,
        iterations: 20,
    }));
    let b = bind(vec![
        ("c", uniform(&mut r, 5, 7, 1.0)),
        ("w", uniform(&mut r, 5, 7, 1.0)),
    ]);
    let rep = finite_diff_check(
        &|g: &mut Graph, v: &Vars| {
            let plan = g.custom(op.clone(), &[v.get("c")?])?;
            probe(g, plan, v.get("w")?)
        },
        &b,
        FD_STEP,
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn rows_are_distributions_and_columns_balance() {
    let mut r = rng(3);
    let cost = Tensor::matrix(32, 256, (0..32 * 256).map(|_| r.gen::<f64>()).collect()).unwrap();
    let plan = sinkhorn(&cost, SinkhornParams::default()).unwrap();
    let mut cols = vec![0.0; 256];
    for i in 0..32 {
        let row = plan.row(i);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&x| x >= 0.0));
        for (c, x) in cols.iter_mut().zip(row) {
            *c += x / 32.0;
        }
    }
    let worst = cols
        .iter()
        .map(|c| (c - 1.0 / 256.0).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn per_row_shift_is_ignored() {
    let mut r = rng(4);
    let cost = Tensor::matrix(8, 16, (0..128).map(|_| r.gen::<f64>()).collect()).unwrap();
    let mut shifted = cost.clone();
    for i in 0..8 {
        let s = r.gen_range(-5.0..5.0);
        shifted.row_mut(i).iter_mut().for_each(|x| *x += s);
    }
    let p = SinkhornParams::default();
    let a = sinkhorn(&cost, p).unwrap();
    let b = sinkhorn(&shifted, p).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn rejects_bad_input() {
    let c = Tensor::matrix(2, 2, vec![0.0, 1.0, f64::NAN, 0.0]).unwrap();
    assert!(sinkhorn(&c, SinkhornParams::default()).is_err());
    let c = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
    assert!(sinkhorn(
        &c,
        SinkhornParams {
            epsilon: 0.0,
            iterations: 3
        }
    )
    .is_err());
    assert!(sinkhorn(
        &c,
        SinkhornParams {
            epsilon: 0.1,
            iterations: 0
        }
    )
    .is_err());
}
