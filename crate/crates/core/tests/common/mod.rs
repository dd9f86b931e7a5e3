#![allow(dead_code)]

use genret::diffcore::Tensor;
use genret::IdSpace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let mut t = uniform(rng, r, c, 1.0);
    for i in 0..r {
        let row = t.row_mut(i);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// Softmax of every slot of every row.
pub fn slot_softmax(logits: &Tensor, space: &IdSpace) -> Tensor {
    let v = space.codes_per_slot;
    let mut out = logits.clone();
    for r in 0..out.rows() {
        for chunk in out.row_mut(r).chunks_mut(v) {
            let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = chunk.iter().map(|x| (x - m).exp()).sum();
            chunk.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
        }
    }
    out
}

pub fn one_hot(space: &IdSpace, locals: &[usize]) -> Vec<f64> {
    let mut row = vec![0.0; space.num_codes()];
    for (i, &k) in locals.iter().enumerate() {
        row[i * space.codes_per_slot + k] = 1.0;
    }
    row
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
