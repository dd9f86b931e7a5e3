//! Entropic balanced assignment in the log domain, differentiable through
//! its unrolled iterations.

use std::any::Any;

use diffcore::kernels;
use diffcore::{CustomOp, DiffError, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            epsilon: 0.003,
            iterations: 100,
        }
    }
}

/// Dual potentials of every iteration, kept for the reverse sweep.
struct Trace {
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
}

/// Rows carry unit mass, columns `n_rows / n_cols` each. Each iteration
/// updates the row potential `u` and then the column potential `v`; the
/// output is the row-normalized plan `softmax_j(-C_ij / eps + v_j)`.
pub struct Sinkhorn(pub SinkhornParams);

fn run(cost: &Tensor, p: SinkhornParams) -> (Vec<f64>, Trace) {
    let (m, n) = (cost.rows(), cost.cols());
    let k: Vec<f64> = cost.data().iter().map(|c| -c / p.epsilon).collect();
    let log_c = (m as f64 / n as f64).ln();
    let mut v = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut trace = Trace {
        us: Vec::with_capacity(p.iterations),
        vs: Vec::with_capacity(p.iterations + 1),
    };
    trace.vs.push(v.clone());
    let mut buf = vec![0.0; n.max(m)];
    for _ in 0..p.iterations {
        for i in 0..m {
            let row = &k[i * n..(i + 1) * n];
            for j in 0..n {
                buf[j] = row[j] + v[j];
            }
            u[i] = -kernels::log_sum_exp(&buf[..n]);
        }
        for j in 0..n {
            for i in 0..m {
                buf[i] = k[i * n + j] + u[i];
            }
            v[j] = log_c - kernels::log_sum_exp(&buf[..m]);
        }
        trace.us.push(u.clone());
        trace.vs.push(v.clone());
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] = k[i * n + j] + v[j];
        }
        kernels::softmax_in_place(row);
    }
    (out, trace)
}

/// Row-conditional balanced assignment of `cost` (`[m, n]`).
pub fn sinkhorn(cost: &Tensor, p: SinkhornParams) -> diffcore::Result<Tensor> {
    check(cost, p)?;
    let (out, _) = run(cost, p);
    Tensor::new(cost.shape().to_vec(), out)
}

fn check(cost: &Tensor, p: SinkhornParams) -> diffcore::Result<()> {
    if cost.rank() != 2 || cost.rows() == 0 || cost.cols() == 0 {
        return Err(DiffError::ShapeMismatch {
            op: "sinkhorn",
            shapes: vec![cost.shape().to_vec()],
        });
    }
    if !(p.epsilon > 0.0) || p.iterations == 0 {
        return Err(DiffError::InvalidArgument {
            op: "sinkhorn",
            msg: format!(
                "epsilon {} and iterations {} must be positive",
                p.epsilon, p.iterations
            ),
        });
    }
    if !cost.is_finite() {
        return Err(DiffError::NonFinite { op: "sinkhorn" });
    }
    Ok(())
}

impl CustomOp for Sinkhorn {
    fn name(&self) -> &'static str {
        "sinkhorn"
    }

    fn forward(
        &self,
        inputs: &[&Tensor],
    ) -> diffcore::Result<(Tensor, Option<Box<dyn Any + Send + Sync>>)> {
        let cost = inputs[0];
        check(cost, self.0)?;
        let (out, trace) = run(cost, self.0);
        Ok((
            Tensor::new(cost.shape().to_vec(), out)?,
            Some(Box::new(trace)),
        ))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: Option<&(dyn Any + Send + Sync)>,
        grad_out: &Tensor,
    ) -> diffcore::Result<Vec<Option<Tensor>>> {
        let trace =
            saved
                .and_then(|s| s.downcast_ref::<Trace>())
                .ok_or(DiffError::InvalidArgument {
                    op: "sinkhorn",
                    msg: "missing forward trace".into(),
                })?;
        let cost = inputs[0];
        let (m, n) = (cost.rows(), cost.cols());
        let eps = self.0.epsilon;
        let log_c = (m as f64 / n as f64).ln();
        let k: Vec<f64> = cost.data().iter().map(|c| -c / eps).collect();
        let mut gk = vec![0.0; m * n];
        let mut gv = vec![0.0; n];
        for i in 0..m {
            let p = output.row(i);
            let g = grad_out.row(i);
            let dot = kernels::dot(p, g);
            for j in 0..n {
                let gs = p[j] * (g[j] - dot);
                gk[i * n + j] += gs;
                gv[j] += gs;
            }
        }
        let mut gu = vec![0.0; m];
        for t in (0..self.0.iterations).rev() {
            let u = &trace.us[t];
            let v = &trace.vs[t + 1];
            let v_prev = &trace.vs[t];
            // v_j = log c - LSE_i(K_ij + u_i)
            gu.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..m {
                for j in 0..n {
                    let a = (k[i * n + j] + u[i] + v[j] - log_c).exp();
                    let w = a * gv[j];
                    gk[i * n + j] -= w;
                    gu[i] -= w;
                }
            }
            // u_i = -LSE_j(K_ij + v_prev_j)
            gv.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..m {
                for j in 0..n {
                    let r = (k[i * n + j] + v_prev[j] + u[i]).exp();
                    let w = r * gu[i];
                    gk[i * n + j] -= w;
                    gv[j] -= w;
                }
            }
        }
        let gc: Vec<f64> = gk.iter().map(|g| -g / eps).collect();
        Ok(vec![Some(Tensor::new(cost.shape().to_vec(), gc)?)])
    }
}
