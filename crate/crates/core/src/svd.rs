//! One-sided Jacobi SVD for small dense matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Off-diagonal tolerance: a column pair is orthogonal once
/// `|u_p·u_q| ≤ TOL·‖u_p‖‖u_q‖`.
pub const TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 80;

/// `A = U·diag(s)·Vᵀ` with `s` sorted descending, thin factors.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
    pub sweeps: usize,
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.rank() != 2 || a.numel() == 0 {
        return Err(Error::ShapeMismatch {
            op: "svd",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    if a.rows() < a.cols() {
        let t = svd(&a.transpose()?)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
            sweeps: t.sweeps,
        });
    }
    let (m, n) = (a.rows(), a.cols());
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut u, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated || sweeps >= MAX_SWEEPS {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = u
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut ud = vec![0.0; m * n];
    let mut vd = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (dst, &(sigma, src)) in order.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            ud[i * n + dst] = if sigma > 0.0 { u[src][i] / sigma } else { 0.0 };
        }
        for i in 0..n {
            vd[i * n + dst] = v[src][i];
        }
    }
    Ok(Svd {
        u: Tensor::new(&[m, n], ud)?,
        s,
        v: Tensor::new(&[n, n], vd)?,
        sweeps,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Singular values only.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}
