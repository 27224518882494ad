//! Quadratic-loop twin of the clustering path, used as a verification oracle.
//!
//! Written independently of the main path: full sorts instead of partial
//! selection, direct scans instead of density ordering, and an unshifted
//! exponential weighting for the merge.

#![allow(clippy::needless_range_loop)]

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::{ClusterResult, TokenSet};

pub const MAX_ORACLE_TOKENS: usize = 1024;

fn dist<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for i in 0..a.len() {
        let diff = a[i] - b[i];
        s = s + diff * diff;
    }
    s.sqrt()
}

/// `true` when token `j` counts as denser than token `i`.
fn denser<T: Real>(rho: &[T], j: usize, i: usize) -> bool {
    rho[j] > rho[i] || (rho[j] == rho[i] && j < i)
}

/// Brute-force clustering of `ts` (spatial term from `ts.coords`, printed τ
/// weighting, merge weights from `ts.importance`).
pub fn brute_force_oracle<T: Real>(ts: &TokenSet<T>, tau: f64, k: usize, m: usize) -> Result<ClusterResult<T>> {
    let n = ts.len();
    if n > MAX_ORACLE_TOKENS {
        return Err(Error::contract("brute_force_oracle", format!("N = {n} exceeds {MAX_ORACLE_TOKENS}")));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::contract("brute_force_oracle", format!("tau {tau} outside [0, 1]")));
    }
    if n > 1 && (k == 0 || k >= n) {
        return Err(Error::contract("brute_force_oracle", format!("k = {k} invalid for N = {n}")));
    }
    if m == 0 || m > n {
        return Err(Error::contract("brute_force_oracle", format!("m = {m} invalid for N = {n}")));
    }
    let one_minus_tau = T::lit(1.0 - tau);

    let mut d = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d[i][j] = T::one() * dist(ts.tokens.row(i), ts.tokens.row(j))
                    + one_minus_tau * dist(ts.coords.row(i), ts.coords.row(j));
            }
        }
    }

    let mut rho = vec![T::one(); n];
    if n > 1 {
        for i in 0..n {
            let mut others: Vec<(T, usize)> = (0..n).filter(|&j| j != i).map(|j| (d[i][j], j)).collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
            let mut total = T::zero();
            for &(v, _) in others.iter().take(k) {
                total = total + v * v;
            }
            rho[i] = (-(total / T::lit(k as f64))).exp();
        }
    }

    let mut delta = vec![T::zero(); n];
    for i in 0..n {
        let mut best: Option<T> = None;
        for j in 0..n {
            if j != i && denser(&rho, j, i) {
                best = Some(match best {
                    Some(b) if b <= d[i][j] => b,
                    _ => d[i][j],
                });
            }
        }
        delta[i] = match best {
            Some(b) => b,
            None => {
                let mut mx = T::zero();
                for j in 0..n {
                    if j != i && d[i][j] > mx {
                        mx = d[i][j];
                    }
                }
                mx
            }
        };
    }

    let score: Vec<T> = (0..n).map(|i| rho[i] * delta[i]).collect();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut centers: Vec<usize> = ranked[..m].to_vec();
    centers.sort();

    let mut assignment = vec![0usize; n];
    for i in 0..n {
        if let Some(pos) = centers.iter().position(|&c| c == i) {
            assignment[i] = pos;
            continue;
        }
        let mut best = 0;
        for c in 1..m {
            if d[i][centers[c]] < d[i][centers[best]] {
                best = c;
            }
        }
        assignment[i] = best;
    }

    let width = ts.tokens.shape()[1];
    let mut merged = vec![T::zero(); m * width];
    for c in 0..m {
        let mut denom = T::zero();
        for j in 0..n {
            if assignment[j] == c {
                denom = denom + ts.importance.data()[j].exp();
            }
        }
        for j in 0..n {
            if assignment[j] == c {
                let wgt = ts.importance.data()[j].exp() / denom;
                for ch in 0..width {
                    merged[c * width + ch] = merged[c * width + ch] + wgt * ts.tokens.row(j)[ch];
                }
            }
        }
    }

    let flat: Vec<T> = d.into_iter().flatten().collect();
    Ok(ClusterResult {
        distance: Tensor::new(&[n, n], flat)?,
        density: Tensor::new(&[n], rho)?,
        separation: Tensor::new(&[n], delta)?,
        score: Tensor::new(&[n], score)?,
        centers,
        assignment,
        merged: Tensor::new(&[m, width], merged)?,
    })
}
