//! Exhaustive-enumeration oracles for tiny lattices, written from the model
//! definition without touching the library's objective code.

#![allow(dead_code)]

use mrfmap::{LabelMap, LatticeDims, ModelParams};

pub fn grid_neighbors(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            for r2 in 0..rows {
                for c2 in 0..cols {
                    let (dr, dc) = (r.abs_diff(r2), c.abs_diff(c2));
                    if (dr, dc) != (0, 0) && dr <= 1 && dc <= 1 {
                        out[r * cols + c].push(r2 * cols + c2);
                    }
                }
            }
        }
    }
    out
}

/// Unordered neighbor pairs whose labels differ.
pub fn disagreements(values: &[usize], nbrs: &[Vec<usize>]) -> usize {
    let mut n = 0;
    for (s, list) in nbrs.iter().enumerate() {
        for &r in list {
            if r > s && values[r] != values[s] {
                n += 1;
            }
        }
    }
    n
}

/// Every labeling of `n` sites with `k` labels, first site fastest.
pub fn all_labelings(n: usize, k: usize) -> Vec<Vec<usize>> {
    let total = k.pow(n as u32);
    (0..total)
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let v = code % k;
                    code /= k;
                    v
                })
                .collect()
        })
        .collect()
}

/// Unnormalized log P(X, H | Y, theta): likelihood plus both MRF energies.
pub fn joint_log(ys: &[Vec<usize>], x: &[usize], hs: &[Vec<usize>], p: &ModelParams, nbrs: &[Vec<usize>]) -> f64 {
    let k = p.pi.len();
    let mut total = 0.0;
    for (y, h) in ys.iter().zip(hs) {
        for s in 0..x.len() {
            total += if h[s] == 0 {
                if y[s] == x[s] {
                    (1.0 - p.epsilon).ln()
                } else {
                    (p.epsilon / (k - 1) as f64).ln()
                }
            } else {
                p.pi[y[s]].ln()
            };
        }
        total -= p.beta_h * disagreements(h, nbrs) as f64;
    }
    total - p.beta_x * disagreements(x, nbrs) as f64
}

pub struct Enumeration {
    pub joint_map_x: Vec<usize>,
    pub joint_map_h: Vec<Vec<usize>>,
    pub joint_map_value: f64,
    /// argmax_X of sum_H P(X, H | Y, theta).
    pub marginal_map_x: Vec<usize>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn enumerate(ys: &[Vec<usize>], p: &ModelParams, rows: usize, cols: usize) -> Enumeration {
    let n = rows * cols;
    let k = p.pi.len();
    let nbrs = grid_neighbors(rows, cols);
    let xs = all_labelings(n, k);
    let masks = all_labelings(n, 2);
    let mut best = (f64::NEG_INFINITY, Vec::new(), Vec::new());
    let mut best_marginal = (f64::NEG_INFINITY, Vec::new());
    for x in &xs {
        // Subjects' masks are independent given X, so the sum factorizes.
        let mut marginal = -p.beta_x * disagreements(x, &nbrs) as f64;
        let mut hs_best = Vec::new();
        for y in ys {
            let vals: Vec<f64> = masks
                .iter()
                .map(|h| joint_log(std::slice::from_ref(y), x, std::slice::from_ref(h), &ModelParams { beta_x: 0.0, ..p.clone() }, &nbrs))
                .collect();
            marginal += log_sum_exp(&vals);
            let (i, _) = vals
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            hs_best.push(masks[i].clone());
        }
        let value = joint_log(ys, x, &hs_best, p, &nbrs);
        if value > best.0 {
            best = (value, x.clone(), hs_best);
        }
        if marginal > best_marginal.0 {
            best_marginal = (marginal, x.clone());
        }
    }
    Enumeration {
        joint_map_x: best.1,
        joint_map_h: best.2,
        joint_map_value: best.0,
        marginal_map_x: best_marginal.1,
    }
}

/// Exact P(H_i(s) = 1 | Y, X, theta) for every subject and site.
pub fn mask_marginals(ys: &[Vec<usize>], x: &[usize], p: &ModelParams, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let n = rows * cols;
    let nbrs = grid_neighbors(rows, cols);
    let masks = all_labelings(n, 2);
    let no_x = ModelParams { beta_x: 0.0, ..p.clone() };
    ys.iter()
        .map(|y| {
            let logs: Vec<f64> = masks
                .iter()
                .map(|h| joint_log(std::slice::from_ref(y), x, std::slice::from_ref(h), &no_x, &nbrs))
                .collect();
            let z = log_sum_exp(&logs);
            (0..n)
                .map(|s| {
                    masks
                        .iter()
                        .zip(&logs)
                        .filter(|(h, _)| h[s] == 1)
                        .map(|(_, l)| (l - z).exp())
                        .sum()
                })
                .collect()
        })
        .collect()
}

pub fn to_map(values: &[usize], rows: usize, cols: usize, k: usize) -> LabelMap {
    LabelMap::new(LatticeDims::new(rows, cols).unwrap(), k, values.to_vec()).unwrap()
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
