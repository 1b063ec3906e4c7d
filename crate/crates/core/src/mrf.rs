//! Potts and Ising random fields: local conditionals, systematic-scan Gibbs
//! simulation and pseudo-likelihood estimation of the inverse temperature.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{BinaryMask, LabelMap, LatticeDims, NeighborTable};
use crate::seed;

/// Inverse temperatures are searched and clamped to this interval.
pub const BETA_MAX: f64 = 10.0;
const BETA_TOL: f64 = 1e-4;

/// Sweeps used when a caller does not say otherwise.
pub const DEFAULT_SWEEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrfSpec {
    pub dims: LatticeDims,
    pub k: usize,
    pub beta: f64,
    pub sweeps: usize,
    pub seed: u64,
}

impl MrfSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("K = {} < 2", self.k)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta = {} must be >= 0", self.beta)));
        }
        if self.sweeps == 0 {
            return Err(Error::InvalidArgument("sweeps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Neighbor label histogram at `s`.
fn neighbor_counts(values: &[usize], nbrs: &[usize], counts: &mut [u32]) {
    counts.fill(0);
    for &r in nbrs {
        counts[values[r]] += 1;
    }
}

/// Writes `P(label = k | neighbors)` into `probs`, given the neighbor histogram.
///
/// The energy of label `k` is `beta * (deg - counts[k])`; the common `deg`
/// term cancels in the normalization.
fn conditional_from_counts(counts: &[u32], beta: f64, probs: &mut [f64]) {
    let max = *counts.iter().max().unwrap_or(&0) as f64;
    let mut total = 0.0;
    for (p, &c) in probs.iter_mut().zip(counts) {
        *p = (beta * (c as f64 - max)).exp();
        total += *p;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
}

/// Local conditional of the Potts field at voxel `s` given its 8-neighborhood.
pub fn conditional_distribution(map: &LabelMap, s: usize, k: usize, beta: f64) -> Result<Vec<f64>> {
    if k < map.k() {
        return Err(Error::InvalidArgument(format!(
            "K = {k} smaller than the map's label count {}",
            map.k()
        )));
    }
    let nbrs = crate::lattice::neighbors(s, map.dims())?;
    let mut counts = vec![0; k];
    neighbor_counts(map.values(), &nbrs, &mut counts);
    let mut probs = vec![0.0; k];
    conditional_from_counts(&counts, beta, &mut probs);
    Ok(probs)
}

/// Systematic-scan (raster order) Gibbs sampler for a K-level Potts field.
#[derive(Debug, Clone)]
pub struct PottsGibbs {
    values: Vec<usize>,
    dims: LatticeDims,
    k: usize,
    beta: f64,
    table: NeighborTable,
    rng: ChaCha8Rng,
    counts: Vec<u32>,
    probs: Vec<f64>,
}

impl PottsGibbs {
    /// Starts from an independent uniform labeling drawn from `seed`.
    pub fn new(dims: LatticeDims, k: usize, beta: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let values = (0..dims.len()).map(|_| rng.random_range(0..k)).collect();
        Self {
            values,
            dims,
            k,
            beta,
            table: NeighborTable::new(dims),
            rng,
            counts: vec![0; k],
            probs: vec![0.0; k],
        }
    }

    pub fn sweep(&mut self) {
        for s in 0..self.values.len() {
            neighbor_counts(&self.values, self.table.of(s), &mut self.counts);
            conditional_from_counts(&self.counts, self.beta, &mut self.probs);
            let u: f64 = self.rng.random();
            let mut acc = 0.0;
            let mut label = self.k - 1;
            for (j, &p) in self.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    label = j;
                    break;
                }
            }
            self.values[s] = label;
        }
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn map(&self) -> LabelMap {
        LabelMap::new(self.dims, self.k, self.values.clone()).expect("sampler labels in range")
    }
}

pub fn sample_potts(spec: &MrfSpec) -> Result<LabelMap> {
    spec.validate()?;
    let mut sampler = PottsGibbs::new(spec.dims, spec.k, spec.beta, spec.seed);
    for _ in 0..spec.sweeps {
        sampler.sweep();
    }
    Ok(sampler.map())
}

/// Two-level Potts field, returned as a mask.
pub fn sample_ising(dims: LatticeDims, beta: f64, sweeps: usize, seed: u64) -> Result<BinaryMask> {
    let spec = MrfSpec {
        dims,
        k: 2,
        beta,
        sweeps,
        seed,
    };
    sample_potts(&spec)?.to_mask()
}

/// Per-voxel sufficient statistics of the pseudo-likelihood: the neighbor
/// count of the voxel's own label and the full neighbor histogram.
struct PseudoLikelihood {
    own: Vec<u32>,
    hist: Vec<u32>,
    k: usize,
}

impl PseudoLikelihood {
    fn new(map: &LabelMap, k: usize) -> Self {
        let table = NeighborTable::new(map.dims());
        let n = map.len();
        let mut hist = vec![0; n * k];
        let mut own = Vec::with_capacity(n);
        for s in 0..n {
            let h = &mut hist[s * k..(s + 1) * k];
            neighbor_counts(map.values(), table.of(s), h);
            own.push(h[map.get(s)]);
        }
        Self { own, hist, k }
    }

    fn log_pl(&self, beta: f64) -> f64 {
        let mut total = 0.0;
        for (s, &own) in self.own.iter().enumerate() {
            let h = &self.hist[s * self.k..(s + 1) * self.k];
            let max = *h.iter().max().unwrap();
            let mut ties = 0.0f64;
            let mut rest = 0.0;
            for &c in h {
                if c == max {
                    ties += 1.0;
                } else {
                    rest += (beta * (c as f64 - max as f64)).exp();
                }
            }
            let log_norm = beta * max as f64 + ties.ln() + (rest / ties).ln_1p();
            total += beta * own as f64 - log_norm;
        }
        total
    }
}

/// Log pseudo-likelihood `sum_s log P(map(s) | map(neighbors of s); beta)`.
pub fn log_pseudolikelihood(map: &LabelMap, k: usize, beta: f64) -> f64 {
    PseudoLikelihood::new(map, k.max(map.k())).log_pl(beta)
}

/// Maximum pseudo-likelihood estimate of the inverse temperature on `[0, 10]`.
///
/// The objective is concave in beta, so a golden-section search converges to
/// the unique maximizer or to a clamp boundary. A field with no disagreeing
/// neighbor pair has a monotone objective and returns the upper clamp.
pub fn estimate_beta_pseudolikelihood(map: &LabelMap, k: usize) -> f64 {
    let k = k.max(map.k());
    let table = NeighborTable::new(map.dims());
    if crate::lattice::disagreement_count(map, &table) == 0 {
        return BETA_MAX;
    }
    let pl = PseudoLikelihood::new(map, k);
    let f = |b: f64| pl.log_pl(b);
    let best = golden_section_max(f, 0.0, BETA_MAX, BETA_TOL);
    [0.0, best, BETA_MAX]
        .into_iter()
        .map(|b| (b, f(b)))
        .fold((best, f64::NEG_INFINITY), |acc, (b, v)| if v > acc.1 { (b, v) } else { acc })
        .0
}

/// Mean pseudo-likelihood estimate over several binary fields.
pub fn estimate_beta_mean(masks: &[BinaryMask]) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    masks
        .iter()
        .map(|m| estimate_beta_pseudolikelihood(&m.to_label_map(), 2))
        .sum::<f64>()
        / masks.len() as f64
}

fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    while hi - lo > tol {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        }
    }
    0.5 * (lo + hi)
}
