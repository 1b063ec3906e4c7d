//! Estimation of the group map from observed subject maps.
//!
//! Two algorithms share the per-voxel log-likelihood terms
//!
//! ```text
//! A_s = log(1 - eps)        if Y_i(s) == X(s)      (voxel propagated, H = 0)
//!     = log(eps / (K - 1))  otherwise
//! B_s = log pi[Y_i(s)]                             (voxel replaced, H = 1)
//! ```
//!
//! * Coordinate ascent ([`run_icm`]) alternates hard argmax sweeps over the
//!   masks, the group map and the parameters.
//! * Mean-field variational Bayes ([`run_vb`]) replaces the hard masks with
//!   per-voxel probabilities `q_is = P(H_i(s) = 1)` and climbs the lower bound
//!   `F(X, theta, q)` ([`compute_elbo`]).
//!
//! Partition functions of the Potts and Ising priors do not depend on `X`,
//! `H` or `q`; the objectives here drop them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Model, ModelParams};
use crate::lattice::{BinaryMask, LabelMap, LatticeDims, NeighborTable};
use crate::mrf;
use crate::seed;

pub const PI_FLOOR: f64 = 1e-8;
pub const EPSILON_MIN: f64 = 1e-6;
pub const EPSILON_MAX: f64 = 0.5;

pub const DEFAULT_INITIAL_BETA: f64 = 0.5;

/// Starting noise level when the caller gives no parameters: as noisy as the
/// clamp allows, but never so noisy that a propagated voxel is less than four
/// times as likely to match `X` as to show any one other label.
pub fn default_initial_epsilon(k: usize) -> f64 {
    let other = k.saturating_sub(1) as f64;
    (other / (other + 4.0)).min(EPSILON_MAX)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XUpdate {
    /// In-place raster sweep: later voxels see earlier updates.
    #[default]
    Sequential,
    /// Every voxel sees the previous sweep's neighbors.
    Simultaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub max_iterations: usize,
    /// Relative change of F (VB); ignored by ICM, which stops on zero label changes.
    pub convergence_tol: f64,
    pub estimate_theta: bool,
    pub model: Model,
    pub seed: u64,
    /// Starting parameters; `None` uses uniform `pi`, [`default_initial_epsilon`],
    /// both betas 0.5.
    pub initial_params: Option<ModelParams>,
    /// Adds the Ising neighbor terms of the mask prior to the q update.
    pub q_prior_coupling: bool,
    pub x_update: XUpdate,
    /// Keep a copy of `X` every `k` iterations.
    pub snapshot_every: Option<usize>,
}

impl InferenceOptions {
    pub fn vb(model: Model) -> Self {
        Self {
            max_iterations: 200,
            convergence_tol: 1e-6,
            estimate_theta: true,
            model,
            seed: 0,
            initial_params: None,
            q_prior_coupling: false,
            x_update: XUpdate::Sequential,
            snapshot_every: None,
        }
    }

    pub fn icm(model: Model) -> Self {
        Self {
            max_iterations: 100,
            ..Self::vb(model)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "convergence_tol = {} must be > 0",
                self.convergence_tol
            )));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::InvalidArgument("snapshot interval must be >= 1".into()));
        }
        Ok(())
    }

    fn starting_params(&self, k: usize) -> Result<ModelParams> {
        let mut p = match &self.initial_params {
            Some(p) => {
                if p.k() != k {
                    return Err(Error::DimMismatch(format!(
                        "initial pi has {} labels, data has K = {k}",
                        p.k()
                    )));
                }
                p.validate()?;
                p.clone()
            }
            None => ModelParams::uniform(
                k,
                default_initial_epsilon(k),
                DEFAULT_INITIAL_BETA,
                DEFAULT_INITIAL_BETA,
            )?,
        };
        if self.model == Model::ModelI {
            p.epsilon = 0.0;
        }
        Ok(p)
    }
}

/// Mean-field mask posterior: `q[i][s] = P(H_i(s) = 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    dims: LatticeDims,
    values: Vec<Vec<f64>>,
}

impl VariationalPosterior {
    pub fn new(dims: LatticeDims, values: Vec<Vec<f64>>) -> Result<Self> {
        for q in &values {
            if q.len() != dims.len() {
                return Err(Error::DimMismatch(format!(
                    "{} q values for a {dims} lattice",
                    q.len()
                )));
            }
            if let Some(v) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!("q value {v} outside [0, 1]")));
            }
        }
        Ok(Self { dims, values })
    }

    pub fn constant(dims: LatticeDims, m: usize, value: f64) -> Result<Self> {
        Self::new(dims, vec![vec![value; dims.len()]; m])
    }

    /// Hard masks as degenerate posteriors.
    pub fn from_masks(masks: &[BinaryMask]) -> Result<Self> {
        let dims = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("no masks".into()))?
            .dims();
        Self::new(
            dims,
            masks
                .iter()
                .map(|h| h.values().iter().map(|&v| f64::from(v)).collect())
                .collect(),
        )
    }

    pub fn dims(&self) -> LatticeDims {
        self.dims
    }

    pub fn m(&self) -> usize {
        self.values.len()
    }

    pub fn subject(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn subjects(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// `q >= 0.5` as a hard mask.
    pub fn thresholded(&self, i: usize) -> BinaryMask {
        BinaryMask::new(
            self.dims,
            self.values[i].iter().map(|&q| u8::from(q >= 0.5)).collect(),
        )
        .expect("threshold output is binary")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskEstimate {
    Variational(VariationalPosterior),
    Hard(Vec<BinaryMask>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceState {
    pub x: LabelMap,
    pub masks: MaskEstimate,
    pub params: ModelParams,
    /// F after every VB iteration.
    pub elbo_trace: Vec<f64>,
    /// Joint log-posterior after every ICM sweep.
    pub log_posterior_trace: Vec<f64>,
    pub iteration: usize,
    pub converged: bool,
    pub snapshots: Vec<(usize, LabelMap)>,
}

/// Floored log-probabilities used by every likelihood evaluation.
#[derive(Debug, Clone)]
struct LogLik {
    log_match: f64,
    log_mismatch: f64,
    log_pi: Vec<f64>,
}

impl LogLik {
    fn new(params: &ModelParams, k: usize) -> Self {
        let eps = params.epsilon.clamp(EPSILON_MIN, EPSILON_MAX);
        let floored: Vec<f64> = params.pi.iter().map(|&p| p.max(PI_FLOOR)).collect();
        let total: f64 = floored.iter().sum();
        Self {
            log_match: (1.0 - eps).ln(),
            log_mismatch: (eps / (k - 1) as f64).ln(),
            log_pi: floored.iter().map(|p| (p / total).ln()).collect(),
        }
    }

    #[inline]
    fn a(&self, y: usize, x: usize) -> f64 {
        if y == x {
            self.log_match
        } else {
            self.log_mismatch
        }
    }

    #[inline]
    fn b(&self, y: usize) -> f64 {
        self.log_pi[y]
    }
}

/// Log-likelihood of label `y` under propagation (`A`) and replacement (`B`).
///
/// `pi` is floored at `1e-8` and renormalized, `eps` clamped to `[1e-6, 0.5]`.
pub fn log_lik_terms(y: usize, x: usize, params: &ModelParams, k: usize) -> Result<(f64, f64)> {
    if y >= k || x >= k {
        return Err(Error::LabelOutOfRange { label: y.max(x), k });
    }
    if params.k() != k {
        return Err(Error::DimMismatch(format!("pi has {} labels, K = {k}", params.k())));
    }
    let ll = LogLik::new(params, k);
    Ok((ll.a(y, x), ll.b(y)))
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_subjects(subjects: &[LabelMap], x: &LabelMap) -> Result<()> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("no subject maps".into()));
    }
    for y in subjects {
        if y.dims() != x.dims() {
            return Err(Error::DimMismatch(format!(
                "subject map is {} but X is {}",
                y.dims(),
                x.dims()
            )));
        }
        if y.k() != x.k() {
            return Err(Error::DimMismatch(format!(
                "subject map has K = {} but X has K = {}",
                y.k(),
                x.k()
            )));
        }
    }
    Ok(())
}

/// Independent uniform labels.
pub fn init_random(dims: LatticeDims, k: usize, seed: u64) -> Result<LabelMap> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K = {k} < 2")));
    }
    let mut rng = seed::rng(seed);
    LabelMap::new(dims, k, (0..dims.len()).map(|_| rng.random_range(0..k)).collect())
}

/// Most frequent nonzero subject label per voxel (smallest label on ties),
/// 0 where every subject shows 0.
pub fn init_greedy(subjects: &[LabelMap]) -> Result<LabelMap> {
    let first = subjects
        .first()
        .ok_or_else(|| Error::InvalidArgument("no subject maps".into()))?;
    check_subjects(subjects, first)?;
    let k = first.k();
    let mut counts = vec![0usize; k];
    let values = (0..first.len())
        .map(|s| {
            counts.fill(0);
            for y in subjects {
                counts[y.get(s)] += 1;
            }
            let mut best = 0;
            for label in 1..k {
                if counts[label] > 0 && (best == 0 || counts[label] > counts[best]) {
                    best = label;
                }
            }
            best
        })
        .collect();
    LabelMap::new(first.dims(), k, values)
}

/// One mean-field update of a subject's mask posterior, ignoring the mask prior:
/// `q_s = exp(B_s) / (exp(A_s) + exp(B_s))`.
pub fn vb_update_q(subject: &LabelMap, x: &LabelMap, params: &ModelParams, k: usize) -> Result<Vec<f64>> {
    check_subjects(std::slice::from_ref(subject), x)?;
    let ll = LogLik::new(params, k);
    Ok(update_q_uncoupled(subject, x, &ll))
}

fn update_q_uncoupled(subject: &LabelMap, x: &LabelMap, ll: &LogLik) -> Vec<f64> {
    subject
        .values()
        .iter()
        .zip(x.values())
        .map(|(&y, &xs)| logistic(ll.b(y) - ll.a(y, xs)))
        .collect()
}

/// In-place raster mean-field sweep including the mask prior's neighbor terms:
/// `logit q_s = B_s - A_s - beta_H * sum_{r ~ s} (1 - 2 q_r)`.
pub fn vb_update_q_coupled(
    subject: &LabelMap,
    x: &LabelMap,
    params: &ModelParams,
    q: &mut [f64],
) -> Result<()> {
    check_subjects(std::slice::from_ref(subject), x)?;
    if q.len() != x.len() {
        return Err(Error::DimMismatch("q length differs from lattice".into()));
    }
    let ll = LogLik::new(params, x.k());
    let table = NeighborTable::new(x.dims());
    update_q_coupled(subject, x, &ll, params.beta_h, &table, q);
    Ok(())
}

fn update_q_coupled(
    subject: &LabelMap,
    x: &LabelMap,
    ll: &LogLik,
    beta_h: f64,
    table: &NeighborTable,
    q: &mut [f64],
) {
    for s in 0..q.len() {
        let y = subject.get(s);
        let field: f64 = table.of(s).iter().map(|&r| 1.0 - 2.0 * q[r]).sum();
        q[s] = logistic(ll.b(y) - ll.a(y, x.get(s)) - beta_h * field);
    }
}

/// Shared X sweep: each voxel takes the argmax over labels of
/// `sum_i w_is * A_s(x) - beta_X * sum_{r ~ s} V(x, X_r)`, smallest label on ties.
fn sweep_x(
    subjects: &[LabelMap],
    weights: &[&[f64]],
    x: &LabelMap,
    ll: &LogLik,
    beta_x: f64,
    table: &NeighborTable,
    mode: XUpdate,
) -> (LabelMap, usize) {
    let k = x.k();
    let previous = x.values().to_vec();
    let mut current = previous.clone();
    let mut votes = vec![0.0; k];
    let mut nbr = vec![0u32; k];
    let gain = ll.log_match - ll.log_mismatch;
    let mut changes = 0;
    for s in 0..current.len() {
        votes.fill(0.0);
        let mut base = 0.0;
        for (y, w) in subjects.iter().zip(weights) {
            let w = w[s];
            base += w * ll.log_mismatch;
            votes[y.get(s)] += w;
        }
        nbr.fill(0);
        let source = match mode {
            XUpdate::Sequential => &current,
            XUpdate::Simultaneous => &previous,
        };
        let nbrs = table.of(s);
        for &r in nbrs {
            nbr[source[r]] += 1;
        }
        let deg = nbrs.len() as f64;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for label in 0..k {
            let score = base + votes[label] * gain - beta_x * (deg - nbr[label] as f64);
            if score > best_score {
                best_score = score;
                best = label;
            }
        }
        if best != current[s] {
            changes += 1;
        }
        current[s] = best;
    }
    (
        LabelMap::new(x.dims(), k, current).expect("sweep labels in range"),
        changes,
    )
}

fn propagation_weights(q: &VariationalPosterior) -> Vec<Vec<f64>> {
    q.subjects()
        .iter()
        .map(|qi| qi.iter().map(|&v| 1.0 - v).collect())
        .collect()
}

fn mask_weights(masks: &[BinaryMask]) -> Vec<Vec<f64>> {
    masks
        .iter()
        .map(|h| h.values().iter().map(|&v| f64::from(1 - v)).collect())
        .collect()
}

fn check_posterior(subjects: &[LabelMap], x: &LabelMap, q: &VariationalPosterior) -> Result<()> {
    check_subjects(subjects, x)?;
    if q.dims() != x.dims() || q.m() != subjects.len() {
        return Err(Error::DimMismatch(format!(
            "posterior covers {} subjects on {}, data has {} on {}",
            q.m(),
            q.dims(),
            subjects.len(),
            x.dims()
        )));
    }
    Ok(())
}

fn check_masks(subjects: &[LabelMap], x: &LabelMap, masks: &[BinaryMask]) -> Result<()> {
    check_subjects(subjects, x)?;
    if masks.len() != subjects.len() || masks.iter().any(|h| h.dims() != x.dims()) {
        return Err(Error::DimMismatch("masks do not match subjects".into()));
    }
    Ok(())
}

/// One raster sweep of the group map under the variational mask posterior.
pub fn vb_update_x(
    subjects: &[LabelMap],
    q: &VariationalPosterior,
    x: &LabelMap,
    params: &ModelParams,
) -> Result<LabelMap> {
    vb_update_x_with(subjects, q, x, params, XUpdate::Sequential)
}

pub fn vb_update_x_with(
    subjects: &[LabelMap],
    q: &VariationalPosterior,
    x: &LabelMap,
    params: &ModelParams,
    mode: XUpdate,
) -> Result<LabelMap> {
    check_posterior(subjects, x, q)?;
    let w = propagation_weights(q);
    let refs: Vec<&[f64]> = w.iter().map(|v| v.as_slice()).collect();
    let table = NeighborTable::new(x.dims());
    let ll = LogLik::new(params, x.k());
    Ok(sweep_x(subjects, &refs, x, &ll, params.beta_x, &table, mode).0)
}

/// Closed-form parameter step for VB.
///
/// `pi` and `eps` are posterior means under their Dirichlet(1) and Beta(1, 10)
/// priors with q-weighted counts; the inverse temperatures are pseudo-likelihood
/// fits on `X` and on the thresholded (`q >= 0.5`) masks.
pub fn vb_update_theta(
    subjects: &[LabelMap],
    x: &LabelMap,
    q: &VariationalPosterior,
    model: Model,
) -> Result<ModelParams> {
    check_posterior(subjects, x, q)?;
    let masks: Vec<BinaryMask> = (0..q.m()).map(|i| q.thresholded(i)).collect();
    Ok(theta_from_weights(subjects, x, q.subjects(), &masks, model))
}

fn theta_from_weights(
    subjects: &[LabelMap],
    x: &LabelMap,
    replaced: &[Vec<f64>],
    masks: &[BinaryMask],
    model: Model,
) -> ModelParams {
    let k = x.k();
    let mut counts = vec![0.0; k];
    let mut mismatch = 0.0;
    let mut total = 0.0;
    for (y, qi) in subjects.iter().zip(replaced) {
        for (s, &q) in qi.iter().enumerate() {
            let label = y.get(s);
            counts[label] += q;
            let w = 1.0 - q;
            total += w;
            if label != x.get(s) {
                mismatch += w;
            }
        }
    }
    let mass: f64 = counts.iter().sum();
    let mut pi: Vec<f64> = counts.iter().map(|c| (1.0 + c) / (k as f64 + mass)).collect();
    let drift = 1.0 - pi.iter().sum::<f64>();
    pi[k - 1] += drift;
    let epsilon = match model {
        Model::ModelI => 0.0,
        Model::ModelII if total > 0.0 => {
            ((1.0 + mismatch) / (11.0 + total)).clamp(EPSILON_MIN, EPSILON_MAX)
        }
        Model::ModelII => 1.0 / 11.0,
    };
    ModelParams {
        pi,
        epsilon,
        beta_x: mrf::estimate_beta_pseudolikelihood(x, k),
        beta_h: mrf::estimate_beta_mean(masks),
    }
}

/// Neumaier-compensated running sum.
#[derive(Default)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.total + v;
        if self.total.abs() >= v.abs() {
            self.carry += (self.total - t) + v;
        } else {
            self.carry += (v - t) + self.total;
        }
        self.total = t;
    }

    fn value(&self) -> f64 {
        self.total + self.carry
    }
}

fn binary_entropy(q: f64) -> f64 {
    let mut h = 0.0;
    if q > 0.0 {
        h -= q * q.ln();
    }
    if q < 1.0 {
        h -= (1.0 - q) * (1.0 - q).ln();
    }
    h
}

/// Variational lower bound `F(X, theta, q)` up to additive constants.
///
/// ```text
/// F = sum_i sum_s [(1 - q_is) A_s + q_is B_s] + entropy(q)
///     - beta_X * #disagreeing pairs of X
///     - beta_H * sum_i sum_{(r,s)} E_q[V(H_ir, H_is)]     (only with the mask prior)
/// ```
///
/// The mask-prior term belongs in the bound exactly when the q update uses the
/// coupled form; the uncoupled q update maximizes the bound without it.
pub fn compute_elbo(
    subjects: &[LabelMap],
    x: &LabelMap,
    q: &VariationalPosterior,
    params: &ModelParams,
    include_mask_prior: bool,
) -> Result<f64> {
    check_posterior(subjects, x, q)?;
    let table = NeighborTable::new(x.dims());
    let ll = LogLik::new(params, x.k());
    Ok(elbo(subjects, x, q.subjects(), params, &ll, &table, include_mask_prior))
}

fn elbo(
    subjects: &[LabelMap],
    x: &LabelMap,
    q: &[Vec<f64>],
    params: &ModelParams,
    ll: &LogLik,
    table: &NeighborTable,
    include_mask_prior: bool,
) -> f64 {
    let mut f = Sum::default();
    for (y, qi) in subjects.iter().zip(q) {
        for (s, &qs) in qi.iter().enumerate() {
            let label = y.get(s);
            f.add((1.0 - qs) * ll.a(label, x.get(s)) + qs * ll.b(label));
            f.add(binary_entropy(qs));
        }
        if include_mask_prior && params.beta_h > 0.0 {
            let mut expected = Sum::default();
            for (s, r) in table.cliques() {
                expected.add(qi[s] * (1.0 - qi[r]) + qi[r] * (1.0 - qi[s]));
            }
            f.add(-params.beta_h * expected.value());
        }
    }
    f.add(-params.beta_x * crate::lattice::disagreement_count(x, table) as f64);
    f.value()
}

/// Joint log-posterior `log P(X, H | Y, theta)` up to additive constants.
pub fn joint_log_posterior(
    subjects: &[LabelMap],
    x: &LabelMap,
    masks: &[BinaryMask],
    params: &ModelParams,
) -> Result<f64> {
    check_masks(subjects, x, masks)?;
    let table = NeighborTable::new(x.dims());
    let ll = LogLik::new(params, x.k());
    Ok(log_posterior(subjects, x, masks, params, &ll, &table))
}

fn log_posterior(
    subjects: &[LabelMap],
    x: &LabelMap,
    masks: &[BinaryMask],
    params: &ModelParams,
    ll: &LogLik,
    table: &NeighborTable,
) -> f64 {
    let mut f = Sum::default();
    for (y, h) in subjects.iter().zip(masks) {
        for s in 0..x.len() {
            let label = y.get(s);
            f.add(if h.get(s) == 0 {
                ll.a(label, x.get(s))
            } else {
                ll.b(label)
            });
        }
        f.add(-params.beta_h * crate::lattice::disagreement_count(&h.to_label_map(), table) as f64);
    }
    f.add(-params.beta_x * crate::lattice::disagreement_count(x, table) as f64);
    f.value()
}

/// One raster sweep of a subject's hard mask: each voxel takes the argmax over
/// `h` of `[h == 0] A_s + [h == 1] B_s - beta_H * sum_{r ~ s} V(h, H_r)`, 0 on ties.
pub fn icm_update_h(
    subject: &LabelMap,
    x: &LabelMap,
    params: &ModelParams,
    h_current: &BinaryMask,
) -> Result<BinaryMask> {
    check_masks(std::slice::from_ref(subject), x, std::slice::from_ref(h_current))?;
    let ll = LogLik::new(params, x.k());
    let table = NeighborTable::new(x.dims());
    Ok(sweep_h(subject, x, &ll, params.beta_h, &table, h_current).0)
}

fn sweep_h(
    subject: &LabelMap,
    x: &LabelMap,
    ll: &LogLik,
    beta_h: f64,
    table: &NeighborTable,
    h_current: &BinaryMask,
) -> (BinaryMask, usize) {
    let mut h = h_current.clone();
    let mut changes = 0;
    for s in 0..h.len() {
        let y = subject.get(s);
        let nbrs = table.of(s);
        let ones = nbrs.iter().filter(|&&r| h.get(r) == 1).count() as f64;
        let zeros = nbrs.len() as f64 - ones;
        let keep = ll.a(y, x.get(s)) - beta_h * ones;
        let replace = ll.b(y) - beta_h * zeros;
        let v = u8::from(replace > keep);
        if v != h.get(s) {
            changes += 1;
        }
        h.set(s, v);
    }
    (h, changes)
}

/// One raster sweep of the group map under hard masks.
pub fn icm_update_x(
    subjects: &[LabelMap],
    masks: &[BinaryMask],
    x: &LabelMap,
    params: &ModelParams,
) -> Result<LabelMap> {
    check_masks(subjects, x, masks)?;
    let w = mask_weights(masks);
    let refs: Vec<&[f64]> = w.iter().map(|v| v.as_slice()).collect();
    let table = NeighborTable::new(x.dims());
    let ll = LogLik::new(params, x.k());
    Ok(sweep_x(subjects, &refs, x, &ll, params.beta_x, &table, XUpdate::Sequential).0)
}

/// Parameter step for coordinate ascent: the VB step with hard masks as q.
pub fn icm_update_theta(
    subjects: &[LabelMap],
    x: &LabelMap,
    masks: &[BinaryMask],
    model: Model,
) -> Result<ModelParams> {
    check_masks(subjects, x, masks)?;
    let replaced: Vec<Vec<f64>> = masks
        .iter()
        .map(|h| h.values().iter().map(|&v| f64::from(v)).collect())
        .collect();
    Ok(theta_from_weights(subjects, x, &replaced, masks, model))
}

fn snapshot(options: &InferenceOptions, iteration: usize, x: &LabelMap, out: &mut Vec<(usize, LabelMap)>) {
    if let Some(every) = options.snapshot_every {
        if iteration.is_multiple_of(every) {
            out.push((iteration, x.clone()));
        }
    }
}

/// Mean-field variational Bayes.
///
/// Each iteration updates q for every subject, sweeps X once, refits theta
/// (if enabled) and appends F to the trace. Stops when the relative change of
/// F falls below `convergence_tol` or after `max_iterations`.
pub fn run_vb(subjects: &[LabelMap], x0: &LabelMap, options: &InferenceOptions) -> Result<InferenceState> {
    options.validate()?;
    check_subjects(subjects, x0)?;
    let k = x0.k();
    let dims = x0.dims();
    let table = NeighborTable::new(dims);
    let mut params = options.starting_params(k)?;
    let mut x = x0.clone();
    let mut ll = LogLik::new(&params, k);
    let mut q: Vec<Vec<f64>> = subjects
        .par_iter()
        .map(|y| update_q_uncoupled(y, &x, &ll))
        .collect();
    let mut trace: Vec<f64> = Vec::new();
    let mut snapshots = Vec::new();
    let mut converged = false;
    let mut iteration = 0;

    while iteration < options.max_iterations {
        iteration += 1;
        if options.q_prior_coupling {
            let beta_h = params.beta_h;
            q.par_iter_mut().zip(subjects).for_each(|(qi, y)| {
                update_q_coupled(y, &x, &ll, beta_h, &table, qi);
            });
        } else {
            q = subjects
                .par_iter()
                .map(|y| update_q_uncoupled(y, &x, &ll))
                .collect();
        }
        let w: Vec<Vec<f64>> = q.iter().map(|qi| qi.iter().map(|&v| 1.0 - v).collect()).collect();
        let refs: Vec<&[f64]> = w.iter().map(|v| v.as_slice()).collect();
        x = sweep_x(subjects, &refs, &x, &ll, params.beta_x, &table, options.x_update).0;
        if options.estimate_theta {
            let masks: Vec<BinaryMask> = q
                .iter()
                .map(|qi| {
                    BinaryMask::new(dims, qi.iter().map(|&v| u8::from(v >= 0.5)).collect())
                        .expect("threshold output is binary")
                })
                .collect();
            params = theta_from_weights(subjects, &x, &q, &masks, options.model);
            ll = LogLik::new(&params, k);
        }
        let f = elbo(subjects, &x, &q, &params, &ll, &table, options.q_prior_coupling);
        if !f.is_finite() {
            return Err(Error::Numerical(format!(
                "F = {f} at iteration {iteration} (pi = {:?}, eps = {})",
                params.pi, params.epsilon
            )));
        }
        snapshot(options, iteration, &x, &mut snapshots);
        let done = trace
            .last()
            .is_some_and(|&prev: &f64| (f - prev).abs() < options.convergence_tol * prev.abs().max(1.0));
        trace.push(f);
        if done {
            converged = true;
            break;
        }
    }

    Ok(InferenceState {
        x,
        masks: MaskEstimate::Variational(VariationalPosterior::new(dims, q)?),
        params,
        elbo_trace: trace,
        log_posterior_trace: Vec::new(),
        iteration,
        converged,
        snapshots,
    })
}

/// Coordinate ascent on the joint posterior.
///
/// Masks start at the per-voxel argmax given `x0` (no neighbor terms). Each
/// sweep updates every mask, then X, then theta (if enabled); stops after a
/// sweep that changes no label or after `max_iterations`.
pub fn run_icm(subjects: &[LabelMap], x0: &LabelMap, options: &InferenceOptions) -> Result<InferenceState> {
    options.validate()?;
    check_subjects(subjects, x0)?;
    let k = x0.k();
    let dims = x0.dims();
    let table = NeighborTable::new(dims);
    let mut params = options.starting_params(k)?;
    let mut ll = LogLik::new(&params, k);
    let mut x = x0.clone();
    let mut masks: Vec<BinaryMask> = subjects
        .iter()
        .map(|y| {
            let v = (0..y.len())
                .map(|s| u8::from(ll.b(y.get(s)) > ll.a(y.get(s), x.get(s))))
                .collect();
            BinaryMask::new(dims, v).expect("binary")
        })
        .collect();
    let mut trace = Vec::new();
    let mut snapshots = Vec::new();
    let mut converged = false;
    let mut iteration = 0;

    while iteration < options.max_iterations {
        iteration += 1;
        let beta_h = params.beta_h;
        let swept: Vec<(BinaryMask, usize)> = masks
            .par_iter()
            .zip(subjects)
            .map(|(h, y)| sweep_h(y, &x, &ll, beta_h, &table, h))
            .collect();
        let mut changes = 0;
        masks = swept
            .into_iter()
            .map(|(h, c)| {
                changes += c;
                h
            })
            .collect();
        let w = mask_weights(&masks);
        let refs: Vec<&[f64]> = w.iter().map(|v| v.as_slice()).collect();
        let (next, c) = sweep_x(subjects, &refs, &x, &ll, params.beta_x, &table, options.x_update);
        x = next;
        changes += c;
        if options.estimate_theta {
            let replaced: Vec<Vec<f64>> = masks
                .iter()
                .map(|h| h.values().iter().map(|&v| f64::from(v)).collect())
                .collect();
            params = theta_from_weights(subjects, &x, &replaced, &masks, options.model);
            ll = LogLik::new(&params, k);
        }
        let lp = log_posterior(subjects, &x, &masks, &params, &ll, &table);
        if !lp.is_finite() {
            return Err(Error::Numerical(format!(
                "log-posterior = {lp} at sweep {iteration}"
            )));
        }
        trace.push(lp);
        snapshot(options, iteration, &x, &mut snapshots);
        if changes == 0 {
            converged = true;
            break;
        }
    }

    Ok(InferenceState {
        x,
        masks: MaskEstimate::Hard(masks),
        params,
        elbo_trace: Vec::new(),
        log_posterior_trace: trace,
        iteration,
        converged,
        snapshots,
    })
}
