//! Generative forward models: hyperprior draws, the two subject observation
//! models and assembly of complete synthetic datasets.
//!
//! Mask sign convention: `H(s) = 0` propagates the group label `X(s)` to the
//! subject map; `H(s) = 1` replaces it with a draw from `pi`.
//! [`MaskConvention::PropagateOnOne`] flips this for data produced under the
//! opposite reading.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::text;
use crate::lattice::{BinaryMask, LabelMap, LatticeDims};
use crate::mrf::{self, MrfSpec};
use crate::seed;

/// Noise level used for synthetic Model II data unless overridden.
pub const DEFAULT_EPSILON: f64 = 0.01;

const STREAM_PARAMS: u64 = 1;
const STREAM_X: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_SUBJECT: u64 = 4;
const STREAM_Z: u64 = 10;
const STREAM_N: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    /// Masking only: propagated voxels copy `X(s)` exactly.
    #[serde(rename = "I")]
    ModelI,
    /// Masking plus mislabeling noise with probability `epsilon`.
    #[serde(rename = "II")]
    ModelII,
}

impl Model {
    pub fn has_noise(self) -> bool {
        matches!(self, Model::ModelII)
    }
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Model::ModelI => "I",
            Model::ModelII => "II",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskConvention {
    #[default]
    PropagateOnZero,
    PropagateOnOne,
}

/// Model parameters `(pi, epsilon, beta_x, beta_h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub pi: Vec<f64>,
    pub epsilon: f64,
    pub beta_x: f64,
    pub beta_h: f64,
}

impl ModelParams {
    pub fn new(pi: Vec<f64>, epsilon: f64, beta_x: f64, beta_h: f64) -> Result<Self> {
        let p = Self {
            pi,
            epsilon,
            beta_x,
            beta_h,
        };
        p.validate()?;
        Ok(p)
    }

    /// Uniform `pi` over `k` labels with the given scalars.
    pub fn uniform(k: usize, epsilon: f64, beta_x: f64, beta_h: f64) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k], epsilon, beta_x, beta_h)
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pi.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "pi has {} entries; need K >= 2",
                self.pi.len()
            )));
        }
        if self.pi.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("pi has negative entries: {:?}", self.pi)));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("pi sums to {total}, not 1")));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon = {} outside [0, 1)",
                self.epsilon
            )));
        }
        for (name, b) in [("beta_x", self.beta_x), ("beta_h", self.beta_h)] {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} = {b} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Draws `pi ~ Dirichlet(1)`, `epsilon ~ Beta(1, 10)`, `beta_x, beta_h ~ U(0, 1)`.
pub fn sample_params(k: usize, seed: u64) -> Result<ModelParams> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K = {k} < 2")));
    }
    let mut rng = seed::rng(seed);
    // Dirichlet(1, ..., 1) as normalized unit exponentials.
    let gammas: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = gammas.iter().sum();
    let mut pi: Vec<f64> = gammas.iter().map(|g| g / total).collect();
    // Absorb rounding so the simplex constraint holds to the last bit we can.
    let drift: f64 = 1.0 - pi.iter().sum::<f64>();
    pi[k - 1] += drift;
    let epsilon: f64 = Beta::new(1.0, 10.0).expect("valid beta shape").sample(&mut rng);
    let epsilon = epsilon.min(1.0 - f64::EPSILON);
    let beta_x = rng.random::<f64>();
    let beta_h = rng.random::<f64>();
    ModelParams::new(pi, epsilon, beta_x, beta_h)
}

fn check_shapes(x: &LabelMap, h: &BinaryMask, params: &ModelParams) -> Result<()> {
    if x.dims() != h.dims() {
        return Err(Error::DimMismatch(format!("X is {} but H is {}", x.dims(), h.dims())));
    }
    if params.k() != x.k() {
        return Err(Error::DimMismatch(format!(
            "pi has {} labels but X has K = {}",
            params.k(),
            x.k()
        )));
    }
    params.validate()
}

fn draw_category(pi: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    pi.iter().rposition(|&p| p > 0.0).unwrap_or(pi.len() - 1)
}

/// Per-voxel observation with optional mislabeling.
///
/// One uniform from the Z stream and one from the N stream are consumed at
/// every voxel whatever the mask says, so the draws line up across models
/// and noise levels.
fn generate_subject(
    x: &LabelMap,
    h: &BinaryMask,
    params: &ModelParams,
    epsilon: f64,
    seed: u64,
) -> Result<LabelMap> {
    check_shapes(x, h, params)?;
    let k = x.k();
    let mut z_rng = seed::rng_for(seed, &[STREAM_Z]);
    let mut n_rng = seed::rng_for(seed, &[STREAM_N]);
    let values = (0..x.len())
        .map(|s| {
            let uz: f64 = z_rng.random();
            let un: f64 = n_rng.random();
            if h.get(s) == 0 {
                let z = if uz < 1.0 - epsilon {
                    0
                } else {
                    let j = ((uz - (1.0 - epsilon)) / epsilon * (k - 1) as f64) as usize;
                    1 + j.min(k - 2)
                };
                (x.get(s) + z) % k
            } else {
                draw_category(&params.pi, un)
            }
        })
        .collect();
    LabelMap::new(x.dims(), k, values)
}

/// Model II: `Y(s) = (X(s) + Z(s)) mod K` where `H(s) = 0`, else `Y(s) ~ pi`.
pub fn generate_subject_model2(
    x: &LabelMap,
    h: &BinaryMask,
    params: &ModelParams,
    seed: u64,
) -> Result<LabelMap> {
    generate_subject(x, h, params, params.epsilon, seed)
}

/// Model I: `Y(s) = X(s)` where `H(s) = 0`, else `Y(s) ~ pi`.
pub fn generate_subject_model1(
    x: &LabelMap,
    h: &BinaryMask,
    params: &ModelParams,
    seed: u64,
) -> Result<LabelMap> {
    generate_subject(x, h, params, 0.0, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: LabelMap,
    pub masks: Vec<BinaryMask>,
    pub subjects: Vec<LabelMap>,
    pub params: ModelParams,
    pub model: Model,
    pub seed: u64,
    pub convention: MaskConvention,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.subjects.len()
    }

    pub fn k(&self) -> usize {
        self.x.k()
    }

    pub fn dims(&self) -> LatticeDims {
        self.x.dims()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() || self.subjects.len() != self.masks.len() {
            return Err(Error::DimMismatch(format!(
                "{} subjects and {} masks",
                self.subjects.len(),
                self.masks.len()
            )));
        }
        let dims = self.dims();
        for (y, h) in self.subjects.iter().zip(&self.masks) {
            if y.dims() != dims || h.dims() != dims || y.k() != self.k() {
                return Err(Error::DimMismatch("subject maps disagree with X".into()));
            }
        }
        self.params.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub m: usize,
    pub k: usize,
    pub dims: LatticeDims,
    pub model: Model,
    pub sweeps: usize,
    pub seed: u64,
    /// Noise level for Model II; `None` keeps the Beta(1, 10) draw.
    pub epsilon: Option<f64>,
    pub convention: MaskConvention,
}

impl GenerateConfig {
    pub fn new(m: usize, k: usize, dims: LatticeDims, model: Model, seed: u64) -> Self {
        Self {
            m,
            k,
            dims,
            model,
            sweeps: mrf::DEFAULT_SWEEPS,
            seed,
            epsilon: Some(DEFAULT_EPSILON),
            convention: MaskConvention::default(),
        }
    }
}

/// Draws parameters, the group map, masks and subject maps from one root seed.
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    if cfg.m == 0 {
        return Err(Error::InvalidArgument("M must be >= 1".into()));
    }
    let mut params = sample_params(cfg.k, seed::derive(cfg.seed, &[STREAM_PARAMS]))?;
    params.epsilon = match cfg.model {
        Model::ModelI => 0.0,
        Model::ModelII => match cfg.epsilon {
            Some(e) => e,
            None => params.epsilon,
        },
    };
    params.validate()?;
    let x = mrf::sample_potts(&MrfSpec {
        dims: cfg.dims,
        k: cfg.k,
        beta: params.beta_x,
        sweeps: cfg.sweeps,
        seed: seed::derive(cfg.seed, &[STREAM_X]),
    })?;
    let pairs = (0..cfg.m)
        .into_par_iter()
        .map(|i| {
            let h = mrf::sample_ising(
                cfg.dims,
                params.beta_h,
                cfg.sweeps,
                seed::derive(cfg.seed, &[STREAM_MASK, i as u64]),
            )?;
            let propagate = match cfg.convention {
                MaskConvention::PropagateOnZero => h.clone(),
                MaskConvention::PropagateOnOne => h.inverted(),
            };
            let sub_seed = seed::derive(cfg.seed, &[STREAM_SUBJECT, i as u64]);
            let y = match cfg.model {
                Model::ModelI => generate_subject_model1(&x, &propagate, &params, sub_seed)?,
                Model::ModelII => generate_subject_model2(&x, &propagate, &params, sub_seed)?,
            };
            Ok((h, y))
        })
        .collect::<Result<Vec<_>>>()?;
    let (masks, subjects) = pairs.into_iter().unzip();
    Ok(Dataset {
        x,
        masks,
        subjects,
        params,
        model: cfg.model,
        seed: cfg.seed,
        convention: cfg.convention,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "K")]
    k: usize,
    dims: LatticeDims,
    model: Model,
    seed: u64,
    pi: Vec<f64>,
    epsilon: f64,
    beta_x: f64,
    beta_h: f64,
    #[serde(default)]
    mask_convention: MaskConvention,
}

/// Writes `manifest.json`, `X.map`, `H_<i>.map` and `Y_<i>.map` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        m: ds.m(),
        k: ds.k(),
        dims: ds.dims(),
        model: ds.model,
        seed: ds.seed,
        pi: ds.params.pi.clone(),
        epsilon: ds.params.epsilon,
        beta_x: ds.params.beta_x,
        beta_h: ds.params.beta_h,
        mask_convention: ds.convention,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    text::write_label_map(&dir.join("X.map"), &ds.x)?;
    for (i, (h, y)) in ds.masks.iter().zip(&ds.subjects).enumerate() {
        text::write_mask(&dir.join(format!("H_{i}.map")), h)?;
        text::write_label_map(&dir.join(format!("Y_{i}.map")), y)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&raw)?;
    let x = text::read_label_map(&dir.join("X.map"))?;
    let mut masks = Vec::with_capacity(manifest.m);
    let mut subjects = Vec::with_capacity(manifest.m);
    for i in 0..manifest.m {
        masks.push(text::read_mask(&dir.join(format!("H_{i}.map")))?);
        subjects.push(text::read_label_map(&dir.join(format!("Y_{i}.map")))?);
    }
    let ds = Dataset {
        x,
        masks,
        subjects,
        params: ModelParams {
            pi: manifest.pi,
            epsilon: manifest.epsilon,
            beta_x: manifest.beta_x,
            beta_h: manifest.beta_h,
        },
        model: manifest.model,
        seed: manifest.seed,
        convention: manifest.mask_convention,
    };
    if ds.k() != manifest.k || ds.dims() != manifest.dims {
        return Err(Error::parse(
            path.display().to_string(),
            "manifest disagrees with X.map",
        ));
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(r: usize, c: usize) -> LatticeDims {
        LatticeDims::new(r, c).unwrap()
    }

    fn random_map(d: LatticeDims, k: usize, seed: u64) -> LabelMap {
        let mut rng = seed::rng(seed);
        LabelMap::new(d, k, (0..d.len()).map(|_| rng.random_range(0..k)).collect()).unwrap()
    }

    #[test]
    fn params_on_simplex() {
        for s in 0..20 {
            let p = sample_params(2, s).unwrap();
            assert_eq!(p.pi.len(), 2);
            assert!(p.pi.iter().all(|&v| v >= 0.0));
            assert!((p.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(sample_params(1, 0).is_err());
    }

    #[test]
    fn hyperprior_means() {
        let n = 10_000;
        let (mut eps, mut bx) = (0.0, 0.0);
        for s in 0..n {
            let p = sample_params(3, s).unwrap();
            eps += p.epsilon;
            bx += p.beta_x;
        }
        assert!((eps / n as f64 - 1.0 / 11.0).abs() <= 0.01);
        assert!((bx / n as f64 - 0.5).abs() <= 0.01);
    }

    #[test]
    fn noiseless_propagation_copies_x() {
        let d = dims(10, 10);
        let x = random_map(d, 4, 1);
        let p = ModelParams::uniform(4, 0.0, 0.5, 0.5).unwrap();
        let h = BinaryMask::zeros(d);
        assert_eq!(generate_subject_model2(&x, &h, &p, 3).unwrap(), x);
        assert_eq!(generate_subject_model1(&x, &h, &p, 3).unwrap(), x);
    }

    #[test]
    fn degenerate_pi_fills_masked_voxels() {
        let d = dims(6, 6);
        let x = random_map(d, 5, 2);
        let p = ModelParams::new(vec![0.0, 0.0, 0.0, 0.0, 1.0], 0.1, 0.5, 0.5).unwrap();
        let y = generate_subject_model2(&x, &BinaryMask::ones(d), &p, 4).unwrap();
        assert!(y.values().iter().all(|&v| v == 4));
    }

    #[test]
    fn mislabel_rate_matches_epsilon() {
        let d = dims(64, 64);
        let x = random_map(d, 10, 5);
        let p = ModelParams::uniform(10, 0.01, 0.5, 0.5).unwrap();
        let y = generate_subject_model2(&x, &BinaryMask::zeros(d), &p, 6).unwrap();
        let diff = x.values().iter().zip(y.values()).filter(|(a, b)| a != b).count();
        assert!((diff as f64 / d.len() as f64 - 0.01).abs() <= 0.01);
    }

    #[test]
    fn model1_masked_voxels_follow_pi() {
        let d = dims(64, 64);
        let x = random_map(d, 5, 7);
        let p = ModelParams::uniform(5, 0.0, 0.5, 0.5).unwrap();
        let y = generate_subject_model1(&x, &BinaryMask::ones(d), &p, 8).unwrap();
        let mut freq = [0usize; 5];
        for &v in y.values() {
            freq[v] += 1;
        }
        for f in freq {
            assert!((f as f64 / d.len() as f64 - 0.2).abs() <= 0.05);
        }
    }

    #[test]
    fn single_voxel_deterministic_pi() {
        let d = dims(1, 1);
        let x = LabelMap::new(d, 2, vec![1]).unwrap();
        let p = ModelParams::new(vec![1.0, 0.0], 0.0, 0.0, 0.0).unwrap();
        let y = generate_subject_model1(&x, &BinaryMask::ones(d), &p, 0).unwrap();
        assert_eq!(y.values(), &[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = random_map(dims(3, 3), 3, 0);
        let p = ModelParams::uniform(3, 0.1, 0.5, 0.5).unwrap();
        assert!(generate_subject_model2(&x, &BinaryMask::zeros(dims(3, 4)), &p, 0).is_err());
        let p2 = ModelParams::uniform(4, 0.1, 0.5, 0.5).unwrap();
        assert!(generate_subject_model2(&x, &BinaryMask::zeros(dims(3, 3)), &p2, 0).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(vec![0.5, 0.6], 0.1, 0.1, 0.1).is_err());
        assert!(ModelParams::new(vec![0.5, 0.5], 1.0, 0.1, 0.1).is_err());
        assert!(ModelParams::new(vec![0.5, 0.5], 0.1, -0.1, 0.1).is_err());
        assert!(ModelParams::new(vec![1.0], 0.1, 0.1, 0.1).is_err());
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let cfg = GenerateConfig::new(10, 2, dims(16, 16), Model::ModelI, 42);
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.masks.len(), 10);
        assert_eq!(ds.subjects.len(), 10);
        ds.validate().unwrap();
        assert_eq!(ds, generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn model2_without_noise_equals_model1() {
        let d = dims(20, 20);
        let mut cfg = GenerateConfig::new(5, 6, d, Model::ModelII, 9);
        cfg.epsilon = Some(0.0);
        let ii = generate_dataset(&cfg).unwrap();
        cfg.model = Model::ModelI;
        let i = generate_dataset(&cfg).unwrap();
        assert_eq!(ii.x, i.x);
        assert_eq!(ii.masks, i.masks);
        assert_eq!(ii.subjects, i.subjects);
    }

    #[test]
    fn all_grid_cells_produce_valid_datasets() {
        for m in [10, 20, 40] {
            for k in [2, 5, 10] {
                for model in [Model::ModelI, Model::ModelII] {
                    let mut cfg = GenerateConfig::new(m, k, dims(8, 8), model, (m * k) as u64);
                    cfg.sweeps = 5;
                    let ds = generate_dataset(&cfg).unwrap();
                    ds.validate().unwrap();
                    assert!(ds.subjects.iter().all(|y| y.values().iter().all(|&v| v < k)));
                }
            }
        }
    }

    #[test]
    fn table_convention_inverts_propagation() {
        let d = dims(12, 12);
        let mut cfg = GenerateConfig::new(3, 4, d, Model::ModelI, 5);
        cfg.sweeps = 10;
        cfg.convention = MaskConvention::PropagateOnOne;
        let ds = generate_dataset(&cfg).unwrap();
        for (h, y) in ds.masks.iter().zip(&ds.subjects) {
            for s in 0..d.len() {
                if h.get(s) == 1 {
                    assert_eq!(y.get(s), ds.x.get(s));
                }
            }
        }
    }

    #[test]
    fn dataset_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GenerateConfig::new(3, 5, dims(7, 9), Model::ModelII, 77);
        cfg.sweeps = 5;
        let ds = generate_dataset(&cfg).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
