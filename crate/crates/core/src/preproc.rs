//! Component-level preprocessing that turns per-subject decompositions into
//! subject label maps: subject screening, dimension reduction, component
//! distances, clustering and activation thresholding.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::lattice::text::{parse_real_grid, real_grid_to_string};
use crate::lattice::{BinaryMask, LabelMap, LatticeDims};

/// Default width of the IMED Gaussian, in pixels.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// A `T x V` data matrix: one row per time point, one column per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    inner: DMatrix<f64>,
}

impl DataMatrix {
    /// Builds from row-major values.
    pub fn from_rows(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDims { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        check_finite(values)?;
        Ok(Self {
            inner: DMatrix::from_row_slice(rows, cols, values),
        })
    }

    pub fn from_matrix(inner: DMatrix<f64>) -> Result<Self> {
        if inner.nrows() == 0 || inner.ncols() == 0 {
            return Err(Error::InvalidDims {
                rows: inner.nrows(),
                cols: inner.ncols(),
            });
        }
        check_finite(inner.as_slice())?;
        Ok(Self { inner })
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.inner[(r, c)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::InvalidArgument(format!("non-finite entry {v}"))),
        None => Ok(()),
    }
}

/// One decomposed component: a spatial map and its time course.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub spatial_map: Vec<f64>,
    pub time_course: Vec<f64>,
    pub subject_id: usize,
}

impl Component {
    pub fn new(spatial_map: Vec<f64>, time_course: Vec<f64>, subject_id: usize) -> Result<Self> {
        check_finite(&spatial_map)?;
        check_finite(&time_course)?;
        Ok(Self {
            spatial_map,
            time_course,
            subject_id,
        })
    }
}

/// Symmetric, non-negative, zero-diagonal `n x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::DimMismatch(format!(
                "{} entries for a {n}x{n} distance matrix",
                values.len()
            )));
        }
        check_finite(&values)?;
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::InvalidArgument(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let (a, b) = (values[i * n + j], values[j * n + i]);
                if a < 0.0 || (a - b).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "entries ({i},{j}) = {a} and ({j},{i}) = {b} are not a distance"
                    )));
                }
            }
        }
        Ok(Self { n, values })
    }

    /// Fills the upper triangle from `f(i, j)` and mirrors it.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j)?;
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        Self::new(n, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn column_centered(d: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = d.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// RV coefficient between two subjects' data matrices.
///
/// With `Z = D D^T` on column-centered data, returns
/// `tr(Z_i Z_j) / sqrt(tr(Z_i^2) tr(Z_j^2))`. Both matrices must have the same
/// number of rows.
pub fn rv_coefficient(di: &DataMatrix, dj: &DataMatrix) -> Result<f64> {
    if di.rows() != dj.rows() {
        return Err(Error::DimMismatch(format!(
            "RV needs equal time points, got {} and {}",
            di.rows(),
            dj.rows()
        )));
    }
    let zi = {
        let c = column_centered(&di.inner);
        &c * c.transpose()
    };
    let zj = {
        let c = column_centered(&dj.inner);
        &c * c.transpose()
    };
    let cross = zi.dot(&zj);
    let ni = zi.norm_squared();
    let nj = zj.norm_squared();
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::Numerical("RV undefined for a zero matrix after centering".into()));
    }
    Ok((cross / (ni * nj).sqrt()).clamp(0.0, 1.0))
}

/// `1 - RV` between every pair of subjects.
pub fn rv_distance_matrix(subjects: &[DataMatrix]) -> Result<DistanceMatrix> {
    DistanceMatrix::from_fn(subjects.len(), |i, j| {
        Ok(1.0 - rv_coefficient(&subjects[i], &subjects[j])?)
    })
}

/// Indices (ascending) whose mean distance to the others does not exceed the
/// grand mean by more than one population standard deviation.
pub fn exclude_outliers(dist: &DistanceMatrix) -> Vec<usize> {
    let n = dist.n();
    if n < 2 {
        return (0..n).collect();
    }
    let means: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| dist.get(i, j)).sum::<f64>() / (n - 1) as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / n as f64;
    let std = (means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / n as f64).sqrt();
    let cutoff = grand + std + 1e-12 * grand.abs().max(1.0);
    (0..n).filter(|&i| means[i] <= cutoff).collect()
}

/// Reduces the time dimension by PCA, keeping the fewest components whose
/// cumulative variance share reaches `cpv`, and whitens the retained scores
/// to unit variance across voxels.
pub fn pca_cpv_reduce(d: &DataMatrix, cpv: f64) -> Result<DataMatrix> {
    if !(cpv > 0.0 && cpv <= 1.0) {
        return Err(Error::InvalidArgument(format!("cpv = {cpv} outside (0, 1]")));
    }
    let v = d.cols();
    let mut centered = d.inner.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let energy: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = energy.iter().sum();
    let scale = d.inner.norm_squared().max(f64::MIN_POSITIVE);
    if total <= 1e-24 * scale {
        return Err(Error::Numerical("PCA of a rank-0 matrix".into()));
    }
    let mut keep = 0;
    let mut cumulative = 0.0;
    for e in &energy {
        keep += 1;
        cumulative += e / total;
        if cumulative >= cpv - 1e-9 {
            break;
        }
    }
    // Whitened scores: row j of sigma_j * v_j^T rescaled to unit variance.
    let norm = (v.max(2) - 1) as f64;
    let mut out = DMatrix::zeros(keep, v);
    for (r, &i) in order.iter().take(keep).enumerate() {
        for c in 0..v {
            out[(r, c)] = v_t[(i, c)] * norm.sqrt();
        }
    }
    DataMatrix::from_matrix(out)
}

fn gaussian_axis(len: usize, sigma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(len, len, |a, b| {
        let t = a as f64 - b as f64;
        (-t * t / (2.0 * sigma * sigma)).exp()
    })
}

/// Divides by the largest magnitude; an all-zero image is left as is.
fn max_normalized(x: &[f64]) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|v| v / m).collect()
}

fn imed_check(x: &[f64], y: &[f64], dims: LatticeDims, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma = {sigma} must be > 0")));
    }
    if x.len() != dims.len() || y.len() != dims.len() {
        return Err(Error::DimMismatch(format!(
            "images of {} and {} pixels on a {dims} lattice",
            x.len(),
            y.len()
        )));
    }
    check_finite(x)?;
    check_finite(y)?;
    let xn = max_normalized(x);
    let yn = max_normalized(y);
    Ok(xn.iter().zip(&yn).map(|(a, b)| a - b).collect())
}

/// Image Euclidean distance `d^T G d / N` between max-normalized images,
/// `g_ij = exp(-|i - j|^2 / 2 sigma^2) / (2 pi sigma^2)`.
///
/// `G` factors into row and column kernels, so the quadratic form is
/// evaluated as a separable filtering of `d` without building `G`.
pub fn imed(x: &[f64], y: &[f64], dims: LatticeDims, sigma: f64) -> Result<f64> {
    let d = imed_check(x, y, dims, sigma)?;
    let dm = DMatrix::from_row_slice(dims.rows, dims.cols, &d);
    let filtered = gaussian_axis(dims.rows, sigma) * &dm * gaussian_axis(dims.cols, sigma);
    let form = dm.dot(&filtered) / (2.0 * std::f64::consts::PI * sigma * sigma);
    Ok(form.max(0.0) / dims.len() as f64)
}

/// IMED via the explicit `N x N` weight matrix.
pub fn imed_dense(x: &[f64], y: &[f64], dims: LatticeDims, sigma: f64) -> Result<f64> {
    let d = imed_check(x, y, dims, sigma)?;
    let n = dims.len();
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let mut total = 0.0;
    for i in 0..n {
        let (ri, ci) = dims.coords(i);
        for j in 0..n {
            let (rj, cj) = dims.coords(j);
            let dr = ri as f64 - rj as f64;
            let dc = ci as f64 - cj as f64;
            total += d[i] * d[j] * norm * (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
        }
    }
    Ok(total.max(0.0) / n as f64)
}

/// Dynamic time warping distance with absolute-difference local cost and
/// steps (1,0), (0,1), (1,1).
pub fn dtw(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("dtw of an empty series".into()));
    }
    check_finite(x)?;
    check_finite(y)?;
    let m = y.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &xi in x {
        cur[0] = f64::INFINITY;
        for (j, &yj) in y.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = (xi - yj).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
        prev[0] = f64::INFINITY;
    }
    Ok(prev[m])
}

/// Divisors that bring IMED and DTW values onto a common `[0, 1]` scale.
///
/// Over a set of components the smallest pairwise value is the zero
/// self-distance, so min-max scaling reduces to division by the maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceScales {
    pub imed_max: f64,
    pub dtw_max: f64,
}

impl DistanceScales {
    fn scale(v: f64, max: f64) -> f64 {
        if max > 0.0 {
            (v / max).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Average of the scaled spatial (IMED) and temporal (DTW) distances.
pub fn combined_distance(
    c1: &Component,
    c2: &Component,
    dims: LatticeDims,
    sigma: f64,
    scales: &DistanceScales,
) -> Result<f64> {
    let s = imed(&c1.spatial_map, &c2.spatial_map, dims, sigma)?;
    let t = dtw(&c1.time_course, &c2.time_course)?;
    Ok(0.5 * (DistanceScales::scale(s, scales.imed_max) + DistanceScales::scale(t, scales.dtw_max)))
}

/// Pairwise IMED and DTW over a component set and the resulting scales.
pub fn pairwise_distances(
    components: &[Component],
    dims: LatticeDims,
    sigma: f64,
) -> Result<(DistanceMatrix, DistanceMatrix, DistanceScales)> {
    use rayon::prelude::*;
    let n = components.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (&components[i], &components[j]);
            Ok((
                imed(&a.spatial_map, &b.spatial_map, dims, sigma)?,
                dtw(&a.time_course, &b.time_course)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut spatial = vec![0.0; n * n];
    let mut temporal = vec![0.0; n * n];
    for (&(i, j), &(s, t)) in pairs.iter().zip(&values) {
        spatial[i * n + j] = s;
        spatial[j * n + i] = s;
        temporal[i * n + j] = t;
        temporal[j * n + i] = t;
    }
    let scales = DistanceScales {
        imed_max: values.iter().map(|v| v.0).fold(0.0, f64::max),
        dtw_max: values.iter().map(|v| v.1).fold(0.0, f64::max),
    };
    Ok((
        DistanceMatrix::new(n, spatial)?,
        DistanceMatrix::new(n, temporal)?,
        scales,
    ))
}

/// Combined distance between every pair of components.
pub fn combined_distance_matrix(components: &[Component], dims: LatticeDims, sigma: f64) -> Result<DistanceMatrix> {
    let (spatial, temporal, scales) = pairwise_distances(components, dims, sigma)?;
    let values = spatial
        .values()
        .iter()
        .zip(temporal.values())
        .map(|(&s, &t)| {
            0.5 * (DistanceScales::scale(s, scales.imed_max) + DistanceScales::scale(t, scales.dtw_max))
        })
        .collect();
    DistanceMatrix::new(components.len(), values)
}

/// Agglomerative clustering with average linkage.
///
/// Returns one cluster index per item; clusters are numbered by their
/// smallest member. Ties merge the pair with the smallest indices.
pub fn average_link_cluster(dist: &DistanceMatrix, num_clusters: usize) -> Result<Vec<usize>> {
    let n = dist.n();
    if num_clusters == 0 || num_clusters > n {
        return Err(Error::InvalidArgument(format!(
            "num_clusters = {num_clusters} must be in 1..={n}"
        )));
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // Sum of cross distances between clusters, kept up to date on merges.
    let mut link: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist.get(i, j)).collect()).collect();
    while clusters.len() > num_clusters {
        let mut best = (0, 1, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let avg = link[a][b] / (clusters[a].len() * clusters[b].len()) as f64;
                if avg < best.2 {
                    best = (a, b, avg);
                }
            }
        }
        let (a, b, _) = best;
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        let row_b = link.remove(b);
        for row in link.iter_mut() {
            let vb = row.remove(b);
            row[a] += vb;
        }
        for (c, v) in row_b.iter().enumerate() {
            let c = if c > b { c - 1 } else { c };
            if c != a && c < link.len() {
                link[a][c] += v;
            }
        }
        link[a][a] = 0.0;
    }
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by_key(|&c| clusters[c].iter().min().copied());
    let mut out = vec![0; n];
    for (label, &c) in order.iter().enumerate() {
        for &i in &clusters[c] {
            out[i] = label;
        }
    }
    Ok(out)
}

/// Two-sided standard-normal p-value.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Benjamini–Hochberg step-up on two-sided p-values of `zscores` at level `q`.
pub fn fdr_threshold(zscores: &[f64], dims: LatticeDims, q: f64) -> Result<BinaryMask> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("q = {q} outside (0, 1)")));
    }
    if zscores.len() != dims.len() {
        return Err(Error::DimMismatch(format!(
            "{} z-scores for a {dims} lattice",
            zscores.len()
        )));
    }
    let p: Vec<f64> = zscores.iter().map(|&z| two_sided_p(z)).collect();
    let mut sorted = p.clone();
    sorted.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    let cutoff = sorted
        .iter()
        .enumerate()
        .rev()
        .find(|(i, &pv)| pv <= (*i as f64 + 1.0) * q / n)
        .map(|(_, &pv)| pv);
    let values = match cutoff {
        Some(c) => p.iter().map(|&pv| u8::from(pv <= c)).collect(),
        None => vec![0; p.len()],
    };
    BinaryMask::new(dims, values)
}

/// Standardizes a map to zero mean and unit population variance; a constant
/// map becomes all zeros.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Settings for turning clustered components into subject label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMapOptions {
    pub dims: LatticeDims,
    /// Label count of the output maps; retained clusters take labels 1..K-1.
    pub k: usize,
    pub q: f64,
    /// A cluster is kept only if at least this many distinct subjects contribute.
    pub min_subjects: usize,
}

/// One label map per subject (`0..num_subjects`).
///
/// Each retained cluster, in index order, takes the next label. A subject's
/// member maps are z-scored and FDR-thresholded; surviving voxels take the
/// cluster's label, and a voxel claimed by several maps goes to the largest |z|.
pub fn build_subject_maps(
    components: &[Component],
    assignment: &[usize],
    num_subjects: usize,
    options: &SubjectMapOptions,
) -> Result<Vec<LabelMap>> {
    if assignment.len() != components.len() {
        return Err(Error::DimMismatch(format!(
            "{} assignments for {} components",
            assignment.len(),
            components.len()
        )));
    }
    let dims = options.dims;
    if let Some(c) = components.iter().find(|c| c.spatial_map.len() != dims.len()) {
        return Err(Error::DimMismatch(format!(
            "component of subject {} has {} voxels, lattice is {dims}",
            c.subject_id,
            c.spatial_map.len()
        )));
    }
    if let Some(c) = components.iter().find(|c| c.subject_id >= num_subjects) {
        return Err(Error::InvalidArgument(format!(
            "subject id {} >= {num_subjects}",
            c.subject_id
        )));
    }
    let num_clusters = assignment.iter().max().map_or(0, |m| m + 1);
    let retained: Vec<usize> = (0..num_clusters)
        .filter(|&c| {
            let mut subjects: Vec<usize> = components
                .iter()
                .zip(assignment)
                .filter(|(_, &a)| a == c)
                .map(|(comp, _)| comp.subject_id)
                .collect();
            subjects.sort_unstable();
            subjects.dedup();
            subjects.len() >= options.min_subjects.max(1)
        })
        .collect();
    if retained.len() + 1 > options.k {
        return Err(Error::InvalidArgument(format!(
            "{} retained clusters need K >= {}, got K = {}",
            retained.len(),
            retained.len() + 1,
            options.k
        )));
    }
    let mut out = Vec::with_capacity(num_subjects);
    for subject in 0..num_subjects {
        let mut labels = vec![0usize; dims.len()];
        let mut strength = vec![0.0f64; dims.len()];
        for (label, &cluster) in retained.iter().enumerate() {
            for (comp, _) in components
                .iter()
                .zip(assignment)
                .filter(|(c, &a)| a == cluster && c.subject_id == subject)
            {
                let z = zscore(&comp.spatial_map);
                let mask = fdr_threshold(&z, dims, options.q)?;
                for s in 0..dims.len() {
                    if mask.get(s) == 1 && z[s].abs() > strength[s] {
                        strength[s] = z[s].abs();
                        labels[s] = label + 1;
                    }
                }
            }
        }
        out.push(LabelMap::new(dims, options.k, labels)?);
    }
    Ok(out)
}

fn parse_component_name(name: &str) -> Option<(usize, usize)> {
    let stem = name.strip_prefix("comp_")?.strip_suffix(".smap")?;
    let (s, i) = stem.split_once('_')?;
    Some((s.parse().ok()?, i.parse().ok()?))
}

/// Reads `comp_<subject>_<index>.smap` / `.tc` pairs, ordered by subject then index.
pub fn read_components(dir: &Path) -> Result<(LatticeDims, Vec<Component>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(key) = parse_component_name(&name) {
            found.push((key, entry.path()));
        }
    }
    if found.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no comp_<subject>_<index>.smap files in {}",
            dir.display()
        )));
    }
    found.sort();
    let mut dims = None;
    let mut components = Vec::with_capacity(found.len());
    for ((subject, _), smap) in found {
        let text = fs::read_to_string(&smap).map_err(|e| Error::io(&smap, e))?;
        let (d, spatial) = parse_real_grid(&text, &smap.display().to_string())?;
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::DimMismatch(format!(
                    "{} is {d}, earlier maps are {prev}",
                    smap.display()
                )))
            }
            _ => {}
        }
        let tc_path = smap.with_extension("tc");
        let text = fs::read_to_string(&tc_path).map_err(|e| Error::io(&tc_path, e))?;
        let ctx = tc_path.display().to_string();
        let tc = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::parse(&ctx, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        components.push(Component::new(spatial, tc, subject)?);
    }
    Ok((dims.expect("at least one component"), components))
}

/// Writes one component pair into `dir`.
pub fn write_component(dir: &Path, index: usize, component: &Component, dims: LatticeDims) -> Result<()> {
    let base = dir.join(format!("comp_{}_{index}", component.subject_id));
    let smap = base.with_extension("smap");
    fs::write(&smap, real_grid_to_string(&component.spatial_map, dims)).map_err(|e| Error::io(&smap, e))?;
    let tc = base.with_extension("tc");
    let body: String = component.time_course.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&tc, body).map_err(|e| Error::io(&tc, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, s: u64) -> DataMatrix {
        let mut rng = seed::rng(s);
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        DataMatrix::from_rows(rows, cols, &v).unwrap()
    }

    /// Element-wise evaluation of the RV trace formula.
    fn rv_oracle(a: &DataMatrix, b: &DataMatrix) -> f64 {
        let center = |m: &DataMatrix| -> Vec<Vec<f64>> {
            let (t, v) = (m.rows(), m.cols());
            let means: Vec<f64> = (0..v).map(|c| (0..t).map(|r| m.get(r, c)).sum::<f64>() / t as f64).collect();
            (0..t).map(|r| (0..v).map(|c| m.get(r, c) - means[c]).collect()).collect()
        };
        let z = |d: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let t = d.len();
            (0..t)
                .map(|i| (0..t).map(|j| d[i].iter().zip(&d[j]).map(|(x, y)| x * y).sum()).collect())
                .collect()
        };
        let (za, zb) = (z(&center(a)), z(&center(b)));
        let tr = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| -> f64 {
            let t = x.len();
            let mut s = 0.0;
            for i in 0..t {
                for k in 0..t {
                    s += x[i][k] * y[k][i];
                }
            }
            s
        };
        tr(&za, &zb) / (tr(&za, &za) * tr(&zb, &zb)).sqrt()
    }

    #[test]
    fn rv_examples() {
        let d = random_matrix(5, 8, 1);
        assert!((rv_coefficient(&d, &d).unwrap() - 1.0).abs() < 1e-9);
        let scaled = DataMatrix::from_matrix(d.as_matrix() * -3.5).unwrap();
        assert!((rv_coefficient(&d, &scaled).unwrap() - 1.0).abs() < 1e-9);
        let e = random_matrix(5, 8, 2);
        let rv = rv_coefficient(&d, &e).unwrap();
        assert!((rv - rv_oracle(&d, &e)).abs() < 1e-12);
        assert!((rv - rv_coefficient(&e, &d).unwrap()).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&rv));
    }

    #[test]
    fn rv_errors() {
        let zero = DataMatrix::from_rows(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let d = random_matrix(3, 2, 3);
        assert!(rv_coefficient(&zero, &d).unwrap_err().is_numerical());
        assert!(rv_coefficient(&random_matrix(4, 2, 1), &d).is_err());
        assert!(DataMatrix::from_rows(1, 1, &[f64::NAN]).is_err());
    }

    #[test]
    fn outlier_examples() {
        let eq = DistanceMatrix::from_fn(6, |_, _| Ok(0.4)).unwrap();
        assert_eq!(exclude_outliers(&eq), (0..6).collect::<Vec<_>>());
        let two = DistanceMatrix::from_fn(2, |_, _| Ok(0.7)).unwrap();
        assert_eq!(exclude_outliers(&two), vec![0, 1]);

        let mut rng = seed::rng(5);
        let pts: Vec<f64> = (0..30)
            .map(|i| if i == 17 { 50.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let dist = DistanceMatrix::from_fn(30, |i, j| Ok((pts[i] - pts[j]).abs())).unwrap();
        let kept = exclude_outliers(&dist);
        assert_eq!(kept.len(), 29);
        assert!(!kept.contains(&17));
    }

    #[test]
    fn pca_full_and_rank_one() {
        let d = random_matrix(4, 12, 9);
        assert_eq!(pca_cpv_reduce(&d, 1.0).unwrap().rows(), 4);

        let u = [1.0, -2.0, 0.5];
        let v: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let vals: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let r1 = DataMatrix::from_rows(3, 10, &vals).unwrap();
        assert_eq!(pca_cpv_reduce(&r1, 0.95).unwrap().rows(), 1);

        let constant = DataMatrix::from_rows(2, 3, &[1.0; 6]).unwrap();
        assert!(pca_cpv_reduce(&constant, 0.9).unwrap_err().is_numerical());
        assert!(pca_cpv_reduce(&d, 0.0).is_err());
    }

    #[test]
    fn pca_planted_spectrum() {
        // Orthogonal, zero-mean voxel patterns with energies 0.6 : 0.3 : 0.1.
        let v = 8;
        let patterns: [Vec<f64>; 3] = [
            vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
            vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0],
            vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0],
        ];
        let weights = [0.6f64.sqrt(), 0.3f64.sqrt(), 0.1f64.sqrt()];
        let vals: Vec<f64> = (0..3)
            .flat_map(|r| patterns[r].iter().map(move |x| x * weights[r]).collect::<Vec<_>>())
            .collect();
        let d = DataMatrix::from_rows(3, v, &vals).unwrap();
        assert_eq!(pca_cpv_reduce(&d, 0.95).unwrap().rows(), 3);
        assert_eq!(pca_cpv_reduce(&d, 0.9).unwrap().rows(), 2);
        let out = pca_cpv_reduce(&d, 0.9).unwrap();
        for r in 0..out.rows() {
            let row: Vec<f64> = (0..v).map(|c| out.get(r, c)).collect();
            let mean = row.iter().sum::<f64>() / v as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v - 1) as f64;
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn imed_examples() {
        let one = LatticeDims::new(1, 1).unwrap();
        // Both normalize to [1].
        assert_eq!(imed(&[2.0], &[0.5], one, 1.0).unwrap(), 0.0);
        let two = LatticeDims::new(1, 2).unwrap();
        let v = imed(&[1.0, 0.0], &[0.0, 1.0], two, 1.0).unwrap();
        let g0 = 1.0 / (2.0 * std::f64::consts::PI);
        let g1 = g0 * (-0.5f64).exp();
        assert!((v - (2.0 * g0 - 2.0 * g1) / 2.0).abs() < 1e-12);

        let dims = LatticeDims::new(4, 5).unwrap();
        let mut rng = seed::rng(2);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(imed(&x, &x, dims, 1.0).unwrap(), 0.0);
        let a = imed(&x, &y, dims, 1.3).unwrap();
        assert!((a - imed(&y, &x, dims, 1.3).unwrap()).abs() < 1e-15);
        assert!((a - imed_dense(&x, &y, dims, 1.3).unwrap()).abs() < 1e-12);
        assert!(imed(&x, &y, dims, 0.0).is_err());
        assert!(imed(&x, &y[..19], dims, 1.0).is_err());
    }

    #[test]
    fn imed_single_pixel_closed_form() {
        let one = LatticeDims::new(1, 1).unwrap();
        let v = imed(&[1.0], &[0.0], one, 1.0).unwrap();
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-9);
        assert_eq!(v, imed_dense(&[1.0], &[0.0], one, 1.0).unwrap());
    }

    fn imed_form_for_difference(d: &[f64], dims: LatticeDims, sigma: f64) -> f64 {
        let dm = DMatrix::from_row_slice(dims.rows, dims.cols, d);
        let f = gaussian_axis(dims.rows, sigma) * &dm * gaussian_axis(dims.cols, sigma);
        dm.dot(&f) / (2.0 * std::f64::consts::PI * sigma * sigma) / dims.len() as f64
    }

    #[test]
    fn gaussian_weights_positive_definite() {
        let dims = LatticeDims::new(3, 4).unwrap();
        let mut rng = seed::rng(11);
        for _ in 0..100 {
            let d: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(imed_form_for_difference(&d, dims, 1.0) > 0.0);
        }
    }

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw(&[1.0, 5.0, 2.0], &[1.0, 5.0, 2.0]).unwrap(), 0.0);
        assert_eq!(dtw(&[0.0], &[3.0]).unwrap(), 3.0);
        assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(dtw(&[], &[1.0]).is_err());
    }

    #[test]
    fn cluster_trivial_and_blobs() {
        let mut rng = seed::rng(3);
        let pts: Vec<(f64, f64)> = (0..10)
            .map(|i| {
                let c = if i % 2 == 0 { 0.0 } else { 100.0 };
                (c + rng.random_range(0.0..1.0), c + rng.random_range(0.0..1.0))
            })
            .collect();
        let dist = DistanceMatrix::from_fn(10, |i, j| {
            Ok(((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt())
        })
        .unwrap();
        assert_eq!(average_link_cluster(&dist, 10).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(average_link_cluster(&dist, 1).unwrap(), vec![0; 10]);
        let two = average_link_cluster(&dist, 2).unwrap();
        assert_eq!(two, (0..10).map(|i| i % 2).collect::<Vec<_>>());
        assert!(average_link_cluster(&dist, 0).is_err());
        assert!(average_link_cluster(&dist, 11).is_err());
    }

    #[test]
    fn cluster_ties_merge_lowest_pair() {
        let dist = DistanceMatrix::from_fn(4, |_, _| Ok(1.0)).unwrap();
        assert_eq!(average_link_cluster(&dist, 3).unwrap(), vec![0, 0, 1, 2]);
    }

    #[test]
    fn fdr_examples() {
        let dims = LatticeDims::new(10, 10).unwrap();
        assert_eq!(fdr_threshold(&[0.0; 100], dims, 0.05).unwrap().count_ones(), 0);
        let mut z = vec![0.0; 100];
        z[42] = 100.0;
        let m = fdr_threshold(&z, dims, 0.05).unwrap();
        assert_eq!(m.count_ones(), 1);
        assert_eq!(m.get(42), 1);
        assert!(fdr_threshold(&z, dims, 1.0).is_err());
    }

    #[test]
    fn subject_maps_examples() {
        let dims = LatticeDims::new(4, 4).unwrap();
        let opts = SubjectMapOptions { dims, k: 3, q: 0.05, min_subjects: 1 };
        let flat = Component::new(vec![1.0; 16], vec![0.0], 0).unwrap();
        let maps = build_subject_maps(&[flat], &[0], 1, &opts).unwrap();
        assert!(maps[0].values().iter().all(|&v| v == 0));

        let half: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let c = Component::new(half, vec![0.0], 0).unwrap();
        let opts_all = SubjectMapOptions { q: 0.5, ..opts.clone() };
        let maps = build_subject_maps(&[c], &[0], 1, &opts_all).unwrap();
        assert!(maps[0].values().iter().all(|&v| v == 1));

        let dims8 = LatticeDims::new(8, 8).unwrap();
        let blob = |r0: usize| -> Vec<f64> {
            (0..64).map(|s| if (r0..r0 + 2).contains(&(s / 8)) && s % 8 < 2 { 40.0 } else { 0.0 }).collect()
        };
        let comps = vec![
            Component::new(blob(0), vec![0.0], 0).unwrap(),
            Component::new(blob(5), vec![1.0], 0).unwrap(),
        ];
        let opts8 = SubjectMapOptions { dims: dims8, k: 3, q: 0.05, min_subjects: 1 };
        let maps = build_subject_maps(&comps, &[0, 1], 1, &opts8).unwrap();
        for s in 0..64 {
            let expect = if blob(0)[s] > 0.0 { 1 } else if blob(5)[s] > 0.0 { 2 } else { 0 };
            assert_eq!(maps[0].get(s), expect, "site {s}");
        }
        let opts_small = SubjectMapOptions { k: 2, ..opts8 };
        assert!(build_subject_maps(&comps, &[0, 1], 1, &opts_small).is_err());
    }

    #[test]
    fn component_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let dims = LatticeDims::new(2, 3).unwrap();
        let comps = vec![
            Component::new(vec![0.5, -1.0, 2.0, 0.0, 0.25, 3.0], vec![1.0, 2.5], 1).unwrap(),
            Component::new(vec![1.0; 6], vec![0.0, 1.0, 2.0], 0).unwrap(),
        ];
        write_component(dir.path(), 0, &comps[0], dims).unwrap();
        write_component(dir.path(), 3, &comps[1], dims).unwrap();
        let (d, back) = read_components(dir.path()).unwrap();
        assert_eq!(d, dims);
        assert_eq!(back, vec![comps[1].clone(), comps[0].clone()]);
    }

    fn all_warp_costs(x: &[f64], y: &[f64]) -> f64 {
        fn go(x: &[f64], y: &[f64], i: usize, j: usize) -> f64 {
            let here = (x[i] - y[j]).abs();
            if i + 1 == x.len() && j + 1 == y.len() {
                return here;
            }
            let mut best = f64::INFINITY;
            if i + 1 < x.len() {
                best = best.min(go(x, y, i + 1, j));
            }
            if j + 1 < y.len() {
                best = best.min(go(x, y, i, j + 1));
            }
            if i + 1 < x.len() && j + 1 < y.len() {
                best = best.min(go(x, y, i + 1, j + 1));
            }
            here + best
        }
        go(x, y, 0, 0)
    }

    #[test]
    fn dtw_matches_path_enumeration() {
        let mut series = Vec::new();
        for len in 1..=4usize {
            for code in 0..3usize.pow(len as u32) {
                let mut c = code;
                series.push(
                    (0..len)
                        .map(|_| {
                            let v = (c % 3) as f64;
                            c /= 3;
                            v
                        })
                        .collect::<Vec<f64>>(),
                );
            }
        }
        for x in &series {
            for y in &series {
                assert_eq!(dtw(x, y).unwrap(), all_warp_costs(x, y));
            }
        }
    }

    proptest! {
        #[test]
        fn dtw_symmetric_and_bounded(x in prop::collection::vec(-5.0f64..5.0, 1..12), y in prop::collection::vec(-5.0f64..5.0, 1..12)) {
            let a = dtw(&x, &y).unwrap();
            prop_assert!((a - dtw(&y, &x).unwrap()).abs() < 1e-9);
            prop_assert!(a >= 0.0);
            if x.len() == y.len() {
                let diag: f64 = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum();
                prop_assert!(a <= diag + 1e-12);
            }
        }

        #[test]
        fn bh_monotone_in_q(z in prop::collection::vec(-5.0f64..5.0, 16), q1 in 0.01f64..0.5, dq in 0.0f64..0.49) {
            let dims = LatticeDims::new(4, 4).unwrap();
            let lo = fdr_threshold(&z, dims, q1).unwrap();
            let hi = fdr_threshold(&z, dims, q1 + dq).unwrap();
            for s in 0..16 {
                prop_assert!(lo.get(s) <= hi.get(s));
            }
        }

        #[test]
        fn clustering_is_partition(seed in any::<u64>(), n in 1usize..12, kfrac in 0.0f64..1.0) {
            let mut rng = seed::rng(seed);
            let pts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let dist = DistanceMatrix::from_fn(n, |i, j| Ok((pts[i] - pts[j]).abs())).unwrap();
            let k = 1 + ((n - 1) as f64 * kfrac) as usize;
            let a = average_link_cluster(&dist, k).unwrap();
            let mut labels = a.clone();
            labels.sort_unstable();
            labels.dedup();
            prop_assert_eq!(labels, (0..k).collect::<Vec<_>>());
        }

        #[test]
        fn combined_distance_in_unit_range(seed in any::<u64>()) {
            let mut rng = seed::rng(seed);
            let dims = LatticeDims::new(3, 3).unwrap();
            let comps: Vec<Component> = (0..5)
                .map(|i| {
                    let s: Vec<f64> = (0..9).map(|_| rng.random_range(0.1..1.0)).collect();
                    let len = rng.random_range(1..6);
                    let t: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Component::new(s, t, i).unwrap()
                })
                .collect();
            let m = combined_distance_matrix(&comps, dims, 1.0).unwrap();
            let (_, _, scales) = pairwise_distances(&comps, dims, 1.0).unwrap();
            for i in 0..5 {
                prop_assert_eq!(combined_distance(&comps[i], &comps[i], dims, 1.0, &scales).unwrap(), 0.0);
                for j in 0..5 {
                    let v = m.get(i, j);
                    prop_assert!((0.0..=1.0).contains(&v));
                    let direct = combined_distance(&comps[i], &comps[j], dims, 1.0, &scales).unwrap();
                    prop_assert!((direct - v).abs() < 1e-12);
                    prop_assert!((direct - combined_distance(&comps[j], &comps[i], dims, 1.0, &scales).unwrap()).abs() < 1e-12);
                }
            }
        }
    }
}
