//! The 2D voxel lattice, its 8-neighbor system and the Potts pair potential.
//!
//! Voxels are linearized row-major: voxel `s` sits at `(s / cols, s % cols)`.
//! Every label field in the crate ([`LabelMap`], [`BinaryMask`]) shares this
//! ordering, both in memory and in the text format (see [`text`]).

pub mod text;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offsets of the 8-neighbor system, in raster order.
const OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeDims {
    pub rows: usize,
    pub cols: usize,
}

impl LatticeDims {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDims { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    /// Square lattice, `side x side`.
    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s / self.cols, s % self.cols)
    }

    fn check(&self, s: usize) -> Result<()> {
        if s >= self.len() {
            Err(Error::IndexOutOfRange {
                index: s,
                len: self.len(),
            })
        } else {
            Ok(())
        }
    }

    fn neighbors_unchecked(&self, s: usize, out: &mut Vec<usize>) {
        let (r, c) = self.coords(s);
        for (dr, dc) in OFFSETS {
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if nr >= 0 && nc >= 0 && (nr as usize) < self.rows && (nc as usize) < self.cols {
                out.push(self.index(nr as usize, nc as usize));
            }
        }
    }
}

impl std::fmt::Display for LatticeDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl std::str::FromStr for LatticeDims {
    type Err = Error;

    /// Accepts `RxC` or a single side length.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::parse("lattice dims", format!("expected ROWSxCOLS, got {s:?}"));
        match s.split_once(['x', 'X']) {
            Some((r, c)) => {
                let rows = r.trim().parse().map_err(|_| bad())?;
                let cols = c.trim().parse().map_err(|_| bad())?;
                Self::new(rows, cols)
            }
            None => Self::square(s.trim().parse().map_err(|_| bad())?),
        }
    }
}

/// In-bounds 8-neighbors of voxel `s`, in raster order.
pub fn neighbors(s: usize, dims: LatticeDims) -> Result<Vec<usize>> {
    dims.check(s)?;
    let mut out = Vec::with_capacity(8);
    dims.neighbors_unchecked(s, &mut out);
    Ok(out)
}

/// Precomputed neighbor lists for every voxel of a lattice.
///
/// The inference sweeps visit every neighborhood many times; this flattens
/// them into one buffer with per-voxel offsets.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    dims: LatticeDims,
    offsets: Vec<usize>,
    flat: Vec<usize>,
}

impl NeighborTable {
    pub fn new(dims: LatticeDims) -> Self {
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut flat = Vec::with_capacity(dims.len() * 8);
        offsets.push(0);
        for s in 0..dims.len() {
            dims.neighbors_unchecked(s, &mut flat);
            offsets.push(flat.len());
        }
        Self {
            dims,
            offsets,
            flat,
        }
    }

    pub fn dims(&self) -> LatticeDims {
        self.dims
    }

    #[inline]
    pub fn of(&self, s: usize) -> &[usize] {
        &self.flat[self.offsets[s]..self.offsets[s + 1]]
    }

    /// Each unordered neighbor pair once, as `(s, r)` with `s < r`.
    pub fn cliques(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.dims.len()).flat_map(move |s| {
            self.of(s)
                .iter()
                .copied()
                .filter(move |&r| r > s)
                .map(move |r| (s, r))
        })
    }
}

/// Potts pair potential: 0 when the labels agree, 1 otherwise.
#[inline]
pub fn potential(a: usize, b: usize) -> u32 {
    u32::from(a != b)
}

/// Dense integer label field over a lattice, values in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: LatticeDims,
    k: usize,
    values: Vec<usize>,
}

impl LabelMap {
    pub fn new(dims: LatticeDims, k: usize, values: Vec<usize>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("label count K = {k} < 2")));
        }
        if values.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} values for a {dims} lattice",
                values.len()
            )));
        }
        if let Some(&label) = values.iter().find(|&&v| v >= k) {
            return Err(Error::LabelOutOfRange { label, k });
        }
        Ok(Self { dims, k, values })
    }

    pub fn constant(dims: LatticeDims, k: usize, label: usize) -> Result<Self> {
        Self::new(dims, k, vec![label; dims.len()])
    }

    pub fn dims(&self) -> LatticeDims {
        self.dims
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    #[inline]
    pub fn get(&self, s: usize) -> usize {
        self.values[s]
    }

    /// Panics if `label >= k`; the field never holds an out-of-range label.
    #[inline]
    pub fn set(&mut self, s: usize, label: usize) {
        assert!(label < self.k, "label {label} out of range for K = {}", self.k);
        self.values[s] = label;
    }

    pub fn into_values(self) -> Vec<usize> {
        self.values
    }

    /// Same field reinterpreted with a larger label count.
    pub fn with_k(mut self, k: usize) -> Result<Self> {
        if k < self.k && self.values.iter().any(|&v| v >= k) {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink label count to {k}"
            )));
        }
        self.k = k;
        Ok(self)
    }

    /// Applies `perm[old] = new` to every voxel.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.k {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} for K = {}",
                perm.len(),
                self.k
            )));
        }
        Self::new(
            self.dims,
            self.k,
            self.values.iter().map(|&v| perm[v]).collect(),
        )
    }

    pub fn to_mask(&self) -> Result<BinaryMask> {
        BinaryMask::new(
            self.dims,
            self.values.iter().map(|&v| v as u8).collect(),
        )
    }
}

/// Binary field over a lattice, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: LatticeDims,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: LatticeDims, values: Vec<u8>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} values for a {dims} lattice",
                values.len()
            )));
        }
        if let Some(&v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::LabelOutOfRange {
                label: v as usize,
                k: 2,
            });
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: LatticeDims) -> Self {
        Self {
            dims,
            values: vec![0; dims.len()],
        }
    }

    pub fn ones(dims: LatticeDims) -> Self {
        Self {
            dims,
            values: vec![1; dims.len()],
        }
    }

    pub fn dims(&self) -> LatticeDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, s: usize) -> u8 {
        self.values[s]
    }

    #[inline]
    pub fn set(&mut self, s: usize, v: u8) {
        assert!(v <= 1, "mask value {v} is not binary");
        self.values[s] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Flips every voxel; used to switch between mask sign conventions.
    pub fn inverted(&self) -> Self {
        Self {
            dims: self.dims,
            values: self.values.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// The mask as a two-label field.
    pub fn to_label_map(&self) -> LabelMap {
        LabelMap {
            dims: self.dims,
            k: 2,
            values: self.values.iter().map(|&v| v as usize).collect(),
        }
    }
}

/// Number of disagreeing unordered neighbor pairs.
pub fn disagreement_count(map: &LabelMap, table: &NeighborTable) -> u64 {
    table
        .cliques()
        .map(|(s, r)| u64::from(potential(map.get(s), map.get(r))))
        .sum()
}

/// `beta` times the number of disagreeing unordered neighbor pairs.
pub fn disagreement_energy(map: &LabelMap, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta = {beta} must be >= 0")));
    }
    let table = NeighborTable::new(map.dims());
    Ok(beta * disagreement_count(map, &table) as f64)
}

/// Fraction of unordered neighbor pairs whose labels agree; 1 when there are no pairs.
pub fn agreement_fraction(map: &LabelMap) -> f64 {
    let table = NeighborTable::new(map.dims());
    let pairs = table.cliques().count();
    if pairs == 0 {
        return 1.0;
    }
    1.0 - disagreement_count(map, &table) as f64 / pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(r: usize, c: usize) -> LatticeDims {
        LatticeDims::new(r, c).unwrap()
    }

    #[test]
    fn neighbor_counts_on_4x4() {
        let d = dims(4, 4);
        assert_eq!(neighbors(d.index(1, 1), d).unwrap().len(), 8);
        assert_eq!(neighbors(d.index(0, 0), d).unwrap().len(), 3);
        assert_eq!(neighbors(d.index(0, 1), d).unwrap().len(), 5);
    }

    #[test]
    fn neighbors_rejects_out_of_range() {
        let d = dims(4, 4);
        assert!(matches!(
            neighbors(16, d),
            Err(Error::IndexOutOfRange { index: 16, len: 16 })
        ));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(LatticeDims::new(0, 3).is_err());
        assert!(LatticeDims::new(3, 0).is_err());
    }

    #[test]
    fn neighbor_relation_symmetric_exhaustive() {
        for rows in 1..=16 {
            for cols in 1..=16 {
                let d = dims(rows, cols);
                let table = NeighborTable::new(d);
                for s in 0..d.len() {
                    for &r in table.of(s) {
                        assert!(table.of(r).contains(&s), "{d}: {s} -> {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn neighbor_counts_by_position() {
        for rows in 3..=9 {
            for cols in 3..=9 {
                let d = dims(rows, cols);
                for s in 0..d.len() {
                    let (r, c) = d.coords(s);
                    let edge_r = r == 0 || r == rows - 1;
                    let edge_c = c == 0 || c == cols - 1;
                    let expected = match (edge_r, edge_c) {
                        (true, true) => 3,
                        (true, false) | (false, true) => 5,
                        (false, false) => 8,
                    };
                    assert_eq!(neighbors(s, d).unwrap().len(), expected);
                }
            }
        }
    }

    #[test]
    fn potential_values() {
        assert_eq!(potential(3, 3), 0);
        assert_eq!(potential(1, 2), 1);
        assert_eq!(potential(0, 0), 0);
        assert_eq!(potential(2, 1), potential(1, 2));
    }

    #[test]
    fn energy_of_constant_map_is_zero() {
        let m = LabelMap::constant(dims(5, 7), 3, 2).unwrap();
        assert_eq!(disagreement_energy(&m, 4.2).unwrap(), 0.0);
    }

    #[test]
    fn energy_of_single_disagreeing_pair() {
        let m = LabelMap::new(dims(1, 2), 2, vec![0, 1]).unwrap();
        assert_eq!(disagreement_energy(&m, 2.0).unwrap(), 2.0);
    }

    #[test]
    fn checkerboard_energy_matches_hand_count() {
        // Oracle: walk every ordered (s, r) pair with |dr|,|dc| <= 1 and halve.
        let d = dims(3, 3);
        let values: Vec<usize> = (0..9).map(|s| (s / 3 + s % 3) % 2).collect();
        let m = LabelMap::new(d, 2, values.clone()).unwrap();
        let mut ordered = 0;
        for a in 0..9usize {
            for b in 0..9usize {
                let (ar, ac) = ((a / 3) as i64, (a % 3) as i64);
                let (br, bc) = ((b / 3) as i64, (b % 3) as i64);
                let adjacent = a != b && (ar - br).abs() <= 1 && (ac - bc).abs() <= 1;
                if adjacent && values[a] != values[b] {
                    ordered += 1;
                }
            }
        }
        // 12 horizontal/vertical pairs all disagree; the 8 diagonals all agree.
        assert_eq!(ordered / 2, 12);
        assert_eq!(disagreement_energy(&m, 1.0).unwrap(), 12.0);
    }

    #[test]
    fn negative_beta_rejected() {
        let m = LabelMap::constant(dims(2, 2), 2, 0).unwrap();
        assert!(disagreement_energy(&m, -1.0).is_err());
    }

    #[test]
    fn label_map_validates_range() {
        assert!(LabelMap::new(dims(1, 2), 2, vec![0, 2]).is_err());
        assert!(LabelMap::new(dims(1, 2), 1, vec![0, 0]).is_err());
        assert!(LabelMap::new(dims(1, 2), 2, vec![0]).is_err());
        assert!(BinaryMask::new(dims(1, 2), vec![0, 2]).is_err());
    }

    #[test]
    fn dims_parse() {
        assert_eq!("32x16".parse::<LatticeDims>().unwrap(), dims(32, 16));
        assert_eq!("8".parse::<LatticeDims>().unwrap(), dims(8, 8));
        assert!("0x4".parse::<LatticeDims>().is_err());
        assert!("ax4".parse::<LatticeDims>().is_err());
    }

    proptest! {
        #[test]
        fn energy_invariant_under_label_permutation(
            rows in 1usize..7,
            cols in 1usize..7,
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = 4;
            let d = dims(rows, cols);
            let values = (0..d.len()).map(|_| rng.random_range(0..k)).collect();
            let m = LabelMap::new(d, k, values).unwrap();
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let e0 = disagreement_energy(&m, 0.7).unwrap();
            let e1 = disagreement_energy(&m.relabel(&perm).unwrap(), 0.7).unwrap();
            prop_assert_eq!(e0, e1);
        }

        #[test]
        fn potential_symmetric(a in 0usize..10, b in 0usize..10) {
            prop_assert_eq!(potential(a, b), potential(b, a));
            prop_assert_eq!(potential(a, a), 0);
        }
    }
}
