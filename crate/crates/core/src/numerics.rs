//! Dense matrices and seeded randomness shared by every other module.
//!
//! The generator is ChaCha8 (`rand_chacha`), seeded from a single `u64`.
//! Child generators are derived with [`derive_seed`], a SplitMix64-style
//! finalizer applied to `parent + (stream + 1) * GOLDEN`. For a fixed parent
//! the map `stream -> child` is injective, so per-tree or per-repeat streams
//! never collide and never depend on scheduling order.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Rows picked by index, in the given order (duplicates allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_columns(&self, columns: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * columns.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(columns.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: self.rows,
            cols: columns.len(),
            data,
        }
    }

    /// Horizontal concatenation of equally tall matrices.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::Shape(format!(
                "cannot stack {} rows next to {rows}",
                bad.rows
            )));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product `a * b`.
pub fn mat_mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let out_row = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for (k, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Solves `A x = b` for symmetric positive definite `A` via Cholesky.
pub fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(Error::Shape(format!(
            "cholesky needs a square system, got {}x{} with rhs {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Domain(format!(
                        "matrix is not positive definite (pivot {i} = {sum:e})"
                    )));
                }
                l.set(i, i, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.get(i, k) * z[k];
        }
        z[i] = sum / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = z[i];
        for k in i + 1..n {
            sum -= l.get(k, i) * x[k];
        }
        x[i] = sum / l.get(i, i);
    }
    Ok(x)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `child_seed = mix64(parent + (stream + 1) * GOLDEN)`.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    mix64(parent.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Seedable single-owner random stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `stream`, derived from this generator's seed
    /// (not its current position).
    pub fn child(&self, stream: u64) -> Rng {
        Rng::new(derive_seed(self.seed, stream))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n` in random order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec()
    }
}

/// `n` draws from N(mean, sd²).
pub fn rng_normal(rng: &mut Rng, n: usize, mean: f64, sd: f64) -> Result<Vec<f64>> {
    if !(sd >= 0.0) {
        return Err(Error::Domain(format!("standard deviation {sd} is negative")));
    }
    Ok((0..n).map(|_| rng.normal(mean, sd)).collect())
}

/// Uniform Fisher-Yates permutation of `items`.
pub fn seeded_shuffle<T>(rng: &mut Rng, mut items: Vec<T>) -> Vec<T> {
    rng.shuffle(&mut items);
    items
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Mean and sample (n - 1) standard deviation; the deviation is 0 for one value.
pub fn mean_and_sample_sd(values: &[f64]) -> (f64, f64) {
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0);
    }
    let ss = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (m, (ss / (values.len() - 1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    #[test]
    fn identity_times_matrix() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(mat_mul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = mat_mul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 4.0]);
        assert_eq!((c.rows(), c.cols()), (2, 1));
    }

    #[test]
    fn nonconforming_product_is_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        assert!(matches!(mat_mul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let x = cholesky_solve(&a, &[2.0, 1.0]).unwrap();
        // 4x + 2y = 2, 2x + 3y = 1  =>  x = 0.5, y = 0
        assert!((x[0] - 0.5).abs() < 1e-14 && x[1].abs() < 1e-14);
    }

    #[test]
    fn zero_sd_gives_constant() {
        let mut rng = Rng::new(3);
        assert_eq!(rng_normal(&mut rng, 5, 2.5, 0.0).unwrap(), vec![2.5; 5]);
    }

    #[test]
    fn negative_sd_is_domain_error() {
        let mut rng = Rng::new(3);
        assert!(matches!(
            rng_normal(&mut rng, 5, 0.0, -1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn same_seed_same_draws() {
        let a = rng_normal(&mut Rng::new(11), 100, 0.0, 1.0).unwrap();
        let b = rng_normal(&mut Rng::new(11), 100, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normal_moments_at_fixed_seed() {
        let draws = rng_normal(&mut Rng::new(2024), 100_000, 0.0, 1.0).unwrap();
        let (m, sd) = mean_and_sample_sd(&draws);
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn shuffle_edge_cases() {
        let mut rng = Rng::new(1);
        assert!(seeded_shuffle(&mut rng, Vec::<u8>::new()).is_empty());
        assert_eq!(seeded_shuffle(&mut rng, vec![9]), vec![9]);
    }

    #[test]
    fn shuffle_is_uniform_over_three_elements() {
        let mut rng = Rng::new(77);
        let mut counts = std::collections::BTreeMap::new();
        let trials = 6000;
        for _ in 0..trials {
            *counts
                .entry(seeded_shuffle(&mut rng, vec![0, 1, 2]))
                .or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (perm, c) in counts {
            let freq = c as f64 / trials as f64;
            // within 5% (relative) of 1/6
            assert!((freq - 1.0 / 6.0).abs() <= 0.05 / 6.0, "{perm:?}: {freq}");
        }
    }

    #[test]
    fn child_streams_are_distinct_and_stable() {
        let parent = Rng::new(42);
        let seeds: std::collections::HashSet<u64> =
            (0..10_000).map(|s| parent.child(s).seed()).collect();
        assert_eq!(seeds.len(), 10_000);
        assert_eq!(derive_seed(42, 0), parent.child(0).seed());
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn mat_mul_is_associative(
            (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(m, n, p, q)| {
                (arb_matrix(m, n), arb_matrix(n, p), arb_matrix(p, q))
            })
        ) {
            let left = mat_mul(&mat_mul(&a, &b).unwrap(), &c).unwrap();
            let right = mat_mul(&a, &mat_mul(&b, &c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |s, v| s.max(v.abs()));
            for (l, r) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((l - r).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn shuffle_is_a_permutation(items in proptest::collection::vec(0u32..50, 0..40), seed in any::<u64>()) {
            let mut shuffled = seeded_shuffle(&mut Rng::new(seed), items.clone());
            let mut original = items;
            shuffled.sort_unstable();
            original.sort_unstable();
            prop_assert_eq!(shuffled, original);
        }
    }
}
