//! The composite objective `F = (1/M) Σ f_i + λ‖x‖₁` over the nonnegative
//! orthant, with `f_i` the Kullback–Leibler loss of the `i`-th contiguous row
//! block of a nonnegative sensing matrix.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidProblem(format!(
                "matrix buffer has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidProblem("ragged matrix rows".into()));
        }
        Self::from_row_major(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            data[j * n + j] = 1.0;
        }
        DenseMatrix { rows: n, cols: n, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.cols..(j + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for j in 0..self.rows {
            for (s, a) in sums.iter_mut().zip(self.row(j)) {
                *s += a;
            }
        }
        sums
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `L = max_j Σ_i a_ij`, the smoothness constant of `KL(A·, b)` relative to the entropy.
pub fn smoothness_constant(a: &DenseMatrix) -> Result<f64> {
    if let Some(j) = (0..a.rows()).find(|&j| a.row(j).iter().all(|&v| v == 0.0)) {
        return Err(Error::InvalidProblem(format!("row {j} of A is all-zero")));
    }
    let l = a.column_sums().into_iter().fold(0.0, f64::max);
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::InvalidProblem(format!("smoothness constant {l} is not positive")));
    }
    Ok(l)
}

/// Generalized KL term for one measurement, with the continuous extension at `t = 0`.
fn kl_term(t: f64, b: f64) -> f64 {
    if t == 0.0 {
        b
    } else {
        t * (t / b).ln() - t + b
    }
}

#[derive(Debug, Clone)]
pub struct CompositeProblem {
    a: DenseMatrix,
    b: Vec<f64>,
    lambda: f64,
    workers: usize,
    shard_bounds: Vec<usize>,
    smoothness: f64,
}

impl CompositeProblem {
    pub fn new(a: DenseMatrix, b: Vec<f64>, lambda: f64, workers: usize) -> Result<Self> {
        let m = a.rows();
        if a.cols() == 0 || m == 0 {
            return Err(Error::InvalidProblem("A must be non-empty".into()));
        }
        if a.as_slice().iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidProblem("A must have finite nonnegative entries".into()));
        }
        if b.len() != m {
            return Err(Error::InvalidProblem(format!("b has length {}, A has {m} rows", b.len())));
        }
        if let Some(j) = b.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidProblem(format!("b[{j}] = {} is not strictly positive", b[j])));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidProblem(format!("lambda = {lambda} must be nonnegative")));
        }
        if workers == 0 || !m.is_multiple_of(workers) {
            return Err(Error::InvalidProblem(format!(
                "{m} rows cannot be split evenly over {workers} workers"
            )));
        }
        let smoothness = smoothness_constant(&a)?;
        let per = m / workers;
        let shard_bounds = (0..=workers).map(|i| i * per).collect();
        Ok(CompositeProblem {
            a,
            b,
            lambda,
            workers,
            shard_bounds,
            smoothness,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn observations(&self) -> &[f64] {
        &self.b
    }

    pub fn shard_bounds(&self) -> &[usize] {
        &self.shard_bounds
    }

    pub fn shard(&self, i: usize) -> Range<usize> {
        self.shard_bounds[i]..self.shard_bounds[i + 1]
    }

    /// The relative-smoothness constant `L` (max column sum of `A`).
    pub fn smoothness_constant(&self) -> f64 {
        self.smoothness
    }

    fn check_worker(&self, i: usize) -> Result<()> {
        if i >= self.workers {
            return Err(Error::domain(format!("worker index {i} out of range 0..{}", self.workers)));
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::domain(format!(
                "point has length {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        if let Some(j) = x.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::domain(format!("x[{j}] = {} is outside the nonnegative orthant", x[j])));
        }
        Ok(())
    }

    fn loss_over(&self, rows: Range<usize>, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(rows.map(|j| kl_term(dot(self.a.row(j), x), self.b[j])).sum())
    }

    fn gradient_over(&self, rows: Range<usize>, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::domain(format!(
                "point has length {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        let mut grad = vec![0.0; self.dim()];
        for j in rows {
            let row = self.a.row(j);
            let t = dot(row, x);
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::domain(format!("<a_{j}, x> = {t} is not strictly positive")));
            }
            let r = (t / self.b[j]).ln();
            for (g, a) in grad.iter_mut().zip(row) {
                *g += a * r;
            }
        }
        Ok(grad)
    }

    /// `f_i(x) = KL(A_i x, b_i)` over the rows of shard `i`.
    pub fn local_loss(&self, i: usize, x: &[f64]) -> Result<f64> {
        self.check_worker(i)?;
        self.loss_over(self.shard(i), x)
    }

    pub fn local_gradient(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_worker(i)?;
        self.gradient_over(self.shard(i), x)
    }

    /// `KL(Ax, b)` over all rows.
    pub fn data_loss(&self, x: &[f64]) -> Result<f64> {
        self.loss_over(0..self.rows(), x)
    }

    /// `Σ_j a_j log(<a_j, x>/b_j)` over all rows.
    pub fn data_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.gradient_over(0..self.rows(), x)
    }

    pub fn regularizer(&self, x: &[f64]) -> f64 {
        self.lambda * x.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// `F(x) = (1/M) Σ_i f_i(x) + λ‖x‖₁`.
    pub fn full_objective(&self, x: &[f64]) -> Result<f64> {
        let losses = (0..self.workers).map(|i| self.local_loss(i, x)).sum::<Result<f64>>()?;
        Ok(losses / self.workers as f64 + self.regularizer(x))
    }

    /// Gradient of the smooth part of `F` plus the (linear on the orthant) ℓ1 term.
    pub fn objective_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let scale = 1.0 / self.workers as f64;
        Ok(self.data_gradient(x)?.into_iter().map(|g| g * scale + self.lambda).collect())
    }

    pub fn save(&self, dir: &Path, meta: &ProblemMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join("A.csv"))?;
        for j in 0..self.rows() {
            w.write_record(self.a.row(j).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(dir.join("A.csv"), e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join("b.csv"))?;
        for v in &self.b {
            w.write_record([v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("b.csv"), e))?;
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ProblemMeta)> {
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ProblemMeta = serde_json::from_str(&text)?;
        let rows = read_csv_rows(&dir.join("A.csv"))?;
        let a = DenseMatrix::from_rows(&rows)?;
        let b: Vec<f64> = read_csv_rows(&dir.join("b.csv"))?.into_iter().flatten().collect();
        if a.rows() != meta.m || a.cols() != meta.n {
            return Err(Error::InvalidProblem(format!(
                "A.csv is {}x{}, meta.json says {}x{}",
                a.rows(),
                a.cols(),
                meta.m,
                meta.n
            )));
        }
        let problem = CompositeProblem::new(a, b, meta.lambda, meta.workers)?;
        Ok((problem, meta))
    }
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidProblem(format!("{}: bad number {s:?}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Sidecar metadata stored next to `A.csv` and `b.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemMeta {
    pub n: usize,
    pub m: usize,
    pub workers: usize,
    pub lambda: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub b_floor: Option<f64>,
}

/// Synthetic instance parameters. Data are drawn from ChaCha20 seeded with `seed`:
/// first `A` row by row (uniform on `[0,1)`), then `x̄` (uniform on `(0.1, 1]`),
/// then one Poisson(1) noise draw per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenConfig {
    pub n: usize,
    pub m: usize,
    pub workers: usize,
    pub seed: u64,
    #[serde(default = "DataGenConfig::default_b_floor")]
    pub b_floor: f64,
    /// ℓ1 weight; `None` selects `1e-2 · max_j b_j / m`.
    #[serde(default)]
    pub lambda: Option<f64>,
}

impl DataGenConfig {
    pub const XBAR_LOW: f64 = 0.1;

    fn default_b_floor() -> f64 {
        1e-6
    }

    pub fn new(n: usize, m: usize, workers: usize, seed: u64) -> Self {
        DataGenConfig {
            n,
            m,
            workers,
            seed,
            b_floor: Self::default_b_floor(),
            lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.workers == 0 {
            return Err(Error::Config("n, m and workers must be positive".into()));
        }
        if !self.m.is_multiple_of(self.workers) {
            return Err(Error::Config(format!(
                "m = {} is not divisible by workers = {}",
                self.m, self.workers
            )));
        }
        if !(self.b_floor > 0.0) {
            return Err(Error::Config("b_floor must be positive".into()));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda = {l} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn meta(&self, problem: &CompositeProblem) -> ProblemMeta {
        ProblemMeta {
            n: self.n,
            m: self.m,
            workers: self.workers,
            lambda: problem.lambda(),
            seed: Some(self.seed),
            b_floor: Some(self.b_floor),
        }
    }
}

pub fn default_lambda(b: &[f64]) -> f64 {
    1e-2 * b.iter().copied().fold(0.0, f64::max) / b.len() as f64
}

/// Draw `A ~ U[0,1)`, a positive `x̄`, and `b = A x̄ + Poisson(1)` floored at `b_floor`.
pub fn generate(cfg: &DataGenConfig) -> Result<CompositeProblem> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let a: Vec<f64> = (0..cfg.m * cfg.n).map(|_| rng.random::<f64>()).collect();
    let a = DenseMatrix::from_row_major(cfg.m, cfg.n, a)?;
    let span = 1.0 - DataGenConfig::XBAR_LOW;
    let xbar: Vec<f64> = (0..cfg.n).map(|_| 1.0 - span * rng.random::<f64>()).collect();
    let noise = Poisson::new(1.0).expect("unit rate is valid");
    let b: Vec<f64> = (0..cfg.m)
        .map(|j| {
            let eps: f64 = noise.sample(&mut rng);
            (dot(a.row(j), &xbar) + eps).max(cfg.b_floor)
        })
        .collect();
    let lambda = cfg.lambda.unwrap_or_else(|| default_lambda(&b));
    CompositeProblem::new(a, b, lambda, cfg.workers)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::E;

    use super::*;

    fn single(a: f64, b: f64) -> CompositeProblem {
        CompositeProblem::new(DenseMatrix::from_rows(&[vec![a]]).unwrap(), vec![b], 0.0, 1).unwrap()
    }

    #[test]
    fn local_loss_examples() {
        assert_eq!(single(1.0, 1.0).local_loss(0, &[1.0]).unwrap(), 0.0);
        assert_eq!(single(1.0, 1.0).local_loss(0, &[0.0]).unwrap(), 1.0);
        let v = single(2.0, 1.0).local_loss(0, &[1.0]).unwrap();
        assert!((v - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((v - 0.386294).abs() < 1e-6);
        assert!(single(1.0, 1.0).local_loss(0, &[-1.0]).is_err());
    }

    #[test]
    fn local_gradient_examples() {
        assert_eq!(single(1.0, 1.0).local_gradient(0, &[1.0]).unwrap(), vec![0.0]);
        let p = CompositeProblem::new(DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![E], 0.0, 1).unwrap();
        let g = p.local_gradient(0, &[1.0, E - 1.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let g = single(2.0, 1.0).local_gradient(0, &[1.0]).unwrap();
        assert!((g[0] - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(single(1.0, 1.0).local_gradient(0, &[0.0]).is_err());
    }

    #[test]
    fn full_objective_examples() {
        assert_eq!(single(1.0, 1.0).full_objective(&[1.0]).unwrap(), 0.0);
        let p = CompositeProblem::new(DenseMatrix::from_rows(&[vec![1.0]]).unwrap(), vec![1.0], 1.0, 1).unwrap();
        assert_eq!(p.full_objective(&[0.0]).unwrap(), 1.0);
        // per-shard loss KL(1, b) = 1 at x = 1 requires b - ln b = 2

        let b = solve_b_minus_ln_b(2.0);
        let p = CompositeProblem::new(DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(), vec![b, b], 2.0, 2).unwrap();
        assert!((p.full_objective(&[1.0]).unwrap() - 3.0).abs() < 1e-12);
    }

    fn solve_b_minus_ln_b(target: f64) -> f64 {
        // b - ln b is increasing for b > 1
        let (mut lo, mut hi) = (1.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid - f64::ln(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn smoothness_examples() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(smoothness_constant(&a).unwrap(), 6.0);
        assert_eq!(smoothness_constant(&DenseMatrix::identity(3)).unwrap(), 1.0);
        let ones = DenseMatrix::from_row_major(200, 100, vec![1.0; 20_000]).unwrap();
        assert_eq!(smoothness_constant(&ones).unwrap(), 200.0);
        let bad = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(smoothness_constant(&bad), Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn construction_rejects_bad_data() {
        let a = DenseMatrix::identity(2);
        assert!(CompositeProblem::new(a.clone(), vec![1.0, 0.0], 0.0, 1).is_err());
        assert!(CompositeProblem::new(a.clone(), vec![1.0, 1.0], -1.0, 1).is_err());
        assert!(CompositeProblem::new(a.clone(), vec![1.0, 1.0], 0.0, 3).is_err());
        assert!(CompositeProblem::new(a, vec![1.0], 0.0, 1).is_err());
    }

    #[test]
    fn generate_examples() {
        let p = generate(&DataGenConfig::new(100, 200, 10, 3)).unwrap();
        assert_eq!((p.dim(), p.rows(), p.workers()), (100, 200, 10));
        assert_eq!(p.shard(9), 180..200);
        let q = generate(&DataGenConfig::new(100, 200, 10, 3)).unwrap();
        assert_eq!(p.matrix(), q.matrix());
        assert_eq!(p.observations(), q.observations());
        assert!(matches!(generate(&DataGenConfig::new(4, 8, 5, 1)), Err(Error::Config(_))));
        let expected_lambda = default_lambda(p.observations());
        assert_eq!(p.lambda(), expected_lambda);
    }

    #[test]
    fn generated_observations_positive() {
        for seed in 0..50 {
            let p = generate(&DataGenConfig::new(5, 6, 3, seed)).unwrap();
            assert!(p.observations().iter().all(|&b| b >= 1e-6));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataGenConfig::new(6, 8, 4, 9);
        let p = generate(&cfg).unwrap();
        p.save(dir.path(), &cfg.meta(&p)).unwrap();
        let (q, meta) = CompositeProblem::load(dir.path()).unwrap();
        assert_eq!(p.matrix(), q.matrix());
        assert_eq!(p.observations(), q.observations());
        assert_eq!(p.lambda(), q.lambda());
        assert_eq!(meta.seed, Some(9));
    }
}
