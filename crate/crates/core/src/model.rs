//! Potentials `U(θ) = -log p(θ) - Σ log p(Y_i | θ)` with exact and
//! subsampled gradients.
//!
//! Both shipped models drop the additive Gaussian normalizing constants, so
//! `U` here is the negative log posterior up to a θ-independent constant.
//! Optimal values `U*` must be computed with the same functions for the
//! relative ε-accuracy criterion to be meaningful.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot, norm_sq};

/// A probabilistic model: a prior on θ and a per-record likelihood.
///
/// Implementors supply the negative log densities and their gradients; the
/// free functions in this module assemble full and subsampled estimates.
pub trait Model {
    type Record;

    fn dim(&self) -> usize;

    /// Rejects records that are inconsistent with the model shape.
    fn check_record(&self, record: &Self::Record) -> Result<()>;

    fn prior_potential(&self, theta: &[f64]) -> f64;

    fn record_potential(&self, theta: &[f64], record: &Self::Record) -> f64;

    /// `out += ∇(-log p(θ))`
    fn add_prior_gradient(&self, theta: &[f64], out: &mut [f64]);

    /// `out += weight * ∇(-log p(record | θ))`
    fn add_record_gradient(&self, theta: &[f64], record: &Self::Record, weight: f64, out: &mut [f64]);
}

/// An immutable collection of `N_Y ≥ 1` observation records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<R> {
    records: Vec<R>,
}

impl<R> Dataset<R> {
    pub fn new(records: Vec<R>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("dataset must contain at least one record"));
        }
        Ok(Dataset { records })
    }

    /// Builds a dataset after checking every record against `model`.
    pub fn for_model<M: Model<Record = R>>(model: &M, records: Vec<R>) -> Result<Self> {
        for r in &records {
            model.check_record(r)?;
        }
        Self::new(records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }
}

/// Index sets of one with-replacement draw `Ω = {S, O}`. `O` is the small
/// overlap part reused for consistent gradient differences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subsample {
    pub large: Vec<usize>,
    pub overlap: Vec<usize>,
}

impl Subsample {
    pub fn len(&self) -> usize {
        self.large.len() + self.overlap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All indices, `S` followed by `O`.
    pub fn concatenated(&self) -> Vec<usize> {
        let mut all = Vec::with_capacity(self.len());
        all.extend_from_slice(&self.large);
        all.extend_from_slice(&self.overlap);
        all
    }
}

/// Draws `n_large + n_overlap` indices uniformly with replacement from
/// `[0, n_records)`. `S` is drawn first, then `O`, independently.
pub fn draw_subsample<R: Rng + ?Sized>(
    rng: &mut R,
    n_records: usize,
    n_large: usize,
    n_overlap: usize,
) -> Result<Subsample> {
    if n_records == 0 {
        return Err(Error::invalid("cannot subsample an empty dataset"));
    }
    if n_large == 0 || n_overlap == 0 {
        return Err(Error::invalid("subsample parts must be nonempty"));
    }
    let large = (0..n_large).map(|_| rng.random_range(0..n_records)).collect();
    let overlap = (0..n_overlap).map(|_| rng.random_range(0..n_records)).collect();
    Ok(Subsample { large, overlap })
}

pub fn potential<M: Model>(model: &M, data: &Dataset<M::Record>, theta: &[f64]) -> Result<f64> {
    check_dim(model.dim(), theta.len())?;
    let likelihood: f64 = data
        .records()
        .iter()
        .map(|r| model.record_potential(theta, r))
        .sum();
    Ok(model.prior_potential(theta) + likelihood)
}

pub fn full_gradient<M: Model>(model: &M, data: &Dataset<M::Record>, theta: &[f64]) -> Result<Vec<f64>> {
    check_dim(model.dim(), theta.len())?;
    let mut out = vec![0.0; theta.len()];
    model.add_prior_gradient(theta, &mut out);
    for r in data.records() {
        model.add_record_gradient(theta, r, 1.0, &mut out);
    }
    Ok(out)
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::invalid("index list must be nonempty"));
    }
    match indices.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::invalid(alloc::format!(
            "index {i} out of range for {n} records"
        ))),
        None => Ok(()),
    }
}

/// `out += weight * Σ_{i ∈ indices} ∇(-log p(Y_i | θ))`
fn add_likelihood<M: Model>(
    model: &M,
    data: &Dataset<M::Record>,
    theta: &[f64],
    indices: &[usize],
    weight: f64,
    out: &mut [f64],
) {
    let records = data.records();
    for &i in indices {
        model.add_record_gradient(theta, &records[i], weight, out);
    }
}

/// Unbiased gradient estimate: prior gradient plus the likelihood gradients
/// over `indices` scaled by `N_Y / |indices|`. Repeated indices count
/// repeatedly.
pub fn stochastic_gradient<M: Model>(
    model: &M,
    data: &Dataset<M::Record>,
    theta: &[f64],
    indices: &[usize],
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; model.dim()];
    stochastic_gradient_into(model, data, theta, indices, &mut out)?;
    Ok(out)
}

/// Like [`stochastic_gradient`], overwriting `out`.
pub fn stochastic_gradient_into<M: Model>(
    model: &M,
    data: &Dataset<M::Record>,
    theta: &[f64],
    indices: &[usize],
    out: &mut [f64],
) -> Result<()> {
    check_dim(model.dim(), theta.len())?;
    check_dim(model.dim(), out.len())?;
    check_indices(indices, data.len())?;
    out.fill(0.0);
    model.add_prior_gradient(theta, out);
    let scale = data.len() as f64 / indices.len() as f64;
    add_likelihood(model, data, theta, indices, scale, out);
    Ok(())
}

/// The worker gradient `(N_O/N_Ω) ∇Ũ_O + (N_S/N_Ω) ∇Ũ_S`, with the prior
/// counted once so that the combination stays unbiased for `∇U`.
///
/// Each part's likelihood sum carries its own `N_Y / N_part` scale before
/// the `N_part / N_Ω` weighting.
pub fn combined_gradient<M: Model>(
    model: &M,
    data: &Dataset<M::Record>,
    theta: &[f64],
    omega: &Subsample,
) -> Result<Vec<f64>> {
    check_dim(model.dim(), theta.len())?;
    if omega.large.is_empty() || omega.overlap.is_empty() {
        return Err(Error::invalid("both subsample parts must be nonempty"));
    }
    check_indices(&omega.large, data.len())?;
    check_indices(&omega.overlap, data.len())?;

    let n_y = data.len() as f64;
    let n_s = omega.large.len() as f64;
    let n_o = omega.overlap.len() as f64;
    let n_omega = n_s + n_o;

    let mut out = vec![0.0; theta.len()];
    model.add_prior_gradient(theta, &mut out);
    add_likelihood(model, data, theta, &omega.large, (n_s / n_omega) * (n_y / n_s), &mut out);
    add_likelihood(model, data, theta, &omega.overlap, (n_o / n_omega) * (n_y / n_o), &mut out);
    Ok(out)
}

/// One linear-Gaussian observation `Y_i | θ ~ N(a_iᵀθ, σ_x²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    pub target: f64,
}

/// `θ ~ N(0, I)`, `Y_i | θ ~ N(a_iᵀθ, σ_x²)`.
///
/// `U(θ) = ½‖θ‖² + Σ (Y_i - a_iᵀθ)² / (2σ_x²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    dim: usize,
    noise_variance: f64,
}

impl LinearGaussianModel {
    pub fn new(dim: usize, noise_variance: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dimension must be positive"));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::config("noise variance must be positive and finite"));
        }
        Ok(LinearGaussianModel { dim, noise_variance })
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }
}

impl Model for LinearGaussianModel {
    type Record = Observation;

    fn dim(&self) -> usize {
        self.dim
    }

    fn check_record(&self, record: &Observation) -> Result<()> {
        check_dim(self.dim, record.features.len())?;
        if !record.target.is_finite() || !record.features.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("observation contains non-finite values"));
        }
        Ok(())
    }

    fn prior_potential(&self, theta: &[f64]) -> f64 {
        0.5 * norm_sq(theta)
    }

    fn record_potential(&self, theta: &[f64], record: &Observation) -> f64 {
        let r = record.target - dot(&record.features, theta);
        0.5 * r * r / self.noise_variance
    }

    fn add_prior_gradient(&self, theta: &[f64], out: &mut [f64]) {
        axpy(1.0, theta, out);
    }

    fn add_record_gradient(&self, theta: &[f64], record: &Observation, weight: f64, out: &mut [f64]) {
        let r = dot(&record.features, theta) - record.target;
        axpy(weight * r / self.noise_variance, &record.features, out);
    }
}

/// One observed matrix entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// `F_rk ~ N(0,1)`, `G_ks ~ N(0,1)`, `Y_rs | F,G ~ N(Σ_k F_rk G_ks, 1)`.
///
/// θ packs `F` (rows × rank, row-major) followed by `G` (rank × cols,
/// row-major), so `d = rank · (rows + cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFactorizationModel {
    rows: usize,
    cols: usize,
    rank: usize,
}

impl MatrixFactorizationModel {
    pub fn new(rows: usize, cols: usize, rank: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rank == 0 {
            return Err(Error::config("matrix factorization shape must be positive"));
        }
        Ok(MatrixFactorizationModel { rows, cols, rank })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    fn f_index(&self, r: usize, k: usize) -> usize {
        r * self.rank + k
    }

    #[inline]
    fn g_index(&self, k: usize, s: usize) -> usize {
        self.rows * self.rank + k * self.cols + s
    }

    /// Packs row-major `F` and `G` into θ.
    pub fn pack(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows * self.rank, f.len())?;
        check_dim(self.rank * self.cols, g.len())?;
        let mut theta = Vec::with_capacity(self.dim());
        theta.extend_from_slice(f);
        theta.extend_from_slice(g);
        Ok(theta)
    }

    /// Splits θ into row-major `F` and `G`.
    pub fn unpack(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), theta.len())?;
        let (f, g) = theta.split_at(self.rows * self.rank);
        Ok((f.to_vec(), g.to_vec()))
    }

    pub fn predict(&self, theta: &[f64], row: usize, col: usize) -> f64 {
        (0..self.rank)
            .map(|k| theta[self.f_index(row, k)] * theta[self.g_index(k, col)])
            .sum()
    }

    /// Root-mean-squared residual over `entries`.
    pub fn rmse(&self, entries: &[Rating], theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        if entries.is_empty() {
            return Err(Error::invalid("rmse needs at least one observed entry"));
        }
        let sse: f64 = entries
            .iter()
            .map(|e| {
                let r = e.value - self.predict(theta, e.row, e.col);
                r * r
            })
            .sum();
        Ok(libm::sqrt(sse / entries.len() as f64))
    }
}

impl Model for MatrixFactorizationModel {
    type Record = Rating;

    fn dim(&self) -> usize {
        self.rank * (self.rows + self.cols)
    }

    fn check_record(&self, record: &Rating) -> Result<()> {
        if record.row >= self.rows || record.col >= self.cols {
            return Err(Error::invalid(alloc::format!(
                "entry ({}, {}) outside a {}x{} matrix",
                record.row, record.col, self.rows, self.cols
            )));
        }
        if !record.value.is_finite() {
            return Err(Error::invalid("rating must be finite"));
        }
        Ok(())
    }

    fn prior_potential(&self, theta: &[f64]) -> f64 {
        0.5 * norm_sq(theta)
    }

    fn record_potential(&self, theta: &[f64], record: &Rating) -> f64 {
        let r = record.value - self.predict(theta, record.row, record.col);
        0.5 * r * r
    }

    fn add_prior_gradient(&self, theta: &[f64], out: &mut [f64]) {
        axpy(1.0, theta, out);
    }

    fn add_record_gradient(&self, theta: &[f64], record: &Rating, weight: f64, out: &mut [f64]) {
        let residual = record.value - self.predict(theta, record.row, record.col);
        let c = -weight * residual;
        for k in 0..self.rank {
            let fi = self.f_index(record.row, k);
            let gi = self.g_index(k, record.col);
            let (f, g) = (theta[fi], theta[gi]);
            out[fi] += c * g;
            out[gi] += c * f;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use alloc::vec;

    fn one_d() -> (LinearGaussianModel, Dataset<Observation>) {
        let m = LinearGaussianModel::new(1, 1.0).unwrap();
        let d = Dataset::for_model(&m, vec![Observation { features: vec![1.0], target: 2.0 }]).unwrap();
        (m, d)
    }

    fn three_records() -> (LinearGaussianModel, Dataset<Observation>) {
        let m = LinearGaussianModel::new(2, 0.5).unwrap();
        let recs = vec![
            Observation { features: vec![1.0, -0.5], target: 0.3 },
            Observation { features: vec![0.2, 2.0], target: -1.1 },
            Observation { features: vec![-1.5, 0.7], target: 2.4 },
        ];
        let d = Dataset::for_model(&m, recs).unwrap();
        (m, d)
    }

    #[test]
    fn linear_gaussian_potential_by_substitution() {
        let (m, d) = one_d();
        assert_eq!(potential(&m, &d, &[0.0]).unwrap(), 2.0);
        assert_eq!(potential(&m, &d, &[1.0]).unwrap(), 1.0);
        // closed-form optimum (1 + 1)^{-1} * 2 = 1
        assert_eq!(full_gradient(&m, &d, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn linear_gaussian_gradient_at_zero() {
        let (m, d) = one_d();
        assert_eq!(full_gradient(&m, &d, &[0.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (m, d) = one_d();
        assert_eq!(
            potential(&m, &d, &[0.0, 1.0]),
            Err(Error::DimensionMismatch { expected: 1, found: 2 })
        );
        assert!(full_gradient(&m, &d, &[]).is_err());
    }

    #[test]
    fn mf_single_entry() {
        let m = MatrixFactorizationModel::new(1, 1, 1).unwrap();
        let d = Dataset::for_model(&m, vec![Rating { row: 0, col: 0, value: 1.0 }]).unwrap();
        assert_eq!(potential(&m, &d, &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(full_gradient(&m, &d, &[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn mf_rejects_out_of_bounds_entry() {
        let m = MatrixFactorizationModel::new(2, 3, 1).unwrap();
        assert!(Dataset::for_model(&m, vec![Rating { row: 2, col: 0, value: 1.0 }]).is_err());
        assert!(Dataset::for_model(&m, vec![Rating { row: 0, col: 3, value: 1.0 }]).is_err());
    }

    #[test]
    fn rmse_examples() {
        let m = MatrixFactorizationModel::new(1, 1, 1).unwrap();
        let perfect = [Rating { row: 0, col: 0, value: 6.0 }];
        assert_eq!(m.rmse(&perfect, &[2.0, 3.0]).unwrap(), 0.0);
        let off = [Rating { row: 0, col: 0, value: 8.0 }];
        assert_eq!(m.rmse(&off, &[2.0, 3.0]).unwrap(), 2.0);
        assert!(m.rmse(&[], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn full_index_set_gives_full_gradient() {
        let (m, d) = three_records();
        let theta = [0.4, -0.9];
        let g = stochastic_gradient(&m, &d, &theta, &[0, 1, 2]).unwrap();
        assert_eq!(g, full_gradient(&m, &d, &theta).unwrap());
    }

    #[test]
    fn repeated_index_counts_twice() {
        let (m, d) = three_records();
        let theta = [0.4, -0.9];
        let g = stochastic_gradient(&m, &d, &theta, &[0, 0]).unwrap();
        let mut expect = theta.to_vec();
        m.add_record_gradient(&theta, &d.records()[0], 2.0 * 3.0 / 2.0, &mut expect);
        assert_eq!(g, expect);
    }

    #[test]
    fn empty_or_out_of_range_indices() {
        let (m, d) = three_records();
        assert!(stochastic_gradient(&m, &d, &[0.0, 0.0], &[]).is_err());
        assert!(stochastic_gradient(&m, &d, &[0.0, 0.0], &[3]).is_err());
    }

    #[test]
    fn combined_gradient_with_equal_parts() {
        let (m, d) = three_records();
        let theta = [1.3, 0.2];
        let omega = Subsample { large: vec![2, 0], overlap: vec![2, 0] };
        let g = combined_gradient(&m, &d, &theta, &omega).unwrap();
        let expect = stochastic_gradient(&m, &d, &theta, &[2, 0]).unwrap();
        assert!(crate::linalg::max_abs_diff(&g, &expect) < 1e-12);
    }

    #[test]
    fn combined_gradient_matches_concatenation() {
        let (m, d) = three_records();
        let theta = [-0.7, 0.25];
        let omega = Subsample { large: vec![0, 1, 1, 2], overlap: vec![2] };
        let g = combined_gradient(&m, &d, &theta, &omega).unwrap();
        let expect = stochastic_gradient(&m, &d, &theta, &omega.concatenated()).unwrap();
        assert!(crate::linalg::max_abs_diff(&g, &expect) < 1e-12);
    }

    #[test]
    fn combined_gradient_without_likelihood_is_prior() {
        let m = LinearGaussianModel::new(2, 1.0).unwrap();
        let d = Dataset::for_model(&m, vec![Observation { features: vec![0.0, 0.0], target: 0.0 }; 4]).unwrap();
        let theta = [0.5, -2.0];
        for omega in [
            Subsample { large: vec![0], overlap: vec![3] },
            Subsample { large: vec![1, 2, 2], overlap: vec![0, 1] },
        ] {
            assert_eq!(combined_gradient(&m, &d, &theta, &omega).unwrap(), theta.to_vec());
        }
    }

    #[test]
    fn combined_gradient_rejects_empty_part() {
        let (m, d) = three_records();
        let omega = Subsample { large: vec![], overlap: vec![1] };
        assert!(combined_gradient(&m, &d, &[0.0, 0.0], &omega).is_err());
        let omega = Subsample { large: vec![1], overlap: vec![] };
        assert!(combined_gradient(&m, &d, &[0.0, 0.0], &omega).is_err());
    }

    #[test]
    fn subsample_determinism_and_support() {
        let a = draw_subsample(&mut stream(7), 50, 10, 3).unwrap();
        let b = draw_subsample(&mut stream(7), 50, 10, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.large.len(), a.overlap.len()), (10, 3));
        let single = draw_subsample(&mut stream(1), 1, 5, 2).unwrap();
        assert!(single.concatenated().iter().all(|&i| i == 0));
        assert!(draw_subsample(&mut stream(1), 5, 0, 2).is_err());
        assert!(draw_subsample(&mut stream(1), 5, 2, 0).is_err());
    }

    #[test]
    fn pack_unpack_layout() {
        let m = MatrixFactorizationModel::new(2, 3, 2).unwrap();
        let f = [1.0, 2.0, 3.0, 4.0];
        let g = [5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let theta = m.pack(&f, &g).unwrap();
        assert_eq!(theta.len(), m.dim());
        // row 1 of F is (3, 4); column 2 of G is (7, 10)
        assert_eq!(m.predict(&theta, 1, 2), 3.0 * 7.0 + 4.0 * 10.0);
        let (f2, g2) = m.unpack(&theta).unwrap();
        assert_eq!((f2.as_slice(), g2.as_slice()), (&f[..], &g[..]));
    }
}
