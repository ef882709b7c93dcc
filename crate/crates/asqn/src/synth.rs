//! Synthetic problem instances.

use asqn_core::model::{
    potential, Dataset, LinearGaussianModel, MatrixFactorizationModel, Observation, Rating,
};
use asqn_core::rng::{fill_standard_normal, standard_normal, stream};
use asqn_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// A linear Gaussian problem with its exact optimum.
#[derive(Debug, Clone)]
pub struct LinearGaussianInstance {
    pub model: LinearGaussianModel,
    pub data: Dataset<Observation>,
    pub theta_star: Vec<f64>,
    /// `U(θ*)`
    pub optimum: f64,
}

/// Rank of the shared feature component.
const SHARED_RANK: usize = 3;

/// Expected squared norm of a feature row. At `N = 600`, `d = 100`,
/// `σ² = 10` this puts the average likelihood curvature at 0.3 against the
/// unit prior: big enough to correlate the posterior, small enough that the
/// momentum recursion stays stable under the stock step sizes with tens of
/// stale workers.
const ROW_NORM2: f64 = 0.5;

/// Features `a_n = sqrt(s / d) (sqrt(1 - c) z_n + sqrt(c) B w_n / sqrt(r))`
/// with `z_n`, `w_n` and the `d × r` basis `B` standard normal and
/// `s = ROW_NORM2`. `c ∈ [0, 1)` sets how strongly rows share the
/// `r`-dimensional direction set (and how ill-conditioned `AᵀA` is).
/// Targets follow the model from `θ_true ~ N(0, I)`.
pub fn synth_linear_gaussian(
    seed: u64,
    dim: usize,
    records: usize,
    noise_variance: f64,
    correlation: f64,
) -> Result<LinearGaussianInstance> {
    if dim == 0 || records == 0 {
        return Err(Error::InvalidArgument("dimension and record count must be positive".into()));
    }
    if !(0.0..1.0).contains(&correlation) {
        return Err(Error::InvalidArgument("correlation must lie in [0, 1)".into()));
    }
    let model = LinearGaussianModel::new(dim, noise_variance)?;
    let mut rng = stream(seed);
    let rank = SHARED_RANK.min(dim);
    let mut basis = vec![0.0; dim * rank];
    fill_standard_normal(&mut rng, &mut basis);
    let mut theta_true = vec![0.0; dim];
    fill_standard_normal(&mut rng, &mut theta_true);

    let own = ((1.0 - correlation) * ROW_NORM2 / dim as f64).sqrt();
    let shared = (correlation * ROW_NORM2 / (rank * dim) as f64).sqrt();
    let noise = noise_variance.sqrt();
    let mut w = vec![0.0; rank];
    let recs = (0..records)
        .map(|_| {
            let mut features = vec![0.0; dim];
            fill_standard_normal(&mut rng, &mut features);
            fill_standard_normal(&mut rng, &mut w);
            for (i, f) in features.iter_mut().enumerate() {
                *f = own * *f + shared * (0..rank).map(|k| basis[i * rank + k] * w[k]).sum::<f64>();
            }
            let mean: f64 = features.iter().zip(&theta_true).map(|(a, t)| a * t).sum();
            Observation { target: mean + noise * standard_normal(&mut rng), features }
        })
        .collect();
    let data = Dataset::for_model(&model, recs)?;
    let (theta_star, optimum) = solve_linear_gaussian(&model, &data)?;
    Ok(LinearGaussianInstance { model, data, theta_star, optimum })
}

/// Closed-form minimizer `θ* = (I + AᵀA/σ²)⁻¹ AᵀY/σ²` and `U(θ*)`.
pub fn solve_linear_gaussian(model: &LinearGaussianModel, data: &Dataset<Observation>) -> Result<(Vec<f64>, f64)> {
    let d = asqn_core::model::Model::dim(model);
    let var = model.noise_variance();
    let mut system = DMatrix::<f64>::identity(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for r in data.records() {
        let a = DVector::from_column_slice(&r.features);
        system.syger(1.0 / var, &a, &a, 1.0);
        rhs.axpy(r.target / var, &a, 1.0);
    }
    let chol = system
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("normal equations are not positive definite".into()))?;
    let theta: Vec<f64> = chol.solve(&rhs).iter().copied().collect();
    let optimum = potential(model, data, &theta)?;
    Ok((theta, optimum))
}

/// A synthetic low-rank matrix completion problem.
#[derive(Debug, Clone)]
pub struct FactorizationInstance {
    pub model: MatrixFactorizationModel,
    pub data: Dataset<Rating>,
}

/// Observes each entry of `X = F G + σ ε` with probability `observed`,
/// where `F` (rows × true_rank) and `G` have i.i.d. `N(0, true_rank^{-1/2})`
/// entries so `F G` has unit-variance entries. The returned model has rank
/// `rank`.
pub fn synth_factorization(
    seed: u64,
    rows: usize,
    cols: usize,
    true_rank: usize,
    rank: usize,
    noise_std: f64,
    observed: f64,
) -> Result<FactorizationInstance> {
    if true_rank == 0 || !(observed > 0.0 && observed <= 1.0) || !(noise_std >= 0.0) {
        return Err(Error::InvalidArgument("need positive true rank, observed fraction in (0, 1] and noise >= 0".into()));
    }
    let model = MatrixFactorizationModel::new(rows, cols, rank)?;
    let mut rng = stream(seed);
    let scale = (true_rank as f64).powf(-0.25);
    let mut f = vec![0.0; rows * true_rank];
    let mut g = vec![0.0; true_rank * cols];
    fill_standard_normal(&mut rng, &mut f);
    fill_standard_normal(&mut rng, &mut g);
    let mut recs = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            if rng.random::<f64>() >= observed {
                continue;
            }
            let clean: f64 = (0..true_rank).map(|k| f[row * true_rank + k] * g[k * cols + col]).sum::<f64>() * scale * scale;
            recs.push(Rating { row, col, value: clean + noise_std * standard_normal(&mut rng) });
        }
    }
    let data = Dataset::for_model(&model, recs)?;
    Ok(FactorizationInstance { model, data })
}
