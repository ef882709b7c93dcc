//! Limited-memory curvature store and the two-loop recursion.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot, norm_sq};

/// Default threshold of the cautious admission rule.
pub const DEFAULT_CAUTIOUS_EPSILON: f64 = 1e-8;

/// One stored (iterate difference, gradient difference) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    /// `1 / (yᵀs)`, positive for every stored pair.
    inv_curvature: f64,
}

impl CurvaturePair {
    pub fn curvature(&self) -> f64 {
        1.0 / self.inv_curvature
    }
}

/// FIFO of at most `capacity` curvature pairs defining an inverse-Hessian
/// approximation `H`, applied as `(H + shift·I) v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsMemory {
    dim: usize,
    capacity: usize,
    epsilon: f64,
    shift: f64,
    pairs: VecDeque<CurvaturePair>,
}

impl LbfgsMemory {
    pub fn new(dim: usize, capacity: usize, epsilon: f64, shift: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("memory dimension must be positive"));
        }
        if capacity == 0 {
            return Err(Error::config("memory capacity must be positive"));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config("cautious epsilon must be positive and finite"));
        }
        if !(shift >= 0.0 && shift.is_finite()) {
            return Err(Error::config("stabilizing shift must be nonnegative and finite"));
        }
        Ok(LbfgsMemory {
            dim,
            capacity,
            epsilon,
            shift,
            pairs: VecDeque::with_capacity(capacity),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stored pairs, oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = &CurvaturePair> {
        self.pairs.iter()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Cautious update: admits `(s, y)` iff `s ≠ 0` and `yᵀs ≥ ε‖s‖²`,
    /// evicting the oldest pair when full. Returns whether it was admitted.
    ///
    /// A zero `s` passes the inequality trivially but would make `1/(yᵀs)`
    /// undefined, so it is rejected up front.
    pub fn try_add(&mut self, s: &[f64], y: &[f64]) -> Result<bool> {
        check_dim(self.dim, s.len())?;
        check_dim(self.dim, y.len())?;
        let ss = norm_sq(s);
        if ss == 0.0 || !ss.is_finite() {
            return Ok(false);
        }
        let ys = dot(y, s);
        if !ys.is_finite() || ys < self.epsilon * ss || ys <= 0.0 {
            return Ok(false);
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(CurvaturePair {
            s: s.to_vec(),
            y: y.to_vec(),
            inv_curvature: 1.0 / ys,
        });
        Ok(true)
    }

    /// Scale `sᵀy / yᵀy` of the newest pair, 1 when empty.
    pub fn initial_scale(&self) -> f64 {
        match self.pairs.back() {
            Some(p) => p.curvature() / norm_sq(&p.y),
            None => 1.0,
        }
    }

    /// Computes `(H + shift·I) v` by the two-loop recursion in `O(M d)`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.apply_into(v, &mut out)?;
        Ok(out)
    }

    /// Like [`apply`](Self::apply), overwriting `out`.
    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim, v.len())?;
        check_dim(self.dim, out.len())?;
        out.copy_from_slice(v);

        let mut alphas = [0.0f64; 16];
        let mut alpha_heap;
        let alphas: &mut [f64] = if self.pairs.len() <= alphas.len() {
            &mut alphas[..self.pairs.len()]
        } else {
            alpha_heap = vec![0.0; self.pairs.len()];
            &mut alpha_heap
        };

        for (i, p) in self.pairs.iter().enumerate().rev() {
            let a = p.inv_curvature * dot(&p.s, out);
            alphas[i] = a;
            axpy(-a, &p.y, out);
        }
        let gamma = self.initial_scale();
        for x in out.iter_mut() {
            *x *= gamma;
        }
        for (i, p) in self.pairs.iter().enumerate() {
            let b = p.inv_curvature * dot(&p.y, out);
            axpy(alphas[i] - b, &p.s, out);
        }
        if self.shift != 0.0 {
            axpy(self.shift, v, out);
        }
        Ok(())
    }

    /// Builds the dense `d × d` matrix `H + shift·I` (row-major) by applying
    /// the recursion to the basis vectors. For tests and diagnostics on
    /// small `d` only.
    pub fn materialize(&self) -> Vec<f64> {
        let d = self.dim;
        let mut dense = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            self.apply_into(&e, &mut col).expect("dimensions agree");
            for i in 0..d {
                dense[i * d + j] = col[i];
            }
            e[j] = 0.0;
        }
        dense
    }

    /// Smallest eigenvalue of the symmetrized dense `H + shift·I`.
    pub fn positive_definiteness_check(&self) -> f64 {
        let d = self.dim;
        let dense = self.materialize();
        let m = nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (dense[i * d + j] + dense[j * d + i]));
        m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }
}
