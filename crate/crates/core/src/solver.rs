//! Iterative weighted least squares positioning and its geometry byproducts.
//!
//! The linearized system is `W G (X - X~) = W dRho` with `G` rows
//! `[(x~ - x_sat)/r~, 1]` and `W = diag(1/sigma)`. Each Gauss-Newton step is
//! `dX = (W G)^+ W dRho`. The last row of `(W G)^+ W`, the h-row, maps
//! pseudorange errors to the clock estimate and always sums to one.

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use thiserror::Error;

use crate::geo::EcefPoint;
use crate::ingest::MeasurementSet;
use crate::num::Real;

pub const MAX_ITERATIONS: usize = 20;
pub const CONVERGENCE_M: f64 = 1e-4;
/// Largest acceptable condition number of `W G`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("underdetermined: {0} satellites, at least 4 required")]
    Underdetermined(usize),
    #[error("singular geometry: condition number {0:e}")]
    Geometry(f64),
    #[error("satellite {0} coincides with the linearization point")]
    CoincidentPoint(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no satellites")]
    Empty,
}

/// Estimated receiver state at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavSolution<T> {
    pub pos: EcefPoint<T>,
    /// Receiver clock offset expressed in meters.
    pub clock_bias_m: T,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> NavSolution<T> {
    pub fn guess(pos: EcefPoint<T>, clock_bias_m: T) -> Self {
        Self {
            pos,
            clock_bias_m,
            iterations: 0,
            converged: false,
        }
    }

    /// Earth center with zero clock offset.
    pub fn cold_start() -> Self {
        Self::guess(EcefPoint::origin(), T::zero())
    }

    pub fn state(&self) -> Vector4<T> {
        Vector4::new(self.pos.x, self.pos.y, self.pos.z, self.clock_bias_m)
    }
}

/// Geometry captured at the final WLS iterate of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySolve<T: Real> {
    /// M x 4 geometry matrix.
    pub geometry: DMatrix<T>,
    /// Diagonal of `W`, one entry `1/sigma` per satellite.
    pub weights: DVector<T>,
    /// Last row of `(W G)^+ W`.
    pub h_row: DVector<T>,
    pub svids: Vec<u8>,
    /// Post-fit pseudorange residuals.
    pub residuals: DVector<T>,
}

impl<T: Real> GeometrySolve<T> {
    pub fn len(&self) -> usize {
        self.svids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.svids.is_empty()
    }

    /// Receiver-minus-satellite unit vector of row `i`.
    pub fn unit_vector(&self, i: usize) -> Vector3<T> {
        Vector3::new(
            self.geometry[(i, 0)],
            self.geometry[(i, 1)],
            self.geometry[(i, 2)],
        )
    }

    /// `(W G)^+ W`, 4 x M.
    pub fn projector(&self) -> Result<DMatrix<T>, SolverError> {
        weighted_pseudo_inverse(&self.geometry, &self.weights)
    }
}

pub fn geometry_matrix<T: Real>(
    approx: &EcefPoint<T>,
    sats: &[EcefPoint<T>],
) -> Result<DMatrix<T>, SolverError> {
    if sats.is_empty() {
        return Err(SolverError::Empty);
    }
    let mut g = DMatrix::zeros(sats.len(), 4);
    let ap = approx.to_vector();
    for (i, s) in sats.iter().enumerate() {
        let d = ap - s.to_vector();
        let r = d.norm();
        if r == T::zero() {
            return Err(SolverError::CoincidentPoint(i));
        }
        g[(i, 0)] = d[0] / r;
        g[(i, 1)] = d[1] / r;
        g[(i, 2)] = d[2] / r;
        g[(i, 3)] = T::one();
    }
    Ok(g)
}

/// Computes `(W G)^+ W` for `W = diag(weights)`.
///
/// Uses the normal equations while their conditioning is acceptable and
/// falls back to an SVD otherwise.
pub fn weighted_pseudo_inverse<T: Real>(
    g: &DMatrix<T>,
    weights: &DVector<T>,
) -> Result<DMatrix<T>, SolverError> {
    let (m, n) = g.shape();
    if weights.len() != m {
        return Err(SolverError::DimensionMismatch {
            expected: m,
            found: weights.len(),
        });
    }
    if m < n {
        return Err(SolverError::Underdetermined(m));
    }
    let mut a = g.clone();
    for (i, mut row) in a.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    let normal = a.transpose() * &a;
    let eig = normal.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let normal_ok = lmin > T::zero() && lmax / lmin <= T::lit(MAX_CONDITION);

    let a_pinv = match normal.cholesky().filter(|_| normal_ok) {
        Some(chol) => chol.solve(&a.transpose()),
        None => {
            let svd = a.clone().svd(true, true);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if smin <= T::zero() || smax / smin > T::lit(MAX_CONDITION) {
                let cond = if smin > T::zero() {
                    (smax / smin).as_f64()
                } else {
                    f64::INFINITY
                };
                return Err(SolverError::Geometry(cond));
            }
            svd.pseudo_inverse(T::zero())
                .map_err(|_| SolverError::Geometry(f64::INFINITY))?
        }
    };
    let mut s = a_pinv;
    for (j, mut col) in s.column_iter_mut().enumerate() {
        col *= weights[j];
    }
    Ok(s)
}

fn ranges<T: Real>(pos: &EcefPoint<T>, epoch: &MeasurementSet<T>) -> DVector<T> {
    DVector::from_iterator(
        epoch.obs.len(),
        epoch.obs.iter().map(|o| pos.distance(&o.sat_pos)),
    )
}

/// Gauss-Newton WLS for one epoch starting from `init`.
///
/// Stops once the position update is below 1e-4 m or after 20 iterations;
/// in the latter case the solution is returned with `converged == false`.
pub fn wls_solve<T: Real>(
    epoch: &MeasurementSet<T>,
    init: &NavSolution<T>,
) -> Result<(NavSolution<T>, GeometrySolve<T>), SolverError> {
    let m = epoch.obs.len();
    if m < 4 {
        return Err(SolverError::Underdetermined(m));
    }
    let sats: Vec<EcefPoint<T>> = epoch.obs.iter().map(|o| o.sat_pos).collect();
    let weights = DVector::from_iterator(m, epoch.obs.iter().map(|o| T::one() / o.pr_sigma_m));
    let rho = DVector::from_iterator(m, epoch.obs.iter().map(|o| o.pr_m));

    let mut state = init.state();
    let mut iterations = 0;
    let mut converged = false;
    let tol = T::lit(CONVERGENCE_M);
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let pos = EcefPoint::new(state[0], state[1], state[2]);
        let g = geometry_matrix(&pos, &sats)?;
        let s = weighted_pseudo_inverse(&g, &weights)?;
        let d_rho = &rho - ranges(&pos, epoch).add_scalar(state[3]);
        let dx = s * d_rho;
        state += Vector4::new(dx[0], dx[1], dx[2], dx[3]);
        if Vector3::new(dx[0], dx[1], dx[2]).norm() < tol {
            converged = true;
            break;
        }
    }

    let pos = EcefPoint::new(state[0], state[1], state[2]);
    let geometry = geometry_matrix(&pos, &sats)?;
    let s = weighted_pseudo_inverse(&geometry, &weights)?;
    let h_row = s.row(3).transpose();
    let residuals = &rho - ranges(&pos, epoch).add_scalar(state[3]);
    let nav = NavSolution {
        pos,
        clock_bias_m: state[3],
        iterations,
        converged,
    };
    let geom = GeometrySolve {
        geometry,
        weights,
        h_row,
        svids: epoch.svids(),
        residuals,
    };
    Ok((nav, geom))
}

/// Solves every epoch in order, seeding each with the previous solution and
/// the first with a cold start at the Earth's center.
pub fn wls_trace<T: Real>(
    epochs: &[MeasurementSet<T>],
) -> Result<Vec<(NavSolution<T>, GeometrySolve<T>)>, SolverError> {
    let mut out = Vec::with_capacity(epochs.len());
    let mut init = NavSolution::cold_start();
    for e in epochs {
        let (nav, geom) = wls_solve(e, &init)?;
        init = NavSolution::guess(nav.pos, nav.clock_bias_m);
        out.push((nav, geom));
    }
    Ok(out)
}

/// First-order state error `-(W G)^+ W eps` caused by pseudorange errors.
pub fn wls_state_error_predict<T: Real>(
    geom: &GeometrySolve<T>,
    eps: &DVector<T>,
) -> Result<Vector4<T>, SolverError> {
    if eps.len() != geom.len() {
        return Err(SolverError::DimensionMismatch {
            expected: geom.len(),
            found: eps.len(),
        });
    }
    let v = -(geom.projector()? * eps);
    Ok(Vector4::new(v[0], v[1], v[2], v[3]))
}
