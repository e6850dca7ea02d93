//! Trace-level localization engines: an extended Kalman filter, the
//! Rauch-Tung-Striebel smoother on top of it, and moving horizon estimation
//! as sliding-window batch least squares.
//!
//! All engines share an 8-state clock-augmented constant-velocity model
//! `[x, y, z, vx, vy, vz, clock_m, drift_mps]` driven by white acceleration
//! (PSD `process_noise_vel`) and white clock-drift rate (PSD
//! `process_noise_clk`).

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::EcefPoint;
use crate::ingest::MeasurementSet;
use crate::num::Real;
use crate::solver::{wls_solve, NavSolution, SolverError, CONVERGENCE_M, MAX_ITERATIONS};

pub type StateVector<T> = SVector<T, 8>;
pub type StateMatrix<T> = SMatrix<T, 8, 8>;

/// Epochs the smoother needs before its output is trusted for labeling.
pub const SMOOTHER_WARMUP_EPOCHS: usize = 120;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("empty trace")]
    EmptyTrace,
    #[error("epoch {epoch}: {source}")]
    Solver {
        epoch: usize,
        #[source]
        source: SolverError,
    },
    #[error("epoch {0}: covariance is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("epoch {0}: non-increasing timestamp")]
    TimeOrder(usize),
    #[error("epoch {0}: forward pass has no stored prediction")]
    MissingPrediction(usize),
    #[error("invalid estimator config: {0}")]
    Config(String),
}

fn default_q_vel() -> f64 {
    1.0
}
fn default_q_clk() -> f64 {
    0.1
}
fn default_window() -> usize {
    10
}
fn default_init_pos() -> f64 {
    10.0
}
fn default_init_vel() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Acceleration PSD, m^2/s^3.
    #[serde(default = "default_q_vel")]
    pub process_noise_vel: f64,
    /// Clock-drift PSD, m^2/s^3.
    #[serde(default = "default_q_clk")]
    pub process_noise_clk: f64,
    #[serde(default = "default_window")]
    pub mhe_window: usize,
    /// Prior 1-sigma on position and clock around the first WLS fix.
    #[serde(default = "default_init_pos")]
    pub init_pos_sigma_m: f64,
    /// Prior 1-sigma on velocity and clock drift.
    #[serde(default = "default_init_vel")]
    pub init_vel_sigma_mps: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            process_noise_vel: default_q_vel(),
            process_noise_clk: default_q_clk(),
            mhe_window: default_window(),
            init_pos_sigma_m: default_init_pos(),
            init_vel_sigma_mps: default_init_vel(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::Config(m.into()));
        if !(self.process_noise_vel >= 0.0) || !(self.process_noise_clk >= 0.0) {
            return bad("process noise must be non-negative");
        }
        if self.mhe_window == 0 {
            return bad("mhe_window must be at least 1");
        }
        if !(self.init_pos_sigma_m > 0.0) || !(self.init_vel_sigma_mps > 0.0) {
            return bad("initial sigmas must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState<T: Real> {
    pub state: StateVector<T>,
    pub covariance: StateMatrix<T>,
}

impl<T: Real> FilterState<T> {
    pub fn pos(&self) -> EcefPoint<T> {
        EcefPoint::new(self.state[0], self.state[1], self.state[2])
    }

    pub fn clock_bias_m(&self) -> T {
        self.state[6]
    }
}

/// One filtered epoch with the prediction that preceded its update.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardStep<T: Real> {
    pub time_ms: i64,
    /// Prior for this epoch; for the first epoch this is the initial prior.
    pub predicted: Option<FilterState<T>>,
    pub filtered: FilterState<T>,
    /// Transition from the previous epoch (identity for the first).
    pub transition: StateMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass<T: Real> {
    pub steps: Vec<ForwardStep<T>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn filtered(&self) -> impl Iterator<Item = &FilterState<T>> {
        self.steps.iter().map(|s| &s.filtered)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedPoint<T: Real> {
    pub time_ms: i64,
    pub pos: EcefPoint<T>,
    pub clock_bias_m: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrack<T: Real> {
    pub points: Vec<SmoothedPoint<T>>,
    /// Smoothed state and covariance per epoch.
    pub states: Vec<FilterState<T>>,
}

fn transition<T: Real>(dt: T) -> StateMatrix<T> {
    let mut f = StateMatrix::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    f[(6, 7)] = dt;
    f
}

fn process_noise<T: Real>(dt: T, q_vel: T, q_clk: T) -> StateMatrix<T> {
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    let three = T::lit(3.0);
    let two = T::lit(2.0);
    let mut q = StateMatrix::zeros();
    for i in 0..3 {
        q[(i, i)] = q_vel * dt3 / three;
        q[(i, i + 3)] = q_vel * dt2 / two;
        q[(i + 3, i)] = q_vel * dt2 / two;
        q[(i + 3, i + 3)] = q_vel * dt;
    }
    q[(6, 6)] = q_clk * dt3 / three;
    q[(6, 7)] = q_clk * dt2 / two;
    q[(7, 6)] = q_clk * dt2 / two;
    q[(7, 7)] = q_clk * dt;
    q
}

fn symmetrize<T: Real>(p: &StateMatrix<T>) -> StateMatrix<T> {
    (p + p.transpose()) * T::lit(0.5)
}

fn require_pd<T: Real>(p: &StateMatrix<T>, epoch: usize) -> Result<(), EstimatorError> {
    let finite = p.iter().all(|v| v.is_finite_value());
    if !finite || p.cholesky().is_none() {
        return Err(EstimatorError::NotPositiveDefinite(epoch));
    }
    Ok(())
}

fn prior<T: Real>(
    epoch: &MeasurementSet<T>,
    config: &EstimatorConfig,
) -> Result<FilterState<T>, EstimatorError> {
    let (nav, _) = wls_solve(epoch, &NavSolution::cold_start())
        .map_err(|source| EstimatorError::Solver { epoch: 0, source })?;
    let mut state = StateVector::zeros();
    state[0] = nav.pos.x;
    state[1] = nav.pos.y;
    state[2] = nav.pos.z;
    state[6] = nav.clock_bias_m;
    let sp = T::lit(config.init_pos_sigma_m.powi(2));
    let sv = T::lit(config.init_vel_sigma_mps.powi(2));
    let covariance = StateMatrix::from_diagonal(&StateVector::from_column_slice(&[
        sp, sp, sp, sv, sv, sv, sp, sv,
    ]));
    Ok(FilterState { state, covariance })
}

/// Pseudorange measurement update in Joseph form.
fn measurement_update<T: Real>(
    prior: &FilterState<T>,
    epoch: &MeasurementSet<T>,
    index: usize,
) -> Result<FilterState<T>, EstimatorError> {
    let m = epoch.obs.len();
    if m < 4 {
        return Err(EstimatorError::Solver {
            epoch: index,
            source: SolverError::Underdetermined(m),
        });
    }
    let pos = prior.pos();
    let mut h = DMatrix::<T>::zeros(m, 8);
    let mut innov = DVector::<T>::zeros(m);
    let mut r = DMatrix::<T>::zeros(m, m);
    for (i, o) in epoch.obs.iter().enumerate() {
        let d = pos.to_vector() - o.sat_pos.to_vector();
        let range = d.norm();
        if range == T::zero() {
            return Err(EstimatorError::Solver {
                epoch: index,
                source: SolverError::CoincidentPoint(i),
            });
        }
        for k in 0..3 {
            h[(i, k)] = d[k] / range;
        }
        h[(i, 6)] = T::one();
        innov[i] = o.pr_m - range - prior.state[6];
        r[(i, i)] = o.pr_sigma_m * o.pr_sigma_m;
    }
    let p = DMatrix::from_column_slice(8, 8, prior.covariance.as_slice());
    let pht = &p * h.transpose();
    let s = &h * &pht + &r;
    let chol = s
        .cholesky()
        .ok_or(EstimatorError::NotPositiveDefinite(index))?;
    // K = P H^T S^-1, computed as (S^-1 H P)^T.
    let k = chol.solve(&pht.transpose()).transpose();
    let dx = &k * innov;
    let ikh = DMatrix::<T>::identity(8, 8) - &k * &h;
    let joseph = &ikh * &p * ikh.transpose() + &k * r * k.transpose();

    let state = prior.state + StateVector::from_column_slice(dx.as_slice());
    let covariance = symmetrize(&StateMatrix::from_column_slice(joseph.as_slice()));
    require_pd(&covariance, index)?;
    Ok(FilterState { state, covariance })
}

pub fn ekf_forward<T: Real>(
    epochs: &[MeasurementSet<T>],
    config: &EstimatorConfig,
) -> Result<ForwardPass<T>, EstimatorError> {
    config.validate()?;
    let first = epochs.first().ok_or(EstimatorError::EmptyTrace)?;
    let q_vel = T::lit(config.process_noise_vel);
    let q_clk = T::lit(config.process_noise_clk);

    let init = prior(first, config)?;
    let filtered = measurement_update(&init, first, 0)?;
    let mut steps = vec![ForwardStep {
        time_ms: first.time_ms,
        predicted: Some(init),
        filtered,
        transition: StateMatrix::identity(),
    }];
    for (k, e) in epochs.iter().enumerate().skip(1) {
        let last = steps.last().unwrap();
        if e.time_ms <= last.time_ms {
            return Err(EstimatorError::TimeOrder(k));
        }
        let dt = T::lit((e.time_ms - last.time_ms) as f64 / 1000.0);
        let f = transition(dt);
        let predicted = FilterState {
            state: f * last.filtered.state,
            covariance: symmetrize(
                &(f * last.filtered.covariance * f.transpose() + process_noise(dt, q_vel, q_clk)),
            ),
        };
        let filtered = measurement_update(&predicted, e, k)?;
        steps.push(ForwardStep {
            time_ms: e.time_ms,
            predicted: Some(predicted),
            filtered,
            transition: f,
        });
    }
    Ok(ForwardPass { steps })
}

/// Backward Rauch-Tung-Striebel recursion over a stored forward pass.
pub fn rts_smooth<T: Real>(forward: &ForwardPass<T>) -> Result<SmoothedTrack<T>, EstimatorError> {
    let n = forward.steps.len();
    if n == 0 {
        return Err(EstimatorError::EmptyTrace);
    }
    let mut states: Vec<FilterState<T>> = vec![forward.steps[n - 1].filtered; n];
    for k in (0..n - 1).rev() {
        let cur = &forward.steps[k].filtered;
        let next = &forward.steps[k + 1];
        let pred = next
            .predicted
            .as_ref()
            .ok_or(EstimatorError::MissingPrediction(k + 1))?;
        let chol = pred
            .covariance
            .cholesky()
            .ok_or(EstimatorError::NotPositiveDefinite(k + 1))?;
        // C = P_k F^T P_pred^-1 = (P_pred^-1 F P_k)^T
        let gain = chol.solve(&(next.transition * cur.covariance)).transpose();
        let smoothed_next = states[k + 1];
        let state = cur.state + gain * (smoothed_next.state - pred.state);
        let covariance = symmetrize(
            &(cur.covariance
                + gain * (smoothed_next.covariance - pred.covariance) * gain.transpose()),
        );
        states[k] = FilterState { state, covariance };
    }
    let points = forward
        .steps
        .iter()
        .zip(&states)
        .map(|(s, x)| SmoothedPoint {
            time_ms: s.time_ms,
            pos: x.pos(),
            clock_bias_m: x.clock_bias_m(),
        })
        .collect();
    Ok(SmoothedTrack { points, states })
}

/// Sliding-window batch least squares over the last `window` epochs.
///
/// Unknowns are per-epoch `[x, y, z, clock]`. Besides the weighted
/// pseudoranges, each interior epoch contributes a constant-velocity prior
/// on the change of mean velocity (and of clock drift) between its two
/// neighboring intervals, with variance `q (dt1 + dt2) / 3`. A window of one
/// epoch carries no prior and reduces to WLS.
pub fn mhe_solve<T: Real>(
    epochs: &[MeasurementSet<T>],
    window: usize,
    config: &EstimatorConfig,
) -> Result<Vec<NavSolution<T>>, EstimatorError> {
    config.validate()?;
    if window == 0 {
        return Err(EstimatorError::Config("window must be at least 1".into()));
    }
    let mut estimates: Vec<Vector4<T>> = Vec::with_capacity(epochs.len());
    let mut out = Vec::with_capacity(epochs.len());
    for (k, e) in epochs.iter().enumerate() {
        if k > 0 && e.time_ms <= epochs[k - 1].time_ms {
            return Err(EstimatorError::TimeOrder(k));
        }
        let seed = match estimates.last() {
            Some(x) => NavSolution::guess(EcefPoint::new(x[0], x[1], x[2]), x[3]),
            None => NavSolution::cold_start(),
        };
        let (nav, _) =
            wls_solve(e, &seed).map_err(|source| EstimatorError::Solver { epoch: k, source })?;
        estimates.push(nav.state());

        let start = (k + 1).saturating_sub(window);
        let (iterations, converged) = refine_window(epochs, start, k, &mut estimates, config)?;
        let x = estimates[k];
        out.push(NavSolution {
            pos: EcefPoint::new(x[0], x[1], x[2]),
            clock_bias_m: x[3],
            iterations,
            converged,
        });
    }
    Ok(out)
}

fn prior_weight<T: Real>(q: f64, dt1: f64, dt2: f64) -> T {
    let sigma = (q * (dt1 + dt2) / 3.0).sqrt().max(1e-6);
    T::lit(1.0 / sigma)
}

fn refine_window<T: Real>(
    epochs: &[MeasurementSet<T>],
    start: usize,
    end: usize,
    estimates: &mut [Vector4<T>],
    config: &EstimatorConfig,
) -> Result<(usize, bool), EstimatorError> {
    let len = end - start + 1;
    let n_unknown = 4 * len;
    let n_meas: usize = epochs[start..=end].iter().map(|e| e.obs.len()).sum();
    let n_prior = 4 * len.saturating_sub(2);
    let rows = n_meas + n_prior;
    let tol = T::lit(CONVERGENCE_M);

    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jac = DMatrix::<T>::zeros(rows, n_unknown);
        let mut res = DVector::<T>::zeros(rows);
        let mut row = 0;
        for j in start..=end {
            let col = 4 * (j - start);
            let x = estimates[j];
            for (i, o) in epochs[j].obs.iter().enumerate() {
                let d = nalgebra::Vector3::new(x[0], x[1], x[2]) - o.sat_pos.to_vector();
                let range = d.norm();
                if range == T::zero() {
                    return Err(EstimatorError::Solver {
                        epoch: j,
                        source: SolverError::CoincidentPoint(i),
                    });
                }
                let w = T::one() / o.pr_sigma_m;
                for c in 0..3 {
                    jac[(row, col + c)] = w * d[c] / range;
                }
                jac[(row, col + 3)] = w;
                res[row] = w * (o.pr_m - range - x[3]);
                row += 1;
            }
        }
        for j in (start + 1)..end {
            let dt1 = (epochs[j].time_ms - epochs[j - 1].time_ms) as f64 / 1000.0;
            let dt2 = (epochs[j + 1].time_ms - epochs[j].time_ms) as f64 / 1000.0;
            let (a, b) = (T::lit(1.0 / dt1), T::lit(1.0 / dt2));
            let (xp, xc, xn) = (estimates[j - 1], estimates[j], estimates[j + 1]);
            let cp = 4 * (j - 1 - start);
            for c in 0..4 {
                let q = if c < 3 {
                    config.process_noise_vel
                } else {
                    config.process_noise_clk
                };
                let w: T = prior_weight(q, dt1, dt2);
                // r = ((x_{j+1} - x_j)/dt2 - (x_j - x_{j-1})/dt1) / sigma
                jac[(row, cp + c)] = w * a;
                jac[(row, cp + 4 + c)] = -w * (a + b);
                jac[(row, cp + 8 + c)] = w * b;
                res[row] = -w * ((xn[c] - xc[c]) * b - (xc[c] - xp[c]) * a);
                row += 1;
            }
        }
        let normal = jac.transpose() * &jac;
        let rhs = jac.transpose() * res;
        let chol = normal.cholesky().ok_or(EstimatorError::Solver {
            epoch: end,
            source: SolverError::Geometry(f64::INFINITY),
        })?;
        let delta = chol.solve(&rhs);
        let mut max_step = T::zero();
        for j in start..=end {
            let col = 4 * (j - start);
            let step = Vector4::new(delta[col], delta[col + 1], delta[col + 2], delta[col + 3]);
            estimates[j] += step;
            let s = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
            if s > max_step {
                max_step = s;
            }
        }
        if max_step < tol {
            return Ok((iterations, true));
        }
    }
    Ok((iterations, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::wls_trace;

    fn stationary(n: usize, sigma: f64, seed: u64) -> crate::simulator::SimulatedTrace {
        crate::simulator::simulate_trace(&crate::simulator::ScenarioConfig::stationary(
            n, sigma, seed,
        ))
        .unwrap()
    }

    fn still_config() -> EstimatorConfig {
        EstimatorConfig {
            process_noise_vel: 0.0,
            process_noise_clk: 0.0,
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn noise_free_filter_and_smoother_hit_truth() {
        let tr = stationary(30, 0.0, 1);
        let fwd = ekf_forward(&tr.epochs, &still_config()).unwrap();
        for (k, s) in fwd.filtered().enumerate().skip(10) {
            assert!(s.pos().distance(&tr.truth_ecef[k]) < 1e-3, "epoch {k}");
        }
        let sm = rts_smooth(&fwd).unwrap();
        for (k, p) in sm.points.iter().enumerate() {
            assert!(p.pos.distance(&tr.truth_ecef[k]) < 1e-3);
        }
    }

    #[test]
    fn single_epoch_is_one_update() {
        let tr = stationary(1, 3.0, 2);
        let cfg = EstimatorConfig::default();
        let fwd = ekf_forward(&tr.epochs, &cfg).unwrap();
        assert_eq!(fwd.steps.len(), 1);
        let manual =
            measurement_update(&prior(&tr.epochs[0], &cfg).unwrap(), &tr.epochs[0], 0).unwrap();
        assert_eq!(fwd.steps[0].filtered, manual);
        let sm = rts_smooth(&fwd).unwrap();
        assert_eq!(sm.states[0], fwd.steps[0].filtered);
    }

    #[test]
    fn smoother_base_case_and_covariance_trace() {
        let tr = stationary(60, 3.0, 3);
        let fwd = ekf_forward(&tr.epochs, &EstimatorConfig::default()).unwrap();
        let sm = rts_smooth(&fwd).unwrap();
        assert_eq!(sm.states.last(), fwd.steps.last().map(|s| &s.filtered));
        for (s, f) in sm.states.iter().zip(fwd.filtered()) {
            assert!(s.covariance.trace() <= f.covariance.trace() + 1e-9);
            assert!((s.covariance - s.covariance.transpose()).amax() < 1e-9);
        }
    }

    #[test]
    fn missing_prediction_is_reported() {
        let tr = stationary(5, 3.0, 4);
        let mut fwd = ekf_forward(&tr.epochs, &EstimatorConfig::default()).unwrap();
        fwd.steps[3].predicted = None;
        assert_eq!(
            rts_smooth(&fwd).unwrap_err(),
            EstimatorError::MissingPrediction(3)
        );
        assert_eq!(
            rts_smooth(&ForwardPass::<f64> { steps: vec![] }).unwrap_err(),
            EstimatorError::EmptyTrace
        );
    }

    #[test]
    fn mhe_window_one_is_wls() {
        let tr = stationary(15, 3.0, 5);
        let mhe = mhe_solve(&tr.epochs, 1, &EstimatorConfig::default()).unwrap();
        let wls = wls_trace(&tr.epochs).unwrap();
        for (a, (b, _)) in mhe.iter().zip(&wls) {
            assert!(a.pos.distance(&b.pos) < 1e-6);
        }
    }

    #[test]
    fn mhe_short_trace_truncates_window() {
        let tr = stationary(4, 3.0, 6);
        let out = mhe_solve(&tr.epochs, 10, &EstimatorConfig::default()).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|s| s.converged));
    }

    #[test]
    fn engines_are_bit_reproducible() {
        let tr = stationary(40, 3.0, 7);
        let cfg = EstimatorConfig::default();
        assert_eq!(
            ekf_forward(&tr.epochs, &cfg).unwrap(),
            ekf_forward(&tr.epochs, &cfg).unwrap()
        );
        assert_eq!(
            mhe_solve(&tr.epochs, 10, &cfg).unwrap(),
            mhe_solve(&tr.epochs, 10, &cfg).unwrap()
        );
    }

    #[test]
    fn config_json_keys() {
        let cfg: EstimatorConfig = serde_json::from_str(
            r#"{"process_noise_vel": 0.5, "process_noise_clk": 0.2, "mhe_window": 5, "init_pos_sigma_m": 30}"#,
        )
        .unwrap();
        assert_eq!(cfg.mhe_window, 5);
        assert_eq!(cfg.init_vel_sigma_mps, 10.0);
        assert!(serde_json::from_str::<EstimatorConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = EstimatorConfig {
            mhe_window: 0,
            ..EstimatorConfig::default()
        };
        assert!(matches!(bad.validate(), Err(EstimatorError::Config(_))));
    }
}
