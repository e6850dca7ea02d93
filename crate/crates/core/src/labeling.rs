//! Pseudorange error estimates and smoothed bias labels.
//!
//! A label is the range difference `|x̄ - sat| - |x - sat|` between the
//! smoothed receiver position `x̄` and the true position `x`. To first order
//! it equals `g · (x̄ - x)`, the bias that leaks into the position solution.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use thiserror::Error;

use crate::estimators::{ekf_forward, rts_smooth, EstimatorConfig, EstimatorError, SmoothedTrack};
use crate::geo::{geodetic_to_ecef, EcefPoint};
use crate::ingest::{
    align_truth, fmt_f64, read_table, write_table, GroundTruthTrack, IngestError, MeasurementSet,
    DEFAULT_ALIGN_TOLERANCE_MS,
};
use crate::num::Real;
use crate::solver::{wls_trace, NavSolution, SolverError};

pub const DEFAULT_DISCARD_EPOCHS: usize = 120;
pub const LABEL_BOUND_M: f64 = 1000.0;
pub const LABELS_HEADER: [&str; 3] = ["time_ms", "svid", "label_m"];
pub const H_ROWS_HEADER: [&str; 3] = ["time_ms", "svid", "h_value"];
pub const LABELS_FILE: &str = "labels.csv";
pub const H_ROWS_FILE: &str = "h_rows.csv";

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("no epochs left after discarding {discard} of {epochs}")]
    EmptyDataset { epochs: usize, discard: usize },
    #[error("length mismatch: {epochs} epochs, {other} {what}")]
    Length {
        epochs: usize,
        other: usize,
        what: &'static str,
    },
    #[error("epoch {time_ms}: no aligned truth")]
    MissingTruth { time_ms: i64 },
    #[error("epoch {time_ms} svid {svid}: label {value} m out of bounds")]
    Bound { time_ms: i64, svid: u8, value: f64 },
    #[error("epoch {time_ms}: h-row sums to {sum}")]
    HRow { time_ms: i64, sum: f64 },
    #[error("label and h-row files disagree at epoch {time_ms}")]
    Mismatch { time_ms: i64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Pseudorange errors `ρ - r - δt̂` against the true position, using the
/// clock estimate of the epoch's WLS solution.
pub fn estimate_pr_errors<T: Real>(
    epoch: &MeasurementSet<T>,
    truth_pos: &EcefPoint<T>,
    wls: &NavSolution<T>,
) -> DVector<T> {
    DVector::from_iterator(
        epoch.obs.len(),
        epoch
            .obs
            .iter()
            .map(|o| o.pr_m - truth_pos.distance(&o.sat_pos) - wls.clock_bias_m),
    )
}

pub fn smoothed_label<T: Real>(
    sat_pos: &EcefPoint<T>,
    smoothed_pos: &EcefPoint<T>,
    truth_pos: &EcefPoint<T>,
) -> T {
    smoothed_pos.distance(sat_pos) - truth_pos.distance(sat_pos)
}

/// Gap between the exact label and its linearization `g · (x̄ - x)`, with
/// `g` the unit receiver-minus-satellite vector at the true position.
pub fn linearization_residual<T: Real>(
    sat_pos: &EcefPoint<T>,
    smoothed_pos: &EcefPoint<T>,
    truth_pos: &EcefPoint<T>,
) -> T {
    let los = truth_pos.to_vector() - sat_pos.to_vector();
    let g = los / los.norm();
    let d = smoothed_pos.to_vector() - truth_pos.to_vector();
    (smoothed_label(sat_pos, smoothed_pos, truth_pos) - g.dot(&d)).abs()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLabels<T> {
    pub time_ms: i64,
    pub svids: Vec<u8>,
    pub labels: Vec<T>,
    /// Epoch h-row in the same satellite order.
    pub h_row: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRecord<T> {
    pub time_ms: i64,
    pub svid: u8,
    pub label_m: T,
    pub h_value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelDataset<T> {
    pub epochs: Vec<EpochLabels<T>>,
    /// Largest linearization residual seen while labeling.
    pub max_linearization_residual: T,
}

impl<T: Real> LabelDataset<T> {
    pub fn records(&self) -> Vec<LabelRecord<T>> {
        self.epochs
            .iter()
            .flat_map(|e| {
                e.svids.iter().zip(&e.labels).zip(&e.h_row).map(
                    move |((&svid, &label_m), &h_value)| LabelRecord {
                        time_ms: e.time_ms,
                        svid,
                        label_m,
                        h_value,
                    },
                )
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

/// Labels every epoch after the first `discard`, with h-rows from WLS.
///
/// `truth` holds the aligned true position of each epoch.
pub fn build_label_dataset<T: Real>(
    epochs: &[MeasurementSet<T>],
    truth: &[EcefPoint<T>],
    smoothed: &SmoothedTrack<T>,
    discard: usize,
) -> Result<LabelDataset<T>, LabelError> {
    if truth.len() != epochs.len() {
        return Err(LabelError::Length {
            epochs: epochs.len(),
            other: truth.len(),
            what: "truth points",
        });
    }
    if smoothed.points.len() != epochs.len() {
        return Err(LabelError::Length {
            epochs: epochs.len(),
            other: smoothed.points.len(),
            what: "smoothed points",
        });
    }
    if epochs.len() <= discard {
        return Err(LabelError::EmptyDataset {
            epochs: epochs.len(),
            discard,
        });
    }
    let wls = wls_trace(epochs)?;
    let mut out = Vec::with_capacity(epochs.len() - discard);
    let mut max_res = T::zero();
    for k in discard..epochs.len() {
        let e = &epochs[k];
        let xbar = smoothed.points[k].pos;
        let x = truth[k];
        let mut labels = Vec::with_capacity(e.obs.len());
        for o in &e.obs {
            let label = smoothed_label(&o.sat_pos, &xbar, &x);
            if !(label.abs().as_f64() < LABEL_BOUND_M) {
                return Err(LabelError::Bound {
                    time_ms: e.time_ms,
                    svid: o.svid,
                    value: label.as_f64(),
                });
            }
            let r = linearization_residual(&o.sat_pos, &xbar, &x);
            if r > max_res {
                max_res = r;
            }
            labels.push(label);
        }
        let h_row: Vec<T> = wls[k].1.h_row.iter().copied().collect();
        check_h_row(e.time_ms, &h_row)?;
        out.push(EpochLabels {
            time_ms: e.time_ms,
            svids: e.svids(),
            labels,
            h_row,
        });
    }
    Ok(LabelDataset {
        epochs: out,
        max_linearization_residual: max_res,
    })
}

fn check_h_row<T: Real>(time_ms: i64, h: &[T]) -> Result<(), LabelError> {
    let sum: f64 = h.iter().map(|v| v.as_f64()).sum();
    if !sum.is_finite() || (sum - 1.0).abs() > 1e-9 {
        return Err(LabelError::HRow { time_ms, sum });
    }
    Ok(())
}

/// Truth alignment, EKF + RTS smoothing and labeling in one call.
pub fn label_trace(
    epochs: &[MeasurementSet<f64>],
    truth: &GroundTruthTrack<f64>,
    config: &EstimatorConfig,
    discard: usize,
) -> Result<LabelDataset<f64>, LabelError> {
    let aligned = align_truth(epochs, truth, DEFAULT_ALIGN_TOLERANCE_MS)?;
    if aligned.pairs.len() != epochs.len() {
        let missing = epochs
            .iter()
            .find(|e| !aligned.pairs.iter().any(|(m, _)| m.time_ms == e.time_ms))
            .map_or(0, |e| e.time_ms);
        return Err(LabelError::MissingTruth { time_ms: missing });
    }
    let truth_ecef: Vec<EcefPoint<f64>> = aligned
        .pairs
        .iter()
        .map(|(_, g)| geodetic_to_ecef(g))
        .collect();
    let smoothed = rts_smooth(&ekf_forward(epochs, config)?)?;
    build_label_dataset(epochs, &truth_ecef, &smoothed, discard)
}

pub fn write_labels<W: Write>(w: W, data: &LabelDataset<f64>) -> std::io::Result<()> {
    let rows = data.records();
    write_table(
        w,
        &LABELS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.time_ms.to_string(),
                r.svid.to_string(),
                fmt_f64(r.label_m),
            ]
        }),
    )
}

pub fn write_h_rows<W: Write>(w: W, data: &LabelDataset<f64>) -> std::io::Result<()> {
    let rows = data.records();
    write_table(
        w,
        &H_ROWS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.time_ms.to_string(),
                r.svid.to_string(),
                fmt_f64(r.h_value),
            ]
        }),
    )
}

fn read_sidecar<R: Read>(
    r: R,
    header: &[&str],
) -> Result<BTreeMap<i64, Vec<(u8, f64)>>, IngestError> {
    let mut map: BTreeMap<i64, Vec<(u8, f64)>> = BTreeMap::new();
    for row in read_table(r, header)? {
        let time_ms = row.int(0)?;
        let svid = row.svid(1)?;
        let value = row.float(2)?;
        let slot = map.entry(time_ms).or_default();
        if slot.iter().any(|(s, _)| *s == svid) {
            return Err(IngestError::Duplicate {
                line: row.line,
                time_ms,
                svid,
            });
        }
        slot.push((svid, value));
    }
    Ok(map)
}

/// Reads a label directory written by [`write_label_dir`].
pub fn read_label_dir(dir: &Path) -> Result<LabelDataset<f64>, LabelError> {
    let labels = read_sidecar(
        BufReader::new(File::open(dir.join(LABELS_FILE))?),
        &LABELS_HEADER,
    )?;
    let h_rows = read_sidecar(
        BufReader::new(File::open(dir.join(H_ROWS_FILE))?),
        &H_ROWS_HEADER,
    )?;
    if labels.len() != h_rows.len() {
        let time_ms = labels
            .keys()
            .chain(h_rows.keys())
            .find(|t| !labels.contains_key(t) || !h_rows.contains_key(t))
            .copied()
            .unwrap_or(0);
        return Err(LabelError::Mismatch { time_ms });
    }
    let mut epochs = Vec::with_capacity(labels.len());
    for ((&time_ms, l), (&th, h)) in labels.iter().zip(&h_rows) {
        let same = time_ms == th && l.len() == h.len() && l.iter().zip(h).all(|(a, b)| a.0 == b.0);
        if !same {
            return Err(LabelError::Mismatch { time_ms });
        }
        let h_row: Vec<f64> = h.iter().map(|p| p.1).collect();
        check_h_row(time_ms, &h_row)?;
        epochs.push(EpochLabels {
            time_ms,
            svids: l.iter().map(|p| p.0).collect(),
            labels: l.iter().map(|p| p.1).collect(),
            h_row,
        });
    }
    Ok(LabelDataset {
        epochs,
        max_linearization_residual: 0.0,
    })
}

pub fn write_label_dir(dir: &Path, data: &LabelDataset<f64>) -> Result<(), LabelError> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(LABELS_FILE))?);
    write_labels(&mut w, data)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(H_ROWS_FILE))?);
    write_h_rows(&mut w, data)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SatObservation;
    use crate::simulator::{simulate_trace, BiasSpec, ScenarioConfig};
    use crate::solver::wls_solve;

    fn obs(svid: u8, pr_m: f64, sat: EcefPoint<f64>) -> SatObservation<f64> {
        SatObservation {
            svid,
            pr_m,
            cn0_dbhz: 40.0,
            sat_pos: sat,
            pr_sigma_m: 1.0,
        }
    }

    #[test]
    fn pr_error_arithmetic() {
        let epoch = MeasurementSet {
            time_ms: 0,
            obs: vec![obs(1, 100.0, EcefPoint::new(90.0, 0.0, 0.0))],
        };
        let wls = NavSolution::guess(EcefPoint::origin(), 5.0);
        let e = estimate_pr_errors(&epoch, &EcefPoint::origin(), &wls);
        assert_eq!(e[0], 5.0);
    }

    fn biased(bias: BiasSpec, noise: f64, n: usize) -> crate::simulator::SimulatedTrace {
        let mut cfg = ScenarioConfig::stationary(n, noise, 11);
        cfg.bias = bias;
        simulate_trace(&cfg).unwrap()
    }

    #[test]
    fn clock_residual_identity() {
        let tr = biased(
            BiasSpec::Elevation {
                amplitude_m: 10.0,
                scale_deg: 30.0,
            },
            0.0,
            20,
        );
        for (k, e) in tr.epochs.iter().enumerate() {
            let (nav, geom) = wls_solve(e, &NavSolution::cold_start()).unwrap();
            let est = estimate_pr_errors(e, &tr.truth_ecef[k], &nav);
            let truth_eps: Vec<f64> = tr.epoch_sidecar(k).iter().map(|r| r.mu_m + r.v_m).collect();
            let eps = DVector::from_vec(truth_eps);
            let lhs = est - &eps;
            let rhs = -(geom.h_row.dot(&eps));
            for v in lhs.iter() {
                assert!((v - rhs).abs() < 1e-3, "{v} vs {rhs}");
            }
        }
    }

    #[test]
    fn common_error_is_removed() {
        let tr = biased(BiasSpec::Constant { value_m: 7.0 }, 0.0, 5);
        for (k, e) in tr.epochs.iter().enumerate() {
            let (nav, _) = wls_solve(e, &NavSolution::cold_start()).unwrap();
            let est = estimate_pr_errors(e, &tr.truth_ecef[k], &nav);
            // with a common 7 m error the clock absorbs it fully
            assert!(est.amax() < 1e-3);
        }
    }

    #[test]
    fn label_sign_and_zero() {
        let x = EcefPoint::new(6_378_137.0f64, 0.0, 0.0);
        let sat = EcefPoint::new(26_560_000.0, 3_000_000.0, 1_000_000.0);
        assert_eq!(smoothed_label(&sat, &x, &x), 0.0);
        let toward = (sat.to_vector() - x.to_vector()).normalize();
        let xbar = EcefPoint::from_vector(&(x.to_vector() + toward * 2.0));
        let direct =
            (sat.to_vector() - xbar.to_vector()).norm() - (sat.to_vector() - x.to_vector()).norm();
        let l = smoothed_label(&sat, &xbar, &x);
        assert!((l + 2.0).abs() < 1e-6);
        assert!((l - direct).abs() < 1e-9);
    }

    #[test]
    fn linearization_bound() {
        let x = EcefPoint::new(-2_700_000.0, -4_290_000.0, 3_860_000.0);
        let sat = EcefPoint::new(-10_000_000.0, -15_000_000.0, 20_000_000.0);
        for d in [(30.0, -20.0, 25.0), (-1.0, 2.0, 0.5), (0.0, 0.0, 49.9)] {
            let xbar = EcefPoint::new(x.x + d.0, x.y + d.1, x.z + d.2);
            assert!(linearization_residual(&sat, &xbar, &x) < 1e-3);
        }
    }

    #[test]
    fn discard_counts() {
        let tr = biased(BiasSpec::None, 3.0, 200);
        let cfg = EstimatorConfig::default();
        let data = label_trace(&tr.epochs, &tr.truth, &cfg, 120).unwrap();
        assert_eq!(data.len(), 80);
        assert_eq!(data.epochs[0].time_ms, tr.epochs[120].time_ms);
        assert_eq!(data.epochs.last().unwrap().time_ms, tr.epochs[199].time_ms);

        let short = biased(BiasSpec::None, 3.0, 10);
        assert_eq!(
            label_trace(&short.epochs, &short.truth, &cfg, 0)
                .unwrap()
                .len(),
            10
        );
        assert!(matches!(
            label_trace(&short.epochs, &short.truth, &cfg, 120),
            Err(LabelError::EmptyDataset { .. })
        ));
    }

    #[test]
    fn labels_ignore_common_offset() {
        let tr = biased(BiasSpec::None, 3.0, 40);
        let cfg = EstimatorConfig::default();
        let a = label_trace(&tr.epochs, &tr.truth, &cfg, 0).unwrap();
        let mut shifted = tr.epochs.clone();
        for e in &mut shifted {
            for o in &mut e.obs {
                o.pr_m += 10.0;
            }
        }
        let b = label_trace(&shifted, &tr.truth, &cfg, 0).unwrap();
        for (x, y) in a.records().iter().zip(b.records()) {
            assert!((x.label_m - y.label_m).abs() < 1e-6);
            assert!((x.h_value - y.h_value).abs() < 1e-9);
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let tr = biased(BiasSpec::None, 3.0, 15);
        let data = label_trace(&tr.epochs, &tr.truth, &EstimatorConfig::default(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_label_dir(dir.path(), &data).unwrap();
        let back = read_label_dir(dir.path()).unwrap();
        assert_eq!(back.epochs, data.epochs);
    }

    #[test]
    fn mismatched_sidecars_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(LABELS_FILE),
            "time_ms,svid,label_m\n0,1,0.5\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join(H_ROWS_FILE),
            "time_ms,svid,h_value\n0,2,1.0\n",
        )
        .unwrap();
        assert!(matches!(
            read_label_dir(dir.path()),
            Err(LabelError::Mismatch { time_ms: 0 })
        ));
    }
}
