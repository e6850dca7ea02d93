//! Horizontal error metrics and the track file shared by all engines.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{vincenty_distance, GeoError, GeodeticPoint};
use crate::ingest::{fmt_f64, read_table, truth_at, write_table, GroundTruthTrack, IngestError};

pub const TRACK_HEADER: [&str; 5] = ["time_ms", "lat_deg", "lon_deg", "alt_m", "clk_m"];
pub const ECDF_HEADER: [&str; 2] = ["error_m", "fraction"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no errors to summarize")]
    Empty,
    #[error("no track epoch has truth within {0} ms")]
    Alignment(i64),
    #[error("epoch {time_ms}: {source}")]
    Geo {
        time_ms: i64,
        #[source]
        source: GeoError,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub time_ms: i64,
    pub pos: GeodeticPoint<f64>,
    pub clock_bias_m: f64,
}

pub fn write_track_csv<W: Write>(w: W, track: &[TrackPoint]) -> std::io::Result<()> {
    write_table(
        w,
        &TRACK_HEADER,
        track.iter().map(|p| {
            vec![
                p.time_ms.to_string(),
                fmt_f64(p.pos.lat_deg),
                fmt_f64(p.pos.lon_deg),
                fmt_f64(p.pos.alt_m),
                fmt_f64(p.clock_bias_m),
            ]
        }),
    )
}

pub fn parse_track_csv<R: Read>(r: R) -> Result<Vec<TrackPoint>, IngestError> {
    let mut out: Vec<TrackPoint> = Vec::new();
    for row in read_table(r, &TRACK_HEADER)? {
        let p = TrackPoint {
            time_ms: row.int(0)?,
            pos: GeodeticPoint::new(row.float(1)?, row.float(2)?, row.float(3)?),
            clock_bias_m: row.float(4)?,
        };
        if !p.pos.is_valid() {
            return Err(IngestError::Range {
                line: row.line,
                message: "latitude or longitude out of range".into(),
            });
        }
        if out.last().is_some_and(|q| q.time_ms >= p.time_ms) {
            return Err(IngestError::Order { line: row.line });
        }
        out.push(p);
    }
    Ok(out)
}

/// Vincenty distance to the interpolated truth for every track epoch that
/// has truth within `tolerance_ms`.
pub fn horizontal_errors(
    track: &[TrackPoint],
    truth: &GroundTruthTrack<f64>,
    tolerance_ms: i64,
) -> Result<Vec<(i64, f64)>, EvalError> {
    let mut out = Vec::with_capacity(track.len());
    for p in track {
        if let Some(t) = truth_at(truth, p.time_ms, tolerance_ms) {
            let d = vincenty_distance(&p.pos, &t).map_err(|source| EvalError::Geo {
                time_ms: p.time_ms,
                source,
            })?;
            out.push((p.time_ms, d));
        }
    }
    if out.is_empty() {
        return Err(EvalError::Alignment(tolerance_ms));
    }
    Ok(out)
}

/// Percentile by linear interpolation between closest ranks of the sorted
/// sample (position `p/100 * (N - 1)`).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(errors: &[f64]) -> Result<Vec<f64>, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Mean of the 50th and 95th percentile.
pub fn score(errors: &[f64]) -> Result<f64, EvalError> {
    let s = sorted(errors)?;
    Ok((percentile(&s, 50.0) + percentile(&s, 95.0)) / 2.0)
}

/// Sorted errors paired with cumulative fractions `i / N`.
pub fn ecdf(errors: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    let s = sorted(errors)?;
    let n = s.len() as f64;
    Ok(s.into_iter()
        .enumerate()
        .map(|(i, e)| (e, (i + 1) as f64 / n))
        .collect())
}

pub fn write_ecdf_csv<W: Write>(w: W, table: &[(f64, f64)]) -> std::io::Result<()> {
    write_table(
        w,
        &ECDF_HEADER,
        table.iter().map(|(e, f)| vec![fmt_f64(*e), fmt_f64(*f)]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochError {
    pub time_ms: i64,
    pub error_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epochs: usize,
    pub p50_m: f64,
    pub p95_m: f64,
    pub score_m: f64,
    pub horizontal_errors: Vec<EpochError>,
    /// `(error_m, fraction)` pairs.
    pub ecdf: Vec<(f64, f64)>,
}

pub fn evaluate(
    track: &[TrackPoint],
    truth: &GroundTruthTrack<f64>,
    tolerance_ms: i64,
) -> Result<EvalReport, EvalError> {
    let errs = horizontal_errors(track, truth, tolerance_ms)?;
    let values: Vec<f64> = errs.iter().map(|e| e.1).collect();
    let s = sorted(&values)?;
    let (p50, p95) = (percentile(&s, 50.0), percentile(&s, 95.0));
    Ok(EvalReport {
        epochs: errs.len(),
        p50_m: p50,
        p95_m: p95,
        score_m: (p50 + p95) / 2.0,
        horizontal_errors: errs
            .into_iter()
            .map(|(time_ms, error_m)| EpochError { time_ms, error_m })
            .collect(),
        ecdf: ecdf(&values)?,
    })
}
