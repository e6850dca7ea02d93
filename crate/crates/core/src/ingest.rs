//! Canonical epoch and ground-truth CSV files, shared CSV plumbing, and
//! truth-to-epoch alignment.
//!
//! All tables are comma separated with a fixed header, `.` decimal point,
//! `\n` line endings and no quoting. Floats are written in the shortest
//! representation that parses back to the identical bit pattern.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{EcefPoint, GeodeticPoint};
use crate::num::Real;

pub const EPOCHS_HEADER: [&str; 8] = [
    "time_ms",
    "svid",
    "pr_m",
    "cn0_dbhz",
    "sat_x_m",
    "sat_y_m",
    "sat_z_m",
    "pr_sigma_m",
];
pub const TRUTH_HEADER: [&str; 4] = ["time_ms", "lat_deg", "lon_deg", "alt_m"];

/// Number of GPS PRN slots.
pub const MAX_SVID: u8 = 32;
pub const DEFAULT_ALIGN_TOLERANCE_MS: i64 = 500;
const MIN_PSEUDORANGE_M: f64 = 1e6;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: bad header, expected `{expected}`, found `{found}`")]
    Header {
        line: u64,
        expected: String,
        found: String,
    },
    #[error("line {line}, column {column}: cannot parse `{value}` as a number")]
    Parse {
        line: u64,
        column: usize,
        value: String,
    },
    #[error("line {line}: {message}")]
    Range { line: u64, message: String },
    #[error("line {line}: duplicate observation for time_ms={time_ms} svid={svid}")]
    Duplicate { line: u64, time_ms: i64, svid: u8 },
    #[error("line {line}: time_ms is not strictly increasing")]
    Order { line: u64 },
    #[error("alignment produced no epoch/truth pairs")]
    Alignment,
}

/// One satellite's corrected pseudorange observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatObservation<T> {
    pub svid: u8,
    pub pr_m: T,
    pub cn0_dbhz: T,
    pub sat_pos: EcefPoint<T>,
    pub pr_sigma_m: T,
}

/// All observations sharing one timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet<T> {
    pub time_ms: i64,
    pub obs: Vec<SatObservation<T>>,
}

impl<T: Real> MeasurementSet<T> {
    pub fn svids(&self) -> Vec<u8> {
        self.obs.iter().map(|o| o.svid).collect()
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint<T> {
    pub time_ms: i64,
    pub pos: GeodeticPoint<T>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruthTrack<T> {
    pub points: Vec<TruthPoint<T>>,
}

impl<T> GroundTruthTrack<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One parsed data row with its 1-based line number.
#[derive(Debug, Clone)]
pub struct Row {
    pub line: u64,
    fields: csv::StringRecord,
}

impl Row {
    pub fn str(&self, column: usize) -> &str {
        self.fields.get(column).unwrap_or("")
    }

    pub fn float(&self, column: usize) -> Result<f64, IngestError> {
        let s = self.str(column);
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(IngestError::Parse {
                line: self.line,
                column: column + 1,
                value: s.to_string(),
            }),
        }
    }

    pub fn int(&self, column: usize) -> Result<i64, IngestError> {
        let s = self.str(column);
        s.parse::<i64>().map_err(|_| IngestError::Parse {
            line: self.line,
            column: column + 1,
            value: s.to_string(),
        })
    }

    pub fn svid(&self, column: usize) -> Result<u8, IngestError> {
        let v = self.int(column)?;
        if !(1..=MAX_SVID as i64).contains(&v) {
            return Err(IngestError::Range {
                line: self.line,
                message: format!("svid {v} outside 1..={MAX_SVID}"),
            });
        }
        Ok(v as u8)
    }
}

/// Reads a headered table, checking the header verbatim.
pub fn read_table<R: Read>(reader: R, header: &[&str]) -> Result<Vec<Row>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let expected = header.join(",");
    let first = match records.next() {
        Some(r) => r.map_err(csv_err)?,
        None => {
            return Err(IngestError::Header {
                line: 1,
                expected,
                found: String::new(),
            })
        }
    };
    let found: Vec<&str> = first.iter().collect();
    if found != header {
        return Err(IngestError::Header {
            line: first.position().map_or(1, |p| p.line()),
            expected,
            found: found.join(","),
        });
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != header.len() {
            return Err(IngestError::Malformed {
                line,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push(Row { line, fields: rec });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> IngestError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        other => IngestError::Malformed {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Shortest decimal form that round-trips to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Writes a header line and rows of preformatted fields.
pub fn write_table<W, I>(mut w: W, header: &[&str], rows: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = Vec<String>>,
{
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

pub fn parse_epochs_csv<R: Read>(reader: R) -> Result<Vec<MeasurementSet<f64>>, IngestError> {
    let rows = read_table(reader, &EPOCHS_HEADER)?;
    let mut groups: BTreeMap<i64, Vec<SatObservation<f64>>> = BTreeMap::new();
    let mut seen: HashSet<(i64, u8)> = HashSet::new();
    for row in &rows {
        let time_ms = row.int(0)?;
        let svid = row.svid(1)?;
        let pr_m = row.float(2)?;
        let cn0_dbhz = row.float(3)?;
        let sat_pos = EcefPoint::new(row.float(4)?, row.float(5)?, row.float(6)?);
        let pr_sigma_m = row.float(7)?;
        if pr_sigma_m <= 0.0 {
            return Err(IngestError::Range {
                line: row.line,
                message: format!("pr_sigma_m must be positive, got {pr_sigma_m}"),
            });
        }
        if pr_m <= MIN_PSEUDORANGE_M {
            return Err(IngestError::Range {
                line: row.line,
                message: format!("pr_m {pr_m} below sanity bound {MIN_PSEUDORANGE_M}"),
            });
        }
        if !seen.insert((time_ms, svid)) {
            return Err(IngestError::Duplicate {
                line: row.line,
                time_ms,
                svid,
            });
        }
        groups.entry(time_ms).or_default().push(SatObservation {
            svid,
            pr_m,
            cn0_dbhz,
            sat_pos,
            pr_sigma_m,
        });
    }
    Ok(groups
        .into_iter()
        .map(|(time_ms, obs)| MeasurementSet { time_ms, obs })
        .collect())
}

pub fn write_epochs_csv<W: Write>(w: W, epochs: &[MeasurementSet<f64>]) -> std::io::Result<()> {
    let rows = epochs.iter().flat_map(|e| {
        e.obs.iter().map(move |o| {
            vec![
                e.time_ms.to_string(),
                o.svid.to_string(),
                fmt_f64(o.pr_m),
                fmt_f64(o.cn0_dbhz),
                fmt_f64(o.sat_pos.x),
                fmt_f64(o.sat_pos.y),
                fmt_f64(o.sat_pos.z),
                fmt_f64(o.pr_sigma_m),
            ]
        })
    });
    write_table(w, &EPOCHS_HEADER, rows)
}

pub fn parse_ground_truth_csv<R: Read>(reader: R) -> Result<GroundTruthTrack<f64>, IngestError> {
    let rows = read_table(reader, &TRUTH_HEADER)?;
    let mut points = Vec::with_capacity(rows.len());
    let mut last: Option<i64> = None;
    for row in &rows {
        let time_ms = row.int(0)?;
        let pos = GeodeticPoint::new(row.float(1)?, row.float(2)?, row.float(3)?);
        if !pos.is_valid() {
            return Err(IngestError::Range {
                line: row.line,
                message: format!(
                    "geodetic point out of range: lat {} lon {}",
                    pos.lat_deg, pos.lon_deg
                ),
            });
        }
        if last.is_some_and(|t| time_ms <= t) {
            return Err(IngestError::Order { line: row.line });
        }
        last = Some(time_ms);
        points.push(TruthPoint { time_ms, pos });
    }
    Ok(GroundTruthTrack { points })
}

pub fn write_ground_truth_csv<W: Write>(
    w: W,
    truth: &GroundTruthTrack<f64>,
) -> std::io::Result<()> {
    let rows = truth.points.iter().map(|p| {
        vec![
            p.time_ms.to_string(),
            fmt_f64(p.pos.lat_deg),
            fmt_f64(p.pos.lon_deg),
            fmt_f64(p.pos.alt_m),
        ]
    });
    write_table(w, &TRUTH_HEADER, rows)
}

/// Truth position at `time_ms`: the nearest truth sample must lie within
/// `tolerance_ms`; when the time is bracketed by two samples the position is
/// interpolated linearly in geodetic coordinates.
pub fn truth_at<T: Real>(
    truth: &GroundTruthTrack<T>,
    time_ms: i64,
    tolerance_ms: i64,
) -> Option<GeodeticPoint<T>> {
    let pts = &truth.points;
    let idx = pts.partition_point(|p| p.time_ms < time_ms);
    let after = pts.get(idx);
    let before = idx.checked_sub(1).and_then(|i| pts.get(i));
    let nearest = match (before, after) {
        (Some(b), Some(a)) => (time_ms - b.time_ms).min(a.time_ms - time_ms),
        (Some(b), None) => time_ms - b.time_ms,
        (None, Some(a)) => a.time_ms - time_ms,
        (None, None) => return None,
    };
    if nearest > tolerance_ms {
        return None;
    }
    match (before, after) {
        (_, Some(a)) if a.time_ms == time_ms => Some(a.pos),
        (Some(b), Some(a)) => {
            let frac = T::lit((time_ms - b.time_ms) as f64 / (a.time_ms - b.time_ms) as f64);
            Some(lerp_geodetic(&b.pos, &a.pos, frac))
        }
        (Some(b), None) => Some(b.pos),
        (None, Some(a)) => Some(a.pos),
        (None, None) => None,
    }
}

fn lerp_geodetic<T: Real>(a: &GeodeticPoint<T>, b: &GeodeticPoint<T>, frac: T) -> GeodeticPoint<T> {
    let full = T::lit(360.0);
    let half = T::lit(180.0);
    let mut dlon = b.lon_deg - a.lon_deg;
    if dlon > half {
        dlon -= full;
    } else if dlon <= -half {
        dlon += full;
    }
    let mut lon = a.lon_deg + frac * dlon;
    if lon > half {
        lon -= full;
    } else if lon <= -half {
        lon += full;
    }
    GeodeticPoint::new(
        a.lat_deg + frac * (b.lat_deg - a.lat_deg),
        lon,
        a.alt_m + frac * (b.alt_m - a.alt_m),
    )
}

/// Epochs paired with their truth position, plus the count of epochs that
/// had no truth within tolerance.
#[derive(Debug, Clone)]
pub struct Alignment<T> {
    pub pairs: Vec<(MeasurementSet<T>, GeodeticPoint<T>)>,
    pub dropped: usize,
}

pub fn align_truth<T: Real>(
    epochs: &[MeasurementSet<T>],
    truth: &GroundTruthTrack<T>,
    tolerance_ms: i64,
) -> Result<Alignment<T>, IngestError> {
    let mut pairs = Vec::with_capacity(epochs.len());
    let mut dropped = 0;
    for e in epochs {
        match truth_at(truth, e.time_ms, tolerance_ms) {
            Some(p) => pairs.push((e.clone(), p)),
            None => dropped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(IngestError::Alignment);
    }
    Ok(Alignment { pairs, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HDR: &str = "time_ms,svid,pr_m,cn0_dbhz,sat_x_m,sat_y_m,sat_z_m,pr_sigma_m\n";

    #[test]
    fn groups_rows_by_time() {
        let text = format!(
            "{HDR}2000,5,2.1e7,40,1,2,3,5\n1000,3,2.2e7,41,1,2,3,5\n1000,9,2.3e7,42,4,5,6,4\n"
        );
        let epochs = parse_epochs_csv(text.as_bytes()).unwrap();
        assert_eq!(epochs.len(), 2);
        assert_eq!(epochs[0].time_ms, 1000);
        assert_eq!(epochs[0].svids(), vec![3, 9]);
        assert_eq!(epochs[1].obs.len(), 1);
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse_epochs_csv(HDR.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn bad_rows_are_located() {
        let e =
            parse_epochs_csv(format!("{HDR}1000,33,2.1e7,40,1,2,3,5\n").as_bytes()).unwrap_err();
        assert!(matches!(e, IngestError::Range { line: 2, .. }), "{e}");

        let e = parse_epochs_csv(format!("{HDR}1000,3,abc,40,1,2,3,5\n").as_bytes()).unwrap_err();
        assert!(
            matches!(
                e,
                IngestError::Parse {
                    line: 2,
                    column: 3,
                    ..
                }
            ),
            "{e}"
        );

        let text = format!("{HDR}1000,3,2.1e7,40,1,2,3,5\n1000,3,2.1e7,40,1,2,3,5\n");
        let e = parse_epochs_csv(text.as_bytes()).unwrap_err();
        assert!(
            matches!(
                e,
                IngestError::Duplicate {
                    line: 3,
                    svid: 3,
                    ..
                }
            ),
            "{e}"
        );

        let e = parse_epochs_csv("svid,time_ms\n".as_bytes()).unwrap_err();
        assert!(matches!(e, IngestError::Header { line: 1, .. }), "{e}");

        let e = parse_epochs_csv(format!("{HDR}1000,3,2.1e7,40,1,2,3,0\n").as_bytes()).unwrap_err();
        assert!(matches!(e, IngestError::Range { .. }));
    }

    #[test]
    fn truth_parsing() {
        let ok =
            "time_ms,lat_deg,lon_deg,alt_m\n0,37,-122,10\n1000,37.1,-122,10\n2000,37.2,-122,10\n";
        assert_eq!(parse_ground_truth_csv(ok.as_bytes()).unwrap().len(), 3);
        let bad_lat = "time_ms,lat_deg,lon_deg,alt_m\n0,91,0,0\n";
        assert!(matches!(
            parse_ground_truth_csv(bad_lat.as_bytes()),
            Err(IngestError::Range { line: 2, .. })
        ));
        let dec = "time_ms,lat_deg,lon_deg,alt_m\n1000,0,0,0\n500,0,0,0\n";
        assert!(matches!(
            parse_ground_truth_csv(dec.as_bytes()),
            Err(IngestError::Order { line: 3 })
        ));
    }

    fn epoch_at(t: i64) -> MeasurementSet<f64> {
        MeasurementSet {
            time_ms: t,
            obs: vec![],
        }
    }

    fn track(points: &[(i64, f64, f64)]) -> GroundTruthTrack<f64> {
        GroundTruthTrack {
            points: points
                .iter()
                .map(|&(t, la, lo)| TruthPoint {
                    time_ms: t,
                    pos: GeodeticPoint::new(la, lo, 0.0),
                })
                .collect(),
        }
    }

    #[test]
    fn alignment_rules() {
        let tr = track(&[(1000, 10.0, 20.0), (2000, 11.0, 22.0)]);
        let a = align_truth(&[epoch_at(1000), epoch_at(2000)], &tr, 500).unwrap();
        assert_eq!(a.pairs.len(), 2);
        assert_eq!(a.pairs[0].1, tr.points[0].pos);
        assert_eq!(a.pairs[1].1, tr.points[1].pos);

        let a = align_truth(&[epoch_at(1500)], &tr, 500).unwrap();
        assert_eq!(a.pairs[0].1, GeodeticPoint::new(10.5, 21.0, 0.0));

        let a = align_truth(&[epoch_at(1000), epoch_at(12_000)], &tr, 500).unwrap();
        assert_eq!((a.pairs.len(), a.dropped), (1, 1));

        assert!(matches!(
            align_truth(&[epoch_at(50_000)], &tr, 500),
            Err(IngestError::Alignment)
        ));
    }

    #[test]
    fn interpolation_across_antimeridian() {
        let tr = track(&[(0, 0.0, 179.0), (1000, 0.0, -179.0)]);
        let p = truth_at(&tr, 500, 500).unwrap();
        assert_eq!(p.lon_deg, 180.0);
    }

    fn obs() -> impl Strategy<Value = SatObservation<f64>> {
        (
            1u8..=32,
            1.5e7..3e7f64,
            10.0..55.0f64,
            prop::array::uniform3(-3e7..3e7f64),
            0.1..50.0f64,
        )
            .prop_map(|(svid, pr_m, cn0, p, s)| SatObservation {
                svid,
                pr_m,
                cn0_dbhz: cn0,
                sat_pos: EcefPoint::new(p[0], p[1], p[2]),
                pr_sigma_m: s,
            })
    }

    proptest! {
        #[test]
        fn epochs_round_trip_bit_exact(
            sets in prop::collection::vec(prop::collection::vec(obs(), 0..6), 1..5)
        ) {
            let epochs: Vec<MeasurementSet<f64>> = sets
                .into_iter()
                .enumerate()
                .map(|(i, mut o)| {
                    o.sort_by_key(|x| x.svid);
                    o.dedup_by_key(|x| x.svid);
                    MeasurementSet { time_ms: i as i64 * 1000, obs: o }
                })
                .filter(|e| !e.obs.is_empty())
                .collect();
            let mut buf = Vec::new();
            write_epochs_csv(&mut buf, &epochs).unwrap();
            let back = parse_epochs_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, epochs);
        }
    }
}
