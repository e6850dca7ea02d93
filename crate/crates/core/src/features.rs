//! Per-satellite input features and the 32-slot masked sample layout.
//!
//! Column order of a feature vector:
//! `f1` C/N0, `f2a f2b` sin/cos elevation, `f3` svid, `f4a..f4f` latitude and
//! longitude degree/minute/second, `f5n f5e f5d` unit geometry vector and
//! `f6n f6e f6d` heading, the last two in the local NED frame.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::geo::{
    degrees_to_dms, ecef_to_geodetic, ecef_vector_to_ned, look_angles, Dms, EcefPoint, GeoError,
    NedVector,
};
use crate::ingest::{fmt_f64, read_table, write_table, IngestError, MeasurementSet, MAX_SVID};
use crate::labeling::LabelDataset;
use crate::num::Real;
use crate::solver::{wls_trace, GeometrySolve, NavSolution, SolverError};

pub const FEATURE_DIM: usize = 16;
pub const SLOTS: usize = MAX_SVID as usize;
pub const CN0_SCALE_DBHZ: f64 = 50.0;
pub const SVID_SCALE: f64 = 32.0;
/// Displacements shorter than this keep the previous heading.
pub const HEADING_MIN_DISPLACEMENT_M: f64 = 0.2;

pub const FEATURES_HEADER: [&str; 18] = [
    "time_ms", "svid", "f1", "f2a", "f2b", "f3", "f4a", "f4b", "f4c", "f4d", "f4e", "f4f", "f5n",
    "f5e", "f5d", "f6n", "f6e", "f6d",
];

pub type FeatureVector<T> = [T; FEATURE_DIM];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("svid {0} outside 1..=32")]
    Svid(u8),
    #[error("epoch {time_ms}: solution has {found} satellites, epoch has {expected}")]
    Solution {
        time_ms: i64,
        expected: usize,
        found: usize,
    },
    #[error("epoch {time_ms}: feature and label satellites differ")]
    SvidMismatch { time_ms: i64 },
    #[error("epoch {0}: labels have no matching feature epoch")]
    MissingEpoch(i64),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochFeatures<T> {
    pub time_ms: i64,
    pub svids: Vec<u8>,
    pub vectors: Vec<FeatureVector<T>>,
}

/// Heading of each epoch from its position toward the next one.
///
/// Short displacements and the final epoch hold the previous heading; the
/// initial heading is north.
pub fn headings<T: Real>(positions: &[EcefPoint<T>]) -> Result<Vec<NedVector<T>>, GeoError> {
    let min = T::lit(HEADING_MIN_DISPLACEMENT_M);
    let mut prev = NedVector::new(T::one(), T::zero(), T::zero());
    let mut out = Vec::with_capacity(positions.len());
    for (k, p) in positions.iter().enumerate() {
        if let Some(next) = positions.get(k + 1) {
            let d = next.to_vector() - p.to_vector();
            let len = d.norm();
            if len >= min {
                prev = ecef_vector_to_ned(&(d / len), &ecef_to_geodetic(p)?);
            }
        }
        out.push(prev);
    }
    Ok(out)
}

fn signed_dms<T: Real>(dms: &Dms<T>, scale: f64) -> [T; 3] {
    let s = if dms.negative { -T::one() } else { T::one() };
    [
        s * T::lit(dms.degrees.unsigned_abs() as f64 / scale),
        s * dms.minutes / T::lit(60.0),
        s * dms.seconds / T::lit(60.0),
    ]
}

/// Features of every satellite of one epoch.
pub fn extract_features<T: Real>(
    epoch: &MeasurementSet<T>,
    nav: &NavSolution<T>,
    geom: &GeometrySolve<T>,
    heading: &NedVector<T>,
) -> Result<EpochFeatures<T>, FeatureError> {
    if geom.len() != epoch.obs.len() {
        return Err(FeatureError::Solution {
            time_ms: epoch.time_ms,
            expected: epoch.obs.len(),
            found: geom.len(),
        });
    }
    let origin = ecef_to_geodetic(&nav.pos)?;
    let lat = signed_dms(&degrees_to_dms(origin.lat_deg), 90.0);
    let lon = signed_dms(&degrees_to_dms(origin.lon_deg), 180.0);
    let mut vectors = Vec::with_capacity(epoch.obs.len());
    for (i, o) in epoch.obs.iter().enumerate() {
        if o.svid == 0 || o.svid > MAX_SVID {
            return Err(FeatureError::Svid(o.svid));
        }
        let g = geom.unit_vector(i);
        let (el, _) = look_angles(&(-g), &origin);
        let el = el.to_radians();
        let g_ned = ecef_vector_to_ned(&g, &origin);
        vectors.push([
            o.cn0_dbhz / T::lit(CN0_SCALE_DBHZ),
            el.sin(),
            el.cos(),
            <T as Real>::from_usize(o.svid as usize) / T::lit(SVID_SCALE),
            lat[0],
            lat[1],
            lat[2],
            lon[0],
            lon[1],
            lon[2],
            g_ned.north,
            g_ned.east,
            g_ned.down,
            heading.north,
            heading.east,
            heading.down,
        ]);
    }
    Ok(EpochFeatures {
        time_ms: epoch.time_ms,
        svids: epoch.svids(),
        vectors,
    })
}

/// WLS over the trace, headings from the WLS track, then per-epoch features.
pub fn extract_trace_features<T: Real>(
    epochs: &[MeasurementSet<T>],
) -> Result<Vec<EpochFeatures<T>>, FeatureError> {
    let wls = wls_trace(epochs)?;
    let positions: Vec<EcefPoint<T>> = wls.iter().map(|(n, _)| n.pos).collect();
    let heads = headings(&positions)?;
    epochs
        .iter()
        .zip(&wls)
        .zip(&heads)
        .map(|((e, (nav, geom)), h)| extract_features(e, nav, geom, h))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTarget<T> {
    pub labels: [T; SLOTS],
    pub h_row: [T; SLOTS],
}

/// One epoch in the fixed layout where slot `i` holds svid `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample<T> {
    pub time_ms: i64,
    pub features: [FeatureVector<T>; SLOTS],
    pub mask: [bool; SLOTS],
    pub target: Option<SampleTarget<T>>,
}

impl<T: Real> FeatureSample<T> {
    pub fn visible(&self) -> Vec<usize> {
        (0..SLOTS).filter(|&i| self.mask[i]).collect()
    }

    pub fn n_visible(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn from_features(f: &EpochFeatures<T>) -> Result<Self, FeatureError> {
        let mut features = [[T::zero(); FEATURE_DIM]; SLOTS];
        let mut mask = [false; SLOTS];
        for (&svid, v) in f.svids.iter().zip(&f.vectors) {
            if svid == 0 || svid > MAX_SVID {
                return Err(FeatureError::Svid(svid));
            }
            features[svid as usize - 1] = *v;
            mask[svid as usize - 1] = true;
        }
        Ok(Self {
            time_ms: f.time_ms,
            features,
            mask,
            target: None,
        })
    }
}

/// Builds masked samples. With labels, only labeled epochs are kept and
/// every one of them must have features over the same satellites.
pub fn assemble_samples<T: Real>(
    features: &[EpochFeatures<T>],
    labels: Option<&LabelDataset<T>>,
) -> Result<Vec<FeatureSample<T>>, FeatureError> {
    let Some(labels) = labels else {
        return features.iter().map(FeatureSample::from_features).collect();
    };
    let by_time: BTreeMap<i64, &EpochFeatures<T>> =
        features.iter().map(|f| (f.time_ms, f)).collect();
    let mut out = Vec::with_capacity(labels.epochs.len());
    for l in &labels.epochs {
        let f = by_time
            .get(&l.time_ms)
            .ok_or(FeatureError::MissingEpoch(l.time_ms))?;
        let mut a = f.svids.clone();
        let mut b = l.svids.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(FeatureError::SvidMismatch { time_ms: l.time_ms });
        }
        let mut sample = FeatureSample::from_features(f)?;
        let mut target = SampleTarget {
            labels: [T::zero(); SLOTS],
            h_row: [T::zero(); SLOTS],
        };
        for ((&svid, &label), &h) in l.svids.iter().zip(&l.labels).zip(&l.h_row) {
            target.labels[svid as usize - 1] = label;
            target.h_row[svid as usize - 1] = h;
        }
        sample.target = Some(target);
        out.push(sample);
    }
    Ok(out)
}

pub fn write_features_csv<W: Write>(w: W, features: &[EpochFeatures<f64>]) -> std::io::Result<()> {
    let rows = features.iter().flat_map(|e| {
        e.svids.iter().zip(&e.vectors).map(move |(svid, v)| {
            let mut row = vec![e.time_ms.to_string(), svid.to_string()];
            row.extend(v.iter().map(|x| fmt_f64(*x)));
            row
        })
    });
    write_table(w, &FEATURES_HEADER, rows)
}

pub fn parse_features_csv<R: Read>(r: R) -> Result<Vec<EpochFeatures<f64>>, IngestError> {
    let mut map: BTreeMap<i64, EpochFeatures<f64>> = BTreeMap::new();
    for row in read_table(r, &FEATURES_HEADER)? {
        let time_ms = row.int(0)?;
        let svid = row.svid(1)?;
        let mut v = [0.0; FEATURE_DIM];
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = row.float(j + 2)?;
        }
        let e = map.entry(time_ms).or_insert_with(|| EpochFeatures {
            time_ms,
            svids: Vec::new(),
            vectors: Vec::new(),
        });
        if e.svids.contains(&svid) {
            return Err(IngestError::Duplicate {
                line: row.line,
                time_ms,
                svid,
            });
        }
        e.svids.push(svid);
        e.vectors.push(v);
    }
    Ok(map.into_values().collect())
}
