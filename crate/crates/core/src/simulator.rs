//! Synthetic GPS scenarios: a 32-slot Walker constellation on circular
//! orbits, a receiver trajectory, and pseudoranges
//! `rho = |sat - rx| + clock + mu + v` with a deterministic bias `mu` and
//! seeded Gaussian noise `v`.
//!
//! Orbits are circular Keplerian with one plane per satellite; there is no
//! broadcast ephemeris, light-time or atmosphere. Satellite positions are
//! reported at the epoch time and pseudoranges are built from exactly those
//! positions.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    ecef_to_geodetic, ecef_vector_to_ned, geodetic_to_ecef, look_angles, ned_to_ecef_vector,
    EcefPoint, GeodeticPoint, NedVector,
};
use crate::ingest::{
    fmt_f64, read_table, write_epochs_csv, write_ground_truth_csv, write_table, GroundTruthTrack,
    IngestError, MeasurementSet, SatObservation, TruthPoint,
};

pub const EARTH_GM: f64 = 3.986_004_418e14;
pub const EARTH_ROTATION_RAD_S: f64 = 7.292_115_146_7e-5;
pub const CONSTELLATION_SIZE: usize = 32;
const WALKER_PLANES: usize = 8;
const WALKER_PHASING: usize = 1;
/// Hard bound on any generated bias, meters.
pub const MAX_BIAS_M: f64 = 15.0;

pub const TRUTH_SIDECAR_HEADER: [&str; 5] = ["time_ms", "svid", "mu_m", "v_m", "clk_m"];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("only {count} satellites above the mask at time_ms={time_ms}")]
    TooFewVisible { time_ms: i64, count: usize },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Stationary {
        origin: GeodeticPoint<f64>,
    },
    ConstantVelocity {
        origin: GeodeticPoint<f64>,
        velocity_ned_mps: [f64; 3],
    },
    /// Piecewise-linear path through waypoints at constant speed, built in
    /// the tangent plane of the first waypoint. A closed path repeats.
    Waypoints {
        waypoints: Vec<GeodeticPoint<f64>>,
        speed_mps: f64,
        #[serde(default)]
        closed: bool,
    },
}

/// Receiver clock offset `bias_m + drift_mps * t`, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub bias_m: f64,
    pub drift_mps: f64,
}

impl Default for ClockModel {
    fn default() -> Self {
        Self {
            bias_m: 1500.0,
            drift_mps: 0.3,
        }
    }
}

/// Deterministic per-satellite bias as a function of the geometry the
/// network also sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasSpec {
    None,
    Constant {
        value_m: f64,
    },
    /// Multipath-like decay with elevation: `A exp(-E / scale)`.
    Elevation {
        amplitude_m: f64,
        scale_deg: f64,
    },
    /// Street-canyon shape: low satellites on one side of the direction of
    /// travel are delayed, `A cos^2(E) (1 + sin(az - heading)) / 2`.
    Urban {
        amplitude_m: f64,
    },
    /// Weighted sum of normalized quantities, clamped to `cap_m`.
    Linear {
        #[serde(default)]
        intercept_m: f64,
        #[serde(default)]
        sin_el: f64,
        #[serde(default)]
        cos_el: f64,
        #[serde(default)]
        svid: f64,
        #[serde(default)]
        g_ned: [f64; 3],
        #[serde(default)]
        heading_ned: [f64; 3],
        cap_m: f64,
    },
}

/// Geometry seen by the bias function for one satellite.
#[derive(Debug, Clone, Copy)]
pub struct BiasContext {
    pub svid: u8,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    /// Receiver-minus-satellite unit vector in NED.
    pub g_ned: NedVector<f64>,
    pub heading_ned: NedVector<f64>,
}

impl BiasSpec {
    pub fn evaluate(&self, ctx: &BiasContext) -> f64 {
        let e = ctx.elevation_deg.to_radians();
        let mu = match self {
            BiasSpec::None => 0.0,
            BiasSpec::Constant { value_m } => *value_m,
            BiasSpec::Elevation {
                amplitude_m,
                scale_deg,
            } => amplitude_m * (-ctx.elevation_deg.max(0.0) / scale_deg).exp(),
            BiasSpec::Urban { amplitude_m } => {
                let heading_az = ctx.heading_ned.east.atan2(ctx.heading_ned.north);
                let rel = ctx.azimuth_deg.to_radians() - heading_az;
                amplitude_m * e.cos().powi(2) * 0.5 * (1.0 + rel.sin())
            }
            BiasSpec::Linear {
                intercept_m,
                sin_el,
                cos_el,
                svid,
                g_ned,
                heading_ned,
                cap_m,
            } => {
                let g = ctx.g_ned.to_array();
                let h = ctx.heading_ned.to_array();
                let v = intercept_m
                    + sin_el * e.sin()
                    + cos_el * e.cos()
                    + svid * f64::from(ctx.svid) / 32.0
                    + (0..3)
                        .map(|i| g_ned[i] * g[i] + heading_ned[i] * h[i])
                        .sum::<f64>();
                v.clamp(-cap_m, *cap_m)
            }
        };
        mu.clamp(-MAX_BIAS_M, MAX_BIAS_M)
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        match self {
            BiasSpec::Constant { value_m } if value_m.abs() > MAX_BIAS_M => {
                bad("constant bias exceeds 15 m")
            }
            BiasSpec::Elevation {
                amplitude_m,
                scale_deg,
            } if amplitude_m.abs() > MAX_BIAS_M || *scale_deg <= 0.0 => {
                bad("elevation bias needs |amplitude| <= 15 m and scale > 0")
            }
            BiasSpec::Urban { amplitude_m } if amplitude_m.abs() > MAX_BIAS_M => {
                bad("urban bias amplitude exceeds 15 m")
            }
            BiasSpec::Linear { cap_m, .. } if !(0.0..=MAX_BIAS_M).contains(cap_m) => {
                bad("linear bias cap must lie in [0, 15] m")
            }
            _ => Ok(()),
        }
    }
}

fn default_n_sats() -> usize {
    8
}
fn default_orbit_radius() -> f64 {
    26_560_000.0
}
fn default_inclination() -> f64 {
    55.0
}
fn default_mask() -> f64 {
    10.0
}
fn default_interval() -> i64 {
    1000
}
fn default_cn0_noise() -> f64 {
    1.0
}
fn default_origin() -> GeodeticPoint<f64> {
    GeodeticPoint::new(37.4220, -122.0841, 10.0)
}
fn default_trajectory() -> Trajectory {
    Trajectory::Stationary {
        origin: default_origin(),
    }
}
fn default_bias() -> BiasSpec {
    BiasSpec::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Satellites tracked per epoch: the highest ones above the mask.
    #[serde(default = "default_n_sats")]
    pub n_sats: usize,
    #[serde(default = "default_orbit_radius")]
    pub orbit_radius_m: f64,
    #[serde(default = "default_inclination")]
    pub inclination_deg: f64,
    #[serde(default = "default_mask")]
    pub elevation_mask_deg: f64,
    #[serde(default = "default_trajectory")]
    pub trajectory: Trajectory,
    #[serde(default = "default_interval")]
    pub epoch_interval_ms: i64,
    #[serde(default)]
    pub start_time_ms: i64,
    /// Constellation phase at `time_ms = 0`, seconds.
    #[serde(default)]
    pub orbit_epoch_s: f64,
    pub duration_epochs: usize,
    pub noise_sigma_m: f64,
    /// Reported 1-sigma; defaults to the noise sigma (1 m if that is zero).
    #[serde(default)]
    pub reported_sigma_m: Option<f64>,
    #[serde(default)]
    pub clock: ClockModel,
    #[serde(default = "default_bias")]
    pub bias: BiasSpec,
    #[serde(default = "default_cn0_noise")]
    pub cn0_noise_db: f64,
    /// C/N0 loss per meter of bias.
    #[serde(default)]
    pub cn0_bias_coupling_db_per_m: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn stationary(duration_epochs: usize, noise_sigma_m: f64, seed: u64) -> Self {
        Self {
            n_sats: default_n_sats(),
            orbit_radius_m: default_orbit_radius(),
            inclination_deg: default_inclination(),
            elevation_mask_deg: default_mask(),
            trajectory: default_trajectory(),
            epoch_interval_ms: default_interval(),
            start_time_ms: 0,
            orbit_epoch_s: 0.0,
            duration_epochs,
            noise_sigma_m,
            reported_sigma_m: None,
            clock: ClockModel::default(),
            bias: BiasSpec::None,
            cn0_noise_db: default_cn0_noise(),
            cn0_bias_coupling_db_per_m: 0.0,
            seed,
        }
    }

    /// Closed 300 m x 400 m city-block loop driven at 8 m/s with an
    /// azimuth- and heading-dependent bias of up to `amplitude_m`.
    pub fn urban_loop(
        duration_epochs: usize,
        noise_sigma_m: f64,
        amplitude_m: f64,
        orbit_epoch_s: f64,
        seed: u64,
    ) -> Self {
        let (lat, lon) = (37.7749f64, -122.4194f64);
        let dlat = 300.0 / 111_000.0;
        let dlon = 400.0 / (111_000.0 * lat.to_radians().cos());
        let corner = |a: f64, b: f64| GeodeticPoint::new(lat + a, lon + b, 20.0);
        Self {
            trajectory: Trajectory::Waypoints {
                waypoints: vec![
                    corner(0.0, 0.0),
                    corner(dlat, 0.0),
                    corner(dlat, dlon),
                    corner(0.0, dlon),
                ],
                speed_mps: 8.0,
                closed: true,
            },
            orbit_epoch_s,
            bias: BiasSpec::Urban { amplitude_m },
            ..Self::stationary(duration_epochs, noise_sigma_m, seed)
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(4..=CONSTELLATION_SIZE).contains(&self.n_sats) {
            return bad(format!("n_sats {} outside [4, 32]", self.n_sats));
        }
        if self.orbit_radius_m <= crate::geo::WGS84_A {
            return bad("orbit radius below the Earth's surface".into());
        }
        if self.epoch_interval_ms <= 0 {
            return bad("epoch interval must be positive".into());
        }
        if self.duration_epochs == 0 {
            return bad("duration must be at least one epoch".into());
        }
        if !(self.noise_sigma_m >= 0.0) || !(self.cn0_noise_db >= 0.0) {
            return bad("noise sigmas must be non-negative".into());
        }
        if self.reported_sigma_m.is_some_and(|s| !(s > 0.0)) {
            return bad("reported sigma must be positive".into());
        }
        match &self.trajectory {
            Trajectory::Stationary { origin } | Trajectory::ConstantVelocity { origin, .. } => {
                if !origin.is_valid() {
                    return bad("trajectory origin out of range".into());
                }
            }
            Trajectory::Waypoints {
                waypoints,
                speed_mps,
                ..
            } => {
                if waypoints.is_empty() || waypoints.iter().any(|w| !w.is_valid()) {
                    return bad("waypoints missing or out of range".into());
                }
                if !(*speed_mps >= 0.0) {
                    return bad("waypoint speed must be non-negative".into());
                }
            }
        }
        self.bias.validate()
    }

    fn reported_sigma(&self) -> f64 {
        self.reported_sigma_m
            .unwrap_or(if self.noise_sigma_m > 0.0 {
                self.noise_sigma_m
            } else {
                1.0
            })
    }
}

/// Circular Walker-delta constellation, 8 planes of 4 slots.
#[derive(Debug, Clone)]
pub struct Constellation {
    radius_m: f64,
    inclination_rad: f64,
    mean_motion: f64,
    epoch_s: f64,
}

impl Constellation {
    pub fn new(radius_m: f64, inclination_deg: f64, epoch_s: f64) -> Self {
        Self {
            radius_m,
            inclination_rad: inclination_deg.to_radians(),
            mean_motion: (EARTH_GM / radius_m.powi(3)).sqrt(),
            epoch_s,
        }
    }

    /// ECEF position of PRN `svid` (1..=32) at `t_s` seconds.
    pub fn position(&self, svid: u8, t_s: f64) -> EcefPoint<f64> {
        let idx = usize::from(svid - 1);
        let per_plane = CONSTELLATION_SIZE / WALKER_PLANES;
        let plane = idx / per_plane;
        let slot = idx % per_plane;
        let t = self.epoch_s + t_s;
        let raan = std::f64::consts::TAU * plane as f64 / WALKER_PLANES as f64;
        let phase = std::f64::consts::TAU
            * (slot as f64 / per_plane as f64
                + (WALKER_PHASING * plane) as f64 / CONSTELLATION_SIZE as f64);
        let u = phase + self.mean_motion * t;
        let (su, cu) = u.sin_cos();
        let (so, co) = raan.sin_cos();
        let ci = self.inclination_rad.cos();
        let si = self.inclination_rad.sin();
        let eci =
            Vector3::new(co * cu - so * su * ci, so * cu + co * su * ci, su * si) * self.radius_m;
        let theta = EARTH_ROTATION_RAD_S * t;
        let (st, ct) = theta.sin_cos();
        EcefPoint::new(
            ct * eci[0] + st * eci[1],
            -st * eci[0] + ct * eci[1],
            eci[2],
        )
    }
}

/// Whether a satellite is above the elevation mask seen from `receiver`.
pub fn visibility_filter(sat: &EcefPoint<f64>, receiver: &EcefPoint<f64>, mask_deg: f64) -> bool {
    crate::geo::elevation_azimuth(receiver, sat)
        .map(|(el, _)| el > mask_deg)
        .unwrap_or(false)
}

/// Default mask used by [`visibility_filter`] callers, degrees.
pub const DEFAULT_MASK_DEG: f64 = 10.0;

/// Receiver position and direction of travel at a time.
#[derive(Debug, Clone, Copy)]
pub struct ReceiverState {
    pub pos: EcefPoint<f64>,
    /// Unit direction of travel in NED; north when not moving.
    pub heading_ned: NedVector<f64>,
}

struct ReceiverPath {
    origin: GeodeticPoint<f64>,
    origin_ecef: EcefPoint<f64>,
    kind: PathKind,
}

enum PathKind {
    Fixed,
    Linear([f64; 3]),
    Polyline {
        points: Vec<[f64; 3]>,
        cumulative: Vec<f64>,
        speed: f64,
        closed: bool,
    },
}

impl ReceiverPath {
    fn new(traj: &Trajectory) -> Self {
        match traj {
            Trajectory::Stationary { origin } => Self {
                origin: *origin,
                origin_ecef: geodetic_to_ecef(origin),
                kind: PathKind::Fixed,
            },
            Trajectory::ConstantVelocity {
                origin,
                velocity_ned_mps,
            } => Self {
                origin: *origin,
                origin_ecef: geodetic_to_ecef(origin),
                kind: PathKind::Linear(*velocity_ned_mps),
            },
            Trajectory::Waypoints {
                waypoints,
                speed_mps,
                closed,
            } => {
                let origin = waypoints[0];
                let origin_ecef = geodetic_to_ecef(&origin);
                let mut points: Vec<[f64; 3]> = waypoints
                    .iter()
                    .map(|w| {
                        let d = geodetic_to_ecef(w).to_vector() - origin_ecef.to_vector();
                        ecef_vector_to_ned(&d, &origin).to_array()
                    })
                    .collect();
                if *closed {
                    points.push(points[0]);
                }
                let mut cumulative = vec![0.0];
                for w in points.windows(2) {
                    let d = dist3(&w[0], &w[1]);
                    cumulative.push(cumulative.last().unwrap() + d);
                }
                Self {
                    origin,
                    origin_ecef,
                    kind: PathKind::Polyline {
                        points,
                        cumulative,
                        speed: *speed_mps,
                        closed: *closed,
                    },
                }
            }
        }
    }

    fn at(&self, t_s: f64) -> ReceiverState {
        let north = NedVector::new(1.0, 0.0, 0.0);
        let (ned, dir) = match &self.kind {
            PathKind::Fixed => ([0.0; 3], None),
            PathKind::Linear(v) => ([v[0] * t_s, v[1] * t_s, v[2] * t_s], Some(*v)),
            PathKind::Polyline {
                points,
                cumulative,
                speed,
                closed,
            } => {
                let total = *cumulative.last().unwrap();
                if total == 0.0 || *speed == 0.0 {
                    (points[0], None)
                } else {
                    let mut s = speed * t_s;
                    if *closed {
                        s = s.rem_euclid(total);
                    }
                    if s >= total {
                        (*points.last().unwrap(), None)
                    } else {
                        let seg = cumulative.partition_point(|&c| c <= s) - 1;
                        let (a, b) = (points[seg], points[seg + 1]);
                        let len = cumulative[seg + 1] - cumulative[seg];
                        let f = (s - cumulative[seg]) / len;
                        let p = [
                            a[0] + f * (b[0] - a[0]),
                            a[1] + f * (b[1] - a[1]),
                            a[2] + f * (b[2] - a[2]),
                        ];
                        (p, Some([b[0] - a[0], b[1] - a[1], b[2] - a[2]]))
                    }
                }
            }
        };
        let offset = ned_to_ecef_vector(&NedVector::new(ned[0], ned[1], ned[2]), &self.origin);
        let pos = EcefPoint::from_vector(&(self.origin_ecef.to_vector() + offset));
        let heading_ned = match dir {
            Some(d) if dist3(&d, &[0.0; 3]) > 0.0 => {
                let n = dist3(&d, &[0.0; 3]);
                NedVector::new(d[0] / n, d[1] / n, d[2] / n)
            }
            _ => north,
        };
        ReceiverState { pos, heading_ned }
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Ground truth for one generated observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSidecarRecord {
    pub time_ms: i64,
    pub svid: u8,
    pub mu_m: f64,
    pub v_m: f64,
    pub clk_m: f64,
}

#[derive(Debug, Clone)]
pub struct SimulatedTrace {
    pub epochs: Vec<MeasurementSet<f64>>,
    pub truth: GroundTruthTrack<f64>,
    pub truth_ecef: Vec<EcefPoint<f64>>,
    /// Per-epoch receiver clock offset, meters.
    pub clock_m: Vec<f64>,
    /// One record per observation, in epoch then file order.
    pub sidecar: Vec<TruthSidecarRecord>,
}

impl SimulatedTrace {
    /// Sidecar records of epoch `k`, aligned with `epochs[k].obs`.
    pub fn epoch_sidecar(&self, k: usize) -> &[TruthSidecarRecord] {
        let start: usize = self.epochs[..k].iter().map(|e| e.obs.len()).sum();
        &self.sidecar[start..start + self.epochs[k].obs.len()]
    }

    /// Writes `epochs.csv`, `truth.csv` and `truth_sidecar.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        write_epochs_csv(
            BufWriter::new(File::create(dir.join("epochs.csv"))?),
            &self.epochs,
        )?;
        write_ground_truth_csv(
            BufWriter::new(File::create(dir.join("truth.csv"))?),
            &self.truth,
        )?;
        write_truth_sidecar(
            BufWriter::new(File::create(dir.join("truth_sidecar.csv"))?),
            &self.sidecar,
        )?;
        Ok(())
    }
}

pub fn write_truth_sidecar<W: Write>(w: W, rows: &[TruthSidecarRecord]) -> std::io::Result<()> {
    write_table(
        w,
        &TRUTH_SIDECAR_HEADER,
        rows.iter().map(|r| {
            vec![
                r.time_ms.to_string(),
                r.svid.to_string(),
                fmt_f64(r.mu_m),
                fmt_f64(r.v_m),
                fmt_f64(r.clk_m),
            ]
        }),
    )
}

pub fn parse_truth_sidecar<R: Read>(r: R) -> Result<Vec<TruthSidecarRecord>, IngestError> {
    read_table(r, &TRUTH_SIDECAR_HEADER)?
        .iter()
        .map(|row| {
            Ok(TruthSidecarRecord {
                time_ms: row.int(0)?,
                svid: row.svid(1)?,
                mu_m: row.float(2)?,
                v_m: row.float(3)?,
                clk_m: row.float(4)?,
            })
        })
        .collect()
}

/// Satellites above the mask at `pos`, highest first, limited to `limit`,
/// returned in PRN order with their look angles.
fn tracked(
    cons: &Constellation,
    pos: &EcefPoint<f64>,
    site: &GeodeticPoint<f64>,
    t_s: f64,
    mask_deg: f64,
    limit: usize,
) -> (Vec<(u8, EcefPoint<f64>, f64, f64)>, usize) {
    let mut vis: Vec<(u8, EcefPoint<f64>, f64, f64)> = (1..=CONSTELLATION_SIZE as u8)
        .filter_map(|svid| {
            let sat = cons.position(svid, t_s);
            let (el, az) = look_angles(&(sat.to_vector() - pos.to_vector()), site);
            (el > mask_deg).then_some((svid, sat, el, az))
        })
        .collect();
    let count = vis.len();
    vis.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    vis.truncate(limit);
    vis.sort_by_key(|v| v.0);
    (vis, count)
}

pub fn simulate_trace(config: &ScenarioConfig) -> Result<SimulatedTrace, SimError> {
    config.validate()?;
    let cons = Constellation::new(
        config.orbit_radius_m,
        config.inclination_deg,
        config.orbit_epoch_s,
    );
    let path = ReceiverPath::new(&config.trajectory);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise =
        Normal::new(0.0, config.noise_sigma_m).map_err(|e| SimError::Config(e.to_string()))?;
    let cn0_noise =
        Normal::new(0.0, config.cn0_noise_db).map_err(|e| SimError::Config(e.to_string()))?;
    let sigma = config.reported_sigma();

    let mut trace = SimulatedTrace {
        epochs: Vec::with_capacity(config.duration_epochs),
        truth: GroundTruthTrack::default(),
        truth_ecef: Vec::with_capacity(config.duration_epochs),
        clock_m: Vec::with_capacity(config.duration_epochs),
        sidecar: Vec::new(),
    };
    for k in 0..config.duration_epochs {
        let rel_ms = k as i64 * config.epoch_interval_ms;
        let time_ms = config.start_time_ms + rel_ms;
        let t_s = time_ms as f64 / 1000.0;
        let rx = path.at(rel_ms as f64 / 1000.0);
        let site = ecef_to_geodetic(&rx.pos).expect("receiver off the Earth's center");
        let clk = config.clock.bias_m + config.clock.drift_mps * (rel_ms as f64 / 1000.0);

        let (sats, visible) = tracked(
            &cons,
            &rx.pos,
            &site,
            t_s,
            config.elevation_mask_deg,
            config.n_sats,
        );
        if sats.len() < 4 {
            return Err(SimError::TooFewVisible {
                time_ms,
                count: visible,
            });
        }
        let mut obs = Vec::with_capacity(sats.len());
        for (svid, sat, el, az) in sats {
            let los = rx.pos.to_vector() - sat.to_vector();
            let range = los.norm();
            let g = ecef_vector_to_ned(&(los / range), &site);
            let mu = config.bias.evaluate(&BiasContext {
                svid,
                elevation_deg: el,
                azimuth_deg: az,
                g_ned: g,
                heading_ned: rx.heading_ned,
            });
            let v = noise.sample(&mut rng);
            let cn0 = (25.0 + 23.0 * el.to_radians().sin()
                - config.cn0_bias_coupling_db_per_m * mu.abs()
                + cn0_noise.sample(&mut rng))
            .clamp(20.0, 50.0);
            obs.push(SatObservation {
                svid,
                pr_m: range + clk + mu + v,
                cn0_dbhz: cn0,
                sat_pos: sat,
                pr_sigma_m: sigma,
            });
            trace.sidecar.push(TruthSidecarRecord {
                time_ms,
                svid,
                mu_m: mu,
                v_m: v,
                clk_m: clk,
            });
        }
        trace.epochs.push(MeasurementSet { time_ms, obs });
        trace.truth.points.push(TruthPoint { time_ms, pos: site });
        trace.truth_ecef.push(rx.pos);
        trace.clock_m.push(clk);
    }
    Ok(trace)
}
