//! WGS-84 geodesy: ECEF/geodetic/NED conversions, look angles, Vincenty
//! distance and degree-minute-second decomposition.
//!
//! Ellipsoid constants are fixed to WGS-84: semi-major axis
//! `a = 6378137.0 m` and flattening `f = 1/298.257223563`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;

/// WGS-84 semi-major axis, meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

const BOWRING_TOL_RAD: f64 = 1e-12;
const BOWRING_MAX_ITER: usize = 100;
const VINCENTY_TOL: f64 = 1e-12;
const VINCENTY_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("undefined latitude: point at the Earth's center")]
    UndefinedLatitude,
    #[error("coincident points: direction undefined")]
    CoincidentPoints,
    #[error("vincenty did not converge after {0} iterations")]
    VincentyNoConvergence(usize),
}

#[inline]
fn semi_minor<T: Real>() -> T {
    T::lit(WGS84_A * (1.0 - WGS84_F))
}

#[inline]
fn ecc_sq<T: Real>() -> T {
    T::lit(WGS84_F * (2.0 - WGS84_F))
}

/// Position in the Earth-centered, Earth-fixed frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPoint<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> EcefPoint<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn origin() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn to_vector(self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<T>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn distance(&self, other: &Self) -> T {
        (self.to_vector() - other.to_vector()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite_value() && self.y.is_finite_value() && self.z.is_finite_value()
    }
}

/// Geodetic coordinates on the WGS-84 ellipsoid. Angles in degrees,
/// altitude in meters above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPoint<T> {
    pub lat_deg: T,
    pub lon_deg: T,
    pub alt_m: T,
}

impl<T: Real> GeodeticPoint<T> {
    pub fn new(lat_deg: T, lon_deg: T, alt_m: T) -> Self {
        Self {
            lat_deg,
            lon_deg,
            alt_m,
        }
    }

    /// Latitude within [-90, 90], longitude within (-180, 180], finite altitude.
    pub fn is_valid(&self) -> bool {
        let (lat, lon) = (self.lat_deg.as_f64(), self.lon_deg.as_f64());
        (-90.0..=90.0).contains(&lat)
            && lon > -180.0
            && lon <= 180.0
            && self.alt_m.is_finite_value()
    }
}

/// Components of a vector in the local north-east-down frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NedVector<T> {
    pub north: T,
    pub east: T,
    pub down: T,
}

impl<T: Real> NedVector<T> {
    pub fn new(north: T, east: T, down: T) -> Self {
        Self { north, east, down }
    }

    pub fn norm(&self) -> T {
        (self.north * self.north + self.east * self.east + self.down * self.down).sqrt()
    }

    pub fn to_array(self) -> [T; 3] {
        [self.north, self.east, self.down]
    }
}

pub fn geodetic_to_ecef<T: Real>(p: &GeodeticPoint<T>) -> EcefPoint<T> {
    let a = T::lit(WGS84_A);
    let e2 = ecc_sq::<T>();
    let lat = p.lat_deg.to_radians();
    let lon = p.lon_deg.to_radians();
    let (slat, clat) = (lat.sin(), lat.cos());
    let (slon, clon) = (lon.sin(), lon.cos());
    let n = a / (T::one() - e2 * slat * slat).sqrt();
    EcefPoint::new(
        (n + p.alt_m) * clat * clon,
        (n + p.alt_m) * clat * slon,
        (n * (T::one() - e2) + p.alt_m) * slat,
    )
}

/// Iterative inverse conversion, `phi <- atan2(z + e^2 N(phi) sin(phi), p)`,
/// run until the latitude update is below 1e-12 rad.
pub fn ecef_to_geodetic<T: Real>(p: &EcefPoint<T>) -> Result<GeodeticPoint<T>, GeoError> {
    let a = T::lit(WGS84_A);
    let e2 = ecc_sq::<T>();
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    if rho == T::zero() && p.z == T::zero() {
        return Err(GeoError::UndefinedLatitude);
    }
    let lon = if rho == T::zero() {
        T::zero()
    } else {
        p.y.atan2(p.x)
    };
    let tol = T::lit(BOWRING_TOL_RAD);
    let mut lat = p.z.atan2(rho * (T::one() - e2));
    for _ in 0..BOWRING_MAX_ITER {
        let s = lat.sin();
        let n = a / (T::one() - e2 * s * s).sqrt();
        let next = (p.z + e2 * n * s).atan2(rho);
        let done = (next - lat).abs() < tol;
        lat = next;
        if done {
            break;
        }
    }
    let (s, c) = (lat.sin(), lat.cos());
    let n = a / (T::one() - e2 * s * s).sqrt();
    let alt = rho * c + p.z * s - a * a / n;
    let mut lon_deg = lon.to_degrees();
    if lon_deg <= T::lit(-180.0) {
        lon_deg += T::lit(360.0);
    }
    Ok(GeodeticPoint::new(lat.to_degrees(), lon_deg, alt))
}

/// Rotation taking ECEF components to NED components at `origin`.
pub fn ecef_to_ned_rotation<T: Real>(origin: &GeodeticPoint<T>) -> nalgebra::Matrix3<T> {
    let lat = origin.lat_deg.to_radians();
    let lon = origin.lon_deg.to_radians();
    let (sp, cp) = (lat.sin(), lat.cos());
    let (sl, cl) = (lon.sin(), lon.cos());
    nalgebra::Matrix3::new(
        -sp * cl,
        -sp * sl,
        cp,
        -sl,
        cl,
        T::zero(),
        -cp * cl,
        -cp * sl,
        -sp,
    )
}

pub fn ecef_vector_to_ned<T: Real>(v: &Vector3<T>, origin: &GeodeticPoint<T>) -> NedVector<T> {
    let r = ecef_to_ned_rotation(origin) * v;
    NedVector::new(r[0], r[1], r[2])
}

pub fn ned_to_ecef_vector<T: Real>(v: &NedVector<T>, origin: &GeodeticPoint<T>) -> Vector3<T> {
    ecef_to_ned_rotation(origin).transpose() * Vector3::new(v.north, v.east, v.down)
}

/// Elevation above the local horizontal plane and azimuth clockwise from
/// north, both in degrees. Azimuth lies in [0, 360).
pub fn elevation_azimuth<T: Real>(
    user: &EcefPoint<T>,
    sat: &EcefPoint<T>,
) -> Result<(T, T), GeoError> {
    let los = sat.to_vector() - user.to_vector();
    if los.norm() == T::zero() {
        return Err(GeoError::CoincidentPoints);
    }
    let origin = ecef_to_geodetic(user)?;
    Ok(look_angles(&los, &origin))
}

/// Look angles of an ECEF line-of-sight vector at a known geodetic origin.
pub fn look_angles<T: Real>(los: &Vector3<T>, origin: &GeodeticPoint<T>) -> (T, T) {
    let ned = ecef_vector_to_ned(los, origin);
    let horiz = (ned.north * ned.north + ned.east * ned.east).sqrt();
    let el = (-ned.down).atan2(horiz).to_degrees();
    let mut az = ned.east.atan2(ned.north).to_degrees();
    if az < T::zero() {
        az += T::lit(360.0);
    }
    if az >= T::lit(360.0) {
        az -= T::lit(360.0);
    }
    (el, az)
}

/// WGS-84 inverse geodesic distance (Vincenty). Altitudes are ignored.
pub fn vincenty_distance<T: Real>(
    a_pt: &GeodeticPoint<T>,
    b_pt: &GeodeticPoint<T>,
) -> Result<T, GeoError> {
    let one = T::one();
    let a = T::lit(WGS84_A);
    let f = T::lit(WGS84_F);
    let b = semi_minor::<T>();

    let l = (b_pt.lon_deg - a_pt.lon_deg).to_radians();
    let u1 = ((one - f) * a_pt.lat_deg.to_radians().tan()).atan();
    let u2 = ((one - f) * b_pt.lat_deg.to_radians().tan()).atan();
    let (su1, cu1) = (u1.sin(), u1.cos());
    let (su2, cu2) = (u2.sin(), u2.cos());

    let mut lambda = l;
    let tol = T::lit(VINCENTY_TOL);
    let sixteen = T::lit(16.0);
    for _ in 0..VINCENTY_MAX_ITER {
        let (sl, cl) = (lambda.sin(), lambda.cos());
        let t1 = cu2 * sl;
        let t2 = cu1 * su2 - su1 * cu2 * cl;
        let sin_sigma = (t1 * t1 + t2 * t2).sqrt();
        if sin_sigma == T::zero() {
            return Ok(T::zero());
        }
        let cos_sigma = su1 * su2 + cu1 * cu2 * cl;
        let sigma = sin_sigma.atan2(cos_sigma);
        let sin_alpha = cu1 * cu2 * sl / sin_sigma;
        let cos2_alpha = one - sin_alpha * sin_alpha;
        let cos_2sm = if cos2_alpha == T::zero() {
            T::zero()
        } else {
            cos_sigma - T::lit(2.0) * su1 * su2 / cos2_alpha
        };
        let c =
            f / sixteen * cos2_alpha * (T::lit(4.0) + f * (T::lit(4.0) - T::lit(3.0) * cos2_alpha));
        let prev = lambda;
        lambda = l
            + (one - c)
                * f
                * sin_alpha
                * (sigma
                    + c * sin_sigma
                        * (cos_2sm + c * cos_sigma * (-one + T::lit(2.0) * cos_2sm * cos_2sm)));
        if (lambda - prev).abs() < tol {
            let u_sq = cos2_alpha * (a * a - b * b) / (b * b);
            let big_a = one
                + u_sq / T::lit(16384.0)
                    * (T::lit(4096.0)
                        + u_sq * (T::lit(-768.0) + u_sq * (T::lit(320.0) - T::lit(175.0) * u_sq)));
            let big_b = u_sq / T::lit(1024.0)
                * (T::lit(256.0)
                    + u_sq * (T::lit(-128.0) + u_sq * (T::lit(74.0) - T::lit(47.0) * u_sq)));
            let delta_sigma = big_b
                * sin_sigma
                * (cos_2sm
                    + big_b / T::lit(4.0)
                        * (cos_sigma * (-one + T::lit(2.0) * cos_2sm * cos_2sm)
                            - big_b / T::lit(6.0)
                                * cos_2sm
                                * (T::lit(-3.0) + T::lit(4.0) * sin_sigma * sin_sigma)
                                * (T::lit(-3.0) + T::lit(4.0) * cos_2sm * cos_2sm)));
            return Ok(b * big_a * (sigma - delta_sigma));
        }
    }
    Err(GeoError::VincentyNoConvergence(VINCENTY_MAX_ITER))
}

/// Degree-minute-second decomposition of an angle.
///
/// The sign lives on `degrees` (and in `negative`, which also covers
/// |angle| < 1 where `degrees` is zero). Minutes are integer valued,
/// seconds fractional; both are non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dms<T> {
    pub degrees: i32,
    pub minutes: T,
    pub seconds: T,
    pub negative: bool,
}

impl<T: Real> Dms<T> {
    pub fn to_degrees(&self) -> T {
        let mag = T::lit(self.degrees.unsigned_abs() as f64)
            + self.minutes / T::lit(60.0)
            + self.seconds / T::lit(3600.0);
        if self.negative {
            -mag
        } else {
            mag
        }
    }
}

pub fn degrees_to_dms<T: Real>(angle: T) -> Dms<T> {
    let sixty = T::lit(60.0);
    let negative = angle < T::zero();
    let mag = angle.abs();
    let mut deg = mag.floor();
    let mut min = ((mag - deg) * sixty).floor();
    let mut sec = (mag - deg) * sixty * sixty - min * sixty;
    if sec < T::zero() {
        sec = T::zero();
    }
    if sec >= sixty {
        sec -= sixty;
        min += T::one();
    }
    if min >= sixty {
        min -= sixty;
        deg += T::one();
    }
    let d = deg.as_f64() as i32;
    Dms {
        degrees: if negative { -d } else { d },
        minutes: min,
        seconds: sec,
        negative,
    }
}
