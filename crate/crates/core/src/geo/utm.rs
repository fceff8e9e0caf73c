//! WGS84 to UTM conversion.
//!
//! Standard USGS series truncated after the A^6/M^8 terms, which keeps the
//! forward/inverse round trip well below a centimetre anywhere inside a
//! zone. Eastings carry the usual 500 km false easting; southern-hemisphere
//! northings carry the 10 000 km false northing.

use std::fmt;

use super::GeoError;

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500_000.0;
const FALSE_NORTHING: f64 = 10_000_000.0;

/// UTM grid zone. The band letter is not tracked; the hemisphere flag is
/// what the inverse mapping needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UtmZone {
    /// Longitudinal zone number, 1 to 60.
    pub number: u8,
    /// True below the equator.
    pub south: bool,
}

impl UtmZone {
    /// Longitude of the zone's central meridian, in degrees.
    pub fn central_meridian_deg(&self) -> f64 {
        f64::from(self.number) * 6.0 - 183.0
    }
}

impl fmt::Display for UtmZone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.number, if self.south { 'S' } else { 'N' })
    }
}

/// Zone number for a fix, including the Norway and Svalbard exceptions.
pub fn zone_number(lat_deg: f64, lon_deg: f64) -> u8 {
    if (56.0..64.0).contains(&lat_deg) && (3.0..12.0).contains(&lon_deg) {
        return 32;
    }
    if (72.0..=84.0).contains(&lat_deg) && lon_deg >= 0.0 {
        if lon_deg < 9.0 {
            return 31;
        } else if lon_deg < 21.0 {
            return 33;
        } else if lon_deg < 33.0 {
            return 35;
        } else if lon_deg < 42.0 {
            return 37;
        }
    }
    let n = ((lon_deg + 180.0) / 6.0).floor() as i32 + 1;
    n.clamp(1, 60) as u8
}

/// Zone containing a fix.
pub fn zone_for(lat_deg: f64, lon_deg: f64) -> UtmZone {
    UtmZone {
        number: zone_number(lat_deg, lon_deg),
        south: lat_deg < 0.0,
    }
}

fn check_fix(lat_deg: f64, lon_deg: f64) -> Result<(), GeoError> {
    if !lat_deg.is_finite() || !lon_deg.is_finite() {
        return Err(GeoError::NonFiniteFix { lat_deg, lon_deg });
    }
    if lat_deg.abs() >= 84.0 {
        return Err(GeoError::LatitudeOutOfBand { lat_deg });
    }
    if lon_deg < -180.0 || lon_deg > 180.0 {
        return Err(GeoError::LongitudeOutOfRange { lon_deg });
    }
    Ok(())
}

/// Projects a WGS84 fix into its containing UTM zone.
///
/// Returns `(easting_m, northing_m, zone)`. Latitudes with `|lat| >= 84`
/// fall outside the UTM bands and are rejected.
pub fn geo_to_utm(lat_deg: f64, lon_deg: f64) -> Result<(f64, f64, UtmZone), GeoError> {
    let zone = zone_for(lat_deg, lon_deg);
    let (e, n) = geo_to_utm_zoned(lat_deg, lon_deg, zone)?;
    Ok((e, n, zone))
}

/// Projects a fix into an explicit zone, e.g. to keep a trajectory that
/// straddles a zone boundary in one frame.
pub fn geo_to_utm_zoned(lat_deg: f64, lon_deg: f64, zone: UtmZone) -> Result<(f64, f64), GeoError> {
    check_fix(lat_deg, lon_deg)?;

    let e2 = WGS84_F * (2.0 - WGS84_F);
    let e4 = e2 * e2;
    let e6 = e4 * e2;
    let ep2 = e2 / (1.0 - e2);

    let lat = lat_deg.to_radians();
    let dlon = (lon_deg - zone.central_meridian_deg()).to_radians();

    let sin_lat = lat.sin();
    let cos_lat = lat.cos();
    let tan_lat = lat.tan();

    let n = WGS84_A / (1.0 - e2 * sin_lat * sin_lat).sqrt();
    let t = tan_lat * tan_lat;
    let c = ep2 * cos_lat * cos_lat;
    let a = cos_lat * dlon;

    let m = WGS84_A
        * ((1.0 - e2 / 4.0 - 3.0 * e4 / 64.0 - 5.0 * e6 / 256.0) * lat
            - (3.0 * e2 / 8.0 + 3.0 * e4 / 32.0 + 45.0 * e6 / 1024.0) * (2.0 * lat).sin()
            + (15.0 * e4 / 256.0 + 45.0 * e6 / 1024.0) * (4.0 * lat).sin()
            - (35.0 * e6 / 3072.0) * (6.0 * lat).sin());

    let a2 = a * a;
    let a3 = a2 * a;
    let a4 = a3 * a;
    let a5 = a4 * a;
    let a6 = a5 * a;

    let easting = K0
        * n
        * (a + (1.0 - t + c) * a3 / 6.0
            + (5.0 - 18.0 * t + t * t + 72.0 * c - 58.0 * ep2) * a5 / 120.0)
        + FALSE_EASTING;

    let mut northing = K0
        * (m + n
            * tan_lat
            * (a2 / 2.0
                + (5.0 - t + 9.0 * c + 4.0 * c * c) * a4 / 24.0
                + (61.0 - 58.0 * t + t * t + 600.0 * c - 330.0 * ep2) * a6 / 720.0));
    if zone.south {
        northing += FALSE_NORTHING;
    }

    Ok((easting, northing))
}

/// Inverse projection: UTM easting/northing back to WGS84 degrees.
pub fn utm_to_geo(easting: f64, northing: f64, zone: UtmZone) -> Result<(f64, f64), GeoError> {
    if !easting.is_finite() || !northing.is_finite() {
        return Err(GeoError::NonFiniteFix {
            lat_deg: northing,
            lon_deg: easting,
        });
    }

    let e2 = WGS84_F * (2.0 - WGS84_F);
    let e4 = e2 * e2;
    let e6 = e4 * e2;
    let ep2 = e2 / (1.0 - e2);

    let x = easting - FALSE_EASTING;
    let y = if zone.south {
        northing - FALSE_NORTHING
    } else {
        northing
    };

    let m = y / K0;
    let mu = m / (WGS84_A * (1.0 - e2 / 4.0 - 3.0 * e4 / 64.0 - 5.0 * e6 / 256.0));

    let e1 = (1.0 - (1.0 - e2).sqrt()) / (1.0 + (1.0 - e2).sqrt());
    let e1_2 = e1 * e1;
    let e1_3 = e1_2 * e1;
    let e1_4 = e1_3 * e1;

    // Footprint latitude.
    let phi1 = mu
        + (3.0 * e1 / 2.0 - 27.0 * e1_3 / 32.0) * (2.0 * mu).sin()
        + (21.0 * e1_2 / 16.0 - 55.0 * e1_4 / 32.0) * (4.0 * mu).sin()
        + (151.0 * e1_3 / 96.0) * (6.0 * mu).sin()
        + (1097.0 * e1_4 / 512.0) * (8.0 * mu).sin();

    let sin1 = phi1.sin();
    let cos1 = phi1.cos();
    let tan1 = phi1.tan();

    let c1 = ep2 * cos1 * cos1;
    let t1 = tan1 * tan1;
    let n1 = WGS84_A / (1.0 - e2 * sin1 * sin1).sqrt();
    let r1 = WGS84_A * (1.0 - e2) / (1.0 - e2 * sin1 * sin1).powf(1.5);
    let d = x / (n1 * K0);

    let d2 = d * d;
    let d3 = d2 * d;
    let d4 = d3 * d;
    let d5 = d4 * d;
    let d6 = d5 * d;

    let lat = phi1
        - (n1 * tan1 / r1)
            * (d2 / 2.0
                - (5.0 + 3.0 * t1 + 10.0 * c1 - 4.0 * c1 * c1 - 9.0 * ep2) * d4 / 24.0
                + (61.0 + 90.0 * t1 + 298.0 * c1 + 45.0 * t1 * t1 - 252.0 * ep2 - 3.0 * c1 * c1)
                    * d6
                    / 720.0);

    let lon = (d - (1.0 + 2.0 * t1 + c1) * d3 / 6.0
        + (5.0 - 2.0 * c1 + 28.0 * t1 - 3.0 * c1 * c1 + 8.0 * ep2 + 24.0 * t1 * t1) * d5 / 120.0)
        / cos1;

    Ok((
        lat.to_degrees(),
        lon.to_degrees() + zone.central_meridian_deg(),
    ))
}
