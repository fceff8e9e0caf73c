//! Metric geometry: GPS fixes to UTM poses, pose interpolation, place
//! discretization and train/test splitting.
//!
//! Headings are radians in [-pi, pi) measured from grid east (atan2 of
//! northing over easting deltas), derived from the direction of travel.
//! A reverse pass over the same spot differs by pi and is treated as a
//! distinct place throughout.

mod utm;

pub use utm::{geo_to_utm, geo_to_utm_zoned, utm_to_geo, zone_for, zone_number, UtmZone};

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use thiserror::Error;

use crate::{PlaceId, RunId, SampleId};

/// Heading separation that makes two co-located observations distinct
/// places. Half pi cleanly separates forward from reverse passes while
/// tolerating GPS heading jitter.
pub const DEFAULT_HEADING_GATE: f64 = FRAC_PI_2;

/// Below this inter-fix motion the travel direction is noise; the previous
/// valid heading is reused.
pub const MIN_HEADING_MOTION_M: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("non-finite coordinates (lat {lat_deg}, lon {lon_deg})")]
    NonFiniteFix { lat_deg: f64, lon_deg: f64 },
    #[error("latitude {lat_deg} outside the UTM band (|lat| < 84)")]
    LatitudeOutOfBand { lat_deg: f64 },
    #[error("longitude {lon_deg} outside [-180, 180]")]
    LongitudeOutOfRange { lon_deg: f64 },
    #[error("trajectory needs at least 2 fixes, got {count}")]
    InsufficientFixes { count: usize },
    #[error("timestamps not strictly increasing at index {index} (t = {timestamp})")]
    NonMonotonicTimestamps { index: usize, timestamp: f64 },
    #[error("t = {t} outside trajectory span [{first}, {last}]; extrapolation refused")]
    ExtrapolationRefused { t: f64, first: f64, last: f64 },
    #[error("train fraction {value} outside (0, 1)")]
    InvalidFraction { value: f64 },
}

/// Raw geodetic fix as read from a trajectory manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoFix {
    pub timestamp: f64,
    pub lat_deg: f64,
    pub lon_deg: f64,
}

/// Pose in a UTM zone. Heading is the direction of travel; it is zero
/// until [`heading_from_track`] fills it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPose {
    pub easting: f64,
    pub northing: f64,
    pub heading: f64,
    pub zone: UtmZone,
}

impl MetricPose {
    /// Planar distance in meters. Poses must live in the same zone for
    /// this to be meaningful.
    pub fn distance(&self, other: &MetricPose) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }

    /// Absolute circular heading difference in [0, pi].
    pub fn heading_difference(&self, other: &MetricPose) -> f64 {
        circular_difference(self.heading, other.heading)
    }
}

/// Time-ordered metric trajectory of one run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub run_id: RunId,
    pub fixes: Vec<(f64, MetricPose)>,
}

/// One discretized place.
#[derive(Debug, Clone)]
pub struct Place {
    pub id: PlaceId,
    pub pose: MetricPose,
    pub source_timestamp: f64,
}

/// Disjoint train/test/buffer partition of a place set.
#[derive(Debug, Clone, Default)]
pub struct PlaceSplit {
    pub train: BTreeSet<PlaceId>,
    pub test: BTreeSet<PlaceId>,
    pub buffer: BTreeSet<PlaceId>,
}

/// A sensor observation with its interpolated pose, ready for place
/// assignment.
#[derive(Debug, Clone)]
pub struct SampleFix {
    pub sample_id: SampleId,
    pub timestamp: f64,
    pub pose: MetricPose,
}

/// Result of sample-to-place assignment. Samples matching no place are
/// reported, not dropped silently.
#[derive(Debug, Clone, Default)]
pub struct Assignment {
    pub by_place: BTreeMap<PlaceId, Vec<SampleId>>,
    pub unassigned: Vec<SampleId>,
}

/// Normalizes an angle to [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Absolute circular difference between two angles, in [0, pi].
pub fn circular_difference(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Converts one fix into its UTM zone. The heading is left at zero; it is
/// a property of the track, not of a single fix.
pub fn utm_convert(fix: &GeoFix) -> Result<MetricPose, GeoError> {
    let (easting, northing, zone) = geo_to_utm(fix.lat_deg, fix.lon_deg)?;
    Ok(MetricPose {
        easting,
        northing,
        heading: 0.0,
        zone,
    })
}

/// Converts a time-ordered list of fixes into a metric trajectory. The
/// whole track is projected into the zone of its first fix so that all
/// poses share one frame; headings are left for [`heading_from_track`].
pub fn convert_track(run_id: RunId, fixes: &[GeoFix]) -> Result<Trajectory, GeoError> {
    if fixes.len() < 2 {
        return Err(GeoError::InsufficientFixes { count: fixes.len() });
    }
    let zone = zone_for(fixes[0].lat_deg, fixes[0].lon_deg);
    let mut out = Vec::with_capacity(fixes.len());
    let mut prev_t = f64::NEG_INFINITY;
    for (index, fix) in fixes.iter().enumerate() {
        if fix.timestamp <= prev_t {
            return Err(GeoError::NonMonotonicTimestamps {
                index,
                timestamp: fix.timestamp,
            });
        }
        prev_t = fix.timestamp;
        let (easting, northing) = geo_to_utm_zoned(fix.lat_deg, fix.lon_deg, zone)?;
        out.push((
            fix.timestamp,
            MetricPose {
                easting,
                northing,
                heading: 0.0,
                zone,
            },
        ));
    }
    Ok(Trajectory { run_id, fixes: out })
}

/// Fills headings from the direction of travel: heading_i points from fix
/// i to fix i+1, the final fix copies its predecessor, and steps shorter
/// than [`MIN_HEADING_MOTION_M`] reuse the last valid heading. A leading
/// stretch of degenerate steps is backfilled with the first valid heading.
pub fn heading_from_track(mut trajectory: Trajectory) -> Result<Trajectory, GeoError> {
    let n = trajectory.fixes.len();
    if n < 2 {
        return Err(GeoError::InsufficientFixes { count: n });
    }

    let mut headings = vec![None; n];
    let mut last_valid = None;
    for i in 0..n - 1 {
        let (_, a) = trajectory.fixes[i];
        let (_, b) = trajectory.fixes[i + 1];
        let de = b.easting - a.easting;
        let dn = b.northing - a.northing;
        if de.hypot(dn) >= MIN_HEADING_MOTION_M {
            last_valid = Some(wrap_angle(dn.atan2(de)));
        }
        headings[i] = last_valid;
    }
    headings[n - 1] = last_valid;

    // A stationary prefix has no direction yet; take the first one seen.
    // A fully stationary trajectory keeps heading 0.
    let first_valid = headings.iter().flatten().copied().next().unwrap_or(0.0);
    for (fix, heading) in trajectory.fixes.iter_mut().zip(headings) {
        fix.1.heading = heading.unwrap_or(first_valid);
    }
    Ok(trajectory)
}

/// Pose at time `t`, linearly interpolated between the bracketing fixes.
/// Position interpolates componentwise; heading takes the shortest arc on
/// the circle. Queries at a knot return that knot's pose exactly, and
/// queries outside the trajectory span are refused.
pub fn interpolate_pose(trajectory: &Trajectory, t: f64) -> Result<MetricPose, GeoError> {
    let fixes = &trajectory.fixes;
    if fixes.len() < 2 {
        return Err(GeoError::InsufficientFixes { count: fixes.len() });
    }
    let first = fixes[0].0;
    let last = fixes[fixes.len() - 1].0;
    if !(first..=last).contains(&t) {
        return Err(GeoError::ExtrapolationRefused { t, first, last });
    }

    let idx = fixes.partition_point(|&(ts, _)| ts < t);
    if idx < fixes.len() && fixes[idx].0 == t {
        return Ok(fixes[idx].1);
    }

    let (t0, p0) = fixes[idx - 1];
    let (t1, p1) = fixes[idx];
    let w = (t - t0) / (t1 - t0);
    Ok(MetricPose {
        easting: p0.easting + w * (p1.easting - p0.easting),
        northing: p0.northing + w * (p1.northing - p0.northing),
        heading: wrap_angle(p0.heading + w * wrap_angle(p1.heading - p0.heading)),
        zone: p0.zone,
    })
}

/// Greedy place discretization in time order. A fix is accepted as a new
/// place iff, against every already-accepted place, it is at least `d_p`
/// away in position or at least `heading_gate` apart in heading. The
/// second clause makes a reverse pass over the same spot a new place.
pub fn discretize_places(trajectory: &Trajectory, d_p: f64, heading_gate: f64) -> Vec<Place> {
    let mut places: Vec<Place> = Vec::new();
    for &(timestamp, pose) in &trajectory.fixes {
        let is_new = places.iter().all(|p| {
            pose.distance(&p.pose) >= d_p || pose.heading_difference(&p.pose) >= heading_gate
        });
        if is_new {
            places.push(Place {
                id: PlaceId(places.len() as u32),
                pose,
                source_timestamp: timestamp,
            });
        }
    }
    places
}

/// Assigns each sample to every place within `d_w` meters whose heading
/// differs by less than `heading_gate`. Samples in another UTM zone never
/// match. Unmatched samples are returned in `unassigned`.
pub fn assign_samples(
    places: &[Place],
    samples: &[SampleFix],
    d_w: f64,
    heading_gate: f64,
) -> Assignment {
    let mut assignment = Assignment::default();
    for sample in samples {
        let mut hit = false;
        for place in places {
            if sample.pose.zone == place.pose.zone
                && sample.pose.distance(&place.pose) <= d_w
                && sample.pose.heading_difference(&place.pose) < heading_gate
            {
                assignment
                    .by_place
                    .entry(place.id)
                    .or_default()
                    .push(sample.sample_id);
                hit = true;
            }
        }
        if !hit {
            assignment.unassigned.push(sample.sample_id);
        }
    }
    assignment
}

/// Splits places into train/test/buffer. Contiguous segments of the
/// time-ordered place list alternate between train and test (the segment
/// phase depends on the seed), then every place strictly closer than
/// `buffer_radius` to a place of the other side is moved to the buffer.
/// After buffering, no test place lies within `buffer_radius` of any
/// train place.
pub fn split_places(
    places: &[Place],
    train_fraction: f64,
    buffer_radius: f64,
    seed: u64,
) -> Result<PlaceSplit, GeoError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(GeoError::InvalidFraction {
            value: train_fraction,
        });
    }
    let n = places.len();
    let mut split = PlaceSplit::default();
    if n == 0 {
        return Ok(split);
    }

    let cycle = (n / 5).clamp(4, 40);
    let train_len = ((train_fraction * cycle as f64).round() as usize).clamp(1, cycle - 1);
    let offset = (seed % cycle as u64) as usize;

    let is_train: Vec<bool> = (0..n).map(|i| (i + offset) % cycle < train_len).collect();

    for (i, place) in places.iter().enumerate() {
        let near_boundary = places.iter().enumerate().any(|(j, other)| {
            is_train[i] != is_train[j] && place.pose.distance(&other.pose) < buffer_radius
        });
        if near_boundary {
            split.buffer.insert(place.id);
        } else if is_train[i] {
            split.train.insert(place.id);
        } else {
            split.test.insert(place.id);
        }
    }
    Ok(split)
}
