//! Deterministic synthetic world: a closed loop of places with latent
//! appearance signatures, rendered into camera frames and lidar scans
//! under configurable weather.
//!
//! The loop is a circle traversed at constant speed. Appearance comes
//! from a small bank of cosine harmonics whose phase advances with the
//! loop angle, so nearby places look similar and far places look
//! different; that gradient is what makes hard negatives (neighbouring
//! places) genuinely harder than random ones. Camera harmonics advance
//! faster with angle than lidar harmonics, which mirrors the source
//! sensors: appearance changes quickly along a street while coarse
//! structure changes slowly.
//!
//! Weather acts on rendered payloads only. Sun glare veils the whole
//! camera frame toward white and burns bloom disks into it, never
//! touching scan bytes; rain removes scan returns and only slightly
//! perturbs the camera; darkness scales the camera toward black. Every
//! render is deterministic under the triple (world seed, weather seed,
//! jitter seed).

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::eval::{RunManifest, WeatherCategory};
use crate::geo::{utm_to_geo, GeoFix, MetricPose, Place, UtmZone};
use crate::ids::{PlaceId, RunId, SampleId};
use crate::imaging::{LidarPoint, LidarScan, RgbImage, LIDAR_RINGS};
use crate::mining::splitmix64;

/// Rendered camera frame height.
pub const CAMERA_ROWS: usize = 240;
/// Rendered camera frame width.
pub const CAMERA_COLS: usize = 320;
/// Scan returns per ring, placed at the azimuth bin centers of a
/// 360-column projection.
pub const SCAN_AZIMUTHS: usize = 360;
/// Seconds between samples; one sample per place along the loop.
pub const SAMPLE_PERIOD_S: f64 = 2.0;
/// Seconds between GPS fixes.
pub const FIX_PERIOD_S: f64 = 0.7;
/// Standard deviation of per-fix GPS noise, meters per axis.
pub const GPS_SIGMA_M: f64 = 0.3;
/// Hard clamp on per-fix GPS noise, meters per axis.
pub const GPS_CLAMP_M: f64 = 0.8;
/// Per-sample phase noise on camera harmonics, radians. Sized so that a
/// place remains closer to itself across runs than to its neighbours,
/// but not by a wide margin; the residual confusions are what training
/// on hard negatives removes.
pub const CAMERA_PHASE_JITTER: f64 = 0.25;
/// Per-sample phase noise on lidar harmonics, radians.
pub const LIDAR_PHASE_JITTER: f64 = 0.11;

const WORLD_SALT: u64 = 0x776f_726c_6467_656e;
const GPS_SALT: u64 = 0x6770_735f_6e6f_6973;
const PHASE_SALT: u64 = 0x7068_6173_656a_6974;
const WEATHER_SAMPLE_SALT: u64 = 0x7778_5f73_616d_706c;
const SUN_DISK_SALT: u64 = 0x7375_6e5f_6469_736b;

/// World center, mid-zone UTM 56S (Sydney region).
const CENTER_EASTING: f64 = 334_800.0;
const CENTER_NORTHING: f64 = 6_248_700.0;
const CENTER_ZONE: UtmZone = UtmZone { number: 56, south: true };

const SUN_DISKS: usize = 50;
/// Summed naive bloom-disk area as a fraction of the frame at severity 1.
/// With random centers the union coverage is about 1 - exp(-0.08).
const SUN_DISK_AREA_FACTOR: f64 = 0.08;
/// Additive lift toward white that veiling glare applies at severity 1,
/// as a fraction of full scale.
const SUN_VEIL_FACTOR: f64 = 0.68;
/// Contrast loss that accompanies the lift. Kept deliberately smaller than
/// the lift so bright content clips to pure white: a uniform lift with
/// matching dimming is just a contrast change, but clipped highlights are
/// gone for good, which is what makes glare glare.
const SUN_DIM_FACTOR: f64 = 0.44;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("world needs at least 2 places, got {0}")]
    TooFewPlaces(usize),
    #[error("loop length must be finite and positive, got {0}")]
    BadLoopLength(f64),
    #[error("appearance_dim must be at least 1")]
    ZeroAppearance,
    #[error("weather severity {0} outside [0, 1]")]
    BadSeverity(f64),
    #[error("unknown weather kind {0:?}")]
    UnknownKind(String),
}

/// Parameters of a synthetic world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldSpec {
    pub n_places: usize,
    /// Loop circumference in meters.
    pub loop_length: f64,
    pub seed: u64,
    /// Harmonics per camera channel and for the lidar signature.
    pub appearance_dim: usize,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.n_places < 2 {
            return Err(WorldError::TooFewPlaces(self.n_places));
        }
        if !(self.loop_length.is_finite() && self.loop_length > 0.0) {
            return Err(WorldError::BadLoopLength(self.loop_length));
        }
        if self.appearance_dim == 0 {
            return Err(WorldError::ZeroAppearance);
        }
        Ok(())
    }
}

/// Weather condition applied at render time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeatherKind {
    Clean,
    SunGlare,
    AfterRain,
    Darkness,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 4] = [
        WeatherKind::Clean,
        WeatherKind::SunGlare,
        WeatherKind::AfterRain,
        WeatherKind::Darkness,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            WeatherKind::Clean => "clean",
            WeatherKind::SunGlare => "sun_glare",
            WeatherKind::AfterRain => "after_rain",
            WeatherKind::Darkness => "darkness",
        }
    }

    pub fn from_str(s: &str) -> Result<Self, WorldError> {
        WeatherKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| WorldError::UnknownKind(s.to_string()))
    }

    /// Report bucket for this condition. The four synthetic kinds cover
    /// four of the six categories; the remaining two stay empty and
    /// exercise the report's empty-cell rendering.
    pub fn category(&self) -> WeatherCategory {
        match self {
            WeatherKind::Clean => WeatherCategory::Cloudy,
            WeatherKind::SunGlare => WeatherCategory::Sunny,
            WeatherKind::AfterRain => WeatherCategory::AfterRain,
            WeatherKind::Darkness => WeatherCategory::Sunset,
        }
    }
}

impl std::fmt::Display for WeatherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A weather condition with its strength and its own noise stream.
/// Clean is the identity transform at any severity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeatherEffect {
    pub kind: WeatherKind,
    pub severity: f64,
    pub seed: u64,
}

impl WeatherEffect {
    pub fn clean() -> Self {
        WeatherEffect { kind: WeatherKind::Clean, severity: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.severity.is_finite() && (0.0..=1.0).contains(&self.severity)) {
            return Err(WorldError::BadSeverity(self.severity));
        }
        Ok(())
    }
}

/// One cosine harmonic of a camera channel. The rendered value at pixel
/// (row v, col u) for loop angle theta is
/// `cos(TAU*(col_freq*u/W + row_freq*v/H) + place_mult*theta + phase)`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct RgbHarmonic {
    col_freq: f64,
    row_freq: f64,
    place_mult: f64,
    phase: f64,
}

/// One harmonic of the lidar intensity signature over (azimuth, ring).
#[derive(Clone, Copy, Debug, PartialEq)]
struct LidarHarmonic {
    az_freq: f64,
    ring_freq: f64,
    place_mult: f64,
    phase: f64,
}

/// A generated world: loop geometry plus the harmonic banks that define
/// every place's appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub radius: f64,
    rgb: [Vec<RgbHarmonic>; 3],
    lidar: Vec<LidarHarmonic>,
}

impl World {
    /// Arc distance between consecutive places.
    pub fn place_spacing(&self) -> f64 {
        self.spec.loop_length / self.spec.n_places as f64
    }

    /// Pose on the loop at angle `theta`, heading tangent (counter
    /// clockwise travel).
    pub fn pose_at(&self, theta: f64) -> MetricPose {
        MetricPose {
            easting: CENTER_EASTING + self.radius * theta.cos(),
            northing: CENTER_NORTHING + self.radius * theta.sin(),
            heading: crate::geo::wrap_angle(theta + FRAC_PI_2),
            zone: CENTER_ZONE,
        }
    }

    /// Loop angle of the vehicle at time `t`.
    pub fn angle_at(&self, t: f64) -> f64 {
        TAU * t / (SAMPLE_PERIOD_S * self.spec.n_places as f64)
    }

    /// The ground-truth place list: one place per sample slot, in travel
    /// order, timestamped by the visit schedule.
    pub fn places(&self) -> Vec<Place> {
        (0..self.spec.n_places)
            .map(|i| Place {
                id: PlaceId(i as u32),
                pose: self.pose_at(TAU * i as f64 / self.spec.n_places as f64),
                source_timestamp: i as f64 * SAMPLE_PERIOD_S,
            })
            .collect()
    }
}

/// Builds a world from its spec. Same spec, same world.
pub fn generate_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(spec.seed ^ WORLD_SALT));
    let k = spec.appearance_dim;

    // Draw order is part of the world's identity: camera channels first,
    // then lidar. Camera place multipliers are high (appearance changes
    // fast along the loop), lidar ones low (structure changes slowly).
    let rgb = [(); 3].map(|_| {
        (0..k)
            .map(|_| RgbHarmonic {
                col_freq: rng.gen_range(1..=6) as f64,
                row_freq: rng.gen_range(1..=6) as f64,
                place_mult: rng.gen_range(3..=9) as f64,
                phase: rng.gen::<f64>() * TAU,
            })
            .collect()
    });
    let lidar = (0..k)
        .map(|_| LidarHarmonic {
            az_freq: rng.gen_range(1..=3) as f64,
            ring_freq: rng.gen_range(0..=3) as f64,
            place_mult: rng.gen_range(1..=4) as f64,
            phase: rng.gen::<f64>() * TAU,
        })
        .collect();

    Ok(World {
        spec: *spec,
        radius: spec.loop_length / TAU,
        rgb,
        lidar,
    })
}

/// One rendered observation: both modalities plus its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub id: SampleId,
    pub timestamp: f64,
    /// Exact pose on the loop, before GPS noise.
    pub true_pose: MetricPose,
    pub rgb: RgbImage,
    pub scan: LidarScan,
}

/// A full pass around the loop under one weather condition.
#[derive(Clone, Debug)]
pub struct SyntheticRun {
    pub run_id: RunId,
    pub weather: WeatherEffect,
    /// Noisy GPS fixes, the raw input of the ingest stage.
    pub track: Vec<GeoFix>,
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticRun {
    /// Ground-truth manifest over the true poses.
    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            run_id: self.run_id.clone(),
            weather: self.weather.kind.category(),
            samples: self.samples.iter().map(|s| (s.id, s.true_pose)).collect(),
        }
    }
}

/// Renders one loop traversal. Sample ids are `id_base + i` in travel
/// order. The run covers `n_places + 1` samples: the last one falls just
/// past the final GPS fix, which downstream ingest must drop rather than
/// extrapolate. Deterministic under (world, weather.seed, jitter_seed).
pub fn render_run(
    world: &World,
    run_id: RunId,
    id_base: u64,
    weather: &WeatherEffect,
    jitter_seed: u64,
) -> SyntheticRun {
    weather.validate().expect("weather validated by caller");
    let n = world.spec.n_places;

    // GPS fixes every FIX_PERIOD_S, ending at least half a sample period
    // before the extra sample so its pose cannot be interpolated.
    let t_end = SAMPLE_PERIOD_S * n as f64 - 0.5;
    let fix_count = (t_end / FIX_PERIOD_S).floor() as usize + 1;
    let mut gps_rng = ChaCha12Rng::seed_from_u64(splitmix64(jitter_seed ^ GPS_SALT));
    let track: Vec<GeoFix> = (0..fix_count)
        .map(|kf| {
            let t = kf as f64 * FIX_PERIOD_S;
            let pose = world.pose_at(world.angle_at(t));
            let dx: f64 = gps_rng.sample::<f64, _>(StandardNormal) * GPS_SIGMA_M;
            let dy: f64 = gps_rng.sample::<f64, _>(StandardNormal) * GPS_SIGMA_M;
            let e = pose.easting + dx.clamp(-GPS_CLAMP_M, GPS_CLAMP_M);
            let no = pose.northing + dy.clamp(-GPS_CLAMP_M, GPS_CLAMP_M);
            let (lat, lon) = utm_to_geo(e, no, CENTER_ZONE).expect("center is mid-zone");
            GeoFix { timestamp: t, lat_deg: lat, lon_deg: lon }
        })
        .collect();

    // The sun holds one position over a traversal, so its bloom disks are
    // laid out once per run; only the veil and the scene vary per frame.
    let sun_disks: Vec<(f64, f64)> = if matches!(weather.kind, WeatherKind::SunGlare) {
        let mut disk_rng = ChaCha12Rng::seed_from_u64(splitmix64(weather.seed ^ SUN_DISK_SALT));
        (0..SUN_DISKS).map(|_| (disk_rng.gen(), disk_rng.gen())).collect()
    } else {
        Vec::new()
    };

    let samples: Vec<SyntheticSample> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let id = SampleId(id_base + i as u64);
            let t = i as f64 * SAMPLE_PERIOD_S;
            let theta = world.angle_at(t);

            let mut phase_rng = ChaCha12Rng::seed_from_u64(splitmix64(
                jitter_seed ^ PHASE_SALT ^ splitmix64(id.0),
            ));
            let k = world.spec.appearance_dim;
            let rgb_jitter: Vec<f64> = (0..3 * k)
                .map(|_| phase_rng.sample::<f64, _>(StandardNormal) * CAMERA_PHASE_JITTER)
                .collect();
            let lidar_jitter: Vec<f64> = (0..k)
                .map(|_| phase_rng.sample::<f64, _>(StandardNormal) * LIDAR_PHASE_JITTER)
                .collect();

            let mut rgb = render_rgb(world, theta, &rgb_jitter);
            let mut scan = render_scan(world, theta, &lidar_jitter);

            let mut weather_rng = ChaCha12Rng::seed_from_u64(splitmix64(
                weather.seed ^ WEATHER_SAMPLE_SALT ^ splitmix64(id.0),
            ));
            apply_weather_rgb(&mut rgb, weather, &sun_disks);
            scan = apply_weather_scan(scan, weather, &mut weather_rng);

            SyntheticSample { id, timestamp: t, true_pose: world.pose_at(theta), rgb, scan }
        })
        .collect();

    SyntheticRun { run_id, weather: *weather, track, samples }
}

/// Renders the camera frame for loop angle `theta`. `jitter` holds one
/// phase offset per (channel, harmonic) pair.
fn render_rgb(world: &World, theta: f64, jitter: &[f64]) -> RgbImage {
    let k = world.spec.appearance_dim;
    let amp = 0.45 / k as f64;
    let mut pixels = vec![0u8; CAMERA_ROWS * CAMERA_COLS * 3];
    let mut plane = vec![0.0f64; CAMERA_ROWS * CAMERA_COLS];
    for (c, harmonics) in world.rgb.iter().enumerate() {
        plane.fill(0.5);
        for (kk, h) in harmonics.iter().enumerate() {
            let carried = h.place_mult * theta + h.phase + jitter[c * k + kk];
            // cos(X + Y) split over column tables: X is the column term,
            // Y carries row term plus phase.
            let col_cos: Vec<f64> = (0..CAMERA_COLS)
                .map(|u| (TAU * h.col_freq * u as f64 / CAMERA_COLS as f64).cos())
                .collect();
            let col_sin: Vec<f64> = (0..CAMERA_COLS)
                .map(|u| (TAU * h.col_freq * u as f64 / CAMERA_COLS as f64).sin())
                .collect();
            for v in 0..CAMERA_ROWS {
                let y = TAU * h.row_freq * v as f64 / CAMERA_ROWS as f64 + carried;
                let (sy, cy) = y.sin_cos();
                let row = &mut plane[v * CAMERA_COLS..(v + 1) * CAMERA_COLS];
                for (u, cell) in row.iter_mut().enumerate() {
                    *cell += amp * (cy * col_cos[u] - sy * col_sin[u]);
                }
            }
        }
        for (i, &value) in plane.iter().enumerate() {
            pixels[i * 3 + c] = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    RgbImage::new(CAMERA_ROWS, CAMERA_COLS, pixels).expect("buffer sized to dimensions")
}

/// Renders the lidar scan for loop angle `theta`: one return per (ring,
/// azimuth bin center). `jitter` holds one phase offset per harmonic.
fn render_scan(world: &World, theta: f64, jitter: &[f64]) -> LidarScan {
    let k = world.spec.appearance_dim;
    // High contrast on purpose: retroreflective signage against asphalt
    // spans most of the normalized scale, and the louder signature keeps
    // the 16 intensity rows audible next to the 208 RGB rows when the
    // fused tower trains on both.
    let amp = 0.9 / k as f64;
    let mut points = Vec::with_capacity(LIDAR_RINGS * SCAN_AZIMUTHS);
    for ring in 0..LIDAR_RINGS {
        for col in 0..SCAN_AZIMUTHS {
            let azimuth = -std::f64::consts::PI + (col as f64 + 0.5) * TAU / SCAN_AZIMUTHS as f64;
            let mut intensity = 0.5;
            for (kk, h) in world.lidar.iter().enumerate() {
                intensity += amp
                    * (h.az_freq * azimuth
                        + TAU * h.ring_freq * ring as f64 / LIDAR_RINGS as f64
                        + h.place_mult * theta
                        + h.phase
                        + jitter[kk])
                        .cos();
            }
            points.push(LidarPoint {
                ring: ring as u8,
                azimuth,
                range: 12.0 + 4.0 * (azimuth + 0.3 * ring as f64).cos(),
                intensity: intensity.clamp(0.0, 1.0),
            });
        }
    }
    debug_assert_eq!(points.len(), LIDAR_RINGS * SCAN_AZIMUTHS);
    LidarScan::new(points).expect("generated returns are in range")
}

fn apply_weather_rgb(img: &mut RgbImage, weather: &WeatherEffect, sun_disks: &[(f64, f64)]) {
    let s = weather.severity;
    match weather.kind {
        WeatherKind::Clean => {}
        WeatherKind::SunGlare => {
            // Veiling glare first: a uniform lift toward white over the
            // whole frame, as flare scatter inside the lens. This is the
            // dominant effect and is identical for every frame of the
            // run, so exposures stay mutually consistent. The lift outruns
            // the dimming, so highlights saturate and lose their detail.
            scale_rgb(img, 1.0 - SUN_DIM_FACTOR * s, SUN_VEIL_FACTOR * s * 255.0);
            // Bloom disks on top: hard overexposure around the sun and
            // its specular reflections, at the run's fixed layout.
            let (h, w) = (img.height(), img.width());
            let area = SUN_DISK_AREA_FACTOR * s * (h * w) as f64;
            let radius = (area / (SUN_DISKS as f64 * std::f64::consts::PI)).sqrt();
            for &(y, x) in sun_disks {
                let cy = y * h as f64;
                let cx = x * w as f64;
                let r0 = (cy - radius).floor().max(0.0) as usize;
                let r1 = ((cy + radius).ceil() as usize).min(h.saturating_sub(1));
                let c0 = (cx - radius).floor().max(0.0) as usize;
                let c1 = ((cx + radius).ceil() as usize).min(w.saturating_sub(1));
                for row in r0..=r1 {
                    for col in c0..=c1 {
                        let dy = row as f64 + 0.5 - cy;
                        let dx = col as f64 + 0.5 - cx;
                        if dy * dy + dx * dx <= radius * radius {
                            img.set_pixel(row, col, [255, 255, 255]);
                        }
                    }
                }
            }
        }
        WeatherKind::AfterRain => {
            // Wet-road darkening plus a slight haze lift; the shift is
            // kept well under the 0.05 budget so rain is mainly a lidar
            // degradation.
            scale_rgb(img, 1.0 - 0.08 * s, 0.02 * s * 255.0);
        }
        WeatherKind::Darkness => {
            scale_rgb(img, 1.0 - 0.85 * s, 0.0);
        }
    }
}

fn scale_rgb(img: &mut RgbImage, gain: f64, lift: f64) {
    for row in 0..img.height() {
        for col in 0..img.width() {
            let px = [0, 1, 2].map(|ch| {
                let v = img.pixel(row, col, ch) as f64 * gain + lift;
                v.clamp(0.0, 255.0).round() as u8
            });
            img.set_pixel(row, col, px);
        }
    }
}

fn apply_weather_scan(
    scan: LidarScan,
    weather: &WeatherEffect,
    rng: &mut ChaCha12Rng,
) -> LidarScan {
    match weather.kind {
        // Raindrops absorb returns: each is dropped independently with
        // probability equal to the severity.
        WeatherKind::AfterRain => LidarScan {
            points: scan
                .points
                .into_iter()
                .filter(|_| rng.gen::<f64>() >= weather.severity)
                .collect(),
        },
        // Optical conditions never touch the scan.
        WeatherKind::Clean | WeatherKind::SunGlare | WeatherKind::Darkness => scan,
    }
}
