//! Network input construction for the three modalities.
//!
//! Camera frames are bilinearly resized to 224x224. Spinning-lidar scans
//! are first binned into a 16-row intensity image (row = laser ring,
//! column = azimuth bin, strongest return wins a cell), then stretched to
//! the network size: rows are replicated 14x nearest-neighbour so no
//! synthetic rings are invented between physically distinct lasers, and
//! columns are interpolated bilinearly. The fused layout stacks the 16
//! intensity rows on top of the RGB frame resized to 208x224.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use thiserror::Error;

use crate::geo::wrap_angle;

/// Height and width of every network input.
pub const NET_INPUT_SIDE: usize = 224;
/// Number of laser rings of the supported sensor.
pub const LIDAR_RINGS: usize = 16;
/// Row replication factor for the 16 -> 224 stretch.
pub const ROW_REPLICATION: usize = NET_INPUT_SIDE / LIDAR_RINGS;
/// Rows owned by the RGB part of the fused layout.
pub const FUSED_RGB_ROWS: usize = NET_INPUT_SIDE - LIDAR_RINGS;
/// Default azimuth bin count: 0.5 degree bins, close to the sensor's
/// native horizontal resolution.
pub const DEFAULT_AZIMUTH_COLS: usize = 720;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image must be at least 1x1, got {height}x{width}")]
    EmptyImage { height: usize, width: usize },
    #[error("pixel buffer holds {got} bytes, expected {expected}")]
    BadPixelBuffer { expected: usize, got: usize },
    #[error("azimuth bin count must be >= 1")]
    ZeroCols,
    #[error("azimuth fov must have positive width, got {width}")]
    EmptyFov { width: f64 },
    #[error("intensity image must be {LIDAR_RINGS} x cols, got {rows} x {cols}")]
    BadIntensityShape { rows: usize, cols: usize },
    #[error("net input must be {NET_INPUT_SIDE}x{NET_INPUT_SIDE}x3, got {shape:?}")]
    BadTensorShape { shape: Vec<usize> },
    #[error("scan point out of contract at line {line}: {reason}")]
    InvalidPoint { line: usize, reason: String },
    #[error("scan file parse error at line {line}: {reason}")]
    ScanParse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Which pipeline produced a [`NetInput`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayoutTag {
    Rgb,
    Intensity,
    Fused,
}

impl fmt::Display for LayoutTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayoutTag::Rgb => "rgb",
            LayoutTag::Intensity => "intensity",
            LayoutTag::Fused => "fused",
        })
    }
}

/// 8-bit 3-channel raster image, row major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if height == 0 || width == 0 {
            return Err(ImagingError::EmptyImage { height, width });
        }
        let expected = height * width * 3;
        if pixels.len() != expected {
            return Err(ImagingError::BadPixelBuffer {
                expected,
                got: pixels.len(),
            });
        }
        Ok(RgbImage {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(row, col) -> [r, g, b]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self, ImagingError> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                pixels.extend_from_slice(&f(r, c));
            }
        }
        RgbImage::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.pixels[(row * self.width + col) * 3 + channel]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let at = (row * self.width + col) * 3;
        self.pixels[at..at + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// One lidar return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    /// Laser ring, 0 (lowest) to 15.
    pub ring: u8,
    /// Azimuth in radians, normalized to [-pi, pi).
    pub azimuth: f64,
    /// Range in meters, > 0.
    pub range: f64,
    /// Return intensity normalized to [0, 1].
    pub intensity: f64,
}

/// A full scan: an unordered bag of returns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LidarScan {
    pub points: Vec<LidarPoint>,
}

impl LidarScan {
    pub fn new(points: Vec<LidarPoint>) -> Result<Self, ImagingError> {
        for (i, p) in points.iter().enumerate() {
            validate_point(p, i + 1)?;
        }
        Ok(LidarScan { points })
    }
}

fn validate_point(p: &LidarPoint, line: usize) -> Result<(), ImagingError> {
    let fail = |reason: String| Err(ImagingError::InvalidPoint { line, reason });
    if p.ring as usize >= LIDAR_RINGS {
        return fail(format!("ring {} >= {LIDAR_RINGS}", p.ring));
    }
    if !p.azimuth.is_finite() || !(-PI..PI).contains(&p.azimuth) {
        return fail(format!("azimuth {} not in [-pi, pi)", p.azimuth));
    }
    if !(p.range > 0.0) || !p.range.is_finite() {
        return fail(format!("range {} must be finite and > 0", p.range));
    }
    if !(0.0..=1.0).contains(&p.intensity) {
        return fail(format!("intensity {} not in [0, 1]", p.intensity));
    }
    Ok(())
}

/// Azimuth interval covered by the intensity image columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AzimuthFov {
    /// Left edge in radians.
    pub start: f64,
    /// Width in radians, > 0. Points with azimuth outside
    /// [start, start + width) are dropped.
    pub width: f64,
}

impl AzimuthFov {
    /// Full 360 degree sweep.
    pub fn full() -> Self {
        AzimuthFov {
            start: -PI,
            width: 2.0 * PI,
        }
    }

    /// Forward-facing 180 degree preset.
    pub fn forward_180() -> Self {
        AzimuthFov {
            start: -PI / 2.0,
            width: PI,
        }
    }

    pub fn contains(&self, azimuth: f64) -> bool {
        azimuth >= self.start && azimuth < self.start + self.width
    }
}

/// 16-row lidar intensity image. Zero means no return in that cell.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    cols: usize,
    cells: Vec<f64>,
}

impl IntensityImage {
    pub fn zeros(cols: usize) -> Result<Self, ImagingError> {
        if cols == 0 {
            return Err(ImagingError::ZeroCols);
        }
        Ok(IntensityImage {
            cols,
            cells: vec![0.0; LIDAR_RINGS * cols],
        })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.cells[row * self.cols + col] = value;
    }

    fn row(&self, row: usize) -> &[f64] {
        &self.cells[row * self.cols..(row + 1) * self.cols]
    }
}

/// Fixed-size network input tensor (height, width, channel), values in
/// [0, 1]. The constructor clamps rather than rejects, so upstream float
/// jitter can never push a tensor out of contract.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    data: Array3<f32>,
    layout: LayoutTag,
}

impl NetInput {
    pub fn new(mut data: Array3<f32>, layout: LayoutTag) -> Result<Self, ImagingError> {
        if data.shape() != [NET_INPUT_SIDE, NET_INPUT_SIDE, 3] {
            return Err(ImagingError::BadTensorShape {
                shape: data.shape().to_vec(),
            });
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(NetInput { data, layout })
    }

    pub fn layout(&self) -> LayoutTag {
        self.layout
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// Widened copy for the descriptor network, which runs in f64.
    pub fn to_f64(&self) -> Array3<f64> {
        self.data.mapv(f64::from)
    }

    /// Canonical little-endian byte serialization, for fixture hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Source coordinate of an output pixel center under bilinear resizing.
fn src_coord(dst: usize, scale: f64) -> (usize, usize, f64, usize) {
    // Returns (lo, hi, weight, src_len_hint unused); caller clamps hi.
    let s = (dst as f64 + 0.5) * scale - 0.5;
    let s = s.max(0.0);
    let lo = s.floor() as usize;
    (lo, lo + 1, s - lo as f64, 0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resize of an 8-bit image to an arbitrary float grid in [0, 1].
/// Output is (rows, cols, 3). Constant inputs stay exactly constant.
pub fn resize_rgb_to(img: &RgbImage, rows: usize, cols: usize) -> Array3<f32> {
    let scale_r = img.height() as f64 / rows as f64;
    let scale_c = img.width() as f64 / cols as f64;
    let mut out = Array3::zeros((rows, cols, 3));
    for r in 0..rows {
        let (r0, r1, wr, _) = src_coord(r, scale_r);
        let r1 = r1.min(img.height() - 1);
        let r0 = r0.min(img.height() - 1);
        for c in 0..cols {
            let (c0, c1, wc, _) = src_coord(c, scale_c);
            let c1 = c1.min(img.width() - 1);
            let c0 = c0.min(img.width() - 1);
            for ch in 0..3 {
                let p00 = img.pixel(r0, c0, ch) as f64 / 255.0;
                let p01 = img.pixel(r0, c1, ch) as f64 / 255.0;
                let p10 = img.pixel(r1, c0, ch) as f64 / 255.0;
                let p11 = img.pixel(r1, c1, ch) as f64 / 255.0;
                let top = lerp(p00, p01, wc);
                let bottom = lerp(p10, p11, wc);
                out[(r, c, ch)] = lerp(top, bottom, wr) as f32;
            }
        }
    }
    out
}

/// Camera modality input: bilinear resize to 224x224, scaled to [0, 1].
pub fn resize_rgb(img: &RgbImage) -> Result<NetInput, ImagingError> {
    NetInput::new(
        resize_rgb_to(img, NET_INPUT_SIDE, NET_INPUT_SIDE),
        LayoutTag::Rgb,
    )
}

/// Bins scan returns into the 16 x cols intensity image. Row is the ring,
/// column is the azimuth bin, and when several returns land in one cell
/// the strongest intensity wins, which makes the result independent of
/// point order. Points outside the fov are dropped; empty cells stay 0.
pub fn project_intensity(
    scan: &LidarScan,
    cols: usize,
    fov: AzimuthFov,
) -> Result<IntensityImage, ImagingError> {
    if !(fov.width > 0.0) {
        return Err(ImagingError::EmptyFov { width: fov.width });
    }
    let mut img = IntensityImage::zeros(cols)?;
    for p in &scan.points {
        if !fov.contains(p.azimuth) {
            continue;
        }
        let col = ((p.azimuth - fov.start) / fov.width * cols as f64).floor() as usize;
        let col = col.min(cols - 1);
        let row = p.ring as usize;
        if p.intensity > img.get(row, col) {
            img.set(row, col, p.intensity);
        }
    }
    Ok(img)
}

/// Resizes one intensity row to `cols` columns bilinearly.
fn resize_intensity_row(row: &[f64], cols: usize) -> Vec<f64> {
    let scale = row.len() as f64 / cols as f64;
    (0..cols)
        .map(|c| {
            let (c0, c1, w, _) = src_coord(c, scale);
            let c0 = c0.min(row.len() - 1);
            let c1 = c1.min(row.len() - 1);
            lerp(row[c0], row[c1], w)
        })
        .collect()
}

/// Lidar modality input: every source row replicated 14x, columns resized
/// bilinearly to 224, the single channel copied into all three.
pub fn intensity_to_netinput(img: &IntensityImage) -> Result<NetInput, ImagingError> {
    let mut out = Array3::zeros((NET_INPUT_SIDE, NET_INPUT_SIDE, 3));
    for src_row in 0..LIDAR_RINGS {
        let resized = resize_intensity_row(img.row(src_row), NET_INPUT_SIDE);
        for rep in 0..ROW_REPLICATION {
            let r = src_row * ROW_REPLICATION + rep;
            for (c, &v) in resized.iter().enumerate() {
                let v = v as f32;
                out[(r, c, 0)] = v;
                out[(r, c, 1)] = v;
                out[(r, c, 2)] = v;
            }
        }
    }
    NetInput::new(out, LayoutTag::Intensity)
}

/// Fused modality input: rows 0-15 carry the intensity image resized
/// along columns only, rows 16-223 carry the RGB frame resized to
/// 208x224. The RGB block is bit-identical to `resize_rgb_to(rgb, 208, 224)`.
pub fn compose_fused(
    intensity: &IntensityImage,
    rgb: &RgbImage,
) -> Result<NetInput, ImagingError> {
    let mut out = Array3::zeros((NET_INPUT_SIDE, NET_INPUT_SIDE, 3));
    for row in 0..LIDAR_RINGS {
        let resized = resize_intensity_row(intensity.row(row), NET_INPUT_SIDE);
        for (c, &v) in resized.iter().enumerate() {
            let v = v as f32;
            out[(row, c, 0)] = v;
            out[(row, c, 1)] = v;
            out[(row, c, 2)] = v;
        }
    }
    let rgb_block = resize_rgb_to(rgb, FUSED_RGB_ROWS, NET_INPUT_SIDE);
    for r in 0..FUSED_RGB_ROWS {
        for c in 0..NET_INPUT_SIDE {
            for ch in 0..3 {
                out[(LIDAR_RINGS + r, c, ch)] = rgb_block[(r, c, ch)];
            }
        }
    }
    NetInput::new(out, LayoutTag::Fused)
}

/// Reads a line-delimited scan payload: `ring, azimuth_rad, range_m,
/// intensity_0_1` per return. Intensities must already be normalized;
/// sensors reporting the raw 0-255 scale need a division by 255 upstream.
/// Blank lines and `#` comments are skipped.
pub fn read_scan(path: &Path) -> Result<LidarScan, ImagingError> {
    let file = std::fs::File::open(path)?;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(ImagingError::ScanParse {
                line: line_no,
                reason: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64, ImagingError> {
            s.parse::<f64>().map_err(|e| ImagingError::ScanParse {
                line: line_no,
                reason: format!("{what}: {e}"),
            })
        };
        let ring = fields[0].parse::<u8>().map_err(|e| ImagingError::ScanParse {
            line: line_no,
            reason: format!("ring: {e}"),
        })?;
        let point = LidarPoint {
            ring,
            azimuth: wrap_angle(parse(fields[1], "azimuth")?),
            range: parse(fields[2], "range")?,
            intensity: parse(fields[3], "intensity")?,
        };
        validate_point(&point, line_no)?;
        points.push(point);
    }
    Ok(LidarScan { points })
}

/// Writes a scan payload in the format accepted by [`read_scan`].
pub fn write_scan(path: &Path, scan: &LidarScan) -> Result<(), ImagingError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for p in &scan.points {
        writeln!(w, "{},{},{},{}", p.ring, p.azimuth, p.range, p.intensity)?;
    }
    w.flush()?;
    Ok(())
}

/// Decodes an 8-bit image file into an [`RgbImage`].
pub fn load_rgb(path: &Path) -> Result<RgbImage, ImagingError> {
    let img = image::open(path)?.to_rgb8();
    RgbImage::new(
        img.height() as usize,
        img.width() as usize,
        img.into_raw(),
    )
}

/// Encodes an [`RgbImage`] as PNG.
pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<(), ImagingError> {
    let buf: image::RgbImage = image::ImageBuffer::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.pixels().to_vec(),
    )
    .expect("buffer length checked at construction");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
