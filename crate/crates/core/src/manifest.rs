//! Plain-text tables the pipeline stages hand to each other.
//!
//! Every artifact is a small CSV with a fixed header row. The codecs here
//! round-trip `f64` values exactly (Rust's `Display` for floats emits the
//! shortest string that parses back to the same bits), so a table written
//! and re-read yields bitwise identical values. Parse failures report the
//! file and 1-based line number instead of a bare serde error, because
//! these files are the first place people look when a run goes wrong.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::descriptor::DescriptorVector;
use crate::eval::WeatherCategory;
use crate::geo::{GeoFix, MetricPose, Place, PlaceSplit, SampleFix, UtmZone};
use crate::ids::{PlaceId, RunId, SampleId};

/// Failure while reading or writing an artifact table.
#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> ManifestError {
    ManifestError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Splits one CSV line into exactly `n` fields.
fn fields<'a>(
    path: &Path,
    line_no: usize,
    line: &'a str,
    n: usize,
) -> Result<Vec<&'a str>, ManifestError> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != n {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {n} fields, found {}", parts.len()),
        ));
    }
    Ok(parts)
}

fn parse_f64(path: &Path, line: usize, field: &str, what: &str) -> Result<f64, ManifestError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("bad {what} value {field:?}")))
}

fn parse_u64(path: &Path, line: usize, field: &str, what: &str) -> Result<u64, ManifestError> {
    field
        .trim()
        .parse::<u64>()
        .map_err(|_| parse_err(path, line, format!("bad {what} value {field:?}")))
}

fn parse_zone(path: &Path, line: usize, field: &str) -> Result<UtmZone, ManifestError> {
    let field = field.trim();
    let bad = || parse_err(path, line, format!("bad utm zone {field:?}"));
    let (digits, hemi) = field.split_at(field.len().saturating_sub(1));
    let south = match hemi {
        "S" => true,
        "N" => false,
        _ => return Err(bad()),
    };
    let number: u8 = digits.parse().map_err(|_| bad())?;
    if number == 0 || number > 60 {
        return Err(bad());
    }
    Ok(UtmZone { number, south })
}

/// Reads a table, checks the header, and hands each data row to `row`
/// with its 1-based line number.
fn read_table<T>(
    path: &Path,
    header: &str,
    mut row: impl FnMut(usize, &str) -> Result<T, ManifestError>,
) -> Result<Vec<T>, ManifestError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == header => {}
        Some((_, first)) => {
            return Err(parse_err(path, 1, format!("expected header {header:?}, found {first:?}")))
        }
        None => return Err(parse_err(path, 1, format!("empty file, expected header {header:?}"))),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        out.push(row(idx + 1, line)?);
    }
    Ok(out)
}

const TRACK_HEADER: &str = "timestamp,lat,lon";

/// Writes a GPS track in timestamp order as latitude/longitude rows.
pub fn write_track(path: &Path, fixes: &[GeoFix]) -> Result<(), ManifestError> {
    let mut out = String::from(TRACK_HEADER);
    out.push('\n');
    for f in fixes {
        writeln!(out, "{},{},{}", f.timestamp, f.lat_deg, f.lon_deg).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_track(path: &Path) -> Result<Vec<GeoFix>, ManifestError> {
    read_table(path, TRACK_HEADER, |line, text| {
        let f = fields(path, line, text, 3)?;
        Ok(GeoFix {
            timestamp: parse_f64(path, line, f[0], "timestamp")?,
            lat_deg: parse_f64(path, line, f[1], "latitude")?,
            lon_deg: parse_f64(path, line, f[2], "longitude")?,
        })
    })
}

const RUNS_HEADER: &str = "run_id,weather";

/// Writes the run-to-weather table in the order given.
pub fn write_runs(path: &Path, runs: &[(RunId, WeatherCategory)]) -> Result<(), ManifestError> {
    let mut out = String::from(RUNS_HEADER);
    out.push('\n');
    for (id, weather) in runs {
        writeln!(out, "{},{}", id, weather.label()).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_runs(path: &Path) -> Result<Vec<(RunId, WeatherCategory)>, ManifestError> {
    read_table(path, RUNS_HEADER, |line, text| {
        let f = fields(path, line, text, 2)?;
        let weather = WeatherCategory::from_label(f[1].trim())
            .ok_or_else(|| parse_err(path, line, format!("unknown weather label {:?}", f[1])))?;
        Ok((RunId::new(f[0].trim()), weather))
    })
}

fn write_pose(out: &mut String, pose: &MetricPose) {
    write!(out, "{},{},{},{}", pose.easting, pose.northing, pose.heading, pose.zone).unwrap();
}

fn parse_pose(path: &Path, line: usize, f: &[&str]) -> Result<MetricPose, ManifestError> {
    Ok(MetricPose {
        easting: parse_f64(path, line, f[0], "easting")?,
        northing: parse_f64(path, line, f[1], "northing")?,
        heading: parse_f64(path, line, f[2], "heading")?,
        zone: parse_zone(path, line, f[3])?,
    })
}

const SAMPLE_POSES_HEADER: &str = "run_id,sample_id,timestamp,easting,northing,heading,zone";

/// Writes interpolated sample poses for one or more runs.
pub fn write_sample_poses(
    path: &Path,
    rows: &[(RunId, SampleFix)],
) -> Result<(), ManifestError> {
    let mut out = String::from(SAMPLE_POSES_HEADER);
    out.push('\n');
    for (run, fix) in rows {
        write!(out, "{},{},{},", run, fix.sample_id, fix.timestamp).unwrap();
        write_pose(&mut out, &fix.pose);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sample_poses(path: &Path) -> Result<Vec<(RunId, SampleFix)>, ManifestError> {
    read_table(path, SAMPLE_POSES_HEADER, |line, text| {
        let f = fields(path, line, text, 7)?;
        Ok((
            RunId::new(f[0].trim()),
            SampleFix {
                sample_id: SampleId(parse_u64(path, line, f[1], "sample id")?),
                timestamp: parse_f64(path, line, f[2], "timestamp")?,
                pose: parse_pose(path, line, &f[3..])?,
            },
        ))
    })
}

const PLACES_HEADER: &str = "place_id,easting,northing,heading,zone,source_timestamp";

/// Writes the place table sorted by place id.
pub fn write_places(path: &Path, places: &[Place]) -> Result<(), ManifestError> {
    let mut sorted: Vec<&Place> = places.iter().collect();
    sorted.sort_by_key(|p| p.id);
    let mut out = String::from(PLACES_HEADER);
    out.push('\n');
    for p in sorted {
        write!(out, "{},", p.id).unwrap();
        write_pose(&mut out, &p.pose);
        writeln!(out, ",{}", p.source_timestamp).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_places(path: &Path) -> Result<Vec<Place>, ManifestError> {
    read_table(path, PLACES_HEADER, |line, text| {
        let f = fields(path, line, text, 6)?;
        Ok(Place {
            id: PlaceId(parse_u64(path, line, f[0], "place id")? as u32),
            pose: parse_pose(path, line, &f[1..5])?,
            source_timestamp: parse_f64(path, line, f[5], "source timestamp")?,
        })
    })
}

const SPLIT_HEADER: &str = "place_id,subset";

/// Writes the train/test/buffer split, one row per place, sorted by id.
pub fn write_split(path: &Path, split: &PlaceSplit) -> Result<(), ManifestError> {
    let mut rows: Vec<(PlaceId, &str)> = Vec::new();
    for &id in &split.train {
        rows.push((id, "train"));
    }
    for &id in &split.test {
        rows.push((id, "test"));
    }
    for &id in &split.buffer {
        rows.push((id, "buffer"));
    }
    rows.sort_by_key(|(id, _)| *id);
    let mut out = String::from(SPLIT_HEADER);
    out.push('\n');
    for (id, subset) in rows {
        writeln!(out, "{id},{subset}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<PlaceSplit, ManifestError> {
    let mut split = PlaceSplit::default();
    let mut seen: BTreeSet<PlaceId> = BTreeSet::new();
    read_table(path, SPLIT_HEADER, |line, text| {
        let f = fields(path, line, text, 2)?;
        let id = PlaceId(parse_u64(path, line, f[0], "place id")? as u32);
        if !seen.insert(id) {
            return Err(parse_err(path, line, format!("duplicate place id {id}")));
        }
        let set = match f[1].trim() {
            "train" => &mut split.train,
            "test" => &mut split.test,
            "buffer" => &mut split.buffer,
            other => return Err(parse_err(path, line, format!("unknown subset {other:?}"))),
        };
        set.insert(id);
        Ok(())
    })?;
    Ok(split)
}

const ASSIGNMENTS_HEADER: &str = "sample_id,place_id";

/// Writes sample-to-place assignments, one row per sample, sorted by
/// sample id within each place and by place id overall.
pub fn write_assignments(
    path: &Path,
    by_place: &BTreeMap<PlaceId, Vec<SampleId>>,
) -> Result<(), ManifestError> {
    let mut out = String::from(ASSIGNMENTS_HEADER);
    out.push('\n');
    for (place, samples) in by_place {
        for sample in samples {
            writeln!(out, "{sample},{place}").unwrap();
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_assignments(
    path: &Path,
) -> Result<BTreeMap<PlaceId, Vec<SampleId>>, ManifestError> {
    let mut by_place: BTreeMap<PlaceId, Vec<SampleId>> = BTreeMap::new();
    let mut seen: BTreeSet<SampleId> = BTreeSet::new();
    read_table(path, ASSIGNMENTS_HEADER, |line, text| {
        let f = fields(path, line, text, 2)?;
        let sample = SampleId(parse_u64(path, line, f[0], "sample id")?);
        let place = PlaceId(parse_u64(path, line, f[1], "place id")? as u32);
        if !seen.insert(sample) {
            return Err(parse_err(path, line, format!("sample {sample} assigned twice")));
        }
        by_place.entry(place).or_default().push(sample);
        Ok(())
    })?;
    for samples in by_place.values_mut() {
        samples.sort();
    }
    Ok(by_place)
}

const SAMPLE_TIMES_HEADER: &str = "sample_id,timestamp";

/// Writes the sample capture schedule of one run.
pub fn write_sample_times(
    path: &Path,
    rows: &[(SampleId, f64)],
) -> Result<(), ManifestError> {
    let mut out = String::from(SAMPLE_TIMES_HEADER);
    out.push('\n');
    for (id, t) in rows {
        writeln!(out, "{id},{t}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sample_times(path: &Path) -> Result<Vec<(SampleId, f64)>, ManifestError> {
    read_table(path, SAMPLE_TIMES_HEADER, |line, text| {
        let f = fields(path, line, text, 2)?;
        Ok((
            SampleId(parse_u64(path, line, f[0], "sample id")?),
            parse_f64(path, line, f[1], "timestamp")?,
        ))
    })
}

const PAIR_RESULTS_HEADER: &str = "test_run,reference_run,correct,total";

/// Writes per-(test, reference) retrieval tallies in the order given.
pub fn write_pair_results(
    path: &Path,
    rows: &[(RunId, RunId, u64, u64)],
) -> Result<(), ManifestError> {
    let mut out = String::from(PAIR_RESULTS_HEADER);
    out.push('\n');
    for (test, reference, correct, total) in rows {
        writeln!(out, "{test},{reference},{correct},{total}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pair_results(path: &Path) -> Result<Vec<(RunId, RunId, u64, u64)>, ManifestError> {
    read_table(path, PAIR_RESULTS_HEADER, |line, text| {
        let f = fields(path, line, text, 4)?;
        Ok((
            RunId::new(f[0].trim()),
            RunId::new(f[1].trim()),
            parse_u64(path, line, f[2], "correct count")?,
            parse_u64(path, line, f[3], "total count")?,
        ))
    })
}

const DROPPED_HEADER: &str = "run_id,sample_id,reason";

/// Records samples excluded from the pipeline and why. Reasons must not
/// contain commas or newlines; they are short machine-written tags.
pub fn write_dropped(
    path: &Path,
    rows: &[(RunId, SampleId, String)],
) -> Result<(), ManifestError> {
    let mut out = String::from(DROPPED_HEADER);
    out.push('\n');
    for (run, sample, reason) in rows {
        debug_assert!(!reason.contains(',') && !reason.contains('\n'));
        writeln!(out, "{run},{sample},{reason}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dropped(path: &Path) -> Result<Vec<(RunId, SampleId, String)>, ManifestError> {
    read_table(path, DROPPED_HEADER, |line, text| {
        let f = fields(path, line, text, 3)?;
        Ok((
            RunId::new(f[0].trim()),
            SampleId(parse_u64(path, line, f[1], "sample id")?),
            f[2].trim().to_string(),
        ))
    })
}

/// Writes descriptors as `sample_id` followed by one column per
/// dimension. All descriptors must share one length.
pub fn write_descriptors(
    path: &Path,
    descriptors: &BTreeMap<SampleId, DescriptorVector>,
) -> Result<(), ManifestError> {
    let dim = descriptors.values().next().map_or(0, |d| d.len());
    let mut out = String::from("sample_id");
    for i in 0..dim {
        write!(out, ",d{i}").unwrap();
    }
    out.push('\n');
    for (id, desc) in descriptors {
        assert_eq!(desc.len(), dim, "descriptor length mismatch for sample {id}");
        write!(out, "{id}").unwrap();
        for v in desc.as_slice() {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_descriptors(
    path: &Path,
) -> Result<BTreeMap<SampleId, DescriptorVector>, ManifestError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let dim = match lines.next() {
        Some((_, header)) if header == "sample_id" || header.starts_with("sample_id,") => {
            header.split(',').count() - 1
        }
        Some((_, header)) => {
            return Err(parse_err(path, 1, format!("bad descriptor header {header:?}")))
        }
        None => return Err(parse_err(path, 1, "empty file, expected descriptor header")),
    };
    let mut out = BTreeMap::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let f = fields(path, line_no, line, dim + 1)?;
        let id = SampleId(parse_u64(path, line_no, f[0], "sample id")?);
        let mut values = Vec::with_capacity(dim);
        for field in &f[1..] {
            values.push(parse_f64(path, line_no, field, "descriptor")?);
        }
        if out.insert(id, DescriptorVector::from_vec(values)).is_some() {
            return Err(parse_err(path, line_no, format!("duplicate sample id {id}")));
        }
    }
    Ok(out)
}
