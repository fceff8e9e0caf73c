//! Retrieval evaluation.
//!
//! A test run is scored against a reference run by matching each test
//! descriptor to its nearest reference descriptor (plain L2, exhaustive
//! scan) and judging the matched pose against the test sample's own ground
//! truth: within 10 m and, unless disabled, facing the same way. Results
//! aggregate into 6x6 weather-pair matrices in the fixed category order
//! S, C, S/C, AR, SS, VC, with weighted marginal means.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::l2;
use crate::descriptor::DescriptorVector;
use crate::geo::{MetricPose, UtmZone, DEFAULT_HEADING_GATE};
use crate::{RunId, SampleId};

pub const DEFAULT_JUDGE_RADIUS_M: f64 = 10.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference index is empty")]
    EmptyIndex,
    #[error("descriptor length {query} does not match index length {index}")]
    LengthMismatch { query: usize, index: usize },
    #[error("poses live in different UTM zones ({a} vs {b})")]
    ZoneMismatch { a: UtmZone, b: UtmZone },
    #[error("run {run} has no descriptor for sample {id}")]
    MissingDescriptor { run: RunId, id: SampleId },
    #[error("run {run} lists sample {id} twice")]
    DuplicateSample { run: RunId, id: SampleId },
    #[error("run {run} has no samples")]
    EmptyRun { run: RunId },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The six weather labels of the accuracy tables, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WeatherCategory {
    Sunny,
    Cloudy,
    SunnyCloudy,
    AfterRain,
    Sunset,
    VeryCloudy,
}

impl WeatherCategory {
    pub const ALL: [WeatherCategory; 6] = [
        WeatherCategory::Sunny,
        WeatherCategory::Cloudy,
        WeatherCategory::SunnyCloudy,
        WeatherCategory::AfterRain,
        WeatherCategory::Sunset,
        WeatherCategory::VeryCloudy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            WeatherCategory::Sunny => "S",
            WeatherCategory::Cloudy => "C",
            WeatherCategory::SunnyCloudy => "S/C",
            WeatherCategory::AfterRain => "AR",
            WeatherCategory::Sunset => "SS",
            WeatherCategory::VeryCloudy => "VC",
        }
    }

    pub fn from_label(s: &str) -> Option<WeatherCategory> {
        Self::ALL.iter().copied().find(|c| c.label() == s)
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("closed set")
    }
}

impl std::fmt::Display for WeatherCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One run of the benchmark: id, weather label, and ground-truth poses per
/// sample.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub run_id: RunId,
    pub weather: WeatherCategory,
    pub samples: Vec<(SampleId, MetricPose)>,
}

impl RunManifest {
    pub fn validate(&self) -> Result<(), EvalError> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in &self.samples {
            if !seen.insert(*id) {
                return Err(EvalError::DuplicateSample {
                    run: self.run_id.clone(),
                    id: *id,
                });
            }
        }
        Ok(())
    }
}

/// Immutable reference database: descriptors plus the poses they were
/// captured at, sorted by sample id so ties resolve to the lowest id by
/// construction.
#[derive(Clone, Debug)]
pub struct ReferenceIndex {
    entries: Vec<(SampleId, DescriptorVector, MetricPose)>,
    dim: usize,
}

impl ReferenceIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn descriptor_len(&self) -> usize {
        self.dim
    }

    pub fn pose_of(&self, id: SampleId) -> Option<&MetricPose> {
        self.entries
            .binary_search_by_key(&id, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].2)
    }
}

/// Build the index for a reference run. Every sample needs a descriptor and
/// all descriptors must agree on length. An empty run builds an empty
/// index; the error surfaces on the first query.
pub fn build_index(
    run: &RunManifest,
    descriptors: &BTreeMap<SampleId, DescriptorVector>,
) -> Result<ReferenceIndex, EvalError> {
    run.validate()?;
    let mut entries = Vec::with_capacity(run.samples.len());
    let mut dim = 0usize;
    for (id, pose) in &run.samples {
        let d = descriptors.get(id).ok_or_else(|| EvalError::MissingDescriptor {
            run: run.run_id.clone(),
            id: *id,
        })?;
        if entries.is_empty() {
            dim = d.len();
        } else if d.len() != dim {
            return Err(EvalError::LengthMismatch { query: d.len(), index: dim });
        }
        entries.push((*id, d.clone(), *pose));
    }
    entries.sort_by_key(|e| e.0);
    Ok(ReferenceIndex { entries, dim })
}

/// Exhaustive nearest-descriptor lookup. Ties break to the lowest sample
/// id; any accelerated replacement must preserve that.
pub fn query_nearest(
    index: &ReferenceIndex,
    q: &DescriptorVector,
) -> Result<(SampleId, f64), EvalError> {
    if index.is_empty() {
        return Err(EvalError::EmptyIndex);
    }
    if q.len() != index.dim {
        return Err(EvalError::LengthMismatch { query: q.len(), index: index.dim });
    }
    let mut best_id = index.entries[0].0;
    let mut best = l2(q.as_slice(), index.entries[0].1.as_slice());
    for (id, d, _) in &index.entries[1..] {
        let dist = l2(q.as_slice(), d.as_slice());
        if dist < best {
            best = dist;
            best_id = *id;
        }
    }
    Ok((best_id, best))
}

/// Judging parameters: the correctness radius and an optional heading gate.
/// `heading_gate: None` restores pure-distance judging.
#[derive(Clone, Copy, Debug)]
pub struct JudgeConfig {
    pub radius_m: f64,
    pub heading_gate: Option<f64>,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            radius_m: DEFAULT_JUDGE_RADIUS_M,
            heading_gate: Some(DEFAULT_HEADING_GATE),
        }
    }
}

/// True when the matched pose is within the radius of the truth pose and,
/// if the gate is active, faces the same way. Keeping the gate makes
/// judging consistent with place identity, where reverse-heading locations
/// are distinct places. Symmetric in its two poses.
pub fn judge(
    match_pose: &MetricPose,
    truth_pose: &MetricPose,
    cfg: &JudgeConfig,
) -> Result<bool, EvalError> {
    if match_pose.zone != truth_pose.zone {
        return Err(EvalError::ZoneMismatch {
            a: match_pose.zone,
            b: truth_pose.zone,
        });
    }
    if match_pose.distance(truth_pose) > cfg.radius_m {
        return Ok(false);
    }
    match cfg.heading_gate {
        Some(gate) => Ok(match_pose.heading_difference(truth_pose) < gate),
        None => Ok(true),
    }
}

/// Correct/total counts for one (test, reference) run pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub correct: u64,
    pub total: u64,
}

impl PairAccuracy {
    pub fn percent(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

/// Score every test sample against the reference index and judge the match
/// against the test sample's own ground truth.
pub fn accuracy_over(
    test: &RunManifest,
    reference: &RunManifest,
    descriptors: &BTreeMap<SampleId, DescriptorVector>,
    cfg: &JudgeConfig,
) -> Result<PairAccuracy, EvalError> {
    for run in [test, reference] {
        if run.samples.is_empty() {
            return Err(EvalError::EmptyRun { run: run.run_id.clone() });
        }
    }
    test.validate()?;
    let index = build_index(reference, descriptors)?;
    let verdicts: Result<Vec<bool>, EvalError> = test
        .samples
        .par_iter()
        .map(|(id, truth)| {
            let q = descriptors.get(id).ok_or_else(|| EvalError::MissingDescriptor {
                run: test.run_id.clone(),
                id: *id,
            })?;
            let (hit, _) = query_nearest(&index, q)?;
            let pose = index.pose_of(hit).expect("hit came from the index");
            judge(pose, truth, cfg)
        })
        .collect();
    let verdicts = verdicts?;
    Ok(PairAccuracy {
        correct: verdicts.iter().filter(|&&v| v).count() as u64,
        total: verdicts.len() as u64,
    })
}

/// One aggregated (test weather, reference weather) observation.
#[derive(Clone, Copy, Debug)]
pub struct WeatherPairResult {
    pub test: WeatherCategory,
    pub reference: WeatherCategory,
    pub result: PairAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Accuracy,
    Counts,
}

/// 6x6 weather grid of aggregated counts. Accuracy and count tables share
/// this structure and differ only in rendering.
#[derive(Clone, Debug)]
pub struct AccuracyMatrix {
    pub kind: MatrixKind,
    cells: [[PairAccuracy; 6]; 6],
}

impl AccuracyMatrix {
    pub fn cell(&self, test: WeatherCategory, reference: WeatherCategory) -> PairAccuracy {
        self.cells[test.index()][reference.index()]
    }

    pub fn accuracy(&self, test: WeatherCategory, reference: WeatherCategory) -> Option<f64> {
        self.cell(test, reference).percent()
    }

    fn fold(&self, cells: impl Iterator<Item = PairAccuracy>) -> PairAccuracy {
        cells.fold(PairAccuracy::default(), |acc, c| PairAccuracy {
            correct: acc.correct + c.correct,
            total: acc.total + c.total,
        })
    }

    /// Row marginal, weighted by cell totals.
    pub fn row_mean(&self, test: WeatherCategory) -> Option<f64> {
        self.fold(self.cells[test.index()].iter().copied()).percent()
    }

    /// Column marginal, weighted by cell totals.
    pub fn col_mean(&self, reference: WeatherCategory) -> Option<f64> {
        self.fold(self.cells.iter().map(|row| row[reference.index()])).percent()
    }

    /// Overall accuracy as total correct over total judged, i.e. weighted
    /// by the (possibly very unbalanced) cell counts.
    pub fn overall_weighted(&self) -> Option<f64> {
        self.fold(self.cells.iter().flatten().copied()).percent()
    }

    /// Plain arithmetic mean of the populated cells' accuracies, reported
    /// alongside the weighted overall since tables leave the convention
    /// ambiguous.
    pub fn overall_cell_mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .flatten()
            .filter_map(|c| c.percent())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Total judged locations across all cells.
    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().map(|c| c.total).sum()
    }
}

/// Aggregate per-pair results into the 6x6 grid. Several pairs may land in
/// the same cell; their counts add.
pub fn weather_matrix(pairs: &[WeatherPairResult], kind: MatrixKind) -> AccuracyMatrix {
    let mut cells = [[PairAccuracy::default(); 6]; 6];
    for p in pairs {
        let cell = &mut cells[p.test.index()][p.reference.index()];
        cell.correct += p.result.correct;
        cell.total += p.result.total;
    }
    AccuracyMatrix { kind, cells }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn fmt_percent(v: Option<f64>) -> String {
    match v {
        Some(p) => format!("{p:.2}"),
        None => "-".to_string(),
    }
}

fn matrix_csv(m: &AccuracyMatrix) -> String {
    let mut out = String::new();
    out.push_str("test\\reference");
    for c in WeatherCategory::ALL {
        out.push(',');
        out.push_str(c.label());
    }
    if m.kind == MatrixKind::Accuracy {
        out.push_str(",Mean");
    }
    out.push('\n');
    if m.total() == 0 {
        return out;
    }
    for t in WeatherCategory::ALL {
        out.push_str(t.label());
        for r in WeatherCategory::ALL {
            out.push(',');
            match m.kind {
                MatrixKind::Accuracy => out.push_str(&fmt_percent(m.accuracy(t, r))),
                MatrixKind::Counts => {
                    let cell = m.cell(t, r);
                    if cell.total == 0 {
                        out.push('-');
                    } else {
                        out.push_str(&cell.total.to_string());
                    }
                }
            }
        }
        if m.kind == MatrixKind::Accuracy {
            out.push(',');
            out.push_str(&fmt_percent(m.row_mean(t)));
        }
        out.push('\n');
    }
    if m.kind == MatrixKind::Accuracy {
        out.push_str("Mean");
        for r in WeatherCategory::ALL {
            out.push(',');
            out.push_str(&fmt_percent(m.col_mean(r)));
        }
        out.push(',');
        out.push_str(&fmt_percent(m.overall_weighted()));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct JsonCell {
    correct: u64,
    total: u64,
    percent: Option<f64>,
}

#[derive(Serialize)]
struct JsonMatrix<'a> {
    kind: MatrixKind,
    categories: [&'a str; 6],
    cells: Vec<Vec<JsonCell>>,
    row_means: Vec<Option<f64>>,
    col_means: Vec<Option<f64>>,
    overall_weighted: Option<f64>,
    overall_cell_mean: Option<f64>,
    total: u64,
}

fn matrix_json(m: &AccuracyMatrix) -> String {
    let cats = WeatherCategory::ALL;
    let body = JsonMatrix {
        kind: m.kind,
        categories: cats.map(|c| c.label()),
        cells: cats
            .iter()
            .map(|&t| {
                cats.iter()
                    .map(|&r| {
                        let c = m.cell(t, r);
                        JsonCell { correct: c.correct, total: c.total, percent: c.percent() }
                    })
                    .collect()
            })
            .collect(),
        row_means: cats.iter().map(|&t| m.row_mean(t)).collect(),
        col_means: cats.iter().map(|&r| m.col_mean(r)).collect(),
        overall_weighted: m.overall_weighted(),
        overall_cell_mean: m.overall_cell_mean(),
        total: m.total(),
    };
    let mut s = serde_json::to_string_pretty(&body).expect("matrix serializes");
    s.push('\n');
    s
}

/// Serialize one matrix. CSV follows the fixed table layout: category rows
/// and columns in S, C, S/C, AR, SS, VC order, a Mean row and column for
/// accuracy tables, percentages to two decimals, unpopulated cells as "-".
/// The same matrix always produces identical bytes.
pub fn emit_report(
    matrix: &AccuracyMatrix,
    path: &Path,
    format: ReportFormat,
) -> Result<(), EvalError> {
    let text = match format {
        ReportFormat::Csv => matrix_csv(matrix),
        ReportFormat::Json => matrix_json(matrix),
    };
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}
