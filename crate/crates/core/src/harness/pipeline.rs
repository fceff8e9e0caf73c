//! Pipeline orchestration: one flat config file drives synth, ingest,
//! mine, train, extract, eval and report, each reading the previous
//! stage's artifacts from a single run directory.
//!
//! the layout under the run directory:
//!
//! ```text
//! config.txt                   effective config, echoed at launch
//! world/runs.csv               run id to weather category
//! world/places_true.csv        generator ground truth
//! world/<run>/track.csv        noisy GPS fixes
//! world/<run>/samples.csv      sample capture schedule
//! world/<run>/rgb/<id>.png     camera payloads
//! world/<run>/scan/<id>.txt    lidar payloads
//! ingest/sample_poses.csv      interpolated sample poses
//! ingest/dropped.csv           samples refused by interpolation
//! mine/places.csv              discretized places
//! mine/assignments.csv         sample to place memberships
//! mine/unassigned.csv          samples matching no place
//! mine/split.csv               train/test/buffer partition
//! mine/triplets_random.db      random-negative triplets
//! mine/triplets_hard.db        hard-negative triplets
//! train/weights_<m>.bin        final checkpoint per modality
//! train/weights_<m>_random.bin checkpoint before hard fine-tune
//! train/log_<m>.csv            per-epoch losses
//! extract/descriptors_<m>.csv  one descriptor per sample
//! eval/pairs_<m>.csv           per run-pair retrieval tallies
//! report/accuracy_<m>.csv      weather accuracy matrix
//! report/accuracy_<m>.json     same matrix with marginals
//! report/counts_<m>.csv        weather count matrix
//! ```
//!
//! Every stage seed is derived from the single master seed, so a rerun
//! with the same config file reproduces all artifacts byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::descriptor::{
    fine_tune_hard, forward, load_weights_expecting, save_weights, train, write_training_log,
    DescriptorError, LossConfig, NetworkConfig, TowerWeights, TrainConfig,
};
use crate::eval::{
    accuracy_over, emit_report, weather_matrix, EvalError, JudgeConfig, MatrixKind, ReportFormat,
    RunManifest, WeatherCategory, WeatherPairResult,
};
use crate::geo::{
    assign_samples, convert_track, discretize_places, heading_from_track, interpolate_pose,
    split_places, GeoError, MetricPose, SampleFix, DEFAULT_HEADING_GATE,
};
use crate::harness::world::{generate_world, render_run, WeatherEffect, WeatherKind, WorldError, WorldSpec};
use crate::ids::{RunId, SampleId};
use crate::imaging::{
    compose_fused, intensity_to_netinput, load_rgb, project_intensity, read_scan, resize_rgb,
    save_rgb, write_scan, AzimuthFov, ImagingError,
};
use crate::manifest::{self, ManifestError};
use crate::mining::{
    build_triplet_db, load_triplet_db, mine_positive_pairs, save_triplet_db, splitmix64,
    MiningConfig, MiningError, Regime,
};
use rayon::prelude::*;

/// Sample id stride between runs: run `i` owns ids `[i*10_000, (i+1)*10_000)`.
pub const ID_STRIDE: u64 = 10_000;

const WORLD_SALT: u64 = 0x7772_6c64_7365_6564;
const JITTER_SALT: u64 = 0x6a69_7474_6572_726e;
const WEATHER_SALT: u64 = 0x7774_6872_7365_6564;
const MINE_SALT: u64 = 0x6d69_6e65_7365_6564;
const SPLIT_SALT: u64 = 0x7370_6c69_7473_6564;
const TRAIN_SALT: u64 = 0x7472_6169_6e73_6564;

fn derive_seed(master: u64, salt: u64) -> u64 {
    splitmix64(master ^ salt)
}

/// Which sensor stream feeds the descriptor network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Camera,
    Lidar,
    Fused,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Camera, Modality::Lidar, Modality::Fused];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Camera => "camera",
            Modality::Lidar => "lidar",
            Modality::Fused => "fused",
        }
    }

    pub fn from_str(s: &str) -> Result<Self, PipelineError> {
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown modality {s:?}")))
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Mine,
    Train,
    Extract,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Mine,
        Stage::Train,
        Stage::Extract,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Mine => "mine",
            Stage::Train => "train",
            Stage::Extract => "extract",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn from_str(s: &str) -> Result<Self, PipelineError> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses a comma-separated stage list, normalized to execution order.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>, PipelineError> {
    let mut stages = Vec::new();
    for token in s.split(',') {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        stages.push(Stage::from_str(token)?);
    }
    if stages.is_empty() {
        return Err(PipelineError::Config("empty stage list".into()));
    }
    stages.sort();
    stages.dedup();
    Ok(stages)
}

/// Failure inside one stage. Transparent wrappers keep the original
/// module's message; `Data` covers cross-stage contract breaks such as
/// missing input artifacts.
#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("config echo: {0}")]
    Echo(#[source] std::io::Error),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    /// Process exit code: 2 config, 4 training divergence, 3 any other
    /// data or stage failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Echo(_) => 3,
            PipelineError::Stage { source, .. } => match source {
                StageError::Descriptor(DescriptorError::Diverged { .. }) => 4,
                _ => 3,
            },
        }
    }
}

/// Everything a pipeline run needs, parsed from one flat key/value file.
/// All stage seeds derive from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub modality: Modality,
    pub out: PathBuf,
    /// Weather condition and severity of each run, in traversal order.
    pub runs: Vec<(WeatherKind, f64)>,
    pub n_places: usize,
    pub loop_length: f64,
    pub appearance_dim: usize,
    /// Place discretization interval, meters.
    pub d_p: f64,
    /// Positive assignment window, meters.
    pub d_w: f64,
    /// Random negatives must be farther than this, meters.
    pub t_n: f64,
    /// Hard negatives live in (d_w, hard_radius], meters.
    pub hard_radius: f64,
    pub train_fraction: f64,
    pub buffer_radius: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub hard_epochs: usize,
    pub val_fraction: f64,
    pub plateau_window: usize,
    pub plateau_epsilon: f64,
    pub triplets_per_epoch: Option<usize>,
    pub radius_m: f64,
    pub heading_gate: Option<f64>,
    pub lidar_cols: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            modality: Modality::Camera,
            out: PathBuf::from("out"),
            runs: vec![
                (WeatherKind::Clean, 0.0),
                (WeatherKind::SunGlare, 0.8),
                (WeatherKind::AfterRain, 0.6),
                (WeatherKind::Clean, 0.0),
            ],
            n_places: 60,
            loop_length: 720.0,
            appearance_dim: 4,
            d_p: 10.0,
            d_w: 10.0,
            t_n: 50.0,
            hard_radius: 25.0,
            train_fraction: 0.7,
            buffer_radius: 12.0,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            max_epochs: 32,
            hard_epochs: 6,
            val_fraction: 0.15,
            plateau_window: 4,
            plateau_epsilon: 0.0003,
            triplets_per_epoch: Some(288),
            radius_m: 10.0,
            heading_gate: Some(DEFAULT_HEADING_GATE),
            lidar_cols: 360,
        }
    }
}

impl PipelineConfig {
    /// Loads a config file and validates it. Missing keys keep their
    /// defaults; unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Parses flat `key = value` lines. Blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = PipelineConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected key = value", idx + 1))
            })?;
            cfg.set(key.trim(), value.trim(), idx + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), PipelineError> {
        fn bad(line: usize, key: &str, value: &str) -> PipelineError {
            PipelineError::Config(format!("line {line}: bad value {value:?} for {key}"))
        }
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad(line, key, value))?
            };
        }
        match key {
            "seed" => self.seed = num!(u64),
            "modality" => self.modality = Modality::from_str(value)?,
            "out" => self.out = PathBuf::from(value),
            "runs" => self.runs = parse_runs(value, line)?,
            "world.n_places" => self.n_places = num!(usize),
            "world.loop_length" => self.loop_length = num!(f64),
            "world.appearance_dim" => self.appearance_dim = num!(usize),
            "mine.d_p" => self.d_p = num!(f64),
            "mine.d_w" => self.d_w = num!(f64),
            "mine.t_n" => self.t_n = num!(f64),
            "mine.hard_radius" => self.hard_radius = num!(f64),
            "split.train_fraction" => self.train_fraction = num!(f64),
            "split.buffer_radius" => self.buffer_radius = num!(f64),
            "train.learning_rate" => self.learning_rate = num!(f64),
            "train.momentum" => self.momentum = num!(f64),
            "train.batch_size" => self.batch_size = num!(usize),
            "train.max_epochs" => self.max_epochs = num!(usize),
            "train.hard_epochs" => self.hard_epochs = num!(usize),
            "train.val_fraction" => self.val_fraction = num!(f64),
            "train.plateau_window" => self.plateau_window = num!(usize),
            "train.plateau_epsilon" => self.plateau_epsilon = num!(f64),
            "train.triplets_per_epoch" => {
                self.triplets_per_epoch = if value == "none" {
                    None
                } else {
                    Some(num!(usize))
                }
            }
            "eval.radius_m" => self.radius_m = num!(f64),
            "eval.heading_gate" => {
                self.heading_gate = if value == "none" { None } else { Some(num!(f64)) }
            }
            "lidar.cols" => self.lidar_cols = num!(usize),
            _ => return Err(PipelineError::Config(format!("line {line}: unknown key {key:?}"))),
        }
        Ok(())
    }

    /// CLI flags win over file keys.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        modality: Option<Modality>,
        out: Option<PathBuf>,
    ) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(m) = modality {
            self.modality = m;
        }
        if let Some(o) = out {
            self.out = o;
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfgerr = |msg: String| Err(PipelineError::Config(msg));
        self.world_spec(0)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.n_places as u64 + 1 > ID_STRIDE {
            return cfgerr(format!("world.n_places must stay below {}", ID_STRIDE - 1));
        }
        if self.runs.len() < 2 {
            return cfgerr("need at least 2 runs to evaluate run pairs".into());
        }
        if self.runs.len() as u64 > 100 {
            return cfgerr("at most 100 runs supported".into());
        }
        for (kind, severity) in &self.runs {
            WeatherEffect { kind: *kind, severity: *severity, seed: 0 }
                .validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.mining_config(0)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.d_p.is_finite() && self.d_p > 0.0) {
            return cfgerr(format!("mine.d_p must be positive, got {}", self.d_p));
        }
        self.train_config(0)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return cfgerr(format!(
                "split.train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if !(self.buffer_radius.is_finite() && self.buffer_radius >= 0.0) {
            return cfgerr(format!(
                "split.buffer_radius must be nonnegative, got {}",
                self.buffer_radius
            ));
        }
        if !(self.radius_m.is_finite() && self.radius_m > 0.0) {
            return cfgerr(format!("eval.radius_m must be positive, got {}", self.radius_m));
        }
        if let Some(gate) = self.heading_gate {
            if !(gate.is_finite() && gate > 0.0) {
                return cfgerr(format!("eval.heading_gate must be positive, got {gate}"));
            }
        }
        if self.lidar_cols == 0 {
            return cfgerr("lidar.cols must be positive".into());
        }
        Ok(())
    }

    /// Canonical echo of every key. Parsing the echo reproduces the
    /// config exactly.
    pub fn echo(&self) -> String {
        let opt_usize = |v: Option<usize>| v.map_or("none".into(), |x| x.to_string());
        let opt_f64 = |v: Option<f64>| v.map_or("none".into(), |x| x.to_string());
        let runs = self
            .runs
            .iter()
            .map(|(k, s)| format!("{k}:{s}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "seed = {}\nmodality = {}\nout = {}\nruns = {}\n\
             world.n_places = {}\nworld.loop_length = {}\nworld.appearance_dim = {}\n\
             mine.d_p = {}\nmine.d_w = {}\nmine.t_n = {}\nmine.hard_radius = {}\n\
             split.train_fraction = {}\nsplit.buffer_radius = {}\n\
             train.learning_rate = {}\ntrain.momentum = {}\ntrain.batch_size = {}\n\
             train.max_epochs = {}\ntrain.hard_epochs = {}\ntrain.val_fraction = {}\n\
             train.plateau_window = {}\ntrain.plateau_epsilon = {}\ntrain.triplets_per_epoch = {}\n\
             eval.radius_m = {}\neval.heading_gate = {}\nlidar.cols = {}\n",
            self.seed,
            self.modality,
            self.out.display(),
            runs,
            self.n_places,
            self.loop_length,
            self.appearance_dim,
            self.d_p,
            self.d_w,
            self.t_n,
            self.hard_radius,
            self.train_fraction,
            self.buffer_radius,
            self.learning_rate,
            self.momentum,
            self.batch_size,
            self.max_epochs,
            self.hard_epochs,
            self.val_fraction,
            self.plateau_window,
            self.plateau_epsilon,
            opt_usize(self.triplets_per_epoch),
            self.radius_m,
            opt_f64(self.heading_gate),
            self.lidar_cols,
        )
    }

    pub fn world_spec(&self, seed: u64) -> WorldSpec {
        WorldSpec {
            n_places: self.n_places,
            loop_length: self.loop_length,
            seed,
            appearance_dim: self.appearance_dim,
        }
    }

    pub fn mining_config(&self, seed: u64) -> MiningConfig {
        MiningConfig {
            d_w: self.d_w,
            t_n: self.t_n,
            hard_radius: self.hard_radius,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            hard_epochs: self.hard_epochs,
            val_fraction: self.val_fraction,
            plateau_window: self.plateau_window,
            plateau_epsilon: self.plateau_epsilon,
            triplets_per_epoch: self.triplets_per_epoch,
            seed,
        }
    }

    pub fn judge_config(&self) -> JudgeConfig {
        JudgeConfig {
            radius_m: self.radius_m,
            heading_gate: self.heading_gate,
        }
    }
}

fn parse_runs(value: &str, line: usize) -> Result<Vec<(WeatherKind, f64)>, PipelineError> {
    let mut runs = Vec::new();
    for token in value.split(',') {
        let token = token.trim();
        let (kind, severity) = token.split_once(':').ok_or_else(|| {
            PipelineError::Config(format!("line {line}: run {token:?} is not kind:severity"))
        })?;
        let kind = WeatherKind::from_str(kind.trim())
            .map_err(|e| PipelineError::Config(format!("line {line}: {e}")))?;
        let severity: f64 = severity.trim().parse().map_err(|_| {
            PipelineError::Config(format!("line {line}: bad severity in {token:?}"))
        })?;
        runs.push((kind, severity));
    }
    Ok(runs)
}

/// Paths of every artifact under the run directory.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &PipelineConfig) -> Self {
        Layout { root: cfg.out.clone() }
    }

    fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    fn world_dir(&self) -> PathBuf {
        self.root.join("world")
    }
    fn runs(&self) -> PathBuf {
        self.world_dir().join("runs.csv")
    }
    fn places_true(&self) -> PathBuf {
        self.world_dir().join("places_true.csv")
    }
    fn run_dir(&self, run: &RunId) -> PathBuf {
        self.world_dir().join(run.as_str())
    }
    fn track(&self, run: &RunId) -> PathBuf {
        self.run_dir(run).join("track.csv")
    }
    fn sample_times(&self, run: &RunId) -> PathBuf {
        self.run_dir(run).join("samples.csv")
    }
    fn rgb(&self, run: &RunId, id: SampleId) -> PathBuf {
        self.run_dir(run).join("rgb").join(format!("{id}.png"))
    }
    fn scan(&self, run: &RunId, id: SampleId) -> PathBuf {
        self.run_dir(run).join("scan").join(format!("{id}.txt"))
    }
    fn ingest_dir(&self) -> PathBuf {
        self.root.join("ingest")
    }
    fn sample_poses(&self) -> PathBuf {
        self.ingest_dir().join("sample_poses.csv")
    }
    fn dropped(&self) -> PathBuf {
        self.ingest_dir().join("dropped.csv")
    }
    fn mine_dir(&self) -> PathBuf {
        self.root.join("mine")
    }
    fn places(&self) -> PathBuf {
        self.mine_dir().join("places.csv")
    }
    fn assignments(&self) -> PathBuf {
        self.mine_dir().join("assignments.csv")
    }
    fn unassigned(&self) -> PathBuf {
        self.mine_dir().join("unassigned.csv")
    }
    fn split(&self) -> PathBuf {
        self.mine_dir().join("split.csv")
    }
    fn triplets(&self, regime: Regime) -> PathBuf {
        self.mine_dir().join(format!("triplets_{regime}.db"))
    }
    fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }
    fn weights(&self, m: Modality) -> PathBuf {
        self.train_dir().join(format!("weights_{m}.bin"))
    }
    fn weights_random(&self, m: Modality) -> PathBuf {
        self.train_dir().join(format!("weights_{m}_random.bin"))
    }
    fn train_log(&self, m: Modality) -> PathBuf {
        self.train_dir().join(format!("log_{m}.csv"))
    }
    fn train_notes(&self, m: Modality) -> PathBuf {
        self.train_dir().join(format!("notes_{m}.txt"))
    }
    fn extract_dir(&self) -> PathBuf {
        self.root.join("extract")
    }
    fn descriptors(&self, m: Modality) -> PathBuf {
        self.extract_dir().join(format!("descriptors_{m}.csv"))
    }
    fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    fn pairs(&self, m: Modality) -> PathBuf {
        self.eval_dir().join(format!("pairs_{m}.csv"))
    }
    fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    fn accuracy_csv(&self, m: Modality) -> PathBuf {
        self.report_dir().join(format!("accuracy_{m}.csv"))
    }
    fn accuracy_json(&self, m: Modality) -> PathBuf {
        self.report_dir().join(format!("accuracy_{m}.json"))
    }
    fn counts_csv(&self, m: Modality) -> PathBuf {
        self.report_dir().join(format!("counts_{m}.csv"))
    }
}

fn require(path: &Path, produced_by: Stage) -> Result<(), StageError> {
    if path.exists() {
        Ok(())
    } else {
        Err(StageError::Data(format!(
            "{} not found, run the {produced_by} stage first",
            path.display()
        )))
    }
}

/// Runs one stage against the artifacts in the config's run directory.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<(), PipelineError> {
    let result = match stage {
        Stage::Synth => stage_synth(cfg),
        Stage::Ingest => stage_ingest(cfg),
        Stage::Mine => stage_mine(cfg),
        Stage::Train => stage_train(cfg),
        Stage::Extract => stage_extract(cfg),
        Stage::Eval => stage_eval(cfg),
        Stage::Report => stage_report(cfg),
    };
    result.map_err(|source| PipelineError::Stage { stage, source })
}

/// Echoes the config and runs the requested stages in execution order
/// (all of them when `stages` is empty).
pub fn run_pipeline(cfg: &PipelineConfig, stages: &[Stage]) -> Result<(), PipelineError> {
    cfg.validate()?;
    let list: Vec<Stage> = if stages.is_empty() {
        Stage::ALL.to_vec()
    } else {
        let mut l = stages.to_vec();
        l.sort();
        l.dedup();
        l
    };
    let layout = Layout::new(cfg);
    fs::create_dir_all(&layout.root).map_err(PipelineError::Echo)?;
    fs::write(layout.config(), cfg.echo()).map_err(PipelineError::Echo)?;
    for stage in list {
        run_stage(cfg, stage)?;
    }
    Ok(())
}

fn run_id_for(index: usize, kind: WeatherKind) -> RunId {
    RunId::new(format!("run{index:02}_{kind}"))
}

fn stage_synth(cfg: &PipelineConfig) -> Result<(), StageError> {
    let layout = Layout::new(cfg);
    let world = generate_world(&cfg.world_spec(derive_seed(cfg.seed, WORLD_SALT)))?;
    fs::create_dir_all(layout.world_dir())?;
    manifest::write_places(&layout.places_true(), &world.places())?;

    let jitter_base = derive_seed(cfg.seed, JITTER_SALT);
    let weather_base = derive_seed(cfg.seed, WEATHER_SALT);
    let mut run_rows = Vec::new();
    for (i, &(kind, severity)) in cfg.runs.iter().enumerate() {
        let run_id = run_id_for(i, kind);
        let weather = WeatherEffect {
            kind,
            severity,
            seed: splitmix64(weather_base ^ i as u64),
        };
        let run = render_run(
            &world,
            run_id.clone(),
            i as u64 * ID_STRIDE,
            &weather,
            splitmix64(jitter_base ^ i as u64),
        );
        fs::create_dir_all(layout.run_dir(&run_id).join("rgb"))?;
        fs::create_dir_all(layout.run_dir(&run_id).join("scan"))?;
        manifest::write_track(&layout.track(&run_id), &run.track)?;
        let times: Vec<(SampleId, f64)> =
            run.samples.iter().map(|s| (s.id, s.timestamp)).collect();
        manifest::write_sample_times(&layout.sample_times(&run_id), &times)?;
        for sample in &run.samples {
            save_rgb(&layout.rgb(&run_id, sample.id), &sample.rgb)?;
            write_scan(&layout.scan(&run_id, sample.id), &sample.scan)?;
        }
        run_rows.push((run_id, kind.category()));
    }
    manifest::write_runs(&layout.runs(), &run_rows)?;
    Ok(())
}

fn stage_ingest(cfg: &PipelineConfig) -> Result<(), StageError> {
    let layout = Layout::new(cfg);
    require(&layout.runs(), Stage::Synth)?;
    let runs = manifest::read_runs(&layout.runs())?;
    let mut rows: Vec<(RunId, SampleFix)> = Vec::new();
    let mut dropped: Vec<(RunId, SampleId, String)> = Vec::new();
    for (run_id, _) in &runs {
        let track = manifest::read_track(&layout.track(run_id))?;
        let trajectory = heading_from_track(convert_track(run_id.clone(), &track)?)?;
        for (sample_id, timestamp) in manifest::read_sample_times(&layout.sample_times(run_id))? {
            match interpolate_pose(&trajectory, timestamp) {
                Ok(pose) => rows.push((
                    run_id.clone(),
                    SampleFix { sample_id, timestamp, pose },
                )),
                Err(GeoError::ExtrapolationRefused { .. }) => {
                    dropped.push((run_id.clone(), sample_id, "outside_trajectory".into()));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    fs::create_dir_all(layout.ingest_dir())?;
    manifest::write_sample_poses(&layout.sample_poses(), &rows)?;
    manifest::write_dropped(&layout.dropped(), &dropped)?;
    Ok(())
}

fn stage_mine(cfg: &PipelineConfig) -> Result<(), StageError> {
    let layout = Layout::new(cfg);
    require(&layout.sample_poses(), Stage::Ingest)?;
    require(&layout.runs(), Stage::Synth)?;
    let runs = manifest::read_runs(&layout.runs())?;
    let rows = manifest::read_sample_poses(&layout.sample_poses())?;

    // Places come from the first run's trajectory; later runs revisit
    // the same route, so one pass defines the place set.
    let first = &runs
        .first()
        .ok_or_else(|| StageError::Data("runs.csv lists no runs".into()))?
        .0;
    let track = manifest::read_track(&layout.track(first))?;
    let trajectory = heading_from_track(convert_track(first.clone(), &track)?)?;
    let places = discretize_places(&trajectory, cfg.d_p, DEFAULT_HEADING_GATE);
    if places.is_empty() {
        return Err(StageError::Data("no places discretized from the first run".into()));
    }

    let fixes: Vec<SampleFix> = rows.iter().map(|(_, f)| f.clone()).collect();
    let assignment = assign_samples(&places, &fixes, cfg.d_w, DEFAULT_HEADING_GATE);
    let id_runs: BTreeMap<SampleId, RunId> =
        rows.iter().map(|(r, f)| (f.sample_id, r.clone())).collect();
    let unassigned: Vec<(RunId, SampleId, String)> = assignment
        .unassigned
        .iter()
        .map(|&id| {
            let run = id_runs.get(&id).cloned().unwrap_or_else(|| RunId::new("unknown"));
            (run, id, "no_place_within_radius".to_string())
        })
        .collect();

    let split = split_places(
        &places,
        cfg.train_fraction,
        cfg.buffer_radius,
        derive_seed(cfg.seed, SPLIT_SALT),
    )?;

    fs::create_dir_all(layout.mine_dir())?;
    manifest::write_places(&layout.places(), &places)?;
    manifest::write_assignments(&layout.assignments(), &assignment.by_place)?;
    manifest::write_dropped(&layout.unassigned(), &unassigned)?;
    manifest::write_split(&layout.split(), &split)?;

    let poses: BTreeMap<SampleId, MetricPose> =
        rows.iter().map(|(_, f)| (f.sample_id, f.pose)).collect();
    let pairs = mine_positive_pairs(&assignment.by_place, &id_runs);
    let mining = cfg.mining_config(derive_seed(cfg.seed, MINE_SALT));
    for regime in [Regime::Random, Regime::Hard] {
        let db = build_triplet_db(&pairs, &poses, &id_runs, &mining, regime)?;
        save_triplet_db(&layout.triplets(regime), &db)?;
    }
    Ok(())
}

/// Loads the network input of every listed sample for one modality.
fn load_net_inputs(
    layout: &Layout,
    modality: Modality,
    lidar_cols: usize,
    id_runs: &BTreeMap<SampleId, RunId>,
    ids: &BTreeSet<SampleId>,
) -> Result<BTreeMap<SampleId, Array3<f32>>, StageError> {
    let loaded: Result<Vec<_>, StageError> = ids
        .par_iter()
        .map(|&id| {
            let run = id_runs.get(&id).ok_or_else(|| {
                StageError::Data(format!("sample {id} has no ingested pose"))
            })?;
            let input = match modality {
                Modality::Camera => resize_rgb(&load_rgb(&layout.rgb(run, id))?)?,
                Modality::Lidar => {
                    let scan = read_scan(&layout.scan(run, id))?;
                    intensity_to_netinput(&project_intensity(
                        &scan,
                        lidar_cols,
                        AzimuthFov::full(),
                    )?)?
                }
                Modality::Fused => {
                    let scan = read_scan(&layout.scan(run, id))?;
                    let intensity = project_intensity(&scan, lidar_cols, AzimuthFov::full())?;
                    compose_fused(&intensity, &load_rgb(&layout.rgb(run, id))?)?
                }
            };
            Ok((id, input.data().clone()))
        })
        .collect();
    Ok(loaded?.into_iter().collect())
}

fn stage_train(cfg: &PipelineConfig) -> Result<(), StageError> {
    let layout = Layout::new(cfg);
    require(&layout.triplets(Regime::Random), Stage::Mine)?;
    require(&layout.triplets(Regime::Hard), Stage::Mine)?;
    require(&layout.sample_poses(), Stage::Ingest)?;
    let random_db = load_triplet_db(&layout.triplets(Regime::Random))?;
    let hard_db = load_triplet_db(&layout.triplets(Regime::Hard))?;
    let rows = manifest::read_sample_poses(&layout.sample_poses())?;
    let id_runs: BTreeMap<SampleId, RunId> =
        rows.iter().map(|(r, f)| (f.sample_id, r.clone())).collect();

    let mut ids = BTreeSet::new();
    for db in [&random_db, &hard_db] {
        for r in &db.records {
            ids.extend([r.anchor, r.positive, r.negative]);
        }
    }
    let cache = load_net_inputs(&layout, cfg.modality, cfg.lidar_cols, &id_runs, &ids)?;
    let resolve = |id: SampleId| -> Result<Array3<f64>, DescriptorError> {
        cache
            .get(&id)
            .map(|a| a.mapv(f64::from))
            .ok_or(DescriptorError::MissingInput { id })
    };

    let seed = derive_seed(cfg.seed, TRAIN_SALT);
    let train_cfg = cfg.train_config(seed);
    let loss = LossConfig::default();
    let init = TowerWeights::init(NetworkConfig::compact(), seed)?;
    let outcome = train(init, &random_db, &resolve, &loss, &train_cfg)?;

    fs::create_dir_all(layout.train_dir())?;
    save_weights(&layout.weights_random(cfg.modality), &outcome.weights)?;

    // The hard phase only makes sense once the random phase has leveled
    // off; otherwise the final checkpoint is the random-phase one.
    let outcome = if outcome.state.plateau_reached {
        fine_tune_hard(outcome.weights, outcome.state, &hard_db, &resolve, &loss, &train_cfg)?
    } else {
        outcome
    };
    save_weights(&layout.weights(cfg.modality), &outcome.weights)?;
    write_training_log(&layout.train_log(cfg.modality), &outcome.state.history)?;
    if let Some(warning) = &outcome.warning {
        fs::write(layout.train_notes(cfg.modality), format!("{warning}\n"))?;
    }
    Ok(())
}

fn stage_extract(cfg: &PipelineConfig) -> Result<(), StageError> {
    let layout = Layout::new(cfg);
    require(&layout.weights(cfg.modality), Stage::Train)?;
    require(&layout.sample_poses(), Stage::Ingest)?;
    let weights = load_weights_expecting(&layout.weights(cfg.modality), &NetworkConfig::compact())?;
    let rows = manifest::read_sample_poses(&layout.sample_poses())?;
    let id_runs: BTreeMap<SampleId, RunId> =
        rows.iter().map(|(r, f)| (f.sample_id, r.clone())).collect();
    let ids: BTreeSet<SampleId> = id_runs.keys().copied().collect();
    let cache = load_net_inputs(&layout, cfg.modality, cfg.lidar_cols, &id_runs, &ids)?;

    let descriptors: Result<Vec<_>, StageError> = cache
        .par_iter()
        .map(|(&id, input)| {
            let d = forward(&weights, &input.mapv(f64::from))?;
            Ok((id, d))
        })
        .collect();
    fs::create_dir_all(layout.extract_dir())?;
    manifest::write_descriptors(
        &layout.descriptors(cfg.modality),
        &descriptors?.into_iter().collect(),
    )?;
    Ok(())
}

fn stage_eval(cfg: &PipelineConfig) -> Result<(), StageError> {
    let layout = Layout::new(cfg);
    require(&layout.descriptors(cfg.modality), Stage::Extract)?;
    require(&layout.runs(), Stage::Synth)?;
    require(&layout.sample_poses(), Stage::Ingest)?;
    let runs = manifest::read_runs(&layout.runs())?;
    let rows = manifest::read_sample_poses(&layout.sample_poses())?;
    let descriptors = manifest::read_descriptors(&layout.descriptors(cfg.modality))?;

    let mut samples_by_run: BTreeMap<RunId, Vec<(SampleId, MetricPose)>> = BTreeMap::new();
    for (run, fix) in &rows {
        samples_by_run
            .entry(run.clone())
            .or_default()
            .push((fix.sample_id, fix.pose));
    }
    let manifests: Vec<RunManifest> = runs
        .iter()
        .map(|(run_id, weather)| RunManifest {
            run_id: run_id.clone(),
            weather: *weather,
            samples: samples_by_run.get(run_id).cloned().unwrap_or_default(),
        })
        .collect();

    let judge = cfg.judge_config();
    let mut results: Vec<(RunId, RunId, u64, u64)> = Vec::new();
    for test in &manifests {
        for reference in &manifests {
            if test.run_id == reference.run_id {
                continue;
            }
            let acc = accuracy_over(test, reference, &descriptors, &judge)?;
            results.push((
                test.run_id.clone(),
                reference.run_id.clone(),
                acc.correct,
                acc.total,
            ));
        }
    }
    fs::create_dir_all(layout.eval_dir())?;
    manifest::write_pair_results(&layout.pairs(cfg.modality), &results)?;
    Ok(())
}

fn stage_report(cfg: &PipelineConfig) -> Result<(), StageError> {
    let layout = Layout::new(cfg);
    require(&layout.pairs(cfg.modality), Stage::Eval)?;
    require(&layout.runs(), Stage::Synth)?;
    let runs = manifest::read_runs(&layout.runs())?;
    let weather_of: BTreeMap<RunId, WeatherCategory> = runs.into_iter().collect();
    let pairs = manifest::read_pair_results(&layout.pairs(cfg.modality))?;
    let results: Result<Vec<WeatherPairResult>, StageError> = pairs
        .iter()
        .map(|(test, reference, correct, total)| {
            let lookup = |run: &RunId| {
                weather_of.get(run).copied().ok_or_else(|| {
                    StageError::Data(format!("run {run} missing from runs.csv"))
                })
            };
            Ok(WeatherPairResult {
                test: lookup(test)?,
                reference: lookup(reference)?,
                result: crate::eval::PairAccuracy {
                    correct: *correct,
                    total: *total,
                },
            })
        })
        .collect();
    let results = results?;

    fs::create_dir_all(layout.report_dir())?;
    let accuracy = weather_matrix(&results, MatrixKind::Accuracy);
    let counts = weather_matrix(&results, MatrixKind::Counts);
    emit_report(&accuracy, &layout.accuracy_csv(cfg.modality), ReportFormat::Csv)?;
    emit_report(&accuracy, &layout.accuracy_json(cfg.modality), ReportFormat::Json)?;
    emit_report(&counts, &layout.counts_csv(cfg.modality), ReportFormat::Csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A world small and cheap enough for end-to-end tests: 6 places on
    /// a 72 m loop, so the negative thresholds must shrink below the
    /// 23 m loop diameter.
    fn tiny_config(out: &Path) -> PipelineConfig {
        let text = "\
seed = 5
modality = camera
world.n_places = 6
world.loop_length = 72
runs = clean:0,clean:0
mine.t_n = 15
mine.hard_radius = 15
split.buffer_radius = 6
train.learning_rate = 0.01
train.batch_size = 4
train.max_epochs = 2
train.hard_epochs = 1
train.val_fraction = 0.25
train.plateau_window = 2
train.plateau_epsilon = 1
train.triplets_per_epoch = 6
";
        let mut cfg = PipelineConfig::parse(text).unwrap();
        cfg.out = out.to_path_buf();
        cfg
    }

    #[test]
    fn default_config_echo_round_trips() {
        let cfg = PipelineConfig::default();
        let parsed = PipelineConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn parse_reports_unknown_keys_with_line_numbers() {
        let err = PipelineConfig::parse("seed = 1\nworld.n_placez = 9\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("world.n_placez"), "{msg}");
    }

    #[test]
    fn parse_rejects_bad_values() {
        for text in [
            "seed = ten\n",
            "modality = radar\n",
            "runs = clean:0,storm:1\n",
            "runs = clean\n",
            "runs = clean:0,sun_glare:1.5\n",
            "world.n_places = 1\n",
            "train.momentum = 1.5\n",
            "eval.radius_m = 0\n",
        ] {
            let err = PipelineConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text:?} should be a config error");
        }
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = PipelineConfig::parse("seed = 7\nmodality = fused\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.modality, Modality::Fused);
        assert_eq!(cfg.n_places, PipelineConfig::default().n_places);
        assert_eq!(cfg.runs, PipelineConfig::default().runs);
    }

    #[test]
    fn stage_list_parses_and_normalizes() {
        let stages = parse_stages("train, mine,synth,mine").unwrap();
        assert_eq!(stages, vec![Stage::Synth, Stage::Mine, Stage::Train]);
        assert!(parse_stages("synth,fly").is_err());
        assert!(parse_stages(" ,").is_err());
    }

    #[test]
    fn missing_inputs_name_the_producing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("run"));
        let err = run_stage(&cfg, Stage::Mine).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("mine stage failed"), "{msg}");
        assert!(msg.contains("ingest"), "{msg}");
    }

    #[test]
    fn pipeline_end_to_end_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let first = tiny_config(&dir.path().join("a"));
        run_pipeline(&first, &[]).unwrap();

        let layout = Layout::new(&first);
        assert!(layout.config().exists());
        assert!(layout.triplets(Regime::Random).exists());
        assert!(layout.triplets(Regime::Hard).exists());
        assert!(layout.weights(Modality::Camera).exists());
        assert!(layout.weights_random(Modality::Camera).exists());
        assert!(layout.train_log(Modality::Camera).exists());
        assert!(layout.descriptors(Modality::Camera).exists());
        assert!(layout.pairs(Modality::Camera).exists());
        assert!(layout.accuracy_csv(Modality::Camera).exists());
        assert!(layout.accuracy_json(Modality::Camera).exists());
        assert!(layout.counts_csv(Modality::Camera).exists());

        // One sample per run falls past the last GPS fix and is dropped.
        let dropped = manifest::read_dropped(&layout.dropped()).unwrap();
        assert_eq!(dropped.len(), first.runs.len());
        assert!(dropped.iter().all(|(_, _, reason)| reason == "outside_trajectory"));

        // The echoed config parses back to the exact runtime config.
        let echoed =
            PipelineConfig::from_file(&layout.config()).unwrap();
        assert_eq!(echoed, first);

        let second = {
            let mut c = first.clone();
            c.out = dir.path().join("b");
            c
        };
        run_pipeline(&second, &[]).unwrap();
        let other = Layout::new(&second);
        for (a, b) in [
            (layout.triplets(Regime::Random), other.triplets(Regime::Random)),
            (layout.triplets(Regime::Hard), other.triplets(Regime::Hard)),
            (layout.weights(Modality::Camera), other.weights(Modality::Camera)),
            (layout.accuracy_csv(Modality::Camera), other.accuracy_csv(Modality::Camera)),
            (layout.counts_csv(Modality::Camera), other.counts_csv(Modality::Camera)),
            (layout.pairs(Modality::Camera), other.pairs(Modality::Camera)),
        ] {
            let left = fs::read(&a).unwrap();
            let right = fs::read(&b).unwrap();
            assert_eq!(left, right, "{} differs between reruns", a.display());
        }
    }

    #[test]
    fn stage_gating_stops_at_the_requested_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("run"));
        run_pipeline(&cfg, &[Stage::Synth, Stage::Ingest, Stage::Mine]).unwrap();
        let layout = Layout::new(&cfg);
        assert!(layout.triplets(Regime::Random).exists());
        assert!(!layout.weights(Modality::Camera).exists());
    }

    #[test]
    fn training_divergence_maps_to_exit_code_4() {
        let weights = TowerWeights::init(NetworkConfig::tiny(), 0).unwrap();
        let err = PipelineError::Stage {
            stage: Stage::Train,
            source: StageError::Descriptor(DescriptorError::Diverged {
                epoch: 3,
                last_good: Box::new(weights),
            }),
        };
        assert_eq!(err.exit_code(), 4);
        let msg = err.to_string();
        assert!(msg.contains("train stage failed"), "{msg}");
        assert!(msg.contains("diverged"), "{msg}");
    }
}
