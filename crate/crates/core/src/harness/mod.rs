//! Synthetic benchmark harness: a seeded world generator with weather
//! effects, and the pipeline that drives every other module end to end.

pub mod pipeline;
pub mod world;

pub use pipeline::{
    parse_stages, run_pipeline, run_stage, Modality, PipelineConfig, PipelineError, Stage,
    StageError,
};
pub use world::{
    generate_world, render_run, SyntheticRun, SyntheticSample, WeatherEffect, WeatherKind, World,
    WorldError, WorldSpec,
};
