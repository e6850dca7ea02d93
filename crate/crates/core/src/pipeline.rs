//! File-level stages: each one reads its inputs from disk, runs a library
//! step and writes its outputs. The command-line tool is a thin wrapper.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::estimators::{ekf_forward, mhe_solve, rts_smooth, EstimatorConfig, EstimatorError};
use crate::eval::{
    evaluate, parse_track_csv, write_ecdf_csv, write_track_csv, EvalError, EvalReport, TrackPoint,
};
use crate::features::{
    assemble_samples, extract_trace_features, parse_features_csv, write_features_csv, FeatureError,
};
use crate::geo::{ecef_to_geodetic, EcefPoint, GeoError};
use crate::ingest::{
    parse_epochs_csv, parse_ground_truth_csv, write_epochs_csv, GroundTruthTrack, IngestError,
    MeasurementSet, DEFAULT_ALIGN_TOLERANCE_MS,
};
use crate::labeling::{
    label_trace, read_label_dir, write_label_dir, LabelError, DEFAULT_DISCARD_EPOCHS,
};
use crate::prnet::{
    correct_pseudoranges, load_model, save_model, train, write_loss_curve, PrnetError, TrainConfig,
};
use crate::simulator::{simulate_trace, ScenarioConfig, SimError};
use crate::solver::{wls_trace, SolverError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: IngestError,
    },
    #[error("unknown engine {0:?} (expected wls, ekf, mhe or rts)")]
    Engine(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Prnet(#[from] PrnetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl PipelineError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Json { .. } | Self::Parse { .. } | Self::Engine(_) => "validation",
            Self::Solver(_) | Self::Estimator(_) | Self::Geo(_) => "numerical",
            Self::Label(_) => "labeling",
            Self::Feature(_) => "features",
            Self::Prnet(_) => "model",
            Self::Eval(_) => "evaluation",
            Self::Sim(_) => "simulation",
        }
    }

    /// True when the inputs or configuration are at fault rather than a
    /// numerical failure on valid inputs.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::Io { .. } | Self::Json { .. } | Self::Parse { .. } | Self::Engine(_) => true,
            Self::Solver(_) | Self::Geo(_) => false,
            Self::Estimator(e) => {
                matches!(e, EstimatorError::Config(_) | EstimatorError::EmptyTrace)
            }
            Self::Label(e) => !matches!(
                e,
                LabelError::Solver(_)
                    | LabelError::Estimator(_)
                    | LabelError::Bound { .. }
                    | LabelError::HRow { .. }
            ),
            Self::Feature(e) => !matches!(e, FeatureError::Geo(_) | FeatureError::Solver(_)),
            Self::Prnet(_) => true,
            Self::Eval(e) => !matches!(e, EvalError::Geo { .. }),
            Self::Sim(e) => !matches!(e, SimError::Io(_)),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), PipelineError> {
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    serde_json::from_reader(open(path)?).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    finish(w, path)
}

pub fn read_epochs(path: &Path) -> Result<Vec<MeasurementSet<f64>>, PipelineError> {
    parse_epochs_csv(open(path)?).map_err(|source| PipelineError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_truth(path: &Path) -> Result<GroundTruthTrack<f64>, PipelineError> {
    parse_ground_truth_csv(open(path)?).map_err(|source| PipelineError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Wls,
    Ekf,
    Mhe,
    Rts,
}

impl Engine {
    pub const ALL: [Engine; 4] = [Engine::Wls, Engine::Ekf, Engine::Mhe, Engine::Rts];
}

impl FromStr for Engine {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wls" => Ok(Self::Wls),
            "ekf" => Ok(Self::Ekf),
            "mhe" => Ok(Self::Mhe),
            "rts" => Ok(Self::Rts),
            other => Err(PipelineError::Engine(other.to_string())),
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Wls => "wls",
            Self::Ekf => "ekf",
            Self::Mhe => "mhe",
            Self::Rts => "rts",
        })
    }
}

/// ECEF position and clock of every epoch for the chosen engine.
pub fn solve_ecef(
    epochs: &[MeasurementSet<f64>],
    engine: Engine,
    config: &EstimatorConfig,
) -> Result<Vec<(i64, EcefPoint<f64>, f64)>, PipelineError> {
    let times = epochs.iter().map(|e| e.time_ms);
    Ok(match engine {
        Engine::Wls => times
            .zip(wls_trace(epochs)?)
            .map(|(t, (n, _))| (t, n.pos, n.clock_bias_m))
            .collect(),
        Engine::Ekf => ekf_forward(epochs, config)?
            .steps
            .iter()
            .map(|s| (s.time_ms, s.filtered.pos(), s.filtered.clock_bias_m()))
            .collect(),
        Engine::Rts => rts_smooth(&ekf_forward(epochs, config)?)?
            .points
            .iter()
            .map(|p| (p.time_ms, p.pos, p.clock_bias_m))
            .collect(),
        Engine::Mhe => times
            .zip(mhe_solve(epochs, config.mhe_window, config)?)
            .map(|(t, n)| (t, n.pos, n.clock_bias_m))
            .collect(),
    })
}

pub fn solve_track(
    epochs: &[MeasurementSet<f64>],
    engine: Engine,
    config: &EstimatorConfig,
) -> Result<Vec<TrackPoint>, PipelineError> {
    solve_ecef(epochs, engine, config)?
        .into_iter()
        .map(|(time_ms, pos, clock_bias_m)| {
            Ok(TrackPoint {
                time_ms,
                pos: ecef_to_geodetic(&pos)?,
                clock_bias_m,
            })
        })
        .collect()
}

fn estimator_config(path: Option<&Path>) -> Result<EstimatorConfig, PipelineError> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => EstimatorConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn simulate_stage(
    config: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<(), PipelineError> {
    let mut cfg: ScenarioConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    simulate_trace(&cfg)?.write_to_dir(out_dir)?;
    Ok(())
}

pub fn solve_stage(
    engine: Engine,
    epochs: &Path,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), PipelineError> {
    let cfg = estimator_config(config)?;
    let track = solve_track(&read_epochs(epochs)?, engine, &cfg)?;
    let mut w = create(out)?;
    write_track_csv(&mut w, &track).map_err(io_err(out))?;
    finish(w, out)
}

pub fn label_stage(
    epochs: &Path,
    truth: &Path,
    config: Option<&Path>,
    discard: Option<usize>,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let cfg = estimator_config(config)?;
    let data = label_trace(
        &read_epochs(epochs)?,
        &read_truth(truth)?,
        &cfg,
        discard.unwrap_or(DEFAULT_DISCARD_EPOCHS),
    )?;
    write_label_dir(out_dir, &data)?;
    Ok(())
}

pub fn features_stage(epochs: &Path, out: &Path) -> Result<(), PipelineError> {
    let feats = extract_trace_features(&read_epochs(epochs)?)?;
    let mut w = create(out)?;
    write_features_csv(&mut w, &feats).map_err(io_err(out))?;
    finish(w, out)
}

/// Sibling file of the model holding the training loss curve.
pub fn loss_curve_path(model: &Path) -> PathBuf {
    model.with_extension("loss.csv")
}

pub fn train_stage(
    features: &Path,
    labels_dir: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), PipelineError> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let feats = parse_features_csv(open(features)?).map_err(|source| PipelineError::Parse {
        path: features.to_path_buf(),
        source,
    })?;
    let labels = read_label_dir(labels_dir)?;
    let samples = assemble_samples(&feats, Some(&labels))?;
    let outcome = train(&samples, &cfg)?;
    let mut w = create(out)?;
    save_model(&mut w, &outcome.model)?;
    finish(w, out)?;
    let curve = loss_curve_path(out);
    let mut w = create(&curve)?;
    write_loss_curve(&mut w, &outcome.curve).map_err(io_err(&curve))?;
    finish(w, &curve)
}

pub fn correct_epochs(
    epochs: &[MeasurementSet<f64>],
    model: &crate::prnet::PrnetModel<f64>,
) -> Result<Vec<MeasurementSet<f64>>, PipelineError> {
    let feats = extract_trace_features(epochs)?;
    epochs
        .iter()
        .zip(&feats)
        .map(|(e, f)| Ok(correct_pseudoranges(e, model, f)?))
        .collect()
}

pub fn correct_stage(epochs: &Path, model: &Path, out: &Path) -> Result<(), PipelineError> {
    let model = load_model(open(model)?)?;
    let corrected = correct_epochs(&read_epochs(epochs)?, &model)?;
    let mut w = create(out)?;
    write_epochs_csv(&mut w, &corrected).map_err(io_err(out))?;
    finish(w, out)
}

/// Sibling file of the report holding the ECDF table.
pub fn ecdf_path(report: &Path) -> PathBuf {
    report.with_extension("ecdf.csv")
}

pub fn evaluate_stage(track: &Path, truth: &Path, out: &Path) -> Result<EvalReport, PipelineError> {
    let t = parse_track_csv(open(track)?).map_err(|source| PipelineError::Parse {
        path: track.to_path_buf(),
        source,
    })?;
    let report = evaluate(&t, &read_truth(truth)?, DEFAULT_ALIGN_TOLERANCE_MS)?;
    write_json(out, &report)?;
    let path = ecdf_path(out);
    let mut w = create(&path)?;
    write_ecdf_csv(&mut w, &report.ecdf).map_err(io_err(&path))?;
    finish(w, &path)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_names() {
        for e in Engine::ALL {
            assert_eq!(e.to_string().parse::<Engine>().unwrap(), e);
        }
        assert!(matches!(
            "kalman".parse::<Engine>(),
            Err(PipelineError::Engine(_))
        ));
    }

    #[test]
    fn stage_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = ScenarioConfig::stationary(30, 3.0, 2);
        std::fs::write(d.join("sim.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
        simulate_stage(&d.join("sim.json"), &d.join("sim"), None).unwrap();
        for engine in Engine::ALL {
            let out = d.join(format!("{engine}.csv"));
            solve_stage(engine, &d.join("sim/epochs.csv"), None, &out).unwrap();
            let report = evaluate_stage(
                &out,
                &d.join("sim/truth.csv"),
                &d.join(format!("{engine}.json")),
            )
            .unwrap();
            assert_eq!(report.epochs, 30);
            assert!(report.score_m < 30.0);
        }
        assert!(ecdf_path(&d.join("wls.json")).exists());
        let missing = solve_stage(Engine::Wls, &d.join("nope.csv"), None, &d.join("x.csv"));
        assert!(matches!(missing, Err(PipelineError::Io { .. })));
    }
}
