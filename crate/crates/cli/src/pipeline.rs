//! The staged commands. Each stage reads the previous stage's artifacts from
//! the run directory, checks their fingerprints and writes its own.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lobrl::agents::{evaluate_greedy, train_agent, AgentKind, TrainedAgent, TrainingLog};
use lobrl::env::{segment_episodes, write_trajectories, TradingEnv};
use lobrl::forecaster::{build_targets, train_forecaster, Forecaster, SupervisedDataset, TrainingReport};
use lobrl::market_data::{
    generate_synthetic_stream, parse_orderbook_file, write_orderbook, EventStream, LoadOptions, LoadReport,
};
use lobrl::metrics::{build_report, BacktestReport};
use lobrl::nn::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, EvalSplit, RunConfig};
use crate::error::{CliError, Result};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn forecaster(&self) -> PathBuf {
        self.root.join("forecaster")
    }

    pub fn agent(&self, kind: AgentKind) -> PathBuf {
        self.root.join("agents").join(kind.as_str())
    }

    pub fn backtest(&self, kind: AgentKind) -> PathBuf {
        self.root.join("backtest").join(kind.as_str())
    }

    pub fn report(&self, kind: AgentKind) -> PathBuf {
        self.backtest(kind).join("report.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, missing_hint: &str) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::Data(format!("{} not found; {missing_hint}", path.display())));
        }
        Err(e) => return Err(CliError::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub artifacts: Vec<String>,
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_fingerprint: String,
    pub library_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

fn record_stage(run: &RunDir, cfg: &RunConfig, stage: &str, mut record: StageRecord) -> Result<()> {
    let path = run.manifest();
    let mut manifest: RunManifest = if path.exists() {
        read_json(&path, "")?
    } else {
        RunManifest::default()
    };
    manifest.config_fingerprint = cfg.fingerprint();
    manifest.library_version = LIBRARY_VERSION.to_string();
    record.finished_unix = unix_now();
    manifest.stages.insert(stage.to_string(), record);
    write_json(&path, &manifest)?;
    write_file(&run.root.join("config.resolved.toml"), cfg.to_toml()?)
}

fn relative(run: &RunDir, path: &Path) -> String {
    path.strip_prefix(&run.root).unwrap_or(path).display().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub data_fingerprint: String,
    pub config_fingerprint: String,
    pub instrument: String,
    pub events: usize,
    pub rows: usize,
    pub split_rows: [Range<usize>; 3],
    pub split_events: [Range<usize>; 3],
    pub load_report: Option<LoadSummary>,
}

/// Serializable digest of a LOBSTER load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub total_rows: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub padded: usize,
    pub diagnostics: Vec<String>,
    pub warnings: Vec<String>,
}

impl From<&LoadReport> for LoadSummary {
    fn from(r: &LoadReport) -> Self {
        Self {
            total_rows: r.total_rows,
            accepted: r.accepted,
            rejected: r.rejected,
            padded: r.padded,
            diagnostics: r.diagnostics.iter().map(|d| format!("line {}: {}", d.line, d.error)).collect(),
            warnings: r.warnings.clone(),
        }
    }
}

/// The prepared stream and its supervised dataset.
pub struct Prepared {
    pub stream: EventStream,
    pub dataset: SupervisedDataset,
}

impl Prepared {
    /// Event range covered by the anchors of a row range.
    pub fn events(&self, rows: &Range<usize>) -> Range<usize> {
        if rows.is_empty() {
            return 0..0;
        }
        let a = &self.dataset.anchors;
        a[rows.start]..a[rows.end - 1] + 1
    }

    pub fn train_events(&self) -> Range<usize> {
        self.events(&self.dataset.split.train)
    }

    pub fn eval_events(&self, split: EvalSplit) -> Range<usize> {
        match split {
            EvalSplit::Val => self.events(&self.dataset.split.val),
            EvalSplit::Test => self.events(&self.dataset.split.test),
        }
    }
}

fn load_source(cfg: &RunConfig) -> Result<(EventStream, Option<LoadReport>)> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let mut stream = generate_synthetic_stream(&cfg.data.synthetic)?;
            stream.instrument = cfg.instrument.clone();
            Ok((stream, None))
        }
        DataSource::Lobster => {
            let path = cfg.data.orderbook.as_ref().expect("validated");
            if !path.exists() {
                return Err(CliError::Data(format!("orderbook file {} does not exist", path.display())));
            }
            if let Some(m) = &cfg.data.messages {
                if !m.exists() {
                    return Err(CliError::Data(format!("message file {} does not exist", m.display())));
                }
            }
            let (stream, report) =
                parse_orderbook_file(&cfg.instrument, path, cfg.data.messages.as_deref(), &cfg.data.load)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            if report.rejected_fraction() > cfg.data.max_rejected_fraction {
                let first = report
                    .diagnostics
                    .first()
                    .map(|d| format!(" (first: line {}: {})", d.line, d.error))
                    .unwrap_or_default();
                return Err(CliError::Data(format!(
                    "{} of {} rows rejected, above the {:.2}% threshold{first}",
                    report.rejected,
                    report.total_rows,
                    100.0 * cfg.data.max_rejected_fraction
                )));
            }
            Ok((stream, Some(report)))
        }
    }
}

fn write_matrix(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "{}", header.join(","))?;
        for r in rows {
            let line: Vec<String> = r.iter().map(f64::to_string).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    })
}

/// `prepare`: materialise the stream, features, targets and split boundaries.
pub fn prepare(cfg: &RunConfig) -> Result<DataMeta> {
    let started = unix_now();
    let run = RunDir::new(&cfg.out);
    let (stream, load_report) = load_source(cfg)?;
    let dataset = build_targets(&stream, &cfg.horizons, cfg.features.normalize, cfg.split)?;
    let prepared = Prepared { stream, dataset };
    let split = &prepared.dataset.split;

    let dir = run.data();
    write_with(&dir.join("orderbook.csv"), |w| write_orderbook(&prepared.stream, w))?;
    write_with(&dir.join("timestamps.csv"), |w| {
        for s in &prepared.stream.snapshots {
            writeln!(w, "{}", s.timestamp)?;
        }
        Ok(())
    })?;
    let levels = prepared.dataset.features.first().map_or(0, Vec::len);
    let header: Vec<String> = (1..=levels).map(|i| format!("ofi_{i}")).collect();
    write_matrix(&dir.join("features.csv"), &header, &prepared.dataset.features)?;
    let header: Vec<String> = cfg.horizons.as_slice().iter().map(|h| format!("y_{h}")).collect();
    write_matrix(&dir.join("targets.csv"), &header, &prepared.dataset.targets)?;

    let meta = DataMeta {
        data_fingerprint: cfg.data_fingerprint(),
        config_fingerprint: cfg.fingerprint(),
        instrument: cfg.instrument.clone(),
        events: prepared.stream.len(),
        rows: prepared.dataset.len(),
        split_rows: [split.train.clone(), split.val.clone(), split.test.clone()],
        split_events: [
            prepared.events(&split.train),
            prepared.events(&split.val),
            prepared.events(&split.test),
        ],
        load_report: load_report.as_ref().map(LoadSummary::from),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    write_json(&dir.join("split.json"), &meta.split_rows)?;
    let artifacts = ["orderbook.csv", "timestamps.csv", "features.csv", "targets.csv", "split.json", "meta.json"]
        .iter()
        .map(|f| relative(&run, &dir.join(f)))
        .collect();
    let mut notes = BTreeMap::new();
    notes.insert("events".into(), meta.events.to_string());
    notes.insert("rows".into(), meta.rows.to_string());
    record_stage(
        &run,
        cfg,
        "prepare",
        StageRecord {
            fingerprint: meta.data_fingerprint.clone(),
            started_unix: started,
            artifacts,
            notes,
            ..StageRecord::default()
        },
    )?;
    Ok(meta)
}

fn fingerprint_mismatch(what: &str, found: &str, expected: &str, rerun: &str) -> CliError {
    CliError::Data(format!(
        "{what} fingerprint {found:.12} does not match the current config ({expected:.12}); rerun `{rerun}`"
    ))
}

/// Reloads the prepared stream and rebuilds the dataset, checking the fingerprint.
pub fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let run = RunDir::new(&cfg.out);
    let dir = run.data();
    let meta: DataMeta = read_json(&dir.join("meta.json"), "run `prepare` first")?;
    let expected = cfg.data_fingerprint();
    if meta.data_fingerprint != expected {
        return Err(fingerprint_mismatch("dataset", &meta.data_fingerprint, &expected, "prepare"));
    }
    let opts = LoadOptions {
        levels: cfg.data.load.levels,
        ..LoadOptions::default()
    };
    let (mut stream, report) = parse_orderbook_file(&meta.instrument, dir.join("orderbook.csv"), None, &opts)?;
    if report.rejected > 0 || stream.len() != meta.events {
        return Err(CliError::Data(format!("{} is corrupt", dir.join("orderbook.csv").display())));
    }
    let ts_path = dir.join("timestamps.csv");
    let ts = fs::read_to_string(&ts_path).map_err(|e| CliError::io(&ts_path, e))?;
    for (snap, line) in stream.snapshots.iter_mut().zip(ts.lines()) {
        snap.timestamp = line
            .trim()
            .parse()
            .map_err(|_| CliError::Data(format!("{}: bad timestamp {line:?}", ts_path.display())))?;
    }
    let dataset = build_targets(&stream, &cfg.horizons, cfg.features.normalize, cfg.split)?;
    Ok(Prepared { stream, dataset })
}

/// `train-forecaster`: fit, freeze and checkpoint the forecaster.
pub fn train_forecaster_stage(cfg: &RunConfig) -> Result<TrainingReport> {
    let started = unix_now();
    let run = RunDir::new(&cfg.out);
    let prepared = load_prepared(cfg)?;
    let (forecaster, report) = train_forecaster(&prepared.dataset, &cfg.forecaster)?;
    let fp = cfg.forecaster_fingerprint();
    let mut ck = forecaster.to_checkpoint(&fp);
    ck.metadata.insert("best_epoch".into(), report.best_epoch.to_string());
    let dir = run.forecaster();
    create_dir(&dir)?;
    ck.save(dir.join("checkpoint.json"))?;
    write_file(&dir.join("loss_curve.csv"), report.to_csv())?;
    write_json(&dir.join("report.json"), &report)?;
    let mut notes = BTreeMap::new();
    notes.insert("best_epoch".into(), report.best_epoch.to_string());
    notes.insert("best_val_mse".into(), report.best_val_mse.to_string());
    notes.insert("stopped_early".into(), report.stopped_early.to_string());
    record_stage(
        &run,
        cfg,
        "train-forecaster",
        StageRecord {
            fingerprint: fp,
            started_unix: started,
            artifacts: ["checkpoint.json", "loss_curve.csv", "report.json"]
                .iter()
                .map(|f| relative(&run, &dir.join(f)))
                .collect(),
            notes,
            ..StageRecord::default()
        },
    )?;
    Ok(report)
}

pub fn load_forecaster(cfg: &RunConfig) -> Result<Forecaster> {
    let path = RunDir::new(&cfg.out).forecaster().join("checkpoint.json");
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{} not found; run `train-forecaster` first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    let expected = cfg.forecaster_fingerprint();
    if ck.config_fingerprint != expected {
        return Err(fingerprint_mismatch("forecaster", &ck.config_fingerprint, &expected, "train-forecaster"));
    }
    let f = Forecaster::from_checkpoint(&ck)?;
    if !f.is_frozen() {
        return Err(CliError::Data("forecaster checkpoint is not frozen".into()));
    }
    Ok(f)
}

pub fn build_env(cfg: &RunConfig, prepared: &Prepared) -> Result<TradingEnv> {
    let forecaster = load_forecaster(cfg)?;
    Ok(TradingEnv::new(&prepared.stream, &forecaster, cfg.env.clone())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    pub kind: AgentKind,
    pub agent_fingerprint: String,
    pub forecaster_fingerprint: String,
    pub config_fingerprint: String,
    pub updates: usize,
}

/// `train-agent`: train each requested agent on the train split.
pub fn train_agents_stage(cfg: &RunConfig) -> Result<Vec<TrainingLog>> {
    let run = RunDir::new(&cfg.out);
    let prepared = load_prepared(cfg)?;
    let env = build_env(cfg, &prepared)?;
    let windows = segment_episodes(prepared.train_events(), &env.cfg);
    let mut logs = Vec::new();
    for &kind in &cfg.agents {
        let started = unix_now();
        log::info!("training {kind}");
        let (agent, log) = train_agent(kind, &env, &windows, &cfg.agent, cfg.seed)?;
        let fp = cfg.agent_fingerprint(kind);
        let dir = run.agent(kind);
        agent.save(&dir, &fp)?;
        write_file(&dir.join("training_log.csv"), log.to_csv())?;
        let meta = AgentMeta {
            kind,
            agent_fingerprint: fp.clone(),
            forecaster_fingerprint: cfg.forecaster_fingerprint(),
            config_fingerprint: cfg.fingerprint(),
            updates: log.rows.len(),
        };
        write_json(&dir.join("meta.json"), &meta)?;
        let artifact = if kind == AgentKind::Qtable { "qtable.txt" } else { "policy.json" };
        record_stage(
            &run,
            cfg,
            &format!("train-agent/{kind}"),
            StageRecord {
                fingerprint: fp,
                started_unix: started,
                artifacts: [artifact, "training_log.csv", "meta.json"]
                    .iter()
                    .map(|f| relative(&run, &dir.join(f)))
                    .collect(),
                ..StageRecord::default()
            },
        )?;
        logs.push(log);
    }
    Ok(logs)
}

pub fn load_agent(cfg: &RunConfig, kind: AgentKind) -> Result<TrainedAgent> {
    let dir = RunDir::new(&cfg.out).agent(kind);
    let meta: AgentMeta = read_json(&dir.join("meta.json"), &format!("run `train-agent --agent {kind}` first"))?;
    let expected = cfg.agent_fingerprint(kind);
    if meta.agent_fingerprint != expected || meta.kind != kind {
        return Err(fingerprint_mismatch("agent", &meta.agent_fingerprint, &expected, "train-agent"));
    }
    let (agent, stored) = TrainedAgent::load(kind, &dir, &cfg.agent.qlearning)?;
    if let Some(fp) = stored {
        if fp != expected {
            return Err(fingerprint_mismatch("policy", &fp, &expected, "train-agent"));
        }
    }
    Ok(agent)
}

/// What `backtest` writes to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_fingerprint: String,
    pub forecaster_fingerprint: String,
    pub agent_fingerprint: String,
    pub split: EvalSplit,
    pub report: BacktestReport,
}

/// `backtest`: greedy evaluation on the held-out split, metrics and plot series.
pub fn backtest_stage(cfg: &RunConfig) -> Result<Vec<BacktestReport>> {
    let run = RunDir::new(&cfg.out);
    let prepared = load_prepared(cfg)?;
    let env = build_env(cfg, &prepared)?;
    let windows = segment_episodes(prepared.eval_events(cfg.backtest.split), &env.cfg);
    let mut reports = Vec::new();
    for &kind in &cfg.agents {
        let started = unix_now();
        let agent = load_agent(cfg, kind)?;
        let trajectories = evaluate_greedy(&agent, &env, &windows)?;
        let report = build_report(
            &cfg.instrument,
            kind.display_name(),
            &trajectories,
            cfg.backtest.c_instr,
            cfg.backtest.histogram_bins,
        )?;
        let dir = run.backtest(kind);
        let file = ReportFile {
            config_fingerprint: cfg.fingerprint(),
            forecaster_fingerprint: cfg.forecaster_fingerprint(),
            agent_fingerprint: cfg.agent_fingerprint(kind),
            split: cfg.backtest.split,
            report: report.clone(),
        };
        write_json(&dir.join("report.json"), &file)?;
        write_with(&dir.join("equity.csv"), |w| report.write_equity_csv(w))?;
        write_with(&dir.join("histogram.csv"), |w| report.write_histogram_csv(w))?;
        write_with(&dir.join("episode_returns.csv"), |w| report.write_episode_returns_csv(w))?;
        write_with(&dir.join("drawdown.csv"), |w| report.write_drawdown_csv(w))?;
        write_with(&dir.join("trajectories.csv"), |w| write_trajectories(&trajectories, w))?;
        record_stage(
            &run,
            cfg,
            &format!("backtest/{kind}"),
            StageRecord {
                fingerprint: cfg.agent_fingerprint(kind),
                started_unix: started,
                artifacts: [
                    "report.json",
                    "equity.csv",
                    "histogram.csv",
                    "episode_returns.csv",
                    "drawdown.csv",
                    "trajectories.csv",
                ]
                .iter()
                .map(|f| relative(&run, &dir.join(f)))
                .collect(),
                ..StageRecord::default()
            },
        )?;
        reports.push(report);
    }
    Ok(reports)
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    read_json(path, "run `backtest` first")
}
