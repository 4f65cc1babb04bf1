//! Run configuration: built-in profiles, TOML files and flag overrides, merged
//! in that order, plus the content fingerprints that tie artifacts together.

use std::path::{Path, PathBuf};

use lobrl::agents::{AgentConfig, AgentKind};
use lobrl::env::EnvConfig;
use lobrl::forecaster::{ForecasterConfig, HorizonSet, SplitFractions};
use lobrl::market_data::{LoadOptions, SyntheticParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Default,
    /// Small widths and few epochs, for tests.
    Ci,
    /// Six horizons, a 4×2048 forecaster, 100 epochs, 80/10/10 split.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Lobster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// LOBSTER orderbook file; required for `source = "lobster"`.
    pub orderbook: Option<PathBuf>,
    /// Optional LOBSTER message file, used for timestamps.
    pub messages: Option<PathBuf>,
    pub load: LoadOptions,
    /// Abort `prepare` when more rows than this fraction are rejected.
    pub max_rejected_fraction: f64,
    /// Generator settings; `seed` is taken from the top-level seed.
    pub synthetic: SyntheticParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            orderbook: None,
            messages: None,
            load: LoadOptions::default(),
            max_rejected_fraction: 0.01,
            synthetic: SyntheticParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Max-abs normalise each OFI vector.
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { normalize: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestConfig {
    /// Price-to-PnL scaling for the instrument.
    pub c_instr: f64,
    pub histogram_bins: usize,
    pub split: EvalSplit,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            c_instr: 1.0,
            histogram_bins: lobrl::metrics::DEFAULT_HISTOGRAM_BINS,
            split: EvalSplit::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub instrument: String,
    pub seed: u64,
    /// Run directory. Not part of the fingerprint.
    pub out: PathBuf,
    /// Agents trained and backtested by the multi-agent commands.
    pub agents: Vec<AgentKind>,
    pub horizons: HorizonSet,
    pub split: SplitFractions,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub forecaster: ForecasterConfig,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub backtest: BacktestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            instrument: "SYNTH".into(),
            seed: 7,
            out: PathBuf::from("runs/default"),
            agents: AgentKind::ALL.to_vec(),
            horizons: HorizonSet::default(),
            split: SplitFractions::default(),
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            forecaster: ForecasterConfig::default(),
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            backtest: BacktestConfig::default(),
        }
    }
}

/// Command-line values that override file and profile settings.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub agents: Option<Vec<AgentKind>>,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = RunConfig::default();
        match profile {
            Profile::Default => {}
            Profile::Ci => {
                cfg.data.synthetic.n_events = 20_000;
                cfg.forecaster.hidden = vec![32, 32];
                cfg.forecaster.max_epochs = 10;
                cfg.agent.updates = 40;
                cfg.out = PathBuf::from("runs/ci");
            }
            Profile::Paper => {
                cfg.horizons = HorizonSet::default();
                cfg.split = SplitFractions { train: 0.8, val: 0.1 };
                cfg.forecaster.hidden = vec![2048; 4];
                cfg.forecaster.max_epochs = 100;
                cfg.out = PathBuf::from("runs/paper");
            }
        }
        cfg
    }

    /// Profile, then `file` (if any), then `overrides`.
    pub fn resolve(profile: Profile, file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            None => Self::for_profile(profile),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                Self::merge_toml(profile, &text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(agents) = &overrides.agents {
            cfg.agents = agents.clone();
        }
        cfg.data.synthetic.seed = cfg.seed;
        cfg.forecaster.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlays a TOML document on a profile; unknown keys are errors.
    pub fn merge_toml(profile: Profile, text: &str) -> std::result::Result<Self, String> {
        let file: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| e.to_string())?;
        let merged = merge_tables(base, file);
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.seed > i64::MAX as u64 {
            return usage(format!("seed must be at most {}", i64::MAX));
        }
        if self.agents.is_empty() {
            return usage("at least one agent kind is required".into());
        }
        if self.data.source == DataSource::Lobster && self.data.orderbook.is_none() {
            return usage("data.orderbook is required for the lobster source".into());
        }
        if !(0.0..=1.0).contains(&self.data.max_rejected_fraction) {
            return usage("data.max_rejected_fraction must lie in [0, 1]".into());
        }
        let SplitFractions { train, val } = self.split;
        if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
            return usage(format!("split fractions train={train} val={val} leave no test split"));
        }
        if !self.backtest.c_instr.is_finite() || self.backtest.histogram_bins == 0 {
            return usage("backtest.c_instr must be finite and histogram_bins positive".into());
        }
        self.env.validate().map_err(|e| CliError::Usage(format!("env: {e}")))?;
        for k in &self.agents {
            self.agent
                .validate(*k)
                .map_err(|e| CliError::Usage(format!("agent: {e}")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("cannot serialise config: {e}")))
    }

    /// Hash of the whole configuration except the output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        sha256_json(&c, "")
    }

    /// Hash of everything that determines the prepared dataset.
    pub fn data_fingerprint(&self) -> String {
        let view = serde_json::json!({
            "instrument": self.instrument,
            "seed": self.seed,
            "data": self.data,
            "features": self.features,
            "horizons": self.horizons,
            "split": self.split,
        });
        sha256_json(&view, "")
    }

    pub fn forecaster_fingerprint(&self) -> String {
        sha256_json(&self.forecaster, &self.data_fingerprint())
    }

    pub fn agent_fingerprint(&self, kind: AgentKind) -> String {
        let view = serde_json::json!({
            "kind": kind,
            "env": self.env,
            "agent": self.agent,
        });
        sha256_json(&view, &self.forecaster_fingerprint())
    }
}

fn merge_tables(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (k, v) in overlay {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge_tables(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

/// SHA-256 of `prefix` followed by the canonical (key-sorted) JSON of `value`.
pub fn sha256_json<T: Serialize>(value: &T, prefix: &str) -> String {
    // serde_json::Value keeps object keys sorted, so field order never matters.
    let canonical = serde_json::to_value(value).expect("config types serialise to JSON");
    let mut h = Sha256::new();
    h.update(prefix.as_bytes());
    h.update(canonical.to_string().as_bytes());
    hex::encode(h.finalize())
}
