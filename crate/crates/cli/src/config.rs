//! Run configuration: one TOML file, layered as
//! built-in defaults < config file < `--profile` < `--set key=value`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use nowcast_core::distill::DistillConfig;
use nowcast_core::loss::LossConfig;
use nowcast_core::metrics::EvalConfig;
use nowcast_core::model::ModelConfig;
use nowcast_core::radar_data::{DatasetSpec, SyntheticGenConfig};
use nowcast_core::trainer::TrainConfig;

/// Root directory for relative run paths when set.
pub const RUN_ROOT_ENV: &str = "NOWCAST_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Run directory; relative paths resolve against `$NOWCAST_RUN_ROOT`
    /// (or the working directory when unset).
    pub run_dir: PathBuf,
    /// Dataset directory holding `train/`, `val/` and `test/`; defaults to
    /// `<run_dir>/data`.
    pub data_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub pools: Vec<usize>,
    /// Threshold of the per-lead-time curves; defaults to the top threshold.
    pub lead_time_threshold: Option<f64>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            pools: d.pools,
            lead_time_threshold: None,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: DatasetSpec,
    pub synthetic: SyntheticGenConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

/// Overrides applied by `--profile smoke`: 16x16 grids, a small network and
/// two epochs, keeping the default horizons.
pub const SMOKE_PROFILE: &[(&str, &str)] = &[
    ("data.height", "16"),
    ("data.width", "16"),
    ("synthetic.height", "16"),
    ("synthetic.width", "16"),
    ("synthetic.n_sequences", "40"),
    ("model.hid_spatial", "4"),
    ("model.hid_temporal", "8"),
    ("model.n_spatial_blocks", "1"),
    ("model.n_temporal_blocks", "2"),
    ("model.inception_kernels", "[3, 5]"),
    ("model.groups", "2"),
    ("train.max_epochs", "2"),
    ("train.batch_size", "4"),
];

pub fn profile(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    match name {
        "smoke" => Ok(SMOKE_PROFILE),
        other => bail!("unknown profile `{other}` (available: smoke)"),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words such as `mean` or paths are taken as strings
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted `section.key` in a TOML table.
pub fn set_key(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed key `{key}`");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{key}`: `{p}` is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Builds the configuration from an optional file, a profile and
    /// `key=value` overrides, then validates it.
    pub fn load(file: Option<&Path>, profile_name: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        if let Some(name) = profile_name {
            for (k, v) in profile(name)? {
                set_key(&mut table, k, v)?;
            }
        }
        for (k, v) in overrides {
            set_key(&mut table, k, v).with_context(|| format!("override `{k}`"))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!("invalid configuration: {}", e.message().trim()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Checks every section and the agreements between them.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.synthetic.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.distill.validate()?;
        self.train.validate()?;
        self.eval_config().validate()?;
        let s = &self.split;
        if [s.train, s.val, s.test].iter().any(|f| !(*f >= 0.0)) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            bail!(
                "config error in `split`: train + val + test must be nonnegative and sum to 1 (got {} + {} + {})",
                s.train,
                s.val,
                s.test
            );
        }
        let agree = |key: &str, a: usize, b: usize, other: &str| -> Result<()> {
            if a != b {
                bail!("config error in `{key}`: {a} differs from `{other}` = {b}");
            }
            Ok(())
        };
        agree("model.t_in", self.model.t_in, self.data.t_in, "data.t_in")?;
        agree("distill.t_in", self.distill.t_in, self.data.t_in, "data.t_in")?;
        agree("distill.t_long", self.distill.t_long, self.data.t_out, "data.t_out")?;
        agree("synthetic.height", self.synthetic.height, self.data.height, "data.height")?;
        agree("synthetic.width", self.synthetic.width, self.data.width, "data.width")?;
        agree("synthetic.interval_minutes", self.synthetic.interval_minutes as usize, self.data.interval_minutes as usize, "data.interval_minutes")?;
        if self.synthetic.t_total < self.distill.source_len() {
            bail!(
                "config error in `synthetic.t_total`: {} frames cannot hold t_in + t_long = {}",
                self.synthetic.t_total,
                self.distill.source_len()
            );
        }
        if self.loss.tau != self.data.tau {
            bail!("config error in `loss.tau`: {} differs from `data.tau` = {}", self.loss.tau, self.data.tau);
        }
        let down = self.model.downsampling();
        if !self.data.height.is_multiple_of(down) || !self.data.width.is_multiple_of(down) {
            bail!(
                "config error in `model.n_spatial_blocks`: grid {}x{} is not divisible by {down}",
                self.data.height,
                self.data.width
            );
        }
        for &p in &self.eval.pools {
            if !self.data.height.is_multiple_of(p) || !self.data.width.is_multiple_of(p) {
                bail!("config error in `eval.pools`: pool {p} does not divide the {}x{} grid", self.data.height, self.data.width);
            }
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            thresholds: self.data.thresholds.clone(),
            pools: self.eval.pools.clone(),
            lead_time_threshold: self.eval.lead_time_threshold.unwrap_or_else(|| self.data.top_threshold()),
            batch_size: self.eval.batch_size,
        }
    }

    /// Spec for augmented datasets: the horizon spans both target halves.
    pub fn augmented_spec(&self) -> DatasetSpec {
        DatasetSpec {
            t_out: 2 * self.distill.t_long,
            ..self.data.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        resolve(&self.paths.run_dir)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data_dir.as_deref().map_or_else(|| self.run_dir().join("data"), resolve)
    }
}

fn resolve(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}
