//! Flat JSON run configuration: every training field plus `data` and `out`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use mifuse_core::fusion::FusionKind;
use mifuse_core::pooling::Pooling;
use mifuse_core::train::{NegativeMode, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Parses a lowercase enum value the same way the config file does.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Command-line values that win over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_mi: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub step_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub split_train_frac: Option<f64>,
    #[arg(long, value_parser = parse_enum::<Pooling>)]
    pub pooling: Option<Pooling>,
    #[arg(long, value_parser = parse_enum::<FusionKind>)]
    pub fusion: Option<FusionKind>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    #[arg(long, value_parser = parse_enum::<NegativeMode>)]
    pub negatives: Option<NegativeMode>,
}

impl Overrides {
    pub fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            seed,
            runs,
            batch_size,
            lr0,
            lambda_mi,
            patience,
            step_size,
            gamma,
            max_epochs,
            split_train_frac,
            pooling,
            fusion,
            proj_dim,
            negatives
        );
    }
}

/// The effective configuration of a command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (if any), then applies flags. Paths inside the file are
    /// relative to the file's directory.
    pub fn load(
        path: Option<&Path>,
        overrides: &Overrides,
        data: Option<PathBuf>,
        out: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self {
                train: TrainConfig::default(),
                data: None,
                out: None,
            },
        };
        overrides.apply(&mut cfg.train);
        if data.is_some() {
            cfg.data = data;
        }
        if out.is_some() {
            cfg.out = out;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_value(value, path.parent().unwrap_or(Path::new("")))
            .map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn from_value(value: Value, base: &Path) -> Result<Self, CliError> {
        let Value::Object(mut map) = value else {
            return Err(CliError::config("config must be a JSON object"));
        };
        let path_field = |map: &mut Map<String, Value>, key: &str| match map.remove(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(base.join(s))),
            Some(other) => Err(CliError::config(format!(
                "{key} must be a path string, got {other}"
            ))),
        };
        let data = path_field(&mut map, "data")?;
        let out = path_field(&mut map, "out")?;
        let train: TrainConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| CliError::config(e.to_string()))?;
        Ok(Self { train, data, out })
    }

    pub fn data_path(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::config("no dataset given (--data or \"data\" in the config)"))
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| {
            CliError::config("no output directory given (--out or \"out\" in the config)")
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }
}
