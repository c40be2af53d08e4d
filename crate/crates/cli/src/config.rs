//! Versioned TOML run configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hybridcast::dataio::{self, SeriesTable, SplitRatio, SynthKind, SynthSpec};
use hybridcast::model::ModelConfig;
use hybridcast::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `csv`, `sine_mix`, `trend_plus_season` or `noise_walk`.
    pub kind: String,
    pub path: Option<PathBuf>,
    /// Synthetic rows.
    pub rows: usize,
    pub period: f64,
    pub slope: f64,
    pub noise: Option<f64>,
    /// Synthetic generator seed; defaults to the model seed.
    pub seed: Option<u64>,
    /// `[train, val, test]`; defaults to 6:2:2 for ETT files and 7:1:2 otherwise.
    pub split: Option<[f64; 3]>,
    /// Standardize with statistics of the training segment.
    pub scale: bool,
    /// Period of the seasonal-naive baseline.
    pub season: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: "trend_plus_season".into(),
            path: None,
            rows: 2000,
            period: 24.0,
            slope: 0.002,
            noise: None,
            seed: None,
            split: None,
            scale: false,
            season: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Add last-value and seasonal-naive rows to the metrics file.
    pub baselines: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), baselines: false }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("version: expected {CONFIG_VERSION}, got {}", self.version)));
        }
        match self.data.kind.as_str() {
            "csv" => {
                if self.data.path.is_none() {
                    return Err(Error::Config("data.path: required when data.kind = \"csv\"".into()));
                }
            }
            other => {
                other.parse::<SynthKind>().map_err(|e| Error::Config(format!("data.kind: {e}")))?;
            }
        }
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.split_ratio()?;
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.model.seed)
    }

    pub fn split_ratio(&self) -> Result<SplitRatio> {
        if let Some([a, b, c]) = self.data.split {
            return SplitRatio::new(a, b, c).map_err(|e| Error::Config(format!("data.split: {e}")));
        }
        let ett = self
            .data
            .path
            .as_ref()
            .and_then(|p| p.file_name())
            .is_some_and(|n| n.to_string_lossy().to_ascii_uppercase().starts_with("ETT"));
        Ok(if ett { SplitRatio::ett() } else { SplitRatio::standard() })
    }

    /// Snapshot with every default written out explicitly.
    pub fn resolved(&self) -> Result<Self> {
        let mut r = self.clone();
        let s = self.split_ratio()?;
        r.data.split = Some([s.train, s.val, s.test]);
        r.data.seed = Some(self.data_seed());
        if r.data.kind != "csv" {
            r.data.noise = Some(self.synth_spec()?.noise);
        }
        Ok(r)
    }

    fn synth_spec(&self) -> Result<SynthSpec> {
        let kind: SynthKind = self.data.kind.parse()?;
        let mut spec = SynthSpec::new(kind);
        spec.period = self.data.period;
        spec.slope = self.data.slope;
        if let Some(n) = self.data.noise {
            spec.noise = n;
        }
        Ok(spec)
    }

    /// Loads or generates the configured series.
    pub fn table(&self) -> Result<SeriesTable> {
        let table = match self.data.kind.as_str() {
            "csv" => {
                let path = self.data.path.as_ref().expect("validated");
                dataio::load_csv(path)?.0
            }
            _ => dataio::synth_series(self.synth_spec()?, self.model.channels, self.data.rows, self.data_seed())?,
        };
        if table.num_channels() != self.model.channels {
            return Err(Error::Config(format!(
                "model.channels = {} but the data has {} channels",
                self.model.channels,
                table.num_channels()
            )));
        }
        Ok(table)
    }

    /// The table (scaled when requested) and its chronological splits.
    pub fn splits(&self) -> Result<(Arc<SeriesTable>, dataio::Splits)> {
        let mut table = self.table()?;
        let ratio = self.split_ratio()?;
        if self.data.scale {
            let [a, _] = ratio.boundaries(table.len());
            table = dataio::Scaler::fit(&table, 0, a)?.transform(&table);
        }
        let table = Arc::new(table);
        let splits = dataio::make_windows(table.clone(), self.model.lookback, self.model.horizon, ratio)?;
        Ok((table, splits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let text = r#"
version = 1
[data]
kind = "csv"
path = "data/ETTh1.csv"
[model]
channels = 7
lookback = 96
horizon = 24
"#;
        let a = RunConfig::parse(text).unwrap().resolved().unwrap();
        let b = RunConfig::parse(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data.split, Some([6.0, 2.0, 2.0]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "version = 1\nlearning_rate = 1.0\n",
            "version = 1\n[model]\nlearning_rat = 1.0\n",
            "version = 1\n[data]\nnoize = 0.1\n",
        ] {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains("unknown field"), "{err}");
        }
    }

    #[test]
    fn version_and_fields_are_checked() {
        assert!(RunConfig::parse("version = 2\n").is_err());
        let err = RunConfig::parse("version = 1\n[model]\nalpha = 1.5\n").unwrap_err().to_string();
        assert!(err.contains("alpha"), "{err}");
        assert!(RunConfig::parse("version = 1\n[data]\nkind = \"csv\"\n").is_err());
    }
}
