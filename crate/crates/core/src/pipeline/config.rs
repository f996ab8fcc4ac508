use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowcore::FlowConfig;
use crate::gnn::HeteroConvSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Equally spaced noise levels (and optimizer steps) per epoch.
    pub noise_levels: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub time_dim: usize,
    pub time_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            noise_levels: 200,
            val_fraction: 0.15,
            seed: 0,
            time_dim: 32,
            time_scale: 1000.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.noise_levels < 2 {
            return Err(Error::Config("train.noise_levels must be >= 2".into()));
        }
        if !(0.05..=0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "train.val_fraction must lie in [0.05, 0.5], got {}",
                self.val_fraction
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "train.time_dim must be a positive even number, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    /// Hidden widths shared by every table's denoiser.
    pub hidden: Vec<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: vec![128, 128] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub gnn: HeteroConvSpec,
    pub mlp: MlpConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.train.validate()?;
        self.gnn.validate()?;
        if self.mlp.hidden.is_empty() || self.mlp.hidden.contains(&0) {
            return Err(Error::Config("mlp.hidden needs at least one positive width".into()));
        }
        Ok(())
    }

    /// Apply `section.key=value`; the value is read as a TOML literal and
    /// falls back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let path = path.trim();
        let raw = raw.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields one key");
        let mut node = &mut root;
        for k in parents {
            node = node
                .get_mut(*k)
                .ok_or_else(|| Error::Config(format!("unknown config section `{k}` in `{path}`")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{path}` does not name a config key")))?;
        if !table.contains_key(*last) {
            return Err(Error::Config(format!("unknown config key `{path}`")));
        }
        table.insert(last.to_string(), value);
        let updated: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::VelocityMode;
    use crate::gnn::Backbone;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn partial_sections() {
        let cfg = RunConfig::parse(
            r#"
[flow]
velocity_mode = "direct"
[train]
epochs = 5
[gnn]
backbone = "gin"
embedding_dim = 4
[mlp]
hidden = [32, 32, 32]
"#,
        )
        .unwrap();
        assert_eq!(cfg.flow.velocity_mode, VelocityMode::Direct);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.noise_levels, 200);
        assert_eq!(cfg.gnn.backbone, Backbone::Gin);
        assert_eq!(cfg.mlp.hidden, vec![32, 32, 32]);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[train]\nval_fraction = 0.9").is_err());
        assert!(RunConfig::parse("[train]\nnoise_levels = 1").is_err());
        assert!(RunConfig::parse("[train]\nbogus = 1").is_err());
        assert!(RunConfig::parse("[flow]\nsigma_min = 0.0").is_err());
        assert!(RunConfig::parse("[mlp]\nhidden = []").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.epochs=3").unwrap();
        cfg.apply_override("gnn.backbone=gin").unwrap();
        cfg.apply_override("mlp.hidden=[16,16]").unwrap();
        cfg.apply_override("flow.sigma_min = 0.01").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.gnn.backbone, Backbone::Gin);
        assert_eq!(cfg.mlp.hidden, vec![16, 16]);
        assert_eq!(cfg.flow.sigma_min, 0.01);
        assert!(cfg.apply_override("train.nope=1").is_err());
        assert!(cfg.apply_override("train.epochs").is_err());
        assert!(cfg.apply_override("train.epochs=0").is_err());
        assert!(cfg.apply_override("nothing.epochs=2").is_err());
        assert_eq!(cfg.train.epochs, 3);
    }
}
