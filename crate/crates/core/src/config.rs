//! Run configuration files and the bundled presets.
//!
//! A config is TOML with an optional `[zca]` table, one `[[layers]]` table
//! per energy layer, and optional `[ablations]` and `[schedule]` tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ksubspaces::TrainSchedule;
use crate::network::NetworkSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    #[serde(flatten)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub schedule: TrainSchedule,
}

pub const PRESETS: &[(&str, &str)] = &[
    ("table1", include_str!("../presets/table1.toml")),
    ("table6-1layer", include_str!("../presets/table6-1layer.toml")),
    ("table6-2layer", include_str!("../presets/table6-2layer.toml")),
    ("table6-3layer", include_str!("../presets/table6-3layer.toml")),
    ("table6-4layer", include_str!("../presets/table6-4layer.toml")),
    ("ablation-no-zca", include_str!("../presets/ablation-no-zca.toml")),
    ("ablation-no-rescaling", include_str!("../presets/ablation-no-rescaling.toml")),
    ("ablation-no-zca-no-rescaling", include_str!("../presets/ablation-no-zca-no-rescaling.toml")),
    ("ablation-1d", include_str!("../presets/ablation-1d.toml")),
    ("ablation-random", include_str!("../presets/ablation-random.toml")),
    ("energy-curve", include_str!("../presets/energy-curve.toml")),
];

pub fn parse_run_spec(text: &str) -> Result<RunSpec> {
    let spec: RunSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    spec.network.validate()?;
    spec.schedule.validate()?;
    Ok(spec)
}

pub fn preset(name: &str) -> Result<RunSpec> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })?;
    parse_run_spec(text)
}

pub fn load_run_spec(path: impl AsRef<Path>) -> Result<RunSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_spec(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn to_toml(spec: &RunSpec) -> Result<String> {
    toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_parse_and_validate() {
        for (name, _) in PRESETS {
            let p = preset(name).unwrap();
            assert!(p.network.validate().is_ok(), "{name}");
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn preset_contents() {
        let t = preset("table1").unwrap();
        assert_eq!(t, preset("table6-3layer").unwrap());
        assert_eq!(t.network.layers.len(), 3);
        assert_eq!(t.network.layers[2].subspaces, 58);
        assert_eq!(t.schedule, TrainSchedule::default());
        assert_eq!(preset("table6-4layer").unwrap().network.layers.len(), 4);
        assert!(!preset("ablation-no-zca").unwrap().network.ablations.zca_enabled);
        assert!(preset("ablation-random").unwrap().network.ablations.random_subspaces);
        assert_eq!(preset("energy-curve").unwrap().schedule.batch_size, 256);
    }

    #[test]
    fn round_trips_through_toml() {
        for (name, _) in PRESETS {
            let p = preset(name).unwrap();
            assert_eq!(parse_run_spec(&to_toml(&p).unwrap()).unwrap(), p);
        }
    }

    #[test]
    fn bad_configs_are_config_errors() {
        assert!(matches!(parse_run_spec("layers = 3"), Err(Error::Config(_))));
        let bad = "[[layers]]\nsubspaces = 1\nrank = 1\nwinners = 1\nkernel_size = 3\npadding = 0\n";
        assert!(matches!(parse_run_spec(bad), Err(Error::Config(_))));
    }
}
