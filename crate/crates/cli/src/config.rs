//! Run configuration file. Same TOML dialect as the taxonomy document;
//! every key is optional and command-line flags override it.
//!
//! ```toml
//! taxonomy = "taxonomy.toml"
//!
//! [predicate]
//! buffer_radius = 3
//! tau_on = 0.5
//! tau_surround = 0.8
//! connectivity = 8
//!
//! [split]
//! fractions = [0.53, 0.11, 0.36]
//! seed = 7
//!
//! [evaluate]
//! thresholds = [0.5, 0.6, 0.7, 0.8, 0.9]
//! inclusive = false
//!
//! [server]
//! bind = "127.0.0.1"
//! port = 8080
//! include_pending = true
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use refseg_core::dataset::reference;
use refseg_core::maskgen::SpatialPredicateConfig;
use refseg_core::metrics::{default_thresholds, Threshold, ThresholdRule};
use refseg_core::raster::Connectivity;
use refseg_core::taxonomy::{load_taxonomy, Taxonomy};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub taxonomy: Option<PathBuf>,
    #[serde(default)]
    pub predicate: PredicateSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub server: ServerSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredicateSection {
    pub buffer_radius: Option<usize>,
    pub tau_on: Option<f64>,
    pub tau_surround: Option<f64>,
    pub connectivity: Option<u8>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub fractions: Option<[f64; 3]>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub thresholds: Option<Vec<f64>>,
    pub inclusive: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub bind: Option<String>,
    pub port: Option<u16>,
    pub static_dir: Option<PathBuf>,
    pub include_pending: Option<bool>,
}

impl RunConfig {
    /// Relative paths inside the file are resolved against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.taxonomy, &mut cfg.server.static_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_optional(path: Option<&Path>) -> Result<RunConfig> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn taxonomy(&self, flag: Option<&Path>) -> Result<Taxonomy> {
        match flag.or(self.taxonomy.as_deref()) {
            Some(p) => load_taxonomy(p).with_context(|| format!("loading taxonomy {}", p.display())),
            None => Ok(Taxonomy::refsegrs()),
        }
    }

    pub fn predicate(&self, flags: &PredicateSection) -> Result<SpatialPredicateConfig> {
        let d = SpatialPredicateConfig::default();
        let c = &self.predicate;
        let connectivity = match flags.connectivity.or(c.connectivity) {
            Some(n) => Connectivity::from_number(n)
                .with_context(|| format!("connectivity must be 4 or 8, got {n}"))?,
            None => d.connectivity,
        };
        let cfg = SpatialPredicateConfig {
            buffer_radius: flags.buffer_radius.or(c.buffer_radius).unwrap_or(d.buffer_radius),
            tau_on: flags.tau_on.or(c.tau_on).unwrap_or(d.tau_on),
            tau_surround: flags.tau_surround.or(c.tau_surround).unwrap_or(d.tau_surround),
            connectivity,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults to the published scene shares.
    pub fn split(&self, fractions: Option<[f64; 3]>, seed: Option<u64>) -> Result<([f64; 3], u64)> {
        let fractions = fractions
            .or(self.split.fractions)
            .unwrap_or_else(reference::scene_fractions);
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
            bail!("split fractions must be in [0, 1] and sum to 1, got {fractions:?}");
        }
        Ok((fractions, seed.or(self.split.seed).unwrap_or(0)))
    }

    pub fn thresholds(&self, flag: Option<&[f64]>) -> Result<Vec<Threshold>> {
        match flag.or(self.evaluate.thresholds.as_deref()) {
            Some([]) => bail!("threshold list is empty"),
            Some(values) => values
                .iter()
                .map(|&t| Threshold::new(t).map_err(Into::into))
                .collect(),
            None => Ok(default_thresholds()),
        }
    }

    pub fn rule(&self, inclusive_flag: bool) -> ThresholdRule {
        if inclusive_flag || self.evaluate.inclusive == Some(true) {
            ThresholdRule::Inclusive
        } else {
            ThresholdRule::Strict
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let cfg: RunConfig = toml::from_str(
            "[predicate]\nbuffer_radius = 5\ntau_on = 0.4\nconnectivity = 4\n[split]\nseed = 9\n",
        )
        .unwrap();
        let flags = PredicateSection {
            buffer_radius: Some(1),
            ..Default::default()
        };
        let p = cfg.predicate(&flags).unwrap();
        assert_eq!(p.buffer_radius, 1);
        assert_eq!(p.tau_on, 0.4);
        assert_eq!(p.tau_surround, SpatialPredicateConfig::default().tau_surround);
        assert_eq!(p.connectivity, Connectivity::Four);

        let (fr, seed) = cfg.split(None, None).unwrap();
        assert_eq!(seed, 9);
        assert_eq!(fr, reference::scene_fractions());
        assert_eq!(cfg.split(None, Some(2)).unwrap().1, 2);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        assert!(toml::from_str::<RunConfig>("[predicate]\nradius = 3\n").is_err());
        let cfg = RunConfig::default();
        assert!(cfg.split(Some([0.5, 0.5, 0.5]), None).is_err());
        assert!(cfg.thresholds(Some(&[1.5])).is_err());
        assert!(cfg.thresholds(Some(&[])).is_err());
        let bad = PredicateSection {
            connectivity: Some(6),
            ..Default::default()
        };
        assert!(cfg.predicate(&bad).is_err());
    }
}
