use std::path::Path;

use rls_core::bench::{BenchConfig, FcnConfig};
use rls_core::cls::ClsConfig;
use rls_core::rls::RlsConfig;
use rls_core::seed;
use rls_core::synth::{sha256_hex, GenConfig};
use rls_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "RLS_SEED";

/// Everything a run needs. Every section is optional and falls back to the
/// module defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GenConfig,
    pub cls: ClsConfig,
    pub rls: RlsConfig,
    /// Defaults to the recurrent model's grid when absent.
    pub fcn: Option<FcnConfig>,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    /// When set, replaces every per-module seed with `derive(seed, tag)`.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_slice(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            let s = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
            cfg.seed = Some(s);
        }
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_seeds(&mut self) {
        if let Some(s) = self.seed {
            self.data.seed = seed::derive(s, "data");
            self.rls.seed = seed::derive(s, "rls-init");
            self.train.seed = seed::derive(s, "train");
            if let Some(f) = self.fcn.as_mut() {
                f.seed = seed::derive(s, "fcn-init");
            }
        }
    }

    pub fn fcn_config(&self) -> FcnConfig {
        self.fcn.clone().unwrap_or_else(|| FcnConfig {
            height: self.rls.height,
            width: self.rls.width,
            seed: self.seed.map_or(0, |s| seed::derive(s, "fcn-init")),
            ..FcnConfig::default()
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.cls.validate()?;
        self.rls.validate()?;
        self.fcn_config().validate()?;
        self.train.validate()?;
        self.bench.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

#[derive(Debug, Serialize)]
pub struct RunMeta<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub config_digest: String,
    pub seed: Option<u64>,
}

pub fn write_run_meta(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let meta = RunMeta {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_digest: cfg.digest(),
        seed: cfg.seed,
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    text.push('\n');
    crate::write_file(&dir.join("run_meta.json"), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"dta": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn global_seed_fans_out() {
        let mut a = RunConfig {
            seed: Some(7),
            ..RunConfig::default()
        };
        a.resolve_seeds();
        let mut b = a.clone();
        b.seed = Some(8);
        b.resolve_seeds();
        assert_ne!(a.data.seed, b.data.seed);
        assert_ne!(a.data.seed, a.train.seed);
        assert_eq!(a.fcn_config().seed, seed::derive(7, "fcn-init"));
    }
}
