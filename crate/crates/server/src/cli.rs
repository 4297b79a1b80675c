use std::path::PathBuf;

use clap::Parser;
use modelserve_core::sources::{SourceConfig, SourceEntry};
use modelserve_core::{ManagerConfig, VersionPolicy};

use crate::config::{read_file, BatchingSettings, ConfigError, ServerConfig, SourceMode};

#[derive(Debug, Clone, Parser)]
#[command(name = "model_server", about = "Serve versioned models over HTTP")]
pub struct Args {
    #[arg(long, default_value_t = 8500)]
    pub port: u16,

    /// TOML file with `[[model]]` entries (name, base_path, selection, format).
    #[arg(long = "model_config_file")]
    pub model_config_file: Option<PathBuf>,

    /// Single-model shorthand; used with --model_name.
    #[arg(long = "model_base_path", conflicts_with = "model_config_file")]
    pub model_base_path: Option<PathBuf>,

    #[arg(long = "model_name", default_value = "default")]
    pub model_name: String,

    #[arg(long = "version_policy", default_value = "availability")]
    pub version_policy: VersionPolicy,

    /// Overrides the poll interval from the model config.
    #[arg(long = "poll_interval_s")]
    pub poll_interval_s: Option<f64>,

    #[arg(long = "enable_batching")]
    pub enable_batching: bool,

    #[arg(long = "batching_config_file")]
    pub batching_config_file: Option<PathBuf>,

    #[arg(long = "source_mode", default_value = "filesystem")]
    pub source_mode: SourceMode,

    #[arg(long = "log_sample_rate", default_value_t = 0.0)]
    pub log_sample_rate: f64,

    #[arg(long = "log_path")]
    pub log_path: Option<PathBuf>,
}

impl Args {
    pub fn into_config(self) -> Result<ServerConfig, ConfigError> {
        let mut model_config = match (&self.model_config_file, &self.model_base_path) {
            (Some(path), _) => SourceConfig::from_toml_str(&read_file(path)?)
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?,
            (None, Some(base)) => {
                SourceConfig::new(vec![SourceEntry::new(self.model_name.clone(), base)])
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
            (None, None) => SourceConfig::default(),
        };
        if let Some(p) = self.poll_interval_s {
            model_config.poll_interval_s = p;
        }
        if self.source_mode == SourceMode::Filesystem && model_config.entries.is_empty() {
            return Err(ConfigError::Invalid(
                "filesystem mode needs --model_config_file or --model_base_path".into(),
            ));
        }

        let batching = match (&self.batching_config_file, self.enable_batching) {
            (Some(path), _) => Some(BatchingSettings::from_toml_str(&read_file(path)?)?),
            (None, true) => Some(BatchingSettings::default()),
            (None, false) => None,
        };

        let config = ServerConfig {
            port: self.port,
            model_config,
            manager: ManagerConfig::default().with_policy(self.version_policy),
            batching,
            source_mode: self.source_mode,
            log_sample_rate: self.log_sample_rate,
            log_path: self.log_path,
            ..ServerConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn parse(args: &[&str]) -> Result<ServerConfig, String> {
        let args = Args::try_parse_from(std::iter::once("model_server").chain(args.iter().copied()))
            .map_err(|e| e.to_string())?;
        args.into_config().map_err(|e| e.to_string())
    }

    #[test]
    fn single_model_shorthand() {
        let c = parse(&[
            "--port=9000",
            "--model_base_path=/models/m",
            "--model_name=m",
            "--version_policy=resource",
            "--poll_interval_s=0.5",
        ])
        .unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.model_config.entries[0].name, "m");
        assert_eq!(c.model_config.poll_interval_s, 0.5);
        assert_eq!(c.manager.policy, VersionPolicy::ResourcePreserving);
        assert!(c.batching.is_none());
    }

    #[test]
    fn batching_flags() {
        let c = parse(&["--model_base_path=/m", "--enable_batching"]).unwrap();
        assert_eq!(c.batching.unwrap().default.max_batch_size, 32);

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "max_batch_size = 4").unwrap();
        let path = f.path().to_str().unwrap().to_string();
        let c = parse(&["--model_base_path=/m", &format!("--batching_config_file={path}")]).unwrap();
        assert_eq!(c.batching.unwrap().default.max_batch_size, 4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse(&["--model_base_path=/m", "--version_policy=fast"]).is_err());
        assert!(parse(&["--model_base_path=/m", "--log_sample_rate=2"]).is_err());
        assert!(parse(&["--model_base_path=/m", "--source_mode=rpc"]).is_err());
        assert!(parse(&[]).is_err());
        assert!(parse(&["--source_mode=command"]).is_ok());
    }

    #[test]
    fn config_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "poll_interval_s = 2.0\n[[model]]\nname = \"a\"\nbase_path = \"/a\"\nselection = \"all\"\n"
        )
        .unwrap();
        let path = f.path().to_str().unwrap().to_string();
        let c = parse(&[&format!("--model_config_file={path}"), "--log_sample_rate=0.25"]).unwrap();
        assert_eq!(c.model_config.entries.len(), 1);
        assert_eq!(c.model_config.poll_interval_s, 2.0);
        assert_eq!(c.log_sample_rate, 0.25);
    }
}
