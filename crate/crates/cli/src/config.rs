//! Run configuration: one flat TOML table holding every training key plus
//! a few keys describing the data stream.

use std::path::{Path, PathBuf};

use gaitadapt_core::data::{generate_domain_stream, load_stream, FrameShape};
use gaitadapt_core::eval::StepDataset;
use gaitadapt_core::rng::seeded;
use gaitadapt_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

/// Starting point that the file's keys override.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64x44 frames, 30-frame clips, 16 parts, 16x8 batches.
    Full,
    /// Single-core scale, see [`TrainConfig::desk`].
    Desk,
}

impl Preset {
    pub fn config(self) -> TrainConfig {
        match self {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StreamSource {
    /// Walker stream generated on the fly.
    Synthetic { domains: usize, ids_per_domain: usize, seqs_per_id: usize, seed: u64 },
    /// A directory written by `synth` (or laid out the same way).
    Directory { path: PathBuf },
}

impl StreamSource {
    pub fn load(&self, config: &TrainConfig) -> anyhow::Result<Vec<StepDataset>> {
        Ok(match self {
            StreamSource::Synthetic { domains, ids_per_domain, seqs_per_id, seed } => {
                let shape =
                    FrameShape { frames: config.sequence_length, height: config.frame_height, width: config.frame_width };
                generate_domain_stream(*domains, *ids_per_domain, *seqs_per_id, shape, &mut seeded(*seed, "stream"))?
            }
            StreamSource::Directory { path } => load_stream(path, config.frame_height, config.frame_width)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub stream: StreamSource,
}

fn take<T: serde::de::DeserializeOwned>(table: &mut Table, key: &str) -> Result<Option<T>, CliError> {
    table
        .remove(key)
        .map(|v| v.try_into().map_err(|e: toml::de::Error| CliError::Config(format!("`{key}`: {}", e.message()))))
        .transpose()
}

impl RunConfig {
    /// Resolves a config file's text. Relative `data_dir` paths are taken
    /// from `base`.
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig, CliError> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let preset: Preset = take(&mut table, "preset")?.unwrap_or(Preset::Full);
        let data_dir: Option<PathBuf> = take(&mut table, "data_dir")?;
        let domains: Option<usize> = take(&mut table, "domains")?;
        let ids_per_domain: Option<usize> = take(&mut table, "ids_per_domain")?;
        let seqs_per_id: Option<usize> = take(&mut table, "seqs_per_id")?;
        let stream_seed: Option<u64> = take(&mut table, "stream_seed")?;

        let mut merged = Table::try_from(preset.config()).expect("training config serializes to a table");
        merged.extend(table);
        let train: TrainConfig =
            Value::Table(merged).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let stream = match data_dir {
            Some(p) => {
                if domains.is_some() || ids_per_domain.is_some() || seqs_per_id.is_some() || stream_seed.is_some() {
                    return Err(CliError::Config("`data_dir` cannot be combined with synthetic stream keys".into()));
                }
                StreamSource::Directory { path: base.join(p) }
            }
            None => StreamSource::Synthetic {
                domains: domains.unwrap_or(3),
                ids_per_domain: ids_per_domain.unwrap_or(10),
                seqs_per_id: seqs_per_id.unwrap_or(6),
                seed: stream_seed.unwrap_or(train.seed),
            },
        };
        Ok(RunConfig { train, stream })
    }

    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::parse(&text, path.parent().unwrap_or(Path::new(".")))?)
    }

    /// Every key spelled out, so the text alone reproduces the run.
    pub fn to_toml(&self) -> String {
        let mut t = Table::try_from(&self.train).expect("training config serializes to a table");
        match &self.stream {
            StreamSource::Synthetic { domains, ids_per_domain, seqs_per_id, seed } => {
                t.insert("domains".into(), Value::Integer(*domains as i64));
                t.insert("ids_per_domain".into(), Value::Integer(*ids_per_domain as i64));
                t.insert("seqs_per_id".into(), Value::Integer(*seqs_per_id as i64));
                t.insert("stream_seed".into(), Value::Integer(*seed as i64));
            }
            StreamSource::Directory { path } => {
                t.insert("data_dir".into(), Value::String(path.display().to_string()));
            }
        }
        toml::to_string(&t).expect("table serializes")
    }
}
