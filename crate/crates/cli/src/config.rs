//! Run configuration: one JSON file, defaults everywhere, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pskv_core::align::synthetic_pairs;
use pskv_core::attack::AttackConfig;
use pskv_core::bench::{BenchScenario, ComplexityGrid};
use pskv_core::verify::VerifyOptions;
use pskv_core::{CacheStrategy, ModelConfig, PskvMode, Role, TokenId, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

/// A prompt or target: UTF-8 text tokenized byte-wise, or explicit ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Text {
    Bytes(String),
    Ids(Vec<TokenId>),
}

impl Text {
    pub fn to_ids(&self) -> Vec<TokenId> {
        match self {
            Text::Bytes(s) => s.bytes().map(TokenId::from).collect(),
            Text::Ids(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub n_prompts: usize,
    pub prefix_len: usize,
    pub target_len: usize,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        // 78 tokens: the average instruction length of a common harmful-behaviour benchmark.
        Self {
            n_prompts: 1,
            prefix_len: 78,
            target_len: 20,
            seed: 0,
        }
    }
}

/// Explicit `prompts`/`targets`, or a synthetic draw when none are given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<Text>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<Text>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub data: DataConfig,
    pub strategy: CacheStrategy,
    pub pskv_mode: PskvMode,
    pub parallel: bool,
    /// Simulated device budget in bytes.
    pub budget: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
    pub bench: BenchScenario,
    pub complexity: ComplexityGrid,
    pub verify: VerifyOptions,
}

/// Reads and validates a config file. Syntax and schema errors carry the
/// file's line and column.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = parse_str(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(cfg)
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => bail!(
            "line {}, column {}: {}",
            e.line(),
            e.column(),
            strip_position(&e.to_string())
        ),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn strip_position(msg: &str) -> &str {
    msg.rfind(" at line ").map_or(msg, |i| &msg[..i])
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.attack.validate()?;
        self.bench.validate()?;
        self.complexity.validate()?;
        let vocab = self.model.vocab_size;
        if self.attack.init_token as usize >= vocab - 1 {
            bail!(
                "invalid value for `attack.init_token`: {} is not a non-pad id of vocab_size={vocab}",
                self.attack.init_token
            );
        }
        let d = &self.data;
        if d.synthetic.is_some() && !(d.prompts.is_empty() && d.targets.is_empty()) {
            bail!("invalid value for `data`: give either prompts/targets or synthetic, not both");
        }
        if d.prompts.len() != d.targets.len() {
            bail!(
                "invalid value for `data.targets`: {} targets for {} prompts",
                d.targets.len(),
                d.prompts.len()
            );
        }
        if let Some(s) = &d.synthetic {
            if s.n_prompts == 0 || s.target_len == 0 {
                bail!(
                    "invalid value for `data.synthetic`: n_prompts and target_len must be positive"
                );
            }
        }
        for (field, list) in [("data.prompts", &d.prompts), ("data.targets", &d.targets)] {
            for (i, t) in list.iter().enumerate() {
                let ids = t.to_ids();
                if ids.is_empty() {
                    bail!("invalid value for `{field}[{i}]`: empty sequence");
                }
                if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab - 1) {
                    bail!("invalid value for `{field}[{i}]`: token {bad} is not a non-pad id of vocab_size={vocab}");
                }
            }
        }
        Ok(())
    }

    /// Replaces every run seed (attack, data, sweeps, verification). Model
    /// weights keep `model.seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.attack.seed = seed;
        self.bench.seed = seed;
        self.complexity.seed = seed;
        self.verify.seed = seed;
        if let Some(s) = &mut self.data.synthetic {
            s.seed = seed;
        }
    }

    pub fn sequences(&self) -> (Vec<TokenSeq>, Vec<TokenSeq>) {
        let d = &self.data;
        if d.prompts.is_empty() {
            let s = d.synthetic.clone().unwrap_or_default();
            return synthetic_pairs(
                s.seed,
                s.n_prompts,
                s.prefix_len,
                s.target_len,
                self.model.vocab_size,
            );
        }
        (
            d.prompts
                .iter()
                .map(|t| TokenSeq::new(t.to_ids(), Role::Prefix))
                .collect(),
            d.targets
                .iter()
                .map(|t| TokenSeq::new(t.to_ids(), Role::Target))
                .collect(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_forms() {
        let d: DataConfig =
            serde_json::from_str(r#"{"prompts":["Hi",[1,2]],"targets":["a","b"]}"#).unwrap();
        assert_eq!(d.prompts[0].to_ids(), vec![72, 105]);
        assert_eq!(d.prompts[1].to_ids(), vec![1, 2]);
    }

    #[test]
    fn position_is_stripped_once() {
        assert_eq!(
            strip_position("unknown field `x` at line 3 column 5"),
            "unknown field `x`"
        );
    }
}
