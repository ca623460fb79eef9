//! The single JSON run configuration.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::idm::IdmConfig;
use crate::inference::InferenceConfig;
use crate::policy::PolicyConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub idm: IdmConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.encoder.validate()?;
        self.policy.validate()?;
        self.idm.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.eval.validate()?;
        if self.train.chunk_len > self.env.episode_len {
            return Err(Error::Config(format!(
                "chunk_len {} exceeds episode_len {}",
                self.train.chunk_len, self.env.episode_len
            )));
        }
        Ok(())
    }

    pub fn agent_model(&self) -> crate::agent::AgentModel {
        crate::agent::AgentModel::new(&self.encoder, &self.policy, self.train.condition_slots, self.train.chunk_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.train.lambda_kl, 0.01);
        assert_eq!(cfg.train.chunk_len, 32);
        assert_eq!(cfg.encoder.hidden, 64);
        assert_eq!(cfg.policy.memory, 64);
        assert_eq!(cfg.idm.window, 9);
        assert_eq!(cfg.eval.elo_k, 8.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"train": {"lamda_kl": 0.1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(RunConfig::from_json(r#"{"optimizer": {}}"#).is_err());
        let partial = RunConfig::from_json(r#"{"train": {"lambda_kl": 0.5}}"#).unwrap();
        assert_eq!(partial.train.lambda_kl, 0.5);
    }
}
