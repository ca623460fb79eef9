//! Assembly of the posterior/prior encoders and the policy into one model.

use crate::encoder::{EncoderConfig, GoalEncoder};
use crate::error::Result;
use crate::numerics::{ParamStore, Real};
use crate::policy::{Policy, PolicyConfig};
use crate::seeds;

/// The trainable agent: the policy reuses the posterior's frame embeddings.
#[derive(Clone, Debug)]
pub struct AgentModel {
    pub posterior: GoalEncoder,
    pub prior: GoalEncoder,
    pub policy: Policy,
}

impl AgentModel {
    pub fn new(encoder: &EncoderConfig, policy: &PolicyConfig, slots: usize, chunk_len: usize) -> Self {
        Self {
            posterior: GoalEncoder::new("enc", encoder, slots, chunk_len),
            prior: GoalEncoder::new("prior", encoder, slots, chunk_len),
            policy: Policy::new(policy, encoder.hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.posterior.hidden()
    }

    pub fn slots(&self) -> usize {
        self.posterior.slots
    }

    pub fn chunk_len(&self) -> usize {
        self.posterior.max_len
    }

    /// Fresh parameters; each component draws from its own seeded stream.
    pub fn init<R: Real>(&self, seed: u64) -> Result<ParamStore<R>> {
        let mut store = ParamStore::new();
        self.posterior.init(&mut store, &mut seeds::rng(seed, &[10]))?;
        self.prior.init(&mut store, &mut seeds::rng(seed, &[11]))?;
        self.policy.init(&mut store, &mut seeds::rng(seed, &[12]))?;
        Ok(store)
    }
}
