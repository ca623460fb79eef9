//! Video encoder into the Gaussian goal space, plus the prefix prior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::FrameTensor;
use crate::error::{shape_err, Error, Result};
use crate::layers::{self, FrameEmbedder};
use crate::numerics::{reparameterize, AttnSpec, Graph, ParamStore, Real, Tensor, Var};

/// `encoder` section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub pool_heads: usize,
    pub ff_mult: usize,
    pub sigma_floor: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            pool_heads: 4,
            ff_mult: 2,
            sigma_floor: 1e-4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.ff_mult == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        for h in [self.heads, self.pool_heads] {
            if h == 0 || self.hidden % h != 0 {
                return Err(Error::Config(format!("hidden {} not divisible by {h} heads", self.hidden)));
            }
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian per summary slot, both `[N, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalDistribution<R> {
    pub mu: Tensor<R>,
    pub sigma: Tensor<R>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sampled,
    Mean,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalEmbedding<R> {
    pub g: Tensor<R>,
    pub provenance: Provenance,
}

impl<R: Real> GoalEmbedding<R> {
    pub fn cast<S: Real>(&self) -> GoalEmbedding<S> {
        GoalEmbedding {
            g: self.g.cast(),
            provenance: self.provenance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalMode {
    Train,
    Inference,
}

/// Reparameterized draw in training, the mean at inference.
pub fn sample_goal<R: Real>(dist: &GoalDistribution<R>, mode: GoalMode, noise: Option<&Tensor<R>>) -> Result<GoalEmbedding<R>> {
    match mode {
        GoalMode::Inference => Ok(GoalEmbedding {
            g: dist.mu.clone(),
            provenance: Provenance::Mean,
        }),
        GoalMode::Train => {
            let noise = noise.ok_or_else(|| Error::Invalid("train-mode goal sampling needs noise".into()))?;
            Ok(GoalEmbedding {
                g: reparameterize(&dist.mu, &dist.sigma, noise)?,
                provenance: Provenance::Sampled,
            })
        }
    }
}

/// Frame embedder, non-causal temporal transformer over frames plus
/// `slots` summary tokens, and the mu/sigma heads. The posterior and the
/// prior are two instances under different name prefixes.
#[derive(Clone, Debug)]
pub struct GoalEncoder {
    pub prefix: String,
    pub frame: FrameEmbedder,
    pub config: EncoderConfig,
    pub slots: usize,
    pub max_len: usize,
}

impl GoalEncoder {
    pub fn new(prefix: &str, config: &EncoderConfig, slots: usize, max_len: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            frame: FrameEmbedder::new(format!("{prefix}.frame"), config.hidden, config.pool_heads),
            config: config.clone(),
            slots,
            max_len,
        }
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        let d = self.config.hidden;
        self.frame.init(store, rng)?;
        store.insert_normal(self.name("temporal_pos"), &[self.max_len, d], 0.3, rng)?;
        store.insert_normal(self.name("summary"), &[self.slots, d], 1.0, rng)?;
        for l in 0..self.config.layers {
            layers::init_block(store, &self.name(&format!("block{l}")), d, self.config.ff_mult, rng)?;
        }
        layers::init_ln(store, &self.name("ln_f"), d)?;
        layers::init_linear(store, &self.name("mu"), d, d, 1.0, rng)?;
        layers::init_linear(store, &self.name("sigma"), d, d, 0.5, rng)?;
        Ok(())
    }

    pub fn embed_graph<R: Real>(&self, g: &mut Graph<'_, R>, frames: &[&FrameTensor]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::Invalid("no frames to embed".into()));
        }
        self.frame.embed(g, frames)
    }

    /// `emb` holds `batch` sequences of `len` frame embeddings back to back.
    /// Returns `(mu, sigma)`, each `[batch * slots, d]`.
    pub fn distribution_graph<R: Real>(&self, g: &mut Graph<'_, R>, emb: Var, batch: usize, len: usize) -> Result<(Var, Var)> {
        let d = self.config.hidden;
        if len == 0 || len > self.max_len {
            return shape_err("encoder length", &[len], &[self.max_len]);
        }
        if g.shape(emb) != [batch * len, d] {
            return shape_err("encoder input", g.shape(emb), &[batch * len, d]);
        }
        let n = self.slots;
        let pos = g.param(&self.name("temporal_pos"))?;
        let tile: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.gather_rows(pos, &tile)?;
        let x = g.add(emb, pos)?;
        let summary = g.param(&self.name("summary"))?;
        let all = g.concat_rows(&[x, summary])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| (0..len).map(move |t| b * len + t).chain((0..n).map(move |s| batch * len + s)))
            .collect();
        let mut h = g.gather_rows(all, &order)?;
        let width = len + n;
        for l in 0..self.config.layers {
            let spec = AttnSpec::full(batch, width, width, self.config.heads);
            h = layers::block(g, &self.name(&format!("block{l}")), h, spec)?;
        }
        let out_rows: Vec<usize> = (0..batch).flat_map(|b| (0..n).map(move |s| b * width + len + s)).collect();
        let c = g.gather_rows(h, &out_rows)?;
        let c = layers::ln(g, &self.name("ln_f"), c)?;
        let mu = layers::linear(g, &self.name("mu"), c)?;
        let raw = layers::linear(g, &self.name("sigma"), c)?;
        let sp = g.softplus(raw);
        let sigma = g.offset(sp, R::lit(self.config.sigma_floor));
        Ok((mu, sigma))
    }

    /// Per-frame embeddings `[n, d]`; no temporal mixing.
    pub fn embed_frames<R: Real>(&self, store: &ParamStore<R>, frames: &[&FrameTensor]) -> Result<Tensor<R>> {
        let mut g = Graph::new(store);
        let v = self.embed_graph(&mut g, frames)?;
        Ok(g.value(v).clone())
    }

    /// Distribution over any length in `1..=max_len`.
    pub fn encode<R: Real>(&self, store: &ParamStore<R>, frames: &[&FrameTensor]) -> Result<GoalDistribution<R>> {
        if frames.is_empty() || frames.len() > self.max_len {
            return shape_err("encoder length", &[frames.len()], &[self.max_len]);
        }
        let mut g = Graph::new(store);
        let emb = self.embed_graph(&mut g, frames)?;
        let (mu, sigma) = self.distribution_graph(&mut g, emb, 1, frames.len())?;
        Ok(GoalDistribution {
            mu: g.value(mu).clone(),
            sigma: g.value(sigma).clone(),
        })
    }

    /// Posterior over a full chunk: the length must equal `max_len`.
    pub fn encode_posterior<R: Real>(&self, store: &ParamStore<R>, frames: &[&FrameTensor]) -> Result<GoalDistribution<R>> {
        if frames.len() != self.max_len {
            return shape_err("posterior length", &[frames.len()], &[self.max_len]);
        }
        self.encode(store, frames)
    }

    /// Prior over a prefix of length `1..=max_len`.
    pub fn encode_prior<R: Real>(&self, store: &ParamStore<R>, prefix: &[&FrameTensor]) -> Result<GoalDistribution<R>> {
        if prefix.is_empty() {
            return Err(Error::Invalid("empty prefix".into()));
        }
        self.encode(store, prefix)
    }
}
