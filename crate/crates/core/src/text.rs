//! Token-embedding text encoder into the goal space.

use rand::Rng;

use crate::encoder::{GoalEmbedding, Provenance};
use crate::env::EVENT_TAGS;
use crate::error::{Error, Result};
use crate::layers;
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

/// Splits an event tag such as `mine_block:tree` into `["mine", "block", "tree"]`.
pub fn tokenize_tag(tag: &str) -> Vec<String> {
    tag.split([':', '_', ' ']).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

/// The closed vocabulary: every token of every event tag, sorted.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = EVENT_TAGS.iter().flat_map(|t| tokenize_tag(t)).collect();
    v.sort();
    v.dedup();
    v
}

/// Mean-pooled token embeddings followed by a linear map to `slots x d`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: Vec<String>,
    pub hidden: usize,
    pub slots: usize,
}

impl TextEncoder {
    pub const PREFIX: &'static str = "text.";

    pub fn new(hidden: usize, slots: usize) -> Self {
        Self {
            vocab: vocabulary(),
            hidden,
            slots,
        }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        store.insert_normal("text.emb", &[self.vocab.len(), self.hidden], 1.0, rng)?;
        layers::init_linear(store, "text.proj", self.hidden, self.hidden * self.slots, 1.0, rng)?;
        Ok(())
    }

    pub fn token_ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty text".into()));
        }
        tokens
            .iter()
            .map(|t| {
                self.vocab
                    .binary_search(t)
                    .map_err(|_| Error::Invalid(format!("unknown token {t:?}")))
            })
            .collect()
    }

    /// Goals for a batch of texts, `[batch * slots, d]`.
    pub fn goal_graph<R: Real>(&self, g: &mut Graph<'_, R>, texts: &[Vec<String>]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pool = Vec::new();
        for (b, text) in texts.iter().enumerate() {
            let t = self.token_ids(text)?;
            let start = ids.len();
            ids.extend(t);
            pool.push((b, start, ids.len()));
        }
        let mut weights = vec![R::zero(); texts.len() * ids.len()];
        for (b, s, e) in pool {
            let w = R::lit(1.0 / (e - s) as f64);
            weights[b * ids.len() + s..b * ids.len() + e].fill(w);
        }
        let table = g.param("text.emb")?;
        let emb = g.embedding(table, &ids)?;
        let pool = g.constant(Tensor::new(&[texts.len(), ids.len()], weights)?);
        let pooled = g.matmul(pool, emb)?;
        let out = layers::linear(g, "text.proj", pooled)?;
        g.reshape(out, &[texts.len() * self.slots, self.hidden])
    }

    pub fn encode<R: Real>(&self, store: &ParamStore<R>, tokens: &[String]) -> Result<GoalEmbedding<R>> {
        let mut g = Graph::new(store);
        let v = self.goal_graph(&mut g, &[tokens.to_vec()])?;
        Ok(GoalEmbedding {
            g: g.value(v).clone(),
            provenance: Provenance::Text,
        })
    }
}
