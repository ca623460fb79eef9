//! Goal-conditioned causal policy with gated cross-attention and
//! recurrence memory for incremental inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Move, Turn};
use crate::error::{shape_err, Error, Result};
use crate::layers;
use crate::numerics::{log_sum_exp, AttnSpec, Graph, ParamStore, Real, Tensor, Var};

/// `policy` section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub blocks: usize,
    /// Recurrence memory length in timesteps.
    pub memory: usize,
    pub ff_mult: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            memory: 64,
            ff_mult: 2,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.memory == 0 || self.ff_mult == 0 {
            return Err(Error::Config("policy sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Unnormalized scores of the two action heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionLogits {
    pub move_logits: Vec<f64>,
    pub turn_logits: Vec<f64>,
}

impl ActionLogits {
    pub fn uniform() -> Self {
        Self {
            move_logits: vec![0.0; Move::COUNT],
            turn_logits: vec![0.0; Turn::COUNT],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.move_logits.iter().chain(&self.turn_logits).all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ActionLogits) -> f64 {
        self.move_logits
            .iter()
            .zip(&other.move_logits)
            .chain(self.turn_logits.iter().zip(&other.turn_logits))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Argmax per head; the lowest index wins ties.
    pub fn greedy(&self) -> Action {
        fn argmax(v: &[f64]) -> usize {
            let mut best = 0;
            for (i, &x) in v.iter().enumerate() {
                if x > v[best] {
                    best = i;
                }
            }
            best
        }
        Action::from_indices(argmax(&self.move_logits), argmax(&self.turn_logits)).expect("head sizes")
    }

    fn rows<R: Real>(move_t: &Tensor<R>, turn_t: &Tensor<R>) -> Vec<ActionLogits> {
        (0..move_t.rows())
            .map(|r| ActionLogits {
                move_logits: move_t.row(r).iter().map(|x| x.as_f64()).collect(),
                turn_logits: turn_t.row(r).iter().map(|x| x.as_f64()).collect(),
            })
            .collect()
    }
}

/// Negative log-likelihood of `action` under both heads.
pub fn action_nll(logits: &ActionLogits, action: Action) -> Result<f64> {
    let (m, t) = (action.move_index(), action.turn_index());
    if logits.move_logits.len() != Move::COUNT || logits.turn_logits.len() != Turn::COUNT {
        return shape_err(
            "action_nll",
            &[logits.move_logits.len(), logits.turn_logits.len()],
            &[Move::COUNT, Turn::COUNT],
        );
    }
    let nll = |v: &[f64], i: usize| log_sum_exp(v) - v[i];
    Ok(nll(&logits.move_logits, m) + nll(&logits.turn_logits, t))
}

/// Cached keys and values of the self-attention in every block.
#[derive(Clone, Debug)]
pub struct RecurrenceMemory<R> {
    keys: Vec<Vec<R>>,
    values: Vec<Vec<R>>,
    len: usize,
    capacity: usize,
    width: usize,
    ticks: usize,
}

impl<R: Real> RecurrenceMemory<R> {
    pub fn new(blocks: usize, capacity: usize, width: usize) -> Self {
        Self {
            keys: vec![Vec::new(); blocks],
            values: vec![Vec::new(); blocks],
            len: 0,
            capacity,
            width,
            ticks: 0,
        }
    }

    /// Timesteps currently cached.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Steps taken since the memory was created.
    pub fn ticks(&self) -> usize {
        self.ticks
    }

    fn push(&mut self, block: usize, k: &[R], v: &[R]) {
        self.keys[block].extend_from_slice(k);
        self.values[block].extend_from_slice(v);
    }

    fn finish_step(&mut self) {
        self.ticks += 1;
        self.len += 1;
        if self.len > self.capacity {
            let drop = (self.len - self.capacity) * self.width;
            for b in 0..self.keys.len() {
                self.keys[b].drain(..drop);
                self.values[b].drain(..drop);
            }
            self.len = self.capacity;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub hidden: usize,
}

impl Policy {
    pub const PREFIX: &'static str = "pol";

    pub fn new(config: &PolicyConfig, hidden: usize) -> Self {
        Self {
            config: config.clone(),
            hidden,
        }
    }

    fn name(s: &str) -> String {
        format!("{}.{s}", Self::PREFIX)
    }

    /// Name of block `l`'s cross-attention gate.
    pub fn gate_name(l: usize) -> String {
        Self::name(&format!("b{l}.gate"))
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        let d = self.hidden;
        store.insert_normal(Self::name("move_emb"), &[Move::COUNT, d], 0.5, rng)?;
        store.insert_normal(Self::name("turn_emb"), &[Turn::COUNT, d], 0.5, rng)?;
        for l in 0..self.config.blocks {
            let p = Self::name(&format!("b{l}"));
            layers::init_ln(store, &format!("{p}.xln"), d)?;
            for w in ["xq", "xk", "xv"] {
                layers::init_proj(store, &format!("{p}.{w}"), d, 1.0, rng)?;
            }
            layers::init_proj(store, &format!("{p}.xo"), d, 1.0, rng)?;
            store.insert_const(Self::gate_name(l), &[1], 0.0)?;
            layers::init_block(store, &p, d, self.config.ff_mult, rng)?;
        }
        layers::init_ln(store, &Self::name("ln_f"), d)?;
        layers::init_linear(store, &Self::name("move"), d, Move::COUNT, 0.5, rng)?;
        layers::init_linear(store, &Self::name("turn"), d, Turn::COUNT, 0.5, rng)?;
        Ok(())
    }

    fn inject_actions<R: Real>(&self, g: &mut Graph<'_, R>, x: Var, prev: &[Action]) -> Result<Var> {
        let me = g.param(&Self::name("move_emb"))?;
        let te = g.param(&Self::name("turn_emb"))?;
        let mi: Vec<usize> = prev.iter().map(|a| a.move_index()).collect();
        let ti: Vec<usize> = prev.iter().map(|a| a.turn_index()).collect();
        let m = g.embedding(me, &mi)?;
        let t = g.embedding(te, &ti)?;
        let x = g.add(x, m)?;
        g.add(x, t)
    }

    /// `x + tanh(gate) * CrossAttn(q = x, kv = goal)`.
    fn gated_xattn<R: Real>(&self, g: &mut Graph<'_, R>, l: usize, x: Var, goal: Var, spec: AttnSpec) -> Result<Var> {
        let p = Self::name(&format!("b{l}"));
        let h = layers::ln(g, &format!("{p}.xln"), x)?;
        let q = layers::proj(g, &format!("{p}.xq"), h)?;
        let k = layers::proj(g, &format!("{p}.xk"), goal)?;
        let v = layers::proj(g, &format!("{p}.xv"), goal)?;
        let a = g.attention(q, k, v, spec)?;
        let a = layers::proj(g, &format!("{p}.xo"), a)?;
        let gate = g.param(&Self::gate_name(l))?;
        let gate = g.tanh(gate);
        let a = g.scalar_mul(gate, a)?;
        g.add(x, a)
    }

    fn heads<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<(Var, Var)> {
        let h = layers::ln(g, &Self::name("ln_f"), x)?;
        let m = layers::linear(g, &Self::name("move"), h)?;
        let t = layers::linear(g, &Self::name("turn"), h)?;
        Ok((m, t))
    }

    /// Training-time forward over `batch` sequences of `len` steps.
    ///
    /// `frames` is `[batch * len, d]`, `prev` holds the previous action of
    /// every position and `goal` is `[batch * slots, d]`. Returns move and
    /// turn logits, `[batch * len, 6]` and `[batch * len, 3]`.
    pub fn sequence_graph<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        frames: Var,
        prev: &[Action],
        goal: Var,
        batch: usize,
        len: usize,
    ) -> Result<(Var, Var)> {
        let d = self.hidden;
        if g.shape(frames) != [batch * len, d] {
            return shape_err("policy frames", g.shape(frames), &[batch * len, d]);
        }
        if prev.len() != batch * len {
            return shape_err("policy prev_actions", &[prev.len()], &[batch * len]);
        }
        let slots = g.shape(goal)[0] / batch.max(1);
        if g.shape(goal) != [batch * slots, d] || slots == 0 {
            return shape_err("policy goal", g.shape(goal), &[batch, d]);
        }
        let mut x = self.inject_actions(g, frames, prev)?;
        for l in 0..self.config.blocks {
            x = self.gated_xattn(g, l, x, goal, AttnSpec::full(batch, len, slots, 1))?;
            x = layers::block(g, &Self::name(&format!("b{l}")), x, AttnSpec::causal(batch, len, len, 1))?;
        }
        self.heads(g, x)
    }

    /// Logits for every position of one sequence.
    pub fn policy_sequence<R: Real>(
        &self,
        store: &ParamStore<R>,
        frame_embeddings: &Tensor<R>,
        prev_actions: &[Action],
        goal: &Tensor<R>,
    ) -> Result<Vec<ActionLogits>> {
        let len = frame_embeddings.rows();
        if prev_actions.len() != len {
            return shape_err("policy prev_actions", &[prev_actions.len()], &[len]);
        }
        let mut g = Graph::new(store);
        let f = g.constant(frame_embeddings.clone());
        let gv = g.constant(goal.clone());
        let (m, t) = self.sequence_graph(&mut g, f, prev_actions, gv, 1, len)?;
        Ok(ActionLogits::rows(g.value(m), g.value(t)))
    }

    pub fn new_memory<R: Real>(&self) -> RecurrenceMemory<R> {
        RecurrenceMemory::new(self.config.blocks, self.config.memory, self.hidden)
    }

    /// One incremental step; attends over the cached memory plus the
    /// current position and appends to the memory.
    pub fn policy_step<R: Real>(
        &self,
        store: &ParamStore<R>,
        frame_embedding: &[R],
        prev_action: Action,
        goal: &Tensor<R>,
        memory: &mut RecurrenceMemory<R>,
    ) -> Result<ActionLogits> {
        let d = self.hidden;
        if frame_embedding.len() != d {
            return shape_err("policy_step frame", &[frame_embedding.len()], &[d]);
        }
        if memory.keys.len() != self.config.blocks || memory.width != d {
            return shape_err("policy_step memory", &[memory.keys.len(), memory.width], &[self.config.blocks, d]);
        }
        if goal.cols() != d {
            return shape_err("policy_step goal", goal.shape(), &[goal.rows(), d]);
        }
        let mut g = Graph::new(store);
        let x = g.constant(Tensor::new(&[1, d], frame_embedding.to_vec())?);
        let gv = g.constant(goal.clone());
        let mut x = self.inject_actions(&mut g, x, &[prev_action])?;
        let past = memory.len;
        for l in 0..self.config.blocks {
            let p = Self::name(&format!("b{l}"));
            x = self.gated_xattn(&mut g, l, x, gv, AttnSpec::full(1, 1, goal.rows(), 1))?;
            let h = layers::ln(&mut g, &format!("{p}.ln1"), x)?;
            let q = layers::proj(&mut g, &format!("{p}.wq"), h)?;
            let k = layers::proj(&mut g, &format!("{p}.wk"), h)?;
            let v = layers::proj(&mut g, &format!("{p}.wv"), h)?;
            let (kn, vn) = (g.value(k).data().to_vec(), g.value(v).data().to_vec());
            let (kall, vall) = if past == 0 {
                (k, v)
            } else {
                let km = g.constant(Tensor::new(&[past, d], memory.keys[l].clone())?);
                let vm = g.constant(Tensor::new(&[past, d], memory.values[l].clone())?);
                (g.concat_rows(&[km, k])?, g.concat_rows(&[vm, v])?)
            };
            let a = g.attention(q, kall, vall, AttnSpec::full(1, 1, past + 1, 1))?;
            let a = layers::proj(&mut g, &format!("{p}.wo"), a)?;
            x = g.add(x, a)?;
            x = layers::feed_forward(&mut g, &p, x)?;
            memory.push(l, &kn, &vn);
        }
        memory.finish_step();
        let (m, t) = self.heads(&mut g, x)?;
        let out = ActionLogits::rows(g.value(m), g.value(t)).remove(0);
        if !out.is_finite() {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(out)
    }
}
