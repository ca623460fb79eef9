//! Reference-video goals, guided sampling, closed-loop rollouts and skill chains.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::GoalEmbedding;
use crate::env::{generate_world, render, Action, EnvConfig, Event, FrameTensor, Resource, WorldState};
use crate::error::{Error, Result};
use crate::policy::ActionLogits;
use crate::seeds;
use crate::train::Checkpoint;

/// `inference` section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub temperature: f64,
    pub greedy: bool,
    pub guidance: bool,
    pub guidance_lambda: f64,
    pub steps: usize,
    /// Length of the free-roam clip behind the guidance bias goal.
    pub bias_len: usize,
    pub bias_seed: u64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            greedy: false,
            guidance: false,
            guidance_lambda: 1.5,
            steps: 200,
            bias_len: 128,
            bias_seed: 977,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !self.guidance_lambda.is_finite() || self.bias_len == 0 {
            return Err(Error::Config("guidance_lambda must be finite and bias_len positive".into()));
        }
        Ok(())
    }

    pub fn sampling(&self) -> Sampling {
        if self.greedy {
            Sampling::Greedy
        } else {
            Sampling::Temperature(self.temperature)
        }
    }
}

/// Brings a clip to exactly `t` frames: longer clips are subsampled at
/// indices `floor(i * len / t)`, shorter ones padded with their last frame.
pub fn resample_video(video: &[FrameTensor], t: usize) -> Result<Vec<FrameTensor>> {
    if video.is_empty() || t == 0 {
        return Err(Error::Invalid("empty reference video".into()));
    }
    let n = video.len();
    if n >= t {
        return Ok((0..t).map(|i| video[i * n / t].clone()).collect());
    }
    log::warn!("reference of {n} frames padded to {t}");
    let mut out = video.to_vec();
    out.resize(t, video[n - 1].clone());
    Ok(out)
}

/// Mean-mode goal of a reference clip under the checkpoint's posterior.
pub fn encode_reference(video: &[FrameTensor], checkpoint: &Checkpoint) -> Result<GoalEmbedding<f32>> {
    let model = checkpoint.model();
    let clip = resample_video(video, model.chunk_len())?;
    let refs: Vec<&FrameTensor> = clip.iter().collect();
    let dist = model.posterior.encode_posterior(&checkpoint.params, &refs)?;
    crate::encoder::sample_goal(&dist, crate::encoder::GoalMode::Inference, None)
}

/// Every other frame of `v1` followed by every other frame of `v2`.
pub fn concat_videos(v1: &[FrameTensor], v2: &[FrameTensor], t: usize) -> Result<Vec<FrameTensor>> {
    if v1.len() != t || v2.len() != t {
        return Err(Error::Invalid(format!(
            "concatenation needs two clips of length {t}, got {} and {}",
            v1.len(),
            v2.len()
        )));
    }
    let half = |v: &[FrameTensor]| v.iter().step_by(2).cloned().collect::<Vec<_>>();
    let mut out = half(v1);
    let mut second = half(v2);
    // Odd lengths: keep the total at t.
    second.truncate(t - out.len());
    out.extend(second);
    Ok(out)
}

/// `(1 + lambda) * goal - lambda * bias`, head by head.
pub fn guided_logits(goal: &ActionLogits, bias: &ActionLogits, lambda: f64) -> ActionLogits {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        if lambda == 0.0 {
            return a.to_vec();
        }
        a.iter().zip(b).map(|(&x, &y)| if x == y { x } else { (1.0 + lambda) * x - lambda * y }).collect()
    };
    ActionLogits {
        move_logits: mix(&goal.move_logits, &bias.move_logits),
        turn_logits: mix(&goal.turn_logits, &bias.turn_logits),
    }
}

fn categorical(logits: &[f64], temperature: f64, u: f64) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi / total;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

/// Independent categorical draws per head from `softmax(logits / temperature)`.
pub fn sample_action(logits: &ActionLogits, temperature: f64, rng: &mut impl Rng) -> Result<Action> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!("temperature {temperature} must be positive")));
    }
    let mv = categorical(&logits.move_logits, temperature, rng.random());
    let turn = categorical(&logits.turn_logits, temperature, rng.random());
    Action::from_indices(mv, turn)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

impl Sampling {
    pub fn pick(self, logits: &ActionLogits, rng: &mut impl Rng) -> Result<Action> {
        match self {
            Sampling::Greedy => Ok(logits.greedy()),
            Sampling::Temperature(t) => sample_action(logits, t, rng),
        }
    }
}

/// Bias goal and condition scale for guided sampling.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub bias: GoalEmbedding<f32>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Action,
    pub events: Vec<Event>,
}

/// Everything needed to replay and judge an episode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub noise_seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_inventory: BTreeMap<String, u32>,
    /// Tick at which each stage after the first became active.
    pub switch_ticks: Vec<u64>,
    pub total_steps: usize,
}

impl EpisodeLog {
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.steps.iter().flat_map(|s| s.events.iter())
    }

    pub fn count_event(&self, tag: &str) -> usize {
        self.events().filter(|e| e.tag == tag).count()
    }

    pub fn first_event(&self, tag: &str) -> Option<u32> {
        self.events().find(|e| e.tag == tag).map(|e| e.tick)
    }

    pub fn last_event(&self, tag: &str) -> Option<u32> {
        self.events().filter(|e| e.tag == tag).map(|e| e.tick).last()
    }

    pub fn inventory(&self, r: Resource) -> u32 {
        self.final_inventory.get(r.name()).copied().unwrap_or(0)
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Re-runs the recorded actions from the seed and checks every event.
    pub fn verify_replay(&self, env: &EnvConfig) -> Result<()> {
        let mut state = generate_world(self.seed, env)?;
        for (t, step) in self.steps.iter().enumerate() {
            if state.apply(step.action) != step.events {
                return Err(Error::Invalid(format!("replay diverges at step {t}")));
            }
        }
        if inventory_map(&state) != self.final_inventory {
            return Err(Error::Invalid("replay ends with a different inventory".into()));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn inventory_map(state: &WorldState) -> BTreeMap<String, u32> {
    state.inventory.iter().map(|(r, n)| (r.name().to_string(), n)).collect()
}

/// Runs an arbitrary controller and logs the episode.
pub fn run_controller(
    env_seed: u64,
    env: &EnvConfig,
    steps: usize,
    mut act: impl FnMut(&WorldState) -> Result<Action>,
) -> Result<EpisodeLog> {
    if steps == 0 {
        return Err(Error::Invalid("step budget is 0".into()));
    }
    let mut state = generate_world(env_seed, env)?;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let action = act(&state)?;
        let events = state.apply(action);
        records.push(StepRecord { action, events });
    }
    Ok(EpisodeLog {
        seed: env_seed,
        noise_seed: 0,
        total_steps: records.len(),
        steps: records,
        final_inventory: inventory_map(&state),
        switch_ticks: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
}

impl Comparison {
    const TOKENS: [(&'static str, Comparison); 5] = [
        (">=", Comparison::Ge),
        ("<=", Comparison::Le),
        ("==", Comparison::Eq),
        (">", Comparison::Gt),
        ("<", Comparison::Lt),
    ];

    fn holds(self, lhs: u64, rhs: u64) -> bool {
        match self {
            Comparison::Ge => lhs >= rhs,
            Comparison::Gt => lhs > rhs,
            Comparison::Eq => lhs == rhs,
            Comparison::Le => lhs <= rhs,
            Comparison::Lt => lhs < rhs,
        }
    }

    fn token(self) -> &'static str {
        Self::TOKENS.iter().find(|(_, c)| *c == self).expect("listed").0
    }
}

/// What a switch predicate measures.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Quantity {
    Inventory(Resource),
    /// Occurrences of an event since the stage began.
    Event(String),
    /// Steps spent in the stage.
    StageSteps,
}

/// Stage switch condition, written like `inventory.wood >= 3`,
/// `event.kill:animal >= 1`, `stage_steps >= 50` or `never`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Predicate {
    Never,
    Compare { quantity: Quantity, op: Comparison, value: u64 },
}

impl FromStr for Predicate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "never" {
            return Ok(Predicate::Never);
        }
        let bad = |why: &str| Error::Config(format!("malformed predicate {s:?}: {why}"));
        let (lhs, op, rhs) = Comparison::TOKENS
            .iter()
            .find_map(|(tok, op)| s.split_once(tok).map(|(l, r)| (l.trim(), *op, r.trim())))
            .ok_or_else(|| bad("no comparison operator"))?;
        let value: u64 = rhs.parse().map_err(|_| bad("right side must be a nonnegative integer"))?;
        let quantity = if lhs == "stage_steps" {
            Quantity::StageSteps
        } else if let Some(r) = lhs.strip_prefix("inventory.") {
            Quantity::Inventory(Resource::parse(r).ok_or_else(|| bad("unknown resource"))?)
        } else if let Some(tag) = lhs.strip_prefix("event.") {
            if !crate::env::EVENT_TAGS.contains(&tag) {
                return Err(bad("unknown event tag"));
            }
            Quantity::Event(tag.to_string())
        } else {
            return Err(bad("unknown field"));
        };
        Ok(Predicate::Compare { quantity, op, value })
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Never => f.write_str("never"),
            Predicate::Compare { quantity, op, value } => {
                match quantity {
                    Quantity::Inventory(r) => write!(f, "inventory.{}", r.name())?,
                    Quantity::Event(tag) => write!(f, "event.{tag}")?,
                    Quantity::StageSteps => f.write_str("stage_steps")?,
                }
                write!(f, " {} {value}", op.token())
            }
        }
    }
}

impl Predicate {
    fn holds(&self, state: &WorldState, stage_events: &[Event], stage_steps: usize) -> bool {
        match self {
            Predicate::Never => false,
            Predicate::Compare { quantity, op, value } => {
                let lhs = match quantity {
                    Quantity::Inventory(r) => state.inventory.count(*r) as u64,
                    Quantity::Event(tag) => stage_events.iter().filter(|e| &e.tag == tag).count() as u64,
                    Quantity::StageSteps => stage_steps as u64,
                };
                op.holds(lhs, *value)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum StageGoal {
    Embedding(GoalEmbedding<f32>),
    Video(Vec<FrameTensor>),
}

#[derive(Clone, Debug)]
pub struct ChainStage {
    pub goal: StageGoal,
    pub switch: Predicate,
    pub max_steps: usize,
}

/// Ordered goal stages. A stage ends when its predicate holds or after
/// `max_steps`; the episode ends with the last stage.
#[derive(Clone, Debug)]
pub struct ChainSpec {
    pub stages: Vec<ChainStage>,
}

impl ChainSpec {
    /// Builds a chain from `(goal, predicate text, max_steps)` triples,
    /// rejecting malformed predicates before anything runs.
    pub fn parse(stages: Vec<(StageGoal, &str, usize)>) -> Result<Self> {
        let stages = stages
            .into_iter()
            .map(|(goal, pred, max_steps)| {
                Ok(ChainStage {
                    goal,
                    switch: pred.parse()?,
                    max_steps,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ChainSpec { stages };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("chain needs at least one stage".into()));
        }
        if self.stages.iter().any(|s| s.max_steps == 0) {
            return Err(Error::Config("stage max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Options shared by rollouts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub sampling: Sampling,
    pub noise_seed: u64,
}

/// Closed-loop episode toward one goal.
pub fn rollout(
    env_seed: u64,
    env: &EnvConfig,
    goal: &GoalEmbedding<f32>,
    checkpoint: &Checkpoint,
    steps: usize,
    guidance: Option<&Guidance>,
    options: RolloutOptions,
) -> Result<EpisodeLog> {
    if steps == 0 {
        return Err(Error::Invalid("step budget is 0".into()));
    }
    let chain = ChainSpec {
        stages: vec![ChainStage {
            goal: StageGoal::Embedding(goal.clone()),
            switch: Predicate::Never,
            max_steps: steps,
        }],
    };
    chain_rollout(env_seed, env, &chain, checkpoint, guidance, options)
}

/// Closed-loop episode that switches goals as each stage's predicate fires.
///
/// Each guided stream keeps its own recurrence memory; both memories are
/// cleared when a new stage begins.
pub fn chain_rollout(
    env_seed: u64,
    env: &EnvConfig,
    chain: &ChainSpec,
    checkpoint: &Checkpoint,
    guidance: Option<&Guidance>,
    options: RolloutOptions,
) -> Result<EpisodeLog> {
    chain.validate()?;
    let model = checkpoint.model();
    let store = &checkpoint.params;
    let goals = chain
        .stages
        .iter()
        .map(|s| match &s.goal {
            StageGoal::Embedding(g) => Ok(g.clone()),
            StageGoal::Video(v) => encode_reference(v, checkpoint),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seeds::rng(options.noise_seed, &[0x726f_6c6c]);
    let mut state = generate_world(env_seed, env)?;
    let mut records = Vec::new();
    let mut switch_ticks = Vec::new();
    let mut prev = Action::START;
    for (k, stage) in chain.stages.iter().enumerate() {
        if k > 0 {
            switch_ticks.push(state.tick);
        }
        let mut memory = model.policy.new_memory::<f32>();
        let mut bias_memory = model.policy.new_memory::<f32>();
        let mut stage_events: Vec<Event> = Vec::new();
        for t in 0..stage.max_steps {
            let frame = render(&state);
            let emb = model.posterior.embed_frames(store, &[&frame])?;
            let logits = model.policy.policy_step(store, emb.data(), prev, &goals[k].g, &mut memory)?;
            let logits = match guidance {
                Some(gd) => {
                    let bias = model.policy.policy_step(store, emb.data(), prev, &gd.bias.g, &mut bias_memory)?;
                    guided_logits(&logits, &bias, gd.lambda)
                }
                None => logits,
            };
            if !logits.is_finite() {
                return Err(Error::NonFinite(format!("policy logits at tick {}", state.tick)));
            }
            let action = options.sampling.pick(&logits, &mut rng)?;
            let events = state.apply(action);
            stage_events.extend(events.iter().cloned());
            records.push(StepRecord { action, events });
            prev = action;
            if stage.switch.holds(&state, &stage_events, t + 1) {
                break;
            }
        }
    }
    Ok(EpisodeLog {
        seed: env_seed,
        noise_seed: options.noise_seed,
        total_steps: records.len(),
        steps: records,
        final_inventory: inventory_map(&state),
        switch_ticks,
    })
}

/// Guidance bias from a free-roam clip of the configured length.
pub fn free_roam_guidance(checkpoint: &Checkpoint, env: &EnvConfig, config: &InferenceConfig) -> Result<Guidance> {
    let clip = crate::env::random_walk_episode(config.bias_seed, config.bias_len, env)?;
    Ok(Guidance {
        bias: encode_reference(&clip.frames, checkpoint)?,
        lambda: config.guidance_lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::env::Move;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(n: usize, offset: usize) -> Vec<FrameTensor> {
        (0..n)
            .map(|i| {
                let mut f = FrameTensor::zeros();
                f.values[0] = (i + offset) as f32;
                f
            })
            .collect()
    }

    fn tiny_checkpoint() -> Checkpoint {
        let mut cfg = RunConfig::default();
        cfg.encoder.hidden = 16;
        cfg.encoder.layers = 1;
        cfg.encoder.heads = 2;
        cfg.encoder.pool_heads = 2;
        cfg.train.chunk_len = 8;
        cfg.policy.memory = 8;
        Checkpoint::untrained(&cfg).unwrap()
    }

    #[test]
    fn guidance_identities() {
        let goal = ActionLogits {
            move_logits: vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            turn_logits: vec![0.3, -1.0, 4.0],
        };
        let bias = ActionLogits {
            move_logits: vec![1.0; 6],
            turn_logits: vec![0.0, 0.0, 0.0],
        };
        assert_eq!(guided_logits(&goal, &bias, 0.0), goal);
        for lambda in [0.5, 1.5, 7.0] {
            assert_eq!(guided_logits(&goal, &goal, lambda), goal);
        }
        let out = guided_logits(&goal, &bias, 1.5);
        assert_eq!(&out.move_logits[..2], &[3.5, -1.5]);
    }

    #[test]
    fn uniform_shift_keeps_argmax() {
        let goal = ActionLogits {
            move_logits: vec![0.1, 0.9, -0.2, 0.4, 0.0, 0.3],
            turn_logits: vec![1.0, 2.0, 0.5],
        };
        let bias = ActionLogits {
            move_logits: goal.move_logits.iter().map(|x| x - 2.5).collect(),
            turn_logits: goal.turn_logits.iter().map(|x| x + 1.0).collect(),
        };
        for lambda in [0.0, 0.5, 1.5, 10.0] {
            assert_eq!(guided_logits(&goal, &bias, lambda).greedy(), goal.greedy());
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        // Nine bins at 3 sigma each: a few percent of seeds fail by chance.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let mut mv = [0usize; 6];
        let mut tn = [0usize; 3];
        for _ in 0..n {
            let a = sample_action(&ActionLogits::uniform(), 1.0, &mut rng).unwrap();
            mv[a.move_index()] += 1;
            tn[a.turn_index()] += 1;
        }
        let check = |count: usize, p: f64| {
            let f = count as f64 / n as f64;
            assert!((f - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{f} vs {p}");
        };
        mv.iter().for_each(|&c| check(c, 1.0 / 6.0));
        tn.iter().for_each(|&c| check(c, 1.0 / 3.0));
    }

    #[test]
    fn sampling_rejects_bad_temperature_and_is_seeded() {
        let l = ActionLogits::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_action(&l, 0.0, &mut rng).is_err());
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_action(&l, 1.0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        let peaked = ActionLogits {
            move_logits: vec![0.0, 0.0, 5.0, 0.0, 0.0, 0.0],
            turn_logits: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(sample_action(&peaked, 1e-4, &mut rng).unwrap(), peaked.greedy());
        assert_eq!(peaked.greedy().mv, Move::Back);
    }

    #[test]
    fn resampling_and_concatenation() {
        let v = frames(16, 0);
        let sub: Vec<FrameTensor> = v.iter().step_by(2).cloned().collect();
        assert_eq!(resample_video(&v, 8).unwrap(), sub);
        let short = resample_video(&frames(3, 0), 8).unwrap();
        assert_eq!(short.len(), 8);
        assert_eq!(short[7], short[2]);
        let a = frames(8, 0);
        let c = concat_videos(&a, &a, 8).unwrap();
        assert_eq!(c.len(), 8);
        let half: Vec<FrameTensor> = a.iter().step_by(2).cloned().collect();
        assert_eq!(&c[..4], &half[..]);
        assert_eq!(&c[4..], &half[..]);
        assert!(concat_videos(&a, &frames(7, 0), 8).is_err());
    }

    #[test]
    fn reference_encoding_follows_resampling() {
        let ck = tiny_checkpoint();
        let env = EnvConfig::default();
        let clip = crate::env::random_walk_episode(4, 16, &env).unwrap();
        let long = encode_reference(&clip.frames, &ck).unwrap();
        let sub: Vec<FrameTensor> = clip.frames.iter().step_by(2).cloned().collect();
        assert_eq!(long.g, encode_reference(&sub, &ck).unwrap().g);
        assert_eq!(long.g, encode_reference(&clip.frames, &ck).unwrap().g);
    }

    #[test]
    fn predicates_parse_and_round_trip() {
        for text in ["inventory.wood >= 3", "event.kill:animal > 0", "stage_steps == 10", "never"] {
            let p: Predicate = text.parse().unwrap();
            assert_eq!(p.to_string(), text);
        }
        for bad in ["inventory.gold >= 1", "depth >= 3", "inventory.wood ~ 2", "event.fly >= 1", "inventory.wood >= -1"] {
            assert!(matches!(bad.parse::<Predicate>(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn single_stage_chain_equals_rollout_and_replays() {
        let ck = tiny_checkpoint();
        let env = EnvConfig::default();
        let goal = encode_reference(&crate::env::random_walk_episode(1, 8, &env).unwrap().frames, &ck).unwrap();
        let opts = RolloutOptions {
            sampling: Sampling::Temperature(1.0),
            noise_seed: 9,
        };
        let a = rollout(3, &env, &goal, &ck, 30, None, opts).unwrap();
        let chain = ChainSpec::parse(vec![(StageGoal::Embedding(goal.clone()), "never", 30)]).unwrap();
        let b = chain_rollout(3, &env, &chain, &ck, None, opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_steps, 30);
        a.verify_replay(&env).unwrap();
        assert!(rollout(3, &env, &goal, &ck, 0, None, opts).is_err());
    }

    #[test]
    fn unsatisfied_predicate_switches_at_max_steps() {
        let ck = tiny_checkpoint();
        let env = EnvConfig::default();
        let goal = encode_reference(&frames(8, 0), &ck).unwrap();
        let chain = ChainSpec::parse(vec![
            (StageGoal::Embedding(goal.clone()), "inventory.wood >= 1000", 12),
            (StageGoal::Embedding(goal), "never", 5),
        ])
        .unwrap();
        let opts = RolloutOptions {
            sampling: Sampling::Greedy,
            noise_seed: 0,
        };
        let log = chain_rollout(2, &env, &chain, &ck, None, opts).unwrap();
        assert_eq!(log.switch_ticks, vec![12]);
        assert_eq!(log.total_steps, 17);
        assert!(ChainSpec::parse(vec![]).is_err());
    }

    #[test]
    fn untrained_policy_ignores_goal_and_guidance() {
        let ck = tiny_checkpoint();
        let env = EnvConfig::default();
        let g1 = encode_reference(&crate::env::random_walk_episode(1, 8, &env).unwrap().frames, &ck).unwrap();
        let g2 = encode_reference(&frames(8, 3), &ck).unwrap();
        let opts = RolloutOptions {
            sampling: Sampling::Temperature(1.0),
            noise_seed: 4,
        };
        let a = rollout(5, &env, &g1, &ck, 25, None, opts).unwrap();
        let b = rollout(5, &env, &g2, &ck, 25, None, opts).unwrap();
        assert_eq!(a, b);
        let guided = Guidance { bias: g2, lambda: 1.5 };
        let c = rollout(5, &env, &g1, &ck, 25, Some(&guided), opts).unwrap();
        assert_eq!(a, c);
    }
}
