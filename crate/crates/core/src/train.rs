//! Joint behaviour-cloning + prefix-prior KL training, and text alignment.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::AgentModel;
use crate::config::RunConfig;
use crate::env::{Action, FrameTensor, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};
use crate::optim::{clip_grad_norm, AdamW, Schedule};
use crate::policy::Policy;
use crate::seeds;
use crate::text::TextEncoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// One prefix length per step, uniform in `[T/4, 3T/4]`.
    Sampled,
    /// KL averaged over the prefixes `T/4`, `T/2` and `3T/4`.
    FixedSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextAlignConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TextAlignConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// `train` section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_bc: f64,
    pub lambda_kl: f64,
    pub chunk_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub seed: u64,
    pub tau_mode: TauMode,
    pub condition_slots: usize,
    pub precision: Precision,
    /// Baseline without goal conditioning: cross-attention gates stay at 0.
    pub unconditional: bool,
    pub text: TextAlignConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_bc: 1.0,
            lambda_kl: 0.01,
            chunk_len: 32,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 200,
            weight_decay: 0.01,
            grad_clip: 1.0,
            epochs: 30,
            seed: 0,
            tau_mode: TauMode::Sampled,
            condition_slots: 1,
            precision: Precision::F32,
            unconditional: false,
            text: TextAlignConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_bc >= 0.0 && self.lambda_kl >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.chunk_len < 4 && self.tau_mode == TauMode::FixedSet {
            return Err(Error::Config("fixed_set tau mode needs chunk_len >= 4".into()));
        }
        if self.chunk_len < 2 || self.batch_size == 0 || self.condition_slots == 0 {
            return Err(Error::Config("chunk_len >= 2, batch_size and condition_slots > 0 required".into()));
        }
        Ok(())
    }

    /// Prefix lengths for one optimization step.
    pub fn taus(&self, rng: &mut impl Rng) -> Vec<usize> {
        let t = self.chunk_len;
        let lo = (t / 4).max(1);
        let hi = (3 * t / 4).clamp(lo, t - 1);
        match self.tau_mode {
            TauMode::Sampled => vec![rng.random_range(lo..=hi)],
            TauMode::FixedSet => vec![lo, (t / 2).max(1), hi],
        }
    }
}

/// Central-difference step for checking the full loss: large enough that
/// roundoff in a long f64 forward pass stays well below the tolerance.
pub const LOSS_GRAD_CHECK_EPS: f64 = 1e-4;

/// A length-`T` training window with its shifted action inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub frames: Vec<FrameTensor>,
    pub actions: Vec<Action>,
    /// `START` at the head, then `actions[t - 1]`.
    pub prev_actions: Vec<Action>,
    pub source_seed: u64,
    pub start: usize,
    pub skill: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSet {
    pub chunks: Vec<Chunk>,
    /// Episodes shorter than `T`.
    pub skipped: usize,
}

/// Non-overlapping windows of length `t` (remainders dropped), shuffled by `seed`.
pub fn chunk_dataset(trajs: &[Trajectory], t: usize, seed: u64) -> Result<ChunkSet> {
    if t == 0 {
        return Err(Error::Invalid("chunk length must be positive".into()));
    }
    let mut chunks = Vec::new();
    let mut skipped = 0;
    for traj in trajs {
        let actions = traj
            .actions
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("trajectory (seed {}) has no actions", traj.seed)))?;
        if traj.len() < t {
            skipped += 1;
            continue;
        }
        for k in 0..traj.len() / t {
            let s = k * t;
            let acts = actions[s..s + t].to_vec();
            let mut prev = vec![Action::START];
            prev.extend_from_slice(&acts[..t - 1]);
            chunks.push(Chunk {
                frames: traj.frames[s..s + t].to_vec(),
                actions: acts,
                prev_actions: prev,
                source_seed: traj.seed,
                start: s,
                skill: traj.skill_label.clone(),
            });
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} episodes shorter than chunk length {t}");
    }
    chunks.shuffle(&mut seeds::rng(seed, &[0x6368_756e_6b]));
    Ok(ChunkSet { chunks, skipped })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bc: f64,
    pub kl: f64,
    pub nll_move: f64,
    pub nll_turn: f64,
}

/// Graph nodes of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub bc: Var,
    pub kl: Var,
    pub nll_move: Var,
    pub nll_turn: Var,
    pub sigma: Var,
}

impl LossVars {
    /// Mean posterior standard deviation in the batch.
    pub fn sigma_mean<R: Real>(&self, g: &Graph<'_, R>) -> f64 {
        let t = g.value(self.sigma);
        t.sum_f64() / t.len().max(1) as f64
    }

    pub fn read<R: Real>(&self, g: &Graph<'_, R>) -> LossBreakdown {
        let f = |v| g.scalar(v).as_f64();
        LossBreakdown {
            total: f(self.total),
            bc: f(self.bc),
            kl: f(self.kl),
            nll_move: f(self.nll_move),
            nll_turn: f(self.nll_turn),
        }
    }
}

/// Records the loss of a batch of equal-length chunks.
///
/// `noise` is `[batch * slots, d]`: one goal draw per chunk, reused at every
/// position. The KL is averaged over `taus`.
pub fn loss_graph<R: Real>(
    g: &mut Graph<'_, R>,
    model: &AgentModel,
    batch: &[&Chunk],
    config: &TrainConfig,
    noise: &Tensor<R>,
    taus: &[usize],
) -> Result<LossVars> {
    let b = batch.len();
    let t = model.chunk_len();
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if let Some(c) = batch.iter().find(|c| c.frames.len() != t) {
        return crate::error::shape_err("chunk length", &[c.frames.len()], &[t]);
    }
    if taus.is_empty() || taus.iter().any(|&tau| tau == 0 || tau >= t) {
        return Err(Error::Invalid(format!("tau {taus:?} outside 1..{t}")));
    }
    let frames: Vec<&FrameTensor> = batch.iter().flat_map(|c| c.frames.iter()).collect();
    let emb = model.posterior.embed_graph(g, &frames)?;
    let (mu_q, sigma_q) = model.posterior.distribution_graph(g, emb, b, t)?;
    let eps = g.constant(noise.clone());
    let spread = g.mul(sigma_q, eps)?;
    let goal = g.add(mu_q, spread)?;

    let prev: Vec<Action> = batch.iter().flat_map(|c| c.prev_actions.iter().copied()).collect();
    let (move_logits, turn_logits) = model.policy.sequence_graph(g, emb, &prev, goal, b, t)?;
    let mv: Vec<usize> = batch.iter().flat_map(|c| c.actions.iter().map(|a| a.move_index())).collect();
    let tn: Vec<usize> = batch.iter().flat_map(|c| c.actions.iter().map(|a| a.turn_index())).collect();
    let nll_move = g.cross_entropy(move_logits, &mv)?;
    let nll_turn = g.cross_entropy(turn_logits, &tn)?;
    let bc = g.add(nll_move, nll_turn)?;

    let longest = *taus.iter().max().expect("nonempty");
    let prefix: Vec<&FrameTensor> = batch.iter().flat_map(|c| c.frames[..longest].iter()).collect();
    let emb_p = model.prior.embed_graph(g, &prefix)?;
    let mut kl_sum: Option<Var> = None;
    for &tau in taus {
        let rows: Vec<usize> = (0..b).flat_map(|i| (0..tau).map(move |s| i * longest + s)).collect();
        let e = if tau == longest { emb_p } else { g.gather_rows(emb_p, &rows)? };
        let (mu_p, sigma_p) = model.prior.distribution_graph(g, e, b, tau)?;
        let kl = g.gaussian_kl(mu_q, sigma_q, mu_p, sigma_p)?;
        kl_sum = Some(match kl_sum {
            None => kl,
            Some(acc) => g.add(acc, kl)?,
        });
    }
    let kl = g.scale(kl_sum.expect("nonempty"), R::lit(1.0 / taus.len() as f64));
    let wbc = g.scale(bc, R::lit(config.lambda_bc));
    let wkl = g.scale(kl, R::lit(config.lambda_kl));
    let total = g.add(wbc, wkl)?;
    Ok(LossVars {
        total,
        bc,
        kl,
        nll_move,
        nll_turn,
        sigma: sigma_q,
    })
}

/// Forward-only loss of `batch` at a single prefix length `tau`.
pub fn compute_loss<R: Real>(
    model: &AgentModel,
    store: &ParamStore<R>,
    batch: &[&Chunk],
    config: &TrainConfig,
    noise: &Tensor<R>,
    tau: usize,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(store);
    let vars = loss_graph(&mut g, model, batch, config, noise, &[tau])?;
    Ok(vars.read(&g))
}

/// Standard-normal tensor of the given shape.
pub fn normal_noise<R: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<R> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| R::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub bc: f64,
    pub kl: f64,
    pub total: f64,
    pub nll_move: f64,
    pub nll_turn: f64,
    /// Mean posterior sigma over the epoch's batches.
    pub sigma_mean: f64,
    pub wall_time: f64,
}

/// Trained parameters with everything needed to resume or reproduce them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

impl Checkpoint {
    pub fn model(&self) -> AgentModel {
        self.config.agent_model()
    }

    /// Fresh, untrained parameters for `config`.
    pub fn untrained(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            step: 0,
            params: config.agent_model().init(config.train.seed)?,
            optimizer: None,
        })
    }

    pub fn has_text_encoder(&self) -> bool {
        self.params.lookup("text.emb").is_some()
    }

    pub fn text_encoder(&self) -> Option<TextEncoder> {
        self.has_text_encoder()
            .then(|| TextEncoder::new(self.config.encoder.hidden, self.config.train.condition_slots))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

fn gate_names(model: &AgentModel) -> Vec<String> {
    (0..model.policy.config.blocks).map(Policy::gate_name).collect()
}

/// Maximum relative error between the analytic and central-difference
/// gradients of the full loss, in f64 on two chunks of expert data.
/// Gates are opened to 0.7 so the goal path carries gradient.
pub fn loss_grad_check(config: &RunConfig, seed: u64) -> Result<f64> {
    config.validate()?;
    let t = config.train.chunk_len;
    let data = crate::env::generate_dataset(&crate::env::Skill::ALL[..2], 1, t, seed, &config.env)?;
    let set = chunk_dataset(&data, t, seed)?;
    let chunks: Vec<&Chunk> = set.chunks.iter().take(2).collect();
    if chunks.len() < 2 {
        return Err(Error::Invalid("grad check needs two chunks".into()));
    }
    let model = config.agent_model();
    let mut store: ParamStore<f64> = model.init(seed)?;
    for name in gate_names(&model) {
        store
            .get_mut(&name)
            .ok_or_else(|| Error::Invalid(format!("missing gate {name}")))?
            .data_mut()[0] = 0.7;
    }
    let mut rng = seeds::rng(seed, &[0x6763]);
    let noise = normal_noise::<f64>(&[2 * model.slots(), model.hidden()], &mut rng);
    let taus = vec![(t / 2).max(1)];
    crate::numerics::grad_check(
        |g| Ok(loss_graph(g, &model, &chunks, &config.train, &noise, &taus)?.total),
        &store,
        LOSS_GRAD_CHECK_EPS,
    )
}

/// Trains encoder, prior and policy jointly. Writes one JSON line per epoch
/// to `metrics` when given.
pub fn train_agent(dataset: &[Trajectory], config: &RunConfig, metrics: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    config.validate()?;
    match config.train.precision {
        Precision::F32 => train_impl::<f32>(dataset, config, metrics),
        Precision::F64 => train_impl::<f64>(dataset, config, metrics),
    }
}

fn train_impl<R: Real>(dataset: &[Trajectory], config: &RunConfig, mut metrics: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let tc = &config.train;
    let model = config.agent_model();
    let mut store: ParamStore<R> = model.init(tc.seed)?;
    let set = chunk_dataset(dataset, tc.chunk_len, tc.seed)?;
    if set.chunks.is_empty() {
        return Err(Error::Invalid("no training chunks".into()));
    }
    let mut chunks: Vec<&Chunk> = set.chunks.iter().collect();
    let mut rng: ChaCha8Rng = seeds::rng(tc.seed, &[0x7472_6169_6e]);
    let mut opt = AdamW::new(&store, tc.weight_decay);
    let schedule = Schedule {
        lr: tc.lr,
        warmup_steps: tc.warmup_steps,
    };
    let frozen = if tc.unconditional { gate_names(&model) } else { Vec::new() };
    let slots = model.slots();
    let d = model.hidden();
    let started = Instant::now();
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        chunks.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut sigma_sum = 0.0;
        let mut batches = 0usize;
        for batch in chunks.chunks(tc.batch_size) {
            let taus = tc.taus(&mut rng);
            let noise = normal_noise::<R>(&[batch.len() * slots, d], &mut rng);
            store.zero_grad();
            let grads = {
                let mut g = Graph::new(&store);
                for name in &frozen {
                    g.freeze_prefix(name.clone());
                }
                let vars = loss_graph(&mut g, &model, batch, tc, &noise, &taus)?;
                let l = vars.read(&g);
                if !l.total.is_finite() {
                    return Err(Error::Diverged {
                        step: opt.step as usize + 1,
                    });
                }
                sums.total += l.total;
                sums.bc += l.bc;
                sums.kl += l.kl;
                sums.nll_move += l.nll_move;
                sums.nll_turn += l.nll_turn;
                sigma_sum += vars.sigma_mean(&g);
                g.backward(vars.total)?
            };
            grads.accumulate_into(&mut store)?;
            clip_grad_norm(&mut store, tc.grad_clip);
            let lr = schedule.at(opt.step + 1);
            opt.update(&mut store, lr, |name| !frozen.iter().any(|f| f == name))?;
            batches += 1;
        }
        let n = batches as f64;
        let m = EpochMetrics {
            epoch,
            step: opt.step,
            bc: sums.bc / n,
            kl: sums.kl / n,
            total: sums.total / n,
            nll_move: sums.nll_move / n,
            nll_turn: sums.nll_turn / n,
            sigma_mean: sigma_sum / n,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: bc {:.4} kl {:.4} total {:.4}", m.bc, m.kl, m.total);
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&m)?)?;
        }
        history.push(m);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            step: opt.step,
            params: store.cast(),
            optimizer: Some(opt.cast()),
        },
        history,
    })
}

/// Trains only a text encoder so that text goals drive the frozen policy.
///
/// Each pair's trajectory is cut into chunks that all take the pair's text
/// as their goal; the loss is the behaviour-cloning term alone.
pub fn align_text_encoder(pairs: &[(Vec<String>, Trajectory)], frozen: &Checkpoint, config: &TextAlignConfig) -> Result<Checkpoint> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no text/trajectory pairs".into()));
    }
    let model = frozen.model();
    let text = TextEncoder::new(model.hidden(), model.slots());
    let mut items: Vec<(Vec<String>, Chunk)> = Vec::new();
    for (tokens, traj) in pairs {
        text.token_ids(tokens)?;
        let set = chunk_dataset(std::slice::from_ref(traj), model.chunk_len(), 0)?;
        items.extend(set.chunks.into_iter().map(|c| (tokens.clone(), c)));
    }
    if items.is_empty() {
        return Err(Error::Invalid("pairs yield no chunks".into()));
    }
    let mut store = frozen.params.clone();
    if store.lookup("text.emb").is_some() {
        return Err(Error::Invalid("checkpoint already carries a text encoder".into()));
    }
    text.init(&mut store, &mut seeds::rng(config.seed, &[30]))?;
    let mut opt = AdamW::new(&store, 0.0);
    let mut rng = seeds::rng(config.seed, &[31]);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let t = model.chunk_len();
    let trainable = |name: &str| name.starts_with(TextEncoder::PREFIX);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size.max(1)) {
            store.zero_grad();
            let grads = {
                let mut g = Graph::new(&store);
                for p in ["enc.", "prior.", "pol."] {
                    g.freeze_prefix(p);
                }
                let texts: Vec<Vec<String>> = idx.iter().map(|&i| items[i].0.clone()).collect();
                let goal = text.goal_graph(&mut g, &texts)?;
                let frames: Vec<&FrameTensor> = idx.iter().flat_map(|&i| items[i].1.frames.iter()).collect();
                let emb = model.posterior.embed_graph(&mut g, &frames)?;
                let prev: Vec<Action> = idx.iter().flat_map(|&i| items[i].1.prev_actions.iter().copied()).collect();
                let (ml, tl) = model.policy.sequence_graph(&mut g, emb, &prev, goal, idx.len(), t)?;
                let mv: Vec<usize> = idx.iter().flat_map(|&i| items[i].1.actions.iter().map(|a| a.move_index())).collect();
                let tn: Vec<usize> = idx.iter().flat_map(|&i| items[i].1.actions.iter().map(|a| a.turn_index())).collect();
                let lm = g.cross_entropy(ml, &mv)?;
                let lt = g.cross_entropy(tl, &tn)?;
                let loss = g.add(lm, lt)?;
                let l = g.scalar(loss).as_f64();
                if !l.is_finite() {
                    return Err(Error::Diverged { step: opt.step as usize + 1 });
                }
                loss_sum += l;
                g.backward(loss)?
            };
            grads.accumulate_into(&mut store)?;
            opt.update(&mut store, config.lr, trainable)?;
            batches += 1;
        }
        log::info!("text alignment epoch {epoch}: bc {:.4}", loss_sum / batches as f64);
    }
    Ok(Checkpoint {
        config: frozen.config.clone(),
        step: frozen.step,
        params: store,
        optimizer: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, EnvConfig, Skill};
    use crate::numerics::grad_check;

    fn micro(chunk_len: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.env.episode_len = 32;
        cfg.encoder.hidden = 8;
        cfg.encoder.layers = 1;
        cfg.encoder.heads = 2;
        cfg.encoder.pool_heads = 2;
        cfg.policy.blocks = 1;
        cfg.policy.memory = 8;
        cfg.train.chunk_len = chunk_len;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.train.warmup_steps = 2;
        cfg
    }

    fn data(len: usize, per_skill: usize) -> Vec<Trajectory> {
        generate_dataset(&Skill::ALL, per_skill, len, 5, &EnvConfig::default()).unwrap()
    }

    fn open_gates<R: Real>(store: &mut ParamStore<R>, model: &AgentModel) {
        for name in gate_names(model) {
            store.get_mut(&name).unwrap().data_mut()[0] = R::lit(0.7);
        }
    }

    #[test]
    fn chunking() {
        let d = data(256, 1);
        let set = chunk_dataset(&d[..1], 32, 0).unwrap();
        assert_eq!(set.chunks.len(), 8);
        for c in &set.chunks {
            assert_eq!(c.prev_actions[0], Action::START);
            assert_eq!(&c.prev_actions[1..], &c.actions[..31]);
            let acts = d[0].actions.as_ref().unwrap();
            assert_eq!(&c.actions[..], &acts[c.start..c.start + 32]);
            assert_eq!(c.frames[0], d[0].frames[c.start]);
        }
        assert_eq!(chunk_dataset(&d, 32, 9).unwrap(), chunk_dataset(&d, 32, 9).unwrap());
        assert_ne!(chunk_dataset(&d, 32, 9).unwrap().chunks, chunk_dataset(&d, 32, 10).unwrap().chunks);
        let short = data(20, 1);
        let set = chunk_dataset(&short, 32, 0).unwrap();
        assert_eq!((set.chunks.len(), set.skipped), (0, 5));
    }

    #[test]
    fn tau_modes() {
        let mut cfg = TrainConfig::default();
        let mut rng = seeds::rng(0, &[]);
        for _ in 0..200 {
            let t = cfg.taus(&mut rng);
            assert!(t.len() == 1 && (8..=24).contains(&t[0]));
        }
        cfg.tau_mode = TauMode::FixedSet;
        assert_eq!(cfg.taus(&mut rng), vec![8, 16, 24]);
    }

    fn batch_loss(cfg: &RunConfig, store: &ParamStore<f64>, chunks: &[&Chunk], tau: usize) -> LossBreakdown {
        let model = cfg.agent_model();
        let noise = normal_noise::<f64>(&[chunks.len() * model.slots(), model.hidden()], &mut seeds::rng(1, &[]));
        compute_loss(&model, store, chunks, &cfg.train, &noise, tau).unwrap()
    }

    #[test]
    fn loss_weights_combine_linearly() {
        let mut cfg = micro(8);
        let d = data(32, 1);
        let set = chunk_dataset(&d, 8, 0).unwrap();
        let chunks: Vec<&Chunk> = set.chunks.iter().take(3).collect();
        let model = cfg.agent_model();
        let mut store: ParamStore<f64> = model.init(3).unwrap();
        open_gates(&mut store, &model);
        let mut base = None;
        for lambda in [0.0, 0.01, 0.5, 3.0] {
            cfg.train.lambda_kl = lambda;
            let l = batch_loss(&cfg, &store, &chunks, 4);
            if lambda == 0.0 {
                assert_eq!(l.total, l.bc);
            }
            assert!((l.total - (l.bc + lambda * l.kl)).abs() <= 1e-10);
            assert!(l.kl > 0.0);
            let (bc, kl) = *base.get_or_insert((l.bc, l.kl));
            assert_eq!((l.bc, l.kl), (bc, kl));
            assert_eq!(l.bc, l.nll_move + l.nll_turn);
        }
        let uniform = (6f64).ln() + (3f64).ln();
        assert!((batch_loss(&cfg, &store, &chunks, 4).bc - uniform).abs() < 0.3);
        let err = compute_loss(&model, &store, &chunks, &cfg.train, &Tensor::zeros(&[3, 8]), 8);
        assert!(err.is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = micro(2);
        let d = data(32, 1);
        let set = chunk_dataset(&d[..2], 2, 0).unwrap();
        let chunks: Vec<&Chunk> = set.chunks.iter().take(2).collect();
        let model = cfg.agent_model();
        let mut store: ParamStore<f64> = model.init(4).unwrap();
        open_gates(&mut store, &model);
        let noise = normal_noise::<f64>(&[2, 8], &mut seeds::rng(2, &[]));
        let err = grad_check(
            |g| Ok(loss_graph(g, &model, &chunks, &cfg.train, &noise, &[1])?.total),
            &store,
            LOSS_GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
        let err = loss_grad_check(&cfg, 1).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn kl_alone_leaves_the_policy_untouched() {
        let mut cfg = micro(8);
        cfg.train.lambda_bc = 0.0;
        let d = data(32, 1);
        let set = chunk_dataset(&d, 8, 0).unwrap();
        let chunks: Vec<&Chunk> = set.chunks.iter().take(2).collect();
        let model = cfg.agent_model();
        let mut store: ParamStore<f64> = model.init(3).unwrap();
        open_gates(&mut store, &model);
        let noise = normal_noise::<f64>(&[2, 8], &mut seeds::rng(2, &[]));
        let mut g = Graph::new(&store);
        let vars = loss_graph(&mut g, &model, &chunks, &cfg.train, &noise, &[3]).unwrap();
        let grads = g.backward(vars.total).unwrap();
        store.zero_grad();
        grads.accumulate_into(&mut store).unwrap();
        let mut touched = 0.0;
        for i in 0..store.len() {
            let norm: f64 = store.grad_at(i).data().iter().map(|x| x.abs()).sum();
            if store.name(i).starts_with("pol.") {
                assert_eq!(norm, 0.0, "{}", store.name(i));
            } else {
                touched += norm;
            }
        }
        assert!(touched > 0.0);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mut cfg = micro(8);
        cfg.train.epochs = 4;
        cfg.train.lr = 3e-3;
        let d = data(32, 2);
        let mut log_a = Vec::new();
        let a = train_agent(&d, &cfg, Some(&mut log_a)).unwrap();
        let b = train_agent(&d, &cfg, None).unwrap();
        assert!(a.checkpoint.params.same_values(&b.checkpoint.params, ""));
        assert_eq!(a.checkpoint.optimizer, b.checkpoint.optimizer);
        let strip = |h: &[EpochMetrics]| {
            h.iter()
                .map(|m| EpochMetrics {
                    wall_time: 0.0,
                    ..m.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.history), strip(&b.history));
        let lines: Vec<EpochMetrics> = String::from_utf8(log_a)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(strip(&lines), strip(&a.history));
        assert!(a.history.last().unwrap().bc < a.history[0].bc);
        assert_eq!(a.checkpoint.step, 4 * 10);
    }

    #[test]
    fn unconditional_training_keeps_gates_closed() {
        let mut cfg = micro(8);
        cfg.train.unconditional = true;
        let out = train_agent(&data(32, 1), &cfg, None).unwrap();
        let model = cfg.agent_model();
        for name in gate_names(&model) {
            assert_eq!(out.checkpoint.params.get(&name).unwrap().data()[0], 0.0);
        }
    }

    #[test]
    fn f64_training_runs() {
        let mut cfg = micro(8);
        cfg.train.precision = Precision::F64;
        cfg.train.epochs = 1;
        let out = train_agent(&data(32, 1), &cfg, None).unwrap();
        assert!(out.history[0].total.is_finite());
    }

    #[test]
    fn text_alignment_trains_only_the_text_encoder() {
        let cfg = micro(8);
        let d = data(32, 1);
        let frozen = train_agent(&d, &cfg, None).unwrap().checkpoint;
        let pairs: Vec<(Vec<String>, Trajectory)> = d
            .iter()
            .map(|t| {
                let skill: Skill = t.skill_label.as_deref().unwrap().parse().unwrap();
                (crate::text::tokenize_tag(skill.defining_event()), t.clone())
            })
            .collect();
        let tcfg = TextAlignConfig {
            epochs: 2,
            ..TextAlignConfig::default()
        };
        let aligned = align_text_encoder(&pairs, &frozen, &tcfg).unwrap();
        for prefix in ["enc.", "prior.", "pol."] {
            assert!(aligned.params.same_values(&frozen.params, prefix));
        }
        assert!(aligned.has_text_encoder());
        let before: ParamStore<f32> = {
            let mut s = frozen.params.clone();
            TextEncoder::new(8, 1).init(&mut s, &mut seeds::rng(tcfg.seed, &[30])).unwrap();
            s
        };
        assert!(!aligned.params.same_values(&before, "text."));
        assert!(align_text_encoder(&[], &frozen, &tcfg).is_err());
        let bad = vec![(vec!["fly".to_string()], d[0].clone())];
        assert!(align_text_encoder(&bad, &frozen, &tcfg).is_err());
        let enc = aligned.text_encoder().unwrap();
        let g = enc.encode(&aligned.params, &crate::text::tokenize_tag("mine_block:tree")).unwrap();
        assert_eq!(g.g.shape(), &[1, 8]);
    }
}
