//! Non-causal inverse dynamics model and pseudo-labelling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, FrameTensor, Move, Trajectory, Turn};
use crate::error::{shape_err, Error, Result};
use crate::layers::{self, FrameEmbedder};
use crate::numerics::{AttnSpec, Graph, ParamStore, Real, Var};
use crate::optim::{clip_grad_norm, AdamW, Schedule};
use crate::policy::ActionLogits;
use crate::seeds;

/// `idm` section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmConfig {
    /// Odd window length; the label is the action at the centre frame.
    pub window: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Spatial self-attention blocks inside the frame embedder.
    pub mix_layers: usize,
    pub epochs: usize,
    /// Consecutive centres embedded together; one segment per batch row.
    pub segment: usize,
    pub segments_per_batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub labeled_fraction: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self {
            window: 9,
            hidden: 32,
            layers: 2,
            heads: 4,
            ff_mult: 2,
            mix_layers: 0,
            epochs: 10,
            segment: 32,
            segments_per_batch: 4,
            lr: 2e-3,
            warmup_steps: 50,
            weight_decay: 0.01,
            grad_clip: 1.0,
            labeled_fraction: 0.2,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl IdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("idm window must be odd, got {}", self.window)));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 || self.layers == 0 {
            return Err(Error::Config("idm hidden must be divisible by heads".into()));
        }
        if self.segment == 0 || self.segments_per_batch == 0 {
            return Err(Error::Config("idm batch sizes must be positive".into()));
        }
        for f in [self.labeled_fraction, self.holdout_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config("idm fractions must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Idm {
    pub config: IdmConfig,
    frame: FrameEmbedder,
}

/// Outcome of [`train_idm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmReport {
    pub accuracy: f64,
    pub heldout_steps: usize,
    pub train_episodes: usize,
    pub heldout_episodes: usize,
    pub final_loss: f64,
}

/// Frames needed to predict centres `lo..hi` of a length-`len` episode,
/// and for each centre the rows of its window within those frames.
/// Windows reaching past either end repeat the boundary frame.
fn window_rows(len: usize, lo: usize, hi: usize, w: usize) -> (Vec<usize>, Vec<usize>) {
    let half = (w / 2) as isize;
    let first = (lo as isize - half).max(0) as usize;
    let last = ((hi as isize - 1 + half) as usize).min(len - 1);
    let frames: Vec<usize> = (first..=last).collect();
    let rows = (lo..hi)
        .flat_map(|c| (-half..=half).map(move |o| (c as isize + o).clamp(0, len as isize - 1) as usize - first))
        .collect();
    (frames, rows)
}

impl Idm {
    pub const PREFIX: &'static str = "idm";

    pub fn new(config: &IdmConfig) -> Self {
        Self {
            config: config.clone(),
            frame: FrameEmbedder::new("idm.frame", config.hidden, config.heads).stacked(4).with_mixing(config.mix_layers),
        }
    }

    fn name(s: &str) -> String {
        format!("{}.{s}", Self::PREFIX)
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        let d = self.config.hidden;
        self.frame.init(store, rng)?;
        store.insert_normal(Self::name("pos"), &[self.config.window, d], 0.3, rng)?;
        for l in 0..self.config.layers {
            layers::init_block(store, &Self::name(&format!("block{l}")), d, self.config.ff_mult, rng)?;
        }
        layers::init_ln(store, &Self::name("ln_f"), d)?;
        layers::init_linear(store, &Self::name("move"), d, Move::COUNT, 0.5, rng)?;
        layers::init_linear(store, &Self::name("turn"), d, Turn::COUNT, 0.5, rng)?;
        Ok(())
    }

    /// Embeds each transition input, gathers the windows listed in `rows`
    /// (`window` entries each) and returns centre logits.
    fn forward<R: Real>(&self, g: &mut Graph<'_, R>, inputs: &[TransitionInput], rows: &[usize]) -> Result<(Var, Var)> {
        let w = self.config.window;
        let n = rows.len() / w;
        let groups: Vec<[&FrameTensor; 4]> = inputs.iter().map(TransitionInput::refs).collect();
        let groups: Vec<&[&FrameTensor]> = groups.iter().map(|p| &p[..]).collect();
        let emb = self.frame.embed_groups(g, &groups)?;
        let x = g.gather_rows(emb, rows)?;
        let pos = g.param(&Self::name("pos"))?;
        let tile: Vec<usize> = (0..n).flat_map(|_| 0..w).collect();
        let pos = g.gather_rows(pos, &tile)?;
        let mut h = g.add(x, pos)?;
        for l in 0..self.config.layers {
            h = layers::block(g, &Self::name(&format!("block{l}")), h, AttnSpec::full(n, w, w, self.config.heads))?;
        }
        let centres: Vec<usize> = (0..n).map(|i| i * w + w / 2).collect();
        let c = g.gather_rows(h, &centres)?;
        let c = layers::ln(g, &Self::name("ln_f"), c)?;
        let m = layers::linear(g, &Self::name("move"), c)?;
        let t = layers::linear(g, &Self::name("turn"), c)?;
        Ok((m, t))
    }

    /// Logits for the transition from the centre frame to the next one.
    pub fn idm_predict<R: Real>(&self, store: &ParamStore<R>, window: &[&FrameTensor]) -> Result<ActionLogits> {
        let w = self.config.window;
        if window.len() != w {
            return shape_err("idm window", &[window.len()], &[w]);
        }
        let mut g = Graph::new(store);
        let rows: Vec<usize> = (0..w).collect();
        let pairs = transitions(window, 0..w);
        let (m, t) = self.forward(&mut g, &pairs, &rows)?;
        Ok(logits_rows(&g, m, t).remove(0))
    }

    /// Logits for every step of an episode, edge-padded.
    pub fn predict_trajectory<R: Real>(&self, store: &ParamStore<R>, frames: &[FrameTensor]) -> Result<Vec<ActionLogits>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let seg = 64;
        let mut out = Vec::with_capacity(frames.len());
        let mut lo = 0;
        while lo < frames.len() {
            let hi = (lo + seg).min(frames.len());
            let (idx, rows) = window_rows(frames.len(), lo, hi, self.config.window);
            let pairs = transitions(frames, idx);
            let mut g = Graph::new(store);
            let (m, t) = self.forward(&mut g, &pairs, &rows)?;
            out.extend(logits_rows(&g, m, t));
            lo = hi;
        }
        Ok(out)
    }
}

/// A frame stacked with its successor and the successor undone by a left
/// or a right turn in place. A turn then shows up as a cell-wise match
/// between the frame and one of the counter-rotated copies.
struct TransitionInput<'a> {
    frame: &'a FrameTensor,
    next: &'a FrameTensor,
    undo_right: FrameTensor,
    undo_left: FrameTensor,
}

impl TransitionInput<'_> {
    fn refs(&self) -> [&FrameTensor; 4] {
        [self.frame, self.next, &self.undo_right, &self.undo_left]
    }
}

/// Inputs for frames `idx`; the final frame is its own successor.
fn transitions<'a, F: std::borrow::Borrow<FrameTensor>>(
    frames: &'a [F],
    idx: impl IntoIterator<Item = usize>,
) -> Vec<TransitionInput<'a>> {
    let last = frames.len() - 1;
    idx.into_iter()
        .map(|i| {
            let next = frames[(i + 1).min(last)].borrow();
            TransitionInput {
                frame: frames[i].borrow(),
                next,
                undo_right: next.rotated(3),
                undo_left: next.rotated(1),
            }
        })
        .collect()
}

fn logits_rows<R: Real>(g: &Graph<'_, R>, m: Var, t: Var) -> Vec<ActionLogits> {
    let (mt, tt) = (g.value(m), g.value(t));
    (0..mt.rows())
        .map(|r| ActionLogits {
            move_logits: mt.row(r).iter().map(|x| x.as_f64()).collect(),
            turn_logits: tt.row(r).iter().map(|x| x.as_f64()).collect(),
        })
        .collect()
}

fn exact_match(pred: &[ActionLogits], truth: &[Action]) -> usize {
    pred.iter().zip(truth).filter(|(p, a)| p.greedy() == **a).count()
}

/// Trains on sliding windows of the labelled episodes and reports
/// exact-match accuracy (both heads) on held-out episodes.
pub fn train_idm(labeled: &[Trajectory], config: &IdmConfig) -> Result<(ParamStore<f32>, IdmReport)> {
    config.validate()?;
    let w = config.window;
    for t in labeled {
        let actions = t
            .actions
            .as_ref()
            .ok_or_else(|| Error::Invalid("idm training needs labelled trajectories".into()))?;
        if actions.len() != t.len() {
            return Err(Error::Invalid("action/frame length mismatch".into()));
        }
    }
    let total: usize = labeled.iter().map(|t| t.len()).sum();
    if total < w {
        return Err(Error::Invalid(format!("dataset of {total} frames is smaller than one window ({w})")));
    }
    if labeled.len() < 2 {
        return Err(Error::Invalid("need at least two labelled episodes for a held-out split".into()));
    }
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut seeds::rng(config.seed, &[1]));
    let n_hold = ((labeled.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, labeled.len() - 1);
    let (hold, train) = order.split_at(n_hold);

    let idm = Idm::new(config);
    let mut store = ParamStore::<f32>::new();
    idm.init(&mut store, &mut seeds::rng(config.seed, &[2]))?;
    let mut opt = AdamW::new(&store, config.weight_decay);
    let schedule = Schedule {
        lr: config.lr,
        warmup_steps: config.warmup_steps,
    };

    let mut segments: Vec<(usize, usize, usize)> = Vec::new();
    for &e in train {
        let len = labeled[e].len();
        let mut lo = 0;
        while lo < len {
            let hi = (lo + config.segment).min(len);
            segments.push((e, lo, hi));
            lo = hi;
        }
    }
    let mut shuffle_rng = seeds::rng(config.seed, &[3]);
    let mut final_loss = f64::NAN;
    for _epoch in 0..config.epochs {
        segments.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in segments.chunks(config.segments_per_batch) {
            let mut pairs: Vec<TransitionInput> = Vec::new();
            let mut rows = Vec::new();
            let mut mv = Vec::new();
            let mut tn = Vec::new();
            for &(e, lo, hi) in batch {
                let traj = &labeled[e];
                let (idx, r) = window_rows(traj.len(), lo, hi, w);
                let base = pairs.len();
                pairs.extend(transitions(&traj.frames, idx));
                rows.extend(r.into_iter().map(|x| x + base));
                let acts = &traj.actions.as_ref().expect("checked above")[lo..hi];
                mv.extend(acts.iter().map(|a| a.move_index()));
                tn.extend(acts.iter().map(|a| a.turn_index()));
            }
            store.zero_grad();
            let grads = {
                let mut g = Graph::new(&store);
                let (m, t) = idm.forward(&mut g, &pairs, &rows)?;
                let lm = g.cross_entropy(m, &mv)?;
                let lt = g.cross_entropy(t, &tn)?;
                let loss = g.add(lm, lt)?;
                let l = g.scalar(loss).as_f64();
                if !l.is_finite() {
                    return Err(Error::Diverged { step: opt.step as usize });
                }
                epoch_loss += l;
                g.backward(loss)?
            };
            grads.accumulate_into(&mut store)?;
            clip_grad_norm(&mut store, config.grad_clip);
            let lr = schedule.at(opt.step + 1);
            opt.update(&mut store, lr, |_| true)?;
            batches += 1;
        }
        final_loss = epoch_loss / batches.max(1) as f64;
        log::info!("idm epoch {_epoch}: loss {final_loss:.4}");
    }

    let mut correct = 0;
    let mut steps = 0;
    for &e in hold {
        let traj = &labeled[e];
        let pred = idm.predict_trajectory(&store, &traj.frames)?;
        correct += exact_match(&pred, traj.actions.as_ref().expect("checked above"));
        steps += traj.len();
    }
    let report = IdmReport {
        accuracy: correct as f64 / steps.max(1) as f64,
        heldout_steps: steps,
        train_episodes: train.len(),
        heldout_episodes: hold.len(),
        final_loss,
    };
    Ok((store, report))
}

/// Fills missing actions with the IDM's per-head argmax.
pub fn pseudo_label<R: Real>(unlabeled: &[Trajectory], idm: &Idm, store: &ParamStore<R>) -> Result<Vec<Trajectory>> {
    unlabeled
        .iter()
        .map(|t| {
            if t.actions.is_some() {
                return Err(Error::Invalid(format!(
                    "trajectory (seed {}) already carries actions; refusing to overwrite",
                    t.seed
                )));
            }
            let pred = idm.predict_trajectory(store, &t.frames)?;
            Ok(Trajectory {
                actions: Some(pred.iter().map(ActionLogits::greedy).collect()),
                pseudo_labeled: true,
                ..t.clone()
            })
        })
        .collect()
}

/// Fraction of steps where `labels` agree with `truth` on both heads.
pub fn label_agreement(labels: &[Trajectory], truth: &[Trajectory]) -> f64 {
    let mut hit = 0;
    let mut n = 0;
    for (a, b) in labels.iter().zip(truth) {
        if let (Some(x), Some(y)) = (&a.actions, &b.actions) {
            hit += x.iter().zip(y).filter(|(p, q)| p == q).count();
            n += x.len().min(y.len());
        }
    }
    hit as f64 / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, run_episode, strip_actions, EnvConfig, Skill};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> IdmConfig {
        IdmConfig {
            hidden: 16,
            heads: 2,
            layers: 1,
            epochs: 0,
            ..Default::default()
        }
    }

    #[test]
    fn windows_repeat_boundary_frames() {
        let (frames, rows) = window_rows(10, 0, 2, 5);
        assert_eq!(frames, vec![0, 1, 2, 3]);
        assert_eq!(rows, vec![0, 0, 0, 1, 2, 0, 0, 1, 2, 3]);
        let (frames, rows) = window_rows(10, 9, 10, 5);
        assert_eq!(frames, vec![7, 8, 9]);
        assert_eq!(rows, vec![0, 1, 2, 2, 2]);
    }

    #[test]
    fn predict_shapes_determinism_and_noncausality() {
        let idm = Idm::new(&tiny());
        let mut store = ParamStore::<f64>::new();
        idm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let d = generate_dataset(&[Skill::HuntAnimal], 1, 20, 1, &EnvConfig::default()).unwrap();
        let win: Vec<&FrameTensor> = d[0].frames[..9].iter().collect();
        let a = idm.idm_predict(&store, &win).unwrap();
        assert_eq!((a.move_logits.len(), a.turn_logits.len()), (6, 3));
        assert_eq!(a, idm.idm_predict(&store, &win).unwrap());
        let mut last = d[0].frames[8].clone();
        last.set(0, 0, 4, 1.0 - last.at(0, 0, 4));
        let mut win2 = win.clone();
        win2[8] = &last;
        assert!(idm.idm_predict(&store, &win2).unwrap().max_abs_diff(&a) > 1e-9);
        assert!(idm.idm_predict(&store, &win[..8]).is_err());
        // A nine-frame episode predicts its centre from exactly this window.
        let all = idm.predict_trajectory(&store, &d[0].frames[..9]).unwrap();
        assert_eq!(all.len(), 9);
        assert!(all[4].max_abs_diff(&a) < 1e-12);
        assert_eq!(idm.predict_trajectory(&store, &d[0].frames).unwrap().len(), 20);
    }

    #[test]
    fn untrained_accuracy_is_chance_on_uniform_actions() {
        let cfg = EnvConfig::default();
        let mut trajs = Vec::new();
        for s in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
            trajs.push(
                run_episode(s, &cfg, 256, None, |_| {
                    Action::from_indices(rng.random_range(0..6), rng.random_range(0..3)).unwrap()
                })
                .unwrap(),
            );
        }
        let (_, report) = train_idm(&trajs, &tiny()).unwrap();
        let p = 1.0 / 18.0;
        let tol = 3.0 * (p * (1.0 - p) / report.heldout_steps as f64).sqrt();
        assert!((report.accuracy - p).abs() <= tol, "accuracy {} vs chance {p} +- {tol}", report.accuracy);
    }

    #[test]
    fn training_is_deterministic_and_labels_refuse_overwrite() {
        let d = generate_dataset(&[Skill::ChopTrees], 3, 24, 1, &EnvConfig::default()).unwrap();
        let cfg = IdmConfig { epochs: 1, ..tiny() };
        let (s1, r1) = train_idm(&d, &cfg).unwrap();
        let (s2, r2) = train_idm(&d, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert!(s1.same_values(&s2, ""));
        let idm = Idm::new(&cfg);
        assert!(pseudo_label(&d, &idm, &s1).is_err());
        let labeled = pseudo_label(&strip_actions(&d), &idm, &s1).unwrap();
        assert!(labeled.iter().zip(&d).all(|(a, b)| a.len() == b.len() && a.pseudo_labeled));
        assert_eq!(labeled, pseudo_label(&strip_actions(&d), &idm, &s1).unwrap());
        assert!(train_idm(&d[..1], &cfg).is_err());
    }
}
