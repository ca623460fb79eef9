//! Programmatic judging, Elo tournaments and goal-space analytics.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{FrameTensor, Skill, Trajectory};
use crate::error::{Error, Result};
use crate::inference::{encode_reference, EpisodeLog};
use crate::seeds;
use crate::train::Checkpoint;

/// `eval` section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub elo_k: f64,
    pub matches: usize,
    pub episodes_per_task: usize,
    pub task_steps: usize,
    /// Agent pinned at `initial_rating` after the tournament.
    pub anchor: String,
    pub initial_rating: f64,
    pub clips_per_category: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            elo_k: 8.0,
            matches: 1500,
            episodes_per_task: 10,
            task_steps: 200,
            anchor: "unconditional_bc".into(),
            initial_rating: 1500.0,
            clips_per_category: 20,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.elo_k > 0.0) || !self.initial_rating.is_finite() {
            return Err(Error::Config("elo_k must be positive and initial_rating finite".into()));
        }
        if self.episodes_per_task == 0 || self.task_steps == 0 || self.clips_per_category < 2 {
            return Err(Error::Config("episode, step and clip counts too small".into()));
        }
        Ok(())
    }
}

/// One step of a quality ladder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rung {
    AtLeast { tag: String, count: usize },
    /// Both events occurred and every `first` precedes the first `then`.
    Precedes { first: String, then: String },
}

impl Rung {
    fn at_least(tag: &str, count: usize) -> Self {
        Rung::AtLeast {
            tag: tag.into(),
            count,
        }
    }

    fn holds(&self, log: &EpisodeLog) -> bool {
        match self {
            Rung::AtLeast { tag, count } => log.count_event(tag) >= *count,
            Rung::Precedes { first, then } => match (log.last_event(first), log.first_event(then)) {
                (Some(a), Some(b)) => a <= b,
                _ => false,
            },
        }
    }
}

/// A judged task: the rank of a log is the number of leading rungs it
/// satisfies; equal ranks fall back to the count of `primary`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub ladder: Vec<Rung>,
    pub primary: String,
    /// Event that marks the task as solved.
    pub success: Rung,
}

impl TaskSpec {
    pub fn for_skill(skill: Skill) -> Self {
        let (ladder, primary) = match skill {
            Skill::ChopTrees => (vec![Rung::at_least("mine_block:tree", 1), Rung::at_least("pickup:wood", 3)], "pickup:wood"),
            Skill::MineStone => (
                vec![Rung::at_least("mine_block:stone", 1), Rung::at_least("pickup:stone", 3)],
                "pickup:stone",
            ),
            Skill::HuntAnimal => (vec![Rung::at_least("kill:animal", 1), Rung::at_least("pickup:meat", 2)], "pickup:meat"),
            Skill::CollectWater => (vec![Rung::at_least("use:water", 1), Rung::at_least("use:water", 3)], "use:water"),
            Skill::BuildDirt => (vec![Rung::at_least("pickup:dirt", 1), Rung::at_least("place:dirt", 1)], "place:dirt"),
        };
        TaskSpec {
            name: skill.name().into(),
            ladder,
            primary: primary.into(),
            success: Rung::at_least(skill.defining_event(), 1),
        }
    }

    /// Chop then hunt, with every tree felled before the first kill.
    pub fn chop_then_hunt() -> Self {
        TaskSpec {
            name: "chop_then_hunt".into(),
            ladder: vec![
                Rung::at_least("mine_block:tree", 1),
                Rung::at_least("kill:animal", 1),
                Rung::Precedes {
                    first: "mine_block:tree".into(),
                    then: "kill:animal".into(),
                },
            ],
            primary: "pickup:meat".into(),
            success: Rung::Precedes {
                first: "mine_block:tree".into(),
                then: "kill:animal".into(),
            },
        }
    }

    pub fn standard() -> Vec<TaskSpec> {
        Skill::ALL.into_iter().map(Self::for_skill).collect()
    }

    pub fn rank(&self, log: &EpisodeLog) -> usize {
        self.ladder.iter().take_while(|r| r.holds(log)).count()
    }

    pub fn succeeded(&self, log: &EpisodeLog) -> bool {
        self.success.holds(log)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
    Tie,
}

impl Winner {
    pub fn swapped(self) -> Self {
        match self {
            Winner::A => Winner::B,
            Winner::B => Winner::A,
            Winner::Tie => Winner::Tie,
        }
    }
}

/// Ladder rank first, then the primary count.
pub fn judge(task: &TaskSpec, a: &EpisodeLog, b: &EpisodeLog) -> Winner {
    let key = |l: &EpisodeLog| (task.rank(l), l.count_event(&task.primary));
    match key(a).cmp(&key(b)) {
        std::cmp::Ordering::Greater => Winner::A,
        std::cmp::Ordering::Less => Winner::B,
        std::cmp::Ordering::Equal => Winner::Tie,
    }
}

/// Looks a task up by name.
pub fn find_task<'a>(tasks: &'a [TaskSpec], name: &str) -> Result<&'a TaskSpec> {
    tasks
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Invalid(format!("unknown task {name}")))
}

/// Expected score of A against B.
pub fn win_probability(r_a: f64, r_b: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((r_b - r_a) / 400.0))
}

/// Elo update after a decisive match.
pub fn elo_update(r_a: f64, r_b: f64, k: f64, a_wins: bool) -> (f64, f64) {
    elo_update_outcome(r_a, r_b, k, if a_wins { Winner::A } else { Winner::B })
}

/// Elo update with ties scored as one half.
pub fn elo_update_outcome(r_a: f64, r_b: f64, k: f64, outcome: Winner) -> (f64, f64) {
    let delta = match outcome {
        Winner::A => k / (1.0 + 10f64.powf((r_a - r_b) / 400.0)),
        Winner::B => -k / (1.0 + 10f64.powf((r_b - r_a) / 400.0)),
        Winner::Tie => k * (win_probability(r_b, r_a) - 0.5),
    };
    (r_a + delta, r_b - delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub task: String,
    pub a: String,
    pub b: String,
    pub winner: Winner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    pub ratings: BTreeMap<String, f64>,
    pub history: Vec<MatchRecord>,
}

impl EloTable {
    pub fn rating(&self, agent: &str) -> f64 {
        self.ratings[agent]
    }
}

/// Pre-generated episodes: agent name → task name → logs.
pub type EpisodePool = BTreeMap<String, BTreeMap<String, Vec<EpisodeLog>>>;

/// Tournament with the ladder judge.
pub fn run_tournament(pool: &EpisodePool, tasks: &[TaskSpec], config: &EvalConfig) -> Result<EloTable> {
    run_tournament_with(pool, tasks, config, |task, a, b, _| judge(task, a, b))
}

/// Tournament with an arbitrary judge. Each match samples a task, an
/// unordered pair of distinct agents and one episode of each, uniformly.
pub fn run_tournament_with(
    pool: &EpisodePool,
    tasks: &[TaskSpec],
    config: &EvalConfig,
    mut judge: impl FnMut(&TaskSpec, &EpisodeLog, &EpisodeLog, &mut rand_chacha::ChaCha8Rng) -> Winner,
) -> Result<EloTable> {
    let agents: Vec<&String> = pool.keys().collect();
    if agents.len() < 2 {
        return Err(Error::Invalid("a tournament needs at least two agents".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Invalid("no tasks".into()));
    }
    if !pool.contains_key(&config.anchor) {
        return Err(Error::Invalid(format!("anchor agent {} not in the pool", config.anchor)));
    }
    let mut ratings: BTreeMap<String, f64> = agents.iter().map(|a| ((*a).clone(), config.initial_rating)).collect();
    let mut history = Vec::with_capacity(config.matches);
    let mut rng = seeds::rng(config.seed, &[0x656c_6f]);
    let episodes = |agent: &str, task: &str| -> Result<&Vec<EpisodeLog>> {
        pool[agent]
            .get(task)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Invalid(format!("agent {agent} has no episodes for task {task}")))
    };
    for _ in 0..config.matches {
        let task = tasks.choose(&mut rng).expect("nonempty");
        let mut pair: Vec<&String> = agents.choose_multiple(&mut rng, 2).copied().collect();
        pair.shuffle(&mut rng);
        let (a, b) = (pair[0].as_str(), pair[1].as_str());
        let la = episodes(a, &task.name)?.choose(&mut rng).expect("nonempty");
        let lb = episodes(b, &task.name)?.choose(&mut rng).expect("nonempty");
        let winner = judge(task, la, lb, &mut rng);
        let (ra, rb) = elo_update_outcome(ratings[a], ratings[b], config.elo_k, winner);
        ratings.insert(a.to_string(), ra);
        ratings.insert(b.to_string(), rb);
        history.push(MatchRecord {
            task: task.name.clone(),
            a: a.to_string(),
            b: b.to_string(),
            winner,
        });
    }
    let shift = config.initial_rating - ratings[&config.anchor];
    for (name, r) in ratings.iter_mut() {
        *r = if *name == config.anchor { config.initial_rating } else { *r + shift };
    }
    Ok(EloTable { ratings, history })
}

/// Clips ending at an event, labelled by category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub tag: String,
}

impl CategorySpec {
    /// One category per skill, keyed by its defining event.
    pub fn standard() -> Vec<CategorySpec> {
        Skill::ALL
            .into_iter()
            .map(|s| CategorySpec {
                name: s.name().into(),
                tag: s.defining_event().into(),
            })
            .collect()
    }
}

/// Cuts up to `per_category` clips `[tick - t + 1, tick]` per category,
/// chosen uniformly among all qualifying event occurrences.
pub fn sample_event_clips(
    dataset: &[Trajectory],
    categories: &[CategorySpec],
    t: usize,
    per_category: usize,
    seed: u64,
) -> Result<Vec<(String, Vec<FrameTensor>)>> {
    let mut out = Vec::new();
    for (ci, cat) in categories.iter().enumerate() {
        let mut sites: Vec<(usize, usize)> = Vec::new();
        for (ti, traj) in dataset.iter().enumerate() {
            for e in traj.events.iter().filter(|e| e.tag == cat.tag) {
                let tick = e.tick as usize;
                if tick + 1 >= t && tick < traj.len() {
                    sites.push((ti, tick));
                }
            }
        }
        if sites.is_empty() {
            return Err(Error::Invalid(format!("no clips for category {}", cat.name)));
        }
        let mut rng = seeds::rng(seed, &[ci as u64]);
        sites.shuffle(&mut rng);
        sites.truncate(per_category);
        if sites.len() < per_category {
            log::warn!("category {} has only {} clips", cat.name, sites.len());
        }
        sites.sort_unstable();
        for (ti, tick) in sites {
            out.push((cat.name.clone(), dataset[ti].frames[tick + 1 - t..=tick].to_vec()));
        }
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0;
    for r in rows {
        if acc.is_empty() {
            acc = vec![0.0; r.len()];
        }
        acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub categories: Vec<String>,
    /// Flattened `N x d` mean embedding per category.
    pub centroids: Vec<Vec<f64>>,
    pub cosine: Vec<Vec<f64>>,
    /// Leave-one-out nearest-centroid accuracy.
    pub accuracy: f64,
    pub chance: f64,
    pub embeddings: Vec<(String, Vec<f64>)>,
}

impl ClusterReport {
    /// Builds the report from labelled flattened embeddings.
    pub fn from_embeddings(categories: &[String], embeddings: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::Invalid("need at least two categories".into()));
        }
        fn members<'a>(e: &'a [(String, Vec<f64>)], c: &'a str) -> impl Iterator<Item = &'a (String, Vec<f64>)> {
            e.iter().filter(move |(k, _)| k == c)
        }
        for c in categories {
            if members(&embeddings, c).count() < 2 {
                return Err(Error::Invalid(format!("category {c} needs at least two clips")));
            }
        }
        let centroids: Vec<Vec<f64>> = categories.iter().map(|c| mean_of(members(&embeddings, c).map(|(_, v)| v))).collect();
        let cos: Vec<Vec<f64>> = (0..categories.len())
            .map(|i| {
                (0..categories.len())
                    .map(|j| if i == j { 1.0 } else { cosine(&centroids[i], &centroids[j]) })
                    .collect()
            })
            .collect();
        let mut correct = 0;
        for (idx, (cat, v)) in embeddings.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (ci, c) in categories.iter().enumerate() {
                let centroid = if c == cat {
                    mean_of(
                        embeddings
                            .iter()
                            .enumerate()
                            .filter(|(j, (k, _))| *j != idx && k == c)
                            .map(|(_, (_, e))| e),
                    )
                } else {
                    centroids[ci].clone()
                };
                let s = cosine(v, &centroid);
                if s > best.0 {
                    best = (s, ci);
                }
            }
            if best.1 != usize::MAX && &categories[best.1] == cat {
                correct += 1;
            }
        }
        Ok(ClusterReport {
            categories: categories.to_vec(),
            centroids,
            cosine: cos,
            accuracy: correct as f64 / embeddings.len() as f64,
            chance: 1.0 / categories.len() as f64,
            embeddings,
        })
    }

    pub fn centroid(&self, category: &str) -> Option<&[f64]> {
        self.categories.iter().position(|c| c == category).map(|i| self.centroids[i].as_slice())
    }

    /// Rows `category, g_0, ..., g_{N*d-1}`.
    pub fn to_csv(&self) -> String {
        let width = self.embeddings.first().map_or(0, |(_, v)| v.len());
        let mut out = String::from("category");
        for i in 0..width {
            out.push_str(&format!(",g_{i}"));
        }
        out.push('\n');
        for (cat, v) in &self.embeddings {
            out.push_str(cat);
            for x in v {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Flattened mean-mode goal of a clip.
pub fn embed_clip(checkpoint: &Checkpoint, clip: &[FrameTensor]) -> Result<Vec<f64>> {
    Ok(encode_reference(clip, checkpoint)?.g.to_f64_vec())
}

/// Embeds event-keyed clips and measures how well categories separate.
pub fn goal_space_report(
    checkpoint: &Checkpoint,
    dataset: &[Trajectory],
    categories: &[CategorySpec],
    per_category: usize,
    seed: u64,
) -> Result<ClusterReport> {
    let t = checkpoint.model().chunk_len();
    let clips = sample_event_clips(dataset, categories, t, per_category, seed)?;
    let embeddings = clips
        .iter()
        .map(|(c, clip)| Ok((c.clone(), embed_clip(checkpoint, clip)?)))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = categories.iter().map(|c| c.name.clone()).collect();
    ClusterReport::from_embeddings(&names, embeddings)
}

/// Fraction of logs in which the task succeeded.
pub fn success_rate(task: &TaskSpec, logs: &[EpisodeLog]) -> f64 {
    if logs.is_empty() {
        return 0.0;
    }
    logs.iter().filter(|l| task.succeeded(l)).count() as f64 / logs.len() as f64
}

/// Random coin-flip judge, used to check the tournament's noise floor.
pub fn coin_flip(rng: &mut impl Rng) -> Winner {
    if rng.random::<bool>() {
        Winner::A
    } else {
        Winner::B
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Action, Event};
    use crate::inference::StepRecord;

    fn log_with(events: &[(&str, u32)]) -> EpisodeLog {
        EpisodeLog {
            seed: 0,
            noise_seed: 0,
            steps: events
                .iter()
                .map(|(tag, tick)| StepRecord {
                    action: Action::NOOP,
                    events: vec![Event {
                        tag: tag.to_string(),
                        tick: *tick,
                    }],
                })
                .collect(),
            final_inventory: BTreeMap::new(),
            switch_ticks: vec![],
            total_steps: events.len(),
        }
    }

    #[test]
    fn elo_arithmetic() {
        assert!((win_probability(1650.0, 1500.0) - 0.7034).abs() < 5e-4);
        assert!((win_probability(1600.0, 1500.0) - 0.6400).abs() < 5e-4);
        assert_eq!(win_probability(1432.0, 1432.0), 0.5);
        assert_eq!(elo_update(1500.0, 1500.0, 8.0, true), (1504.0, 1496.0));
        let (mut a, mut b) = (1500.0, 1500.0);
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            let (na, nb) = elo_update(a, b, 8.0, true);
            assert!(na - a < last);
            assert!((na + nb - (a + b)).abs() < 1e-9);
            last = na - a;
            (a, b) = (na, nb);
        }
        for (x, y) in [(1200.0, 1750.0), (1500.0, 1499.0), (2000.0, 900.0)] {
            assert!((win_probability(x, y) + win_probability(y, x) - 1.0).abs() < 1e-12);
            assert_eq!(win_probability(x + 333.0, y + 333.0), win_probability(x, y));
        }
    }

    #[test]
    fn tie_update_pulls_ratings_together() {
        let (a, b) = elo_update_outcome(1600.0, 1500.0, 8.0, Winner::Tie);
        assert!(a < 1600.0 && b > 1500.0);
        assert!((a + b - 3100.0).abs() < 1e-9);
        assert_eq!(elo_update_outcome(1500.0, 1500.0, 8.0, Winner::Tie), (1500.0, 1500.0));
    }

    #[test]
    fn judge_orders_and_is_antisymmetric() {
        let chop = TaskSpec::for_skill(Skill::ChopTrees);
        let three = log_with(&[("mine_block:tree", 1), ("pickup:wood", 1), ("pickup:wood", 5), ("pickup:wood", 9)]);
        let none = log_with(&[]);
        assert_eq!(judge(&chop, &three, &none), Winner::A);
        assert_eq!(judge(&chop, &none, &three), Winner::B);
        assert_eq!(judge(&chop, &three, &three), Winner::Tie);
        assert!(matches!(find_task(&TaskSpec::standard(), "fly"), Err(Error::Invalid(_))));
    }

    #[test]
    fn judge_antisymmetry_on_random_logs() {
        let tags = crate::env::EVENT_TAGS;
        let mut rng = seeds::rng(1, &[]);
        let tasks = TaskSpec::standard();
        for _ in 0..1000 {
            let mut gen = || {
                let n = rng.random_range(0..8);
                let ev: Vec<(&str, u32)> = (0..n).map(|i| (tags[rng.random_range(0..tags.len())], i)).collect();
                log_with(&ev)
            };
            let (a, b) = (gen(), gen());
            for task in &tasks {
                assert_eq!(judge(task, &a, &b), judge(task, &b, &a).swapped());
                assert_eq!(judge(task, &a, &b), judge(task, &a, &b));
            }
        }
    }

    #[test]
    fn precedence_rung() {
        let task = TaskSpec::chop_then_hunt();
        let ordered = log_with(&[("mine_block:tree", 3), ("kill:animal", 10)]);
        let reversed = log_with(&[("kill:animal", 3), ("mine_block:tree", 10)]);
        assert!(task.succeeded(&ordered));
        assert!(!task.succeeded(&reversed));
        assert_eq!(judge(&task, &ordered, &reversed), Winner::A);
    }

    fn pool(names: &[&str], logs: Vec<EpisodeLog>) -> EpisodePool {
        names
            .iter()
            .map(|n| {
                let per: BTreeMap<String, Vec<EpisodeLog>> =
                    TaskSpec::standard().into_iter().map(|t| (t.name, logs.clone())).collect();
                (n.to_string(), per)
            })
            .collect()
    }

    #[test]
    fn coin_flip_tournament_keeps_equal_agents_close() {
        let cfg = EvalConfig {
            anchor: "a".into(),
            ..EvalConfig::default()
        };
        let p = pool(&["a", "b"], vec![log_with(&[])]);
        let table = run_tournament_with(&p, &TaskSpec::standard(), &cfg, |_, _, _, rng| coin_flip(rng)).unwrap();
        assert_eq!(table.rating("a"), 1500.0);
        assert!((table.rating("a") - table.rating("b")).abs() < 40.0);
        assert_eq!(table.history.len(), 1500);
    }

    #[test]
    fn tournament_errors() {
        let cfg = EvalConfig::default();
        let one = pool(&["unconditional_bc"], vec![log_with(&[])]);
        assert!(run_tournament(&one, &TaskSpec::standard(), &cfg).is_err());
        let mut two = pool(&["unconditional_bc", "x"], vec![log_with(&[])]);
        two.get_mut("x").unwrap().clear();
        assert!(run_tournament(&two, &TaskSpec::standard(), &cfg).is_err());
    }

    #[test]
    fn cluster_report_on_separable_points() {
        let cats = vec!["x".to_string(), "y".to_string()];
        let mut emb = Vec::new();
        for i in 0..5 {
            emb.push(("x".to_string(), vec![1.0, 0.1 * i as f64]));
            emb.push(("y".to_string(), vec![0.1 * i as f64, 1.0]));
        }
        let r = ClusterReport::from_embeddings(&cats, emb).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.chance, 0.5);
        assert_eq!(r.cosine[0][1], r.cosine[1][0]);
        assert_eq!(r.cosine[0][0], 1.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("category,g_0,g_1\n"));
        assert_eq!(csv.lines().count(), 11);
    }
}
