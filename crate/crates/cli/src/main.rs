//! `goalcraft` command line: data generation, training, rollouts and
//! evaluation, each writing its outputs and a manifest under `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use goalcraft::config::RunConfig;
use goalcraft::env::{self, FrameTensor, Skill, Trajectory};
use goalcraft::evaluation::{self, CategorySpec, TaskSpec};
use goalcraft::experiment::{self, Agent};
use goalcraft::idm::{self, Idm};
use goalcraft::inference::{self, ChainSpec, Guidance, RolloutOptions, StageGoal};
use goalcraft::storage::{self, RunManifest};
use goalcraft::train::{self, Checkpoint};
use goalcraft::{Error, Result};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "goalcraft", version, about = "Goal-conditioned imitation in a toy gridworld")]
struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    /// One skill per episode, labelled with that skill.
    Expert,
    /// The expert switches to a random skill after each completion.
    Play,
    /// Uniform random-walk episodes.
    RandomWalk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert trajectories.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Episodes per skill (total episodes for `play` and `random-walk`).
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "expert")]
        kind: DataKind,
        /// Longest single-skill segment in `play` episodes.
        #[arg(long, default_value_t = 96)]
        max_segment: usize,
        /// Episode length; defaults to `env.episode_len`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the inverse dynamics model on the labelled share of a dataset.
    TrainIdm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Strip the actions of a dataset and relabel them with a trained IDM.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        idm: PathBuf,
    },
    /// Train the goal-conditioned agent.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `train.lambda_kl`.
        #[arg(long)]
        lambda_kl: Option<f64>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Train without goal conditioning.
        #[arg(long)]
        unconditional: bool,
    },
    /// Roll out a checkpoint toward a reference clip.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Reference clip as FILE:START:LEN, or FILE:INDEX:START:LEN.
        #[arg(long)]
        goal_ref: String,
        /// Second clip concatenated with the first.
        #[arg(long)]
        concat_ref: Option<String>,
        /// Episodes to run on consecutive world seeds.
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
    /// Roll out a sequence of goals with switch predicates.
    Chain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Stage as `CLIP;PREDICATE;MAX_STEPS`, e.g.
        /// `refs.mtrj:0:0:32;inventory.wood >= 3;200`. Repeat in order.
        #[arg(long = "stage", required = true)]
        stages: Vec<String>,
    },
    /// Elo tournament between agents on the five skill tasks.
    Tournament {
        #[command(flatten)]
        common: Common,
        /// Comma-separated agents: `expert`, `random` or `NAME=CHECKPOINT`.
        #[arg(long, value_delimiter = ',', required = true)]
        agents: Vec<String>,
        /// Trajectories holding one labelled reference per skill.
        #[arg(long)]
        refs: Option<PathBuf>,
        /// Overrides `eval.task_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Embed event clips and report how well they cluster by category.
    GoalReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a text encoder into the frozen goal space of a checkpoint.
    AlignText {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Skill-labelled trajectories paired with their event names.
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides `inference.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Enables guidance with this strength.
    #[arg(long)]
    lambda: Option<f64>,
    /// Guidance bias clip; defaults to a free-roam clip.
    #[arg(long)]
    bias_ref: Option<String>,
    /// World seed of the first episode.
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_json(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.idm.seed = seed;
        cfg.train.seed = seed;
        cfg.train.text.seed = seed;
        cfg.inference.seed = seed;
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A `FILE:START:LEN` or `FILE:INDEX:START:LEN` clip selector.
#[derive(Clone, Debug, PartialEq)]
struct ClipRef {
    file: PathBuf,
    index: usize,
    start: usize,
    len: usize,
}

impl ClipRef {
    fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("clip selector `{s}` is not FILE:[INDEX:]START:LEN"));
        let parts: Vec<&str> = s.rsplitn(4, ':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            [len, start, index, file] if index.parse::<usize>().is_ok() => Ok(Self {
                file: file.into(),
                index: num(index)?,
                start: num(start)?,
                len: num(len)?,
            }),
            [len, start, rest @ ..] => {
                let file = rest.iter().rev().copied().collect::<Vec<_>>().join(":");
                Ok(Self {
                    file: file.into(),
                    index: 0,
                    start: num(start)?,
                    len: num(len)?,
                })
            }
            _ => Err(bad()),
        }
    }

    fn load(&self) -> Result<Vec<FrameTensor>> {
        let trajs = storage::read_trajectories(&self.file)?;
        let traj = trajs
            .get(self.index)
            .ok_or_else(|| Error::Invalid(format!("{} has no trajectory {}", self.file.display(), self.index)))?;
        if self.len == 0 || self.start + self.len > traj.len() {
            return Err(Error::Invalid(format!(
                "clip {}..{} outside a {}-frame trajectory",
                self.start,
                self.start + self.len,
                traj.len()
            )));
        }
        Ok(traj.frames[self.start..self.start + self.len].to_vec())
    }
}

fn create_out(dir: &Path) -> Result<()> {
    Ok(fs::create_dir_all(dir)?)
}

fn finish(command: &str, cfg: &RunConfig, out: &Path, outputs: &[&str], summary: serde_json::Value) -> Result<()> {
    RunManifest {
        command: command.to_string(),
        config: cfg.clone(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        summary,
    }
    .write(out)
}

fn guidance(run: &RunArgs, ck: &Checkpoint, cfg: &RunConfig) -> Result<Option<Guidance>> {
    let Some(lambda) = run.lambda else {
        return Ok(None);
    };
    let bias = match &run.bias_ref {
        Some(r) => inference::encode_reference(&ClipRef::parse(r)?.load()?, ck)?,
        None => inference::free_roam_guidance(ck, &cfg.env, &cfg.inference)?.bias,
    };
    Ok(Some(Guidance { bias, lambda }))
}

fn write_logs(path: &Path, logs: &[inference::EpisodeLog]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for log in logs {
        writeln!(f, "{}", log.to_json_line()?)?;
    }
    Ok(())
}

fn gen_data(common: &Common, episodes: usize, kind: DataKind, max_segment: usize, steps: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.env.episode_len = s;
    }
    let len = cfg.env.episode_len;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let data = match kind {
        DataKind::Expert => env::generate_dataset(&Skill::ALL, episodes, len, seed, &cfg.env)?,
        DataKind::Play => env::generate_play_dataset(&Skill::ALL, episodes, len, max_segment, seed, &cfg.env)?,
        DataKind::RandomWalk => (0..episodes as u64)
            .map(|i| env::random_walk_episode(goalcraft::seeds::derive(seed, &[i]), len, &cfg.env))
            .collect::<Result<Vec<_>>>()?,
    };
    create_out(&common.out)?;
    storage::write_trajectories(common.out.join("trajectories.mtrj"), &data)?;
    log::info!("wrote {} trajectories", data.len());
    finish(
        "gen-data",
        &cfg,
        &common.out,
        &["trajectories.mtrj"],
        json!({"trajectories": data.len(), "seed": seed, "kind": format!("{kind:?}")}),
    )
}

fn train_idm_cmd(common: &Common, data: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let trajs = storage::read_trajectories(data)?;
    let (params, report) = idm::train_idm(&trajs, &cfg.idm)?;
    log::info!("idm held-out accuracy {:.4}", report.accuracy);
    create_out(&common.out)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        step: 0,
        params,
        optimizer: None,
    };
    storage::write_checkpoint(common.out.join("idm.mckp"), &ck)?;
    println!("accuracy {:.4}", report.accuracy);
    finish("train-idm", &cfg, &common.out, &["idm.mckp"], serde_json::to_value(&report)?)
}

fn pseudo_label_cmd(common: &Common, data: &Path, idm_path: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let truth = storage::read_trajectories(data)?;
    let ck = storage::read_checkpoint(idm_path)?;
    let model = Idm::new(&ck.config.idm);
    let labelled = idm::pseudo_label(&env::strip_actions(&truth), &model, &ck.params)?;
    let has_truth = truth.iter().all(|t| t.actions.is_some());
    let agreement = has_truth.then(|| idm::label_agreement(&labelled, &truth));
    if let Some(a) = agreement {
        println!("agreement {a:.4}");
    }
    create_out(&common.out)?;
    storage::write_trajectories(common.out.join("pseudo.mtrj"), &labelled)?;
    finish(
        "pseudo-label",
        &cfg,
        &common.out,
        &["pseudo.mtrj"],
        json!({"trajectories": labelled.len(), "agreement": agreement}),
    )
}

fn train_cmd(common: &Common, data: &Path, lambda_kl: Option<f64>, epochs: Option<usize>, unconditional: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(l) = lambda_kl {
        cfg.train.lambda_kl = l;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.train.unconditional |= unconditional;
    cfg.validate()?;
    let trajs = storage::read_trajectories(data)?;
    create_out(&common.out)?;
    let mut metrics = fs::File::create(common.out.join("metrics.jsonl"))?;
    let outcome = train::train_agent(&trajs, &cfg, Some(&mut metrics))?;
    storage::write_checkpoint(common.out.join("checkpoint.mckp"), &outcome.checkpoint)?;
    let last = outcome.history.last();
    finish(
        "train",
        &cfg,
        &common.out,
        &["checkpoint.mckp", "metrics.jsonl"],
        json!({"step": outcome.checkpoint.step, "final": last}),
    )
}

fn rollout_options(cfg: &RunConfig, noise_seed: u64) -> RolloutOptions {
    RolloutOptions {
        sampling: cfg.inference.sampling(),
        noise_seed,
    }
}

fn rollout_cmd(common: &Common, run: &RunArgs, goal_ref: &str, concat_ref: Option<&str>, episodes: usize) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = run.steps {
        cfg.inference.steps = s;
    }
    cfg.validate()?;
    let ck = storage::read_checkpoint(&run.checkpoint)?;
    let mut clip = ClipRef::parse(goal_ref)?.load()?;
    if let Some(other) = concat_ref {
        let second = ClipRef::parse(other)?.load()?;
        clip = inference::concat_videos(&clip, &second, ck.config.train.chunk_len)?;
    }
    let goal = inference::encode_reference(&clip, &ck)?;
    let guide = guidance(run, &ck, &cfg)?;
    let logs = (0..episodes as u64)
        .map(|i| {
            inference::rollout(
                run.world_seed + i,
                &cfg.env,
                &goal,
                &ck,
                cfg.inference.steps,
                guide.as_ref(),
                rollout_options(&cfg, goalcraft::seeds::derive(cfg.inference.seed, &[i])),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    create_out(&common.out)?;
    write_logs(&common.out.join("episodes.jsonl"), &logs)?;
    let mut events: BTreeMap<String, usize> = BTreeMap::new();
    for log in &logs {
        for e in log.events() {
            *events.entry(e.tag.clone()).or_default() += 1;
        }
    }
    for (tag, n) in &events {
        println!("{tag} {n}");
    }
    finish("rollout", &cfg, &common.out, &["episodes.jsonl"], json!({"episodes": logs.len(), "events": events}))
}

fn parse_stage(s: &str) -> Result<(StageGoal, String, usize)> {
    let parts: Vec<&str> = s.split(';').collect();
    let [clip, pred, max] = parts.as_slice() else {
        return Err(Error::Invalid(format!("stage `{s}` is not CLIP;PREDICATE;MAX_STEPS")));
    };
    let max: usize = max
        .trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("bad max_steps in stage `{s}`")))?;
    Ok((StageGoal::Video(ClipRef::parse(clip.trim())?.load()?), pred.trim().to_string(), max))
}

fn chain_cmd(common: &Common, run: &RunArgs, stages: &[String]) -> Result<()> {
    let cfg = load_config(common)?;
    let parsed = stages.iter().map(|s| parse_stage(s)).collect::<Result<Vec<_>>>()?;
    let chain = ChainSpec::parse(parsed.iter().map(|(g, p, m)| (g.clone(), p.as_str(), *m)).collect())?;
    let ck = storage::read_checkpoint(&run.checkpoint)?;
    let guide = guidance(run, &ck, &cfg)?;
    let log = inference::chain_rollout(run.world_seed, &cfg.env, &chain, &ck, guide.as_ref(), rollout_options(&cfg, cfg.inference.seed))?;
    create_out(&common.out)?;
    write_logs(&common.out.join("episodes.jsonl"), std::slice::from_ref(&log))?;
    println!("switch_ticks {:?}", log.switch_ticks);
    finish(
        "chain",
        &cfg,
        &common.out,
        &["episodes.jsonl"],
        json!({"switch_ticks": log.switch_ticks, "total_steps": log.total_steps}),
    )
}

fn tournament_cmd(common: &Common, specs: &[String], refs: Option<&Path>, steps: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.eval.task_steps = s;
    }
    cfg.validate()?;
    let mut agents = Vec::new();
    for spec in specs {
        let agent = match spec.as_str() {
            "expert" => ("expert".to_string(), Agent::Expert),
            "random" => ("random".to_string(), Agent::Random),
            other => {
                let (name, path) = other
                    .split_once('=')
                    .ok_or_else(|| Error::Invalid(format!("agent `{other}` is not expert, random or NAME=CHECKPOINT")))?;
                let ck = storage::read_checkpoint(path)?;
                let refs = refs.ok_or_else(|| Error::Invalid("model agents need --refs".into()))?;
                let references = experiment::skill_references(&storage::read_trajectories(refs)?, ck.config.train.chunk_len)?;
                let guidance = cfg
                    .inference
                    .guidance
                    .then(|| inference::free_roam_guidance(&ck, &cfg.env, &cfg.inference))
                    .transpose()?;
                (
                    name.to_string(),
                    Agent::Model {
                        checkpoint: Box::new(ck),
                        references,
                        guidance,
                        sampling: cfg.inference.sampling(),
                    },
                )
            }
        };
        agents.push(agent);
    }
    if agents.len() < 2 {
        return Err(Error::Invalid("a tournament needs at least two agents".into()));
    }
    let world_seeds = experiment::eval_seeds(cfg.eval.seed, cfg.eval.episodes_per_task);
    let pool = experiment::episode_pool(&agents, &cfg.env, &world_seeds, cfg.eval.task_steps)?;
    let names: Vec<&str> = agents.iter().map(|(n, _)| n.as_str()).collect();
    if !names.contains(&cfg.eval.anchor.as_str()) {
        cfg.eval.anchor = names[0].to_string();
        log::warn!("anchor not among the agents; anchoring {}", cfg.eval.anchor);
    }
    let tasks: Vec<TaskSpec> = Skill::ALL.iter().map(|&s| TaskSpec::for_skill(s)).collect();
    let table = evaluation::run_tournament(&pool, &tasks, &cfg.eval)?;
    let mut success = BTreeMap::new();
    for (agent, per_task) in &pool {
        let rates: BTreeMap<&str, f64> = tasks
            .iter()
            .map(|t| (t.name.as_str(), evaluation::success_rate(t, &per_task[&t.name])))
            .collect();
        success.insert(agent.clone(), rates);
    }
    for (agent, rating) in &table.ratings {
        println!("{agent} {rating:.1}");
    }
    create_out(&common.out)?;
    fs::write(
        common.out.join("elo.json"),
        serde_json::to_string_pretty(&json!({"ratings": table.ratings, "success": success}))?,
    )?;
    finish(
        "tournament",
        &cfg,
        &common.out,
        &["elo.json"],
        json!({"ratings": table.ratings, "matches": table.history.len()}),
    )
}

fn goal_report_cmd(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ck = storage::read_checkpoint(checkpoint)?;
    let trajs = storage::read_trajectories(data)?;
    let report = evaluation::goal_space_report(&ck, &trajs, &CategorySpec::standard(), cfg.eval.clips_per_category, cfg.eval.seed)?;
    println!("accuracy {:.4} chance {:.4}", report.accuracy, report.chance);
    create_out(&common.out)?;
    fs::write(common.out.join("embeddings.csv"), report.to_csv())?;
    finish(
        "goal-report",
        &cfg,
        &common.out,
        &["embeddings.csv"],
        json!({"accuracy": report.accuracy, "chance": report.chance, "categories": report.categories, "cosine": report.cosine}),
    )
}

/// Returns whether the check passed.
fn grad_check_cmd(common: &Common) -> Result<bool> {
    let cfg = load_config(common)?;
    let err = train::loss_grad_check(&cfg, cfg.train.seed)?;
    println!("max_rel_error {err:e}");
    create_out(&common.out)?;
    finish("grad-check", &cfg, &common.out, &[], json!({"max_rel_error": err}))?;
    Ok(err <= 1e-4)
}

fn align_text_cmd(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let frozen = storage::read_checkpoint(checkpoint)?;
    let trajs: Vec<Trajectory> = storage::read_trajectories(data)?;
    let pairs = trajs
        .into_iter()
        .filter_map(|t| {
            let skill: Skill = t.skill_label.as_deref()?.parse().ok()?;
            Some((goalcraft::text::tokenize_tag(skill.defining_event()), t))
        })
        .collect::<Vec<_>>();
    let aligned = train::align_text_encoder(&pairs, &frozen, &cfg.train.text)?;
    create_out(&common.out)?;
    storage::write_checkpoint(common.out.join("checkpoint.mckp"), &aligned)?;
    finish("align-text", &cfg, &common.out, &["checkpoint.mckp"], json!({"pairs": pairs.len()}))
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData {
            common,
            episodes,
            kind,
            max_segment,
            steps,
        } => gen_data(common, *episodes, *kind, *max_segment, *steps)?,
        Command::TrainIdm { common, data } => train_idm_cmd(common, data)?,
        Command::PseudoLabel { common, data, idm } => pseudo_label_cmd(common, data, idm)?,
        Command::Train {
            common,
            data,
            lambda_kl,
            epochs,
            unconditional,
        } => train_cmd(common, data, *lambda_kl, *epochs, *unconditional)?,
        Command::Rollout {
            common,
            run,
            goal_ref,
            concat_ref,
            episodes,
        } => rollout_cmd(common, run, goal_ref, concat_ref.as_deref(), *episodes)?,
        Command::Chain { common, run, stages } => chain_cmd(common, run, stages)?,
        Command::Tournament {
            common,
            agents,
            refs,
            steps,
        } => tournament_cmd(common, agents, refs.as_deref(), *steps)?,
        Command::GoalReport { common, checkpoint, data } => goal_report_cmd(common, checkpoint, data)?,
        Command::GradCheck { common } => return grad_check_cmd(common),
        Command::AlignText { common, checkpoint, data } => align_text_cmd(common, checkpoint, data)?,
    }
    Ok(true)
}

/// Exit status for an error: 1 for bad input, 2 for failures at run time.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Domain(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
