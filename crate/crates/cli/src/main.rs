use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tidy_core::comm::Protocol;
use tidy_core::harness::{
    episode_seed, render_table, replay, run_episode_full, run_suite, to_csv, Ablations, EpisodeConfig, Knowledge,
    Policy, Roster, SuiteConfig, TaskSet, TrajectoryLog,
};
use tidy_core::knowledge::Ontology;
use tidy_core::learn::{accuracy, train_imitation, PolicyModel, TrainConfig};
use tidy_core::perception::DetectorNoise;
use tidy_core::taskgen::{
    demo_is_valid, generate_batch, generate_expert_demo, DemoBatch, TaskBatch, STARTS_PER_SET, START_SETS,
    TASK_SCHEMA_VERSION,
};
use tidy_core::world::{builtin_scene, builtin_scene_names, load_scene, CapabilityVector, Scene};

#[derive(Parser)]
#[command(name = "tidy", version, about = "Multi-agent tidying in a deterministic gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a batch of tidying tasks from scenes
    Gen(GenArgs),
    /// Record expert demonstrations for a task batch
    Demo(DemoArgs),
    /// Fit the imitation heads on recorded demonstrations
    Train(TrainArgs),
    /// Evaluate configurations on a task batch and write reports
    Eval(EvalArgs),
    /// Re-execute a trajectory log and print its frames
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Setting {
    #[value(name = "I")]
    I,
    #[value(name = "II")]
    II,
    /// A single full-capability agent
    #[value(name = "SA")]
    Sa,
    /// Capabilities from --roster
    #[value(name = "custom")]
    Custom,
}

#[derive(Clone, Copy, ValueEnum)]
enum KnowledgeArg {
    Perceived,
    Oracle,
    Misplacements,
}

#[derive(Args)]
struct TeamArgs {
    #[arg(long, value_enum, ignore_case = true, default_value = "I")]
    setting: Setting,
    /// Capability triples nav/mani/hei for --setting custom, e.g. 100,101,111
    #[arg(long)]
    roster: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    /// Shipped scene name or scene TOML path; repeatable (default: every shipped scene)
    #[arg(long = "scene")]
    scenes: Vec<String>,
    #[arg(long, default_value_t = 10)]
    per_scene: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[command(flatten)]
    team: TeamArgs,
    /// Start sets to use, comma separated, or `all`
    #[arg(long, default_value = "all")]
    starts: String,
    #[arg(long, default_value_t = 300)]
    max_steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    demos: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Model file; the loss trace goes next to it as `<out>.loss.csv`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[command(flatten)]
    team: TeamArgs,
    /// Protocols, comma separated, or `all`
    #[arg(long, default_value = "HanGrCom")]
    protocol: String,
    #[arg(long, default_value = "heuristic")]
    policy: String,
    /// Switches: know, det, pred, flat, comm (comm forces NoComm)
    #[arg(long, default_value = "")]
    ablation: String,
    #[arg(long, value_enum, default_value = "perceived")]
    knowledge: KnowledgeArg,
    /// Detector false-positive and false-negative probability
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Model file, required by the learned policy
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    starts: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    max_steps: usize,
    #[arg(long)]
    workers: Option<usize>,
    /// Also write one trajectory log per episode under `<out>/logs`
    #[arg(long)]
    trace: bool,
    /// Report directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    log: PathBuf,
    /// Scene TOML the log was recorded on (default: the shipped scene of that name)
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Print one ASCII frame per round
    #[arg(long)]
    frames: bool,
    /// Write the frames to this file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let kb = Ontology::builtin();
    match cli.command {
        Command::Gen(a) => gen(a, &kb),
        Command::Demo(a) => demo(a, &kb),
        Command::Train(a) => train(a, &kb),
        Command::Eval(a) => eval(a, &kb),
        Command::Replay(a) => replay_cmd(a, &kb),
    }
}

fn gen(a: GenArgs, kb: &Ontology) -> Result<()> {
    let names: Vec<String> = if a.scenes.is_empty() {
        builtin_scene_names().into_iter().map(String::from).collect()
    } else {
        a.scenes
    };
    let mut scenes = Vec::new();
    for n in &names {
        scenes.push(open_scene(n, kb)?);
    }
    let batch = generate_batch(&scenes, kb, a.per_scene, a.seed)?;
    write(&a.out, &serde_json::to_string_pretty(&batch)?)?;
    println!(
        "{} tasks over {} scenes -> {}",
        batch.tasks.len(),
        scenes.len(),
        a.out.display()
    );
    Ok(())
}

fn demo(a: DemoArgs, kb: &Ontology) -> Result<()> {
    let (batch, scenes) = load_tasks(&a.tasks, kb)?;
    let roster = a.team.roster()?;
    let starts = parse_starts(&a.starts)?;
    let mut demos = Vec::new();
    let mut failed = 0;
    for task in &batch.tasks {
        let scene = scene_named(&scenes, &task.scene_name)?;
        for &s in &starts {
            match generate_expert_demo(scene, task, &roster, kb, s) {
                Ok(d) if demo_is_valid(scene, task, &d, kb, a.max_steps)? => demos.push(d),
                Ok(_) => {
                    failed += 1;
                    eprintln!(
                        "task {} start {s}: demonstration does not replay within {} steps",
                        task.seed, a.max_steps
                    );
                }
                Err(e) => {
                    failed += 1;
                    eprintln!("task {} start {s}: {e}", task.seed);
                }
            }
        }
    }
    let out = DemoBatch {
        schema_version: TASK_SCHEMA_VERSION,
        demos,
    };
    write(&a.out, &serde_json::to_string(&out)?)?;
    println!(
        "{} demonstrations ({failed} failed) -> {}",
        out.demos.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, kb: &Ontology) -> Result<()> {
    let text = read(&a.demos)?;
    let batch: DemoBatch = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.demos.display()))?;
    if batch.schema_version != TASK_SCHEMA_VERSION {
        bail!(
            "{}: demonstration schema {} is not {TASK_SCHEMA_VERSION}",
            a.demos.display(),
            batch.schema_version
        );
    }
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        seed: a.seed,
        ..d
    };
    let model = train_imitation(&batch.demos, &cfg, kb)?;
    model.save(&a.out)?;
    let mut trace = String::from("slot,epoch,loss\n");
    for agent in &model.agents {
        for (e, l) in agent.loss_trace.iter().enumerate() {
            trace.push_str(&format!("{},{},{l}\n", agent.slot, e + 1));
        }
    }
    let trace_path = sibling(&a.out, "loss.csv");
    write(&trace_path, &trace)?;
    let acc = accuracy(&model, &batch.demos)?;
    println!(
        "trained {} slot(s) on {} demonstrations; sub-goal accuracy {:.3} -> {}",
        model.agents.len(),
        batch.demos.len(),
        acc,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs, kb: &Ontology) -> Result<()> {
    let (batch, scenes) = load_tasks(&a.tasks, kb)?;
    let roster = a.team.roster()?;
    let starts = parse_starts(&a.starts)?;
    let policy: Policy = a.policy.parse()?;

    let mut switches = Vec::new();
    let mut no_comm = false;
    for part in a.ablation.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.to_ascii_lowercase().as_str() {
            "comm" | "no-comm" => no_comm = true,
            _ => switches.push(part),
        }
    }
    let ablations = Ablations::parse_list(&switches.join(","))?;

    let protocols: Vec<Protocol> = if no_comm {
        vec![Protocol::NoComm]
    } else if a.protocol.eq_ignore_ascii_case("all") {
        Protocol::ALL.to_vec()
    } else {
        a.protocol
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()?
    };

    let model = match (&a.model, policy) {
        (Some(p), _) => {
            let m = PolicyModel::load(p)?;
            m.check_vocabulary(kb)?;
            Some(m)
        }
        (None, Policy::Learned) => bail!("--policy learned needs --model"),
        (None, _) => None,
    };

    let setting = a.team.label();
    let configs: Vec<SuiteConfig> = protocols
        .iter()
        .map(|&p| {
            let mut ep = EpisodeConfig::new(roster.clone(), p);
            ep.policy = policy;
            ep.ablations = ablations;
            ep.max_steps = a.max_steps;
            ep.noise = DetectorNoise {
                fp: a.noise,
                fn_: a.noise,
            };
            ep.knowledge = match a.knowledge {
                KnowledgeArg::Perceived => Knowledge::Perceived,
                KnowledgeArg::Oracle => Knowledge::Oracle,
                KnowledgeArg::Misplacements => Knowledge::Misplacements,
            };
            let mut name = format!("{setting}-{p}");
            if policy != Policy::Heuristic {
                name.push_str(&format!("-{policy}"));
            }
            let extra = ablations.label();
            if !extra.is_empty() {
                name.push_str(&format!("[{extra}]"));
            }
            SuiteConfig::new(name, ep)
        })
        .collect();

    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let set = TaskSet {
        scenes,
        tasks: batch.tasks,
        starts,
    };
    let report = run_suite(&set, &configs, kb, a.seed, model.as_ref(), workers)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut records = String::new();
    for (name, r) in &report.records {
        records.push_str(&json!({ "config": name, "record": r }).to_string());
        records.push('\n');
    }
    write(&a.out.join("records.jsonl"), &records)?;
    let rows = report.table_rows();
    write(&a.out.join("metrics.csv"), &to_csv(&rows)?)?;
    let table = render_table(&rows);
    write(&a.out.join("table.txt"), &table)?;
    print!("{table}");
    for (name, seed, start, err) in &report.errors {
        eprintln!("{name}: task {seed} start {start}: {err}");
    }

    if a.trace {
        let dir = a.out.join("logs");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = 0;
        for c in &configs {
            for task in &set.tasks {
                let scene = scene_named(&set.scenes, &task.scene_name)?;
                for &s in &set.starts {
                    let seed = episode_seed(a.seed, task, s);
                    let run = run_episode_full(scene, task, &c.episode, kb, s, seed, model.as_ref(), true)?;
                    let Some(log) = run.log else { continue };
                    let file = format!("{}_{}_{s}.jsonl", file_safe(&c.name), task.seed);
                    write(&dir.join(file), &log.to_jsonl())?;
                    written += 1;
                }
            }
        }
        println!("{written} trajectory logs -> {}", dir.display());
    }
    println!("reports -> {}", a.out.display());
    Ok(())
}

fn replay_cmd(a: ReplayArgs, kb: &Ontology) -> Result<()> {
    let log = TrajectoryLog::from_jsonl(&read(&a.log)?).with_context(|| format!("reading {}", a.log.display()))?;
    let scene = match &a.scene {
        Some(p) => load_scene(p, kb)?,
        None => builtin_scene(&log.header.scene_name, kb)
            .with_context(|| format!("`{}` is not a shipped scene; pass --scene", log.header.scene_name))?,
    };
    let r = replay(&log, &scene, kb, a.frames)?;
    if a.frames {
        let mut text = String::new();
        for (i, f) in r.frames.iter().enumerate() {
            text.push_str(&format!("round {}\n{f}\n", i + 1));
        }
        match &a.out {
            Some(p) => write(p, &text)?,
            None => print!("{text}"),
        }
    }
    println!(
        "replayed {} rounds, {} steps; final hash {} matches",
        log.rounds.len(),
        r.len,
        &log.footer.final_hash[..12]
    );
    Ok(())
}

impl TeamArgs {
    fn roster(&self) -> Result<Vec<CapabilityVector>> {
        if self.setting != Setting::Custom {
            if self.roster.is_some() {
                bail!("--roster only applies to --setting custom");
            }
            return Ok(match self.setting {
                Setting::I => Roster::SettingI,
                Setting::II => Roster::SettingII,
                _ => Roster::SingleAgent,
            }
            .capabilities());
        }
        let Some(text) = &self.roster else {
            bail!("--setting custom needs --roster, e.g. 100,101,111");
        };
        let caps = text
            .split(',')
            .map(|t| parse_capability(t.trim()))
            .collect::<Result<Vec<_>>>()?;
        if caps.is_empty() || caps.len() > STARTS_PER_SET {
            bail!("a roster has 1 to {STARTS_PER_SET} agents, got {}", caps.len());
        }
        Ok(caps)
    }

    fn label(&self) -> String {
        match self.setting {
            Setting::I => "I".into(),
            Setting::II => "II".into(),
            Setting::Sa => "SA".into(),
            Setting::Custom => format!("custom({})", self.roster.as_deref().unwrap_or("")),
        }
    }
}

fn parse_capability(t: &str) -> Result<CapabilityVector> {
    let bits: Vec<bool> = t
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => bail!("capability `{t}` must be three 0/1 digits"),
        })
        .collect::<Result<_>>()?;
    if bits.len() != 3 {
        bail!("capability `{t}` must be three 0/1 digits");
    }
    Ok(CapabilityVector::new(bits[0], bits[1], bits[2]))
}

fn parse_starts(s: &str) -> Result<Vec<usize>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok((0..START_SETS).collect());
    }
    let starts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad start `{p}`")))
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = starts.iter().find(|&&x| x >= START_SETS) {
        bail!("start {bad} out of range, there are {START_SETS} start sets");
    }
    Ok(starts)
}

/// A shipped scene by name, or a scene TOML file.
fn open_scene(name: &str, kb: &Ontology) -> Result<(Scene, String)> {
    if builtin_scene_names().contains(&name) {
        return Ok((builtin_scene(name, kb)?, format!("builtin:{name}")));
    }
    let scene = load_scene(name, kb)
        .with_context(|| format!("`{name}` is neither a shipped scene nor a readable scene file"))?;
    Ok((scene, name.to_string()))
}

/// Reads a task batch and loads every scene it references, checking hashes.
fn load_tasks(path: &Path, kb: &Ontology) -> Result<(TaskBatch, Vec<Scene>)> {
    let batch: TaskBatch = serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    if batch.schema_version != TASK_SCHEMA_VERSION {
        bail!(
            "{}: task schema {} is not {TASK_SCHEMA_VERSION}",
            path.display(),
            batch.schema_version
        );
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut scenes = Vec::new();
    for r in &batch.scenes {
        let scene = match r.source.strip_prefix("builtin:") {
            Some(name) => builtin_scene(name, kb)?,
            None => {
                let p = Path::new(&r.source);
                let p = if p.exists() { p.to_path_buf() } else { base.join(p) };
                load_scene(&p, kb)?
            }
        };
        let mut tidy = scene.clone();
        tidy.set_agents(Vec::new())?;
        if tidy.hash() != r.hash {
            bail!(
                "scene `{}` from {} does not match the hash recorded in {}",
                r.name,
                r.source,
                path.display()
            );
        }
        scenes.push(scene);
    }
    if batch.tasks.is_empty() {
        bail!("{} holds no tasks", path.display());
    }
    Ok((batch, scenes))
}

fn scene_named<'a>(scenes: &'a [Scene], name: &str) -> Result<&'a Scene> {
    scenes
        .iter()
        .find(|s| s.name == name)
        .with_context(|| format!("no scene named `{name}` in the task batch"))
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
