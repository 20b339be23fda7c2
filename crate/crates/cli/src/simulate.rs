use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use classlist_core::checkpoint::VoteLog;
use classlist_core::engine::Checkpoint;
use classlist_core::sim::{backend_seed, fig4_world, summarize, synth_world, SimBackend, World, WorldSpec};
use classlist_core::{AggregationRule, Engine, EngineConfig, EngineError, Money, YearPairPolicy};
use serde::{Deserialize, Serialize};

use crate::{read_text, to_json_pretty, write_out, Classify, CmdResult, Failure, Fixture};

pub const RUN_FILE: &str = "run.json";
pub const CLASSES_FILE: &str = "classes.json";
pub const VOTES_FILE: &str = "votes.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum YearPairs {
    Adjacent,
    All,
}

impl From<YearPairs> for YearPairPolicy {
    fn from(y: YearPairs) -> Self {
        match y {
            YearPairs::Adjacent => YearPairPolicy::Adjacent,
            YearPairs::All => YearPairPolicy::AllPairs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Rule {
    Majority,
    QualityWeighted,
}

/// Engine knobs shared by `simulate` and `serve`.
#[derive(Args, Debug, Default)]
pub struct EngineFlags {
    /// Seed for task packing and gold placement.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Votes per question round (odd).
    #[arg(long)]
    pub k: Option<u32>,
    /// Cap on clique-repair rounds per group.
    #[arg(long)]
    pub max_rounds: Option<u32>,
    /// Report clique violations without re-querying them.
    #[arg(long)]
    pub no_repair: bool,
    /// Price per accepted task, in dollars.
    #[arg(long)]
    pub price: Option<f64>,
    #[arg(long, value_enum)]
    pub year_pairs: Option<YearPairs>,
    #[arg(long, value_enum)]
    pub rule: Option<Rule>,
}

impl EngineFlags {
    fn is_set(&self) -> bool {
        self.seed.is_some()
            || self.k.is_some()
            || self.max_rounds.is_some()
            || self.no_repair
            || self.price.is_some()
            || self.year_pairs.is_some()
            || self.rule.is_some()
    }

    pub fn apply(&self, c: &mut EngineConfig) -> Result<(), Failure> {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(k) = self.k {
            c.redundancy_k = k;
        }
        if let Some(r) = self.max_rounds {
            c.max_requery_rounds = r;
        }
        if self.no_repair {
            c.repair = false;
        }
        if let Some(p) = self.price {
            if !p.is_finite() || p < 0.0 {
                return Err(Failure::Config(format!("--price must be a non-negative amount, got {p}")));
            }
            c.price_per_task = Money::from_dollars_f64(p);
        }
        if let Some(y) = self.year_pairs {
            c.year_pairs = y.into();
        }
        if let Some(r) = self.rule {
            c.rule = match r {
                Rule::Majority => AggregationRule::Majority,
                Rule::QualityWeighted => AggregationRule::QualityWeighted,
            };
        }
        c.validate().config("engine settings")
    }
}

/// Layout of a `--config` TOML file: optional `[world]` and `[engine]`
/// tables, each defaulting field by field.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub world: Option<WorldSpec>,
    pub engine: EngineConfig,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => toml::from_str(&read_text(p)?).config(p.display()),
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Run a built-in fixture instead of a synthesized world.
    #[arg(long, value_enum)]
    pub fixture: Option<Fixture>,
    /// Fixture variant where the blue trim looks the same in both years.
    #[arg(long)]
    pub blue_persists: bool,
    /// TOML file with `[world]` and `[engine]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub world_seed: Option<u64>,
    /// Symmetric flip rate for every worker. Also sets the spammer share to
    /// zero unless `--spammers` is given.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Share of workers who answer at random.
    #[arg(long)]
    pub spammers: Option<f64>,
    /// Size of the simulated worker pool.
    #[arg(long)]
    pub workers: Option<u32>,
    #[command(flatten)]
    pub engine: EngineFlags,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dispatch at most this many tasks in this invocation.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Checkpoint path; defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue the run recorded in `<out>` from its checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Tasks between checkpoints.
    #[arg(long, default_value_t = 25)]
    pub checkpoint_every: u64,
}

/// Everything needed to rebuild a run; written to `<out>/run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub version: String,
    pub fixture: Option<String>,
    pub blue_persists: bool,
    pub world: WorldSpec,
    pub engine: EngineConfig,
    pub backend_seed: u64,
}

impl RunSpec {
    fn from_args(a: &SimulateArgs) -> Result<Self, Failure> {
        let file = ConfigFile::load(a.config.as_deref())?;
        let mut world = match (&file.world, a.fixture) {
            (Some(w), _) => w.clone(),
            // the fixture is about the workflow, not the crowd
            (None, Some(_)) => WorldSpec::default().noiseless(),
            (None, None) => WorldSpec::default(),
        };
        if let Some(s) = a.world_seed {
            world.seed = s;
        }
        if let Some(p) = a.noise {
            world.p_false_same = p;
            world.p_false_diff = p;
            world.spammer_fraction = 0.0;
        }
        if let Some(f) = a.spammers {
            world.spammer_fraction = f;
        }
        if let Some(n) = a.workers {
            world.n_workers = n;
        }
        world.validate().config("world settings")?;
        let mut engine = file.engine;
        a.engine.apply(&mut engine)?;
        Ok(Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            fixture: a.fixture.map(|_| "fig4".to_string()),
            blue_persists: a.blue_persists,
            backend_seed: backend_seed(world.seed, engine.seed),
            world,
            engine,
        })
    }

    fn build_world(&self) -> Result<World, Failure> {
        match self.fixture.as_deref() {
            Some("fig4") => Ok(fig4_world(self.blue_persists)),
            Some(other) => Err(Failure::Config(format!("unknown fixture `{other}`"))),
            None => synth_world(&self.world).config("world settings"),
        }
    }
}

fn has_run_overrides(a: &SimulateArgs) -> bool {
    a.fixture.is_some()
        || a.blue_persists
        || a.config.is_some()
        || a.world_seed.is_some()
        || a.noise.is_some()
        || a.spammers.is_some()
        || a.workers.is_some()
        || a.engine.is_set()
}

pub fn run(a: SimulateArgs) -> CmdResult {
    if a.checkpoint_every == 0 {
        return Err(Failure::Config("--checkpoint-every must be at least 1".into()));
    }
    let cp_path = a.checkpoint.clone().unwrap_or_else(|| a.out.join(CHECKPOINT_FILE));
    let votes_path = a.out.join(VOTES_FILE);
    let run_path = a.out.join(RUN_FILE);

    let (spec, world, mut engine, mut log) = if a.resume {
        if has_run_overrides(&a) {
            return Err(Failure::Config(
                "--resume takes its settings from run.json; drop the world and engine flags".into(),
            ));
        }
        let spec: RunSpec = serde_json::from_str(&read_text(&run_path)?).config(run_path.display())?;
        let world = spec.build_world()?;
        let cp = Checkpoint::from_json(&read_text(&cp_path)?).config(cp_path.display())?;
        let log = VoteLog::resume(&votes_path, cp.vote_log_offset).config(votes_path.display())?;
        let engine = Engine::restore(world.forest.clone(), world.golds.clone(), cp).config(cp_path.display())?;
        (spec, world, engine, log)
    } else {
        let spec = RunSpec::from_args(&a)?;
        let world = spec.build_world()?;
        let engine = Engine::new(world.forest.clone(), world.golds.clone(), spec.engine.clone())
            .config("engine settings")?;
        write_out(&run_path, &to_json_pretty(&spec))?;
        write_out(&a.out.join(TRUTH_FILE), &(world.truth.partition().to_json() + "\n"))?;
        let log = VoteLog::create(&votes_path).runtime(votes_path.display())?;
        (spec, world, engine, log)
    };

    let workers = spec.world.workers();
    let mut backend = SimBackend::new(workers, &world.truth, spec.backend_seed);
    let mut dispatched = 0u64;
    loop {
        let mut chunk = a.checkpoint_every;
        if let Some(b) = a.budget {
            chunk = chunk.min(b - dispatched);
        }
        let mut io_err = None;
        let res = engine.run(&mut backend, Some(chunk), &mut |votes| {
            if io_err.is_none() {
                io_err = log.append(votes).err();
            }
        });
        if let Some(e) = io_err {
            return Err(Failure::Runtime(format!("{}: {e}", votes_path.display())));
        }
        match res {
            Ok(_) => break,
            Err(EngineError::BudgetExhausted { dispatched: d }) => {
                dispatched += d;
                write_out(&cp_path, &engine.checkpoint().to_json())?;
                if a.budget.is_some_and(|b| dispatched >= b) {
                    return Err(Failure::Budget(format!(
                        "{dispatched} task(s) dispatched; resume with `classlist simulate --resume --out {}`",
                        a.out.display()
                    )));
                }
            }
            Err(e) => return Err(Failure::Runtime(e.to_string())),
        }
    }

    write_out(&cp_path, &engine.checkpoint().to_json())?;
    let classes = engine.class_list();
    write_out(&a.out.join(CLASSES_FILE), &classes.to_json())?;
    let world_echo = spec.fixture.is_none().then(|| spec.world.clone());
    let report = summarize(&engine, &world.truth, world_echo, spec.backend_seed);
    write_out(&a.out.join(REPORT_FILE), &report.to_json())?;

    println!("classes:      {}", report.n_classes);
    println!("true classes: {}", report.n_true_classes);
    println!("agreement:    {:.4}", report.agreement);
    println!("votes:        {}", report.votes);
    println!("crowd cost:   {}", report.cost.total_crowd_cost);
    println!("output:       {}", a.out.display());
    Ok(())
}
