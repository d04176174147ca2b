use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ciss_lab::harness::{
    default_output_root, run_ablation_suite, run_scenario_with, Method, Preset, RunOptions,
    ScenarioConfig, Suite,
};
use ciss_lab::heads::{load_checkpoint, HeadInit};
use ciss_lab::labelaug::{augment_labels, PrevModelOutput};
use ciss_lab::memory::SamplingPolicy;
use ciss_lab::metrics::MetricsReport;
use ciss_lab::raster::{Raster, SceneMeta};
use ciss_lab::synth::{build_eval_set, build_task_dataset, Scene};

#[derive(Parser)]
#[command(name = "ciss-lab", version, about = "Class-incremental segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render task datasets and the evaluation set as raster files.
    GenData {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Only this task (default: every task plus the evaluation set).
        #[arg(long)]
        task: Option<usize>,
    },
    /// Run a scenario and write checkpoints and reports.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Continue from a checkpoint of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run an ablation suite and print a side-by-side table.
    Ablate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_enum)]
        suite: SuiteArg,
        /// Comma-separated seeds shared by every variant.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Regenerate report.csv (and print a summary) from a run's report.json.
    Report {
        dir: PathBuf,
    },
    /// Write augmented training labels for the task after a checkpoint.
    Augment {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Model after task t-1; omit for the first task.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Table3,
    Table4,
    TauSweep,
    MemorySize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    S8,
    S16,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ssul,
    SsulM,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    ClassBalanced,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadInitArg {
    WeightTransfer,
    Random,
    FromCb,
}

#[derive(Args)]
struct ScenarioArgs {
    /// JSON scenario config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, value_enum, default_value = "s8")]
    preset: PresetArg,
    /// Master seed; re-derives every stream in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $CISS_LAB_OUT/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    memory: Option<usize>,
    #[arg(long, value_enum)]
    sampling: Option<SamplingArg>,
    #[arg(long, value_enum)]
    head_init: Option<HeadInitArg>,
    #[arg(long)]
    no_unknown: bool,
    #[arg(long)]
    no_freeze: bool,
    #[arg(long)]
    softmax_ce: bool,
    #[arg(long)]
    no_saliency: bool,
    #[arg(long)]
    saliency_corruption: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_per_task: Option<usize>,
    /// Scenes in the first task's training set.
    #[arg(long)]
    base_train: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
}

impl ScenarioArgs {
    fn resolve(&self) -> ciss_lab::Result<ScenarioConfig> {
        let mut c = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::preset(
                match self.preset {
                    PresetArg::S8 => Preset::S8,
                    PresetArg::S16 => Preset::S16,
                },
                0,
            ),
        };
        if let Some(s) = self.seed {
            c = c.with_seed(s);
        }
        if let Some(m) = self.method {
            c.method = match m {
                MethodArg::Ssul => Method::Ssul,
                MethodArg::SsulM => Method::SsulM,
            };
        }
        if let Some(t) = self.tau {
            c.augment.tau = t;
        }
        if let Some(m) = self.memory {
            c.memory.capacity = m;
        }
        if let Some(s) = self.sampling {
            c.memory.sampling = match s {
                SamplingArg::ClassBalanced => SamplingPolicy::ClassBalanced,
                SamplingArg::Random => SamplingPolicy::Random,
            };
        }
        if let Some(h) = self.head_init {
            c.ablation.head_init = match h {
                HeadInitArg::WeightTransfer => HeadInit::WeightTransfer,
                HeadInitArg::Random => HeadInit::Random,
                HeadInitArg::FromCb => HeadInit::FromCb,
            };
        }
        c.ablation.no_unknown |= self.no_unknown;
        c.ablation.no_freeze |= self.no_freeze;
        c.ablation.softmax_ce |= self.softmax_ce;
        if self.no_saliency {
            c.augment.use_saliency = false;
        }
        if let Some(p) = self.saliency_corruption {
            c.augment.saliency_corruption = p;
        }
        if let Some(lr) = self.learning_rate {
            c.train.learning_rate = lr;
        }
        if let Some(e) = self.epochs {
            c.train.base_epochs = e;
            c.train.incremental_epochs = e;
        }
        if let Some(n) = self.train_per_task {
            c.data.train_per_task = n;
        }
        if let Some(n) = self.base_train {
            c.data.base_train = Some(n);
        }
        if let Some(n) = self.eval_size {
            c.data.eval_size = n;
        }
        c.output_dir = Some(match (&self.out, &c.output_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => o.clone(),
            (None, None) => default_output_root().join(if c.name.is_empty() { "run" } else { &c.name }),
        });
        c.validate()?;
        Ok(c)
    }
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ciss_lab::Error> for Failure {
    fn from(e: ciss_lab::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<ciss_lab::Error>() {
            Some(inner) if inner.is_config() => Failure::Config(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenData { scenario, task } => {
            let cfg = scenario.resolve()?;
            gen_data(&cfg, task)?;
        }
        Command::Run {
            scenario,
            resume,
            stop_after,
        } => {
            let cfg = scenario.resolve()?;
            let outcome = run_scenario_with(&cfg, &RunOptions { stop_after, resume_from: resume })?;
            print_summary(&outcome.report);
            println!("wrote {}", cfg.output_dir.as_deref().unwrap_or(Path::new(".")).display());
        }
        Command::Ablate {
            scenario,
            suite,
            seeds,
        } => {
            let cfg = scenario.resolve()?;
            let suite = match suite {
                SuiteArg::Table3 => Suite::Table3,
                SuiteArg::Table4 => Suite::Table4,
                SuiteArg::TauSweep => Suite::TauSweep,
                SuiteArg::MemorySize => Suite::MemorySize,
            };
            let rep = run_ablation_suite(&cfg, suite, &seeds)?;
            print!("{}", rep.to_table());
            if let Some(dir) = &cfg.output_dir {
                std::fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
                let path = dir.join(format!("ablation_{}.json", suite_name(suite)));
                std::fs::write(&path, rep.to_json()?)
                    .with_context(|| format!("writing {}", path.display()))?;
                println!("wrote {}", path.display());
            }
        }
        Command::Report { dir } => {
            let json = dir.join("report.json");
            if !json.exists() {
                return Err(Failure::Config(anyhow::anyhow!(
                    "no report.json in {}",
                    dir.display()
                )));
            }
            let rep = MetricsReport::read(&dir)?;
            std::fs::write(dir.join("report.csv"), rep.to_csv()?).map_err(anyhow::Error::from)?;
            print_summary(&rep);
        }
        Command::Augment {
            scenario,
            checkpoint,
        } => {
            let cfg = scenario.resolve()?;
            augment(&cfg, checkpoint.as_deref())?;
        }
    }
    Ok(())
}

fn suite_name(s: Suite) -> &'static str {
    match s {
        Suite::Table3 => "table3",
        Suite::Table4 => "table4",
        Suite::TauSweep => "tau_sweep",
        Suite::MemorySize => "memory_size",
    }
}

fn print_summary(rep: &MetricsReport) {
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
    println!("{:>4} {:>8} {:>8} {:>8}", "step", "base", "incr", "all");
    for s in &rep.steps {
        println!(
            "{:>4} {:>8} {:>8} {:>8}",
            s.step,
            show(s.miou_base),
            show(s.miou_incremental),
            show(s.miou_all)
        );
    }
}

fn write_scene(dir: &Path, stem: &str, scene: &Scene, labels: Option<&ciss_lab::synth::LabelRaster>, task: usize) -> Result<()> {
    Raster::from_image(&scene.image).write(dir.join(format!("{stem}.image.ras")))?;
    Raster::from_labels(&scene.full_labels).write(dir.join(format!("{stem}.full.ras")))?;
    Raster::from_saliency(&scene.saliency).write(dir.join(format!("{stem}.saliency.ras")))?;
    let task_classes = match labels {
        Some(l) => {
            Raster::from_labels(l).write(dir.join(format!("{stem}.labels.ras")))?;
            l.classes_present().into_iter().filter(|c| c.is_foreground()).collect()
        }
        None => Vec::new(),
    };
    let meta = SceneMeta {
        scene_seed: scene.scene_seed,
        task,
        height: scene.image.height,
        width: scene.image.width,
        classes_present: scene
            .full_labels
            .classes_present()
            .into_iter()
            .filter(|c| c.is_foreground())
            .collect(),
        task_classes_present: task_classes,
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn gen_data(cfg: &ScenarioConfig, only: Option<usize>) -> std::result::Result<(), Failure> {
    let schedule = cfg.schedule.build()?;
    let root = cfg.output_dir.clone().expect("resolved");
    let tasks: Vec<usize> = match only {
        Some(t) => {
            schedule.task(t)?;
            vec![t]
        }
        None => (1..=schedule.num_tasks()).collect(),
    };
    for t in tasks {
        let dir = root.join(format!("task_{t:02}"));
        std::fs::create_dir_all(&dir).map_err(anyhow::Error::from)?;
        let data = build_task_dataset(&schedule, t, cfg.data.scenes_for_task(t), cfg.seeds.data, cfg.protocol, &cfg.data.geometry)?;
        for (i, s) in data.iter().enumerate() {
            write_scene(&dir, &format!("scene_{i:05}"), &s.scene, Some(&s.labels), t)?;
        }
        println!("task {t}: {} scenes -> {}", data.len(), dir.display());
    }
    if only.is_none() {
        let dir = root.join("eval");
        std::fs::create_dir_all(&dir).map_err(anyhow::Error::from)?;
        let eval = build_eval_set(&schedule, cfg.data.eval_size, cfg.seeds.eval, &cfg.data.geometry)?;
        for (i, s) in eval.iter().enumerate() {
            write_scene(&dir, &format!("scene_{i:05}"), s, None, 0)?;
        }
        println!("eval: {} scenes -> {}", eval.len(), dir.display());
    }
    std::fs::write(
        root.join("schedule.json"),
        serde_json::to_string_pretty(&schedule).map_err(anyhow::Error::from)?,
    )
    .map_err(anyhow::Error::from)?;
    Ok(())
}

fn augment(cfg: &ScenarioConfig, checkpoint: Option<&Path>) -> std::result::Result<(), Failure> {
    let schedule = cfg.schedule.build()?;
    let prev = match checkpoint {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let t = prev.as_ref().map_or(1, |c| c.model.task_index() + 1);
    if t > schedule.num_tasks() {
        return Err(Failure::Config(anyhow::anyhow!(
            "checkpoint is already at the last task ({})",
            t - 1
        )));
    }
    let current = schedule.task(t)?.clone();
    let past = schedule.past_classes(t)?;
    let data = build_task_dataset(&schedule, t, cfg.data.scenes_for_task(t), cfg.seeds.data, cfg.protocol, &cfg.data.geometry)?;
    let dir = cfg.output_dir.clone().expect("resolved").join(format!("augmented_task_{t:02}"));
    std::fs::create_dir_all(&dir).map_err(anyhow::Error::from)?;
    let (mut pseudo, mut unknown) = (0usize, 0usize);
    for (i, s) in data.iter().enumerate() {
        let out = match &prev {
            Some(ck) => {
                let scores = ck.model.forward(&ck.model.features(&s.scene.image)?)?;
                Some(PrevModelOutput::from_scores(&scores, &past)?)
            }
            None => None,
        };
        let aug = augment_labels(&s.labels, &s.scene.saliency, out.as_ref(), &cfg.augment_config(), &current, &past)?;
        pseudo += aug.ids.iter().filter(|c| past.contains(c)).count();
        unknown += aug.ids.iter().filter(|c| **c == ciss_lab::ClassId::UNKNOWN).count();
        Raster::from_labels(&aug).write(dir.join(format!("scene_{i:05}.augmented.ras")))?;
    }
    println!(
        "task {t}: {} scenes, {pseudo} pseudo-labeled and {unknown} unknown pixels -> {}",
        data.len(),
        dir.display()
    );
    Ok(())
}
