use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use gcl::ablation::{mean_by_rung, run_rung, table, RungResult, WarmStart};
use gcl::config::RunConfig;
use gcl::eval::{evaluate, render_sheet};
use gcl::nets::archive::ParamArchive;
use gcl::trainer::{latest_checkpoint, read_metrics, RunState, CHECKPOINT_DIR, METRICS_FILE};
use gcl::world::{generate_dataset, save_png, Dataset, MANIFEST_FILE};

mod plot;

const DTYPE: candle_core::DType = candle_core::DType::F32;

#[derive(Parser, Debug)]
#[command(name = "gcl", version, about = "Joint generative and contrastive re-identification on a synthetic figure world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, env = "GCL_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides `run_dir` from the configuration.
    #[arg(long, global = true, env = "GCL_RUN_DIR")]
    run_dir: Option<PathBuf>,
    /// Checkpoint directory for eval and render; the newest one by default.
    #[arg(long, global = true, env = "GCL_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true, env = "GCL_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic world to PNG files and a manifest.
    GenData,
    /// Identity warm-up then GAN warm-up; resumes from the newest checkpoint.
    Warmup,
    /// Joint training after both warm-ups; resumes from the newest checkpoint.
    Train,
    /// Retrieval and generation metrics for a checkpoint.
    Eval,
    /// PNG sheet of generated views for one instance.
    Render {
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
    /// Loss ablation ladder over the configured seeds.
    Ablate,
    /// Loss and cluster-count curves from the metrics log.
    Plot,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<gcl::Error> for Failure {
    fn from(e: gcl::Error) -> Self {
        match e {
            gcl::Error::Config(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCL_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, String), Failure> {
    let (mut cfg, text) = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(anyhow!("cannot read config {}: {e}", path.display())))?;
            (RunConfig::from_toml(&text)?, text)
        }
        None => (RunConfig::default(), String::new()),
    };
    if let Some(dir) = &common.run_dir {
        cfg.run_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (cfg, text) = load_config(&cli.common)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Warmup => warmup(&cfg, &text),
        Command::Train => train(&cfg, &text),
        Command::Eval => eval(&cfg, cli.common.checkpoint.as_deref()),
        Command::Render { instance } => render(&cfg, cli.common.checkpoint.as_deref(), instance),
        Command::Ablate => ablate(&cfg, &text),
        Command::Plot => plot::plot(&cfg.run_dir).map_err(Failure::from),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<(), Failure> {
    let dir = cfg.data_dir();
    let manifest = generate_dataset(&cfg.world, &dir)?;
    log::info!("wrote {} images to {}", manifest.records.len(), dir.display());
    Ok(())
}

/// The configured dataset, rendered first if it does not exist yet.
fn dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let dir = cfg.data_dir();
    if !dir.join(MANIFEST_FILE).exists() {
        log::info!("no dataset at {}, generating", dir.display());
        generate_dataset(&cfg.world, &dir)?;
    }
    let manifest = gcl::world::DatasetManifest::load(&dir)?;
    if manifest.world != cfg.world {
        return Err(Failure::Usage(anyhow!(
            "dataset at {} was generated with a different [world] section",
            dir.display()
        )));
    }
    Ok(Dataset::load(&dir)?)
}

fn open_state(cfg: &RunConfig, text: &str) -> Result<RunState, Failure> {
    cfg.snapshot(text, &cfg.run_dir)?;
    let has_checkpoint = latest_checkpoint(&cfg.run_dir.join(CHECKPOINT_DIR))?.is_some();
    let state = if has_checkpoint {
        RunState::resume(cfg.train.clone(), &cfg.shapes, DTYPE, &cfg.run_dir)?
    } else {
        let mut s = RunState::new(cfg.train.clone(), &cfg.shapes, DTYPE)?;
        s.attach_run_dir(&cfg.run_dir)?;
        s
    };
    Ok(state)
}

fn warmup(cfg: &RunConfig, text: &str) -> Result<(), Failure> {
    let data = dataset(cfg)?;
    let mut state = open_state(cfg, text)?;
    state.warmup_identity(&data)?;
    state.warmup_gan(&data)?;
    log::info!("warm-up complete in {}", cfg.run_dir.display());
    Ok(())
}

fn train(cfg: &RunConfig, text: &str) -> Result<(), Failure> {
    let data = dataset(cfg)?;
    if latest_checkpoint(&cfg.run_dir.join(CHECKPOINT_DIR))?.is_none() {
        return Err(Failure::Usage(anyhow!("no warm-up checkpoint in {}; run `warmup` first", cfg.run_dir.display())));
    }
    let mut state = open_state(cfg, text)?;
    state.joint_train(&data)?;
    log::info!("joint training complete in {}", cfg.run_dir.display());
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf, Failure> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => latest_checkpoint(&cfg.run_dir.join(CHECKPOINT_DIR))?
            .ok_or_else(|| Failure::Usage(anyhow!("no checkpoint under {}", cfg.run_dir.display()))),
    }
}

fn load_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<(PathBuf, RunState), Failure> {
    let path = checkpoint_path(cfg, explicit)?;
    let archive = ParamArchive::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let state = RunState::from_archive(cfg.train.clone(), &cfg.shapes, DTYPE, archive)?;
    Ok((path, state))
}

fn checkpoint_name(path: &Path) -> String {
    path.file_name().map_or_else(|| "checkpoint".to_string(), |n| n.to_string_lossy().into_owned())
}

fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let data = dataset(cfg)?;
    let (path, state) = load_checkpoint(cfg, checkpoint)?;
    let metrics = cfg.run_dir.join(METRICS_FILE);
    let records = if metrics.exists() { read_metrics(&metrics)? } else { Vec::new() };
    let report = evaluate(&state.bundle, &data, &records, cfg.eval.generation)?;
    let out = cfg.run_dir.join("eval").join(checkpoint_name(&path));
    report.write(&out)?;
    print!("{}", report.to_text());
    log::info!("report written to {}", out.display());
    Ok(())
}

fn render(cfg: &RunConfig, checkpoint: Option<&Path>, instance: usize) -> Result<(), Failure> {
    let data = dataset(cfg)?;
    if instance >= data.len() {
        return Err(Failure::Usage(anyhow!("instance {instance} out of range 0..{}", data.len())));
    }
    let (path, state) = load_checkpoint(cfg, checkpoint)?;
    let sheet = render_sheet(&state.bundle, &data, instance)?;
    let dir = cfg.run_dir.join("render").join(checkpoint_name(&path));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let file = dir.join(format!("sheet-{instance:05}.png"));
    save_png(&sheet.sheet, &file)?;
    println!("requested {:?}", sheet.requested);
    println!("matched   {:?}", sheet.matched);
    println!("{} of {} views match the requested azimuth", sheet.hits(), sheet.requested.len());
    log::info!("sheet written to {}", file.display());
    Ok(())
}

fn ablate(cfg: &RunConfig, text: &str) -> Result<(), Failure> {
    let data = dataset(cfg)?;
    let rungs = cfg.ablation.selected()?;
    let root = cfg.run_dir.join("ablation");
    cfg.snapshot(text, &root)?;
    let mut results: Vec<RungResult> = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let mut train = cfg.train.clone();
        train.seed = seed;
        let with_gan = rungs.iter().any(|r| r.losses.is_some_and(|l| l.needs_generation()));
        let warm = WarmStart::run(&train, &cfg.shapes, DTYPE, &data, with_gan)?;
        log::info!("seed {seed}: warm-up took {:.1}s", warm.seconds);
        for rung in &rungs {
            let dir = root.join(format!("seed-{seed}")).join(&rung.name);
            let (_, r) = run_rung(&warm, rung, &data, Some(&dir))?;
            log::info!("seed {seed} {}: mAP {:.4} rank-1 {:.4}", r.name, r.map, r.rank1);
            results.push(r);
        }
    }
    let means = mean_by_rung(&results);
    let text = format!("{}\nmean over seeds\n{}", table(&results), table(&means));
    let write = |name: &str, body: String| -> Result<(), Failure> {
        let p = root.join(name);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    };
    write("ablation.txt", text.clone())?;
    write("ablation.json", serde_json::to_string_pretty(&results).map_err(gcl::Error::from)?)?;
    print!("{text}");
    Ok(())
}
