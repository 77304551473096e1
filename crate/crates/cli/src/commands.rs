//! Command implementations. Each returns the process exit code.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use bilevel_core::checks::{run_checks, CheckLevel};
use bilevel_core::conv::ConvStack;
use bilevel_core::optimizers::{run, AdamParams, BatchSpec, RunConfig, RunLog, RunStatus};
use bilevel_core::problems::{
    load_pgm, make_denoising, make_inpainting, make_toy_family, read_manifest, synth_images, ProblemInstance,
};
use bilevel_core::rate_harness::{emit_plots, sweep, GridCell, Setup, SweepOptions};
use bilevel_core::regularizers::{read_checkpoint, write_checkpoint, Crr, Icnn, Potential, QuadToy, Regularizer};
use bilevel_core::{Error, Image, Rng};
use rand::SeedableRng;

use crate::config::{ConfigError, DataSource, ExperimentConfig, ProblemKind, RegularizerKind};

pub const EXIT_OK: i32 = 0;
/// Some check failed.
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Failure of a command, mapped onto an exit code.
#[derive(Debug)]
pub enum CommandError {
    Invalid(String),
    Runtime(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Invalid(_) => EXIT_INVALID,
            CommandError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommandError::Invalid(m) => write!(f, "invalid configuration: {m}"),
            CommandError::Runtime(m) => write!(f, "run aborted: {m}"),
        }
    }
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        CommandError::Invalid(e.0)
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Schedule { .. } | Error::Inadmissible(_) => CommandError::Invalid(e.to_string()),
            _ => CommandError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Runtime(e.to_string())
    }
}

type CmdResult<T> = std::result::Result<T, CommandError>;

/// Loads and validates a config file.
pub fn load_config(path: &Path) -> CmdResult<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn build_regularizer(cfg: &ExperimentConfig) -> Box<dyn Regularizer> {
    let r = &cfg.regularizer;
    match r.kind {
        RegularizerKind::Quad => Box::new(QuadToy::new(r.init_log_scale)),
        RegularizerKind::Crr => {
            let mut crr = Crr::new(ConvStack::new(1, &r.channels, r.kernel), Potential::new(r.potential, r.beta));
            crr.init_log_scale = r.init_log_scale;
            Box::new(crr)
        }
        RegularizerKind::Icnn => {
            let mut icnn = Icnn::new(1, r.hidden, r.out_channels, r.kernel);
            icnn.nu = r.nu;
            icnn.init_log_scale = r.init_log_scale;
            Box::new(icnn)
        }
    }
}

fn instances(cfg: &ExperimentConfig, images: &[Image], rng: &mut Rng) -> bilevel_core::Result<Vec<ProblemInstance>> {
    let p = &cfg.problem;
    match p.kind {
        ProblemKind::Inpaint => make_inpainting(images, p.keep_prob, p.sigma, p.xi, rng),
        _ => make_denoising(images, p.sigma, rng),
    }
}

/// Training and test tasks plus the initial parameters for `seed`.
pub fn build_setup(cfg: &ExperimentConfig, seed: u64) -> bilevel_core::Result<Setup> {
    let mut rng = Rng::seed_from_u64(seed);
    let reg = build_regularizer(cfg);
    let (train, test) = if cfg.problem.kind == ProblemKind::Toy {
        (make_toy_family(cfg.problem.tasks, cfg.problem.dim, &mut rng)?, Vec::new())
    } else {
        match &cfg.dataset.source {
            DataSource::Synthetic => {
                let d = &cfg.dataset;
                let images = synth_images(d.train + d.test, d.size, &mut rng)?;
                let (tr, te) = images.split_at(d.train);
                (instances(cfg, tr, &mut rng)?, if te.is_empty() { Vec::new() } else { instances(cfg, te, &mut rng)? })
            }
            DataSource::Manifest(path) => {
                let entries = read_manifest(File::open(path)?)?;
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                let (mut train, mut test) = (Vec::new(), Vec::new());
                for e in entries {
                    let img = load_pgm(base.join(&e.path))?;
                    // the entry seed fixes its noise and mask independently of the run seed
                    let mut own = Rng::seed_from_u64(e.seed);
                    let inst = instances(cfg, &[img], &mut own)?.remove(0);
                    if e.role == "train" {
                        train.push(inst);
                    } else {
                        test.push(inst);
                    }
                }
                (train, test)
            }
        }
    };
    let theta0 = reg.init_params(train[0].shape(), &mut rng)?;
    Ok(Setup { train, test, reg, theta0 })
}

pub fn run_config(cfg: &ExperimentConfig) -> RunConfig {
    let o = &cfg.optimizer;
    let mut rc = RunConfig::new(cfg.step, cfg.accuracy, o.budget);
    rc.optimizer = o.kind;
    rc.adam = AdamParams { beta1: o.beta1, beta2: o.beta2, eps_hat: o.eps_hat };
    rc.batch = BatchSpec { mode: o.sampling, size: o.batch };
    rc.log_every = o.log_every;
    rc.proxy_every = o.proxy_every;
    rc.proxy_eps = o.proxy_eps;
    rc.test_every = o.test_every;
    rc.max_iters = o.max_iters;
    rc.warm_start = o.warm_start;
    rc.seed = cfg.seed;
    rc
}

/// Creates `dir` for `cfg`, refusing a directory that holds another config.
fn claim_run_dir(cfg: &ExperimentConfig, dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir)?;
    let stamp = dir.join("config.ini");
    let text = cfg.to_ini_string();
    if stamp.exists() {
        let existing = std::fs::read_to_string(&stamp)?;
        if existing != text {
            return Err(CommandError::Runtime(format!("hash collision: {} holds a different config", dir.display())));
        }
    }
    std::fs::write(stamp, text)?;
    Ok(())
}

/// File name of the checkpoint taken at `fraction` of the budget.
pub fn checkpoint_name(fraction: f64) -> String {
    format!("checkpoint_{:03}.bin", (fraction * 100.0).round() as u32)
}

/// One training run: `runlog.csv`, checkpoints and plots under the run
/// directory. Returns the directory.
pub fn cmd_run(config: &Path) -> CmdResult<PathBuf> {
    let cfg = load_config(config)?;
    let dir = cfg.run_dir();
    claim_run_dir(&cfg, &dir)?;
    let setup = build_setup(&cfg, cfg.seed)?;
    let out = run(&setup.train, &setup.test, setup.reg.as_ref(), setup.theta0, &run_config(&cfg))?;
    out.log.write_csv(BufWriter::new(File::create(dir.join("runlog.csv"))?))?;
    for c in &out.checkpoints {
        write_checkpoint(BufWriter::new(File::create(dir.join(checkpoint_name(c.fraction)))?), &c.theta)?;
    }
    write_checkpoint(BufWriter::new(File::create(dir.join("final.bin"))?), &out.theta)?;
    emit_plots(&[("run".to_string(), &out.log)], &dir.join("plots"))?;
    println!(
        "{}: {} iterations, cost {} ({}), proxy cost {}",
        dir.display(),
        out.iterations,
        out.cum_cost,
        out.log.status,
        out.proxy_cost
    );
    if let RunStatus::Aborted(why) = &out.log.status {
        return Err(CommandError::Runtime(why.clone()));
    }
    Ok(dir)
}

/// Cartesian grid of the sweep section.
pub fn grid(cfg: &ExperimentConfig) -> Vec<GridCell> {
    let s = &cfg.sweep;
    let mut cells = Vec::new();
    for &p in &s.p {
        for &q in &s.q {
            for &eps0 in &s.eps0 {
                for &alpha0 in &s.alpha0 {
                    cells.push(GridCell { p, q, eps0, alpha0 });
                }
            }
        }
    }
    cells
}

/// Sweep over the `[sweep]` grid: `summary.csv`, `summary_std.csv` and
/// `failures.csv` under the run directory.
pub fn cmd_rates(config: &Path) -> CmdResult<PathBuf> {
    let cfg = load_config(config)?;
    let cells = grid(&cfg);
    if cells.is_empty() {
        return Err(CommandError::Invalid("sweep: the grid is empty".into()));
    }
    if cfg.sweep.seeds.is_empty() {
        return Err(CommandError::Invalid("sweep.seeds: no seeds given".into()));
    }
    let dir = cfg.run_dir();
    claim_run_dir(&cfg, &dir)?;
    let setup = |seed: u64| build_setup(&cfg, seed);
    let opts = SweepOptions { base: run_config(&cfg), fit_window: cfg.sweep.fit_window };
    let summary = sweep(&cells, &cfg.sweep.seeds, &setup, &opts)?;
    summary.write_summary(BufWriter::new(File::create(dir.join("summary.csv"))?))?;
    summary.write_spread(BufWriter::new(File::create(dir.join("summary_std.csv"))?))?;
    summary.write_failures(BufWriter::new(File::create(dir.join("failures.csv"))?))?;
    println!(
        "{}: {} cells x {} seeds, {} failures",
        dir.display(),
        cells.len(),
        cfg.sweep.seeds.len(),
        summary.failures.len()
    );
    Ok(dir)
}

/// Prints the oracle report; exit code 1 if any check fails.
pub fn cmd_check(level: CheckLevel) -> i32 {
    let results = run_checks(level);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

/// Re-renders the plots of a run directory from its `runlog.csv` and writes
/// every checkpoint as `<name>.csv` with `tensor,index,value` rows.
pub fn cmd_export(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    let log_path = dir.join("runlog.csv");
    if !log_path.is_file() {
        return Err(CommandError::Invalid(format!("{} has no runlog.csv", dir.display())));
    }
    let rows = RunLog::read_csv(File::open(&log_path)?)?;
    let log = RunLog { rows, status: RunStatus::Running };
    let mut written = emit_plots(&[("run".to_string(), &log)], &dir.join("plots"))?;
    let mut bins: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    bins.sort();
    for bin in bins {
        let theta = read_checkpoint(File::open(&bin)?)?;
        let path = bin.with_extension("csv");
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
        w.write_record(["tensor", "index", "value"]).map_err(csv_err)?;
        for (i, spec) in theta.layout().tensors().iter().enumerate() {
            let range = theta.layout().range(i);
            for (j, v) in theta.flat()[range].iter().enumerate() {
                w.write_record([spec.name.as_str(), &j.to_string(), &v.to_string()]).map_err(csv_err)?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

fn csv_err(e: csv::Error) -> CommandError {
    CommandError::Runtime(e.to_string())
}
