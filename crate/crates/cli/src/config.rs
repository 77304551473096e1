//! Experiment configuration: INI sections with `key = value` lines.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bilevel_core::optimizers::OptimizerKind;
use bilevel_core::problems::SamplingMode;
use bilevel_core::regularizers::PotentialKind;
use bilevel_core::Schedule;
use ini::Ini;
use sha2::{Digest, Sha256};

/// Invalid configuration; the message names the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    Denoise,
    Inpaint,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerKind {
    Quad,
    Crr,
    Icnn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub sigma: f64,
    pub keep_prob: f64,
    pub xi: f64,
    /// Number of toy tasks.
    pub tasks: usize,
    /// Dimension of each toy task.
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Manifest of PGM images; relative paths resolve against its directory.
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub train: usize,
    pub test: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub potential: PotentialKind,
    pub beta: f64,
    /// CRR layer widths.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub nu: f64,
    pub init_log_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub sampling: SamplingMode,
    pub batch: usize,
    pub budget: u64,
    pub max_iters: Option<u64>,
    pub log_every: u64,
    pub proxy_every: Option<u64>,
    pub proxy_eps: f64,
    pub test_every: Option<u64>,
    pub warm_start: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub eps0: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub seeds: Vec<u64>,
    pub fit_window: Option<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub dataset: DatasetConfig,
    pub regularizer: RegularizerConfig,
    pub step: Schedule,
    pub accuracy: Schedule,
    pub optimizer: OptimizerConfig,
    pub sweep: SweepConfig,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig { kind: ProblemKind::Denoise, sigma: 25.0 / 255.0, keep_prob: 0.3, xi: 1e-6, tasks: 10, dim: 4 },
            dataset: DatasetConfig { source: DataSource::Synthetic, train: 16, test: 4, size: 32 },
            regularizer: RegularizerConfig {
                kind: RegularizerKind::Crr,
                potential: PotentialKind::Huber,
                beta: 10.0,
                channels: vec![4, 8],
                kernel: 5,
                hidden: 8,
                out_channels: 8,
                nu: 1e-3,
                init_log_scale: 0.0,
            },
            step: Schedule::constant(1e-2).expect("valid"),
            accuracy: Schedule::polynomial(1.0, 2.0).expect("valid"),
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Isgd,
                beta1: 0.9,
                beta2: 0.999,
                eps_hat: 1e-8,
                sampling: SamplingMode::MinibatchScaled,
                batch: 8,
                budget: 10_000,
                max_iters: None,
                log_every: 1,
                proxy_every: None,
                proxy_eps: 1e-8,
                test_every: None,
                warm_start: true,
            },
            sweep: SweepConfig {
                p: vec![0.0, 0.25, 0.5, 1.0, 2.0],
                q: vec![0.0, 0.5, 1.0],
                eps0: vec![1.0, 1e-2, 1e-4],
                alpha0: vec![1e-2],
                seeds: vec![0],
                fit_window: None,
            },
            output: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

fn err(field: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError(format!("{field}: {msg}"))
}

fn parse<T: FromStr>(field: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.trim().parse().map_err(|e| err(field, format!("cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(field: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(field, s)).collect()
}

/// `none` or a positive count.
fn parse_cadence(field: &str, v: &str) -> Result<Option<u64>> {
    if v.trim() == "none" {
        Ok(None)
    } else {
        parse(field, v).map(Some)
    }
}

fn cadence(v: Option<u64>) -> String {
    v.map_or_else(|| "none".to_string(), |c| c.to_string())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn kind_name(k: ProblemKind) -> &'static str {
    match k {
        ProblemKind::Denoise => "denoise",
        ProblemKind::Inpaint => "inpaint",
        ProblemKind::Toy => "toy",
    }
}

fn reg_name(k: RegularizerKind) -> &'static str {
    match k {
        RegularizerKind::Quad => "quad",
        RegularizerKind::Crr => "crr",
        RegularizerKind::Icnn => "icnn",
    }
}

fn potential_name(k: PotentialKind) -> &'static str {
    match k {
        PotentialKind::Huber => "huber",
        PotentialKind::LogCosh => "logcosh",
    }
}

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Isgd => "isgd",
        OptimizerKind::IAdam => "iadam",
    }
}

fn sampling_name(k: SamplingMode) -> &'static str {
    match k {
        SamplingMode::Binomial => "binomial",
        SamplingMode::MinibatchScaled => "minibatch",
    }
}

impl ExperimentConfig {
    /// Parses INI text. Missing keys take their defaults; unknown sections
    /// or keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError(format!("config syntax: {e}")))?;
        let mut c = Self::default();
        let mut seen = BTreeSet::new();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                let field = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
                if !seen.insert(field.clone()) {
                    return Err(err(&field, "given twice"));
                }
                c.set(&field, value)?;
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| err("config", format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        // relative data paths are taken relative to the config file
        if let DataSource::Manifest(m) = &c.dataset.source {
            if m.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                c.dataset.source = DataSource::Manifest(base.join(m));
            }
        }
        Ok(c)
    }

    fn set(&mut self, field: &str, v: &str) -> Result<()> {
        let t = v.trim();
        match field {
            "problem.kind" => {
                self.problem.kind = match t {
                    "denoise" => ProblemKind::Denoise,
                    "inpaint" => ProblemKind::Inpaint,
                    "toy" => ProblemKind::Toy,
                    _ => return Err(err(field, format!("unknown problem `{t}` (denoise|inpaint|toy)"))),
                }
            }
            "problem.sigma" => self.problem.sigma = parse(field, t)?,
            "problem.keep_prob" => self.problem.keep_prob = parse(field, t)?,
            "problem.xi" => self.problem.xi = parse(field, t)?,
            "problem.tasks" => self.problem.tasks = parse(field, t)?,
            "problem.dim" => self.problem.dim = parse(field, t)?,
            "dataset.source" => {
                self.dataset.source = match t {
                    "synthetic" => DataSource::Synthetic,
                    _ => match t.strip_prefix("manifest:") {
                        Some(p) if !p.is_empty() => DataSource::Manifest(PathBuf::from(p)),
                        _ => return Err(err(field, format!("expected `synthetic` or `manifest:<path>`, got `{t}`"))),
                    },
                }
            }
            "dataset.train" => self.dataset.train = parse(field, t)?,
            "dataset.test" => self.dataset.test = parse(field, t)?,
            "dataset.size" => self.dataset.size = parse(field, t)?,
            "regularizer.kind" => {
                self.regularizer.kind = match t {
                    "quad" => RegularizerKind::Quad,
                    "crr" => RegularizerKind::Crr,
                    "icnn" => RegularizerKind::Icnn,
                    _ => return Err(err(field, format!("unknown regularizer `{t}` (quad|crr|icnn)"))),
                }
            }
            "regularizer.potential" => {
                self.regularizer.potential = match t {
                    "huber" => PotentialKind::Huber,
                    "logcosh" => PotentialKind::LogCosh,
                    _ => return Err(err(field, format!("unknown potential `{t}` (huber|logcosh)"))),
                }
            }
            "regularizer.beta" => self.regularizer.beta = parse(field, t)?,
            "regularizer.channels" => self.regularizer.channels = parse_list(field, t)?,
            "regularizer.kernel" => self.regularizer.kernel = parse(field, t)?,
            "regularizer.hidden" => self.regularizer.hidden = parse(field, t)?,
            "regularizer.out_channels" => self.regularizer.out_channels = parse(field, t)?,
            "regularizer.nu" => self.regularizer.nu = parse(field, t)?,
            "regularizer.init_log_scale" => self.regularizer.init_log_scale = parse(field, t)?,
            "schedules.step" => self.step = t.parse().map_err(|e| err(field, e))?,
            "schedules.accuracy" => self.accuracy = t.parse().map_err(|e| err(field, e))?,
            "optimizer.kind" => {
                self.optimizer.kind = match t {
                    "isgd" => OptimizerKind::Isgd,
                    "iadam" => OptimizerKind::IAdam,
                    _ => return Err(err(field, format!("unknown optimizer `{t}` (isgd|iadam)"))),
                }
            }
            "optimizer.beta1" => self.optimizer.beta1 = parse(field, t)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse(field, t)?,
            "optimizer.eps_hat" => self.optimizer.eps_hat = parse(field, t)?,
            "optimizer.sampling" => {
                self.optimizer.sampling = match t {
                    "minibatch" => SamplingMode::MinibatchScaled,
                    "binomial" => SamplingMode::Binomial,
                    _ => return Err(err(field, format!("unknown sampling `{t}` (minibatch|binomial)"))),
                }
            }
            "optimizer.batch" => self.optimizer.batch = parse(field, t)?,
            "optimizer.budget" => self.optimizer.budget = parse(field, t)?,
            "optimizer.max_iters" => self.optimizer.max_iters = parse_cadence(field, t)?,
            "optimizer.log_every" => self.optimizer.log_every = parse(field, t)?,
            "optimizer.proxy_every" => self.optimizer.proxy_every = parse_cadence(field, t)?,
            "optimizer.proxy_eps" => self.optimizer.proxy_eps = parse(field, t)?,
            "optimizer.test_every" => self.optimizer.test_every = parse_cadence(field, t)?,
            "optimizer.warm_start" => self.optimizer.warm_start = parse(field, t)?,
            "sweep.p" => self.sweep.p = parse_list(field, t)?,
            "sweep.q" => self.sweep.q = parse_list(field, t)?,
            "sweep.eps0" => self.sweep.eps0 = parse_list(field, t)?,
            "sweep.alpha0" => self.sweep.alpha0 = parse_list(field, t)?,
            "sweep.seeds" => self.sweep.seeds = parse_list(field, t)?,
            "sweep.fit_window" => {
                self.sweep.fit_window = if t == "none" {
                    None
                } else {
                    match parse_list::<u64>(field, t)?.as_slice() {
                        [a, b] => Some((*a, *b)),
                        _ => return Err(err(field, "expected `<k_min>,<k_max>` or `none`")),
                    }
                }
            }
            "output.dir" => self.output = PathBuf::from(t),
            "run.seed" => self.seed = parse(field, t)?,
            _ => return Err(err(field, "unknown key")),
        }
        Ok(())
    }

    /// Semantic checks, including existence of referenced files.
    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        let positive = |field: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(err(field, "must be positive")) };
        if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
            return Err(err("problem.sigma", "must be non-negative"));
        }
        if !(p.keep_prob > 0.0 && p.keep_prob <= 1.0) {
            return Err(err("problem.keep_prob", "must lie in (0, 1]"));
        }
        if !(p.xi >= 0.0 && p.xi.is_finite()) {
            return Err(err("problem.xi", "must be non-negative"));
        }
        if p.kind == ProblemKind::Inpaint && p.xi == 0.0 {
            return Err(err("problem.xi", "inpainting needs xi > 0 for strong convexity"));
        }
        if p.tasks == 0 || p.dim == 0 {
            return Err(err("problem.tasks", "toy tasks and dim must be positive"));
        }
        let d = &self.dataset;
        if d.train == 0 {
            return Err(err("dataset.train", "must be positive"));
        }
        if d.size < 4 {
            return Err(err("dataset.size", "must be at least 4"));
        }
        if let DataSource::Manifest(m) = &d.source {
            if !m.is_file() {
                return Err(err("dataset.source", format!("manifest {} does not exist", m.display())));
            }
            let file = std::fs::File::open(m).map_err(|e| err("dataset.source", e))?;
            let entries = bilevel_core::problems::read_manifest(file).map_err(|e| err("dataset.source", e))?;
            let base = m.parent().unwrap_or_else(|| Path::new("."));
            for e in &entries {
                if e.role != "train" && e.role != "test" {
                    return Err(err("dataset.source", format!("unknown role `{}` (train|test)", e.role)));
                }
                let path = base.join(&e.path);
                if !path.is_file() {
                    return Err(err("dataset.source", format!("image {} does not exist", path.display())));
                }
            }
            if !entries.iter().any(|e| e.role == "train") {
                return Err(err("dataset.source", "manifest lists no train images"));
            }
        }
        let r = &self.regularizer;
        match (p.kind, r.kind) {
            (ProblemKind::Toy, RegularizerKind::Quad) => {}
            (ProblemKind::Toy, _) => return Err(err("regularizer.kind", "the toy problem needs `quad`")),
            (_, RegularizerKind::Quad) => {}
            _ => {
                if r.kernel % 2 == 0 || r.kernel == 0 {
                    return Err(err("regularizer.kernel", "must be odd"));
                }
                if r.kind == RegularizerKind::Crr && (r.channels.is_empty() || r.channels.contains(&0)) {
                    return Err(err("regularizer.channels", "needs at least one positive width"));
                }
                if r.kind == RegularizerKind::Icnn && (r.hidden == 0 || r.out_channels == 0) {
                    return Err(err("regularizer.hidden", "ICNN widths must be positive"));
                }
            }
        }
        positive("regularizer.beta", r.beta)?;
        positive("regularizer.nu", r.nu)?;
        let o = &self.optimizer;
        if o.budget == 0 {
            return Err(err("optimizer.budget", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(err("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(err("optimizer.beta2", "must lie in [0, 1)"));
        }
        positive("optimizer.eps_hat", o.eps_hat)?;
        positive("optimizer.proxy_eps", o.proxy_eps)?;
        if o.batch == 0 {
            return Err(err("optimizer.batch", "must be positive"));
        }
        if o.log_every == 0 {
            return Err(err("optimizer.log_every", "must be positive"));
        }
        if o.proxy_every == Some(0) {
            return Err(err("optimizer.proxy_every", "must be positive or `none`"));
        }
        if o.test_every == Some(0) {
            return Err(err("optimizer.test_every", "must be positive or `none`"));
        }
        let s = &self.sweep;
        for (field, v) in [("sweep.p", &s.p), ("sweep.q", &s.q)] {
            if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(err(field, "exponents must be non-negative"));
            }
        }
        for (field, v) in [("sweep.eps0", &s.eps0), ("sweep.alpha0", &s.alpha0)] {
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(err(field, "bases must be positive"));
            }
        }
        if let Some((a, b)) = s.fit_window {
            if a == 0 || b <= a {
                return Err(err("sweep.fit_window", "needs 0 < k_min < k_max"));
            }
        }
        Ok(())
    }

    /// Canonical INI text: every key, fixed order.
    pub fn to_ini_string(&self) -> String {
        let mut ini = Ini::new();
        let p = &self.problem;
        ini.with_section(Some("problem"))
            .set("kind", kind_name(p.kind))
            .set("sigma", p.sigma.to_string())
            .set("keep_prob", p.keep_prob.to_string())
            .set("xi", p.xi.to_string())
            .set("tasks", p.tasks.to_string())
            .set("dim", p.dim.to_string());
        let d = &self.dataset;
        let source = match &d.source {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Manifest(m) => format!("manifest:{}", m.display()),
        };
        ini.with_section(Some("dataset"))
            .set("source", source)
            .set("train", d.train.to_string())
            .set("test", d.test.to_string())
            .set("size", d.size.to_string());
        let r = &self.regularizer;
        ini.with_section(Some("regularizer"))
            .set("kind", reg_name(r.kind))
            .set("potential", potential_name(r.potential))
            .set("beta", r.beta.to_string())
            .set("channels", join(&r.channels))
            .set("kernel", r.kernel.to_string())
            .set("hidden", r.hidden.to_string())
            .set("out_channels", r.out_channels.to_string())
            .set("nu", r.nu.to_string())
            .set("init_log_scale", r.init_log_scale.to_string());
        ini.with_section(Some("schedules")).set("step", self.step.to_string()).set("accuracy", self.accuracy.to_string());
        let o = &self.optimizer;
        ini.with_section(Some("optimizer"))
            .set("kind", optimizer_name(o.kind))
            .set("beta1", o.beta1.to_string())
            .set("beta2", o.beta2.to_string())
            .set("eps_hat", o.eps_hat.to_string())
            .set("sampling", sampling_name(o.sampling))
            .set("batch", o.batch.to_string())
            .set("budget", o.budget.to_string())
            .set("max_iters", cadence(o.max_iters))
            .set("log_every", o.log_every.to_string())
            .set("proxy_every", cadence(o.proxy_every))
            .set("proxy_eps", o.proxy_eps.to_string())
            .set("test_every", cadence(o.test_every))
            .set("warm_start", o.warm_start.to_string());
        let s = &self.sweep;
        ini.with_section(Some("sweep"))
            .set("p", join(&s.p))
            .set("q", join(&s.q))
            .set("eps0", join(&s.eps0))
            .set("alpha0", join(&s.alpha0))
            .set("seeds", join(&s.seeds))
            .set("fit_window", s.fit_window.map_or_else(|| "none".to_string(), |(a, b)| format!("{a},{b}")));
        ini.with_section(Some("output")).set("dir", self.output.display().to_string());
        ini.with_section(Some("run")).set("seed", self.seed.to_string());
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8")
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_ini_string().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// `<output>/<hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output.join(self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_ini_string()).unwrap(), c);
    }

    #[test]
    fn parses_sections_and_overrides() {
        let text = "
[problem]
kind = toy
tasks = 10
[regularizer]
kind = quad
[schedules]
step = poly:0.01:0.75
accuracy = poly:0.01:1
[optimizer]
kind = iadam
proxy_every = 25
max_iters = 1000
[sweep]
fit_window = 100,10000
";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.problem.kind, ProblemKind::Toy);
        assert_eq!(c.regularizer.kind, RegularizerKind::Quad);
        assert_eq!(c.step, Schedule::polynomial(0.01, 0.75).unwrap());
        assert_eq!(c.optimizer.kind, OptimizerKind::IAdam);
        assert_eq!(c.optimizer.proxy_every, Some(25));
        assert_eq!(c.sweep.fit_window, Some((100, 10_000)));
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_ini_string()).unwrap(), c);
    }

    #[test]
    fn bad_schedule_names_the_field() {
        let e = ExperimentConfig::parse("[schedules]\nstep = poly:1\n").unwrap_err();
        assert!(e.0.starts_with("schedules.step"), "{e}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = ExperimentConfig::parse("[optimizer]\nlearning_rate = 1\n").unwrap_err();
        assert!(e.0.contains("optimizer.learning_rate"));
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut c = ExperimentConfig::default();
        c.problem.kind = ProblemKind::Toy;
        assert!(c.validate().unwrap_err().0.starts_with("regularizer.kind"));
        let mut c = ExperimentConfig::default();
        c.regularizer.kernel = 4;
        assert!(c.validate().unwrap_err().0.starts_with("regularizer.kernel"));
        let mut c = ExperimentConfig::default();
        c.dataset.source = DataSource::Manifest(PathBuf::from("/nonexistent/manifest.csv"));
        assert!(c.validate().unwrap_err().0.starts_with("dataset.source"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
