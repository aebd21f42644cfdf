use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    RegularizedMethod, DGM_LAMBDA_GRID, EWC_LAMBDA_GRID, EWC_SAMPLES_PERMUTED, EWC_SAMPLES_SPLIT, LP_LAMBDA_GRID,
    SI_LAMBDA_GRID, SI_XI,
};
use crate::bayes::{PriorSpec, INIT_VARIANCE};
use crate::data::Toy2dConfig;
use crate::error::{Error, Result};
use crate::models::{ArchitectureSpec, GenerativeSpec};
use crate::trainer::{CoresetPolicy, LrSchedule, TrainConfig};

/// Environment variable consulted for the data directory when neither the
/// config file nor the command line sets one.
pub const DATA_DIR_ENV: &str = "VCL_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    Permuted,
    SplitMnist,
    SplitNotmnist,
    Toy2d,
    GenMnist,
    GenNotmnist,
    GenGlyphs,
    Patterns,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Permuted => "permuted",
            Experiment::SplitMnist => "split_mnist",
            Experiment::SplitNotmnist => "split_notmnist",
            Experiment::Toy2d => "toy2d",
            Experiment::GenMnist => "gen_mnist",
            Experiment::GenNotmnist => "gen_notmnist",
            Experiment::GenGlyphs => "gen_glyphs",
            Experiment::Patterns => "patterns",
        }
    }

    pub fn is_generative(self) -> bool {
        matches!(self, Experiment::GenMnist | Experiment::GenNotmnist | Experiment::GenGlyphs)
    }

    /// Whether the stream comes from IDX files on disk.
    pub fn needs_files(self) -> bool {
        matches!(
            self,
            Experiment::Permuted
                | Experiment::SplitMnist
                | Experiment::SplitNotmnist
                | Experiment::GenMnist
                | Experiment::GenNotmnist
        )
    }

    pub fn default_data_dir(self) -> PathBuf {
        match self {
            Experiment::SplitNotmnist | Experiment::GenNotmnist => "data/notmnist".into(),
            _ => "data/mnist".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    Vcl,
    VclCoreset,
    CoresetOnly,
    Ewc,
    Si,
    Lp,
    Mle,
    Map,
    NaiveFt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vcl => "vcl",
            Method::VclCoreset => "vcl_coreset",
            Method::CoresetOnly => "coreset_only",
            Method::Ewc => "ewc",
            Method::Si => "si",
            Method::Lp => "lp",
            Method::Mle => "mle",
            Method::Map => "map",
            Method::NaiveFt => "naive_ft",
        }
    }

    pub fn uses_coreset(self) -> bool {
        matches!(self, Method::VclCoreset | Method::CoresetOnly)
    }

    pub fn takes_lambda(self) -> bool {
        matches!(self, Method::Ewc | Method::Si | Method::Lp | Method::Map)
    }

    pub fn supports(self, experiment: Experiment) -> bool {
        match experiment {
            Experiment::Patterns => self == Method::Vcl,
            e if e.is_generative() => matches!(self, Method::Vcl | Method::Ewc | Method::Si | Method::Lp | Method::NaiveFt),
            _ => self != Method::NaiveFt,
        }
    }

    /// The tuning grid for λ.
    pub fn lambda_grid(self, experiment: Experiment) -> Vec<f64> {
        match (self, experiment.is_generative()) {
            (Method::Ewc | Method::Si | Method::Lp, true) => DGM_LAMBDA_GRID.to_vec(),
            (Method::Ewc, false) => EWC_LAMBDA_GRID.to_vec(),
            (Method::Si, false) => SI_LAMBDA_GRID.to_vec(),
            (Method::Lp | Method::Map, false) => LP_LAMBDA_GRID.to_vec(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub multi_head: bool,
    pub prior_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoresetConfig {
    pub policy: CoresetPolicy,
    /// Points taken from each task; 0 for methods without a coreset.
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// 0 trains full-batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_train_samples: usize,
    pub mc_pred_samples: usize,
    pub lr_schedule: LrSchedule,
    pub init_variance: f64,
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            learning_rate: self.learning_rate,
            mc_train_samples: self.mc_train_samples,
            mc_pred_samples: self.mc_pred_samples,
            seed,
            lr_schedule: self.lr_schedule,
            init_variance: self.init_variance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub ewc_samples: usize,
    pub ewc_with_prior: bool,
    pub si_xi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    /// Truncates the stream to its first `tasks` tasks (pattern steps for
    /// `patterns`).
    pub tasks: Option<usize>,
    /// Seeded subsample of each task's training set.
    pub train_per_task: Option<usize>,
    pub test_per_task: Option<usize>,
    pub permute_first: bool,
    pub pattern_dim: usize,
    pub pattern_noise_sd: f64,
    pub toy2d: Toy2dConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Glyph images drawn per class for the glyph classifier.
    pub glyphs_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub is_samples: usize,
    pub generated: usize,
    pub classifier: ClassifierConfig,
}

/// Everything a run needs. Built from a per-(experiment, method) preset,
/// a TOML file and command-line overrides, in that order of precedence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub arch: ArchConfig,
    pub coreset: CoresetConfig,
    pub train: TrainSection,
    pub baseline: BaselineConfig,
    pub data: DataConfig,
    pub generative: GenerativeSpec,
    pub eval: EvalConfig,
    pub out: PathBuf,
}

/// Command-line values that replace file and preset values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub method: Option<Method>,
    pub coreset_policy: Option<CoresetPolicy>,
    pub coreset_size: Option<usize>,
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn mnist_generative() -> GenerativeSpec {
    GenerativeSpec {
        input_dim: 784,
        latent_dim: 50,
        intermediate_dim: 500,
        head_hidden: vec![500],
        shared_hidden: vec![500],
    }
}

impl ExperimentConfig {
    /// Settings for `(experiment, method)` before any file or flag.
    pub fn preset(experiment: Experiment, method: Method) -> Self {
        let mut c = ExperimentConfig {
            experiment,
            method,
            seeds: vec![0],
            lambda: None,
            lambda_grid: method.lambda_grid(experiment),
            arch: ArchConfig {
                hidden: vec![100, 100],
                multi_head: false,
                prior_variance: 1.0,
            },
            coreset: CoresetConfig {
                policy: CoresetPolicy::Random,
                size: 0,
            },
            train: TrainSection {
                epochs: 100,
                batch_size: 256,
                learning_rate: 1e-3,
                mc_train_samples: 1,
                mc_pred_samples: 100,
                lr_schedule: LrSchedule::Constant,
                init_variance: INIT_VARIANCE,
            },
            baseline: BaselineConfig {
                ewc_samples: EWC_SAMPLES_SPLIT,
                ewc_with_prior: false,
                si_xi: SI_XI,
            },
            data: DataConfig {
                dir: None,
                tasks: None,
                train_per_task: None,
                test_per_task: None,
                permute_first: true,
                pattern_dim: 4,
                pattern_noise_sd: 1.0,
                toy2d: Toy2dConfig::default(),
            },
            generative: mnist_generative(),
            eval: EvalConfig {
                is_samples: crate::eval::DEFAULT_IS_SAMPLES,
                generated: 100,
                classifier: ClassifierConfig {
                    hidden: vec![256, 256],
                    epochs: 10,
                    batch_size: 256,
                    learning_rate: 1e-3,
                    glyphs_per_class: 500,
                },
            },
            out: PathBuf::from("runs").join(format!("{}_{}", experiment.name(), method.name())),
        };
        let t = &mut c.train;
        match experiment {
            Experiment::Permuted => {
                c.coreset.size = 200;
                c.baseline.ewc_samples = EWC_SAMPLES_PERMUTED;
                match method {
                    Method::Ewc => (t.epochs, t.batch_size, c.lambda) = (20, 200, Some(100.0)),
                    Method::Lp => (t.epochs, t.batch_size, c.lambda) = (20, 200, Some(0.1)),
                    Method::Si => (t.epochs, c.lambda) = (20, Some(0.5)),
                    Method::Map => (t.epochs, c.lambda) = (20, Some(1.0)),
                    Method::Mle => t.epochs = 20,
                    _ => {}
                }
            }
            Experiment::SplitMnist | Experiment::SplitNotmnist => {
                c.arch.hidden = if experiment == Experiment::SplitMnist {
                    vec![256, 256]
                } else {
                    vec![150; 4]
                };
                c.arch.multi_head = true;
                (t.epochs, t.batch_size) = (120, 0);
                c.coreset.size = 40;
                if method.takes_lambda() {
                    c.lambda = Some(1.0);
                }
            }
            Experiment::Toy2d => {
                c.arch.hidden = vec![20];
                c.arch.multi_head = true;
                (t.epochs, t.batch_size, t.learning_rate) = (10_000, 0, 0.01);
                c.coreset.size = 10;
                if method.takes_lambda() {
                    c.lambda = Some(1.0);
                }
            }
            Experiment::GenMnist | Experiment::GenNotmnist => {
                (t.batch_size, t.learning_rate) = (50, 1e-4);
                t.epochs = match (experiment, method) {
                    (Experiment::GenMnist, Method::Si) => 400,
                    (Experiment::GenMnist, _) => 200,
                    _ => 400,
                };
                if method.takes_lambda() {
                    c.lambda = Some(1.0);
                }
            }
            Experiment::GenGlyphs => {
                (t.epochs, t.batch_size) = (800, 50);
                c.generative = GenerativeSpec {
                    input_dim: crate::data::GLYPH_SIDE * crate::data::GLYPH_SIDE,
                    latent_dim: 4,
                    intermediate_dim: 32,
                    head_hidden: vec![32],
                    shared_hidden: vec![32],
                };
                c.data.train_per_task = Some(500);
                c.data.test_per_task = Some(200);
                c.eval.is_samples = 200;
                c.eval.generated = 200;
                c.eval.classifier.hidden = vec![32, 32];
                c.eval.classifier.epochs = 50;
                c.eval.classifier.batch_size = 64;
                if method.takes_lambda() {
                    c.lambda = Some(1.0);
                }
            }
            Experiment::Patterns => {
                (t.epochs, t.batch_size, t.learning_rate) = (3000, 0, 0.01);
                t.lr_schedule = LrSchedule::Cosine { final_fraction: 0.0 };
                c.data.tasks = Some(10);
            }
        }
        if !method.uses_coreset() {
            c.coreset.size = 0;
        }
        c
    }

    /// Preset, then `file` (if any), then `overrides`. `env_data_dir` fills
    /// `data.dir` when nothing else set it.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides, env_data_dir: Option<PathBuf>) -> Result<Self> {
        let file_table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let pick = |key: &str| -> Result<Option<String>> {
            match file_table.get(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s.clone())),
                Some(v) => Err(Error::Config(format!("{key} must be a string, got {v}"))),
            }
        };
        let experiment = match (overrides.experiment, pick("experiment")?) {
            (Some(e), _) => e,
            (None, Some(s)) => parse_enum(&s, "experiment")?,
            (None, None) => return Err(Error::Config("experiment is not set".into())),
        };
        let method = match (overrides.method, pick("method")?) {
            (Some(m), _) => m,
            (None, Some(s)) => parse_enum(&s, "method")?,
            (None, None) => return Err(Error::Config("method is not set".into())),
        };
        let preset = toml::Table::try_from(Self::preset(experiment, method))
            .map_err(|e| Error::Config(format!("preset: {e}")))?;
        let mut merged = preset;
        deep_merge(&mut merged, file_table);
        let mut c: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.experiment = experiment;
        c.method = method;
        c.apply(overrides);
        if c.data.dir.is_none() {
            c.data.dir = env_data_dir;
        }
        c.validate()?;
        Ok(c)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(p) = o.coreset_policy {
            self.coreset.policy = p;
        }
        if let Some(k) = o.coreset_size {
            self.coreset.size = k;
        }
        if let Some(l) = o.lambda {
            self.lambda = Some(l);
        }
        if let Some(g) = &o.lambda_grid {
            self.lambda_grid = g.clone();
        }
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(d) = &o.data_dir {
            self.data.dir = Some(d.clone());
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (e, m) = (self.experiment, self.method);
        if !m.supports(e) {
            return Err(Error::Config(format!("method {} does not apply to {}", m.name(), e.name())));
        }
        if m.uses_coreset() != (self.coreset.size > 0) {
            return Err(Error::Config(format!(
                "coreset size must be positive exactly for coreset methods (method {}, size {})",
                m.name(),
                self.coreset.size
            )));
        }
        match (m.takes_lambda(), self.lambda) {
            (true, None) => return Err(Error::Config(format!("method {} needs lambda", m.name()))),
            (false, Some(_)) => return Err(Error::Config(format!("method {} takes no lambda", m.name()))),
            (true, Some(l)) if !(l >= 0.0) || !l.is_finite() => {
                return Err(Error::Config(format!("lambda must be a non-negative number, got {l}")))
            }
            _ => {}
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("lambda grid entries must be non-negative numbers".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("seed {s} listed twice")));
        }
        if self.data.tasks == Some(0) {
            return Err(Error::Config("data.tasks must be at least 1".into()));
        }
        if self.data.pattern_dim == 0 || !(self.data.pattern_noise_sd > 0.0) {
            return Err(Error::Config("pattern_dim and pattern_noise_sd must be positive".into()));
        }
        if !(self.arch.prior_variance > 0.0) {
            return Err(Error::Config("prior variance must be positive".into()));
        }
        if m == Method::Si && !(self.baseline.si_xi > 0.0) {
            return Err(Error::Config("si_xi must be positive".into()));
        }
        if e.is_generative() && (self.eval.is_samples == 0 || self.eval.generated == 0) {
            return Err(Error::Config("is_samples and generated must be positive".into()));
        }
        self.generative.validate()?;
        self.train.to_train_config(0).validate()?;
        Ok(())
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec {
            mean: 0.0,
            variance: self.arch.prior_variance,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.experiment.default_data_dir())
    }

    pub fn architecture(&self, input_dim: usize, classes: usize, tasks: usize) -> ArchitectureSpec {
        if self.arch.multi_head {
            ArchitectureSpec::multi_head(input_dim, self.arch.hidden.clone(), classes, tasks)
        } else {
            ArchitectureSpec::single_head(input_dim, self.arch.hidden.clone(), classes)
        }
    }

    pub fn regularized_method(&self) -> Option<RegularizedMethod> {
        let lambda = self.lambda.unwrap_or(0.0);
        Some(match self.method {
            Method::Mle | Method::NaiveFt => RegularizedMethod::Mle,
            Method::Map => RegularizedMethod::Map { lambda },
            Method::Lp => RegularizedMethod::Lp { lambda },
            Method::Ewc => RegularizedMethod::Ewc {
                lambda,
                n_samples: self.baseline.ewc_samples,
                with_prior: self.baseline.ewc_with_prior,
            },
            Method::Si => RegularizedMethod::Si {
                lambda,
                xi: self.baseline.si_xi,
            },
            _ => return None,
        })
    }

    /// SHA-256 over the canonical JSON form, leaving out where data is read
    /// from and where results go.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out");
            if let Some(data) = obj.get_mut("data").and_then(|d| d.as_object_mut()) {
                data.remove("dir");
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_enum(s, "experiment")
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_enum(s, "method")
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> Result<T> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(s))
        .map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

/// Tables merge key by key; any other value in `over` replaces `base`.
fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
