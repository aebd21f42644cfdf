use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Experiment, ExperimentConfig, Method};
use super::state::{load_state, save_state, MethodState, RunState};
use crate::baselines::{coreset_only_train, regularized_task_step, regularized_vae_step, shared_means, RegularizedLearner};
use crate::data::{
    class_stream, digit_names, glyph_dataset, glyph_stream, letter_names, load_base, permuted_task, random_pattern_stream,
    split_stream, toy2d_stream, BaseDataset, LabeledDataset, PatternStream, Task, MNIST_PAIRS, NOTMNIST_PAIRS,
};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, avg_accuracy, classifier_uncertainty, test_ll, Bayesian, Classifier, MetricName, MetricsRecord,
    PairPredictor,
};
use crate::models::{
    build_discriminative, read_point_net, write_point_net, ArchitectureSpec, BayesLinearRegression, GenerativeModel,
    PointNet, ThetaPolicy,
};
use crate::oracle::{sequential_vi_update, DiagonalGaussian};
use crate::rng::{self, label};
use crate::tensor::Tensor;
use crate::trainer::{
    coreset_vcl_task, fit_mle, update_coreset, vcl_linreg_step, vcl_task_step, vcl_vae_task_step, Coreset, InitPolicy,
    PosteriorPair, SigmaInit, TraceRow, TrainConfig,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

const METRICS_HEADER: &str = "method,seed,tasks_seen,eval_task,metric_name,value";
const CLASSIFIER_PATH: [u64; 2] = [label::MLE, 1 << 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Interrupted,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub seed: u64,
    pub task: usize,
    pub train_secs: f64,
    pub eval_secs: f64,
}

/// Machine-readable run summary, rewritten after every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub experiment: Experiment,
    pub method: Method,
    pub lambda: Option<f64>,
    pub seeds: Vec<u64>,
    pub tasks: usize,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Tasks finished per seed.
    pub progress: BTreeMap<u64, usize>,
    pub timings: Vec<TaskTiming>,
    /// Training accuracy of the frozen classifier, generative runs only.
    pub classifier_train_accuracy: BTreeMap<u64, f64>,
    pub metrics: String,
    pub traces: Vec<String>,
    pub checkpoints: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many task steps in this invocation, as if killed
    /// right after the last checkpoint.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub config_hash: String,
    pub records: Vec<MetricsRecord>,
    pub trace_paths: Vec<PathBuf>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub complete: bool,
}

/// Tasks are handed out one step at a time; earlier training sets are
/// dropped once used.
enum Source {
    Tasks(Vec<Task>),
    Permuted(BaseDataset),
    Patterns(PatternStream),
}

struct Stream {
    source: Source,
    /// Task count before any truncation.
    full_len: usize,
    len: usize,
    input_dim: usize,
    classes: usize,
}

fn subsample_task(mut task: Task, cfg: &ExperimentConfig, seed: u64, t: usize) -> Task {
    if let Some(n) = cfg.data.train_per_task {
        task.train = task.train.subsample(n, &mut rng::stream(seed, &[label::DATA, t as u64, 0]));
    }
    if let Some(n) = cfg.data.test_per_task {
        task.test = task.test.subsample(n, &mut rng::stream(seed, &[label::DATA, t as u64, 1]));
    }
    task
}

impl Stream {
    fn build(cfg: &ExperimentConfig, seed: u64, base: Option<&BaseDataset>) -> Result<Self> {
        let base = || base.ok_or_else(|| Error::Config("experiment needs a data set".into()));
        let tasks = match cfg.experiment {
            Experiment::Permuted => {
                let b = base()?;
                let full_len = 10;
                let len = cfg.data.tasks.unwrap_or(full_len);
                return Ok(Stream {
                    input_dim: b.train.dim(),
                    classes: b.train.classes,
                    source: Source::Permuted(b.clone()),
                    full_len,
                    len,
                });
            }
            Experiment::Patterns => {
                let len = cfg.data.tasks.unwrap_or(10);
                let p = random_pattern_stream(cfg.data.pattern_dim, len, seed, true)?;
                return Ok(Stream {
                    input_dim: p.dim,
                    classes: 0,
                    source: Source::Patterns(p),
                    full_len: len,
                    len,
                });
            }
            Experiment::SplitMnist => split_stream(base()?, &MNIST_PAIRS)?,
            Experiment::SplitNotmnist => split_stream(base()?, &NOTMNIST_PAIRS)?,
            Experiment::Toy2d => toy2d_stream(seed, &cfg.data.toy2d)?,
            Experiment::GenMnist | Experiment::GenNotmnist => {
                let classes: Vec<usize> = (0..base()?.train.classes).collect();
                class_stream(base()?, &classes)?
            }
            Experiment::GenGlyphs => glyph_stream(
                seed,
                cfg.data.train_per_task.unwrap_or(500),
                cfg.data.test_per_task.unwrap_or(200),
            )?,
        };
        let full_len = tasks.len();
        let mut tasks = tasks.tasks;
        tasks.truncate(cfg.data.tasks.unwrap_or(full_len));
        let tasks: Vec<Task> = if cfg.experiment == Experiment::GenGlyphs {
            tasks
        } else {
            tasks
                .into_iter()
                .enumerate()
                .map(|(t, task)| subsample_task(task, cfg, seed, t))
                .collect()
        };
        Ok(Stream {
            full_len,
            len: tasks.len(),
            input_dim: tasks.first().map_or(0, |t| t.train.dim()),
            classes: tasks.first().map_or(0, |t| t.train.classes),
            source: Source::Tasks(tasks),
        })
    }

    /// Test sets of tasks `0..t` plus the training set of task `t`.
    fn take(&mut self, t: usize, cfg: &ExperimentConfig, seed: u64, tests: &mut Vec<LabeledDataset>) -> Result<LabeledDataset> {
        let task = match &mut self.source {
            Source::Tasks(ts) => {
                let task = &mut ts[t];
                let empty = LabeledDataset::new(Tensor::zeros(&[0, task.train.dim()]), Vec::new(), task.train.classes, t)?;
                Task {
                    train: std::mem::replace(&mut task.train, empty),
                    test: task.test.clone(),
                    head_id: task.head_id,
                    class_names: task.class_names.clone(),
                }
            }
            Source::Permuted(base) => subsample_task(permuted_task(base, t, seed, !cfg.data.permute_first), cfg, seed, t),
            Source::Patterns(_) => return Err(Error::invalid("pattern streams have no labelled tasks")),
        };
        tests.push(task.test);
        Ok(task.train)
    }

    /// Rebuilds test sets for tasks finished before a resume.
    fn skip(&mut self, done: usize, cfg: &ExperimentConfig, seed: u64, tests: &mut Vec<LabeledDataset>) -> Result<()> {
        if matches!(self.source, Source::Patterns(_)) {
            return Ok(());
        }
        for t in 0..done {
            self.take(t, cfg, seed, tests)?;
        }
        Ok(())
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Option<BaseDataset>> {
    if !cfg.experiment.needs_files() {
        return Ok(None);
    }
    let dir = cfg.data_dir();
    let names = match cfg.experiment {
        Experiment::SplitNotmnist | Experiment::GenNotmnist => letter_names(),
        _ => digit_names(),
    };
    for f in crate::data::MNIST_FILES {
        if !dir.join(f).is_file() {
            return Err(Error::MissingData(dir.join(f)));
        }
    }
    load_base(&dir, names).map(Some)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    train: TrainConfig,
    arch: Option<ArchitectureSpec>,
    classifier: Option<PointNet>,
    /// Classifier output index for each task of a generative stream.
    class_of_task: Vec<usize>,
    full_len: usize,
}

impl Ctx<'_> {
    fn arch(&self) -> Result<&ArchitectureSpec> {
        self.arch.as_ref().ok_or_else(|| Error::invalid("experiment has no classifier architecture"))
    }

    fn fresh_state(&self, stream: &Stream) -> Result<MethodState> {
        let cfg = self.cfg;
        let prior = cfg.prior();
        let coreset = || Coreset::new(cfg.coreset.policy, cfg.coreset.size);
        if cfg.experiment == Experiment::Patterns {
            return Ok(MethodState::Patterns {
                q: BayesLinearRegression::from_prior(stream.input_dim, &prior, cfg.data.pattern_noise_sd)?,
                oracle: DiagonalGaussian::isotropic(vec![prior.mean; stream.input_dim], prior.precision())?,
            });
        }
        if cfg.experiment.is_generative() {
            let gen = GenerativeModel::new(&cfg.generative, prior)?;
            return Ok(match cfg.method {
                Method::Vcl => MethodState::GenVcl { gen },
                _ => {
                    let method = cfg.regularized_method().expect("regularised generative method");
                    let learner = RegularizedLearner::new(method, &shared_means(&gen), &prior)?;
                    MethodState::GenRegularized { gen, learner }
                }
            });
        }
        let arch = self.arch()?;
        Ok(match cfg.method {
            Method::Vcl => MethodState::Vcl {
                q: build_discriminative(arch, prior)?,
            },
            Method::VclCoreset => MethodState::VclCoreset {
                q: build_discriminative(arch, prior)?,
                coreset: coreset(),
            },
            Method::CoresetOnly => MethodState::CoresetOnly { coreset: coreset() },
            _ => {
                let net = PointNet::new_random(arch, &mut rng::stream(self.seed, &[label::INIT]))?;
                let method = cfg.regularized_method().expect("regularised method");
                let learner = RegularizedLearner::new(method, &net.params(), &prior)?;
                MethodState::Point { net, learner }
            }
        })
    }
}

/// What a step leaves behind for evaluation besides the carried state.
enum Predictor {
    Carried,
    Pair(PosteriorPair),
}

type Traces = Vec<(String, Vec<TraceRow>)>;

fn step(ctx: &Ctx, state: &mut MethodState, data: &LabeledDataset, t: usize) -> Result<(Predictor, Traces)> {
    let cfg = &ctx.train;
    let init = if t == 0 {
        InitPolicy::MaximumLikelihood
    } else {
        InitPolicy::Previous
    };
    let main = |trace: Vec<TraceRow>| vec![(String::new(), trace)];
    Ok(match state {
        MethodState::Vcl { q } => {
            let (next, trace) = vcl_task_step(q, data, t, init, cfg)?;
            *q = next;
            (Predictor::Carried, main(trace))
        }
        MethodState::VclCoreset { q, coreset } => {
            let s = coreset_vcl_task(q, data, t, coreset, ctx.cfg.coreset.policy, ctx.cfg.coreset.size, init, cfg)?;
            *q = s.pair.propagated.clone();
            *coreset = s.coreset;
            let mut traces = main(s.trace);
            for (head, tr) in s.coreset_traces {
                traces.push((format!("coreset{head}"), tr));
            }
            (Predictor::Pair(s.pair), traces)
        }
        MethodState::CoresetOnly { coreset } => {
            let mut r = rng::stream(ctx.seed, &[label::CORESET, t as u64]);
            *coreset = update_coreset(coreset, data, ctx.cfg.coreset.policy, ctx.cfg.coreset.size, &mut r)?.0;
            let arch = ctx.arch()?;
            let prediction = coreset_only_train(coreset, arch, ctx.cfg.prior(), cfg, t)?;
            let pair = PosteriorPair {
                propagated: build_discriminative(arch, ctx.cfg.prior())?,
                prediction,
            };
            (Predictor::Pair(pair), Vec::new())
        }
        MethodState::Point { net, learner } => {
            let (next, trace) = regularized_task_step(net, learner, data, t, cfg)?;
            *net = next;
            (Predictor::Carried, main(trace))
        }
        MethodState::GenVcl { gen } => {
            let (next, trace) = vcl_vae_task_step(gen, data, t, SigmaInit::default(), cfg)?;
            *gen = next;
            (Predictor::Carried, main(trace))
        }
        MethodState::GenRegularized { gen, learner } => {
            let (next, trace) = regularized_vae_step(gen, learner, data, t, cfg)?;
            *gen = next;
            (Predictor::Carried, main(trace))
        }
        MethodState::Patterns { .. } => return Err(Error::invalid("pattern steps take no data set")),
    })
}

fn pattern_step(ctx: &Ctx, state: &mut MethodState, stream: &Stream, t: usize) -> Result<(Vec<MetricsRecord>, Traces)> {
    let (Source::Patterns(p), MethodState::Patterns { q, oracle }) = (&stream.source, state) else {
        return Err(Error::invalid("pattern step on a non-pattern run"));
    };
    let x = Tensor::matrix(1, p.dim, p.inputs[t].clone())?;
    let (next, trace) = vcl_linreg_step(q, &x, &[p.targets[t]], &ctx.train, t)?;
    *q = next;
    *oracle = sequential_vi_update(oracle, &p.inputs[t], p.targets[t], q.noise_sd)?;
    let mean_err = q
        .mean()
        .iter()
        .zip(&oracle.mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let prec_err = q
        .precision()
        .iter()
        .zip(&oracle.precision)
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max);
    let rec = |metric_name, value| MetricsRecord {
        method: ctx.cfg.method.name().into(),
        seed: ctx.seed,
        tasks_seen: t + 1,
        eval_task: None,
        metric_name,
        value,
    };
    Ok((
        vec![rec(MetricName::OracleMeanError, mean_err), rec(MetricName::OraclePrecisionError, prec_err)],
        vec![(String::new(), trace)],
    ))
}

fn evaluate(ctx: &Ctx, state: &MethodState, predictor: &Predictor, tests: &[LabeledDataset], t: usize) -> Result<Vec<MetricsRecord>> {
    let rec = |eval_task: Option<usize>, metric_name, value| MetricsRecord {
        method: ctx.cfg.method.name().into(),
        seed: ctx.seed,
        tasks_seen: t + 1,
        eval_task,
        metric_name,
        value,
    };
    let eval_rng = |u: usize, k: u64| rng::stream(ctx.seed, &[label::EVAL, t as u64, u as u64, k]);
    let n_pred = ctx.train.mc_pred_samples;
    let mut out = Vec::new();
    let gen = match state {
        MethodState::GenVcl { gen } | MethodState::GenRegularized { gen, .. } => Some(gen),
        _ => None,
    };
    if let Some(gen) = gen {
        let clf = ctx.classifier.as_ref().expect("generative runs carry a classifier");
        let e = &ctx.cfg.eval;
        for (u, test) in tests.iter().enumerate().take(t + 1) {
            let v = test_ll(gen, u, &test.inputs, e.is_samples, ThetaPolicy::Mean, &mut eval_rng(u, 0))?;
            out.push(rec(Some(u), MetricName::TestLl, v));
        }
        for u in 0..=t {
            let v = classifier_uncertainty(
                gen,
                u,
                ctx.class_of_task[u],
                e.generated,
                clf,
                ctx.full_len,
                ThetaPolicy::Mean,
                &mut eval_rng(u, 1),
            )?;
            out.push(rec(Some(u), MetricName::ClassifierUncertainty, v));
        }
        return Ok(out);
    }
    let bayes;
    let pair;
    let clf: &dyn Classifier = match (state, predictor) {
        (_, Predictor::Pair(p)) => {
            pair = PairPredictor { pair: p, n_samples: n_pred };
            &pair
        }
        (MethodState::Vcl { q }, _) => {
            bayes = Bayesian { model: q, n_samples: n_pred };
            &bayes
        }
        (MethodState::Point { net, .. }, _) => net,
        _ => return Err(Error::invalid("no predictor for this state")),
    };
    let mut accs = Vec::with_capacity(t + 1);
    for (u, test) in tests.iter().enumerate().take(t + 1) {
        let a = accuracy(clf, test, u, &mut eval_rng(u, 0))?;
        accs.push((u, a));
        out.push(rec(Some(u), MetricName::Accuracy, a));
    }
    out.push(rec(None, MetricName::AvgAccuracy, avg_accuracy(&accs, t + 1)?));
    Ok(out)
}

/// The frozen classifier for generative runs, trained once per seed and
/// cached next to the checkpoints.
fn frozen_classifier(cfg: &ExperimentConfig, seed: u64, base: Option<&BaseDataset>, path: &Path) -> Result<(PointNet, f64)> {
    let c = &cfg.eval.classifier;
    let data = match base {
        Some(b) => b.train.clone(),
        None => glyph_dataset(&[0, 1], c.glyphs_per_class, seed, 99)?,
    };
    let net = if path.is_file() {
        read_point_net(&mut std::io::BufReader::new(fs::File::open(path)?))?
    } else {
        let arch = ArchitectureSpec::single_head(data.dim(), c.hidden.clone(), data.classes);
        let train = TrainConfig {
            epochs: c.epochs,
            batch_size: (c.batch_size > 0).then_some(c.batch_size),
            learning_rate: c.learning_rate,
            seed,
            ..TrainConfig::default()
        };
        let net = fit_mle(&arch, &data, &train, &CLASSIFIER_PATH)?;
        let mut buf = Vec::new();
        write_point_net(&mut buf, &net)?;
        fs::write(path, buf)?;
        net
    };
    let acc = accuracy(&net, &data, 0, &mut rng::stream(seed, &[label::EVAL]))?;
    if acc < 0.98 {
        log::warn!("frozen classifier reaches only {:.2}% training accuracy", 100.0 * acc);
    }
    Ok((net, acc))
}

fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    if fresh {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRecord>, _>>()?;
    Ok(rows)
}

/// Drops metric rows beyond each seed's last checkpoint, keeping the rest
/// byte for byte.
fn truncate_metrics(path: &Path, done: &BTreeMap<u64, usize>) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut out = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse = |k: usize| f.get(k).and_then(|v| v.parse::<u64>().ok());
        let (Some(seed), Some(seen)) = (parse(1), parse(2)) else {
            return Err(Error::Format(format!("bad metrics row {line:?}")));
        };
        if seen as usize <= done.get(&seed).copied().unwrap_or(0) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn checkpoint_path(out: &Path, seed: u64, tasks_done: usize) -> PathBuf {
    out.join("checkpoints")
        .join(format!("seed{seed}"))
        .join(format!("task{tasks_done}.state"))
}

fn trace_path(out: &Path, seed: u64, task: usize, suffix: &str) -> PathBuf {
    let name = if suffix.is_empty() {
        format!("seed{seed}_task{task}.csv")
    } else {
        format!("seed{seed}_task{task}_{suffix}.csv")
    };
    out.join("traces").join(name)
}

/// The latest checkpoint for `seed`, if any.
fn latest_checkpoint(out: &Path, seed: u64, tasks: usize) -> Option<usize> {
    (1..=tasks).rev().find(|&t| checkpoint_path(out, seed, t).is_file())
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().into_owned()
}

/// Runs (or resumes) every seed of `config`, writing results under
/// `config.out`.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunResult> {
    config.validate()?;
    let out = config.out.clone();
    let hash = config.hash();
    fs::create_dir_all(out.join("traces"))?;
    fs::create_dir_all(out.join("checkpoints"))?;
    let mut manifest = match Manifest::load(&out) {
        Ok(m) if m.config_hash != hash => {
            return Err(Error::Config(format!(
                "{} holds a run with config hash {}, this config hashes to {hash}",
                out.display(),
                m.config_hash
            )))
        }
        Ok(m) => m,
        Err(_) => Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            config_hash: hash.clone(),
            experiment: config.experiment,
            method: config.method,
            lambda: config.lambda,
            seeds: config.seeds.clone(),
            tasks: 0,
            status: RunStatus::Running,
            error: None,
            progress: BTreeMap::new(),
            timings: Vec::new(),
            classifier_train_accuracy: BTreeMap::new(),
            metrics: METRICS_FILE.into(),
            traces: Vec::new(),
            checkpoints: Vec::new(),
        },
    };
    fs::write(out.join(CONFIG_FILE), config.to_toml()?)?;
    manifest.status = RunStatus::Running;
    manifest.error = None;

    let result = run_seeds(config, opts, &out, &mut manifest);
    match &result {
        Ok(true) => manifest.status = RunStatus::Complete,
        Ok(false) => manifest.status = RunStatus::Interrupted,
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
        }
    }
    manifest.save(&out)?;
    let complete = result?;
    Ok(RunResult {
        config_hash: hash,
        records: read_metrics(&out.join(METRICS_FILE)).unwrap_or_default(),
        trace_paths: manifest.traces.iter().map(|p| out.join(p)).collect(),
        checkpoint_paths: manifest.checkpoints.iter().map(|p| out.join(p)).collect(),
        complete,
    })
}

fn run_seeds(config: &ExperimentConfig, opts: &RunOptions, out: &Path, manifest: &mut Manifest) -> Result<bool> {
    let base = load_dataset(config)?;
    let metrics = out.join(METRICS_FILE);
    let mut budget = opts.stop_after;

    let mut streams = Vec::with_capacity(config.seeds.len());
    let mut done = BTreeMap::new();
    for &seed in &config.seeds {
        let s = Stream::build(config, seed, base.as_ref())?;
        done.insert(seed, latest_checkpoint(out, seed, s.len).unwrap_or(0));
        streams.push(s);
    }
    truncate_metrics(&metrics, &done)?;
    manifest.progress = done.clone();
    manifest.tasks = streams.first().map_or(0, |s| s.len);
    manifest.timings.retain(|x| x.task < done.get(&x.seed).copied().unwrap_or(0));

    for (&seed, mut stream) in config.seeds.iter().zip(streams) {
        let start = done[&seed];
        if start == stream.len {
            continue;
        }
        let ckpt_dir = out.join("checkpoints").join(format!("seed{seed}"));
        fs::create_dir_all(&ckpt_dir)?;
        let mut tests = Vec::with_capacity(stream.len);
        stream.skip(start, config, seed, &mut tests)?;

        let (classifier, class_of_task) = if config.experiment.is_generative() {
            let (net, acc) = frozen_classifier(config, seed, base.as_ref(), &ckpt_dir.join("classifier.model"))?;
            manifest.classifier_train_accuracy.insert(seed, acc);
            let classes = match &stream.source {
                Source::Tasks(ts) => ts.iter().map(|t| t.test.labels.first().copied().unwrap_or(0)).collect(),
                _ => Vec::new(),
            };
            (Some(net), classes)
        } else {
            (None, Vec::new())
        };
        let arch = (!config.experiment.is_generative() && config.experiment != Experiment::Patterns)
            .then(|| config.architecture(stream.input_dim, stream.classes, stream.len));
        let ctx = Ctx {
            cfg: config,
            seed,
            train: config.train.to_train_config(seed),
            arch,
            classifier,
            class_of_task,
            full_len: stream.full_len,
        };
        let mut state = if start > 0 {
            let s = load_state(&checkpoint_path(out, seed, start))?;
            if s.tasks_done != start {
                return Err(Error::Format(format!(
                    "checkpoint for {start} tasks records {} tasks",
                    s.tasks_done
                )));
            }
            s.method
        } else {
            ctx.fresh_state(&stream)?
        };

        for t in start..stream.len {
            if budget == Some(0) {
                return Ok(false);
            }
            log::info!("seed {seed}: task {}/{}", t + 1, stream.len);
            let t0 = Instant::now();
            let (records, traces, train_secs) = if config.experiment == Experiment::Patterns {
                let (records, traces) = pattern_step(&ctx, &mut state, &stream, t)?;
                (records, traces, t0.elapsed().as_secs_f64())
            } else {
                let data = stream.take(t, config, seed, &mut tests)?;
                let (predictor, traces) = step(&ctx, &mut state, &data, t)?;
                drop(data);
                let train_secs = t0.elapsed().as_secs_f64();
                (evaluate(&ctx, &state, &predictor, &tests, t)?, traces, train_secs)
            };
            let eval_secs = t0.elapsed().as_secs_f64() - train_secs;

            append_metrics(&metrics, &records)?;
            for (suffix, rows) in &traces {
                let p = trace_path(out, seed, t + 1, suffix);
                write_trace(&p, rows)?;
                let r = rel(out, &p);
                if !manifest.traces.contains(&r) {
                    manifest.traces.push(r);
                }
            }
            let ckpt = checkpoint_path(out, seed, t + 1);
            save_state(
                &ckpt,
                &RunState {
                    tasks_done: t + 1,
                    method: state.clone(),
                },
            )?;
            let r = rel(out, &ckpt);
            if !manifest.checkpoints.contains(&r) {
                manifest.checkpoints.push(r);
            }
            manifest.progress.insert(seed, t + 1);
            manifest.timings.push(TaskTiming {
                seed,
                task: t,
                train_secs,
                eval_secs,
            });
            manifest.save(out)?;
            if let Some(b) = budget.as_mut() {
                *b -= 1;
            }
        }
    }
    Ok(true)
}

/// Reads the resolved config saved next to a run's results.
pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(dir.join(CONFIG_FILE))?;
    ExperimentConfig::from_toml(&text)
}
