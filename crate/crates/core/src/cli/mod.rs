//! `scs-lab` commands: dataset generation, training, evaluation and sweeps.

pub mod format;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::labels::{split_dataset, Frame};
use crate::losses::Scheme;
use crate::synth::{generate_dataset, generate_held_out, SceneConfig};
use crate::train::{train, train_teachers, Strategy, Teachers, TrainConfig, TrainData};
use format::{
    config_hash, frames_text, parse_frames, parse_manifest, parse_metrics, parse_model, sha256_hex, sweep_csv,
    Manifest, MetricsRecord, ModelFile, SweepRow, FORMAT_VERSION,
};

pub const THREADS_ENV: &str = "SCS_LAB_THREADS";

/// Vehicle share of the single-class split, or fully labeled training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Split {
    Fraction(f64),
    Full,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Fraction(x) => write!(f, "{x}"),
            Split::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Split::Full);
        }
        let x: f64 = s.parse().map_err(|_| Error::Config(format!("split `{s}` is neither a fraction nor `full`")))?;
        Split::Fraction(x).validated()
    }
}

impl Split {
    fn validated(self) -> Result<Self> {
        match self {
            Split::Fraction(x) if !(x > 0.0 && x < 1.0) => Err(Error::Config(format!("split {x} must lie in (0, 1)"))),
            s => Ok(s),
        }
    }
}

impl Serialize for Split {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Split::Fraction(x) => s.serialize_f64(*x),
            Split::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Split::Fraction(x).validated().map_err(serde::de::Error::custom),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// `seg` or `seg:heatmap`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemePair {
    pub seg: Scheme,
    pub heatmap: Scheme,
}

impl FromStr for SchemePair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((a, b)) => Ok(SchemePair { seg: a.parse()?, heatmap: b.parse()? }),
            None => {
                let v: Scheme = s.parse()?;
                Ok(SchemePair { seg: v, heatmap: v })
            }
        }
    }
}

impl fmt::Display for SchemePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.seg.name(), self.heatmap.name())
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("scs-lab-out")
}
fn default_frames() -> usize {
    100
}
fn default_held_out() -> usize {
    40
}
fn default_split() -> Split {
    Split::Fraction(0.9)
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Training scenes generated.
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Fully labeled evaluation scenes.
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: default_output_dir(),
            frames: default_frames(),
            held_out: default_held_out(),
            split: default_split(),
            seeds: default_seeds(),
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.held_out == 0 {
            return Err(Error::Config("need at least 2 training frames and 1 held-out frame".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.split.validated()?;
        self.scene.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.train.num_classes != 2 {
            return Err(Error::Config("the synthetic scenes carry exactly two classes".into()));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec { scene: self.scene, frames: self.frames, held_out: self.held_out }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir.join("dataset")
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Settings that determine the generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneConfig,
    pub frames: usize,
    pub held_out: usize,
}

/// Effective settings of one training run, after command-line overrides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub dataset: DatasetSpec,
    pub split: Split,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunSpec {
    pub fn name(&self) -> String {
        let t = &self.train;
        format!(
            "{}_{}-{}_x{}_p{}_seed{}",
            t.strategy.name(),
            t.loss.seg_scheme.name(),
            t.loss.heatmap_scheme.name(),
            self.split,
            t.p_vehicle,
            t.seed
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct RunOverrides {
    /// supervised | self | teacher | integrated
    #[arg(long)]
    pub strategy: Option<String>,
    /// aggressive | conservative | informed, or seg:heatmap for separate schemes
    #[arg(long)]
    pub scheme: Option<String>,
    /// Vehicle share of the single-class split, or `full`
    #[arg(long)]
    pub split: Option<String>,
    /// Probability of drawing a batch slot from the vehicle subset
    #[arg(long = "resample-p")]
    pub resample_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunOverrides {
    pub fn apply(&self, cfg: &ExperimentConfig) -> Result<RunSpec> {
        let mut train = cfg.train;
        let mut split = cfg.split;
        if let Some(s) = &self.strategy {
            train.strategy = s.parse()?;
        }
        if let Some(s) = &self.scheme {
            let pair: SchemePair = s.parse()?;
            train.loss.seg_scheme = pair.seg;
            train.loss.heatmap_scheme = pair.heatmap;
        }
        if let Some(s) = &self.split {
            split = s.parse()?;
        }
        if let Some(p) = self.resample_p {
            train.p_vehicle = p;
        }
        train.seed = self.seed.unwrap_or(cfg.seeds[0]);
        train.validate()?;
        Ok(RunSpec { dataset: cfg.dataset_spec(), split, train, eval: cfg.eval })
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("record serializes");
    s.push('\n');
    s
}

const TRAIN_FILE: &str = "train.jsonl";
const TEST_FILE: &str = "test.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

/// Writes the training and held-out frames plus a manifest under `<output_dir>/dataset`.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let train_frames = generate_dataset(&cfg.scene, cfg.frames)?;
    let test_frames = generate_held_out(&cfg.scene, cfg.held_out)?;
    let (train_text, test_text) = (frames_text(&train_frames), frames_text(&test_frames));
    let dir = cfg.dataset_dir();
    write_file(&dir.join(TRAIN_FILE), &train_text)?;
    write_file(&dir.join(TEST_FILE), &test_text)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(&cfg.dataset_spec()),
        seed: cfg.scene.seed,
        train_frames: train_frames.len(),
        test_frames: test_frames.len(),
        train_file: TRAIN_FILE.into(),
        test_file: TEST_FILE.into(),
        dataset_hash: sha256_hex(format!("{train_text}{test_text}").as_bytes()),
    };
    write_file(&dir.join(MANIFEST_FILE), &to_json(&manifest))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

/// Loads the dataset under `<output_dir>/dataset`, refusing one generated from other settings.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    let manifest = parse_manifest(&read_file(&dir.join(MANIFEST_FILE))?)?;
    let expected = config_hash(&cfg.dataset_spec());
    if manifest.config_hash != expected {
        return Err(Error::Mismatch(format!(
            "dataset in {} was generated with config {} but the current config hashes to {expected}",
            dir.display(),
            manifest.config_hash
        )));
    }
    let train_text = read_file(&dir.join(&manifest.train_file))?;
    let test_text = read_file(&dir.join(&manifest.test_file))?;
    if sha256_hex(format!("{train_text}{test_text}").as_bytes()) != manifest.dataset_hash {
        return Err(Error::Mismatch("dataset files do not match the manifest hash".into()));
    }
    let k = cfg.train.num_classes;
    let train = parse_frames(&train_text, k)?;
    let test = parse_frames(&test_text, k)?;
    if train.len() != manifest.train_frames || test.len() != manifest.test_frames {
        return Err(Error::Mismatch("dataset frame counts differ from the manifest".into()));
    }
    Ok(Dataset { manifest, train, test })
}

pub fn training_data(frames: &[Frame], split: Split, seed: u64) -> Result<TrainData> {
    match split {
        Split::Full => Ok(TrainData { vehicle: frames.to_vec(), pedestrian: frames.to_vec() }),
        Split::Fraction(x) => {
            let (vehicle, pedestrian) = split_dataset(frames, x, seed)?;
            Ok(TrainData { vehicle, pedestrian })
        }
    }
}

/// Teacher settings: everything that shapes the teachers, normalized so runs that only
/// differ in student settings share them.
#[derive(Serialize)]
struct TeacherKey<'a> {
    dataset_hash: &'a str,
    split: Split,
    train: TrainConfig,
}

fn teachers_for(cfg: &ExperimentConfig, run: &RunSpec, data: &TrainData, dataset_hash: &str) -> Result<Teachers> {
    let mut t = run.train;
    t.strategy = Strategy::Supervised;
    t.loss.seg_scheme = Scheme::Informed;
    t.loss.heatmap_scheme = Scheme::Informed;
    t.p_vehicle = 0.5;
    let key = config_hash(&TeacherKey { dataset_hash, split: run.split, train: t });
    let path = cfg.output_dir.join("teachers").join(format!("{}.json", &key[..16]));
    if path.exists() {
        let teachers: Teachers =
            serde_json::from_str(&read_file(&path)?).map_err(|e| Error::Format(format!("teachers: {e}")))?;
        return Ok(teachers);
    }
    let teachers = train_teachers(data, &run.train)?;
    write_file(&path, &to_json(&teachers))?;
    Ok(teachers)
}

fn ensure_teachers(cfg: &ExperimentConfig, overrides: &RunOverrides) -> Result<()> {
    let run = overrides.apply(cfg)?;
    if !run.train.strategy.needs_teachers() || run.split == Split::Full {
        return Ok(());
    }
    let dataset = load_dataset(cfg)?;
    let data = training_data(&dataset.train, run.split, run.train.seed)?;
    teachers_for(cfg, &run, &data, &dataset.manifest.dataset_hash).map(|_| ())
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub model_path: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: MetricsRecord,
}

/// Trains one configuration, then writes `model.json`, `metrics.json` and `trace.csv`
/// under `<output_dir>/runs/<run name>`. A diverged run keeps its partial trace.
pub fn cmd_train(cfg: &ExperimentConfig, overrides: &RunOverrides) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let run = overrides.apply(cfg)?;
    let dataset = load_dataset(cfg)?;
    let data = training_data(&dataset.train, run.split, run.train.seed)?;
    let teachers = if run.train.strategy.needs_teachers() {
        if run.split == Split::Full {
            return Err(Error::Config("pseudo-label strategies need a single-class split".into()));
        }
        Some(teachers_for(cfg, &run, &data, &dataset.manifest.dataset_hash)?)
    } else {
        None
    };
    let run_dir = cfg.output_dir.join("runs").join(run.name());
    let out = match train(&data, &run.train, teachers.as_ref()) {
        Ok(out) => out,
        Err(Error::Diverged { iteration, loss, trace }) => {
            write_file(&run_dir.join("trace.csv"), &trace_csv(&config_hash(&run), &trace))?;
            return Err(Error::Diverged { iteration, loss, trace });
        }
        Err(e) => return Err(e),
    };
    let model = ModelFile {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(&run),
        dataset_hash: dataset.manifest.dataset_hash.clone(),
        run,
        detector: out.detector,
    };
    let report = evaluate(&model.detector, &dataset.test, &run.eval)?;
    let metrics = MetricsRecord::new(&model, &report, out.trace.last().map(|t| t.1));
    let model_path = run_dir.join("model.json");
    let metrics_path = run_dir.join("metrics.json");
    write_file(&model_path, &to_json(&model))?;
    write_file(&metrics_path, &to_json(&metrics))?;
    write_file(&run_dir.join("trace.csv"), &trace_csv(&model.config_hash, &out.trace))?;
    Ok(TrainArtifacts { run_dir, model_path, metrics_path, metrics })
}

fn trace_csv(hash: &str, trace: &[(usize, f64)]) -> String {
    let mut s = format!("# config_hash {hash}\niteration,loss\n");
    for (t, l) in trace {
        s.push_str(&format!("{t},{l}\n"));
    }
    s
}

/// Re-evaluates a saved model on the held-out frames of the configured dataset.
pub fn cmd_eval(cfg: &ExperimentConfig, model_path: &Path) -> Result<MetricsRecord> {
    cfg.validate()?;
    let model = parse_model(&read_file(model_path)?)?;
    let dataset = load_dataset(cfg)?;
    if model.dataset_hash != dataset.manifest.dataset_hash {
        return Err(Error::Mismatch(format!(
            "model was trained on dataset {} but {} holds {}",
            model.dataset_hash,
            cfg.dataset_dir().display(),
            dataset.manifest.dataset_hash
        )));
    }
    if model.run.dataset != cfg.dataset_spec() {
        return Err(Error::Mismatch("model was trained under different dataset settings".into()));
    }
    let report = evaluate(&model.detector, &dataset.test, &model.run.eval)?;
    Ok(MetricsRecord::new(&model, &report, None))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    ResampleP,
    Split,
    Scheme,
    Strategy,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resample_p" => Ok(Axis::ResampleP),
            "split" => Ok(Axis::Split),
            "scheme" => Ok(Axis::Scheme),
            "strategy" => Ok(Axis::Strategy),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (resample_p, split, scheme, strategy)"))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::ResampleP => "resample_p",
            Axis::Split => "split",
            Axis::Scheme => "scheme",
            Axis::Strategy => "strategy",
        }
    }

    fn overrides(self, value: &str, seed: u64) -> Result<RunOverrides> {
        let mut o = RunOverrides { seed: Some(seed), ..RunOverrides::default() };
        match self {
            Axis::ResampleP => {
                o.resample_p = Some(value.parse().map_err(|_| Error::Config(format!("bad resample_p `{value}`")))?)
            }
            Axis::Split => o.split = Some(value.parse::<Split>()?.to_string()),
            Axis::Scheme => o.scheme = Some(value.parse::<SchemePair>()?.to_string()),
            Axis::Strategy => o.strategy = Some(value.parse::<Strategy>()?.name().to_string()),
        }
        Ok(o)
    }
}

pub fn thread_cap() -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0).unwrap_or(hw)
}

/// One run per value per seed; failed runs are recorded and the sweep continues.
/// Rows come out in (value, seed, class) order regardless of scheduling.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: Axis, values: &[String]) -> Result<(PathBuf, Vec<SweepRow>)> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut jobs = Vec::new();
    for v in values {
        for &seed in &cfg.seeds {
            // reject malformed values before any run starts
            let o = axis.overrides(v, seed)?;
            let hash = o.apply(cfg).map(|run| config_hash(&run)).unwrap_or_default();
            jobs.push((v.clone(), seed, o, hash));
        }
    }
    if !cfg.dataset_dir().join(MANIFEST_FILE).exists() {
        cmd_gen(cfg)?;
    }
    // runs that differ only in student settings share teachers; build those serially
    // so parallel runs never race on the same teacher file
    for (_, _, o, _) in &jobs {
        let _ = ensure_teachers(cfg, o);
    }
    let results: Vec<std::sync::Mutex<Option<Result<MetricsRecord>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..thread_cap().min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = cmd_train(cfg, &jobs[i].2).map(|a| a.metrics);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    let classes: Vec<String> = cfg.train.classes().iter().map(|c| c.name().to_string()).collect();
    for ((value, seed, _, hash), slot) in jobs.iter().zip(results) {
        let result = slot.into_inner().expect("result slot").expect("every job ran");
        for class in &classes {
            let (ap, seg_iou, status) = match &result {
                Ok(m) => {
                    let c = m.class(class).expect("class reported");
                    (Some(c.ap), Some(c.seg_iou), "ok".to_string())
                }
                Err(e) => (None, None, e.to_string()),
            };
            rows.push(SweepRow {
                axis: axis.name().into(),
                value: value.clone(),
                seed: *seed,
                config_hash: hash.clone(),
                class: class.clone(),
                ap,
                seg_iou,
                status,
            });
        }
    }
    let path = cfg.output_dir.join("sweeps").join(format!("{}.csv", axis.name()));
    write_file(&path, &sweep_csv(&rows)?)?;
    Ok((path, rows))
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Mismatch(_) | Error::Placement { .. } | Error::EmptySubset(_) => 2,
        Error::Diverged { .. } => 3,
        Error::Io { .. } | Error::Format(_) => 4,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "scs-lab", version, about = "Single-class supervision experiments on synthetic LiDAR scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and held-out datasets
    Gen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one configuration and evaluate it on the held-out frames
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Evaluate a saved model on the held-out frames
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Write the metrics record here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every value of one axis for every configured seed and tabulate AP
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// resample_p | split | scheme | strategy
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

/// Runs a parsed command line, returning what to print on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gen { config } => {
            let cfg = load_config(&config)?;
            let m = cmd_gen(&cfg)?;
            Ok(format!(
                "wrote {} training and {} held-out frames to {} (config {})",
                m.train_frames,
                m.test_frames,
                cfg.dataset_dir().display(),
                &m.config_hash[..12]
            ))
        }
        Command::Train { config, overrides } => {
            let cfg = load_config(&config)?;
            let a = cmd_train(&cfg, &overrides)?;
            let mut s = format!("{}\n", a.run_dir.display());
            for c in &a.metrics.classes {
                s.push_str(&format!("{:<10} AP {:.4}  seg IoU {:.4}\n", c.name, c.ap, c.seg_iou));
            }
            Ok(s.trim_end().to_string())
        }
        Command::Eval { config, model, out } => {
            let cfg = load_config(&config)?;
            let m = cmd_eval(&cfg, &model)?;
            let text = to_json(&m);
            match out {
                Some(p) => {
                    write_file(&p, &text)?;
                    Ok(p.display().to_string())
                }
                None => Ok(text.trim_end().to_string()),
            }
        }
        Command::Sweep { config, axis, values } => {
            let cfg = load_config(&config)?;
            let (path, rows) = cmd_sweep(&cfg, axis.parse()?, &values)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            Ok(format!("{} ({} rows, {} failed)", path.display(), rows.len(), failed))
        }
    }
}

/// Re-reads a metrics record; used by tooling that consumes run directories.
pub fn load_metrics(path: &Path) -> Result<MetricsRecord> {
    parse_metrics(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(parse_config("frames = 10\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(parse_config("[train]\nlearning_rate = 0.1\n"), Err(Error::Config(_))));
        assert!(matches!(parse_config("[train.loss]\ngama = 2.0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = parse_config("frames = 10\nsplit = \"full\"\n[train]\niterations = 500\n").unwrap();
        assert_eq!(cfg.frames, 10);
        assert_eq!(cfg.split, Split::Full);
        assert_eq!(cfg.train.iterations, 500);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config("split = 1.5\n").is_err());
        assert!(parse_config("seeds = []\n").is_err());
        assert!(parse_config("[train]\np_vehicle = 2.0\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::default();
        let o = RunOverrides {
            strategy: Some("teacher".into()),
            scheme: Some("informed:conservative".into()),
            split: Some("0.5".into()),
            resample_p: Some(0.25),
            seed: Some(7),
        };
        let run = o.apply(&cfg).unwrap();
        assert_eq!(run.train.strategy, Strategy::Teacher);
        assert_eq!(run.train.loss.seg_scheme, Scheme::Informed);
        assert_eq!(run.train.loss.heatmap_scheme, Scheme::Conservative);
        assert_eq!(run.split, Split::Fraction(0.5));
        assert_eq!(run.train.p_vehicle, 0.25);
        assert_eq!(run.train.seed, 7);
        assert!(RunOverrides { strategy: Some("bogus".into()), ..RunOverrides::default() }.apply(&cfg).is_err());
        assert!(RunOverrides { resample_p: Some(-0.1), ..RunOverrides::default() }.apply(&cfg).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Diverged { iteration: 1, loss: f64::NAN, trace: vec![] }), 3);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), 4);
    }
}
