//! Subcommand front end. [`run_command`] maps every outcome to an exit
//! status: 0 success, 1 usage or configuration error, 2 data or contract
//! error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::classifier::{
    accuracy, auroc, concat_representations, evaluate, random_hyperparameter_search,
    train_mlp_classifier, weighted_f1, Dataset, EvalReport, MlpConfig, MlpModel, PrimaryMetric,
    SearchSpace, TaskSpec,
};
use crate::container::{load_model, ModelContainer, Persist};
use crate::corpus::{
    build_vocabulary, featurize_tfidf, generate_synthetic_corpus, read_jsonl, record_tokens,
    write_jsonl, FeatureMatrix, NormalizationMode, Normalizer, PatientRecord,
    SyntheticCorpusSpec, Vocabulary,
};
use crate::doc2vec::{infer_doc_vector, train_dbow, Doc2vecConfig, DocEmbeddingModel};
use crate::error::{Error, Result};
use crate::interpret::{chi2_feature_scores, feature_significance, SensitivityOptions};
use crate::nn::{gradient_check, Activation, DenseLayer, JacobianOutput, Loss};
use crate::repr::Representation;
use crate::rng::Rng;
use crate::sdae::{encode, feature_reconstruction_error, train_sdae, SdaeConfig, SdaeModel};
use crate::stats::{
    approx_randomization_test, cohens_kappa, spearman_rho, PairedOutcomes, BASE_ALPHA,
    DEFAULT_SHUFFLES,
};

/// Environment variable naming a default JSON config file.
pub const CONFIG_ENV: &str = "PATIENT_REPR_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "patient-repr", version, about = "Patient representations from clinical notes")]
struct Cli {
    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Allow non-deterministic execution.
    #[arg(long, global = true)]
    no_deterministic: bool,
    /// JSON config file; command-line flags take precedence.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Global seed, overriding any seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus (JSONL).
    GenSynth(GenSynthArgs),
    /// Build a vocabulary and TF-IDF features.
    Prep(PrepArgs),
    /// Train a stacked denoising autoencoder.
    TrainSdae(TrainSdaeArgs),
    /// Encode TF-IDF features with a trained autoencoder.
    Encode(EncodeArgs),
    /// Train PV-DBOW document vectors.
    TrainDoc2vec(TrainDoc2vecArgs),
    /// Infer document vectors for new notes.
    InferDoc2vec(InferDoc2vecArgs),
    /// Concatenate two representation files per patient.
    ConcatReps(ConcatArgs),
    /// Train a feed-forward classifier.
    TrainClf(TrainClfArgs),
    /// Evaluate a classifier.
    Eval(EvalArgs),
    /// Random hyperparameter search for a classifier.
    Search(SearchArgs),
    /// Feature attribution analyses.
    #[command(subcommand)]
    Explain(ExplainCommand),
    /// Compare two evaluation reports.
    #[command(subcommand)]
    Compare(CompareCommand),
    /// Check backpropagation against finite differences on random networks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
enum ExplainCommand {
    /// Chain-rule sensitivity significance of input features.
    Sensitivity(SensitivityArgs),
    /// Per-feature reconstruction error of the first autoencoder layer.
    ReconError(ReconArgs),
    /// One-vs-rest chi-squared feature ranking.
    Chi2(Chi2Args),
}

#[derive(Debug, Subcommand)]
enum CompareCommand {
    /// Cohen's kappa between two systems' predictions.
    Kappa(KappaArgs),
    /// Paired approximate randomization test.
    Sigtest(SigtestArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_patients: Option<usize>,
}

#[derive(Debug, Args)]
struct PrepArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Reuse an existing vocabulary instead of building one.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    min_frequency: Option<u64>,
    /// Replacement-rule table (JSON) for number/time/measurement mentions.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Where to write the vocabulary when one is built.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    #[arg(long)]
    features_out: PathBuf,
}

#[derive(Debug, Args)]
struct OptimizerFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainSdaeArgs {
    #[arg(long)]
    features: PathBuf,
    /// Vocabulary the features must have been built from.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Comma-separated layer sizes, e.g. 800 or 500,200.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    noise: Option<f64>,
    #[command(flatten)]
    opt: OptimizerFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Doc2vecFlags {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    min_frequency: Option<u64>,
    #[arg(long)]
    negatives: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainDoc2vecArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[command(flatten)]
    d2v: Doc2vecFlags,
    #[arg(long)]
    out: PathBuf,
    /// Also write the trained document vectors as a representation file.
    #[arg(long)]
    reps_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferDoc2vecArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Inference passes (default: the model's training epochs).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConcatArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TaskFlags {
    /// Task name; in_hosp, d30, y1, diag_cat, proc_cat and gender are built in.
    #[arg(long)]
    task: String,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Auroc,
    WeightedF1,
}

#[derive(Debug, Args)]
struct TrainClfArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Corpus (JSONL) holding the labels.
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    task: TaskFlags,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    patience: Option<usize>,
    #[command(flatten)]
    opt: OptimizerFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    reps: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    task: TaskFlags,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutputArg {
    Activations,
    Logits,
}

#[derive(Debug, Args)]
struct SensitivityArgs {
    #[arg(long)]
    sdae: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Use only the first N instances.
    #[arg(long)]
    max_instances: Option<usize>,
    #[arg(long, value_enum, default_value = "activations")]
    output: OutputArg,
    /// Rank only features present in at least one instance.
    #[arg(long)]
    present_only: bool,
    /// Ranked list, token TAB score.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FrequencyArg {
    Corpus,
    Document,
}

#[derive(Debug, Args)]
struct ReconArgs {
    #[arg(long)]
    sdae: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum, default_value = "corpus")]
    frequency: FrequencyArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct Chi2Args {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    task: TaskFlags,
    /// Class whose one-vs-rest ranking goes to the TSV.
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KappaArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SigMetric {
    Auroc,
    WeightedF1,
    Accuracy,
}

#[derive(Debug, Args)]
struct SigtestArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum)]
    metric: SigMetric,
    #[arg(long, default_value_t = DEFAULT_SHUFFLES)]
    shuffles: usize,
    #[arg(long, default_value_t = 1)]
    hypotheses: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    networks: usize,
    #[arg(long, default_value_t = 20)]
    probes: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(format!("configuration error: {m}")),
            other => Failure::Run(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Merged view of the config file and flags. Section values start from
/// the library defaults, then the file, then flags.
pub struct RunConfig {
    file: Value,
    seed_flag: Option<u64>,
    pub deterministic: bool,
    pub threads: Option<usize>,
}

impl RunConfig {
    fn load(path: Option<&Path>, seed_flag: Option<u64>, deterministic: bool, threads: Option<usize>) -> CliResult<Self> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| Failure::Usage(format!("config {} is not valid JSON: {e}", p.display())))?;
                if !v.is_object() {
                    return Err(Failure::Usage("config file must hold a JSON object".into()));
                }
                v
            }
            None => json!({}),
        };
        Ok(Self {
            file,
            seed_flag,
            deterministic,
            threads,
        })
    }

    /// Global seed: flag, then the file's top-level `seed`, then 0.
    pub fn seed(&self) -> u64 {
        self.seed_flag
            .or_else(|| self.file.get("seed").and_then(Value::as_u64))
            .unwrap_or(0)
    }

    fn section<T: Serialize + DeserializeOwned + Default>(&self, name: &str) -> CliResult<T> {
        let mut base = serde_json::to_value(T::default()).map_err(Error::from)?;
        let from_file = self.file.get(name).cloned().unwrap_or_else(|| json!({}));
        merge(&mut base, &from_file);
        let section_seed = from_file.get("seed").is_some();
        if let Some(obj) = base.as_object_mut() {
            if obj.contains_key("seed") && (self.seed_flag.is_some() || !section_seed) {
                obj.insert("seed".into(), json!(self.seed()));
            }
        }
        serde_json::from_value(base)
            .map_err(|e| Failure::Usage(format!("config section {name:?}: {e}")))
    }

    /// What every artifact records about how it was made.
    fn stamp(&self, command: &str, resolved: &impl Serialize) -> CliResult<Value> {
        let v = json!({
            "command": command,
            "seed": self.seed(),
            "deterministic": self.deterministic,
            "config": serde_json::to_value(resolved).map_err(Error::from)?,
        });
        info!("resolved config: {v}");
        Ok(v)
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Runs one command line (including the program name) and returns the
/// exit status.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .is_test(cfg!(test))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let run = RunConfig::load(cli.config.as_deref(), cli.seed, !cli.no_deterministic, cli.threads)?;
    if !run.deterministic {
        info!("non-deterministic mode requested; all kernels reduce in a fixed order regardless");
    }
    match cli.command {
        Command::GenSynth(a) => gen_synth(&run, a),
        Command::Prep(a) => prep(&run, a),
        Command::TrainSdae(a) => train_sdae_cmd(&run, a),
        Command::Encode(a) => encode_cmd(&run, a),
        Command::TrainDoc2vec(a) => train_doc2vec_cmd(&run, a),
        Command::InferDoc2vec(a) => infer_doc2vec_cmd(&run, a),
        Command::ConcatReps(a) => concat_cmd(&run, a),
        Command::TrainClf(a) => train_clf_cmd(&run, a),
        Command::Eval(a) => eval_cmd(&run, a),
        Command::Search(a) => search_cmd(&run, a),
        Command::Explain(ExplainCommand::Sensitivity(a)) => sensitivity_cmd(&run, a),
        Command::Explain(ExplainCommand::ReconError(a)) => recon_cmd(&run, a),
        Command::Explain(ExplainCommand::Chi2(a)) => chi2_cmd(&run, a),
        Command::Compare(CompareCommand::Kappa(a)) => kappa_cmd(&run, a),
        Command::Compare(CompareCommand::Sigtest(a)) => sigtest_cmd(&run, a),
        Command::Gradcheck(a) => gradcheck_cmd(&run, a),
    }
}

// ---- file helpers

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Serializes `value` as an object and adds the run stamp under `run`.
fn stamped(value: &impl Serialize, run: &Value) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("run".into(), run.clone());
            Ok(v)
        }
        None => Ok(json!({ "value": v, "run": run })),
    }
}

/// Formats that cannot carry metadata get a `<file>.run.json` next to them.
fn write_sidecar(path: &Path, run: &Value) -> Result<()> {
    let mut name = path.as_os_str().to_owned();
    name.push(".run.json");
    write_json(Path::new(&name), run)
}

fn write_tsv(path: &Path, rows: impl Iterator<Item = (String, f64)>) -> Result<()> {
    let mut out = String::new();
    for (token, score) in rows {
        out.push_str(&token);
        out.push('\t');
        out.push_str(&format!("{score:e}"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_normalizer(rules: Option<&Path>) -> Result<Normalizer> {
    match rules {
        Some(p) => Normalizer::from_json(&fs::read_to_string(p)?),
        None => Ok(Normalizer::default()),
    }
}

/// A container with the run stamp in its metadata.
fn save_stamped<M: Persist>(model: &M, vocab_hash: Option<String>, run: &Value, path: &Path) -> Result<()> {
    let mut c = model.to_container()?;
    if vocab_hash.is_some() {
        c.metadata.vocab_hash = vocab_hash;
    }
    if let Some(obj) = c.metadata.extra.as_object_mut() {
        obj.insert("run".into(), run.clone());
    }
    c.save(path)
}

fn load_container<M: Persist>(path: &Path) -> Result<(M, Option<String>)> {
    let c = ModelContainer::load(path)?;
    Ok((M::from_container(&c)?, c.metadata.vocab_hash))
}

#[derive(Serialize, Deserialize)]
struct RepsFile {
    kind: String,
    representations: Vec<Representation>,
}

fn write_reps(path: &Path, reps: Vec<Representation>, run: &Value) -> Result<()> {
    let file = RepsFile {
        kind: "representations".into(),
        representations: reps,
    };
    write_json(path, &stamped(&file, run)?)
}

fn read_reps(path: &Path) -> Result<Vec<Representation>> {
    let f: RepsFile = read_json(path)?;
    if f.kind != "representations" {
        return Err(Error::Data(format!("{} is not a representation file", path.display())));
    }
    Ok(f.representations)
}

fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let f: FeatureMatrix = read_json(path)?;
    f.validate()?;
    Ok(f)
}

fn check_hash(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::Data(format!(
            "vocabulary hash mismatch: {what} expects {expected}, found {found}"
        )));
    }
    Ok(())
}

fn task_spec(flags: &TaskFlags) -> CliResult<TaskSpec> {
    match flags.n_classes {
        Some(n) => {
            let metric = match flags.metric {
                Some(MetricArg::Auroc) => PrimaryMetric::Auroc,
                Some(MetricArg::WeightedF1) => PrimaryMetric::WeightedF1,
                None if n == 2 => PrimaryMetric::Auroc,
                None => PrimaryMetric::WeightedF1,
            };
            Ok(TaskSpec::new(flags.task.clone(), n, metric)?)
        }
        None => TaskSpec::standard(&flags.task).ok_or_else(|| {
            Failure::Usage(format!(
                "unknown task {:?}; pass --n-classes for a custom task",
                flags.task
            ))
        }),
    }
}

fn labels_for(records: &[PatientRecord], ids: &[String], task: &str) -> Result<Vec<usize>> {
    let by_id: BTreeMap<&str, &PatientRecord> =
        records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .and_then(|r| r.labels.get(task).copied())
                .ok_or_else(|| Error::Data(format!("no {task:?} label for patient {id}")))
        })
        .collect()
}

fn split_reps(reps: Vec<Representation>) -> (Vec<String>, Vec<Vec<f64>>) {
    reps.into_iter().map(|r| (r.patient_id, r.values)).unzip()
}

fn apply_optimizer(flags: &OptimizerFlags, epochs: &mut usize, batch: &mut usize, opt: &mut crate::nn::RmsPropConfig) {
    if let Some(v) = flags.epochs {
        *epochs = v;
    }
    if let Some(v) = flags.batch_size {
        *batch = v;
    }
    if let Some(v) = flags.learning_rate {
        opt.learning_rate = v;
    }
    if let Some(v) = flags.epsilon {
        opt.epsilon = v;
    }
}

// ---- commands

fn gen_synth(run: &RunConfig, a: GenSynthArgs) -> CliResult<()> {
    let mut spec: SyntheticCorpusSpec = run.section("synth")?;
    if let Some(n) = a.n_patients {
        spec.n_patients = n;
    }
    let stamp = run.stamp("gen-synth", &spec)?;
    let corpus = generate_synthetic_corpus(&spec)?;
    write_jsonl(&a.out, &corpus)?;
    write_sidecar(&a.out, &stamp)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct PrepConfig {
    min_frequency: u64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { min_frequency: 5 }
    }
}

fn prep(run: &RunConfig, a: PrepArgs) -> CliResult<()> {
    let mut cfg: PrepConfig = run.section("prep")?;
    if let Some(m) = a.min_frequency {
        cfg.min_frequency = m;
    }
    let normalizer = load_normalizer(a.rules.as_deref())?;
    let corpus = read_jsonl(&a.corpus)?;
    let stamp = run.stamp("prep", &cfg)?;
    let vocab = match &a.vocab {
        Some(p) => {
            if a.min_frequency.is_some() {
                warn!("--min-frequency ignored with an existing vocabulary");
            }
            let v: Vocabulary = read_json(p)?;
            if v.mode() != NormalizationMode::Sdae {
                return Err(Error::Data("TF-IDF features need an sdae-mode vocabulary".into()).into());
            }
            v
        }
        None => {
            let v = build_vocabulary(&corpus, NormalizationMode::Sdae, cfg.min_frequency, &normalizer)?;
            let out = a.vocab_out.as_ref().ok_or_else(|| {
                Failure::Usage("--vocab-out is required when building a vocabulary".into())
            })?;
            write_json(out, &stamped(&v, &stamp)?)?;
            v
        }
    };
    let features = featurize_tfidf(&corpus, &vocab, &normalizer)?;
    write_json(&a.features_out, &stamped(&features, &stamp)?)?;
    Ok(())
}

fn train_sdae_cmd(run: &RunConfig, a: TrainSdaeArgs) -> CliResult<()> {
    let mut cfg: SdaeConfig = run.section("sdae")?;
    if let Some(h) = a.hidden {
        cfg.hidden_sizes = h;
    }
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    apply_optimizer(&a.opt, &mut cfg.epochs, &mut cfg.batch_size, &mut cfg.optimizer);
    cfg.validate()?;
    let features = read_features(&a.features)?;
    if let Some(p) = &a.vocab {
        let v: Vocabulary = read_json(p)?;
        check_hash("features", &v.hash(), &features.vocab_hash)?;
    }
    let stamp = run.stamp("train-sdae", &cfg)?;
    let model = train_sdae(&features, &cfg)?;
    save_stamped(&model, Some(features.vocab_hash.clone()), &stamp, &a.out)?;
    Ok(())
}

fn encode_cmd(run: &RunConfig, a: EncodeArgs) -> CliResult<()> {
    let (model, hash): (SdaeModel, _) = load_container(&a.model)?;
    let features = read_features(&a.features)?;
    if let Some(h) = hash {
        check_hash("model", &h, &features.vocab_hash)?;
    }
    let stamp = run.stamp("encode", &json!({ "sdae": model.config }))?;
    write_reps(&a.out, encode(&model, &features)?, &stamp)?;
    Ok(())
}

fn doc2vec_config(run: &RunConfig, f: &Doc2vecFlags) -> CliResult<Doc2vecConfig> {
    let mut cfg: Doc2vecConfig = run.section("doc2vec")?;
    if let Some(v) = f.dim {
        cfg.dim = v;
    }
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.window {
        cfg.window = v;
    }
    if let Some(v) = f.min_frequency {
        cfg.min_frequency = v;
    }
    if let Some(v) = f.negatives {
        cfg.negatives = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn doc2vec_tokens(corpus: &[PatientRecord], normalizer: &Normalizer) -> Vec<Vec<String>> {
    corpus
        .iter()
        .map(|r| record_tokens(r, NormalizationMode::Doc2vec, normalizer))
        .collect()
}

fn train_doc2vec_cmd(run: &RunConfig, a: TrainDoc2vecArgs) -> CliResult<()> {
    let cfg = doc2vec_config(run, &a.d2v)?;
    let normalizer = load_normalizer(a.rules.as_deref())?;
    let corpus = read_jsonl(&a.corpus)?;
    let docs = doc2vec_tokens(&corpus, &normalizer);
    let ids = corpus.iter().map(|r| r.patient_id.clone()).collect();
    let stamp = run.stamp("train-doc2vec", &cfg)?;
    let model = train_dbow(ids, &docs, &cfg)?;
    save_stamped(&model, None, &stamp, &a.out)?;
    if let Some(p) = &a.reps_out {
        write_reps(p, model.representations(), &stamp)?;
    }
    Ok(())
}

fn infer_doc2vec_cmd(run: &RunConfig, a: InferDoc2vecArgs) -> CliResult<()> {
    let (model, _): (DocEmbeddingModel, _) = load_container(&a.model)?;
    let mut cfg = model.config.clone();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let normalizer = load_normalizer(a.rules.as_deref())?;
    let corpus = read_jsonl(&a.corpus)?;
    let docs = doc2vec_tokens(&corpus, &normalizer);
    let stamp = run.stamp("infer-doc2vec", &cfg)?;
    let reps = corpus
        .iter()
        .zip(&docs)
        .map(|(r, d)| {
            let inf = infer_doc_vector(&model, d, &cfg)?;
            if let Some(w) = inf.warning {
                warn!("patient {}: {w}", r.patient_id);
            }
            Ok(Representation::new(r.patient_id.clone(), inf.vector))
        })
        .collect::<Result<Vec<_>>>()?;
    write_reps(&a.out, reps, &stamp)?;
    Ok(())
}

fn concat_cmd(run: &RunConfig, a: ConcatArgs) -> CliResult<()> {
    let left = read_reps(&a.a)?;
    let right = read_reps(&a.b)?;
    let stamp = run.stamp("concat-reps", &json!({}))?;
    write_reps(&a.out, concat_representations(&left, &right)?, &stamp)?;
    Ok(())
}

fn labelled(reps: &Path, labels: &[PatientRecord], task: &str) -> Result<(Vec<String>, Vec<Vec<f64>>, Vec<usize>)> {
    let (ids, x) = split_reps(read_reps(reps)?);
    let y = labels_for(labels, &ids, task)?;
    Ok((ids, x, y))
}

fn train_clf_cmd(run: &RunConfig, a: TrainClfArgs) -> CliResult<()> {
    let mut cfg: MlpConfig = run.section("classifier")?;
    if let Some(h) = a.hidden {
        cfg.hidden_sizes = h;
    }
    if let Some(p) = a.patience {
        cfg.patience = p;
    }
    apply_optimizer(&a.opt, &mut cfg.epochs, &mut cfg.batch_size, &mut cfg.optimizer);
    cfg.validate()?;
    let task = task_spec(&a.task)?;
    let records = read_jsonl(&a.labels)?;
    let (_, xt, yt) = labelled(&a.train, &records, &task.name)?;
    let (_, xv, yv) = labelled(&a.valid, &records, &task.name)?;
    let stamp = run.stamp("train-clf", &json!({ "task": task, "classifier": cfg }))?;
    let model = train_mlp_classifier(Dataset::new(&xt, &yt)?, &task, &cfg, Dataset::new(&xv, &yv)?)?;
    save_stamped(&model, None, &stamp, &a.out)?;
    Ok(())
}

fn eval_cmd(run: &RunConfig, a: EvalArgs) -> CliResult<()> {
    let model: MlpModel = load_model(&a.model)?;
    let records = read_jsonl(&a.labels)?;
    let (ids, x, y) = labelled(&a.reps, &records, &model.task.name)?;
    let stamp = run.stamp("eval", &json!({ "task": model.task }))?;
    let report = evaluate(&model, &ids, Dataset::new(&x, &y)?)?;
    write_json(&a.out, &stamped(&report, &stamp)?)?;
    Ok(())
}

fn search_cmd(run: &RunConfig, a: SearchArgs) -> CliResult<()> {
    let mut space: SearchSpace = run.section("search")?;
    if let Some(n) = a.n_samples {
        space.n_samples = n;
    }
    if let Some(e) = a.epochs {
        space.epochs = e;
    }
    space.validate()?;
    let task = task_spec(&a.task)?;
    let records = read_jsonl(&a.labels)?;
    let (_, xt, yt) = labelled(&a.train, &records, &task.name)?;
    let (_, xv, yv) = labelled(&a.valid, &records, &task.name)?;
    let stamp = run.stamp("search", &json!({ "task": task, "search": space }))?;
    let outcome = random_hyperparameter_search(Dataset::new(&xt, &yt)?, Dataset::new(&xv, &yv)?, &task, &space)?;
    save_stamped(&outcome.best, None, &stamp, &a.out)?;
    let report = json!({
        "best_index": outcome.best_index,
        "best_metric": outcome.best_metric,
        "leaderboard": outcome.leaderboard,
        "run": stamp,
    });
    write_json(&a.report, &report)?;
    Ok(())
}

fn sensitivity_cmd(run: &RunConfig, a: SensitivityArgs) -> CliResult<()> {
    let (sdae, hash): (SdaeModel, _) = load_container(&a.sdae)?;
    let clf: MlpModel = load_model(&a.classifier)?;
    let vocab: Vocabulary = read_json(&a.vocab)?;
    let mut features = read_features(&a.features)?;
    check_hash("features", &vocab.hash(), &features.vocab_hash)?;
    if let Some(h) = hash {
        check_hash("autoencoder", &h, &features.vocab_hash)?;
    }
    if let Some(n) = a.max_instances {
        let keep: Vec<usize> = (0..n.min(features.len())).collect();
        features = features.select(&keep);
    }
    let options = SensitivityOptions {
        output: match a.output {
            OutputArg::Activations => JacobianOutput::Activations,
            OutputArg::Logits => JacobianOutput::Logits,
        },
        present_only: a.present_only,
    };
    let stamp = run.stamp("explain sensitivity", &json!({ "options": options, "max_instances": a.max_instances }))?;
    let tokens: Vec<String> = vocab.tokens().map(str::to_string).collect();
    let report = feature_significance(&sdae, &clf, &features, &tokens, options)?;
    write_tsv(&a.out, report.ranking.iter().map(|r| (r.token.clone(), r.phi)))?;
    write_sidecar(&a.out, &stamp)?;
    if let Some(p) = &a.report {
        write_json(p, &stamped(&report, &stamp)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ReconFeature<'a> {
    feature: usize,
    token: &'a str,
    frequency: u64,
    error: f64,
}

fn recon_cmd(run: &RunConfig, a: ReconArgs) -> CliResult<()> {
    let (sdae, hash): (SdaeModel, _) = load_container(&a.sdae)?;
    let vocab: Vocabulary = read_json(&a.vocab)?;
    let features = read_features(&a.features)?;
    check_hash("features", &vocab.hash(), &features.vocab_hash)?;
    if let Some(h) = hash {
        check_hash("autoencoder", &h, &features.vocab_hash)?;
    }
    let freq = match a.frequency {
        FrequencyArg::Corpus => vocab.frequencies(),
        FrequencyArg::Document => vocab.document_frequencies(),
    };
    let frequency_kind = match a.frequency {
        FrequencyArg::Corpus => "corpus",
        FrequencyArg::Document => "document",
    };
    let stamp = run.stamp("explain recon-error", &json!({ "frequency": frequency_kind }))?;
    let report = feature_reconstruction_error(&sdae, &features)?;
    let freq_f: Vec<f64> = freq.iter().map(|&f| f as f64).collect();
    let rho = match spearman_rho(&report.errors, &freq_f) {
        Ok(r) => Some(r),
        Err(Error::UndefinedMetric(m)) => {
            warn!("spearman correlation undefined: {m}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let tokens: Vec<&str> = vocab.tokens().collect();
    write_tsv(&a.out, report.ranking.iter().map(|&i| (tokens[i].to_string(), report.errors[i])))?;
    write_sidecar(&a.out, &stamp)?;
    let per_feature: Vec<ReconFeature> = report
        .ranking
        .iter()
        .map(|&i| ReconFeature {
            feature: i,
            token: tokens[i],
            frequency: freq[i],
            error: report.errors[i],
        })
        .collect();
    let out = json!({
        "n_instances": report.n_instances,
        "frequency": frequency_kind,
        "spearman_rho": rho,
        "features": per_feature,
        "run": stamp,
    });
    write_json(&a.report, &out)?;
    Ok(())
}

fn chi2_cmd(run: &RunConfig, a: Chi2Args) -> CliResult<()> {
    let task = task_spec(&a.task)?;
    if a.class >= task.n_classes {
        return Err(Failure::Usage(format!("class {} out of range for {} classes", a.class, task.n_classes)));
    }
    let vocab: Vocabulary = read_json(&a.vocab)?;
    let features = read_features(&a.features)?;
    check_hash("features", &vocab.hash(), &features.vocab_hash)?;
    let records = read_jsonl(&a.labels)?;
    let labels = labels_for(&records, &features.patient_ids, &task.name)?;
    let stamp = run.stamp("explain chi2", &json!({ "task": task, "class": a.class }))?;
    let report = chi2_feature_scores(&features, &labels, task.n_classes)?;
    let tokens: Vec<&str> = vocab.tokens().collect();
    let scores = &report.scores[a.class];
    write_tsv(&a.out, report.rankings[a.class].iter().map(|&i| (tokens[i].to_string(), scores[i])))?;
    write_sidecar(&a.out, &stamp)?;
    if let Some(p) = &a.report {
        write_json(p, &stamped(&report, &stamp)?)?;
    }
    Ok(())
}

fn paired_reports(a: &Path, b: &Path) -> Result<(EvalReport, EvalReport)> {
    let ra: EvalReport = read_json(a)?;
    let rb: EvalReport = read_json(b)?;
    if ra.patient_ids != rb.patient_ids || ra.truth != rb.truth {
        return Err(Error::Data("evaluation reports cover different patients or labels".into()));
    }
    if ra.task.n_classes != rb.task.n_classes {
        return Err(Error::Data("evaluation reports have different class counts".into()));
    }
    Ok((ra, rb))
}

fn emit(path: Option<&Path>, value: &Value) -> Result<()> {
    match path {
        Some(p) => write_json(p, value),
        None => {
            use std::io::Write;
            let text = serde_json::to_string_pretty(value)?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn kappa_cmd(run: &RunConfig, a: KappaArgs) -> CliResult<()> {
    let (ra, rb) = paired_reports(&a.a, &a.b)?;
    let stamp = run.stamp("compare kappa", &json!({}))?;
    let kappa = cohens_kappa(&ra.predicted, &rb.predicted)?;
    emit(a.out.as_deref(), &json!({ "kappa": kappa, "n": ra.predicted.len(), "run": stamp }))?;
    Ok(())
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn sigtest_cmd(run: &RunConfig, a: SigtestArgs) -> CliResult<()> {
    let (ra, rb) = paired_reports(&a.a, &a.b)?;
    let n_classes = ra.task.n_classes;
    let (name, metric): (&str, Box<dyn Fn(&[Vec<f64>], &[usize]) -> Result<f64> + Sync>) = match a.metric {
        SigMetric::Auroc => {
            if n_classes != 2 {
                return Err(Failure::Usage("auroc needs a binary task".into()));
            }
            ("auroc", Box::new(|p: &[Vec<f64>], y: &[usize]| {
                let s: Vec<f64> = p.iter().map(|r| r[1]).collect();
                auroc(&s, y)
            }))
        }
        SigMetric::WeightedF1 => ("weighted_f1", Box::new(move |p: &[Vec<f64>], y: &[usize]| {
            let pred: Vec<usize> = p.iter().map(|r| argmax(r)).collect();
            weighted_f1(&pred, y, n_classes)
        })),
        SigMetric::Accuracy => ("accuracy", Box::new(|p: &[Vec<f64>], y: &[usize]| {
            let pred: Vec<usize> = p.iter().map(|r| argmax(r)).collect();
            accuracy(&pred, y)
        })),
    };
    let seed = run.seed();
    let stamp = run.stamp(
        "compare sigtest",
        &json!({ "metric": name, "shuffles": a.shuffles, "hypotheses": a.hypotheses, "base_alpha": BASE_ALPHA }),
    )?;
    let outcomes = PairedOutcomes::new(ra.probabilities, rb.probabilities, ra.truth)?;
    let result = approx_randomization_test(&outcomes, name, metric, a.shuffles, seed, a.hypotheses)?;
    emit(a.out.as_deref(), &stamped(&result, &stamp)?)?;
    Ok(())
}

/// A random network of at most 20 units per layer, with a loss to match.
fn random_network(rng: &mut Rng) -> (Vec<DenseLayer>, Loss, Vec<f64>, Vec<f64>) {
    let depth = 1 + rng.below(3);
    let mut dims: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(20)).collect();
    let loss = if rng.bernoulli(0.5) { Loss::CrossEntropy } else { Loss::Mse };
    if loss == Loss::CrossEntropy {
        let last = dims.last_mut().expect("depth ≥ 1");
        *last = (*last).max(2);
    }
    let layers: Vec<DenseLayer> = dims
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let act = match (k + 1 == depth, loss) {
                (true, Loss::CrossEntropy) => Activation::Softmax,
                _ => [Activation::Sigmoid, Activation::Linear][rng.below(2)],
            };
            let mut l = DenseLayer::glorot_uniform(w[0], w[1], act, rng);
            l.bias.iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
            l
        })
        .collect();
    let x: Vec<f64> = (0..dims[0]).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let out = dims[depth];
    let target = match loss {
        Loss::CrossEntropy => {
            let mut t = vec![0.0; out];
            t[rng.below(out)] = 1.0;
            t
        }
        Loss::Mse => (0..out).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
    };
    (layers, loss, x, target)
}

fn gradcheck_cmd(run: &RunConfig, a: GradcheckArgs) -> CliResult<()> {
    if a.probes == 0 || a.networks == 0 {
        return Err(Failure::Usage("--networks and --probes must be positive".into()));
    }
    let seed = run.seed();
    let mut rng = Rng::new(seed);
    let mut errors = Vec::with_capacity(a.networks);
    for _ in 0..a.networks {
        let (layers, loss, x, target) = random_network(&mut rng);
        errors.push(gradient_check(&layers, &x, &target, loss, a.probes, &mut rng)?);
    }
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let passed = worst < a.tolerance;
    let stamp = run.stamp("gradcheck", &json!({ "networks": a.networks, "probes": a.probes, "tolerance": a.tolerance }))?;
    let mut out = Map::new();
    out.insert("max_relative_error".into(), json!(worst));
    out.insert("per_network".into(), json!(errors));
    out.insert("passed".into(), json!(passed));
    out.insert("run".into(), stamp);
    emit(None, &Value::Object(out))?;
    if !passed {
        return Err(Failure::Run(Error::Training(format!(
            "gradient check failed: {worst:e} ≥ {}",
            a.tolerance
        ))));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_overrides_nested_fields() {
        let mut base = json!({ "a": 1, "opt": { "lr": 0.1, "rho": 0.9 } });
        merge(&mut base, &json!({ "opt": { "lr": 0.5 }, "b": true }));
        assert_eq!(base, json!({ "a": 1, "opt": { "lr": 0.5, "rho": 0.9 }, "b": true }));
    }

    #[test]
    fn seed_precedence() {
        let run = RunConfig {
            file: json!({ "seed": 3, "sdae": { "epochs": 2 }, "doc2vec": { "seed": 9 } }),
            seed_flag: None,
            deterministic: true,
            threads: None,
        };
        let s: SdaeConfig = run.section("sdae").ok().unwrap();
        assert_eq!((s.seed, s.epochs), (3, 2));
        let d: Doc2vecConfig = run.section("doc2vec").ok().unwrap();
        assert_eq!(d.seed, 9);
        let run = RunConfig { seed_flag: Some(4), ..run };
        let d: Doc2vecConfig = run.section("doc2vec").ok().unwrap();
        assert_eq!(d.seed, 4);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_command(["patient-repr", "no-such-command"]), 1);
        assert_eq!(run_command(["patient-repr", "gen-synth", "--bogus"]), 1);
        assert_eq!(run_command(["patient-repr", "--help"]), 0);
    }

    #[test]
    fn unknown_task_is_usage_error() {
        let flags = TaskFlags {
            task: "mystery".into(),
            n_classes: None,
            metric: None,
        };
        assert!(matches!(task_spec(&flags), Err(Failure::Usage(_))));
        let flags = TaskFlags {
            n_classes: Some(3),
            ..flags
        };
        assert_eq!(task_spec(&flags).ok().unwrap().metric, PrimaryMetric::WeightedF1);
    }

    #[test]
    fn gradcheck_command_passes() {
        assert_eq!(run_command(["patient-repr", "gradcheck", "--seed", "5", "--networks", "5"]), 0);
    }
}
