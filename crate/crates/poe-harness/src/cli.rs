//! Command-line wiring: config resolution (file, environment, flags) and
//! the eval / prior / data / cache subcommands.
//!
//! Config files are flat key-value text with dotted section keys, parsed
//! with TOML syntax (string values quoted). Flags mirror keys with dashes
//! and take precedence over file values; `POE_API_BASE`, `POE_API_KEY`,
//! and `POE_MODEL` fill backend fields left unset. Exit codes are a stable
//! contract: 0 success, 1 configuration, 2 aborted evaluation, 3 I/O.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use tracing::info;

use crate::backend::{
    Backend, HttpBackend, HttpConfig, LabelTokenStyle, ReplayBackend, SyntheticBackend,
    SyntheticConfig,
};
use crate::core::McqInstance;
use crate::data::{label_distribution, load_dataset, sample_eval_set, DatasetSpec};
use crate::debias::{estimate_prior, Prior, PriorStrategy};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, run_evaluation, write_report_files, BackendEcho, PriorConfig, ReportFormat,
    RunBackend, RunConfig, Seeds,
};
use crate::methods::Method;

pub const ENV_API_BASE: &str = "POE_API_BASE";
pub const ENV_API_KEY: &str = "POE_API_KEY";
pub const ENV_MODEL: &str = "POE_MODEL";

#[derive(Debug, Parser)]
#[command(name = "poe", version, about = "Option-ID process-of-elimination MCQ evaluation harness")]
pub struct Cli {
    /// Config file (flat dotted keys, TOML syntax); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an evaluation and write report artifacts.
    Eval(EvalArgs),
    /// Estimate an option-ID prior and write it as JSON.
    Prior(PriorArgs),
    /// Dataset utilities: stats, sample, force-gold, shuffle-gold.
    Data(DataArgs),
    /// Replay-cache utilities.
    Cache(CacheArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset as kind:path (generic_jsonl, mmlu_pro, bigbench_task).
    #[arg(long)]
    pub dataset: Option<String>,
    /// Comma-separated method identifiers.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Few-shot demonstrations per instance.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Evaluation sample size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Dataset sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Replay-cache file (append-only JSONL).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Serve requests from the cache only; any miss is an error.
    #[arg(long)]
    pub replay_only: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Summary format printed to stdout: json, csv, or markdown.
    #[arg(long)]
    pub format: Option<String>,
    /// Backend kind: http or synthetic.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    #[arg(long)]
    pub dataset: Option<String>,
    /// cyclic_permutation, empirical_mean, or uniform.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Estimation sample count.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Option count the prior covers (inferred from the dataset if absent).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub replay_only: bool,
    #[arg(long)]
    pub backend: Option<String>,
    /// Output file for the prior JSON.
    #[arg(long, default_value = "prior.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[command(subcommand)]
    pub command: DataCommand,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Print instance counts and gold-label distributions.
    Stats {
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Materialize the seeded eval/remainder split as JSONL files.
    Sample {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Move every gold option to a fixed position and write JSONL.
    ForceGold {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        position: usize,
        #[arg(long, default_value = "forced.jsonl")]
        output: PathBuf,
    },
    /// Move every gold option to a seeded random position and write JSONL.
    ShuffleGold {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "shuffled.jsonl")]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[command(subcommand)]
    pub command: CacheCommand,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// Print entry counts per backend tag and request kind.
    Inspect {
        #[arg(long)]
        cache: PathBuf,
    },
}

/// Flattened config file: dotted keys to TOML values.
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, toml::Value>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&raw)
    }

    pub fn parse(raw: &str) -> Result<Self> {
        let table: toml::Table = raw
            .parse()
            .map_err(|e| Error::Config(format!("invalid config syntax: {e}")))?;
        let mut values = BTreeMap::new();
        flatten(&table, "", &mut values);
        Ok(FileConfig { values })
    }

    fn get_str(&self, key: &str) -> Result<Option<String>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(Error::Config(format!("{key}: expected a string, got {other}"))),
        }
    }

    fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(other) => {
                Err(Error::Config(format!("{key}: expected a non-negative integer, got {other}")))
            }
        }
    }

    fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(f)) => Ok(Some(*f)),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(other) => Err(Error::Config(format!("{key}: expected a number, got {other}"))),
        }
    }

    fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(*b)),
            Some(other) => Err(Error::Config(format!("{key}: expected a boolean, got {other}"))),
        }
    }

    /// Accepts either a TOML array of numbers or a comma-separated string.
    fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    toml::Value::Float(f) => Ok(*f),
                    toml::Value::Integer(i) => Ok(*i as f64),
                    other => {
                        Err(Error::Config(format!("{key}: expected numbers, got {other}")))
                    }
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
            Some(toml::Value::String(s)) => s
                .split(',')
                .map(|part| {
                    part.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("{key}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
            Some(other) => Err(Error::Config(format!("{key}: expected a list, got {other}"))),
        }
    }

    fn get_str_list(&self, key: &str) -> Result<Option<Vec<String>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    other => {
                        Err(Error::Config(format!("{key}: expected strings, got {other}")))
                    }
                })
                .collect::<Result<Vec<String>>>()
                .map(Some),
            Some(toml::Value::String(s)) => {
                Ok(Some(s.split(',').map(|p| p.trim().to_string()).collect()))
            }
            Some(other) => Err(Error::Config(format!("{key}: expected a list, got {other}"))),
        }
    }
}

fn flatten(table: &toml::Table, prefix: &str, out: &mut BTreeMap<String, toml::Value>) {
    for (key, value) in table {
        let full = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match value {
            toml::Value::Table(inner) => flatten(inner, &full, out),
            other => {
                out.insert(full, other.clone());
            }
        }
    }
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

/// Backend selection resolved from flags, file, and environment.
#[derive(Debug, Clone)]
pub enum BackendSpec {
    Http { config: HttpConfig },
    Synthetic { config: SyntheticConfig },
}

impl BackendSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendSpec::Http { .. } => "http",
            BackendSpec::Synthetic { .. } => "synthetic",
        }
    }

    pub fn tag(&self) -> String {
        match self {
            BackendSpec::Http { config } => {
                format!("{}@{}", config.model, config.base_url.trim_end_matches('/'))
            }
            BackendSpec::Synthetic { config } => config.tag.clone(),
        }
    }
}

fn resolve_backend_spec(file: &FileConfig, kind_flag: Option<&str>) -> Result<BackendSpec> {
    let kind = match kind_flag {
        Some(k) => k.to_string(),
        None => file.get_str("backend.kind")?.unwrap_or_else(|| "http".to_string()),
    };
    match kind.as_str() {
        "http" => {
            let base_url = file
                .get_str("backend.base_url")?
                .or_else(|| env_var(ENV_API_BASE))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "live backend needs a base URL: set backend.base_url or {ENV_API_BASE}"
                    ))
                })?;
            let model = file
                .get_str("backend.model")?
                .or_else(|| env_var(ENV_MODEL))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "live backend needs a model name: set backend.model or {ENV_MODEL}"
                    ))
                })?;
            let mut config = HttpConfig::new(base_url, model);
            config.api_key = file.get_str("backend.api_key")?.or_else(|| env_var(ENV_API_KEY));
            if let Some(style) = file.get_str("backend.label_style")? {
                config.label_style = match style.as_str() {
                    "leading_space" => LabelTokenStyle::LeadingSpace,
                    "bare" => LabelTokenStyle::Bare,
                    other => {
                        return Err(Error::Config(format!(
                            "backend.label_style: expected leading_space or bare, got {other:?}"
                        )))
                    }
                };
            }
            if let Some(k) = file.get_u64("backend.top_k")? {
                config.logprobs_top_k = k as u32;
            }
            if let Some(ms) = file.get_u64("backend.backoff_ms")? {
                config.backoff_base = Duration::from_millis(ms);
            }
            if let Some(s) = file.get_u64("backend.timeout_s")? {
                config.timeout = Duration::from_secs(s);
            }
            Ok(BackendSpec::Http { config })
        }
        "synthetic" => {
            let mut config = SyntheticConfig {
                seed: file.get_u64("synthetic.seed")?.unwrap_or(0),
                bias: file.get_f64_list("synthetic.bias")?.unwrap_or_default(),
                normalize: file.get_bool("synthetic.normalize")?.unwrap_or(false),
                context_sensitive: file.get_bool("synthetic.context_sensitive")?.unwrap_or(true),
                default_signal: file.get_f64("synthetic.default_signal")?,
                ..Default::default()
            };
            let mut hasher = Sha256::new();
            hasher.update(serde_json::to_vec(&serde_json::json!({
                "seed": config.seed,
                "bias": config.bias,
                "normalize": config.normalize,
                "context_sensitive": config.context_sensitive,
                "default_signal": config.default_signal,
            }))?);
            let digest = hex::encode(hasher.finalize());
            config.tag = format!("synthetic-{}", &digest[..8]);
            Ok(BackendSpec::Synthetic { config })
        }
        other => Err(Error::Config(format!("backend.kind: expected http or synthetic, got {other:?}"))),
    }
}

fn build_run_backend(
    spec: &BackendSpec,
    cache: Option<&Path>,
    replay_only: bool,
) -> Result<RunBackend> {
    if replay_only {
        let path = cache.ok_or_else(|| {
            Error::Config("--replay-only needs a cache path (--cache or cache = ...)".into())
        })?;
        if !path.exists() {
            return Err(Error::Config(format!(
                "--replay-only with a cold cache: {} does not exist",
                path.display()
            )));
        }
        let replay = Arc::new(ReplayBackend::replay_only(path, &spec.tag())?);
        return Ok(RunBackend::cached(replay));
    }
    let inner: Arc<dyn Backend> = match spec {
        BackendSpec::Http { config } => Arc::new(HttpBackend::new(config.clone())?),
        BackendSpec::Synthetic { config } => Arc::new(SyntheticBackend::new(config.clone())),
    };
    match cache {
        Some(path) => Ok(RunBackend::cached(Arc::new(ReplayBackend::wrap(path, inner)?))),
        None => Ok(RunBackend::bare(inner)),
    }
}

fn resolve_dataset(file: &FileConfig, flag: Option<&str>) -> Result<DatasetSpec> {
    if let Some(arg) = flag {
        return DatasetSpec::parse(arg);
    }
    let kind = file.get_str("dataset.kind")?;
    let path = file.get_str("dataset.path")?;
    match (kind, path) {
        (Some(kind), Some(path)) => {
            let mut spec = DatasetSpec::new(kind.parse()?, path);
            if let Some(splits) = file.get_str_list("dataset.splits")? {
                spec.split_preference = splits;
            }
            Ok(spec)
        }
        (None, Some(path)) => DatasetSpec::parse(&path),
        _ => Err(Error::Config(
            "no dataset configured: pass --dataset kind:path or set dataset.kind/dataset.path"
                .into(),
        )),
    }
}

fn resolve_prior_config(file: &FileConfig) -> Result<PriorConfig> {
    let mut config = PriorConfig::default();
    if let Some(strategy) = file.get_str("prior.strategy")? {
        config.strategy = strategy.parse()?;
    }
    if let Some(samples) = file.get_u64("prior.samples")? {
        config.sample_count = samples as usize;
    }
    if let Some(reestimate) = file.get_bool("prior.per_size_reestimate")? {
        config.per_size_reestimate = reestimate;
    }
    Ok(config)
}

/// The fully resolved evaluation invocation.
pub struct ResolvedEval {
    pub run_config: RunConfig,
    pub backend_spec: BackendSpec,
    pub cache: Option<PathBuf>,
    pub replay_only: bool,
    pub output_dir: PathBuf,
    pub format: ReportFormat,
}

pub fn resolve_eval(file: &FileConfig, args: &EvalArgs) -> Result<ResolvedEval> {
    let dataset = resolve_dataset(file, args.dataset.as_deref())?;
    let method_names: Vec<String> = match &args.methods {
        Some(flags) => flags.clone(),
        None => file
            .get_str_list("methods")?
            .ok_or_else(|| Error::Config("no methods selected: pass --methods or set methods".into()))?,
    };
    let methods: Vec<Method> = method_names
        .iter()
        .map(|name| name.parse())
        .collect::<Result<_>>()?;

    let backend_spec = resolve_backend_spec(file, args.backend.as_deref())?;
    let seeds = Seeds {
        sample: args.seed.or(file.get_u64("seeds.sample")?).unwrap_or(0),
        shots: file.get_u64("seeds.shots")?.unwrap_or(0),
        shuffle: file.get_u64("seeds.shuffle")?.unwrap_or(0),
    };
    let run_config = RunConfig {
        dataset,
        methods,
        backend: BackendEcho {
            kind: backend_spec.kind().to_string(),
            tag: backend_spec.tag(),
        },
        prior: resolve_prior_config(file)?,
        shots: args.shots.or(file.get_u64("shots")?.map(|v| v as usize)).unwrap_or(0),
        eval_n: args.n.or(file.get_u64("eval.n")?.map(|v| v as usize)).unwrap_or(1000),
        seeds,
        parallelism: args
            .parallelism
            .or(file.get_u64("parallelism")?.map(|v| v as usize))
            .unwrap_or(4),
        normalization: file.get_bool("normalization")?.unwrap_or(false),
        tg_max_tokens: file.get_u64("tg.max_tokens")?.unwrap_or(64) as u32,
        tg_temperature: file.get_f64("tg.temperature")?.unwrap_or(0.1),
    };
    let cache = args
        .cache
        .clone()
        .or(file.get_str("cache")?.map(PathBuf::from));
    let replay_only = args.replay_only || file.get_bool("replay_only")?.unwrap_or(false);
    let output_dir = args
        .output_dir
        .clone()
        .or(file.get_str("output_dir")?.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let format = match &args.format {
        Some(f) => f.parse()?,
        None => ReportFormat::Markdown,
    };
    Ok(ResolvedEval { run_config, backend_spec, cache, replay_only, output_dir, format })
}

pub fn cmd_eval(file: &FileConfig, args: &EvalArgs) -> Result<()> {
    let resolved = resolve_eval(file, args)?;
    let run_backend =
        build_run_backend(&resolved.backend_spec, resolved.cache.as_deref(), resolved.replay_only)?;
    let report = run_evaluation(&resolved.run_config, &run_backend)?;
    write_report_files(&report, &resolved.output_dir)?;
    let summary = emit_report(&report, resolved.format)?;
    print!("{}", String::from_utf8_lossy(&summary));
    info!(output_dir = %resolved.output_dir.display(), "report written");
    Ok(())
}

pub fn cmd_prior(file: &FileConfig, args: &PriorArgs) -> Result<()> {
    let strategy: PriorStrategy = match &args.strategy {
        Some(s) => s.parse()?,
        None => file
            .get_str("prior.strategy")?
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(PriorStrategy::CyclicPermutation),
    };
    let samples = args
        .samples
        .or(file.get_u64("prior.samples")?.map(|v| v as usize))
        .unwrap_or(32);
    let seed = args.seed.or(file.get_u64("seeds.sample")?).unwrap_or(0);

    let prior = if strategy == PriorStrategy::Uniform {
        let size = args.size.ok_or_else(|| {
            Error::Config("uniform prior needs --size".into())
        })?;
        let tag = resolve_backend_spec(file, args.backend.as_deref())
            .map(|spec| spec.tag())
            .unwrap_or_else(|_| "none".to_string());
        Prior::uniform(size, &tag)?
    } else {
        let dataset = resolve_dataset(file, args.dataset.as_deref())?;
        let spec = resolve_backend_spec(file, args.backend.as_deref())?;
        let run_backend = build_run_backend(&spec, args.cache.as_deref(), args.replay_only)?;
        let instances = load_dataset(&dataset)?;
        let size = match args.size {
            Some(size) => size,
            None => dominant_option_count(&instances)?,
        };
        let mut of_size: Vec<McqInstance> =
            instances.into_iter().filter(|i| i.option_count() == size).collect();
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        of_size.shuffle(&mut rng);
        of_size.truncate(samples);
        if of_size.is_empty() {
            return Err(Error::Config(format!("dataset has no instances with {size} options")));
        }
        estimate_prior(&of_size, run_backend.backend.as_ref(), size, strategy)?
    };

    let mut bytes = serde_json::to_vec_pretty(&prior)?;
    bytes.push(b'\n');
    std::fs::write(&args.output, bytes)?;
    println!("prior written to {}", args.output.display());
    for (label, p) in &prior.probs {
        println!("{label} {p:.6}");
    }
    Ok(())
}

fn dominant_option_count(instances: &[McqInstance]) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for instance in instances {
        *counts.entry(instance.option_count()).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by_key(|(_, c)| *c)
        .map(|(size, _)| size)
        .ok_or_else(|| Error::Dataset("empty dataset".into()))
}

fn instance_to_generic_json(instance: &McqInstance) -> serde_json::Value {
    let mut object = serde_json::json!({
        "id": instance.uid,
        "question": instance.question,
        "choices": instance.choices.iter().map(|c| c.text.clone()).collect::<Vec<_>>(),
        "answer_index": instance.gold_index,
    });
    for key in ["split", "subject"] {
        if let Some(v) = instance.meta.get(key) {
            object[key] = serde_json::Value::String(v.clone());
        }
    }
    object
}

fn write_jsonl(path: &Path, instances: &[McqInstance]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = String::new();
    for instance in instances {
        out.push_str(&serde_json::to_string(&instance_to_generic_json(instance))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn print_stats(instances: &[McqInstance]) -> Result<()> {
    println!("instances: {}", instances.len());
    let mut by_size: BTreeMap<usize, Vec<McqInstance>> = BTreeMap::new();
    for instance in instances {
        by_size.entry(instance.option_count()).or_default().push(instance.clone());
    }
    for (size, group) in &by_size {
        let dist = label_distribution(group)?;
        let rendered: Vec<String> =
            dist.iter().map(|(label, f)| format!("{label}: {:.1}%", f * 100.0)).collect();
        println!("N={size} ({} instances): {}", group.len(), rendered.join(" / "));
    }
    Ok(())
}

pub fn cmd_data(file: &FileConfig, args: &DataArgs) -> Result<()> {
    match &args.command {
        DataCommand::Stats { dataset } => {
            let spec = resolve_dataset(file, dataset.as_deref())?;
            let instances = load_dataset(&spec)?;
            print_stats(&instances)
        }
        DataCommand::Sample { dataset, n, seed, output_dir } => {
            let spec = resolve_dataset(file, dataset.as_deref())?;
            let instances = load_dataset(&spec)?;
            let n = n.unwrap_or(1000);
            let seed = seed.or(file.get_u64("seeds.sample")?).unwrap_or(0);
            let (eval, remainder) =
                sample_eval_set(&instances, n, seed, &spec.split_preference)?;
            write_jsonl(&output_dir.join("eval.jsonl"), &eval)?;
            write_jsonl(&output_dir.join("remainder.jsonl"), &remainder)?;
            println!(
                "wrote {} eval and {} remainder instances under {}",
                eval.len(),
                remainder.len(),
                output_dir.display()
            );
            Ok(())
        }
        DataCommand::ForceGold { dataset, position, output } => {
            let spec = resolve_dataset(file, dataset.as_deref())?;
            let instances = load_dataset(&spec)?;
            let forced: Vec<McqInstance> = instances
                .iter()
                .map(|i| crate::data::force_gold_position(i, *position))
                .collect::<Result<_>>()?;
            write_jsonl(output, &forced)?;
            println!("wrote {} instances to {}", forced.len(), output.display());
            Ok(())
        }
        DataCommand::ShuffleGold { dataset, seed, output } => {
            let spec = resolve_dataset(file, dataset.as_deref())?;
            let instances = load_dataset(&spec)?;
            let seed = seed.or(file.get_u64("seeds.shuffle")?).unwrap_or(0);
            let shuffled: Vec<McqInstance> = instances
                .iter()
                .map(|i| crate::data::shuffle_gold(i, seed))
                .collect::<Result<_>>()?;
            write_jsonl(output, &shuffled)?;
            println!("wrote {} instances to {}", shuffled.len(), output.display());
            Ok(())
        }
    }
}

pub fn cmd_cache(args: &CacheArgs) -> Result<()> {
    match &args.command {
        CacheCommand::Inspect { cache } => {
            let entries = crate::backend::load_entries(cache)?;
            println!("entries: {}", entries.len());
            let mut by_tag: BTreeMap<&str, usize> = BTreeMap::new();
            let mut by_kind: BTreeMap<&str, usize> = BTreeMap::new();
            for entry in &entries {
                *by_tag.entry(entry.backend_tag.as_str()).or_default() += 1;
                let kind = match entry.request {
                    crate::backend::BackendRequest::IdDistribution { .. } => "id_distribution",
                    crate::backend::BackendRequest::Continuation { .. } => "continuation",
                    crate::backend::BackendRequest::Generation { .. } => "generation",
                };
                *by_kind.entry(kind).or_default() += 1;
            }
            for (tag, count) in by_tag {
                println!("tag {tag}: {count}");
            }
            for (kind, count) in by_kind {
                println!("kind {kind}: {count}");
            }
            Ok(())
        }
    }
}

/// Runs a parsed invocation and maps errors onto the exit-code contract.
pub fn run(cli: Cli) -> i32 {
    let file = match &cli.config {
        Some(path) => match FileConfig::load(path) {
            Ok(file) => file,
            Err(err) => {
                eprintln!("error: {err}");
                return 1;
            }
        },
        None => FileConfig::default(),
    };
    let outcome = match &cli.command {
        Command::Eval(args) => cmd_eval(&file, args),
        Command::Prior(args) => cmd_prior(&file, args),
        Command::Data(args) => cmd_data(&file, args),
        Command::Cache(args) => cmd_cache(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Aborted { .. } => 2,
        Error::Io(_) => 3,
        _ => 1,
    }
}
