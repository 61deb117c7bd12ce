//! Evaluation orchestration: method runs over a sampled evaluation set,
//! prior estimation from the remainder, few-shot assembly, accuracy and
//! confidence-shift accounting, and report emission.
//!
//! Reports are a pure function of (config, dataset bytes, cache contents):
//! rows are ordered by uid regardless of completion order, every map is
//! ordered, and nothing volatile (timestamps, hit counters) is serialized.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::backend::{Backend, ReplayBackend};
use crate::core::{EliminationTrace, McqInstance, OptionSpace};
use crate::data::{load_dataset, sample_eval_set, DatasetSpec};
use crate::debias::{estimate_prior, Prior, PriorStrategy};
use crate::elimination::{
    confidence_shift, ee_new_log, ee_new_seq, ie_new, ie_original, mask_seq, poe_log, poe_seq,
    ReducedPriors,
};
use crate::error::{Error, Result};
use crate::methods::{
    answer_tg, score_aolp, score_avg, score_channel, score_dmcp, score_lm, score_mcp,
    score_pmi_dc, Method, MethodResult, ScoringContext,
};
use crate::prompt::Shot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub sample: u64,
    pub shots: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { sample: 0, shots: 0, shuffle: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    pub strategy: PriorStrategy,
    pub sample_count: usize,
    /// Re-estimate priors per reduced size instead of slicing the full one.
    pub per_size_reestimate: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            strategy: PriorStrategy::CyclicPermutation,
            sample_count: 32,
            per_size_reestimate: false,
        }
    }
}

/// Resolved backend identity echoed into reports. Execution-mode details
/// (replay-only, cache paths) are deliberately not part of the echo so that
/// cold and warm runs of the same evaluation serialize identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendEcho {
    pub kind: String,
    pub tag: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    pub backend: BackendEcho,
    pub prior: PriorConfig,
    /// Few-shot demonstrations per instance; 0 is zero-shot.
    pub shots: usize,
    /// Evaluation sample size drawn from the dataset.
    pub eval_n: usize,
    pub seeds: Seeds,
    pub parallelism: usize,
    /// Candidate-normalize ID distributions before use.
    pub normalization: bool,
    pub tg_max_tokens: u32,
    pub tg_temperature: f64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.eval_n == 0 {
            return Err(Error::Config("eval_n must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub accuracy: f64,
    /// Cells that produced a prediction; failed cells are excluded.
    pub n: usize,
    pub correct: usize,
    /// Predictions that could not be extracted (TG rule 4); counted wrong.
    pub invalid_count: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub uid: String,
    pub gold_index: usize,
    /// Predicted original index per method; None records an invalid
    /// extraction. Failed cells appear in `failures` instead.
    pub predictions: BTreeMap<Method, Option<usize>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<Method, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub traces: BTreeMap<Method, EliminationTrace>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub generations: BTreeMap<Method, String>,
}

/// Figure-2 style aggregates over the post-elimination confidence of the
/// gold option's ID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftAnalysis {
    /// Instances whose gold option was eliminated.
    pub scenario1_count: usize,
    /// Instances whose gold option survived (incl. zero-elimination runs).
    pub scenario2_count: usize,
    /// Fraction of scenario-2 instances whose gold confidence strictly rose.
    pub increased_fraction: f64,
    /// Mean confidence delta over scenario-2 instances.
    pub mean_delta: f64,
}

/// Only content-derived, run-invariant cache facts are reported; volatile
/// counters (hits, delegated calls) go to logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_echo: RunConfig,
    pub per_method: BTreeMap<Method, MethodSummary>,
    pub per_instance: Vec<InstanceRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<ShiftAnalysis>,
    pub cache_stats: CacheStats,
}

/// The backend handle an evaluation runs against, plus the cache view used
/// for reporting when one is attached.
#[derive(Clone)]
pub struct RunBackend {
    pub backend: Arc<dyn Backend>,
    pub cache: Option<Arc<ReplayBackend>>,
}

impl RunBackend {
    pub fn bare(backend: Arc<dyn Backend>) -> Self {
        RunBackend { backend, cache: None }
    }

    pub fn cached(cache: Arc<ReplayBackend>) -> Self {
        RunBackend { backend: cache.clone(), cache: Some(cache) }
    }
}

fn derive_seed(base: u64, salt: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Draws each instance's demonstrations from the remainder pool with a
/// per-uid derived seed, so shot lists are stable under any evaluation
/// order. The pool is the same remainder that feeds prior estimation.
pub fn build_fewshot_pool(
    remainder: &[McqInstance],
    eval_set: &[McqInstance],
    k: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<Shot>>> {
    let mut pool = BTreeMap::new();
    if k == 0 {
        for instance in eval_set {
            pool.insert(instance.uid.clone(), Vec::new());
        }
        return Ok(pool);
    }
    if remainder.len() < k {
        return Err(Error::Precondition(format!(
            "few-shot pool has {} instances, need {k}",
            remainder.len()
        )));
    }
    for instance in eval_set {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &instance.uid));
        let shots = index_sample(&mut rng, remainder.len(), k)
            .into_iter()
            .map(|i| Shot::from_instance(&remainder[i]))
            .collect();
        pool.insert(instance.uid.clone(), shots);
    }
    Ok(pool)
}

/// Truncates an instance to its first `size` options for per-size prior
/// re-estimation; the gold index is irrelevant to estimation.
fn truncate_options(instance: &McqInstance, size: usize) -> Result<McqInstance> {
    let texts: Vec<String> =
        instance.choices.iter().take(size).map(|c| c.text.clone()).collect();
    McqInstance::new(
        format!("{}#head{size}", instance.uid),
        instance.question.clone(),
        texts,
        0,
        instance.meta.clone(),
    )
}

/// Priors for every option count present in the evaluation set, estimated
/// from same-size remainder instances. Sizes with an empty estimation pool
/// fall back to a uniform prior with a warning.
pub fn estimate_priors_by_size(
    eval_set: &[McqInstance],
    remainder: &[McqInstance],
    backend: &dyn Backend,
    config: &PriorConfig,
    seed: u64,
) -> Result<BTreeMap<usize, Prior>> {
    let sizes: BTreeSet<usize> = eval_set.iter().map(|i| i.option_count()).collect();
    let mut order: Vec<usize> = (0..remainder.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prior-estimation"));
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let mut priors = BTreeMap::new();
    for size in sizes {
        let samples: Vec<McqInstance> = order
            .iter()
            .map(|i| &remainder[*i])
            .filter(|inst| inst.option_count() == size)
            .take(config.sample_count)
            .cloned()
            .collect();
        let prior = if config.strategy == PriorStrategy::Uniform {
            Prior::uniform(size, backend.tag())?
        } else if samples.is_empty() {
            warn!(size, "no estimation samples for this option count; using a uniform prior");
            Prior::uniform(size, backend.tag())?
        } else {
            estimate_prior(&samples, backend, size, config.strategy)?
        };
        priors.insert(size, prior);
    }
    Ok(priors)
}

/// Per-size re-estimated priors for reduced spaces, built by truncating the
/// estimation samples of the full size.
fn reestimate_reduced_priors(
    full_sizes: &BTreeMap<usize, Prior>,
    remainder: &[McqInstance],
    backend: &dyn Backend,
    config: &PriorConfig,
    seed: u64,
) -> Result<ReducedPriors> {
    let Some(&max_size) = full_sizes.keys().max() else {
        return Ok(ReducedPriors::Slice);
    };
    let mut order: Vec<usize> = (0..remainder.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prior-estimation"));
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let mut by_size = BTreeMap::new();
    for size in 2..=max_size {
        if let Some(existing) = full_sizes.get(&size) {
            by_size.insert(size, existing.clone());
            continue;
        }
        let samples: Vec<McqInstance> = order
            .iter()
            .map(|i| &remainder[*i])
            .filter(|inst| inst.option_count() >= size)
            .take(config.sample_count)
            .map(|inst| truncate_options(inst, size))
            .collect::<Result<_>>()?;
        if samples.is_empty() {
            continue;
        }
        by_size.insert(size, estimate_prior(&samples, backend, size, config.strategy)?);
    }
    Ok(ReducedPriors::PerSize(by_size))
}

/// Dispatches one method on one instance.
pub fn run_method(
    method: Method,
    instance: &McqInstance,
    ctx: &ScoringContext,
    prior: Option<&Prior>,
    reduced_priors: &ReducedPriors,
) -> Result<MethodResult> {
    let need_prior = || {
        prior.ok_or_else(|| {
            Error::PriorMismatch(format!("method {method} requires a prior"))
        })
    };
    match method {
        Method::Lm => score_lm(instance, ctx),
        Method::Avg => score_avg(instance, ctx),
        Method::PmiDc => score_pmi_dc(instance, ctx),
        Method::Channel => score_channel(instance, ctx),
        Method::Aolp => score_aolp(instance, ctx),
        Method::Mcp => score_mcp(instance, ctx),
        Method::Dmcp => score_dmcp(instance, ctx, need_prior()?),
        Method::Tg => answer_tg(instance, ctx),
        Method::PoeLog => poe_log(instance, ctx, need_prior()?, reduced_priors),
        Method::PoeSeq => poe_seq(instance, ctx, need_prior()?, reduced_priors),
        Method::Ie => ie_original(instance, ctx),
        Method::IeNew => ie_new(instance, ctx, need_prior()?),
        Method::MaskSeq => mask_seq(instance, ctx, need_prior()?),
        Method::EeNewLog => ee_new_log(instance, ctx, need_prior()?, reduced_priors),
        Method::EeNewSeq => ee_new_seq(instance, ctx, need_prior()?, reduced_priors),
    }
}

/// Runs every configured method on every sampled instance and assembles
/// the report. Per-cell backend failures are recorded and excluded from
/// accuracy denominators; more than 5% failed cells aborts the run.
pub fn run_evaluation(config: &RunConfig, run_backend: &RunBackend) -> Result<EvalReport> {
    config.validate()?;
    let backend = run_backend.backend.as_ref();
    let instances = load_dataset(&config.dataset)?;
    let (eval_set, remainder) = sample_eval_set(
        &instances,
        config.eval_n,
        config.seeds.sample,
        &config.dataset.split_preference,
    )?;
    info!(eval = eval_set.len(), remainder = remainder.len(), "sampled evaluation set");

    let needs_prior = config.methods.iter().any(|m| m.needs_prior());
    let priors_by_size = if needs_prior {
        estimate_priors_by_size(&eval_set, &remainder, backend, &config.prior, config.seeds.sample)?
    } else {
        BTreeMap::new()
    };
    let reduced_priors = if needs_prior && config.prior.per_size_reestimate {
        reestimate_reduced_priors(
            &priors_by_size,
            &remainder,
            backend,
            &config.prior,
            config.seeds.sample,
        )?
    } else {
        ReducedPriors::Slice
    };

    let shot_pool = build_fewshot_pool(&remainder, &eval_set, config.shots, config.seeds.shots)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;

    let rows: Vec<InstanceRow> = pool.install(|| {
        use rayon::prelude::*;
        eval_set
            .par_iter()
            .map(|instance| {
                let shots = &shot_pool[&instance.uid];
                let ctx = ScoringContext {
                    backend,
                    shots,
                    normalize: config.normalization,
                    tg_max_tokens: config.tg_max_tokens,
                    tg_temperature: config.tg_temperature,
                };
                let mut row = InstanceRow {
                    uid: instance.uid.clone(),
                    gold_index: instance.gold_index,
                    predictions: BTreeMap::new(),
                    failures: BTreeMap::new(),
                    traces: BTreeMap::new(),
                    generations: BTreeMap::new(),
                };
                let prior = priors_by_size.get(&instance.option_count());
                for &method in &config.methods {
                    match run_method(method, instance, &ctx, prior, &reduced_priors) {
                        Ok(result) => {
                            row.predictions.insert(method, result.predicted_original_index);
                            if let Some(trace) = result.trace {
                                row.traces.insert(method, trace);
                            }
                            if let Some(generation) = result.raw_generation {
                                row.generations.insert(method, generation);
                            }
                        }
                        Err(err) => {
                            warn!(uid = %instance.uid, %method, %err, "method failed");
                            row.failures.insert(method, err.to_string());
                        }
                    }
                }
                row
            })
            .collect()
    });

    let mut rows = rows;
    rows.sort_by(|a, b| a.uid.cmp(&b.uid));

    let gold_by_uid: BTreeMap<&str, usize> =
        eval_set.iter().map(|i| (i.uid.as_str(), i.gold_index)).collect();
    let mut per_method = BTreeMap::new();
    let mut failed_cells = 0usize;
    for &method in &config.methods {
        let mut summary =
            MethodSummary { accuracy: 0.0, n: 0, correct: 0, invalid_count: 0, failed: 0 };
        for row in &rows {
            if row.failures.contains_key(&method) {
                summary.failed += 1;
                failed_cells += 1;
                continue;
            }
            let Some(prediction) = row.predictions.get(&method) else { continue };
            summary.n += 1;
            match prediction {
                Some(idx) if *idx == gold_by_uid[row.uid.as_str()] => summary.correct += 1,
                Some(_) => {}
                None => summary.invalid_count += 1,
            }
        }
        if summary.n > 0 {
            summary.accuracy = summary.correct as f64 / summary.n as f64;
        }
        per_method.insert(method, summary);
    }

    let total_cells = eval_set.len() * config.methods.len();
    if failed_cells * 20 > total_cells {
        return Err(Error::Aborted { failed: failed_cells, total: total_cells });
    }

    let analysis = if config.methods.contains(&Method::PoeLog) {
        let items: Vec<(&McqInstance, &EliminationTrace)> = eval_set
            .iter()
            .filter_map(|instance| {
                rows.iter()
                    .find(|r| r.uid == instance.uid)
                    .and_then(|r| r.traces.get(&Method::PoeLog))
                    .map(|t| (instance, t))
            })
            .collect();
        Some(analyze_confidence_shift(&items)?)
    } else {
        None
    };

    let entries = run_backend.cache.as_ref().map(|c| c.entry_count()).unwrap_or(0);
    if let Some(cache) = &run_backend.cache {
        info!(
            requests = cache.request_count(),
            delegated = cache.delegated_calls(),
            entries,
            "cache activity"
        );
    }

    Ok(EvalReport {
        config_echo: config.clone(),
        per_method,
        per_instance: rows,
        analysis,
        cache_stats: CacheStats { entries },
    })
}

/// Partitions threshold-elimination traces into gold-eliminated (scenario
/// 1) and gold-survived (scenario 2) instances, and aggregates the
/// confidence shift of the gold ID over scenario 2. Zero-elimination runs
/// count as scenario 2 with a zero delta.
pub fn analyze_confidence_shift(
    items: &[(&McqInstance, &EliminationTrace)],
) -> Result<ShiftAnalysis> {
    let mut scenario1 = 0usize;
    let mut deltas = Vec::new();
    let mut increased = 0usize;
    for (instance, trace) in items {
        let eliminated: BTreeSet<usize> = trace
            .rounds
            .iter()
            .flat_map(|r| r.eliminated_original_indices.iter().copied())
            .collect();
        if eliminated.contains(&instance.gold_index) {
            scenario1 += 1;
            continue;
        }
        if eliminated.is_empty() {
            deltas.push(0.0);
            continue;
        }
        let before_space = OptionSpace::full(instance);
        let before = &trace.rounds[0].distribution_snapshot;
        let after_space = trace.replay(instance)?;
        let shift = if after_space.size() == 1 {
            // The survivor's normalized confidence is 1 by definition.
            let before_label = before_space
                .label_of(instance.gold_index)
                .ok_or(Error::GoldEliminated)?;
            let before_value = before.normalized(before_label).ok_or_else(|| {
                Error::Precondition("gold label missing from before-distribution".into())
            })?;
            crate::elimination::ConfidenceShift {
                increased: 1.0 > before_value,
                delta: 1.0 - before_value,
            }
        } else {
            let after = &trace
                .rounds
                .last()
                .expect("elimination trace has rounds")
                .distribution_snapshot;
            confidence_shift(before, &before_space, after, &after_space, instance.gold_index)?
        };
        if shift.increased {
            increased += 1;
        }
        deltas.push(shift.delta);
    }
    let scenario2 = deltas.len();
    Ok(ShiftAnalysis {
        scenario1_count: scenario1,
        scenario2_count: scenario2,
        increased_fraction: if scenario2 == 0 { 0.0 } else { increased as f64 / scenario2 as f64 },
        mean_delta: if scenario2 == 0 {
            0.0
        } else {
            deltas.iter().sum::<f64>() / scenario2 as f64
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn dataset_label(config: &RunConfig) -> String {
    Path::new(&config.dataset.path_or_task)
        .file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.to_string())
        .unwrap_or_else(|| config.dataset.name.name().to_string())
}

fn csv_quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Serializes a report. JSON is the canonical full report; CSV holds one
/// accuracy row per method; markdown renders a comparison grid.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(report)?;
            bytes.push(b'\n');
            Ok(bytes)
        }
        ReportFormat::Csv => {
            let dataset = dataset_label(&report.config_echo);
            let mut out = String::from("method,dataset,n,accuracy,invalid_count\n");
            for (method, summary) in &report.per_method {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    method,
                    csv_quote(&dataset),
                    summary.n,
                    summary.accuracy,
                    summary.invalid_count
                ));
            }
            Ok(out.into_bytes())
        }
        ReportFormat::Markdown => {
            let dataset = dataset_label(&report.config_echo);
            let mut out = format!("| method | {dataset} |\n| --- | --- |\n");
            for (method, summary) in &report.per_method {
                out.push_str(&format!("| {} | {:.1} |\n", method, summary.accuracy * 100.0));
            }
            Ok(out.into_bytes())
        }
    }
}

/// Writes report.json, summary.csv, summary.md, and traces.jsonl under the
/// output directory.
pub fn write_report_files(report: &EvalReport, output_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(output_dir)?;
    std::fs::write(output_dir.join("report.json"), emit_report(report, ReportFormat::Json)?)?;
    std::fs::write(output_dir.join("summary.csv"), emit_report(report, ReportFormat::Csv)?)?;
    std::fs::write(output_dir.join("summary.md"), emit_report(report, ReportFormat::Markdown)?)?;
    let mut traces = String::new();
    for row in &report.per_instance {
        for (method, trace) in &row.traces {
            let line = serde_json::json!({
                "uid": row.uid,
                "method": method,
                "trace": trace,
            });
            traces.push_str(&serde_json::to_string(&line)?);
            traces.push('\n');
        }
    }
    std::fs::write(output_dir.join("traces.jsonl"), traces)?;
    Ok(())
}
