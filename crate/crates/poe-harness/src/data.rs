//! Dataset ingestion, seeded sampling, gold-label manipulation, and
//! label statistics.
//!
//! Three source layouts are supported: a generic JSONL schema
//! `{id, question, choices, answer_index}`, MMLU-Pro style records
//! `{question_id, question, options, answer, category}`, and BIG-Bench
//! multiple-choice task files `{examples: [{input, target_scores}]}`.
//! Structurally broken records fail the load with their uid; records that
//! violate instance invariants (duplicate option texts and the like) are
//! rejected with a warning because elimination semantics over them are
//! ambiguous.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::core::{McqInstance, MAX_OPTIONS};
use crate::error::{Error, Result};

/// Splits are exhausted in this order when sampling the evaluation set.
pub const SPLIT_PREFERENCE: [&str; 3] = ["test", "validation", "train"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MmluPro,
    BigbenchTask,
    GenericJsonl,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmlu_pro" => Ok(DatasetKind::MmluPro),
            "bigbench_task" | "bigbench" => Ok(DatasetKind::BigbenchTask),
            "generic_jsonl" | "generic" => Ok(DatasetKind::GenericJsonl),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::MmluPro => "mmlu_pro",
            DatasetKind::BigbenchTask => "bigbench_task",
            DatasetKind::GenericJsonl => "generic_jsonl",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetKind,
    pub path_or_task: String,
    #[serde(default = "default_split_preference")]
    pub split_preference: Vec<String>,
}

fn default_split_preference() -> Vec<String> {
    SPLIT_PREFERENCE.iter().map(|s| s.to_string()).collect()
}

impl DatasetSpec {
    pub fn new(name: DatasetKind, path_or_task: impl Into<String>) -> Self {
        DatasetSpec {
            name,
            path_or_task: path_or_task.into(),
            split_preference: default_split_preference(),
        }
    }

    /// Parses `kind:path` (or a bare path, assumed generic JSONL).
    pub fn parse(arg: &str) -> Result<Self> {
        match arg.split_once(':') {
            Some((kind, path)) if DatasetKind::from_str(kind).is_ok() => {
                Ok(DatasetSpec::new(DatasetKind::from_str(kind)?, path))
            }
            _ => Ok(DatasetSpec::new(DatasetKind::GenericJsonl, arg)),
        }
    }
}

/// Builds an instance, downgrading invariant violations to a warning so a
/// handful of malformed records cannot kill a large load.
fn push_instance(
    out: &mut Vec<McqInstance>,
    uid: String,
    question: String,
    options: Vec<String>,
    gold_index: usize,
    meta: BTreeMap<String, String>,
) {
    match McqInstance::new(uid, question, options, gold_index, meta) {
        Ok(instance) => {
            if instance.option_count() < 2 {
                warn!(uid = %instance.uid, "rejecting record with fewer than 2 options");
                return;
            }
            out.push(instance);
        }
        Err(err) => warn!(%err, "rejecting record"),
    }
}

fn read_json_records(path: &Path) -> Result<Vec<serde_json::Value>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let trimmed = raw.trim_start();
    if trimmed.starts_with('[') {
        let values: Vec<serde_json::Value> = serde_json::from_str(trimmed)
            .map_err(|e| Error::Dataset(format!("{}: invalid JSON array: {e}", path.display())))?;
        return Ok(values);
    }
    let mut values = Vec::new();
    for (number, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            Error::Dataset(format!("{}:{}: invalid JSON: {e}", path.display(), number + 1))
        })?;
        values.push(value);
    }
    Ok(values)
}

fn str_field(value: &serde_json::Value, field: &str, uid: &str) -> Result<String> {
    value
        .get(field)
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Dataset(format!("record {uid}: missing string field {field:?}")))
}

fn load_generic(path: &Path, meta_base: &BTreeMap<String, String>) -> Result<Vec<McqInstance>> {
    let mut out = Vec::new();
    for (number, value) in read_json_records(path)?.into_iter().enumerate() {
        let uid = value
            .get("id")
            .map(|v| match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .ok_or_else(|| {
                Error::Dataset(format!("{}: record {}: missing field \"id\"", path.display(), number + 1))
            })?;
        let question = str_field(&value, "question", &uid)?;
        let choices: Vec<String> = value
            .get("choices")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Dataset(format!("record {uid}: missing array field \"choices\"")))?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(|s| s.to_string())
                    .ok_or_else(|| Error::Dataset(format!("record {uid}: non-string choice")))
            })
            .collect::<Result<_>>()?;
        let answer_index = value
            .get("answer_index")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| {
                Error::Dataset(format!("record {uid}: missing integer field \"answer_index\""))
            })? as usize;
        if answer_index >= choices.len() {
            return Err(Error::Dataset(format!(
                "record {uid}: answer_index {answer_index} out of range for {} choices",
                choices.len()
            )));
        }
        let mut meta = meta_base.clone();
        for key in ["split", "subject"] {
            if let Some(v) = value.get(key).and_then(|v| v.as_str()) {
                meta.insert(key.to_string(), v.to_string());
            }
        }
        push_instance(&mut out, uid, question, choices, answer_index, meta);
    }
    Ok(out)
}

fn load_mmlu_pro(path: &Path, meta_base: &BTreeMap<String, String>) -> Result<Vec<McqInstance>> {
    let mut out = Vec::new();
    for (number, value) in read_json_records(path)?.into_iter().enumerate() {
        let uid = value
            .get("question_id")
            .map(|v| v.to_string().trim_matches('"').to_string())
            .unwrap_or_else(|| format!("mmlu_pro-{}", number + 1));
        let question = str_field(&value, "question", &uid)?;
        let options: Vec<String> = value
            .get("options")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Dataset(format!("record {uid}: missing array field \"options\"")))?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(|s| s.to_string())
                    .ok_or_else(|| Error::Dataset(format!("record {uid}: non-string option")))
            })
            .collect::<Result<_>>()?;
        let answer_letter = str_field(&value, "answer", &uid)?;
        let answer_char = answer_letter.chars().next().ok_or_else(|| {
            Error::Dataset(format!("record {uid}: empty \"answer\" field"))
        })?;
        if !answer_char.is_ascii_uppercase() {
            return Err(Error::Dataset(format!(
                "record {uid}: answer {answer_letter:?} is not an uppercase letter"
            )));
        }
        let gold_index = (answer_char as u8 - b'A') as usize;
        if gold_index >= options.len() {
            return Err(Error::Dataset(format!(
                "record {uid}: answer {answer_letter:?} out of range for {} options",
                options.len()
            )));
        }
        let mut meta = meta_base.clone();
        if let Some(category) = value.get("category").and_then(|v| v.as_str()) {
            meta.insert("subject".to_string(), category.to_string());
        }
        push_instance(&mut out, uid, question, options, gold_index, meta);
    }
    Ok(out)
}

fn load_bigbench(path: &Path, meta_base: &BTreeMap<String, String>) -> Result<Vec<McqInstance>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let task: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| Error::Dataset(format!("{}: invalid JSON: {e}", path.display())))?;
    let task_name = task
        .get("name")
        .and_then(|v| v.as_str())
        .unwrap_or("bigbench")
        .to_string();
    let examples = task
        .get("examples")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Dataset(format!("{}: missing \"examples\" array", path.display())))?;
    let mut out = Vec::new();
    for (number, example) in examples.iter().enumerate() {
        let uid = format!("{task_name}-{}", number + 1);
        let input = str_field(example, "input", &uid)?;
        let target_scores = example
            .get("target_scores")
            .and_then(|v| v.as_object())
            .ok_or_else(|| {
                Error::Dataset(format!("record {uid}: missing object field \"target_scores\""))
            })?;
        // Choice order is the key order of target_scores; preserve_order
        // keeps the file's ordering.
        let mut choices = Vec::new();
        let mut best: Option<(usize, f64)> = None;
        let mut tie = false;
        for (index, (text, score)) in target_scores.iter().enumerate() {
            let score = score.as_f64().ok_or_else(|| {
                Error::Dataset(format!("record {uid}: non-numeric target score"))
            })?;
            choices.push(text.clone());
            match best {
                Some((_, best_score)) if score == best_score => tie = true,
                Some((_, best_score)) if score > best_score => {
                    best = Some((index, score));
                    tie = false;
                }
                None => best = Some((index, score)),
                _ => {}
            }
        }
        let Some((gold_index, _)) = best else {
            return Err(Error::Dataset(format!("record {uid}: empty target_scores")));
        };
        if tie {
            warn!(uid = %uid, "rejecting record with tied maximal target scores");
            continue;
        }
        let mut meta = meta_base.clone();
        meta.insert("subject".to_string(), task_name.clone());
        push_instance(&mut out, uid, input, choices, gold_index, meta);
    }
    Ok(out)
}

/// Loads and normalizes a dataset. When the path is a directory every
/// `.json`/`.jsonl` file inside is read and its stem recorded as the split.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<McqInstance>> {
    let root = PathBuf::from(&spec.path_or_task);
    let files: Vec<PathBuf> = if root.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&root)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl"))
            })
            .collect();
        files.sort();
        files
    } else {
        vec![root.clone()]
    };
    if files.is_empty() {
        return Err(Error::Dataset(format!("no dataset files under {}", root.display())));
    }
    let mut out = Vec::new();
    for file in &files {
        let mut meta = BTreeMap::new();
        meta.insert("dataset".to_string(), spec.name.name().to_string());
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("test");
        let split = if root.is_dir() { stem } else { "test" };
        meta.insert("split".to_string(), split.to_string());
        let loaded = match spec.name {
            DatasetKind::GenericJsonl => load_generic(file, &meta)?,
            DatasetKind::MmluPro => load_mmlu_pro(file, &meta)?,
            DatasetKind::BigbenchTask => load_bigbench(file, &meta)?,
        };
        out.extend(loaded);
    }
    Ok(out)
}

fn split_rank(instance: &McqInstance, preference: &[String]) -> usize {
    let split = instance.meta.get("split").map(|s| s.as_str()).unwrap_or("");
    preference.iter().position(|p| p == split).unwrap_or(preference.len())
}

/// Seeded uniform sample without replacement, exhausting preferred splits
/// first. The remainder feeds prior estimation and few-shot pools.
pub fn sample_eval_set(
    instances: &[McqInstance],
    n: usize,
    seed: u64,
    split_preference: &[String],
) -> Result<(Vec<McqInstance>, Vec<McqInstance>)> {
    if n > instances.len() {
        return Err(Error::Precondition(format!(
            "requested {n} instances but only {} are available",
            instances.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (index, instance) in instances.iter().enumerate() {
        buckets.entry(split_rank(instance, split_preference)).or_default().push(index);
    }
    let mut order = Vec::with_capacity(instances.len());
    for bucket in buckets.values_mut() {
        bucket.shuffle(&mut rng);
        order.extend(bucket.iter().copied());
    }
    let eval = order[..n].iter().map(|i| instances[*i].clone()).collect();
    let remainder = order[n..].iter().map(|i| instances[*i].clone()).collect();
    Ok((eval, remainder))
}

/// Moves the gold option to `position`; other options keep their relative
/// order. Original indices are renumbered since this produces a new
/// instance for a transformed dataset.
pub fn force_gold_position(instance: &McqInstance, position: usize) -> Result<McqInstance> {
    if position >= instance.option_count() {
        return Err(Error::Precondition(format!(
            "position {position} out of range for {} options",
            instance.option_count()
        )));
    }
    if position == instance.gold_index {
        return Ok(instance.clone());
    }
    let mut texts: Vec<String> =
        instance.choices.iter().map(|c| c.text.clone()).collect();
    let gold = texts.remove(instance.gold_index);
    texts.insert(position, gold);
    McqInstance::new(
        instance.uid.clone(),
        instance.question.clone(),
        texts,
        position,
        instance.meta.clone(),
    )
}

/// Moves the gold option to a uniformly random position, deterministic per
/// (uid, seed).
pub fn shuffle_gold(instance: &McqInstance, seed: u64) -> Result<McqInstance> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(instance.uid.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes));
    let position = rng.gen_range(0..instance.option_count());
    force_gold_position(instance, position)
}

/// Fraction of instances whose gold occupies each label position. All
/// instances must share an option count.
pub fn label_distribution(instances: &[McqInstance]) -> Result<BTreeMap<char, f64>> {
    let Some(first) = instances.first() else {
        return Err(Error::Precondition("label_distribution of an empty set".into()));
    };
    let n = first.option_count();
    if n > MAX_OPTIONS {
        return Err(Error::Precondition(format!("option count {n} exceeds {MAX_OPTIONS}")));
    }
    let mut counts = vec![0usize; n];
    for instance in instances {
        if instance.option_count() != n {
            return Err(Error::Precondition(format!(
                "mixed option counts: {} has {}, expected {n}",
                instance.uid,
                instance.option_count()
            )));
        }
        counts[instance.gold_index] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| ((b'A' + i as u8) as char, c as f64 / instances.len() as f64))
        .collect())
}
