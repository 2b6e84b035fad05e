//! Benchmark manifests, subsampling and POPE polling-query construction.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::digest::sha256_hex;

/// The 14 MME subtasks (10 perception, 4 cognition).
pub const MME_SUBTASKS: [&str; 14] = [
    "existence",
    "count",
    "position",
    "color",
    "posters",
    "celebrity",
    "scene",
    "landmark",
    "artwork",
    "ocr",
    "commonsense_reasoning",
    "numerical_calculation",
    "text_translation",
    "code_reasoning",
];

/// MME subtasks that probe object-level perception.
pub const MME_OBJECT_SUBTASKS: [&str; 4] = ["count", "existence", "color", "position"];

/// The 20 MMBench ability dimensions.
pub const MMB_ABILITIES: [&str; 20] = [
    "image_style",
    "image_scene",
    "image_emotion",
    "image_quality",
    "image_topic",
    "object_localization",
    "attribute_recognition",
    "celebrity_recognition",
    "ocr",
    "spatial_relationship",
    "attribute_comparison",
    "action_recognition",
    "physical_property_reasoning",
    "function_reasoning",
    "identity_reasoning",
    "social_relation",
    "physical_relation",
    "nature_relation",
    "future_prediction",
    "structuralized_imagetext_understanding",
];

/// MMBench abilities that probe object-level perception.
pub const MMB_OBJECT_ABILITIES: [&str; 3] =
    ["object_localization", "spatial_relationship", "attribute_comparison"];

/// Canonical yes/no polling question for POPE queries.
pub const POPE_QUESTION_TEMPLATE: &str = "Is there a {object} in the image?";

/// Default number of positive (and negative) POPE queries per image.
pub const DEFAULT_POPE_K: usize = 3;
/// Popular pool is the top quarter of the object universe by frequency...
pub const POPULAR_POOL_FRACTION: f64 = 0.25;
/// ...but never fewer than this many objects.
pub const POPULAR_POOL_MIN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSetting {
    Random,
    Popular,
    Adversarial,
}

impl PopeSetting {
    pub const ALL: [PopeSetting; 3] =
        [PopeSetting::Random, PopeSetting::Popular, PopeSetting::Adversarial];

    pub fn as_str(self) -> &'static str {
        match self {
            PopeSetting::Random => "random",
            PopeSetting::Popular => "popular",
            PopeSetting::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for PopeSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PopeSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(PopeSetting::Random),
            "popular" => Ok(PopeSetting::Popular),
            "adversarial" => Ok(PopeSetting::Adversarial),
            other => Err(format!("unknown POPE setting `{other}`")),
        }
    }
}

/// Which benchmark (and which slice of it) an instance belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "bench", rename_all = "lowercase")]
pub enum TaskKind {
    Mme { name: String },
    Mmb { name: String },
    Pope { setting: PopeSetting },
}

impl TaskKind {
    /// Yes/no tasks are MME and POPE; MMBench is multiple choice.
    pub fn is_yes_no(&self) -> bool {
        !matches!(self, TaskKind::Mmb { .. })
    }

    pub fn is_object_oriented(&self) -> bool {
        match self {
            TaskKind::Mme { name } => MME_OBJECT_SUBTASKS.contains(&name.as_str()),
            TaskKind::Mmb { name } => MMB_OBJECT_ABILITIES.contains(&name.as_str()),
            TaskKind::Pope { .. } => true,
        }
    }

    /// Subtask, ability or setting name.
    pub fn name(&self) -> &str {
        match self {
            TaskKind::Mme { name } | TaskKind::Mmb { name } => name,
            TaskKind::Pope { setting } => setting.as_str(),
        }
    }

    pub fn bench(&self) -> &'static str {
        match self {
            TaskKind::Mme { .. } => "mme",
            TaskKind::Mmb { .. } => "mmb",
            TaskKind::Pope { .. } => "pope",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.bench(), self.name())
    }
}

/// One image + question unit with its answer key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VQAInstance {
    pub id: String,
    pub image_path: String,
    pub question: String,
    #[serde(default)]
    pub options: Vec<(String, String)>,
    pub ground_truth: String,
    pub task: TaskKind,
    pub image_group_id: String,
}

impl VQAInstance {
    pub fn option_letters(&self) -> impl Iterator<Item = &str> {
        self.options.iter().map(|(l, _)| l.as_str())
    }
}

/// An ordered list of instances plus the directory image paths resolve against.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub root: PathBuf,
    pub instances: Vec<VQAInstance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn image_path(&self, instance: &VQAInstance) -> PathBuf {
        self.root.join(&instance.image_path)
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: invalid `{field}`: {reason}")]
    InvalidField {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("instance `{0}`: image path does not exist or is unreadable")]
    UnreadableImagePath(String),
    #[error("MME image group `{group_id}` has {size} instances, expected 2")]
    MalformedGroup { group_id: String, size: usize },
}

const REQUIRED_FIELDS: [&str; 6] = [
    "id",
    "image_path",
    "question",
    "ground_truth",
    "task",
    "image_group_id",
];

/// Load a JSONL manifest. Image paths are checked relative to the manifest's
/// directory.
pub fn load_manifest(path: &Path) -> Result<Dataset, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dataset = parse_manifest(&text, root)?;
    for inst in &dataset.instances {
        let p = dataset.image_path(inst);
        let readable = std::fs::metadata(&p).map(|m| m.is_file()).unwrap_or(false) && std::fs::File::open(&p).is_ok();
        if !readable {
            return Err(ManifestError::UnreadableImagePath(inst.id.clone()));
        }
    }
    Ok(dataset)
}

/// Parse manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, root: PathBuf) -> Result<Dataset, ManifestError> {
    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| ManifestError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| ManifestError::Malformed {
            line,
            message: "record is not a JSON object".into(),
        })?;
        for field in REQUIRED_FIELDS {
            if obj.get(field).is_none_or(Value::is_null) {
                return Err(ManifestError::MissingField { line, field });
            }
        }
        let inst: VQAInstance =
            serde_json::from_value(value).map_err(|e| ManifestError::Malformed {
                line,
                message: e.to_string(),
            })?;
        validate_instance(&inst, line)?;
        if !seen.insert(inst.id.clone()) {
            return Err(ManifestError::DuplicateId(inst.id));
        }
        instances.push(inst);
    }

    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in instances.iter().filter(|i| matches!(i.task, TaskKind::Mme { .. })) {
        *groups.entry(inst.image_group_id.as_str()).or_default() += 1;
    }
    if let Some((gid, size)) = groups.into_iter().find(|&(_, n)| n != 2) {
        return Err(ManifestError::MalformedGroup {
            group_id: gid.to_string(),
            size,
        });
    }
    Ok(Dataset { root, instances })
}

fn validate_instance(inst: &VQAInstance, line: usize) -> Result<(), ManifestError> {
    let invalid = |field, reason: String| ManifestError::InvalidField { line, field, reason };
    if inst.id.trim().is_empty() {
        return Err(invalid("id", "empty".into()));
    }
    if inst.question.trim().is_empty() {
        return Err(invalid("question", "empty".into()));
    }
    if inst.ground_truth.trim().is_empty() {
        return Err(invalid("ground_truth", "empty".into()));
    }
    match &inst.task {
        TaskKind::Mme { name } => {
            if !MME_SUBTASKS.contains(&name.as_str()) {
                return Err(invalid("task", format!("unknown MME subtask `{name}`")));
            }
        }
        TaskKind::Mmb { name } => {
            if !MMB_ABILITIES.contains(&name.as_str()) {
                return Err(invalid("task", format!("unknown MMB ability `{name}`")));
            }
        }
        TaskKind::Pope { .. } => {}
    }
    if inst.task.is_yes_no() {
        if inst.ground_truth != "yes" && inst.ground_truth != "no" {
            return Err(invalid(
                "ground_truth",
                format!("`{}` is not yes/no", inst.ground_truth),
            ));
        }
    } else if !inst.option_letters().any(|l| l == inst.ground_truth) {
        return Err(invalid(
            "ground_truth",
            format!("`{}` is not one of the option letters", inst.ground_truth),
        ));
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("sample size must be positive")]
    Empty,
    #[error("requested {n} instances but the dataset has {available}")]
    NTooLarge { n: usize, available: usize },
    #[error("cannot draw exactly {n} instances without splitting an MME image group")]
    GroupSplit { n: usize },
}

/// Draw `n` distinct instances deterministically from `(dataset, n, seed)`.
///
/// MME image groups are sampled as units so the paired questions stay
/// together. The result keeps the dataset's original order.
pub fn sample_instances(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset, SampleError> {
    if n == 0 {
        return Err(SampleError::Empty);
    }
    if n > dataset.len() {
        return Err(SampleError::NTooLarge {
            n,
            available: dataset.len(),
        });
    }

    // Units in first-appearance order: MME groups, everything else alone.
    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut group_unit: HashMap<&str, usize> = HashMap::new();
    for (i, inst) in dataset.instances.iter().enumerate() {
        if matches!(inst.task, TaskKind::Mme { .. }) {
            if let Some(&u) = group_unit.get(inst.image_group_id.as_str()) {
                units[u].push(i);
                continue;
            }
            group_unit.insert(&inst.image_group_id, units.len());
        }
        units.push(vec![i]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);

    let mut remaining = n;
    let mut picked = Vec::with_capacity(n);
    for unit in &units {
        if remaining == 0 {
            break;
        }
        if unit.len() <= remaining {
            picked.extend_from_slice(unit);
            remaining -= unit.len();
        }
    }
    if remaining != 0 {
        return Err(SampleError::GroupSplit { n });
    }
    picked.sort_unstable();
    Ok(Dataset {
        root: dataset.root.clone(),
        instances: picked
            .into_iter()
            .map(|i| dataset.instances[i].clone())
            .collect(),
    })
}

/// Ground-truth object annotations: image id → present object names.
pub type Annotations = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Deserialize)]
struct AnnotationRecord {
    image_id: String,
    objects: Vec<String>,
}

/// Load an annotation JSONL file of `{"image_id", "objects": [...]}` records.
/// Repeated image ids merge their object lists.
pub fn load_annotations(path: &Path) -> Result<Annotations, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Annotations::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(raw).map_err(|e| ManifestError::Malformed {
                line: idx + 1,
                message: e.to_string(),
            })?;
        out.entry(rec.image_id).or_default().extend(
            rec.objects
                .into_iter()
                .map(|o| o.trim().to_string())
                .filter(|o| !o.is_empty()),
        );
    }
    Ok(out)
}

/// Pairwise co-occurrence and per-object image frequency.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoOccurrenceTable {
    counts: BTreeMap<(String, String), u64>,
    frequency: BTreeMap<String, u64>,
}

impl CoOccurrenceTable {
    fn key(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    }

    /// Number of images containing both `a` and `b`. Symmetric.
    pub fn lookup(&self, a: &str, b: &str) -> u64 {
        if a == b {
            return self.frequency(a);
        }
        self.counts.get(&Self::key(a, b)).copied().unwrap_or(0)
    }

    /// Number of images containing `x`.
    pub fn frequency(&self, x: &str) -> u64 {
        self.frequency.get(x).copied().unwrap_or(0)
    }

    pub fn objects(&self) -> impl Iterator<Item = &str> {
        self.frequency.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.frequency.is_empty()
    }

    /// Non-zero unordered pairs as `(a, b, count)` with `a < b`.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.counts
            .iter()
            .map(|((a, b), &n)| (a.as_str(), b.as_str(), n))
    }
}

pub fn build_cooccurrence(annotations: &Annotations) -> CoOccurrenceTable {
    let mut table = CoOccurrenceTable::default();
    for objects in annotations.values() {
        let objs: Vec<&String> = objects.iter().collect();
        for (i, a) in objs.iter().enumerate() {
            *table.frequency.entry((*a).clone()).or_default() += 1;
            for b in &objs[i + 1..] {
                *table.counts.entry(CoOccurrenceTable::key(a, b)).or_default() += 1;
            }
        }
    }
    table
}

/// One yes/no existence probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuery {
    pub image_id: String,
    pub object_name: String,
    pub label: bool,
    pub setting: PopeSetting,
}

impl PopeQuery {
    pub fn question(&self) -> String {
        POPE_QUESTION_TEMPLATE.replace("{object}", &self.object_name)
    }

    /// Manifest instance for this query. `image_path` is taken verbatim.
    pub fn to_instance(&self, image_path: String) -> VQAInstance {
        VQAInstance {
            id: format!("pope-{}-{}-{}", self.setting, self.image_id, self.object_name),
            image_path,
            question: self.question(),
            options: Vec::new(),
            ground_truth: if self.label { "yes" } else { "no" }.to_string(),
            task: TaskKind::Pope {
                setting: self.setting,
            },
            image_group_id: self.image_id.clone(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PopeError {
    #[error("k_per_image must be positive")]
    ZeroK,
    #[error("image `{0}` has fewer present objects than k_per_image")]
    InsufficientPresentObjects(String),
    #[error("image `{0}` has fewer absent objects than k_per_image")]
    InsufficientAbsentObjects(String),
}

/// Size of the popular-setting candidate pool for a universe of `universe` objects.
pub fn popular_pool_size(universe: usize) -> usize {
    ((universe as f64 * POPULAR_POOL_FRACTION).ceil() as usize).max(POPULAR_POOL_MIN)
}

/// Build balanced existence queries: per image, `k_per_image` present objects
/// and `k_per_image` absent ones chosen by the setting's negative-sampling rule.
///
/// Images are visited in id order; each image draws from its own RNG stream
/// derived from `seed` and the image id.
pub fn build_pope_queries(
    annotations: &Annotations,
    setting: PopeSetting,
    stats: &CoOccurrenceTable,
    k_per_image: usize,
    seed: u64,
) -> Result<Vec<PopeQuery>, PopeError> {
    if k_per_image == 0 {
        return Err(PopeError::ZeroK);
    }
    let universe: BTreeSet<&str> = stats
        .objects()
        .chain(annotations.values().flatten().map(String::as_str))
        .collect();
    let pool_size = popular_pool_size(universe.len());

    let mut out = Vec::with_capacity(annotations.len() * 2 * k_per_image);
    for (image_id, present) in annotations {
        if present.len() < k_per_image {
            return Err(PopeError::InsufficientPresentObjects(image_id.clone()));
        }
        let absent: Vec<&str> = universe
            .iter()
            .copied()
            .filter(|o| !present.contains(*o))
            .collect();
        if absent.len() < k_per_image {
            return Err(PopeError::InsufficientAbsentObjects(image_id.clone()));
        }
        let mut rng = image_rng(seed, image_id);

        let mut positives: Vec<&str> = present.iter().map(String::as_str).collect();
        positives.shuffle(&mut rng);
        positives.truncate(k_per_image);
        positives.sort_unstable();

        let negatives = match setting {
            PopeSetting::Random => {
                let mut cands = absent;
                cands.shuffle(&mut rng);
                cands.truncate(k_per_image);
                cands.sort_unstable();
                cands
            }
            PopeSetting::Popular => {
                let mut ranked = absent;
                ranked.sort_by(|a, b| stats.frequency(b).cmp(&stats.frequency(a)).then(a.cmp(b)));
                ranked.truncate(pool_size.max(k_per_image));
                ranked.shuffle(&mut rng);
                ranked.truncate(k_per_image);
                ranked.sort_unstable();
                ranked
            }
            PopeSetting::Adversarial => {
                let mut scored: Vec<(u64, &str)> = absent
                    .into_iter()
                    .map(|c| (present.iter().map(|p| stats.lookup(c, p)).sum(), c))
                    .collect();
                scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
                scored.into_iter().take(k_per_image).map(|(_, c)| c).collect()
            }
        };

        let query = |object: &str, label| PopeQuery {
            image_id: image_id.clone(),
            object_name: object.to_string(),
            label,
            setting,
        };
        out.extend(positives.into_iter().map(|o| query(o, true)));
        out.extend(negatives.into_iter().map(|o| query(o, false)));
    }
    Ok(out)
}

fn image_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    let h = sha256_hex(image_id.as_bytes());
    let salt = u64::from_str_radix(&h[..16], 16).expect("hex digest");
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}
