use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cache::{HitMiss, StageCache};
use crate::cassette::{Cassette, RemoteCaller};
use crate::concepts::{extract_key_concepts, ConceptCache, ConceptSet};
use crate::dataset::{load_manifest, sample_instances, Dataset, VQAInstance};
use crate::detector::{DetectionSet, DetectorClient, DetectorKind, ImageRef};
use crate::digest::{json_hash, sha256_hex, write_atomic};
use crate::model_client::{ImagePayload, ModelClient};
use crate::render::{decode_image, pixel_hash, render_vprompt, AnnotatedImage, Provenance, VPromptStyle};
use crate::scoring::{ParseOutcome, RecordFailure, RunRecord, StageArtifacts};
use crate::tprompt::{build_answer_prompt, parse_answer};
use crate::transport::{HttpTransport, Limiter, RetryPolicy, Transport};

use super::config::{RunConfig, RunMode};
use super::PipelineError;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const ANNOTATED_DIR: &str = "annotated";

/// Knobs that do not change outputs.
#[derive(Clone, Default)]
pub struct RunOptions {
    /// Network transport; defaults to HTTP.
    pub transport: Option<Arc<dyn Transport>>,
    /// Retry policy for every backend; defaults to [`RetryPolicy::default`].
    pub retry: Option<RetryPolicy>,
    /// Stop after appending this many new records, as if killed.
    pub abort_after: Option<usize>,
}

/// Written atomically once every instance has a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub tool_version: String,
    pub records: usize,
    pub failed: usize,
    pub stages: BTreeMap<String, HitMiss>,
    pub network_calls: u64,
    pub wall_time_secs: f64,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Corrupt {
            path,
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    /// `None` when the run stopped early.
    pub manifest: Option<RunManifest>,
    pub written: usize,
    pub resumed: usize,
}

/// Rendered image as stored in the stage cache.
#[derive(Serialize, Deserialize)]
struct RenderedEntry {
    style: VPromptStyle,
    provenance: Provenance,
    pixel_sha256: String,
    png_b64: String,
}

type StageResult<T> = Result<T, RecordFailure>;

fn fail(stage: &str, e: impl std::fmt::Display) -> RecordFailure {
    RecordFailure {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

#[derive(Default)]
struct Counter {
    hits: AtomicU64,
    misses: AtomicU64,
}

impl Counter {
    fn count(&self, hit: bool) {
        let c = if hit { &self.hits } else { &self.misses };
        c.fetch_add(1, Ordering::Relaxed);
    }

    fn stats(&self) -> HitMiss {
        HitMiss {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

struct Stages<'a> {
    cfg: &'a RunConfig,
    dataset: &'a Dataset,
    annotated_dir: PathBuf,
    text: ModelClient,
    vision: ModelClient,
    detector: DetectorClient,
    concepts: ConceptCache,
    concept_counts: Counter,
    detections: StageCache,
    rendered: StageCache,
    responses: StageCache,
}

impl<'a> Stages<'a> {
    fn new(cfg: &'a RunConfig, dataset: &'a Dataset, run_dir: &Path, opts: &RunOptions) -> Self {
        let transport = opts
            .transport
            .clone()
            .unwrap_or_else(|| Arc::new(HttpTransport));
        let retry = opts.retry.unwrap_or_default();
        let timeout = Duration::from_secs(cfg.timeout_secs);
        let caller = || {
            RemoteCaller::new(
                transport.clone(),
                retry,
                Arc::new(Limiter::new(cfg.max_concurrency)),
                timeout,
            )
        };
        let cassette = |id: &str| Cassette::new(&cfg.cassette_dir, id, cfg.cassette_mode);
        Self {
            cfg,
            dataset,
            annotated_dir: run_dir.join(ANNOTATED_DIR),
            text: ModelClient::new(cfg.text_backend.clone(), cassette(&cfg.text_backend.id), caller()),
            vision: ModelClient::new(
                cfg.vision_backend.clone(),
                cassette(&cfg.vision_backend.id),
                caller(),
            ),
            detector: DetectorClient::new(cfg.detector.clone(), cassette(&cfg.detector.id), caller()),
            concepts: ConceptCache::new(&cfg.cache_dir),
            concept_counts: Counter::default(),
            detections: StageCache::new(&cfg.cache_dir, "detections"),
            rendered: StageCache::new(&cfg.cache_dir, "rendered"),
            responses: StageCache::new(&cfg.cache_dir, "responses"),
        }
    }

    fn stats(&self) -> BTreeMap<String, HitMiss> {
        BTreeMap::from([
            ("concepts".to_string(), self.concept_counts.stats()),
            ("detections".to_string(), self.detections.stats()),
            ("rendered".to_string(), self.rendered.stats()),
            ("responses".to_string(), self.responses.stats()),
        ])
    }

    fn network_calls(&self) -> u64 {
        self.text.network_calls() + self.vision.network_calls() + self.detector.network_calls()
    }

    fn process(&self, inst: &VQAInstance) -> RunRecord {
        let mut artifacts = StageArtifacts::default();
        let (parsed, failure) = match self.answer(inst, &mut artifacts) {
            Ok(raw) => {
                let outcome = match parse_answer(&raw, &inst.task, &inst.options) {
                    Ok(p) => ParseOutcome::Parsed(p),
                    Err(_) => ParseOutcome::Unparsable { raw },
                };
                (Some(outcome), None)
            }
            Err(f) => {
                log::warn!("{}: {} stage failed: {}", inst.id, f.stage, f.message);
                (None, Some(f))
            }
        };
        let mut record = RunRecord {
            instance_id: inst.id.clone(),
            task: inst.task.clone(),
            image_group_id: inst.image_group_id.clone(),
            ground_truth: inst.ground_truth.clone(),
            parsed,
            correct: false,
            failure,
            error_category: None,
            stage_artifacts: artifacts,
        };
        record.correct = record.recompute_correct();
        record
    }

    fn answer(&self, inst: &VQAInstance, art: &mut StageArtifacts) -> StageResult<String> {
        let path = self.dataset.image_path(inst);
        let bytes = std::fs::read(&path).map_err(|e| fail("image", format!("{}: {e}", path.display())))?;
        let original = ImagePayload::new(bytes, mime_for(&path));

        let payload = match self.cfg.mode {
            RunMode::Baseline => original,
            RunMode::Vtprompt => {
                let annotated = self.visual_prompt(inst, original, art)?;
                annotated
                    .write_to_dir(&self.annotated_dir)
                    .map_err(|e| fail("render", e))?;
                ImagePayload::png(annotated.to_png())
            }
        };

        let prompt = build_answer_prompt(&inst.question, &inst.options, self.cfg.strategy)
            .map_err(|e| fail("prompt", e))?;
        art.answer_prompt = Some(sha256_hex(&prompt.text));

        let request = self.vision.vision_request(prompt.text, payload);
        let key = request.fingerprint();
        let raw = match self.responses.get::<String>(&key) {
            Some(raw) => raw,
            None => {
                let raw = self.vision.query_vision(&request).map_err(|e| fail("vision", e))?;
                self.store(&self.responses, &key, &raw);
                raw
            }
        };
        art.raw_response = Some(sha256_hex(&raw));
        Ok(raw)
    }

    fn visual_prompt(
        &self,
        inst: &VQAInstance,
        original: ImagePayload,
        art: &mut StageArtifacts,
    ) -> StageResult<AnnotatedImage> {
        let source = decode_image(&original.bytes).map_err(|e| fail("image", e))?;
        let image = ImageRef {
            id: inst.image_path.clone(),
            width: source.width(),
            height: source.height(),
            payload: original,
        };

        // Unconditioned segmentation has no use for concepts.
        let concepts = if self.cfg.detector_kind == DetectorKind::SegmentEverything {
            None
        } else {
            let c = extract_key_concepts(&inst.question, &self.text, Some(&self.concepts))
                .map_err(|e| fail("concepts", e))?;
            self.concept_counts.count(c.hit);
            art.concepts = Some(json_hash(&c.value));
            Some(c.value)
        };

        let dets = self.detect(&image, concepts.as_ref())?;
        art.detections = Some(dets.content_hash());

        let annotated = self.render(inst, &image, &source, &dets)?;
        art.annotated_image = Some(annotated.content_hash());
        Ok(annotated)
    }

    fn detect(&self, image: &ImageRef, concepts: Option<&ConceptSet>) -> StageResult<DetectionSet> {
        let kind = self.cfg.detector_kind;
        let key = json_hash(&json!({
            "backend": self.cfg.detector,
            "kind": kind,
            "image": image.id,
            "image_sha256": image.payload.sha256(),
            "concepts": concepts,
        }));
        if let Some(hit) = self.detections.get::<DetectionSet>(&key) {
            return Ok(hit);
        }
        let result = match (kind, concepts) {
            (DetectorKind::SegmentEverything, _) => self.detector.segment_everything(image),
            (DetectorKind::GroundingBox, Some(c)) => self.detector.detect_grounded(image, c),
            (DetectorKind::ConditionalSegment, Some(c)) => self.detector.segment_conditional(image, c),
            (_, None) => return Err(fail("detection", "concept-driven detector without concepts")),
        };
        let set = result.map_err(|e| fail("detection", e))?;
        // A degraded conditional result is not cached so a later run can retry.
        if set.warnings.is_empty() {
            self.store(&self.detections, &key, &set);
        }
        Ok(set)
    }

    fn render(
        &self,
        inst: &VQAInstance,
        image: &ImageRef,
        source: &image::RgbImage,
        dets: &DetectionSet,
    ) -> StageResult<AnnotatedImage> {
        let key = json_hash(&json!({
            "image_sha256": image.payload.sha256(),
            "detections": dets.content_hash(),
            "style": self.cfg.style,
            "render": self.cfg.render.content_hash(),
        }));
        if let Some(hit) = self.rendered.get::<RenderedEntry>(&key) {
            if let Some(img) = decode_entry(inst, &hit) {
                return Ok(img);
            }
            log::warn!("{}: rendered cache entry {key} is corrupt; re-rendering", inst.id);
        }
        let annotated = render_vprompt(source, &file_stem(&inst.id), dets, self.cfg.style, &self.cfg.render)
            .map_err(|e| fail("render", e))?;
        let entry = RenderedEntry {
            style: annotated.style,
            provenance: annotated.provenance.clone(),
            pixel_sha256: annotated.content_hash(),
            png_b64: base64::engine::general_purpose::STANDARD.encode(annotated.to_png()),
        };
        self.store(&self.rendered, &key, &entry);
        Ok(annotated)
    }

    fn store<T: Serialize>(&self, cache: &StageCache, key: &str, value: &T) {
        if let Err(e) = cache.put(key, value) {
            log::warn!("cache write to {} failed: {e}", cache.dir().display());
        }
    }
}

fn decode_entry(inst: &VQAInstance, e: &RenderedEntry) -> Option<AnnotatedImage> {
    let png = base64::engine::general_purpose::STANDARD.decode(&e.png_b64).ok()?;
    let pixels = decode_image(&png).ok()?;
    (pixel_hash(&pixels) == e.pixel_sha256).then(|| AnnotatedImage {
        image_id: file_stem(&inst.id),
        pixels,
        style: e.style,
        provenance: e.provenance.clone(),
    })
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "image/png",
    }
}

/// Instance id made safe for use as a file name.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Read existing records, dropping a torn trailing line left by a crash.
pub fn read_records_for_resume(path: &Path) -> Result<Vec<RunRecord>, PipelineError> {
    let mut bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(PipelineError::io(path, e)),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        log::warn!(
            "{}: dropping {} bytes of incomplete trailing record",
            path.display(),
            bytes.len() - complete
        );
        bytes.truncate(complete);
        write_atomic(path, &bytes).map_err(|e| PipelineError::io(path, e))?;
    }
    parse_records(path, &bytes)
}

pub fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<RunRecord>, PipelineError> {
    let text = std::str::from_utf8(bytes).map_err(|e| PipelineError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    let dataset = load_manifest(&cfg.manifest)?;
    match cfg.sample {
        Some(s) => Ok(sample_instances(&dataset, s.n, s.seed)?),
        None => Ok(dataset),
    }
}

/// Run every instance of the config's dataset, resuming a partial run.
///
/// Records are appended to `records.jsonl` in manifest order by a single
/// writer; per-instance failures become failed records. The run manifest is
/// written last, so its presence marks a complete run.
pub fn run_eval(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let started = Instant::now();
    cfg.validate()?;
    let config_hash = cfg.config_hash()?;
    let run_id = config_hash[..super::config::RUN_ID_LEN].to_string();
    let run_dir = cfg.output_dir.join(&run_id);
    let dataset = load_dataset(cfg)?;

    std::fs::create_dir_all(run_dir.join(ANNOTATED_DIR)).map_err(|e| PipelineError::io(&run_dir, e))?;
    let records_path = run_dir.join(RECORDS_FILE);
    let existing = read_records_for_resume(&records_path)?;
    let done: HashSet<&str> = existing.iter().map(|r| r.instance_id.as_str()).collect();
    let pending: Vec<&VQAInstance> = dataset
        .instances
        .iter()
        .filter(|i| !done.contains(i.id.as_str()))
        .collect();
    if !existing.is_empty() {
        log::info!("resuming {run_id}: {} done, {} pending", existing.len(), pending.len());
    }

    let stages = Stages::new(cfg, &dataset, &run_dir, opts);
    let mut out = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)
        .map_err(|e| PipelineError::io(&records_path, e))?;

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let written = std::thread::scope(|scope| -> Result<usize, PipelineError> {
        let (tx, rx) = mpsc::channel::<(usize, RunRecord)>();
        for _ in 0..cfg.max_concurrency.min(pending.len()) {
            let tx = tx.clone();
            let (stages, pending, next, stop) = (&stages, &pending, &next, &stop);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() || stop.load(Ordering::SeqCst) {
                    break;
                }
                if tx.send((i, stages.process(pending[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Single ordered writer: buffer out-of-order results.
        let mut buffer = BTreeMap::new();
        let mut written = 0;
        for (i, record) in rx.iter() {
            buffer.insert(i, record);
            while let Some(record) = buffer.remove(&written) {
                let mut line = serde_json::to_string(&record).expect("serializable");
                line.push('\n');
                out.write_all(line.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(|e| PipelineError::io(&records_path, e))?;
                written += 1;
                if opts.abort_after == Some(written) {
                    stop.store(true, Ordering::SeqCst);
                    return Ok(written);
                }
            }
        }
        Ok(written)
    })?;
    drop(out);

    let resumed = existing.len();
    if written < pending.len() {
        log::warn!("run {run_id} stopped after {written} of {} pending records", pending.len());
        return Ok(RunSummary {
            run_dir,
            manifest: None,
            written,
            resumed,
        });
    }

    let all = read_records_for_resume(&records_path)?;
    let manifest = RunManifest {
        run_id,
        config_hash,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        records: all.len(),
        failed: all.iter().filter(|r| r.is_failed()).count(),
        stages: stages.stats(),
        network_calls: stages.network_calls(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    let bytes = serde_json::to_vec_pretty(&manifest).expect("serializable");
    let path = run_dir.join(MANIFEST_FILE);
    write_atomic(&path, &bytes).map_err(|e| PipelineError::io(&path, e))?;
    Ok(RunSummary {
        run_dir,
        manifest: Some(manifest),
        written,
        resumed,
    })
}
