//! Detection backends: grounded boxes, segment-everything masks, and
//! concept-conditioned segmentation.
//!
//! Backends are remote services (or cassettes). Whatever they return, this
//! client is the sanitizer: boxes are clamped, unknown labels dropped, masks
//! validated and clipped, low scores filtered, and the result sorted.

use std::collections::BTreeMap;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::cassette::{Cassette, RemoteCaller, RemoteError};
use crate::concepts::{normalize_concept, ConceptSet};
use crate::digest::json_hash;
use crate::model_client::ImagePayload;
use crate::render::{clamp_box, BBox};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MAX_PER_CONCEPT: usize = 10;
/// Allowed slack between a mask's extent and its box.
pub const MASK_BOX_SLACK_PX: u32 = 2;
pub const REGION_LABEL: &str = "region";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    #[default]
    GroundingBox,
    SegmentEverything,
    ConditionalSegment,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [
        DetectorKind::GroundingBox,
        DetectorKind::SegmentEverything,
        DetectorKind::ConditionalSegment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::GroundingBox => "grounding_box",
            DetectorKind::SegmentEverything => "segment_everything",
            DetectorKind::ConditionalSegment => "conditional_segment",
        }
    }

    /// Whether this backend produces masks.
    pub fn has_masks(self) -> bool {
        !matches!(self, DetectorKind::GroundingBox)
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grounding_box" | "box" | "sphinx" => Ok(DetectorKind::GroundingBox),
            "segment_everything" | "sam" => Ok(DetectorKind::SegmentEverything),
            "conditional_segment" | "csam" => Ok(DetectorKind::ConditionalSegment),
            other => Err(format!("unknown detector kind `{other}`")),
        }
    }
}

/// Row-major run-length encoded binary mask.
///
/// `counts` alternate background/foreground runs, starting with background
/// (a leading zero is allowed). `size` is `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RleError {
    #[error("run lengths sum to {got}, expected {expected}")]
    LengthMismatch { got: u64, expected: u64 },
}

impl Rle {
    pub fn height(&self) -> u32 {
        self.size[0]
    }

    pub fn width(&self) -> u32 {
        self.size[1]
    }

    pub fn encode(width: u32, height: u32, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Self {
            size: [height, width],
            counts,
        }
    }

    pub fn decode(&self) -> Result<Vec<bool>, RleError> {
        let expected = self.width() as u64 * self.height() as u64;
        let got: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if got != expected {
            return Err(RleError::LengthMismatch { got, expected });
        }
        let mut bits = Vec::with_capacity(expected as usize);
        for (i, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(bits)
    }

    /// Tight pixel extent `(x0, y0, x1, y1)` (exclusive max) of set pixels.
    pub fn extent(bits: &[bool], width: u32) -> Option<(u32, u32, u32, u32)> {
        let mut ext: Option<(u32, u32, u32, u32)> = None;
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = ((i as u32) % width, (i as u32) / width);
            ext = Some(match ext {
                None => (x, y, x + 1, y + 1),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
            });
        }
        ext
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Rle>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub backend: DetectorKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DetectionSet {
    pub fn empty(image_id: impl Into<String>, backend: DetectorKind) -> Self {
        Self {
            image_id: image_id.into(),
            detections: Vec::new(),
            backend,
            warnings: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.detections.iter().any(|d| d.mask.is_some())
    }

    pub fn content_hash(&self) -> String {
        json_hash(self)
    }

    /// Response body in the detector wire format.
    pub fn to_wire(&self) -> String {
        let detections: Vec<WireDetection> = self
            .detections
            .iter()
            .map(|d| WireDetection {
                label: Some(d.label.clone()),
                bbox: Some(vec![d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max]),
                score: Some(d.score),
                mask_rle: d.mask.clone(),
            })
            .collect();
        serde_json::to_string(&WireResponse { detections }).expect("serializable")
    }
}

/// Image handed to a detector.
#[derive(Debug, Clone)]
pub struct ImageRef {
    pub id: String,
    pub payload: ImagePayload,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorBackend {
    pub id: String,
    pub endpoint: String,
    #[serde(default = "default_version")]
    pub version: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_max_per_concept")]
    pub max_per_concept: usize,
}

fn default_version() -> String {
    "1".into()
}
fn default_threshold() -> f64 {
    DEFAULT_SCORE_THRESHOLD
}
fn default_max_per_concept() -> usize {
    DEFAULT_MAX_PER_CONCEPT
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DetectorError {
    #[error("detector backend unavailable: {0}")]
    BackendUnavailable(#[from] RemoteError),
    #[error("malformed detector response: bad `{0}`")]
    MalformedResponse(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct WireResponse {
    detections: Vec<WireDetection>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireDetection {
    #[serde(default)]
    label: Option<String>,
    #[serde(rename = "box", default)]
    bbox: Option<Vec<f64>>,
    #[serde(default)]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_rle: Option<Rle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WireMode {
    Box,
    Segment,
    Conditional,
}

impl WireMode {
    fn as_str(self) -> &'static str {
        match self {
            WireMode::Box => "box",
            WireMode::Segment => "segment",
            WireMode::Conditional => "conditional",
        }
    }
}

/// How labels are checked while sanitizing.
enum LabelPolicy<'a> {
    Concepts(&'a ConceptSet),
    Region,
}

/// Parse a wire response and apply every [`DetectionSet`] invariant.
///
/// `keep_masks = false` strips masks (box-only backends).
pub fn sanitize_response(
    body: &str,
    image: (&str, u32, u32),
    backend: DetectorKind,
    labels: Option<&ConceptSet>,
    keep_masks: bool,
    threshold: f64,
    max_per_label: usize,
) -> Result<DetectionSet, DetectorError> {
    let policy = match labels {
        Some(c) => LabelPolicy::Concepts(c),
        None => LabelPolicy::Region,
    };
    let wire = parse_wire(body)?;
    let (image_id, width, height) = image;
    let mut out = Vec::with_capacity(wire.len());
    for d in wire {
        if let Some(det) = sanitize_one(d, width, height, &policy, keep_masks)? {
            out.push(det);
        }
    }
    Ok(finalize(image_id, out, backend, threshold, max_per_label))
}

fn parse_wire(body: &str) -> Result<Vec<WireDetection>, DetectorError> {
    let v: Value =
        serde_json::from_str(body).map_err(|_| DetectorError::MalformedResponse("body".into()))?;
    let list = v
        .get("detections")
        .cloned()
        .ok_or_else(|| DetectorError::MalformedResponse("detections".into()))?;
    let items = list
        .as_array()
        .ok_or_else(|| DetectorError::MalformedResponse("detections".into()))?;
    items
        .iter()
        .map(|item| {
            if let Some(m) = item.get("mask_rle").filter(|m| !m.is_null()) {
                serde_json::from_value::<Rle>(m.clone())
                    .map_err(|_| DetectorError::MalformedResponse("mask".into()))?;
            }
            serde_json::from_value::<WireDetection>(item.clone()).map_err(|e| {
                let field = ["box", "score", "label"]
                    .into_iter()
                    .find(|f| e.to_string().contains(f))
                    .unwrap_or("detection");
                DetectorError::MalformedResponse(field.into())
            })
        })
        .collect()
}

fn sanitize_one(
    d: WireDetection,
    width: u32,
    height: u32,
    policy: &LabelPolicy<'_>,
    keep_masks: bool,
) -> Result<Option<Detection>, DetectorError> {
    let malformed = |f: &str| DetectorError::MalformedResponse(f.to_string());
    let score = d.score.ok_or_else(|| malformed("score"))?;
    if !score.is_finite() {
        return Err(malformed("score"));
    }
    let b = d.bbox.ok_or_else(|| malformed("box"))?;
    if b.len() != 4 || b.iter().any(|x| !x.is_finite()) {
        return Err(malformed("box"));
    }
    let label = match policy {
        LabelPolicy::Region => REGION_LABEL.to_string(),
        LabelPolicy::Concepts(concepts) => {
            let l = normalize_concept(d.label.as_deref().ok_or_else(|| malformed("label"))?);
            if !concepts.contains(&l) {
                log::debug!("dropping detection with unrequested label {l:?}");
                return Ok(None);
            }
            l
        }
    };
    let Ok(bbox) = clamp_box(BBox::new(b[0], b[1], b[2], b[3]), width, height) else {
        return Ok(None);
    };
    let mask = match d.mask_rle {
        Some(rle) if keep_masks => clip_mask(&rle, &bbox, width, height)?,
        _ => None,
    };
    Ok(Some(Detection {
        label,
        bbox,
        mask,
        score: score.clamp(0.0, 1.0),
    }))
}

/// Validate `rle` against the image and zero any pixel farther than the
/// allowed slack from `bbox`. Empty masks become `None`.
fn clip_mask(rle: &Rle, bbox: &BBox, width: u32, height: u32) -> Result<Option<Rle>, DetectorError> {
    if rle.width() != width || rle.height() != height {
        return Err(DetectorError::MalformedResponse("mask".into()));
    }
    let mut bits = rle
        .decode()
        .map_err(|_| DetectorError::MalformedResponse("mask".into()))?;
    let (x0, y0, x1, y1) = bbox.pixel_span(width, height);
    let slack = MASK_BOX_SLACK_PX;
    let (ex0, ey0) = (x0.saturating_sub(slack), y0.saturating_sub(slack));
    let (ex1, ey1) = ((x1 + slack).min(width), (y1 + slack).min(height));
    let mut changed = false;
    for (i, bit) in bits.iter_mut().enumerate().filter(|(_, b)| **b) {
        let (x, y) = ((i as u32) % width, (i as u32) / width);
        if x < ex0 || x >= ex1 || y < ey0 || y >= ey1 {
            *bit = false;
            changed = true;
        }
    }
    if Rle::extent(&bits, width).is_none() {
        return Ok(None);
    }
    Ok(Some(if changed {
        Rle::encode(width, height, &bits)
    } else {
        rle.clone()
    }))
}

fn finalize(
    image_id: &str,
    mut dets: Vec<Detection>,
    backend: DetectorKind,
    threshold: f64,
    max_per_label: usize,
) -> DetectionSet {
    dets.retain(|d| d.score >= threshold);
    sort_detections(&mut dets);
    let mut per_label: BTreeMap<String, usize> = BTreeMap::new();
    dets.retain(|d| {
        let n = per_label.entry(d.label.clone()).or_default();
        *n += 1;
        *n <= max_per_label
    });
    DetectionSet {
        image_id: image_id.to_string(),
        detections: dets,
        backend,
        warnings: Vec::new(),
    }
}

/// Descending score, then label, then `x_min`. Stable.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.label.cmp(&b.label))
            .then_with(|| a.bbox.x_min.total_cmp(&b.bbox.x_min))
    });
}

pub struct DetectorClient {
    backend: DetectorBackend,
    cassette: Cassette,
    caller: RemoteCaller,
}

impl DetectorClient {
    pub fn new(backend: DetectorBackend, cassette: Cassette, caller: RemoteCaller) -> Self {
        Self {
            backend,
            cassette,
            caller,
        }
    }

    pub fn backend(&self) -> &DetectorBackend {
        &self.backend
    }

    pub fn network_calls(&self) -> u64 {
        self.caller.network_calls()
    }

    /// Request fingerprint; the image enters by hash only.
    pub fn fingerprint(
        &self,
        image: &ImageRef,
        labels: Option<&[String]>,
        mode: &str,
        boxes: Option<&[[f64; 4]]>,
    ) -> String {
        json_hash(&json!({
            "backend": self.backend.id,
            "version": self.backend.version,
            "image_sha256": image.payload.sha256(),
            "labels": labels,
            "mode": mode,
            "boxes": boxes,
        }))
    }

    fn request(
        &self,
        image: &ImageRef,
        labels: Option<&[String]>,
        mode: WireMode,
        boxes: Option<&[[f64; 4]]>,
    ) -> Result<String, RemoteError> {
        let fp = self.fingerprint(image, labels, mode.as_str(), boxes);
        let token = self
            .backend
            .api_key_env
            .as_deref()
            .and_then(|v| std::env::var(v).ok());
        self.caller
            .call(&self.cassette, &fp, &self.backend.endpoint, token.as_deref(), || {
                let mut body = json!({
                    "image_b64": base64::engine::general_purpose::STANDARD.encode(&image.payload.bytes),
                    "labels": labels,
                    "mode": mode.as_str(),
                });
                if let Some(b) = boxes {
                    body["boxes"] = json!(b);
                }
                serde_json::to_vec(&body).expect("serializable")
            })
    }

    fn sanitize(
        &self,
        body: &str,
        image: &ImageRef,
        backend: DetectorKind,
        labels: Option<&ConceptSet>,
        keep_masks: bool,
    ) -> Result<DetectionSet, DetectorError> {
        sanitize_response(
            body,
            (&image.id, image.width, image.height),
            backend,
            labels,
            keep_masks,
            self.backend.score_threshold,
            self.backend.max_per_concept,
        )
    }

    /// Boxes for each concept. Concepts without hits are simply absent.
    pub fn detect_grounded(
        &self,
        image: &ImageRef,
        concepts: &ConceptSet,
    ) -> Result<DetectionSet, DetectorError> {
        let body = self.request(image, Some(&concepts.concepts), WireMode::Box, None)?;
        self.sanitize(&body, image, DetectorKind::GroundingBox, Some(concepts), false)
    }

    /// Unconditioned region masks over the whole image, labelled "region".
    pub fn segment_everything(&self, image: &ImageRef) -> Result<DetectionSet, DetectorError> {
        let body = self.request(image, None, WireMode::Segment, None)?;
        self.sanitize(&body, image, DetectorKind::SegmentEverything, None, true)
    }

    /// Grounded boxes, then masks conditioned on those boxes.
    ///
    /// If the mask call fails the boxes are returned without masks and a
    /// warning is attached.
    pub fn segment_conditional(
        &self,
        image: &ImageRef,
        concepts: &ConceptSet,
    ) -> Result<DetectionSet, DetectorError> {
        let grounded = self.detect_grounded(image, concepts)?;
        let mut set = DetectionSet {
            backend: DetectorKind::ConditionalSegment,
            ..grounded
        };
        if set.is_empty() {
            return Ok(set);
        }
        let boxes: Vec<[f64; 4]> = set
            .detections
            .iter()
            .map(|d| [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max])
            .collect();
        match self.conditional_masks(image, concepts, &set, &boxes) {
            Ok(masks) => {
                for (d, m) in set.detections.iter_mut().zip(masks) {
                    d.mask = m;
                }
            }
            Err(e) => {
                let msg = format!("mask request failed, keeping boxes only: {e}");
                log::warn!("{}: {msg}", image.id);
                set.warnings.push(msg);
            }
        }
        Ok(set)
    }

    fn conditional_masks(
        &self,
        image: &ImageRef,
        concepts: &ConceptSet,
        grounded: &DetectionSet,
        boxes: &[[f64; 4]],
    ) -> Result<Vec<Option<Rle>>, DetectorError> {
        let body = self.request(image, Some(&concepts.concepts), WireMode::Conditional, Some(boxes))?;
        let wire = parse_wire(&body)?;
        if wire.len() != boxes.len() {
            return Err(DetectorError::MalformedResponse("detections".into()));
        }
        grounded
            .detections
            .iter()
            .zip(wire)
            .map(|(d, w)| {
                let rle = w
                    .mask_rle
                    .ok_or_else(|| DetectorError::MalformedResponse("mask".into()))?;
                clip_mask(&rle, &d.bbox, image.width, image.height)
            })
            .collect()
    }
}

/// Check every [`DetectionSet`] invariant; returns the first violation.
pub fn check_invariants(set: &DetectionSet, width: u32, height: u32) -> Result<(), String> {
    for (i, d) in set.detections.iter().enumerate() {
        let b = &d.bbox;
        if !(0.0 <= b.x_min && b.x_min < b.x_max && b.x_max <= width as f64) {
            return Err(format!("detection {i}: x range {:?}", b));
        }
        if !(0.0 <= b.y_min && b.y_min < b.y_max && b.y_max <= height as f64) {
            return Err(format!("detection {i}: y range {:?}", b));
        }
        if !(0.0..=1.0).contains(&d.score) {
            return Err(format!("detection {i}: score {}", d.score));
        }
        if let Some(m) = &d.mask {
            let bits = m.decode().map_err(|e| format!("detection {i}: {e}"))?;
            if m.width() != width || m.height() != height {
                return Err(format!("detection {i}: mask size {:?}", m.size));
            }
            if let Some((x0, y0, x1, y1)) = Rle::extent(&bits, width) {
                let (bx0, by0, bx1, by1) = b.pixel_span(width, height);
                let s = MASK_BOX_SLACK_PX;
                if x0 + s < bx0 || y0 + s < by0 || x1 > bx1 + s || y1 > by1 + s {
                    return Err(format!("detection {i}: mask extent outside box"));
                }
            }
        }
    }
    for (i, w) in set.detections.windows(2).enumerate() {
        let ord = w[1]
            .score
            .total_cmp(&w[0].score)
            .then_with(|| w[0].label.cmp(&w[1].label))
            .then_with(|| w[0].bbox.x_min.total_cmp(&w[1].bbox.x_min));
        if ord == std::cmp::Ordering::Greater {
            return Err(format!("detections {i} and {} out of order", i + 1));
        }
    }
    Ok(())
}
