//! Shared helpers for the integration tests: the bundled end-to-end fixture
//! and fake backends that stand in for the remote services.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use vtprompt_core::detector::Rle;
use vtprompt_core::model_client::chat_response_body;
use vtprompt_core::transport::{HttpReply, Transport, TransportError};

pub const TEXT_URL: &str = "http://127.0.0.1:9/text/v1/chat/completions";
pub const VISION_URL: &str = "http://127.0.0.1:9/vision/v1/chat/completions";
pub const DETECT_URL: &str = "http://127.0.0.1:9/detect";

pub const IMAGE_W: u32 = 64;
pub const IMAGE_H: u32 = 48;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

pub fn render_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/render")
}

/// Copy the committed fixture (manifest, images, cassettes, config) into a
/// scratch directory so runs never write into the source tree.
pub fn scratch_fixture() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    copy_dir(&fixture_dir(), tmp.path());
    let cfg = tmp.path().join("config.toml");
    (tmp, cfg)
}

pub fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dest);
        } else {
            std::fs::copy(entry.path(), dest).unwrap();
        }
    }
}

/// Fails every request and counts the attempts.
#[derive(Default)]
pub struct OfflineTransport {
    pub calls: AtomicU64,
}

impl Transport for OfflineTransport {
    fn post_json(&self, _: &str, _: Option<&str>, _: &[u8], _: Duration) -> Result<HttpReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(TransportError::Connect("network disabled in tests".into()))
    }
}

impl OfflineTransport {
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Scripted stand-in for the text model, detector and vision model behind
/// the fixture. Answers depend only on the request body.
#[derive(Default)]
pub struct FixtureBackends {
    pub calls: AtomicU64,
}

/// (question, concepts, vision reply)
pub const SCRIPT: [(&str, &str, &str); 5] = [
    (
        "Is there one dog in the image?",
        "mode: direct\nobjects: [\"dog\"]",
        "Marker 1 outlines a dog lying on the grass. The yard holds a single dog.\nAnswer: yes",
    ),
    (
        "Are there three dogs in the image?",
        "mode: direct\nobjects: [\"dogs\"]",
        "Marker 1 outlines a dog. I count it together with the shadows.\nAnswer: yes",
    ),
    (
        "Where is the cat?",
        "mode: direct\nobjects: [\"cat\"]",
        "The cat sits in the upper left part of the frame.\nAnswer: A",
    ),
    (
        "Where is the ball?",
        "mode: direct\nobjects: [\"ball\"]",
        "The ball appears near the middle of the picture.\nAnswer: A",
    ),
    (
        "Is there a dog in the image?",
        "mode: direct\nobjects: [\"dog\"]",
        "Yes, marker 1 shows a dog next to the road.",
    ),
];

/// Boxes the fake detector reports per label.
pub fn label_box(label: &str) -> Option<[f64; 4]> {
    match label {
        "dog" | "dogs" => Some([6.0, 10.0, 30.0, 38.0]),
        "cat" => Some([4.0, 4.0, 24.0, 20.0]),
        "ball" => Some([40.0, 6.0, 56.0, 20.0]),
        _ => None,
    }
}

/// Filled ellipse inscribed in `b`.
pub fn ellipse_mask(b: [f64; 4], w: u32, h: u32) -> Rle {
    let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
    let (rx, ry) = ((b[2] - b[0]) / 2.0, (b[3] - b[1]) / 2.0);
    let bits: Vec<bool> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            dx * dx + dy * dy <= 1.0
        })
        .collect();
    Rle::encode(w, h, &bits)
}

impl FixtureBackends {
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn chat(&self, body: &Value, vision: bool) -> String {
        let prompt = body
            .pointer("/messages/0/content/0/text")
            .and_then(Value::as_str)
            .unwrap_or_default();
        let reply = SCRIPT
            .iter()
            .find(|(q, _, _)| prompt.contains(q))
            .map(|(_, concepts, answer)| if vision { *answer } else { *concepts })
            .unwrap_or("I cannot tell.");
        chat_response_body(reply)
    }

    fn detect(&self, body: &Value) -> String {
        let labels: Vec<String> = body["labels"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
            .unwrap_or_default();
        let dets: Vec<Value> = match body["mode"].as_str() {
            Some("conditional") => body["boxes"]
                .as_array()
                .unwrap()
                .iter()
                .map(|b| {
                    let b: Vec<f64> = serde_json::from_value(b.clone()).unwrap();
                    json!({"mask_rle": ellipse_mask([b[0], b[1], b[2], b[3]], IMAGE_W, IMAGE_H)})
                })
                .collect(),
            Some("segment") => vec![json!({
                "box": [0.0, 0.0, 32.0, 24.0],
                "score": 0.8,
                "mask_rle": ellipse_mask([0.0, 0.0, 32.0, 24.0], IMAGE_W, IMAGE_H),
            })],
            _ => labels
                .iter()
                .filter_map(|l| label_box(l).map(|b| (l, b)))
                .flat_map(|(l, b)| {
                    // A weak duplicate the threshold filter must drop.
                    [
                        json!({"label": l, "box": b, "score": 0.91}),
                        json!({"label": l, "box": [b[0] + 1.0, b[1], b[2], b[3]], "score": 0.12}),
                    ]
                })
                .collect(),
        };
        json!({ "detections": dets }).to_string()
    }
}

impl Transport for FixtureBackends {
    fn post_json(&self, url: &str, _: Option<&str>, body: &[u8], _: Duration) -> Result<HttpReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let v: Value = serde_json::from_slice(body).map_err(|e| TransportError::Connect(e.to_string()))?;
        let reply = match url {
            TEXT_URL => self.chat(&v, false),
            VISION_URL => self.chat(&v, true),
            DETECT_URL => self.detect(&v),
            other => return Err(TransportError::Connect(format!("unknown url {other}"))),
        };
        Ok(HttpReply { status: 200, body: reply })
    }
}

/// Deterministic synthetic scene: a soft gradient with a few solid blobs.
pub fn synth_image(seed: u8) -> RgbImage {
    RgbImage::from_fn(IMAGE_W, IMAGE_H, |x, y| {
        let base = [
            (x * 3) as u8 ^ seed,
            (y * 4) as u8,
            (x + y) as u8 ^ seed.wrapping_mul(7),
        ];
        let blob = |cx: u32, cy: u32, r: u32| {
            let (dx, dy) = (x.abs_diff(cx), y.abs_diff(cy));
            dx * dx + dy * dy <= r * r
        };
        if blob(18, 24, 9) {
            Rgb([150, 110, 60])
        } else if blob(48, 13, 5 + (seed as u32 % 3)) {
            Rgb([220, 40, 40])
        } else {
            Rgb(base)
        }
    })
}
