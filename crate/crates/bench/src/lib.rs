//! Synthetic workloads shared by the benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtprompt_core::dataset::{Annotations, PopeSetting, TaskKind};
use vtprompt_core::detector::{Detection, DetectionSet, DetectorKind, Rle};
use vtprompt_core::render::BBox;
use vtprompt_core::scoring::{ParseOutcome, RunRecord, StageArtifacts};
use vtprompt_core::tprompt::{AnswerValue, ParsePath, ParsedAnswer};

/// `n` POPE records with random labels and answers.
pub fn pope_records(n: usize, seed: u64) -> Vec<RunRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| RunRecord {
            instance_id: format!("q{i}"),
            task: TaskKind::Pope {
                setting: PopeSetting::Random,
            },
            image_group_id: format!("img{i}"),
            ground_truth: if rng.gen_bool(0.5) { "yes" } else { "no" }.to_string(),
            parsed: Some(ParseOutcome::Parsed(ParsedAnswer {
                value: AnswerValue::YesNo(rng.gen_bool(0.5)),
                raw: String::new(),
                parse_path: ParsePath::Exact,
            })),
            correct: false,
            failure: None,
            error_category: None,
            stage_artifacts: StageArtifacts::default(),
        })
        .collect()
}

/// `images` annotated images drawing 3..=8 objects from a `universe`-sized pool.
pub fn annotations(images: usize, universe: usize, seed: u64) -> Annotations {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..universe).map(|i| format!("obj{i:02}")).collect();
    (0..images)
        .map(|i| {
            let n = rng.gen_range(3..=8.min(universe / 2));
            let objs = pool.choose_multiple(&mut rng, n).cloned().collect();
            (format!("img{i:04}"), objs)
        })
        .collect()
}

/// A gradient scene of `w` x `h` pixels.
pub fn scene(w: u32, h: u32) -> image::RgbImage {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 90]))
}

/// `n` overlapping detections with elliptical masks spread across the scene.
pub fn detections(n: usize, w: u32, h: u32, seed: u64) -> DetectionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let detections = (0..n)
        .map(|i| {
            let x0 = rng.gen_range(0.0..w as f64 * 0.6);
            let y0 = rng.gen_range(0.0..h as f64 * 0.6);
            let x1 = x0 + rng.gen_range(w as f64 * 0.1..w as f64 * 0.4);
            let y1 = y0 + rng.gen_range(h as f64 * 0.1..h as f64 * 0.4);
            Detection {
                label: format!("object {i}"),
                bbox: BBox::new(x0, y0, x1, y1),
                mask: Some(ellipse(x0, y0, x1, y1, w, h)),
                score: 0.9,
            }
        })
        .collect();
    DetectionSet {
        image_id: "scene".into(),
        detections,
        backend: DetectorKind::ConditionalSegment,
        warnings: Vec::new(),
    }
}

fn ellipse(x0: f64, y0: f64, x1: f64, y1: f64, w: u32, h: u32) -> Rle {
    let (cx, cy, rx, ry) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0, (x1 - x0) / 2.0, (y1 - y0) / 2.0);
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
