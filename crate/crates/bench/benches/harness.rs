use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use vtprompt_bench::{annotations, detections, pope_records, scene};
use vtprompt_core::dataset::{build_cooccurrence, build_pope_queries, PopeSetting, TaskKind};
use vtprompt_core::render::{render_vprompt, RenderConfig, VPromptStyle};
use vtprompt_core::scoring::pope_metrics;
use vtprompt_core::tprompt::parse_answer;

fn bench_pope_metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("pope_metrics");
    for n in [100, 1000, 10_000] {
        let records = pope_records(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &records, |b, r| {
            b.iter(|| pope_metrics(black_box(r)).unwrap())
        });
    }
    group.finish();
}

fn bench_render(c: &mut Criterion) {
    let (w, h) = (640, 480);
    let source = scene(w, h);
    let dets = detections(8, w, h, 2);
    let cfg = RenderConfig::default();
    let mut group = c.benchmark_group("render_vprompt");
    for (name, style) in VPromptStyle::PRESETS {
        group.bench_function(name, |b| {
            b.iter(|| render_vprompt(black_box(&source), "scene", &dets, style, &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_pope_builder(c: &mut Criterion) {
    let ann = annotations(500, 50, 3);
    let stats = build_cooccurrence(&ann);
    c.bench_function("build_cooccurrence/500", |b| b.iter(|| build_cooccurrence(black_box(&ann))));
    let mut group = c.benchmark_group("build_pope_queries");
    for setting in PopeSetting::ALL {
        group.bench_function(setting.to_string(), |b| {
            b.iter(|| build_pope_queries(black_box(&ann), setting, &stats, 3, 0).unwrap())
        });
    }
    group.finish();
}

fn bench_parse_answer(c: &mut Criterion) {
    let task = TaskKind::Mmb {
        name: "object_localization".into(),
    };
    let options = vec![
        ("A".to_string(), "top left".to_string()),
        ("B".to_string(), "bottom right".to_string()),
    ];
    let reply = "Marker 2 outlines the cat near the lower edge of the frame, so it sits bottom right.\nAnswer: B";
    c.bench_function("parse_answer/mmb", |b| b.iter(|| parse_answer(black_box(reply), &task, &options)));
}

criterion_group!(benches, bench_pope_metrics, bench_render, bench_pope_builder, bench_parse_answer);
criterion_main!(benches);
