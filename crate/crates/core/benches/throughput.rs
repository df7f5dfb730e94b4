//! Sequential vs parallel execution of the data-parallel paths: interval IoU
//! scoring, adaptive token reduction over many videos, and batched backend
//! calls against a mock with fixed latency.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidlang::budget::CaptionSourceError;
use vidlang::exec;
use vidlang::gateway::{execute_batch, BackendEndpoint, LlmRequest, MockRegistry, ModelClient, RetryPolicy, Role};
use vidlang::manifest::{ClipCaption, Interval, SubtitleSegment};
use vidlang::{adaptive_token_reduction, interval_iou, BudgetParams, ClipPlan, ExecMode, TokenCounter, VideoManifest};

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn random_set(rng: &mut ChaCha8Rng) -> Vec<Interval> {
    (0..rng.random_range(1..=5))
        .map(|_| {
            let s = rng.random_range(0.0..3_500.0);
            Interval::new(s, s + rng.random_range(1.0..100.0))
        })
        .collect()
}

fn iou_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<_> = (0..50_000).map(|_| (random_set(&mut rng), random_set(&mut rng))).collect();
    let mut g = c.benchmark_group("iou_scoring");
    g.throughput(Throughput::Elements(pairs.len() as u64));
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &pairs, |b, pairs| {
            b.iter(|| exec::map(mode, pairs, |(p, q)| interval_iou(p, q)).into_iter().sum::<f64>())
        });
    }
    g.finish();
}

fn atr_sweep(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let videos: Vec<(VideoManifest, Vec<SubtitleSegment>)> = (0..64)
        .map(|i| {
            let duration = rng.random_range(600.0..7_200.0);
            let subs = (0..rng.random_range(50..400))
                .map(|k| {
                    let s = k as f64 * 9.0;
                    SubtitleSegment::new(s, s + 4.0, "and then we carried the crates down to the harbour")
                })
                .filter(|s| s.end <= duration)
                .collect();
            let manifest = VideoManifest {
                video_id: format!("v{i}"),
                media_uri: format!("v{i}.mp4"),
                duration,
                questions: vec![],
                category_labels: BTreeMap::new(),
            };
            (manifest, subs)
        })
        .collect();
    let source = |_: &VideoManifest, plan: &ClipPlan| -> Result<Vec<ClipCaption>, CaptionSourceError> {
        Ok(plan.clips.iter().map(|&(s, e)| ClipCaption::new(s, e, "A man loads wooden crates onto a small boat.")).collect())
    };
    let params = BudgetParams { context_limit: 8_000, prompt_overhead: 300, ..BudgetParams::default() };
    let counter = TokenCounter::Heuristic;
    let mut g = c.benchmark_group("atr_sweep");
    g.sample_size(10);
    g.throughput(Throughput::Elements(videos.len() as u64));
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &videos, |b, videos| {
            b.iter(|| {
                exec::map(mode, videos, |(v, subs)| {
                    adaptive_token_reduction(v, subs, &source, &counter, &params).map(|(t, _)| t.token_count).unwrap_or(0)
                })
            })
        });
    }
    g.finish();
}

fn batched_calls(c: &mut Criterion) {
    let reg = MockRegistry::new().with_latency(Duration::from_millis(1));
    let ep = BackendEndpoint::mock(Role::Llm, "echo");
    let client = ModelClient::new(ep.clone(), reg.transport(&ep).unwrap()).with_retry(RetryPolicy::immediate());
    let requests: Vec<LlmRequest> = (0..256).map(|i| LlmRequest::new(format!("prompt {i}"), format!("r{i}"))).collect();
    let mut g = c.benchmark_group("execute_batch");
    g.sample_size(10);
    g.throughput(Throughput::Elements(requests.len() as u64));
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &requests, |b, reqs| {
            b.iter(|| black_box(execute_batch(&client, reqs, 64, mode).unwrap().len()))
        });
    }
    g.finish();
}

criterion_group!(benches, iou_scoring, atr_sweep, batched_calls);
criterion_main!(benches);
