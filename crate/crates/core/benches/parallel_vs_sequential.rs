//! Data-parallel core vs the sequential fallback on the two hot loops:
//! a diffusion training batch and a batch of oracle episodes.
//!
//! Build with `--no-default-features` to measure the fallback alone; with
//! the default `parallel` feature both modes are measured side by side.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowplan::diffusion::{draw_noise, loss_and_grad, simulator_clips, ClipConfig, NoiseMode, ScheduleConfig, UNet, UNetConfig};
use flowplan::exec::{map_indexed_with, Execution};
use flowplan::planner::{run_episode, EpisodeConfig};
use flowplan::rng;
use flowplan::simulator::{random_scene, SceneParams};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn training_batch(c: &mut Criterion) {
    let clips = simulator_clips(8, 1, &ClipConfig::default()).unwrap();
    let schedule = ScheduleConfig::default().build().unwrap();
    let net = UNet::random(UNetConfig::default(), &mut rng::seeded(0)).unwrap();
    let batch: Vec<_> = clips.iter().collect();
    let items = draw_noise(&batch, &schedule, &mut rng::seeded(2));
    let mut g = c.benchmark_group("loss_and_grad_batch8");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| loss_and_grad(&net, &items, &schedule, NoiseMode::Standard, mode).unwrap())
        });
    }
    g.finish();
}

fn episodes(c: &mut Criterion) {
    let params = SceneParams { num_steps: 4, ..Default::default() };
    let scenes: Vec<_> = (0..4).map(|i| random_scene(rng::derive_seed(3, i), &params)).collect();
    let cfg = EpisodeConfig::default();
    let mut g = c.benchmark_group("oracle_episodes4");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_indexed_with(mode, scenes.len(), |i| run_episode(&scenes[i], &cfg).unwrap().success))
        });
    }
    g.finish();
}

criterion_group!(benches, training_batch, episodes);
criterion_main!(benches);
