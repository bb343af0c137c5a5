use super::*;
use crate::exec::Execution;

fn mini() -> UNetConfig {
    UNetConfig { height: 8, width: 8, frames: 2, base_channels: 3, depth: 1, embed_dim: 4, num_tasks: 2 }
}

fn random_net(cfg: UNetConfig, seed: u64) -> UNet {
    UNet::random(cfg, &mut rng::seeded(seed)).unwrap()
}

fn random_obs(cfg: &UNetConfig, seed: u64) -> Observation {
    let mut r = rng::seeded(seed);
    let mut o = Observation::zeros(cfg.height, cfg.width);
    o.data.iter_mut().for_each(|v| *v = r.random_range(0.0..1.0));
    o
}

fn toy_clips(cfg: &UNetConfig, n: usize, seed: u64) -> Vec<Clip> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|i| {
            let mut video = VideoTensor::zeros(cfg.height, cfg.width, cfg.frames);
            video.data.iter_mut().for_each(|v| *v = r.random_range(0.0..1.0));
            Clip { video, observation: random_obs(cfg, seed + 100 + i as u64), task: i % cfg.num_tasks }
        })
        .collect()
}

#[test]
fn zero_weights_give_zero_output() {
    let cfg = UNetConfig::default();
    let net = UNet::zeros(cfg).unwrap();
    let x = VideoTensor::standard_normal(16, 16, 4, &mut rng::seeded(1));
    let out = net.forward(&x, &random_obs(&cfg, 2), 3, 17).unwrap();
    assert!(out.data.iter().all(|v| *v == 0.0));
}

#[test]
fn output_shape_matches_input() {
    for cfg in [UNetConfig::default(), mini(), UNetConfig { depth: 3, ..UNetConfig::default() }] {
        let net = random_net(cfg, 3);
        let x = VideoTensor::standard_normal(cfg.height, cfg.width, cfg.frames, &mut rng::seeded(4));
        let out = net.forward(&x, &random_obs(&cfg, 5), 0, 1).unwrap();
        assert!(out.same_shape(&x));
        assert!(out.is_finite());
    }
}

#[test]
fn shape_errors() {
    let cfg = mini();
    let net = random_net(cfg, 1);
    let wrong = VideoTensor::zeros(8, 8, 3);
    assert!(matches!(net.forward(&wrong, &random_obs(&cfg, 1), 0, 1), Err(DiffusionError::ShapeMismatch(_))));
    let x = VideoTensor::zeros(8, 8, 2);
    assert!(matches!(net.forward(&x, &Observation::zeros(4, 4), 0, 1), Err(DiffusionError::ShapeMismatch(_))));
    assert!(matches!(net.forward(&x, &random_obs(&cfg, 1), 2, 1), Err(DiffusionError::ShapeMismatch(_))));
    assert!(UNet::zeros(UNetConfig { height: 7, ..mini() }).is_err());
}

#[test]
fn parameter_blocks_tile_the_vector() {
    let net = random_net(UNetConfig::default(), 0);
    let mut end = 0;
    for b in net.blocks() {
        assert_eq!(b.offset, end);
        end += b.len();
    }
    assert_eq!(end, net.num_params());
    assert_eq!(net.blocks().first().unwrap().name, "task_table");
    assert_eq!(net.blocks().last().unwrap().name, "head.b");
}

#[test]
fn every_parameter_passes_gradient_check() {
    let cfg = mini();
    let mut net = random_net(cfg, 7);
    // Non-zero biases so their gradients are exercised away from zero.
    let mut r = rng::seeded(8);
    for b in net.blocks().to_vec() {
        if b.name.ends_with(".b") {
            net.params_mut()[b.range()].iter_mut().for_each(|p| *p = r.random_range(-0.3..0.3));
        }
    }
    let x = VideoTensor::standard_normal(8, 8, 2, &mut rng::seeded(9));
    let all: Vec<usize> = (0..net.num_params()).collect();
    let res = gradient_check(&net, &x, &random_obs(&cfg, 10), 1, 5, &all, 1e-5).unwrap();
    let bad: Vec<_> = res.iter().filter(|e| !e.passes(1e-4, 1e-6)).collect();
    assert!(bad.is_empty(), "{} of {} failed, first {:?}", bad.len(), res.len(), bad.first());
    let blocks: std::collections::BTreeSet<_> = res.iter().map(|e| e.block.clone()).collect();
    assert_eq!(blocks.len(), net.blocks().len());
}

#[test]
fn noise_limits() {
    let s_small = NoiseSchedule::new(vec![1e-12]).unwrap();
    let s_big = NoiseSchedule::new(vec![1.0 - 1e-12]).unwrap();
    let mut r = rng::seeded(2);
    let clean = VideoTensor::standard_normal(4, 4, 2, &mut r);
    let eps = VideoTensor::standard_normal(4, 4, 2, &mut r);
    let a = add_noise(&clean, &eps, 1, &s_small, NoiseMode::Literal).unwrap();
    assert!(a.data.iter().zip(&clean.data).all(|(x, c)| (x - c).abs() < 1e-5));
    let zero = VideoTensor::zeros(4, 4, 2);
    let b = add_noise(&zero, &eps, 1, &s_big, NoiseMode::Literal).unwrap();
    assert!(b.data.iter().zip(&eps.data).all(|(x, e)| (x - e).abs() < 1e-5));
    assert!(add_noise(&clean, &eps, 2, &s_small, NoiseMode::Literal).is_err());
    assert!(add_noise(&clean, &VideoTensor::zeros(4, 4, 3), 1, &s_small, NoiseMode::Literal).is_err());
}

#[test]
fn corruption_variance_matches_beta() {
    let sched = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
    let k = 30;
    let zero = VideoTensor::zeros(10, 10, 100);
    let eps = VideoTensor::standard_normal(10, 10, 100, &mut rng::seeded(5));
    let x = add_noise(&zero, &eps, k, &sched, NoiseMode::Literal).unwrap();
    let n = x.len() as f64;
    let mean = x.data.iter().sum::<f64>() / n;
    let var = x.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / sched.beta(k) - 1.0).abs() < 0.05, "var {var} beta {}", sched.beta(k));
}

#[test]
fn cumulative_schedule_destroys_signal() {
    let sched = ScheduleConfig::default().build().unwrap();
    let (s, n) = noise_coefficients(sched.steps(), &sched, NoiseMode::Standard);
    assert!(s * s / (n * n) < 0.01);
    assert!(NoiseSchedule::new(vec![0.0]).is_err());
    assert!(NoiseSchedule::new(vec![]).is_err());
}

#[test]
fn oracle_denoiser_has_zero_loss() {
    let cfg = mini();
    let clips = toy_clips(&cfg, 1, 3);
    let sched = ScheduleConfig::default().build().unwrap();
    for mode in [NoiseMode::Literal, NoiseMode::Standard] {
        let items = draw_noise(&[&clips[0]], &sched, &mut rng::seeded(4));
        let oracle = OracleDenoiser { clean: &clips[0].video, schedule: &sched, mode };
        assert!(batch_loss(&oracle, &items, &sched, mode).unwrap() < 1e-20);
    }
}

#[test]
fn loss_is_reproducible_and_order_invariant() {
    let cfg = mini();
    let net = random_net(cfg, 11);
    let clips = toy_clips(&cfg, 5, 12);
    let refs: Vec<&Clip> = clips.iter().collect();
    let sched = ScheduleConfig::default().build().unwrap();
    let a = train_step(&net, &refs, &sched, NoiseMode::Literal, &mut rng::seeded(13)).unwrap();
    let b = train_step(&net, &refs, &sched, NoiseMode::Literal, &mut rng::seeded(13)).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);

    let items = draw_noise(&refs, &sched, &mut rng::seeded(14));
    let mut rev = items.clone();
    rev.reverse();
    let (l1, _) = loss_and_grad(&net, &items, &sched, NoiseMode::Literal, Execution::Parallel).unwrap();
    let (l2, _) = loss_and_grad(&net, &rev, &sched, NoiseMode::Literal, Execution::Sequential).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    assert!((batch_loss(&net, &items, &sched, NoiseMode::Literal).unwrap() - l1).abs() < 1e-12);
}

#[test]
fn parallel_and_sequential_gradients_agree_bitwise() {
    let cfg = mini();
    let net = random_net(cfg, 21);
    let clips = toy_clips(&cfg, 4, 22);
    let refs: Vec<&Clip> = clips.iter().collect();
    let sched = ScheduleConfig::default().build().unwrap();
    let items = draw_noise(&refs, &sched, &mut rng::seeded(23));
    let a = loss_and_grad(&net, &items, &sched, NoiseMode::Standard, Execution::Parallel).unwrap();
    let b = loss_and_grad(&net, &items, &sched, NoiseMode::Standard, Execution::Sequential).unwrap();
    assert_eq!(a, b);
}

#[test]
fn temporal_shift_covariance_on_interior_frames() {
    let cfg = UNetConfig { frames: 16, ..mini() };
    let net = random_net(cfg, 31);
    let obs = random_obs(&cfg, 32);
    let x = VideoTensor::standard_normal(8, 8, 16, &mut rng::seeded(33));
    let frame = 8 * 8 * VIDEO_CHANNELS;
    let mut shifted = x.clone();
    shifted.data.copy_within(frame.., 0);
    let a = net.forward(&x, &obs, 0, 9).unwrap();
    let b = net.forward(&shifted, &obs, 0, 9).unwrap();
    // Three blocks, each reaching one frame further in time.
    let reach = 2 * cfg.depth + 1;
    for n in reach..16 - 1 - reach {
        for i in 0..frame {
            assert!((b.data[n * frame + i] - a.data[(n + 1) * frame + i]).abs() < 1e-12, "frame {n}");
        }
    }
}

#[test]
fn one_step_zero_model_returns_initial_noise() {
    let cfg = mini();
    let net = UNet::zeros(cfg).unwrap();
    let sched = NoiseSchedule::new(vec![0.1]).unwrap();
    let obs = random_obs(&cfg, 1);
    let got = sample_video(&net, &obs, 0, &sched, NoiseMode::Literal, &mut rng::seeded(5)).unwrap();
    let want = VideoTensor::standard_normal(8, 8, 2, &mut rng::seeded(5));
    assert_eq!(got, want);
}

#[test]
fn sampling_is_deterministic() {
    let cfg = mini();
    let net = random_net(cfg, 2);
    let sched = NoiseSchedule::linear(10, 1e-4, 0.2).unwrap();
    let obs = random_obs(&cfg, 3);
    for mode in [NoiseMode::Literal, NoiseMode::Standard] {
        let a = sample_video(&net, &obs, 1, &sched, mode, &mut rng::seeded(9));
        let b = sample_video(&net, &obs, 1, &sched, mode, &mut rng::seeded(9));
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
            _ => panic!("runs disagree"),
        }
    }
}

#[test]
fn checkpoint_roundtrip() {
    let cfg = mini();
    let net = random_net(cfg, 4);
    let manifest = ModelManifest {
        arch: cfg,
        schedule: ScheduleConfig::default(),
        mode: NoiseMode::Literal,
        depth_range: (0.0, 1.5),
        task_names: vec!["a".into(), "b".into()],
        run: serde_json::json!({"seed": 3}),
    };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &manifest, &net).unwrap();
    assert_eq!(&buf[..4], b"DNSR");
    let (m2, net2) = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(m2, manifest);
    for (a, b) in net.params().iter().zip(net2.params()) {
        assert_eq!(*b, *a as f32 as f64);
    }
    buf[0] = b'X';
    assert!(read_checkpoint(&mut buf.as_slice()).is_err());
}

#[test]
fn short_training_run_is_deterministic_and_learns() {
    let cfg = UNetConfig { base_channels: 8, embed_dim: 8, ..mini() };
    // Videos that repeat their observation, so the conditioning explains them.
    let clips: Vec<Clip> = toy_clips(&cfg, 8, 40)
        .into_iter()
        .map(|mut c| {
            c.video.data = c.observation.data.repeat(cfg.frames);
            c
        })
        .collect();
    let sched = ScheduleConfig::default().build().unwrap();
    let tc = TrainConfig {
        steps: 400,
        batch_size: 4,
        lr: 2e-2,
        seed: 3,
        smoothing_window: 10,
        mode: NoiseMode::Standard,
        ..Default::default()
    };
    let held: Vec<&Clip> = clips.iter().cycle().take(64).collect();
    let eval_items = draw_noise(&held, &sched, &mut rng::seeded(99));
    let eval = |n: &UNet| loss_and_grad(n, &eval_items, &sched, NoiseMode::Standard, Execution::Sequential).unwrap().0;

    let mut a = random_net(cfg, 41);
    let mut b = a.clone();
    let before = eval(&a);
    let ra = train(&mut a, &clips, &sched, &tc, Execution::Parallel).unwrap();
    let rb = train(&mut b, &clips, &sched, &tc, Execution::Sequential).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    let after = eval(&a);
    assert!(after < 0.8 * before, "{before} -> {after}");
}

#[test]
fn frames_roundtrip_through_tensor() {
    let clips = simulator_clips(2, 5, &ClipConfig::default()).unwrap();
    assert_eq!(clips.len(), 2);
    assert_eq!(clips[1].task, 1);
    let frames = clips[0].video.to_frames((0.0, 1.5));
    let back = VideoTensor::from_frames(&frames, (0.0, 1.5)).unwrap();
    for (a, b) in back.data.iter().zip(&clips[0].video.data) {
        assert!((a - b).abs() < 1e-6);
    }
}

use rand::Rng;
