use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flowplan::diffusion::{
    self, read_checkpoint, sample_video, simulator_clips, write_checkpoint, ClipConfig, ModelManifest, NoiseMode,
    Observation, ScheduleConfig, TrainConfig, UNet, UNetConfig,
};
use flowplan::exec::Execution;
use flowplan::geometry::{CameraIntrinsics, RgbdFrame, RigidTransform};
use flowplan::io::{self, GroundTruthRecord, RgbdvHeader};
use flowplan::planner::{
    self, benchmark_csv, run_benchmark, BenchmarkConfig, EpisodeConfig, EpisodeTracker, FutureFrames, PlanConfig,
    Tracker, TrajectoryRecord,
};
use flowplan::rng;
use flowplan::sceneflow::BlockMatchConfig;
use flowplan::simulator::{generate_scene, random_scene, MotionStyle, SceneParams, TASK_NAMES};
use flowplan::solver::{RansacConfig, SolveOptions, Weighting};
use serde::Serialize;
use serde_json::Value;

use crate::args::*;
use crate::{convert, CliError};

type Result<T> = std::result::Result<T, CliError>;

/// The parsed command echoed into output metadata.
fn run_config(cmd: &Command) -> Value {
    serde_json::to_value(cmd).expect("arguments serialize")
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(CliError::Usage(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    io::sibling(path, suffix)
}

pub fn run(cmd: Command) -> Result<()> {
    let config = run_config(&cmd);
    log::info!("{} {}", cmd.name(), config);
    match &cmd {
        Command::GenScene(a) => gen_scene(a, config),
        Command::TrainDiffusion(a) => train(a, config),
        Command::SampleVideo(a) => sample(a, config),
        Command::Plan(a) => plan(a, config),
        Command::RunBenchmark(a) => benchmark(a, config),
        Command::Convert(a) => convert::run(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn gen_scene(a: &GenSceneArgs, config: Value) -> Result<()> {
    require_parent(&a.out)?;
    let motion = match a.motion {
        MotionArg::Random => SceneParams::default().motion,
        MotionArg::Static => MotionStyle::Static,
        MotionArg::SlideRight => MotionStyle::Task(0),
        MotionArg::SlideLeft => MotionStyle::Task(1),
        MotionArg::Lift => MotionStyle::Task(2),
        MotionArg::Twist => MotionStyle::Task(3),
    };
    let params = SceneParams {
        width: a.width,
        height: a.height,
        num_steps: a.steps,
        motion,
        depth_noise: a.depth_noise,
        rgb_noise: a.rgb_noise,
        ..Default::default()
    };
    let scene = random_scene(a.seed, &params);
    let (frames, gt) = generate_scene(&scene).map_err(CliError::domain)?;

    io::save_rgbdv(&a.out, &frames).map_err(CliError::domain)?;
    let mut masks = Vec::with_capacity(gt.masks.len());
    for (n, m) in gt.masks.iter().enumerate() {
        let p = with_suffix(&a.out, &format!("mask-{n:03}.pgm"));
        io::save_pgm(&p, m).map_err(CliError::domain)?;
        masks.push(file_name(&p));
    }
    let tracks = with_suffix(&a.out, "tracks.trks");
    io::save_tracks(&tracks, &gt.tracks).map_err(CliError::domain)?;
    io::save_json(&with_suffix(&a.out, "intrinsics.json"), &gt.intrinsics).map_err(CliError::domain)?;
    let record = GroundTruthRecord::new(&gt, &scene, masks, file_name(&tracks));
    io::save_json(&with_suffix(&a.out, "gt.json"), &record).map_err(CliError::domain)?;
    io::save_json(&with_suffix(&a.out, "run.json"), &config).map_err(CliError::domain)?;
    println!("{}", a.out.display());
    Ok(())
}

fn mode_arg(s: &str) -> Result<NoiseMode> {
    s.parse().map_err(CliError::Usage)
}

fn train(a: &TrainArgs, config: Value) -> Result<()> {
    require_parent(&a.out)?;
    let mode = mode_arg(&a.mode)?;
    let arch = UNetConfig {
        height: a.size,
        width: a.size,
        frames: a.frames,
        base_channels: a.base_channels,
        depth: a.depth,
        num_tasks: TASK_NAMES.len(),
        ..Default::default()
    };
    let schedule_cfg = ScheduleConfig { steps: a.diffusion_steps, beta_start: a.beta_start, beta_end: a.beta_end };
    let schedule = schedule_cfg.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let clip_cfg = ClipConfig { height: a.size, width: a.size, frames: a.frames, ..Default::default() };
    let clips = simulator_clips(a.clips, rng::derive_seed(a.seed, 1), &clip_cfg).map_err(CliError::domain)?;
    let mut net = UNet::random(arch, &mut rng::seeded(rng::derive_seed(a.seed, 2))).map_err(|e| CliError::Usage(e.to_string()))?;
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        momentum: a.momentum,
        seed: rng::derive_seed(a.seed, 3),
        mode,
        ..Default::default()
    };
    let report = diffusion::train(&mut net, &clips, &schedule, &tc, Execution::Parallel).map_err(CliError::domain)?;
    log::info!("loss {:.4} -> {:.4}", report.initial_loss(tc.smoothing_window), report.final_loss());
    let manifest = ModelManifest {
        arch,
        schedule: schedule_cfg,
        mode,
        depth_range: clip_cfg.depth_range,
        task_names: TASK_NAMES.iter().map(|s| s.to_string()).collect(),
        run: config,
    };
    let mut w = BufWriter::new(File::create(&a.out).map_err(CliError::domain)?);
    write_checkpoint(&mut w, &manifest, &net).map_err(CliError::domain)?;
    w.flush().map_err(CliError::domain)?;
    io::save_json(&with_suffix(&a.out, "train.json"), &report).map_err(CliError::domain)?;
    println!("{}", serde_json::json!({"initial_loss": report.initial_loss(tc.smoothing_window), "final_loss": report.final_loss()}));
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelManifest, UNet)> {
    require_file(path, "model")?;
    let mut r = BufReader::new(File::open(path).map_err(CliError::domain)?);
    read_checkpoint(&mut r).map_err(CliError::domain)
}

fn task_index(task: &str, manifest: &ModelManifest) -> Result<usize> {
    let idx = task
        .parse::<usize>()
        .ok()
        .or_else(|| manifest.task_names.iter().position(|n| n == task || n.replace(' ', "-") == task));
    match idx {
        Some(i) if i < manifest.arch.num_tasks => Ok(i),
        _ => Err(CliError::Usage(format!("unknown task {task:?}; known: {}", manifest.task_names.join(", ")))),
    }
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    sampler_mode: NoiseMode,
    task: usize,
    seed: u64,
    run: &'a Value,
}

fn sample(a: &SampleArgs, config: Value) -> Result<()> {
    require_file(&a.observation, "observation")?;
    require_parent(&a.out)?;
    let (mut manifest, net) = load_model(&a.model)?;
    if let Some(m) = &a.mode {
        manifest.mode = mode_arg(m)?;
    }
    let task = task_index(&a.task, &manifest)?;
    let frames = io::load_rgbdv(&a.observation).map_err(CliError::domain)?;
    let obs_frame = frames.first().ok_or_else(|| CliError::Domain("observation stack is empty".into()))?;
    let obs = Observation::from_frame(obs_frame, manifest.depth_range);
    let schedule = manifest.schedule.build().map_err(CliError::domain)?;
    let video = sample_video(&net, &obs, task, &schedule, manifest.mode, &mut rng::seeded(a.seed)).map_err(CliError::domain)?;
    io::save_rgbdv(&a.out, &video.to_frames(manifest.depth_range)).map_err(CliError::domain)?;
    let meta = SampleMeta { sampler_mode: manifest.mode, task, seed: a.seed, run: &config };
    io::save_json(&with_suffix(&a.out, "run.json"), &meta).map_err(CliError::domain)?;
    println!("{}", a.out.display());
    Ok(())
}

fn oracle_tracks(frames: &Path) -> Result<flowplan::sceneflow::TrackSet> {
    let sidecar = with_suffix(frames, "gt.json");
    require_file(&sidecar, "ground-truth sidecar")?;
    let gt: GroundTruthRecord = io::load_json(&sidecar).map_err(CliError::domain)?;
    let path = sidecar.with_file_name(&gt.tracks);
    io::load_tracks(&path).map_err(CliError::domain)
}

#[derive(Serialize)]
struct TrajectoryFile<'a> {
    #[serde(flatten)]
    trajectory: TrajectoryRecord,
    run: &'a Value,
}

fn plan(a: &PlanArgs, config: Value) -> Result<()> {
    require_file(&a.frames, "frames")?;
    require_file(&a.mask, "mask")?;
    require_file(&a.intrinsics, "intrinsics")?;
    require_parent(&a.out)?;
    for p in [&a.tracks, &a.extrinsic, &a.grasp_candidates].into_iter().flatten() {
        require_file(p, "input")?;
    }

    let frames = io::load_rgbdv(&a.frames).map_err(CliError::domain)?;
    let mask = io::load_pgm(&a.mask).map_err(CliError::domain)?;
    let k: CameraIntrinsics = io::load_json(&a.intrinsics).map_err(CliError::domain)?;
    let observation: &RgbdFrame = frames.first().ok_or_else(|| CliError::Domain("frame stack is empty".into()))?;

    let tracker = match a.tracker {
        TrackerArg::Oracle => Tracker::Oracle(oracle_tracks(&a.frames)?),
        TrackerArg::External => {
            let p = a.tracks.as_ref().ok_or_else(|| CliError::Usage("--tracker external needs --tracks".into()))?;
            Tracker::External(io::load_tracks(p).map_err(CliError::domain)?)
        }
        TrackerArg::Blockmatch => {
            let cfg = BlockMatchConfig {
                window: a.window,
                search_radius: a.search_radius,
                min_zncc: a.min_zncc,
                subpixel: a.subpixel,
            };
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Tracker::BlockMatch(cfg)
        }
    };

    let mut pc = PlanConfig::new(k);
    if let Some(p) = &a.extrinsic {
        let m: [f64; 16] = io::load_json(p).map_err(CliError::domain)?;
        pc.extrinsic = RigidTransform::from_row_major(&m).map_err(CliError::domain)?;
    }
    pc.solve = SolveOptions {
        robust: a.robust,
        ransac: RansacConfig { iterations: a.ransac_iterations, threshold: a.ransac_threshold, seed: a.ransac_seed },
        weighting: if a.depth_weighting { Weighting::InverseDepthSquared } else { Weighting::Uniform },
    };
    pc.grasp.max_width = a.max_width;
    pc.grasp.count = a.grasp_count;
    pc.grasp.voxel_size = a.voxel;
    if let Some(p) = &a.grasp_candidates {
        pc.candidates = Some(io::load_candidates(p).map_err(CliError::domain)?);
    }
    pc.mask_source = format!("file:{}", file_name(&a.mask));
    pc.dump_dir = a.dump_intermediates.clone();

    let loaded;
    let future = match &a.model {
        Some(m) => {
            let seed = a.seed.ok_or_else(|| CliError::Usage("--model needs --seed".into()))?;
            loaded = load_model(m)?;
            let task = task_index(a.task.as_deref().unwrap_or("0"), &loaded.0)?;
            FutureFrames::Generated { net: &loaded.1, manifest: &loaded.0, task, seed }
        }
        None => {
            if frames.len() < 2 {
                return Err(CliError::Domain("frame stack has no future frames; pass --model to generate them".into()));
            }
            FutureFrames::Provided(frames[1..].to_vec())
        }
    };

    let out = planner::plan(observation, &mask, future, &tracker, &pc).map_err(CliError::domain)?;
    let file = TrajectoryFile { trajectory: out.trajectory.to_record(), run: &config };
    io::save_json(&a.out, &file).map_err(CliError::domain)?;
    println!("{}", a.out.display());
    Ok(())
}

fn benchmark(a: &BenchmarkArgs, config: Value) -> Result<()> {
    if let Some(p) = &a.out {
        require_parent(p)?;
    }
    let tracker = match a.tracker {
        EpisodeTrackerArg::Oracle => EpisodeTracker::Oracle,
        EpisodeTrackerArg::Noisy => EpisodeTracker::NoisyOracle { sigma: a.sigma },
        EpisodeTrackerArg::Blockmatch => EpisodeTracker::BlockMatch(BlockMatchConfig::default()),
        EpisodeTrackerArg::Corrupted => EpisodeTracker::Corrupted,
    };
    let cfg = BenchmarkConfig {
        episodes: a.episodes,
        seed: a.seed,
        scene: SceneParams { width: a.width, height: a.height, num_steps: a.steps, ..Default::default() },
        episode: EpisodeConfig {
            tracker,
            max_replans: a.max_replans,
            translation_tolerance: a.translation_tolerance,
            rotation_tolerance: a.rotation_tolerance_deg.to_radians(),
            solve: if a.robust { SolveOptions::robust() } else { SolveOptions::default() },
            ..Default::default()
        },
    };
    let rows = run_benchmark(&cfg);
    let csv = benchmark_csv(&rows);
    let ok = rows.iter().filter(|r| r.success).count();
    log::info!("{ok}/{} episodes succeeded", rows.len());
    match &a.out {
        Some(p) => {
            std::fs::write(p, csv).map_err(CliError::domain)?;
            io::save_json(&with_suffix(p, "run.json"), &config).map_err(CliError::domain)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Header {
    Rgbdv(RgbdvHeader),
    Tracks { points: usize, frames: usize, depth_hints: bool },
    Flow { points: usize, steps: usize },
    Checkpoint { manifest: ModelManifest, parameters: usize },
    Mask { width: u32, height: u32, pixels: usize },
    Json { value: Value },
}

fn inspect(a: &InspectArgs) -> Result<()> {
    require_file(&a.path, "input")?;
    let mut magic = [0u8; 4];
    let n = File::open(&a.path).and_then(|mut f| f.read(&mut magic)).map_err(CliError::domain)?;
    let open = || File::open(&a.path).map(BufReader::new).map_err(CliError::domain);
    let header = match &magic[..n] {
        b"RGBD" => Header::Rgbdv(io::read_rgbdv_header(&mut open()?).map_err(CliError::domain)?),
        b"TRKS" => {
            let t = io::load_tracks(&a.path).map_err(CliError::domain)?;
            Header::Tracks { points: t.num_points(), frames: t.num_frames(), depth_hints: t.has_depth_hints() }
        }
        b"SFLW" => {
            let f = io::load_flow(&a.path).map_err(CliError::domain)?;
            Header::Flow { points: f.num_points(), steps: f.num_steps() }
        }
        b"DNSR" => {
            let (manifest, net) = read_checkpoint(&mut open()?).map_err(CliError::domain)?;
            Header::Checkpoint { manifest, parameters: net.num_params() }
        }
        m if m.starts_with(b"P5") => {
            let mask = io::load_pgm(&a.path).map_err(CliError::domain)?;
            Header::Mask { width: mask.width(), height: mask.height(), pixels: mask.pixel_count() }
        }
        _ => match io::load_json::<Value>(&a.path) {
            Ok(value) => Header::Json { value },
            Err(_) => return Err(CliError::Domain(format!("{}: unrecognized file type", a.path.display()))),
        },
    };
    println!("{}", serde_json::to_string_pretty(&header).map_err(CliError::domain)?);
    Ok(())
}
