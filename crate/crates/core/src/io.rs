//! File formats. All binary layouts are little-endian.
//!
//! - RGBDV frame stacks: `"RGBD"`, u32 version, u32 H, u32 W, u32 N, then per
//!   frame H·W·3 f32 rgb, H·W f32 depth, H·W u8 validity.
//! - Masks: binary PGM (`P5`, maxval 255, 255 = selected).
//! - Tracks: `"TRKS"`, u32 M, u32 N+1, f32 positions (point-major, `u v`
//!   pairs), u8 visibility, optionally followed by `"DPTH"` and f64 depth
//!   hints in the same layout.
//! - Scene flow: `"SFLW"`, u32 M, u32 N, f32 displacements (point-major,
//!   `x y z`), u8 validity.
//! - JSON: transform sequences, grasp candidates, manifests, ground truth.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PartMask, RgbdFrame, RigidTransform};
use crate::grasp::GraspCandidate;
use crate::sceneflow::{SceneFlowField, TrackSet};
use crate::simulator::{GroundTruth, SyntheticScene};
use crate::solver::TransformFitResult;

pub const RGBDV_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn open(path: &Path) -> Result<BufReader<File>, FormatError> {
    File::open(path).map(BufReader::new).map_err(|source| FormatError::Io { path: path.to_owned(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>, FormatError> {
    File::create(path).map(BufWriter::new).map_err(|source| FormatError::Io { path: path.to_owned(), source })
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), FormatError> {
    w.flush().map_err(|source| FormatError::Io { path: path.to_owned(), source })
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], FormatError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, FormatError> {
    Ok(u32::from_le_bytes(read_exact::<4, _>(r)?))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, FormatError> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, FormatError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_bools<R: Read>(r: &mut R, n: usize) -> Result<Vec<bool>, FormatError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf.into_iter().map(|b| b != 0).collect())
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(), FormatError> {
    let found = read_exact::<4, _>(r)?;
    if &found != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, xs: impl IntoIterator<Item = f32>) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_bools<W: Write>(w: &mut W, xs: &[bool]) -> std::io::Result<()> {
    let bytes: Vec<u8> = xs.iter().map(|&b| b as u8).collect();
    w.write_all(&bytes)
}

/// Header of an RGBDV stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RgbdvHeader {
    pub version: u32,
    pub height: u32,
    pub width: u32,
    pub frames: u32,
}

pub fn read_rgbdv_header<R: Read>(r: &mut R) -> Result<RgbdvHeader, FormatError> {
    expect_magic(r, b"RGBD")?;
    let version = read_u32(r)?;
    if version != RGBDV_VERSION {
        return Err(FormatError::Version(version));
    }
    let (height, width, frames) = (read_u32(r)?, read_u32(r)?, read_u32(r)?);
    Ok(RgbdvHeader { version, height, width, frames })
}

pub fn write_rgbdv<W: Write>(w: &mut W, frames: &[RgbdFrame]) -> Result<(), FormatError> {
    let (width, height) = frames.first().map_or((0, 0), |f| (f.width, f.height));
    if frames.iter().any(|f| f.width != width || f.height != height) {
        return Err(FormatError::Malformed("frames differ in size".into()));
    }
    w.write_all(b"RGBD")?;
    for v in [RGBDV_VERSION, height, width, frames.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for f in frames {
        write_f32s(w, f.rgb.iter().flatten().copied())?;
        write_f32s(w, f.depth.iter().copied())?;
        write_bools(w, &f.valid)?;
    }
    Ok(())
}

pub fn read_rgbdv<R: Read>(r: &mut R) -> Result<Vec<RgbdFrame>, FormatError> {
    let h = read_rgbdv_header(r)?;
    let n = h.width as usize * h.height as usize;
    let mut frames = Vec::with_capacity(h.frames as usize);
    for _ in 0..h.frames {
        let rgb: Vec<[f32; 3]> = read_f32s(r, 3 * n)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let depth = read_f32s(r, n)?;
        let valid = read_bools(r, n)?;
        frames.push(
            RgbdFrame::new(h.width, h.height, rgb, depth, valid).map_err(|e| FormatError::Malformed(e.to_string()))?,
        );
    }
    Ok(frames)
}

pub fn save_rgbdv(path: &Path, frames: &[RgbdFrame]) -> Result<(), FormatError> {
    let mut w = create(path)?;
    write_rgbdv(&mut w, frames)?;
    finish(w, path)
}

pub fn load_rgbdv(path: &Path) -> Result<Vec<RgbdFrame>, FormatError> {
    read_rgbdv(&mut open(path)?)
}

pub fn write_pgm<W: Write>(w: &mut W, mask: &PartMask) -> Result<(), FormatError> {
    write!(w, "P5\n{} {}\n255\n", mask.width(), mask.height())?;
    let bytes: Vec<u8> = mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads 8-bit binary PGM; pixels at or above half of maxval are selected.
pub fn read_pgm<R: Read>(r: &mut R) -> Result<PartMask, FormatError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut pos = 0;
    let mut token = || -> Result<String, FormatError> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Malformed("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(FormatError::BadMagic { expected: "P5".into(), found: magic });
    }
    let num = |s: String| s.parse::<u32>().map_err(|_| FormatError::Malformed(format!("bad PGM number {s:?}")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(FormatError::Malformed(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let body = &data[pos + 1..];
    let n = width as usize * height as usize;
    if body.len() < n {
        return Err(FormatError::Malformed(format!("PGM raster has {} bytes, expected {n}", body.len())));
    }
    let mask = body[..n].iter().map(|&b| 2 * b as u32 >= maxval).collect();
    PartMask::new(width, height, mask).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn save_pgm(path: &Path, mask: &PartMask) -> Result<(), FormatError> {
    let mut w = create(path)?;
    write_pgm(&mut w, mask)?;
    finish(w, path)
}

pub fn load_pgm(path: &Path) -> Result<PartMask, FormatError> {
    read_pgm(&mut open(path)?)
}

pub fn write_tracks<W: Write>(w: &mut W, tracks: &TrackSet) -> Result<(), FormatError> {
    w.write_all(b"TRKS")?;
    w.write_all(&(tracks.num_points() as u32).to_le_bytes())?;
    w.write_all(&(tracks.num_frames() as u32).to_le_bytes())?;
    write_f32s(w, tracks.positions().iter().flat_map(|p| [p[0] as f32, p[1] as f32]))?;
    write_bools(w, tracks.visibility())?;
    if let Some(d) = tracks.depth_hints() {
        w.write_all(b"DPTH")?;
        for x in d {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tracks<R: Read>(r: &mut R) -> Result<TrackSet, FormatError> {
    expect_magic(r, b"TRKS")?;
    let m = read_u32(r)? as usize;
    let frames = read_u32(r)? as usize;
    let n = m * frames;
    let positions: Vec<[f64; 2]> = read_f32s(r, 2 * n)?.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect();
    let visible = read_bools(r, n)?;
    let tracks = TrackSet::new(m, frames, positions, visible).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let mut tag = [0u8; 4];
    match r.read(&mut tag[..1])? {
        0 => Ok(tracks),
        _ => {
            r.read_exact(&mut tag[1..])?;
            if &tag != b"DPTH" {
                return Err(FormatError::Malformed(format!("unknown track trailer {:?}", String::from_utf8_lossy(&tag))));
            }
            let d = read_f64s(r, n)?;
            tracks.with_depth(d).map_err(|e| FormatError::Malformed(e.to_string()))
        }
    }
}

pub fn save_tracks(path: &Path, tracks: &TrackSet) -> Result<(), FormatError> {
    let mut w = create(path)?;
    write_tracks(&mut w, tracks)?;
    finish(w, path)
}

pub fn load_tracks(path: &Path) -> Result<TrackSet, FormatError> {
    read_tracks(&mut open(path)?)
}

pub fn write_flow<W: Write>(w: &mut W, flow: &SceneFlowField) -> Result<(), FormatError> {
    w.write_all(b"SFLW")?;
    w.write_all(&(flow.num_points() as u32).to_le_bytes())?;
    w.write_all(&(flow.num_steps() as u32).to_le_bytes())?;
    write_f32s(w, flow.displacements().iter().flat_map(|d| [d.x as f32, d.y as f32, d.z as f32]))?;
    write_bools(w, flow.validity())?;
    Ok(())
}

pub fn read_flow<R: Read>(r: &mut R) -> Result<SceneFlowField, FormatError> {
    expect_magic(r, b"SFLW")?;
    let m = read_u32(r)? as usize;
    let steps = read_u32(r)? as usize;
    let n = m * steps;
    let disp =
        read_f32s(r, 3 * n)?.chunks_exact(3).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
    let valid = read_bools(r, n)?;
    SceneFlowField::new(m, steps, disp, valid).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn save_flow(path: &Path, flow: &SceneFlowField) -> Result<(), FormatError> {
    let mut w = create(path)?;
    write_flow(&mut w, flow)?;
    finish(w, path)
}

pub fn load_flow(path: &Path) -> Result<SceneFlowField, FormatError> {
    read_flow(&mut open(path)?)
}

pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    finish(w, path)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    Ok(serde_json::from_reader(open(path)?)?)
}

/// One entry of a serialized transform sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub step: usize,
    pub matrix: [f64; 16],
    pub rms_residual: f64,
    pub inlier_count: usize,
}

pub fn transform_records(fits: &[TransformFitResult]) -> Vec<TransformRecord> {
    fits.iter()
        .enumerate()
        .map(|(i, f)| TransformRecord {
            step: i + 1,
            matrix: f.transform.to_row_major(),
            rms_residual: f.rms_residual,
            inlier_count: f.inlier_count,
        })
        .collect()
}

/// Grasp candidate exchange entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub matrix: [f64; 16],
    pub width: f64,
    pub score: f64,
}

impl From<&GraspCandidate> for CandidateRecord {
    fn from(c: &GraspCandidate) -> Self {
        Self { matrix: c.pose.to_row_major(), width: c.width, score: c.score }
    }
}

impl TryFrom<&CandidateRecord> for GraspCandidate {
    type Error = FormatError;

    fn try_from(r: &CandidateRecord) -> Result<Self, FormatError> {
        if !(r.width.is_finite() && r.width > 0.0 && r.score.is_finite() && r.score >= 0.0) {
            return Err(FormatError::Malformed(format!("candidate width {} score {}", r.width, r.score)));
        }
        let pose = RigidTransform::from_row_major(&r.matrix).map_err(|e| FormatError::Malformed(e.to_string()))?;
        Ok(GraspCandidate { pose, width: r.width, score: r.score })
    }
}

pub fn load_candidates(path: &Path) -> Result<Vec<GraspCandidate>, FormatError> {
    let records: Vec<CandidateRecord> = load_json(path)?;
    records.iter().map(GraspCandidate::try_from).collect()
}

/// Describes a frame stack on disk. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: String,
    pub intrinsics: CameraIntrinsics,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

/// Ground-truth sidecar written next to a generated frame stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub intrinsics: CameraIntrinsics,
    pub camera_pose: [f64; 16],
    pub masks: Vec<String>,
    pub tracks: String,
    pub transforms: Vec<[f64; 16]>,
    pub goal_pose: [f64; 16],
    pub scene: SyntheticScene,
}

impl GroundTruthRecord {
    pub fn new(gt: &GroundTruth, scene: &SyntheticScene, masks: Vec<String>, tracks: String) -> Self {
        Self {
            intrinsics: gt.intrinsics,
            camera_pose: gt.camera_pose.to_row_major(),
            masks,
            tracks,
            transforms: gt.transforms.iter().map(|t| t.to_row_major()).collect(),
            goal_pose: gt.goal_pose.to_row_major(),
            scene: scene.clone(),
        }
    }
}

/// `<stem>.<ext>` next to `path`, where the stem drops every extension.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.split('.').next().unwrap_or("").to_owned();
    path.with_file_name(format!("{stem}.{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_scene, random_scene, SceneParams};

    fn sample() -> (Vec<RgbdFrame>, GroundTruth, SyntheticScene) {
        let scene = random_scene(4, &SceneParams { num_steps: 3, ..Default::default() });
        let (f, gt) = generate_scene(&scene).unwrap();
        (f, gt, scene)
    }

    #[test]
    fn rgbdv_roundtrip_is_bit_exact() {
        let (frames, _, _) = sample();
        let mut buf = Vec::new();
        write_rgbdv(&mut buf, &frames).unwrap();
        let n = frames[0].rgb.len();
        assert_eq!(buf.len(), 20 + frames.len() * n * 17);
        let back = read_rgbdv(&mut buf.as_slice()).unwrap();
        assert_eq!(back, frames);
        let h = read_rgbdv_header(&mut buf.as_slice()).unwrap();
        assert_eq!((h.width, h.height, h.frames), (frames[0].width, frames[0].height, frames.len() as u32));
    }

    #[test]
    fn rgbdv_rejects_bad_magic_and_truncation() {
        let (frames, _, _) = sample();
        let mut buf = Vec::new();
        write_rgbdv(&mut buf, &frames[..1]).unwrap();
        assert!(matches!(read_rgbdv(&mut &buf[..buf.len() - 1]), Err(FormatError::Stream(_))));
        buf[0] = b'X';
        assert!(matches!(read_rgbdv(&mut buf.as_slice()), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn pgm_roundtrip_and_comments() {
        let (_, gt, _) = sample();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &gt.masks[0]).unwrap();
        assert_eq!(read_pgm(&mut buf.as_slice()).unwrap(), gt.masks[0]);
        let commented = b"P5\n# made by hand\n2 1\n255\n\xff\x00";
        let m = read_pgm(&mut commented.as_slice()).unwrap();
        assert_eq!(m.as_slice(), &[true, false]);
    }

    #[test]
    fn tracks_roundtrip_with_and_without_depth() {
        let (_, gt, _) = sample();
        let mut buf = Vec::new();
        write_tracks(&mut buf, &gt.tracks).unwrap();
        let back = read_tracks(&mut buf.as_slice()).unwrap();
        assert_eq!(back.visibility(), gt.tracks.visibility());
        assert_eq!(back.depth_hints(), gt.tracks.depth_hints());
        for (a, b) in back.positions().iter().zip(gt.tracks.positions()) {
            assert_eq!(a[0], b[0] as f32 as f64);
            assert_eq!(a[1], b[1] as f32 as f64);
        }
        let plain = gt.tracks.clone().without_depth();
        let mut buf = Vec::new();
        write_tracks(&mut buf, &plain).unwrap();
        assert!(!read_tracks(&mut buf.as_slice()).unwrap().has_depth_hints());
    }

    #[test]
    fn flow_roundtrip() {
        let (_, gt, _) = sample();
        let mut buf = Vec::new();
        write_flow(&mut buf, &gt.flow).unwrap();
        let back = read_flow(&mut buf.as_slice()).unwrap();
        assert_eq!(back.validity(), gt.flow.validity());
        for (a, b) in back.displacements().iter().zip(gt.flow.displacements()) {
            assert!((a - b).amax() < 1e-6);
        }
    }

    #[test]
    fn candidate_json_roundtrip() {
        let c = GraspCandidate {
            pose: RigidTransform::from_axis_angle(Vector3::new(0.1, 0.2, -0.3), Vector3::new(0.5, 0.0, 1.0)),
            width: 0.03,
            score: 1.5,
        };
        let json = serde_json::to_string(&[CandidateRecord::from(&c)]).unwrap();
        let back: Vec<CandidateRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(GraspCandidate::try_from(&back[0]).unwrap(), c);
        let bad = CandidateRecord { width: -1.0, ..back[0] };
        assert!(GraspCandidate::try_from(&bad).is_err());
    }

    #[test]
    fn sibling_strips_all_extensions() {
        assert_eq!(sibling(Path::new("/a/b/scene.rgbdv"), "gt.json"), PathBuf::from("/a/b/scene.gt.json"));
        assert_eq!(sibling(Path::new("x.tar.gz"), "json"), PathBuf::from("x.json"));
    }

    #[test]
    fn ground_truth_record_roundtrip() {
        let (_, gt, scene) = sample();
        let rec = GroundTruthRecord::new(&gt, &scene, vec!["m0.pgm".into()], "t.trks".into());
        let json = serde_json::to_string(&rec).unwrap();
        let back: GroundTruthRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }
}
