//! RGBDV ↔ per-frame PNG directories.
//!
//! The float format keeps every `f32` bit: each value is split into its
//! high and low 16-bit halves, stored as the top and bottom half of a
//! 16-bit image of height `2H`. Validity goes in a separate 8-bit mask.
//! The byte format stores 8-bit color and millimeter depth (0 = invalid).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use flowplan::geometry::RgbdFrame;
use flowplan::io;
use png::{BitDepth, ColorType};
use serde::{Deserialize, Serialize};

use crate::args::{ConvertArgs, PngFormat};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

const INDEX: &str = "frames.json";

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format: PngFormat,
    width: u32,
    height: u32,
    frames: Vec<FrameFiles>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameFiles {
    rgb: String,
    depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    valid: Option<String>,
}

impl<'de> Deserialize<'de> for PngFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match String::deserialize(d)?.as_str() {
            "float" => Ok(PngFormat::Float),
            "byte" => Ok(PngFormat::Byte),
            other => Err(serde::de::Error::custom(format!("unknown png format {other:?}"))),
        }
    }
}

pub fn run(a: &ConvertArgs) -> Result<()> {
    if a.input.is_dir() {
        let frames = read_dir(&a.input)?;
        io::save_rgbdv(&a.output, &frames).map_err(CliError::domain)?;
    } else if a.input.is_file() {
        if a.format == PngFormat::Byte && !a.allow_lossy {
            return Err(CliError::Usage("the byte format loses precision; pass --allow-lossy to use it".into()));
        }
        let frames = io::load_rgbdv(&a.input).map_err(CliError::domain)?;
        write_dir(&a.output, &frames, a.format)?;
    } else {
        return Err(CliError::Usage(format!("input {} does not exist", a.input.display())));
    }
    println!("{}", a.output.display());
    Ok(())
}

fn write_png(path: &Path, width: u32, height: u32, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(CliError::domain)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut w = enc.write_header().map_err(CliError::domain)?;
    w.write_image_data(data).map_err(CliError::domain)?;
    w.finish().map_err(CliError::domain)
}

fn read_png(path: &Path, color: ColorType, depth: BitDepth) -> Result<(u32, u32, Vec<u8>)> {
    let file = File::open(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(CliError::domain)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(CliError::domain)?;
    if info.color_type != color || info.bit_depth != depth {
        return Err(CliError::Domain(format!(
            "{}: expected {color:?}/{depth:?}, found {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, buf))
}

/// Big-endian 16-bit samples: all high halves, then all low halves.
fn split_f32(values: impl Iterator<Item = f32> + Clone) -> Vec<u8> {
    let hi = values.clone().flat_map(|v| ((v.to_bits() >> 16) as u16).to_be_bytes());
    let lo = values.flat_map(|v| (v.to_bits() as u16).to_be_bytes());
    hi.chain(lo).collect()
}

fn join_f32(data: &[u8]) -> Vec<f32> {
    let half = data.len() / 2;
    let (hi, lo) = data.split_at(half);
    hi.chunks_exact(2)
        .zip(lo.chunks_exact(2))
        .map(|(h, l)| {
            let bits = (u16::from_be_bytes([h[0], h[1]]) as u32) << 16 | u16::from_be_bytes([l[0], l[1]]) as u32;
            f32::from_bits(bits)
        })
        .collect()
}

fn write_dir(dir: &Path, frames: &[RgbdFrame], format: PngFormat) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::domain)?;
    let (w, h) = frames.first().map_or((0, 0), |f| (f.width, f.height));
    let mut files = Vec::with_capacity(frames.len());
    for (n, f) in frames.iter().enumerate() {
        let names = FrameFiles {
            rgb: format!("frame-{n:03}.rgb.png"),
            depth: format!("frame-{n:03}.depth.png"),
            valid: (format == PngFormat::Float).then(|| format!("frame-{n:03}.valid.png")),
        };
        match format {
            PngFormat::Float => {
                let rgb = split_f32(f.rgb.iter().flatten().copied());
                write_png(&dir.join(&names.rgb), w, 2 * h, ColorType::Rgb, BitDepth::Sixteen, &rgb)?;
                let depth = split_f32(f.depth.iter().copied());
                write_png(&dir.join(&names.depth), w, 2 * h, ColorType::Grayscale, BitDepth::Sixteen, &depth)?;
                let valid: Vec<u8> = f.valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
                let vname = names.valid.as_ref().expect("float format has a mask");
                write_png(&dir.join(vname), w, h, ColorType::Grayscale, BitDepth::Eight, &valid)?;
            }
            PngFormat::Byte => {
                let rgb: Vec<u8> = f.rgb.iter().flatten().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
                write_png(&dir.join(&names.rgb), w, h, ColorType::Rgb, BitDepth::Eight, &rgb)?;
                let depth: Vec<u8> = f
                    .depth
                    .iter()
                    .zip(&f.valid)
                    .flat_map(|(&d, &v)| {
                        let mm = if v { ((d as f64 * 1000.0).round() as u64).clamp(1, u16::MAX as u64) as u16 } else { 0 };
                        mm.to_be_bytes()
                    })
                    .collect();
                write_png(&dir.join(&names.depth), w, h, ColorType::Grayscale, BitDepth::Sixteen, &depth)?;
            }
        }
        files.push(names);
    }
    let index = Index { format, width: w, height: h, frames: files };
    io::save_json(&dir.join(INDEX), &index).map_err(CliError::domain)
}

fn read_dir(dir: &Path) -> Result<Vec<RgbdFrame>> {
    let index: Index = io::load_json(&dir.join(INDEX)).map_err(CliError::domain)?;
    let (w, h) = (index.width, index.height);
    let n = w as usize * h as usize;
    let check = |pw: u32, ph: u32, eh: u32, name: &str| {
        if pw != w || ph != eh {
            Err(CliError::Domain(format!("{name}: size {pw}x{ph}, expected {w}x{eh}")))
        } else {
            Ok(())
        }
    };
    let mut frames = Vec::with_capacity(index.frames.len());
    for files in &index.frames {
        let frame = match index.format {
            PngFormat::Float => {
                let (pw, ph, rgb) = read_png(&dir.join(&files.rgb), ColorType::Rgb, BitDepth::Sixteen)?;
                check(pw, ph, 2 * h, &files.rgb)?;
                let rgb: Vec<[f32; 3]> = join_f32(&rgb).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                let (pw, ph, depth) = read_png(&dir.join(&files.depth), ColorType::Grayscale, BitDepth::Sixteen)?;
                check(pw, ph, 2 * h, &files.depth)?;
                let vname = files.valid.as_ref().ok_or_else(|| CliError::Domain("float frame without a mask".into()))?;
                let (pw, ph, valid) = read_png(&dir.join(vname), ColorType::Grayscale, BitDepth::Eight)?;
                check(pw, ph, h, vname)?;
                RgbdFrame::new(w, h, rgb, join_f32(&depth), valid.iter().map(|&v| v >= 128).collect())
            }
            PngFormat::Byte => {
                let (pw, ph, rgb) = read_png(&dir.join(&files.rgb), ColorType::Rgb, BitDepth::Eight)?;
                check(pw, ph, h, &files.rgb)?;
                let rgb: Vec<[f32; 3]> =
                    rgb.chunks_exact(3).map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]).collect();
                let (pw, ph, depth) = read_png(&dir.join(&files.depth), ColorType::Grayscale, BitDepth::Sixteen)?;
                check(pw, ph, h, &files.depth)?;
                let mm: Vec<u16> = depth.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
                let depth: Vec<f32> = mm.iter().map(|&m| (m as f64 / 1000.0) as f32).collect();
                RgbdFrame::new(w, h, rgb, depth, mm.iter().map(|&m| m > 0).collect())
            }
        }
        .map_err(CliError::domain)?;
        debug_assert_eq!(frame.depth.len(), n);
        frames.push(frame);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_split_is_exact() {
        let xs = [0.0f32, -0.0, 1.0, 0.123_456_79, f32::MIN_POSITIVE, 3.4e38, f32::NAN];
        let back = join_f32(&split_f32(xs.iter().copied()));
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
