//! Image folders with benchmark-style names (`<pid>_c<camid>...`), decoded
//! from binary PGM (`P5`) or PPM (`P6`).

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{IdentityDataset, Sample, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parse `^(-?\d+)_c(\d+)` into `(pid, camera)`.
pub fn parse_benchmark_name(name: &str) -> Option<(i64, i64)> {
    let (pid, rest) = name.split_once('_')?;
    let digits = pid.strip_prefix('-').unwrap_or(pid);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let rest = rest.strip_prefix('c')?;
    let cam_len = rest.bytes().take_while(u8::is_ascii_digit).count();
    if cam_len == 0 {
        return None;
    }
    Some((pid.parse().ok()?, rest[..cam_len].parse().ok()?))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FolderReport {
    pub loaded: usize,
    /// Files whose names do not follow the benchmark grammar.
    pub bad_names: Vec<PathBuf>,
    /// Files in an unsupported image format.
    pub unsupported: Vec<PathBuf>,
}

/// Decode a binary PGM/PPM into `[C, H, W]` with values scaled to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported PNM variant {other}")),
    };
    let mut num = || -> std::result::Result<usize, String> {
        token()?
            .parse()
            .map_err(|e| format!("bad header number: {e}"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("bad dimensions {w}x{h} maxval {maxval}"));
    }
    let data_start = pos + 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let needed = w * h * channels * bps;
    let payload = bytes
        .get(data_start..data_start + needed)
        .ok_or_else(|| format!("truncated pixel data: need {needed} bytes"))?;
    let mut out = vec![0.0; w * h * channels];
    for p in 0..w * h {
        for c in 0..channels {
            let i = p * channels + c;
            let v = if bps == 1 {
                f64::from(payload[i])
            } else {
                f64::from(u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]))
            };
            out[c * w * h + p] = v / maxval as f64;
        }
    }
    Tensor::new(vec![channels, h, w], out).map_err(|e| e.to_string())
}

/// Encode `[C, H, W]` (C = 1 or 3) with values in `[0, 1]` as 8-bit PGM/PPM.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape() else {
        return Err(Error::invalid("PNM images must be [C, H, W]"));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::invalid("PNM supports 1 or 3 channels")),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for ch in 0..*c {
            let v = image.data()[ch * h * w + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Load every file directly under `root`, in name order. Files with names
/// outside the benchmark grammar or in non-PNM formats are skipped with a
/// warning and reported. Identity `-1` is kept as junk.
pub fn load_image_folder(root: &Path, split: SplitTag) -> Result<(IdentityDataset, FolderReport)> {
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut report = FolderReport::default();
    let mut samples = Vec::new();
    for path in entries {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let Some((pid, cam)) = parse_benchmark_name(name) else {
            warn!(
                "skipping {}: name does not match <pid>_c<cam>",
                path.display()
            );
            report.bad_names.push(path);
            continue;
        };
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
            warn!(
                "skipping {}: only binary PGM/PPM are decoded",
                path.display()
            );
            report.unsupported.push(path);
            continue;
        }
        let bytes = fs::read(&path)?;
        let image = decode_pnm(&bytes).map_err(|reason| Error::Format {
            kind: "PNM",
            path: path.clone(),
            reason,
        })?;
        samples.push(Sample {
            image,
            identity: pid,
            camera: Some(cam),
        });
    }
    report.loaded = samples.len();
    Ok((IdentityDataset::new(samples, split)?, report))
}
