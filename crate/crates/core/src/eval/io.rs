//! Embedding files, scatter exports and report tables.
//!
//! Binary embedding layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "BNNKEMB\0"
//! version  u32      1
//! M, D     u64, u64
//! flags    u32      bit 0: identity column, bit 1: camera column
//! role     u8       0 train, 1 query, 2 gallery
//! rows     M x (D f64 [, i64 identity] [, i64 camera])
//! ```
//!
//! The text form starts with `bnneck-embeddings 1 <M> <D> <flags> <role>`
//! and has one comma-separated row per sample in the same column order.
//! Floats are printed in shortest round-trip form, so both forms are exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EvalReport, LabeledEmbeddingSet};
use crate::data::SplitTag;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"BNNKEMB\0";
pub const EMBEDDING_TEXT_TAG: &str = "bnneck-embeddings";
pub const EMBEDDING_VERSION: u32 = 1;
const HAS_IDENTITY: u32 = 1;
const HAS_CAMERA: u32 = 2;

fn role_code(role: SplitTag) -> u8 {
    match role {
        SplitTag::Train => 0,
        SplitTag::Query => 1,
        SplitTag::Gallery => 2,
    }
}

fn role_from(code: u8) -> std::result::Result<SplitTag, String> {
    match code {
        0 => Ok(SplitTag::Train),
        1 => Ok(SplitTag::Query),
        2 => Ok(SplitTag::Gallery),
        _ => Err(format!("unknown role code {code}")),
    }
}

fn flags_of(set: &LabeledEmbeddingSet) -> u32 {
    HAS_IDENTITY | if set.cameras.is_some() { HAS_CAMERA } else { 0 }
}

pub fn embeddings_to_bytes(set: &LabeledEmbeddingSet) -> Vec<u8> {
    let (m, d) = (set.len(), set.dim());
    let mut out = Vec::with_capacity(33 + m * (d + 2) * 8);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&flags_of(set).to_le_bytes());
    out.push(role_code(set.role));
    for i in 0..m {
        for v in set.embeddings.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&set.identities[i].to_le_bytes());
        if let Some(c) = &set.cameras {
            out.extend_from_slice(&c[i].to_le_bytes());
        }
    }
    out
}

pub fn embeddings_from_bytes(buf: &[u8]) -> std::result::Result<LabeledEmbeddingSet, String> {
    let mut pos = 0;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = buf
            .get(pos..pos + n)
            .ok_or_else(|| format!("truncated at byte {pos}"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != EMBEDDING_MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let m = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let flags = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let role = role_from(take(1)?[0])?;
    if flags & HAS_IDENTITY == 0 || flags & !(HAS_IDENTITY | HAS_CAMERA) != 0 {
        return Err(format!("unsupported flags {flags:#x}"));
    }
    let cams = flags & HAS_CAMERA != 0;
    let mut data = Vec::with_capacity(m * d);
    let mut ids = Vec::with_capacity(m);
    let mut cameras = Vec::new();
    for _ in 0..m {
        for _ in 0..d {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        ids.push(i64::from_le_bytes(take(8)?.try_into().unwrap()));
        if cams {
            cameras.push(i64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
    }
    if pos != buf.len() {
        return Err("trailing bytes".into());
    }
    let t = Tensor::new(vec![m, d], data).map_err(|e| e.to_string())?;
    LabeledEmbeddingSet::new(t, ids, cams.then_some(cameras), role).map_err(|e| e.to_string())
}

pub fn embeddings_to_text(set: &LabeledEmbeddingSet) -> String {
    let mut out = format!(
        "{EMBEDDING_TEXT_TAG} {EMBEDDING_VERSION} {} {} {} {}\n",
        set.len(),
        set.dim(),
        flags_of(set),
        role_code(set.role)
    );
    for i in 0..set.len() {
        for v in set.embeddings.row(i) {
            let _ = write!(out, "{v:?},");
        }
        let _ = write!(out, "{}", set.identities[i]);
        if let Some(c) = &set.cameras {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    out
}

pub fn embeddings_from_text(text: &str) -> std::result::Result<LabeledEmbeddingSet, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .collect();
    if header.len() != 6 || header[0] != EMBEDDING_TEXT_TAG {
        return Err("missing embedding header".into());
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| format!("bad header field `{s}`: {e}"))
    };
    if num(header[1])? != EMBEDDING_VERSION as usize {
        return Err(format!("unsupported version {}", header[1]));
    }
    let (m, d, flags) = (num(header[2])?, num(header[3])?, num(header[4])? as u32);
    let role = role_from(num(header[5])? as u8)?;
    if flags & HAS_IDENTITY == 0 || flags & !(HAS_IDENTITY | HAS_CAMERA) != 0 {
        return Err(format!("unsupported flags {flags:#x}"));
    }
    let cams = flags & HAS_CAMERA != 0;
    let width = d + 1 + usize::from(cams);
    let mut data = Vec::with_capacity(m * d);
    let mut ids = Vec::with_capacity(m);
    let mut cameras = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(format!(
                "row {}: expected {width} fields, got {}",
                n + 1,
                f.len()
            ));
        }
        for s in &f[..d] {
            data.push(
                s.parse::<f64>()
                    .map_err(|e| format!("row {}: {e}", n + 1))?,
            );
        }
        ids.push(
            f[d].parse::<i64>()
                .map_err(|e| format!("row {}: {e}", n + 1))?,
        );
        if cams {
            cameras.push(
                f[d + 1]
                    .parse::<i64>()
                    .map_err(|e| format!("row {}: {e}", n + 1))?,
            );
        }
    }
    if ids.len() != m {
        return Err(format!("header promises {m} rows, found {}", ids.len()));
    }
    let t = Tensor::new(vec![m, d], data).map_err(|e| e.to_string())?;
    LabeledEmbeddingSet::new(t, ids, cams.then_some(cameras), role).map_err(|e| e.to_string())
}

/// Writes the binary form unless the path ends in `.txt` or `.csv`.
pub fn write_embeddings(set: &LabeledEmbeddingSet, path: &Path) -> Result<()> {
    let text = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("txt" | "csv")
    );
    if text {
        fs::write(path, embeddings_to_text(set))?;
    } else {
        fs::write(path, embeddings_to_bytes(set))?;
    }
    Ok(())
}

/// Reads either form, chosen by the leading bytes.
pub fn read_embeddings(path: &Path) -> Result<LabeledEmbeddingSet> {
    let buf = fs::read(path)?;
    let parsed = if buf.starts_with(EMBEDDING_MAGIC) {
        embeddings_from_bytes(&buf)
    } else {
        std::str::from_utf8(&buf)
            .map_err(|e| e.to_string())
            .and_then(embeddings_from_text)
    };
    parsed.map_err(|reason| Error::Format {
        kind: "embedding",
        path: path.to_path_buf(),
        reason,
    })
}

pub const SCATTER_HEADER: &str = "x,y,label";

/// `x,y,label` rows for 2-d embeddings given row-major as `data`.
pub fn scatter_csv(data: &[f64], dim: usize, labels: &[i64]) -> Result<String> {
    if dim != 2 {
        return Err(Error::InvalidShape {
            op: "export_embedding_scatter",
            shape: vec![labels.len(), dim],
            reason: "scatter export needs 2-d embeddings".into(),
        });
    }
    if data.len() != 2 * labels.len() {
        return Err(Error::ShapeMismatch {
            op: "export_embedding_scatter",
            lhs: vec![data.len() / 2, 2],
            rhs: vec![labels.len()],
        });
    }
    let mut out = String::from(SCATTER_HEADER);
    out.push('\n');
    for (p, l) in data.chunks_exact(2).zip(labels) {
        let _ = writeln!(out, "{:?},{:?},{l}", p[0], p[1]);
    }
    Ok(out)
}

pub fn parse_scatter(text: &str) -> std::result::Result<(Vec<[f64; 2]>, Vec<i64>), String> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(SCATTER_HEADER) {
        return Err(format!("expected header `{SCATTER_HEADER}`"));
    }
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |e: &dyn std::fmt::Display| format!("row {}: {e}", n + 1);
        if f.len() != 3 {
            return Err(bad(&"expected 3 fields"));
        }
        pts.push([
            f[0].parse().map_err(|e| bad(&e))?,
            f[1].parse().map_err(|e| bad(&e))?,
        ]);
        labels.push(f[2].parse().map_err(|e| bad(&e))?);
    }
    Ok((pts, labels))
}

pub fn export_embedding_scatter(embeddings: &Tensor, labels: &[i64], path: &Path) -> Result<()> {
    let dim = embeddings.shape().get(1).copied().unwrap_or(0);
    fs::write(path, scatter_csv(embeddings.data(), dim, labels)?)?;
    Ok(())
}

pub const REPORT_HEADER: &str =
    "run,metric,feature,camera_filter,rerank_k1,rerank_k2,rerank_lambda,queries,dropped,rank1,rank5,rank10,mAP,D_p,D_n,R,norm_mean,norm_std,norm_cv";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

/// One row per `(run label, report)`.
pub fn reports_csv(rows: &[(String, EvalReport)], manifest_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = manifest_hash {
        let _ = writeln!(out, "# manifest-hash: {h}");
    }
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{label},{},{},{},{},{},{},{},{},{:?},{:?},{:?},{:?},{},{},{},{},{},{}",
            r.metric,
            r.feature.map_or("", |f| f.name()),
            r.camera_filter,
            r.rerank.map_or(String::new(), |c| c.k1.to_string()),
            r.rerank.map_or(String::new(), |c| c.k2.to_string()),
            opt(r.rerank.map(|c| c.lambda)),
            r.queries,
            r.dropped,
            r.rank(1),
            r.rank(5),
            r.rank(10),
            r.map,
            opt(r.cluster.map(|c| c.d_p)),
            opt(r.cluster.map(|c| c.d_n)),
            opt(r.cluster.map(|c| c.r)),
            opt(r.norms.map(|n| n.mean)),
            opt(r.norms.map(|n| n.std)),
            opt(r.norms.and_then(|n| n.cv)),
        );
    }
    out
}
