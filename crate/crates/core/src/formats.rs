//! On-disk formats. All binary formats are little-endian.
//!
//! | format | layout |
//! |--------|--------|
//! | FEAT | `"FEAT"`, u32 version = 1, u32 T, u32 d, T·d f32 row-major |
//! | MODL | `"MODL"`, u32 version = 1, u32 block count, then per block: u32 name length, UTF-8 name, u32 rows, u32 cols, rows·cols f32 |
//! | FLAB | `"FLAB"`, u32 T, T u16 class indices |
//! | PRIO | `"PRIO"`, u32 class count, f64 per class |
//!
//! Manifests are UTF-8 text, one `id\taudio_path\tvideo_path\ttranscript`
//! record per line, with paths relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::Matrix;

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";
pub const MODL_MAGIC: &[u8; 4] = b"MODL";
pub const FLAB_MAGIC: &[u8; 4] = b"FLAB";
pub const PRIO_MAGIC: &[u8; 4] = b"PRIO";
pub const FEAT_VERSION: u32 = 1;
pub const MODL_VERSION: u32 = 1;

struct Reader<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(kind: &'static str, bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader { kind, bytes, pos: 0 };
        if r.take(4)? != magic {
            return Err(Error::format(kind, "bad magic bytes"));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.kind, "unexpected end of data"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.kind, "trailing bytes"));
        }
        Ok(())
    }
}

fn u32_len(kind: &'static str, n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(kind, format!("{n} does not fit in u32")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_feat(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * seq.len() * seq.dim());
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len("FEAT", seq.len())?.to_le_bytes());
    out.extend_from_slice(&u32_len("FEAT", seq.dim())?.to_le_bytes());
    for &v in seq.frames().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feat(bytes: &[u8]) -> Result<FeatureSequence> {
    let mut r = Reader::new("FEAT", bytes, FEAT_MAGIC)?;
    let version = r.u32()?;
    if version != FEAT_VERSION {
        return Err(Error::format("FEAT", format!("unsupported version {version}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let count = rows
        .checked_mul(cols)
        .filter(|&n| n.saturating_mul(4) <= bytes.len())
        .ok_or_else(|| Error::format("FEAT", "declared size exceeds data"))?;
    let data = (0..count).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    FeatureSequence::new(Matrix::from_vec(rows, cols, data)?)
}

pub fn write_feat(path: &Path, seq: &FeatureSequence) -> Result<()> {
    write_file(path, &encode_feat(seq)?)
}

pub fn read_feat(path: &Path) -> Result<FeatureSequence> {
    decode_feat(&read_file(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { kind, reason } => Error::Format {
            kind,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    }
}

pub fn encode_blocks<'a, I>(blocks: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
{
    let blocks: Vec<_> = blocks.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MODL_MAGIC);
    out.extend_from_slice(&MODL_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len("MODL", blocks.len())?.to_le_bytes());
    for (name, m) in blocks {
        out.extend_from_slice(&u32_len("MODL", name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_len("MODL", m.rows())?.to_le_bytes());
        out.extend_from_slice(&u32_len("MODL", m.cols())?.to_le_bytes());
        for &v in m.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_blocks(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader::new("MODL", bytes, MODL_MAGIC)?;
    let version = r.u32()?;
    if version != MODL_VERSION {
        return Err(Error::format("MODL", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::format("MODL", format!("block name: {e}")))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_mul(4) <= bytes.len())
            .ok_or_else(|| Error::format("MODL", format!("block `{name}` size exceeds data")))?;
        let data = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        blocks.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    r.finish()?;
    Ok(blocks)
}

pub fn write_blocks<'a, I>(path: &Path, blocks: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
{
    write_file(path, &encode_blocks(blocks)?)
}

pub fn read_blocks(path: &Path) -> Result<Vec<(String, Matrix)>> {
    decode_blocks(&read_file(path)?).map_err(|e| with_path(e, path))
}

pub fn encode_flab(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 2 * labels.len());
    out.extend_from_slice(FLAB_MAGIC);
    out.extend_from_slice(&u32_len("FLAB", labels.len())?.to_le_bytes());
    for &l in labels {
        let v = u16::try_from(l).map_err(|_| Error::format("FLAB", format!("class {l} exceeds u16")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flab(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new("FLAB", bytes, FLAB_MAGIC)?;
    let n = r.u32()? as usize;
    if n.saturating_mul(2) > bytes.len() {
        return Err(Error::format("FLAB", "declared length exceeds data"));
    }
    let labels = (0..n).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(labels)
}

pub fn write_flab(path: &Path, labels: &[usize]) -> Result<()> {
    write_file(path, &encode_flab(labels)?)
}

pub fn read_flab(path: &Path) -> Result<Vec<usize>> {
    decode_flab(&read_file(path)?).map_err(|e| with_path(e, path))
}

pub fn encode_prio(probs: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 8 * probs.len());
    out.extend_from_slice(PRIO_MAGIC);
    out.extend_from_slice(&u32_len("PRIO", probs.len())?.to_le_bytes());
    for &p in probs {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_prio(bytes: &[u8]) -> Result<Vec<f64>> {
    let mut r = Reader::new("PRIO", bytes, PRIO_MAGIC)?;
    let n = r.u32()? as usize;
    if n.saturating_mul(8) > bytes.len() {
        return Err(Error::format("PRIO", "declared length exceeds data"));
    }
    let probs = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(probs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub video_path: PathBuf,
    pub transcript: String,
}

pub fn format_manifest(records: &[UtteranceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.id,
            r.audio_path.display(),
            r.video_path.display(),
            r.transcript
        ));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<UtteranceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::format(
                    "manifest",
                    format!("line {}: expected 4 tab-separated fields, found {}", n + 1, cols.len()),
                ));
            }
            Ok(UtteranceRecord {
                id: cols[0].to_string(),
                audio_path: PathBuf::from(cols[1]),
                video_path: PathBuf::from(cols[2]),
                transcript: cols[3].to_string(),
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    write_file(path, format_manifest(records).as_bytes())
}

/// Reads a manifest and resolves its relative paths against the manifest's
/// own directory.
pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = parse_manifest(&text).map_err(|e| with_path(e, path))?;
    for r in &mut records {
        r.audio_path = base.join(&r.audio_path);
        r.video_path = base.join(&r.video_path);
    }
    Ok(records)
}
