//! Single-file checkpoint container. Layout: magic `UFO1`; a header with
//! the tensor count and per-tensor metadata (name length, name bytes,
//! rank, extents, dtype tag); raw little-endian payloads in header order;
//! and a payload-length trailer for truncation detection.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::params::{ParamKind, ParamSet};

pub const MAGIC: &[u8; 4] = b"UFO1";
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_U8: u8 = 2;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint version {got:?} not supported, this build reads {want:?}")]
    VersionMismatch { got: String, want: String },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("payload trailer says {trailer} bytes, header implies {header}")]
    TrailerMismatch { trailer: u64, header: u64 },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F64(_) => DTYPE_F64,
            Payload::Bytes(_) => DTYPE_U8,
        }
    }

    fn byte_len(&self) -> u64 {
        match self {
            Payload::F64(v) => v.len() as u64 * 8,
            Payload::Bytes(v) => v.len() as u64,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match self {
            Payload::F64(v) => Some(v),
            Payload::Bytes(_) => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Payload::Bytes(v) => Some(v),
            Payload::F64(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub extents: Vec<u64>,
    pub payload: Payload,
}

impl TensorEntry {
    pub fn f64(name: &str, extents: Vec<u64>, data: Vec<f64>) -> TensorEntry {
        assert_eq!(
            extents.iter().product::<u64>() as usize,
            data.len(),
            "entry {name}: extents do not match data"
        );
        TensorEntry {
            name: name.to_string(),
            extents,
            payload: Payload::F64(data),
        }
    }

    pub fn bytes(name: &str, data: Vec<u8>) -> TensorEntry {
        TensorEntry {
            name: name.to_string(),
            extents: vec![data.len() as u64],
            payload: Payload::Bytes(data),
        }
    }
}

pub fn write_checkpoint(path: &Path, entries: &[TensorEntry]) -> Result<(), CkptError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.extents.len() as u64).to_le_bytes());
        for &x in &e.extents {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.push(e.payload.dtype());
    }
    let mut payload_len = 0u64;
    for e in entries {
        match &e.payload {
            Payload::F64(v) => {
                for &x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::Bytes(v) => buf.extend_from_slice(v),
        }
        payload_len += e.payload.byte_len();
    }
    buf.extend_from_slice(&payload_len.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CkptError> {
        if self.pos + n > self.buf.len() {
            return Err(CkptError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CkptError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<TensorEntry>, CkptError> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        if magic.starts_with(b"UFO") {
            return Err(CkptError::VersionMismatch {
                got: String::from_utf8_lossy(&magic).into_owned(),
                want: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        return Err(CkptError::BadMagic(magic));
    }
    let count = r.u64("tensor count")?;
    let mut metas = Vec::new();
    for _ in 0..count {
        let name_len = r.u64("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| CkptError::Malformed("tensor name is not utf-8".into()))?;
        let rank = r.u64("rank")? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.u64("extent")?);
        }
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 && dtype != DTYPE_U8 {
            return Err(CkptError::UnknownDtype(dtype));
        }
        metas.push((name, extents, dtype));
    }
    let mut entries = Vec::with_capacity(metas.len());
    let mut header_bytes = 0u64;
    for (name, extents, dtype) in metas {
        let numel = extents.iter().product::<u64>() as usize;
        let payload = match dtype {
            DTYPE_F64 => {
                let raw = r.take(numel * 8, "f64 payload")?;
                Payload::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            _ => Payload::Bytes(r.take(numel, "byte payload")?.to_vec()),
        };
        header_bytes += payload.byte_len();
        entries.push(TensorEntry {
            name,
            extents,
            payload,
        });
    }
    let trailer = r.u64("trailer")?;
    if trailer != header_bytes {
        return Err(CkptError::TrailerMismatch {
            trailer,
            header: header_bytes,
        });
    }
    if r.pos != buf.len() {
        return Err(CkptError::Malformed(format!(
            "{} trailing bytes after the trailer",
            buf.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Strict lookup: a missing name is an explicit error, never a skip.
pub fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry, CkptError> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CkptError::MissingTensor(name.to_string()))
}

/// Appends one f64 entry per parameter under `<prefix>/<name>`, plus a
/// `<prefix>#kinds` byte tensor recording the kind tags in order.
pub fn pack_param_set(out: &mut Vec<TensorEntry>, prefix: &str, ps: &ParamSet) {
    let mut kinds = Vec::with_capacity(ps.len());
    for p in ps.iter() {
        kinds.push(p.kind.tag());
        out.push(TensorEntry::f64(
            &format!("{prefix}/{}", p.name),
            p.shape.iter().map(|&x| x as u64).collect(),
            p.data.clone(),
        ));
    }
    out.push(TensorEntry::bytes(&format!("{prefix}#kinds"), kinds));
}

/// Rebuilds a parameter set from `<prefix>/...` entries in file order.
pub fn unpack_param_set(entries: &[TensorEntry], prefix: &str) -> Result<ParamSet, CkptError> {
    let lead = format!("{prefix}/");
    let kinds = find(entries, &format!("{prefix}#kinds"))?
        .payload
        .as_bytes()
        .ok_or_else(|| CkptError::Malformed(format!("{prefix}#kinds is not a byte tensor")))?
        .to_vec();
    let mut ps = ParamSet::new();
    let mut i = 0usize;
    for e in entries.iter().filter(|e| e.name.starts_with(&lead)) {
        let data = e
            .payload
            .as_f64()
            .ok_or_else(|| CkptError::Malformed(format!("{} is not an f64 tensor", e.name)))?;
        let tag = *kinds
            .get(i)
            .ok_or_else(|| CkptError::Malformed(format!("{prefix}#kinds too short")))?;
        let kind = ParamKind::from_tag(tag)
            .ok_or_else(|| CkptError::Malformed(format!("bad kind tag {tag}")))?;
        ps.add(
            &e.name[lead.len()..],
            kind,
            e.extents.iter().map(|&x| x as usize).collect(),
            data.to_vec(),
        );
        i += 1;
    }
    if i != kinds.len() {
        return Err(CkptError::Malformed(format!(
            "{prefix}: {} kind tags for {i} tensors",
            kinds.len()
        )));
    }
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use tempfile::tempdir;

    fn sample_entries() -> Vec<TensorEntry> {
        vec![
            TensorEntry::f64(
                "a/w",
                vec![2, 2],
                vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300],
            ),
            TensorEntry::bytes("meta/blob", vec![0, 255, 17]),
            TensorEntry::f64("b", vec![0], vec![]),
        ]
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ufo");
        let entries = sample_entries();
        write_checkpoint(&path, &entries).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(entries, back);
        // negative zero survives with its sign bit
        let w = back[0].payload.as_f64().unwrap();
        assert!(w[1].is_sign_negative());
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ufo");
        write_checkpoint(&path, &sample_entries()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] = b'2';
        fs::write(&path, bytes).unwrap();
        match read_checkpoint(&path) {
            Err(CkptError::VersionMismatch { got, want }) => {
                assert_eq!(got, "UFO2");
                assert_eq!(want, "UFO1");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn non_checkpoint_file_is_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ufo");
        fs::write(&path, b"JSON{}??").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CkptError::BadMagic(_))
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ufo");
        write_checkpoint(&path, &sample_entries()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(read_checkpoint(&path), Err(CkptError::Truncated(_))),
                "cut at {cut} not caught"
            );
        }
    }

    #[test]
    fn corrupted_trailer_is_an_integrity_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ufo");
        write_checkpoint(&path, &sample_entries()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CkptError::TrailerMismatch { .. })
        ));
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ufo");
        write_checkpoint(&path, &[TensorEntry::bytes("m", vec![1, 2])]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // dtype byte sits at the end of the single header record
        let dtype_pos = 4 + 8 + 8 + 1 + 8 + 8;
        assert_eq!(bytes[dtype_pos], DTYPE_U8);
        bytes[dtype_pos] = 9;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CkptError::UnknownDtype(9))
        ));
    }

    #[test]
    fn param_set_pack_unpack_preserves_everything() {
        let mut ps = ParamSet::new();
        ps.add("enc.w", ParamKind::Weight, vec![2, 3], vec![0.1; 6]);
        ps.add("enc.b", ParamKind::Bias, vec![3], vec![-1.0, 2.0, 3.0]);
        ps.add("t", ParamKind::Temperature, vec![1], vec![0.0]);
        let mut entries = Vec::new();
        pack_param_set(&mut entries, "student", &ps);
        let back = unpack_param_set(&entries, "student").unwrap();
        assert_eq!(back.len(), ps.len());
        for (a, b) in ps.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn renamed_tensor_is_a_missing_name_error() {
        let mut entries = Vec::new();
        let mut ps = ParamSet::new();
        ps.add("w", ParamKind::Weight, vec![1], vec![1.0]);
        pack_param_set(&mut entries, "student", &ps);
        entries[0].name = "student/w_renamed".into();
        assert!(matches!(
            find(&entries, "student/w"),
            Err(CkptError::MissingTensor(_))
        ));
        // the strict unpack still sees the renamed tensor, so round-trip
        // consumers must look names up explicitly
        let back = unpack_param_set(&entries, "student").unwrap();
        assert!(back.get("w").is_err());
    }
}
