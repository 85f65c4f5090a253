//! On-disk formats.
//!
//! # MVOL1 volume files
//!
//! All integers and floats little-endian.
//!
//! | offset | size | field                                         |
//! |--------|------|-----------------------------------------------|
//! | 0      | 5    | magic `MVOL1`                                 |
//! | 5      | 1    | endianness tag, `L` (0x4C)                    |
//! | 6      | 1    | value kind: 0 = f32 scalar, 1 = u8 label, 2 = u8 mask |
//! | 7      | 1    | reserved, 0                                   |
//! | 8      | 12   | dims W, H, D as u32                           |
//! | 20     | 24   | spacing dx, dy, dz as f64 (mm)                |
//! | 44     | ...  | W·H·D elements, x fastest then y then z       |
//!
//! # MPAR1 parameter files
//!
//! `MPAR1`, dtype width (u8: 4 or 8), block count (u32), then per block:
//! name length (u32), UTF-8 name, kind tag (u8), rank (u32), dims (u32
//! each), values.
//!
//! # Text formats
//!
//! Manifests are `case_id<TAB>image_path<TAB>label_path` lines with an
//! optional `#manifest v1` header; relative paths resolve against the
//! manifest's directory. Metrics are CSV `case_id,region,dsc,both_empty`.
//! Sidecars (preprocessing plans, architectures) are `key=value` lines.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::nn::{ParamBlock, ParamKind, ParamSet, ParamSpec, Real};
use crate::volcore::{BinaryMask, Dims, LabelMap, Spacing, Volume};

pub const MVOL_MAGIC: &[u8; 5] = b"MVOL1";
pub const MPAR_MAGIC: &[u8; 5] = b"MPAR1";
const LITTLE_ENDIAN_TAG: u8 = b'L';
const HEADER_LEN: usize = 44;
/// Upper bound on voxels per file (2^31), far above anything desk-scale.
const MAX_VOXELS: u64 = 1 << 31;

/// Decoding failures, one variant per distinct error code.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported endianness tag {0:#04x}")]
    BadEndianness(u8),
    #[error("unknown value kind {0}")]
    UnknownKind(u8),
    #[error("expected {expected:?} payload, file holds {found:?}")]
    KindMismatch { expected: ValueKind, found: ValueKind },
    #[error("truncated: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("dimensions overflow: {0:?}")]
    DimOverflow([u64; 3]),
    #[error("unsupported dtype width {0}")]
    BadDtype(u8),
    #[error("invalid content: {0}")]
    InvalidContent(String),
}

impl FormatError {
    /// Stable short code for logs and exit diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic => "bad-magic",
            FormatError::BadEndianness(_) => "bad-endianness",
            FormatError::UnknownKind(_) => "unknown-kind",
            FormatError::KindMismatch { .. } => "kind-mismatch",
            FormatError::Truncated { .. } => "truncated",
            FormatError::TrailingBytes(_) => "trailing-bytes",
            FormatError::DimOverflow(_) => "dim-overflow",
            FormatError::BadDtype(_) => "bad-dtype",
            FormatError::InvalidContent(_) => "invalid-content",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Scalar,
    Label,
    Mask,
}

impl ValueKind {
    fn tag(self) -> u8 {
        match self {
            ValueKind::Scalar => 0,
            ValueKind::Label => 1,
            ValueKind::Mask => 2,
        }
    }

    fn from_tag(t: u8) -> std::result::Result<Self, FormatError> {
        match t {
            0 => Ok(ValueKind::Scalar),
            1 => Ok(ValueKind::Label),
            2 => Ok(ValueKind::Mask),
            other => Err(FormatError::UnknownKind(other)),
        }
    }

    fn element_size(self) -> usize {
        match self {
            ValueKind::Scalar => 4,
            ValueKind::Label | ValueKind::Mask => 1,
        }
    }
}

/// A grid type storable as MVOL1.
pub trait MvolPayload: Sized {
    const KIND: ValueKind;
    fn dims(&self) -> Dims;
    fn spacing(&self) -> Spacing;
    fn write_payload(&self, out: &mut Vec<u8>);
    fn from_payload(dims: Dims, spacing: Spacing, payload: &[u8]) -> std::result::Result<Self, FormatError>;
}

impl MvolPayload for Volume {
    const KIND: ValueKind = ValueKind::Scalar;

    fn dims(&self) -> Dims {
        Volume::dims(self)
    }

    fn spacing(&self) -> Spacing {
        Volume::spacing(self)
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        for v in self.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_payload(dims: Dims, spacing: Spacing, payload: &[u8]) -> std::result::Result<Self, FormatError> {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Volume::new(dims, spacing, data).map_err(|e| FormatError::InvalidContent(e.to_string()))
    }
}

impl MvolPayload for LabelMap {
    const KIND: ValueKind = ValueKind::Label;

    fn dims(&self) -> Dims {
        LabelMap::dims(self)
    }

    fn spacing(&self) -> Spacing {
        LabelMap::spacing(self)
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self.data());
    }

    fn from_payload(dims: Dims, spacing: Spacing, payload: &[u8]) -> std::result::Result<Self, FormatError> {
        LabelMap::new(dims, spacing, payload.to_vec()).map_err(|e| FormatError::InvalidContent(e.to_string()))
    }
}

impl MvolPayload for BinaryMask {
    const KIND: ValueKind = ValueKind::Mask;

    fn dims(&self) -> Dims {
        BinaryMask::dims(self)
    }

    fn spacing(&self) -> Spacing {
        BinaryMask::spacing(self)
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        out.extend(self.data().iter().map(|&b| b as u8));
    }

    fn from_payload(dims: Dims, spacing: Spacing, payload: &[u8]) -> std::result::Result<Self, FormatError> {
        if let Some(bad) = payload.iter().find(|&&b| b > 1) {
            return Err(FormatError::InvalidContent(format!("mask byte {bad}")));
        }
        BinaryMask::new(dims, spacing, payload.iter().map(|&b| b == 1).collect())
            .map_err(|e| FormatError::InvalidContent(e.to_string()))
    }
}

/// Any of the storable grid types, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Scalar(Volume),
    Label(LabelMap),
    Mask(BinaryMask),
}

pub fn encode_volume<V: MvolPayload>(v: &V) -> Vec<u8> {
    let dims = v.dims();
    let spacing = v.spacing();
    let mut out = Vec::with_capacity(HEADER_LEN + dims.len() * V::KIND.element_size());
    out.extend_from_slice(MVOL_MAGIC);
    out.push(LITTLE_ENDIAN_TAG);
    out.push(V::KIND.tag());
    out.push(0);
    for d in dims.to_array() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing.to_array() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    v.write_payload(&mut out);
    out
}

struct Header {
    kind: ValueKind,
    dims: Dims,
    spacing: Spacing,
}

fn decode_header(bytes: &[u8]) -> std::result::Result<Header, FormatError> {
    if bytes.len() < MVOL_MAGIC.len() || &bytes[..5] != MVOL_MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[5] != LITTLE_ENDIAN_TAG {
        return Err(FormatError::BadEndianness(bytes[5]));
    }
    let kind = ValueKind::from_tag(bytes[6])?;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as u64;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let raw = [u32_at(8), u32_at(12), u32_at(16)];
    let voxels = raw[0]
        .checked_mul(raw[1])
        .and_then(|v| v.checked_mul(raw[2]))
        .filter(|&v| v <= MAX_VOXELS)
        .ok_or(FormatError::DimOverflow(raw))?;
    if voxels == 0 {
        return Err(FormatError::InvalidContent(format!("zero-sized dims {raw:?}")));
    }
    let spacing = Spacing::new(f64_at(20), f64_at(28), f64_at(36)).map_err(|e| FormatError::InvalidContent(e.to_string()))?;
    Ok(Header {
        kind,
        dims: Dims::new(raw[0] as usize, raw[1] as usize, raw[2] as usize),
        spacing,
    })
}

fn payload_of<'a>(bytes: &'a [u8], header: &Header) -> std::result::Result<&'a [u8], FormatError> {
    let expected = HEADER_LEN + header.dims.len() * header.kind.element_size();
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    Ok(&bytes[HEADER_LEN..])
}

pub fn decode_volume<V: MvolPayload>(bytes: &[u8]) -> std::result::Result<V, FormatError> {
    let header = decode_header(bytes)?;
    if header.kind != V::KIND {
        return Err(FormatError::KindMismatch {
            expected: V::KIND,
            found: header.kind,
        });
    }
    V::from_payload(header.dims, header.spacing, payload_of(bytes, &header)?)
}

pub fn decode_any(bytes: &[u8]) -> std::result::Result<AnyVolume, FormatError> {
    let header = decode_header(bytes)?;
    let payload = payload_of(bytes, &header)?;
    Ok(match header.kind {
        ValueKind::Scalar => AnyVolume::Scalar(Volume::from_payload(header.dims, header.spacing, payload)?),
        ValueKind::Label => AnyVolume::Label(LabelMap::from_payload(header.dims, header.spacing, payload)?),
        ValueKind::Mask => AnyVolume::Mask(BinaryMask::from_payload(header.dims, header.spacing, payload)?),
    })
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_volume<V: MvolPayload>(v: &V, path: &Path) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume<V: MvolPayload>(path: &Path) -> Result<V> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_any_volume(path: &Path) -> Result<AnyVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_any(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// One case in a dataset roster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseRecord {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseManifest {
    pub version: u32,
    pub cases: Vec<CaseRecord>,
}

impl CaseManifest {
    pub const VERSION: u32 = 1;

    pub fn new(cases: Vec<CaseRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &cases {
            if c.id.is_empty() || c.id.contains(['\t', '\n', ',']) {
                return Err(Error::invalid(format!("invalid case id {:?}", c.id)));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::invalid(format!("duplicate case id `{}`", c.id)));
            }
        }
        Ok(CaseManifest {
            version: Self::VERSION,
            cases,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Parses manifest text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut version = Self::VERSION;
        let mut cases = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("manifest v") {
                    version = v.trim().parse().map_err(|_| Error::Parse {
                        path: origin.to_path_buf(),
                        line: lineno + 1,
                        reason: format!("bad version tag `{}`", comment.trim()),
                    })?;
                    if version != Self::VERSION {
                        return Err(Error::Parse {
                            path: origin.to_path_buf(),
                            line: lineno + 1,
                            reason: format!("unsupported manifest version {version}"),
                        });
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: lineno + 1,
                    reason: "expected `case_id<TAB>image_path<TAB>label_path`".into(),
                });
            }
            cases.push(CaseRecord {
                id: fields[0].to_string(),
                image: base.join(fields[1]),
                label: base.join(fields[2]),
            });
        }
        let mut m = CaseManifest::new(cases)?;
        m.version = version;
        Ok(m)
    }

    /// Reads a manifest and checks every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base, path)?;
        for c in &m.cases {
            for p in [&c.image, &c.label] {
                if !p.is_file() {
                    return Err(Error::invalid(format!("case `{}`: missing file {}", c.id, p.display())));
                }
            }
        }
        Ok(m)
    }

    /// Paths are written relative to `path`'s directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut text = format!("#manifest v{}\n", self.version);
        for c in &self.cases {
            text.push_str(&format!("{}\t{}\t{}\n", c.id, rel(&c.image), rel(&c.label)));
        }
        write_atomic(path, text.as_bytes())
    }

    pub fn get(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.id == id)
    }
}

/// Case id to fold index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    /// Case ids per fold, each list sorted.
    pub fn folds(&self) -> Vec<Vec<String>> {
        let mut folds = vec![Vec::new(); self.k];
        for (id, &f) in &self.assignment {
            folds[f].push(id.clone());
        }
        folds
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }
}

/// Sorts ids, shuffles them with SplitMix64(seed), deals them round-robin.
pub fn split_folds(manifest: &CaseManifest, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if manifest.is_empty() {
        return Err(Error::invalid("cannot split an empty manifest"));
    }
    if k > manifest.len() {
        return Err(Error::invalid(format!("{k} folds for only {} cases", manifest.len())));
    }
    let mut ids: Vec<String> = manifest.cases.iter().map(|c| c.id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut SplitMix64::seed_from_u64(seed));
    let assignment = ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldSplit { k, seed, assignment })
}

pub fn encode_params<T: Real>(params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MPAR_MAGIC);
    out.push(T::WIDTH);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for b in params.blocks() {
        let name = b.spec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(b.spec.kind.tag());
        out.extend_from_slice(&(b.spec.shape.len() as u32).to_le_bytes());
        for &d in &b.spec.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &b.value {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::DimOverflow([n as u64, 0, 0]))?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_params<T: Real>(bytes: &[u8]) -> std::result::Result<ParamSet<T>, FormatError> {
    if bytes.len() < 5 || &bytes[..5] != MPAR_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 5 };
    let width = cur.take(1)?[0];
    if width != T::WIDTH {
        return Err(FormatError::BadDtype(width));
    }
    let count = cur.u32()?;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let name_len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| FormatError::InvalidContent("block name is not UTF-8".into()))?
            .to_string();
        let kind_tag = cur.take(1)?[0];
        let kind = ParamKind::from_tag(kind_tag).ok_or(FormatError::UnknownKind(kind_tag))?;
        let rank = cur.u32()?;
        let shape = (0..rank).map(|_| cur.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .filter(|&n| n <= MAX_VOXELS)
            .ok_or_else(|| FormatError::DimOverflow([shape.len() as u64, 0, 0]))? as usize;
        let raw = cur.take(len * width as usize)?;
        let value = raw.chunks_exact(width as usize).map(T::read_le).collect();
        let fan_in = shape.iter().skip(1).product::<usize>().max(1);
        blocks.push(ParamBlock::new(
            ParamSpec {
                name,
                shape,
                kind,
                fan_in,
            },
            value,
        ));
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(ParamSet::new(blocks))
}

pub fn save_params<T: Real>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_params(params))
}

pub fn load_params<T: Real>(path: &Path) -> Result<ParamSet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads parameters and checks them block-by-block against an architecture.
/// The returned blocks carry the architecture's specs.
pub fn load_params_for<T: Real>(path: &Path, specs: &[ParamSpec]) -> Result<ParamSet<T>> {
    let loaded: ParamSet<T> = load_params(path)?;
    loaded.check_against(specs)?;
    Ok(ParamSet::new(
        loaded
            .blocks()
            .iter()
            .zip(specs)
            .map(|(b, s)| ParamBlock::new(s.clone(), b.value.clone()))
            .collect(),
    ))
}

/// One Dice measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub case_id: String,
    pub region: String,
    pub dsc: f64,
    /// Both masks were empty and `dsc` holds the conventional 1.
    pub both_empty: bool,
}

pub const METRICS_HEADER: &str = "case_id,region,dsc,both_empty";

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.case_id, r.region, r.dsc, r.both_empty as u8));
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    write_atomic(path, metrics_to_csv(rows).as_bytes())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 1,
                    reason: format!("expected header `{METRICS_HEADER}`"),
                });
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |reason: &str| Error::Parse {
            path: path.into(),
            line: i + 1,
            reason: reason.into(),
        };
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        rows.push(MetricRow {
            case_id: f[0].into(),
            region: f[1].into(),
            dsc: f[2].parse().map_err(|_| bad("bad dsc"))?,
            both_empty: match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("bad both_empty flag")),
            },
        });
    }
    Ok(rows)
}

/// Ordered `key=value` text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key).ok_or_else(|| Error::invalid(format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("key `{key}`: cannot parse `{raw}`")))
    }

    /// Comma-separated list value.
    pub fn require_list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>> {
        let raw = self.get(key).ok_or_else(|| Error::invalid(format!("missing key `{key}`")))?;
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("key `{key}`: cannot parse `{p}`")))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.into(),
                line: i + 1,
                reason: "expected key=value".into(),
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}
