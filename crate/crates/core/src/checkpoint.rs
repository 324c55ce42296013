//! Checkpoint containers.
//!
//! ```text
//! container := u64-le header_len | header (JSON, header_len bytes) | tensor data
//! header    := { name: { "dtype", "shape", "data_offsets": [begin, end) }, "__metadata__"?: {str: str} }
//! ```
//!
//! Offsets are relative to the first byte after the header. A shard index is a
//! JSON document whose `weight_map` maps tensor names to container files next to
//! the index; its shards are presented as one name space.
//!
//! Tensor bytes stay on disk until [`Checkpoint::load`] asks for them, and are
//! read in fixed-size chunks so that loading never holds more than the decoded
//! tensor plus one chunk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use serde_json::{json, Value};
use tempfile::NamedTempFile;

use crate::dtype::Dtype;
use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 << 20;
const IO_CHUNK: usize = 1 << 20;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A fully materialized tensor. Values are always held as f32, whatever the
/// stored dtype was.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub values: Vec<f32>,
}

impl TensorRecord {
    pub fn new(shape: Vec<usize>, dtype: Dtype, values: Vec<f32>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                values.len()
            )));
        }
        Ok(Self {
            shape,
            dtype,
            values,
        })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, Dtype::F32, values)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone)]
enum Storage {
    File { shard: usize, begin: u64, end: u64 },
    Memory(Arc<[f32]>),
}

/// Header-level description of one tensor.
#[derive(Debug, Clone)]
pub struct TensorInfo {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    storage: Storage,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Debug)]
struct Shard {
    path: PathBuf,
    file: File,
    data_start: u64,
}

/// A named collection of tensors, either backed by container files or held in
/// memory. Read-only once constructed; distinct tensors may be loaded from
/// several threads at once.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    entries: BTreeMap<String, TensorInfo>,
    shards: Arc<Vec<Shard>>,
    source_path: PathBuf,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Opens a single container, or a shard index when `path` ends in `.json`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            return Self::open_index(path);
        }
        let parsed = read_container(path)?;
        let mut entries = BTreeMap::new();
        for (name, info) in parsed.tensors {
            insert_unique(&mut entries, name, info.into_info(0))?;
        }
        Ok(Self {
            entries,
            shards: Arc::new(vec![parsed.shard]),
            source_path: path.to_path_buf(),
            metadata: parsed.metadata,
        })
    }

    fn open_index(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Index {
            weight_map: BTreeMap<String, String>,
        }

        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let index: Index = serde_json::from_slice(&text).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("bad shard index: {e}"),
        })?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let files: BTreeSet<&str> = index.weight_map.values().map(String::as_str).collect();

        let mut entries = BTreeMap::new();
        let mut shards = Vec::with_capacity(files.len());
        let mut shard_of_file = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for file in files {
            let parsed = read_container(&dir.join(file))?;
            let shard = shards.len();
            for (name, info) in parsed.tensors {
                insert_unique(&mut entries, name, info.into_info(shard))?;
            }
            for (k, v) in parsed.metadata {
                metadata.entry(k).or_insert(v);
            }
            shards.push(parsed.shard);
            shard_of_file.insert(file, shard);
        }

        for (name, file) in &index.weight_map {
            let located = match entries.get(name).map(|i| &i.storage) {
                Some(Storage::File { shard, .. }) => *shard == shard_of_file[file.as_str()],
                _ => false,
            };
            if !located {
                return Err(Error::MalformedHeader {
                    path: path.to_path_buf(),
                    reason: format!(
                        "weight_map places `{name}` in `{file}`, which does not hold it"
                    ),
                });
            }
        }

        Ok(Self {
            entries,
            shards: Arc::new(shards),
            source_path: path.to_path_buf(),
            metadata,
        })
    }

    /// Builds an in-memory checkpoint. Non-finite values are rejected on load,
    /// as for file-backed tensors.
    pub fn from_records(records: BTreeMap<String, TensorRecord>) -> Self {
        let entries = records
            .into_iter()
            .map(|(name, rec)| {
                let info = TensorInfo {
                    shape: rec.shape,
                    dtype: rec.dtype,
                    storage: Storage::Memory(rec.values.into()),
                };
                (name, info)
            })
            .collect();
        Self {
            entries,
            shards: Arc::new(Vec::new()),
            source_path: PathBuf::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tensor names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.entries.get(name)
    }

    pub fn source_path(&self) -> &Path {
        &self.source_path
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Reads one tensor and widens it to f32. Fails on the first NaN or ±Inf.
    pub fn load(&self, name: &str) -> Result<TensorRecord> {
        let info = self
            .entries
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let values = match &info.storage {
            Storage::Memory(values) => values.to_vec(),
            Storage::File { shard, begin, end } => {
                let shard = &self.shards[*shard];
                let mut values = Vec::with_capacity(info.numel());
                let total = (end - begin) as usize;
                let chunk = IO_CHUNK.min(total.max(1));
                let mut buf = vec![0u8; chunk];
                let mut done = 0usize;
                while done < total {
                    let n = chunk.min(total - done);
                    read_exact_at(
                        &shard.file,
                        &mut buf[..n],
                        shard.data_start + begin + done as u64,
                    )
                    .map_err(|e| Error::io(&shard.path, e))?;
                    info.dtype.decode_into(&buf[..n], &mut values);
                    done += n;
                }
                values
            }
        };
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: name.to_string(),
                index,
            });
        }
        Ok(TensorRecord {
            shape: info.shape.clone(),
            dtype: info.dtype,
            values,
        })
    }

    /// Loads every tensor into memory.
    pub fn load_all(&self) -> Result<BTreeMap<String, TensorRecord>> {
        self.names()
            .map(|name| Ok((name.to_string(), self.load(name)?)))
            .collect()
    }
}

pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::open(path)
}

pub fn load_tensor(ckpt: &Checkpoint, name: &str) -> Result<TensorRecord> {
    ckpt.load(name)
}

fn insert_unique(
    entries: &mut BTreeMap<String, TensorInfo>,
    name: String,
    info: TensorInfo,
) -> Result<()> {
    if entries.contains_key(&name) {
        return Err(Error::DuplicateTensor(name));
    }
    entries.insert(name, info);
    Ok(())
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

struct ParsedTensor {
    shape: Vec<usize>,
    dtype: Dtype,
    begin: u64,
    end: u64,
}

impl ParsedTensor {
    fn into_info(self, shard: usize) -> TensorInfo {
        TensorInfo {
            shape: self.shape,
            dtype: self.dtype,
            storage: Storage::File {
                shard,
                begin: self.begin,
                end: self.end,
            },
        }
    }
}

struct ParsedContainer {
    shard: Shard,
    tensors: Vec<(String, ParsedTensor)>,
    metadata: BTreeMap<String, String>,
}

/// Header entries in file order. Unlike a map, keeps repeated keys so they can
/// be rejected.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry::<String, Value>()? {
                    out.push(entry);
                }
                Ok(RawHeader(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

fn read_container(path: &Path) -> Result<ParsedContainer> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };

    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if file_len < 8 {
        return Err(malformed(format!(
            "file is {file_len} bytes, shorter than the length prefix"
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > MAX_HEADER_LEN || header_len > file_len - 8 {
        return Err(malformed(format!(
            "header length {header_len} exceeds file size {file_len}"
        )));
    }
    let mut header = vec![0u8; header_len as usize];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let raw: RawHeader =
        serde_json::from_slice(&header).map_err(|e| malformed(format!("invalid JSON: {e}")))?;

    let data_start = 8 + header_len;
    let data_len = file_len - data_start;
    let mut tensors = Vec::with_capacity(raw.0.len());
    let mut seen = BTreeSet::new();
    let mut metadata = BTreeMap::new();
    for (name, value) in raw.0 {
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateTensor(name));
        }
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| malformed(format!("metadata must map strings to strings: {e}")))?;
            continue;
        }
        let entry: RawEntry =
            serde_json::from_value(value).map_err(|e| malformed(format!("entry `{name}`: {e}")))?;
        let dtype = Dtype::from_header(&entry.dtype).ok_or_else(|| Error::UnsupportedDtype {
            name: name.clone(),
            dtype: entry.dtype.clone(),
        })?;
        let [begin, end] = entry.data_offsets;
        let expected = entry
            .shape
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64));
        if end < begin || Some(end - begin) != expected || end > data_len {
            return Err(malformed(format!(
                "entry `{name}`: offsets [{begin}, {end}) do not fit shape {:?} of {dtype} in {data_len} data bytes",
                entry.shape
            )));
        }
        tensors.push((
            name,
            ParsedTensor {
                shape: entry.shape,
                dtype,
                begin,
                end,
            },
        ));
    }

    Ok(ParsedContainer {
        shard: Shard {
            path: path.to_path_buf(),
            file,
            data_start,
        },
        tensors,
        metadata,
    })
}

/// Name, shape and stored dtype of one tensor to be written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLayout {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

/// Writes a container one tensor at a time.
///
/// The header is fixed up front from the layout, so tensors must be supplied
/// in lexicographic name order. Bytes go to a temporary file in the target
/// directory which is renamed into place by [`CheckpointWriter::finish`]; a
/// writer dropped before that leaves nothing behind.
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<NamedTempFile>,
    layout: Vec<TensorLayout>,
    next: usize,
    scratch: Vec<u8>,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        mut layout: Vec<TensorLayout>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if layout.is_empty() {
            return Err(Error::invalid(
                "refusing to write a checkpoint with no tensors",
            ));
        }
        layout.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(pair) = layout.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::DuplicateTensor(pair[0].name.clone()));
        }
        if layout.iter().any(|t| t.name == METADATA_KEY) {
            return Err(Error::invalid(format!(
                "`{METADATA_KEY}` is not a valid tensor name"
            )));
        }

        let mut header = serde_json::Map::new();
        if !metadata.is_empty() {
            header.insert(METADATA_KEY.to_string(), json!(metadata));
        }
        let mut offset = 0u64;
        for t in &layout {
            let len = (numel(&t.shape) * t.dtype.size()) as u64;
            header.insert(
                t.name.clone(),
                json!({
                    "dtype": t.dtype.as_str(),
                    "shape": t.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut header = serde_json::to_vec(&header).expect("header serializes");
        while !header.len().is_multiple_of(8) {
            header.push(b' ');
        }

        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let tmp = NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = BufWriter::with_capacity(IO_CHUNK, tmp);
        out.write_all(&(header.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(&header))
            .map_err(|e| Error::io(&path, e))?;

        Ok(Self {
            path,
            out,
            layout,
            next: 0,
            scratch: Vec::new(),
        })
    }

    /// Layout in write order.
    pub fn layout(&self) -> &[TensorLayout] {
        &self.layout
    }

    /// Narrows `values` to the layout's dtype (round to nearest even) and
    /// appends them.
    pub fn write_tensor(&mut self, name: &str, values: &[f32]) -> Result<()> {
        let Some(expected) = self.layout.get(self.next) else {
            return Err(Error::invalid(format!(
                "tensor `{name}` is not in the layout"
            )));
        };
        if expected.name != name {
            return Err(Error::invalid(format!(
                "expected tensor `{}` next, got `{name}`",
                expected.name
            )));
        }
        if numel(&expected.shape) != values.len() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.shape.clone(),
                found: vec![values.len()],
            });
        }
        let dtype = expected.dtype;
        let per_chunk = IO_CHUNK / dtype.size();
        for (c, chunk) in values.chunks(per_chunk).enumerate() {
            if let Some(index) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                    index: c * per_chunk + index,
                });
            }
            self.scratch.clear();
            dtype
                .encode_into(chunk, &mut self.scratch)
                .map_err(|i| Error::Overflow {
                    name: name.to_string(),
                    dtype: dtype.as_str(),
                    value: chunk[i],
                })?;
            self.out
                .write_all(&self.scratch)
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.next += 1;
        Ok(())
    }

    /// Flushes and atomically moves the container to its final path.
    pub fn finish(self) -> Result<()> {
        if self.next != self.layout.len() {
            return Err(Error::invalid(format!(
                "{} of {} tensors were written",
                self.next,
                self.layout.len()
            )));
        }
        let path = self.path;
        let tmp = self
            .out
            .into_inner()
            .map_err(|e| Error::io(&path, e.into_error()))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

/// Writes `entries` as a single container with every tensor stored as `out_dtype`.
pub fn write_checkpoint(
    entries: &BTreeMap<String, TensorRecord>,
    path: impl AsRef<Path>,
    out_dtype: Dtype,
) -> Result<()> {
    write_checkpoint_with_metadata(entries, path, out_dtype, &BTreeMap::new())
}

pub fn write_checkpoint_with_metadata(
    entries: &BTreeMap<String, TensorRecord>,
    path: impl AsRef<Path>,
    out_dtype: Dtype,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let layout = entries
        .iter()
        .map(|(name, rec)| TensorLayout {
            name: name.clone(),
            shape: rec.shape.clone(),
            dtype: out_dtype,
        })
        .collect();
    let mut writer = CheckpointWriter::create(path, layout, metadata)?;
    for (name, rec) in entries {
        if numel(&rec.shape) != rec.values.len() {
            return Err(Error::invalid(format!(
                "tensor `{name}`: shape {:?} does not match {} values",
                rec.shape,
                rec.values.len()
            )));
        }
        writer.write_tensor(name, &rec.values)?;
    }
    writer.finish()
}

/// Returns the shared tensor names if every checkpoint has the same names and,
/// name by name, the same shape.
pub fn check_mergeable(ckpts: &[&Checkpoint]) -> Result<BTreeSet<String>> {
    let [first, rest @ ..] = ckpts else {
        return Err(Error::invalid("need at least two checkpoints"));
    };
    if rest.is_empty() {
        return Err(Error::invalid("need at least two checkpoints"));
    }
    let names: BTreeSet<&str> = first.names().collect();
    for other in rest {
        let theirs: BTreeSet<&str> = other.names().collect();
        let diff: Vec<String> = names
            .symmetric_difference(&theirs)
            .map(|s| s.to_string())
            .collect();
        if !diff.is_empty() {
            return Err(Error::NameSetMismatch(diff));
        }
    }
    for name in &names {
        let expected = &first.entries[*name].shape;
        for other in rest {
            let found = &other.entries[*name].shape;
            if found != expected {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: expected.clone(),
                    found: found.clone(),
                });
            }
        }
    }
    Ok(names.into_iter().map(str::to_string).collect())
}
