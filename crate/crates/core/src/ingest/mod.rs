//! Source point-cloud parsers and directory conversion into `.pcrecord`.

mod parse;
pub mod synth;

use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{
    f32s_from_le, f32s_to_le, write_dataset, FieldKind, FileHeader, FormatError, Sample, Schema,
    SliceSummary, Value, WriteOptions,
};

pub use parse::parse_source;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    PlyAscii,
    PlyBinaryLe,
    Obj,
    XyzText,
    KittiBin,
    Npy,
}

impl SourceKind {
    pub const ALL: [SourceKind; 6] = [
        Self::PlyAscii,
        Self::PlyBinaryLe,
        Self::Obj,
        Self::XyzText,
        Self::KittiBin,
        Self::Npy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PlyAscii => "ply_ascii",
            Self::PlyBinaryLe => "ply_binary_le",
            Self::Obj => "obj",
            Self::XyzText => "xyz_text",
            Self::KittiBin => "kitti_bin",
            Self::Npy => "npy",
        }
    }

    /// File extensions picked up by `convert`.
    pub fn extensions(self) -> &'static [&'static str] {
        match self {
            Self::PlyAscii | Self::PlyBinaryLe => &["ply"],
            Self::Obj => &["obj"],
            Self::XyzText => &["xyz", "txt", "csv"],
            Self::KittiBin => &["bin"],
            Self::Npy => &["npy"],
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown source kind `{s}`"))
    }
}

/// Attributes recovered from one source file. All present attributes have
/// one entry per point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedCloud {
    pub points: Vec<[f32; 3]>,
    pub normals: Option<Vec<[f32; 3]>>,
    /// RGB in [0, 1].
    pub colors: Option<Vec<[f32; 3]>>,
    pub intensity: Option<Vec<f32>>,
    pub label: Option<i32>,
}

impl ParsedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the first `n` points, or repeats the cloud cyclically up to `n`.
    pub fn resize_points(&mut self, n: usize) {
        fn fit<T: Clone>(v: &mut Vec<T>, n: usize) {
            if v.len() >= n {
                v.truncate(n);
            } else if !v.is_empty() {
                let orig = v.len();
                for i in orig..n {
                    v.push(v[i % orig].clone());
                }
            }
        }
        fit(&mut self.points, n);
        if let Some(v) = &mut self.normals {
            fit(v, n);
        }
        if let Some(v) = &mut self.colors {
            fit(v, n);
        }
        if let Some(v) = &mut self.intensity {
            fit(v, n);
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("unsupported property: {0}")]
    UnsupportedProperty(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no {kind} input files under {dir}")]
    NoInputFiles { dir: PathBuf, kind: SourceKind },
    #[error("failed to parse {path}: {source}")]
    ParseFailure { path: PathBuf, source: ParseError },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Role a schema field plays when filled from a parsed cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Points,
    Normals,
    Colors,
    Intensity,
    Label,
}

fn role(name: &str) -> Option<Role> {
    Some(match name {
        "data" | "points" | "xyz" => Role::Points,
        "normal" | "normals" => Role::Normals,
        "color" | "colors" | "rgb" => Role::Colors,
        "intensity" => Role::Intensity,
        "label" => Role::Label,
        _ => return None,
    })
}

fn field_roles(schema: &Schema) -> Result<Vec<(String, Role)>, IngestError> {
    let mut out: Vec<(String, Role)> = Vec::new();
    for f in &schema.fields {
        let r = role(&f.name).ok_or_else(|| {
            IngestError::SchemaMismatch(format!("no source attribute maps to field `{}`", f.name))
        })?;
        if out.iter().any(|(_, o)| *o == r) {
            return Err(IngestError::SchemaMismatch(format!(
                "field `{}` duplicates a role",
                f.name
            )));
        }
        let ok = match r {
            Role::Points | Role::Normals | Role::Colors => {
                f.ty.kind == FieldKind::Bytes && f.ty.shape == [3]
            }
            Role::Intensity => f.ty.kind == FieldKind::Bytes && f.ty.elements() == 1,
            Role::Label => f.ty.kind == FieldKind::Int32 && f.ty.elements() == 1,
        };
        if !ok {
            return Err(IngestError::SchemaMismatch(format!(
                "field `{}` has an incompatible type",
                f.name
            )));
        }
        out.push((f.name.clone(), r));
    }
    Ok(out)
}

fn flat(v: &[[f32; 3]]) -> Vec<u8> {
    f32s_to_le(v.as_flattened())
}

/// Fills the schema's fields from a parsed cloud.
pub fn cloud_to_sample(cloud: &ParsedCloud, schema: &Schema) -> Result<Sample, IngestError> {
    let roles = field_roles(schema)?;
    let has = |r: Role| roles.iter().any(|(_, o)| *o == r);
    for (present, r, name) in [
        (cloud.normals.is_some(), Role::Normals, "normals"),
        (cloud.colors.is_some(), Role::Colors, "colors"),
        (cloud.intensity.is_some(), Role::Intensity, "intensity"),
    ] {
        if present && !has(r) {
            return Err(IngestError::SchemaMismatch(format!(
                "source has {name} but the schema has no field for them"
            )));
        }
    }
    let missing = |what: &str| IngestError::SchemaMismatch(format!("source has no {what}"));
    let mut sample = Sample::new();
    for (name, r) in roles {
        let v = match r {
            Role::Points => Value::Bytes(flat(&cloud.points)),
            Role::Normals => Value::Bytes(flat(
                cloud.normals.as_deref().ok_or_else(|| missing("normals"))?,
            )),
            Role::Colors => Value::Bytes(flat(
                cloud.colors.as_deref().ok_or_else(|| missing("colors"))?,
            )),
            Role::Intensity => Value::Bytes(f32s_to_le(
                cloud
                    .intensity
                    .as_deref()
                    .ok_or_else(|| missing("intensity"))?,
            )),
            Role::Label => Value::Int32(vec![cloud.label.ok_or_else(|| missing("label"))?]),
        };
        sample.insert(name, v);
    }
    Ok(sample)
}

/// Inverse of [`cloud_to_sample`].
pub fn sample_to_cloud(sample: &Sample, schema: &Schema) -> Result<ParsedCloud, IngestError> {
    fn triples(b: &[u8]) -> Vec<[f32; 3]> {
        f32s_from_le(b)
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }
    let mut cloud = ParsedCloud::default();
    for (name, r) in field_roles(schema)? {
        let v = sample
            .get(&name)
            .ok_or_else(|| IngestError::SchemaMismatch(format!("sample lacks `{name}`")))?;
        match (r, v) {
            (Role::Points, Value::Bytes(b)) => cloud.points = triples(b),
            (Role::Normals, Value::Bytes(b)) => cloud.normals = Some(triples(b)),
            (Role::Colors, Value::Bytes(b)) => cloud.colors = Some(triples(b)),
            (Role::Intensity, Value::Bytes(b)) => cloud.intensity = Some(f32s_from_le(b)),
            (Role::Label, Value::Int32(l)) if l.len() == 1 => cloud.label = Some(l[0]),
            _ => {
                return Err(IngestError::SchemaMismatch(format!(
                    "field `{name}` has the wrong value type"
                )))
            }
        }
    }
    Ok(cloud)
}

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub kind: SourceKind,
    pub slice_count: usize,
    pub group_size: usize,
    pub num_points: Option<usize>,
    pub stem: String,
}

impl ConvertOptions {
    pub fn new(kind: SourceKind) -> Self {
        let w = WriteOptions::default();
        Self {
            kind,
            slice_count: w.slice_count,
            group_size: w.group_size,
            num_points: None,
            stem: w.stem,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub kind: SourceKind,
    pub files: usize,
    pub samples: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
    /// `input_bytes / output_bytes`.
    pub ratio: f64,
    /// Class names in label order; empty when the schema has no label.
    pub classes: Vec<String>,
    /// NPY inputs stored as float64 and rounded to float32.
    pub narrowed_float64_files: usize,
    pub slices: Vec<SliceSummary>,
}

#[derive(Debug, Clone)]
pub struct Conversion {
    pub headers: Vec<FileHeader>,
    pub report: ConversionReport,
}

/// Source files of `kind` under `dir`, sorted by path.
pub fn list_source_files(dir: &Path, kind: SourceKind) -> Result<Vec<PathBuf>, IngestError> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir) {
        let entry = entry.map_err(|e| IngestError::Io {
            path: e.path().unwrap_or(dir).to_path_buf(),
            source: e
                .into_io_error()
                .unwrap_or_else(|| std::io::Error::other("walk loop")),
        })?;
        let matches = entry.file_type().is_file()
            && entry
                .path()
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| kind.extensions().iter().any(|x| x.eq_ignore_ascii_case(e)));
        if matches {
            files.push(
                entry
                    .path()
                    .strip_prefix(dir)
                    .unwrap_or(entry.path())
                    .to_path_buf(),
            );
        }
    }
    files.sort();
    Ok(files)
}

/// Top-level directory a file sits under, used as its class name.
fn class_of(rel: &Path) -> Option<String> {
    let mut comps = rel.components();
    let first = comps.next()?;
    comps.next()?;
    Some(first.as_os_str().to_string_lossy().into_owned())
}

const PARSE_CHUNK: usize = 64;

/// Converts every `kind` file under `source_dir` into a dataset in `out_dir`.
///
/// Files are parsed in parallel but written in sorted path order. When the
/// schema has a `label` field, labels are the index of each file's top-level
/// directory among the sorted class names.
pub fn convert(
    source_dir: &Path,
    schema: &Schema,
    opts: &ConvertOptions,
    out_dir: &Path,
) -> Result<Conversion, IngestError> {
    let roles = field_roles(schema)?;
    let files = list_source_files(source_dir, opts.kind)?;
    if files.is_empty() {
        return Err(IngestError::NoInputFiles {
            dir: source_dir.to_path_buf(),
            kind: opts.kind,
        });
    }
    let wants_label = roles.iter().any(|(_, r)| *r == Role::Label);
    let mut classes: Vec<String> = Vec::new();
    if wants_label {
        for f in &files {
            let c = class_of(f).ok_or_else(|| {
                IngestError::SchemaMismatch(format!(
                    "{} is not inside a class directory",
                    f.display()
                ))
            })?;
            classes.push(c);
        }
        classes.sort();
        classes.dedup();
    }

    struct Parsed {
        sample: Sample,
        bytes: u64,
        narrowed: bool,
    }
    let load = |rel: &PathBuf| -> Result<Parsed, IngestError> {
        let path = source_dir.join(rel);
        let bytes = fs::read(&path).map_err(|source| IngestError::Io {
            path: path.clone(),
            source,
        })?;
        let mut cloud =
            parse_source(&bytes, opts.kind).map_err(|source| IngestError::ParseFailure {
                path: path.clone(),
                source,
            })?;
        if let Some(n) = opts.num_points {
            cloud.resize_points(n);
        }
        if wants_label {
            let class = class_of(rel).expect("checked above");
            cloud.label = Some(
                classes
                    .binary_search(&class)
                    .expect("class collected above") as i32,
            );
        }
        let narrowed = opts.kind == SourceKind::Npy && parse::npy_is_f64(&bytes);
        Ok(Parsed {
            sample: cloud_to_sample(&cloud, schema)?,
            bytes: bytes.len() as u64,
            narrowed,
        })
    };

    let failure: RefCell<Option<IngestError>> = RefCell::new(None);
    let input_bytes = RefCell::new(0u64);
    let narrowed = RefCell::new(0usize);
    let samples = files
        .chunks(PARSE_CHUNK)
        .flat_map(|chunk| chunk.par_iter().map(load).collect::<Vec<_>>())
        .map_while(|r| match r {
            Ok(p) => {
                *input_bytes.borrow_mut() += p.bytes;
                *narrowed.borrow_mut() += usize::from(p.narrowed);
                Some(p.sample)
            }
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                None
            }
        });
    let wopts = WriteOptions {
        slice_count: opts.slice_count,
        group_size: opts.group_size,
        stem: opts.stem.clone(),
    };
    let written = write_dataset(samples, schema, &wopts, out_dir);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let written = written?;
    let output_bytes = written.total_bytes();
    let input_bytes = input_bytes.into_inner();
    let report = ConversionReport {
        kind: opts.kind,
        files: files.len(),
        samples: written.headers.iter().map(|h| h.sample_count()).sum(),
        input_bytes,
        output_bytes,
        ratio: input_bytes as f64 / output_bytes as f64,
        classes,
        narrowed_float64_files: narrowed.into_inner(),
        slices: written
            .slices
            .iter()
            .map(|s| SliceSummary {
                header: None,
                ..s.clone()
            })
            .collect(),
    };
    log::info!(
        "converted {} files into {} samples, ratio {:.2}",
        report.files,
        report.samples,
        report.ratio
    );
    Ok(Conversion {
        headers: written.headers,
        report,
    })
}
