//! One sample per line: `path,label,domain`, optionally followed by the nine
//! canonicalization fields of [`Geometry`]. Lines starting with `#` are
//! comments. Relative paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Geometry;

/// Class names of the two-class setting; index 0 is the positive class.
pub const CLASS_NAMES: [&str; 2] = ["covid", "non-covid"];
const UNLABELED: &str = "unlabeled";
const BASE_FIELDS: usize = 3;
const GEOMETRY_FIELDS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    /// `None` for unlabeled samples.
    pub label: Option<usize>,
    pub domain: Domain,
    /// How the stored image was derived from the original, when known.
    pub geometry: Option<Geometry>,
}

impl SampleRecord {
    pub fn new(path: impl Into<PathBuf>, label: Option<usize>, domain: Domain) -> Self {
        SampleRecord {
            path: path.into(),
            label,
            domain,
            geometry: None,
        }
    }
}

/// Accepts the class names, plain indices, and `unlabeled`.
pub fn parse_label(s: &str) -> Option<Option<usize>> {
    if s == UNLABELED {
        return Some(None);
    }
    if let Some(i) = CLASS_NAMES.iter().position(|&n| n == s) {
        return Some(Some(i));
    }
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) {
        return s.parse().ok().map(Some);
    }
    None
}

pub fn label_name(label: Option<usize>) -> String {
    match label {
        None => UNLABELED.to_string(),
        Some(i) if i < CLASS_NAMES.len() => CLASS_NAMES[i].to_string(),
        Some(i) => i.to_string(),
    }
}

fn parse_geometry(fields: &[&str]) -> std::result::Result<Geometry, String> {
    let int = |i: usize| -> std::result::Result<usize, String> {
        fields[i]
            .parse()
            .map_err(|_| format!("geometry field {} is not an integer: {:?}", i + 1, fields[i]))
    };
    let scale: f64 = fields[3]
        .parse()
        .map_err(|_| format!("scale is not a number: {:?}", fields[3]))?;
    Ok(Geometry {
        original_width: int(0)?,
        original_height: int(1)?,
        side: int(2)?,
        scale,
        scaled_height: int(4)?,
        pad_top: int(5)?,
        pad_bottom: int(6)?,
        crop_top: int(7)?,
        crop_bottom: int(8)?,
    })
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let fields: Vec<&str> = row.iter().collect();
        if records.is_empty() && fields.first() == Some(&"path") {
            continue;
        }
        if fields.len() != BASE_FIELDS && fields.len() != BASE_FIELDS + GEOMETRY_FIELDS {
            return Err(fail(format!(
                "expected {} or {} fields, found {}",
                BASE_FIELDS,
                BASE_FIELDS + GEOMETRY_FIELDS,
                fields.len()
            )));
        }
        if fields[0].is_empty() {
            return Err(fail("empty path".into()));
        }
        let label = parse_label(fields[1]).ok_or_else(|| fail(format!("unknown label {:?}", fields[1])))?;
        let domain: Domain = fields[2].parse().map_err(fail)?;
        let geometry = if fields.len() > BASE_FIELDS {
            Some(parse_geometry(&fields[BASE_FIELDS..]).map_err(fail)?)
        } else {
            None
        };
        let resolved = base.join(fields[0]);
        if !seen.insert(resolved.clone()) {
            return Err(fail(format!("duplicate path {}", fields[0])));
        }
        records.push(SampleRecord {
            path: resolved,
            label,
            domain,
            geometry,
        });
    }
    Ok(records)
}

/// Writes `records`, storing paths relative to the manifest's directory
/// where possible.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut writer = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    for r in records {
        let shown = r.path.strip_prefix(base).unwrap_or(&r.path);
        let mut fields = vec![
            shown.to_string_lossy().into_owned(),
            label_name(r.label),
            r.domain.to_string(),
        ];
        if let Some(g) = &r.geometry {
            fields.extend(
                [g.original_width, g.original_height, g.side]
                    .iter()
                    .map(|v| v.to_string()),
            );
            fields.push(format!("{:?}", g.scale));
            fields.extend(
                [g.scaled_height, g.pad_top, g.pad_bottom, g.crop_top, g.crop_bottom]
                    .iter()
                    .map(|v| v.to_string()),
            );
        }
        writer.write_record(&fields).map_err(io)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
