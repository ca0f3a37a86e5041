use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::label::Label;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub label: Label,
    pub subset: String,
}

/// A `path,label,subset` CSV listing labelled images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl SampleManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        SampleManifest {
            root: root.into(),
            entries,
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Subset tags in sorted order.
    pub fn subsets(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.subset.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,label,subset\n");
        for e in &self.entries {
            let path = e.path.to_string_lossy().replace('\\', "/");
            writeln!(out, "{path},{},{}", e.label, e.subset).unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let field = |line: usize| format!("{}:{line}", path.display());
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(field(1), format!("{other:?}")),
        })?;
        let headers = reader
            .headers()
            .map_err(|e| Error::format(field(1), e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "subset"] {
            return Err(Error::format(
                field(1),
                format!("expected header path,label,subset, found {headers:?}"),
            ));
        }
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::format(field(i + 2), e.to_string()))?;
            let label: Label = record[1]
                .parse()
                .map_err(|e: Error| Error::format(field(i + 2), e.to_string()))?;
            let subset = record[2].trim().to_string();
            if subset.is_empty() {
                return Err(Error::format(field(i + 2), "empty subset tag"));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(record[0].trim()),
                label,
                subset,
            });
        }
        let manifest = SampleManifest { root, entries };
        for e in &manifest.entries {
            let p = manifest.resolve(e);
            if !p.is_file() {
                return Err(Error::Data(format!("manifest entry {} does not exist", p.display())));
            }
        }
        Ok(manifest)
    }
}
