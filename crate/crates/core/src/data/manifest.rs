use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::image::probe_ppm;
use crate::error::{Error, Result};

pub const UNLABELED: &str = "UNLABELED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Guess the split from a manifest file name (`train.csv`, `val.csv`, ...).
    pub fn from_file_name(path: &Path) -> Option<Split> {
        let stem = path.file_stem()?.to_str()?;
        Split::ALL.into_iter().find(|s| stem.starts_with(s.as_str()))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest; relative paths resolve against the root.
    pub path: PathBuf,
    pub label: Option<usize>,
}

/// A `path,label` CSV listing, labels may be the `UNLABELED` sentinel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn resolved_paths(&self) -> Vec<PathBuf> {
        self.entries.iter().map(|e| self.resolve(e)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.entries.iter().all(|e| e.label.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,label\n");
        for e in &self.entries {
            let label = e.label.map_or_else(|| UNLABELED.to_string(), |l| l.to_string());
            out.push_str(&format!("{},{}\n", e.path.display(), label));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parse a manifest and check that every referenced image exists and has a
/// valid PPM header. The split is inferred from the file name and defaults to
/// `train`.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<DatasetManifest> {
    let split = Split::from_file_name(path).unwrap_or(Split::Train);
    load_manifest_as(path, split, num_classes)
}

pub fn load_manifest_as(path: &Path, split: Split, num_classes: usize) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, path, root, split, num_classes)?;
    for (i, entry) in manifest.entries.iter().enumerate() {
        let resolved = manifest.resolve(entry);
        probe_ppm(&resolved).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: line_of_entry(&text, i),
            msg: e.to_string(),
        })?;
    }
    Ok(manifest)
}

fn line_of_entry(text: &str, entry_index: usize) -> usize {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && l.trim() != "path,label")
        .nth(entry_index)
        .map_or(0, |(i, _)| i + 1)
}

pub(crate) fn parse_manifest(
    text: &str,
    path: &Path,
    root: PathBuf,
    split: Split,
    num_classes: usize,
) -> Result<DatasetManifest> {
    let err = |line: usize, msg: String| Error::Manifest { path: path.to_path_buf(), line, msg };
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() || (entries.is_empty() && row == "path,label") {
            continue;
        }
        let Some((p, label)) = row.rsplit_once(',') else {
            return Err(err(line, format!("expected `path,label`, got `{row}`")));
        };
        let p = p.trim();
        if p.is_empty() {
            return Err(err(line, "empty path".into()));
        }
        let label = match label.trim() {
            UNLABELED => None,
            l => {
                let v: usize = l.parse().map_err(|_| err(line, format!("label `{l}` is not a class index")))?;
                if v >= num_classes {
                    return Err(err(line, format!("label {v} out of range for {num_classes} classes")));
                }
                Some(v)
            }
        };
        if !seen.insert(p.to_string()) {
            return Err(err(line, format!("duplicate path `{p}`")));
        }
        entries.push(ManifestEntry { path: PathBuf::from(p), label });
    }
    Ok(DatasetManifest { root, split, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, k: usize) -> Result<DatasetManifest> {
        parse_manifest(text, Path::new("m.csv"), PathBuf::from("/data"), Split::Train, k)
    }

    #[test]
    fn labeled_row() {
        let m = parse("cat/001.ppm,4\n", 10).unwrap();
        assert_eq!(m.entries[0], ManifestEntry { path: "cat/001.ppm".into(), label: Some(4) });
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/cat/001.ppm"));
    }

    #[test]
    fn unlabeled_sentinel() {
        let m = parse("path,label\nimg.ppm,UNLABELED\n", 10).unwrap();
        assert_eq!(m.entries[0].label, None);
        assert!(!m.is_fully_labeled());
    }

    #[test]
    fn out_of_range_label_reports_line() {
        let err = parse("path,label\na.ppm,1\nb.ppm,30\n", 30).unwrap_err();
        match err {
            Error::Manifest { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("30"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate_rows() {
        assert!(matches!(parse("no-comma\n", 3), Err(Error::Manifest { line: 1, .. })));
        assert!(matches!(parse("a.ppm,x\n", 3), Err(Error::Manifest { line: 1, .. })));
        assert!(matches!(parse("a.ppm,1\na.ppm,2\n", 3), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let m = parse("a.ppm,1\nb.ppm,UNLABELED\n", 3).unwrap();
        let back = parse(&m.to_csv(), 3).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn missing_image_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        fs::write(&path, "path,label\nnope.ppm,0\n").unwrap();
        let err = load_manifest(&path, 2).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
    }

    #[test]
    fn split_inferred_from_name() {
        assert_eq!(Split::from_file_name(Path::new("/x/val.csv")), Some(Split::Val));
        assert_eq!(Split::from_file_name(Path::new("test.csv")), Some(Split::Test));
        assert_eq!(Split::from_file_name(Path::new("other.csv")), None);
    }
}
