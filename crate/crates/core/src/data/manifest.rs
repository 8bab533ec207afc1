use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest record with paths already resolved against the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub raw_path: PathBuf,
    pub reference_path: PathBuf,
    pub text: String,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    raw: String,
    #[serde(rename = "ref")]
    reference: String,
    #[serde(default)]
    text: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
    base_dir: PathBuf,
    split: Split,
}

impl DatasetManifest {
    /// Builds a manifest from already-resolved entries, rejecting duplicate ids.
    pub fn from_entries(entries: Vec<ManifestEntry>, base_dir: PathBuf, split: Split) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    line: i + 1,
                    id: e.id.clone(),
                });
            }
        }
        Ok(Self {
            entries,
            index,
            base_dir,
            split,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Writes JSON-Lines with paths made relative to `path`'s directory where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let dir = fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf());
        let rel = |p: &Path| {
            let abs = fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
            abs.strip_prefix(&dir)
                .map(Path::to_path_buf)
                .unwrap_or(abs)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = fs::File::create(path)?;
        for e in &self.entries {
            let rec = Record {
                id: e.id.clone(),
                raw: rel(&e.raw_path),
                reference: rel(&e.reference_path),
                text: e.text.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }
}

/// Parses and validates a JSON-Lines manifest. Images are not decoded here.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let body = fs::read_to_string(path)?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in body.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::SchemaError {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(Error::SchemaError {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId {
                line: line_no,
                id: rec.id,
            });
        }
        let raw_path = base_dir.join(&rec.raw);
        let reference_path = base_dir.join(&rec.reference);
        for p in [&raw_path, &reference_path] {
            if !p.is_file() {
                return Err(Error::MissingFile {
                    line: line_no,
                    path: p.clone(),
                });
            }
        }
        entries.push(ManifestEntry {
            id: rec.id,
            raw_path,
            reference_path,
            text: rec.text,
        });
    }
    DatasetManifest::from_entries(entries, base_dir, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_triplet, DEFAULT_PROMPT};
    use crate::image::ImageTensor;

    fn write_images(dir: &Path, names: &[&str]) {
        for n in names {
            ImageTensor::constant(0.5, 20, 24)
                .unwrap()
                .save(&dir.join(n))
                .unwrap();
        }
    }

    #[test]
    fn loads_well_formed_manifest_and_triplets() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.png", "b.png"]);
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            concat!(
                r#"{"id":"u0001","raw":"a.png","ref":"b.png","text":"A turtle"}"#, "\n",
                r#"{"id":"u0002","raw":"b.png","ref":"a.png","text":""}"#, "\n",
                "\n",
                r#"{"id":"u0003","raw":"a.png","ref":"a.png","text":"Coral"}"#, "\n",
            ),
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);

        let t = load_triplet(&m, "u0001", 32).unwrap();
        assert_eq!(t.raw.dims(), (3, 32, 32));
        assert_eq!(t.reference.dims(), (3, 32, 32));
        assert_eq!(t.text, "A turtle");
        assert_eq!(load_triplet(&m, "u0002", 16).unwrap().text, DEFAULT_PROMPT);
        assert!(matches!(load_triplet(&m, "nope", 32), Err(Error::UnknownId(_))));
    }

    #[test]
    fn duplicate_id_names_line() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.png"]);
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            concat!(
                r#"{"id":"u0001","raw":"a.png","ref":"a.png","text":"x"}"#, "\n",
                r#"{"id":"u0001","raw":"a.png","ref":"a.png","text":"y"}"#, "\n",
            ),
        )
        .unwrap();
        match load_manifest(&p) {
            Err(Error::DuplicateId { line, id }) => {
                assert_eq!(line, 2);
                assert_eq!(id, "u0001");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.png"]);
        let p = dir.path().join("m.jsonl");
        fs::write(&p, r#"{"id":"u1","raw":"gone.png","ref":"a.png","text":""}"#).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::MissingFile { line: 1, .. })));

        fs::write(&p, r#"{"id":"u1","ref":"a.png"}"#).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::SchemaError { line: 1, .. })));
        fs::write(&p, "not json").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::SchemaError { line: 1, .. })));
    }

    #[test]
    fn write_then_load_preserves_entries() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.png", "b.png"]);
        let p = dir.path().join("m.jsonl");
        fs::write(&p, r#"{"id":"k","raw":"a.png","ref":"b.png","text":"t"}"#).unwrap();
        let m = load_manifest(&p).unwrap();
        let q = dir.path().join("copy.jsonl");
        m.write(&q).unwrap();
        let back = load_manifest(&q).unwrap();
        assert_eq!(back.ids(), vec!["k"]);
        assert_eq!(back.entries()[0].text, "t");
    }
}
