//! Labeled image manifests.
//!
//! A manifest is a CSV file with the header `path,label,dataset,split`.
//! Paths are relative to the manifest's directory. The split column may be
//! empty or one of `train`, `val`, `test`. Comment lines before the header of
//! the form `# classes <dataset>=<n>` declare class counts; without a
//! declaration the count is inferred as the largest label plus one.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Option<Split>> {
        match s {
            "" => Some(None),
            "train" => Some(Some(Split::Train)),
            "val" => Some(Some(Split::Val)),
            "test" => Some(Some(Split::Test)),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    pub label: usize,
    pub dataset: String,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
    pub class_counts: BTreeMap<String, usize>,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

const HEADER: [&str; 4] = ["path", "label", "dataset", "split"];

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Declared class count, or largest label + 1.
    pub fn class_count(&self, dataset: &str) -> usize {
        self.class_counts.get(dataset).copied().unwrap_or_else(|| {
            self.records
                .iter()
                .filter(|r| r.dataset == dataset)
                .map(|r| r.label + 1)
                .max()
                .unwrap_or(0)
        })
    }

    /// Class count across all datasets.
    pub fn num_classes(&self) -> usize {
        self.datasets().iter().map(|d| self.class_count(d)).max().unwrap_or(0)
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.dataset) {
                seen.push(r.dataset.clone());
            }
        }
        seen
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Same root and class declarations, selected records.
    pub fn subset(&self, indices: &[usize]) -> Manifest {
        Manifest {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            class_counts: self.class_counts.clone(),
            root: self.root.clone(),
        }
    }

    pub fn with_split(&self, split: Split) -> Manifest {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.records[i].split == Some(split))
            .collect();
        self.subset(&idx)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (d, n) in &self.class_counts {
            out.push_str(&format!("# classes {d}={n}\n"));
        }
        out.push_str(&HEADER.join(","));
        out.push('\n');
        for r in &self.records {
            let split = r.split.map_or("", Split::as_str);
            out.push_str(&format!("{},{},{},{}\n", r.path, r.label, r.dataset, split));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, root)
}

pub fn parse_manifest(text: &str, root: PathBuf) -> Result<Manifest> {
    let mut class_counts = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.strip_prefix('#') else {
            break;
        };
        if let Some(decl) = rest.trim().strip_prefix("classes") {
            for item in decl.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let parsed = item
                    .split_once('=')
                    .and_then(|(d, n)| Some((d.trim().to_string(), n.trim().parse::<usize>().ok()?)));
                let (d, n) = parsed.ok_or_else(|| Error::Manifest {
                    line: i + 1,
                    msg: format!("bad class declaration {item:?}"),
                })?;
                class_counts.insert(d, n);
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Manifest {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().map(str::trim).ne(HEADER.iter().copied()) {
        let line = header.position().map_or(1, |p| p.line() as usize);
        return Err(Error::Manifest {
            line,
            msg: format!("expected header {:?}", HEADER.join(",")),
        });
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Manifest {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Manifest { line, msg };
        if row.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", row.len())));
        }
        let path = row[0].trim().to_string();
        if path.is_empty() {
            return Err(bad("empty path".into()));
        }
        let label: usize = row[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("label {:?} is not a non-negative integer", &row[1])))?;
        let dataset = row[2].trim().to_string();
        let split = Split::parse(row[3].trim()).ok_or_else(|| bad(format!("unknown split {:?}", &row[3])))?;
        if let Some(&n) = class_counts.get(&dataset) {
            if label >= n {
                return Err(bad(format!("label {label} out of range for {dataset} ({n} classes)")));
            }
        }
        if !seen.insert((dataset.clone(), path.clone())) {
            return Err(bad(format!("duplicate path {path}")));
        }
        records.push(Record {
            path,
            label,
            dataset,
            split,
        });
    }
    Ok(Manifest {
        records,
        class_counts,
        root,
    })
}
