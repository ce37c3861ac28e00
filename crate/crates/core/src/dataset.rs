//! Manifests (`path,label,split` CSV) and the in-memory datasets built from
//! them. Rows may point at WAV files or at pre-computed `.spec` files.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{load_audio, read_spec, FrontendConfig, LogMelSpectrogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Data(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Data(format!("manifest header: {e}")))?;
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Data(format!(
                "manifest header must be `path,label,split`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("manifest row {}: {e}", i + 2)))?;
            let row = ManifestRow {
                path: rec[0].to_string(),
                label: rec[1].to_string(),
                split: rec[2].parse()?,
            };
            if row.path.is_empty() {
                return Err(Error::Data(format!("manifest row {}: empty path", i + 2)));
            }
            if !seen.insert(row.path.clone()) {
                return Err(Error::Data(format!("duplicate manifest path `{}`", row.path)));
            }
            rows.push(row);
        }
        Ok(Self { rows, root })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "label", "split"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.path.as_str(), r.label.as_str(), &r.split.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 csv")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Sorted distinct non-empty labels over every split, so class indices
    /// agree between splits.
    pub fn classes(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter(|r| !r.label.is_empty())
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Loads one split. An empty split is a usage error reported as `Data`.
    pub fn load(&self, split: Split, frontend: &FrontendConfig) -> Result<Dataset> {
        let classes = self.classes();
        let mut examples = Vec::new();
        for row in self.rows_in(split) {
            let path = self.root.join(&row.path);
            let spec = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("spec")) {
                read_spec(&path)?
            } else {
                frontend.analyze(&load_audio(&path, frontend.sample_rate)?)?
            };
            let label = if row.label.is_empty() {
                None
            } else {
                classes.iter().position(|c| *c == row.label)
            };
            examples.push(Example { spec, label, path });
        }
        if examples.is_empty() {
            return Err(Error::Data(format!("split `{split}` has no rows")));
        }
        Dataset::new(examples, classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub spec: LogMelSpectrogram,
    pub label: Option<usize>,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, classes: Vec<String>) -> Result<Self> {
        if let Some(first) = examples.first() {
            let (bins, floor) = (first.spec.bins(), first.spec.floor_db());
            for e in &examples {
                if e.spec.bins() != bins || e.spec.floor_db() != floor {
                    return Err(Error::Data(format!(
                        "{}: {} bins / floor {} dB, dataset has {bins} / {floor}",
                        e.path.display(),
                        e.spec.bins(),
                        e.spec.floor_db()
                    )));
                }
                if let Some(y) = e.label {
                    if y >= classes.len() {
                        return Err(Error::Data(format!("label {y} outside 0..{}", classes.len())));
                    }
                }
            }
        }
        Ok(Self { examples, classes })
    }

    /// Unlabeled dataset over the given spectrograms.
    pub fn from_specs(specs: Vec<LogMelSpectrogram>) -> Result<Self> {
        let examples = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| Example {
                spec,
                label: None,
                path: PathBuf::from(format!("#{i}")),
            })
            .collect();
        Self::new(examples, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn bins(&self) -> Option<usize> {
        self.examples.first().map(|e| e.spec.bins())
    }

    pub fn floor_db(&self) -> Option<f64> {
        self.examples.first().map(|e| e.spec.floor_db())
    }

    /// Every label, or `None` if any example is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{write_spec, write_wav, Waveform};

    #[test]
    fn parse_and_classes() {
        let m = Manifest::parse(
            "path,label,split\na.spec,dog,train\nb.spec,cat,train\nc.spec,dog,test\n",
            PathBuf::new(),
        )
        .unwrap();
        assert_eq!(m.classes(), vec!["cat".to_string(), "dog".to_string()]);
        assert_eq!(m.rows_in(Split::Test).count(), 1);
        let again = Manifest::parse(&m.to_csv(), PathBuf::new()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_bad_manifests() {
        assert!(Manifest::parse("file,label,split\n", PathBuf::new()).is_err());
        assert!(Manifest::parse("path,label,split\na,x,dev\n", PathBuf::new()).is_err());
        let dup = Manifest::parse("path,label,split\na,x,train\na,y,test\n", PathBuf::new());
        assert!(dup.unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn loads_spec_and_wav_rows() {
        let dir = tempfile::tempdir().unwrap();
        let s = LogMelSpectrogram::filled(64, 5, -30.0, -80.0).unwrap();
        write_spec(&dir.path().join("a.spec"), &s).unwrap();
        let w = Waveform::new(vec![0.1; 4096], 22050).unwrap();
        write_wav(&dir.path().join("b.wav"), &w).unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "path,label,split\na.spec,x,train\nb.wav,y,train\nc.spec,x,val\n").unwrap();
        let m = Manifest::read(&path).unwrap();
        let train = m.load(Split::Train, &FrontendConfig::default()).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train.labels(), Some(vec![0, 1]));
        assert_eq!(train.examples[0].spec, s);
        assert_eq!(train.examples[1].spec.bins(), 64);
        assert!(matches!(m.load(Split::Test, &FrontendConfig::default()), Err(Error::Data(_))));
        assert!(matches!(m.load(Split::Val, &FrontendConfig::default()), Err(Error::Io { .. })));
    }
}
