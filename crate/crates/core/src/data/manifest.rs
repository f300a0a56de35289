//! Text manifests indexing utterances and their per-view feature files.
//!
//! ```text
//! # comment
//! view <name> <rank> <d1> .. <dr>
//! labels <l1>,<l2>,..
//! <id>|<session>|<speaker>|<label or ->|<view>=<path>;<view>=<path>
//! ```
//!
//! Relative feature paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::mvf;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewDecl {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub session: u32,
    pub speaker: String,
    pub label: Option<String>,
    pub view_paths: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub views: Vec<ViewDecl>,
    pub labels: Vec<String>,
    pub records: Vec<UtteranceRecord>,
    /// Directory relative feature paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn view(&self, name: &str) -> Option<&ViewDecl> {
        self.views.iter().find(|v| v.name == name)
    }

    /// Sorted distinct session numbers.
    pub fn sessions(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.iter().map(|r| r.session).collect();
        set.into_iter().collect()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    pub fn feature_path(&self, record: &UtteranceRecord, view: &str) -> Result<PathBuf> {
        record
            .view_paths
            .get(view)
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::MissingView {
                record: record.id.clone(),
                view: view.to_string(),
                path: PathBuf::new(),
            })
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let bad = |n: usize, d: &str| Error::format("manifest", format!("line {}: {d}", n + 1));
        let mut views = Vec::new();
        let mut labels = Vec::new();
        let mut records = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("view ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                let rank: usize = f
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(n, "bad view rank"))?;
                if f.len() != 2 + rank {
                    return Err(bad(n, "view dims do not match rank"));
                }
                let dims = f[2..]
                    .iter()
                    .map(|d| d.parse::<usize>().map_err(|_| bad(n, "bad view dim")))
                    .collect::<Result<Vec<_>>>()?;
                views.push(ViewDecl {
                    name: f[0].to_string(),
                    dims,
                });
            } else if let Some(rest) = line.strip_prefix("labels ") {
                labels = rest
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            } else {
                let f: Vec<&str> = line.split('|').collect();
                if f.len() != 5 {
                    return Err(bad(n, "record needs 5 `|`-separated fields"));
                }
                let session = f[1].trim().parse().map_err(|_| bad(n, "bad session"))?;
                let label = match f[3].trim() {
                    "" | "-" => None,
                    l => Some(l.to_string()),
                };
                let mut view_paths = BTreeMap::new();
                for kv in f[4].split(';').filter(|s| !s.trim().is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| bad(n, "view path needs `view=path`"))?;
                    view_paths.insert(k.trim().to_string(), PathBuf::from(v.trim()));
                }
                records.push(UtteranceRecord {
                    id: f[0].trim().to_string(),
                    session,
                    speaker: f[2].trim().to_string(),
                    label,
                    view_paths,
                });
            }
        }
        Ok(Manifest {
            views,
            labels,
            records,
            root: root.to_path_buf(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.views {
            let dims: Vec<String> = v.dims.iter().map(usize::to_string).collect();
            out.push_str(&format!("view {} {} {}\n", v.name, v.dims.len(), dims.join(" ")));
        }
        out.push_str(&format!("labels {}\n", self.labels.join(",")));
        for r in &self.records {
            let paths: Vec<String> = r
                .view_paths
                .iter()
                .map(|(k, p)| format!("{k}={}", p.display()))
                .collect();
            out.push_str(&format!(
                "{}|{}|{}|{}|{}\n",
                r.id,
                r.session,
                r.speaker,
                r.label.as_deref().unwrap_or("-"),
                paths.join(";")
            ));
        }
        out
    }

    /// Structural checks that need no file access.
    pub fn validate_structure(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::schema(format!("duplicate record id `{}`", r.id)));
            }
            for v in &self.views {
                if !r.view_paths.contains_key(&v.name) {
                    return Err(Error::MissingView {
                        record: r.id.clone(),
                        view: v.name.clone(),
                        path: PathBuf::new(),
                    });
                }
            }
            if let Some(l) = &r.label {
                if !self.labels.is_empty() && !self.labels.contains(l) {
                    return Err(Error::schema(format!("record `{}` has undeclared label `{l}`", r.id)));
                }
            }
        }
        let sessions = self.sessions();
        if let (Some(&lo), Some(&hi)) = (sessions.first(), sessions.last()) {
            if (hi - lo + 1) as usize != sessions.len() {
                return Err(Error::schema(format!("sessions {sessions:?} are not contiguous")));
            }
        }
        Ok(())
    }

    /// Every referenced feature file exists and matches its view's dims.
    pub fn validate_files(&self) -> Result<()> {
        for r in &self.records {
            for v in &self.views {
                let path = self.feature_path(r, &v.name)?;
                if !path.is_file() {
                    return Err(Error::MissingView {
                        record: r.id.clone(),
                        view: v.name.clone(),
                        path,
                    });
                }
                let dims = mvf::mvf_dims(&path)?;
                if dims != v.dims {
                    return Err(Error::schema(format!(
                        "record `{}` view `{}`: file holds {dims:?}, catalog says {:?}",
                        r.id, v.name, v.dims
                    )));
                }
            }
        }
        Ok(())
    }

    /// Keeps records whose label is in `keep`.
    pub fn filter_by_labels(&self, keep: &[String]) -> Result<Manifest> {
        if keep.is_empty() {
            return Err(Error::contract("label filter must keep at least one label"));
        }
        let records: Vec<UtteranceRecord> = self
            .records
            .iter()
            .filter(|r| r.label.as_ref().is_some_and(|l| keep.contains(l)))
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(Error::EmptyDataset(format!("no records labeled {keep:?}")));
        }
        Ok(Manifest {
            views: self.views.clone(),
            labels: self.labels.iter().filter(|l| keep.contains(l)).cloned().collect(),
            records,
            root: self.root.clone(),
        })
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::parse(&text, &root)?;
    m.validate_structure()?;
    m.validate_files()?;
    Ok(m)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

/// Raw-label to target-class mapping; unmapped labels fall outside the target set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    map: BTreeMap<String, String>,
    classes: Vec<String>,
}

impl LabelMap {
    pub fn new(pairs: &[(&str, &str)]) -> Self {
        let mut classes: Vec<String> = Vec::new();
        let mut map = BTreeMap::new();
        for &(raw, target) in pairs {
            map.insert(raw.to_string(), target.to_string());
            if !classes.iter().any(|c| c == target) {
                classes.push(target.to_string());
            }
        }
        LabelMap { map, classes }
    }

    pub fn identity(labels: &[String]) -> Self {
        let pairs: Vec<(&str, &str)> = labels.iter().map(|l| (l.as_str(), l.as_str())).collect();
        LabelMap::new(&pairs)
    }

    /// Four-class setup with excited folded into happy.
    pub fn four_class() -> Self {
        LabelMap::new(&[
            ("neutral", "neutral"),
            ("angry", "angry"),
            ("sad", "sad"),
            ("happy", "happy"),
            ("excited", "happy"),
        ])
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn map(&self, raw: &str) -> Option<&str> {
        self.map.get(raw).map(String::as_str)
    }

    pub fn class_index(&self, raw: &str) -> Option<usize> {
        let target = self.map(raw)?;
        self.classes.iter().position(|c| c == target)
    }

    /// Rewrites labels to target classes, dropping records outside the target set.
    pub fn apply(&self, manifest: &Manifest) -> Result<Manifest> {
        let records: Vec<UtteranceRecord> = manifest
            .records
            .iter()
            .filter_map(|r| {
                let target = self.map(r.label.as_deref()?)?;
                Some(UtteranceRecord {
                    label: Some(target.to_string()),
                    ..r.clone()
                })
            })
            .collect();
        if records.is_empty() {
            return Err(Error::EmptyDataset("no record maps to a target class".into()));
        }
        Ok(Manifest {
            views: manifest.views.clone(),
            labels: self.classes.clone(),
            records,
            root: manifest.root.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn write_fixture(dir: &Path, egemaps_dim: usize, skip_spec_for: Option<&str>) -> PathBuf {
        let mut text =
            String::from("view w2v2 3 2 3 4\nview spec 2 4 5\nview egemaps 1 42\nlabels neutral,angry,sad,happy\n");
        for (i, label) in ["neutral", "angry", "sad", "happy"].iter().enumerate() {
            let id = format!("u{i}");
            let mut paths = Vec::new();
            for (view, dims) in [
                ("w2v2", vec![2, 3, 4]),
                ("spec", vec![4, 5]),
                ("egemaps", vec![egemaps_dim]),
            ] {
                let rel = format!("{view}_{id}.mvf");
                if !(view == "spec" && skip_spec_for == Some(id.as_str())) {
                    mvf::mvf_write(&dir.join(&rel), &Tensor::zeros(&dims)).unwrap();
                }
                paths.push(format!("{view}={rel}"));
            }
            text.push_str(&format!("{id}|{}|spk{i}|{label}|{}\n", i % 2 + 1, paths.join(";")));
        }
        let p = dir.join("m.txt");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&write_fixture(dir.path(), 42, None)).unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(m.views.len(), 3);
        assert_eq!(m.sessions(), vec![1, 2]);
        let again = Manifest::parse(&m.to_text(), &m.root).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn missing_view_file_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&write_fixture(dir.path(), 42, Some("u2"))).unwrap_err();
        match err {
            Error::MissingView { record, view, .. } => {
                assert_eq!(record, "u2");
                assert_eq!(view, "spec");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dim_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&write_fixture(dir.path(), 40, None)).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err:?}");
    }

    #[test]
    fn label_filtering() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&write_fixture(dir.path(), 42, None)).unwrap();
        assert_eq!(m.filter_by_labels(&m.labels).unwrap().records, m.records);
        let neutral = m.filter_by_labels(&["neutral".to_string()]).unwrap();
        assert_eq!(neutral.records.len(), 1);
        assert_eq!(neutral.records[0].label.as_deref(), Some("neutral"));

        let target: Vec<String> = vec!["neutral".into(), "angry".into()];
        let ood: Vec<String> = vec!["sad".into(), "happy".into()];
        let a = m.filter_by_labels(&target).unwrap();
        let b = m.filter_by_labels(&ood).unwrap();
        let mut ids: Vec<_> = a.records.iter().chain(&b.records).map(|r| r.id.clone()).collect();
        ids.sort();
        assert_eq!(ids, vec!["u0", "u1", "u2", "u3"]);

        assert!(matches!(
            m.filter_by_labels(&["bored".to_string()]),
            Err(Error::EmptyDataset(_))
        ));
        assert!(matches!(m.filter_by_labels(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn excited_merges_into_happy() {
        let lm = LabelMap::four_class();
        assert_eq!(lm.classes().len(), 4);
        assert_eq!(lm.map("excited"), Some("happy"));
        assert_eq!(lm.class_index("excited"), lm.class_index("happy"));
        assert_eq!(lm.map("frustrated"), None);
    }
}
