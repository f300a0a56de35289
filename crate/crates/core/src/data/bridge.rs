//! Ingestion side of externally extracted views: per-utterance feature CSVs
//! (one id column, then value columns) and export validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::manifest::{Manifest, ViewDecl};
use super::mvf;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the reference paralinguistic functional set.
pub const EGEMAPS_DIM: usize = 88;
/// Layer stack of the base wav2vec 2.0 model: CNN output plus 12 transformer layers.
pub const W2V2_LAYERS: usize = 13;
pub const W2V2_DIM: usize = 768;

/// Parsed feature table. Row order follows the file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f32>)>,
}

impl FeatureTable {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.rows.iter().find(|(i, _)| i == id).map(|(_, v)| v.as_slice())
    }
}

fn sniff_delimiter(header: &str) -> u8 {
    if header.matches(';').count() > header.matches(',').count() {
        b';'
    } else {
        b','
    }
}

/// Parses a feature CSV. The first column is the utterance id; a
/// `frameTime` column directly after it (as written by functional
/// extractors) is dropped. `,` and `;` delimiters are both accepted.
/// With `expected` set, any other value-column count is a schema error.
pub fn parse_feature_csv(text: &str, expected: Option<usize>) -> Result<FeatureTable> {
    let header = text
        .lines()
        .next()
        .ok_or_else(|| Error::format("feature CSV", "empty file"))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(header))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let bad = |d: String| Error::format("feature CSV", d);
    let head: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(|s| s.trim_matches('\'').to_string())
        .collect();
    if head.len() < 2 {
        return Err(bad("need an id column and at least one value column".into()));
    }
    let skip = if head[1] == "frameTime" { 2 } else { 1 };
    let columns = head[skip..].to_vec();
    if let Some(n) = expected {
        if columns.len() != n {
            return Err(Error::schema(format!(
                "feature CSV has {} value columns, expected {n}",
                columns.len()
            )));
        }
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != head.len() {
            return Err(Error::schema(format!(
                "row {} has {} fields, header has {}",
                line + 2,
                rec.len(),
                head.len()
            )));
        }
        let id = rec[0].trim_matches('\'').to_string();
        let values = rec
            .iter()
            .skip(skip)
            .map(|s| {
                let v: f32 = s
                    .parse()
                    .map_err(|_| bad(format!("row {}: `{s}` is not a number", line + 2)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::DegenerateInput(format!(
                        "row {} (`{id}`) holds a non-finite value",
                        line + 2
                    )))
                }
            })
            .collect::<Result<Vec<f32>>>()?;
        rows.push((id, values));
    }
    Ok(FeatureTable { columns, rows })
}

pub fn read_feature_csv(path: &Path, expected: Option<usize>) -> Result<FeatureTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(&text, expected)
}

/// Writes one `[width]` MVF vector per row as `<out_dir>/<id>.mvf`.
/// Returns id -> file path.
pub fn table_to_mvf(table: &FeatureTable, out_dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = BTreeMap::new();
    for (id, values) in &table.rows {
        let path = out_dir.join(format!("{id}.mvf"));
        mvf::mvf_write(&path, &Tensor::new(vec![values.len()], values.clone())?)?;
        if out.insert(id.clone(), path).is_some() {
            return Err(Error::schema(format!("duplicate id `{id}` in feature table")));
        }
    }
    Ok(out)
}

/// Declares `view` on the manifest and points every record at its file.
/// Paths under the manifest root are stored relative to it.
pub fn attach_view(manifest: &mut Manifest, view: ViewDecl, files: &BTreeMap<String, PathBuf>) -> Result<()> {
    let missing: Vec<&str> = manifest
        .records
        .iter()
        .filter(|r| !files.contains_key(&r.id))
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::schema(format!(
            "view `{}` has no features for {} record(s): {}",
            view.name,
            missing.len(),
            missing.iter().take(5).copied().collect::<Vec<_>>().join(", ")
        )));
    }
    for r in &mut manifest.records {
        let p = &files[&r.id];
        let rel = p
            .strip_prefix(&manifest.root)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.clone());
        r.view_paths.insert(view.name.clone(), rel);
    }
    manifest.views.retain(|v| v.name != view.name);
    manifest.views.push(view);
    Ok(())
}

/// Outcome of [`validate_export`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExportReport {
    pub utterances: usize,
    pub views: usize,
    pub problems: Vec<String>,
}

impl ExportReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn summary(&self) -> String {
        if self.is_ok() {
            format!("OK, {} utterances, {} views", self.utterances, self.views)
        } else {
            format!("{} problem(s):\n  {}", self.problems.len(), self.problems.join("\n  "))
        }
    }
}

/// Checks every declared view file: readable MVF, declared dims, finite values.
/// Problems are collected rather than returned at the first one.
pub fn validate_export(manifest: &Manifest) -> ExportReport {
    let mut report = ExportReport {
        utterances: manifest.records.len(),
        views: manifest.views.len(),
        problems: Vec::new(),
    };
    if let Err(e) = manifest.validate_structure() {
        report.problems.push(e.to_string());
    }
    for r in &manifest.records {
        for v in &manifest.views {
            let Ok(path) = manifest.feature_path(r, &v.name) else {
                continue;
            };
            match mvf::mvf_read(&path) {
                Err(e) => report.problems.push(format!("{}: {e}", path.display())),
                Ok(t) if t.shape() != v.dims.as_slice() => report.problems.push(
                    Error::schema(format!(
                        "{}: dims {:?}, declared {:?}",
                        path.display(),
                        t.shape(),
                        v.dims
                    ))
                    .to_string(),
                ),
                Ok(t) if !t.all_finite() => report.problems.push(format!("{}: non-finite values", path.display())),
                Ok(_) => {}
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_with(cols: usize, sep: char) -> String {
        let mut s = String::from("name");
        s.push(sep);
        s.push_str("frameTime");
        for c in 0..cols {
            s.push_str(&format!("{sep}f{c}"));
        }
        s.push('\n');
        for id in ["a", "b"] {
            s.push_str(&format!("'{id}'{sep}0.0"));
            for c in 0..cols {
                s.push_str(&format!("{sep}{}", c as f32 * 0.5));
            }
            s.push('\n');
        }
        s
    }

    #[test]
    fn semicolon_table_with_frame_time() {
        let t = parse_feature_csv(&csv_with(EGEMAPS_DIM, ';'), Some(EGEMAPS_DIM)).unwrap();
        assert_eq!(t.width(), 88);
        assert_eq!(t.rows[1].0, "b");
        assert_eq!(t.get("a").unwrap()[3], 1.5);
    }

    #[test]
    fn column_drift_is_schema_error() {
        let err = parse_feature_csv(&csv_with(87, ','), Some(EGEMAPS_DIM)).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        let err = parse_feature_csv("id,x,y\nu1,1.0,NaN\n", None).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }
}
