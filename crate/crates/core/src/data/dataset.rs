use super::manifest::{Manifest, ViewDecl};
use super::mvf;
use super::splits::{CvSplit, Part};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input normalization applied when a view is loaded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    #[default]
    None,
    /// Zero mean, unit variance per utterance.
    PerUtterance,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "utterance" => Ok(Normalization::PerUtterance),
            other => Err(Error::contract(format!("unknown normalization `{other}`"))),
        }
    }
}

/// One view's features for every record, `[N, dims..]`, row-aligned with the manifest.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub decl: ViewDecl,
    pub data: Tensor<f32>,
}

/// A manifest with the requested views loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub views: Vec<ViewData>,
}

impl Dataset {
    pub fn load(manifest: Manifest, views: &[String], norm: Normalization) -> Result<Self> {
        let mut loaded = Vec::with_capacity(views.len());
        for name in views {
            let decl = manifest
                .view(name)
                .cloned()
                .ok_or_else(|| Error::schema(format!("manifest has no view `{name}`")))?;
            let mut items = Vec::with_capacity(manifest.records.len());
            for r in &manifest.records {
                let path = manifest.feature_path(r, name)?;
                let t = mvf::mvf_read(&path)?;
                if t.shape() != decl.dims.as_slice() {
                    return Err(Error::schema(format!(
                        "{}: dims {:?}, catalog says {:?}",
                        path.display(),
                        t.shape(),
                        decl.dims
                    )));
                }
                items.push(t);
            }
            let refs: Vec<&Tensor<f32>> = items.iter().collect();
            let mut data = Tensor::stack(&refs)?;
            if norm == Normalization::PerUtterance {
                normalize_rows(&mut data);
            }
            loaded.push(ViewData { decl, data });
        }
        Ok(Dataset {
            manifest,
            views: loaded,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn view_index(&self, name: &str) -> Result<usize> {
        self.views
            .iter()
            .position(|v| v.decl.name == name)
            .ok_or_else(|| Error::schema(format!("dataset has no view `{name}`")))
    }

    pub fn view_names(&self) -> Vec<String> {
        self.views.iter().map(|v| v.decl.name.clone()).collect()
    }

    /// Record indices (ascending) belonging to one part of a fold.
    pub fn indices(&self, split: &CvSplit, part: Part) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| split.part_of(r.session) == part)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn batch(&self, view: usize, idx: &[usize]) -> Tensor<f32> {
        self.views[view].data.select_rows(idx)
    }

    /// Restricts the dataset to the given records, preserving order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.records = idx.iter().map(|&i| self.manifest.records[i].clone()).collect();
        Dataset {
            manifest,
            views: self
                .views
                .iter()
                .map(|v| ViewData {
                    decl: v.decl.clone(),
                    data: v.data.select_rows(idx),
                })
                .collect(),
        }
    }

    /// Class index per record (None when unlabeled or outside `classes`).
    pub fn class_indices(&self, classes: &[String]) -> Vec<Option<usize>> {
        self.manifest
            .records
            .iter()
            .map(|r| r.label.as_ref().and_then(|l| classes.iter().position(|c| c == l)))
            .collect()
    }
}

fn normalize_rows(data: &mut Tensor<f32>) {
    let n = data.shape()[0];
    if n == 0 {
        return;
    }
    let inner = data.len() / n;
    for row in data.data_mut().chunks_mut(inner) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / inner as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / inner as f64;
        let sd = var.sqrt().max(1e-8);
        row.iter_mut().for_each(|v| *v = ((*v as f64 - mean) / sd) as f32);
    }
}
