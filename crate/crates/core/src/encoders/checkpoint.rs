//! Checkpoint files.
//!
//! ```text
//! PCLCKPT1
//! meta <key> <value>              (sorted by key)
//! param <name> <d1,d2,..> <offset> <count>
//! end
//! <payload: concatenated little-endian f32 values>
//! ```
//!
//! `offset` and `count` are in elements from the start of the payload.
//! Parameters appear in registration order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{EncoderSpec, MultiViewModel, ViewClassifier};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

const MAGIC: &str = "PCLCKPT1";

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub meta: BTreeMap<String, String>,
    pub store: ParamStore<f32>,
}

impl ModelCheckpoint {
    pub fn from_multiview<T: Real>(model: &MultiViewModel<T>) -> Self {
        let mut meta = BTreeMap::new();
        let views: Vec<&str> = model.specs.iter().map(|s| s.view.as_str()).collect();
        meta.insert("views".to_string(), views.join(","));
        for spec in &model.specs {
            meta.insert(format!("spec.{}", spec.view), spec.encode_meta());
        }
        meta.insert("seed".to_string(), model.seed.to_string());
        ModelCheckpoint {
            meta,
            store: model.store.cast(),
        }
    }

    /// A fine-tuned single-view classifier; `classes` are stored in class-index order.
    pub fn from_classifier(model: &ViewClassifier<f32>, classes: &[String]) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "classifier".to_string());
        meta.insert("views".to_string(), model.spec.view.clone());
        meta.insert(format!("spec.{}", model.spec.view), model.spec.encode_meta());
        meta.insert("classes".to_string(), classes.join(","));
        ModelCheckpoint {
            meta,
            store: model.store.clone(),
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.meta.get("kind").is_some_and(|k| k == "classifier")
    }

    pub fn classes(&self) -> Vec<String> {
        self.meta
            .get("classes")
            .map(|v| v.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    /// Inverse of [`ModelCheckpoint::from_classifier`].
    pub fn to_classifier(&self) -> Result<ViewClassifier<f32>> {
        if !self.is_classifier() {
            return Err(Error::schema(
                "checkpoint holds a pre-trained multi-view model, not a classifier",
            ));
        }
        let views = self.views();
        let [view] = views.as_slice() else {
            return Err(Error::schema(format!("classifier checkpoint lists views {views:?}")));
        };
        let spec = self.spec_for(view)?;
        let mut model = ViewClassifier::new(spec, self.classes().len(), 0)?;
        model.store.load_values_from(&self.store)?;
        Ok(model)
    }

    pub fn views(&self) -> Vec<String> {
        self.meta
            .get("views")
            .map(|v| v.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    pub fn spec_for(&self, view: &str) -> Result<EncoderSpec> {
        let raw = self
            .meta
            .get(&format!("spec.{view}"))
            .ok_or_else(|| Error::schema(format!("checkpoint has no encoder for view `{view}`")))?;
        EncoderSpec::decode_meta(view, raw)
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    /// Rebuilds a multi-view model and copies every stored parameter into it.
    pub fn to_multiview(&self) -> Result<MultiViewModel<f32>> {
        let specs = self
            .views()
            .iter()
            .map(|v| self.spec_for(v))
            .collect::<Result<Vec<_>>>()?;
        let seed = self.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut model = MultiViewModel::new(specs, seed)?;
        model.store.load_values_from(&self.store)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for p in self.store.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!(
                "param {} {} {offset} {}\n",
                p.name,
                dims.join(","),
                p.value.len()
            ));
            offset += p.value.len();
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset * 4);
        for p in self.store.iter() {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("param ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(&format!("bad param line `{line}`")));
                }
                let dims = f[1]
                    .split(',')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(line)))
                    .collect::<Result<Vec<_>>>()?;
                let offset: usize = f[2].parse().map_err(|_| bad(line))?;
                let count: usize = f[3].parse().map_err(|_| bad(line))?;
                if dims.iter().product::<usize>() != count {
                    return Err(bad(&format!("dims disagree with count in `{line}`")));
                }
                entries.push((f[0].to_string(), dims, offset, count));
            } else {
                return Err(bad(&format!("unexpected header line `{line}`")));
            }
        }
        let payload = &bytes[pos..];
        let total: usize = entries.iter().map(|e| e.3).sum();
        if payload.len() != total * 4 {
            return Err(bad(&format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                total * 4
            )));
        }
        let mut store = ParamStore::new();
        for (name, dims, offset, count) in entries {
            if offset + count > total {
                return Err(bad("parameter outside payload"));
            }
            let data = payload[offset * 4..(offset + count) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.add(name, Tensor::new(dims, data)?)?;
        }
        Ok(ModelCheckpoint { meta, store })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderKind, ViewClassifier};

    fn model() -> MultiViewModel<f32> {
        let specs = vec![
            EncoderSpec::new("a", EncoderKind::VectorMlp, vec![6]),
            EncoderSpec::new("b", EncoderKind::W2v2Pointwise, vec![3, 4, 5]),
        ];
        MultiViewModel::new(specs, 3).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let mut ck = ModelCheckpoint::from_multiview(&model());
        ck.set_meta("val_loss", 0.1f64 + 0.2);
        let bytes = ck.to_bytes();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        for (p, q) in back.store.iter().zip(ck.store.iter()) {
            assert_eq!(p.name, q.name);
            let pb: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u32> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let bytes = ModelCheckpoint::from_multiview(&model()).to_bytes();
        let r = ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 4]);
        assert!(matches!(r, Err(Error::Format { .. })));
        assert!(matches!(
            ModelCheckpoint::from_bytes(b"nope\n"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn wrong_spec_is_schema_error() {
        let ck = ModelCheckpoint::from_multiview(&model());
        let wrong = EncoderSpec::new("a", EncoderKind::VectorMlp, vec![7]);
        let r = ViewClassifier::<f32>::from_checkpoint(&ck, &wrong, 4, 0);
        assert!(matches!(r, Err(Error::Schema(_))));
        let missing = EncoderSpec::new("zz", EncoderKind::VectorMlp, vec![6]);
        assert!(matches!(
            ViewClassifier::<f32>::from_checkpoint(&ck, &missing, 4, 0),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn pretrain_checkpoint_feeds_finetuning() {
        let m = model();
        let ck = ModelCheckpoint::from_multiview(&m);
        let spec = ck.spec_for("b").unwrap();
        let vc = ViewClassifier::<f32>::from_checkpoint(&ck, &spec, 4, 11).unwrap();
        assert!(vc.store.iter().all(|p| !p.name.contains(".proj.")));
        assert!(vc.store.iter().any(|p| p.name.starts_with("b.classifier")));
        let enc_src: Vec<_> = m.store.iter().filter(|p| p.name.starts_with("b.encoder")).collect();
        for (p, q) in vc.store.iter().filter(|p| p.name.starts_with("b.encoder")).zip(enc_src) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
    }
}
