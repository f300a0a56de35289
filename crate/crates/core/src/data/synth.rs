//! Seeded synthetic multi-view corpus.
//!
//! Every utterance has a latent `z = class mean + speaker offset + noise`.
//! Each view sees `z`, concatenated with view-private nuisance factors,
//! through its own random mixing `tanh(W [z; u] + b)` plus additive noise; sequence-shaped views spread that vector over time
//! with a per-utterance phase-jittered envelope. Labels are recoverable from
//! any view, and only the latent is shared across views.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{Dataset, ViewData};
use super::manifest::{write_manifest, Manifest, UtteranceRecord, ViewDecl};
use super::mvf;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub latent_dim: usize,
    /// One speaker per session; records are dealt to sessions round-robin.
    pub n_speakers: usize,
    pub views: Vec<ViewDecl>,
    /// Minimum distance between class means, in units of `latent_sigma`.
    pub class_separation: f64,
    pub latent_sigma: f64,
    pub speaker_sigma: f64,
    /// View-private additive noise.
    pub noise_sigma: f64,
    /// Nuisance factors drawn per utterance and view, mixed like `z`.
    pub private_dim: usize,
    pub private_sigma: f64,
    /// Scale on the mixing weights; larger values saturate `tanh` more.
    pub mixing_gain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_class: 200,
            n_classes: 4,
            latent_dim: 8,
            n_speakers: 5,
            views: vec![
                ViewDecl {
                    name: "w2v2".into(),
                    dims: vec![4, 8, 32],
                },
                ViewDecl {
                    name: "spec".into(),
                    dims: vec![16, 16],
                },
                ViewDecl {
                    name: "egemaps".into(),
                    dims: vec![42],
                },
            ],
            class_separation: 4.0,
            latent_sigma: 1.0,
            speaker_sigma: 0.3,
            noise_sigma: 0.5,
            private_dim: 8,
            private_sigma: 1.5,
            mixing_gain: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.n_classes < 2 || self.latent_dim == 0 || self.n_speakers == 0 {
            return Err(Error::contract(
                "synthetic sizes must be positive (and at least 2 classes)",
            ));
        }
        if self.views.is_empty() || self.views.iter().any(|v| v.dims.is_empty() || v.dims.contains(&0)) {
            return Err(Error::contract("synthetic views need positive dims"));
        }
        if self.noise_sigma < 0.0 || self.latent_sigma < 0.0 || self.speaker_sigma < 0.0 || self.private_sigma < 0.0 {
            return Err(Error::contract("noise levels must be non-negative"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.n_classes == 4 {
            ["neutral", "angry", "sad", "happy"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        } else {
            (0..self.n_classes).map(|c| format!("class{c}")).collect()
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class means scaled so the closest pair sits `class_separation * latent_sigma` apart.
fn class_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.latent_dim).map(|_| normal(rng)).collect())
        .collect();
    let mut min_d = f64::INFINITY;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            let d: f64 = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            min_d = min_d.min(d);
        }
    }
    let target = cfg.class_separation * cfg.latent_sigma.max(1e-12);
    let s = target / min_d.max(1e-12);
    for m in &mut means {
        m.iter_mut().for_each(|v| *v *= s);
    }
    means
}

struct Mixing {
    w: Vec<f64>,
    b: Vec<f64>,
    out: usize,
}

impl Mixing {
    fn new(out: usize, latent: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let scale = gain / (latent as f64).sqrt();
        Mixing {
            w: (0..out * latent).map(|_| normal(rng) * scale).collect(),
            b: (0..out).map(|_| normal(rng) * 0.3).collect(),
            out,
        }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let l = z.len();
        (0..self.out)
            .map(|o| {
                let mut acc = self.b[o];
                for (k, &zk) in z.iter().enumerate() {
                    acc += self.w[o * l + k] * zk;
                }
                acc.tanh()
            })
            .collect()
    }
}

/// Per-view mixings: one per layer for rank-3 views, one otherwise.
fn view_mixings(cfg: &SynthConfig, seed: u64) -> Vec<Vec<Mixing>> {
    cfg.views
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let mut rng = sub_rng(seed, 100 + k as u64);
            let inputs = cfg.latent_dim + cfg.private_dim;
            match v.dims.len() {
                3 => (0..v.dims[0])
                    .map(|_| Mixing::new(v.dims[2], inputs, cfg.mixing_gain, &mut rng))
                    .collect(),
                _ => vec![Mixing::new(v.dims[0], inputs, cfg.mixing_gain, &mut rng)],
            }
        })
        .collect()
}

fn envelope(frames: usize, phase: f64) -> Vec<f64> {
    (0..frames)
        .map(|t| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * (t as f64 / frames as f64 + phase)).sin())
        .collect()
}

fn render_view(decl: &ViewDecl, mix: &[Mixing], z: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut data = Vec::with_capacity(decl.dims.iter().product());
    match decl.dims[..] {
        [layers, frames, feats] => {
            for m in mix.iter().take(layers) {
                let u = m.apply(z);
                let env = envelope(frames, rng.random::<f64>());
                for e in env {
                    for &uf in u.iter().take(feats) {
                        data.push((uf * e + noise * normal(rng)) as f32);
                    }
                }
            }
        }
        [bands, frames] => {
            let u = mix[0].apply(z);
            let env = envelope(frames, rng.random::<f64>());
            for &ub in u.iter().take(bands) {
                for &e in &env {
                    data.push((ub * e + noise * normal(rng)) as f32);
                }
            }
        }
        _ => {
            for v in mix[0].apply(z) {
                data.push((v + noise * normal(rng)) as f32);
            }
        }
    }
    Tensor::new(decl.dims.clone(), data).expect("rendered size matches dims")
}

fn record_id(i: usize) -> String {
    format!("syn{i:05}")
}

fn relative_path(view: &str, id: &str) -> PathBuf {
    PathBuf::from(view).join(format!("{id}.mvf"))
}

/// Builds the corpus in memory; `synth_generate` writes the same bytes to disk.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let classes = cfg.class_names();
    let means = class_means(cfg, &mut sub_rng(seed, 1));
    let mut spk_rng = sub_rng(seed, 2);
    let speakers: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|_| {
            (0..cfg.latent_dim)
                .map(|_| cfg.speaker_sigma * normal(&mut spk_rng))
                .collect()
        })
        .collect();
    let mixings = view_mixings(cfg, seed);
    let mut inst_rng = sub_rng(seed, 3);

    let n = cfg.n_per_class * cfg.n_classes;
    let mut records = Vec::with_capacity(n);
    let mut per_view: Vec<Vec<Tensor<f32>>> = vec![Vec::with_capacity(n); cfg.views.len()];
    for i in 0..n {
        let class = i % cfg.n_classes;
        let session = (i / cfg.n_classes) % cfg.n_speakers;
        let z: Vec<f64> = (0..cfg.latent_dim)
            .map(|d| means[class][d] + speakers[session][d] + cfg.latent_sigma * normal(&mut inst_rng))
            .collect();
        let id = record_id(i);
        let mut view_paths = std::collections::BTreeMap::new();
        for (k, decl) in cfg.views.iter().enumerate() {
            let mut zu = z.clone();
            zu.extend((0..cfg.private_dim).map(|_| cfg.private_sigma * normal(&mut inst_rng)));
            per_view[k].push(render_view(decl, &mixings[k], &zu, cfg.noise_sigma, &mut inst_rng));
            view_paths.insert(decl.name.clone(), relative_path(&decl.name, &id));
        }
        records.push(UtteranceRecord {
            id,
            session: session as u32 + 1,
            speaker: format!("spk{}", session + 1),
            label: Some(classes[class].clone()),
            view_paths,
        });
    }
    let views = cfg
        .views
        .iter()
        .zip(per_view)
        .map(|(decl, items)| {
            let refs: Vec<&Tensor<f32>> = items.iter().collect();
            Ok(ViewData {
                decl: decl.clone(),
                data: Tensor::stack(&refs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: Manifest {
            views: cfg.views.clone(),
            labels: classes,
            records,
            root: PathBuf::new(),
        },
        views,
    })
}

/// Writes `manifest.txt` and one MVF file per record and view under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let ds = synth_dataset(cfg, seed)?;
    for v in &cfg.views {
        let dir = out_dir.join(&v.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (k, view) in ds.views.iter().enumerate() {
        for (i, r) in ds.manifest.records.iter().enumerate() {
            let item = view.data.select_rows(&[i]).reshape(&cfg.views[k].dims)?;
            mvf::mvf_write(&out_dir.join(&r.view_paths[&view.decl.name]), &item)?;
        }
    }
    let mut manifest = ds.manifest;
    manifest.root = out_dir.to_path_buf();
    write_manifest(&out_dir.join("manifest.txt"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_manifest;

    fn small() -> SynthConfig {
        SynthConfig {
            n_per_class: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn balanced_labels_and_sessions() {
        let cfg = SynthConfig {
            n_per_class: 50,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&cfg, 1).unwrap();
        assert_eq!(ds.len(), 200);
        for c in cfg.class_names() {
            let n = ds
                .manifest
                .records
                .iter()
                .filter(|r| r.label.as_ref() == Some(&c))
                .count();
            assert_eq!(n, 50);
        }
        assert_eq!(ds.manifest.sessions(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn files_round_trip_and_are_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_generate(&small(), 5, a.path()).unwrap();
        synth_generate(&small(), 5, b.path()).unwrap();
        let m = load_manifest(&a.path().join("manifest.txt")).unwrap();
        assert_eq!(m.records.len(), 40);
        for r in &m.records {
            for p in r.view_paths.values() {
                assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join("manifest.txt")).unwrap(),
            fs::read(b.path().join("manifest.txt")).unwrap()
        );
        let names: Vec<String> = m.views.iter().map(|v| v.name.clone()).collect();
        let loaded = Dataset::load(m, &names, Default::default()).unwrap();
        let mem = synth_dataset(&small(), 5).unwrap();
        for (x, y) in loaded.views.iter().zip(&mem.views) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn class_means_differ_in_every_view() {
        for seed in 0..5 {
            let cfg = small();
            let ds = synth_dataset(&cfg, seed).unwrap();
            let classes = ds.class_indices(&cfg.class_names());
            for view in &ds.views {
                let inner = view.data.len() / ds.len();
                let mut means = vec![vec![0.0f64; inner]; cfg.n_classes];
                for (i, c) in classes.iter().enumerate() {
                    for (m, &v) in means[c.unwrap()].iter_mut().zip(view.data.row_slice(i)) {
                        *m += v as f64;
                    }
                }
                for a in 0..cfg.n_classes {
                    for b in a + 1..cfg.n_classes {
                        let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                        assert!(d > 0.0);
                    }
                }
            }
        }
    }
}
