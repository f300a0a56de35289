//! View-level encoders, projection and classification heads.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_weight, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Width of every view-level representation and of the contrastive space.
pub const REPR_DIM: usize = 128;
pub const HIDDEN_DIM: usize = 256;
/// Default spectrogram CNN channel widths.
pub const CNN_CHANNELS: [usize; 3] = [16, 48, 96];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// Learnable layer mixing, two pointwise 1-D convolutions, temporal mean.
    W2v2Pointwise,
    /// Three conv/ReLU/max-pool blocks, global average pool, linear.
    SpecCnn,
    /// Two-layer MLP.
    VectorMlp,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::W2v2Pointwise => "w2v2_pointwise",
            EncoderKind::SpecCnn => "spec_cnn",
            EncoderKind::VectorMlp => "vector_mlp",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w2v2_pointwise" => Ok(EncoderKind::W2v2Pointwise),
            "spec_cnn" => Ok(EncoderKind::SpecCnn),
            "vector_mlp" => Ok(EncoderKind::VectorMlp),
            other => Err(Error::contract(format!("unknown encoder kind `{other}`"))),
        }
    }
}

/// Per-instance input dims: `[layers, frames, features]` for `W2v2Pointwise`,
/// `[mels, frames]` for `SpecCnn`, `[features]` for `VectorMlp`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub view: String,
    pub kind: EncoderKind,
    pub input_dims: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderSpec {
    pub fn new(view: impl Into<String>, kind: EncoderKind, input_dims: Vec<usize>) -> Self {
        EncoderSpec {
            view: view.into(),
            kind,
            input_dims,
            output_dim: REPR_DIM,
        }
    }

    /// Picks the encoder family from the rank of a view's per-instance dims.
    pub fn for_view(view: impl Into<String>, input_dims: Vec<usize>) -> Result<Self> {
        let kind = match input_dims.len() {
            3 => EncoderKind::W2v2Pointwise,
            2 => EncoderKind::SpecCnn,
            1 => EncoderKind::VectorMlp,
            r => return Err(Error::contract(format!("no encoder for rank-{r} inputs"))),
        };
        Ok(EncoderSpec::new(view, kind, input_dims))
    }

    pub fn validate(&self) -> Result<()> {
        let rank = match self.kind {
            EncoderKind::W2v2Pointwise => 3,
            EncoderKind::SpecCnn => 2,
            EncoderKind::VectorMlp => 1,
        };
        if self.input_dims.len() != rank || self.input_dims.contains(&0) {
            return Err(Error::contract(format!(
                "{} encoder for `{}` needs {rank} positive input dims, got {:?}",
                self.kind, self.view, self.input_dims
            )));
        }
        if self.kind == EncoderKind::SpecCnn && self.input_dims.iter().any(|&d| d < 8) {
            return Err(Error::contract(format!(
                "spectrogram input {:?} too small for three 2x2 pools",
                self.input_dims
            )));
        }
        Ok(())
    }

    /// `kind:d1xd2x...`, as stored in checkpoint metadata.
    pub fn encode_meta(&self) -> String {
        let dims: Vec<String> = self.input_dims.iter().map(usize::to_string).collect();
        format!("{}:{}:{}", self.kind, dims.join("x"), self.output_dim)
    }

    pub fn decode_meta(view: &str, s: &str) -> Result<Self> {
        let bad = || Error::format("encoder spec", s.to_string());
        let mut parts = s.split(':');
        let kind: EncoderKind = parts.next().ok_or_else(bad)?.parse()?;
        let input_dims = parts
            .next()
            .ok_or_else(bad)?
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let output_dim = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Ok(EncoderSpec {
            view: view.to_string(),
            kind,
            input_dims,
            output_dim,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn build<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.weight"), init_weight(&[fan_in, fan_out], fan_in, rng))?;
        let b = store.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear { w, b })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn forward_pointwise<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_pointwise_1d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct W2v2Encoder {
    layer_weights: ParamId,
    conv1: Linear,
    conv2: Linear,
    dims: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct SpecCnnEncoder {
    convs: Vec<(ParamId, ParamId)>,
    out: Linear,
    dims: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct MlpEncoder {
    l1: Linear,
    l2: Linear,
    input_dim: usize,
}

#[derive(Clone, Debug)]
pub enum Encoder {
    W2v2(W2v2Encoder),
    SpecCnn(SpecCnnEncoder),
    Mlp(MlpEncoder),
}

impl Encoder {
    /// Registers the encoder's parameters under `prefix` and initializes them.
    pub fn build<T: Real>(
        spec: &EncoderSpec,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let out = spec.output_dim;
        match spec.kind {
            EncoderKind::W2v2Pointwise => {
                let [l, t, f] = [spec.input_dims[0], spec.input_dims[1], spec.input_dims[2]];
                let layer_weights = store.add(format!("{prefix}.layer_weights"), Tensor::zeros(&[l]))?;
                let conv1 = Linear::build(store, &format!("{prefix}.conv1"), f, out, rng)?;
                let conv2 = Linear::build(store, &format!("{prefix}.conv2"), out, out, rng)?;
                Ok(Encoder::W2v2(W2v2Encoder {
                    layer_weights,
                    conv1,
                    conv2,
                    dims: [l, t, f],
                }))
            }
            EncoderKind::SpecCnn => {
                let mut convs = Vec::with_capacity(3);
                let mut cin = 1;
                for (i, &cout) in CNN_CHANNELS.iter().enumerate() {
                    let fan_in = cin * 9;
                    let w = store.add(
                        format!("{prefix}.conv{}.weight", i + 1),
                        init_weight(&[cout, cin, 3, 3], fan_in, rng),
                    )?;
                    let b = store.add(format!("{prefix}.conv{}.bias", i + 1), Tensor::zeros(&[cout]))?;
                    convs.push((w, b));
                    cin = cout;
                }
                let out = Linear::build(store, &format!("{prefix}.fc"), cin, out, rng)?;
                Ok(Encoder::SpecCnn(SpecCnnEncoder {
                    convs,
                    out,
                    dims: [spec.input_dims[0], spec.input_dims[1]],
                }))
            }
            EncoderKind::VectorMlp => {
                let d = spec.input_dims[0];
                let l1 = Linear::build(store, &format!("{prefix}.fc1"), d, HIDDEN_DIM, rng)?;
                let l2 = Linear::build(store, &format!("{prefix}.fc2"), HIDDEN_DIM, out, rng)?;
                Ok(Encoder::Mlp(MlpEncoder { l1, l2, input_dim: d }))
            }
        }
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<usize> {
        let s = g.shape(x);
        let want: &[usize] = match self {
            Encoder::W2v2(e) => &e.dims,
            Encoder::SpecCnn(e) => &e.dims,
            Encoder::Mlp(e) => std::slice::from_ref(&e.input_dim),
        };
        if s.len() != want.len() + 1 || s[1..] != *want {
            return Err(Error::shape(format!("encoder expects [N, {want:?}], got {s:?}")));
        }
        Ok(s[0])
    }

    /// Maps a batch of view inputs to `[N, 128]` representations.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = self.check_input(g, x)?;
        match self {
            Encoder::W2v2(e) => {
                let raw = g.param(store, e.layer_weights);
                let row = g.reshape(raw, &[1, e.dims[0]])?;
                let soft = g.softmax_rows(row)?;
                let weights = g.reshape(soft, &[e.dims[0]])?;
                let mixed = g.weighted_layer_sum(x, weights)?;
                let h = e.conv1.forward_pointwise(g, store, mixed)?;
                let h = g.relu(h);
                let h = e.conv2.forward_pointwise(g, store, h)?;
                g.mean_over_time(h)
            }
            Encoder::SpecCnn(e) => {
                let mut h = g.reshape(x, &[n, 1, e.dims[0], e.dims[1]])?;
                for &(w, b) in &e.convs {
                    let wv = g.param(store, w);
                    let bv = g.param(store, b);
                    h = g.conv2d(h, wv, bv, 1)?;
                    h = g.relu(h);
                    h = g.maxpool2d(h)?;
                }
                let pooled = g.global_avg_pool2d(h)?;
                e.out.forward(g, store, pooled)
            }
            Encoder::Mlp(e) => {
                let h = e.l1.forward(g, store, x)?;
                let h = g.relu(h);
                e.l2.forward(g, store, h)
            }
        }
    }

    /// Softmax-normalized layer mixing weights (w2v2 encoders only).
    pub fn layer_mix<T: Real>(&self, store: &ParamStore<T>) -> Option<Vec<T>> {
        match self {
            Encoder::W2v2(e) => {
                let mut w = store.value(e.layer_weights).data().to_vec();
                crate::graph::softmax_in_place(&mut w);
                Some(w)
            }
            _ => None,
        }
    }

    /// Raw (pre-softmax) layer-weight parameter of a w2v2 encoder.
    pub fn layer_weights_param(&self) -> Option<ParamId> {
        match self {
            Encoder::W2v2(e) => Some(e.layer_weights),
            _ => None,
        }
    }
}

/// 128 -> 256 -> 128 with ReLU between.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    l1: Linear,
    l2: Linear,
}

impl ProjectionHead {
    pub fn build<T: Real>(store: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ProjectionHead {
            l1: Linear::build(store, &format!("{prefix}.fc1"), REPR_DIM, HIDDEN_DIM, rng)?,
            l2: Linear::build(store, &format!("{prefix}.fc2"), HIDDEN_DIM, REPR_DIM, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, reps: Var) -> Result<Var> {
        check_reps(g, reps)?;
        let h = self.l1.forward(g, store, reps)?;
        let h = g.relu(h);
        self.l2.forward(g, store, h)
    }
}

/// Linear map to class logits; probabilities via softmax.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    fc: Linear,
    n_classes: usize,
}

impl ClassifierHead {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::contract("classifier needs at least two classes"));
        }
        Ok(ClassifierHead {
            fc: Linear::build(store, &format!("{prefix}.fc"), REPR_DIM, n_classes, rng)?,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, reps: Var) -> Result<Var> {
        check_reps(g, reps)?;
        self.fc.forward(g, store, reps)
    }

    pub fn probabilities<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, reps: Var) -> Result<Var> {
        let z = self.logits(g, store, reps)?;
        g.softmax_rows(z)
    }
}

fn check_reps<T: Real>(g: &Graph<T>, reps: Var) -> Result<()> {
    match g.shape(reps) {
        [_, REPR_DIM] => Ok(()),
        s => Err(Error::shape(format!(
            "expected [N, {REPR_DIM}] representations, got {s:?}"
        ))),
    }
}

pub(crate) fn encoder_prefix(view: &str) -> String {
    format!("{view}.encoder")
}

pub(crate) fn projection_prefix(view: &str) -> String {
    format!("{view}.proj")
}

pub(crate) fn classifier_prefix(view: &str) -> String {
    format!("{view}.classifier")
}

/// Encoders and projection heads for every view, trained jointly.
#[derive(Clone, Debug)]
pub struct MultiViewModel<T = f32> {
    pub specs: Vec<EncoderSpec>,
    pub encoders: Vec<Encoder>,
    pub heads: Vec<ProjectionHead>,
    pub store: ParamStore<T>,
    pub seed: u64,
}

impl<T: Real> MultiViewModel<T> {
    pub fn new(specs: Vec<EncoderSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut encoders = Vec::with_capacity(specs.len());
        let mut heads = Vec::with_capacity(specs.len());
        for spec in &specs {
            encoders.push(Encoder::build(spec, &mut store, &encoder_prefix(&spec.view), &mut rng)?);
            heads.push(ProjectionHead::build(
                &mut store,
                &projection_prefix(&spec.view),
                &mut rng,
            )?);
        }
        Ok(MultiViewModel {
            specs,
            encoders,
            heads,
            store,
            seed,
        })
    }

    pub fn view_index(&self, view: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.view == view)
    }

    /// Projected `[N, 128]` matrices, one per view, in spec order.
    pub fn project_all(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.len() != self.specs.len() {
            return Err(Error::shape(format!(
                "{} view inputs for {} encoders",
                inputs.len(),
                self.specs.len()
            )));
        }
        self.encoders
            .iter()
            .zip(&self.heads)
            .zip(inputs)
            .map(|((enc, head), &x)| {
                let h = enc.forward(g, &self.store, x)?;
                head.forward(g, &self.store, h)
            })
            .collect()
    }
}

/// One view's encoder topped by a classifier, used for fine-tuning and
/// supervised training from scratch.
#[derive(Clone, Debug)]
pub struct ViewClassifier<T = f32> {
    pub spec: EncoderSpec,
    pub encoder: Encoder,
    pub classifier: ClassifierHead,
    pub store: ParamStore<T>,
}

impl<T: Real> ViewClassifier<T> {
    /// Fresh encoder and classifier; encoder parameters are drawn before the
    /// classifier's from the same seeded stream.
    pub fn new(spec: EncoderSpec, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&spec, &mut store, &encoder_prefix(&spec.view), &mut rng)?;
        let classifier = ClassifierHead::build(&mut store, &classifier_prefix(&spec.view), n_classes, &mut rng)?;
        Ok(ViewClassifier {
            spec,
            encoder,
            classifier,
            store,
        })
    }

    /// Encoder weights from a pre-training checkpoint, projection head dropped,
    /// classifier freshly initialized from `seed`.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint, spec: &EncoderSpec, n_classes: usize, seed: u64) -> Result<Self> {
        let stored = ckpt.spec_for(&spec.view)?;
        if stored != *spec {
            return Err(Error::schema(format!(
                "checkpoint encodes `{}` as {}, requested {}",
                spec.view,
                stored.encode_meta(),
                spec.encode_meta()
            )));
        }
        let mut model = ViewClassifier::new(spec.clone(), n_classes, seed)?;
        let prefix = encoder_prefix(&spec.view);
        let src: ParamStore<T> = ckpt.store.cast();
        for p in model.store.iter_mut().filter(|p| p.name.starts_with(&prefix)) {
            let id = src
                .find(&p.name)
                .ok_or_else(|| Error::schema(format!("checkpoint lacks `{}`", p.name)))?;
            let v = &src.get(id).value;
            if v.shape() != p.value.shape() {
                return Err(Error::schema(format!(
                    "`{}` shape {:?} vs {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(model)
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.store.set_frozen(&encoder_prefix(&self.spec.view), frozen);
    }

    pub fn encode(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.encoder.forward(g, &self.store, x)
    }

    pub fn logits(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.encode(g, x)?;
        self.classifier.logits(g, &self.store, h)
    }

    /// Class probabilities for a batch, `[N, C]`.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let h = self.encode(&mut g, xv)?;
        let p = self.classifier.probabilities(&mut g, &self.store, h)?;
        Ok(g.value(p).clone())
    }

    /// Encoder-only representations, `[N, 128]`.
    pub fn representations(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let h = self.encode(&mut g, xv)?;
        Ok(g.value(h).clone())
    }

    /// Encoder parameters only, in registration order.
    pub fn encoder_values(&self) -> Vec<Tensor<T>> {
        let prefix = encoder_prefix(&self.spec.view);
        self.store
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.value.clone())
            .collect()
    }
}

/// Encoder-only forward pass for a standalone encoder.
pub fn encode<T: Real>(encoder: &Encoder, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let h = encoder.forward(&mut g, store, xv)?;
    Ok(g.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(store: &ParamStore<f32>) -> Vec<Vec<usize>> {
        store.iter().map(|p| p.value.shape().to_vec()).collect()
    }

    #[test]
    fn mlp_shapes() {
        let spec = EncoderSpec::new("egemaps", EncoderKind::VectorMlp, vec![88]);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Encoder::build(&spec, &mut store, "e", &mut rng).unwrap();
        assert_eq!(
            shapes(&store),
            vec![vec![88, 256], vec![256], vec![256, 128], vec![128]]
        );
    }

    #[test]
    fn w2v2_shapes_and_count() {
        let spec = EncoderSpec::new("w2v2", EncoderKind::W2v2Pointwise, vec![13, 10, 768]);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Encoder::build(&spec, &mut store, "e", &mut rng).unwrap();
        assert_eq!(
            shapes(&store),
            vec![vec![13], vec![768, 128], vec![128], vec![128, 128], vec![128]]
        );
        assert_eq!(store.count(true), 13 + 768 * 128 + 128 + 128 * 128 + 128);
    }

    #[test]
    fn spec_cnn_count_in_range() {
        let spec = EncoderSpec::new("spec", EncoderKind::SpecCnn, vec![64, 1498]);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Encoder::build(&spec, &mut store, "e", &mut rng).unwrap();
        let n = store.count(true);
        assert!((30_000..=90_000).contains(&n), "{n}");
    }

    #[test]
    fn same_seed_same_params() {
        let spec = EncoderSpec::new("v", EncoderKind::VectorMlp, vec![12]);
        let a = ViewClassifier::<f32>::new(spec.clone(), 4, 9).unwrap();
        let b = ViewClassifier::<f32>::new(spec, 4, 9).unwrap();
        for (p, q) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn meta_round_trip() {
        let spec = EncoderSpec::new("w2v2", EncoderKind::W2v2Pointwise, vec![13, 749, 768]);
        let back = EncoderSpec::decode_meta("w2v2", &spec.encode_meta()).unwrap();
        assert_eq!(back, spec);
        assert!(matches!("lstm".parse::<EncoderKind>(), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_input_shape_is_shape_error() {
        let spec = EncoderSpec::new("v", EncoderKind::VectorMlp, vec![12]);
        let m = ViewClassifier::<f32>::new(spec, 3, 1).unwrap();
        let x = Tensor::zeros(&[2, 11]);
        assert!(matches!(m.representations(&x), Err(Error::Shape(_))));
    }
}
