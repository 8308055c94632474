use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::lang::LanguageId;
use crate::rng::{derive_seed, seeded, substream, SeededRng};
use crate::scheduler::UpdateMask;
use crate::synthdata::class_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Hidden width.
    pub d: usize,
    /// Adapter bottleneck width.
    pub r: usize,
    /// Backbone layers.
    pub layers: usize,
    /// Task classes.
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r >= self.d {
            return Err(Error::config(format!("adapter width r={} must satisfy 1 <= r < d={}", self.r, self.d)));
        }
        if self.layers == 0 {
            return Err(Error::config("model needs at least one layer"));
        }
        if self.classes < 2 {
            return Err(Error::config("model needs at least two classes"));
        }
        Ok(())
    }
}

/// Maps surface forms to fixed unit vectors by seeded hashing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    seed: u64,
    dim: usize,
}

impl Embedder {
    pub fn embed(&self, form: &str) -> Array1<f64> {
        let mut rng = seeded(derive_seed(self.seed, form, 0));
        let mut v: Array1<f64> = (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        v /= norm;
        v
    }

    /// Mean of the token vectors; the zero vector for an empty sentence.
    pub fn embed_sentence(&self, sentence: &Sentence) -> Array1<f64> {
        let mut x = Array1::zeros(self.dim);
        for token in &sentence.tokens {
            x += &self.embed(&token.form);
        }
        if !sentence.is_empty() {
            x /= sentence.len() as f64;
        }
        x
    }
}

/// Frozen stack of `h ← tanh(F h)` layers plus the token embedder.
///
/// There is no mutable access to the weights after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    layers: Vec<Array2<f64>>,
    embedder: Embedder,
}

impl Backbone {
    /// Backbone from explicit square matrices of equal size.
    pub fn from_matrices(layers: Vec<Array2<f64>>, embed_seed: u64) -> Result<Self> {
        let d = layers.first().map(|f| f.nrows()).ok_or_else(|| Error::config("backbone needs at least one layer"))?;
        if layers.iter().any(|f| f.dim() != (d, d)) {
            return Err(Error::config("backbone matrices must all be d×d"));
        }
        Ok(Backbone { layers, embedder: Embedder { seed: embed_seed, dim: d } })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.embedder.dim
    }

    pub fn layer(&self, index: usize) -> &Array2<f64> {
        &self.layers[index]
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.layers {
            hash_array(&mut h, f.iter());
        }
        h.update(self.embedder.seed.to_le_bytes());
        h.update((self.embedder.dim as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

fn hash_array<'a>(h: &mut Sha256, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        h.update(v.to_le_bytes());
    }
}

/// Bottleneck adapter `h ↦ h + W_up · tanh(W_down · h + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub w_down: Array2<f64>,
    pub b: Array1<f64>,
    pub w_up: Array2<f64>,
}

impl Adapter {
    fn identity(d: usize, r: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        Adapter {
            w_down: Array2::from_shape_simple_fn((r, d), || scale * rng.sample::<f64, _>(StandardNormal)),
            b: Array1::zeros(r),
            w_up: Array2::zeros((d, r)),
        }
    }

    fn zeros_like(&self) -> Self {
        Adapter { w_down: Array2::zeros(self.w_down.raw_dim()), b: Array1::zeros(self.b.len()), w_up: Array2::zeros(self.w_up.raw_dim()) }
    }

    /// Returns the bottleneck activation and the output.
    fn apply(&self, h: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let a = (self.w_down.dot(h) + &self.b).mapv(f64::tanh);
        let out = h + &self.w_up.dot(&a);
        (a, out)
    }

    // Backprop through the adapter given the input, its bottleneck
    // activation and the upstream gradient; returns the input gradient.
    fn backward(&self, input: &Array1<f64>, a: &Array1<f64>, g_out: &Array1<f64>, grad: &mut Adapter) -> Array1<f64> {
        outer_acc(&mut grad.w_up, g_out.view(), a.view());
        let g_a = self.w_up.t().dot(g_out);
        let g_z = &g_a * &a.mapv(|v| 1.0 - v * v);
        outer_acc(&mut grad.w_down, g_z.view(), input.view());
        grad.b += &g_z;
        g_out + &self.w_down.t().dot(&g_z)
    }

    fn step(&mut self, grad: &Adapter, lr: f64) {
        self.w_down.scaled_add(-lr, &grad.w_down);
        self.b.scaled_add(-lr, &grad.b);
        self.w_up.scaled_add(-lr, &grad.w_up);
    }

    fn hash_into(&self, h: &mut Sha256) {
        hash_array(h, self.w_down.iter());
        hash_array(h, self.b.iter());
        hash_array(h, self.w_up.iter());
    }
}

fn outer_acc(target: &mut Array2<f64>, col: ArrayView1<f64>, row: ArrayView1<f64>) {
    general_mat_mul(1.0, &col.insert_axis(Axis(1)), &row.insert_axis(Axis(0)), 1.0, target);
}

/// One adapter per backbone layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterStack {
    pub adapters: Vec<Adapter>,
}

impl AdapterStack {
    fn identity(dims: &ModelDims, rng: &mut SeededRng) -> Self {
        AdapterStack { adapters: (0..dims.layers).map(|_| Adapter::identity(dims.d, dims.r, rng)).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        AdapterStack { adapters: self.adapters.iter().map(Adapter::zeros_like).collect() }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.adapters {
            a.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }
}

/// Linear classification head `logits = W h + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Head {
    pub fn zeros_like(&self) -> Self {
        Head { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.len()) }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        hash_array(&mut h, self.w.iter());
        hash_array(&mut h, self.b.iter());
        hex::encode(h.finalize())
    }
}

/// Gradients for one step, shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub lang: LanguageId,
    pub language_adapter: AdapterStack,
    pub replay_adapter: AdapterStack,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub dims: ModelDims,
    backbone: Backbone,
    pub language_adapters: BTreeMap<LanguageId, AdapterStack>,
    pub replay_adapter: AdapterStack,
    pub head: Head,
    /// Class names, index = head output.
    pub labels: Vec<String>,
    /// When false the replay adapter is bypassed in every forward pass.
    pub use_replay_adapter: bool,
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    layers: Vec<LayerTrace>,
    pub logits: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    // output of tanh(F h)
    base: Array1<f64>,
    lang_act: Array1<f64>,
    after_lang: Array1<f64>,
    replay_act: Option<Array1<f64>>,
    out: Array1<f64>,
}

impl Trace {
    /// Per-layer outputs (after the replay adapter), layer 1 first.
    pub fn activations(&self) -> Vec<Array1<f64>> {
        self.layers.iter().map(|l| l.out.clone()).collect()
    }

    pub fn activation(&self, layer: usize) -> &Array1<f64> {
        &self.layers[layer].out
    }
}

/// Builds a fresh model: frozen random backbone, identity adapters for
/// every language, small random head. Class names default to
/// `class_000 … class_{C-1}`.
pub fn init_model(dims: ModelDims, languages: &[LanguageId], seed: u64) -> Result<ToyModel> {
    init_model_with_gain(dims, languages, seed, DEFAULT_BACKBONE_GAIN)
}

pub const DEFAULT_BACKBONE_GAIN: f64 = 2.0;

/// As [`init_model`] with backbone weights drawn from `N(0, gain²/d)`.
pub fn init_model_with_gain(dims: ModelDims, languages: &[LanguageId], seed: u64, gain: f64) -> Result<ToyModel> {
    dims.validate()?;
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::config(format!("backbone gain must be positive, got {gain}")));
    }
    let mut rng = substream(seed, "backbone", 0);
    let scale = gain / (dims.d as f64).sqrt();
    let layers = (0..dims.layers)
        .map(|_| Array2::from_shape_simple_fn((dims.d, dims.d), || scale * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let backbone = Backbone { layers, embedder: Embedder { seed: derive_seed(seed, "embedder", 0), dim: dims.d } };

    let mut language_adapters = BTreeMap::new();
    for (i, lang) in languages.iter().enumerate() {
        let mut rng = substream(seed, &format!("adapter:{lang}"), i as u64);
        language_adapters.insert(lang.clone(), AdapterStack::identity(&dims, &mut rng));
    }
    let replay_adapter = AdapterStack::identity(&dims, &mut substream(seed, "replay-adapter", 0));

    let mut rng = substream(seed, "head", 0);
    let head = Head { w: Array2::from_shape_simple_fn((dims.classes, dims.d), || 0.01 * rng.sample::<f64, _>(StandardNormal)), b: Array1::zeros(dims.classes) };

    Ok(ToyModel {
        dims,
        backbone,
        language_adapters,
        replay_adapter,
        head,
        labels: (0..dims.classes).map(class_label).collect(),
        use_replay_adapter: true,
    })
}

impl ToyModel {
    /// Model over a given backbone with identity adapters and the head
    /// initialized as in [`init_model`].
    pub fn with_backbone(backbone: Backbone, r: usize, classes: usize, languages: &[LanguageId], seed: u64) -> Result<Self> {
        let dims = ModelDims { d: backbone.width(), r, layers: backbone.depth(), classes };
        let mut model = init_model(dims, languages, seed)?;
        model.backbone = backbone;
        Ok(model)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Replaces the class names; their count must equal the head width.
    pub fn set_labels(&mut self, labels: Vec<String>) -> Result<()> {
        if labels.len() != self.dims.classes {
            return Err(Error::config(format!("{} labels for a {}-class head", labels.len(), self.dims.classes)));
        }
        self.labels = labels;
        Ok(())
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| Error::data(format!("label {label:?} is not one of the {} model classes", self.dims.classes)))
    }

    fn sentence_label(&self, sentence: &Sentence) -> Result<usize> {
        let label = sentence.label.as_deref().ok_or_else(|| Error::data("sentence has no label"))?;
        self.label_index(label)
    }

    pub fn adapters_for(&self, lang: &LanguageId) -> Result<&AdapterStack> {
        self.language_adapters.get(lang).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// Input vector of a sentence (mean token embedding).
    pub fn encode(&self, sentence: &Sentence) -> Array1<f64> {
        self.backbone.embedder.embed_sentence(sentence)
    }

    /// Forward pass from an input vector.
    pub fn trace(&self, lang: &LanguageId, x: &Array1<f64>) -> Result<Trace> {
        let stack = self.adapters_for(lang)?;
        let mut h = x.clone();
        let mut layers = Vec::with_capacity(self.dims.layers);
        for (l, f) in self.backbone.layers.iter().enumerate() {
            let base = f.dot(&h).mapv(f64::tanh);
            let (lang_act, after_lang) = stack.adapters[l].apply(&base);
            let (replay_act, out) = if self.use_replay_adapter {
                let (a, out) = self.replay_adapter.adapters[l].apply(&after_lang);
                (Some(a), out)
            } else {
                (None, after_lang.clone())
            };
            h = out.clone();
            layers.push(LayerTrace { base, lang_act, after_lang, replay_act, out });
        }
        let logits = self.head.w.dot(&h) + &self.head.b;
        Ok(Trace { layers, logits })
    }

    /// Logits and per-layer activations for a sentence.
    pub fn forward(&self, lang: &LanguageId, sentence: &Sentence) -> Result<(Array1<f64>, Vec<Array1<f64>>)> {
        let trace = self.trace(lang, &self.encode(sentence))?;
        let acts = trace.activations();
        Ok((trace.logits, acts))
    }

    /// Head applied to the bare backbone output, skipping every adapter.
    pub fn backbone_logits(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut h = x.clone();
        for f in &self.backbone.layers {
            h = f.dot(&h).mapv(f64::tanh);
        }
        self.head.w.dot(&h) + &self.head.b
    }

    pub fn zero_grads(&self, lang: &LanguageId) -> Result<Grads> {
        Ok(Grads {
            lang: lang.clone(),
            language_adapter: self.adapters_for(lang)?.zeros_like(),
            replay_adapter: self.replay_adapter.zeros_like(),
            head: self.head.zeros_like(),
        })
    }

    /// Mean cross-entropy over `(input, class)` pairs and its gradient.
    pub fn loss_and_grads_encoded(&self, lang: &LanguageId, batch: &[(Array1<f64>, usize)]) -> Result<(f64, Grads)> {
        let mut grads = self.zero_grads(lang)?;
        if batch.is_empty() {
            return Ok((0.0, grads));
        }
        let stack = self.adapters_for(lang)?;
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (x, y) in batch {
            if *y >= self.dims.classes {
                return Err(Error::data(format!("class {y} outside [0, {})", self.dims.classes)));
            }
            let trace = self.trace(lang, x)?;
            let (lse, probs) = log_softmax_parts(&trace.logits);
            loss += lse - trace.logits[*y];

            let mut g_logits = probs;
            g_logits[*y] -= 1.0;
            g_logits *= scale;

            let top = &trace.layers[self.dims.layers - 1].out;
            outer_acc(&mut grads.head.w, g_logits.view(), top.view());
            grads.head.b += &g_logits;
            let mut g_h = self.head.w.t().dot(&g_logits);

            for l in (0..self.dims.layers).rev() {
                let lt = &trace.layers[l];
                let g_after_lang = match &lt.replay_act {
                    Some(a) => self.replay_adapter.adapters[l].backward(&lt.after_lang, a, &g_h, &mut grads.replay_adapter.adapters[l]),
                    None => g_h,
                };
                let g_base = stack.adapters[l].backward(&lt.base, &lt.lang_act, &g_after_lang, &mut grads.language_adapter.adapters[l]);
                if l == 0 {
                    break;
                }
                let g_pre = &g_base * &lt.base.mapv(|v| 1.0 - v * v);
                g_h = self.backbone.layers[l].t().dot(&g_pre);
            }
        }
        Ok((loss * scale, grads))
    }

    /// Mean cross-entropy of a labeled batch and its gradient for the head,
    /// the `lang` adapter stack and the replay adapter.
    pub fn loss_and_grads(&self, lang: &LanguageId, batch: &[Sentence]) -> Result<(f64, Grads)> {
        let encoded = batch.iter().map(|s| Ok((self.encode(s), self.sentence_label(s)?))).collect::<Result<Vec<_>>>()?;
        self.loss_and_grads_encoded(lang, &encoded)
    }

    /// Plain SGD on the groups enabled in `mask`; other groups are not touched.
    pub fn apply_update(&mut self, grads: &Grads, mask: UpdateMask, lr: f64) -> Result<()> {
        if mask.language_adapter {
            let stack = self.language_adapters.get_mut(&grads.lang).ok_or_else(|| Error::UnknownLanguage(grads.lang.to_string()))?;
            for (a, g) in stack.adapters.iter_mut().zip(&grads.language_adapter.adapters) {
                a.step(g, lr);
            }
        }
        if mask.replay_adapter {
            for (a, g) in self.replay_adapter.adapters.iter_mut().zip(&grads.replay_adapter.adapters) {
                a.step(g, lr);
            }
        }
        if mask.head {
            self.head.w.scaled_add(-lr, &grads.head.w);
            self.head.b.scaled_add(-lr, &grads.head.b);
        }
        Ok(())
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn predict_encoded(&self, lang: &LanguageId, x: &Array1<f64>) -> Result<usize> {
        Ok(argmax(&self.trace(lang, x)?.logits))
    }

    /// Hash over every language adapter and the head.
    pub fn protected_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (lang, stack) in &self.language_adapters {
            h.update(lang.as_str().as_bytes());
            for a in &stack.adapters {
                a.hash_into(&mut h);
            }
        }
        hash_array(&mut h, self.head.w.iter());
        hash_array(&mut h, self.head.b.iter());
        hex::encode(h.finalize())
    }
}

pub(crate) fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// log-sum-exp and softmax probabilities, computed stably.
fn log_softmax_parts(logits: &Array1<f64>) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    (max + sum.ln(), exp / sum)
}
