use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{argmax, ToyModel};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::lang::LanguageId;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch gradient steps.
    pub epochs: usize,
    pub lr: f64,
    /// Sentences used from the probe corpus, taken from the front.
    pub max_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, lr: 0.5, max_samples: 2000 }
    }
}

/// Multinomial logistic regression over z-scored features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Array1<f64>,
    inv_std: Array1<f64>,
    w: Array2<f64>,
    b: Array1<f64>,
}

impl LinearProbe {
    fn standardize(&self, x: &Array1<f64>) -> Array1<f64> {
        (x - &self.mean) * &self.inv_std
    }

    pub fn predict(&self, x: &Array1<f64>) -> usize {
        argmax(&(self.w.dot(&self.standardize(x)) + &self.b))
    }

    pub fn accuracy(&self, features: &[Array1<f64>], labels: &[usize]) -> f64 {
        let correct = features.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        correct as f64 / features.len().max(1) as f64
    }
}

/// Fits a probe with full-batch gradient descent on mean cross-entropy.
/// Constant features are left unscaled.
pub fn train_probe(features: &[Array1<f64>], labels: &[usize], classes: usize, config: &ProbeConfig, rng: &mut SeededRng) -> Result<LinearProbe> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::data(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::data(format!("probe label {y} outside [0, {classes})")));
    }
    let dim = features[0].len();
    let n = features.len();
    let mut x = Array2::zeros((n, dim));
    for (mut row, f) in x.axis_iter_mut(Axis(0)).zip(features) {
        row.assign(f);
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let std = x.std_axis(Axis(0), 0.0);
    let inv_std = std.mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
    let z = (&x - &mean) * &inv_std;

    let mut w = Array2::from_shape_simple_fn((classes, dim), || 0.01 * rng.sample::<f64, _>(StandardNormal));
    let mut b = Array1::zeros(classes);
    let mut onehot = Array2::<f64>::zeros((n, classes));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    for _ in 0..config.epochs {
        let mut logits = z.dot(&w.t()) + &b;
        for mut row in logits.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let g = (logits - &onehot) / n as f64;
        w.scaled_add(-config.lr, &g.t().dot(&z));
        b.scaled_add(-config.lr, &g.sum_axis(Axis(0)));
    }
    Ok(LinearProbe { mean, inv_std, w, b })
}

/// Held-in accuracy of a fresh probe on the layer-`layer` (1-based)
/// activations of `lang` over the probe corpus.
pub fn probe_layer(model: &ToyModel, layer: usize, corpus: &Corpus, lang: &LanguageId, config: &ProbeConfig, rng: &mut SeededRng) -> Result<f64> {
    if layer == 0 || layer > model.dims.layers {
        return Err(Error::Usage(format!("layer {layer} outside [1, {}]", model.dims.layers)));
    }
    let sample = &corpus.sentences[..corpus.len().min(config.max_samples)];
    if sample.is_empty() {
        return Err(Error::data(format!("probe corpus for {lang} is empty")));
    }
    let mut features = Vec::with_capacity(sample.len());
    let mut labels = Vec::with_capacity(sample.len());
    for s in sample {
        let label = s.label.as_deref().ok_or_else(|| Error::data("probe sentence has no label"))?;
        labels.push(model.label_index(label)?);
        features.push(model.trace(lang, &model.encode(s))?.activation(layer - 1).clone());
    }
    let probe = train_probe(&features, &labels, model.dims.classes, config, rng)?;
    Ok(probe.accuracy(&features, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    #[test]
    fn separable_clusters() {
        let mut rng = seeded(1);
        let centers = [array![3.0, 0.0, 0.0], array![0.0, 3.0, 0.0], array![0.0, 0.0, 3.0]];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..90 {
            let c = i % 3;
            let noise: Array1<f64> = (0..3).map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal)).collect();
            xs.push(&centers[c] + &noise);
            ys.push(c);
        }
        let probe = train_probe(&xs, &ys, 3, &ProbeConfig::default(), &mut seeded(2)).unwrap();
        assert_eq!(probe.accuracy(&xs, &ys), 1.0);
    }

    #[test]
    fn constant_features_give_majority() {
        let xs = vec![array![1.0, 2.0]; 10];
        let ys = vec![0, 1, 1, 1, 1, 1, 1, 2, 2, 0];
        let probe = train_probe(&xs, &ys, 3, &ProbeConfig::default(), &mut seeded(0)).unwrap();
        assert_eq!(probe.accuracy(&xs, &ys), 0.6);
    }

    #[test]
    fn label_checks() {
        let xs = vec![array![1.0]];
        assert!(train_probe(&xs, &[3], 2, &ProbeConfig::default(), &mut seeded(0)).is_err());
        assert!(train_probe(&xs, &[0, 1], 2, &ProbeConfig::default(), &mut seeded(0)).is_err());
    }
}
