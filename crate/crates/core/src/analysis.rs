//! Analyses over training results and attention maps.
//!
//! * [`average_accuracy`]: mean of the final-phase row of a [`MetricMatrix`].
//! * [`retention_curve`]: accuracy of an earlier language epoch by epoch
//!   while later languages train, with its largest drop.
//! * [`layer_deltas`]: per-layer change of probe accuracy between phases.
//! * [`pos_frequency`], [`pearson`] and [`correlate_pos_aa`]: how the
//!   frequency of a POS category relates to the accuracy reached when
//!   replaying with that category.
//! * [`attention_entropy`] and [`attention_mass`] over [`AttentionRecord`]s.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PosCategory};
use crate::error::{Error, Result};
use crate::lang::LanguageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricScale {
    /// Values in [0, 1].
    Fraction,
    /// Values in [0, 100].
    Percent,
}

/// `M[n][k]`: metric of language `k` measured at the end of phase `n`.
/// Entries with `k > n` may be absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMatrix {
    pub languages: Vec<LanguageId>,
    pub values: Vec<Vec<Option<f64>>>,
    pub scale: MetricScale,
}

impl MetricMatrix {
    pub fn new(languages: Vec<LanguageId>, scale: MetricScale) -> Self {
        let n = languages.len();
        MetricMatrix { languages, values: vec![vec![None; n]; n], scale }
    }

    pub fn phases(&self) -> usize {
        self.values.len()
    }

    pub fn set(&mut self, phase: usize, lang: usize, value: f64) {
        self.values[phase][lang] = Some(value);
    }

    pub fn get(&self, phase: usize, lang: usize) -> Option<f64> {
        self.values.get(phase).and_then(|row| row.get(lang).copied().flatten())
    }

    fn check(&self) -> Result<()> {
        let max = match self.scale {
            MetricScale::Fraction => 1.0,
            MetricScale::Percent => 100.0,
        };
        for row in &self.values {
            if row.len() != self.languages.len() {
                return Err(Error::data("metric matrix row width differs from the language count"));
            }
            for v in row.iter().flatten() {
                if !(0.0..=max).contains(v) {
                    return Err(Error::data(format!("metric value {v} outside [0, {max}]")));
                }
            }
        }
        Ok(())
    }

    /// CSV with the language codes as header and one row per phase; absent
    /// entries are empty cells.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<&str> = self.languages.iter().map(LanguageId::as_str).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in &self.values {
            let cells: Vec<String> = row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`MetricMatrix::write_csv`]. Any value above
    /// 1 marks the matrix as percent-scaled.
    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::data("metric matrix CSV is empty"))?;
        let languages = header.split(',').map(|c| LanguageId::new(c.trim()).map_err(|e| Error::data_at(1, e.to_string()))).collect::<Result<Vec<_>>>()?;
        let mut values = Vec::new();
        for (i, line) in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != languages.len() {
                return Err(Error::data_at(i + 1, format!("expected {} cells, found {}", languages.len(), cells.len())));
            }
            let row = cells
                .iter()
                .map(|c| match c.trim() {
                    "" => Ok(None),
                    v => v.parse::<f64>().map(Some).map_err(|_| Error::data_at(i + 1, format!("not a number: {v:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        let percent = values.iter().flatten().flatten().any(|&v| v > 1.0);
        let matrix = MetricMatrix { languages, values, scale: if percent { MetricScale::Percent } else { MetricScale::Fraction } };
        matrix.check()?;
        Ok(matrix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageAccuracy {
    /// `(1/N) Σ_k M[N][k]`.
    pub mean: f64,
    /// `Σ_k M[N][k]`, without the division.
    pub sum: f64,
    pub languages: usize,
}

/// Average of the last phase's row. Every entry of that row must be present.
pub fn average_accuracy(matrix: &MetricMatrix) -> Result<AverageAccuracy> {
    let n = matrix.languages.len();
    let last = matrix.values.last().ok_or_else(|| Error::data("metric matrix has no rows"))?;
    if n == 0 || last.len() != n || last.iter().any(Option::is_none) {
        return Err(Error::data("final row of the metric matrix is incomplete"));
    }
    let sum: f64 = last.iter().flatten().sum();
    Ok(AverageAccuracy { mean: sum / n as f64, sum, languages: n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub points: Vec<(usize, f64)>,
    /// Accuracy at the first point.
    pub entry: f64,
    /// Largest fall below `entry`; zero if it never falls.
    pub max_drop: f64,
}

pub fn retention_curve(history: &[(usize, f64)]) -> Result<RetentionCurve> {
    let &(_, entry) = history.first().ok_or_else(|| Error::data("retention history is empty"))?;
    let lowest = history.iter().map(|p| p.1).fold(entry, f64::min);
    Ok(RetentionCurve { points: history.to_vec(), entry, max_drop: entry - lowest })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDeltas {
    /// `after[ℓ] − before[ℓ]`.
    pub raw: Vec<f64>,
    /// `raw[ℓ] − raw[0]`, which pins the first layer at zero.
    pub anchored: Vec<f64>,
}

pub fn layer_deltas(before: &[f64], after: &[f64]) -> Result<LayerDeltas> {
    if before.len() != after.len() {
        return Err(Error::data(format!("probe tables cover {} and {} layers", before.len(), after.len())));
    }
    if before.is_empty() {
        return Err(Error::data("probe table has no layers"));
    }
    let raw: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let anchored = raw.iter().map(|d| d - raw[0]).collect();
    Ok(LayerDeltas { raw, anchored })
}

/// Probe accuracies for one language: `accuracy[layer][i]` measured at the
/// end of phase `phases[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub lang: LanguageId,
    pub phases: Vec<usize>,
    pub accuracy: Vec<Vec<f64>>,
}

/// Deltas between the first and the last probed phase.
pub fn layer_delta_table(table: &ProbeTable) -> Result<LayerDeltas> {
    if table.phases.len() < 2 {
        return Err(Error::data("layer deltas need probe results from at least two phases"));
    }
    if table.accuracy.iter().any(|row| row.len() != table.phases.len()) {
        return Err(Error::data("probe table rows do not match the phase list"));
    }
    let before: Vec<f64> = table.accuracy.iter().map(|row| row[0]).collect();
    let after: Vec<f64> = table.accuracy.iter().map(|row| row[row.len() - 1]).collect();
    layer_deltas(&before, &after)
}

pub type PosDistribution = BTreeMap<PosCategory, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosFrequencyTable {
    pub per_language: Vec<(LanguageId, PosDistribution)>,
    /// Unweighted mean of the per-language distributions.
    pub aggregate: PosDistribution,
}

/// Relative tag frequencies per corpus and their unweighted mean. Every one
/// of the 17 tags is present in the output, zero if unused.
pub fn pos_frequency(corpora: &[&Corpus]) -> Result<PosFrequencyTable> {
    if corpora.is_empty() {
        return Err(Error::data("no corpora given"));
    }
    let mut per_language = Vec::with_capacity(corpora.len());
    for corpus in corpora {
        let total = corpus.token_count();
        if total == 0 {
            return Err(Error::data(format!("corpus for {} has no tokens", corpus.lang)));
        }
        let mut dist: PosDistribution = PosCategory::ALL.iter().map(|&c| (c, 0.0)).collect();
        for token in corpus.sentences.iter().flat_map(|s| &s.tokens) {
            *dist.get_mut(&token.upos).unwrap() += 1.0;
        }
        for v in dist.values_mut() {
            *v /= total as f64;
        }
        per_language.push((corpus.lang.clone(), dist));
    }
    let k = per_language.len() as f64;
    let aggregate = PosCategory::ALL.iter().map(|&c| (c, per_language.iter().map(|(_, d)| d[&c]).sum::<f64>() / k)).collect();
    Ok(PosFrequencyTable { per_language, aggregate })
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::data(format!("vectors have lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::data("correlation needs at least two points"));
    }
    if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
        return Err(Error::data("zero variance"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// For each category in `aa_by_category`, the correlation across sequences
/// between the aggregate frequency of that category and the average
/// accuracy obtained when replaying with it. Failures are reported per
/// category.
pub fn correlate_pos_aa(
    freq_aggregates: &BTreeMap<String, PosDistribution>,
    aa_by_category: &BTreeMap<String, PosDistribution>,
) -> Result<BTreeMap<PosCategory, Result<f64>>> {
    if freq_aggregates.keys().ne(aa_by_category.keys()) {
        return Err(Error::data("frequency and accuracy tables cover different sequences"));
    }
    if freq_aggregates.len() < 2 {
        return Err(Error::data("correlation needs at least two sequences"));
    }
    let mut categories: Vec<PosCategory> = aa_by_category.values().flat_map(|d| d.keys().copied()).collect();
    categories.sort();
    categories.dedup();
    let mut out = BTreeMap::new();
    for cat in categories {
        let result = (|| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (seq, aa) in aa_by_category {
                let y = aa.get(&cat).ok_or_else(|| Error::data(format!("sequence {seq} has no {cat} accuracy")))?;
                xs.push(freq_aggregates[seq].get(&cat).copied().unwrap_or(0.0));
                ys.push(*y);
            }
            pearson(&xs, &ys)
        })();
        out.insert(cat, result);
    }
    Ok(out)
}

/// Attention probabilities `A[layer][head][query][key]` for one sentence of
/// `dims[2]` subword positions, of which the first `valid_len` are real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// `[layers, heads, positions]`.
    pub dims: [usize; 3],
    /// Row-major, `layers · heads · positions · positions` values.
    pub probs: Vec<f64>,
    /// Positions belonging to code-switched words.
    pub switched_mask: Vec<bool>,
    pub valid_len: usize,
}

impl AttentionRecord {
    fn at(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        let [_, h, s] = self.dims;
        self.probs[((layer * h + head) * s + query) * s + key]
    }

    /// Shape checks plus row normalization over the valid keys (1e-6).
    pub fn validate(&self) -> Result<()> {
        let [l, h, s] = self.dims;
        if self.probs.len() != l * h * s * s {
            return Err(Error::data(format!("{} probabilities for dims {:?}", self.probs.len(), self.dims)));
        }
        if self.switched_mask.len() != s {
            return Err(Error::data(format!("switched mask has {} entries, expected {s}", self.switched_mask.len())));
        }
        if self.valid_len == 0 || self.valid_len > s {
            return Err(Error::data(format!("valid length {} outside [1, {s}]", self.valid_len)));
        }
        if l == 0 || h == 0 {
            return Err(Error::data("attention record has no layers or heads"));
        }
        for layer in 0..l {
            for head in 0..h {
                for q in 0..self.valid_len {
                    let row: f64 = (0..self.valid_len).map(|k| self.at(layer, head, q, k)).sum();
                    if (row - 1.0).abs() > 1e-6 {
                        return Err(Error::data(format!("attention row (layer {layer}, head {head}, query {q}) sums to {row}")));
                    }
                    if (0..self.valid_len).any(|k| self.at(layer, head, q, k) < 0.0) {
                        return Err(Error::data("negative attention probability"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mean Shannon entropy (natural log) of the attention rows over layers,
/// heads and valid query positions, restricted to valid keys.
pub fn attention_entropy(record: &AttentionRecord) -> Result<f64> {
    record.validate()?;
    let [l, h, _] = record.dims;
    let mut total = 0.0;
    for layer in 0..l {
        for head in 0..h {
            for q in 0..record.valid_len {
                total -= (0..record.valid_len)
                    .map(|k| record.at(layer, head, q, k))
                    .filter(|&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>();
            }
        }
    }
    Ok(total / (l * h * record.valid_len) as f64)
}

/// Attention landing on switched positions: per (layer, head) the sum over
/// valid queries and switched valid keys, averaged over layers and heads.
pub fn attention_mass(record: &AttentionRecord) -> Result<f64> {
    record.validate()?;
    let [l, h, _] = record.dims;
    let switched: Vec<usize> = (0..record.valid_len).filter(|&k| record.switched_mask[k]).collect();
    let mut total = 0.0;
    for layer in 0..l {
        for head in 0..h {
            for q in 0..record.valid_len {
                total += switched.iter().map(|&k| record.at(layer, head, q, k)).sum::<f64>();
            }
        }
    }
    Ok(total / (l * h) as f64)
}
