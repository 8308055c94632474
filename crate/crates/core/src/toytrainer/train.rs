use std::collections::{BTreeMap, HashMap};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::model::{argmax, ToyModel};
use super::probe::{probe_layer, ProbeConfig};
use crate::analysis::{MetricMatrix, MetricScale, ProbeTable};
use crate::codeswitch::CsStats;
use crate::corpus::{Corpus, Sentence};
use crate::error::{Error, Result};
use crate::lang::LanguageId;
use crate::rng::{substream, SeededRng};
use crate::scheduler::{steps, LexiconSet, ReplayMemory, Step, StepKind, TrainingPlan, UpdateMask};

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;

/// Adapter stack used for the forward pass of a replay step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayForward {
    /// The first language of the plan.
    #[default]
    Anchor,
    /// The language of the running phase.
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub replay_forward: ReplayForward,
    /// Layer probes for the second language after every phase from the
    /// second on. Off when `None`.
    pub probe: Option<ProbeConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: DEFAULT_LEARNING_RATE, replay_forward: ReplayForward::Anchor, probe: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Train and test corpora per language.
#[derive(Debug, Clone, Default)]
pub struct TaskData {
    pub train: BTreeMap<LanguageId, Corpus>,
    pub test: BTreeMap<LanguageId, Corpus>,
}

/// Memoized token embeddings.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    tokens: HashMap<String, Array1<f64>>,
}

impl EmbeddingCache {
    /// Same value as [`ToyModel::encode`].
    pub fn encode(&mut self, model: &ToyModel, sentence: &Sentence) -> Array1<f64> {
        let embedder = model.backbone().embedder();
        let mut x = Array1::zeros(model.dims.d);
        for token in &sentence.tokens {
            let v = self.tokens.entry(token.form.clone()).or_insert_with(|| embedder.embed(&token.form));
            x += &*v;
        }
        if !sentence.is_empty() {
            x /= sentence.len() as f64;
        }
        x
    }

    fn encode_labeled(&mut self, model: &ToyModel, sentences: &[Sentence]) -> Result<Vec<(Array1<f64>, usize)>> {
        sentences
            .iter()
            .map(|s| {
                let label = s.label.as_deref().ok_or_else(|| Error::data("sentence has no label"))?;
                Ok((self.encode(model, s), model.label_index(label)?))
            })
            .collect()
    }
}

/// Groups a step actually updates. With the replay adapter bypassed,
/// replay steps fall back to the head and normal steps drop the adapter.
pub fn effective_mask(mask: UpdateMask, use_replay_adapter: bool) -> UpdateMask {
    if use_replay_adapter {
        return mask;
    }
    let replay_only = mask.replay_adapter && !mask.language_adapter && !mask.head;
    UpdateMask { language_adapter: mask.language_adapter, replay_adapter: false, head: mask.head || replay_only }
}

/// Runs one scheduler step: forward and backward on its batch, then a
/// masked SGD update. Returns the batch loss.
pub fn train_step(model: &mut ToyModel, step: &Step, anchor: &LanguageId, config: &TrainConfig, cache: &mut EmbeddingCache) -> Result<f64> {
    let (lang, batch) = match &step.kind {
        StepKind::Normal { batch } => (&step.lang, batch),
        StepKind::Replay { cs_batch, .. } => (
            match config.replay_forward {
                ReplayForward::Anchor => anchor,
                ReplayForward::Current => &step.lang,
            },
            cs_batch,
        ),
    };
    let encoded = cache.encode_labeled(model, &batch.sentences)?;
    let (loss, grads) = model.loss_and_grads_encoded(lang, &encoded)?;
    model.apply_update(&grads, effective_mask(step.mask, model.use_replay_adapter), config.lr)?;
    Ok(loss)
}

/// Fraction of sentences whose highest logit is the gold class.
pub fn evaluate(model: &ToyModel, lang: &LanguageId, corpus: &Corpus) -> Result<f64> {
    let mut cache = EmbeddingCache::default();
    let encoded = cache.encode_labeled(model, &corpus.sentences)?;
    accuracy_encoded(model, lang, &encoded)
}

fn accuracy_encoded(model: &ToyModel, lang: &LanguageId, data: &[(Array1<f64>, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data(format!("evaluation corpus for {lang} is empty")));
    }
    let mut correct = 0;
    for (x, y) in data {
        if argmax(&model.trace(lang, x)?.logits) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Test accuracy of one language after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    /// Epoch counter across all phases, from 1.
    pub global_epoch: usize,
    pub lang: LanguageId,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub languages: Vec<LanguageId>,
    pub history: Vec<EpochRecord>,
    /// Accuracy of every seen language at the end of each phase.
    pub matrix: MetricMatrix,
    pub probes: Option<ProbeTable>,
    pub normal_steps: usize,
    pub replay_steps: usize,
    pub replay_lang_counts: BTreeMap<LanguageId, usize>,
    pub cs_totals: CsStats,
    /// Mean batch loss of every epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub backbone_checksum_start: String,
    pub backbone_checksum_end: String,
}

impl RunRecord {
    /// Per-epoch accuracies of `lang`, keyed by global epoch.
    pub fn history_of(&self, lang: &LanguageId) -> Vec<(usize, f64)> {
        self.history.iter().filter(|r| &r.lang == lang).map(|r| (r.global_epoch, r.accuracy)).collect()
    }
}

struct EpochAcc {
    phase: usize,
    epoch: usize,
    loss: f64,
    batches: usize,
}

/// Executes the whole plan on `model`, evaluating every seen language on
/// its test corpus after each epoch.
pub fn run_plan(
    model: &mut ToyModel,
    plan: &TrainingPlan,
    data: &TaskData,
    memory: &ReplayMemory,
    lexicons: &LexiconSet,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<RunRecord> {
    config.validate()?;
    for lang in &plan.languages {
        model.adapters_for(lang)?;
        match data.test.get(lang) {
            Some(c) if !c.is_empty() => {}
            _ => return Err(Error::data(format!("no test corpus for {lang}"))),
        }
    }
    let mut cache = EmbeddingCache::default();
    let mut tests = BTreeMap::new();
    for lang in &plan.languages {
        tests.insert(lang.clone(), cache.encode_labeled(model, &data.test[lang].sentences)?);
    }

    let mut record = RunRecord {
        seed: plan.seed,
        languages: plan.languages.clone(),
        history: Vec::new(),
        matrix: MetricMatrix::new(plan.languages.clone(), MetricScale::Fraction),
        probes: None,
        normal_steps: 0,
        replay_steps: 0,
        replay_lang_counts: BTreeMap::new(),
        cs_totals: CsStats::default(),
        epoch_losses: Vec::new(),
        backbone_checksum_start: model.backbone().checksum(),
        backbone_checksum_end: String::new(),
    };
    let probe_lang = plan.languages.get(1).cloned();
    let mut probe_table = match (&config.probe, &probe_lang) {
        (Some(_), Some(lang)) => Some(ProbeTable { lang: lang.clone(), phases: Vec::new(), accuracy: vec![Vec::new(); model.dims.layers] }),
        _ => None,
    };

    let mut current: Option<EpochAcc> = None;
    let stream = steps(plan, &data.train, memory, lexicons, rng)?;
    for step in stream {
        let step = step?;
        if current.as_ref().is_some_and(|c| (c.phase, c.epoch) != (step.phase, step.epoch)) {
            let done = current.take().unwrap();
            end_epoch(model, plan, data, config, &tests, &done, &mut record, &mut probe_table)?;
        }
        let acc = current.get_or_insert(EpochAcc { phase: step.phase, epoch: step.epoch, loss: 0.0, batches: 0 });
        if let StepKind::Replay { replay_lang, report, .. } = &step.kind {
            record.replay_steps += 1;
            *record.replay_lang_counts.entry(replay_lang.clone()).or_default() += 1;
            record.cs_totals += report.total;
        } else {
            record.normal_steps += 1;
        }
        acc.loss += train_step(model, &step, plan.anchor(), config, &mut cache)?;
        acc.batches += 1;
    }
    if let Some(done) = current {
        end_epoch(model, plan, data, config, &tests, &done, &mut record, &mut probe_table)?;
    }
    record.probes = probe_table;
    record.backbone_checksum_end = model.backbone().checksum();
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn end_epoch(
    model: &ToyModel,
    plan: &TrainingPlan,
    data: &TaskData,
    config: &TrainConfig,
    tests: &BTreeMap<LanguageId, Vec<(Array1<f64>, usize)>>,
    done: &EpochAcc,
    record: &mut RunRecord,
    probes: &mut Option<ProbeTable>,
) -> Result<()> {
    let global_epoch = (done.phase - 1) * plan.epochs_per_phase + done.epoch;
    record.epoch_losses.push(done.loss / done.batches.max(1) as f64);
    let phase_end = done.epoch == plan.epochs_per_phase;
    for (k, lang) in plan.languages[..done.phase].iter().enumerate() {
        let accuracy = accuracy_encoded(model, lang, &tests[lang])?;
        record.history.push(EpochRecord { phase: done.phase, epoch: done.epoch, global_epoch, lang: lang.clone(), accuracy });
        if phase_end {
            record.matrix.set(done.phase - 1, k, accuracy);
        }
    }
    if let (true, Some(table), Some(probe_config)) = (phase_end && done.phase >= 2, probes.as_mut(), &config.probe) {
        let corpus = &data.test[&table.lang];
        for layer in 1..=model.dims.layers {
            let mut rng = substream(plan.seed, "probe", (done.phase * 1000 + layer) as u64);
            let acc = probe_layer(model, layer, corpus, &table.lang, probe_config, &mut rng)?;
            table.accuracy[layer - 1].push(acc);
        }
        table.phases.push(done.phase);
    }
    Ok(())
}
