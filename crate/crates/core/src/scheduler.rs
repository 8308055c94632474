//! Continual-training schedule with code-switched replay.
//!
//! Languages are visited in plan order, one phase each. Inside phase `t` a
//! batch counter `n` runs from 1 and keeps counting across epochs. When
//! `t > 1` and `n mod f == 0` the current batch slot is given to a replay
//! step instead: a batch is sampled from the replay memory (base-language
//! text), a target language is drawn uniformly from `{l_2, …, l_t}`, the
//! batch is code-switched into that language, and only the replay adapter
//! may be updated with it. Every other slot is a normal step that updates
//! the current language adapter, the replay adapter and the head.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codeswitch::{code_switch_batch, quota, CsConfig, CsMode, CsReport, OovPolicy, DEFAULT_RATIO};
use crate::corpus::{epoch_order, Batch, Corpus, PosCategory, Sentence};
use crate::error::{Error, Result};
use crate::lang::LanguageId;
use crate::lexicon::BilingualLexicon;
use crate::rng::SeededRng;

pub const DEFAULT_REPLAY_FREQUENCY: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_EPOCHS_PER_PHASE: usize = 10;

/// User-facing plan settings; unset fields take the defaults
/// (ρ = 0.5, f = 10, batch 16, full replay memory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub languages: Vec<LanguageId>,
    pub epochs_per_phase: usize,
    pub batch_size: usize,
    pub ratio: f64,
    pub replay_frequency: usize,
    pub memory_fraction: f64,
    pub cs_mode: CsMode,
    /// Defaults to the first language of the sequence.
    pub base_lang: Option<LanguageId>,
    pub oov_policy: OovPolicy,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            languages: Vec::new(),
            epochs_per_phase: DEFAULT_EPOCHS_PER_PHASE,
            batch_size: DEFAULT_BATCH_SIZE,
            ratio: DEFAULT_RATIO,
            replay_frequency: DEFAULT_REPLAY_FREQUENCY,
            memory_fraction: 1.0,
            cs_mode: CsMode::Pos(PosCategory::Adj),
            base_lang: None,
            oov_policy: OovPolicy::PassThrough,
            seed: 0,
        }
    }
}

/// A validated plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub languages: Vec<LanguageId>,
    pub epochs_per_phase: usize,
    pub batch_size: usize,
    pub ratio: f64,
    pub replay_frequency: usize,
    pub memory_fraction: f64,
    pub cs_mode: CsMode,
    pub base_lang: LanguageId,
    pub oov_policy: OovPolicy,
    pub seed: u64,
}

impl TrainingPlan {
    pub fn phases(&self) -> usize {
        self.languages.len()
    }

    pub fn anchor(&self) -> &LanguageId {
        &self.languages[0]
    }

    /// Replay is switched off entirely in [`CsMode::None`].
    pub fn replay_enabled(&self) -> bool {
        self.cs_mode != CsMode::None
    }

    pub fn cs_config(&self) -> CsConfig {
        CsConfig { mode: self.cs_mode, ratio: self.ratio, base_lang: self.base_lang.clone(), oov_policy: self.oov_policy }
    }

    /// Languages that replay batches may be switched into, in plan order.
    pub fn replay_targets(&self) -> &[LanguageId] {
        &self.languages[1..]
    }

    /// Checks that every corpus and lexicon the stream will need exists.
    pub fn validate_inputs(&self, datasets: &BTreeMap<LanguageId, Corpus>, lexicons: &LexiconSet) -> Result<()> {
        for lang in &self.languages {
            match datasets.get(lang) {
                Some(c) if !c.is_empty() => {}
                Some(_) => return Err(Error::data(format!("training corpus for {lang} is empty"))),
                None => return Err(Error::config(format!("no training corpus for {lang}"))),
            }
        }
        if self.replay_enabled() && self.phases() > 1 {
            for target in self.replay_targets() {
                if target != &self.base_lang && lexicons.get(&self.base_lang, target).is_none() {
                    return Err(Error::config(format!("no lexicon {}→{target} for replay", self.base_lang)));
                }
            }
        }
        Ok(())
    }
}

pub fn build_plan(config: &PlanConfig) -> Result<TrainingPlan> {
    if config.languages.is_empty() {
        return Err(Error::config("language sequence is empty"));
    }
    for (i, lang) in config.languages.iter().enumerate() {
        if config.languages[..i].contains(lang) {
            return Err(Error::config(format!("language {lang} appears twice in the sequence")));
        }
    }
    if config.replay_frequency == 0 {
        return Err(Error::config("replay frequency must be at least 1"));
    }
    if !(0.0..=1.0).contains(&config.ratio) {
        return Err(Error::config(format!("code-switch ratio {} outside [0, 1]", config.ratio)));
    }
    if !(config.memory_fraction > 0.0 && config.memory_fraction <= 1.0) {
        return Err(Error::config(format!("memory fraction {} outside (0, 1]", config.memory_fraction)));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if config.epochs_per_phase == 0 {
        return Err(Error::config("epochs per phase must be at least 1"));
    }
    Ok(TrainingPlan {
        languages: config.languages.clone(),
        epochs_per_phase: config.epochs_per_phase,
        batch_size: config.batch_size,
        ratio: config.ratio,
        replay_frequency: config.replay_frequency,
        memory_fraction: config.memory_fraction,
        cs_mode: config.cs_mode,
        base_lang: config.base_lang.clone().unwrap_or_else(|| config.languages[0].clone()),
        oov_policy: config.oov_policy,
        seed: config.seed,
    })
}

/// Lexicons keyed by `(source, target)`.
#[derive(Debug, Clone, Default)]
pub struct LexiconSet {
    by_pair: BTreeMap<(LanguageId, LanguageId), BilingualLexicon>,
}

impl LexiconSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lexicon: BilingualLexicon) {
        self.by_pair.insert((lexicon.source_lang().clone(), lexicon.target_lang().clone()), lexicon);
    }

    pub fn get(&self, source: &LanguageId, target: &LanguageId) -> Option<&BilingualLexicon> {
        self.by_pair.get(&(source.clone(), target.clone()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &BilingualLexicon> {
        self.by_pair.values()
    }

    pub fn len(&self) -> usize {
        self.by_pair.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_pair.is_empty()
    }
}

impl FromIterator<BilingualLexicon> for LexiconSet {
    fn from_iter<I: IntoIterator<Item = BilingualLexicon>>(iter: I) -> Self {
        let mut set = LexiconSet::new();
        for lex in iter {
            set.insert(lex);
        }
        set
    }
}

/// Sentences available for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMemory {
    pub pool: Vec<Sentence>,
    pub fraction: f64,
}

/// Samples `⌈m·|corpus|⌉` sentences without replacement, kept in corpus order.
pub fn build_replay_memory(corpus: &Corpus, fraction: f64, rng: &mut SeededRng) -> Result<ReplayMemory> {
    if corpus.is_empty() {
        return Err(Error::data(format!("replay corpus for {} is empty", corpus.lang)));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("memory fraction {fraction} outside (0, 1]")));
    }
    let size = quota(fraction, corpus.len()).max(1);
    let mut picked = index::sample(rng, corpus.len(), size).into_vec();
    picked.sort_unstable();
    Ok(ReplayMemory { pool: picked.into_iter().map(|i| corpus.sentences[i].clone()).collect(), fraction })
}

/// Which parameter groups a step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateMask {
    pub language_adapter: bool,
    pub replay_adapter: bool,
    pub head: bool,
}

impl UpdateMask {
    pub const NORMAL: UpdateMask = UpdateMask { language_adapter: true, replay_adapter: true, head: true };
    pub const REPLAY: UpdateMask = UpdateMask { language_adapter: false, replay_adapter: true, head: false };

    /// `+`-joined names of the enabled groups, e.g. `replay_adapter`.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.language_adapter {
            parts.push("language_adapter");
        }
        if self.replay_adapter {
            parts.push("replay_adapter");
        }
        if self.head {
            parts.push("head");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Normal {
        batch: Batch,
    },
    Replay {
        replay_lang: LanguageId,
        /// Positions in the replay memory pool the batch was drawn from.
        memory_indices: Vec<usize>,
        cs_batch: Batch,
        report: CsReport,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// 1-based phase index `t`.
    pub phase: usize,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    /// In-phase batch counter, from 1.
    pub n: usize,
    /// The language of the phase.
    pub lang: LanguageId,
    pub kind: StepKind,
    pub mask: UpdateMask,
}

impl Step {
    pub fn is_replay(&self) -> bool {
        matches!(self.kind, StepKind::Replay { .. })
    }

    pub fn replay_lang(&self) -> Option<&LanguageId> {
        match &self.kind {
            StepKind::Replay { replay_lang, .. } => Some(replay_lang),
            StepKind::Normal { .. } => None,
        }
    }

    /// One row of the schedule audit log: phase, epoch, n, kind, replay_lang, mask.
    pub fn audit_fields(&self) -> [String; 6] {
        [
            self.phase.to_string(),
            self.epoch.to_string(),
            self.n.to_string(),
            if self.is_replay() { "replay" } else { "normal" }.to_string(),
            self.replay_lang().map(|l| l.to_string()).unwrap_or_default(),
            self.mask.describe(),
        ]
    }
}

pub const AUDIT_HEADER: [&str; 6] = ["phase", "epoch", "n", "kind", "replay_lang", "mask"];

/// Lazily generated step stream. Holds one epoch's visiting order and
/// builds batches on demand.
pub struct StepStream<'a> {
    plan: &'a TrainingPlan,
    datasets: &'a BTreeMap<LanguageId, Corpus>,
    memory: &'a ReplayMemory,
    lexicons: &'a LexiconSet,
    cs_config: CsConfig,
    order_rng: SeededRng,
    replay_rng: SeededRng,
    phase: usize,
    epoch: usize,
    n: usize,
    order: Vec<usize>,
    cursor: usize,
}

/// Builds the step stream for `plan`. Input coverage is validated up front
/// so that the stream itself never fails on a missing lexicon.
pub fn steps<'a>(
    plan: &'a TrainingPlan,
    datasets: &'a BTreeMap<LanguageId, Corpus>,
    memory: &'a ReplayMemory,
    lexicons: &'a LexiconSet,
    rng: &mut SeededRng,
) -> Result<StepStream<'a>> {
    plan.validate_inputs(datasets, lexicons)?;
    if plan.replay_enabled() && plan.phases() > 1 && memory.pool.is_empty() {
        return Err(Error::data("replay memory is empty"));
    }
    // Shuffling and replay sampling get separate streams so that switching
    // replay on or off leaves the data order untouched.
    let order_rng = SeededRng::seed_from_u64(rng.random());
    let replay_rng = SeededRng::seed_from_u64(rng.random());
    let mut stream = StepStream {
        plan,
        datasets,
        memory,
        lexicons,
        cs_config: plan.cs_config(),
        order_rng,
        replay_rng,
        phase: 1,
        epoch: 1,
        n: 0,
        order: Vec::new(),
        cursor: 0,
    };
    stream.start_epoch()?;
    Ok(stream)
}

impl StepStream<'_> {
    fn corpus(&self) -> &Corpus {
        &self.datasets[&self.plan.languages[self.phase - 1]]
    }

    fn start_epoch(&mut self) -> Result<()> {
        let len = self.corpus().len();
        self.order = epoch_order(len, self.plan.batch_size, true, &mut self.order_rng)?;
        self.cursor = 0;
        Ok(())
    }

    fn replay_step(&mut self, index: usize) -> Result<StepKind> {
        let t = self.phase;
        let replay_lang = self.plan.languages[self.replay_rng.random_range(1..t)].clone();
        let pool = &self.memory.pool;
        let size = self.plan.batch_size.min(pool.len());
        let memory_indices = index::sample(&mut self.replay_rng, pool.len(), size).into_vec();
        let batch = Batch { sentences: memory_indices.iter().map(|&i| pool[i].clone()).collect(), index };
        let (cs_batch, report) = if replay_lang == self.plan.base_lang {
            (batch, CsReport::default())
        } else {
            let lexicon = self
                .lexicons
                .get(&self.plan.base_lang, &replay_lang)
                .ok_or_else(|| Error::config(format!("no lexicon {}→{replay_lang}", self.plan.base_lang)))?;
            code_switch_batch(&batch, &self.cs_config, lexicon, &mut self.replay_rng)?
        };
        Ok(StepKind::Replay { replay_lang, memory_indices, cs_batch, report })
    }
}

impl Iterator for StepStream<'_> {
    type Item = Result<Step>;

    fn next(&mut self) -> Option<Result<Step>> {
        loop {
            if self.phase > self.plan.phases() {
                return None;
            }
            if self.cursor >= self.order.len() {
                self.epoch += 1;
                if self.epoch > self.plan.epochs_per_phase {
                    self.phase += 1;
                    self.epoch = 1;
                    self.n = 0;
                    if self.phase > self.plan.phases() {
                        return None;
                    }
                }
                if let Err(e) = self.start_epoch() {
                    return Some(Err(e));
                }
                continue;
            }

            let batch_index = self.cursor / self.plan.batch_size;
            let end = (self.cursor + self.plan.batch_size).min(self.order.len());
            let slot = self.cursor..end;
            self.cursor = end;
            self.n += 1;

            let lang = self.plan.languages[self.phase - 1].clone();
            let replay_due = self.plan.replay_enabled() && self.phase > 1 && self.n.is_multiple_of(self.plan.replay_frequency);
            let (kind, mask) = if replay_due {
                match self.replay_step(batch_index) {
                    Ok(kind) => (kind, UpdateMask::REPLAY),
                    Err(e) => return Some(Err(e)),
                }
            } else {
                let corpus = self.corpus();
                let batch = Batch { sentences: self.order[slot].iter().map(|&i| corpus.sentences[i].clone()).collect(), index: batch_index };
                (StepKind::Normal { batch }, UpdateMask::NORMAL)
            };
            return Some(Ok(Step { phase: self.phase, epoch: self.epoch, n: self.n, lang, kind, mask }));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Token;
    use crate::rng::seeded;

    fn lang(code: &str) -> LanguageId {
        LanguageId::new(code).unwrap()
    }

    fn langs(codes: &[&str]) -> Vec<LanguageId> {
        codes.iter().map(|c| lang(c)).collect()
    }

    fn corpus(code: &str, n: usize) -> Corpus {
        let l = lang(code);
        let sentences = (0..n)
            .map(|i| Sentence {
                tokens: vec![Token::new(format!("{code}{i}"), PosCategory::Noun, l.clone()), Token::new(format!("{code}v"), PosCategory::Verb, l.clone())],
                label: Some(format!("c{}", i % 2)),
                lang: l.clone(),
            })
            .collect();
        Corpus::from_sentences(l, sentences)
    }

    fn lexicons(base: &str, targets: &[&str], vocab: usize) -> LexiconSet {
        targets
            .iter()
            .map(|t| {
                let mut lex = BilingualLexicon::new(lang(base), lang(t));
                for i in 0..vocab {
                    lex.insert(&format!("{base}{i}"), &format!("{t}{i}"));
                }
                lex
            })
            .collect()
    }

    fn setup(codes: &[&str], sentences: usize, config: PlanConfig) -> (TrainingPlan, BTreeMap<LanguageId, Corpus>, ReplayMemory, LexiconSet) {
        let plan = build_plan(&PlanConfig { languages: langs(codes), ..config }).unwrap();
        let datasets: BTreeMap<_, _> = codes.iter().map(|c| (lang(c), corpus(c, sentences))).collect();
        let memory = build_replay_memory(&datasets[&lang(codes[0])], plan.memory_fraction, &mut seeded(1)).unwrap();
        let lex = lexicons(codes[0], &codes[1..], sentences);
        (plan, datasets, memory, lex)
    }

    #[test]
    fn defaults() {
        let plan = build_plan(&PlanConfig { languages: langs(&["en", "hi", "bn"]), ..PlanConfig::default() }).unwrap();
        assert_eq!(plan.phases(), 3);
        assert_eq!(plan.replay_frequency, 10);
        assert_eq!(plan.ratio, 0.5);
        assert_eq!(plan.batch_size, 16);
        assert_eq!(plan.memory_fraction, 1.0);
        assert_eq!(plan.base_lang, lang("en"));
    }

    #[test]
    fn plan_validation_errors() {
        let bad = |c: PlanConfig| matches!(build_plan(&c), Err(Error::Config(_)));
        let base = PlanConfig { languages: langs(&["en", "hi"]), ..PlanConfig::default() };
        assert!(bad(PlanConfig { languages: vec![], ..base.clone() }));
        assert!(bad(PlanConfig { languages: langs(&["en", "hi", "en"]), ..base.clone() }));
        assert!(bad(PlanConfig { replay_frequency: 0, ..base.clone() }));
        assert!(bad(PlanConfig { ratio: 1.2, ..base.clone() }));
        assert!(bad(PlanConfig { memory_fraction: 0.0, ..base.clone() }));
        assert!(build_plan(&PlanConfig { languages: langs(&["en"]), ..base }).is_ok());
    }

    #[test]
    fn memory_sizes() {
        let c = corpus("en", 1000);
        let full = build_replay_memory(&c, 1.0, &mut seeded(0)).unwrap();
        assert_eq!(full.pool, c.sentences);
        let tenth = build_replay_memory(&c, 0.1, &mut seeded(0)).unwrap();
        assert_eq!(tenth.pool.len(), 100);
        let mut forms: Vec<_> = tenth.pool.iter().map(|s| s.tokens[0].form.clone()).collect();
        forms.dedup();
        assert_eq!(forms.len(), 100);
        assert_eq!(build_replay_memory(&c, 0.3, &mut seeded(4)).unwrap(), build_replay_memory(&c, 0.3, &mut seeded(4)).unwrap());
        assert!(matches!(build_replay_memory(&corpus("en", 0), 0.5, &mut seeded(0)), Err(Error::Data { .. })));
    }

    #[test]
    fn single_language_never_replays() {
        let (plan, data, memory, lex) = setup(&["en"], 200, PlanConfig { epochs_per_phase: 2, replay_frequency: 1, ..PlanConfig::default() });
        let all: Vec<_> = steps(&plan, &data, &memory, &lex, &mut seeded(0)).unwrap().map(Result::unwrap).collect();
        assert_eq!(all.len(), 2 * 13);
        assert!(all.iter().all(|s| !s.is_replay() && s.mask == UpdateMask::NORMAL));
    }

    #[test]
    fn replay_at_every_tenth_batch() {
        // 320 sentences / 16 = 20 batches per phase
        let (plan, data, memory, lex) = setup(&["en", "hi"], 320, PlanConfig { epochs_per_phase: 1, ..PlanConfig::default() });
        let all: Vec<_> = steps(&plan, &data, &memory, &lex, &mut seeded(0)).unwrap().map(Result::unwrap).collect();
        let replay_n: Vec<_> = all.iter().filter(|s| s.is_replay()).map(|s| (s.phase, s.n)).collect();
        assert_eq!(replay_n, [(2, 10), (2, 20)]);
        for s in all.iter().filter(|s| s.is_replay()) {
            assert_eq!(s.mask, UpdateMask::REPLAY);
            assert_eq!(s.replay_lang(), Some(&lang("hi")));
        }
    }

    #[test]
    fn counter_persists_across_epochs() {
        // 7 batches per epoch, 3 epochs = 21 batches, f = 5 -> n = 5, 10, 15, 20
        let (plan, data, memory, lex) = setup(&["en", "hi"], 7 * 16, PlanConfig { epochs_per_phase: 3, replay_frequency: 5, ..PlanConfig::default() });
        let replay: Vec<_> = steps(&plan, &data, &memory, &lex, &mut seeded(0)).unwrap().map(Result::unwrap).filter(|s| s.is_replay()).map(|s| (s.epoch, s.n)).collect();
        assert_eq!(replay, [(1, 5), (2, 10), (3, 15), (3, 20)]);
    }

    #[test]
    fn replay_batches_come_from_memory() {
        let (plan, data, _, lex) = setup(&["en", "hi", "bn"], 100, PlanConfig { epochs_per_phase: 2, replay_frequency: 2, memory_fraction: 0.5, ..PlanConfig::default() });
        let memory = build_replay_memory(&data[&lang("en")], 0.5, &mut seeded(3)).unwrap();
        for step in steps(&plan, &data, &memory, &lex, &mut seeded(0)).unwrap() {
            if let StepKind::Replay { memory_indices, cs_batch, .. } = step.unwrap().kind {
                assert_eq!(memory_indices.len(), cs_batch.sentences.len());
                for (i, s) in memory_indices.iter().zip(&cs_batch.sentences) {
                    assert_eq!(memory.pool[*i].label, s.label);
                    assert_eq!(memory.pool[*i].len(), s.len());
                }
            }
        }
    }

    #[test]
    fn none_mode_has_no_replay() {
        let (plan, data, memory, lex) = setup(&["en", "hi"], 320, PlanConfig { epochs_per_phase: 1, cs_mode: CsMode::None, ..PlanConfig::default() });
        assert!(steps(&plan, &data, &memory, &lex, &mut seeded(0)).unwrap().all(|s| !s.unwrap().is_replay()));
    }

    #[test]
    fn missing_lexicon_fails_before_streaming() {
        let (plan, data, memory, _) = setup(&["en", "hi", "bn"], 50, PlanConfig::default());
        let partial = lexicons("en", &["hi"], 50);
        assert!(matches!(steps(&plan, &data, &memory, &partial, &mut seeded(0)), Err(Error::Config(_))));
    }

    #[test]
    fn identical_seeds_identical_streams() {
        let (plan, data, memory, lex) = setup(&["en", "hi", "bn"], 90, PlanConfig { epochs_per_phase: 2, replay_frequency: 3, ..PlanConfig::default() });
        let run = |seed| steps(&plan, &data, &memory, &lex, &mut seeded(seed)).unwrap().map(Result::unwrap).collect::<Vec<_>>();
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn audit_fields() {
        let (plan, data, memory, lex) = setup(&["en", "hi"], 320, PlanConfig { epochs_per_phase: 1, ..PlanConfig::default() });
        let rows: Vec<_> = steps(&plan, &data, &memory, &lex, &mut seeded(0)).unwrap().map(|s| s.unwrap().audit_fields()).collect();
        assert_eq!(rows[0], ["1", "1", "1", "normal", "", "language_adapter+replay_adapter+head"]);
        assert_eq!(rows[29], ["2", "1", "10", "replay", "hi", "replay_adapter"]);
    }
}
