//! POS-guided code-switching.
//!
//! Each sentence gets a quota `α = ⌈ρ·|s|⌉` of positions to switch. Under
//! [`CsMode::Pos`] the positions tagged with the target category `c` are
//! taken first:
//!
//! * exactly `α` tokens of category `c`: all of them;
//! * fewer than `α`: all of them plus uniformly drawn positions outside `c`;
//! * more than `α`: a uniform `α`-subset of them.
//!
//! Every selected token with a lexicon entry is replaced by a translation.
//! Tokens without an entry stay as they are and are counted as
//! out-of-vocabulary, unless [`OovPolicy::RestrictToTranslatable`] removed
//! them from the candidate pools up front.

use std::ops::AddAssign;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, PosCategory, Sentence};
use crate::error::{Error, Result};
use crate::lang::LanguageId;
use crate::lexicon::BilingualLexicon;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "category", rename_all = "lowercase")]
pub enum CsMode {
    /// No switching (and, in a training plan, no replay).
    None,
    /// `α` positions drawn uniformly, ignoring POS.
    Random,
    /// Positions of the given category first, topped up at random.
    Pos(PosCategory),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Select first, translate second; untranslatable picks stay verbatim.
    #[default]
    PassThrough,
    /// Only lexicon-covered tokens are candidates.
    RestrictToTranslatable,
}

pub const DEFAULT_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsConfig {
    pub mode: CsMode,
    pub ratio: f64,
    pub base_lang: LanguageId,
    #[serde(default)]
    pub oov_policy: OovPolicy,
}

impl CsConfig {
    pub fn new(mode: CsMode, ratio: f64, base_lang: LanguageId) -> Result<Self> {
        let config = CsConfig { mode, ratio, base_lang, oov_policy: OovPolicy::PassThrough };
        config.validate()?;
        Ok(config)
    }

    pub fn with_oov_policy(mut self, policy: OovPolicy) -> Self {
        self.oov_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::config(format!("code-switch ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }
}

/// Realized switching counts. `selected = switched + oov`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CsStats {
    pub selected: usize,
    pub switched: usize,
    pub oov: usize,
}

impl AddAssign for CsStats {
    fn add_assign(&mut self, rhs: Self) {
        self.selected += rhs.selected;
        self.switched += rhs.switched;
        self.oov += rhs.oov;
    }
}

/// Per-sentence and aggregated stats for one batch.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CsReport {
    pub per_sentence: Vec<CsStats>,
    pub total: CsStats,
}

/// `⌈ρ·len⌉`.
///
/// The product is nudged down by 1e-9 before rounding up so that values
/// like `0.7 · 10 = 7.000000000000001` give 7, not 8.
pub fn quota(ratio: f64, sentence_len: usize) -> usize {
    let x = ratio * sentence_len as f64;
    let q = (x - 1e-9).ceil().max(0.0) as usize;
    q.min(sentence_len)
}

/// Chooses `alpha` positions of `sentence`, preferring those tagged `category`.
///
/// Returned indices are sorted ascending.
pub fn select_targets(sentence: &Sentence, category: PosCategory, alpha: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if alpha > sentence.len() {
        return Err(Error::Contract(format!("quota {alpha} exceeds sentence length {}", sentence.len())));
    }
    let (in_cat, out_cat): (Vec<usize>, Vec<usize>) = (0..sentence.len()).partition(|&i| sentence.tokens[i].upos == category);
    Ok(select_from_pools(&in_cat, &out_cat, alpha, rng))
}

// Three-case selection over a preferred pool and a fallback pool. The
// request is clamped to the combined pool size.
fn select_from_pools(preferred: &[usize], fallback: &[usize], alpha: usize, rng: &mut SeededRng) -> Vec<usize> {
    let alpha = alpha.min(preferred.len() + fallback.len());
    let mut chosen: Vec<usize> = if preferred.len() == alpha {
        preferred.to_vec()
    } else if preferred.len() < alpha {
        let extra = alpha - preferred.len();
        preferred.iter().copied().chain(sample(fallback, extra, rng)).collect()
    } else {
        sample(preferred, alpha, rng).collect()
    };
    chosen.sort_unstable();
    chosen
}

fn sample<'a>(pool: &'a [usize], amount: usize, rng: &mut SeededRng) -> impl Iterator<Item = usize> + 'a {
    index::sample(rng, pool.len(), amount).into_iter().map(move |i| pool[i])
}

/// Applies code-switching to one sentence.
pub fn code_switch_sentence(
    sentence: &Sentence,
    config: &CsConfig,
    lexicon: &BilingualLexicon,
    rng: &mut SeededRng,
) -> Result<(Sentence, CsStats)> {
    config.validate()?;
    if lexicon.source_lang() != &config.base_lang {
        return Err(Error::config(format!(
            "lexicon translates from {} but the code-switch base language is {}",
            lexicon.source_lang(),
            config.base_lang
        )));
    }
    let mut out = sentence.clone();
    let alpha = quota(config.ratio, sentence.len());
    if config.mode == CsMode::None || alpha == 0 {
        return Ok((out, CsStats::default()));
    }

    let eligible = |i: &usize| match config.oov_policy {
        OovPolicy::PassThrough => true,
        OovPolicy::RestrictToTranslatable => lexicon.contains(&sentence.tokens[*i].form),
    };
    let targets = match config.mode {
        CsMode::None => unreachable!(),
        CsMode::Random => {
            let pool: Vec<usize> = (0..sentence.len()).filter(eligible).collect();
            select_from_pools(&[], &pool, alpha, rng)
        }
        CsMode::Pos(category) => {
            let (in_cat, out_cat): (Vec<usize>, Vec<usize>) =
                (0..sentence.len()).filter(eligible).partition(|&i| sentence.tokens[i].upos == category);
            select_from_pools(&in_cat, &out_cat, alpha, rng)
        }
    };

    let mut stats = CsStats { selected: targets.len(), ..CsStats::default() };
    for i in targets {
        let token = &mut out.tokens[i];
        match lexicon.translate(&token.form, rng) {
            Some(translation) => {
                token.form = translation;
                token.switched = true;
                token.origin_lang = lexicon.target_lang().clone();
                stats.switched += 1;
            }
            None => stats.oov += 1,
        }
    }
    Ok((out, stats))
}

/// Applies [`code_switch_sentence`] to every sentence in order, sharing one rng.
pub fn code_switch_batch(batch: &Batch, config: &CsConfig, lexicon: &BilingualLexicon, rng: &mut SeededRng) -> Result<(Batch, CsReport)> {
    let mut report = CsReport::default();
    let mut sentences = Vec::with_capacity(batch.sentences.len());
    for sentence in &batch.sentences {
        let (switched, stats) = code_switch_sentence(sentence, config, lexicon, rng)?;
        report.total += stats;
        report.per_sentence.push(stats);
        sentences.push(switched);
    }
    Ok((Batch { sentences, index: batch.index }, report))
}
