//! Synthetic parallel pseudo-languages.
//!
//! All pseudo-languages share one concept inventory. A concept has the same
//! POS tag everywhere and a different, pronounceable surface form in every
//! language, so the pairwise lexicons are exact bijections and a sentence
//! generated from concept draws can be rendered in any language.
//!
//! Sentences come from a [`TemplateGrammar`]: each template is a sequence of
//! slots with a fixed class label. A slot names a POS category and, for
//! keyword slots, a class-specific subset of that category's concepts.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PosCategory, Sentence, Token};
use crate::error::{Error, Result};
use crate::lang::LanguageId;
use crate::lexicon::BilingualLexicon;
use crate::rng::{substream, SeededRng};
use crate::scheduler::LexiconSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLanguage {
    pub id: LanguageId,
    vocab: Vec<String>,
    pos_of: Vec<PosCategory>,
}

impl PseudoLanguage {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn surface(&self, concept: ConceptId) -> &str {
        &self.vocab[concept.0 as usize]
    }

    pub fn pos(&self, concept: ConceptId) -> PosCategory {
        self.pos_of[concept.0 as usize]
    }

    pub fn concepts(&self) -> impl Iterator<Item = ConceptId> + '_ {
        (0..self.vocab.len() as u32).map(ConceptId)
    }

    /// Concepts tagged `pos`, in id order.
    pub fn concepts_of(&self, pos: PosCategory) -> Vec<ConceptId> {
        self.concepts().filter(|&c| self.pos(c) == pos).collect()
    }

    pub fn pos_counts(&self) -> BTreeMap<PosCategory, usize> {
        let mut counts = BTreeMap::new();
        for &p in &self.pos_of {
            *counts.entry(p).or_insert(0) += 1;
        }
        counts
    }
}

/// Splits `total` into integer shares proportional to `weights` by the
/// largest-remainder method. Ties in the remainder go to the earlier key.
pub fn apportion(total: usize, weights: &BTreeMap<PosCategory, f64>) -> Result<BTreeMap<PosCategory, usize>> {
    if weights.is_empty() {
        return Err(Error::config("POS mix is empty"));
    }
    if let Some((pos, w)) = weights.iter().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::config(format!("POS weight for {pos} must be positive, got {w}")));
    }
    let sum: f64 = weights.values().sum();
    let mut shares: Vec<(PosCategory, usize, f64)> = weights
        .iter()
        .map(|(&pos, &w)| {
            let exact = total as f64 * w / sum;
            (pos, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = shares.iter().map(|s| s.1).sum();
    let mut by_remainder: Vec<usize> = (0..shares.len()).collect();
    by_remainder.sort_by(|&a, &b| shares[b].2.total_cmp(&shares[a].2).then(a.cmp(&b)));
    for &i in by_remainder.iter().take(total - assigned) {
        shares[i].1 += 1;
    }
    Ok(shares.into_iter().map(|(pos, n, _)| (pos, n)).collect())
}

const CONSONANTS: &[u8] = b"bdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

fn pronounceable(rng: &mut SeededRng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut word = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        word.push(*CONSONANTS.choose(rng).unwrap() as char);
        word.push(*VOWELS.choose(rng).unwrap() as char);
    }
    word
}

/// Generates `k` pseudo-languages (`pl1`, `pl2`, …) over `vocab_size`
/// shared concepts. Concept tags follow `pos_mix` exactly by apportionment;
/// surface forms are distinct within and across languages.
pub fn gen_languages(k: usize, vocab_size: usize, pos_mix: &BTreeMap<PosCategory, f64>, seed: u64) -> Result<Vec<PseudoLanguage>> {
    if k == 0 {
        return Err(Error::config("need at least one pseudo-language"));
    }
    if vocab_size == 0 {
        return Err(Error::config("vocabulary size must be positive"));
    }
    let counts = apportion(vocab_size, pos_mix)?;
    let pos_of: Vec<PosCategory> = counts.iter().flat_map(|(&pos, &n)| std::iter::repeat_n(pos, n)).collect();

    let mut taken = HashSet::new();
    let mut languages = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = substream(seed, "surface", i as u64);
        let mut vocab = Vec::with_capacity(vocab_size);
        while vocab.len() < vocab_size {
            let word = pronounceable(&mut rng);
            if taken.insert(word.clone()) {
                vocab.push(word);
            }
        }
        languages.push(PseudoLanguage { id: LanguageId::new(format!("pl{}", i + 1))?, vocab, pos_of: pos_of.clone() });
    }
    Ok(languages)
}

/// Exact lexicons for every ordered pair of distinct languages.
pub fn gen_lexicons(langs: &[PseudoLanguage]) -> Result<LexiconSet> {
    if langs.len() < 2 {
        return Err(Error::config("lexicons need at least two languages"));
    }
    let mut set = LexiconSet::new();
    for a in langs {
        for b in langs {
            if a.id == b.id {
                continue;
            }
            let mut lex = BilingualLexicon::new(a.id.clone(), b.id.clone());
            for c in a.concepts() {
                lex.insert(a.surface(c), b.surface(c));
            }
            set.insert(lex);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub pos: PosCategory,
    /// Restricts the slot to these concepts; `None` means any concept of `pos`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<Vec<ConceptId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub slots: Vec<Slot>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateGrammar {
    pub templates: Vec<Template>,
    pub class_count: usize,
}

/// Shape of a randomly generated grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarSpec {
    pub class_count: usize,
    pub templates_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// One keyword slot per entry, restricted to class-specific concepts
    /// of that category. Repeats give several slots of one category.
    pub keyword_pos: Vec<PosCategory>,
    /// Keywords reserved per class.
    pub keywords_per_class: usize,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        GrammarSpec {
            class_count: 10,
            templates_per_class: 3,
            min_len: 5,
            max_len: 9,
            keyword_pos: vec![PosCategory::Adj, PosCategory::Noun, PosCategory::Verb],
            keywords_per_class: 2,
        }
    }
}

pub fn class_label(class: usize) -> String {
    format!("class_{class:03}")
}

impl TemplateGrammar {
    pub fn new(templates: Vec<Template>, class_count: usize) -> Result<Self> {
        let grammar = TemplateGrammar { templates, class_count };
        grammar.validate()?;
        Ok(grammar)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::config("grammar has no templates"));
        }
        for t in &self.templates {
            if t.slots.is_empty() {
                return Err(Error::config("template with no slots"));
            }
            if t.class >= self.class_count {
                return Err(Error::config(format!("template class {} outside [0, {})", t.class, self.class_count)));
            }
        }
        Ok(())
    }

    /// Random grammar over the categories present in `lang`.
    ///
    /// Non-keyword slots draw their category in proportion to how many
    /// concepts carry it, so token-level POS frequencies track the mix.
    pub fn generate(lang: &PseudoLanguage, spec: &GrammarSpec, rng: &mut SeededRng) -> Result<Self> {
        if spec.class_count < 2 || spec.templates_per_class == 0 {
            return Err(Error::config("grammar needs at least two classes and one template per class"));
        }
        if spec.min_len == 0 || spec.min_len > spec.max_len || spec.keyword_pos.len() > spec.min_len {
            return Err(Error::config("invalid template length range"));
        }
        let counts = lang.pos_counts();
        let weighted: Vec<(PosCategory, usize)> = counts.into_iter().collect();

        // pools[category][class]
        let mut keyword_pools: BTreeMap<PosCategory, Vec<Vec<ConceptId>>> = BTreeMap::new();
        for &pos in &spec.keyword_pos {
            if keyword_pools.contains_key(&pos) {
                continue;
            }
            let candidates = lang.concepts_of(pos);
            let needed = spec.keywords_per_class * spec.class_count;
            if spec.keywords_per_class == 0 || candidates.len() < needed {
                return Err(Error::config(format!("{needed} keywords of {pos} needed, vocabulary has {}", candidates.len())));
            }
            keyword_pools.insert(pos, candidates.chunks(spec.keywords_per_class).take(spec.class_count).map(<[_]>::to_vec).collect());
        }

        let mut templates = Vec::new();
        #[allow(clippy::needless_range_loop)]
        for class in 0..spec.class_count {
            for _ in 0..spec.templates_per_class {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let mut slots: Vec<Slot> = (0..len - spec.keyword_pos.len())
                    .map(|_| {
                        let (pos, _) = weighted.choose_weighted(rng, |(_, n)| *n).expect("non-empty vocabulary");
                        Slot { pos: *pos, pool: None }
                    })
                    .collect();
                for &pos in &spec.keyword_pos {
                    let at = rng.random_range(0..=slots.len());
                    slots.insert(at, Slot { pos, pool: Some(keyword_pools[&pos][class].clone()) });
                }
                templates.push(Template { slots, class });
            }
        }
        TemplateGrammar::new(templates, spec.class_count)
    }

    /// Categories used by any slot.
    pub fn categories(&self) -> BTreeSet<PosCategory> {
        self.templates.iter().flat_map(|t| t.slots.iter().map(|s| s.pos)).collect()
    }
}

/// Draws `n` sentences: a uniform template, then a uniform concept per slot.
///
/// Draws depend only on the shared concept inventory, so the same rng
/// state yields concept-aligned sentences in every language.
pub fn gen_corpus(lang: &PseudoLanguage, grammar: &TemplateGrammar, n: usize, rng: &mut SeededRng) -> Result<Corpus> {
    grammar.validate()?;
    let mut by_pos: BTreeMap<PosCategory, Vec<ConceptId>> = BTreeMap::new();
    for pos in grammar.categories() {
        let concepts = lang.concepts_of(pos);
        if concepts.is_empty() {
            return Err(Error::config(format!("no {pos} concepts in {} for a template slot", lang.id)));
        }
        by_pos.insert(pos, concepts);
    }
    for t in &grammar.templates {
        for slot in &t.slots {
            if let Some(pool) = &slot.pool {
                if pool.is_empty() || pool.iter().any(|&c| c.0 as usize >= lang.vocab_size() || lang.pos(c) != slot.pos) {
                    return Err(Error::config(format!("keyword pool of a {} slot does not match the vocabulary", slot.pos)));
                }
            }
        }
    }

    let mut corpus = Corpus::new(lang.id.clone());
    for _ in 0..n {
        let template = grammar.templates.choose(rng).expect("validated non-empty");
        let tokens = template
            .slots
            .iter()
            .map(|slot| {
                let pool = slot.pool.as_deref().unwrap_or(&by_pos[&slot.pos]);
                let concept = *pool.choose(rng).expect("validated non-empty");
                Token::new(lang.surface(concept), slot.pos, lang.id.clone())
            })
            .collect();
        corpus.push(Sentence { tokens, label: Some(class_label(template.class)), lang: lang.id.clone() });
    }
    Ok(corpus)
}

/// Default concept tag mix: NOUN 35%, VERB 25%, ADJ 20%, ADV 10%, PROPN 10%.
pub fn default_pos_mix() -> BTreeMap<PosCategory, f64> {
    [(PosCategory::Noun, 0.35), (PosCategory::Verb, 0.25), (PosCategory::Adj, 0.2), (PosCategory::Adv, 0.1), (PosCategory::Propn, 0.1)].into_iter().collect()
}

/// Everything needed to build a synthetic continual-learning task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub languages: usize,
    pub vocab_size: usize,
    pub pos_mix: BTreeMap<PosCategory, f64>,
    pub grammar: GrammarSpec,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { languages: 3, vocab_size: 400, pos_mix: default_pos_mix(), grammar: GrammarSpec::default(), train_size: 5000, test_size: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub languages: Vec<PseudoLanguage>,
    pub lexicons: LexiconSet,
    pub grammar: TemplateGrammar,
    pub train: BTreeMap<LanguageId, Corpus>,
    pub test: BTreeMap<LanguageId, Corpus>,
}

impl SynthTask {
    pub fn ids(&self) -> Vec<LanguageId> {
        self.languages.iter().map(|l| l.id.clone()).collect()
    }
}

/// Languages, lexicons, one grammar shared by all languages, and train and
/// test corpora per language, all derived from `seed`.
pub fn gen_task(config: &SynthConfig, seed: u64) -> Result<SynthTask> {
    let languages = gen_languages(config.languages, config.vocab_size, &config.pos_mix, seed)?;
    let lexicons = if languages.len() > 1 { gen_lexicons(&languages)? } else { LexiconSet::new() };
    let grammar = TemplateGrammar::generate(&languages[0], &config.grammar, &mut substream(seed, "grammar", 0))?;
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (i, lang) in languages.iter().enumerate() {
        train.insert(lang.id.clone(), gen_corpus(lang, &grammar, config.train_size, &mut substream(seed, "train", i as u64))?);
        test.insert(lang.id.clone(), gen_corpus(lang, &grammar, config.test_size, &mut substream(seed, "test", i as u64))?);
    }
    Ok(SynthTask { languages, lexicons, grammar, train, test })
}
