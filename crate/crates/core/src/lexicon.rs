//! Bilingual word-translation tables.
//!
//! The on-disk format is the plain MUSE dictionary dump: one
//! `source<sep>target` pair per line where `<sep>` is a tab or a run of
//! spaces. Lines starting with `#` are comments. Lines that do not describe
//! a single-word pair (multiword expressions, missing fields) are skipped
//! and counted rather than rejected, since real dumps are noisy.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::lang::LanguageId;
use crate::rng::SeededRng;

/// Word-to-word translation table from `source_lang` into `target_lang`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BilingualLexicon {
    source_lang: LanguageId,
    target_lang: LanguageId,
    entries: BTreeMap<String, Vec<String>>,
    skipped_count: usize,
}

/// Loader knobs.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexiconOptions {
    /// Abort with a data error when more than this fraction of the
    /// non-comment lines had to be skipped.
    pub max_skip_fraction: Option<f64>,
}

impl BilingualLexicon {
    pub fn new(source_lang: LanguageId, target_lang: LanguageId) -> Self {
        BilingualLexicon { source_lang, target_lang, entries: BTreeMap::new(), skipped_count: 0 }
    }

    pub fn source_lang(&self) -> &LanguageId {
        &self.source_lang
    }

    pub fn target_lang(&self) -> &LanguageId {
        &self.target_lang
    }

    pub fn skipped_count(&self) -> usize {
        self.skipped_count
    }

    /// Number of distinct (case-folded) source words.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Candidate translations of `word`, matched case-insensitively.
    pub fn targets(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&word.to_lowercase())
    }

    /// Adds one pair. Returns `false` (and stores nothing) when either side
    /// is empty or contains whitespace.
    pub fn insert(&mut self, source: &str, target: &str) -> bool {
        if !is_single_word(source) || !is_single_word(target) {
            return false;
        }
        let targets = self.entries.entry(source.to_lowercase()).or_default();
        if !targets.iter().any(|t| t == target) {
            targets.push(target.to_string());
        }
        true
    }

    /// Writes the lexicon back out in the loadable tab-separated format.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for (source, targets) in &self.entries {
            for target in targets {
                writeln!(out, "{source}\t{target}")?;
            }
        }
        Ok(())
    }

    /// Draws a translation of `word` uniformly among its targets.
    ///
    /// A leading capital on `word` is carried over to the translation.
    pub fn translate(&self, word: &str, rng: &mut SeededRng) -> Option<String> {
        let targets = self.targets(word)?;
        let pick = match targets.len() {
            1 => &targets[0],
            k => &targets[rng.random_range(0..k)],
        };
        let leading_upper = word.chars().next().is_some_and(char::is_uppercase);
        Some(if leading_upper { capitalize(pick) } else { pick.clone() })
    }
}

fn is_single_word(w: &str) -> bool {
    !w.is_empty() && !w.chars().any(char::is_whitespace)
}

fn capitalize(w: &str) -> String {
    let mut chars = w.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Loads a lexicon with default options (no skip threshold).
pub fn load_lexicon<R: Read>(stream: R, source_lang: LanguageId, target_lang: LanguageId) -> Result<BilingualLexicon> {
    load_lexicon_with(stream, source_lang, target_lang, LexiconOptions::default())
}

pub fn load_lexicon_with<R: Read>(
    mut stream: R,
    source_lang: LanguageId,
    target_lang: LanguageId,
    options: LexiconOptions,
) -> Result<BilingualLexicon> {
    let mut bytes = Vec::new();
    stream.read_to_end(&mut bytes)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Utf8 { offset: e.valid_up_to() })?;

    let mut lexicon = BilingualLexicon::new(source_lang, target_lang);
    let mut considered = 0usize;
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        considered += 1;
        let loaded = match split_pair(line) {
            Some((source, target)) => lexicon.insert(source, target),
            None => false,
        };
        if !loaded {
            lexicon.skipped_count += 1;
        }
    }

    if let Some(limit) = options.max_skip_fraction {
        if considered > 0 {
            let fraction = lexicon.skipped_count as f64 / considered as f64;
            if fraction > limit {
                return Err(Error::data(format!(
                    "{} of {considered} lexicon lines skipped ({:.1}% > {:.1}% limit)",
                    lexicon.skipped_count,
                    fraction * 100.0,
                    limit * 100.0
                )));
            }
        }
    }
    Ok(lexicon)
}

// A tab, when present, is the field separator; otherwise any run of spaces.
// Either way exactly two single-word fields are required.
fn split_pair(line: &str) -> Option<(&str, &str)> {
    if line.contains('\t') {
        let mut fields = line.split('\t');
        let source = fields.next()?.trim();
        let target = fields.next()?.trim();
        if fields.next().is_some() {
            return None;
        }
        return Some((source, target));
    }
    let mut fields = line.split_whitespace();
    let source = fields.next()?;
    let target = fields.next()?;
    if fields.next().is_some() {
        return None;
    }
    Some((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn lang(code: &str) -> LanguageId {
        LanguageId::new(code).unwrap()
    }

    fn load(text: &str) -> BilingualLexicon {
        load_lexicon(text.as_bytes(), lang("en"), lang("hi")).unwrap()
    }

    #[test]
    fn loads_single_word_pairs() {
        let lex = load("cat billi\nbed bistar");
        assert_eq!(lex.len(), 2);
        assert_eq!(lex.targets("cat").unwrap(), ["billi"]);
        assert_eq!(lex.targets("bed").unwrap(), ["bistar"]);
        assert_eq!(lex.skipped_count(), 0);
    }

    #[test]
    fn skips_multiword_lines() {
        let lex = load("kick the bucket lat-marna");
        assert!(lex.is_empty());
        assert_eq!(lex.skipped_count(), 1);
    }

    #[test]
    fn tab_separated_multiword_target_is_skipped() {
        let lex = load("bucket\tbalti\nkick\tlat marna\nalone\n# comment\n\n");
        assert_eq!(lex.len(), 1);
        assert_eq!(lex.skipped_count(), 2);
    }

    #[test]
    fn empty_stream() {
        let lex = load("");
        assert!(lex.is_empty());
        assert_eq!(lex.skipped_count(), 0);
    }

    #[test]
    fn duplicates_accumulate_in_order() {
        let lex = load("Cat billi\ncat bilaav\ncat billi");
        assert_eq!(lex.targets("CAT").unwrap(), ["billi", "bilaav"]);
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let bytes = b"cat billi\n\xffbad x\n";
        match load_lexicon(&bytes[..], lang("en"), lang("hi")) {
            Err(Error::Utf8 { offset }) => assert_eq!(offset, 10),
            other => panic!("expected utf8 error, got {other:?}"),
        }
    }

    #[test]
    fn skip_threshold_aborts() {
        let opts = LexiconOptions { max_skip_fraction: Some(0.5) };
        let text = "a b\nc d e\nf g h";
        let err = load_lexicon_with(text.as_bytes(), lang("en"), lang("hi"), opts).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
        let ok = load_lexicon_with("a b\nc d e".as_bytes(), lang("en"), lang("hi"), opts).unwrap();
        assert_eq!(ok.len(), 1);
    }

    #[test]
    fn translate_hits_misses_and_capitalizes() {
        let lex = load("cat billi\nbed bistar");
        let mut rng = seeded(1);
        assert_eq!(lex.translate("cat", &mut rng).as_deref(), Some("billi"));
        assert_eq!(lex.translate("Cat", &mut rng).as_deref(), Some("Billi"));
        assert_eq!(lex.translate("zebra", &mut rng), None);
    }

    #[test]
    fn translate_samples_targets_uniformly() {
        // 10^4 draws over two targets: binomial sd = 50, so 5000 +- 150 is a 3-sigma band.
        let lex = load("w a\nw b");
        let mut rng = seeded(2024);
        let mut a = 0;
        for _ in 0..10_000 {
            if lex.translate("w", &mut rng).unwrap() == "a" {
                a += 1;
            }
        }
        assert!((4850..=5150).contains(&a), "a chosen {a} times");
    }

    #[test]
    fn translate_is_deterministic_given_rng_state() {
        let lex = load("w a\nw b\nw c");
        let draw = |seed| {
            let mut rng = seeded(seed);
            (0..32).map(|_| lex.translate("w", &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn write_then_load_round_trips() {
        let lex = load("cat billi\ncat bilaav\nbed bistar\nbad line here\n");
        let mut buf = Vec::new();
        lex.write_to(&mut buf).unwrap();
        let back = load_lexicon(&buf[..], lang("en"), lang("hi")).unwrap();
        assert_eq!(back.entries, lex.entries);
    }
}
