//! POS-tagged, labeled corpora in CoNLL-U and JSONL form, and batching.
//!
//! Tags are required in the input; nothing here runs a tagger. For CoNLL-U
//! the task label rides in a `# label = X` sentence comment.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::LanguageId;
use crate::rng::SeededRng;

/// The 17 Universal POS tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PosCategory {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
}

impl PosCategory {
    pub const ALL: [PosCategory; 17] = [
        PosCategory::Adj,
        PosCategory::Adp,
        PosCategory::Adv,
        PosCategory::Aux,
        PosCategory::Cconj,
        PosCategory::Det,
        PosCategory::Intj,
        PosCategory::Noun,
        PosCategory::Num,
        PosCategory::Part,
        PosCategory::Pron,
        PosCategory::Propn,
        PosCategory::Punct,
        PosCategory::Sconj,
        PosCategory::Sym,
        PosCategory::Verb,
        PosCategory::X,
    ];

    /// Open-class categories targeted by POS-guided replay.
    pub const OPEN_CLASS: [PosCategory; 6] = [
        PosCategory::Noun,
        PosCategory::Verb,
        PosCategory::Adj,
        PosCategory::Adv,
        PosCategory::Propn,
        PosCategory::Intj,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PosCategory::Adj => "ADJ",
            PosCategory::Adp => "ADP",
            PosCategory::Adv => "ADV",
            PosCategory::Aux => "AUX",
            PosCategory::Cconj => "CCONJ",
            PosCategory::Det => "DET",
            PosCategory::Intj => "INTJ",
            PosCategory::Noun => "NOUN",
            PosCategory::Num => "NUM",
            PosCategory::Part => "PART",
            PosCategory::Pron => "PRON",
            PosCategory::Propn => "PROPN",
            PosCategory::Punct => "PUNCT",
            PosCategory::Sconj => "SCONJ",
            PosCategory::Sym => "SYM",
            PosCategory::Verb => "VERB",
            PosCategory::X => "X",
        }
    }
}

impl fmt::Display for PosCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PosCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::data(format!("unknown UPOS tag {s:?}")))
    }
}

impl TryFrom<String> for PosCategory {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PosCategory> for String {
    fn from(c: PosCategory) -> String {
        c.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub form: String,
    pub upos: PosCategory,
    /// Set once code-switching replaced this token.
    pub switched: bool,
    pub origin_lang: LanguageId,
}

impl Token {
    pub fn new(form: impl Into<String>, upos: PosCategory, lang: LanguageId) -> Self {
        Token { form: form.into(), upos, switched: false, origin_lang: lang }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub label: Option<String>,
    pub lang: LanguageId,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Space-joined surface forms.
    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.form.as_str()).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub sentences: Vec<Sentence>,
    /// Position of this batch within its epoch, from 0.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub lang: LanguageId,
    pub sentences: Vec<Sentence>,
    pub label_set: BTreeSet<String>,
}

impl Corpus {
    pub fn new(lang: LanguageId) -> Self {
        Corpus { lang, sentences: Vec::new(), label_set: BTreeSet::new() }
    }

    pub fn from_sentences(lang: LanguageId, sentences: Vec<Sentence>) -> Self {
        let label_set = sentences.iter().filter_map(|s| s.label.clone()).collect();
        Corpus { lang, sentences, label_set }
    }

    pub fn push(&mut self, sentence: Sentence) {
        if let Some(label) = &sentence.label {
            self.label_set.insert(label.clone());
        }
        self.sentences.push(sentence);
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// CoNLL-U rendering with `_` in the unused columns.
    pub fn write_conllu<W: Write>(&self, mut out: W) -> Result<()> {
        for sentence in &self.sentences {
            if let Some(label) = &sentence.label {
                writeln!(out, "# label = {label}")?;
            }
            writeln!(out, "# text = {}", sentence.text())?;
            for (i, tok) in sentence.tokens.iter().enumerate() {
                writeln!(out, "{}\t{}\t_\t{}\t_\t_\t_\t_\t_\t_", i + 1, tok.form, tok.upos)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// One JSON record per sentence. Switched flags and per-token origin
    /// languages are written only when a token was switched.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for sentence in &self.sentences {
            let record = JsonRecord {
                tokens: sentence
                    .tokens
                    .iter()
                    .map(|t| JsonToken {
                        form: t.form.clone(),
                        upos: t.upos,
                        switched: t.switched,
                        lang: t.switched.then(|| t.origin_lang.clone()),
                    })
                    .collect(),
                label: sentence.label.clone(),
            };
            serde_json::to_writer(&mut out, &record).map_err(|e| Error::data(e.to_string()))?;
            writeln!(out)?;
        }
        Ok(())
    }
}

fn read_text<R: Read>(mut stream: R) -> Result<String> {
    let mut bytes = Vec::new();
    stream.read_to_end(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::Utf8 { offset: e.utf8_error().valid_up_to() })
}

/// Parses 10-column CoNLL-U. Multiword-token ranges (`3-4`) and empty
/// nodes (`5.1`) are skipped.
pub fn parse_conllu<R: Read>(stream: R, lang: LanguageId) -> Result<Corpus> {
    let text = read_text(stream)?;
    let mut corpus = Corpus::new(lang.clone());
    let mut tokens = Vec::new();
    let mut label = None;

    let flush = |tokens: &mut Vec<Token>, label: &mut Option<String>, corpus: &mut Corpus| {
        if !tokens.is_empty() {
            corpus.push(Sentence { tokens: std::mem::take(tokens), label: label.take(), lang: lang.clone() });
        }
        *label = None;
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut label, &mut corpus);
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "label" {
                    label = Some(value.trim().to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::data_at(line_no, format!("expected 10 tab-separated columns, found {}", cols.len())));
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let form = cols[1];
        if form.is_empty() {
            return Err(Error::data_at(line_no, "empty FORM"));
        }
        let upos = cols[3].parse::<PosCategory>().map_err(|_| Error::data_at(line_no, format!("unknown UPOS tag {:?}", cols[3])))?;
        tokens.push(Token::new(form, upos, corpus.lang.clone()));
    }
    flush(&mut tokens, &mut label, &mut corpus);
    Ok(corpus)
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonToken {
    form: String,
    upos: PosCategory,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    switched: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lang: Option<LanguageId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    tokens: Vec<JsonToken>,
    #[serde(default)]
    label: Option<String>,
}

/// Parses one `{"tokens":[{"form":..,"upos":..}],"label":..}` record per line.
pub fn parse_jsonl<R: Read>(stream: R, lang: LanguageId) -> Result<Corpus> {
    let text = read_text(stream)?;
    let mut corpus = Corpus::new(lang.clone());
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonRecord = serde_json::from_str(line).map_err(|e| Error::data_at(i + 1, e.to_string()))?;
        let mut tokens = Vec::with_capacity(record.tokens.len());
        for t in record.tokens {
            if t.form.is_empty() {
                return Err(Error::data_at(i + 1, "empty token form"));
            }
            tokens.push(Token {
                form: t.form,
                upos: t.upos,
                switched: t.switched,
                origin_lang: t.lang.unwrap_or_else(|| lang.clone()),
            });
        }
        corpus.push(Sentence { tokens, label: record.label, lang: lang.clone() });
    }
    Ok(corpus)
}

/// Splits one epoch of `corpus` into batches of `batch_size`; the final
/// batch may be short.
pub fn batches(corpus: &Corpus, batch_size: usize, shuffle: bool, rng: &mut SeededRng) -> Result<Vec<Batch>> {
    let order = epoch_order(corpus.len(), batch_size, shuffle, rng)?;
    Ok(order
        .chunks(batch_size)
        .enumerate()
        .map(|(index, chunk)| Batch { sentences: chunk.iter().map(|&i| corpus.sentences[i].clone()).collect(), index })
        .collect())
}

/// Sentence visiting order for one epoch.
pub(crate) fn epoch_order(len: usize, batch_size: usize, shuffle: bool, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(order)
}
