use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use csreplay::codeswitch::{CsMode, OovPolicy};
use csreplay::corpus::{Corpus, PosCategory};
use csreplay::lexicon::load_lexicon;
use csreplay::scheduler::{build_plan, LexiconSet, PlanConfig, TrainingPlan};
use csreplay::synthdata::{gen_task, SynthConfig};
use csreplay::toytrainer::{ModelDims, ProbeConfig, ReplayForward, TaskData, TrainConfig};
use csreplay::{Error, LanguageId, Result};
use serde::{Deserialize, Serialize};

use crate::io::read_corpus;

/// Everything a `plan` or `train` run needs. Read from TOML; command-line
/// flags override individual fields.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Output directory. Not echoed, so that runs into different
    /// directories produce identical files.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub r: usize,
    pub layers: usize,
    /// Taken from the training labels when unset.
    pub classes: Option<usize>,
    pub gain: f64,
    pub use_replay_adapter: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d: 64, r: 8, layers: 2, classes: None, gain: csreplay::toytrainer::DEFAULT_BACKBONE_GAIN, use_replay_adapter: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconSource {
    pub source: LanguageId,
    pub target: LanguageId,
    pub path: PathBuf,
}

/// Corpus and lexicon files, or a synthetic task. With no files listed the
/// synthetic task is used.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synth: Option<SynthConfig>,
    pub train: BTreeMap<LanguageId, PathBuf>,
    pub test: BTreeMap<LanguageId, PathBuf>,
    pub lexicons: Vec<LexiconSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    None,
    Random,
    Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OovArg {
    PassThrough,
    Restrict,
}

impl From<OovArg> for OovPolicy {
    fn from(arg: OovArg) -> Self {
        match arg {
            OovArg::PassThrough => OovPolicy::PassThrough,
            OovArg::Restrict => OovPolicy::RestrictToTranslatable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReplayForwardArg {
    Anchor,
    Current,
}

/// Builds a [`CsMode`] from `--mode` and `--pos`.
pub fn cs_mode(mode: ModeArg, pos: Option<&str>) -> Result<CsMode> {
    match (mode, pos) {
        (ModeArg::Pos, pos) => Ok(CsMode::Pos(pos.unwrap_or("ADJ").parse::<PosCategory>().map_err(|e| Error::Usage(e.to_string()))?)),
        (_, Some(_)) => Err(Error::Usage("--pos only applies to --mode pos".into())),
        (ModeArg::None, None) => Ok(CsMode::None),
        (ModeArg::Random, None) => Ok(CsMode::Random),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Language sequence, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    /// Code-switch ratio ρ.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Replay every f-th batch.
    #[arg(long)]
    pub frequency: Option<usize>,
    #[arg(long)]
    pub memory_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Target category for `--mode pos`.
    #[arg(long)]
    pub pos: Option<String>,
    #[arg(long)]
    pub base_lang: Option<String>,
    #[arg(long, value_enum)]
    pub oov: Option<OovArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub gain: Option<f64>,
    /// Bypass the replay adapter everywhere.
    #[arg(long)]
    pub no_replay_adapter: bool,
    #[arg(long, value_enum)]
    pub replay_forward: Option<ReplayForwardArg>,
    /// Probe the second language's layers after each phase.
    #[arg(long)]
    pub probe: bool,
    /// Sentences per language for the synthetic task.
    #[arg(long)]
    pub synth_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn lang(code: &str) -> Result<LanguageId> {
    LanguageId::new(code).map_err(|e| Error::Usage(e.to_string()))
}

impl RunArgs {
    /// Config file (if any) with the flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => load_run_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = Some(seed);
        }
        if let Some(out) = &self.out {
            config.out = Some(out.clone());
        }
        let plan = &mut config.plan;
        if let Some(codes) = &self.languages {
            plan.languages = codes.iter().map(|c| lang(c)).collect::<Result<_>>()?;
        }
        if let Some(v) = self.ratio {
            plan.ratio = v;
        }
        if let Some(v) = self.frequency {
            plan.replay_frequency = v;
        }
        if let Some(v) = self.memory_fraction {
            plan.memory_fraction = v;
        }
        if let Some(mode) = self.mode {
            plan.cs_mode = cs_mode(mode, self.pos.as_deref())?;
        } else if self.pos.is_some() {
            return Err(Error::Usage("--pos needs --mode pos".into()));
        }
        if let Some(code) = &self.base_lang {
            plan.base_lang = Some(lang(code)?);
        }
        if let Some(oov) = self.oov {
            plan.oov_policy = oov.into();
        }
        if let Some(v) = self.epochs {
            plan.epochs_per_phase = v;
        }
        if let Some(v) = self.batch_size {
            plan.batch_size = v;
        }
        let model = &mut config.model;
        if let Some(v) = self.d {
            model.d = v;
        }
        if let Some(v) = self.r {
            model.r = v;
        }
        if let Some(v) = self.layers {
            model.layers = v;
        }
        if let Some(v) = self.gain {
            model.gain = v;
        }
        if self.no_replay_adapter {
            model.use_replay_adapter = false;
        }
        if let Some(v) = self.lr {
            config.train.lr = v;
        }
        if let Some(f) = self.replay_forward {
            config.train.replay_forward = match f {
                ReplayForwardArg::Anchor => ReplayForward::Anchor,
                ReplayForwardArg::Current => ReplayForward::Current,
            };
        }
        if self.probe && config.train.probe.is_none() {
            config.train.probe = Some(ProbeConfig::default());
        }
        if let Some(n) = self.synth_size {
            config.data.synth.get_or_insert_with(SynthConfig::default).train_size = n;
        }
        if config.seed.is_none() {
            return Err(Error::config("a seed is required (--seed or `seed` in the config)"));
        }
        config.plan.seed = config.seed.unwrap_or_default();
        Ok(config)
    }
}

/// Reads a TOML run config. Relative data paths are taken relative to the
/// config file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config: RunConfig = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let data = &mut config.data;
    for p in data.train.values_mut().chain(data.test.values_mut()).chain(data.lexicons.iter_mut().map(|l| &mut l.path)) {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(config)
}

/// Corpora, lexicons and the validated plan of a resolved config.
pub struct Prepared {
    pub plan: TrainingPlan,
    pub data: TaskData,
    pub lexicons: LexiconSet,
    pub labels: Vec<String>,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn uses_synth(&self) -> bool {
        self.data.synth.is_some() || (self.data.train.is_empty() && self.data.lexicons.is_empty())
    }

    /// Loads or generates the data and validates the plan against it. An
    /// empty language list takes the languages of the data.
    pub fn prepare(&mut self) -> Result<Prepared> {
        let (data, lexicons) = if self.uses_synth() {
            let synth = self.data.synth.get_or_insert_with(SynthConfig::default);
            let task = gen_task(synth, self.seed.unwrap_or_default())?;
            (TaskData { train: task.train, test: task.test }, task.lexicons)
        } else {
            let mut data = TaskData::default();
            for (lang, path) in &self.data.train {
                data.train.insert(lang.clone(), read_corpus(path, lang.clone())?);
            }
            for (lang, path) in &self.data.test {
                data.test.insert(lang.clone(), read_corpus(path, lang.clone())?);
            }
            let mut lexicons = LexiconSet::new();
            for l in &self.data.lexicons {
                lexicons.insert(load_lexicon(File::open(&l.path)?, l.source.clone(), l.target.clone())?);
            }
            (data, lexicons)
        };
        if self.plan.languages.is_empty() {
            self.plan.languages = data.train.keys().cloned().collect();
        }
        let plan = build_plan(&self.plan)?;
        plan.validate_inputs(&data.train, &lexicons)?;
        let labels: Vec<String> = data.train.values().flat_map(|c: &Corpus| c.label_set.iter().cloned()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        Ok(Prepared { plan, data, lexicons, labels })
    }

    pub fn dims(&self, labels: &[String]) -> Result<ModelDims> {
        let classes = labels.len();
        if let Some(c) = self.model.classes {
            if c != classes {
                return Err(Error::config(format!("model.classes = {c} but the training data has {classes} labels")));
            }
        }
        Ok(ModelDims { d: self.model.d, r: self.model.r, layers: self.model.layers, classes })
    }
}
