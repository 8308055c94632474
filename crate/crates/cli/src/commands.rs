use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::Args;
use csreplay::analysis::{
    attention_entropy, attention_mass, average_accuracy, correlate_pos_aa, layer_delta_table, pos_frequency, retention_curve, AttentionRecord, MetricMatrix,
    PosDistribution, ProbeTable,
};
use csreplay::codeswitch::{code_switch_batch, CsConfig};
use csreplay::corpus::{Batch, Corpus, PosCategory};
use csreplay::lexicon::load_lexicon;
use csreplay::rng::{seeded, substream};
use csreplay::scheduler::{build_replay_memory, steps, AUDIT_HEADER};
use csreplay::synthdata::{gen_task, SynthConfig};
use csreplay::toytrainer::{evaluate, init_model_with_gain, probe_layer, run_plan, ProbeConfig, RunRecord, ToyModel};
use csreplay::{Error, LanguageId, Result};
use serde::Serialize;

use crate::config::{cs_mode, DataSection, LexiconSource, ModeArg, OovArg, RunArgs, RunConfig};
use crate::io::{csv_err, flush, read_corpus, OutDir};

fn lang(code: &str) -> Result<LanguageId> {
    LanguageId::new(code).map_err(|e| Error::Usage(e.to_string()))
}

#[derive(Debug, Args)]
pub struct CodeswitchArgs {
    /// Corpus to switch (CoNLL-U, or JSONL by extension).
    #[arg(long)]
    pub input: PathBuf,
    /// Source-to-target lexicon, one `source<TAB>target` pair per line.
    #[arg(long)]
    pub lexicon: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value_t = csreplay::codeswitch::DEFAULT_RATIO)]
    pub ratio: f64,
    #[arg(long, value_enum, default_value = "pos")]
    pub mode: ModeArg,
    /// Target category for `--mode pos` (default ADJ).
    #[arg(long)]
    pub pos: Option<String>,
    #[arg(long, value_enum, default_value = "pass-through")]
    pub oov: OovArg,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct CodeswitchReport<'a> {
    seed: u64,
    config: &'a CsConfig,
    sentences: usize,
    total: csreplay::codeswitch::CsStats,
    per_sentence: &'a [csreplay::codeswitch::CsStats],
}

pub fn codeswitch(args: &CodeswitchArgs) -> Result<()> {
    let source = lang(&args.source)?;
    let config = CsConfig::new(cs_mode(args.mode, args.pos.as_deref())?, args.ratio, source.clone())?.with_oov_policy(args.oov.into());
    let corpus = read_corpus(&args.input, source.clone())?;
    let lexicon = load_lexicon(File::open(&args.lexicon)?, source, lang(&args.target)?)?;
    let batch = Batch { sentences: corpus.sentences, index: 0 };
    let (switched, report) = code_switch_batch(&batch, &config, &lexicon, &mut seeded(args.seed))?;

    let out = OutDir::create(Some(&args.out))?;
    let result = Corpus::from_sentences(corpus.lang, switched.sentences);
    let mut w = out.writer("switched.jsonl")?;
    result.write_jsonl(&mut w)?;
    flush(w)?;
    out.json("stats.json", &CodeswitchReport { seed: args.seed, config: &config, sentences: result.len(), total: report.total, per_sentence: &report.per_sentence })?;
    println!("switched {} of {} selected tokens ({} without a translation)", report.total.switched, report.total.selected, report.total.oov);
    Ok(())
}

fn echo_config(out: &OutDir, config: &RunConfig) -> Result<()> {
    let text = toml::to_string(config).map_err(|e| Error::config(e.to_string()))?;
    out.write("config.toml", text.as_bytes())
}

pub fn plan(args: &RunArgs) -> Result<()> {
    let mut config = args.resolve()?;
    let prepared = config.prepare()?;
    let plan = &prepared.plan;
    let seed = config.seed();
    let memory = build_replay_memory(&prepared.data.train[&plan.base_lang], plan.memory_fraction, &mut substream(seed, "memory", 0))?;
    let mut rows = Vec::new();
    let mut replays = 0;
    for step in steps(plan, &prepared.data.train, &memory, &prepared.lexicons, &mut substream(seed, "run", 0))? {
        let step = step?;
        replays += usize::from(step.is_replay());
        rows.push(step.audit_fields().to_vec());
    }
    let out = OutDir::create(config.out.as_deref())?;
    echo_config(&out, &config)?;
    out.json("plan.json", plan)?;
    out.csv("schedule.csv", &AUDIT_HEADER, rows.iter().cloned())?;
    println!("{} steps, {} replay", rows.len(), replays);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    languages: Vec<LanguageId>,
    average_accuracy: f64,
    accuracy_sum: f64,
    final_row: Vec<f64>,
    /// Largest drop below the end-of-phase accuracy, per earlier language.
    max_drop: BTreeMap<LanguageId, f64>,
    normal_steps: usize,
    replay_steps: usize,
    replay_lang_counts: BTreeMap<LanguageId, usize>,
    cs_totals: csreplay::codeswitch::CsStats,
    backbone_unchanged: bool,
}

/// Accuracy points of language `k` (0-based) from the end of its own phase on.
fn retention_points(record: &RunRecord, k: usize, epochs: usize) -> Vec<(usize, f64)> {
    let entry_epoch = (k + 1) * epochs;
    record.history_of(&record.languages[k]).into_iter().filter(|&(e, _)| e >= entry_epoch).collect()
}

pub fn train(args: &RunArgs) -> Result<()> {
    let mut config = args.resolve()?;
    let prepared = config.prepare()?;
    let plan = &prepared.plan;
    let seed = config.seed();
    let dims = config.dims(&prepared.labels)?;
    let mut model = init_model_with_gain(dims, &plan.languages, seed, config.model.gain)?;
    model.set_labels(prepared.labels.clone())?;
    model.use_replay_adapter = config.model.use_replay_adapter;
    let memory = build_replay_memory(&prepared.data.train[&plan.base_lang], plan.memory_fraction, &mut substream(seed, "memory", 0))?;
    let record = run_plan(&mut model, plan, &prepared.data, &memory, &prepared.lexicons, &config.train, &mut substream(seed, "run", 0))?;

    let out = OutDir::create(config.out.as_deref())?;
    echo_config(&out, &config)?;
    out.json("record.json", &record)?;
    out.json("model.json", &model)?;

    let mut matrix = Vec::new();
    record.matrix.write_csv(&mut matrix)?;
    out.write("matrix.csv", &matrix)?;

    let n = plan.languages.len();
    let mut header = vec!["global_epoch".to_string(), "phase".into(), "epoch".into()];
    header.extend(plan.languages.iter().map(|l| l.to_string()));
    let mut by_epoch: BTreeMap<usize, (usize, usize, Vec<String>)> = BTreeMap::new();
    for r in &record.history {
        let row = by_epoch.entry(r.global_epoch).or_insert((r.phase, r.epoch, vec![String::new(); n]));
        let k = plan.languages.iter().position(|l| l == &r.lang).expect("history language is in the plan");
        row.2[k] = r.accuracy.to_string();
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "history.csv",
        &header_refs,
        by_epoch.into_iter().map(|(g, (phase, epoch, cells))| [g.to_string(), phase.to_string(), epoch.to_string()].into_iter().chain(cells).collect()),
    )?;

    let mut max_drop = BTreeMap::new();
    for k in 0..n.saturating_sub(1) {
        let points = retention_points(&record, k, plan.epochs_per_phase);
        let curve = retention_curve(&points)?;
        max_drop.insert(plan.languages[k].clone(), curve.max_drop);
        out.csv(&format!("retention_{}.csv", plan.languages[k]), &["global_epoch", "accuracy"], points.iter().map(|(e, a)| vec![e.to_string(), a.to_string()]))?;
    }

    if let Some(table) = &record.probes {
        write_probe_table(&out, table)?;
    }

    let aa = average_accuracy(&record.matrix)?;
    let summary = TrainSummary {
        seed,
        languages: plan.languages.clone(),
        average_accuracy: aa.mean,
        accuracy_sum: aa.sum,
        final_row: (0..n).filter_map(|k| record.matrix.get(n - 1, k)).collect(),
        max_drop,
        normal_steps: record.normal_steps,
        replay_steps: record.replay_steps,
        replay_lang_counts: record.replay_lang_counts.clone(),
        cs_totals: record.cs_totals,
        backbone_unchanged: record.backbone_checksum_start == record.backbone_checksum_end,
    };
    out.json("summary.json", &summary)?;
    println!("AA={:?}", aa.mean);
    Ok(())
}

fn write_probe_table(out: &OutDir, table: &ProbeTable) -> Result<()> {
    let mut header = vec!["layer".to_string()];
    header.extend(table.phases.iter().map(|p| format!("phase_{p}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("probes.csv", &refs, table.accuracy.iter().enumerate().map(|(l, row)| std::iter::once((l + 1).to_string()).chain(row.iter().map(f64::to_string)).collect()))?;
    if table.phases.len() >= 2 {
        let deltas = layer_delta_table(table)?;
        out.csv(
            "probe_deltas.csv",
            &["layer", "raw", "anchored"],
            deltas.raw.iter().zip(&deltas.anchored).enumerate().map(|(l, (r, a))| vec![(l + 1).to_string(), r.to_string(), a.to_string()]),
        )?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    /// TOML file holding a synthetic task description.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub languages: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut config: SynthConfig = match &args.config {
        Some(path) => toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.languages {
        config.languages = v;
    }
    if let Some(v) = args.vocab {
        config.vocab_size = v;
    }
    if let Some(v) = args.train_size {
        config.train_size = v;
    }
    if let Some(v) = args.test_size {
        config.test_size = v;
    }
    let task = gen_task(&config, args.seed)?;
    let out = OutDir::create(Some(&args.out))?;

    let mut data = DataSection::default();
    for (split, corpora, paths) in [("train", &task.train, &mut data.train), ("test", &task.test, &mut data.test)] {
        for (id, corpus) in corpora {
            let name = format!("{id}.{split}.conllu");
            let mut w = out.writer(&name)?;
            corpus.write_conllu(&mut w)?;
            flush(w)?;
            paths.insert(id.clone(), PathBuf::from(name));
        }
    }
    for lex in task.lexicons.iter() {
        let name = format!("lexicons/{}-{}.tsv", lex.source_lang(), lex.target_lang());
        let mut buf = Vec::new();
        lex.write_to(&mut buf)?;
        out.write(&name, &buf)?;
        data.lexicons.push(LexiconSource { source: lex.source_lang().clone(), target: lex.target_lang().clone(), path: PathBuf::from(name) });
    }
    out.json("grammar.json", &task.grammar)?;
    let synth_text = toml::to_string(&config).map_err(|e| Error::config(e.to_string()))?;
    out.write("synth.toml", synth_text.as_bytes())?;

    let mut run = RunConfig { seed: Some(args.seed), data, ..RunConfig::default() };
    run.plan.seed = args.seed;
    let text = toml::to_string(&run).map_err(|e| Error::config(e.to_string()))?;
    out.write("run.toml", text.as_bytes())?;
    println!("{} languages, {} train sentences each", task.languages.len(), config.train_size);
    Ok(())
}

fn load_model(path: &Path) -> Result<ToyModel> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `model.json` written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let l = lang(&args.lang)?;
    let corpus = read_corpus(&args.input, l.clone())?;
    let accuracy = evaluate(&model, &l, &corpus)?;
    if let Some(dir) = &args.out {
        OutDir::create(Some(dir))?.json("eval.json", &BTreeMap::from([("lang", serde_json::json!(l)), ("sentences", corpus.len().into()), ("accuracy", accuracy.into())]))?;
    }
    println!("accuracy={accuracy:?}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub input: PathBuf,
    /// 1-based layer; every layer when omitted.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn probe(args: &ProbeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let l = lang(&args.lang)?;
    let corpus = read_corpus(&args.input, l.clone())?;
    let mut config = ProbeConfig::default();
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    let layers: Vec<usize> = match args.layer {
        Some(layer) => vec![layer],
        None => (1..=model.dims.layers).collect(),
    };
    let mut rows = Vec::new();
    for layer in layers {
        let acc = probe_layer(&model, layer, &corpus, &l, &config, &mut substream(args.seed, "probe", layer as u64))?;
        println!("layer {layer}: {acc:?}");
        rows.push(vec![layer.to_string(), acc.to_string()]);
    }
    if let Some(dir) = &args.out {
        OutDir::create(Some(dir))?.csv("probe.csv", &["layer", "accuracy"], rows)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Metric matrix CSV (header of language codes, one row per phase).
    #[arg(long)]
    pub matrix: PathBuf,
    /// `history.csv` from `train`, for retention curves.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// `probes.csv` from `train`, for layer deltas.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct MetricsReport {
    average_accuracy: f64,
    accuracy_sum: f64,
    scale: csreplay::analysis::MetricScale,
    max_drop: BTreeMap<String, f64>,
    layer_deltas_raw: Vec<f64>,
    layer_deltas_anchored: Vec<f64>,
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()).map_err(csv_err)).collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

fn number(cell: &str) -> Result<f64> {
    cell.trim().parse().map_err(|_| Error::data(format!("not a number: {cell:?}")))
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let matrix = MetricMatrix::read_csv(File::open(&args.matrix)?)?;
    let aa = average_accuracy(&matrix)?;
    let mut report = MetricsReport { average_accuracy: aa.mean, accuracy_sum: aa.sum, scale: matrix.scale, max_drop: BTreeMap::new(), layer_deltas_raw: Vec::new(), layer_deltas_anchored: Vec::new() };

    if let Some(path) = &args.history {
        let (header, rows) = read_csv(path)?;
        if header.len() < 4 || header[..3] != ["global_epoch", "phase", "epoch"] {
            return Err(Error::data("history CSV must start with global_epoch,phase,epoch"));
        }
        let langs = &header[3..];
        for (k, code) in langs.iter().enumerate().take(langs.len().saturating_sub(1)) {
            let mut points = Vec::new();
            let last_phase_k = rows.iter().filter(|r| r[1] == (k + 1).to_string()).map(|r| r[0].clone()).next_back();
            for row in &rows {
                let phase = number(&row[1])? as usize;
                let is_entry = Some(&row[0]) == last_phase_k.as_ref();
                if (phase > k + 1 || is_entry) && !row[3 + k].is_empty() {
                    points.push((number(&row[0])? as usize, number(&row[3 + k])?));
                }
            }
            report.max_drop.insert(code.clone(), retention_curve(&points)?.max_drop);
        }
    }
    if let Some(path) = &args.probes {
        let (header, rows) = read_csv(path)?;
        let phases = header[1..].iter().map(|h| h.trim_start_matches("phase_").parse::<usize>().map_err(|_| Error::data(format!("bad probe column {h:?}")))).collect::<Result<Vec<_>>>()?;
        let accuracy = rows.iter().map(|r| r[1..].iter().map(|c| number(c)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
        let deltas = layer_delta_table(&ProbeTable { lang: lang("probe")?, phases, accuracy })?;
        report.layer_deltas_raw = deltas.raw;
        report.layer_deltas_anchored = deltas.anchored;
    }
    if let Some(dir) = &args.out {
        OutDir::create(Some(dir))?.json("metrics.json", &report)?;
    }
    println!("AA={:?}", report.average_accuracy);
    for (l, d) in &report.max_drop {
        println!("max_drop[{l}]={d:?}");
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    /// One attention record per line as JSON.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn attn(args: &AttnArgs) -> Result<()> {
    let reader = BufReader::new(File::open(&args.input)?);
    let mut rows = Vec::new();
    let (mut entropy_sum, mut mass_sum) = (0.0, 0.0);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AttentionRecord = serde_json::from_str(&line).map_err(|e| Error::data_at(i + 1, e.to_string()))?;
        let e = attention_entropy(&record).map_err(|e| Error::data_at(i + 1, e.to_string()))?;
        let m = attention_mass(&record).map_err(|e| Error::data_at(i + 1, e.to_string()))?;
        entropy_sum += e;
        mass_sum += m;
        rows.push(vec![rows.len().to_string(), e.to_string(), m.to_string()]);
    }
    if rows.is_empty() {
        return Err(Error::data("no attention records"));
    }
    let n = rows.len() as f64;
    println!("records={} entropy={:?} mass={:?}", rows.len(), entropy_sum / n, mass_sum / n);
    if let Some(dir) = &args.out {
        let out = OutDir::create(Some(dir))?;
        out.csv("attention.csv", &["record", "entropy", "mass"], rows)?;
        out.json("attention.json", &BTreeMap::from([("records", n), ("entropy", entropy_sum / n), ("mass", mass_sum / n)]))?;
    }
    Ok(())
}

fn split_pair(arg: &str) -> Result<(&str, &str)> {
    arg.split_once('=').ok_or_else(|| Error::Usage(format!("expected NAME=PATH, got {arg:?}")))
}

#[derive(Debug, Args)]
pub struct PosfreqArgs {
    /// `LANG=PATH`, repeatable.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn posfreq(args: &PosfreqArgs) -> Result<()> {
    let mut corpora = Vec::new();
    for arg in &args.inputs {
        let (code, path) = split_pair(arg)?;
        corpora.push(read_corpus(Path::new(path), lang(code)?)?);
    }
    let table = pos_frequency(&corpora.iter().collect::<Vec<_>>())?;
    let mut header = vec!["category".to_string()];
    header.extend(table.per_language.iter().map(|(l, _)| l.to_string()));
    header.push("aggregate".into());
    let rows: Vec<Vec<String>> = PosCategory::ALL
        .iter()
        .map(|c| std::iter::once(c.to_string()).chain(table.per_language.iter().map(|(_, d)| d[c].to_string())).chain(std::iter::once(table.aggregate[c].to_string())).collect())
        .collect();
    for row in &rows {
        println!("{}", row.join(","));
    }
    if let Some(dir) = &args.out {
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        OutDir::create(Some(dir))?.csv("pos_frequency.csv", &refs, rows)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// `SEQUENCE=PATH` to a `posfreq` table, repeatable.
    #[arg(long = "freq", required = true)]
    pub freqs: Vec<String>,
    /// CSV with columns sequence,category,aa.
    #[arg(long)]
    pub aa: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn correlate(args: &CorrelateArgs) -> Result<()> {
    let mut freq: BTreeMap<String, PosDistribution> = BTreeMap::new();
    for arg in &args.freqs {
        let (seq, path) = split_pair(arg)?;
        let (header, rows) = read_csv(Path::new(path))?;
        let col = header.iter().position(|h| h == "aggregate").ok_or_else(|| Error::data(format!("{path}: no aggregate column")))?;
        let mut dist = PosDistribution::new();
        for row in rows {
            dist.insert(row[0].parse()?, number(&row[col])?);
        }
        freq.insert(seq.to_string(), dist);
    }
    let (header, rows) = read_csv(&args.aa)?;
    if header != ["sequence", "category", "aa"] {
        return Err(Error::data("AA table must have columns sequence,category,aa"));
    }
    let mut aa: BTreeMap<String, PosDistribution> = BTreeMap::new();
    for row in rows {
        aa.entry(row[0].clone()).or_default().insert(row[1].parse()?, number(&row[2])?);
    }
    let result = correlate_pos_aa(&freq, &aa)?;
    let rows: Vec<Vec<String>> = result
        .iter()
        .map(|(c, r)| match r {
            Ok(r) => vec![c.to_string(), r.to_string(), String::new()],
            Err(e) => vec![c.to_string(), String::new(), e.to_string()],
        })
        .collect();
    for row in &rows {
        println!("{}", row.join(","));
    }
    if let Some(dir) = &args.out {
        OutDir::create(Some(dir))?.csv("correlation.csv", &["category", "r", "error"], rows)?;
    }
    Ok(())
}
