use csreplay::codeswitch::CsMode;
use csreplay::rng::{seeded, substream};
use csreplay::scheduler::{build_plan, build_replay_memory, steps, PlanConfig, TrainingPlan};
use csreplay::synthdata::{gen_task, SynthConfig, SynthTask};
use csreplay::toytrainer::{init_model, probe_layer, run_plan, train_probe, train_step, EmbeddingCache, ModelDims, ProbeConfig, TaskData, ToyModel, TrainConfig};
use csreplay::Error;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

const DIMS: ModelDims = ModelDims { d: 64, r: 8, layers: 2, classes: 10 };

fn small_task(seed: u64, train: usize) -> SynthTask {
    gen_task(&SynthConfig { train_size: train, test_size: 300, ..SynthConfig::default() }, seed).unwrap()
}

fn plan(task: &SynthTask, mode: CsMode, epochs: usize, seed: u64) -> TrainingPlan {
    build_plan(&PlanConfig { languages: task.ids(), epochs_per_phase: epochs, cs_mode: mode, seed, ..PlanConfig::default() }).unwrap()
}

fn data(task: &SynthTask) -> TaskData {
    TaskData { train: task.train.clone(), test: task.test.clone() }
}

#[test]
fn replay_steps_leave_protected_parameters_bit_identical() {
    let task = small_task(1, 800);
    let plan = plan(&task, CsMode::Pos(csreplay::corpus::PosCategory::Adj), 2, 1);
    let memory = build_replay_memory(&task.train[plan.anchor()], 1.0, &mut seeded(1)).unwrap();
    let mut model = init_model(DIMS, &plan.languages, 1).unwrap();
    let backbone = model.backbone().checksum();
    let config = TrainConfig::default();
    let mut cache = EmbeddingCache::default();
    let mut replays = 0;
    for step in steps(&plan, &task.train, &memory, &task.lexicons, &mut seeded(1)).unwrap() {
        let step = step.unwrap();
        let protected = model.protected_checksum();
        let replay_adapter = model.replay_adapter.checksum();
        train_step(&mut model, &step, plan.anchor(), &config, &mut cache).unwrap();
        if step.is_replay() {
            replays += 1;
            assert_eq!(protected, model.protected_checksum());
            assert_ne!(replay_adapter, model.replay_adapter.checksum());
        } else {
            assert_ne!(protected, model.protected_checksum());
        }
    }
    assert_eq!(replays, 2 * (2 * 800usize.div_ceil(16) / 10));
    assert_eq!(backbone, model.backbone().checksum());
}

#[test]
fn fresh_model_loss_equals_adapter_free_loss() {
    let task = small_task(2, 64);
    let model = init_model(DIMS, &task.ids(), 2).unwrap();
    let lang = &task.ids()[0];
    let batch = &task.train[lang].sentences[..32];
    let (loss, _) = model.loss_and_grads(lang, batch).unwrap();
    let mut oracle = 0.0;
    for s in batch {
        let logits = model.backbone_logits(&model.encode(s));
        let y = model.label_index(s.label.as_deref().unwrap()).unwrap();
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        oracle += lse - logits[y];
    }
    assert!((loss - oracle / batch.len() as f64).abs() < 1e-12);
}

fn run(task: &SynthTask, mode: CsMode, epochs: usize, seed: u64, config: &TrainConfig) -> (ToyModel, csreplay::toytrainer::RunRecord) {
    let plan = plan(task, mode, epochs, seed);
    let memory = build_replay_memory(&task.train[plan.anchor()], 1.0, &mut substream(seed, "memory", 0)).unwrap();
    let mut model = init_model(DIMS, &plan.languages, seed).unwrap();
    let record = run_plan(&mut model, &plan, &data(task), &memory, &task.lexicons, config, &mut seeded(seed)).unwrap();
    (model, record)
}

#[test]
fn identical_inputs_give_identical_records() {
    let task = small_task(3, 400);
    let config = TrainConfig { probe: Some(ProbeConfig { epochs: 50, ..ProbeConfig::default() }), ..TrainConfig::default() };
    let (m1, r1) = run(&task, CsMode::Random, 2, 3, &config);
    let (m2, r2) = run(&task, CsMode::Random, 2, 3, &config);
    assert_eq!(serde_json::to_vec(&r1).unwrap(), serde_json::to_vec(&r2).unwrap());
    assert_eq!(serde_json::to_vec(&m1).unwrap(), serde_json::to_vec(&m2).unwrap());
    let probes = r1.probes.unwrap();
    assert_eq!(probes.phases, [2, 3]);
    assert_eq!(probes.accuracy.len(), DIMS.layers);
    assert_eq!(r1.backbone_checksum_start, r1.backbone_checksum_end);
}

#[test]
fn single_language_run_is_plain_training() {
    let mut task = small_task(4, 300);
    let first = task.ids()[0].clone();
    task.languages.truncate(1);
    let (m1, r1) = run(&task, CsMode::Pos(csreplay::corpus::PosCategory::Noun), 3, 4, &TrainConfig::default());
    let (m2, r2) = run(&task, CsMode::None, 3, 4, &TrainConfig::default());
    assert_eq!(r1.replay_steps, 0);
    assert_eq!(r1.normal_steps, 3 * 300usize.div_ceil(16));
    assert_eq!(m1.language_adapters[&first], m2.language_adapters[&first]);
    assert_eq!(m1.head, m2.head);
    assert_eq!(r1.history, r2.history);
}

#[test]
fn without_replay_the_second_language_is_forgotten() {
    let mut after_phase_2 = 0.0;
    let mut after_phase_3 = 0.0;
    for seed in 0..3 {
        let task = small_task(seed, 3000);
        let (_, record) = run(&task, CsMode::None, 3, seed, &TrainConfig::default());
        after_phase_2 += record.matrix.get(1, 1).unwrap();
        after_phase_3 += record.matrix.get(2, 1).unwrap();
    }
    assert!(after_phase_3 <= after_phase_2, "l2 accuracy rose from {after_phase_2} to {after_phase_3}");
}

#[test]
fn probe_on_shuffled_labels_is_at_chance() {
    let (n, classes) = (20_000, 4);
    let mut rng = seeded(8);
    let features: Vec<Array1<f64>> = (0..n).map(|_| (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let probe = train_probe(&features, &labels, classes, &ProbeConfig::default(), &mut seeded(9)).unwrap();
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let acc = probe.accuracy(&features, &labels);
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc} vs chance {p} ± {}", 3.0 * sigma);
}

#[test]
fn probing_checks_the_layer_and_leaves_the_model_alone() {
    let task = small_task(5, 64);
    let model = init_model(DIMS, &task.ids(), 5).unwrap();
    let lang = &task.ids()[1];
    let before = serde_json::to_vec(&model).unwrap();
    let config = ProbeConfig { epochs: 20, ..ProbeConfig::default() };
    let acc = probe_layer(&model, 2, &task.test[lang], lang, &config, &mut seeded(0)).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(before, serde_json::to_vec(&model).unwrap());
    assert!(matches!(probe_layer(&model, 0, &task.test[lang], lang, &config, &mut seeded(0)), Err(Error::Usage(_))));
    assert!(probe_layer(&model, 3, &task.test[lang], lang, &config, &mut seeded(0)).is_err());
}
