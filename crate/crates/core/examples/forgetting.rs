//! Trains the toy learner on three pseudo-languages with no replay, random
//! code-switched replay and POS code-switched replay, and prints
//! seed-averaged average accuracy and final accuracy on the second language.
//!
//! ```text
//! cargo run --release -p csreplay --example forgetting -- [seeds] [category]
//! ```

use std::collections::BTreeMap;

use csreplay::analysis::average_accuracy;
use csreplay::codeswitch::CsMode;
use csreplay::corpus::PosCategory;
use csreplay::rng::{seeded, substream};
use csreplay::scheduler::{build_plan, build_replay_memory, PlanConfig};
use csreplay::synthdata::{gen_task, SynthConfig};
use csreplay::toytrainer::{init_model, run_plan, ModelDims, TaskData, TrainConfig};

fn main() -> csreplay::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let category: PosCategory = args.next().as_deref().unwrap_or("ADJ").parse()?;
    let modes = [("none", CsMode::None), ("random", CsMode::Random), ("pos", CsMode::Pos(category))];
    let dims = ModelDims { d: 64, r: 8, layers: 2, classes: 10 };

    let mut totals: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for seed in 0..seeds {
        let task = gen_task(&SynthConfig::default(), seed)?;
        let ids = task.ids();
        let data = TaskData { train: task.train.clone(), test: task.test.clone() };
        let memory = build_replay_memory(&data.train[&ids[0]], 1.0, &mut substream(seed, "memory", 0))?;
        for (name, mode) in modes {
            let plan = build_plan(&PlanConfig { languages: ids.clone(), epochs_per_phase: 3, cs_mode: mode, seed, ..PlanConfig::default() })?;
            let mut model = init_model(dims, &ids, seed)?;
            let record = run_plan(&mut model, &plan, &data, &memory, &task.lexicons, &TrainConfig::default(), &mut seeded(seed))?;
            let aa = average_accuracy(&record.matrix)?.mean;
            let l2 = record.matrix.get(2, 1).unwrap_or(f64::NAN);
            println!("seed {seed} {name:6} AA {aa:.4} l2 {l2:.4}");
            let entry = totals.entry(name).or_default();
            entry.0 += aa / seeds as f64;
            entry.1 += l2 / seeds as f64;
        }
    }
    for (name, (aa, l2)) in totals {
        println!("{name:6} mean AA {aa:.4} mean l2 {l2:.4}");
    }
    Ok(())
}
