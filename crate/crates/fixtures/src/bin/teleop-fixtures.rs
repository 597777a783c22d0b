//! Regenerates `fixtures/scripts` and `fixtures/episodes`.
//!
//! Usage: `teleop-fixtures [fixtures-dir]` (default `fixtures`).

use std::path::PathBuf;
use std::sync::Arc;
use std::{env, fs, process};

use teleop_core::arm::ArmConfig;
use teleop_core::script::Script;
use teleop_core::task::{TaskCatalog, TaskId};
use teleop_fixtures::{first_plannable, plan_partial, plan_success, plan_wander, record_episode, snake_case, PlanError};

const SUCCESS_SEEDS: [u64; 2] = [101, 202];
const FAILURE_SEED: u64 = 303;

fn write_script(dir: &PathBuf, name: &str, script: &Script, note: &str) -> Result<(), Box<dyn std::error::Error>> {
    let path = dir.join(format!("{name}.script"));
    fs::write(&path, script.to_text(note))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let scripts = root.join("scripts");
    let episodes = root.join("episodes");
    if episodes.exists() {
        fs::remove_dir_all(&episodes)?;
    }
    fs::create_dir_all(&scripts)?;
    let arm = Arc::new(ArmConfig::builtin());
    let catalog = TaskCatalog::builtin();

    let mut recorded = 0;
    for spec in catalog.iter() {
        let stem = snake_case(&spec.id);
        for (i, seed) in SUCCESS_SEEDS.into_iter().enumerate() {
            let script = first_plannable(seed, 20, |s| plan_success(spec, &arm, s))?;
            if i == 0 {
                write_script(&scripts, &format!("{stem}_success"), &script, "Completes every stage.")?;
            }
            record_episode(spec, &arm, &script, 1, &episodes)?;
            recorded += 1;
        }
        let partial = first_plannable(FAILURE_SEED, 20, |s| plan_partial(spec, &arm, s, None))?;
        write_script(&scripts, &format!("{stem}_timeout"), &partial, "Performs part of the task, then idles until the timeout.")?;
        record_episode(spec, &arm, &partial, 2, &episodes)?;
        recorded += 1;
    }

    for (task, at) in [(TaskId::ANIMAL_DORMS, 6.0), (TaskId::PACK_BOX, 9.0)] {
        let spec = catalog.get(&TaskId::from(task))?;
        let script = first_plannable(FAILURE_SEED, 20, |s| plan_partial(spec, &arm, s, Some(at)))?;
        write_script(&scripts, &format!("{}_disconnect", snake_case(&spec.id)), &script, "Operator leaves mid-attempt.")?;
        record_episode(spec, &arm, &script, 3, &episodes)?;
        recorded += 1;
    }

    let dorms = catalog.get(&TaskId::from(TaskId::ANIMAL_DORMS))?;
    let cadence = plan_wander(dorms, &arm, 7, 30.0)?;
    write_script(&scripts, "wander_30s", &cadence, "Moves without touching anything for 30 s, then leaves.")?;
    let bottle = catalog.get(&TaskId::from(TaskId::SCAN_BOTTLE))?;
    let load = plan_wander(bottle, &arm, 7, 60.0)?;
    write_script(&scripts, "wander_60s", &load, "Moves without touching anything for 60 s, then leaves.")?;

    if recorded != 20 {
        return Err(Box::new(PlanError(format!("recorded {recorded} episodes, expected 20"))));
    }
    println!("recorded {recorded} episodes under {}", episodes.display());
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("teleop-fixtures: {e}");
        process::exit(1);
    }
}
