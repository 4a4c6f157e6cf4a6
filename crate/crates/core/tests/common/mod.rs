#![allow(dead_code)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ahrs_core::envs::env_spec;
use ahrs_core::estimation::{BranchStats, StatsHistory};
use ahrs_core::rules::{rules_prompt_block, WeightVector};
use ahrs_core::scheduler::SelectionContext;

/// Mid-run context for point-mass-nav with an auxiliary branch (B = 5).
pub fn golden_context() -> SelectionContext {
    let spec = env_spec("point-mass-nav").unwrap();
    let mut history = StatsHistory::new();
    let rows: [([f64; 5], [f64; 5], u64); 3] = [
        ([37.2514, 1.84, -0.912, -0.6021, 2.5], [12.3, 0.0412, 0.0077, 0.0019, 1.25], 1),
        ([52.008, 2.61, -1.2034, -0.5, 4.125], [20.75, 0.09, 0.0101, 0.0016, 2.0], 100),
        ([61.75, 2.9, -1.5, -0.4812, 6.0], [18.0, 0.1, 0.02, 0.0012, 2.2], 200),
    ];
    for (m, v, e) in rows {
        history.push(BranchStats { means: m.to_vec(), vars: v.to_vec(), epoch: e }).unwrap();
    }
    let mut reward_desc = spec.reward_desc.to_string();
    reward_desc.push_str("\n5.aux: auxiliary shaping term");
    SelectionContext {
        task_desc: spec.task_desc.to_string(),
        env_desc: spec.env_desc.to_string(),
        reward_desc,
        rules_block: rules_prompt_block(),
        stats: BranchStats {
            means: vec![70.123456789, 3.0001, -1.75, -0.45, 7.5],
            vars: vec![15.5, 0.125, 0.03, 0.001, 1.0 / 3.0],
            epoch: 300,
        },
        history,
        prev_rule: Some(5),
        prev_weights: Some(WeightVector {
            weights: vec![1.0, 0.5, 0.5, 0.6875, 0.875],
            rule_id: Some(5),
            epoch: 200,
        }),
    }
}

/// Context of the very first tick: no history, no previous choice.
pub fn first_tick_context() -> SelectionContext {
    let mut ctx = golden_context();
    ctx.stats = BranchStats {
        means: vec![20.5, 0.75, -0.25, -0.8, 1.5],
        vars: vec![4.0, 0.5, 0.01, 0.002, 0.25],
        epoch: 1,
    };
    ctx.history = StatsHistory::new();
    ctx.prev_rule = None;
    ctx.prev_weights = None;
    ctx
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden").join(name)
}

/// Compares `text` byte-for-byte against a frozen golden file.
/// `UPDATE_GOLDEN=1` rewrites the file instead.
pub fn check_golden(name: &str, text: &str) -> Result<(), String> {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(());
    }
    let want = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want != text.as_bytes() {
        return Err(format!("{name} differs from its golden file"));
    }
    Ok(())
}

/// Runs one acceptance criterion and prints a single PASS/FAIL line for it.
pub fn criterion<F: FnOnce() -> Result<(), String>>(id: u32, title: &str, body: F) {
    let start = std::time::Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(body)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(()) => println!("criterion {id:>2} [{title}]: PASS ({secs:.1}s)"),
        Err(why) => {
            println!("criterion {id:>2} [{title}]: FAIL ({secs:.1}s): {why}");
            panic!("criterion {id} failed: {why}");
        }
    }
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
