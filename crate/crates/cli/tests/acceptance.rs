//! Runs every acceptance criterion in sequence and prints one line each.
//!
//! Sequential on purpose: the load criterion measures wall-clock cadence.

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use teleop_cli::acceptance::{run, Inputs, CRITERIA};

fn main() -> ExitCode {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut inputs = Inputs::from_root(&root);
    inputs.teleop_bin = Some(env!("CARGO_BIN_EXE_teleop").into());
    // `cargo test -- <filter>` narrows the run.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut out = std::io::stdout();
    let mut failed = 0;
    let mut ran = 0;
    for name in CRITERIA {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let v = run(name, &inputs).expect("listed criterion");
        ran += 1;
        failed += usize::from(!v.pass);
        writeln!(out, "acceptance {}", v.summary()).unwrap();
        out.flush().unwrap();
    }
    writeln!(out, "acceptance: {} of {ran} criteria passed", ran - failed).unwrap();
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
