//! A scaled-down ranking-consistency run: stand-alone ground truth for a few
//! architectures, one supernet, and the correlation table.
//!
//! Results go to `$SUPERNET_LAB_OUT/consistency-demo` (default `runs/`).

use supernet_lab::harness::{output_root, run_experiment, ExperimentConfig, ExperimentKind};

fn main() -> supernet_lab::Result<()> {
    let mut cfg = ExperimentConfig::toy(ExperimentKind::Consistency, vec![0]);
    cfg.output_dir = "consistency-demo".into();
    cfg.train.total_epochs = 6;
    cfg.train.schedule.warmup_epochs = 2;
    cfg.evaluation.ground_truth_archs = 12;
    cfg.evaluation.standalone_epochs = 4;
    let dir = cfg.resolve_output(&output_root());
    let res = run_experiment(&cfg, &dir, &mut |m| eprintln!("{m}"))?;
    for cell in &res.cells {
        for entry in &cell.reports {
            match (&entry.report, &entry.error) {
                (Some(r), _) => println!("{r}"),
                (None, Some(e)) => println!("{} vs {}: {e}", entry.x, entry.y),
                (None, None) => {}
            }
        }
    }
    println!("written to {}", dir.display());
    Ok(())
}
