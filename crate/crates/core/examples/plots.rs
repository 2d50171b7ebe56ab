//! Render the scatter plots for a records file.
//!
//! Usage: `cargo run --example plots -- <records.jsonl> [out_dir]`

use std::path::PathBuf;

use supernet_lab::evaluator::read_records;
use supernet_lab::harness::emit_plots;

fn main() -> supernet_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(records) = args.next().map(PathBuf::from) else {
        eprintln!("usage: plots <records.jsonl> [out_dir]");
        std::process::exit(2);
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| records.with_file_name("plots"));
    let summary = emit_plots(&read_records(&records)?, &out)?;
    for p in &summary.written {
        println!("wrote {}", p.display());
    }
    for s in &summary.skipped {
        println!("skipped {s}");
    }
    Ok(())
}
