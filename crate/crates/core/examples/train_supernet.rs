//! Train a toy supernet with balanced sandwich sampling and the FLOPs-guided
//! rank loss, then check a few subnets after batch-norm recalibration.

use supernet_lab::arch_space::{max_arch, min_arch, SpaceConfig};
use supernet_lab::evaluator::{evaluate_subnet, recalibrate_bn};
use supernet_lab::harness::{ingest_dataset, toy_train_config, DatasetSpec};
use supernet_lab::supernet::SupernetConfig;
use supernet_lab::trainer::{train_supernet, TrainConfig};

fn main() -> supernet_lab::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let net = SupernetConfig::new(SpaceConfig::toy());
    let data = ingest_dataset(&DatasetSpec::toy(0))?;
    let mut cfg = TrainConfig {
        total_epochs: epochs,
        ..toy_train_config()
    };
    cfg.schedule.warmup_epochs = cfg.schedule.warmup_epochs.min(epochs);
    let out = train_supernet(&cfg, &net, &data.train, None, None)?;
    for e in &out.epochs {
        println!("epoch {:>2}  lambda {:.2}  lr {:.4}  loss {:.4}", e.epoch, e.lambda, e.lr, e.label_loss);
    }
    for arch in [max_arch(&net.space), min_arch(&net.space)] {
        let snap = recalibrate_bn(&out.state, &arch, &data.train, 20, 64, 0)?;
        let (loss, acc) = evaluate_subnet(&snap, &arch, &data.val, 200)?;
        println!("{:<28} val loss {loss:.3}  acc {acc:.3}", arch.encode());
    }
    Ok(())
}
