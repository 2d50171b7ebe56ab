//! Score every toy architecture with FLOPs, Params and Zen-Score and show
//! how the three priors agree.

use supernet_lab::arch_space::{enumerate_space, SpaceConfig};
use supernet_lab::evaluator::{correlation, CorrelationKind};
use supernet_lab::proxies::{score_proxy, ProxyKind, ZenConfig};
use supernet_lab::supernet::SupernetConfig;

fn main() -> supernet_lab::Result<()> {
    let cfg = SupernetConfig::new(SpaceConfig::toy());
    let zen = ZenConfig {
        repeats: 4,
        ..ZenConfig::default()
    };
    let archs = enumerate_space(&cfg.space, 1000)?;
    let mut cols = vec![Vec::new(); 3];
    let kinds = [ProxyKind::Flops, ProxyKind::Params, ProxyKind::ZenScore];
    for arch in &archs {
        for (col, &kind) in cols.iter_mut().zip(&kinds) {
            col.push(score_proxy(kind, arch, &cfg, 0, &zen)?.value);
        }
    }
    for i in [0, archs.len() / 2, archs.len() - 1] {
        println!("{:<28} flops {:>8} params {:>6} zen {:.3}", archs[i].encode(), cols[0][i], cols[1][i], cols[2][i]);
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        println!(
            "{} vs {}: Spearman {:.3}",
            kinds[i],
            kinds[j],
            correlation(&cols[i], &cols[j], CorrelationKind::Spearman)?
        );
    }
    Ok(())
}
