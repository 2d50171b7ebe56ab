//! Compare uniform and FLOPs-balanced sampling on the toy space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use supernet_lab::arch_space::{sample, SamplerKind, SpaceConfig};
use supernet_lab::proxies::count_flops;
use supernet_lab::supernet::SupernetConfig;

fn main() -> supernet_lab::Result<()> {
    let net = SupernetConfig::new(SpaceConfig::toy());
    let flops = |a: &_| count_flops(a, &net).unwrap();
    for kind in [SamplerKind::Uniform, SamplerKind::Balanced] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = 5000;
        let mut total = 0u64;
        for _ in 0..draws {
            let arch = sample(kind, &net.space, &mut rng, 10, Some(&flops))?;
            total += flops(&arch);
        }
        println!("{kind:?}: mean FLOPs {:.0}", total as f64 / draws as f64);
    }
    Ok(())
}
