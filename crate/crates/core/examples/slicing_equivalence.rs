//! A subnet evaluated in place inside the supernet matches the same subnet
//! extracted into its own network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use supernet_lab::arch_space::{uniform_arch, SpaceConfig};
use supernet_lab::harness::{ingest_dataset, DatasetSpec};
use supernet_lab::supernet::{build_supernet, extract_subnet, SupernetConfig};

fn main() -> supernet_lab::Result<()> {
    let cfg = SupernetConfig::new(SpaceConfig::toy());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let state = build_supernet(&cfg, &mut rng)?.eval_mode();
    let data = ingest_dataset(&DatasetSpec::toy(0))?;
    let batch = data.val.gather(&(0..32).collect::<Vec<_>>());
    for _ in 0..5 {
        let arch = uniform_arch(&cfg.space, &mut rng);
        let sub = extract_subnet(&state, &arch)?;
        let a = state.forward_subnet(&arch, &batch.x)?;
        let b = sub.forward(&batch.x)?;
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        println!("{:<28} {:>6} params  max |diff| {diff:.1e}", arch.encode(), sub.num_params());
    }
    Ok(())
}
