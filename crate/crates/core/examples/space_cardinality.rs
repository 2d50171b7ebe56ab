//! Count the paper-scale space exactly and enumerate the toy space.

use supernet_lab::arch_space::{enumerate_space, space_size, SpaceConfig};

fn main() -> supernet_lab::Result<()> {
    let paper = SpaceConfig::paper_scale();
    let size = space_size(&paper);
    println!("paper-scale space: {size} architectures ({:.3e})", size.to_string().parse::<f64>().unwrap());
    println!("enumerating it is refused: {}", enumerate_space(&paper, 1_000_000).unwrap_err());

    let toy = SpaceConfig::toy();
    let archs = enumerate_space(&toy, 1000)?;
    println!("toy space: {} architectures", archs.len());
    for a in archs.iter().take(5) {
        println!("  {}  widths {:?}", a.encode(), a.block_widths(&toy)?);
    }
    Ok(())
}
