//! Sizes of the seven trainable parameter spaces.
//!
//! `cargo run --example parameter_spaces -- sg2-1024 64`

use styledomain::arch::ArchitectureDescriptor;
use styledomain::paramspace::{human_count, offset_slots, size_table};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let arch = args.next().unwrap_or_else(|| "sg2-512".into());
    let block: usize = args.next().map(|b| b.parse()).transpose()?.unwrap_or(64);
    let desc = ArchitectureDescriptor::preset(&arch)?;

    println!("{arch}: {} style layers, {} style channels", desc.num_styles(), desc.style_dim_total());
    for (kind, n) in size_table(&desc, block)? {
        println!("  {:<16} {:>12} ({})", kind.to_string(), n, human_count(n));
    }

    // Offsets replace each K×K kernel of one block by a 1×1 delta.
    let offsets: usize = offset_slots(&desc, block)?.iter().map(|s| s.count).sum();
    let kernels: usize = desc
        .weight_slots()
        .iter()
        .filter(|s| s.name.starts_with(&format!("synthesis.b{block}.")) && s.name.ends_with(".weight"))
        .map(|s| s.shape.iter().product::<usize>())
        .sum();
    println!("block {block}: kernels {kernels}, offsets {offsets}");
    Ok(())
}
