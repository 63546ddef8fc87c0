//! Generate the procedural toy dataset and print what it contains.
//!
//!     cargo run --example toy_dataset -- /tmp/toy

use artopih::datapipe::{build_pairs, dataset_stats, directory_hash, generate_toy_dataset, ToyConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "toy".into());
    let ds = generate_toy_dataset(&ToyConfig::default(), &out)?;
    println!("{}", serde_json::to_string_pretty(&dataset_stats(&ds.manifest))?);
    println!("hash {}", directory_hash(&ds.root)?);

    for pair in build_pairs(&ds.manifest, Some(7)).take(3) {
        let p = pair?;
        println!(
            "pair {}: category {}, composite {}x{}, foreground {:.0} px",
            p.index,
            p.category,
            p.composite.height(),
            p.composite.width(),
            p.composite_mask.sum()
        );
    }
    Ok(())
}
