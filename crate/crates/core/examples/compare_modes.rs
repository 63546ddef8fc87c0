//! Side-by-side composite | bg | ro | ours figure.

use std::path::Path;
use std::sync::Arc;

use artopih::analysis::compare_modes;
use artopih::datapipe::{build_pair, generate_toy_dataset, ToyConfig};
use artopih::encoder::{Encoder, WidthProfile};
use artopih::harmonizer::{HarmonizerConfig, HarmonizerModel};
use candle_core::{DType, Device};

fn main() -> anyhow::Result<()> {
    let enc = Arc::new(Encoder::random(WidthProfile::Tiny, 0, &Device::Cpu, DType::F32)?);
    let model = HarmonizerModel::new(enc, HarmonizerConfig::default(), 0)?;
    let ds = generate_toy_dataset(&ToyConfig::default(), "toy")?;
    let p = build_pair(&ds.manifest, 4)?;
    let cmp = compare_modes(
        &model,
        &p.composite,
        &p.composite_mask,
        Some((&p.reference, &p.reference_mask)),
        Some(Path::new("compare.png")),
    )?;
    let labels: Vec<&str> = cmp.panels.iter().map(|(l, _)| l.as_str()).collect();
    println!("compare.png: {}", labels.join(" | "));
    Ok(())
}
