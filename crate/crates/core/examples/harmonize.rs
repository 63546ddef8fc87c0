//! Harmonize a toy composite with an untrained tiny model in each mode.
//! Point `ARTOPIH_CKPT` at a trained checkpoint (trained on the random
//! tiny encoder with seed 0) to use its weights instead.

use std::sync::Arc;

use artopih::datapipe::{build_pair, generate_toy_dataset, ToyConfig};
use artopih::encoder::{Encoder, WidthProfile};
use artopih::harmonizer::{HarmonizerConfig, HarmonizerModel, StyleMode};
use candle_core::{DType, Device};

fn main() -> anyhow::Result<()> {
    let enc = Arc::new(Encoder::random(WidthProfile::Tiny, 0, &Device::Cpu, DType::F32)?);
    let model = match std::env::var_os("ARTOPIH_CKPT") {
        Some(p) => HarmonizerModel::load(p, enc)?.0,
        None => HarmonizerModel::new(enc, HarmonizerConfig::default(), 0)?,
    };
    let ds = generate_toy_dataset(&ToyConfig::default(), "toy")?;
    // Entry 4 is the first photo-object composite.
    let pair = build_pair(&ds.manifest, 4)?;

    let reference = model.reference_styles(&pair.reference, &pair.reference_mask)?;
    for (name, mode) in [
        ("ours", StyleMode::Ours),
        ("bg", StyleMode::Bg),
        ("ro", StyleMode::External(reference)),
    ] {
        let out = model.harmonize(&pair.composite, &pair.composite_mask, &mode)?;
        let changed = out.mean_abs_diff(&pair.composite)?;
        out.save_png(format!("harmonized_{name}.png"))?;
        println!("{name}: mean abs change {changed:.4}");
    }
    Ok(())
}
