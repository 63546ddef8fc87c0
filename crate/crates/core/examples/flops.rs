//! Analytic cost of both width profiles and a short latency measurement.

use std::sync::Arc;

use artopih::analysis::{flops_count, flops_report};
use artopih::encoder::{Encoder, WidthProfile};
use artopih::harmonizer::{HarmonizerConfig, HarmonizerModel, MappingKind};
use candle_core::{DType, Device};

fn main() -> anyhow::Result<()> {
    let paper = flops_count(WidthProfile::Paper, MappingKind::Learned, 256, 256)?;
    print!("{}", paper.to_text());

    let enc = Arc::new(Encoder::random(WidthProfile::Tiny, 0, &Device::Cpu, DType::F32)?);
    let model = HarmonizerModel::new(enc, HarmonizerConfig::default(), 0)?;
    print!("{}", flops_report(&model, 256, 2, 10)?.to_text());
    Ok(())
}
