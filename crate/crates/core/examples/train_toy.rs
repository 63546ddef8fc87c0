//! Overfit the tiny network on the toy dataset and write a checkpoint.
//!
//!     cargo run --release --example train_toy -- 300

use std::sync::Arc;

use artopih::datapipe::{build_pairs, generate_toy_dataset, ToyConfig};
use artopih::encoder::{Encoder, WidthProfile};
use artopih::harmonizer::HarmonizerModel;
use artopih::trainer::{train, RunOutput, TrainConfig};
use candle_core::{DType, Device};

fn main() -> anyhow::Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let ds = generate_toy_dataset(&ToyConfig::default(), "toy")?;
    let pairs = build_pairs(&ds.manifest, Some(7)).collect::<artopih::Result<Vec<_>>>()?;

    let cfg = TrainConfig {
        steps,
        seed: 7,
        checkpoint_every: 50,
        ..TrainConfig::for_profile(WidthProfile::Tiny)
    };
    let enc = Arc::new(Encoder::random(WidthProfile::Tiny, 0, &Device::Cpu, DType::F32)?);
    let model = HarmonizerModel::new(enc, cfg.harmonizer_config(), cfg.seed)?;
    let mut out = RunOutput::new("toy_run");
    out.metadata.insert("encoder_source".into(), "random:tiny:0".into());

    let summary = train(&model, &pairs, &cfg, Some(&out), |r| {
        if r.step == 1 || r.step % 20 == 0 {
            println!("step {:4} total {:8.3} map_c {:7.3} sty {:6.3}", r.step, r.total, r.map_c, r.sty);
        }
    })?;
    for (path, id) in &summary.checkpoints {
        println!("{} {id}", path.display());
    }
    Ok(())
}
