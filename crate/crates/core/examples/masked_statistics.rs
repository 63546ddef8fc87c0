//! Per-stage style vectors of an image region and AdaIN re-normalisation.

use artopih::encoder::{background_style, foreground_style, Encoder, WidthProfile, NUM_STAGES};
use artopih::harmonizer::adain_apply;
use artopih::imagecore::{BBox, Image, Mask};
use candle_core::{DType, Device};

fn main() -> anyhow::Result<()> {
    let enc = Encoder::random(WidthProfile::Tiny, 0, &Device::Cpu, DType::F32)?;
    let img = Image::from_fn(64, 64, |c, y, x| {
        if x < 32 { [0.1, 0.3, 0.7][c] } else { [0.8, 0.6, 0.1][c] * (0.5 + 0.5 * ((y / 4) % 2) as f32) }
    })?;
    let mask = Mask::from_bbox(64, 64, BBox::new(8, 16, 24, 48))?.to_tensor(&Device::Cpu, DType::F32)?;
    let pyr = enc.extract_image(&img)?;

    for l in 0..NUM_STAGES {
        let fg = foreground_style(&pyr, &mask, l)?;
        let bg = background_style(&pyr, &mask, l)?;
        let (fm, fs) = fg.to_vecs()?;
        let (bm, bs) = bg.to_vecs()?;
        println!(
            "stage {}: {} channels, fg mu[0] {:.3} sigma[0] {:.3} | bg mu[0] {:.3} sigma[0] {:.3}",
            l + 1,
            fg.channels(),
            fm[0][0],
            fs[0][0],
            bm[0][0],
            bs[0][0]
        );
    }

    // Give the foreground of stage 1 the background's statistics.
    let feat = pyr.stage(0);
    let bg = background_style(&pyr, &mask, 0)?;
    let adjusted = adain_apply(feat, &mask, &bg)?;
    let after = artopih::encoder::masked_stats(&adjusted, &mask)?;
    let (m, _) = after.to_vecs()?;
    let (want, _) = bg.to_vecs()?;
    println!("after AdaIN: fg mu[0] {:.4} (target {:.4})", m[0][0], want[0][0]);
    Ok(())
}
