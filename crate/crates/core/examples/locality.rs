//! Patch-style similarity on a two-tone image: patches in the same half
//! should look alike, patches across halves less so.

use artopih::analysis::{locality_map, Similarity};
use artopih::encoder::{Encoder, WidthProfile};
use artopih::imagecore::Image;
use candle_core::{DType, Device};

fn main() -> anyhow::Result<()> {
    let enc = match std::env::var_os("ARTOPIH_VGG19") {
        Some(p) => Encoder::from_torchvision_vgg19(p, &Device::Cpu, DType::F32)?,
        None => Encoder::random(WidthProfile::Tiny, 0, &Device::Cpu, DType::F32)?,
    };
    let img = Image::from_fn(128, 128, |c, y, x| {
        if x < 64 {
            [0.15, 0.2, 0.55][c] + 0.05 * ((y / 6) % 2) as f32
        } else {
            [0.95, 0.75, 0.1][c] * (0.3 + 0.7 * (((x + y) / 2) % 2) as f32)
        }
    })?;
    let n = 4;
    for metric in [Similarity::Cosine, Similarity::CenteredCosine] {
        let m = locality_map(&enc, &img, n, metric)?;
        let gap = m.contrast(|i| usize::from(i % n >= n / 2));
        println!("{metric:?}: within-minus-cross {gap:.3}");
    }
    let m = locality_map(&enc, &img, n, Similarity::Cosine)?;
    m.figure(&img, &[0, 3])?.save_png("locality.png")?;
    println!("wrote locality.png");
    Ok(())
}
