//! Paste an object into a box: fit, center, and leave everything else alone.

use artopih::imagecore::{composite_paste, BBox, Image, Mask};

fn main() -> anyhow::Result<()> {
    let painting = Image::from_fn(64, 96, |c, y, x| [0.2 + x as f32 / 200.0, 0.3, 0.5 + y as f32 / 200.0][c])?;
    // A wide red object with an elliptical mask.
    let object = Image::filled(20, 40, [0.9, 0.1, 0.1])?;
    let mask = Mask::from_fn(20, 40, |y, x| {
        let (dy, dx) = ((y as f32 - 9.5) / 10.0, (x as f32 - 19.5) / 20.0);
        if dy * dy + dx * dx <= 1.0 { 1.0 } else { 0.0 }
    })?;

    let target = BBox::new(30, 10, 70, 50);
    let (composite, placed) = composite_paste(&painting, &object, &mask, target)?;
    let b = placed.bbox().expect("object lands in the box");
    println!("target box {target:?}, placed object spans {b:?}");

    composite.save_png("composite.png")?;
    placed.save_png("composite_mask.png")?;
    println!("wrote composite.png and composite_mask.png");
    Ok(())
}
