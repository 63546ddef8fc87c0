//! Training pairs from manifests, a procedural desk-scale dataset and
//! dataset statistics.
//!
//! Toy dataset layout (all paths relative to the output directory):
//!
//! ```text
//! manifest.jsonl
//! paintings/p{i}.png     procedural two-region paintings with one painterly object
//! refmasks/p{i}.png      mask of that painterly (reference) object
//! objects/o{j}.png       photographic objects (flat-shaded shapes)
//! objmasks/o{j}.png
//! selfpaste/s{i}.png     crop of painting i at its reference box
//! selfpaste/m{i}.png     matching crop of the reference mask
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imagecore::{composite_paste, write_manifest, BBox, Image, Manifest, ManifestEntry, Mask, Split};

#[derive(Debug, Clone)]
pub struct TrainingPair {
    /// Manifest entry this pair came from.
    pub index: usize,
    pub composite: Image,
    pub composite_mask: Mask,
    pub reference: Image,
    pub reference_mask: Mask,
    pub category: u32,
}

/// Lazily materialises one pair per manifest entry in a seed-determined order.
pub struct PairStream<'a> {
    manifest: &'a Manifest,
    order: Vec<usize>,
    pos: usize,
}

impl Iterator for PairStream<'_> {
    type Item = Result<TrainingPair>;

    fn next(&mut self) -> Option<Self::Item> {
        let index = *self.order.get(self.pos)?;
        self.pos += 1;
        Some(build_pair(self.manifest, index))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.order.len() - self.pos;
        (n, Some(n))
    }
}

/// Pairs in a permutation fixed by `seed`; `None` keeps manifest order.
pub fn build_pairs(manifest: &Manifest, seed: Option<u64>) -> PairStream<'_> {
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    PairStream {
        manifest,
        order,
        pos: 0,
    }
}

pub fn build_pair(manifest: &Manifest, index: usize) -> Result<TrainingPair> {
    let wrap = |e: Error| Error::Manifest {
        index,
        detail: e.to_string(),
    };
    let entry = manifest.entries.get(index).ok_or_else(|| Error::Manifest {
        index,
        detail: "no such entry".into(),
    })?;
    let painting = Image::load_png(manifest.resolve(&entry.painting_path)).map_err(wrap)?;
    let reference_mask = Mask::load_png(manifest.resolve(&entry.reference_mask_path)).map_err(wrap)?;
    let obj = Image::load_png(manifest.resolve(&entry.object_image_path)).map_err(wrap)?;
    let obj_mask = Mask::load_png(manifest.resolve(&entry.object_mask_path)).map_err(wrap)?;
    if (reference_mask.height(), reference_mask.width()) != (painting.height(), painting.width()) {
        return Err(wrap(Error::Shape("reference mask does not match painting".into())));
    }
    let (composite, composite_mask) =
        composite_paste(&painting, &obj, &obj_mask, entry.reference_bbox).map_err(wrap)?;
    Ok(TrainingPair {
        index,
        composite,
        composite_mask,
        reference: painting,
        reference_mask,
        category: entry.category_label,
    })
}

/// A stacked batch of pairs, all of one size.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub composite: Tensor,
    pub composite_mask: Tensor,
    pub reference: Tensor,
    pub reference_mask: Tensor,
}

impl PairBatch {
    pub fn from_pairs(pairs: &[&TrainingPair], device: &Device, dtype: DType) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("batch", "no pairs"));
        }
        let stack = |f: &dyn Fn(&TrainingPair) -> Result<Tensor>| -> Result<Tensor> {
            let ts = pairs.iter().map(|p| f(p)).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&ts, 0)?)
        };
        Ok(Self {
            composite: stack(&|p| p.composite.to_tensor(device, dtype))?,
            composite_mask: stack(&|p| p.composite_mask.to_tensor(device, dtype))?,
            reference: stack(&|p| p.reference.to_tensor(device, dtype))?,
            reference_mask: stack(&|p| p.reference_mask.to_tensor(device, dtype))?,
        })
    }

    pub fn len(&self) -> usize {
        self.composite.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_paintings: usize,
    pub num_painterly_objects: usize,
    pub num_triplets: usize,
    pub avg_refs_per_object: f64,
}

pub fn dataset_stats(manifest: &Manifest) -> DatasetStats {
    let paintings: BTreeSet<&Path> = manifest.entries.iter().map(|e| e.painting_path.as_path()).collect();
    let objects: BTreeSet<(&Path, &Path)> = manifest.entries.iter().map(|e| e.reference_key()).collect();
    let n = manifest.len();
    DatasetStats {
        num_paintings: paintings.len(),
        num_painterly_objects: objects.len(),
        num_triplets: n,
        avg_refs_per_object: if objects.is_empty() {
            0.0
        } else {
            n as f64 / objects.len() as f64
        },
    }
}

/// Shape classes used as category labels in the toy dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyShape {
    Disc,
    Square,
    Triangle,
    Diamond,
}

impl ToyShape {
    pub const ALL: [ToyShape; 4] = [ToyShape::Disc, ToyShape::Square, ToyShape::Triangle, ToyShape::Diamond];

    pub fn category(self) -> u32 {
        self as u32
    }

    /// Coverage of the unit cell point `(u, v)` in `[0, 1]^2`.
    fn covers(self, u: f32, v: f32) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            ToyShape::Disc => du * du + dv * dv <= 0.25,
            ToyShape::Square => du.abs() <= 0.42 && dv.abs() <= 0.42,
            ToyShape::Triangle => v >= 0.08 && v <= 0.95 && du.abs() <= 0.5 * (v - 0.08) / 0.87,
            ToyShape::Diamond => du.abs() + dv.abs() <= 0.5,
        }
    }

    /// 2x2 supersampled mask of the shape filling an `h x w` cell.
    fn mask(self, h: usize, w: usize) -> Result<Mask> {
        Mask::from_fn(h, w, |y, x| {
            let mut hits = 0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let u = (x as f32 + ox) / w as f32;
                let v = (y as f32 + oy) / h as f32;
                hits += self.covers(u, v) as u32;
            }
            hits as f32 / 4.0
        })
    }
}

pub const TOY_NUM_CATEGORIES: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_paintings: usize,
    pub n_objects: usize,
    /// Painting side length; a multiple of 8.
    pub size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_paintings: 4,
            n_objects: 4,
            size: 64,
        }
    }
}

/// Region style of a toy painting.
#[derive(Debug, Clone, Copy)]
struct RegionStyle {
    base: [f32; 3],
    accent: [f32; 3],
    freq: f32,
    angle: f32,
    amp: f32,
    grain: f32,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl RegionStyle {
    /// Two contrasting region styles: opposite hues, one calm and one busy.
    fn pair(rng: &mut ChaCha8Rng) -> [RegionStyle; 2] {
        let hue = rng.random::<f32>();
        let calm = RegionStyle {
            base: hsv(hue, 0.55, 0.35 + 0.15 * rng.random::<f32>()),
            accent: hsv(hue + 0.08, 0.4, 0.55),
            freq: 0.08 + 0.04 * rng.random::<f32>(),
            angle: rng.random::<f32>() * std::f32::consts::PI,
            amp: 0.25,
            grain: 0.03,
        };
        let busy = RegionStyle {
            base: hsv(hue + 0.5, 0.7, 0.8 + 0.15 * rng.random::<f32>()),
            accent: hsv(hue + 0.6, 0.9, 0.25),
            freq: 0.6 + 0.3 * rng.random::<f32>(),
            angle: rng.random::<f32>() * std::f32::consts::PI,
            amp: 0.9,
            grain: 0.12,
        };
        if rng.random::<bool>() {
            [calm, busy]
        } else {
            [busy, calm]
        }
    }

    /// Stroke-textured colour at `(y, x)`; `grain` is per-pixel noise.
    fn paint(&self, y: usize, x: usize, gradient: f32, noise: f32) -> [f32; 3] {
        let (s, c) = self.angle.sin_cos();
        let t = (x as f32 * c + y as f32 * s) * self.freq;
        let stroke = 0.5 + 0.5 * (t + 0.7 * (0.37 * t).sin()).sin();
        let mix = (self.amp * stroke).clamp(0.0, 1.0);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let v = self.base[ch] * (1.0 - mix) + self.accent[ch] * mix;
            out[ch] = (v * (0.85 + 0.3 * gradient) + self.grain * noise).clamp(0.0, 1.0);
        }
        out
    }
}

struct ToyPainting {
    image: Image,
    ref_mask: Mask,
    bbox: BBox,
    shape: ToyShape,
    object_color: [f32; 3],
}

fn render_painting(rng: &mut ChaCha8Rng, size: usize, shape: ToyShape) -> Result<ToyPainting> {
    let styles = RegionStyle::pair(rng);
    let vertical = rng.random::<bool>();
    let noise: Vec<f32> = (0..size * size).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    let region = |y: usize, x: usize| usize::from(if vertical { x >= size / 2 } else { y >= size / 2 });

    // Object box inside one region.
    let host = rng.random_range(0..2usize);
    let side = rng.random_range(size / 4..=size * 3 / 8);
    let half = size / 2;
    let (rx0, ry0, rw, rh) = match (vertical, host) {
        (true, 0) => (0, 0, half, size),
        (true, _) => (half, 0, size - half, size),
        (false, 0) => (0, 0, size, half),
        (false, _) => (0, half, size, size - half),
    };
    let x0 = rx0 + rng.random_range(0..=rw - side);
    let y0 = ry0 + rng.random_range(0..=rh - side);
    let bbox = BBox::new(x0, y0, x0 + side, y0 + side);
    let shape_mask = shape.mask(side, side)?;
    let host_style = styles[host];
    // Painterly object: category tint over the host region's strokes.
    let tint = hsv(shape.category() as f32 / TOY_NUM_CATEGORIES as f32 + 0.1, 0.8, 0.9);
    let object_color = [
        0.5 * tint[0] + 0.5 * host_style.base[0],
        0.5 * tint[1] + 0.5 * host_style.base[1],
        0.5 * tint[2] + 0.5 * host_style.base[2],
    ];
    let object_style = RegionStyle {
        base: object_color,
        accent: host_style.accent,
        amp: host_style.amp * 0.6,
        ..host_style
    };

    let mut ref_data = vec![0.0f32; size * size];
    let mut planes = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let g = (x + y) as f32 / (2 * size) as f32;
            let n = noise[y * size + x];
            let mut px = styles[region(y, x)].paint(y, x, g, n);
            if bbox.contains(x, y) {
                let m = shape_mask.get(y - y0, x - x0);
                if m > 0.0 {
                    let o = object_style.paint(y, x, g, n);
                    for ch in 0..3 {
                        px[ch] = m * o[ch] + (1.0 - m) * px[ch];
                    }
                    ref_data[y * size + x] = m;
                }
            }
            for ch in 0..3 {
                planes[(ch * size + y) * size + x] = px[ch];
            }
        }
    }
    Ok(ToyPainting {
        image: Image::new(size, size, planes)?,
        ref_mask: Mask::new(size, size, ref_data)?,
        bbox,
        shape,
        object_color,
    })
}

/// Flat-shaded photographic rendition of `shape` in roughly `color`.
fn render_photo_object(rng: &mut ChaCha8Rng, shape: ToyShape, color: [f32; 3]) -> Result<(Image, Mask)> {
    let h = rng.random_range(16..=28usize);
    let w = rng.random_range(16..=28usize);
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random::<f32>() * 0.1 - 0.05);
    let light = rng.random::<f32>() * std::f32::consts::TAU;
    let (ls, lc) = light.sin_cos();
    let mask = shape.mask(h, w)?;
    let img = Image::from_fn(h, w, |c, y, x| {
        let u = x as f32 / w as f32 - 0.5;
        let v = y as f32 / h as f32 - 0.5;
        let shade = 0.85 + 0.3 * (u * lc + v * ls);
        (color[c] * shade + jitter[c]).clamp(0.0, 1.0)
    })?;
    Ok((img, mask))
}

/// Summary of a generated toy dataset.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

fn save_png_into(root: &Path, rel: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    f(&path)?;
    Ok(PathBuf::from(rel))
}

/// Writes a reproducible toy dataset under `out_dir`.
///
/// Every painting gets one self-paste entry (its own reference crop pasted
/// back, so the reference style is exactly attainable) and photographic
/// objects are assigned round-robin to paintings whose painterly object has
/// the same shape class. The last fifth of the paintings (at least one when
/// there are five or more) is marked `test`.
pub fn generate_toy_dataset(cfg: &ToyConfig, out_dir: impl AsRef<Path>) -> Result<ToyDataset> {
    let root = out_dir.as_ref().to_path_buf();
    if cfg.size < 32 || cfg.size % 8 != 0 {
        return Err(Error::invalid("size", "toy paintings must be a multiple of 8 and >= 32"));
    }
    if cfg.n_paintings == 0 {
        return Err(Error::invalid("n_paintings", "need at least one painting"));
    }
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_test = cfg.n_paintings / 5;
    let split_of = |i: usize| {
        if i >= cfg.n_paintings - n_test {
            Split::Test
        } else {
            Split::Train
        }
    };

    let mut paintings = Vec::with_capacity(cfg.n_paintings);
    let mut entries = Vec::new();
    for i in 0..cfg.n_paintings {
        let shape = ToyShape::ALL[i % ToyShape::ALL.len()];
        let p = render_painting(&mut rng, cfg.size, shape)?;
        let painting_path = save_png_into(&root, &format!("paintings/p{i}.png"), |q| p.image.save_png(q))?;
        let ref_path = save_png_into(&root, &format!("refmasks/p{i}.png"), |q| p.ref_mask.save_png(q))?;
        let crop = p.image.crop(p.bbox)?;
        let crop_mask = p.ref_mask.crop(p.bbox)?;
        let self_obj = save_png_into(&root, &format!("selfpaste/s{i}.png"), |q| crop.save_png(q))?;
        let self_mask = save_png_into(&root, &format!("selfpaste/m{i}.png"), |q| crop_mask.save_png(q))?;
        entries.push(ManifestEntry {
            painting_path: painting_path.clone(),
            reference_bbox: p.bbox,
            reference_mask_path: ref_path.clone(),
            object_image_path: self_obj,
            object_mask_path: self_mask,
            category_label: shape.category(),
            split: split_of(i),
        });
        paintings.push((p, painting_path, ref_path));
    }

    for j in 0..cfg.n_objects {
        let host = j % cfg.n_paintings;
        let (p, painting_path, ref_path) = &paintings[host];
        let (img, mask) = render_photo_object(&mut rng, p.shape, p.object_color)?;
        let obj_path = save_png_into(&root, &format!("objects/o{j}.png"), |q| img.save_png(q))?;
        let mask_path = save_png_into(&root, &format!("objmasks/o{j}.png"), |q| mask.save_png(q))?;
        entries.push(ManifestEntry {
            painting_path: painting_path.clone(),
            reference_bbox: p.bbox,
            reference_mask_path: ref_path.clone(),
            object_image_path: obj_path,
            object_mask_path: mask_path,
            category_label: p.shape.category(),
            split: split_of(host),
        });
    }

    let manifest_path = root.join("manifest.jsonl");
    write_manifest(&manifest_path, &entries)?;
    Ok(ToyDataset {
        manifest: Manifest::new(root.clone(), entries),
        root,
        manifest_path,
    })
}

/// SHA-256 over every file below `dir` (relative path and contents, sorted).
pub fn directory_hash(dir: impl AsRef<Path>) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).expect("walk stays below base").to_path_buf());
            }
        }
        Ok(())
    }
    let dir = dir.as_ref();
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let full = dir.join(&rel);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(std::fs::read(&full).map_err(|e| Error::io(&full, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64, dir: &Path) -> ToyDataset {
        generate_toy_dataset(
            &ToyConfig {
                seed,
                n_paintings: 4,
                n_objects: 8,
                size: 64,
            },
            dir,
        )
        .unwrap()
    }

    #[test]
    fn toy_generation_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        toy(3, a.path());
        toy(3, b.path());
        assert_eq!(directory_hash(a.path()).unwrap(), directory_hash(b.path()).unwrap());
        let c = tempfile::tempdir().unwrap();
        toy(4, c.path());
        assert_ne!(directory_hash(a.path()).unwrap(), directory_hash(c.path()).unwrap());
    }

    #[test]
    fn toy_has_requested_objects() {
        let d = tempfile::tempdir().unwrap();
        let ds = toy(1, d.path());
        assert_eq!(std::fs::read_dir(d.path().join("objects")).unwrap().count(), 8);
        assert_eq!(ds.manifest.len(), 12);
        ds.manifest.verify(TOY_NUM_CATEGORIES).unwrap();
        let reread = crate::imagecore::read_manifest(&ds.manifest_path).unwrap();
        assert_eq!(reread.entries, ds.manifest.entries);
    }

    #[test]
    fn self_paste_reproduces_reference() {
        let d = tempfile::tempdir().unwrap();
        let ds = toy(2, d.path());
        for i in 0..4 {
            let pair = build_pair(&ds.manifest, i).unwrap();
            let mad = pair.composite.mean_abs_diff(&pair.reference).unwrap();
            assert!(mad <= 2.0 / 255.0, "entry {i}: {mad}");
        }
    }

    #[test]
    fn pairs_cover_manifest_and_share_boxes() {
        let d = tempfile::tempdir().unwrap();
        let ds = toy(5, d.path());
        let pairs: Vec<_> = build_pairs(&ds.manifest, Some(1)).collect::<Result<_>>().unwrap();
        assert_eq!(pairs.len(), ds.manifest.len());
        let mut seen: Vec<_> = pairs.iter().map(|p| p.index).collect();
        seen.sort();
        assert_eq!(seen, (0..ds.manifest.len()).collect::<Vec<_>>());
        for p in &pairs {
            let b = ds.manifest.entries[p.index].reference_bbox;
            let cb = p.composite_mask.bbox().unwrap();
            assert!(cb.x0 >= b.x0 && cb.x1 <= b.x1 && cb.y0 >= b.y0 && cb.y1 <= b.y1);
            let rb = p.reference_mask.bbox().unwrap();
            assert!(rb.x0 >= b.x0 && rb.x1 <= b.x1 && rb.y0 >= b.y0 && rb.y1 <= b.y1);
            // Background identity of the composite.
            for y in 0..p.composite.height() {
                for x in 0..p.composite.width() {
                    if p.composite_mask.get(y, x) == 0.0 {
                        assert_eq!(p.composite.pixel(y, x), p.reference.pixel(y, x));
                    }
                }
            }
        }
        let again: Vec<_> = build_pairs(&ds.manifest, Some(1)).map(|p| p.unwrap().index).collect();
        assert_eq!(again, pairs.iter().map(|p| p.index).collect::<Vec<_>>());
    }

    #[test]
    fn pair_errors_carry_entry_index() {
        let d = tempfile::tempdir().unwrap();
        let mut ds = toy(6, d.path());
        ds.manifest.entries[2].object_image_path = "missing.png".into();
        match build_pair(&ds.manifest, 2) {
            Err(Error::Manifest { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stats_counting() {
        assert_eq!(
            dataset_stats(&Manifest::default()),
            DatasetStats {
                num_paintings: 0,
                num_painterly_objects: 0,
                num_triplets: 0,
                avg_refs_per_object: 0.0
            }
        );
        let mk = |p: usize, o: usize| ManifestEntry {
            painting_path: format!("p{p}.png").into(),
            reference_bbox: BBox::new(0, 0, 4, 4),
            reference_mask_path: format!("r{p}.png").into(),
            object_image_path: format!("o{o}.png").into(),
            object_mask_path: format!("m{o}.png").into(),
            category_label: 0,
            split: Split::Train,
        };
        let entries = (0..2).flat_map(|p| (0..3).map(move |o| mk(p, o))).collect();
        let s = dataset_stats(&Manifest::new("", entries));
        assert_eq!(s.num_painterly_objects, 2);
        assert_eq!(s.num_triplets, 6);
        assert_eq!(s.avg_refs_per_object, 3.0);
    }
}
