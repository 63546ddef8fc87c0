//! Diagnostics: patch-style locality, side-by-side mode comparisons and
//! analytic cost counting with a latency probe.

use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_specs, masked_stats, Encoder, ProjectionModule, WidthProfile, NUM_STAGES};
use crate::error::{Error, Result};
use crate::harmonizer::{decoder_specs, learned_mapping_macs, HarmonizerModel, MappingKind, StyleMode};
use crate::imagecore::{patch_grid, BBox, Image, Mask};

/// Smallest patch side the encoder accepts.
pub const MIN_PATCH: usize = 8;

/// How two patch style vectors are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Cosine of the raw concatenated `[mu, sigma]` vectors.
    #[default]
    Cosine,
    /// Cosine after subtracting the mean style over all patches of the image.
    CenteredCosine,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "centered-cosine" | "centered_cosine" => Ok(Similarity::CenteredCosine),
            other => Err(Error::invalid("metric", format!("unknown similarity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalityMap {
    pub n: usize,
    pub metric: Similarity,
    /// Per-patch style vectors in row-major patch order.
    pub styles: Vec<Vec<f64>>,
    /// `n^2 x n^2` similarity matrix.
    pub matrix: Vec<Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Pairwise similarity matrix for a list of vectors. Symmetric by
/// construction with a unit diagonal.
pub fn similarity_matrix(vectors: &[Vec<f64>], metric: Similarity) -> Vec<Vec<f64>> {
    let centered: Vec<Vec<f64>>;
    let vs = match metric {
        Similarity::Cosine => vectors,
        Similarity::CenteredCosine => {
            let dim = vectors.first().map_or(0, Vec::len);
            let mut mean = vec![0.0; dim];
            for v in vectors {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x / vectors.len() as f64;
                }
            }
            centered = vectors
                .iter()
                .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
                .collect();
            &centered
        }
    };
    let n = vs.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        out[i][i] = 1.0;
        for j in i + 1..n {
            let s = cosine(&vs[i], &vs[j]);
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    out
}

/// Splits `img` into an `n x n` grid and compares the patches' style vectors
/// (per stage global `[mu, sigma]`, concatenated over the four stages).
/// Patches are centre-cropped to a multiple of 8 pixels.
pub fn locality_map(encoder: &Encoder, img: &Image, n: usize, metric: Similarity) -> Result<LocalityMap> {
    if n == 0 {
        return Err(Error::invalid("n", "patch grid size must be positive"));
    }
    let (ph, pw) = (img.height() / n, img.width() / n);
    if ph < MIN_PATCH || pw < MIN_PATCH {
        return Err(Error::invalid(
            "n",
            format!(
                "{}x{} image is too small for {} patches of at least {MIN_PATCH}x{MIN_PATCH}",
                img.height(),
                img.width(),
                n * n
            ),
        ));
    }
    let (ch, cw) = (ph - ph % 8, pw - pw % 8);
    let crop = BBox::new((pw - cw) / 2, (ph - ch) / 2, (pw - cw) / 2 + cw, (ph - ch) / 2 + ch);
    let patches = patch_grid(img, n)?
        .iter()
        .map(|p| p.crop(crop)?.to_tensor(encoder.device(), encoder.dtype()))
        .collect::<Result<Vec<_>>>()?;
    let batch = Tensor::cat(&patches, 0)?;
    let pyr = encoder.extract(&batch)?;
    let mut styles = vec![Vec::new(); n * n];
    for l in 0..NUM_STAGES {
        let feat = pyr.stage(l);
        let (b, _, h, w) = feat.dims4()?;
        let ones = Tensor::ones((b, 1, h, w), feat.dtype(), feat.device())?;
        let (mu, sigma) = masked_stats(feat, &ones)?.to_vecs()?;
        for (i, s) in styles.iter_mut().enumerate() {
            s.extend_from_slice(&mu[i]);
            s.extend_from_slice(&sigma[i]);
        }
    }
    let matrix = similarity_matrix(&styles, metric);
    Ok(LocalityMap {
        n,
        metric,
        styles,
        matrix,
    })
}

fn heat_color(t: f64) -> [f32; 3] {
    // Blue (low) through white to red (high).
    let t = t.clamp(0.0, 1.0) as f32;
    if t < 0.5 {
        let u = t * 2.0;
        [u, u, 1.0]
    } else {
        let u = (1.0 - t) * 2.0;
        [1.0, u, u]
    }
}

impl LocalityMap {
    /// Mean similarity of patches sharing a group minus the mean across groups.
    /// `group` assigns each patch index to a region.
    pub fn contrast(&self, group: impl Fn(usize) -> usize) -> f64 {
        let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
        let k = self.matrix.len();
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                if group(i) == group(j) {
                    within += self.matrix[i][j];
                    nw += 1;
                } else {
                    across += self.matrix[i][j];
                    na += 1;
                }
            }
        }
        within / nw.max(1) as f64 - across / na.max(1) as f64
    }

    /// Similarity of every patch to `query`, rendered as an `h x w` heatmap.
    /// Colours are scaled between the row's minimum and maximum.
    pub fn heatmap(&self, query: usize, height: usize, width: usize) -> Result<Image> {
        let row = self
            .matrix
            .get(query)
            .ok_or_else(|| Error::invalid("query", format!("patch {query} out of range")))?;
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = self.n;
        Image::from_fn(height, width, |c, y, x| {
            let gy = (y * n / height).min(n - 1);
            let gx = (x * n / width).min(n - 1);
            let idx = gy * n + gx;
            if idx == query && (y * n % height < height / 8 || x * n % width < width / 8) {
                return 0.0;
            }
            heat_color((row[idx] - lo) / span)[c]
        })
    }

    /// `[image | heatmap(q) for q in queries]`.
    pub fn figure(&self, img: &Image, queries: &[usize]) -> Result<Image> {
        let mut panels = vec![img.clone()];
        for &q in queries {
            panels.push(self.heatmap(q, img.height(), img.width())?);
        }
        Image::hstack(&panels)
    }
}

/// Labelled output panels of a mode comparison.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub panels: Vec<(String, Image)>,
}

impl Comparison {
    pub fn figure(&self) -> Result<Image> {
        Image::hstack(&self.panels.iter().map(|(_, i)| i.clone()).collect::<Vec<_>>())
    }

    pub fn panel(&self, label: &str) -> Option<&Image> {
        self.panels.iter().find(|(l, _)| l == label).map(|(_, i)| i)
    }
}

/// Renders `[composite | bg | ro | ours]`; `ro` (the reference object's own
/// style) only when a reference is given. Saves the strip to `out_path` if set.
pub fn compare_modes(
    model: &HarmonizerModel,
    composite: &Image,
    mask: &Mask,
    reference: Option<(&Image, &Mask)>,
    out_path: Option<&Path>,
) -> Result<Comparison> {
    let mut panels = vec![("composite".to_string(), composite.clone())];
    panels.push(("bg".into(), model.harmonize(composite, mask, &StyleMode::Bg)?));
    if let Some((r, rm)) = reference {
        let styles = model.reference_styles(r, rm)?;
        panels.push(("ro".into(), model.harmonize(composite, mask, &StyleMode::External(styles))?));
    }
    panels.push(("ours".into(), model.harmonize(composite, mask, &StyleMode::Ours)?));
    let cmp = Comparison { panels };
    if let Some(p) = out_path {
        cmp.figure()?.save_png(p)?;
    }
    Ok(cmp)
}

/// Analytic cost of one inference pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub profile: WidthProfile,
    pub height: usize,
    pub width: usize,
    /// Multiply-accumulates per part.
    pub breakdown: Vec<(String, u64)>,
    pub macs: u64,
    /// `macs / 1e9`.
    pub gmacs: f64,
    /// Two floating point operations per multiply-accumulate, `/ 1e9`.
    pub gflops: f64,
    pub mean_latency_s: Option<f64>,
    pub latency_runs: usize,
}

impl FlopsReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "profile {} at {}x{}\n",
            self.profile, self.height, self.width
        );
        for (name, macs) in &self.breakdown {
            s.push_str(&format!("  {name:<10} {:>10.4} GMAC\n", *macs as f64 / 1e9));
        }
        s.push_str(&format!("total       {:.4} GMAC = {:.4} GFLOP\n", self.gmacs, self.gflops));
        if let Some(t) = self.mean_latency_s {
            s.push_str(&format!("latency     {t:.6} s (mean of {} runs)\n", self.latency_runs));
        }
        s
    }
}

/// Counts from the architecture alone: encoder once on the composite,
/// projection, four mappings and the decoder. Element-wise work (activations,
/// statistics, blending) is not counted.
pub fn flops_count(profile: WidthProfile, mapping: MappingKind, height: usize, width: usize) -> Result<FlopsReport> {
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(Error::invalid("size", format!("{height}x{width} is not a positive multiple of 8")));
    }
    let sum = |specs: &[crate::encoder::ConvSpec]| specs.iter().map(|s| s.macs(height, width)).sum::<u64>();
    let enc: u64 = encoder_specs(profile).iter().map(|s| sum(s)).sum();
    let proj = sum(&ProjectionModule::specs("proj", profile.object_dim()));
    let map: u64 = match mapping {
        MappingKind::Learned => profile
            .widths()
            .iter()
            .map(|&c| learned_mapping_macs(c, profile.object_dim()))
            .sum(),
        MappingKind::Passthrough => 0,
    };
    let dec = sum(&decoder_specs(profile));
    let breakdown = vec![
        ("encoder".to_string(), enc),
        ("projection".to_string(), proj),
        ("mapping".to_string(), map),
        ("decoder".to_string(), dec),
    ];
    let macs = enc + proj + map + dec;
    Ok(FlopsReport {
        profile,
        height,
        width,
        breakdown,
        macs,
        gmacs: macs as f64 / 1e9,
        gflops: 2.0 * macs as f64 / 1e9,
        mean_latency_s: None,
        latency_runs: 0,
    })
}

/// Mean wall time of `runs` forward passes in `Ours` mode after `warmup`
/// untimed passes, on a fixed synthetic composite.
pub fn measure_latency(model: &HarmonizerModel, height: usize, width: usize, warmup: usize, runs: usize) -> Result<f64> {
    if runs == 0 {
        return Err(Error::invalid("runs", "need at least one timed run"));
    }
    let img = Image::from_fn(height, width, |c, y, x| ((x * 7 + y * 3 + c * 11) % 256) as f32 / 255.0)?;
    let mask = Mask::from_bbox(height, width, BBox::new(width / 4, height / 4, width * 3 / 4, height * 3 / 4))?;
    let x = img.to_tensor(model.device(), model.dtype())?;
    let m = mask.to_tensor(model.device(), model.dtype())?;
    for _ in 0..warmup {
        model.forward(&x, &m, &StyleMode::Ours)?;
    }
    let start = Instant::now();
    for _ in 0..runs {
        let out = model.forward(&x, &m, &StyleMode::Ours)?;
        // Force evaluation of the result.
        out.harmonized.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(start.elapsed().as_secs_f64() / runs as f64)
}

/// Analytic count for `model` plus its measured latency when `runs > 0`.
pub fn flops_report(model: &HarmonizerModel, size: usize, warmup: usize, runs: usize) -> Result<FlopsReport> {
    let cfg = model.config();
    let mut r = flops_count(cfg.profile, cfg.mapping, size, size)?;
    if runs > 0 {
        r.mean_latency_s = Some(measure_latency(model, size, size, warmup, runs)?);
        r.latency_runs = runs;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ConvSpec;
    use crate::harmonizer::HarmonizerConfig;
    use candle_core::{DType, Device};
    use std::sync::Arc;

    fn two_tone(size: usize) -> Image {
        Image::from_fn(size, size, |c, y, x| {
            if x < size / 2 {
                [0.15, 0.2, 0.55][c] + 0.05 * ((y / 6) % 2) as f32
            } else {
                let stripe = ((x + y) / 2) % 2;
                [0.95, 0.75, 0.1][c] * (0.3 + 0.7 * stripe as f32)
            }
        })
        .unwrap()
    }

    #[test]
    fn conv_count_closed_form() {
        let spec = ConvSpec {
            name: "c".into(),
            cin: 3,
            cout: 8,
            kernel: 3,
            level: 0,
        };
        assert_eq!(2 * spec.macs(32, 32), 442_368);
    }

    #[test]
    fn tiny_is_cheaper_and_weights_do_not_matter() {
        let tiny = flops_count(WidthProfile::Tiny, MappingKind::Learned, 256, 256).unwrap();
        let paper = flops_count(WidthProfile::Paper, MappingKind::Learned, 256, 256).unwrap();
        assert!(tiny.macs < paper.macs);
        assert_eq!(tiny.gflops, 2.0 * tiny.gmacs);
        let enc = Arc::new(Encoder::random(WidthProfile::Tiny, 1, &Device::Cpu, DType::F32).unwrap());
        let a = HarmonizerModel::new(enc.clone(), HarmonizerConfig::default(), 1).unwrap();
        let b = HarmonizerModel::new(enc, HarmonizerConfig::default(), 2).unwrap();
        assert_eq!(flops_report(&a, 64, 0, 0).unwrap(), flops_report(&b, 64, 0, 0).unwrap());
        assert!(flops_count(WidthProfile::Tiny, MappingKind::Learned, 60, 64).is_err());
    }

    #[test]
    fn matrix_properties() {
        let enc = Encoder::random(WidthProfile::Tiny, 3, &Device::Cpu, DType::F32).unwrap();
        let img = two_tone(64);
        for metric in [Similarity::Cosine, Similarity::CenteredCosine] {
            let m = locality_map(&enc, &img, 4, metric).unwrap();
            assert_eq!(m.matrix.len(), 16);
            for i in 0..16 {
                assert_eq!(m.matrix[i][i], 1.0);
                for j in 0..16 {
                    assert!((m.matrix[i][j] - m.matrix[j][i]).abs() <= 1e-6);
                    assert!((-1.0..=1.0).contains(&m.matrix[i][j]));
                }
            }
            let gap = m.contrast(|i| usize::from(i % 4 >= 2));
            assert!(gap > 0.0, "{metric:?}: {gap}");
        }
    }

    #[test]
    fn small_images_are_rejected() {
        let enc = Encoder::random(WidthProfile::Tiny, 3, &Device::Cpu, DType::F32).unwrap();
        let img = Image::filled(24, 24, [0.5; 3]).unwrap();
        assert!(locality_map(&enc, &img, 4, Similarity::Cosine).is_err());
        assert!(locality_map(&enc, &img, 3, Similarity::Cosine).is_ok());
    }

    #[test]
    fn heatmap_and_figure_sizes() {
        let styles = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.1]];
        let m = LocalityMap {
            n: 2,
            metric: Similarity::Cosine,
            matrix: similarity_matrix(&styles, Similarity::Cosine),
            styles,
        };
        let h = m.heatmap(0, 16, 16).unwrap();
        assert_eq!((h.height(), h.width()), (16, 16));
        assert!(m.heatmap(4, 16, 16).is_err());
        let img = Image::filled(16, 16, [0.5; 3]).unwrap();
        assert_eq!(m.figure(&img, &[0, 3]).unwrap().width(), 48);
    }

    #[test]
    fn comparison_panels() {
        let enc = Arc::new(Encoder::random(WidthProfile::Tiny, 1, &Device::Cpu, DType::F32).unwrap());
        let model = HarmonizerModel::new(enc, HarmonizerConfig::default(), 4).unwrap();
        let comp = two_tone(32);
        let mask = Mask::from_bbox(32, 32, BBox::new(8, 8, 24, 24)).unwrap();
        let c = compare_modes(&model, &comp, &mask, None, None).unwrap();
        assert_eq!(c.panels.len(), 3);
        let bg = c.panel("bg").unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(y, x) == 0.0 {
                    assert_eq!(bg.pixel(y, x), comp.pixel(y, x));
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("cmp.png");
        let c = compare_modes(&model, &comp, &mask, Some((&comp, &mask)), Some(&out)).unwrap();
        assert_eq!(c.panels.len(), 4);
        assert_eq!(Image::load_png(&out).unwrap().width(), 4 * 32);
    }

    #[test]
    fn similarity_metric_parsing() {
        assert_eq!("cosine".parse::<Similarity>().unwrap(), Similarity::Cosine);
        assert_eq!("centered-cosine".parse::<Similarity>().unwrap(), Similarity::CenteredCosine);
        assert!("l2".parse::<Similarity>().is_err());
    }
}
