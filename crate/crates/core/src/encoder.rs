//! Frozen four-stage VGG-style encoder and mask-weighted feature statistics.
//!
//! Stage outputs correspond to `relu1_1`, `relu2_1`, `relu3_1` and `relu4_1`
//! of VGG-19. Stage `l` (0-based here) sits at `1 / 2^l` of the input
//! resolution.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Conv2d, Module};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::nn::ParamStore;

pub const NUM_STAGES: usize = 4;

/// Floor added to the variance before the square root.
pub const VAR_EPS: f64 = 1e-8;

/// ImageNet channel statistics applied inside [`Encoder::extract`].
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

const CHECKPOINT_KIND: &str = "artopih-encoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WidthProfile {
    /// VGG-19 widths.
    Paper,
    /// Reduced widths for desk-scale runs.
    #[default]
    Tiny,
}

impl WidthProfile {
    pub fn widths(self) -> [usize; NUM_STAGES] {
        match self {
            WidthProfile::Paper => [64, 128, 256, 512],
            WidthProfile::Tiny => [8, 16, 32, 64],
        }
    }

    pub fn object_dim(self) -> usize {
        self.widths()[NUM_STAGES - 1]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WidthProfile::Paper => "paper",
            WidthProfile::Tiny => "tiny",
        }
    }
}

impl fmt::Display for WidthProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WidthProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(WidthProfile::Paper),
            "tiny" => Ok(WidthProfile::Tiny),
            other => Err(Error::invalid("profile", format!("unknown width profile {other:?}"))),
        }
    }
}

/// One convolution of a network description, used for construction and for
/// analytic cost counting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    /// Input resolution is `H / 2^level`.
    pub level: usize,
}

impl ConvSpec {
    fn new(name: &str, cin: usize, cout: usize, kernel: usize, level: usize) -> Self {
        Self {
            name: name.to_string(),
            cin,
            cout,
            kernel,
            level,
        }
    }

    /// Multiply-accumulates at input size `h x w` (stride 1, same padding).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (h, w) = (h >> self.level, w >> self.level);
        (self.cin * self.cout * self.kernel * self.kernel) as u64 * (h * w) as u64
    }
}

/// The encoder's convolutions grouped per stage. A 2x2 max-pool precedes the
/// last convolution of stages 2-4.
pub fn encoder_specs(profile: WidthProfile) -> [Vec<ConvSpec>; NUM_STAGES] {
    let [c1, c2, c3, c4] = profile.widths();
    [
        vec![ConvSpec::new("conv1_1", 3, c1, 3, 0)],
        vec![
            ConvSpec::new("conv1_2", c1, c1, 3, 0),
            ConvSpec::new("conv2_1", c1, c2, 3, 1),
        ],
        vec![
            ConvSpec::new("conv2_2", c2, c2, 3, 1),
            ConvSpec::new("conv3_1", c2, c3, 3, 2),
        ],
        vec![
            ConvSpec::new("conv3_2", c3, c3, 3, 2),
            ConvSpec::new("conv3_3", c3, c3, 3, 2),
            ConvSpec::new("conv3_4", c3, c3, 3, 2),
            ConvSpec::new("conv4_1", c3, c4, 3, 3),
        ],
    ]
}

/// Conv names in torchvision's `vgg19().features` numbering.
const TORCHVISION_INDEX: [(&str, usize); 9] = [
    ("conv1_1", 0),
    ("conv1_2", 2),
    ("conv2_1", 5),
    ("conv2_2", 7),
    ("conv3_1", 10),
    ("conv3_2", 12),
    ("conv3_3", 14),
    ("conv3_4", 16),
    ("conv4_1", 19),
];

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: [Tensor; NUM_STAGES],
}

impl FeaturePyramid {
    pub fn stage(&self, l: usize) -> &Tensor {
        &self.stages[l]
    }

    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid {
            stages: self.stages.clone().map(|t| t.detach()),
        }
    }
}

pub struct Encoder {
    profile: WidthProfile,
    stages: [Vec<Conv2d>; NUM_STAGES],
    store: ParamStore,
    mean: Tensor,
    std: Tensor,
}

impl Encoder {
    /// Frozen encoder with seeded Kaiming-normal weights.
    pub fn random(profile: WidthProfile, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        let store = ParamStore::seeded(seed, false, device, dtype);
        Self::build(profile, store)
    }

    /// Loads a container written by [`Encoder::save`].
    pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        let ck = checkpoint::load(path, CHECKPOINT_KIND, device)?;
        let profile: WidthProfile = ck
            .metadata
            .get("profile")
            .ok_or_else(|| Error::Checkpoint("encoder checkpoint lacks a profile tag".into()))?
            .parse()?;
        Self::build(profile, ParamStore::from_tensors(ck.tensors, false, device, dtype))
    }

    /// Loads VGG-19 convolution weights stored under torchvision names
    /// (`features.0.weight`, ...). Extra tensors (later layers) are ignored.
    pub fn from_torchvision_vgg19(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        let mut raw = candle_core::safetensors::load(path.as_ref(), device)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut renamed = HashMap::new();
        for (name, idx) in TORCHVISION_INDEX {
            for part in ["weight", "bias"] {
                let key = format!("features.{idx}.{part}");
                let t = raw
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                renamed.insert(format!("{name}.{part}"), t);
            }
        }
        Self::build(WidthProfile::Paper, ParamStore::from_tensors(renamed, false, device, dtype))
    }

    fn build(profile: WidthProfile, mut store: ParamStore) -> Result<Self> {
        let specs = encoder_specs(profile);
        let mut stages: [Vec<Conv2d>; NUM_STAGES] = Default::default();
        for (l, stage_specs) in specs.iter().enumerate() {
            for s in stage_specs {
                stages[l].push(store.conv2d(&s.name, s.cin, s.cout, s.kernel)?);
            }
        }
        store.finish()?;
        let device = store.device().clone();
        let dtype = store.dtype();
        let mean = Tensor::new(&INPUT_MEAN, &device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&INPUT_STD, &device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(Self {
            profile,
            stages,
            store,
            mean,
            std,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let mut meta = BTreeMap::new();
        meta.insert("profile".to_string(), self.profile.to_string());
        checkpoint::save(path, CHECKPOINT_KIND, &meta, self.store.named_tensors())
    }

    pub fn profile(&self) -> WidthProfile {
        self.profile
    }

    pub fn widths(&self) -> [usize; NUM_STAGES] {
        self.profile.widths()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// `x` is a `(B, 3, H, W)` batch in `[0, 1]`; `H` and `W` must be multiples of 8.
    pub fn extract(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "size",
                format!("{h}x{w} input is not a multiple of 8; pad before encoding"),
            ));
        }
        let mut x = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut out: Vec<Tensor> = Vec::with_capacity(NUM_STAGES);
        for (l, convs) in self.stages.iter().enumerate() {
            let last = convs.len() - 1;
            for (i, conv) in convs.iter().enumerate() {
                if l > 0 && i == last {
                    x = max_pool2x2(&x)?;
                }
                x = conv.forward(&x)?.relu()?;
            }
            out.push(x.clone());
        }
        let stages: [Tensor; NUM_STAGES] = out.try_into().expect("four stages");
        Ok(FeaturePyramid { stages })
    }

    pub fn extract_image(&self, img: &Image) -> Result<FeaturePyramid> {
        self.extract(&img.to_tensor(self.device(), self.dtype())?)
    }
}

/// Per-channel `(mean, std)` of one stage. Both tensors are `(B, C)`.
#[derive(Debug, Clone)]
pub struct StyleVector {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl StyleVector {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.dims() != sigma.dims() || mu.rank() != 2 {
            return Err(Error::Shape(format!(
                "style vector halves must both be (B, C); got {:?} and {:?}",
                mu.dims(),
                sigma.dims()
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn channels(&self) -> usize {
        self.mu.dims()[1]
    }

    pub fn batch(&self) -> usize {
        self.mu.dims()[0]
    }

    /// `[mu, sigma]` along the feature axis, `(B, 2C)`.
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.mu, &self.sigma], 1)?)
    }

    pub fn from_concat(t: &Tensor) -> Result<Self> {
        let (_, n) = t.dims2()?;
        if n % 2 != 0 {
            return Err(Error::Shape(format!("odd style vector length {n}")));
        }
        let c = n / 2;
        Self::new(t.narrow(1, 0, c)?, t.narrow(1, c, c)?)
    }

    pub fn detach(&self) -> StyleVector {
        StyleVector {
            mu: self.mu.detach(),
            sigma: self.sigma.detach(),
        }
    }

    pub fn to_vecs(&self) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        Ok((
            self.mu.to_dtype(DType::F64)?.to_vec2()?,
            self.sigma.to_dtype(DType::F64)?.to_vec2()?,
        ))
    }
}

fn mask_weights(feat: &Tensor, mask: &Tensor, empty: &'static str) -> Result<Tensor> {
    let (b, _, h, w) = feat.dims4()?;
    let (mb, mc, mh, mw) = mask.dims4()?;
    if mc != 1 || (mh, mw) != (h, w) || (mb != b && mb != 1) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match feature map {:?}",
            mask.dims(),
            feat.dims()
        )));
    }
    let wsum = mask.sum_keepdim(2)?.sum_keepdim(3)?;
    let min: f64 = wsum.flatten_all()?.to_dtype(DType::F64)?.min(0)?.to_scalar()?;
    if min <= 0.0 {
        return Err(Error::EmptyRegion(empty));
    }
    Ok(wsum)
}

fn masked_stats_with(feat: &Tensor, mask: &Tensor, empty: &'static str) -> Result<StyleVector> {
    let wsum = mask_weights(feat, mask, empty)?;
    let mu = feat
        .broadcast_mul(mask)?
        .sum_keepdim(2)?
        .sum_keepdim(3)?
        .broadcast_div(&wsum)?;
    let var = feat
        .broadcast_sub(&mu)?
        .sqr()?
        .broadcast_mul(mask)?
        .sum_keepdim(2)?
        .sum_keepdim(3)?
        .broadcast_div(&wsum)?;
    let sigma = (var + VAR_EPS)?.sqrt()?;
    StyleVector::new(mu.flatten_from(1)?, sigma.flatten_from(1)?)
}

/// 2x2 max pooling built from a reshape and two reductions. candle's own
/// `max_pool2d` backward scales the gradient by the share of maxima in each
/// window (1/4 for a unique max) instead of routing it unchanged.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

/// Mask-weighted per-channel mean and (biased) standard deviation.
///
/// `feat` is `(B, C, H, W)`, `mask` is `(B or 1, 1, H, W)` with values in
/// `[0, 1]`. `sigma = sqrt(var + VAR_EPS)`.
pub fn masked_stats(feat: &Tensor, mask: &Tensor) -> Result<StyleVector> {
    masked_stats_with(feat, mask, "empty region")
}

/// Mask-weighted per-channel mean, `(B, C)`.
pub fn masked_mean(feat: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let wsum = mask_weights(feat, mask, "empty region")?;
    Ok(feat
        .broadcast_mul(mask)?
        .sum_keepdim(2)?
        .sum_keepdim(3)?
        .broadcast_div(&wsum)?
        .flatten_from(1)?)
}

/// Area-average a `(B, 1, H, W)` mask down to `h x w` (integer factors only).
pub fn stage_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, mh, mw) = mask.dims4()?;
    if (mh, mw) == (h, w) {
        return Ok(mask.clone());
    }
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 || mh / h != mw / w || h > mh {
        return Err(Error::invalid(
            "size",
            format!("cannot area-resample a {mh}x{mw} mask to {h}x{w}"),
        ));
    }
    Ok(mask.avg_pool2d(mh / h)?)
}

fn stage_dims(t: &Tensor) -> Result<(usize, usize)> {
    let (_, _, h, w) = t.dims4()?;
    Ok((h, w))
}

/// Style of the region not covered by `fg_mask` at stage `l`.
pub fn background_style(pyr: &FeaturePyramid, fg_mask: &Tensor, l: usize) -> Result<StyleVector> {
    let feat = pyr.stage(l);
    let (h, w) = stage_dims(feat)?;
    let bg = stage_mask(fg_mask, h, w)?.affine(-1.0, 1.0)?;
    masked_stats_with(feat, &bg, "empty background")
}

/// Style of the region covered by `fg_mask` at stage `l`.
pub fn foreground_style(pyr: &FeaturePyramid, fg_mask: &Tensor, l: usize) -> Result<StyleVector> {
    let feat = pyr.stage(l);
    let (h, w) = stage_dims(feat)?;
    masked_stats_with(feat, &stage_mask(fg_mask, h, w)?, "empty foreground")
}

/// One residual block `x + conv2(relu(conv1(x)))` on the last stage, mapping
/// features of both domains into a shared space.
pub struct ProjectionModule {
    conv1: Conv2d,
    conv2: Conv2d,
    prefix: String,
}

impl ProjectionModule {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: store.conv2d(&format!("{prefix}.conv1"), channels, channels, 3)?,
            conv2: store.conv2d(&format!("{prefix}.conv2"), channels, channels, 3)?,
            prefix: prefix.to_string(),
        })
    }

    pub fn specs(prefix: &str, channels: usize) -> Vec<ConvSpec> {
        vec![
            ConvSpec::new(&format!("{prefix}.conv1"), channels, channels, 3, 3),
            ConvSpec::new(&format!("{prefix}.conv2"), channels, channels, 3, 3),
        ]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        Ok((x + r)?)
    }

    /// Zeroes the residual branch so the block becomes the identity.
    pub fn zero_residual(&self, store: &ParamStore) -> Result<()> {
        for part in ["weight", "bias"] {
            let name = format!("{}.conv2.{part}", self.prefix);
            let cur = store
                .get(&name)
                .ok_or_else(|| Error::invalid("parameter", name.clone()))?;
            store.set(&name, &cur.zeros_like()?)?;
        }
        Ok(())
    }
}

/// Masked average of `P(stage 4)` under the area-resampled foreground mask.
pub fn object_feature(pyr: &FeaturePyramid, fg_mask: &Tensor, p: &ProjectionModule) -> Result<Tensor> {
    let f4 = pyr.stage(NUM_STAGES - 1);
    let (h, w) = stage_dims(f4)?;
    let m = stage_mask(fg_mask, h, w)?;
    // Fail before running the projection.
    mask_weights(f4, &m, "empty foreground at stage 4")?;
    masked_mean(&p.forward(f4)?, &m)
}

/// Cosine similarity between rows of two `(N, D)` matrices, returned `(N,)`.
pub fn row_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok(dot.div(&(na * nb)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_matches_candle_and_routes_gradient() {
        let x = candle_core::Var::from_tensor(
            &Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap(),
        )
        .unwrap();
        let ours = max_pool2x2(x.as_tensor()).unwrap();
        let theirs = x.as_tensor().max_pool2d(2).unwrap();
        assert_eq!(
            ours.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            theirs.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let g = ours.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g.iter().sum::<f64>(), 8.0);
        assert_eq!(g[5], 1.0);
        assert_eq!(g[0], 0.0);
    }
    use crate::imagecore::Mask;

    fn dev() -> Device {
        Device::Cpu
    }

    fn t4(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &dev()).unwrap()
    }

    #[test]
    fn stage_dims_and_widths() {
        let enc = Encoder::random(WidthProfile::Tiny, 1, &dev(), DType::F32).unwrap();
        let x = Tensor::zeros((1, 3, 64, 32), DType::F32, &dev()).unwrap();
        let pyr = enc.extract(&x).unwrap();
        for (l, (want_c, t)) in enc.widths().iter().zip(&pyr.stages).enumerate() {
            assert_eq!(t.dims(), &[1, *want_c, 64 >> l, 32 >> l]);
        }
    }

    #[test]
    fn paper_profile_at_256() {
        // Shape only; weights are random.
        let enc = Encoder::random(WidthProfile::Paper, 1, &dev(), DType::F32).unwrap();
        let x = Tensor::zeros((1, 3, 256, 256), DType::F32, &dev()).unwrap();
        let pyr = enc.extract(&x).unwrap();
        let dims: Vec<_> = pyr.stages.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![
                vec![1, 64, 256, 256],
                vec![1, 128, 128, 128],
                vec![1, 256, 64, 64],
                vec![1, 512, 32, 32]
            ]
        );
    }

    #[test]
    fn extract_is_deterministic_and_rejects_bad_sizes() {
        let enc = Encoder::random(WidthProfile::Tiny, 5, &dev(), DType::F32).unwrap();
        let img = Image::from_fn(16, 16, |c, y, x| ((c + y * x) % 13) as f32 / 12.0).unwrap();
        let a = enc.extract_image(&img).unwrap();
        let b = enc.extract_image(&img).unwrap();
        for (x, y) in a.stages.iter().zip(&b.stages) {
            let x: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
        let bad = Tensor::zeros((1, 3, 12, 16), DType::F32, &dev()).unwrap();
        assert!(enc.extract(&bad).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.safetensors");
        let enc = Encoder::random(WidthProfile::Tiny, 9, &dev(), DType::F32).unwrap();
        enc.save(&p).unwrap();
        let back = Encoder::load(&p, &dev(), DType::F32).unwrap();
        assert_eq!(enc.checksum().unwrap(), back.checksum().unwrap());
        assert_eq!(back.profile(), WidthProfile::Tiny);
    }

    #[test]
    fn constant_map_has_floor_sigma() {
        let f = t4(vec![3.0; 8], (1, 2, 2, 2));
        let m = t4(vec![1.0, 0.0, 0.5, 0.0], (1, 1, 2, 2));
        let s = masked_stats(&f, &m).unwrap();
        let (mu, sigma) = s.to_vecs().unwrap();
        assert!(mu[0].iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(sigma[0].iter().all(|&v| (v - 1e-4).abs() < 1e-9));
    }

    #[test]
    fn full_mask_is_global_stats() {
        let vals: Vec<f64> = (0..18).map(|i| ((i * 7) % 11) as f64 * 0.3).collect();
        let f = t4(vals.clone(), (1, 2, 3, 3));
        let m = t4(vec![1.0; 9], (1, 1, 3, 3));
        let (mu, sigma) = masked_stats(&f, &m).unwrap().to_vecs().unwrap();
        for c in 0..2 {
            let ch = &vals[c * 9..(c + 1) * 9];
            let mean = ch.iter().sum::<f64>() / 9.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!((mu[0][c] - mean).abs() < 1e-12);
            assert!((sigma[0][c] - (var + VAR_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn half_mask_matches_selected_pixels() {
        // 2 channels, 2x2, mask [[1,0],[1,0]] selects column 0.
        let vals = vec![1.0, 9.0, 3.0, -4.0, 0.5, 2.0, -1.5, 7.0];
        let f = t4(vals.clone(), (1, 2, 2, 2));
        let m = t4(vec![1.0, 0.0, 1.0, 0.0], (1, 1, 2, 2));
        let (mu, sigma) = masked_stats(&f, &m).unwrap().to_vecs().unwrap();
        for c in 0..2 {
            let sel = [vals[c * 4], vals[c * 4 + 2]];
            let mean = (sel[0] + sel[1]) / 2.0;
            let var = sel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
            assert!((mu[0][c] - mean).abs() < 1e-6);
            assert!((sigma[0][c] - (var + VAR_EPS).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_mask_errors() {
        let f = t4(vec![1.0; 4], (1, 1, 2, 2));
        let m = t4(vec![0.0; 4], (1, 1, 2, 2));
        assert!(masked_stats(&f, &m).unwrap_err().to_string().contains("empty region"));
    }

    fn two_tone_pyramid() -> (FeaturePyramid, Vec<f64>) {
        // Synthetic pyramid: left half value 1 and 3 alternating rows, right half 10.
        let mut stages = Vec::new();
        let mut left_vals = Vec::new();
        for l in 0..NUM_STAGES {
            let s = 8 >> l;
            let mut v = Vec::new();
            for y in 0..s {
                for x in 0..s {
                    let val = if x < s / 2 { if y % 2 == 0 { 1.0 } else { 3.0 } } else { 10.0 };
                    v.push(val);
                    if l == 1 && x < s / 2 {
                        left_vals.push(val);
                    }
                }
            }
            stages.push(t4(v, (1, 1, s, s)));
        }
        (
            FeaturePyramid {
                stages: stages.try_into().unwrap(),
            },
            left_vals,
        )
    }

    #[test]
    fn background_style_cases() {
        let (pyr, left) = two_tone_pyramid();
        let zeros = Mask::zeros(8, 8).unwrap().to_tensor(&dev(), DType::F64).unwrap();
        let g = background_style(&pyr, &zeros, 2).unwrap();
        let full = t4(vec![1.0; 4], (1, 1, 2, 2));
        let want = masked_stats(pyr.stage(2), &full).unwrap();
        assert_eq!(g.to_vecs().unwrap(), want.to_vecs().unwrap());

        let ones = Mask::ones(8, 8).unwrap().to_tensor(&dev(), DType::F64).unwrap();
        assert!(background_style(&pyr, &ones, 0).unwrap_err().to_string().contains("empty background"));

        // Foreground = right half; background stats are the left half's.
        let right = Mask::from_fn(8, 8, |_, x| (x >= 4) as u8 as f32).unwrap();
        let right = right.to_tensor(&dev(), DType::F64).unwrap();
        let (mu, sigma) = background_style(&pyr, &right, 1).unwrap().to_vecs().unwrap();
        let mean = left.iter().sum::<f64>() / left.len() as f64;
        let var = left.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / left.len() as f64;
        assert!((mu[0][0] - mean).abs() < 1e-9);
        assert!((sigma[0][0] - (var + VAR_EPS).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn zero_residual_projection_gives_raw_masked_mean() {
        let enc = Encoder::random(WidthProfile::Tiny, 2, &dev(), DType::F64).unwrap();
        let mut store = ParamStore::seeded(4, true, &dev(), DType::F64);
        let p = ProjectionModule::new(&mut store, "proj", 64).unwrap();
        p.zero_residual(&store).unwrap();
        let img = Image::from_fn(32, 32, |c, y, x| ((c * 5 + y * 3 + x) % 17) as f32 / 16.0).unwrap();
        let pyr = enc.extract_image(&img).unwrap();
        let m = Mask::from_fn(32, 32, |y, x| (y >= 8 && x < 24) as u8 as f32).unwrap();
        let mt = m.to_tensor(&dev(), DType::F64).unwrap();
        let got: Vec<f64> = object_feature(&pyr, &mt, &p).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
        let sm = stage_mask(&mt, 4, 4).unwrap();
        let want: Vec<f64> = masked_mean(pyr.stage(3), &sm).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn object_feature_matches_brute_force_mean() {
        let mut store = ParamStore::seeded(11, true, &dev(), DType::F64);
        let p = ProjectionModule::new(&mut store, "proj", 3).unwrap();
        let vals: Vec<f64> = (0..48).map(|i| ((i * 13) % 7) as f64 / 3.0).collect();
        let f4 = t4(vals, (1, 3, 4, 4));
        let zero = t4(vec![0.0; 16], (1, 1, 4, 4));
        let pyr = FeaturePyramid {
            stages: [zero.clone(), zero.clone(), zero.clone(), f4.clone()],
        };
        let mvals: Vec<f64> = (0..16).map(|i| [0.0, 1.0, 0.25, 0.0][i % 4]).collect();
        let m = t4(mvals.clone(), (1, 1, 4, 4));
        let got: Vec<f64> = object_feature(&pyr, &m, &p).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
        let projected: Vec<f64> = p.forward(&f4).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let wsum: f64 = mvals.iter().sum();
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..16 {
                acc += projected[c * 16 + i] * mvals[i];
            }
            assert!((got[c] - acc / wsum).abs() < 1e-6);
        }
        assert!(object_feature(&pyr, &zero, &p).is_err());
    }

    #[test]
    fn stage_mask_matches_imagecore_resample() {
        let m = Mask::from_fn(16, 16, |y, x| ((y * 3 + x * 5) % 4) as f32 / 3.0).unwrap();
        let t = stage_mask(&m.to_tensor(&dev(), DType::F64).unwrap(), 4, 4).unwrap();
        let r = crate::imagecore::resample_mask(&m, 4, 4).unwrap();
        let got: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
        for (g, w) in got.iter().zip(r.data()) {
            assert!((g - *w as f64).abs() < 1e-6);
        }
    }
}
