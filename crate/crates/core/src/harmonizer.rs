//! Object-aware AdaIN harmonization network.
//!
//! The composite goes through the frozen encoder. At every stage the
//! foreground statistics are replaced (AdaIN) by a target style: the
//! background style (`Bg`), caller-supplied statistics (`External`), or a
//! style hallucinated by the stage's mapping module from the background style
//! and the projected object feature (`Ours`). Re-normalised stages 1-3 feed the
//! decoder through skip fusions, stage 4 feeds its bottleneck, and the decoder
//! output is blended back into the composite inside the foreground only.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Conv2d, Linear, Module};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::{
    background_style, masked_stats, object_feature, stage_mask, ConvSpec, Encoder, FeaturePyramid,
    ProjectionModule, StyleVector, WidthProfile, NUM_STAGES,
};
use crate::error::{Error, Result};
use crate::imagecore::{Image, Mask};
use crate::nn::{sigmoid, softplus, Init, ParamStore};

/// Offset keeping hallucinated standard deviations strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-5;
/// Guard on the AdaIN denominator.
pub const ADAIN_EPS: f64 = 1e-5;
pub const RESMLP_BLOCKS: usize = 3;

const CHECKPOINT_KIND: &str = "artopih-harmonizer";
const LAYER_SCALE_INIT: f64 = 0.1;

/// Target style used when re-normalising the composite foreground.
#[derive(Debug, Clone)]
pub enum StyleMode {
    /// Hallucinated by the mapping modules.
    Ours,
    /// Background style of the composite itself.
    Bg,
    /// One caller-supplied style per stage (e.g. a reference object's).
    External(Vec<StyleVector>),
}

impl StyleMode {
    pub fn name(&self) -> &'static str {
        match self {
            StyleMode::Ours => "ours",
            StyleMode::Bg => "bg",
            StyleMode::External(_) => "external",
        }
    }
}

/// How a mapping module turns its inputs into a style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    /// ResMLP mapping.
    #[default]
    Learned,
    /// Returns the background style unchanged (vanilla AdaIN).
    Passthrough,
}

impl fmt::Display for MappingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingKind::Learned => "learned",
            MappingKind::Passthrough => "passthrough",
        })
    }
}

impl FromStr for MappingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(MappingKind::Learned),
            "passthrough" => Ok(MappingKind::Passthrough),
            other => Err(Error::invalid("mapping", format!("unknown mapping kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarmonizerConfig {
    pub profile: WidthProfile,
    pub mapping: MappingKind,
    /// When false the object slot of every mapping input is zero.
    pub use_object_feature: bool,
}

impl Default for HarmonizerConfig {
    fn default() -> Self {
        Self {
            profile: WidthProfile::Tiny,
            mapping: MappingKind::Learned,
            use_object_feature: true,
        }
    }
}

/// ResMLP layer on a single token: affine pre-norm, two-layer GELU MLP,
/// per-channel layer scale and a residual connection.
struct ResMlpBlock {
    alpha: Tensor,
    beta: Tensor,
    fc1: Linear,
    fc2: Linear,
    scale: Tensor,
}

impl ResMlpBlock {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            alpha: store.tensor(&format!("{prefix}.aff.alpha"), &[dim], Init::Ones)?,
            beta: store.tensor(&format!("{prefix}.aff.beta"), &[dim], Init::Zeros)?,
            fc1: store.linear(&format!("{prefix}.fc1"), dim, hidden)?,
            fc2: store.linear(&format!("{prefix}.fc2"), hidden, dim)?,
            scale: store.tensor(&format!("{prefix}.scale"), &[dim], Init::Const(LAYER_SCALE_INIT))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.broadcast_mul(&self.alpha)?.broadcast_add(&self.beta)?;
        let h = self.fc2.forward(&self.fc1.forward(&h)?.gelu_erf()?)?;
        Ok((x + h.broadcast_mul(&self.scale)?)?)
    }
}

/// Multiply-accumulates of a learned mapping over `channels` with an
/// `object_dim` object feature, for a single item.
pub fn learned_mapping_macs(channels: usize, object_dim: usize) -> u64 {
    let d = 2 * channels;
    ((d + object_dim) * d + RESMLP_BLOCKS * 2 * d * d + d * d) as u64
}

/// Maps `[background style, object feature]` to an object style for one stage.
pub struct MappingModule {
    kind: MappingKind,
    channels: usize,
    object_dim: usize,
    input: Option<Linear>,
    blocks: Vec<ResMlpBlock>,
    head: Option<Linear>,
    prefix: String,
}

impl MappingModule {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        object_dim: usize,
        kind: MappingKind,
    ) -> Result<Self> {
        let dim = 2 * channels;
        let (input, blocks, head) = match kind {
            MappingKind::Learned => {
                let input = store.linear(&format!("{prefix}.input"), dim + object_dim, dim)?;
                let blocks = (0..RESMLP_BLOCKS)
                    .map(|i| ResMlpBlock::new(store, &format!("{prefix}.block{i}"), dim, dim))
                    .collect::<Result<Vec<_>>>()?;
                let head = store.linear(&format!("{prefix}.head"), dim, dim)?;
                (Some(input), blocks, Some(head))
            }
            MappingKind::Passthrough => (None, Vec::new(), None),
        };
        Ok(Self {
            kind,
            channels,
            object_dim,
            input,
            blocks,
            head,
            prefix: prefix.to_string(),
        })
    }

    pub fn kind(&self) -> MappingKind {
        self.kind
    }

    /// Multiply-accumulates of one forward pass for a single item.
    pub fn macs(&self) -> u64 {
        if self.kind == MappingKind::Passthrough {
            return 0;
        }
        learned_mapping_macs(self.channels, self.object_dim)
    }

    /// Zeroes the output head, making every prediction `mu = 0`,
    /// `sigma = softplus(0) + SIGMA_FLOOR`.
    pub fn zero_head(&self, store: &ParamStore) -> Result<()> {
        if self.head.is_none() {
            return Ok(());
        }
        for part in ["weight", "bias"] {
            let name = format!("{}.head.{part}", self.prefix);
            let cur = store.get(&name).ok_or_else(|| Error::invalid("parameter", name.clone()))?;
            store.set(&name, &cur.zeros_like()?)?;
        }
        Ok(())
    }

    pub fn forward(&self, s_bg: &StyleVector, f_obj: &Tensor) -> Result<StyleVector> {
        if s_bg.channels() != self.channels {
            return Err(Error::Shape(format!(
                "mapping for {} channels got a {}-channel style",
                self.channels,
                s_bg.channels()
            )));
        }
        let (fb, fd) = f_obj.dims2()?;
        if fd != self.object_dim || fb != s_bg.batch() {
            return Err(Error::Shape(format!(
                "object feature {:?} does not fit batch {} x {}",
                f_obj.dims(),
                s_bg.batch(),
                self.object_dim
            )));
        }
        let (input, head) = match (&self.input, &self.head) {
            (Some(i), Some(h)) => (i, h),
            _ => return Ok(s_bg.clone()),
        };
        let x = Tensor::cat(&[&s_bg.concat()?, f_obj], 1)?;
        let mut h = input.forward(&x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let raw = head.forward(&h)?;
        let c = self.channels;
        let mu = raw.narrow(1, 0, c)?;
        let sigma = (softplus(&raw.narrow(1, c, c)?)? + SIGMA_FLOOR)?;
        StyleVector::new(mu, sigma)
    }
}

/// Re-normalises the masked region of `feat` to `target` statistics.
///
/// `out = target.sigma * (F - mu_in) / (sigma_in + ADAIN_EPS) + target.mu`
/// wherever `mask > 0`; other positions pass through unchanged. Input
/// statistics are mask-weighted.
pub fn adain_apply(feat: &Tensor, mask: &Tensor, target: &StyleVector) -> Result<Tensor> {
    let (b, c, _, _) = feat.dims4()?;
    if target.channels() != c || (target.batch() != b && target.batch() != 1) {
        return Err(Error::Shape(format!(
            "target style {:?} does not fit feature map {:?}",
            target.mu.dims(),
            feat.dims()
        )));
    }
    let stats = masked_stats(feat, mask)?;
    let expand = |t: &Tensor| t.unsqueeze(2).and_then(|t| t.unsqueeze(3));
    let normed = feat
        .broadcast_sub(&expand(&stats.mu)?)?
        .broadcast_div(&(expand(&stats.sigma)? + ADAIN_EPS)?)?;
    let adjusted = normed
        .broadcast_mul(&expand(&target.sigma)?)?
        .broadcast_add(&expand(&target.mu)?)?;
    let inside = mask.gt(0.0)?.to_dtype(feat.dtype())?;
    let outside = inside.affine(-1.0, 1.0)?;
    Ok((adjusted.broadcast_mul(&inside)? + feat.broadcast_mul(&outside)?)?)
}

/// `fg * (B * I_h + (1 - B) * I_c) + (1 - fg) * I_c`.
pub fn blend(i_h: &Tensor, i_c: &Tensor, blend_mask: &Tensor, fg_mask: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = i_c.dims4()?;
    if i_h.dims() != i_c.dims() {
        return Err(Error::Shape(format!(
            "blend inputs differ: {:?} vs {:?}",
            i_h.dims(),
            i_c.dims()
        )));
    }
    for (name, m) in [("blend mask", blend_mask), ("foreground mask", fg_mask)] {
        let (mb, mc, mh, mw) = m.dims4()?;
        if mc != 1 || (mh, mw) != (h, w) || (mb != b && mb != 1) {
            return Err(Error::Shape(format!("{name} {:?} does not fit {:?}", m.dims(), (b, c, h, w))));
        }
    }
    let inner = (i_h.broadcast_mul(blend_mask)? + i_c.broadcast_mul(&blend_mask.affine(-1.0, 1.0)?)?)?;
    Ok((inner.broadcast_mul(fg_mask)? + i_c.broadcast_mul(&fg_mask.affine(-1.0, 1.0)?)?)?)
}

/// Mirror of the encoder with nearest-neighbour upsampling and
/// concat + 1x1 fusions of the stage 1-3 skips.
struct Decoder {
    // Level 3 -> 2.
    bottleneck: Conv2d,
    fuse3: Conv2d,
    body3: Vec<Conv2d>,
    fuse2: Conv2d,
    body2: Vec<Conv2d>,
    fuse1: Conv2d,
    body1: Conv2d,
    out: Conv2d,
}

/// Decoder convolutions in execution order. The final layer emits three image
/// channels plus one blend logit.
pub fn decoder_specs(profile: WidthProfile) -> Vec<ConvSpec> {
    let [c1, c2, c3, c4] = profile.widths();
    let spec = |name: &str, cin, cout, k, level| ConvSpec {
        name: name.to_string(),
        cin,
        cout,
        kernel: k,
        level,
    };
    vec![
        spec("dec.bottleneck", c4, c3, 3, 3),
        spec("dec.fuse3", 2 * c3, c3, 1, 2),
        spec("dec.conv3_1", c3, c3, 3, 2),
        spec("dec.conv3_2", c3, c3, 3, 2),
        spec("dec.conv3_3", c3, c3, 3, 2),
        spec("dec.conv3_4", c3, c2, 3, 2),
        spec("dec.fuse2", 2 * c2, c2, 1, 1),
        spec("dec.conv2_1", c2, c2, 3, 1),
        spec("dec.conv2_2", c2, c1, 3, 1),
        spec("dec.fuse1", 2 * c1, c1, 1, 0),
        spec("dec.conv1_1", c1, c1, 3, 0),
        spec("dec.out", c1, 4, 3, 0),
    ]
}

impl Decoder {
    fn new(store: &mut ParamStore, profile: WidthProfile) -> Result<Self> {
        let mut convs = decoder_specs(profile)
            .into_iter()
            .map(|s| store.conv2d(&s.name, s.cin, s.cout, s.kernel))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut next = || convs.next().expect("decoder spec length");
        Ok(Self {
            bottleneck: next(),
            fuse3: next(),
            body3: vec![next(), next(), next(), next()],
            fuse2: next(),
            body2: vec![next(), next()],
            fuse1: next(),
            body1: next(),
            out: next(),
        })
    }

    fn up(x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
    }

    fn fuse(conv: &Conv2d, stream: &Tensor, skip: &Tensor) -> Result<Tensor> {
        Ok(conv.forward(&Tensor::cat(&[stream, skip], 1)?)?.relu()?)
    }

    /// Returns `(B, 4, H, W)` logits.
    fn forward(&self, f: &[Tensor; NUM_STAGES]) -> Result<Tensor> {
        let mut x = Self::up(&self.bottleneck.forward(&f[3])?.relu()?)?;
        x = Self::fuse(&self.fuse3, &x, &f[2])?;
        for conv in &self.body3 {
            x = conv.forward(&x)?.relu()?;
        }
        x = Self::fuse(&self.fuse2, &Self::up(&x)?, &f[1])?;
        for conv in &self.body2 {
            x = conv.forward(&x)?.relu()?;
        }
        x = Self::fuse(&self.fuse1, &Self::up(&x)?, &f[0])?;
        x = self.body1.forward(&x)?.relu()?;
        Ok(self.out.forward(&x)?)
    }
}

/// Everything a forward pass produces besides the final image.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final image after the foreground-restricted blend, `(B, 3, H, W)`.
    pub harmonized: Tensor,
    /// Decoder image before blending.
    pub decoded: Tensor,
    /// Predicted soft blend mask, `(B, 1, H, W)`.
    pub blend_mask: Tensor,
    pub pyramid: FeaturePyramid,
    /// Per-stage foreground masks at stage resolution.
    pub stage_masks: Vec<Tensor>,
    pub background_styles: Vec<StyleVector>,
    pub object_feature: Tensor,
    /// Mapping outputs (present in `Ours` mode).
    pub hallucinated: Option<Vec<StyleVector>>,
    /// Styles actually applied per stage.
    pub targets: Vec<StyleVector>,
    /// Re-normalised stage features handed to the decoder.
    pub adjusted: [Tensor; NUM_STAGES],
}

pub struct HarmonizerModel {
    config: HarmonizerConfig,
    encoder: Arc<Encoder>,
    store: ParamStore,
    projection: ProjectionModule,
    mappings: Vec<MappingModule>,
    decoder: Decoder,
}

impl HarmonizerModel {
    pub fn new(encoder: Arc<Encoder>, config: HarmonizerConfig, seed: u64) -> Result<Self> {
        let store = ParamStore::seeded(seed, true, encoder.device(), encoder.dtype());
        Self::build(encoder, config, store)
    }

    fn build(encoder: Arc<Encoder>, config: HarmonizerConfig, mut store: ParamStore) -> Result<Self> {
        if encoder.profile() != config.profile {
            return Err(Error::invalid(
                "profile",
                format!(
                    "encoder is {} but the model was configured for {}",
                    encoder.profile(),
                    config.profile
                ),
            ));
        }
        let widths = config.profile.widths();
        let d = config.profile.object_dim();
        let projection = ProjectionModule::new(&mut store, "proj", d)?;
        let mappings = widths
            .iter()
            .enumerate()
            .map(|(l, &c)| MappingModule::new(&mut store, &format!("map{}", l + 1), c, d, config.mapping))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&mut store, config.profile)?;
        store.finish()?;
        Ok(Self {
            config,
            encoder,
            store,
            projection,
            mappings,
            decoder,
        })
    }

    pub fn config(&self) -> HarmonizerConfig {
        self.config
    }

    pub fn encoder(&self) -> &Arc<Encoder> {
        &self.encoder
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn projection(&self) -> &ProjectionModule {
        &self.projection
    }

    pub fn mapping(&self, l: usize) -> &MappingModule {
        &self.mappings[l]
    }

    pub fn device(&self) -> &Device {
        self.encoder.device()
    }

    pub fn dtype(&self) -> DType {
        self.encoder.dtype()
    }

    pub fn trainable_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Multiply-accumulates of the mapping modules for one image.
    pub fn mapping_macs(&self) -> u64 {
        self.mappings.iter().map(MappingModule::macs).sum()
    }

    /// Object feature for `(image, mask)`, honouring the ablation switch.
    pub fn object_feature(&self, pyr: &FeaturePyramid, fg_mask: &Tensor) -> Result<Tensor> {
        let f = object_feature(pyr, fg_mask, &self.projection)?;
        Ok(f)
    }

    fn mapping_input_feature(&self, f_obj: &Tensor) -> Result<Tensor> {
        if self.config.use_object_feature {
            Ok(f_obj.clone())
        } else {
            Ok(f_obj.zeros_like()?)
        }
    }

    /// `M_l(s_bg, f_obj)` for all stages.
    pub fn hallucinate(&self, s_bg: &[StyleVector], f_obj: &Tensor) -> Result<Vec<StyleVector>> {
        if s_bg.len() != NUM_STAGES {
            return Err(Error::Shape(format!("expected {NUM_STAGES} background styles")));
        }
        let f = self.mapping_input_feature(f_obj)?;
        self.mappings
            .iter()
            .zip(s_bg)
            .map(|(m, s)| m.forward(s, &f))
            .collect()
    }

    pub fn background_styles(&self, pyr: &FeaturePyramid, fg_mask: &Tensor) -> Result<Vec<StyleVector>> {
        (0..NUM_STAGES).map(|l| background_style(pyr, fg_mask, l)).collect()
    }

    /// Full pass on a `(B, 3, H, W)` composite and `(B, 1, H, W)` mask.
    pub fn forward(&self, composite: &Tensor, fg_mask: &Tensor, mode: &StyleMode) -> Result<ForwardOutput> {
        if let StyleMode::External(styles) = mode {
            if styles.len() != NUM_STAGES {
                return Err(Error::invalid(
                    "mode",
                    format!("external mode needs {NUM_STAGES} style vectors, got {}", styles.len()),
                ));
            }
        }
        let pyramid = self.encoder.extract(composite)?;
        let stage_masks = pyramid
            .stages
            .iter()
            .map(|t| {
                let (_, _, h, w) = t.dims4()?;
                stage_mask(fg_mask, h, w)
            })
            .collect::<Result<Vec<_>>>()?;
        let background_styles = self.background_styles(&pyramid, fg_mask)?;
        let object_feature = self.object_feature(&pyramid, fg_mask)?;
        let (targets, hallucinated) = match mode {
            StyleMode::Ours => {
                let h = self.hallucinate(&background_styles, &object_feature)?;
                (h.clone(), Some(h))
            }
            StyleMode::Bg => (background_styles.clone(), None),
            StyleMode::External(s) => (s.clone(), None),
        };
        let adjusted: Vec<Tensor> = (0..NUM_STAGES)
            .map(|l| adain_apply(pyramid.stage(l), &stage_masks[l], &targets[l]))
            .collect::<Result<_>>()?;
        let adjusted: [Tensor; NUM_STAGES] = adjusted.try_into().expect("four stages");
        let logits = self.decoder.forward(&adjusted)?;
        let decoded = sigmoid(&logits.narrow(1, 0, 3)?)?;
        let blend_mask = sigmoid(&logits.narrow(1, 3, 1)?)?;
        let harmonized = blend(&decoded, composite, &blend_mask, fg_mask)?;
        Ok(ForwardOutput {
            harmonized,
            decoded,
            blend_mask,
            pyramid,
            stage_masks,
            background_styles,
            object_feature,
            hallucinated,
            targets,
            adjusted,
        })
    }

    /// Convenience wrapper on single images.
    pub fn harmonize(&self, composite: &Image, fg_mask: &Mask, mode: &StyleMode) -> Result<Image> {
        if (composite.height(), composite.width()) != (fg_mask.height(), fg_mask.width()) {
            return Err(Error::Shape("mask does not match composite".into()));
        }
        let x = composite.to_tensor(self.device(), self.dtype())?;
        let m = fg_mask.to_tensor(self.device(), self.dtype())?;
        let out = self.forward(&x, &m, mode)?;
        Image::from_tensor(&out.harmonized)
    }

    /// Stats of `reference`'s object region, usable as `StyleMode::External`.
    pub fn reference_styles(&self, reference: &Image, ref_mask: &Mask) -> Result<Vec<StyleVector>> {
        let pyr = self.encoder.extract_image(reference)?;
        let m = ref_mask.to_tensor(self.device(), self.dtype())?;
        (0..NUM_STAGES)
            .map(|l| crate::encoder::foreground_style(&pyr, &m, l))
            .collect()
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("profile".into(), self.config.profile.to_string());
        meta.insert("mapping".into(), self.config.mapping.to_string());
        meta.insert("use_object_feature".into(), self.config.use_object_feature.to_string());
        if let Ok(sum) = self.encoder.checksum() {
            meta.insert("encoder_checksum".into(), sum);
        }
        meta
    }

    /// Writes trainable tensors plus configuration; returns the checkpoint id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        self.save_with(path, &BTreeMap::new())
    }

    pub fn save_with(&self, path: impl AsRef<Path>, extra: &BTreeMap<String, String>) -> Result<String> {
        let mut meta = self.metadata();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        checkpoint::save(path, CHECKPOINT_KIND, &meta, self.store.named_tensors())
    }

    /// Loads a checkpoint against an already-built encoder. The encoder must
    /// be the one the checkpoint was trained with.
    pub fn load(path: impl AsRef<Path>, encoder: Arc<Encoder>) -> Result<(Self, LoadedInfo)> {
        let ck = checkpoint::load(path, CHECKPOINT_KIND, encoder.device())?;
        Self::from_checkpoint(ck, encoder)
    }

    pub fn from_checkpoint(ck: checkpoint::Checkpoint, encoder: Arc<Encoder>) -> Result<(Self, LoadedInfo)> {
        let info = LoadedInfo::from_metadata(&ck)?;
        if let Some(want) = &info.encoder_checksum {
            if *want != encoder.checksum()? {
                return Err(Error::Checkpoint("encoder weights differ from those used in training".into()));
            }
        }
        let store = ParamStore::from_tensors(ck.tensors, true, encoder.device(), encoder.dtype());
        let model = Self::build(encoder, info.config, store)?;
        Ok((model, info))
    }
}

/// Header fields of a harmonizer checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedInfo {
    pub id: String,
    pub config: HarmonizerConfig,
    pub encoder_checksum: Option<String>,
    pub metadata: BTreeMap<String, String>,
}

impl LoadedInfo {
    fn from_metadata(ck: &checkpoint::Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {k}")))
        };
        let config = HarmonizerConfig {
            profile: get("profile")?.parse()?,
            mapping: get("mapping")?.parse()?,
            use_object_feature: get("use_object_feature")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad use_object_feature flag".into()))?,
        };
        Ok(Self {
            id: ck.id.clone(),
            config,
            encoder_checksum: ck.metadata.get("encoder_checksum").cloned(),
            metadata: ck.metadata.clone(),
        })
    }
}

/// Reads only the header of a harmonizer checkpoint.
pub fn peek_checkpoint(path: impl AsRef<Path>) -> Result<LoadedInfo> {
    let ck = checkpoint::load(path, CHECKPOINT_KIND, &Device::Cpu)?;
    LoadedInfo::from_metadata(&ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;

    fn dev() -> Device {
        Device::Cpu
    }

    fn tiny(dtype: DType, mapping: MappingKind) -> HarmonizerModel {
        let enc = Arc::new(Encoder::random(WidthProfile::Tiny, 1, &dev(), dtype).unwrap());
        HarmonizerModel::new(
            enc,
            HarmonizerConfig {
                profile: WidthProfile::Tiny,
                mapping,
                use_object_feature: true,
            },
            2,
        )
        .unwrap()
    }

    fn sample_inputs(dtype: DType) -> (Tensor, Tensor) {
        let img = Image::from_fn(32, 32, |c, y, x| ((c * 7 + y * 3 + x * 5) % 29) as f32 / 28.0).unwrap();
        let m = Mask::from_fn(32, 32, |y, x| ((8..24).contains(&y) && (6..20).contains(&x)) as u8 as f32).unwrap();
        (img.to_tensor(&dev(), dtype).unwrap(), m.to_tensor(&dev(), dtype).unwrap())
    }

    #[test]
    fn zero_head_gives_softplus_zero() {
        let model = tiny(DType::F64, MappingKind::Learned);
        let map = model.mapping(1);
        map.zero_head(model.store()).unwrap();
        let s = StyleVector::new(
            Tensor::ones((2, 16), DType::F64, &dev()).unwrap(),
            Tensor::ones((2, 16), DType::F64, &dev()).unwrap(),
        )
        .unwrap();
        let f = Tensor::ones((2, 64), DType::F64, &dev()).unwrap();
        let out = map.forward(&s, &f).unwrap();
        let (mu, sigma) = out.to_vecs().unwrap();
        let want = 2f64.ln() + SIGMA_FLOOR;
        assert!(mu.iter().flatten().all(|&v| v == 0.0));
        assert!(sigma.iter().flatten().all(|&v| (v - want).abs() < 1e-12));
        assert!((want - 0.69316).abs() < 1e-5);
    }

    #[test]
    fn mapping_rejects_dim_mismatch() {
        let model = tiny(DType::F32, MappingKind::Learned);
        let s = StyleVector::new(
            Tensor::ones((1, 8), DType::F32, &dev()).unwrap(),
            Tensor::ones((1, 8), DType::F32, &dev()).unwrap(),
        )
        .unwrap();
        let f = Tensor::ones((1, 64), DType::F32, &dev()).unwrap();
        assert!(model.mapping(1).forward(&s, &f).is_err());
        let s16 = StyleVector::new(
            Tensor::ones((1, 16), DType::F32, &dev()).unwrap(),
            Tensor::ones((1, 16), DType::F32, &dev()).unwrap(),
        )
        .unwrap();
        let f_bad = Tensor::ones((1, 32), DType::F32, &dev()).unwrap();
        assert!(model.mapping(1).forward(&s16, &f_bad).is_err());
    }

    #[test]
    fn adain_hand_example() {
        // Values [0,1,2,3], full mask, target mu=10 sigma=2.
        let f = Tensor::new(&[0.0f64, 1.0, 2.0, 3.0], &dev()).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let m = Tensor::ones((1, 1, 2, 2), DType::F64, &dev()).unwrap();
        let t = StyleVector::new(
            Tensor::new(&[[10.0f64]], &dev()).unwrap(),
            Tensor::new(&[[2.0f64]], &dev()).unwrap(),
        )
        .unwrap();
        let out: Vec<f64> = adain_apply(&f, &m, &t).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // mean 1.5, biased variance 1.25.
        let sd = (1.25f64 + 1e-8).sqrt() + ADAIN_EPS;
        for (i, o) in out.iter().enumerate() {
            let z = (i as f64 - 1.5) / sd;
            assert!((o - (10.0 + 2.0 * z)).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_leaves_background_alone_and_rejects_empty() {
        let f = Tensor::new(&[5.0f64, 1.0, 2.0, 9.0], &dev()).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let m = Tensor::new(&[1.0f64, 0.0, 0.3, 0.0], &dev()).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let t = StyleVector::new(
            Tensor::new(&[[0.0f64]], &dev()).unwrap(),
            Tensor::new(&[[1.0f64]], &dev()).unwrap(),
        )
        .unwrap();
        let out: Vec<f64> = adain_apply(&f, &m, &t).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(out[1], 1.0);
        assert_eq!(out[3], 9.0);
        let z = Tensor::zeros((1, 1, 2, 2), DType::F64, &dev()).unwrap();
        assert!(adain_apply(&f, &z, &t).is_err());
    }

    #[test]
    fn blend_examples() {
        let ih = Tensor::full(0.8f64, (1, 3, 2, 2), &dev()).unwrap();
        let ic = Tensor::full(0.2f64, (1, 3, 2, 2), &dev()).unwrap();
        let fg = Tensor::new(&[1.0f64, 0.0, 1.0, 0.0], &dev()).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let b1 = Tensor::ones((1, 1, 2, 2), DType::F64, &dev()).unwrap();
        let out: Vec<f64> = blend(&ih, &ic, &b1, &fg).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(&out[..4], &[0.8, 0.2, 0.8, 0.2]);
        let b0 = b1.zeros_like().unwrap();
        let out: Vec<f64> = blend(&ih, &ic, &b0, &fg).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(out.iter().all(|&v| v == 0.2));
        let bh = (b1 * 0.5).unwrap();
        let out: Vec<f64> = blend(&ih, &ic, &bh, &fg).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12);
        let small = Tensor::ones((1, 1, 1, 1), DType::F64, &dev()).unwrap();
        assert!(blend(&ih, &ic, &small, &fg).is_err());
    }

    #[test]
    fn forward_modes_plumb_through() {
        let model = tiny(DType::F32, MappingKind::Learned);
        let (x, m) = sample_inputs(DType::F32);

        let bg = model.forward(&x, &m, &StyleMode::Bg).unwrap();
        for (l, t) in bg.targets.iter().enumerate() {
            let want = background_style(&bg.pyramid, &m, l).unwrap();
            assert_eq!(t.to_vecs().unwrap(), want.to_vecs().unwrap());
        }
        assert!(bg.hallucinated.is_none());

        let ours = model.forward(&x, &m, &StyleMode::Ours).unwrap();
        let pyr = model.encoder().extract(&x).unwrap();
        let f = object_feature(&pyr, &m, model.projection()).unwrap();
        for l in 0..NUM_STAGES {
            let s_bg = background_style(&pyr, &m, l).unwrap();
            let want = model.mapping(l).forward(&s_bg, &f).unwrap();
            assert_eq!(ours.targets[l].to_vecs().unwrap(), want.to_vecs().unwrap());
        }

        assert!(model.forward(&x, &m, &StyleMode::External(vec![])).is_err());
    }

    #[test]
    fn external_self_stats_is_identity_on_features() {
        let model = tiny(DType::F64, MappingKind::Learned);
        let (x, m) = sample_inputs(DType::F64);
        let pyr = model.encoder().extract(&x).unwrap();
        let own: Vec<_> = (0..NUM_STAGES)
            .map(|l| crate::encoder::foreground_style(&pyr, &m, l).unwrap())
            .collect();
        let out = model.forward(&x, &m, &StyleMode::External(own)).unwrap();
        for l in 0..NUM_STAGES {
            let d = (&out.adjusted[l] - pyr.stage(l)).unwrap().abs().unwrap().max_all().unwrap();
            assert!(scalar(&d).unwrap() < 1e-4, "stage {l}");
        }
    }

    #[test]
    fn passthrough_makes_ours_equal_bg() {
        let model = tiny(DType::F32, MappingKind::Passthrough);
        let (x, m) = sample_inputs(DType::F32);
        let a: Vec<f32> = model.forward(&x, &m, &StyleMode::Ours).unwrap().harmonized.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = model.forward(&x, &m, &StyleMode::Bg).unwrap().harmonized.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.safetensors");
        let model = tiny(DType::F32, MappingKind::Learned);
        let id = model.save(&p).unwrap();
        let (back, info) = HarmonizerModel::load(&p, model.encoder().clone()).unwrap();
        assert_eq!(info.id, id);
        assert_eq!(info.config.profile, WidthProfile::Tiny);
        let (x, m) = sample_inputs(DType::F32);
        let a: Vec<f32> = model.forward(&x, &m, &StyleMode::Ours).unwrap().harmonized.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = back.forward(&x, &m, &StyleMode::Ours).unwrap().harmonized.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);

        let other = Arc::new(Encoder::random(WidthProfile::Tiny, 99, &dev(), DType::F32).unwrap());
        assert!(HarmonizerModel::load(&p, other).is_err());
    }
}
