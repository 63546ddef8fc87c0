//! Object retrieval: a projection trained so painterly and photographic
//! object features share one space (domain-adversarial plus a shared
//! classifier), and an exact nearest-neighbour index over the embeddings.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{AdamW, Linear, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{masked_mean, stage_mask, Encoder, ProjectionModule, NUM_STAGES};
use crate::error::{Error, Result};
use crate::imagecore::{Image, Manifest, Mask};
use crate::nn::{scalar, softplus, ParamStore};

/// Number of candidates retrieved per query unless told otherwise.
pub const DEFAULT_TOP_K: usize = 100;

/// Side length objects are cropped and resized to before embedding.
pub const OBJECT_CANVAS: usize = 32;

const DISC_PREFIX: &str = "disc.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Photographic,
    Painterly,
}

/// Retrieval network on stage-4 feature maps. The encoder is optional so the
/// heads can be trained on precomputed or synthetic maps.
pub struct RetrievalModel {
    encoder: Option<Arc<Encoder>>,
    store: ParamStore,
    projection: ProjectionModule,
    disc_hidden: Linear,
    disc_out: Linear,
    classifier: Linear,
    dim: usize,
    num_categories: usize,
}

impl RetrievalModel {
    pub fn new(dim: usize, num_categories: usize, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        if num_categories == 0 {
            return Err(Error::invalid("num_categories", "need at least one category"));
        }
        let mut store = ParamStore::seeded(seed, true, device, dtype);
        let projection = ProjectionModule::new(&mut store, "proj_ret", dim)?;
        let disc_hidden = store.linear("disc.fc1", dim, dim)?;
        let disc_out = store.linear("disc.fc2", dim, 1)?;
        let classifier = store.linear("cls", dim, num_categories)?;
        store.finish()?;
        Ok(Self {
            encoder: None,
            store,
            projection,
            disc_hidden,
            disc_out,
            classifier,
            dim,
            num_categories,
        })
    }

    pub fn with_encoder(encoder: Arc<Encoder>, num_categories: usize, seed: u64) -> Result<Self> {
        let dim = encoder.widths()[NUM_STAGES - 1];
        let mut m = Self::new(dim, num_categories, seed, encoder.device(), encoder.dtype())?;
        m.encoder = Some(encoder);
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn projection(&self) -> &ProjectionModule {
        &self.projection
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Masked average of `P_ret(maps)`; `maps` is `(B, dim, h, w)` and
    /// `masks` is `(B, 1, H, W)` with `H, W` integer multiples of `h, w`.
    pub fn features(&self, maps: &Tensor, masks: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = maps.dims4()?;
        if c != self.dim {
            return Err(Error::Shape(format!("expected {} channels, got {c}", self.dim)));
        }
        masked_mean(&self.projection.forward(maps)?, &stage_mask(masks, h, w)?)
    }

    /// Real/fake logit per row, `(B,)`. Positive means photographic.
    pub fn discriminate(&self, feats: &Tensor) -> Result<Tensor> {
        let h = candle_nn::ops::leaky_relu(&self.disc_hidden.forward(feats)?, 0.2)?;
        Ok(self.disc_out.forward(&h)?.squeeze(D::Minus1)?)
    }

    pub fn classify(&self, feats: &Tensor) -> Result<Tensor> {
        Ok(self.classifier.forward(feats)?)
    }

    fn encoder(&self) -> Result<&Encoder> {
        self.encoder
            .as_deref()
            .ok_or_else(|| Error::invalid("encoder", "retrieval model was built without an encoder"))
    }

    /// Stage-4 map and mask of an object at canvas resolution.
    pub fn object_maps(&self, image: &Image, mask: &Mask) -> Result<(Tensor, Tensor)> {
        let (img, m) = prepare_object(image, mask)?;
        let enc = self.encoder()?;
        let pyr = enc.extract_image(&img)?;
        Ok((
            pyr.stage(NUM_STAGES - 1).clone(),
            m.to_tensor(enc.device(), enc.dtype())?,
        ))
    }

    /// Embedding of the masked object in `image`.
    pub fn embed(&self, image: &Image, mask: &Mask) -> Result<Vec<f32>> {
        let (maps, m) = self.object_maps(image, mask)?;
        let f = self.features(&maps, &m)?;
        Ok(f.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("dim".into(), self.dim.to_string());
        meta.insert("num_categories".into(), self.num_categories.to_string());
        let tensors = self
            .store
            .named_vars()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        crate::checkpoint::save(path, CHECKPOINT_KIND, &meta, &tensors)
    }

    pub fn load(path: impl AsRef<Path>, encoder: Arc<Encoder>) -> Result<Self> {
        let ck = crate::checkpoint::load(path, CHECKPOINT_KIND, encoder.device())?;
        let num_categories: usize = ck
            .metadata
            .get("num_categories")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing num_categories".into()))?;
        let m = Self::with_encoder(encoder, num_categories, 0)?;
        for (name, t) in &ck.tensors {
            m.store.set(name, &t.to_dtype(m.dtype())?)?;
        }
        if ck.tensors.len() != m.store.named_vars().len() {
            return Err(Error::Checkpoint("retrieval checkpoint is missing tensors".into()));
        }
        Ok(m)
    }
}

pub const CHECKPOINT_KIND: &str = "artopih-retrieval";

/// Crops to the mask's bounding box and resizes to the embedding canvas.
pub fn prepare_object(image: &Image, mask: &Mask) -> Result<(Image, Mask)> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape("object mask does not match image".into()));
    }
    let b = mask.bbox().ok_or(Error::EmptyRegion("empty object mask"))?;
    Ok((
        image.crop(b)?.resize(OBJECT_CANVAS, OBJECT_CANVAS)?,
        mask.crop(b)?.resize(OBJECT_CANVAS, OBJECT_CANVAS)?,
    ))
}

/// Generator-side loss `mean softplus(-D(painterly))`: painterly features
/// should look photographic. Equals `ln 2` when the discriminator outputs 0.5.
pub fn adversarial_loss(painterly_logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(&painterly_logits.neg()?)?.mean_all()?)
}

/// `mean softplus(-D(photo)) + mean softplus(D(painterly))`; `ln 4` at 0.5.
pub fn discriminator_loss(photo_logits: &Tensor, painterly_logits: &Tensor) -> Result<Tensor> {
    let real = softplus(&photo_logits.neg()?)?.mean_all()?;
    let fake = softplus(painterly_logits)?.mean_all()?;
    Ok((real + fake)?)
}

/// Mean cross-entropy of `(B, K)` logits against labels.
pub fn classification_loss(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} logits for {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid("category_label", format!("{bad} >= {k}")));
    }
    let target = Tensor::from_slice(labels, b, logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &target)?)
}

#[derive(Debug, Clone)]
pub struct RetrievalLosses {
    pub adv: Tensor,
    pub cls: Tensor,
    pub total: Tensor,
}

/// Stage-4 maps with masks and labels for one domain.
#[derive(Debug, Clone)]
pub struct DomainSet {
    pub maps: Tensor,
    pub masks: Tensor,
    pub labels: Vec<u32>,
}

impl DomainSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<DomainSet> {
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let t = Tensor::from_slice(&ids, ids.len(), self.maps.device())?;
        Ok(DomainSet {
            maps: self.maps.index_select(&t, 0)?,
            masks: self.masks.index_select(&t, 0)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Generator-side objective on one batch from each domain.
pub fn retrieval_losses(model: &RetrievalModel, photo: &DomainSet, painterly: &DomainSet) -> Result<RetrievalLosses> {
    if photo.is_empty() || painterly.is_empty() {
        return Err(Error::invalid(
            "batch",
            "the adversarial term needs objects from both domains",
        ));
    }
    let fp = model.features(&photo.maps, &photo.masks)?;
    let fa = model.features(&painterly.maps, &painterly.masks)?;
    let adv = adversarial_loss(&model.discriminate(&fa)?)?;
    let logits = model.classify(&Tensor::cat(&[&fp, &fa], 0)?)?;
    let labels: Vec<u32> = photo.labels.iter().chain(&painterly.labels).copied().collect();
    let cls = classification_loss(&logits, &labels)?;
    let total = (&adv + &cls)?;
    Ok(RetrievalLosses { adv, cls, total })
}

/// Both domains for retrieval training.
#[derive(Debug, Clone)]
pub struct TwoDomainData {
    pub photo: DomainSet,
    pub painterly: DomainSet,
    pub num_categories: usize,
}

/// Shifted-Gaussian stand-in for stage-4 object maps.
///
/// The first `dim - nuisance` channels carry a per-category mean shared by
/// both domains. The last `nuisance` channels hold domain-specific values:
/// zero-centred for photographs, shifted by a fixed offset for paintings.
/// Values pass through a ReLU like real encoder features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainConfig {
    pub dim: usize,
    pub nuisance: usize,
    pub num_categories: usize,
    pub per_category: usize,
    pub spatial: usize,
    pub noise: f64,
    pub shift: f64,
    pub seed: u64,
}

impl Default for SyntheticDomainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            nuisance: 16,
            num_categories: 4,
            per_category: 64,
            spatial: 2,
            noise: 0.5,
            shift: 2.0,
            seed: 0,
        }
    }
}

impl TwoDomainData {
    pub fn synthetic(cfg: &SyntheticDomainConfig, device: &Device, dtype: DType) -> Result<Self> {
        if cfg.nuisance >= cfg.dim || cfg.num_categories == 0 || cfg.per_category == 0 || cfg.spatial == 0 {
            return Err(Error::invalid("synthetic", "degenerate synthetic domain configuration"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let signal = cfg.dim - cfg.nuisance;
        let means: Vec<Vec<f64>> = (0..cfg.num_categories)
            .map(|_| (0..signal).map(|_| 1.0 + unit.sample(&mut rng)).collect())
            .collect();
        let offsets: Vec<f64> = (0..cfg.nuisance)
            .map(|_| cfg.shift * (0.5 + rng.random::<f64>()))
            .collect();
        let hw = cfg.spatial * cfg.spatial;
        let mut make = |painterly: bool| -> Result<DomainSet> {
            let n = cfg.num_categories * cfg.per_category;
            let mut data = Vec::with_capacity(n * cfg.dim * hw);
            let mut labels = Vec::with_capacity(n);
            for k in 0..cfg.num_categories {
                for _ in 0..cfg.per_category {
                    for c in 0..cfg.dim {
                        let centre = if c < signal {
                            means[k][c]
                        } else if painterly {
                            1.0 + offsets[c - signal]
                        } else {
                            1.0
                        };
                        for _ in 0..hw {
                            let v: f64 = centre + cfg.noise * unit.sample(&mut rng);
                            data.push(v.max(0.0));
                        }
                    }
                    labels.push(k as u32);
                }
            }
            let maps = Tensor::from_vec(data, (n, cfg.dim, cfg.spatial, cfg.spatial), device)?.to_dtype(dtype)?;
            let masks = Tensor::ones((n, 1, cfg.spatial, cfg.spatial), dtype, device)?;
            Ok(DomainSet { maps, masks, labels })
        };
        let photo = make(false)?;
        let painterly = make(true)?;
        Ok(Self {
            photo,
            painterly,
            num_categories: cfg.num_categories,
        })
    }

    /// Splits every domain into (train, held-out): each `every`-th object goes
    /// to the held-out part.
    pub fn holdout(&self, every: usize) -> Result<(Self, Self)> {
        if every < 2 {
            return Err(Error::invalid("every", "hold-out stride must be at least 2"));
        }
        let split = |set: &DomainSet| -> Result<(DomainSet, DomainSet)> {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|i| i % every == every - 1);
            Ok((set.select(&train)?, set.select(&test)?))
        };
        let (p_train, p_test) = split(&self.photo)?;
        let (a_train, a_test) = split(&self.painterly)?;
        let k = self.num_categories;
        Ok((
            Self {
                photo: p_train,
                painterly: a_train,
                num_categories: k,
            },
            Self {
                photo: p_test,
                painterly: a_test,
                num_categories: k,
            },
        ))
    }

    /// Painterly objects (unique reference objects) and photographic objects
    /// from a manifest, encoded at canvas resolution.
    pub fn from_manifest(model: &RetrievalModel, manifest: &Manifest) -> Result<Self> {
        let objs = ManifestObjects::collect(manifest);
        let load = |items: &[ObjectRef]| -> Result<DomainSet> {
            let mut maps = Vec::new();
            let mut masks = Vec::new();
            let mut labels = Vec::new();
            for o in items {
                let (img, mask) = o.load(manifest)?;
                let (m, k) = model.object_maps(&img, &mask)?;
                maps.push(m);
                masks.push(k);
                labels.push(o.category);
            }
            if maps.is_empty() {
                return Err(Error::invalid("manifest", "no objects"));
            }
            Ok(DomainSet {
                maps: Tensor::cat(&maps, 0)?,
                masks: Tensor::cat(&masks, 0)?,
                labels,
            })
        };
        Ok(Self {
            photo: load(&objs.photographic)?,
            painterly: load(&objs.painterly)?,
            num_categories: model.num_categories(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub seed: u64,
}

impl Default for RetrievalTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 5e-4,
            beta1: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStepLog {
    pub step: usize,
    pub adv: f64,
    pub cls: f64,
    pub total: f64,
    pub disc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEval {
    pub photo_accuracy: f64,
    pub painterly_accuracy: f64,
    pub discriminator_accuracy: f64,
}

fn sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

/// Alternating 1:1 updates: discriminator on detached features, then the
/// projection and classifier on `adv + cls`.
pub fn train_retrieval(
    model: &RetrievalModel,
    data: &TwoDomainData,
    cfg: &RetrievalTrainConfig,
    mut on_step: impl FnMut(&RetrievalStepLog),
) -> Result<Vec<RetrievalStepLog>> {
    if data.photo.is_empty() || data.painterly.is_empty() {
        return Err(Error::invalid("data", "both domains need objects"));
    }
    let params = ParamsAdamW {
        lr: cfg.lr,
        beta1: cfg.beta1,
        weight_decay: 0.0,
        ..Default::default()
    };
    let (disc_vars, gen_vars): (Vec<_>, Vec<_>) = model
        .store
        .named_vars()
        .iter()
        .partition(|(k, _)| k.starts_with(DISC_PREFIX));
    let mut disc_opt = AdamW::new(disc_vars.into_iter().map(|(_, v)| v.clone()).collect(), params.clone())?;
    let mut gen_opt = AdamW::new(gen_vars.into_iter().map(|(_, v)| v.clone()).collect(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let photo = data.photo.select(&sample(&mut rng, data.photo.len(), cfg.batch_size))?;
        let paint = data.painterly.select(&sample(&mut rng, data.painterly.len(), cfg.batch_size))?;

        let fp = model.features(&photo.maps, &photo.masks)?.detach();
        let fa = model.features(&paint.maps, &paint.masks)?.detach();
        let d_loss = discriminator_loss(&model.discriminate(&fp)?, &model.discriminate(&fa)?)?;
        disc_opt.backward_step(&d_loss)?;

        let l = retrieval_losses(model, &photo, &paint)?;
        gen_opt.backward_step(&l.total)?;
        let entry = RetrievalStepLog {
            step,
            adv: scalar(&l.adv)?,
            cls: scalar(&l.cls)?,
            total: scalar(&l.total)?,
            disc: scalar(&d_loss)?,
        };
        if !(entry.total.is_finite() && entry.disc.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                last_finite: None,
            });
        }
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Classifier accuracy per domain and discriminator accuracy over both.
pub fn evaluate_retrieval(model: &RetrievalModel, data: &TwoDomainData) -> Result<RetrievalEval> {
    let acc = |set: &DomainSet| -> Result<(f64, Vec<f64>)> {
        let f = model.features(&set.maps, &set.masks)?;
        let pred: Vec<u32> = model.classify(&f)?.argmax(D::Minus1)?.to_vec1()?;
        let hits = pred.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
        let d: Vec<f64> = model.discriminate(&f)?.to_dtype(DType::F64)?.to_vec1()?;
        Ok((hits as f64 / set.len() as f64, d))
    };
    let (pa, dp) = acc(&data.photo)?;
    let (aa, da) = acc(&data.painterly)?;
    let correct = dp.iter().filter(|&&v| v > 0.0).count() + da.iter().filter(|&&v| v <= 0.0).count();
    Ok(RetrievalEval {
        photo_accuracy: pa,
        painterly_accuracy: aa,
        discriminator_accuracy: correct as f64 / (dp.len() + da.len()) as f64,
    })
}

/// Exact search over object embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    rows: Vec<f32>,
    ids: Vec<u64>,
    domains: Vec<Domain>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            ids: Vec::new(),
            domains: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u64, domain: Domain, feature: &[f32]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::Shape(format!("feature of length {} in a {}-dim index", feature.len(), self.dim)));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature", "non-finite entry"));
        }
        self.rows.extend_from_slice(feature);
        self.ids.push(id);
        self.domains.push(domain);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn domain(&self, row: usize) -> Domain {
        self.domains[row]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// The `k` nearest rows by squared L2 distance, ties broken by id.
    pub fn retrieve_topk(&self, query: &[f32], k: usize) -> Result<Vec<(u64, f64)>> {
        if self.is_empty() {
            return Err(Error::invalid("index", "empty gallery"));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query of length {} in a {}-dim index", query.len(), self.dim)));
        }
        if k > self.len() {
            return Err(Error::invalid("k", format!("k = {k} exceeds the {} indexed objects", self.len())));
        }
        let mut scored: Vec<(u64, f64)> = (0..self.len())
            .map(|i| (self.ids[i], squared_l2(self.row(i), query)))
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// One line of a candidate file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub query_id: u64,
    pub rank: usize,
    pub candidate_id: u64,
    pub distance: f64,
}

/// Writes the top-`k` candidates of every query as JSON lines.
pub fn export_candidates(
    index: &EmbeddingIndex,
    queries: &[(u64, Vec<f32>)],
    k: usize,
    path: impl AsRef<Path>,
) -> Result<Vec<CandidateRecord>> {
    let path = path.as_ref();
    let mut records = Vec::with_capacity(queries.len() * k);
    for (qid, q) in queries {
        for (rank, (cid, d)) in index.retrieve_topk(q, k)?.into_iter().enumerate() {
            records.push(CandidateRecord {
                query_id: *qid,
                rank: rank + 1,
                candidate_id: cid,
                distance: d,
            });
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(records)
}

pub fn import_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// An object referenced by a manifest: image, mask and label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ObjectRef {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub category: u32,
}

impl ObjectRef {
    fn load(&self, manifest: &Manifest) -> Result<(Image, Mask)> {
        Ok((
            Image::load_png(manifest.resolve(&self.image))?,
            Mask::load_png(manifest.resolve(&self.mask))?,
        ))
    }
}

/// Unique painterly and photographic objects of a manifest, in sorted order;
/// an object's id is its position in its list.
#[derive(Debug, Clone, Default)]
pub struct ManifestObjects {
    pub painterly: Vec<ObjectRef>,
    pub photographic: Vec<ObjectRef>,
}

impl ManifestObjects {
    pub fn collect(manifest: &Manifest) -> Self {
        let mut painterly = BTreeSet::new();
        let mut photographic = BTreeSet::new();
        for e in &manifest.entries {
            painterly.insert(ObjectRef {
                image: e.painting_path.clone(),
                mask: e.reference_mask_path.clone(),
                category: e.category_label,
            });
            photographic.insert(ObjectRef {
                image: e.object_image_path.clone(),
                mask: e.object_mask_path.clone(),
                category: e.category_label,
            });
        }
        Self {
            painterly: painterly.into_iter().collect(),
            photographic: photographic.into_iter().collect(),
        }
    }
}

/// Index of the manifest's photographic objects.
pub fn build_photo_index(model: &RetrievalModel, manifest: &Manifest) -> Result<EmbeddingIndex> {
    let objs = ManifestObjects::collect(manifest);
    let mut index = EmbeddingIndex::new(model.dim());
    for (i, o) in objs.photographic.iter().enumerate() {
        let (img, mask) = o.load(manifest)?;
        index.push(i as u64, Domain::Photographic, &model.embed(&img, &mask)?)?;
    }
    Ok(index)
}

/// Embeddings of the manifest's painterly objects keyed by id.
pub fn painterly_queries(model: &RetrievalModel, manifest: &Manifest) -> Result<Vec<(u64, Vec<f32>)>> {
    ManifestObjects::collect(manifest)
        .painterly
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let (img, mask) = o.load(manifest)?;
            Ok((i as u64, model.embed(&img, &mask)?))
        })
        .collect()
}
