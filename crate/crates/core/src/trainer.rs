//! Optimisation loop, ablation switches, metrics and checkpoints.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{PairBatch, TrainingPair};
use crate::encoder::{foreground_style, WidthProfile, NUM_STAGES};
use crate::error::{Error, Result};
use crate::harmonizer::{ForwardOutput, HarmonizerConfig, HarmonizerModel, MappingKind, StyleMode};
use crate::losses::{
    loss_content_from_features, loss_map_c, loss_map_p, loss_obj, loss_style_from_features, LossReport, LossTerms,
    DEFAULT_LAMBDA,
};

/// Training variants: the full model and one row per removed component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ablation {
    #[default]
    Full,
    /// Plain AdaIN with the background style; no mapping terms.
    NoObadain,
    /// Mappings see only the background style.
    NoObjectFeature,
    NoLObj,
    NoLMapP,
    NoLMapC,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoObadain,
        Ablation::NoObjectFeature,
        Ablation::NoLObj,
        Ablation::NoLMapP,
        Ablation::NoLMapC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "FULL",
            Ablation::NoObadain => "NO_OBADAIN",
            Ablation::NoObjectFeature => "NO_OBJECT_FEATURE",
            Ablation::NoLObj => "NO_L_OBJ",
            Ablation::NoLMapP => "NO_L_MAP_P",
            Ablation::NoLMapC => "NO_L_MAP_C",
        }
    }

    /// Style mode used in the training forward pass.
    pub fn train_mode(self) -> StyleMode {
        match self {
            Ablation::NoObadain => StyleMode::Bg,
            _ => StyleMode::Ours,
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| Error::invalid("ablation", format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub lambda: f64,
    pub width_profile: WidthProfile,
    pub ablation: Ablation,
    /// Write an intermediate checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 4,
            steps: 1000,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            width_profile: WidthProfile::Paper,
            ablation: Ablation::Full,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for a profile: batch 4 for the paper widths, 8 for tiny.
    pub fn for_profile(profile: WidthProfile) -> Self {
        Self {
            width_profile: profile,
            batch_size: match profile {
                WidthProfile::Paper => 4,
                WidthProfile::Tiny => 8,
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(field, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Model configuration implied by the profile and ablation.
    pub fn harmonizer_config(&self) -> HarmonizerConfig {
        HarmonizerConfig {
            profile: self.width_profile,
            mapping: if self.ablation == Ablation::NoObadain {
                MappingKind::Passthrough
            } else {
                MappingKind::Learned
            },
            use_object_feature: self.ablation != Ablation::NoObjectFeature,
        }
    }
}

/// Per-step metrics line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub obj: f64,
    pub map_p: f64,
    pub map_c: f64,
    pub sty: f64,
    pub con: f64,
    pub total: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, r: &LossReport) -> Self {
        Self {
            step,
            obj: r.obj,
            map_p: r.map_p,
            map_c: r.map_c,
            sty: r.sty,
            con: r.con,
            total: r.total,
        }
    }
}

/// Losses plus the intermediate values of one training step.
pub struct StepOutput {
    pub terms: LossTerms,
    pub forward: ForwardOutput,
    /// Mapping predictions on the reference branch (absent without mappings).
    pub reference_predictions: Option<Vec<crate::encoder::StyleVector>>,
    pub reference_targets: Vec<crate::encoder::StyleVector>,
}

/// Forward pass and loss terms for one batch, ablation applied.
pub fn training_step(model: &HarmonizerModel, batch: &PairBatch, ablation: Ablation) -> Result<StepOutput> {
    let enc = model.encoder();
    let forward = model.forward(&batch.composite, &batch.composite_mask, &ablation.train_mode())?;

    let ref_pyr = enc.extract(&batch.reference)?;
    let reference_targets = (0..NUM_STAGES)
        .map(|l| Ok(foreground_style(&ref_pyr, &batch.reference_mask, l)?.detach()))
        .collect::<Result<Vec<_>>>()?;
    let f_ref = model.object_feature(&ref_pyr, &batch.reference_mask)?;

    let zero = || Tensor::zeros((), model.dtype(), model.device());
    let obj = match ablation {
        Ablation::NoLObj => zero()?,
        _ => loss_obj(&f_ref, &forward.object_feature)?,
    };

    let (map_p, map_c, reference_predictions) = if ablation == Ablation::NoObadain {
        (zero()?, zero()?, None)
    } else {
        let s_bg_ref = model.background_styles(&ref_pyr, &batch.reference_mask)?;
        let pred_ref = model.hallucinate(&s_bg_ref, &f_ref)?;
        let map_p = match ablation {
            Ablation::NoLMapP => zero()?,
            _ => loss_map_p(&pred_ref, &reference_targets)?,
        };
        let map_c = match ablation {
            Ablation::NoLMapC => zero()?,
            _ => {
                let pred_c = forward
                    .hallucinated
                    .as_ref()
                    .ok_or_else(|| Error::invalid("mode", "training pass produced no mapping output"))?;
                loss_map_c(pred_c, &reference_targets)?
            }
        };
        (map_p, map_c, Some(pred_ref))
    };

    let harm_pyr = enc.extract(&forward.harmonized)?;
    let sty = loss_style_from_features(&harm_pyr, &batch.composite_mask, &reference_targets)?;
    let con = loss_content_from_features(&harm_pyr, &forward.pyramid)?;
    Ok(StepOutput {
        terms: LossTerms {
            obj,
            map_p,
            map_c,
            sty,
            con,
        },
        forward,
        reference_predictions,
        reference_targets,
    })
}

/// Batches over a fixed pair list: each epoch visits the pairs in a fresh
/// seed-determined order and wraps around at the end.
pub struct BatchSchedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("pairs", "no training pairs"));
        }
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            batch_size: batch_size.min(n),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            let i = self.order[self.pos];
            self.pos += 1;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

/// Where a run writes its artefacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Extra entries for every checkpoint header.
    pub metadata: BTreeMap<String, String>,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.safetensors")
    }

    pub fn step_checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}.safetensors"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<(PathBuf, String)>,
}

impl TrainSummary {
    pub fn first(&self) -> Option<&MetricsRecord> {
        self.metrics.first()
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.metrics.last()
    }
}

fn write_line(w: &mut impl Write, path: &Path, rec: &MetricsRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs `cfg.steps` Adam steps on `pairs`. With `out`, metrics go to
/// `metrics.jsonl` line by line and checkpoints are written every
/// `checkpoint_every` steps and at the end.
pub fn train(
    model: &HarmonizerModel,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    out: Option<&RunOutput>,
    mut on_step: impl FnMut(&MetricsRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let expected = cfg.harmonizer_config();
    if model.config() != expected {
        return Err(Error::invalid(
            "model",
            format!(
                "ablation {} needs {:?}, model has {:?}",
                cfg.ablation,
                expected,
                model.config()
            ),
        ));
    }
    let mut opt = AdamW::new(
        model.store().vars(),
        ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut schedule = BatchSchedule::new(pairs.len(), cfg.batch_size, cfg.seed)?;
    let mut metrics_file = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let p = o.metrics_path();
            let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            Some((BufWriter::new(f), p))
        }
        None => None,
    };
    let mut meta = out.map(|o| o.metadata.clone()).unwrap_or_default();
    meta.insert("ablation".to_string(), cfg.ablation.to_string());
    meta.insert("train_config".to_string(), cfg.to_toml()?);

    let mut summary = TrainSummary {
        metrics: Vec::with_capacity(cfg.steps),
        checkpoints: Vec::new(),
    };
    let mut last_finite: Option<LossReport> = None;
    for step in 1..=cfg.steps {
        let idx = schedule.next_batch();
        let chosen: Vec<&TrainingPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let batch = PairBatch::from_pairs(&chosen, model.device(), model.dtype())?;
        let s = training_step(model, &batch, cfg.ablation)?;
        let report = s.terms.report(cfg.lambda)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_finite: last_finite.map(Box::new),
            });
        }
        opt.backward_step(&s.terms.total(cfg.lambda)?)?;
        last_finite = Some(report);

        let rec = MetricsRecord::new(step, &report);
        if let Some((w, p)) = metrics_file.as_mut() {
            write_line(w, p, &rec)?;
        }
        on_step(&rec);
        summary.metrics.push(rec);

        if let Some(o) = out {
            meta.insert("step".to_string(), step.to_string());
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                let p = o.step_checkpoint(step);
                let id = model.save_with(&p, &meta)?;
                summary.checkpoints.push((p, id));
            }
            if step == cfg.steps {
                let p = o.final_checkpoint();
                let id = model.save_with(&p, &meta)?;
                summary.checkpoints.push((p, id));
            }
        }
    }
    Ok(summary)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Evaluates the unweighted terms on `pairs` without updating anything.
pub fn evaluate(model: &HarmonizerModel, pairs: &[TrainingPair], ablation: Ablation, lambda: f64) -> Result<LossReport> {
    let chosen: Vec<&TrainingPair> = pairs.iter().collect();
    let batch = PairBatch::from_pairs(&chosen, model.device(), model.dtype())?;
    training_step(model, &batch, ablation)?.terms.report(lambda)
}
