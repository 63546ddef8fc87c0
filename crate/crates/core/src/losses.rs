//! Training objectives of the harmonization network.
//!
//! Every term is a plain sum of squares over vector/tensor entries; over a
//! batch the per-item values are averaged.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::{masked_stats, stage_mask, Encoder, FeaturePyramid, StyleVector, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::{scalar, sum_sq_per_item};

/// Default weight of the mapping terms in the total objective.
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub obj: f64,
    pub map_p: f64,
    pub map_c: f64,
    pub sty: f64,
    pub con: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.obj, self.map_p, self.map_c, self.sty, self.con, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Unweighted loss terms as scalar tensors (kept differentiable).
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub obj: Tensor,
    pub map_p: Tensor,
    pub map_c: Tensor,
    pub sty: Tensor,
    pub con: Tensor,
}

impl LossTerms {
    pub fn total(&self, lambda: f64) -> Result<Tensor> {
        let map = ((&self.map_p + &self.map_c)? * lambda)?;
        Ok((((&self.obj + map)? + &self.sty)? + &self.con)?)
    }

    pub fn report(&self, lambda: f64) -> Result<LossReport> {
        Ok(loss_total(
            scalar(&self.obj)?,
            scalar(&self.map_p)?,
            scalar(&self.map_c)?,
            scalar(&self.sty)?,
            scalar(&self.con)?,
            lambda,
        ))
    }
}

/// `total = obj + lambda * (map_p + map_c) + sty + con`.
pub fn loss_total(obj: f64, map_p: f64, map_c: f64, sty: f64, con: f64, lambda: f64) -> LossReport {
    LossReport {
        obj,
        map_p,
        map_c,
        sty,
        con,
        total: obj + lambda * (map_p + map_c) + sty + con,
        lambda,
    }
}

fn batch_mean(per_item: Tensor) -> Result<Tensor> {
    Ok(per_item.mean_all()?)
}

/// Squared L2 distance between object features, `(B, D)` each.
pub fn loss_obj(f_p: &Tensor, f_c: &Tensor) -> Result<Tensor> {
    if f_p.dims() != f_c.dims() {
        return Err(Error::Shape(format!(
            "object features differ in shape: {:?} vs {:?}",
            f_p.dims(),
            f_c.dims()
        )));
    }
    batch_mean(sum_sq_per_item(&(f_p - f_c)?)?)
}

fn check_stage_count(what: &str, n: usize) -> Result<()> {
    if n != NUM_STAGES {
        return Err(Error::Shape(format!("{what}: expected {NUM_STAGES} stages, got {n}")));
    }
    Ok(())
}

/// `sum_l ||pred_l - gt_l||^2` over the concatenated `[mu, sigma]` vectors.
/// Used for both the reference-branch and the composite-branch mapping terms.
pub fn loss_map(pred: &[StyleVector], gt: &[StyleVector]) -> Result<Tensor> {
    check_stage_count("predicted styles", pred.len())?;
    check_stage_count("target styles", gt.len())?;
    let mut acc: Option<Tensor> = None;
    for (p, g) in pred.iter().zip(gt) {
        if p.mu.dims() != g.mu.dims() {
            return Err(Error::Shape(format!(
                "style shapes differ: {:?} vs {:?}",
                p.mu.dims(),
                g.mu.dims()
            )));
        }
        let d = (p.concat()? - g.detach().concat()?)?;
        let term = sum_sq_per_item(&d)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    batch_mean(acc.expect("four stages"))
}

pub fn loss_map_p(pred: &[StyleVector], gt: &[StyleVector]) -> Result<Tensor> {
    loss_map(pred, gt)
}

pub fn loss_map_c(pred: &[StyleVector], gt_ref: &[StyleVector]) -> Result<Tensor> {
    loss_map(pred, gt_ref)
}

/// Style term on an already-encoded harmonized image.
pub fn loss_style_from_features(
    harmonized: &FeaturePyramid,
    fg_mask: &Tensor,
    gt_ref: &[StyleVector],
) -> Result<Tensor> {
    check_stage_count("reference styles", gt_ref.len())?;
    let mut acc: Option<Tensor> = None;
    for (l, gt) in gt_ref.iter().enumerate() {
        let feat = harmonized.stage(l);
        let (_, _, h, w) = feat.dims4()?;
        let s = masked_stats(feat, &stage_mask(fg_mask, h, w)?)?;
        let gt = gt.detach();
        let term = (sum_sq_per_item(&(s.mu - gt.mu)?)? + sum_sq_per_item(&(s.sigma - gt.sigma)?)?)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    batch_mean(acc.expect("four stages"))
}

/// `sum_l ||mu_l(h) - mu_ref_l||^2 + ||sigma_l(h) - sigma_ref_l||^2`, with the
/// harmonized statistics taken under the resampled composite mask.
pub fn loss_style(
    harmonized: &Tensor,
    fg_mask: &Tensor,
    gt_ref: &[StyleVector],
    encoder: &Encoder,
) -> Result<Tensor> {
    loss_style_from_features(&encoder.extract(harmonized)?, fg_mask, gt_ref)
}

pub fn loss_content_from_features(harmonized: &FeaturePyramid, composite: &FeaturePyramid) -> Result<Tensor> {
    let last = NUM_STAGES - 1;
    let d = (harmonized.stage(last) - composite.stage(last).detach())?;
    batch_mean(sum_sq_per_item(&d)?)
}

/// `||phi_4(harmonized) - phi_4(composite)||^2` over the full stage-4 map.
pub fn loss_content(harmonized: &Tensor, composite: &Tensor, encoder: &Encoder) -> Result<Tensor> {
    loss_content_from_features(&encoder.extract(harmonized)?, &encoder.extract(composite)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn sv(mu: &[f64], sigma: &[f64]) -> StyleVector {
        let d = Device::Cpu;
        StyleVector::new(
            Tensor::from_slice(mu, (1, mu.len()), &d).unwrap(),
            Tensor::from_slice(sigma, (1, sigma.len()), &d).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn obj_examples() {
        let d = Device::Cpu;
        let a = Tensor::new(&[[1.0f64, 0.0]], &d).unwrap();
        let b = Tensor::new(&[[0.0f64, 1.0]], &d).unwrap();
        assert_eq!(scalar(&loss_obj(&a, &a).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&loss_obj(&a, &b).unwrap()).unwrap(), 2.0);
        assert_eq!(scalar(&loss_obj(&b, &a).unwrap()).unwrap(), 2.0);
        let c = Tensor::new(&[[0.0f64, 1.0, 2.0]], &d).unwrap();
        assert!(loss_obj(&a, &c).is_err());
    }

    #[test]
    fn obj_gradient_is_twice_difference() {
        let d = Device::Cpu;
        let fp = Tensor::new(&[[0.3f64, -1.2, 2.0]], &d).unwrap();
        let fc = candle_core::Var::new(&[[1.0f64, 0.5, -0.25]], &d).unwrap();
        let loss = loss_obj(&fp, fc.as_tensor()).unwrap();
        let g: Vec<Vec<f64>> = loss.backward().unwrap().get(fc.as_tensor()).unwrap().to_vec2().unwrap();
        let want = [2.0 * (1.0 - 0.3), 2.0 * (0.5 + 1.2), 2.0 * (-0.25 - 2.0)];
        for (g, w) in g[0].iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        // Central differences on the same function.
        let base = [1.0f64, 0.5, -0.25];
        for i in 0..3 {
            let eval = |delta: f64| {
                let mut v = base;
                v[i] += delta;
                let t = Tensor::new(&[v], &d).unwrap();
                scalar(&loss_obj(&fp, &t).unwrap()).unwrap()
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((fd - want[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn map_examples() {
        let gt: Vec<_> = (0..4).map(|l| sv(&[l as f64, 1.0], &[0.5, 2.0])).collect();
        assert_eq!(scalar(&loss_map_p(&gt, &gt).unwrap()).unwrap(), 0.0);

        let mut off = gt.clone();
        off[2] = sv(&[2.0, 1.0], &[0.5, 3.0]);
        assert!((scalar(&loss_map_c(&off, &gt).unwrap()).unwrap() - 1.0).abs() < 1e-12);

        let mut off2 = gt.clone();
        off2[2] = sv(&[2.0, 1.0], &[0.5, 4.0]);
        assert!((scalar(&loss_map_p(&off2, &gt).unwrap()).unwrap() - 4.0).abs() < 1e-12);

        assert!(loss_map(&gt[..3], &gt[..3]).is_err());
    }

    #[test]
    fn total_examples() {
        assert_eq!(loss_total(0.0, 0.0, 0.0, 0.0, 0.0, DEFAULT_LAMBDA).total, 0.0);
        let r = loss_total(1.0, 1.0, 1.0, 1.0, 1.0, DEFAULT_LAMBDA);
        assert!((r.total - 23.0).abs() < 1e-12);
        assert_eq!(r.lambda, 10.0);
    }

    #[test]
    fn terms_total_matches_report() {
        let d = Device::Cpu;
        let s = |v: f64| Tensor::new(v, &d).unwrap();
        let t = LossTerms {
            obj: s(0.5),
            map_p: s(0.25),
            map_c: s(2.0),
            sty: s(3.0),
            con: s(7.0),
        };
        let r = t.report(10.0).unwrap();
        let total = scalar(&t.total(10.0).unwrap()).unwrap();
        assert!((r.total - total).abs() < 1e-12);
        assert!((r.total - (0.5 + 22.5 + 3.0 + 7.0)).abs() < 1e-12);
        let _ = DType::F64;
    }
}
