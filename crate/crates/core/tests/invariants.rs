//! Property tests for the data-type and operation invariants.

use std::sync::{Arc, OnceLock};

use artopih::analysis::{similarity_matrix, Similarity};
use artopih::encoder::{masked_stats, Encoder, StyleVector, WidthProfile, NUM_STAGES};
use artopih::harmonizer::{adain_apply, blend, HarmonizerConfig, HarmonizerModel};
use artopih::imagecore::{composite_paste, patch_grid, resample_mask, BBox, Image, Mask};
use artopih::losses::loss_total;
use artopih::retrieval::{squared_l2, Domain, EmbeddingIndex};
use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

fn model() -> &'static HarmonizerModel {
    static MODEL: OnceLock<HarmonizerModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let enc = Arc::new(Encoder::random(WidthProfile::Tiny, 11, &Device::Cpu, DType::F32).unwrap());
        HarmonizerModel::new(enc, HarmonizerConfig::default(), 11).unwrap()
    })
}

fn image(h: usize, w: usize, vals: &[f32]) -> Image {
    Image::from_fn(h, w, |c, y, x| vals[(c * 31 + y * 7 + x) % vals.len()]).unwrap()
}

fn bbox_in(h: usize, w: usize) -> impl Strategy<Value = BBox> {
    (0..w - 1, 0..h - 1).prop_flat_map(move |(x0, y0)| {
        (x0 + 1..=w, y0 + 1..=h).prop_map(move |(x1, y1)| BBox::new(x0, y0, x1, y1))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn paste_leaves_outside_of_box_untouched(
        vals in prop::collection::vec(0.0f32..=1.0, 16),
        b in bbox_in(24, 32),
        oh in 1usize..20,
        ow in 1usize..20,
    ) {
        let bg = image(24, 32, &vals);
        let obj = Image::filled(oh, ow, [1.0, 0.0, 0.5]).unwrap();
        let om = Mask::ones(oh, ow).unwrap();
        let (comp, mask) = composite_paste(&bg, &obj, &om, b).unwrap();
        prop_assert_eq!((comp.height(), comp.width()), (24, 32));
        prop_assert_eq!((mask.height(), mask.width()), (24, 32));
        for y in 0..24 {
            for x in 0..32 {
                let m = mask.get(y, x);
                prop_assert!((0.0..=1.0).contains(&m));
                if !b.contains(x, y) {
                    prop_assert_eq!(m, 0.0);
                    prop_assert_eq!(comp.pixel(y, x), bg.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn bbox_validation_matches_invariant(x0 in 0usize..40, y0 in 0usize..40, x1 in 0usize..40, y1 in 0usize..40) {
        let ok = x0 < x1 && x1 <= 32 && y0 < y1 && y1 <= 24;
        prop_assert_eq!(BBox::new(x0, y0, x1, y1).validate_for(24, 32).is_ok(), ok);
    }

    #[test]
    fn resampled_masks_stay_in_unit_range(vals in prop::collection::vec(0.0f32..=1.0, 64), f in 1usize..=3) {
        let m = Mask::new(8, 8, vals).unwrap();
        let side = 8 >> (f - 1);
        let r = resample_mask(&m, side, side).unwrap();
        prop_assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let ones = resample_mask(&Mask::ones(8, 8).unwrap(), side, side).unwrap();
        prop_assert!(ones.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn patch_grid_tiles_cover_crop(n in 1usize..5, h in 8usize..40, w in 8usize..40) {
        let img = Image::filled(h, w, [0.2, 0.4, 0.6]).unwrap();
        let tiles = patch_grid(&img, n).unwrap();
        prop_assert_eq!(tiles.len(), n * n);
        prop_assert!(tiles.iter().all(|t| t.height() == h / n && t.width() == w / n));
    }

    #[test]
    fn png_round_trip_within_one_level(vals in prop::collection::vec(0.0f32..=1.0, 24)) {
        let img = image(5, 7, &vals);
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        prop_assert!(img.mean_abs_diff(&back).unwrap() <= 0.5 / 255.0 + 1e-6);
        prop_assert!(img.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn masked_sigma_is_positive(vals in prop::collection::vec(-3.0f32..3.0, 2 * 36), m in prop::collection::vec(0.0f32..=1.0, 36)) {
        let mut m = m;
        m[0] = 1.0;
        let feat = Tensor::from_vec(vals, (1, 2, 6, 6), &Device::Cpu).unwrap();
        let mask = Tensor::from_vec(m, (1, 1, 6, 6), &Device::Cpu).unwrap();
        let s = masked_stats(&feat, &mask).unwrap();
        let (_, sigma) = s.to_vecs().unwrap();
        prop_assert!(sigma[0].iter().all(|&v| v > 0.0));
        prop_assert_eq!(s.channels(), 2);
    }

    #[test]
    fn adain_keeps_unmasked_positions(vals in prop::collection::vec(-2.0f32..2.0, 3 * 25), bits in prop::collection::vec(any::<bool>(), 25), mu in -2.0f32..2.0, sigma in 0.1f32..2.0) {
        let mut m: Vec<f32> = bits.iter().map(|&b| f32::from(u8::from(b))).collect();
        m[12] = 1.0;
        let feat = Tensor::from_vec(vals.clone(), (1, 3, 5, 5), &Device::Cpu).unwrap();
        let mask = Tensor::from_vec(m.clone(), (1, 1, 5, 5), &Device::Cpu).unwrap();
        let target = StyleVector::new(
            Tensor::full(mu, (1, 3), &Device::Cpu).unwrap(),
            Tensor::full(sigma, (1, 3), &Device::Cpu).unwrap(),
        ).unwrap();
        let out = adain_apply(&feat, &mask, &target).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for c in 0..3 {
            for p in 0..25 {
                if m[p] == 0.0 {
                    prop_assert_eq!(out[c * 25 + p], vals[c * 25 + p]);
                }
            }
        }
    }

    #[test]
    fn blend_outside_foreground_is_composite(h in prop::collection::vec(0.0f32..=1.0, 48), c in prop::collection::vec(0.0f32..=1.0, 48), b in prop::collection::vec(0.0f32..=1.0, 16), fg in prop::collection::vec(any::<bool>(), 16)) {
        let dev = Device::Cpu;
        let fgv: Vec<f32> = fg.iter().map(|&v| f32::from(u8::from(v))).collect();
        let out = blend(
            &Tensor::from_vec(h, (1, 3, 4, 4), &dev).unwrap(),
            &Tensor::from_vec(c.clone(), (1, 3, 4, 4), &dev).unwrap(),
            &Tensor::from_vec(b, (1, 1, 4, 4), &dev).unwrap(),
            &Tensor::from_vec(fgv.clone(), (1, 1, 4, 4), &dev).unwrap(),
        ).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for ch in 0..3 {
            for p in 0..16 {
                if fgv[p] == 0.0 {
                    prop_assert_eq!(out[ch * 16 + p].to_bits(), c[ch * 16 + p].to_bits());
                }
            }
        }
    }

    #[test]
    fn total_is_weighted_sum(v in prop::collection::vec(0.0f64..100.0, 5), lambda in 0.0f64..20.0) {
        let r = loss_total(v[0], v[1], v[2], v[3], v[4], lambda);
        prop_assert!((r.total - (v[0] + lambda * (v[1] + v[2]) + v[3] + v[4])).abs() <= 1e-6);
    }

    #[test]
    fn squared_l2_is_symmetric_and_nonnegative(a in prop::collection::vec(-5.0f32..5.0, 6), b in prop::collection::vec(-5.0f32..5.0, 6)) {
        let d = squared_l2(&a, &b);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, squared_l2(&b, &a));
        prop_assert_eq!(squared_l2(&a, &a), 0.0);
    }

    #[test]
    fn topk_is_sorted_with_id_tiebreak(rows in prop::collection::vec(prop::collection::vec(-2i8..=2, 3), 1..40), q in prop::collection::vec(-2i8..=2, 3), k in 1usize..40) {
        let mut index = EmbeddingIndex::new(3);
        for (i, r) in rows.iter().enumerate() {
            let v: Vec<f32> = r.iter().map(|&x| f32::from(x)).collect();
            index.push(i as u64, Domain::Photographic, &v).unwrap();
        }
        let q: Vec<f32> = q.iter().map(|&x| f32::from(x)).collect();
        let res = index.retrieve_topk(&q, k);
        if k > rows.len() {
            prop_assert!(res.is_err());
        } else {
            let res = res.unwrap();
            prop_assert_eq!(res.len(), k);
            prop_assert!(res.windows(2).all(|w| w[0].1 < w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        }
    }

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal(v in prop::collection::vec(prop::collection::vec(0.01f64..5.0, 4), 2..8)) {
        for metric in [Similarity::Cosine, Similarity::CenteredCosine] {
            let m = similarity_matrix(&v, metric);
            for i in 0..v.len() {
                prop_assert!((m[i][i] - 1.0).abs() <= 1e-9);
                for j in 0..v.len() {
                    prop_assert!((m[i][j] - m[j][i]).abs() <= 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hallucinated_sigma_is_positive_and_deterministic(scale in 0.1f32..50.0, shift in -50.0f32..50.0) {
        let m = model();
        let dev = Device::Cpu;
        let s_bg: Vec<StyleVector> = m.encoder().widths().iter().map(|&c| {
            StyleVector::new(
                Tensor::full(shift, (2, c), &dev).unwrap(),
                Tensor::full(scale, (2, c), &dev).unwrap(),
            ).unwrap()
        }).collect();
        let f = Tensor::full(shift / 10.0, (2, WidthProfile::Tiny.object_dim()), &dev).unwrap();
        let a = m.hallucinate(&s_bg, &f).unwrap();
        let b = m.hallucinate(&s_bg, &f).unwrap();
        prop_assert_eq!(a.len(), NUM_STAGES);
        for (x, y) in a.iter().zip(&b) {
            let (xm, xs) = x.to_vecs().unwrap();
            let (ym, ys) = y.to_vecs().unwrap();
            prop_assert_eq!(&xm, &ym);
            prop_assert_eq!(&xs, &ys);
            prop_assert!(xs.iter().flatten().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn harmonized_output_is_in_unit_range(vals in prop::collection::vec(0.0f32..=1.0, 16), b in bbox_in(32, 32)) {
        let img = image(32, 32, &vals);
        let mask = Mask::from_bbox(32, 32, b).unwrap();
        let out = model().harmonize(&img, &mask, &artopih::harmonizer::StyleMode::Ours).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
