//! Train the domain-invariant retrieval network on synthetic two-domain
//! features, then rank a few neighbours by squared L2.

use artopih::retrieval::{
    evaluate_retrieval, train_retrieval, Domain, EmbeddingIndex, RetrievalModel, RetrievalTrainConfig,
    SyntheticDomainConfig, TwoDomainData,
};
use candle_core::{DType, Device};

fn main() -> anyhow::Result<()> {
    let dev = Device::Cpu;
    let sc = SyntheticDomainConfig {
        per_category: 96,
        ..Default::default()
    };
    let (train, held_out) = TwoDomainData::synthetic(&sc, &dev, DType::F32)?.holdout(3)?;
    let model = RetrievalModel::new(sc.dim, sc.num_categories, 0, &dev, DType::F32)?;
    let cfg = RetrievalTrainConfig {
        steps: 600,
        ..Default::default()
    };
    train_retrieval(&model, &train, &cfg, |l| {
        if l.step % 100 == 0 {
            println!("step {:4} adv {:.3} cls {:.3} disc {:.3}", l.step, l.adv, l.cls, l.disc);
        }
    })?;
    let e = evaluate_retrieval(&model, &held_out)?;
    println!(
        "held out: photo acc {:.2}, painterly acc {:.2}, discriminator acc {:.2}",
        e.photo_accuracy, e.painterly_accuracy, e.discriminator_accuracy
    );

    // Index photographic features and query with painterly ones.
    let photo = model.features(&held_out.photo.maps, &held_out.photo.masks)?.to_vec2::<f32>()?;
    let paint = model.features(&held_out.painterly.maps, &held_out.painterly.masks)?.to_vec2::<f32>()?;
    let mut index = EmbeddingIndex::new(model.dim());
    for (i, f) in photo.iter().enumerate() {
        index.push(i as u64, Domain::Photographic, f)?;
    }
    for q in 0..3 {
        let hits = index.retrieve_topk(&paint[q], 5)?;
        let cats: Vec<u32> = hits.iter().map(|(id, _)| held_out.photo.labels[*id as usize]).collect();
        println!("query category {} -> neighbour categories {cats:?}", held_out.painterly.labels[q]);
    }
    Ok(())
}
