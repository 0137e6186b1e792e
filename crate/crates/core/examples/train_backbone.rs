//! Trains MF and LightGCN with BPR on the synthetic corpus and prints the
//! per-epoch loss and validation recall.

use toprec::corpus::{generate_synthetic_dataset, SynthConfig};
use toprec::evalkit;
use toprec::recmodel::{train, Backbone, ModelParams, TrainConfig, TrainData, TrainTrace};

fn main() -> toprec::Result<()> {
    let s = generate_synthetic_dataset(&SynthConfig::default(), 3)?;
    let data = TrainData::from_dataset(&s.dataset)?;
    let cfg = TrainConfig {
        epochs_max: 30,
        ..TrainConfig::default()
    };
    for (backbone, layers) in [(Backbone::Mf, 0), (Backbone::Lightgcn, 2)] {
        let p = ModelParams::init(&data, backbone, 32, layers, 3)?;
        let (params, _, hist) = train(p, &data, &cfg, TrainTrace::new(2, None), &mut ())?;
        println!("{backbone:?}");
        for e in &hist.epochs {
            let v = e.val_recall.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into());
            println!("  epoch {:>2}  loss {:.4}  val recall {v}", e.epoch, e.loss);
        }
        let eval = evalkit::evaluate(&params, &s.dataset, &[10, 20], Some(&s.truth))?;
        println!(
            "  best epoch {}; test R@20 {:.4}, CE@20 {:.4}\n",
            hist.best_epoch, eval.recall[&20], eval.category_entropy[&20]
        );
    }
    Ok(())
}
