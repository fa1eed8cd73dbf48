//! Train on a planted synthetic corpus and report test retrieval.
//!
//! cargo run --release --example train_synthetic -- [epochs] [learning_rate] [batch_pairs]

use std::time::Instant;

use condmatch::data::{gen_synthetic, SyntheticConfig};
use condmatch::hierarchy::MatchMode;
use condmatch::retrieval::{Direction, Evaluator};
use condmatch::training::{fit, TrainConfig};

fn main() -> condmatch::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(60, |a| a.parse().expect("epochs"));
    let lr: f64 = args.next().map_or(3e-3, |a| a.parse().expect("learning rate"));
    let batch_pairs: usize = args.next().map_or(16, |a| a.parse().expect("batch pairs"));

    let (ds, _) = gen_synthetic(&SyntheticConfig {
        n_pairs: 96,
        clips_per_video: (3, 3),
        ..SyntheticConfig::default()
    })?;
    let (train, test) = ds.split_at(64);
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        batch_pairs,
        d_e: 32,
        seed: 1,
        ..TrainConfig::default()
    };

    let start = Instant::now();
    let (trainer, _) = fit(&train, &cfg, |rec, _| {
        println!(
            "epoch {:3}  video {:8.3}  intra {:8.3}  inter {:9.3}  total {:9.3}  ({:.2}s)",
            rec.epoch, rec.video_term, rec.clip_intra_term, rec.clip_inter_term, rec.total, rec.wall_time_s
        );
        Ok(())
    })?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());

    for (name, split) in [("train", &train), ("test", &test)] {
        let mut ev = Evaluator::new(split, &trainer.params, cfg.model, MatchMode::Paragraph)?;
        for dir in [Direction::T2v, Direction::V2t] {
            let rep = ev.evaluate(dir, split.len())?;
            println!(
                "{name} {dir}: R@1 {:.3}  R@5 {:.3}  MdR {}",
                rep.metrics.recall_at[&1], rep.metrics.recall_at[&5], rep.metrics.median_rank
            );
        }
    }
    Ok(())
}
