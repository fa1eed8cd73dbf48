//! Two-stage retrieval: static shortlist, then conditioned reranking.
//! Prints R@1 for several shortlist sizes and one query's top results.
//!
//! cargo run --release --example shortlist_rerank -- [epochs]

use condmatch::data::{gen_synthetic, SyntheticConfig};
use condmatch::hierarchy::MatchMode;
use condmatch::retrieval::{rerank, shortlist, static_embed_paragraph, Direction, Evaluator, Query};
use condmatch::training::{fit, TrainConfig};

fn main() -> condmatch::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(10, |a| a.parse().expect("epochs"));
    let (ds, _) = gen_synthetic(&SyntheticConfig {
        n_pairs: 48,
        ..SyntheticConfig::default()
    })?;
    let cfg = TrainConfig {
        epochs,
        d_e: 16,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let (trainer, _) = fit(&ds, &cfg, |_, _| Ok(()))?;
    let params = &trainer.params;

    let mut ev = Evaluator::new(&ds, params, cfg.model, MatchMode::Paragraph)?;
    for k in [1, 5, 10, ds.len()] {
        let t2v = ev.evaluate(Direction::T2v, k)?;
        let v2t = ev.evaluate(Direction::V2t, k)?;
        println!(
            "K={k:3}  t2v R@1 {:.3}  v2t R@1 {:.3}",
            t2v.metrics.recall_at[&1], v2t.metrics.recall_at[&1]
        );
    }

    let query = &ds.pairs[0].paragraph;
    let short = shortlist(&static_embed_paragraph(query, params)?, ev.static_videos(), 5)?;
    println!("static shortlist for {}: {short:?}", query.id);
    let candidates = short
        .iter()
        .map(|id| &ds.pairs[ds.position(id).unwrap()].video)
        .collect();
    for (id, s) in rerank(
        Query::Paragraph(query, candidates),
        params,
        &cfg.model,
        MatchMode::Paragraph,
    )? {
        println!("  {id}  {s:.4}");
    }
    Ok(())
}
