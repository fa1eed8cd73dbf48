//! Attention explanation for a matching pair: most and least attended
//! frames per clip, word weights per sentence, and TSV heatmaps.
//!
//! cargo run --release --example explain_attention

use condmatch::data::{gen_synthetic, SyntheticConfig};
use condmatch::hierarchy::{Dims, ModelOptions, ModelParams};
use condmatch::retrieval::explain;

fn main() -> condmatch::Result<()> {
    let (ds, _) = gen_synthetic(&SyntheticConfig {
        n_pairs: 1,
        ..SyntheticConfig::default()
    })?;
    let params = ModelParams::init(Dims::new(ds.d_f, ds.d_w, 16, 32), 0)?;
    let pair = &ds.pairs[0];
    let ex = explain(&pair.video, &pair.paragraph, &params, &ModelOptions::default())?;

    println!("{} / {}: similarity {:.4}", ex.video, ex.paragraph, ex.similarity);
    for c in &ex.clips {
        println!(
            "clip {} (vs sentence {}): top frames {:?}, bottom frames {:?}",
            c.clip, c.sentence, c.top_frames, c.bottom_frames
        );
    }
    for s in &ex.sentences {
        let words = s.words.clone().unwrap_or_default();
        let weighted: Vec<String> = s
            .word_attention
            .iter()
            .enumerate()
            .map(|(k, w)| format!("{}:{w:.2}", words.get(k).map_or("?", |x| x.as_str())))
            .collect();
        println!("sentence {} (vs clip {}): {}", s.sentence, s.clip, weighted.join(" "));
    }
    println!("\nframe heatmap\n{}", ex.frame_heatmap());
    println!("word heatmap\n{}", ex.word_heatmap());
    Ok(())
}
