//! Drop clip boundaries: split a video into N equal segments and align the
//! paragraph to N sentences by truncation or repetition.
//!
//! cargo run --release --example weak_segmentation

use condmatch::data::{gen_synthetic, segment_sizes, segment_uniform, SyntheticConfig};

fn main() -> condmatch::Result<()> {
    let (ds, _) = gen_synthetic(&SyntheticConfig {
        n_pairs: 1,
        clips_per_video: (3, 3),
        ..SyntheticConfig::default()
    })?;
    let pair = &ds.pairs[0];
    let frames = pair.video.frame_count();
    let original: Vec<usize> = pair.video.clips.iter().map(|c| c.rows()).collect();
    println!(
        "{frames} frames, original clips {original:?}, {} sentences",
        pair.paragraph.sentences.len()
    );

    for n in [1, 2, 3, 5] {
        let (v, p) = segment_uniform(&pair.video, &pair.paragraph, n)?;
        let sizes: Vec<usize> = v.clips.iter().map(|c| c.rows()).collect();
        let text = p.raw_text.unwrap_or_default();
        println!("N={n}: segments {sizes:?} (expected {:?})", segment_sizes(frames, n)?);
        for (j, t) in text.iter().enumerate() {
            println!("  sentence {j}: {t}");
        }
    }
    Ok(())
}
