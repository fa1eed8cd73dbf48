//! Score a synthetic video against its own paragraph and a foreign one, in
//! paragraph and sentence mode and under each ablation.
//!
//! cargo run --release --example pair_similarity

use condmatch::data::{gen_synthetic, SyntheticConfig};
use condmatch::hierarchy::{
    encode_pair, single_clip_similarity, video_paragraph_similarity, AblationFlags, Dims, ModelOptions, ModelParams,
};

fn main() -> condmatch::Result<()> {
    let (ds, _) = gen_synthetic(&SyntheticConfig {
        n_pairs: 2,
        ..SyntheticConfig::default()
    })?;
    let params = ModelParams::init(Dims::new(ds.d_f, ds.d_w, 16, 32), 0)?;
    let (v, own, other) = (&ds.pairs[0].video, &ds.pairs[0].paragraph, &ds.pairs[1].paragraph);

    let variants = [
        ("full", AblationFlags::default()),
        (
            "no_attn",
            AblationFlags {
                no_attn: true,
                ..Default::default()
            },
        ),
        (
            "no_global",
            AblationFlags {
                no_global: true,
                ..Default::default()
            },
        ),
        (
            "no_second_h",
            AblationFlags {
                no_second_h: true,
                ..Default::default()
            },
        ),
        (
            "no_m_match",
            AblationFlags {
                no_m_match: true,
                ..Default::default()
            },
        ),
    ];
    for (name, ablation) in variants {
        let opts = ModelOptions {
            ablation,
            ..Default::default()
        };
        let emb = encode_pair(v, own, &params, &opts)?;
        let foreign = encode_pair(v, other, &params, &opts)?;
        println!(
            "{name:12} paragraph: own {:.4} other {:.4}   sentence: own {:+.4} other {:+.4}   ({} conditioned pairs)",
            video_paragraph_similarity(&emb),
            video_paragraph_similarity(&foreign),
            single_clip_similarity(v, own, &params, &opts)?,
            single_clip_similarity(v, other, &params, &opts)?,
            emb.per_pair.len(),
        );
    }
    Ok(())
}
