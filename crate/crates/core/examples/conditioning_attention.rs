//! Condition one clip on two different sentences and compare the frame
//! attention each sentence induces.
//!
//! cargo run --release --example conditioning_attention

use condmatch::conditioning::{condition_pair, ProjectionPair};
use condmatch::diffcore::Matrix;

fn main() -> condmatch::Result<()> {
    let frames = vec![
        Matrix::column(&[1.0, 0.0, 0.0]),
        Matrix::column(&[0.0, 1.0, 0.0]),
        Matrix::column(&[0.0, 0.0, 1.0]),
        Matrix::column(&[0.7, 0.7, 0.0]),
    ];
    let about_first = vec![Matrix::column(&[1.0, 0.1, 0.0]), Matrix::column(&[0.9, 0.0, 0.1])];
    let about_last = vec![Matrix::column(&[0.0, 0.1, 1.0])];
    let proj = ProjectionPair::identity(3);

    for (name, words) in [("sentence A", &about_first), ("sentence B", &about_last)] {
        let c = condition_pair(&frames, words, &proj)?;
        println!("{name}");
        println!(
            "  interaction rows: {:?}",
            (0..c.interaction.rows())
                .map(|r| c.interaction.row_slice(r).to_vec())
                .collect::<Vec<_>>()
        );
        println!("  frame attention:  {:.3?}", c.frame_attention);
        println!("  word attention:   {:.3?}", c.word_attention);
        println!("  conditioned clip: {:.3?}", c.cond_clip.data());
    }
    Ok(())
}
