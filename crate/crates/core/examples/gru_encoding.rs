//! Encode a frame sequence with a seeded GRU and show how the final state
//! depends on order.
//!
//! cargo run --release --example gru_encoding

use condmatch::diffcore::Matrix;
use condmatch::seqenc::GruParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> condmatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gru = GruParams::init(4, 6, &mut rng);
    let seq: Vec<Matrix> = (0..5)
        .map(|t| Matrix::column(&[t as f64, 1.0, -(t as f64) / 2.0, 0.25]))
        .collect();
    let h0 = Matrix::zeros(6, 1);

    let states = gru.encode(&seq, &h0)?;
    for (t, h) in states.iter().enumerate() {
        println!(
            "h{t} = {:?}",
            h.data().iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>()
        );
    }

    let reversed: Vec<Matrix> = seq.iter().rev().cloned().collect();
    let last_rev = gru.encode(&reversed, &h0)?.pop().unwrap();
    let diff = states.last().unwrap().zip_map(&last_rev, |a, b| a - b).norm();
    println!("final-state distance, forward vs reversed order: {diff:.4}");
    Ok(())
}
