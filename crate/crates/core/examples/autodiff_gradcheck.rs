//! Reverse-mode gradients on a small expression, then a finite-difference
//! check of the full training loss on a seeded micro batch.
//!
//! cargo run --release --example autodiff_gradcheck

use condmatch::cli::micro_batch;
use condmatch::data::PairRecord;
use condmatch::diffcore::{grad_check, Matrix, ParamSet, Tape};
use condmatch::hierarchy::ModelParams;
use condmatch::training::{batch_loss_vars, TrainConfig};

fn main() -> condmatch::Result<()> {
    // f(x) = sum(softmax(x) * x)
    let mut tape = Tape::new();
    let x = tape.param("x", &Matrix::from_rows(&[[0.5, -1.0, 2.0]]));
    let p = tape.softmax_rows(x)?;
    let px = tape.mul(p, x)?;
    let f = tape.sum(px)?;
    let grads = tape.backward(f)?;
    println!("f = {:.6}", tape.value(f).item());
    println!("df/dx = {:?}", grads["x"].data());

    let ps = ParamSet::new().with("x", Matrix::from_rows(&[[0.5, -1.0, 2.0]]));
    let rep = grad_check(&ps, 1e-5, |p, t| {
        let x = p.register(t)["x"];
        let s = t.softmax_rows(x)?;
        let sx = t.mul(s, x)?;
        t.sum(sx)
    })?;
    println!("toy expression: max relative error {:.2e}", rep.max_rel_error);

    let ds = micro_batch(0)?;
    let cfg = TrainConfig {
        d_e: 8,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(cfg.dims(ds.d_f, ds.d_w), 0)?;
    let batch: Vec<&PairRecord> = ds.pairs.iter().collect();
    let rep = grad_check(&params, 1e-5, |p, t| {
        let mv = p.register(t);
        Ok(batch_loss_vars(t, &mv, &batch, &cfg)?.total)
    })?;
    println!(
        "triplet loss: {} entries, max relative error {:.2e} at {:?}",
        rep.entries, rep.max_rel_error, rep.worst
    );
    Ok(())
}
