use condmatch::conditioning::{
    attention, condition_pair, marginal_potentials, sample_indices, FrameSampling, ProjectionPair,
};
use condmatch::data::segment_sizes;
use condmatch::diffcore::{Matrix, Primitive, Tape};
use condmatch::hierarchy::match_score;
use condmatch::retrieval::{metrics_from_ranks, ranks_from_scores};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn columns(max_n: usize, d: usize) -> impl Strategy<Value = Vec<Matrix>> {
    prop::collection::vec(matrix(d, 1), 1..=max_n)
}

/// `sum(w * op(inputs))` for a fixed weight matrix `w`.
fn weighted_output(op: Primitive, inputs: &[Matrix], w: &Matrix) -> f64 {
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let out = op.eval(&refs).unwrap();
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Directional derivative from the tape against a central difference.
fn jvp_error(op: Primitive, inputs: &[Matrix], dirs: &[Matrix], w_seed: &[f64]) -> f64 {
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let shape = op.eval(&refs).unwrap().shape();
    let w = Matrix::from_vec(
        shape.0,
        shape.1,
        (0..shape.0 * shape.1).map(|i| w_seed[i % w_seed.len()]).collect(),
    )
    .unwrap();

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, m)| tape.param(&format!("x{i}"), m))
        .collect();
    let y = tape.apply(op, &vars).unwrap();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(y, wv).unwrap();
    let f = tape.sum(prod).unwrap();
    let grads = tape.backward(f).unwrap();
    let analytic: f64 = (0..inputs.len())
        .map(|i| {
            let g = &grads[&format!("x{i}")];
            g.data().iter().zip(dirs[i].data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum();

    let eps = 1e-6;
    let shifted = |s: f64| -> Vec<Matrix> {
        inputs
            .iter()
            .zip(dirs)
            .map(|(x, d)| x.zip_map(d, |a, b| a + s * b))
            .collect()
    };
    let numeric = (weighted_output(op, &shifted(eps), &w) - weighted_output(op, &shifted(-eps), &w)) / (2.0 * eps);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn away_from_zero(m: &Matrix) -> bool {
    m.data().iter().all(|v| v.abs() > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_is_a_distribution(x in matrix(3, 4)) {
        let s = Primitive::SoftmaxRows.eval(&[&x]).unwrap();
        for r in 0..3 {
            let row = s.row_slice(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_columns_have_unit_norm(x in matrix(3, 4)) {
        let n = Primitive::NormalizeCols.eval(&[&x]).unwrap();
        for c in 0..4 {
            let col_in: f64 = (0..3).map(|r| x.get(r, c).powi(2)).sum::<f64>().sqrt();
            let col: f64 = (0..3).map(|r| n.get(r, c).powi(2)).sum::<f64>().sqrt();
            if col_in > 1e-6 {
                prop_assert!((col - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unary_primitives_match_finite_differences(
        x in matrix(3, 4),
        d in matrix(3, 4),
        w in prop::collection::vec(-1.0f64..1.0, 12),
        s in -3.0f64..3.0,
    ) {
        let ops = [
            Primitive::Scale(s), Primitive::AddScalar(s), Primitive::Sigmoid, Primitive::Tanh,
            Primitive::Exp, Primitive::SoftmaxRows, Primitive::NormalizeCols, Primitive::Transpose,
            Primitive::SumAll, Primitive::SumRows, Primitive::SumCols, Primitive::Norm,
        ];
        for op in ops {
            let e = jvp_error(op, std::slice::from_ref(&x), std::slice::from_ref(&d), &w);
            prop_assert!(e < 1e-6, "{} error {e}", op.name());
        }
        if away_from_zero(&x) {
            let e = jvp_error(Primitive::Relu, std::slice::from_ref(&x), std::slice::from_ref(&d), &w);
            prop_assert!(e < 1e-6, "relu error {e}");
        }
    }

    #[test]
    fn binary_primitives_match_finite_differences(
        a in matrix(3, 4),
        b in matrix(3, 4),
        bt in matrix(4, 3),
        da in matrix(3, 4),
        db in matrix(3, 4),
        dbt in matrix(4, 3),
        w in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        for op in [Primitive::Add, Primitive::Sub, Primitive::Mul, Primitive::HCat, Primitive::VCat] {
            let e = jvp_error(op, &[a.clone(), b.clone()], &[da.clone(), db.clone()], &w);
            prop_assert!(e < 1e-6, "{} error {e}", op.name());
        }
        let e = jvp_error(Primitive::MatMul, &[a.clone(), bt], &[da.clone(), dbt], &w);
        prop_assert!(e < 1e-6, "matmul error {e}");
        if away_from_zero(&a.zip_map(&b, |x, y| x - y)) {
            let e = jvp_error(Primitive::MaxOf, &[a, b], &[da, db], &w);
            prop_assert!(e < 1e-6, "max_of error {e}");
        }
    }

    #[test]
    fn backward_is_additive(x in matrix(3, 4), y in matrix(4, 2)) {
        let grads = |which: u8| {
            let mut t = Tape::new();
            let xv = t.param("x", &x);
            let yv = t.param("y", &y);
            let p = t.matmul(xv, yv).unwrap();
            let th = t.tanh(p).unwrap();
            let l1 = t.sum(th).unwrap();
            let sq = t.mul(xv, xv).unwrap();
            let l2 = t.norm(sq).unwrap();
            let out = match which {
                1 => l1,
                2 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            t.backward(out).unwrap()
        };
        let (g1, g2, g) = (grads(1), grads(2), grads(0));
        for name in ["x", "y"] {
            let sum = g1[name].zip_map(&g2[name], |a, b| a + b);
            prop_assert!(sum.max_abs_diff(&g[name]) < 1e-12);
        }
    }

    #[test]
    fn attention_is_a_distribution_and_interaction_is_bounded(
        frames in columns(8, 5),
        words in columns(8, 5),
        a in matrix(5, 5),
        b in matrix(5, 5),
    ) {
        let c = condition_pair(&frames, &words, &ProjectionPair { frame: a, word: b }).unwrap();
        prop_assert!(c.interaction.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
        let (rho_c, rho_s) = marginal_potentials(&c.interaction).unwrap();
        prop_assert_eq!(&attention(&rho_c), &c.frame_attention);
        prop_assert_eq!(&attention(&rho_s), &c.word_attention);
        for mu in [&c.frame_attention, &c.word_attention] {
            prop_assert!(mu.iter().all(|&w| w >= 0.0));
            prop_assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn match_score_ignores_positive_scaling(
        x in matrix(4, 1), y in matrix(4, 1), u in matrix(4, 4), v in matrix(4, 4),
        c in 0.01f64..100.0, c2 in 0.01f64..100.0,
    ) {
        let base = match_score(&x, &y, &u, &v).unwrap();
        let scaled = match_score(&x, &y, &u.map(|a| a * c), &v.map(|a| a * c2)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
        prop_assert!(base.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn segments_are_contiguous_and_balanced(total in 1usize..200, n_raw in 1usize..200) {
        let n = 1 + (n_raw - 1) % total;
        let sizes = segment_sizes(total, n).unwrap();
        prop_assert_eq!(sizes.len(), n);
        prop_assert_eq!(sizes.iter().sum::<usize>(), total);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn frame_sampling_is_sorted_and_bounded(total in 1usize..300, n_f in 1usize..64, seed in any::<u64>()) {
        for mode in [FrameSampling::Stride, FrameSampling::Seeded { seed }] {
            let idx = sample_indices(total, n_f, mode).unwrap();
            prop_assert_eq!(idx.len(), total.min(n_f));
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < total));
        }
    }

    #[test]
    fn recall_grows_with_k_and_median_is_in_range(
        data in prop::collection::vec(0u8..6, 1..=100),
    ) {
        let n = (data.len() as f64).sqrt() as usize;
        prop_assume!(n >= 1);
        let scores = Matrix::from_vec(n, n, data[..n * n].iter().map(|&v| v as f64).collect()).unwrap();
        let ids: Vec<String> = (0..n).map(|i| format!("{i:03}")).collect();
        let ranks = ranks_from_scores(&scores, &ids).unwrap();
        prop_assert!(ranks.iter().all(|&r| (1..=n).contains(&r)));
        let ks: Vec<usize> = (1..=n).collect();
        let m = metrics_from_ranks(&ranks, &ks).unwrap();
        let r: Vec<f64> = ks.iter().map(|k| m.recall_at[k]).collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r[n - 1], 1.0);
        prop_assert!(m.median_rank >= 1.0 && m.median_rank <= n as f64);
    }
}
