//! Frame/word interaction attention.
//!
//! Given encoded frame states `f_1..f_n` and word states `w_1..w_m`:
//!
//! ```text
//! I[k][k'] = cos(A f_k, B w_k')
//! rho_c(k) = sum_k' I[k][k']      rho_s(k') = sum_k I[k][k']
//! mu_c     = softmax(rho_c)       mu_s      = softmax(rho_s)
//! c        = sum_k mu_c(k) f_k    s         = sum_k' mu_s(k') w_k'
//! ```
//!
//! The clip summary `c` therefore depends on the sentence it is compared
//! against, and vice versa.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Frame-side and word-side re-embedding matrices (`A`, `B` or `A0`, `B0`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionPair {
    pub frame: Matrix,
    pub word: Matrix,
}

impl ProjectionPair {
    pub fn identity(dim: usize) -> Self {
        ProjectionPair {
            frame: Matrix::identity(dim),
            word: Matrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.frame.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.frame.rows();
        for m in [&self.frame, &self.word] {
            if m.shape() != (d, d) {
                return Err(Error::Shape {
                    primitive: "projection_pair",
                    lhs: m.shape(),
                    rhs: (d, d),
                });
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, frame_name: &str, word_name: &str) -> ProjectionVars {
        ProjectionVars {
            frame: tape.param(frame_name, &self.frame),
            word: tape.param(word_name, &self.word),
        }
    }

    fn as_constants(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars {
            frame: tape.constant(self.frame.clone()),
            word: tape.constant(self.word.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub frame: Var,
    pub word: Var,
}

/// How the per-element weights are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Attention,
    /// `1/n` everywhere; the interaction matrix is still computed.
    Uniform,
}

/// Frame states of one clip, stacked and projected once so the clip can be
/// conditioned against many sentences.
#[derive(Clone, Debug)]
pub struct FrameSide {
    /// `d x n`
    pub states: Var,
    /// Unit-normalized `A f_k` as rows, `n x d`.
    unit_t: Var,
    pub len: usize,
}

/// Word states of one sentence, stacked and projected once.
#[derive(Clone, Debug)]
pub struct WordSide {
    /// `d x m`
    pub states: Var,
    /// Unit-normalized `B w_k'` as columns, `d x m`.
    unit: Var,
    pub len: usize,
}

fn check_states(tape: &Tape, states: &[Var], proj: Var, what: &'static str) -> Result<()> {
    if states.is_empty() {
        return Err(Error::Empty(what));
    }
    let d = tape.value(proj).cols();
    for s in states {
        if tape.value(*s).shape() != (d, 1) {
            return Err(Error::Shape {
                primitive: what,
                lhs: tape.value(*s).shape(),
                rhs: (d, 1),
            });
        }
    }
    Ok(())
}

pub fn prepare_frames(tape: &mut Tape, states: &[Var], frame_proj: Var) -> Result<FrameSide> {
    check_states(tape, states, frame_proj, "frame states")?;
    let stacked = tape.hcat(states)?;
    let projected = tape.matmul(frame_proj, stacked)?;
    let unit = tape.normalize_cols(projected)?;
    let unit_t = tape.transpose(unit)?;
    Ok(FrameSide {
        states: stacked,
        unit_t,
        len: states.len(),
    })
}

pub fn prepare_words(tape: &mut Tape, states: &[Var], word_proj: Var) -> Result<WordSide> {
    check_states(tape, states, word_proj, "word states")?;
    let stacked = tape.hcat(states)?;
    let projected = tape.matmul(word_proj, stacked)?;
    let unit = tape.normalize_cols(projected)?;
    Ok(WordSide {
        states: stacked,
        unit,
        len: states.len(),
    })
}

/// Tape handles for one conditioned clip/sentence pair.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    /// `n x m`
    pub interaction: Var,
    /// `n x 1`
    pub frame_potentials: Var,
    /// `1 x m`
    pub word_potentials: Var,
    /// `1 x n`
    pub frame_attention: Var,
    /// `1 x m`
    pub word_attention: Var,
    /// `d x 1`
    pub cond_clip: Var,
    /// `d x 1`
    pub cond_sentence: Var,
}

pub fn condition_sides(
    tape: &mut Tape,
    frames: &FrameSide,
    words: &WordSide,
    pooling: Pooling,
) -> Result<CondVars> {
    let interaction = tape.matmul(frames.unit_t, words.unit)?;
    let frame_potentials = tape.sum_rows(interaction)?;
    let word_potentials = tape.sum_cols(interaction)?;
    let (frame_attention, word_attention) = match pooling {
        Pooling::Attention => {
            let rho_c = tape.transpose(frame_potentials)?;
            (tape.softmax_rows(rho_c)?, tape.softmax_rows(word_potentials)?)
        }
        Pooling::Uniform => (
            tape.constant(uniform_row(frames.len)),
            tape.constant(uniform_row(words.len)),
        ),
    };
    let mu_c = tape.transpose(frame_attention)?;
    let cond_clip = tape.matmul(frames.states, mu_c)?;
    let mu_s = tape.transpose(word_attention)?;
    let cond_sentence = tape.matmul(words.states, mu_s)?;
    Ok(CondVars {
        interaction,
        frame_potentials,
        word_potentials,
        frame_attention,
        word_attention,
        cond_clip,
        cond_sentence,
    })
}

fn uniform_row(n: usize) -> Matrix {
    Matrix::filled(1, n, 1.0 / n as f64)
}

/// Mean of the stacked states (`d x n -> d x 1`).
pub fn uniform_pool(tape: &mut Tape, states: &[Var]) -> Result<Var> {
    if states.is_empty() {
        return Err(Error::Empty("uniform_pool"));
    }
    let stacked = tape.hcat(states)?;
    let weights = tape.constant(Matrix::filled(states.len(), 1, 1.0 / states.len() as f64));
    tape.matmul(stacked, weights)
}

pub fn condition_pair_vars(
    tape: &mut Tape,
    frame_states: &[Var],
    word_states: &[Var],
    proj: ProjectionVars,
    pooling: Pooling,
) -> Result<CondVars> {
    let frames = prepare_frames(tape, frame_states, proj.frame)?;
    let words = prepare_words(tape, word_states, proj.word)?;
    condition_sides(tape, &frames, &words, pooling)
}

/// Materialized interaction output for one clip/sentence pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedPair {
    pub interaction: Matrix,
    pub frame_potentials: Vec<f64>,
    pub word_potentials: Vec<f64>,
    pub frame_attention: Vec<f64>,
    pub word_attention: Vec<f64>,
    pub cond_clip: Matrix,
    pub cond_sentence: Matrix,
}

impl ConditionedPair {
    pub fn from_vars(tape: &Tape, v: &CondVars) -> Self {
        ConditionedPair {
            interaction: tape.value(v.interaction).clone(),
            frame_potentials: tape.value(v.frame_potentials).data().to_vec(),
            word_potentials: tape.value(v.word_potentials).data().to_vec(),
            frame_attention: tape.value(v.frame_attention).data().to_vec(),
            word_attention: tape.value(v.word_attention).data().to_vec(),
            cond_clip: tape.value(v.cond_clip).clone(),
            cond_sentence: tape.value(v.cond_sentence).clone(),
        }
    }
}

fn constants(tape: &mut Tape, xs: &[Matrix]) -> Vec<Var> {
    xs.iter().map(|x| tape.constant(x.clone())).collect()
}

/// Cosine similarities between projected frame and word states, `n x m`.
pub fn interaction_matrix(
    frame_states: &[Matrix],
    word_states: &[Matrix],
    proj: &ProjectionPair,
) -> Result<Matrix> {
    proj.validate()?;
    let mut tape = Tape::new();
    let pv = proj.as_constants(&mut tape);
    let f = constants(&mut tape, frame_states);
    let w = constants(&mut tape, word_states);
    let frames = prepare_frames(&mut tape, &f, pv.frame)?;
    let words = prepare_words(&mut tape, &w, pv.word)?;
    let i = tape.matmul(frames.unit_t, words.unit)?;
    Ok(tape.value(i).clone())
}

/// Row sums (per frame) and column sums (per word) of an interaction matrix.
pub fn marginal_potentials(interaction: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if interaction.is_empty() {
        return Err(Error::Empty("marginal_potentials"));
    }
    let (n, m) = interaction.shape();
    let mut rho_c = vec![0.0; n];
    let mut rho_s = vec![0.0; m];
    for r in 0..n {
        for c in 0..m {
            let v = interaction.get(r, c);
            rho_c[r] += v;
            rho_s[c] += v;
        }
    }
    Ok((rho_c, rho_s))
}

/// Softmax of a potential vector.
pub fn attention(potentials: &[f64]) -> Vec<f64> {
    diffcore::softmax_rows(&Matrix::row_vector(potentials)).into_data()
}

/// `sum_k weights[k] * states[k]`, accumulated in index order.
pub fn conditioned_pool(states: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    if states.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "conditioned_pool",
            left: states.len(),
            right: weights.len(),
        });
    }
    let first = states.first().ok_or(Error::Empty("conditioned_pool"))?;
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "conditioned_pool weights sum to {total}, expected 1"
        )));
    }
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for (s, &w) in states.iter().zip(weights) {
        if s.shape() != first.shape() {
            return Err(Error::Shape {
                primitive: "conditioned_pool",
                lhs: first.shape(),
                rhs: s.shape(),
            });
        }
        for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += w * v;
        }
    }
    Ok(acc)
}

/// Full conditioning of one clip against one sentence.
pub fn condition_pair(
    frame_states: &[Matrix],
    word_states: &[Matrix],
    proj: &ProjectionPair,
) -> Result<ConditionedPair> {
    proj.validate()?;
    let mut tape = Tape::new();
    let pv = proj.as_constants(&mut tape);
    let f = constants(&mut tape, frame_states);
    let w = constants(&mut tape, word_states);
    let v = condition_pair_vars(&mut tape, &f, &w, pv, Pooling::Attention)?;
    Ok(ConditionedPair::from_vars(&tape, &v))
}

/// Selection rule for the global frame subsample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameSampling {
    /// `index_t = floor(t * total / n_f)`
    #[default]
    Stride,
    /// Sorted uniform draw without replacement from a fixed seed.
    Seeded { seed: u64 },
}

/// Indices of the frames kept when subsampling `total` frames to `n_f`.
pub fn sample_indices(total: usize, n_f: usize, mode: FrameSampling) -> Result<Vec<usize>> {
    if n_f == 0 {
        return Err(Error::Config("n_f must be >= 1".into()));
    }
    if total == 0 {
        return Err(Error::Empty("sample_frames"));
    }
    if total <= n_f {
        return Ok((0..total).collect());
    }
    Ok(match mode {
        FrameSampling::Stride => (0..n_f).map(|t| t * total / n_f).collect(),
        FrameSampling::Seeded { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ total as u64);
            let mut idx = index::sample(&mut rng, total, n_f).into_vec();
            idx.sort_unstable();
            idx
        }
    })
}

/// Temporal-order-preserving subsample of `frames` to at most `n_f` items.
pub fn sample_frames<T: Clone>(frames: &[T], n_f: usize, mode: FrameSampling) -> Result<Vec<T>> {
    Ok(sample_indices(frames.len(), n_f, mode)?
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}

/// Global video/paragraph embeddings `(v0, p0)`: sampled frames of the
/// whole video against every word of the paragraph, as one clip and one
/// sentence, under the second projection pair.
pub fn global_condition(
    video_frames: &[Matrix],
    paragraph_words: &[Matrix],
    proj0: &ProjectionPair,
    n_f: usize,
    mode: FrameSampling,
) -> Result<(Matrix, Matrix)> {
    let sampled = sample_frames(video_frames, n_f, mode)?;
    let pair = condition_pair(&sampled, paragraph_words, proj0)?;
    Ok((pair.cond_clip, pair.cond_sentence))
}

#[cfg(test)]
mod tests {
    use super::*;

    const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn col(v: &[f64]) -> Matrix {
        Matrix::column(v)
    }

    #[test]
    fn self_cosine_is_one() {
        let i = interaction_matrix(&[col(&[1.0, 0.0])], &[col(&[1.0, 0.0])], &ProjectionPair::identity(2)).unwrap();
        assert!((i.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_cosine_is_zero() {
        let i = interaction_matrix(&[col(&[1.0, 0.0])], &[col(&[0.0, 1.0])], &ProjectionPair::identity(2)).unwrap();
        assert_eq!(i.item(), 0.0);
    }

    fn two_by_two() -> (Vec<Matrix>, Vec<Matrix>) {
        (
            vec![col(&[1.0, 0.0]), col(&[0.0, 1.0])],
            vec![col(&[INV_SQRT2, INV_SQRT2]), col(&[1.0, 0.0])],
        )
    }

    #[test]
    fn hand_computed_interaction() {
        let (f, w) = two_by_two();
        let i = interaction_matrix(&f, &w, &ProjectionPair::identity(2)).unwrap();
        let expected = Matrix::from_rows(&[[0.70711, 1.0], [0.70711, 0.0]]);
        assert!(i.max_abs_diff(&expected) < 1e-5, "{i:?}");
    }

    #[test]
    fn potentials_are_row_and_column_sums() {
        let (rc, rs) = marginal_potentials(&Matrix::identity(2)).unwrap();
        assert_eq!((rc, rs), (vec![1.0, 1.0], vec![1.0, 1.0]));
        let (rc, rs) = marginal_potentials(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!((rc, rs), (vec![0.0; 2], vec![0.0; 3]));
        let (rc, rs) = marginal_potentials(&Matrix::from_rows(&[[0.70711, 1.0], [0.70711, 0.0]])).unwrap();
        assert!((rc[0] - 1.70711).abs() < 1e-12 && (rc[1] - 0.70711).abs() < 1e-12);
        assert!((rs[0] - 1.41422).abs() < 1e-12 && (rs[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_examples() {
        assert_eq!(attention(&[2.5, 2.5]), vec![0.5, 0.5]);
        assert_eq!(attention(&[-7.0]), vec![1.0]);
        let mu = attention(&[0.0, 3f64.ln()]);
        assert!((mu[0] - 0.25).abs() < 1e-15 && (mu[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn pool_examples() {
        let s = col(&[0.3, -2.0]);
        assert_eq!(conditioned_pool(std::slice::from_ref(&s), &[1.0]).unwrap(), s);
        let same = vec![s.clone(); 3];
        let out = conditioned_pool(&same, &[0.2, 0.5, 0.3]).unwrap();
        assert!(out.max_abs_diff(&s) < 1e-15);
        let out = conditioned_pool(&[col(&[2.0, 0.0]), col(&[0.0, 2.0])], &[0.25, 0.75]).unwrap();
        assert_eq!(out, col(&[0.5, 1.5]));
    }

    #[test]
    fn pool_length_mismatch() {
        let r = conditioned_pool(&[col(&[1.0])], &[0.5, 0.5]);
        assert!(matches!(r, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn single_frame_single_word() {
        let f = col(&[0.2, -0.4, 0.1]);
        let w = col(&[-0.3, 0.9, 0.5]);
        let p = condition_pair(std::slice::from_ref(&f), std::slice::from_ref(&w), &ProjectionPair::identity(3)).unwrap();
        assert_eq!(p.frame_attention, vec![1.0]);
        assert_eq!(p.word_attention, vec![1.0]);
        assert_eq!(p.cond_clip, f);
        assert_eq!(p.cond_sentence, w);
    }

    #[test]
    fn two_by_two_chain() {
        let (f, w) = two_by_two();
        let p = condition_pair(&f, &w, &ProjectionPair::identity(2)).unwrap();
        // rho_c = [1 + 1/sqrt2, 1/sqrt2]; rho_s = [sqrt2, 1]
        let ec = [(1.0 + INV_SQRT2).exp(), INV_SQRT2.exp()];
        let mu_c = [ec[0] / (ec[0] + ec[1]), ec[1] / (ec[0] + ec[1])];
        let es = [2f64.sqrt().exp(), 1f64.exp()];
        let mu_s = [es[0] / (es[0] + es[1]), es[1] / (es[0] + es[1])];
        assert!((p.frame_attention[0] - mu_c[0]).abs() < 1e-12);
        assert!((p.word_attention[0] - mu_s[0]).abs() < 1e-12);
        let c = col(&[mu_c[0], mu_c[1]]);
        let s = col(&[mu_s[0] * INV_SQRT2 + mu_s[1], mu_s[0] * INV_SQRT2]);
        assert!(p.cond_clip.max_abs_diff(&c) < 1e-12);
        assert!(p.cond_sentence.max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn cond_clip_is_bit_identical_to_weighted_sum() {
        let f = vec![col(&[0.3, -0.7, 0.11]), col(&[0.9, 0.2, -0.4]), col(&[-0.05, 0.6, 0.33])];
        let w = vec![col(&[0.5, 0.1, -0.2]), col(&[-0.8, 0.4, 0.25])];
        let p = condition_pair(&f, &w, &ProjectionPair::identity(3)).unwrap();
        assert_eq!(p.cond_clip, conditioned_pool(&f, &p.frame_attention).unwrap());
        assert_eq!(p.cond_sentence, conditioned_pool(&w, &p.word_attention).unwrap());
    }

    #[test]
    fn symmetric_inputs_give_equal_attention() {
        let s = vec![col(&[0.3, -0.7]), col(&[0.9, 0.2]), col(&[-0.05, 0.6])];
        let proj = ProjectionPair {
            frame: Matrix::from_rows(&[[1.0, 0.4], [-0.3, 0.8]]),
            word: Matrix::from_rows(&[[1.0, 0.4], [-0.3, 0.8]]),
        };
        let p = condition_pair(&s, &s, &proj).unwrap();
        for (a, b) in p.frame_attention.iter().zip(&p.word_attention) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn stride_sampling() {
        let frames: Vec<usize> = (0..10).collect();
        assert_eq!(sample_frames(&frames, 10, FrameSampling::Stride).unwrap(), frames);
        assert_eq!(sample_frames(&frames, 2, FrameSampling::Stride).unwrap(), vec![0, 5]);
        assert_eq!(sample_frames(&frames[..3], 8, FrameSampling::Stride).unwrap(), vec![0, 1, 2]);
        assert!(sample_frames::<usize>(&[], 3, FrameSampling::Stride).is_err());
    }

    #[test]
    fn seeded_sampling_is_sorted_and_stable() {
        let frames: Vec<usize> = (0..40).collect();
        let mode = FrameSampling::Seeded { seed: 9 };
        let a = sample_frames(&frames, 7, mode).unwrap();
        assert_eq!(a, sample_frames(&frames, 7, mode).unwrap());
        assert_eq!(a.len(), 7);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn global_condition_single_frame_single_word() {
        let f = col(&[0.4, 0.1]);
        let w = col(&[-0.2, 0.7]);
        let proj0 = ProjectionPair {
            frame: Matrix::from_rows(&[[0.5, 0.1], [0.2, -0.3]]),
            word: Matrix::from_rows(&[[0.9, 0.0], [0.1, 1.1]]),
        };
        let (v0, p0) = global_condition(std::slice::from_ref(&f), std::slice::from_ref(&w), &proj0, 4, FrameSampling::Stride).unwrap();
        assert_eq!((v0, p0), (f, w));
    }

    #[test]
    fn global_condition_without_subsampling_is_condition_pair() {
        let f = vec![col(&[0.4, 0.1]), col(&[0.3, -0.6]), col(&[0.05, 0.2])];
        let w = vec![col(&[-0.2, 0.7]), col(&[0.5, 0.5])];
        let proj0 = ProjectionPair {
            frame: Matrix::from_rows(&[[0.5, 0.1], [0.2, -0.3]]),
            word: Matrix::from_rows(&[[0.9, 0.0], [0.1, 1.1]]),
        };
        let (v0, p0) = global_condition(&f, &w, &proj0, 8, FrameSampling::Stride).unwrap();
        let p = condition_pair(&f, &w, &proj0).unwrap();
        assert_eq!((v0, p0), (p.cond_clip, p.cond_sentence));
    }

    #[test]
    fn global_condition_two_clip_trace() {
        // Clip 1 = frames 0..2, clip 2 = frames 2..4; n_f = 2 keeps frames 0 and 2.
        let frames = vec![col(&[1.0, 0.0]), col(&[0.6, 0.8]), col(&[0.0, 1.0]), col(&[-0.6, 0.8])];
        let words = vec![col(&[1.0, 0.0])];
        let (v0, p0) = global_condition(&frames, &words, &ProjectionPair::identity(2), 2, FrameSampling::Stride).unwrap();
        // Kept frames e1, e2 against word e1: I = [[1], [0]], mu_c = softmax([1, 0]).
        let e = 1f64.exp();
        let mu = [e / (e + 1.0), 1.0 / (e + 1.0)];
        assert!(v0.max_abs_diff(&col(&[mu[0], mu[1]])) < 1e-15);
        assert_eq!(p0, col(&[1.0, 0.0]));
    }

    #[test]
    fn mismatched_state_dim_is_rejected() {
        let r = interaction_matrix(&[col(&[1.0, 0.0, 0.0])], &[col(&[1.0, 0.0])], &ProjectionPair::identity(2));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
