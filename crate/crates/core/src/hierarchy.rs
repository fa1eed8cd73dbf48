//! Model assembly: clip/sentence encoders, pairwise conditioning, the
//! video/paragraph recurrence with global initial states, max pooling and
//! the trainable match score.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    condition_sides, prepare_frames, prepare_words, sample_frames, CondVars, ConditionedPair, FrameSampling,
    FrameSide, Pooling, ProjectionPair, ProjectionVars, WordSide,
};
use crate::data::{ParagraphRecord, VideoRecord};
use crate::diffcore::{Matrix, Parameters, Tape, Var, NORM_FLOOR};
use crate::error::{Error, Result};
use crate::seqenc::{glorot_uniform, gru_encode, GruParams, GruVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_f: usize,
    pub d_w: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_vp: usize,
    /// Frames sampled from the whole video for global conditioning.
    pub n_f: usize,
}

impl Dims {
    /// `d_h` and `d_vp` are tied to `d_e`.
    pub fn new(d_f: usize, d_w: usize, d_e: usize, n_f: usize) -> Self {
        Dims {
            d_f,
            d_w,
            d_e,
            d_h: d_e,
            d_vp: d_e,
            n_f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.d_w == 0 || self.d_e == 0 || self.n_f == 0 {
            return Err(Error::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if self.d_h != self.d_e || self.d_vp != self.d_e {
            return Err(Error::Config(format!(
                "d_h ({}) and d_vp ({}) must equal d_e ({})",
                self.d_h, self.d_vp, self.d_e
            )));
        }
        Ok(())
    }
}

/// Component removals, one per ablation row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Uniform `1/n` weights instead of interaction attention.
    pub no_attn: bool,
    /// Zero initial states for the video/paragraph recurrences.
    pub no_global: bool,
    /// Use the global embeddings `(v0, p0)` as the final vectors.
    pub no_second_h: bool,
    /// Plain cosine instead of the `U`/`V` match score.
    pub no_m_match: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub ablation: AblationFlags,
    pub frame_sampling: FrameSampling,
}

impl ModelOptions {
    pub fn pooling(&self) -> Pooling {
        if self.ablation.no_attn {
            Pooling::Uniform
        } else {
            Pooling::Attention
        }
    }

    fn needs_global(&self) -> bool {
        !self.ablation.no_global || self.ablation.no_second_h
    }
}

/// Every learned matrix of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub gru_c: GruParams,
    pub gru_s: GruParams,
    pub gru_v: GruParams,
    pub gru_p: GruParams,
    /// `A`, `B`
    pub proj: ProjectionPair,
    /// `A0`, `B0`
    pub proj0: ProjectionPair,
    pub match_u: Matrix,
    pub match_v: Matrix,
}

impl ModelParams {
    /// Seeded Glorot-uniform initialization, rounded to storage precision.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d_e;
        let gru_c = GruParams::init(dims.d_f, d, &mut rng);
        let gru_s = GruParams::init(dims.d_w, d, &mut rng);
        let gru_v = GruParams::init(d, dims.d_h, &mut rng);
        let gru_p = GruParams::init(d, dims.d_h, &mut rng);
        let mut square = || glorot_uniform(d, d, &mut rng);
        let proj = ProjectionPair {
            frame: square(),
            word: square(),
        };
        let proj0 = ProjectionPair {
            frame: square(),
            word: square(),
        };
        let match_u = square();
        let match_v = square();
        let mut p = ModelParams {
            dims,
            gru_c,
            gru_s,
            gru_v,
            gru_p,
            proj,
            proj0,
            match_u,
            match_v,
        };
        p.snap_to_storage();
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d = self.dims.d_e;
        let expect = [
            (&self.gru_c, self.dims.d_f, d),
            (&self.gru_s, self.dims.d_w, d),
            (&self.gru_v, d, self.dims.d_h),
            (&self.gru_p, d, self.dims.d_h),
        ];
        for (g, input, hidden) in expect {
            g.validate()?;
            if (g.input_dim, g.hidden_dim) != (input, hidden) {
                return Err(Error::Shape {
                    primitive: "model_params(gru)",
                    lhs: (g.hidden_dim, g.input_dim),
                    rhs: (hidden, input),
                });
            }
        }
        for (_, m) in self.named() {
            if !m.is_finite() {
                return Err(Error::NonFinite("model_params"));
            }
        }
        for m in [&self.proj.frame, &self.proj.word, &self.proj0.frame, &self.proj0.word, &self.match_u, &self.match_v] {
            if m.shape() != (d, d) {
                return Err(Error::Shape {
                    primitive: "model_params(square)",
                    lhs: m.shape(),
                    rhs: (d, d),
                });
            }
        }
        Ok(())
    }

    /// Rounds every entry through `f32`.
    pub fn snap_to_storage(&mut self) {
        for (_, m) in self.named_mut() {
            m.round_to_f32();
        }
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let d = self.dims.d_e;
        ModelVars {
            dims: self.dims,
            gru_c: self.gru_c.register(tape, "gru_c"),
            gru_s: self.gru_s.register(tape, "gru_s"),
            gru_v: self.gru_v.register(tape, "gru_v"),
            gru_p: self.gru_p.register(tape, "gru_p"),
            proj: self.proj.register(tape, "A", "B"),
            proj0: self.proj0.register(tape, "A0", "B0"),
            match_u: tape.param("U", &self.match_u),
            match_v: tape.param("V", &self.match_v),
            zero_e: tape.constant(Matrix::zeros(d, 1)),
            zero_h: tape.constant(Matrix::zeros(self.dims.d_h, 1)),
        }
    }
}

impl Parameters for ModelParams {
    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.gru_c.named_with("gru_c");
        out.extend(self.gru_s.named_with("gru_s"));
        out.extend(self.gru_v.named_with("gru_v"));
        out.extend(self.gru_p.named_with("gru_p"));
        out.push(("A".into(), &self.proj.frame));
        out.push(("B".into(), &self.proj.word));
        out.push(("A0".into(), &self.proj0.frame));
        out.push(("B0".into(), &self.proj0.word));
        out.push(("U".into(), &self.match_u));
        out.push(("V".into(), &self.match_v));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.gru_c.named_with_mut("gru_c");
        out.extend(self.gru_s.named_with_mut("gru_s"));
        out.extend(self.gru_v.named_with_mut("gru_v"));
        out.extend(self.gru_p.named_with_mut("gru_p"));
        out.push(("A".into(), &mut self.proj.frame));
        out.push(("B".into(), &mut self.proj.word));
        out.push(("A0".into(), &mut self.proj0.frame));
        out.push(("B0".into(), &mut self.proj0.word));
        out.push(("U".into(), &mut self.match_u));
        out.push(("V".into(), &mut self.match_v));
        out
    }
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub dims: Dims,
    pub gru_c: GruVars,
    pub gru_s: GruVars,
    pub gru_v: GruVars,
    pub gru_p: GruVars,
    pub proj: ProjectionVars,
    pub proj0: ProjectionVars,
    pub match_u: Var,
    pub match_v: Var,
    zero_e: Var,
    zero_h: Var,
}

impl ModelVars {
    pub fn zero_state(&self) -> Var {
        self.zero_e
    }
}

fn feature_columns(tape: &mut Tape, rows: &Matrix, dim: usize, what: &'static str) -> Result<Vec<Var>> {
    if rows.rows() == 0 {
        return Err(Error::Empty(what));
    }
    if rows.cols() != dim {
        return Err(Error::Shape {
            primitive: what,
            lhs: (rows.cols(), 1),
            rhs: (dim, 1),
        });
    }
    Ok((0..rows.rows()).map(|r| tape.constant(rows.row_as_column(r))).collect())
}

/// `GRU_c` states of one clip given as `frames x d_f` rows.
pub fn encode_clip_vars(tape: &mut Tape, mv: &ModelVars, frames: &Matrix) -> Result<Vec<Var>> {
    let xs = feature_columns(tape, frames, mv.dims.d_f, "encode_clip")?;
    gru_encode(tape, &mv.gru_c, &xs, mv.zero_e)
}

/// `GRU_s` states of one sentence given as `words x d_w` rows.
pub fn encode_sentence_vars(tape: &mut Tape, mv: &ModelVars, words: &Matrix) -> Result<Vec<Var>> {
    let xs = feature_columns(tape, words, mv.dims.d_w, "encode_sentence")?;
    gru_encode(tape, &mv.gru_s, &xs, mv.zero_e)
}

/// A video encoded once and reusable against any paragraph on the same tape.
#[derive(Clone, Debug)]
pub struct EncodedVideo {
    pub clip_states: Vec<Vec<Var>>,
    pub clips: Vec<FrameSide>,
    pub global: Option<FrameSide>,
}

#[derive(Clone, Debug)]
pub struct EncodedParagraph {
    pub sentence_states: Vec<Vec<Var>>,
    pub sentences: Vec<WordSide>,
    pub global: Option<WordSide>,
}

pub fn encode_video(tape: &mut Tape, mv: &ModelVars, video: &VideoRecord, opts: &ModelOptions) -> Result<EncodedVideo> {
    if video.clips.is_empty() {
        return Err(Error::Empty("encode_video"));
    }
    let mut clip_states = Vec::with_capacity(video.clips.len());
    let mut clips = Vec::with_capacity(video.clips.len());
    for clip in &video.clips {
        let states = encode_clip_vars(tape, mv, clip)?;
        clips.push(prepare_frames(tape, &states, mv.proj.frame)?);
        clip_states.push(states);
    }
    let global = if opts.needs_global() {
        let all: Vec<Var> = clip_states.iter().flatten().copied().collect();
        let sampled = sample_frames(&all, mv.dims.n_f, opts.frame_sampling)?;
        Some(prepare_frames(tape, &sampled, mv.proj0.frame)?)
    } else {
        None
    };
    Ok(EncodedVideo {
        clip_states,
        clips,
        global,
    })
}

pub fn encode_paragraph(
    tape: &mut Tape,
    mv: &ModelVars,
    paragraph: &ParagraphRecord,
    opts: &ModelOptions,
) -> Result<EncodedParagraph> {
    if paragraph.sentences.is_empty() {
        return Err(Error::Empty("encode_paragraph"));
    }
    let mut sentence_states = Vec::with_capacity(paragraph.sentences.len());
    let mut sentences = Vec::with_capacity(paragraph.sentences.len());
    for s in &paragraph.sentences {
        let states = encode_sentence_vars(tape, mv, s)?;
        sentences.push(prepare_words(tape, &states, mv.proj.word)?);
        sentence_states.push(states);
    }
    let global = if opts.needs_global() {
        let all: Vec<Var> = sentence_states.iter().flatten().copied().collect();
        Some(prepare_words(tape, &all, mv.proj0.word)?)
    } else {
        None
    };
    Ok(EncodedParagraph {
        sentence_states,
        sentences,
        global,
    })
}

/// Memoized clip/sentence conditioning for one (video, paragraph) pair.
pub struct PairConditioner<'a> {
    pub video: &'a EncodedVideo,
    pub paragraph: &'a EncodedParagraph,
    pooling: Pooling,
    cache: HashMap<(usize, usize), CondVars>,
}

impl<'a> PairConditioner<'a> {
    pub fn new(video: &'a EncodedVideo, paragraph: &'a EncodedParagraph, opts: &ModelOptions) -> Self {
        PairConditioner {
            video,
            paragraph,
            pooling: opts.pooling(),
            cache: HashMap::new(),
        }
    }

    pub fn clip_count(&self) -> usize {
        self.video.clips.len()
    }

    pub fn sentence_count(&self) -> usize {
        self.paragraph.sentences.len()
    }

    /// Clip `clip` conditioned on sentence `sentence`.
    pub fn get(&mut self, tape: &mut Tape, clip: usize, sentence: usize) -> Result<CondVars> {
        if let Some(v) = self.cache.get(&(clip, sentence)) {
            return Ok(*v);
        }
        let v = condition_sides(
            tape,
            &self.video.clips[clip],
            &self.paragraph.sentences[sentence],
            self.pooling,
        )?;
        self.cache.insert((clip, sentence), v);
        Ok(v)
    }

    /// Conditioned pairs computed so far, in index order.
    pub fn computed(&self) -> Vec<((usize, usize), CondVars)> {
        let mut out: Vec<_> = self.cache.iter().map(|(k, v)| (*k, *v)).collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }
}

/// Tape handles of a co-dependent video/paragraph embedding.
#[derive(Clone, Debug)]
pub struct JointVars {
    pub video_vec: Var,
    pub para_vec: Var,
    /// `GRU_v` / `GRU_p` outputs; empty when the second level is ablated.
    pub video_states: Vec<Var>,
    pub para_states: Vec<Var>,
    pub global: Option<CondVars>,
}

/// Second-level encoding of one pair.
///
/// Clip `j` is conditioned on sentence `j`; when the counts differ, trailing
/// elements are conditioned on the other side's last element and the shorter
/// conditioned sequence is zero-padded to the longer length.
pub fn encode_joint(tape: &mut Tape, mv: &ModelVars, pc: &mut PairConditioner<'_>, opts: &ModelOptions) -> Result<JointVars> {
    let (n_c, n_s) = (pc.clip_count(), pc.sentence_count());
    let global = if opts.needs_global() {
        let (v, p) = (
            pc.video.global.as_ref().ok_or(Error::Empty("global video side"))?,
            pc.paragraph.global.as_ref().ok_or(Error::Empty("global paragraph side"))?,
        );
        Some(condition_sides(tape, v, p, opts.pooling())?)
    } else {
        None
    };

    if opts.ablation.no_second_h {
        let g = global.expect("global is computed without the second level");
        return Ok(JointVars {
            video_vec: g.cond_clip,
            para_vec: g.cond_sentence,
            video_states: Vec::new(),
            para_states: Vec::new(),
            global,
        });
    }

    let n = n_c.max(n_s);
    let mut clip_seq = Vec::with_capacity(n);
    let mut sent_seq = Vec::with_capacity(n);
    for j in 0..n {
        clip_seq.push(if j < n_c {
            pc.get(tape, j, j.min(n_s - 1))?.cond_clip
        } else {
            mv.zero_e
        });
        sent_seq.push(if j < n_s {
            pc.get(tape, j.min(n_c - 1), j)?.cond_sentence
        } else {
            mv.zero_e
        });
    }
    let (h0_v, h0_p) = match &global {
        Some(g) if !opts.ablation.no_global => (g.cond_clip, g.cond_sentence),
        _ => (mv.zero_h, mv.zero_h),
    };
    let video_states = gru_encode(tape, &mv.gru_v, &clip_seq, h0_v)?;
    let para_states = gru_encode(tape, &mv.gru_p, &sent_seq, h0_p)?;
    let video_vec = tape.max_of(&video_states)?;
    let para_vec = tape.max_of(&para_states)?;
    Ok(JointVars {
        video_vec,
        para_vec,
        video_states,
        para_states,
        global,
    })
}

/// `M(x, y) = cos(U x, V y)`, or `cos(x, y)` with the match module ablated.
pub fn match_score_vars(tape: &mut Tape, mv: &ModelVars, x: Var, y: Var, ablation: &AblationFlags) -> Result<Var> {
    let (px, py) = if ablation.no_m_match {
        (x, y)
    } else {
        (tape.matmul(mv.match_u, x)?, tape.matmul(mv.match_v, y)?)
    };
    let ux = tape.normalize_cols(px)?;
    let vy = tape.normalize_cols(py)?;
    let uxt = tape.transpose(ux)?;
    tape.matmul(uxt, vy)
}

/// Euclidean distance between the two joint vectors, `1 x 1`.
pub fn joint_distance(tape: &mut Tape, j: &JointVars) -> Result<Var> {
    let diff = tape.sub(j.video_vec, j.para_vec)?;
    tape.norm(diff)
}

// ---------------------------------------------------------------------------
// Plain-matrix entry points

fn check_columns(xs: &[Matrix], dim: usize, what: &'static str) -> Result<Matrix> {
    if xs.is_empty() {
        return Err(Error::Empty(what));
    }
    let mut rows = Vec::with_capacity(xs.len());
    for x in xs {
        if x.shape() != (dim, 1) {
            return Err(Error::Shape {
                primitive: what,
                lhs: x.shape(),
                rhs: (dim, 1),
            });
        }
        rows.push(x.data().to_vec());
    }
    Ok(Matrix::from_rows(&rows))
}

/// `GRU_c` states for `d_f x 1` frame features.
pub fn encode_clip(frames: &[Matrix], params: &ModelParams) -> Result<Vec<Matrix>> {
    let rows = check_columns(frames, params.dims.d_f, "encode_clip")?;
    let mut tape = Tape::new();
    let mv = params.register(&mut tape);
    let states = encode_clip_vars(&mut tape, &mv, &rows)?;
    Ok(states.iter().map(|s| tape.value(*s).clone()).collect())
}

/// `GRU_s` states for `d_w x 1` word features.
pub fn encode_sentence(words: &[Matrix], params: &ModelParams) -> Result<Vec<Matrix>> {
    let rows = check_columns(words, params.dims.d_w, "encode_sentence")?;
    let mut tape = Tape::new();
    let mv = params.register(&mut tape);
    let states = encode_sentence_vars(&mut tape, &mv, &rows)?;
    Ok(states.iter().map(|s| tape.value(*s).clone()).collect())
}

fn unit(m: &Matrix) -> Matrix {
    let n = m.norm();
    if n < NORM_FLOOR {
        Matrix::zeros(m.rows(), m.cols())
    } else {
        m.map(|v| v / n)
    }
}

/// Cosine of `U x` and `V y`; zero when either projection vanishes.
pub fn match_score(x: &Matrix, y: &Matrix, u: &Matrix, v: &Matrix) -> Result<f64> {
    let ux = unit(&u.matmul(x)?);
    let vy = unit(&v.matmul(y)?);
    if ux.shape() != vy.shape() {
        return Err(Error::Shape {
            primitive: "match_score",
            lhs: ux.shape(),
            rhs: vy.shape(),
        });
    }
    Ok(ux.data().iter().zip(vy.data()).map(|(a, b)| a * b).sum())
}

/// Clip/sentence similarity: match score of the mutually conditioned
/// clip and sentence vectors. Inputs are `frames x d_f` and `words x d_w`.
pub fn clip_sentence_similarity(clip: &Matrix, sentence: &Matrix, params: &ModelParams, opts: &ModelOptions) -> Result<f64> {
    let video = VideoRecord {
        id: String::new(),
        clips: vec![clip.clone()],
    };
    let paragraph = ParagraphRecord {
        id: String::new(),
        sentences: vec![sentence.clone()],
        raw_text: None,
    };
    let mut scorer = PairScorer::new(params, *opts, MatchMode::Sentence, &[&video], &[&paragraph])?;
    scorer.score(0, 0)
}

/// Video/sentence mode: all clips concatenated into one clip and all
/// sentences into one sentence, scored with the first level only.
pub fn single_clip_similarity(
    video: &VideoRecord,
    paragraph: &ParagraphRecord,
    params: &ModelParams,
    opts: &ModelOptions,
) -> Result<f64> {
    let mut scorer = PairScorer::new(params, *opts, MatchMode::Sentence, &[video], &[paragraph])?;
    scorer.score(0, 0)
}

/// Materialized video/paragraph embedding of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub video_vec: Matrix,
    pub para_vec: Matrix,
    pub video_states: Vec<Matrix>,
    pub para_states: Vec<Matrix>,
    /// Conditioned clip/sentence pairs keyed by `(clip, sentence)`.
    pub per_pair: Vec<((usize, usize), ConditionedPair)>,
    /// `(v0, p0)` when computed.
    pub global: Option<(Matrix, Matrix)>,
}

pub fn encode_pair(
    video: &VideoRecord,
    paragraph: &ParagraphRecord,
    params: &ModelParams,
    opts: &ModelOptions,
) -> Result<JointEmbedding> {
    let mut tape = Tape::new();
    let mv = params.register(&mut tape);
    let ev = encode_video(&mut tape, &mv, video, opts)?;
    let ep = encode_paragraph(&mut tape, &mv, paragraph, opts)?;
    let mut pc = PairConditioner::new(&ev, &ep, opts);
    let j = encode_joint(&mut tape, &mv, &mut pc, opts)?;
    let values = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>();
    Ok(JointEmbedding {
        video_vec: tape.value(j.video_vec).clone(),
        para_vec: tape.value(j.para_vec).clone(),
        video_states: values(&j.video_states),
        para_states: values(&j.para_states),
        per_pair: pc
            .computed()
            .iter()
            .map(|(k, v)| (*k, ConditionedPair::from_vars(&tape, v)))
            .collect(),
        global: j
            .global
            .map(|g| (tape.value(g.cond_clip).clone(), tape.value(g.cond_sentence).clone())),
    })
}

/// `exp(-||v - p||)`, in `(0, 1]`.
pub fn video_paragraph_similarity(emb: &JointEmbedding) -> f64 {
    let diff = emb.video_vec.zip_map(&emb.para_vec, |a, b| a - b);
    (-diff.norm()).exp()
}

/// Which similarity a retrieval run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Video/paragraph embeddings, `exp(-||v - p||)`.
    #[default]
    Paragraph,
    /// Single concatenated clip against single concatenated sentence, `M(c, s)`.
    Sentence,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paragraph" => Ok(MatchMode::Paragraph),
            "sentence" => Ok(MatchMode::Sentence),
            other => Err(Error::Config(format!("unknown mode `{other}` (paragraph|sentence)"))),
        }
    }
}

/// Scores many (video, paragraph) combinations while encoding every item
/// only once. Pair-specific nodes are dropped after each score.
pub struct PairScorer {
    tape: Tape,
    mv: ModelVars,
    opts: ModelOptions,
    mode: MatchMode,
    videos: Vec<EncodedVideo>,
    paragraphs: Vec<EncodedParagraph>,
    base: usize,
}

impl PairScorer {
    pub fn new(
        params: &ModelParams,
        opts: ModelOptions,
        mode: MatchMode,
        videos: &[&VideoRecord],
        paragraphs: &[&ParagraphRecord],
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let mv = params.register(&mut tape);
        let mut ev = Vec::with_capacity(videos.len());
        for v in videos {
            ev.push(match mode {
                MatchMode::Paragraph => encode_video(&mut tape, &mv, v, &opts)?,
                MatchMode::Sentence => encode_video(&mut tape, &mv, &v.as_single_clip(), &opts)?,
            });
        }
        let mut ep = Vec::with_capacity(paragraphs.len());
        for p in paragraphs {
            ep.push(match mode {
                MatchMode::Paragraph => encode_paragraph(&mut tape, &mv, p, &opts)?,
                MatchMode::Sentence => encode_paragraph(&mut tape, &mv, &p.as_single_sentence(), &opts)?,
            });
        }
        let base = tape.mark();
        Ok(PairScorer {
            tape,
            mv,
            opts,
            mode,
            videos: ev,
            paragraphs: ep,
            base,
        })
    }

    /// Similarity of video `video` and paragraph `paragraph` (indices into
    /// the slices given at construction).
    pub fn score(&mut self, video: usize, paragraph: usize) -> Result<f64> {
        let ev = self.videos.get(video).ok_or(Error::UnknownId(format!("video #{video}")))?;
        let ep = self
            .paragraphs
            .get(paragraph)
            .ok_or(Error::UnknownId(format!("paragraph #{paragraph}")))?;
        let mut pc = PairConditioner::new(ev, ep, &self.opts);
        let tape = &mut self.tape;
        let out = match self.mode {
            MatchMode::Paragraph => {
                let j = encode_joint(tape, &self.mv, &mut pc, &self.opts)?;
                let d = joint_distance(tape, &j)?;
                (-tape.value(d).item()).exp()
            }
            MatchMode::Sentence => {
                let c = pc.get(tape, 0, 0)?;
                let m = match_score_vars(tape, &self.mv, c.cond_clip, c.cond_sentence, &self.opts.ablation)?;
                tape.value(m).item()
            }
        };
        tape.truncate(self.base);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::condition_pair;

    fn dims(d: usize) -> Dims {
        Dims::new(3, 4, d, 8)
    }

    fn feature_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        glorot_uniform(n, d, &mut rng).map(|v| v * 2.0)
    }

    fn video(clips: &[usize], seed: u64) -> VideoRecord {
        VideoRecord {
            id: "v".into(),
            clips: clips.iter().enumerate().map(|(j, &n)| feature_rows(n, 3, seed + j as u64)).collect(),
        }
    }

    fn paragraph(sents: &[usize], seed: u64) -> ParagraphRecord {
        ParagraphRecord {
            id: "p".into(),
            sentences: sents.iter().enumerate().map(|(j, &n)| feature_rows(n, 4, seed + 50 + j as u64)).collect(),
            raw_text: None,
        }
    }

    #[test]
    fn dims_must_tie_hidden_sizes() {
        let mut d = dims(8);
        assert!(d.validate().is_ok());
        d.d_h = 16;
        assert!(d.validate().is_err());
    }

    #[test]
    fn encode_clip_single_frame_is_one_step() {
        let p = ModelParams::init(dims(5), 1).unwrap();
        let f = Matrix::column(&[0.3, -0.2, 0.9]);
        let states = encode_clip(std::slice::from_ref(&f), &p).unwrap();
        assert_eq!(states, vec![p.gru_c.step(&f, &Matrix::zeros(5, 1)).unwrap()]);
    }

    #[test]
    fn encode_clip_zero_weights() {
        let mut p = ModelParams::init(dims(5), 1).unwrap();
        p.gru_c = GruParams::zeros(3, 5);
        let frames = vec![Matrix::column(&[1.0, 2.0, 3.0]); 4];
        assert!(encode_clip(&frames, &p).unwrap().iter().all(|s| s == &Matrix::zeros(5, 1)));
    }

    #[test]
    fn encode_clip_matches_chained_steps() {
        let p = ModelParams::init(dims(5), 2).unwrap();
        let frames: Vec<Matrix> = (0..4).map(|t| Matrix::column(&[0.1 * t as f64, -0.3, 0.5 - 0.2 * t as f64])).collect();
        let states = encode_clip(&frames, &p).unwrap();
        let mut h = Matrix::zeros(5, 1);
        for (t, f) in frames.iter().enumerate() {
            h = p.gru_c.step(f, &h).unwrap();
            assert_eq!(states[t], h);
        }
    }

    #[test]
    fn encode_sentence_mirrors_clip() {
        let p = ModelParams::init(dims(5), 3).unwrap();
        let words: Vec<Matrix> = (0..3).map(|t| Matrix::column(&[0.2, -0.1 * t as f64, 0.4, 0.05])).collect();
        let states = encode_sentence(&words, &p).unwrap();
        let mut h = Matrix::zeros(5, 1);
        for (t, w) in words.iter().enumerate() {
            h = p.gru_s.step(w, &h).unwrap();
            assert_eq!(states[t], h);
        }
        assert!(encode_sentence(&[Matrix::column(&[1.0, 2.0, 3.0])], &p).is_err());
        assert!(encode_sentence(&[], &p).is_err());
    }

    #[test]
    fn match_score_examples() {
        let i = Matrix::identity(2);
        let x = Matrix::column(&[3.0, 4.0]);
        assert!((match_score(&x, &x, &i, &i).unwrap() - 1.0).abs() < 1e-15);
        let y = Matrix::column(&[4.0, 3.0]);
        assert!((match_score(&x, &y, &i, &i).unwrap() - 0.96).abs() < 1e-15);
        let u = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5]]);
        let v = Matrix::from_rows(&[[1.1, 0.2], [-0.4, 0.9]]);
        let a = match_score(&x, &y, &u, &v).unwrap();
        let b = match_score(&x.map(|t| 2.0 * t), &y, &u, &v).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert_eq!(match_score(&Matrix::zeros(2, 1), &y, &u, &v).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_identity_similarity_is_one() {
        let mut p = ModelParams::init(Dims::new(2, 2, 2, 4), 0).unwrap();
        p.proj = ProjectionPair::identity(2);
        p.match_u = Matrix::identity(2);
        p.match_v = Matrix::identity(2);
        p.gru_s = p.gru_c.clone();
        let f = Matrix::from_rows(&[[0.5, -0.25]]);
        let s = clip_sentence_similarity(&f, &f, &p, &ModelOptions::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn clip_sentence_similarity_is_symmetric_with_tied_weights() {
        let mut p = ModelParams::init(Dims::new(3, 3, 4, 4), 9).unwrap();
        p.gru_s = p.gru_c.clone();
        p.proj.word = p.proj.frame.clone();
        p.match_v = p.match_u.clone();
        let a = feature_rows(4, 3, 1);
        let b = feature_rows(3, 3, 2);
        let opts = ModelOptions::default();
        let ab = clip_sentence_similarity(&a, &b, &p, &opts).unwrap();
        let ba = clip_sentence_similarity(&b, &a, &p, &opts).unwrap();
        assert!((ab - ba).abs() < 1e-14, "{ab} vs {ba}");
    }

    #[test]
    fn clip_sentence_similarity_composes_condition_and_match() {
        let p = ModelParams::init(dims(5), 4).unwrap();
        let clip = feature_rows(4, 3, 7);
        let sent = feature_rows(3, 4, 8);
        let got = clip_sentence_similarity(&clip, &sent, &p, &ModelOptions::default()).unwrap();
        let f = encode_clip(&(0..4).map(|r| clip.row_as_column(r)).collect::<Vec<_>>(), &p).unwrap();
        let w = encode_sentence(&(0..3).map(|r| sent.row_as_column(r)).collect::<Vec<_>>(), &p).unwrap();
        let c = condition_pair(&f, &w, &p.proj).unwrap();
        let oracle = match_score(&c.cond_clip, &c.cond_sentence, &p.match_u, &p.match_v).unwrap();
        assert!((got - oracle).abs() < 1e-14);
    }

    #[test]
    fn single_pair_without_global_is_one_gru_step() {
        let p = ModelParams::init(dims(5), 5).unwrap();
        let opts = ModelOptions {
            ablation: AblationFlags {
                no_global: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let v = video(&[3], 1);
        let para = paragraph(&[4], 1);
        let emb = encode_pair(&v, &para, &p, &opts).unwrap();
        let c = &emb.per_pair[0].1;
        let h = p.gru_v.step(&c.cond_clip, &Matrix::zeros(5, 1)).unwrap();
        assert_eq!(emb.video_states, vec![h.clone()]);
        assert_eq!(emb.video_vec, h);
        assert!(emb.global.is_none());
    }

    #[test]
    fn unequal_counts_pad_with_zero() {
        let p = ModelParams::init(dims(5), 6).unwrap();
        let emb = encode_pair(&video(&[3, 2, 4], 2), &paragraph(&[3, 2], 2), &p, &ModelOptions::default()).unwrap();
        assert_eq!(emb.video_states.len(), 3);
        assert_eq!(emb.para_states.len(), 3);
        // Third clip is conditioned on the last sentence.
        let keys: Vec<_> = emb.per_pair.iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, vec![(0, 0), (1, 1), (2, 1)]);
        // Third paragraph input is the zero vector.
        let (_, p0) = emb.global.clone().unwrap();
        let s0 = &emb.per_pair[0].1.cond_sentence;
        let s1 = &emb.per_pair[1].1.cond_sentence;
        let mut h = p.gru_p.step(s0, &p0).unwrap();
        h = p.gru_p.step(s1, &h).unwrap();
        h = p.gru_p.step(&Matrix::zeros(5, 1), &h).unwrap();
        assert_eq!(emb.para_states[2], h);
    }

    #[test]
    fn max_pool_is_coordinatewise_max() {
        let p = ModelParams::init(dims(6), 7).unwrap();
        let emb = encode_pair(&video(&[2, 3, 2], 3), &paragraph(&[3, 3, 2], 3), &p, &ModelOptions::default()).unwrap();
        for r in 0..6 {
            let m = emb.video_states.iter().map(|s| s.get(r, 0)).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(emb.video_vec.get(r, 0), m);
            let m = emb.para_states.iter().map(|s| s.get(r, 0)).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(emb.para_vec.get(r, 0), m);
        }
    }

    #[test]
    fn without_second_level_returns_global() {
        let p = ModelParams::init(dims(5), 8).unwrap();
        let opts = ModelOptions {
            ablation: AblationFlags {
                no_second_h: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let emb = encode_pair(&video(&[2, 2], 4), &paragraph(&[2, 3], 4), &p, &opts).unwrap();
        let (v0, p0) = emb.global.clone().unwrap();
        assert_eq!((emb.video_vec, emb.para_vec), (v0, p0));
    }

    #[test]
    fn similarity_examples() {
        let base = JointEmbedding {
            video_vec: Matrix::column(&[1.0, 2.0]),
            para_vec: Matrix::column(&[1.0, 2.0]),
            video_states: vec![],
            para_states: vec![],
            per_pair: vec![],
            global: None,
        };
        assert_eq!(video_paragraph_similarity(&base), 1.0);
        let one = JointEmbedding {
            para_vec: Matrix::column(&[1.0, 3.0]),
            ..base.clone()
        };
        assert!((video_paragraph_similarity(&one) - 0.36788).abs() < 1e-5);
        let two = JointEmbedding {
            para_vec: Matrix::column(&[1.0, 4.0]),
            ..base
        };
        assert!(video_paragraph_similarity(&two) < video_paragraph_similarity(&one));
    }

    #[test]
    fn scorer_matches_encode_pair_bit_exact() {
        let p = ModelParams::init(dims(5), 10).unwrap();
        let vids = [video(&[2, 3], 5), video(&[4], 6)];
        let paras = [paragraph(&[2, 2], 5), paragraph(&[3, 1, 2], 6)];
        let opts = ModelOptions::default();
        let mut scorer = PairScorer::new(&p, opts, MatchMode::Paragraph, &[&vids[0], &vids[1]], &[&paras[0], &paras[1]]).unwrap();
        for (i, v) in vids.iter().enumerate() {
            for (k, para) in paras.iter().enumerate() {
                let direct = video_paragraph_similarity(&encode_pair(v, para, &p, &opts).unwrap());
                assert_eq!(scorer.score(i, k).unwrap(), direct);
            }
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let p = ModelParams::init(dims(5), 11).unwrap();
        let empty = VideoRecord {
            id: "e".into(),
            clips: vec![],
        };
        assert!(encode_pair(&empty, &paragraph(&[2], 1), &p, &ModelOptions::default()).is_err());
    }
}
