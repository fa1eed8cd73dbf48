//! Static shortlist, conditioned reranking, R@K / median rank, and
//! attention explanations.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::uniform_pool;
use crate::data::{Dataset, ParagraphRecord, VideoRecord};
use crate::diffcore::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{
    encode_clip_vars, encode_paragraph, encode_sentence_vars, encode_video, MatchMode, ModelOptions, ModelParams,
    ModelVars, PairConditioner, PairScorer,
};
use crate::seqenc::{gru_encode, GruVars};

pub const DEFAULT_SHORTLIST: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Paragraph queries against a video corpus.
    T2v,
    /// Video queries against a paragraph corpus.
    V2t,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2v" => Ok(Direction::T2v),
            "v2t" => Ok(Direction::V2t),
            other => Err(Error::Config(format!("unknown direction `{other}` (t2v|v2t)"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::T2v => "t2v",
            Direction::V2t => "v2t",
        })
    }
}

// ---------------------------------------------------------------------------
// Static stage

fn static_sequence(tape: &mut Tape, gru: &GruVars, zero: Var, parts: Vec<Vec<Var>>) -> Result<Var> {
    let pooled = parts
        .iter()
        .map(|states| uniform_pool(tape, states))
        .collect::<Result<Vec<_>>>()?;
    let outer = gru_encode(tape, gru, &pooled, zero)?;
    tape.max_of(&outer)
}

/// Query-independent video embedding: uniform pooling inside every clip,
/// zero initial state, max-pooled `GRU_v` outputs.
pub fn static_embed_video(video: &VideoRecord, params: &ModelParams) -> Result<Matrix> {
    if video.clips.is_empty() {
        return Err(Error::Empty("static_embed_video"));
    }
    let mut tape = Tape::new();
    let mv = params.register(&mut tape);
    let parts = video
        .clips
        .iter()
        .map(|c| encode_clip_vars(&mut tape, &mv, c))
        .collect::<Result<Vec<_>>>()?;
    let out = static_sequence(&mut tape, &mv.gru_v, mv.zero_state(), parts)?;
    Ok(tape.value(out).clone())
}

/// Paragraph counterpart of [`static_embed_video`].
pub fn static_embed_paragraph(paragraph: &ParagraphRecord, params: &ModelParams) -> Result<Matrix> {
    if paragraph.sentences.is_empty() {
        return Err(Error::Empty("static_embed_paragraph"));
    }
    let mut tape = Tape::new();
    let mv = params.register(&mut tape);
    let parts = paragraph
        .sentences
        .iter()
        .map(|s| encode_sentence_vars(&mut tape, &mv, s))
        .collect::<Result<Vec<_>>>()?;
    let out = static_sequence(&mut tape, &mv.gru_p, mv.zero_state(), parts)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticIndex {
    pub ids: Vec<String>,
    pub embeddings: Vec<Matrix>,
}

impl StaticIndex {
    pub fn videos(videos: &[&VideoRecord], params: &ModelParams) -> Result<Self> {
        let embeddings = videos
            .par_iter()
            .map(|v| static_embed_video(v, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(StaticIndex {
            ids: videos.iter().map(|v| v.id.clone()).collect(),
            embeddings,
        })
    }

    pub fn paragraphs(paragraphs: &[&ParagraphRecord], params: &ModelParams) -> Result<Self> {
        let embeddings = paragraphs
            .par_iter()
            .map(|p| static_embed_paragraph(p, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(StaticIndex {
            ids: paragraphs.iter().map(|p| p.id.clone()).collect(),
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `exp(-||q - e||)`.
pub fn static_similarity(q: &Matrix, e: &Matrix) -> f64 {
    (-q.zip_map(e, |a, b| a - b).norm()).exp()
}

/// Descending score, ties by ascending id.
fn by_score_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Every index position ordered by static similarity to `query`.
pub fn static_order(query: &Matrix, index: &StaticIndex) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(Error::Empty("static index"));
    }
    let scores: Vec<f64> = index.embeddings.iter().map(|e| static_similarity(query, e)).collect();
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| by_score_then_id((scores[a], &index.ids[a]), (scores[b], &index.ids[b])));
    Ok(order)
}

/// Top-`k` ids by static similarity.
pub fn shortlist(query: &Matrix, index: &StaticIndex, k: usize) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::Config("shortlist size must be >= 1".into()));
    }
    let order = static_order(query, index)?;
    Ok(order.into_iter().take(k).map(|i| index.ids[i].clone()).collect())
}

/// Sorts `(id, score)` by descending score, ties by ascending id.
pub fn sort_scored(items: &mut [(String, f64)]) {
    items.sort_by(|a, b| by_score_then_id((a.1, &a.0), (b.1, &b.0)));
}

// ---------------------------------------------------------------------------
// Conditioned stage

/// Conditioned similarity of a video and a paragraph.
pub fn conditioned_score(
    video: &VideoRecord,
    paragraph: &ParagraphRecord,
    params: &ModelParams,
    opts: &ModelOptions,
    mode: MatchMode,
) -> Result<f64> {
    PairScorer::new(params, *opts, mode, &[video], &[paragraph])?.score(0, 0)
}

/// A query on one side and candidates from the other.
pub enum Query<'a> {
    Paragraph(&'a ParagraphRecord, Vec<&'a VideoRecord>),
    Video(&'a VideoRecord, Vec<&'a ParagraphRecord>),
}

/// Candidates scored against the query and sorted.
pub fn rerank(query: Query<'_>, params: &ModelParams, opts: &ModelOptions, mode: MatchMode) -> Result<Vec<(String, f64)>> {
    let mut scored = match query {
        Query::Paragraph(p, cands) => {
            if cands.is_empty() {
                return Err(Error::Empty("rerank candidates"));
            }
            let mut s = PairScorer::new(params, *opts, mode, &cands, &[p])?;
            cands
                .iter()
                .enumerate()
                .map(|(k, v)| Ok((v.id.clone(), s.score(k, 0)?)))
                .collect::<Result<Vec<_>>>()?
        }
        Query::Video(v, cands) => {
            if cands.is_empty() {
                return Err(Error::Empty("rerank candidates"));
            }
            let mut s = PairScorer::new(params, *opts, mode, &[v], &cands)?;
            cands
                .iter()
                .enumerate()
                .map(|(k, p)| Ok((p.id.clone(), s.score(0, k)?)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    sort_scored(&mut scored);
    Ok(scored)
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Fraction of queries with ground truth at rank `<= K`.
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
}

/// Recall at `ks` and the median of the 1-based ground-truth ranks.
pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> Result<RetrievalMetrics> {
    if ranks.is_empty() {
        return Err(Error::Empty("metrics_from_ranks"));
    }
    let n = ranks.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let m = sorted.len();
    let median_rank = if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    };
    Ok(RetrievalMetrics { recall_at, median_rank })
}

/// `K` values reported for a corpus: 1, 5, 10 and the corpus size.
pub fn standard_ks(corpus: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k < corpus).collect();
    ks.push(corpus);
    ks
}

/// Ground-truth rank of query `q` (whose match is corpus item `q`) in a
/// `queries x corpus` score matrix, ties by ascending id.
pub fn ranks_from_scores(scores: &Matrix, ids: &[String]) -> Result<Vec<usize>> {
    if scores.rows() > scores.cols() || ids.len() != scores.cols() {
        return Err(Error::LengthMismatch {
            what: "ranks_from_scores",
            left: scores.cols(),
            right: ids.len(),
        });
    }
    Ok((0..scores.rows())
        .map(|q| {
            let gt = scores.get(q, q);
            1 + (0..scores.cols())
                .filter(|&k| {
                    let s = scores.get(q, k);
                    s > gt || (s == gt && ids[k] < ids[q])
                })
                .count()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub mode: MatchMode,
    pub k_shortlist: usize,
    pub queries: usize,
    pub metrics: RetrievalMetrics,
    /// Ground-truth rank per query, in dataset order.
    pub ranks: Vec<usize>,
}

/// Two-stage ranking over one dataset. Conditioned scores are computed on
/// demand and cached, keyed by `(video, paragraph)` position.
pub struct Evaluator<'a> {
    ds: &'a Dataset,
    params: &'a ModelParams,
    opts: ModelOptions,
    mode: MatchMode,
    videos: StaticIndex,
    paragraphs: StaticIndex,
    cache: HashMap<(usize, usize), f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(ds: &'a Dataset, params: &'a ModelParams, opts: ModelOptions, mode: MatchMode) -> Result<Self> {
        if ds.len() < 2 {
            return Err(Error::Config(format!("evaluation needs >= 2 pairs, got {}", ds.len())));
        }
        ds.validate()?;
        let vids: Vec<&VideoRecord> = ds.pairs.iter().map(|p| &p.video).collect();
        let paras: Vec<&ParagraphRecord> = ds.pairs.iter().map(|p| &p.paragraph).collect();
        Ok(Evaluator {
            ds,
            params,
            opts,
            mode,
            videos: StaticIndex::videos(&vids, params)?,
            paragraphs: StaticIndex::paragraphs(&paras, params)?,
            cache: HashMap::new(),
        })
    }

    pub fn static_videos(&self) -> &StaticIndex {
        &self.videos
    }

    pub fn static_paragraphs(&self) -> &StaticIndex {
        &self.paragraphs
    }

    /// Fills the cache for every `(video, paragraph)` pair, grouping the
    /// work by video so each worker encodes its video once.
    fn ensure(&mut self, pairs: BTreeSet<(usize, usize)>) -> Result<()> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (v, p) in pairs {
            if !self.cache.contains_key(&(v, p)) {
                groups.entry(v).or_default().push(p);
            }
        }
        let ds = self.ds;
        let (params, opts, mode) = (self.params, self.opts, self.mode);
        let groups: Vec<(usize, Vec<usize>)> = groups.into_iter().collect();
        let computed = groups
            .par_iter()
            .map(|(v, ps)| {
                let paras: Vec<&ParagraphRecord> = ps.iter().map(|&p| &ds.pairs[p].paragraph).collect();
                let mut scorer = PairScorer::new(params, opts, mode, &[&ds.pairs[*v].video], &paras)?;
                ps.iter()
                    .enumerate()
                    .map(|(k, &p)| Ok(((*v, p), scorer.score(0, k)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        self.cache.extend(computed.into_iter().flatten());
        Ok(())
    }

    fn pair_key(direction: Direction, query: usize, item: usize) -> (usize, usize) {
        match direction {
            Direction::T2v => (item, query),
            Direction::V2t => (query, item),
        }
    }

    fn sides(&self, direction: Direction) -> (&StaticIndex, &StaticIndex) {
        match direction {
            Direction::T2v => (&self.paragraphs, &self.videos),
            Direction::V2t => (&self.videos, &self.paragraphs),
        }
    }

    /// Full ranking (corpus positions) for every query.
    pub fn rankings(&mut self, direction: Direction, k_shortlist: usize) -> Result<Vec<Vec<usize>>> {
        if k_shortlist == 0 {
            return Err(Error::Config("shortlist size must be >= 1".into()));
        }
        let n = self.ds.len();
        let (queries, corpus) = self.sides(direction);
        let static_orders = (0..n)
            .into_par_iter()
            .map(|q| static_order(&queries.embeddings[q], corpus))
            .collect::<Result<Vec<_>>>()?;
        let k = k_shortlist.min(n);
        let needed = static_orders
            .iter()
            .enumerate()
            .flat_map(|(q, order)| order[..k].iter().map(move |&i| Self::pair_key(direction, q, i)))
            .collect();
        self.ensure(needed)?;

        let corpus = self.sides(direction).1;
        Ok(static_orders
            .into_iter()
            .enumerate()
            .map(|(q, order)| {
                let mut block: Vec<usize> = order[..k].to_vec();
                block.sort_by(|&a, &b| {
                    let sa = self.cache[&Self::pair_key(direction, q, a)];
                    let sb = self.cache[&Self::pair_key(direction, q, b)];
                    by_score_then_id((sa, &corpus.ids[a]), (sb, &corpus.ids[b]))
                });
                block.extend_from_slice(&order[k..]);
                block
            })
            .collect())
    }

    pub fn evaluate(&mut self, direction: Direction, k_shortlist: usize) -> Result<EvalReport> {
        let rankings = self.rankings(direction, k_shortlist)?;
        let ranks: Vec<usize> = rankings
            .iter()
            .enumerate()
            .map(|(q, r)| 1 + r.iter().position(|&i| i == q).expect("ranking is a permutation"))
            .collect();
        Ok(EvalReport {
            direction,
            mode: self.mode,
            k_shortlist,
            queries: ranks.len(),
            metrics: metrics_from_ranks(&ranks, &standard_ks(self.ds.len()))?,
            ranks,
        })
    }

    /// Every conditioned score as a `queries x corpus` matrix.
    pub fn score_matrix(&mut self, direction: Direction) -> Result<Matrix> {
        let n = self.ds.len();
        let all = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
        self.ensure(all)?;
        let mut m = Matrix::zeros(n, n);
        for q in 0..n {
            for i in 0..n {
                m.set(q, i, self.cache[&Self::pair_key(direction, q, i)]);
            }
        }
        Ok(m)
    }
}

/// One-shot evaluation.
pub fn evaluate(
    ds: &Dataset,
    params: &ModelParams,
    opts: &ModelOptions,
    direction: Direction,
    k_shortlist: usize,
    mode: MatchMode,
) -> Result<EvalReport> {
    Evaluator::new(ds, params, *opts, mode)?.evaluate(direction, k_shortlist)
}

// ---------------------------------------------------------------------------
// Explanation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipExplanation {
    pub clip: usize,
    /// Sentence this clip was conditioned on.
    pub sentence: usize,
    pub frame_attention: Vec<f64>,
    /// Two most attended frames, most attended first.
    pub top_frames: Vec<usize>,
    /// Two least attended frames, least attended first.
    pub bottom_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceExplanation {
    pub sentence: usize,
    /// Clip this sentence was conditioned on.
    pub clip: usize,
    pub word_attention: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub video: String,
    pub paragraph: String,
    pub similarity: f64,
    pub clips: Vec<ClipExplanation>,
    pub sentences: Vec<SentenceExplanation>,
}

fn extreme_frames(mu: &[f64], top: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mu.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = mu[a].partial_cmp(&mu[b]).unwrap_or(Ordering::Equal);
        (if top { o.reverse() } else { o }).then(a.cmp(&b))
    });
    idx.truncate(2);
    idx
}

/// Per-clip frame attention and per-sentence word attention of the
/// conditioned forward pass for one pair.
pub fn explain(video: &VideoRecord, paragraph: &ParagraphRecord, params: &ModelParams, opts: &ModelOptions) -> Result<Explanation> {
    let mut tape = Tape::new();
    let mv: ModelVars = params.register(&mut tape);
    let ev = encode_video(&mut tape, &mv, video, opts)?;
    let ep = encode_paragraph(&mut tape, &mv, paragraph, opts)?;
    let mut pc = PairConditioner::new(&ev, &ep, opts);
    let (n_c, n_s) = (pc.clip_count(), pc.sentence_count());
    let mut clips = Vec::with_capacity(n_c);
    for j in 0..n_c {
        let s = j.min(n_s - 1);
        let c = pc.get(&mut tape, j, s)?;
        let mu = tape.value(c.frame_attention).data().to_vec();
        clips.push(ClipExplanation {
            clip: j,
            sentence: s,
            top_frames: extreme_frames(&mu, true),
            bottom_frames: extreme_frames(&mu, false),
            frame_attention: mu,
        });
    }
    let mut sentences = Vec::with_capacity(n_s);
    for j in 0..n_s {
        let c_idx = j.min(n_c - 1);
        let c = pc.get(&mut tape, c_idx, j)?;
        sentences.push(SentenceExplanation {
            sentence: j,
            clip: c_idx,
            word_attention: tape.value(c.word_attention).data().to_vec(),
            words: paragraph.words(j),
        });
    }
    Ok(Explanation {
        video: video.id.clone(),
        paragraph: paragraph.id.clone(),
        similarity: conditioned_score(video, paragraph, params, opts, MatchMode::Paragraph)?,
        clips,
        sentences,
    })
}

/// Tab-separated grid, one line per row; rows may differ in length.
pub fn attention_grid(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    out
}

impl Explanation {
    /// Frame attention grid: one row per clip.
    pub fn frame_heatmap(&self) -> String {
        attention_grid(&self.clips.iter().map(|c| c.frame_attention.clone()).collect::<Vec<_>>())
    }

    /// Word attention grid: one row per sentence.
    pub fn word_heatmap(&self) -> String {
        attention_grid(&self.sentences.iter().map(|s| s.word_attention.clone()).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};
    use crate::hierarchy::{encode_pair, AblationFlags, Dims};
    use crate::seqenc::GruParams;

    fn corpus(n: usize) -> Dataset {
        gen_synthetic(&SyntheticConfig {
            n_pairs: n,
            clips_per_video: (2, 3),
            frames_per_clip: (2, 4),
            words_per_sentence: (2, 4),
            d_f: 5,
            d_w: 5,
            n_concepts: 4,
            seed: 11,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .0
    }

    fn params() -> ModelParams {
        ModelParams::init(Dims::new(5, 5, 6, 8), 3).unwrap()
    }

    fn index(points: &[f64]) -> StaticIndex {
        StaticIndex {
            ids: (0..points.len()).map(|i| format!("id{i}")).collect(),
            embeddings: points.iter().map(|&p| Matrix::column(&[p, 0.0])).collect(),
        }
    }

    #[test]
    fn shortlist_hand_distances() {
        let idx = index(&[3.0, 1.0, 4.0, 0.0, 2.0]);
        let q = Matrix::column(&[0.0, 0.0]);
        assert_eq!(shortlist(&q, &idx, 2).unwrap(), vec!["id3", "id1"]);
        assert_eq!(shortlist(&q, &idx, 9).unwrap().len(), 5);
        assert!(shortlist(&q, &idx, 0).is_err());
        assert!(shortlist(&q, &index(&[]), 1).is_err());
    }

    #[test]
    fn shortlist_ties_by_id() {
        let idx = index(&[1.0, -1.0, 1.0]);
        let q = Matrix::column(&[0.0, 0.0]);
        assert_eq!(shortlist(&q, &idx, 3).unwrap(), vec!["id0", "id1", "id2"]);
    }

    #[test]
    fn shortlist_exact_match_first() {
        let idx = index(&[0.5, 0.7, 0.2]);
        assert_eq!(shortlist(&Matrix::column(&[0.7, 0.0]), &idx, 1).unwrap(), vec!["id1"]);
    }

    #[test]
    fn metric_examples() {
        let m = metrics_from_ranks(&[1, 3, 7, 2], &[1, 5, 10]).unwrap();
        assert_eq!(m.recall_at[&1], 0.25);
        assert_eq!(m.recall_at[&5], 0.75);
        assert_eq!(m.recall_at[&10], 1.0);
        assert_eq!(m.median_rank, 2.5);
        let perfect = metrics_from_ranks(&[1, 1, 1], &[1]).unwrap();
        assert_eq!((perfect.recall_at[&1], perfect.median_rank), (1.0, 1.0));
    }

    #[test]
    fn ranks_from_scores_tie_rule() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let s = Matrix::from_rows(&[[0.5, 0.5, 0.1], [0.5, 0.5, 0.9], [0.2, 0.3, 0.1]]);
        assert_eq!(ranks_from_scores(&s, &ids).unwrap(), vec![1, 3, 3]);
    }

    #[test]
    fn static_embedding_single_frame() {
        let p = params();
        let v = VideoRecord {
            id: "v".into(),
            clips: vec![Matrix::from_rows(&[[0.1, 0.2, -0.3, 0.4, 0.0]])],
        };
        let e = static_embed_video(&v, &p).unwrap();
        let h = p.gru_c.step(&v.clips[0].row_as_column(0), &Matrix::zeros(6, 1)).unwrap();
        let expected = p.gru_v.step(&h, &Matrix::zeros(6, 1)).unwrap();
        assert_eq!(e, expected);
    }

    #[test]
    fn static_equals_full_pipeline_when_attention_is_irrelevant() {
        // Zero input weights with zero biases keep every frame state equal
        // to the first one; a large update bias makes each state the
        // candidate, which is then the same for every position.
        let mut p = params();
        p.gru_c = GruParams::zeros(5, 6);
        p.gru_s = GruParams::zeros(5, 6);
        for g in [&mut p.gru_c, &mut p.gru_s] {
            g.b_z = Matrix::filled(6, 1, 40.0);
            g.b_h = Matrix::column(&[0.3, -0.2, 0.1, 0.5, -0.4, 0.2]);
        }
        let ds = corpus(2);
        let pair = &ds.pairs[0];
        let opts = ModelOptions {
            ablation: AblationFlags {
                no_global: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut para = pair.paragraph.clone();
        para.sentences.truncate(pair.video.clips.len().min(para.sentences.len()));
        let mut video = pair.video.clone();
        video.clips.truncate(para.sentences.len());
        let full = encode_pair(&video, &para, &p, &opts).unwrap();
        assert!(full.video_vec.max_abs_diff(&static_embed_video(&video, &p).unwrap()) < 1e-12);
        assert!(full.para_vec.max_abs_diff(&static_embed_paragraph(&para, &p).unwrap()) < 1e-12);
    }

    #[test]
    fn rerank_matches_brute_force() {
        let ds = corpus(4);
        let p = params();
        let opts = ModelOptions::default();
        let q = &ds.pairs[1].paragraph;
        let cands: Vec<&VideoRecord> = ds.pairs.iter().map(|x| &x.video).collect();
        let got = rerank(Query::Paragraph(q, cands), &p, &opts, MatchMode::Paragraph).unwrap();
        let mut oracle: Vec<(String, f64)> = ds
            .pairs
            .iter()
            .map(|x| {
                let e = encode_pair(&x.video, q, &p, &opts).unwrap();
                let d = e.video_vec.zip_map(&e.para_vec, |a, b| a - b).norm();
                (x.video.id.clone(), (-d).exp())
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(got, oracle);
    }

    #[test]
    fn rerank_single_candidate() {
        let ds = corpus(2);
        let p = params();
        let got = rerank(
            Query::Video(&ds.pairs[0].video, vec![&ds.pairs[1].paragraph]),
            &p,
            &ModelOptions::default(),
            MatchMode::Sentence,
        )
        .unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, ds.pairs[1].paragraph.id);
    }

    #[test]
    fn full_shortlist_equals_exhaustive() {
        let ds = corpus(6);
        let p = params();
        let mut ev = Evaluator::new(&ds, &p, ModelOptions::default(), MatchMode::Paragraph).unwrap();
        for dir in [Direction::T2v, Direction::V2t] {
            let rep = ev.evaluate(dir, 6).unwrap();
            let scores = ev.score_matrix(dir).unwrap();
            let ids = &ev.sides(dir).1.ids.clone();
            assert_eq!(rep.ranks, ranks_from_scores(&scores, ids).unwrap());
        }
    }

    #[test]
    fn explain_single_frame_and_simplex() {
        let ds = corpus(2);
        let p = params();
        let mut v = ds.pairs[0].video.clone();
        v.clips[0] = Matrix::from_rows(&[v.clips[0].row_slice(0).to_vec()]);
        let e = explain(&v, &ds.pairs[0].paragraph, &p, &ModelOptions::default()).unwrap();
        assert_eq!(e.clips[0].frame_attention, vec![1.0]);
        assert_eq!(e.clips[0].top_frames, vec![0]);
        assert_eq!(e.clips[0].bottom_frames, vec![0]);
        for c in &e.clips {
            assert!((c.frame_attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for s in &e.sentences {
            assert!((s.word_attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(s.words.is_some());
        }
        assert_eq!(e.frame_heatmap().lines().count(), e.clips.len());
    }
}
