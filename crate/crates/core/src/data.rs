//! Video/paragraph records, on-disk corpus format, synthetic corpora and
//! uniform segmentation for the weakly supervised setting.
//!
//! A corpus on disk is a JSON manifest plus one raw little-endian `f32`
//! blob per video and per paragraph. Blobs are row-major with one row per
//! frame (or word); the manifest records `(start, len)` row ranges for each
//! clip (or sentence).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "condmatch-manifest-v1";

/// A video as a sequence of clips; each clip is `frames x d_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub clips: Vec<Matrix>,
}

/// A paragraph as a sequence of sentences; each sentence is `words x d_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParagraphRecord {
    pub id: String,
    pub sentences: Vec<Matrix>,
    /// One string per sentence, whitespace-tokenized in word order.
    pub raw_text: Option<Vec<String>>,
}

fn columns(m: &Matrix) -> Vec<Matrix> {
    (0..m.rows()).map(|r| m.row_as_column(r)).collect()
}

fn concat_rows(parts: &[Matrix]) -> Matrix {
    let cols = parts.first().map_or(0, |m| m.cols());
    let rows = parts.iter().map(|m| m.rows()).sum();
    let data = parts.iter().flat_map(|m| m.data().iter().copied()).collect();
    Matrix::from_vec(rows, cols, data).expect("consistent widths")
}

impl VideoRecord {
    pub fn feature_dim(&self) -> usize {
        self.clips.first().map_or(0, |c| c.cols())
    }

    pub fn frame_count(&self) -> usize {
        self.clips.iter().map(|c| c.rows()).sum()
    }

    /// Frames of clip `j` as `d_f x 1` vectors.
    pub fn clip_frames(&self, j: usize) -> Vec<Matrix> {
        columns(&self.clips[j])
    }

    /// All frames, in temporal order, as one `frames x d_f` matrix.
    pub fn flattened(&self) -> Matrix {
        concat_rows(&self.clips)
    }

    /// The same video with every clip merged into one.
    pub fn as_single_clip(&self) -> VideoRecord {
        VideoRecord {
            id: self.id.clone(),
            clips: vec![self.flattened()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::record(&self.id, "video has no clips"));
        }
        let d = self.feature_dim();
        for (j, c) in self.clips.iter().enumerate() {
            if c.rows() == 0 {
                return Err(Error::record(&self.id, format!("clip {j} has no frames")));
            }
            if c.cols() != d {
                return Err(Error::record(&self.id, format!("clip {j} has width {} != {d}", c.cols())));
            }
        }
        Ok(())
    }
}

impl ParagraphRecord {
    pub fn feature_dim(&self) -> usize {
        self.sentences.first().map_or(0, |s| s.cols())
    }

    pub fn word_count(&self) -> usize {
        self.sentences.iter().map(|s| s.rows()).sum()
    }

    pub fn sentence_words(&self, j: usize) -> Vec<Matrix> {
        columns(&self.sentences[j])
    }

    pub fn flattened(&self) -> Matrix {
        concat_rows(&self.sentences)
    }

    /// The same paragraph with every sentence merged into one.
    pub fn as_single_sentence(&self) -> ParagraphRecord {
        ParagraphRecord {
            id: self.id.clone(),
            sentences: vec![self.flattened()],
            raw_text: self.raw_text.as_ref().map(|t| vec![t.join(" ")]),
        }
    }

    /// Raw tokens of sentence `j`, when they line up with the feature rows.
    pub fn words(&self, j: usize) -> Option<Vec<String>> {
        let text = self.raw_text.as_ref()?.get(j)?;
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        (tokens.len() == self.sentences[j].rows()).then_some(tokens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::record(&self.id, "paragraph has no sentences"));
        }
        let d = self.feature_dim();
        for (j, s) in self.sentences.iter().enumerate() {
            if s.rows() == 0 {
                return Err(Error::record(&self.id, format!("sentence {j} has no words")));
            }
            if s.cols() != d {
                return Err(Error::record(&self.id, format!("sentence {j} has width {} != {d}", s.cols())));
            }
        }
        if let Some(t) = &self.raw_text {
            if t.len() != self.sentences.len() {
                return Err(Error::record(&self.id, "raw_text length differs from sentence count"));
            }
        }
        Ok(())
    }
}

/// A matching video/paragraph pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub id: String,
    pub video: VideoRecord,
    pub paragraph: ParagraphRecord,
    /// Planted concept ids per clip, present for synthetic corpora.
    pub concepts: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_f: usize,
    pub d_w: usize,
    pub pairs: Vec<PairRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.pairs {
            p.video.validate()?;
            p.paragraph.validate()?;
            if p.video.feature_dim() != self.d_f {
                return Err(Error::record(&p.id, format!("frame width {} != d_f {}", p.video.feature_dim(), self.d_f)));
            }
            if p.paragraph.feature_dim() != self.d_w {
                return Err(Error::record(&p.id, format!("word width {} != d_w {}", p.paragraph.feature_dim(), self.d_w)));
            }
        }
        let mut ids: Vec<&str> = self.pairs.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::record(w[0], "duplicate id"));
        }
        Ok(())
    }

    /// First `n` pairs and the remainder.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.pairs.len());
        let head = Dataset {
            d_f: self.d_f,
            d_w: self.d_w,
            pairs: self.pairs[..n].to_vec(),
        };
        let tail = Dataset {
            d_f: self.d_f,
            d_w: self.d_w,
            pairs: self.pairs[n..].to_vec(),
        };
        (head, tail)
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.pairs
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Manifest I/O

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub d_f: usize,
    pub d_w: usize,
    pub pairs: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub video_file: String,
    pub paragraph_file: String,
    /// `(start_row, row_count)` per clip.
    pub clips: Vec<(usize, usize)>,
    /// `(start_row, row_count)` per sentence.
    pub sentences: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_sentences: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<Vec<Vec<usize>>>,
}

pub fn write_f32_blob(path: &Path, rows: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(rows.len() * 4);
    for v in rows.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_blob(path: &Path, cols: usize, record: &str) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if cols == 0 || bytes.len() % (4 * cols) != 0 {
        return Err(Error::record(
            record,
            format!("{}: {} bytes is not a whole number of {cols}-wide f32 rows", path.display(), bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(data.len() / cols, cols, data)
}

fn slice_rows(all: &Matrix, bounds: &[(usize, usize)], record: &str, kind: &'static str) -> Result<Vec<Matrix>> {
    bounds
        .iter()
        .map(|&(start, len)| {
            if len == 0 || start.checked_add(len).is_none_or(|end| end > all.rows()) {
                return Err(Error::BoundaryOverflow {
                    record: record.to_string(),
                    kind,
                    start,
                    len,
                    rows: all.rows(),
                });
            }
            let data = all.data()[start * all.cols()..(start + len) * all.cols()].to_vec();
            Matrix::from_vec(len, all.cols(), data)
        })
        .collect()
}

fn bounds_of(parts: &[Matrix]) -> Vec<(usize, usize)> {
    let mut start = 0;
    parts
        .iter()
        .map(|p| {
            let b = (start, p.rows());
            start += p.rows();
            b
        })
        .collect()
}

/// Reads a manifest and every feature blob it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format {
            what: "manifest",
            message: format!("unsupported format `{}`", manifest.format),
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for e in &manifest.pairs {
        let frames = read_f32_blob(&base.join(&e.video_file), manifest.d_f, &e.id)?;
        let words = read_f32_blob(&base.join(&e.paragraph_file), manifest.d_w, &e.id)?;
        let video = VideoRecord {
            id: e.id.clone(),
            clips: slice_rows(&frames, &e.clips, &e.id, "clip")?,
        };
        let paragraph = ParagraphRecord {
            id: e.id.clone(),
            sentences: slice_rows(&words, &e.sentences, &e.id, "sentence")?,
            raw_text: e.raw_sentences.clone(),
        };
        pairs.push(PairRecord {
            id: e.id.clone(),
            video,
            paragraph,
            concepts: e.concepts.clone(),
        });
    }
    let ds = Dataset {
        d_f: manifest.d_f,
        d_w: manifest.d_w,
        pairs,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes feature blobs under `dir/features/` and the manifest at
/// `dir/manifest_name`. Returns the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path, manifest_name: &str) -> Result<PathBuf> {
    ds.validate()?;
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut entries = Vec::with_capacity(ds.pairs.len());
    for p in &ds.pairs {
        let video_file = format!("features/{}.video.f32", p.id);
        let paragraph_file = format!("features/{}.paragraph.f32", p.id);
        write_f32_blob(&dir.join(&video_file), &p.video.flattened())?;
        write_f32_blob(&dir.join(&paragraph_file), &p.paragraph.flattened())?;
        entries.push(ManifestEntry {
            id: p.id.clone(),
            video_file,
            paragraph_file,
            clips: bounds_of(&p.video.clips),
            sentences: bounds_of(&p.paragraph.sentences),
            raw_sentences: p.paragraph.raw_text.clone(),
            concepts: p.concepts.clone(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        d_f: ds.d_f,
        d_w: ds.d_w,
        pairs: entries,
    };
    let path = dir.join(manifest_name);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    /// Inclusive ranges.
    pub clips_per_video: (usize, usize),
    pub frames_per_clip: (usize, usize),
    pub words_per_sentence: (usize, usize),
    pub d_f: usize,
    pub d_w: usize,
    pub n_concepts: usize,
    pub noise_sigma: f64,
    pub distractor_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_pairs: 96,
            clips_per_video: (3, 3),
            frames_per_clip: (4, 8),
            words_per_sentence: (4, 8),
            d_f: 16,
            d_w: 16,
            n_concepts: 8,
            noise_sigma: 0.1,
            distractor_fraction: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("clips_per_video", self.clips_per_video),
            ("frames_per_clip", self.frames_per_clip),
            ("words_per_sentence", self.words_per_sentence),
        ];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) must satisfy 1 <= min <= max")));
            }
        }
        if self.n_concepts < 2 {
            return Err(Error::Config("n_concepts must be >= 2".into()));
        }
        if self.d_f == 0 || self.d_w == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return Err(Error::Config(format!(
                "distractor_fraction must lie in [0, 1), got {}",
                self.distractor_fraction
            )));
        }
        Ok(())
    }
}

const FILLER_WORDS: [&str; 8] = ["the", "a", "then", "and", "of", "is", "with", "while"];

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy_row<R: Rng>(base: &[f64], noise: Option<&Normal<f64>>, rng: &mut R) -> Vec<f64> {
    base.iter()
        .map(|&b| {
            let v = match noise {
                Some(n) => b + n.sample(rng),
                None => b,
            };
            v as f32 as f64
        })
        .collect()
}

/// Latent structure shared by every pair of a synthetic corpus.
#[derive(Clone, Debug)]
pub struct ConceptSpace {
    /// Unit vectors in frame space, one per concept.
    pub frame_concepts: Vec<Vec<f64>>,
    /// Unit vectors in word space indexed by word-concept id.
    pub word_concepts: Vec<Vec<f64>>,
    /// Frame concept `k` is described by word concept `correspondence[k]`.
    pub correspondence: Vec<usize>,
    pub filler: Vec<Vec<f64>>,
}

/// Draws a corpus with planted cross-modal correlations.
///
/// Each clip carries one or two concepts; its frames are the concept's
/// frame-space vector plus Gaussian noise, except for a `distractor_fraction`
/// of frames drawn from concepts the clip does not carry. The matching
/// sentence names each carried concept at least once in word space and pads
/// with filler words. Everything is stored at `f32` precision.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, ConceptSpace)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let round = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x as f32 as f64).collect() };
    let frame_concepts: Vec<Vec<f64>> = (0..cfg.n_concepts).map(|_| round(unit_vector(cfg.d_f, &mut rng))).collect();
    let word_concepts: Vec<Vec<f64>> = (0..cfg.n_concepts).map(|_| round(unit_vector(cfg.d_w, &mut rng))).collect();
    let mut correspondence: Vec<usize> = (0..cfg.n_concepts).collect();
    correspondence.shuffle(&mut rng);
    let filler: Vec<Vec<f64>> = (0..FILLER_WORDS.len()).map(|_| round(unit_vector(cfg.d_w, &mut rng))).collect();
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("valid sigma"));
    let width = cfg.n_pairs.saturating_sub(1).to_string().len().max(4);

    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let id = format!("pair-{i:0width$}");
        let n_clips = rng.random_range(cfg.clips_per_video.0..=cfg.clips_per_video.1);
        let mut clips = Vec::with_capacity(n_clips);
        let mut sentences = Vec::with_capacity(n_clips);
        let mut raw = Vec::with_capacity(n_clips);
        let mut concepts = Vec::with_capacity(n_clips);
        for _ in 0..n_clips {
            let k = if rng.random_bool(0.5) { 1 } else { 2 };
            let mut carried = rand::seq::index::sample(&mut rng, cfg.n_concepts, k).into_vec();
            carried.sort_unstable();
            let others: Vec<usize> = (0..cfg.n_concepts).filter(|c| !carried.contains(c)).collect();

            let n_frames = rng.random_range(cfg.frames_per_clip.0..=cfg.frames_per_clip.1);
            let mut rows = Vec::with_capacity(n_frames * cfg.d_f);
            for t in 0..n_frames {
                let concept = if rng.random::<f64>() < cfg.distractor_fraction {
                    others[rng.random_range(0..others.len())]
                } else {
                    carried[t % carried.len()]
                };
                rows.extend(noisy_row(&frame_concepts[concept], noise.as_ref(), &mut rng));
            }
            clips.push(Matrix::from_vec(n_frames, cfg.d_f, rows)?);

            let n_words = rng.random_range(cfg.words_per_sentence.0..=cfg.words_per_sentence.1);
            // Slot contents: Ok(concept) or Err(filler index).
            let mut slots: Vec<std::result::Result<usize, usize>> = carried.iter().map(|&c| Ok(c)).collect();
            while slots.len() < n_words {
                if rng.random_bool(0.5) {
                    slots.push(Err(rng.random_range(0..filler.len())));
                } else {
                    slots.push(Ok(carried[rng.random_range(0..carried.len())]));
                }
            }
            slots.shuffle(&mut rng);
            let mut rows = Vec::with_capacity(slots.len() * cfg.d_w);
            let mut tokens = Vec::with_capacity(slots.len());
            for s in &slots {
                match *s {
                    Ok(c) => {
                        rows.extend(noisy_row(&word_concepts[correspondence[c]], noise.as_ref(), &mut rng));
                        tokens.push(format!("concept{c}"));
                    }
                    Err(f) => {
                        rows.extend(noisy_row(&filler[f], noise.as_ref(), &mut rng));
                        tokens.push(FILLER_WORDS[f].to_string());
                    }
                }
            }
            sentences.push(Matrix::from_vec(slots.len(), cfg.d_w, rows)?);
            raw.push(tokens.join(" "));
            concepts.push(carried);
        }
        pairs.push(PairRecord {
            id: id.clone(),
            video: VideoRecord { id: id.clone(), clips },
            paragraph: ParagraphRecord {
                id: id.clone(),
                sentences,
                raw_text: Some(raw),
            },
            concepts: Some(concepts),
        });
    }
    let ds = Dataset {
        d_f: cfg.d_f,
        d_w: cfg.d_w,
        pairs,
    };
    Ok((
        ds,
        ConceptSpace {
            frame_concepts,
            word_concepts,
            correspondence,
            filler,
        },
    ))
}

// ---------------------------------------------------------------------------
// Weak supervision

/// Sizes of `n` contiguous segments covering `total` items; the first
/// `total % n` segments take one extra item.
pub fn segment_sizes(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("segment count must be >= 1".into()));
    }
    if n > total {
        return Err(Error::Config(format!("cannot split {total} frames into {n} segments")));
    }
    let (base, extra) = (total / n, total % n);
    Ok((0..n).map(|i| base + usize::from(i < extra)).collect())
}

/// Replaces ground-truth clip boundaries by `n` equal-length segments and
/// aligns the paragraph to `n` sentences: extra sentences are dropped, and a
/// short paragraph repeats its last sentence.
pub fn segment_uniform(
    video: &VideoRecord,
    paragraph: &ParagraphRecord,
    n: usize,
) -> Result<(VideoRecord, ParagraphRecord)> {
    video.validate()?;
    paragraph.validate()?;
    let flat = video.flattened();
    let sizes = segment_sizes(flat.rows(), n)?;
    let mut clips = Vec::with_capacity(n);
    let mut start = 0;
    for len in sizes {
        let data = flat.data()[start * flat.cols()..(start + len) * flat.cols()].to_vec();
        clips.push(Matrix::from_vec(len, flat.cols(), data)?);
        start += len;
    }

    let last = paragraph.sentences.len() - 1;
    let pick = |j: usize| j.min(last);
    let sentences = (0..n).map(|j| paragraph.sentences[pick(j)].clone()).collect();
    let raw_text = paragraph
        .raw_text
        .as_ref()
        .map(|t| (0..n).map(|j| t[pick(j)].clone()).collect());
    Ok((
        VideoRecord {
            id: video.id.clone(),
            clips,
        },
        ParagraphRecord {
            id: paragraph.id.clone(),
            sentences,
            raw_text,
        },
    ))
}
