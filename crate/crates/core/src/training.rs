//! Hierarchical triplet loss, batching, Adam, the epoch loop and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairRecord};
use crate::diffcore::{Gradients, Matrix, Parameters, Tape, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{
    encode_joint, encode_paragraph, encode_video, joint_distance, match_score_vars, Dims, EncodedParagraph,
    EncodedVideo, ModelOptions, ModelParams, ModelVars, PairConditioner,
};

pub const CHECKPOINT_FORMAT: &str = "condmatch-checkpoint-v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_pairs: usize,
    pub margin_video: f64,
    pub margin_clip: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub d_e: usize,
    pub n_f: usize,
    /// Use `hinge(M(pos) - M(neg) + margin)` for the clip terms.
    pub literal_clip_hinge: bool,
    pub model: ModelOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_pairs: 16,
            margin_video: 0.2,
            margin_clip: 0.2,
            learning_rate: 1e-3,
            epochs: 10,
            seed: 0,
            d_e: 32,
            n_f: 32,
            literal_clip_hinge: false,
            model: ModelOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs < 2 {
            return Err(Error::Config(format!("batch_pairs must be >= 2, got {}", self.batch_pairs)));
        }
        if !(self.margin_video >= 0.0) || !(self.margin_clip >= 0.0) {
            return Err(Error::Config("margins must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.dims(1, 1).validate()
    }

    pub fn dims(&self, d_f: usize, d_w: usize) -> Dims {
        Dims::new(d_f, d_w, self.d_e, self.n_f)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub video_term: f64,
    pub clip_intra_term: f64,
    pub clip_inter_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.video_term += other.video_term;
        self.clip_intra_term += other.clip_intra_term;
        self.clip_inter_term += other.clip_inter_term;
        self.total += other.total;
    }
}

/// Loss terms as tape handles, each `1 x 1`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub video_term: Var,
    pub clip_intra_term: Var,
    pub clip_inter_term: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            video_term: tape.value(self.video_term).item(),
            clip_intra_term: tape.value(self.clip_intra_term).item(),
            clip_inter_term: tape.value(self.clip_inter_term).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// `sum(relu(x + margin))` over the given `1 x 1` arguments.
fn hinge_sum(tape: &mut Tape, args: &[Var], margin: f64) -> Result<Var> {
    if args.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let row = tape.hcat(args)?;
    let shifted = tape.add_scalar(row, margin)?;
    let h = tape.relu(shifted)?;
    tape.sum(h)
}

/// Records the three-part loss of one batch on `tape`.
///
/// Video term: for every ordered pair `i != i'`,
/// `hinge(d(i, i) - d(i, i') + margin_video)` where `d(i, i')` is the
/// distance between video `i` and paragraph `i'` embedded jointly.
/// Clip terms: clip `j` of video `i` against sentence `j` of paragraph `i`
/// (positive) and every other sentence of paragraph `i` (intra) or every
/// sentence of every other paragraph in the batch (inter).
pub fn batch_loss_vars(tape: &mut Tape, mv: &ModelVars, batch: &[&PairRecord], cfg: &TrainConfig) -> Result<LossVars> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Config(format!("a batch needs at least 2 pairs, got {b}")));
    }
    let opts = &cfg.model;
    let videos: Vec<EncodedVideo> = batch
        .iter()
        .map(|p| encode_video(tape, mv, &p.video, opts))
        .collect::<Result<_>>()?;
    let paras: Vec<EncodedParagraph> = batch
        .iter()
        .map(|p| encode_paragraph(tape, mv, &p.paragraph, opts))
        .collect::<Result<_>>()?;

    // Clip/sentence conditioning is shared between the terms.
    let mut conds: Vec<Vec<PairConditioner<'_>>> = videos
        .iter()
        .map(|v| paras.iter().map(|p| PairConditioner::new(v, p, opts)).collect())
        .collect();

    let mut dist = vec![vec![None; b]; b];
    for i in 0..b {
        for k in 0..b {
            let j = encode_joint(tape, mv, &mut conds[i][k], opts)?;
            dist[i][k] = Some(joint_distance(tape, &j)?);
        }
    }
    let mut video_args = Vec::with_capacity(b * (b - 1));
    for i in 0..b {
        let pos = dist[i][i].expect("filled");
        for k in (0..b).filter(|&k| k != i) {
            video_args.push(tape.sub(pos, dist[i][k].expect("filled"))?);
        }
    }

    let mut intra_args = Vec::new();
    let mut inter_args = Vec::new();
    for i in 0..b {
        let n_pos = videos[i].clips.len().min(paras[i].sentences.len());
        for j in 0..n_pos {
            let c = conds[i][i].get(tape, j, j)?;
            let pos = match_score_vars(tape, mv, c.cond_clip, c.cond_sentence, &opts.ablation)?;
            for k in 0..b {
                for jn in 0..paras[k].sentences.len() {
                    if k == i && jn == j {
                        continue;
                    }
                    let c = conds[i][k].get(tape, j, jn)?;
                    let neg = match_score_vars(tape, mv, c.cond_clip, c.cond_sentence, &opts.ablation)?;
                    let arg = if cfg.literal_clip_hinge {
                        tape.sub(pos, neg)?
                    } else {
                        tape.sub(neg, pos)?
                    };
                    if k == i {
                        intra_args.push(arg);
                    } else {
                        inter_args.push(arg);
                    }
                }
            }
        }
    }

    let video_term = hinge_sum(tape, &video_args, cfg.margin_video)?;
    let clip_intra_term = hinge_sum(tape, &intra_args, cfg.margin_clip)?;
    let clip_inter_term = hinge_sum(tape, &inter_args, cfg.margin_clip)?;
    let partial = tape.add(video_term, clip_intra_term)?;
    let total = tape.add(partial, clip_inter_term)?;
    Ok(LossVars {
        video_term,
        clip_intra_term,
        clip_inter_term,
        total,
    })
}

/// Loss of one batch without gradients.
pub fn triplet_loss(batch: &[&PairRecord], params: &ModelParams, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mv = params.register(&mut tape);
    Ok(batch_loss_vars(&mut tape, &mv, batch, cfg)?.values(&tape))
}

/// Loss and gradients of one batch.
pub fn loss_and_gradients(
    batch: &[&PairRecord],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new();
    let mv = params.register(&mut tape);
    let vars = batch_loss_vars(&mut tape, &mv, batch, cfg)?;
    let grads = tape.backward(vars.total)?;
    Ok((vars.values(&tape), grads))
}

/// `b` distinct pair indices drawn without replacement.
pub fn build_batch<R: rand::Rng + ?Sized>(n_pairs: usize, b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_pairs < b {
        return Err(Error::Config(format!("dataset has {n_pairs} pairs, batch needs {b}")));
    }
    Ok(rand::seq::index::sample(rng, n_pairs, b).into_vec())
}

/// Shuffled partition of `0..n_pairs` into batches of `b`. A trailing
/// chunk with fewer than two pairs is merged into the previous batch.
pub fn epoch_batches<R: rand::Rng + ?Sized>(n_pairs: usize, b: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if b < 2 {
        return Err(Error::Config(format!("batch_pairs must be >= 2, got {b}")));
    }
    if n_pairs < b {
        return Err(Error::Config(format!("dataset has {n_pairs} pairs, batch needs {b}")));
    }
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(b).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|c| c.len() < 2) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    Ok(batches)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let named = params.named();
        AdamState {
            step: 0,
            m: named.iter().map(|(n, p)| (n.clone(), zeros(p))).collect(),
            v: named.iter().map(|(n, p)| (n.clone(), zeros(p))).collect(),
        }
    }

    pub fn snap_to_storage(&mut self) {
        for m in self.m.values_mut().chain(self.v.values_mut()) {
            m.round_to_f32();
        }
    }
}

/// One bias-corrected Adam update over every parameter. Missing gradients
/// count as zero. Nothing is modified if any gradient is non-finite.
pub fn optimizer_step<P: Parameters>(params: &mut P, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.named_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::Shape {
                primitive: "optimizer_step",
                lhs: m.shape(),
                rhs: p.shape(),
            });
        }
        let grad = grads.get(&name);
        if let Some(g) = grad {
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    primitive: "optimizer_step",
                    lhs: g.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let (m, v, p) = (m.data_mut(), v.data_mut(), p.data_mut());
        for e in 0..p.len() {
            let g = grad.map_or(0.0, |g| g.data()[e]);
            m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g;
            v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[e] / c1;
            let v_hat = v[e] / c2;
            p[e] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// One line of the per-epoch loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub video_term: f64,
    pub clip_intra_term: f64,
    pub clip_inter_term: f64,
    pub total: f64,
    pub wall_time_s: f64,
}

/// Training state that can be checkpointed at epoch boundaries.
///
/// Parameters and optimizer moments are rounded to `f32` at the end of
/// every epoch, so a saved checkpoint resumes exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, d_f: usize, d_w: usize) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(cfg.dims(d_f, d_w), cfg.seed)?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            cfg,
            params,
            adam,
            epoch: 0,
        })
    }

    /// Continues from a checkpoint; `cfg.epochs` is the total target.
    pub fn resume(cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.params.dims.d_e != cfg.d_e || ck.params.dims.n_f != cfg.n_f {
            return Err(Error::Config(format!(
                "checkpoint dims {:?} disagree with config (d_e {}, n_f {})",
                ck.params.dims, cfg.d_e, cfg.n_f
            )));
        }
        let adam = ck.adam.unwrap_or_else(|| AdamState::new(&ck.params));
        Ok(Trainer {
            cfg,
            params: ck.params,
            adam,
            epoch: ck.epoch,
        })
    }

    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<EpochRecord> {
        if (ds.d_f, ds.d_w) != (self.params.dims.d_f, self.params.dims.d_w) {
            return Err(Error::Config(format!(
                "dataset widths ({}, {}) disagree with model ({}, {})",
                ds.d_f, ds.d_w, self.params.dims.d_f, self.params.dims.d_w
            )));
        }
        let start = Instant::now();
        let mut rng = epoch_rng(self.cfg.seed, self.epoch);
        let adam_cfg = self.cfg.adam();
        let mut sum = LossBreakdown::default();
        for batch in epoch_batches(ds.len(), self.cfg.batch_pairs, &mut rng)? {
            let pairs: Vec<&PairRecord> = batch.iter().map(|&i| &ds.pairs[i]).collect();
            let (loss, grads) = loss_and_gradients(&pairs, &self.params, &self.cfg)?;
            optimizer_step(&mut self.params, &grads, &mut self.adam, &adam_cfg)?;
            sum.accumulate(&loss);
        }
        self.params.snap_to_storage();
        self.adam.snap_to_storage();
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            video_term: sum.video_term,
            clip_intra_term: sum.clip_intra_term,
            clip_inter_term: sum.clip_inter_term,
            total: sum.total,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            options: self.cfg.model,
            train: Some(self.cfg),
            epoch: self.epoch,
            adam: Some(self.adam.clone()),
        }
    }
}

/// Runs epochs until `trainer.epoch == cfg.epochs`, calling `on_epoch`
/// after each one.
pub fn fit_from<F>(trainer: &mut Trainer, ds: &Dataset, mut on_epoch: F) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &Trainer) -> Result<()>,
{
    ds.validate()?;
    let mut log = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let rec = trainer.run_epoch(ds)?;
        on_epoch(&rec, trainer)?;
        log.push(rec);
    }
    Ok(log)
}

pub fn fit<F>(ds: &Dataset, cfg: &TrainConfig, on_epoch: F) -> Result<(Trainer, Vec<EpochRecord>)>
where
    F: FnMut(&EpochRecord, &Trainer) -> Result<()>,
{
    let mut trainer = Trainer::new(*cfg, ds.d_f, ds.d_w)?;
    let log = fit_from(&mut trainer, ds, on_epoch)?;
    Ok((trainer, log))
}

/// Appends one JSON line per record.
pub fn append_loss_log(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Model parameters plus optional training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub options: ModelOptions,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    dims: Dims,
    options: ModelOptions,
    train: Option<TrainConfig>,
    epoch: usize,
    optimizer_state: bool,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_params(params: ModelParams, options: ModelOptions) -> Self {
        Checkpoint {
            params,
            options,
            train: None,
            epoch: 0,
            adam: None,
        }
    }

    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.params.named();
        if let Some(adam) = &self.adam {
            out.extend(adam.m.iter().map(|(n, m)| (format!("adam.m.{n}"), m)));
            out.extend(adam.v.iter().map(|(n, m)| (format!("adam.v.{n}"), m)));
        }
        out
    }

    /// One JSON header line followed by little-endian `f32` tensors in
    /// header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            dims: self.params.dims,
            options: self.options,
            train: self.train,
            epoch: self.epoch,
            optimizer_state: self.adam.is_some(),
            adam_step: self.adam.as_ref().map_or(0, |a| a.step),
            tensors: tensors
                .iter()
                .map(|(n, m)| TensorEntry {
                    name: n.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for (_, m) in tensors {
            for v in m.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| match e {
            Error::Format { what, message } => Error::Format {
                what,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let bad = |message: String| Error::Format {
            what: "checkpoint",
            message,
        };
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format `{}`", header.format)));
        }
        let mut tensors = BTreeMap::new();
        for t in &header.tensors {
            let mut buf = vec![0u8; t.rows * t.cols * 4];
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("truncated tensor `{}`", t.name)))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| bad(e.to_string()))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }

        let mut params = ModelParams::init(header.dims, 0)?;
        for (name, slot) in params.named_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        params.validate()?;
        let adam = if header.optimizer_state {
            let mut st = AdamState {
                step: header.adam_step,
                ..Default::default()
            };
            for (name, p) in params.named() {
                for (prefix, map) in [("adam.m.", &mut st.m), ("adam.v.", &mut st.v)] {
                    let key = format!("{prefix}{name}");
                    let t = tensors
                        .remove(&key)
                        .ok_or_else(|| bad(format!("missing tensor `{key}`")))?;
                    if t.shape() != p.shape() {
                        return Err(bad(format!("tensor `{key}` has wrong shape")));
                    }
                    map.insert(name.clone(), t);
                }
            }
            Some(st)
        } else {
            None
        };
        if let Some(name) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor `{name}`")));
        }
        Ok(Checkpoint {
            params,
            options: header.options,
            train: header.train,
            epoch: header.epoch,
            adam,
        })
    }
}
