//! The `condmatch` command line: gen-data, train, eval, retrieve, explain,
//! gradcheck.
//!
//! Settings come from built-in defaults, then an optional TOML document
//! (`--config`), then command-line flags. The effective configuration is
//! echoed to stderr as TOML before a command runs.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::conditioning::FrameSampling;
use crate::data::{gen_synthetic, load_dataset, save_dataset, Dataset, PairRecord, SyntheticConfig};
use crate::diffcore::grad_check;
use crate::error::{Error, Result};
use crate::hierarchy::{MatchMode, ModelParams};
use crate::retrieval::{explain, rerank, static_order, Direction, Evaluator, Query, StaticIndex, DEFAULT_SHORTLIST};
use crate::training::{append_loss_log, batch_loss_vars, fit_from, Checkpoint, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Everything a command may read, after merging file and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub threads: usize,
    pub test_pairs: usize,
    pub k_shortlist: usize,
    pub mode: MatchMode,
    pub grad_eps: f64,
    pub grad_tolerance: f64,
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            threads: 1,
            test_pairs: 0,
            k_shortlist: DEFAULT_SHORTLIST,
            mode: MatchMode::Paragraph,
            grad_eps: 1e-5,
            grad_tolerance: 1e-4,
            synthetic: SyntheticConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config document: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.k_shortlist == 0 {
            return Err(Error::Config("k_shortlist must be >= 1".into()));
        }
        if !(self.grad_eps > 0.0) || !(self.grad_tolerance > 0.0) {
            return Err(Error::Config("grad_eps and grad_tolerance must be > 0".into()));
        }
        self.synthetic.validate()?;
        if self.test_pairs >= self.synthetic.n_pairs && self.test_pairs > 0 {
            return Err(Error::Config(format!(
                "test_pairs ({}) must be smaller than pairs ({})",
                self.test_pairs, self.synthetic.n_pairs
            )));
        }
        self.train.validate()
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "condmatch",
    version,
    about = "Video/text matching with conditioned embeddings"
)]
pub struct Cli {
    /// TOML configuration document; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for scoring.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus (manifest + feature blobs).
    GenData(GenDataArgs),
    /// Train a model and write per-epoch checkpoints and a loss log.
    Train(TrainArgs),
    /// Retrieval metrics in both directions.
    Eval(EvalArgs),
    /// Ranked results for one query.
    Retrieve(RetrieveArgs),
    /// Attention explanation for one video/paragraph pair.
    Explain(ExplainArgs),
    /// Finite-difference check of the full loss on a seeded micro batch.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Last N pairs also written as test.json, the rest as train.json.
    #[arg(long)]
    pub test_pairs: Option<usize>,
    #[arg(long)]
    pub clips_min: Option<usize>,
    #[arg(long)]
    pub clips_max: Option<usize>,
    #[arg(long)]
    pub frames_min: Option<usize>,
    #[arg(long)]
    pub frames_max: Option<usize>,
    #[arg(long)]
    pub words_min: Option<usize>,
    #[arg(long)]
    pub words_max: Option<usize>,
    #[arg(long)]
    pub d_f: Option<usize>,
    #[arg(long)]
    pub d_w: Option<usize>,
    #[arg(long)]
    pub concepts: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub distractor_fraction: Option<f64>,
}

/// Training/model flags shared by `train` and `gradcheck`.
#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_e: Option<usize>,
    #[arg(long)]
    pub n_f: Option<usize>,
    #[arg(long)]
    pub margin_video: Option<f64>,
    #[arg(long)]
    pub margin_clip: Option<f64>,
    #[arg(long)]
    pub no_attn: bool,
    #[arg(long)]
    pub no_global: bool,
    #[arg(long)]
    pub no_second_h: bool,
    #[arg(long)]
    pub no_m_match: bool,
    #[arg(long)]
    pub literal_clip_hinge: bool,
    /// Global frame sampling: `stride` or `seeded:<u64>`.
    #[arg(long)]
    pub frame_sampling: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `checkpoint.ckpt`, `epoch-NNNN.ckpt`, `loss.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_pairs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub k_shortlist: Option<usize>,
    /// Rerank the whole corpus (same as `--k-shortlist` = corpus size).
    #[arg(long)]
    pub exhaustive: bool,
    /// `paragraph` or `sentence`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query id (a paragraph for t2v, a video for v2t).
    #[arg(long)]
    pub query: String,
    /// `t2v` or `v2t`.
    #[arg(long, default_value = "t2v")]
    pub direction: String,
    #[arg(long)]
    pub k_shortlist: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Number of results to print.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Args, Debug, Default)]
pub struct ExplainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub video: String,
    /// Defaults to the paragraph paired with `--video`.
    #[arg(long)]
    pub paragraph: Option<String>,
    /// Explanation JSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Writes `<prefix>.frames.tsv` and `<prefix>.words.tsv`.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[command(flatten)]
    pub model: ModelFlags,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn parse_sampling(s: &str) -> Result<FrameSampling> {
    match s.split_once(':') {
        None if s == "stride" => Ok(FrameSampling::Stride),
        Some(("seeded", seed)) => seed
            .parse()
            .map(|seed| FrameSampling::Seeded { seed })
            .map_err(|_| Error::Config(format!("bad sampling seed `{seed}`"))),
        _ => Err(Error::Config(format!(
            "unknown frame sampling `{s}` (stride|seeded:<u64>)"
        ))),
    }
}

impl ModelFlags {
    fn apply(&self, t: &mut TrainConfig) -> Result<()> {
        set(&mut t.seed, self.seed);
        set(&mut t.d_e, self.d_e);
        set(&mut t.n_f, self.n_f);
        set(&mut t.margin_video, self.margin_video);
        set(&mut t.margin_clip, self.margin_clip);
        let a = &mut t.model.ablation;
        a.no_attn |= self.no_attn;
        a.no_global |= self.no_global;
        a.no_second_h |= self.no_second_h;
        a.no_m_match |= self.no_m_match;
        t.literal_clip_hinge |= self.literal_clip_hinge;
        if let Some(s) = &self.frame_sampling {
            t.model.frame_sampling = parse_sampling(s)?;
        }
        Ok(())
    }
}

/// Applies the flags of `cmd` on top of `cfg`.
pub fn merge_flags(cfg: &mut RunConfig, cli_threads: Option<usize>, cmd: &Command) -> Result<()> {
    set(&mut cfg.threads, cli_threads);
    match cmd {
        Command::GenData(a) => {
            let s = &mut cfg.synthetic;
            set(&mut s.n_pairs, a.pairs);
            set(&mut s.seed, a.seed);
            set(&mut s.clips_per_video.0, a.clips_min);
            set(&mut s.clips_per_video.1, a.clips_max);
            set(&mut s.frames_per_clip.0, a.frames_min);
            set(&mut s.frames_per_clip.1, a.frames_max);
            set(&mut s.words_per_sentence.0, a.words_min);
            set(&mut s.words_per_sentence.1, a.words_max);
            set(&mut s.d_f, a.d_f);
            set(&mut s.d_w, a.d_w);
            set(&mut s.n_concepts, a.concepts);
            set(&mut s.noise_sigma, a.noise_sigma);
            set(&mut s.distractor_fraction, a.distractor_fraction);
            set(&mut cfg.test_pairs, a.test_pairs);
        }
        Command::Train(a) => {
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_pairs, a.batch_pairs);
            set(&mut cfg.train.learning_rate, a.learning_rate);
            a.model.apply(&mut cfg.train)?;
        }
        Command::Eval(a) => {
            set(&mut cfg.k_shortlist, a.k_shortlist);
            if let Some(m) = &a.mode {
                cfg.mode = m.parse()?;
            }
        }
        Command::Retrieve(a) => {
            set(&mut cfg.k_shortlist, a.k_shortlist);
            if let Some(m) = &a.mode {
                cfg.mode = m.parse()?;
            }
        }
        Command::Explain(_) => {}
        Command::Gradcheck(a) => {
            set(&mut cfg.grad_eps, a.eps);
            set(&mut cfg.grad_tolerance, a.tolerance);
            a.model.apply(&mut cfg.train)?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Validation problems map to 1, everything else to 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownId(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfig::default(),
    };
    merge_flags(&mut cfg, cli.threads, &cli.command)?;
    cfg.validate()?;
    eprintln!("# effective config\n{}", cfg.to_toml());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::GenData(a) => cmd_gen_data(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Retrieve(a) => cmd_retrieve(&cfg, a),
        Command::Explain(a) => cmd_explain(a),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg),
    })
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, a: &GenDataArgs) -> Result<()> {
    let (ds, _) = gen_synthetic(&cfg.synthetic)?;
    let manifest = save_dataset(&ds, &a.out, "manifest.json")?;
    if cfg.test_pairs > 0 {
        let (train, test) = ds.split_at(ds.len() - cfg.test_pairs);
        save_dataset(&train, &a.out, "train.json")?;
        save_dataset(&test, &a.out, "test.json")?;
    }
    eprintln!(
        "wrote {} pairs ({} test) to {}",
        ds.len(),
        cfg.test_pairs,
        manifest.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg.train, Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.train, ds.d_f, ds.d_w)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let log_path = a.out.join("loss.jsonl");
    if a.resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let latest = a.out.join("checkpoint.ckpt");
    if trainer.epoch == trainer.cfg.epochs {
        trainer.checkpoint().save(&latest)?;
    }
    fit_from(&mut trainer, &ds, |rec, t| {
        let ck = t.checkpoint();
        ck.save(&a.out.join(format!("epoch-{:04}.ckpt", rec.epoch)))?;
        ck.save(&latest)?;
        append_loss_log(&log_path, rec)?;
        eprintln!(
            "epoch {:4}  total {:.4}  (video {:.4}, intra {:.4}, inter {:.4})  {:.1}s",
            rec.epoch, rec.total, rec.video_term, rec.clip_intra_term, rec.clip_inter_term, rec.wall_time_s
        );
        Ok(())
    })?;
    eprintln!("checkpoint: {}", latest.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let k = if a.exhaustive { ds.len() } else { cfg.k_shortlist };
    let mut ev = Evaluator::new(&ds, &ck.params, ck.options, cfg.mode)?;
    let mut reports = Vec::new();
    for dir in [Direction::T2v, Direction::V2t] {
        let rep = ev.evaluate(dir, k)?;
        eprintln!(
            "{dir}: R@1 {:.4}  MdR {}",
            rep.metrics.recall_at.get(&1).copied().unwrap_or(0.0),
            rep.metrics.median_rank
        );
        reports.push(rep);
    }
    let text = serde_json::to_string_pretty(&reports)? + "\n";
    write_or_print(a.out.as_deref(), &text)
}

fn find<'a>(ds: &'a Dataset, id: &str) -> Result<&'a PairRecord> {
    Ok(&ds.pairs[ds.position(id)?])
}

#[derive(Serialize)]
struct Ranked<'a> {
    rank: usize,
    id: &'a str,
    /// Conditioned score inside the shortlist, absent below it.
    score: Option<f64>,
}

pub fn cmd_retrieve(cfg: &RunConfig, a: &RetrieveArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let direction: Direction = a.direction.parse()?;
    let q = find(&ds, &a.query)?;
    let (query_static, corpus) = match direction {
        Direction::T2v => {
            let vids: Vec<_> = ds.pairs.iter().map(|p| &p.video).collect();
            (
                crate::retrieval::static_embed_paragraph(&q.paragraph, &ck.params)?,
                StaticIndex::videos(&vids, &ck.params)?,
            )
        }
        Direction::V2t => {
            let paras: Vec<_> = ds.pairs.iter().map(|p| &p.paragraph).collect();
            (
                crate::retrieval::static_embed_video(&q.video, &ck.params)?,
                StaticIndex::paragraphs(&paras, &ck.params)?,
            )
        }
    };
    let order = static_order(&query_static, &corpus)?;
    let k = cfg.k_shortlist.min(order.len());
    let query = match direction {
        Direction::T2v => Query::Paragraph(&q.paragraph, order[..k].iter().map(|&i| &ds.pairs[i].video).collect()),
        Direction::V2t => Query::Video(&q.video, order[..k].iter().map(|&i| &ds.pairs[i].paragraph).collect()),
    };
    let reranked = rerank(query, &ck.params, &ck.options, cfg.mode)?;
    let mut out = String::new();
    let rest = order[k..].iter().map(|&i| (corpus.ids[i].as_str(), None));
    let head = reranked.iter().map(|(id, s)| (id.as_str(), Some(*s)));
    for (rank, (id, score)) in head.chain(rest).take(a.top).enumerate() {
        out += &serde_json::to_string(&Ranked {
            rank: rank + 1,
            id,
            score,
        })?;
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

pub fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let video = &find(&ds, &a.video)?.video;
    let paragraph = &find(&ds, a.paragraph.as_deref().unwrap_or(&a.video))?.paragraph;
    let ex = explain(video, paragraph, &ck.params, &ck.options)?;
    if let Some(prefix) = &a.heatmap {
        let with_ext = |ext: &str| {
            let mut s = prefix.clone().into_os_string();
            s.push(ext);
            PathBuf::from(s)
        };
        let (fp, wp) = (with_ext(".frames.tsv"), with_ext(".words.tsv"));
        fs::write(&fp, ex.frame_heatmap()).map_err(|e| Error::io(&fp, e))?;
        fs::write(&wp, ex.word_heatmap()).map_err(|e| Error::io(&wp, e))?;
    }
    let text = serde_json::to_string_pretty(&ex)? + "\n";
    write_or_print(a.out.as_deref(), &text)
}

/// Seeded micro batch used by `gradcheck`: 2 pairs, 2 clips each, at most
/// 4 frames and 4 words.
pub fn micro_batch(seed: u64) -> Result<Dataset> {
    Ok(gen_synthetic(&SyntheticConfig {
        n_pairs: 2,
        clips_per_video: (2, 2),
        frames_per_clip: (2, 4),
        words_per_sentence: (2, 4),
        d_f: 4,
        d_w: 4,
        n_concepts: 4,
        seed,
        ..SyntheticConfig::default()
    })?
    .0)
}

#[derive(Serialize)]
struct GradReport<'a> {
    max_rel_error: f64,
    worst: Option<&'a (String, usize)>,
    entries: usize,
    tolerance: f64,
    passed: bool,
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let mut tc = cfg.train;
    if tc.d_e == TrainConfig::default().d_e {
        tc.d_e = 8;
    }
    let ds = micro_batch(tc.seed)?;
    let params = ModelParams::init(tc.dims(ds.d_f, ds.d_w), tc.seed)?;
    let batch: Vec<&PairRecord> = ds.pairs.iter().collect();
    let rep = grad_check(&params, cfg.grad_eps, |p, tape| {
        let mv = p.register(tape);
        Ok(batch_loss_vars(tape, &mv, &batch, &tc)?.total)
    })?;
    let passed = rep.max_rel_error < cfg.grad_tolerance;
    println!(
        "{}",
        serde_json::to_string(&GradReport {
            max_rel_error: rep.max_rel_error,
            worst: rep.worst.as_ref(),
            entries: rep.entries,
            tolerance: cfg.grad_tolerance,
            passed,
        })?
    );
    if passed {
        Ok(())
    } else {
        Err(Error::Format {
            what: "gradient",
            message: format!(
                "max relative error {:.3e} exceeds {:.1e}",
                rep.max_rel_error, cfg.grad_tolerance
            ),
        })
    }
}
