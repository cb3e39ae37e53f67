//! Batch CLI wiring the stages into an end-to-end pipeline:
//! pretrain -> score -> prune -> distill -> eval -> report.

use crate::error::{Error, Result};
use crate::eval::perplexity::{perplexity, EvalResult};
use crate::eval::report::{emit_report, load_prune_report};
use crate::eval::sweep::{sweep_report, SweepMethod, SweepStructure};
use crate::eval::{windows, Corpus, Window};
use crate::merging::prune::{calibration_batch, ComeOptions};
use crate::merging::{
    dlp_prune, posterior_prune, progressive_prune, sleb_prune, wslp_laco_prune, LayerMapping,
    NormMode, PruneReport,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{CaptureSpec, ModelConfig, ToyModel};
use crate::rng::CounterRng;
use crate::scoring::{
    bi_scores, magnitude_importance, posterior_ppl_importance, taylor_importance_windows,
    LayerScoreSet, ScoreMethod, ScoreReport,
};
use crate::training::{
    distill_mp, distill_sp, pretrain, DistillConfig, DistillMode, KlDirection,
    PretrainConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "comepress",
    version,
    about = "Depth compression toolkit for toy decoder-only transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a fresh toy model on the byte corpus.
    Pretrain(PretrainArgs),
    /// Emit per-layer importance scores for the requested methods.
    Score(ScoreArgs),
    /// Shrink a checkpoint to a target layer count.
    Prune(PruneArgs),
    /// Merge one adjacent pair at a ratio grid and chart perplexity.
    Sweep(SweepArgs),
    /// Feature-distill a pruned student against its teacher.
    Distill(DistillArgs),
    /// Perplexity of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run the staged end-to-end pipeline into one output directory.
    Pipeline(PipelineArgs),
    /// Tabulate summaries of completed pipeline runs.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    #[arg(long, default_value_t = 8)]
    n_layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 258)]
    vocab_size: usize,
    #[arg(long, default_value_t = 128)]
    max_seq: usize,
}

impl ModelFlags {
    fn to_config(&self) -> Result<ModelConfig> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let cfg = ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_model / self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            max_seq: self.max_seq,
            ..ModelConfig::toy()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, default_value_t = 1200)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 128)]
    seq: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    weight_decay: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Corpus file; the bundled corpus is used when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for the checkpoint and loss curve.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated: bi,magnitude,taylor,posterior_ppl.
    #[arg(long, default_value = "bi,magnitude,taylor,posterior_ppl")]
    methods: String,
    #[arg(long, default_value_t = 256)]
    calib_samples: usize,
    #[arg(long, default_value_t = 128)]
    seq: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// come | come-p | dlp-mag | dlp-taylor | dlp-bi | dlp-sleb | wslp-laco
    #[arg(long, default_value = "come")]
    method: String,
    #[arg(long)]
    target_layers: usize,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 256)]
    calib_samples: usize,
    #[arg(long, default_value_t = 128)]
    seq: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Shield the first four and last two layers (dlp methods only).
    #[arg(long, default_value_t = false)]
    protect_ends: bool,
    /// average | follow_base
    #[arg(long, default_value = "average")]
    norm_mode: String,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Adjacent pair as "l,l+1".
    #[arg(long)]
    pair: String,
    /// mha | ffn | layer | all
    #[arg(long, default_value = "layer")]
    structure: String,
    /// alpha | concat | both
    #[arg(long, default_value = "both")]
    method: String,
    #[arg(long, default_value_t = 10)]
    grid_n: usize,
    #[arg(long, default_value_t = 256)]
    calib_samples: usize,
    #[arg(long, default_value_t = 128)]
    seq: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    /// mp | sp
    #[arg(long, default_value = "sp")]
    mode: String,
    /// Steps per pair (mp) or total steps (sp).
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Single-process rate; mp uses its ladder unless this is set explicitly.
    #[arg(long)]
    lr: Option<f64>,
    /// forward | symmetric
    #[arg(long, default_value = "forward")]
    kl: String,
    /// Prune report providing the layer mapping.
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 128)]
    seq: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// val | test
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 128)]
    seq: usize,
    /// Window start stride; defaults to seq (non-overlapping cover).
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of pretrain,score,prune,distill,eval.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    target_layers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Completed pipeline output directories.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Fully resolved pipeline configuration. Serializing the resolved value and
/// feeding it back through `--config` reproduces the run byte-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub stages: Vec<String>,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub prune: PruneSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub seq: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub method: String,
    pub target_layers: usize,
    pub p: f64,
    pub rho: f64,
    pub m: usize,
    pub n: usize,
    pub calib_samples: usize,
    pub seq: usize,
    pub batch_size: usize,
    pub protect_ends: bool,
    pub norm_mode: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub mode: String,
    pub steps: usize,
    pub lr: f64,
    pub kl: String,
    pub batch: usize,
    pub seq: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: String,
    pub seq: usize,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("run"),
            corpus: None,
            stages: ["pretrain", "score", "prune", "distill", "eval"]
                .map(String::from)
                .to_vec(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            prune: PruneSection::default(),
            distill: DistillSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 258,
            max_seq: 128,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { steps: 1200, batch: 8, seq: 128, lr: 3e-3, weight_decay: 1e-2 }
    }
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            method: "come".into(),
            target_layers: 6,
            p: 1.0,
            rho: 0.0,
            m: 1,
            n: 20,
            calib_samples: 256,
            seq: 128,
            batch_size: 32,
            protect_ends: false,
            norm_mode: "average".into(),
        }
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            mode: "sp".into(),
            steps: 1000,
            lr: 1e-5,
            kl: "forward".into(),
            batch: 16,
            seq: 128,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { split: "val".into(), seq: 128, batch_size: 32 }
    }
}

/// Pipeline output summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub stages_run: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_pruned: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_distilled: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mapping: Option<LayerMapping>,
    pub notes: Vec<String>,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Score(a) => cmd_score(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

fn load_corpus(path: &Option<PathBuf>) -> Result<Corpus> {
    match path {
        Some(p) => Corpus::load(p),
        None => Ok(Corpus::builtin()),
    }
}

/// Calibration windows: a seeded shuffle of the train-split windows.
fn calibration_windows(
    corpus: &Corpus,
    seq: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<Window>> {
    let mut ws = windows(&corpus.train, seq, seq)?;
    let mut order: Vec<usize> = (0..ws.len()).collect();
    CounterRng::new(seed).derive(0xca11b).shuffle(&mut order);
    order.truncate(samples.min(ws.len()));
    order.sort_unstable();
    let mut picked = Vec::with_capacity(order.len());
    for (kept, &idx) in order.iter().enumerate() {
        ws.swap(kept, idx);
        picked.push(ws[kept].clone());
    }
    picked.truncate(order.len());
    Ok(picked)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let cfg = a.model.to_config()?;
    let mut rng = CounterRng::new(a.seed);
    let mut model = ToyModel::<f32>::init(cfg, &mut rng)?;
    let pc = PretrainConfig {
        steps: a.steps,
        batch: a.batch,
        seq: a.seq,
        lr: a.lr,
        weight_decay: a.weight_decay,
        clip: 1.0,
        seed: a.seed,
    };
    let curve = pretrain(&mut model, &corpus.train, &pc)?;
    save_checkpoint(&model, &a.out.join("base.ckpt"))?;
    emit_report(&curve, &a.out.join("pretrain_loss.json"))?;
    println!("pretrained {} steps; checkpoint at {}", a.steps, a.out.display());
    Ok(())
}

fn parse_score_methods(s: &str) -> Result<Vec<ScoreMethod>> {
    s.split(',')
        .map(|m| match m.trim() {
            "bi" => Ok(ScoreMethod::Bi),
            "magnitude" => Ok(ScoreMethod::Magnitude),
            "taylor" => Ok(ScoreMethod::Taylor),
            "posterior_ppl" | "posterior" => Ok(ScoreMethod::PosteriorPpl),
            other => Err(Error::Config(format!("unknown score method '{other}'"))),
        })
        .collect()
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let model = load_checkpoint(&a.ckpt)?;
    let methods = parse_score_methods(&a.methods)?;
    let calib = calibration_windows(&corpus, a.seq, a.calib_samples, a.seed)?;
    let report = score_model(&model, &methods, &calib, a.batch_size)?;
    emit_report(&report, &a.out)?;
    println!("scored {} methods over {} layers -> {}", report.methods.len(), report.n_layers, a.out.display());
    Ok(())
}

fn score_model(
    model: &ToyModel<f32>,
    methods: &[ScoreMethod],
    calib: &[Window],
    batch_size: usize,
) -> Result<ScoreReport> {
    let mut sets: Vec<LayerScoreSet> = Vec::new();
    for method in methods {
        let set = match method {
            ScoreMethod::Bi => {
                let batch = calibration_batch(calib)?;
                let (_, trace) = model.forward(&batch, &CaptureSpec::hidden_only())?;
                let (bi, _) = bi_scores(&trace);
                LayerScoreSet::new(ScoreMethod::Bi, bi)
            }
            ScoreMethod::Magnitude => magnitude_importance(model),
            ScoreMethod::Taylor => taylor_importance_windows(model, calib, 16)?,
            ScoreMethod::PosteriorPpl => posterior_ppl_importance(model, calib, batch_size)?,
        };
        sets.push(set);
    }
    Ok(ScoreReport { n_layers: model.n_layers(), methods: sets })
}

fn parse_norm_mode(s: &str) -> Result<NormMode> {
    match s {
        "average" => Ok(NormMode::Average),
        "follow_base" | "follow-base" => Ok(NormMode::FollowBase),
        other => Err(Error::Config(format!("unknown norm mode '{other}'"))),
    }
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let model = load_checkpoint(&a.ckpt)?;
    let calib = calibration_windows(&corpus, a.seq, a.calib_samples, a.seed)?;
    let eval_ws = windows(&corpus.val, a.seq, a.seq)?;
    let (pruned, report) = run_prune(
        &model,
        &a.method,
        &calib,
        &eval_ws,
        &ComeOptions {
            target_layers: a.target_layers,
            m: a.m,
            p: a.p,
            rho: a.rho,
            norm_mode: parse_norm_mode(&a.norm_mode)?,
            n: a.n,
            seed: a.seed,
            batch_size: a.batch_size,
        },
        a.protect_ends,
    )?;
    save_checkpoint(&pruned, &a.out.join("pruned.ckpt"))?;
    emit_report(&report, &a.out.join("prune_report.json"))?;
    println!(
        "{}: {} -> {} layers, ppl {:.3} -> {:.3}",
        report.method, report.initial_layers, report.final_layers, report.ppl_before, report.ppl_after
    );
    Ok(())
}

fn run_prune(
    model: &ToyModel<f32>,
    method: &str,
    calib: &[Window],
    eval_ws: &[Window],
    opts: &ComeOptions,
    protect_ends: bool,
) -> Result<(ToyModel<f32>, PruneReport)> {
    match method {
        "come" => progressive_prune(model, calib, eval_ws, opts),
        "come-p" => posterior_prune(model, calib, eval_ws, opts),
        "dlp-mag" => {
            let scores = magnitude_importance(model);
            dlp_prune(model, &scores, opts.target_layers, protect_ends, eval_ws, opts.batch_size, "dlp-mag", opts.seed)
        }
        "dlp-taylor" => {
            let scores = taylor_importance_windows(model, calib, 16)?;
            dlp_prune(model, &scores, opts.target_layers, protect_ends, eval_ws, opts.batch_size, "dlp-taylor", opts.seed)
        }
        "dlp-bi" => {
            let batch = calibration_batch(calib)?;
            let (_, trace) = model.forward(&batch, &CaptureSpec::hidden_only())?;
            let (bi, _) = bi_scores(&trace);
            let scores = LayerScoreSet::new(ScoreMethod::Bi, bi);
            dlp_prune(model, &scores, opts.target_layers, protect_ends, eval_ws, opts.batch_size, "dlp-bi", opts.seed)
        }
        "dlp-sleb" => sleb_prune(model, calib, eval_ws, opts.target_layers, opts.batch_size, opts.seed),
        "wslp-laco" => wslp_laco_prune(model, calib, eval_ws, opts.target_layers, opts.batch_size, opts.seed),
        other => Err(Error::Config(format!("unknown prune method '{other}'"))),
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let model = load_checkpoint(&a.ckpt)?;
    let (l, r) = a
        .pair
        .split_once(',')
        .ok_or_else(|| Error::Config("--pair wants 'l,l+1'".into()))?;
    let l: usize = l.trim().parse().map_err(|_| Error::Config("bad pair index".into()))?;
    let r: usize = r.trim().parse().map_err(|_| Error::Config("bad pair index".into()))?;
    if r != l + 1 {
        return Err(Error::Contract(format!("pair {l},{r} is not adjacent")));
    }
    let structures: Vec<SweepStructure> = match a.structure.as_str() {
        "mha" => vec![SweepStructure::Mha],
        "ffn" => vec![SweepStructure::Ffn],
        "layer" => vec![SweepStructure::Layer],
        "all" => vec![SweepStructure::Mha, SweepStructure::Ffn, SweepStructure::Layer],
        other => return Err(Error::Config(format!("unknown structure '{other}'"))),
    };
    let methods: Vec<SweepMethod> = match a.method.as_str() {
        "alpha" => vec![SweepMethod::AlphaBlend],
        "concat" => vec![SweepMethod::Concat],
        "both" => vec![SweepMethod::AlphaBlend, SweepMethod::Concat],
        other => return Err(Error::Config(format!("unknown sweep method '{other}'"))),
    };
    let calib = calibration_windows(&corpus, a.seq, a.calib_samples, a.seed)?;
    let eval_ws = windows(&corpus.val, a.seq, a.seq)?;
    let report = sweep_report(&model, l, &structures, &methods, a.grid_n, &calib, &eval_ws, a.batch_size)?;
    emit_report(&report, &a.out)?;
    println!("sweep over pair ({l},{r}): {} records -> {}", report.records.len(), a.out.display());
    Ok(())
}

fn parse_kl(s: &str) -> Result<KlDirection> {
    match s {
        "forward" => Ok(KlDirection::Forward),
        "symmetric" => Ok(KlDirection::Symmetric),
        other => Err(Error::Config(format!("unknown kl direction '{other}'"))),
    }
}

fn cmd_distill(a: DistillArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let teacher = load_checkpoint(&a.teacher)?;
    let mut student = load_checkpoint(&a.student)?;
    let report = load_prune_report(&a.mapping)?;
    let mode = match a.mode.as_str() {
        "mp" => DistillMode::Mp,
        "sp" => DistillMode::Sp,
        other => return Err(Error::Config(format!("unknown distill mode '{other}'"))),
    };
    let mut cfg = DistillConfig::new(mode, report.mapping.clone());
    cfg.steps = a.steps;
    cfg.batch = a.batch;
    cfg.seq = a.seq;
    cfg.kl = parse_kl(&a.kl)?;
    cfg.seed = a.seed;
    if let Some(lr) = a.lr {
        cfg.lr = lr;
        if mode == DistillMode::Mp {
            cfg.per_pair_lr = Some(vec![lr; report.mapping.len()]);
        }
    }
    let curve = match mode {
        DistillMode::Sp => distill_sp(&teacher, &mut student, &cfg, &corpus.train)?,
        DistillMode::Mp => distill_mp(&teacher, &mut student, &cfg, &corpus.train)?,
    };
    save_checkpoint(&student, &a.out.join("distilled.ckpt"))?;
    emit_report(&curve, &a.out.join("distill_loss.json"))?;
    println!(
        "distilled ({}) {} pairs, {} logged steps -> {}",
        a.mode,
        report.mapping.len(),
        curve.points.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalReport {
    split: String,
    seq: usize,
    stride: usize,
    result: EvalResult,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let model = load_checkpoint(&a.ckpt)?;
    let stride = a.stride.unwrap_or(a.seq);
    let ws = windows(corpus.split(&a.split)?, a.seq, stride)?;
    let result = perplexity(&model, &ws, a.batch_size)?;
    let report = EvalReport { split: a.split.clone(), seq: a.seq, stride, result };
    if let Some(out) = &a.out {
        emit_report(&report, out)?;
    }
    println!(
        "{} ppl {:.4} (nll/token {:.5}, {} tokens)",
        a.split, result.ppl, result.nll_per_token, result.token_count
    );
    Ok(())
}

fn stage_err(stage: &str, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(io),
        other => Error::Config(format!("stage {stage} failed: {other}")),
    }
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg: RunConfig = match &a.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(stages) = &a.stages {
        cfg.stages = stages.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(m) = &a.method {
        cfg.prune.method = m.clone();
    }
    if let Some(t) = a.target_layers {
        cfg.prune.target_layers = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = &a.corpus {
        cfg.corpus = Some(c.clone());
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    run_pipeline(&cfg).map(|summary| {
        println!(
            "pipeline done: stages [{}]{}",
            summary.stages_run.join(", "),
            summary
                .ppl_distilled
                .or(summary.ppl_pruned)
                .or(summary.ppl_base)
                .map(|p| format!(", final ppl {p:.3}"))
                .unwrap_or_default()
        );
    })
}

const STAGE_ORDER: [&str; 5] = ["pretrain", "score", "prune", "distill", "eval"];

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    for s in &cfg.stages {
        if !STAGE_ORDER.contains(&s.as_str()) {
            return Err(Error::Config(format!("unknown stage '{s}'")));
        }
    }
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    emit_report(cfg, &out.join("runconfig.json"))?;
    let corpus = load_corpus(&cfg.corpus)?;
    let mut summary = RunSummary {
        config: cfg.clone(),
        stages_run: Vec::new(),
        ppl_base: None,
        ppl_pruned: None,
        ppl_distilled: None,
        mapping: None,
        notes: Vec::new(),
    };
    let want = |name: &str| cfg.stages.iter().any(|s| s == name);

    if want("pretrain") {
        let model_cfg = ModelConfig {
            vocab_size: cfg.model.vocab_size,
            d_model: cfg.model.d_model,
            n_heads: cfg.model.n_heads,
            d_head: cfg.model.d_model / cfg.model.n_heads.max(1),
            d_ff: cfg.model.d_ff,
            n_layers: cfg.model.n_layers,
            max_seq: cfg.model.max_seq,
            ..ModelConfig::toy()
        };
        model_cfg.validate().map_err(|e| stage_err("pretrain", e))?;
        let mut rng = CounterRng::new(cfg.seed);
        let mut model = ToyModel::<f32>::init(model_cfg, &mut rng)?;
        let pc = PretrainConfig {
            steps: cfg.pretrain.steps,
            batch: cfg.pretrain.batch,
            seq: cfg.pretrain.seq,
            lr: cfg.pretrain.lr,
            weight_decay: cfg.pretrain.weight_decay,
            clip: 1.0,
            seed: cfg.seed,
        };
        let curve = pretrain(&mut model, &corpus.train, &pc).map_err(|e| stage_err("pretrain", e))?;
        save_checkpoint(&model, &out.join("base.ckpt"))?;
        emit_report(&curve, &out.join("pretrain_loss.json"))?;
        summary.stages_run.push("pretrain".into());
    }

    if want("score") {
        let model = load_checkpoint(&out.join("base.ckpt")).map_err(|e| stage_err("score", e))?;
        let calib = calibration_windows(&corpus, cfg.prune.seq, cfg.prune.calib_samples, cfg.seed)?;
        let methods = [
            ScoreMethod::Bi,
            ScoreMethod::Magnitude,
            ScoreMethod::Taylor,
            ScoreMethod::PosteriorPpl,
        ];
        let report =
            score_model(&model, &methods, &calib, cfg.prune.batch_size).map_err(|e| stage_err("score", e))?;
        emit_report(&report, &out.join("scores.json"))?;
        summary.stages_run.push("score".into());
    }

    if want("prune") {
        let model = load_checkpoint(&out.join("base.ckpt")).map_err(|e| stage_err("prune", e))?;
        let calib = calibration_windows(&corpus, cfg.prune.seq, cfg.prune.calib_samples, cfg.seed)?;
        let eval_ws = windows(&corpus.val, cfg.prune.seq, cfg.prune.seq)?;
        let opts = ComeOptions {
            target_layers: cfg.prune.target_layers,
            m: cfg.prune.m,
            p: cfg.prune.p,
            rho: cfg.prune.rho,
            norm_mode: parse_norm_mode(&cfg.prune.norm_mode)?,
            n: cfg.prune.n,
            seed: cfg.seed,
            batch_size: cfg.prune.batch_size,
        };
        let (pruned, report) =
            run_prune(&model, &cfg.prune.method, &calib, &eval_ws, &opts, cfg.prune.protect_ends)
                .map_err(|e| stage_err("prune", e))?;
        save_checkpoint(&pruned, &out.join("pruned.ckpt"))?;
        emit_report(&report, &out.join("prune_report.json"))?;
        summary.mapping = Some(report.mapping.clone());
        summary.stages_run.push("prune".into());
    }

    if want("distill") {
        let report = load_prune_report(&out.join("prune_report.json"))
            .map_err(|e| stage_err("distill", e))?;
        if report.mapping.is_empty() {
            summary
                .notes
                .push(format!("distill skipped: method {} produced no layer mapping", report.method));
        } else {
            let teacher =
                load_checkpoint(&out.join("base.ckpt")).map_err(|e| stage_err("distill", e))?;
            let mut student =
                load_checkpoint(&out.join("pruned.ckpt")).map_err(|e| stage_err("distill", e))?;
            let mode = match cfg.distill.mode.as_str() {
                "mp" => DistillMode::Mp,
                "sp" => DistillMode::Sp,
                other => return Err(Error::Config(format!("unknown distill mode '{other}'"))),
            };
            let mut dc = DistillConfig::new(mode, report.mapping.clone());
            dc.steps = cfg.distill.steps;
            dc.lr = cfg.distill.lr;
            dc.batch = cfg.distill.batch;
            dc.seq = cfg.distill.seq;
            dc.kl = parse_kl(&cfg.distill.kl)?;
            dc.seed = cfg.seed;
            let curve = match mode {
                DistillMode::Sp => distill_sp(&teacher, &mut student, &dc, &corpus.train),
                DistillMode::Mp => distill_mp(&teacher, &mut student, &dc, &corpus.train),
            }
            .map_err(|e| stage_err("distill", e))?;
            save_checkpoint(&student, &out.join("distilled.ckpt"))?;
            emit_report(&curve, &out.join("distill_loss.json"))?;
            summary.stages_run.push("distill".into());
        }
    }

    if want("eval") {
        let ws = windows(corpus.split(&cfg.eval.split)?, cfg.eval.seq, cfg.eval.seq)?;
        let eval_ckpt = |name: &str| -> Result<Option<f64>> {
            let path = out.join(name);
            if !path.is_dir() {
                return Ok(None);
            }
            let model = load_checkpoint(&path).map_err(|e| stage_err("eval", e))?;
            let res =
                perplexity(&model, &ws, cfg.eval.batch_size).map_err(|e| stage_err("eval", e))?;
            Ok(Some(res.ppl))
        };
        summary.ppl_base = eval_ckpt("base.ckpt")?;
        summary.ppl_pruned = eval_ckpt("pruned.ckpt")?;
        summary.ppl_distilled = eval_ckpt("distilled.ckpt")?;
        if summary.ppl_base.is_none()
            && summary.ppl_pruned.is_none()
            && summary.ppl_distilled.is_none()
        {
            return Err(Error::Config(
                "stage eval failed: no checkpoint in output directory".into(),
            ));
        }
        summary.stages_run.push("eval".into());
    }

    emit_report(&summary, &out.join("summary.json"))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub run: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_pruned: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_distilled: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

pub fn compare_runs(dirs: &[PathBuf]) -> Result<CompareTable> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two runs".into()));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let bytes = std::fs::read(dir.join("summary.json"))?;
        let summary: RunSummary = serde_json::from_slice(&bytes)?;
        rows.push(CompareRow {
            method: summary.config.prune.method.clone(),
            run: dir.display().to_string(),
            ppl_pruned: summary.ppl_pruned,
            ppl_distilled: summary.ppl_distilled,
        });
    }
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.run.cmp(&b.run)));
    Ok(CompareTable { rows })
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let table = compare_runs(&a.runs)?;
    println!("{:<12} {:>12} {:>14}  run", "method", "ppl(pruned)", "ppl(distilled)");
    for row in &table.rows {
        println!(
            "{:<12} {:>12} {:>14}  {}",
            row.method,
            row.ppl_pruned.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into()),
            row.ppl_distilled.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into()),
            row.run
        );
    }
    if let Some(out) = &a.out {
        emit_report(&table, out)?;
    }
    Ok(())
}
