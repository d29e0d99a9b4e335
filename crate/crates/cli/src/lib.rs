//! Command surface of the `ugen` binary. [`run`] maps a command line to the
//! core pipelines and returns the process exit code: 0 on success, 1 on a
//! usage error and 2 when the command itself fails.

pub mod chart;
mod world;

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ugen_core::evalx::{self, EvalOptions};
use ugen_core::infer::{encode_image, generate_image, generate_mixed, generate_text, GenerationRecord, SamplingConfig};
use ugen_core::model::Checkpoint;
use ugen_core::prompt::SequenceFormat;
use ugen_core::train::{read_metrics, run_stage, MetricRecord, PromptStyle, RunConfig, Stage, StageInit};
use ugen_core::vocab::{Activation, ActivationState};

pub use world::{load_run_config, load_world, RUN_CONFIG_FILE};

#[derive(Debug, Parser)]
#[command(name = "ugen", version, about = "Toy unified text and image autoregressive modeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into a data directory.
    GenData(DataArgs),
    /// Fit the text tokenizer and the visual codebook for a data directory.
    FitTokenizers(DataArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Sample from a checkpoint.
    Generate {
        #[command(subcommand)]
        mode: GenerateMode,
    },
    /// Perplexities, captioning accuracy and generation scores of a checkpoint.
    Eval(EvalArgs),
    /// Ablation sweeps.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Task-specific, vanilla unified and progressive models side by side.
    Compare(CompareArgs),
    /// Line chart of metric series from one or more metrics logs.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; unknown keys are errors.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, stage: Option<Stage>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text, stage).with_context(|| format!("in {}", p.display()))?
            }
            None => RunConfig::for_stage(stage.unwrap_or(Stage::UnifiedPretrain)),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: Stage,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Data directory from `gen-data`/`fit-tokenizers`; rebuilt from the seed when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub greedy: bool,
    /// Output directory; defaults to `generations/` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl SamplingArgs {
    fn sampling(&self, cfg_scale: f64) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            cfg_scale,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
            greedy: self.greedy,
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| run_dir_of(&self.checkpoint).join("generations"))
    }
}

#[derive(Debug, Subcommand)]
pub enum GenerateMode {
    /// Continue a text prompt.
    Text {
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        s: SamplingArgs,
    },
    /// Render a caption with classifier-free guidance.
    Image {
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 5.0)]
        cfg_scale: f64,
        #[command(flatten)]
        s: SamplingArgs,
    },
    /// Free interleaved decoding after a text prompt.
    Mixed {
        #[arg(long, default_value = "")]
        prompt: String,
        #[command(flatten)]
        s: SamplingArgs,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_und: usize,
    #[arg(long, default_value_t = 100)]
    pub n_gen: usize,
    #[arg(long, default_value_t = 5.0)]
    pub cfg_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; defaults to `eval-<step>.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            n_und: self.n_und,
            n_gen: self.n_gen,
            sampling: SamplingConfig {
                cfg_scale: self.cfg_scale,
                seed: self.seed,
                ..SamplingConfig::default()
            },
            ..EvalOptions::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum SweepKind {
    /// Vanilla runs over codebook sizes.
    Vocab {
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        ks: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "sweeps/vocab")]
        out: PathBuf,
    },
    /// Unified runs over activation speeds (`k` values or `immediate`).
    Activation {
        #[arg(long, value_delimiter = ',', default_value = "8,32,128,immediate")]
        speeds: Vec<Activation>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        eval: SweepEvalArgs,
        #[arg(long, default_value = "sweeps/activation")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SweepEvalArgs {
    /// Text-pretrained checkpoint used as the warm start of every run.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub n_und: usize,
    #[arg(long, default_value_t = 50)]
    pub n_gen: usize,
}

impl SweepEvalArgs {
    fn init(&self) -> Result<StageInit> {
        Ok(match &self.init {
            Some(p) => StageInit::WarmText(Checkpoint::load(p)?.params),
            None => StageInit::Scratch,
        })
    }

    fn options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            n_und: self.n_und,
            n_gen: self.n_gen,
            sampling: SamplingConfig {
                seed,
                ..SamplingConfig::default()
            },
            ..EvalOptions::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Activation speed of the progressive run.
    #[arg(long, default_value = "32")]
    pub progressive: Activation,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub eval: SweepEvalArgs,
    #[arg(long, default_value = "sweeps/compare")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SeriesName {
    LossTotal,
    LossText,
    LossUnd,
    LossGen,
    Ppl,
    PplText,
    PplUnd,
    PplGen,
    Lr,
    ActivationFraction,
    GradNorm,
}

impl SeriesName {
    fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }

    fn value(self, r: &MetricRecord) -> Option<f64> {
        match self {
            SeriesName::LossTotal => Some(r.loss_total),
            SeriesName::LossText => r.loss_text,
            SeriesName::LossUnd => r.loss_und,
            SeriesName::LossGen => r.loss_gen,
            SeriesName::Ppl => Some(r.ppl),
            SeriesName::PplText => r.ppl_text,
            SeriesName::PplUnd => r.ppl_und,
            SeriesName::PplGen => r.ppl_gen,
            SeriesName::Lr => Some(r.lr),
            SeriesName::ActivationFraction => Some(r.activation_fraction),
            SeriesName::GradNorm => Some(r.grad_norm),
        }
    }
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metrics logs; repeat to overlay runs.
    #[arg(long, required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "ppl")]
    pub series: Vec<SeriesName>,
    /// Chart path; defaults to `<first series>.svg` next to the first log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub title: Option<String>,
}

/// Parses `argv` (including the program name) and executes it.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::FitTokenizers(a) => fit_tokenizers(&a),
        Command::Train(a) => train(&a).map(|dir| println!("{}", dir.display())),
        Command::Generate { mode } => generate(&mode),
        Command::Eval(a) => eval(&a),
        Command::Sweep { kind } => sweep(&kind),
        Command::Compare(a) => compare(&a),
        Command::Plot(a) => plot(&a),
    }
}

/// Held for the lifetime of a command writing into a run directory.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is locked by another process", dir.display()))?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// `<stage>-<config digest>-seed<seed>`.
pub fn run_dir_name(cfg: &RunConfig) -> String {
    format!("{}-{}-seed{}", cfg.stage, cfg.digest(), cfg.seed)
}

fn run_dir_of(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn gen_data(a: &DataArgs) -> Result<()> {
    let cfg = a.cfg.load(None)?;
    let _lock = RunLock::acquire(&a.data)?;
    let n = world::write_corpus(&cfg, &a.data)?;
    println!("wrote {n} records to {}", a.data.display());
    Ok(())
}

fn fit_tokenizers(a: &DataArgs) -> Result<()> {
    let cfg = a.cfg.load(None)?;
    let _lock = RunLock::acquire(&a.data)?;
    world::write_tokenizers(&cfg, &a.data)?;
    println!("wrote tokenizers to {}", a.data.display());
    Ok(())
}

/// Trains into `<out>/<run_dir_name>` and returns that directory.
pub fn train(a: &TrainArgs) -> Result<PathBuf> {
    let cfg = a.cfg.load(Some(a.stage))?;
    cfg.validate()?;
    let dir = a.out.join(run_dir_name(&cfg));
    let _lock = RunLock::acquire(&dir)?;
    let world = load_world(&cfg, a.data.as_deref())?;
    let init = match (&a.init, a.stage) {
        (None, _) => StageInit::Scratch,
        (Some(p), Stage::Sft) => StageInit::Continue(Checkpoint::load(p)?.params),
        (Some(p), _) => StageInit::WarmText(Checkpoint::load(p)?.params),
    };
    fs::write(dir.join(RUN_CONFIG_FILE), cfg.to_config_string())?;
    world::write_run_tokenizers(&world, &dir)?;
    run_stage(&cfg, &world, init, Some(&dir))?;
    Ok(dir)
}

struct Loaded {
    ckpt: Checkpoint,
    cfg: RunConfig,
    world: world::Tokenizers,
    act: ActivationState,
    style: PromptStyle,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let dir = run_dir_of(path);
    let cfg = load_run_config(&dir)?;
    let tokenizers = world::read_run_tokenizers(&dir, &cfg)?;
    let layout = *ckpt.params.layout();
    let act = match &ckpt.activation {
        Some(s) => ActivationState::from_snapshot(layout, s)?,
        None => ActivationState::new(layout, Activation::Immediate, 0),
    };
    let style = PromptStyle::for_stage(ckpt.stage.parse()?);
    Ok(Loaded {
        ckpt,
        cfg,
        world: tokenizers,
        act,
        style,
    })
}

fn write_generation(dir: &Path, stem: &str, rec: &GenerationRecord, image: Option<&ugen_core::corpus::ToyImage>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    fs::write(dir.join(format!("{stem}.jsonl")), &line)?;
    if let Some(img) = image {
        let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.ppm")))?);
        img.write_ppm(&mut w)?;
        w.flush()?;
    }
    print!("{line}");
    Ok(())
}

fn generate(mode: &GenerateMode) -> Result<()> {
    let s = match mode {
        GenerateMode::Text { s, .. } | GenerateMode::Image { s, .. } | GenerateMode::Mixed { s, .. } => s,
    };
    let l = load_checkpoint(&s.checkpoint)?;
    let layout = *l.ckpt.params.layout();
    let fmt = SequenceFormat::new(layout, l.cfg.data.corpus.image_tokens());
    let tok = &l.world.tokenizer;
    let seed = s.seed;
    match mode {
        GenerateMode::Text { prompt, .. } => {
            let samp = s.sampling(1.0);
            let mut ids = vec![layout.sos()];
            ids.extend(tok.encode(prompt));
            let out = generate_text(&l.ckpt.params, &ids, &samp)?;
            let rec = GenerationRecord {
                prompt: prompt.clone(),
                text: tok.decode(&out)?,
                ids: out,
                image: None,
                settings: samp,
            };
            write_generation(&s.out_dir(), &format!("text-seed{seed}"), &rec, None)
        }
        GenerateMode::Image { caption, cfg_scale, .. } => {
            let samp = s.sampling(*cfg_scale);
            let x = tok.encode(&l.style.gen_condition(caption));
            let g = generate_image(&l.ckpt.params, &fmt, &l.world.codebook, &l.act, &x, &samp)?;
            let rec = GenerationRecord {
                prompt: caption.clone(),
                ids: g.sequence.ids.clone(),
                text: caption.clone(),
                image: Some(encode_image(&g.image)),
                settings: samp,
            };
            write_generation(&s.out_dir(), &format!("image-seed{seed}"), &rec, Some(&g.image))
        }
        GenerateMode::Mixed { prompt, .. } => {
            let samp = s.sampling(1.0);
            let mut ids = vec![layout.sos()];
            ids.extend(tok.encode(prompt));
            let seq = generate_mixed(&l.ckpt.params, &fmt, &l.act, &ids, &samp)?;
            let visual = seq.image_ids();
            let image = match visual.get(..fmt.image_tokens) {
                Some(first) => {
                    let codes: Vec<usize> = first.iter().filter_map(|&id| layout.visual_code(id)).collect();
                    let grid = l.cfg.data.corpus.grid_size;
                    Some(l.world.codebook.dequantize(&codes, grid)?)
                }
                None => None,
            };
            let rec = GenerationRecord {
                prompt: prompt.clone(),
                text: tok.decode(&seq.text_ids())?,
                ids: seq.ids,
                image: image.as_ref().map(encode_image),
                settings: samp,
            };
            write_generation(&s.out_dir(), &format!("mixed-seed{seed}"), &rec, image.as_ref())
        }
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let dir = run_dir_of(&a.checkpoint);
    let cfg = load_run_config(&dir)?;
    let world = load_world(&cfg, a.data.as_deref())?;
    let report = evalx::evaluate(&ckpt, &cfg, &world, &a.options())?;
    let json = serde_json::to_string_pretty(&report)?;
    let out = a.out.clone().unwrap_or_else(|| dir.join(format!("eval-{}.json", ckpt.step)));
    fs::write(&out, format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

fn sweep(kind: &SweepKind) -> Result<()> {
    match kind {
        SweepKind::Vocab { ks, cfg, out } => {
            let base = cfg.load(None)?;
            let _lock = RunLock::acquire(out)?;
            let rows = evalx::sweep_vocab(&base, ks, Some(out))?;
            print!("{}", evalx::to_csv(&rows));
        }
        SweepKind::Activation { speeds, cfg, eval, out } => {
            let base = cfg.load(None)?;
            let _lock = RunLock::acquire(out)?;
            let rows = evalx::sweep_activation(&base, speeds, &eval.init()?, &eval.options(base.seed), Some(out))?;
            print!("{}", evalx::to_csv(&rows));
        }
    }
    Ok(())
}

fn compare(a: &CompareArgs) -> Result<()> {
    let base = a.cfg.load(None)?;
    let _lock = RunLock::acquire(&a.out)?;
    let rows = evalx::compare_three_way(
        &base,
        a.progressive,
        &a.eval.init()?,
        &a.eval.options(base.seed),
        Some(&a.out),
    )?;
    print!("{}", evalx::to_csv(&rows));
    Ok(())
}

fn plot(a: &PlotArgs) -> Result<()> {
    let mut series = Vec::new();
    for path in &a.metrics {
        let recs = read_metrics(path)?;
        for &name in &a.series {
            let label = if a.metrics.len() > 1 {
                format!("{}:{}", run_dir_of(path).display(), name.name())
            } else {
                name.name()
            };
            let points = recs.iter().filter_map(|r| name.value(r).map(|v| (r.step as f64, v))).collect();
            series.push(chart::Series { label, points });
        }
    }
    if series.is_empty() {
        bail!("nothing to plot");
    }
    let first = a.series[0].name();
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| run_dir_of(&a.metrics[0]).join(format!("{first}.svg")));
    let title = a.title.clone().unwrap_or_else(|| first.clone());
    chart::emit_chart(&title, "step", &series, &out)?;
    println!("{}", out.display());
    Ok(())
}
