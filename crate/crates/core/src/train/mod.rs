//! Training stages: text-only pretraining (the warm-start donor), unified
//! pretraining with progressive visual-vocabulary activation, and SFT.
//!
//! Every step runs, in this order: activation tick, batch mixing, masking
//! against the activated vocabulary, packing, loss and gradients, AdamW.

mod config;
mod data;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::derive_seed;
use crate::error::{Error, Result};
use crate::model::{batch_loss, init_params, loss_and_grads, Checkpoint, LossStats, OptimizerMoments, ParamStore};
use crate::prompt::{pack, Modality, SequenceFormat, UnifiedSequence};
use crate::vocab::{mask_sequence, ActivationState};

pub use config::{DataConfig, RunConfig, Stage};
pub use data::{
    completion_turn, fit_tokenizers, gen_corpus, mix_batch, split_counts, Datasets, PromptStyle, World,
    UND_INSTRUCTION,
};
pub use optim::{adamw_step, adamw_update, check_finite, clip_grads, global_norm, lr_at, AdamHyper, OptState};

const INIT_STREAM: u64 = 20;
const MIX_STREAM: u64 = 21;
const ACTIVATION_STREAM: u64 = 22;

/// Seed of the activation order for a run seed.
pub fn activation_seed(seed: u64) -> u64 {
    derive_seed(seed, ACTIVATION_STREAM, 0)
}

/// Seed of the batch-mixing stream for a run seed.
pub fn mix_seed(seed: u64) -> u64 {
    derive_seed(seed, MIX_STREAM, 0)
}

pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, INIT_STREAM, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub stats: LossStats,
    pub lr: f64,
    pub grad_norm: f64,
    /// Sequences per modality in the batch.
    pub counts: [usize; 3],
    pub activation_fraction: f64,
}

/// One optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ParamStore<f32>,
    opt: &mut OptState<f32>,
    act: &mut ActivationState,
    cfg: &RunConfig,
    fmt: &SequenceFormat,
    data: &Datasets,
    rng: &mut R,
) -> Result<StepReport> {
    let step = opt.step + 1;
    act.advance();
    let batch = mix_batch(cfg, fmt, data, rng)?;
    let mut counts = [0; 3];
    for s in &batch {
        if let Some(m) = s.kind.modality() {
            counts[m.index()] += 1;
        }
    }
    let masked: Vec<UnifiedSequence> = batch.iter().map(|s| mask_sequence(s, act)).collect::<Result<_>>()?;
    let packed = pack(&masked, cfg.row_len, &fmt.layout)?;
    let (stats, mut grads) = loss_and_grads(params, &packed)?;
    let lr = lr_at(cfg, step);
    let grad_norm = adamw_step(params, &mut grads, opt, lr, cfg.weight_decay, cfg.grad_clip, AdamHyper::of(cfg))?;
    Ok(StepReport {
        step,
        stats,
        lr,
        grad_norm,
        counts,
        activation_fraction: act.activation_fraction(),
    })
}

/// Loss statistics of `seqs` masked by `act` and packed into `row_len` rows.
pub fn eval_stats(
    params: &ParamStore<f32>,
    seqs: &[UnifiedSequence],
    act: &ActivationState,
    row_len: usize,
) -> Result<LossStats> {
    if seqs.is_empty() {
        return Ok(LossStats::default());
    }
    let masked: Vec<UnifiedSequence> = seqs.iter().map(|s| mask_sequence(s, act)).collect::<Result<_>>()?;
    batch_loss(params, &pack(&masked, row_len, act.layout())?)
}

/// Evaluation statistics over every modality of `data`.
pub fn eval_datasets(
    params: &ParamStore<f32>,
    data: &Datasets,
    act: &ActivationState,
    row_len: usize,
) -> Result<LossStats> {
    let mut all = LossStats::default();
    for m in Modality::ALL {
        all.merge(&eval_stats(params, data.get(m), act, row_len)?);
    }
    Ok(all)
}

/// Perplexity over the modalities with a nonzero ratio entry.
pub fn joint_ppl(stats: &LossStats, ratio: [u32; 3]) -> f64 {
    let (mut nll, mut n) = (0.0, 0usize);
    for m in 0..3 {
        if ratio[m] > 0 {
            nll += stats.modality_nll[m];
            n += stats.modality_count[m];
        }
    }
    (nll / n as f64).exp()
}

/// One line of `metrics.jsonl`. Training losses are the batch losses of
/// `step` (before its update); perplexities are measured on the held-out
/// evaluation set after the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss_total: f64,
    pub loss_text: Option<f64>,
    pub loss_und: Option<f64>,
    pub loss_gen: Option<f64>,
    pub ppl: f64,
    pub ppl_text: Option<f64>,
    pub ppl_und: Option<f64>,
    pub ppl_gen: Option<f64>,
    pub lr: f64,
    pub activation_fraction: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl MetricRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &MetricRecord) -> bool {
        let mut a = self.clone();
        a.wall_ms = other.wall_ms;
        &a == other
    }

    pub fn ppl_of(&self, m: Option<Modality>) -> Option<f64> {
        match m {
            None => Some(self.ppl),
            Some(Modality::Text) => self.ppl_text,
            Some(Modality::Und) => self.ppl_und,
            Some(Modality::Gen) => self.ppl_gen,
        }
    }
}

/// Reads a metrics log; malformed lines are parse errors with their
/// 1-based line number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Starting parameters of a stage.
#[derive(Debug, Clone)]
pub enum StageInit {
    Scratch,
    /// Shared weights from a text-only donor, fresh visual rows.
    WarmText(ParamStore<f32>),
    /// Every parameter as given (fresh optimizer and schedule).
    Continue(ParamStore<f32>),
}

/// All mutable state of a running stage.
pub struct Trainer<'w> {
    pub cfg: RunConfig,
    pub world: &'w World,
    pub params: ParamStore<f32>,
    pub opt: OptState<f32>,
    pub act: ActivationState,
    rng: ChaCha8Rng,
    eval_set: Datasets,
}

impl<'w> Trainer<'w> {
    pub fn new(cfg: &RunConfig, world: &'w World, init: StageInit) -> Result<Self> {
        cfg.validate()?;
        if cfg.data != world.config {
            return Err(Error::config("run config and data world disagree on data settings"));
        }
        let longest = world.datasets(cfg.stage).max_len().max(world.held_out_for(cfg.stage).max_len());
        if longest > cfg.row_len {
            return Err(Error::config(format!(
                "row_len {} is shorter than the longest sequence ({longest})",
                cfg.row_len
            )));
        }
        let params = match init {
            StageInit::Scratch => init_params(&cfg.model, &world.layout, init_seed(cfg.seed), None)?,
            StageInit::WarmText(donor) => init_params(&cfg.model, &world.layout, init_seed(cfg.seed), Some(&donor))?,
            StageInit::Continue(p) => {
                if *p.config() != cfg.model || *p.layout() != world.layout {
                    return Err(Error::invalid("initial parameters do not match the run config"));
                }
                p
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            world,
            opt: OptState::new(&params),
            params,
            act: ActivationState::new(world.layout, cfg.activation, activation_seed(cfg.seed)),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed)),
            eval_set: world.held_out_for(cfg.stage).truncated(cfg.data.eval_samples),
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        train_step(
            &mut self.params,
            &mut self.opt,
            &mut self.act,
            &self.cfg,
            &self.world.format,
            self.world.datasets(self.cfg.stage),
            &mut self.rng,
        )
    }

    pub fn eval(&self) -> Result<LossStats> {
        eval_datasets(&self.params, &self.eval_set, &self.act, self.cfg.row_len)
    }

    pub fn record(&self, r: &StepReport, wall_ms: u64) -> Result<MetricRecord> {
        let ev = self.eval()?;
        let ppl = |m: Modality| ev.modality_mean(m).map(f64::exp);
        Ok(MetricRecord {
            step: r.step,
            stage: self.cfg.stage,
            loss_total: r.stats.mean(),
            loss_text: r.stats.modality_mean(Modality::Text),
            loss_und: r.stats.modality_mean(Modality::Und),
            loss_gen: r.stats.modality_mean(Modality::Gen),
            ppl: joint_ppl(&ev, self.cfg.data_ratio),
            ppl_text: ppl(Modality::Text),
            ppl_und: ppl(Modality::Und),
            ppl_gen: ppl(Modality::Gen),
            lr: r.lr,
            activation_fraction: r.activation_fraction,
            grad_norm: r.grad_norm,
            wall_ms,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.opt.step,
            stage: self.cfg.stage.to_string(),
            activation: Some(self.act.snapshot()),
            params: self.params.clone(),
            moments: Some(OptimizerMoments {
                step: self.opt.step,
                m: self.opt.m.clone(),
                v: self.opt.v.clone(),
            }),
        }
    }
}

pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.ugck")
}

pub const FINAL_CHECKPOINT: &str = "final.ugck";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Runs `total_steps` steps. With `out_dir`, metric records are appended to
/// `metrics.jsonl` as they are produced and checkpoints are written every
/// `checkpoint_every` steps plus `final.ugck`.
pub fn run_stage(cfg: &RunConfig, world: &World, init: StageInit, out_dir: Option<&Path>) -> Result<StageOutput> {
    let mut trainer = Trainer::new(cfg, world, init)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(
                OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(dir.join(METRICS_FILE))?,
            )
        }
        None => None,
    };
    let start = Instant::now();
    let mut metrics = Vec::new();
    for _ in 0..cfg.total_steps {
        let report = trainer.train_step()?;
        let step = report.step;
        if step % cfg.log_every == 0 || step == cfg.total_steps {
            let rec = trainer.record(&report, start.elapsed().as_millis() as u64)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
                f.flush()?;
            }
            metrics.push(rec);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                trainer.checkpoint().save(&dir.join(checkpoint_name(step)))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(StageOutput { checkpoint, metrics })
}
