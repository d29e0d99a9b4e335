//! Measurement harness: perplexity, captioning accuracy, guided-generation
//! scores, metric trajectories, and the vocabulary-size, activation-speed
//! and three-way baseline sweeps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{check, derive_seed, parse_caption, Verdict};
use crate::error::{Error, Result};
use crate::infer::{generate_image, generate_text, SamplingConfig};
use crate::model::{Checkpoint, ParamStore};
use crate::prompt::{Modality, UnifiedSequence};
use crate::train::{
    eval_datasets, eval_stats, joint_ppl, read_metrics, run_stage, PromptStyle, RunConfig, Stage, StageInit, World,
    METRICS_FILE,
};
use crate::vocab::{Activation, ActivationState};

/// `exp` of the mean next-token NLL over the sequences whose modality
/// matches `filter` (all when `None`), after masking with `act`.
pub fn perplexity(
    params: &ParamStore<f32>,
    data: &[UnifiedSequence],
    filter: Option<Modality>,
    act: &ActivationState,
    row_len: usize,
) -> Result<f64> {
    let kept: Vec<UnifiedSequence> = data
        .iter()
        .filter(|s| filter.is_none() || s.kind.modality() == filter)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid("no sequences left after the modality filter"));
    }
    Ok(eval_stats(params, &kept, act, row_len)?.mean().exp())
}

/// Fractions of generated images passing each check axis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GenScore {
    pub overall: f64,
    pub object: f64,
    pub color: f64,
    pub count: f64,
    pub position: f64,
    pub n: usize,
}

impl GenScore {
    pub fn from_verdicts(vs: &[Verdict]) -> Self {
        let n = vs.len();
        let frac = |f: fn(&Verdict) -> bool| vs.iter().filter(|v| f(v)).count() as f64 / n.max(1) as f64;
        Self {
            overall: frac(|v| v.overall),
            object: frac(|v| v.object),
            color: frac(|v| v.color),
            count: frac(|v| v.count),
            position: frac(|v| v.position),
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Held-out images captioned for `und_accuracy`.
    pub n_und: usize,
    /// Held-out captions rendered for `gen_score`.
    pub n_gen: usize,
    pub caption_tokens: usize,
    /// Image sampling; each image uses a seed derived from `sampling.seed`.
    pub sampling: SamplingConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_und: 100,
            n_gen: 100,
            caption_tokens: 48,
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub stage: Stage,
    pub config_digest: String,
    pub text_ppl: f64,
    pub und_ppl: f64,
    pub gen_ppl: f64,
    /// Greedy captions of held-out images whose predicate holds on the
    /// true scene with the right object count.
    pub und_accuracy: f64,
    pub gen_score: GenScore,
}

/// Greedy caption of one image under the given prompt style.
pub fn caption_image(
    params: &ParamStore<f32>,
    world: &World,
    image_ids: &[u32],
    style: PromptStyle,
    max_tokens: usize,
) -> Result<String> {
    let prefix = world.tokenizer.encode(&style.und_prefix());
    let prompt = world.format.und_prompt(image_ids, &prefix)?;
    let samp = SamplingConfig {
        max_new_tokens: max_tokens,
        ..SamplingConfig::greedy()
    };
    let out = generate_text(params, &prompt, &samp)?;
    world.tokenizer.decode(&out)
}

/// Captioning accuracy over the first `n` held-out images.
pub fn und_accuracy(params: &ParamStore<f32>, world: &World, style: PromptStyle, n: usize, max_tokens: usize) -> Result<f64> {
    let picks: Vec<usize> = world.held_out_images.iter().copied().take(n).collect();
    if picks.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for &i in &picks {
        let sample = &world.images[i];
        let text = caption_image(params, world, &world.image_ids(sample)?, style, max_tokens)?;
        if let Ok(pred) = parse_caption(&text) {
            hits += pred.evaluate(&sample.scene.objects).overall as usize;
        }
    }
    Ok(hits as f64 / picks.len() as f64)
}

/// Guided generation for the first `n` held-out captions, scored by `check`.
/// With no visual ID activated nothing can be drawn and every caption fails.
pub fn gen_score(
    params: &ParamStore<f32>,
    world: &World,
    act: &ActivationState,
    style: PromptStyle,
    n: usize,
    sampling: &SamplingConfig,
) -> Result<GenScore> {
    if act.activated_count() == 0 {
        let fail = Verdict {
            overall: false,
            object: false,
            color: false,
            count: false,
            position: false,
        };
        return Ok(GenScore::from_verdicts(&vec![fail; n.min(world.held_out_images.len())]));
    }
    let mut verdicts = Vec::new();
    for (j, &i) in world.held_out_images.iter().take(n).enumerate() {
        let caption = &world.images[i].caption;
        let x = world.tokenizer.encode(&style.gen_condition(&caption.text));
        let samp = SamplingConfig {
            seed: derive_seed(sampling.seed, 0, j as u64),
            ..*sampling
        };
        let g = generate_image(params, &world.format, &world.codebook, act, &x, &samp)?;
        verdicts.push(check(caption, &g.image, world.config.corpus.patch_size)?);
    }
    Ok(GenScore::from_verdicts(&verdicts))
}

/// Full report for a checkpoint. Perplexities use the held-out set of the
/// checkpoint's stage, masked by its activation state.
pub fn evaluate(ckpt: &Checkpoint, cfg: &RunConfig, world: &World, opts: &EvalOptions) -> Result<EvalReport> {
    let stage: Stage = ckpt.stage.parse()?;
    let act = match &ckpt.activation {
        Some(s) => ActivationState::from_snapshot(world.layout, s)?,
        None => ActivationState::new(world.layout, Activation::Immediate, 0),
    };
    let held = world.held_out_for(stage).truncated(cfg.data.eval_samples);
    let stats = eval_datasets(&ckpt.params, &held, &act, cfg.row_len)?;
    let ppl = |m: Modality| stats.modality_mean(m).map_or(f64::NAN, f64::exp);
    let style = PromptStyle::for_stage(stage);
    Ok(EvalReport {
        step: ckpt.step,
        stage,
        config_digest: cfg.digest(),
        text_ppl: ppl(Modality::Text),
        und_ppl: ppl(Modality::Und),
        gen_ppl: ppl(Modality::Gen),
        und_accuracy: und_accuracy(&ckpt.params, world, style, opts.n_und, opts.caption_tokens)?,
        gen_score: gen_score(&ckpt.params, world, &act, style, opts.n_gen, &opts.sampling)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub ppl: f64,
    pub ppl_text: Option<f64>,
    pub ppl_und: Option<f64>,
    pub ppl_gen: Option<f64>,
}

/// Perplexity series of a run directory. Steps must strictly increase, and
/// every gap but the last must equal the first (the log cadence); the last
/// may be shorter.
pub fn trajectory(run_dir: &Path) -> Result<Vec<TrajectoryPoint>> {
    let recs = read_metrics(&run_dir.join(METRICS_FILE))?;
    let mut out: Vec<TrajectoryPoint> = Vec::with_capacity(recs.len());
    let mut cadence = None;
    for (i, r) in recs.iter().enumerate() {
        if let Some(prev) = out.last() {
            if r.step <= prev.step {
                return Err(Error::parse(i + 1, format!("step {} does not follow step {}", r.step, prev.step)));
            }
            let gap = r.step - prev.step;
            let c = *cadence.get_or_insert(gap);
            let last = i + 1 == recs.len();
            if gap != c && !(last && gap < c) {
                return Err(Error::parse(i + 1, format!("gap of {gap} steps breaks the cadence of {c}")));
            }
        }
        out.push(TrajectoryPoint {
            step: r.step,
            ppl: r.ppl,
            ppl_text: r.ppl_text,
            ppl_und: r.ppl_und,
            ppl_gen: r.ppl_gen,
        });
    }
    Ok(out)
}

/// Joint held-out perplexity of a checkpoint, computed the way the trainer
/// logs it.
pub fn recompute_ppl(ckpt: &Checkpoint, cfg: &RunConfig, world: &World) -> Result<f64> {
    let stage: Stage = ckpt.stage.parse()?;
    let act = match &ckpt.activation {
        Some(s) => ActivationState::from_snapshot(world.layout, s)?,
        None => ActivationState::new(world.layout, Activation::Immediate, 0),
    };
    let held = world.held_out_for(stage).truncated(cfg.data.eval_samples);
    Ok(joint_ppl(&eval_datasets(&ckpt.params, &held, &act, cfg.row_len)?, cfg.data_ratio))
}

/// A flat report row with a fixed column order.
pub trait TableRow {
    fn header() -> Vec<&'static str>;
    fn cells(&self) -> Vec<String>;
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x}"))
}

pub fn to_csv<T: TableRow>(rows: &[T]) -> String {
    let mut out = T::header().join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.cells().join(","));
        out.push('\n');
    }
    out
}

/// Writes `<stem>.jsonl` and `<stem>.csv` under `dir`.
pub fn write_report<T: TableRow + Serialize>(dir: &Path, stem: &str, rows: &[T]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut jsonl = String::new();
    for r in rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    fs::write(dir.join(format!("{stem}.jsonl")), jsonl)?;
    fs::write(dir.join(format!("{stem}.csv")), to_csv(rows))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabRow {
    pub codebook_size: usize,
    pub seed: u64,
    pub final_ppl: f64,
    pub ppl_text: Option<f64>,
    pub ppl_und: Option<f64>,
    pub ppl_gen: Option<f64>,
    /// Digest of the raw corpus, equal across codebook sizes.
    pub corpus_digest: String,
}

impl TableRow for VocabRow {
    fn header() -> Vec<&'static str> {
        vec!["codebook_size", "seed", "final_ppl", "ppl_text", "ppl_und", "ppl_gen", "corpus_digest"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.codebook_size.to_string(),
            self.seed.to_string(),
            self.final_ppl.to_string(),
            opt(self.ppl_text),
            opt(self.ppl_und),
            opt(self.ppl_gen),
            self.corpus_digest.clone(),
        ]
    }
}

fn run_dir(out: Option<&Path>, name: String) -> Option<std::path::PathBuf> {
    out.map(|d| d.join(name))
}

/// Trains one vanilla (immediate-activation) model per codebook size and
/// records its final joint perplexity.
pub fn sweep_vocab(base: &RunConfig, ks: &[usize], out: Option<&Path>) -> Result<Vec<VocabRow>> {
    if ks.is_empty() {
        return Err(Error::invalid("codebook size list is empty"));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut cfg = base.clone();
        cfg.data.codebook_size = k;
        cfg.activation = Activation::Immediate;
        let world = World::build(&cfg.data, cfg.seed)?;
        let dir = run_dir(out, format!("k{k}-seed{}", cfg.seed));
        let res = run_stage(&cfg, &world, StageInit::Scratch, dir.as_deref())?;
        let last = res.metrics.last().ok_or_else(|| Error::invalid("run produced no metrics"))?;
        rows.push(VocabRow {
            codebook_size: k,
            seed: cfg.seed,
            final_ppl: last.ppl,
            ppl_text: last.ppl_text,
            ppl_und: last.ppl_und,
            ppl_gen: last.ppl_gen,
            corpus_digest: world.corpus_digest(),
        });
    }
    if let Some(d) = out {
        write_report(d, "sweep_vocab", &rows)?;
    }
    Ok(rows)
}

/// Per-task toy metrics of one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub text_ppl: f64,
    pub und_accuracy: f64,
    pub gen_overall: f64,
}

pub fn task_metrics(ckpt: &Checkpoint, cfg: &RunConfig, world: &World, opts: &EvalOptions) -> Result<TaskMetrics> {
    let r = evaluate(ckpt, cfg, world, opts)?;
    Ok(TaskMetrics {
        text_ppl: r.text_ppl,
        und_accuracy: r.und_accuracy,
        gen_overall: r.gen_score.overall,
    })
}

/// Min-max normalization; a constant column normalizes to 1.
fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

/// Mean of the min-max-normalized inverse text perplexity, captioning
/// accuracy and generation overall rate, across the given rows.
pub fn average_scores(ms: &[TaskMetrics]) -> Vec<f64> {
    let t = min_max(&ms.iter().map(|m| 1.0 / m.text_ppl).collect::<Vec<_>>());
    let u = min_max(&ms.iter().map(|m| m.und_accuracy).collect::<Vec<_>>());
    let g = min_max(&ms.iter().map(|m| m.gen_overall).collect::<Vec<_>>());
    (0..ms.len()).map(|i| (t[i] + u[i] + g[i]) / 3.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub activation: Activation,
    pub final_ppl: f64,
    pub metrics: TaskMetrics,
    pub score: f64,
    /// Some visual IDs were still pending when training ended.
    pub incomplete_activation: bool,
    pub data_digest: String,
}

impl TableRow for ActivationRow {
    fn header() -> Vec<&'static str> {
        vec![
            "activation",
            "final_ppl",
            "text_ppl",
            "und_accuracy",
            "gen_overall",
            "score",
            "incomplete_activation",
            "data_digest",
        ]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.activation.to_string(),
            self.final_ppl.to_string(),
            self.metrics.text_ppl.to_string(),
            self.metrics.und_accuracy.to_string(),
            self.metrics.gen_overall.to_string(),
            self.score.to_string(),
            self.incomplete_activation.to_string(),
            self.data_digest.clone(),
        ]
    }
}

/// Trains one unified model per activation speed from the same `init` and
/// data, then scores them against each other.
pub fn sweep_activation(
    base: &RunConfig,
    speeds: &[Activation],
    init: &StageInit,
    opts: &EvalOptions,
    out: Option<&Path>,
) -> Result<Vec<ActivationRow>> {
    if speeds.is_empty() {
        return Err(Error::invalid("activation list is empty"));
    }
    let world = World::build(&base.data, base.seed)?;
    let mut partial = Vec::with_capacity(speeds.len());
    for &a in speeds {
        let mut cfg = base.clone();
        cfg.activation = a;
        let dir = run_dir(out, format!("act-{a}-seed{}", cfg.seed));
        let res = run_stage(&cfg, &world, init.clone(), dir.as_deref())?;
        let m = task_metrics(&res.checkpoint, &cfg, &world, opts)?;
        let done = res.checkpoint.activation.is_none_or(|s| s.activated == world.layout.visual_size());
        let ppl = res.metrics.last().map_or(f64::NAN, |r| r.ppl);
        partial.push((a, ppl, m, !done));
    }
    let scores = average_scores(&partial.iter().map(|p| p.2).collect::<Vec<_>>());
    let digest = world.datasets(base.stage).digest();
    let rows: Vec<ActivationRow> = partial
        .into_iter()
        .zip(scores)
        .map(|((activation, final_ppl, metrics, incomplete_activation), score)| ActivationRow {
            activation,
            final_ppl,
            metrics,
            score,
            incomplete_activation,
            data_digest: digest.clone(),
        })
        .collect();
    if let Some(d) = out {
        write_report(d, "sweep_activation", &rows)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub data_ratio: [u32; 3],
    pub activation: Activation,
    /// `None` where the configuration does not train that task.
    pub text_ppl: Option<f64>,
    pub und_accuracy: Option<f64>,
    pub gen_overall: Option<f64>,
    /// Percent change against the matching task-specific row; negative is
    /// a decline. Text uses inverse perplexity.
    pub text_delta_pct: Option<f64>,
    pub und_delta_pct: Option<f64>,
    pub gen_delta_pct: Option<f64>,
}

impl TableRow for CompareRow {
    fn header() -> Vec<&'static str> {
        vec![
            "name",
            "data_ratio",
            "activation",
            "text_ppl",
            "und_accuracy",
            "gen_overall",
            "text_delta_pct",
            "und_delta_pct",
            "gen_delta_pct",
        ]
    }

    fn cells(&self) -> Vec<String> {
        let [a, b, c] = self.data_ratio;
        vec![
            self.name.clone(),
            format!("{a}:{b}:{c}"),
            self.activation.to_string(),
            opt(self.text_ppl),
            opt(self.und_accuracy),
            opt(self.gen_overall),
            opt(self.text_delta_pct),
            opt(self.und_delta_pct),
            opt(self.gen_delta_pct),
        ]
    }
}

pub const COMPARE_NAMES: [&str; 5] = ["task_text", "task_und", "task_gen", "vanilla", "progressive"];

/// Five runs with identical seeds and steps: one task-specific model per
/// task, the vanilla unified model (immediate activation) and the
/// progressive one (`progressive` activation).
pub fn compare_three_way(
    base: &RunConfig,
    progressive: Activation,
    init: &StageInit,
    opts: &EvalOptions,
    out: Option<&Path>,
) -> Result<Vec<CompareRow>> {
    let world = World::build(&base.data, base.seed)?;
    let runs: [([u32; 3], Activation); 5] = [
        ([1, 0, 0], Activation::Immediate),
        ([0, 1, 0], Activation::Immediate),
        ([0, 0, 1], Activation::Immediate),
        (base.data_ratio, Activation::Immediate),
        (base.data_ratio, progressive),
    ];
    let mut rows: Vec<CompareRow> = Vec::with_capacity(5);
    for (name, (ratio, act)) in COMPARE_NAMES.iter().zip(runs) {
        let mut cfg = base.clone();
        cfg.data_ratio = ratio;
        cfg.activation = act;
        let dir = run_dir(out, format!("{name}-seed{}", cfg.seed));
        let res = run_stage(&cfg, &world, init.clone(), dir.as_deref())?;
        let m = task_metrics(&res.checkpoint, &cfg, &world, opts)?;
        let keep = |i: usize, v: f64| (ratio[i] > 0).then_some(v);
        rows.push(CompareRow {
            name: name.to_string(),
            data_ratio: ratio,
            activation: act,
            text_ppl: keep(0, m.text_ppl),
            und_accuracy: keep(1, m.und_accuracy),
            gen_overall: keep(2, m.gen_overall),
            text_delta_pct: None,
            und_delta_pct: None,
            gen_delta_pct: None,
        });
    }
    let (ts_text, ts_und, ts_gen) = (rows[0].text_ppl, rows[1].und_accuracy, rows[2].gen_overall);
    let pct = |v: Option<f64>, reference: Option<f64>, inverse: bool| match (v, reference) {
        (Some(v), Some(r)) if inverse => Some((r / v - 1.0) * 100.0),
        (Some(v), Some(r)) if r != 0.0 => Some((v / r - 1.0) * 100.0),
        _ => None,
    };
    for r in rows.iter_mut().skip(3) {
        r.text_delta_pct = pct(r.text_ppl, ts_text, true);
        r.und_delta_pct = pct(r.und_accuracy, ts_und, false);
        r.gen_delta_pct = pct(r.gen_overall, ts_gen, false);
    }
    if let Some(d) = out {
        write_report(d, "compare", &rows)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::MetricRecord;
    use std::io::Write;

    fn rec(step: u64) -> MetricRecord {
        MetricRecord {
            step,
            stage: Stage::UnifiedPretrain,
            loss_total: 1.0,
            loss_text: None,
            loss_und: None,
            loss_gen: None,
            ppl: step as f64,
            ppl_text: None,
            ppl_und: None,
            ppl_gen: None,
            lr: 0.0,
            activation_fraction: 0.0,
            grad_norm: 0.0,
            wall_ms: 0,
        }
    }

    fn write_log(dir: &Path, steps: &[u64]) {
        let mut f = fs::File::create(dir.join(METRICS_FILE)).unwrap();
        for &s in steps {
            writeln!(f, "{}", serde_json::to_string(&rec(s)).unwrap()).unwrap();
        }
    }

    #[test]
    fn trajectory_checks_order() {
        let dir = tempfile::tempdir().unwrap();
        write_log(dir.path(), &[10, 20, 25]);
        let t = trajectory(dir.path()).unwrap();
        assert_eq!(t.iter().map(|p| p.step).collect::<Vec<_>>(), vec![10, 20, 25]);
        write_log(dir.path(), &[10, 30, 20]);
        assert!(matches!(trajectory(dir.path()), Err(Error::Parse { position: 3, .. })));
        write_log(dir.path(), &[10, 20, 40, 50]);
        assert!(trajectory(dir.path()).is_err());
        fs::write(dir.path().join(METRICS_FILE), "{\"step\": 1}\n").unwrap();
        assert!(matches!(trajectory(dir.path()), Err(Error::Parse { position: 1, .. })));
    }

    #[test]
    fn scores_and_csv() {
        let ms = [
            TaskMetrics {
                text_ppl: 2.0,
                und_accuracy: 0.5,
                gen_overall: 0.1,
            },
            TaskMetrics {
                text_ppl: 4.0,
                und_accuracy: 0.7,
                gen_overall: 0.3,
            },
        ];
        assert_eq!(average_scores(&ms), vec![1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(average_scores(&ms[..1]), vec![1.0]);
        let row = VocabRow {
            codebook_size: 64,
            seed: 1,
            final_ppl: 3.5,
            ppl_text: None,
            ppl_und: Some(2.0),
            ppl_gen: None,
            corpus_digest: "ab".into(),
        };
        assert_eq!(
            to_csv(&[row]),
            "codebook_size,seed,final_ppl,ppl_text,ppl_und,ppl_gen,corpus_digest\n64,1,3.5,-,2,-,ab\n"
        );
    }

    #[test]
    fn gen_score_fractions() {
        let t = Verdict {
            overall: true,
            object: true,
            color: true,
            count: true,
            position: true,
        };
        let f = Verdict {
            overall: false,
            color: false,
            ..t
        };
        let s = GenScore::from_verdicts(&[t, f, f, t]);
        assert_eq!((s.overall, s.object, s.color, s.n), (0.5, 1.0, 0.5, 4));
    }
}
