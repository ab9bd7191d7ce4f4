//! The `moc` command line.
//!
//! Exit codes: 0 on success, 2 for usage, config and I/O errors, 3 when
//! training hits a non-finite value.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, RunManifest};
use crate::detector::train::training_backgrounds;
use crate::detector::{train_with_hook, Checkpoint, StepMetrics, TrainMode};
use crate::error::{MocError, Result};
use crate::eval::detection::{precision_recall_counts, MatchCriterion, PrCounts, ScoredBox};
use crate::eval::report::{evaluate, metrics_csv, EvalConfig, MetricsReport};
use crate::geometry::Frame;
use crate::motion::{compute_mode_background, extract_motion_prior, ModeBackground, ModeScope, MotionPrior};
use crate::parallel::{par_map, worker_count};
use crate::raster::write_pgm_mask;
use crate::schedule::ScheduleRecord;
use crate::synthgen::{generate_dataset, load_dataset, save_dataset, Dataset, LabeledSequence};

#[derive(Debug, Parser)]
#[command(name = "moc", version, about = "Motion and object-continuity training for grid object detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sprite dataset.
    Generate(GenerateArgs),
    /// Dump motion masks and boxes for every frame of a dataset.
    ExtractMotion(ExtractArgs),
    /// Train a detector in one of the three modes.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset's test split.
    Evaluate(EvaluateArgs),
    /// Put the final metrics of several runs side by side.
    Compare(CompareArgs),
    /// Print the alignment schedule a training run followed.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config; defaults apply to every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Cd,
    Iou,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Keep objects marked irrelevant in the metrics.
    #[arg(long)]
    pub all_objects: bool,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

impl MatchArgs {
    fn apply(&self, eval: &mut EvalConfig) -> Result<()> {
        if self.all_objects {
            eval.all_objects = true;
        }
        if let Some(c) = self.criterion {
            eval.matching.criterion = match c {
                CriterionArg::Cd => MatchCriterion::CenterDivergence,
                CriterionArg::Iou => MatchCriterion::Iou,
            };
        }
        if let Some(t) = self.threshold {
            eval.matching.threshold = t;
        }
        eval.validate()
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub matching: MatchArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = parse_mode, default_value = "full-moc")]
    pub mode: TrainMode,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub matching: MatchArgs,
    /// Where to write metrics.json; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub json: bool,
    /// Also write compare.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    pub run: PathBuf,
    #[arg(long)]
    pub json: bool,
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: MocError| e.to_string())
}

/// Process exit code for an error.
pub fn exit_code(err: &MocError) -> u8 {
    match err {
        MocError::NonFinite { .. } => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::ExtractMotion(a) => cmd_extract_motion(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Schedule(a) => cmd_schedule(a, out),
    }
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, Option<String>)> {
    match path {
        Some(p) => RunConfig::load(p).map(|(c, text)| (c, Some(text))),
        None => Ok((RunConfig::default(), None)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MocError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MocError::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| MocError::io("<stdout>", e))
}

fn emit_json(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    emit(out, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn check_dims(data: &Dataset, height: usize, width: usize) -> Result<()> {
    match data.all_sequences().next() {
        Some(s) => {
            let f = &s.sequence.frames()[0];
            if f.height() != height || f.width() != width {
                return Err(MocError::Config(format!(
                    "dataset frames are {}x{} but the model expects {height}x{width}",
                    f.height(),
                    f.width()
                )));
            }
            Ok(())
        }
        None => Err(MocError::Empty("dataset has no sequences".into())),
    }
}

/// Global mode image of the training split, which is what the detector
/// subtracts at evaluation time. Falls back to the test split when there
/// is no training data.
pub fn evaluation_background(data: &Dataset) -> Result<Frame> {
    let split = if data.train.is_empty() { &data.test } else { &data.train };
    let frames: Vec<&Frame> = split.iter().flat_map(|s| s.sequence.frames()).collect();
    Ok(compute_mode_background(&frames, ModeScope::Global)?.image)
}

fn metric_rows(r: &MetricsReport) -> [(&'static str, f64); 9] {
    [
        ("f_score", r.f_score),
        ("precision", r.precision),
        ("recall", r.recall),
        ("ap", r.ap),
        ("ami", r.ami),
        ("few_shot_n1", r.few_shot.n1),
        ("few_shot_n4", r.few_shot.n4),
        ("few_shot_n16", r.few_shot.n16),
        ("few_shot_n64", r.few_shot.n64),
    ]
}

fn metrics_table(r: &MetricsReport) -> String {
    let mut s = String::new();
    for (name, v) in metric_rows(r) {
        let _ = writeln!(s, "{name:<14}{v:>10.4}");
    }
    s
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, source) = load_config(a.common.config.as_deref())?;
    let data = generate_dataset(&cfg.generator, a.seed)?;
    let manifest = save_dataset(&data, &a.out)?;
    RunManifest {
        command: "generate".into(),
        seed: a.seed,
        config_source: source,
        config: cfg,
        extra: serde_json::Value::Null,
    }
    .save(&a.out)?;
    if a.common.json {
        emit_json(
            out,
            &json!({
                "out": a.out,
                "seed": a.seed,
                "train_sequences": manifest.train_sequences,
                "test_sequences": manifest.test_sequences,
                "seq_len": manifest.seq_len,
                "files": manifest.checksums.len(),
            }),
        )
    } else {
        emit(
            out,
            &format!(
                "wrote {} train and {} test sequences of {} frames to {}\n",
                manifest.train_sequences,
                manifest.test_sequences,
                manifest.seq_len,
                a.out.display()
            ),
        )
    }
}

/// Motion priors for every frame of every sequence, train split first.
/// Global scope uses the training split's mode image for all sequences.
pub fn dataset_motion(data: &Dataset, cfg: &RunConfig, workers: usize) -> Result<Vec<Vec<MotionPrior>>> {
    let t = &cfg.train;
    let seqs: Vec<&LabeledSequence> = data.all_sequences().collect();
    let global = match t.background_scope {
        ModeScope::Global => {
            let split = if data.train.is_empty() { &data.test } else { &data.train };
            Some(training_backgrounds(split, ModeScope::Global)?.remove(0))
        }
        ModeScope::Local => None,
    };
    let params = t.motion_params();
    par_map(&seqs, workers, |s| {
        let local;
        let bg: &ModeBackground = match &global {
            Some(g) => g,
            None => {
                local = compute_mode_background(&s.sequence.frames().iter().collect::<Vec<_>>(), ModeScope::Local)?;
                &local
            }
        };
        s.sequence
            .frames()
            .iter()
            .map(|f| extract_motion_prior(f, bg, &params, t.model.grid_h, t.model.grid_w))
            .collect()
    })
    .into_iter()
    .collect()
}

/// Hit counts of raw motion boxes against the labels, summed over frames.
pub fn motion_counts(data: &Dataset, priors: &[Vec<MotionPrior>], eval: &EvalConfig) -> Result<PrCounts> {
    let mut total = PrCounts::default();
    for (seq, seq_priors) in data.all_sequences().zip(priors) {
        for (labels, prior) in seq.labels.iter().zip(seq_priors) {
            let dets: Vec<ScoredBox> = prior.boxes.iter().map(|&bbox| ScoredBox { bbox, score: 1.0 }).collect();
            total += precision_recall_counts(&dets, labels, &eval.matching, eval.all_objects)?;
        }
    }
    Ok(total)
}

fn cmd_extract_motion(a: ExtractArgs, out: &mut dyn Write) -> Result<()> {
    let (mut cfg, source) = load_config(a.common.config.as_deref())?;
    a.matching.apply(&mut cfg.eval)?;
    let data = load_dataset(&a.dataset)?;
    let priors = dataset_motion(&data, &cfg, worker_count())?;
    create_dir(&a.out)?;
    let mut frames = 0usize;
    let mut c_hat = 0usize;
    for (k, seq_priors) in priors.iter().enumerate() {
        let dir = a.out.join(format!("seq_{k}"));
        create_dir(&dir)?;
        let mut lines = String::new();
        for (t, p) in seq_priors.iter().enumerate() {
            write_pgm_mask(&dir.join(format!("mask_{t}.pgm")), p.alpha_hat.height, p.alpha_hat.width, &p.alpha_hat.data)?;
            let _ = write!(lines, "{{\"frame\":{t},\"objects\":[");
            for (i, b) in p.boxes.iter().enumerate() {
                if i > 0 {
                    lines.push(',');
                }
                let _ = write!(
                    lines,
                    "{{\"x_min\":{:.6},\"y_min\":{:.6},\"x_max\":{:.6},\"y_max\":{:.6},\"class\":-1,\"relevant\":true}}",
                    b.x_min, b.y_min, b.x_max, b.y_max
                );
            }
            lines.push_str("]}\n");
            frames += 1;
            c_hat += p.count;
        }
        write_text(&dir.join("boxes.jsonl"), &lines)?;
    }
    let counts = motion_counts(&data, &priors, &cfg.eval)?;
    let mean_c_hat = if frames == 0 { 0.0 } else { c_hat as f64 / frames as f64 };
    let summary = json!({
        "frames": frames,
        "mean_c_hat": mean_c_hat,
        "precision": counts.precision(),
        "recall": counts.recall(),
        "f_score": counts.f_score(),
    });
    RunManifest {
        command: "extract-motion".into(),
        seed: data.seed,
        config_source: source,
        config: cfg,
        extra: json!({ "dataset": a.dataset, "summary": summary }),
    }
    .save(&a.out)?;
    if a.common.json {
        emit_json(out, &summary)
    } else {
        emit(
            out,
            &format!(
                "{frames} frames, mean c_hat {mean_c_hat:.3}, motion precision {:.4} recall {:.4} f_score {:.4}\n",
                counts.precision(),
                counts.recall(),
                counts.f_score()
            ),
        )
    }
}

fn trace_csv(trace: &[StepMetrics]) -> String {
    let mut s = String::from("step,total,base,alpha,pres,loc,motion,oc,lambda_align,lambda_guid,detections_per_frame\n");
    for m in trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.step,
            m.total,
            m.base,
            m.alpha,
            m.pres,
            m.loc,
            m.motion,
            m.oc,
            m.lambda_align,
            m.lambda_guid,
            m.detections_per_frame
        );
    }
    s
}

fn schedule_csv(schedule: &[ScheduleRecord]) -> String {
    let mut s = String::from("epoch,bbms,c,c_hat,delta_align,lambda_align\n");
    for r in schedule {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.bbms, r.c, r.c_hat, r.delta_align, r.lambda_align);
    }
    s
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (mut cfg, source) = load_config(a.common.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    let data = load_dataset(&a.dataset)?;
    check_dims(&data, cfg.train.model.frame_height, cfg.train.model.frame_width)?;
    let background = evaluation_background(&data)?;
    create_dir(&a.out)?;

    let mut snapshots: Vec<(usize, MetricsReport)> = Vec::new();
    let result = train_with_hook(&cfg.train, &data.train, a.mode, cfg.eval.trace_every, &mut |step, params| {
        snapshots.push((step, evaluate(params, &data.test, &background, &cfg.eval)?));
        Ok(())
    });
    // Whatever was measured before an abort is still worth keeping.
    write_text(&a.out.join("metrics.csv"), &metrics_csv(&snapshots))?;
    let trained = result?;
    let final_report = snapshots.last().map(|s| s.1).unwrap_or_default();

    Checkpoint::new(&cfg.train, a.mode, cfg.train.steps, &trained.params).save(&a.out.join("checkpoint.json"))?;
    write_text(&a.out.join("metrics.json"), &serde_json::to_string_pretty(&final_report)?)?;
    write_text(&a.out.join("trace.csv"), &trace_csv(&trained.trace))?;
    write_text(&a.out.join("schedule.csv"), &schedule_csv(&trained.schedule))?;
    write_text(&a.out.join("schedule.json"), &serde_json::to_string_pretty(&trained.schedule)?)?;
    RunManifest {
        command: "train".into(),
        seed: cfg.train.seed,
        config_source: source,
        config: cfg.clone(),
        extra: json!({ "mode": a.mode, "dataset": a.dataset, "dataset_seed": data.seed }),
    }
    .save(&a.out)?;

    if a.common.json {
        emit_json(
            out,
            &json!({ "mode": a.mode, "seed": cfg.train.seed, "steps": cfg.train.steps, "metrics": final_report }),
        )
    } else {
        emit(
            out,
            &format!(
                "{} seed {} after {} steps\n{}",
                a.mode,
                cfg.train.seed,
                cfg.train.steps,
                metrics_table(&final_report)
            ),
        )
    }
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let (mut cfg, _) = load_config(a.common.config.as_deref())?;
    a.matching.apply(&mut cfg.eval)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let params = ck.params()?;
    let data = load_dataset(&a.dataset)?;
    check_dims(&data, params.config.frame_height, params.config.frame_width)?;
    let background = evaluation_background(&data)?;
    let report = evaluate(&params, &data.test, &background, &cfg.eval)?;
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        create_dir(&dir)?;
    }
    write_text(&dir.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    if a.common.json {
        emit_json(out, &report)
    } else {
        emit(out, &metrics_table(&report))
    }
}

fn run_label(dir: &Path) -> String {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    match RunManifest::load(dir).ok().and_then(|m| m.extra.get("mode").and_then(|v| v.as_str()).map(String::from)) {
        Some(mode) if mode != name => format!("{name} ({mode})"),
        _ => name,
    }
}

fn load_metrics(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|e| MocError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| MocError::Parse {
        path,
        line: e.line(),
        msg: e.to_string(),
    })
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> Result<()> {
    let labels: Vec<String> = a.runs.iter().map(|r| run_label(r)).collect();
    let reports = a.runs.iter().map(|r| load_metrics(r)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<(&str, Vec<f64>)> = metric_rows(&MetricsReport::default())
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (*name, reports.iter().map(|r| metric_rows(r)[i].1).collect()))
        .collect();

    let mut csv = String::from("metric");
    for l in &labels {
        csv.push(',');
        csv.push_str(&l.replace(',', ";"));
    }
    csv.push('\n');
    for (name, vals) in &rows {
        csv.push_str(name);
        for v in vals {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_text(&dir.join("compare.csv"), &csv)?;
    }

    if a.json {
        let runs: Vec<_> = labels
            .iter()
            .zip(&a.runs)
            .zip(&reports)
            .map(|((l, d), r)| json!({ "label": l, "dir": d, "metrics": r }))
            .collect();
        return emit_json(out, &json!({ "runs": runs }));
    }
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max(10) + 2;
    let mut s = format!("{:<14}", "metric");
    for l in &labels {
        let _ = write!(s, "{l:>width$}");
    }
    s.push('\n');
    for (name, vals) in &rows {
        let _ = write!(s, "{name:<14}");
        for v in vals {
            let _ = write!(s, "{v:>width$.4}");
        }
        s.push('\n');
    }
    emit(out, &s)
}

fn cmd_schedule(a: ScheduleArgs, out: &mut dyn Write) -> Result<()> {
    let path = a.run.join("schedule.json");
    let text = fs::read_to_string(&path).map_err(|e| MocError::io(&path, e))?;
    let records: Vec<ScheduleRecord> = serde_json::from_str(&text).map_err(|e| MocError::Parse {
        path,
        line: e.line(),
        msg: e.to_string(),
    })?;
    if a.json {
        return emit_json(out, &records);
    }
    let mut s = format!("{:>6}{:>10}{:>8}{:>8}{:>10}{:>10}\n", "epoch", "bbms", "c", "c_hat", "delta", "lambda");
    for r in &records {
        let _ = writeln!(
            s,
            "{:>6}{:>10.4}{:>8}{:>8}{:>10.4}{:>10.4}",
            r.epoch, r.bbms, r.c, r.c_hat, r.delta_align, r.lambda_align
        );
    }
    emit(out, &s)
}
