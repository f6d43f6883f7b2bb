//! One entry point per CLI command. Each takes the resolved settings and an
//! output directory, writes its artifacts there and returns a short
//! human-readable summary.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::bench::{run_bench, BenchRow};
use crate::harness::config::RunConfig;
use crate::harness::demos::{demo_fib, demo_map, FibReport, MapRun};
use crate::harness::metrics::MetricsWriter;
use crate::harness::train::{
    distill_student, load_student, load_teacher, parallel_threads, run_train_classifier, sample_from_checkpoints,
    train_teacher, CLASSIFIER_CKPT, STUDENT_CKPT, TEACHER_CKPT,
};
use crate::rng::RngStream;
use crate::student::FlowStack;
use crate::teacher::TeacherNet;

pub const BENCH_METRICS: &str = "bench.csv";
pub const DEMO_MAP_METRICS: &str = "demo_map.csv";
pub const DEMO_MAP_SUMMARY: &str = "demo_map_summary.csv";
pub const DEMO_FIB_METRICS: &str = "demo_fib.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train_teacher(run: &RunConfig, out: &Path) -> Result<String> {
    let (net, report) = train_teacher(run, out)?;
    Ok(format!(
        "teacher: {} parameters, {} steps; held-out NLL {:.4} -> {:.4} nats/sample",
        net.param_count(),
        report.losses.len(),
        report.initial_eval_nll,
        report.final_eval_nll
    ))
}

pub fn cmd_train_classifier(run: &RunConfig, out: &Path) -> Result<String> {
    let (cls, losses) = run_train_classifier(run, out)?;
    Ok(format!(
        "classifier: {} steps, final loss {:.4}, held-out frame accuracy {:.3}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        cls.accuracy().unwrap_or(f64::NAN)
    ))
}

pub fn cmd_distill(run: &RunConfig, out: &Path) -> Result<String> {
    let classifier = out.join(CLASSIFIER_CKPT);
    let (_, report) = distill_student(run, &out.join(TEACHER_CKPT), Some(&classifier), out)?;
    let (first, last) = report.smoothed_kl((report.breakdowns.len() / 20).max(1));
    Ok(format!(
        "distill ({}): {} steps; smoothed KL {:.4} -> {:.4} nats/timestep",
        run.distill_training.preset,
        report.breakdowns.len(),
        first,
        last
    ))
}

pub fn cmd_sample(run: &RunConfig, out: &Path) -> Result<String> {
    let report = sample_from_checkpoints(run, &out.join(TEACHER_CKPT), &out.join(STUDENT_CKPT), out)?;
    Ok(format!(
        "sample: {} clips of {} samples from teacher and student; spectral distance {:.4}",
        report.teacher.shape()[0],
        report.teacher.shape()[2],
        report.spectral_distance
    ))
}

/// Trained models when present in `out`, fresh ones otherwise (speed does
/// not depend on the weights).
fn bench_models(run: &RunConfig, out: &Path) -> Result<(TeacherNet, FlowStack)> {
    let teacher = match out.join(TEACHER_CKPT) {
        p if p.is_file() => load_teacher(&p)?,
        _ => TeacherNet::new(run.teacher.clone(), &mut RngStream::derive(run.seed, "teacher-init", 0))?,
    };
    let student = match out.join(STUDENT_CKPT) {
        p if p.is_file() => load_student(&p)?,
        _ => FlowStack::new(run.student.clone(), &mut RngStream::derive(run.seed, "student-init", 0))?,
    };
    Ok((teacher, student))
}

pub fn write_bench(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut m = MetricsWriter::create(
        path,
        &["mode", "t", "batch", "threads", "wall_seconds", "timesteps_per_second", "speedup"],
    )?;
    for row in rows {
        for r in [&row.ancestral, &row.parallel] {
            m.record(&[
                r.mode.to_string(),
                r.t.to_string(),
                r.batch.to_string(),
                r.threads.to_string(),
                r.wall_seconds.to_string(),
                r.timesteps_per_second.to_string(),
                row.speedup().to_string(),
            ])?;
        }
    }
    m.flush()
}

pub fn cmd_bench(run: &RunConfig, out: &Path) -> Result<(Vec<BenchRow>, String)> {
    ensure_dir(out)?;
    let (teacher, student) = bench_models(run, out)?;
    let rows = run_bench(
        &teacher,
        &student,
        &run.bench.lengths.0,
        run.bench.reps,
        run.bench.batch,
        parallel_threads(),
        run.corpus.frame_rate_divisor,
        run.seed,
    )?;
    write_bench(&rows, &out.join(BENCH_METRICS))?;
    let mut text = String::from("T        ancestral/s    parallel/s     speedup\n");
    for r in &rows {
        text.push_str(&format!(
            "{:<8} {:<14.1} {:<14.1} {:.2}\n",
            r.ancestral.t,
            r.ancestral.timesteps_per_second,
            r.parallel.timesteps_per_second,
            r.speedup()
        ));
    }
    Ok((rows, text))
}

pub fn write_demo_map(runs: &[MapRun], out: &Path) -> Result<()> {
    let mut curve = MetricsWriter::create(&out.join(DEMO_MAP_METRICS), &["objective", "step", "loss"])?;
    let mut summary = MetricsWriter::create(&out.join(DEMO_MAP_SUMMARY), &["objective", "mean_log_s", "rms"])?;
    for r in runs {
        for (step, l) in r.losses.iter().enumerate() {
            curve.record(&[r.objective.name().into(), step.to_string(), l.to_string()])?;
        }
        summary.record(&[r.objective.name().into(), r.mean_log_s.to_string(), r.rms.to_string()])?;
    }
    curve.flush()?;
    summary.flush()
}

pub fn cmd_demo_map(run: &RunConfig, out: &Path) -> Result<([MapRun; 2], String)> {
    ensure_dir(out)?;
    let runs = demo_map(&run.demo_map, run.seed)?;
    write_demo_map(&runs, out)?;
    let text = runs
        .iter()
        .map(|r| format!("{:<3} mean ln s_tot {:>8.4}   sample RMS {:.4}\n", r.objective.name(), r.mean_log_s, r.rms))
        .collect();
    Ok((runs, text))
}

pub fn write_demo_fib(report: &FibReport, path: &Path) -> Result<()> {
    let mut m = MetricsWriter::create(path, &["model", "receptive_field", "max_abs_error", "rms_error"])?;
    let a = report.autoregressive;
    m.record(&["autoregressive".into(), "2".into(), a.max_abs.to_string(), a.rms.to_string()])?;
    for (r, e) in &report.feedforward {
        m.record(&["feedforward".into(), r.to_string(), e.max_abs.to_string(), e.rms.to_string()])?;
    }
    m.flush()
}

pub fn cmd_demo_fib(run: &RunConfig, out: &Path) -> Result<(FibReport, String)> {
    ensure_dir(out)?;
    let report = demo_fib(&run.demo_fib, run.seed)?;
    write_demo_fib(&report, &out.join(DEMO_FIB_METRICS))?;
    let a = report.autoregressive;
    let mut text = format!("autoregressive (rf 2): held-out max error {:.3e}, rms {:.3e}\n", a.max_abs, a.rms);
    for (r, e) in &report.feedforward {
        text.push_str(&format!("feedforward (rf {r}): reconstruction max error {:.3e}, rms {:.3e}\n", e.max_abs, e.rms));
    }
    Ok((report, text))
}
