//! Training, distillation and sampling drivers that read and write run
//! artifacts in an output directory.

use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::distill::spectral::{average_power_spectrum, relative_l2};
use crate::distill::{distill_step, DistillBatch, LossBreakdown};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::classifier::{train_classifier, PhoneClassifier};
use crate::harness::config::{ConfigMap, RunConfig};
use crate::harness::corpus::{synth_corpus, Corpus};
use crate::harness::metrics::MetricsWriter;
use crate::harness::wav::write_wav;
use crate::params::{Adam, Binding};
use crate::rng::RngStream;
use crate::student::{draw_latent, FlowStack, ParallelOptions};
use crate::teacher::{ancestral_sample, ConditioningSeq, TeacherNet};
use crate::tensor::Tensor;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";
pub const TEACHER_METRICS: &str = "teacher_metrics.csv";
pub const CLASSIFIER_METRICS: &str = "classifier_metrics.csv";
pub const DISTILL_METRICS: &str = "distill_metrics.csv";
pub const SAMPLE_METRICS: &str = "sample_metrics.csv";

const ACCURACY_KEY: &str = "classifier.accuracy";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Config(format!("missing checkpoint {}", path.display())))
    }
}

fn checkpoint(kind: &str, config: &ConfigMap, step: usize, rng: &RngStream, params: &crate::params::Params) -> Checkpoint {
    Checkpoint {
        kind: kind.to_string(),
        config: config.to_text(),
        step: step as u64,
        rng: rng.state(),
        params: params.clone(),
    }
}

/// Settings a checkpoint was written with.
pub fn checkpoint_run(ckpt: &Checkpoint) -> Result<RunConfig> {
    let mut map = ConfigMap::parse(&ckpt.config)?;
    map.remove(ACCURACY_KEY);
    RunConfig::from_map(&map)
}

pub fn load_teacher(path: &Path) -> Result<TeacherNet> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind("teacher")?;
    let run = checkpoint_run(&ckpt)?;
    TeacherNet::from_params(run.teacher, ckpt.params)
}

pub fn load_student(path: &Path) -> Result<FlowStack> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind("student")?;
    let run = checkpoint_run(&ckpt)?;
    FlowStack::from_params(run.student, ckpt.params)
}

pub fn save_classifier(cls: &PhoneClassifier, run: &RunConfig, path: &Path) -> Result<()> {
    let accuracy = cls.accuracy().ok_or(Error::UntrainedClassifier)?;
    let mut map = run.to_map();
    map.set(ACCURACY_KEY, accuracy);
    checkpoint("classifier", &map, 0, &RngStream::new(run.seed, 0), cls.params()).save(path)
}

pub fn load_classifier(path: &Path) -> Result<PhoneClassifier> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind("classifier")?;
    let map = ConfigMap::parse(&ckpt.config)?;
    let accuracy = map
        .get(ACCURACY_KEY)
        .map(|v| v.parse::<f64>())
        .transpose()
        .map_err(|e| Error::CorruptCheckpoint(format!("accuracy: {e}")))?;
    let run = checkpoint_run(&ckpt)?;
    PhoneClassifier::from_params(run.classifier, ckpt.params, accuracy)
}

fn check_conditioning(corpus: &Corpus, expected: usize, what: &str) -> Result<()> {
    let have = corpus.spec.conditioning_channels();
    if have == expected {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} expects {expected} conditioning channels, corpus provides {have}"
        )))
    }
}

#[derive(Clone, Debug)]
pub struct TeacherReport {
    /// Per-step training NLL in nats per sample.
    pub losses: Vec<f64>,
    /// NLL of the held-out clips before and after training.
    pub initial_eval_nll: f64,
    pub final_eval_nll: f64,
}

fn held_out_nll(net: &TeacherNet, corpus: &Corpus, held: &[usize]) -> Result<f64> {
    let spec = net.config().discretization();
    let frames = corpus.spec.frames_per_clip();
    let batch = corpus.batch(held, &vec![0; held.len()], frames, Some(&spec))?;
    let rows = net.nll_per_row(&batch.wave, &batch.cond)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Maximum-likelihood training of the teacher on the corpus' training clips.
/// Writes `teacher.ckpt` every `checkpoint_every` steps and at the end; on a
/// non-finite loss the previous checkpoint is left untouched.
pub fn train_teacher(run: &RunConfig, out: &Path) -> Result<(TeacherNet, TeacherReport)> {
    ensure_dir(out)?;
    let corpus = synth_corpus(&run.corpus)?;
    let (train, held) = corpus.split(run.classifier_training.held_out);
    if train.is_empty() || held.is_empty() {
        return Err(Error::Config("teacher needs training and held-out clips".into()));
    }
    let mut net = TeacherNet::new(run.teacher.clone(), &mut RngStream::derive(run.seed, "teacher-init", 0))?;
    let spec = net.config().discretization();
    let opts = &run.teacher_training;
    let map = run.to_map();
    let ckpt_path = out.join(TEACHER_CKPT);
    let mut metrics = MetricsWriter::create(&out.join(TEACHER_METRICS), &["step", "nll"])?;
    let initial_eval_nll = held_out_nll(&net, &corpus, &held)?;
    let mut adam = Adam::new(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut rng = RngStream::derive(run.seed, "teacher-batch", step as u64);
        let batch = corpus.random_batch(&train, opts.batch, opts.crop_frames, Some(&spec), &mut rng)?;
        let mut g = Graph::new();
        let loss = net.nll(&mut g, &batch.wave, &batch.cond, Binding::Trainable)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("teacher nll {value}"),
            });
        }
        let grads = g.backward(loss)?.into_named();
        adam.update(net.params_mut(), &grads);
        metrics.record_step(step, &[value])?;
        losses.push(value);
        let done = step + 1;
        if done == opts.steps || (opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0) {
            metrics.flush()?;
            checkpoint("teacher", &map, done, &rng, net.params()).save(&ckpt_path)?;
        }
    }
    metrics.flush()?;
    let final_eval_nll = held_out_nll(&net, &corpus, &held)?;
    Ok((
        net,
        TeacherReport {
            losses,
            initial_eval_nll,
            final_eval_nll,
        },
    ))
}

/// Trains the phone classifier and writes `classifier.ckpt`.
pub fn run_train_classifier(run: &RunConfig, out: &Path) -> Result<(PhoneClassifier, Vec<f64>)> {
    ensure_dir(out)?;
    let corpus = synth_corpus(&run.corpus)?;
    let (cls, losses) = train_classifier(&corpus, run.classifier.clone(), &run.classifier_training)?;
    let mut metrics = MetricsWriter::create(&out.join(CLASSIFIER_METRICS), &["step", "loss"])?;
    for (step, &l) in losses.iter().enumerate() {
        metrics.record_step(step, &[l])?;
    }
    metrics.flush()?;
    save_classifier(&cls, run, &out.join(CLASSIFIER_CKPT))?;
    Ok((cls, losses))
}

#[derive(Clone, Debug)]
pub struct DistillReport {
    pub breakdowns: Vec<LossBreakdown>,
}

impl DistillReport {
    /// Mean per-timestep KL over the first and last `window` steps.
    pub fn smoothed_kl(&self, window: usize) -> (f64, f64) {
        let n = self.breakdowns.len();
        let w = window.clamp(1, n.max(1));
        let mean = |s: &[LossBreakdown]| s.iter().map(|b| b.kl).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.breakdowns[..w.min(n)]), mean(&self.breakdowns[n.saturating_sub(w)..]))
    }
}

/// Distils a fresh student from the frozen teacher in `teacher_path`.
/// `classifier_path` is required when the perceptual term is active.
pub fn distill_student(
    run: &RunConfig,
    teacher_path: &Path,
    classifier_path: Option<&Path>,
    out: &Path,
) -> Result<(FlowStack, DistillReport)> {
    ensure_dir(out)?;
    let teacher = load_teacher(&require(teacher_path.to_path_buf())?)?;
    let cfg = run.effective_distill();
    let classifier = if cfg.lambda_perceptual > 0.0 {
        let path = classifier_path
            .ok_or_else(|| Error::Config("the perceptual term needs a classifier checkpoint".into()))?;
        Some(load_classifier(&require(path.to_path_buf())?)?)
    } else {
        None
    };
    let corpus = synth_corpus(&run.corpus)?;
    check_conditioning(&corpus, teacher.config().conditioning_channels, "teacher")?;
    let (train, _) = corpus.split(run.classifier_training.held_out);
    if train.is_empty() {
        return Err(Error::Config("no training clips".into()));
    }
    let mut stack = FlowStack::new(run.student.clone(), &mut RngStream::derive(run.seed, "student-init", 0))?;
    let opts = &run.distill_training;
    let map = run.to_map();
    let ckpt_path = out.join(STUDENT_CKPT);
    let mut header = vec!["step"];
    header.extend(LossBreakdown::COLUMNS);
    let mut metrics = MetricsWriter::create(&out.join(DISTILL_METRICS), &header)?;
    let mut adam = Adam::new(cfg.lr);
    let mut breakdowns = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch_rng = RngStream::derive(run.seed, "distill-batch", step as u64);
        let batch = corpus.random_batch(&train, opts.batch, opts.crop_frames, None, &mut batch_rng)?;
        let batch = DistillBatch {
            cond: batch.cond,
            y_ref: batch.wave,
        };
        let mut rng = RngStream::derive(run.seed, "distill-noise", step as u64);
        let b = distill_step(&mut stack, &teacher, classifier.as_ref(), &batch, &cfg, &mut adam, step, &mut rng)?;
        metrics.record_step(step, &b.values())?;
        breakdowns.push(b);
        let done = step + 1;
        if done == opts.steps || (opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0) {
            metrics.flush()?;
            checkpoint("student", &map, done, &rng, stack.params()).save(&ckpt_path)?;
        }
    }
    metrics.flush()?;
    Ok((stack, DistillReport { breakdowns }))
}

/// Conditioning of the first `count` held-out clips, long enough for `t`
/// samples.
pub fn held_out_conditioning(run: &RunConfig, corpus: &Corpus, t: usize) -> Result<ConditioningSeq> {
    let (_, held) = corpus.split(run.classifier_training.held_out);
    if held.is_empty() {
        return Err(Error::Config("no held-out clips to condition on".into()));
    }
    let ids: Vec<usize> = held.iter().copied().cycle().take(run.sample.count).collect();
    let frames = t.div_ceil(corpus.spec.frame_rate_divisor);
    Ok(corpus.batch(&ids, &vec![0; ids.len()], frames, None)?.cond)
}

#[derive(Clone, Debug)]
pub struct SampleReport {
    /// `[count, 1, T]`, clamped to `[-1, 1]`.
    pub teacher: Tensor,
    pub student: Tensor,
    pub teacher_spectrum: Vec<f64>,
    pub student_spectrum: Vec<f64>,
    /// Relative L2 distance of the student's average power spectrum from
    /// the teacher's.
    pub spectral_distance: f64,
}

/// Thread count for parallel generation: `PDISTILL_THREADS` or 1.
pub fn parallel_threads() -> usize {
    std::env::var("PDISTILL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Renders held-out conditioning with both the teacher (ancestral) and the
/// student (parallel), writes `teacher_XX.wav` / `student_XX.wav` and the
/// two average power spectra.
pub fn sample_both(run: &RunConfig, teacher: &TeacherNet, student: &FlowStack, out: &Path) -> Result<SampleReport> {
    ensure_dir(out)?;
    let corpus = synth_corpus(&run.corpus)?;
    check_conditioning(&corpus, teacher.config().conditioning_channels, "teacher")?;
    check_conditioning(&corpus, student.config().conditioning_channels, "student")?;
    let t = run.sample.length;
    let cond = held_out_conditioning(run, &corpus, t)?;
    let clamp = |x: Tensor| x.map(|v| v.clamp(-1.0, 1.0));
    let teacher_x = clamp(ancestral_sample(teacher, &cond, t, &mut RngStream::derive(run.seed, "sample-teacher", 0))?);
    let z = draw_latent(cond.batch(), t, &mut RngStream::derive(run.seed, "sample-student", 0));
    let opts = ParallelOptions {
        threads: parallel_threads(),
        ..ParallelOptions::default()
    };
    let student_x = clamp(student.generate_parallel(&z, &cond, opts)?);
    let rate = run.corpus.sample_rate as u32;
    for row in 0..cond.batch() {
        write_wav(&teacher_x.narrow_first(row, row + 1).into_data(), rate, &out.join(format!("teacher_{row:02}.wav")))?;
        write_wav(&student_x.narrow_first(row, row + 1).into_data(), rate, &out.join(format!("student_{row:02}.wav")))?;
    }
    let spec = &run.distill.spectrogram;
    let teacher_spectrum = average_power_spectrum(&teacher_x, spec)?;
    let student_spectrum = average_power_spectrum(&student_x, spec)?;
    let spectral_distance = relative_l2(&student_spectrum, &teacher_spectrum);
    let mut metrics = MetricsWriter::create(&out.join(SAMPLE_METRICS), &["bin", "teacher_power", "student_power"])?;
    for (k, (a, b)) in teacher_spectrum.iter().zip(&student_spectrum).enumerate() {
        metrics.record_step(k, &[*a, *b])?;
    }
    metrics.flush()?;
    Ok(SampleReport {
        teacher: teacher_x,
        student: student_x,
        teacher_spectrum,
        student_spectrum,
        spectral_distance,
    })
}

/// [`sample_both`] with models loaded from `teacher.ckpt` and `student.ckpt`.
pub fn sample_from_checkpoints(run: &RunConfig, teacher_path: &Path, student_path: &Path, out: &Path) -> Result<SampleReport> {
    let teacher = load_teacher(&require(teacher_path.to_path_buf())?)?;
    let student = load_student(&require(student_path.to_path_buf())?)?;
    sample_both(run, &teacher, &student, out)
}
