//! Throughput of ancestral teacher sampling against parallel student
//! generation.

use std::fmt;
use std::time::Instant;

use crate::error::Result;
use crate::rng::RngStream;
use crate::student::{draw_latent, FlowStack, ParallelOptions};
use crate::teacher::{ancestral_sample, ConditioningSeq, TeacherNet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Ancestral,
    Parallel,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Ancestral => "ancestral",
            BenchMode::Parallel => "parallel",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub t: usize,
    pub batch: usize,
    /// Median over repetitions.
    pub wall_seconds: f64,
    pub timesteps_per_second: f64,
    pub threads: usize,
}

impl BenchReport {
    fn new(mode: BenchMode, t: usize, batch: usize, wall_seconds: f64, threads: usize) -> Self {
        BenchReport {
            mode,
            t,
            batch,
            wall_seconds,
            timesteps_per_second: (t * batch) as f64 / wall_seconds,
            threads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub ancestral: BenchReport,
    pub parallel: BenchReport,
}

impl BenchRow {
    /// Parallel over ancestral timesteps per second.
    pub fn speedup(&self) -> f64 {
        self.parallel.timesteps_per_second / self.ancestral.timesteps_per_second
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Times both generators at every length. The ancestral path is
/// single-threaded; the parallel path uses `threads`.
pub fn run_bench(
    teacher: &TeacherNet,
    student: &FlowStack,
    lengths: &[usize],
    reps: usize,
    batch: usize,
    threads: usize,
    frame_rate_divisor: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let channels = teacher.config().conditioning_channels;
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let frames = t.div_ceil(frame_rate_divisor);
        let mut rng = RngStream::derive(seed, "bench-cond", t as u64);
        let cond = ConditioningSeq::new(Tensor::from_fn(&[batch, channels, frames], |_| rng.normal()), frame_rate_divisor)?;
        let ancestral = time_reps(reps, || {
            ancestral_sample(teacher, &cond, t, &mut RngStream::derive(seed, "bench-teacher", t as u64)).map(drop)
        })?;
        let z = draw_latent(batch, t, &mut RngStream::derive(seed, "bench-student", t as u64));
        let opts = ParallelOptions {
            threads,
            ..ParallelOptions::default()
        };
        let parallel = time_reps(reps, || student.generate_parallel(&z, &cond, opts).map(drop))?;
        rows.push(BenchRow {
            ancestral: BenchReport::new(BenchMode::Ancestral, t, batch, ancestral, 1),
            parallel: BenchReport::new(BenchMode::Parallel, t, batch, parallel, threads),
        });
    }
    Ok(rows)
}
