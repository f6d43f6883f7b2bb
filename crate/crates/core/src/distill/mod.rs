//! Probability density distillation: the student is trained to minimise
//! `KL(P_S ‖ P_T) = H(P_S, P_T) − H(P_S)` against a frozen teacher, with
//! optional power, perceptual and contrastive terms.
//!
//! The entropy is closed form. The cross-entropy is estimated per timestep
//! by drawing `M` values from the student's logistic at `t` and scoring them
//! under the teacher's distribution at `t`, which the teacher produces for
//! every position in one pass over the student's own sample.

pub mod perceptual;
pub mod spectral;

use crate::autodiff::{Graph, Var};
use crate::distributions::tape::mol_log_density;
use crate::error::{Error, Result};
use crate::harness::classifier::PhoneClassifier;
use crate::params::{Adam, Binding};
use crate::rng::RngStream;
use crate::student::{draw_latent, student_entropy_term, FlowStack, StudentVars};
use crate::teacher::{ConditioningSeq, MolVars, TeacherNet};
use crate::tensor::Tensor;

pub use perceptual::{perceptual_loss, PerceptualMode};
pub use spectral::{power_loss, stft_power, SpectrogramSpec, Window};

/// A frozen per-timestep density over waveforms.
pub trait TeacherDensity {
    /// Mixture parameters `[B, K, T]` for every position of `x` (`[B, 1, T]`).
    /// No gradient reaches the teacher's own parameters. The mixture is a
    /// density on the whole real line; only the history may be clamped.
    fn mixture(&self, g: &mut Graph, x: Var, cond: &ConditioningSeq) -> Result<MolVars>;
}

impl TeacherDensity for TeacherNet {
    fn mixture(&self, g: &mut Graph, x: Var, cond: &ConditioningSeq) -> Result<MolVars> {
        let t = g.shape(x)[2];
        let inside = g.clamp(x, -1.0, 1.0);
        let c = g.constant(cond.upsample(t)?);
        self.forward(g, inside, c, Binding::Frozen)
    }
}

/// White noise: the same logistic at every timestep, whatever the history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticTeacher {
    pub mu: f64,
    pub log_s: f64,
}

impl AnalyticTeacher {
    pub fn unit() -> Self {
        AnalyticTeacher { mu: 0.0, log_s: 0.0 }
    }
}

impl TeacherDensity for AnalyticTeacher {
    fn mixture(&self, g: &mut Graph, x: Var, _cond: &ConditioningSeq) -> Result<MolVars> {
        let shape = g.shape(x).to_vec();
        Ok(MolVars {
            logits: g.constant(Tensor::zeros(&shape)),
            mus: g.constant(Tensor::full(&shape, self.mu)),
            log_ss: g.constant(Tensor::full(&shape, self.log_s)),
        })
    }
}

/// Standard logistic noise `[B, M, 1, T]` for the inner samples.
pub fn draw_inner_noise(b: usize, m: usize, t: usize, rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(&[b, m, 1, t], |_| rng.logistic())
}

fn check_finite(g: &Graph, v: Var, op: &'static str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { node: v.id(), op })
    }
}

/// Batch mean of `Σ_t −(1/M) Σ_m ln p_T(x_t^(m) | x_<t)` with
/// `x_t^(m) = mu_tot[t] + s_tot[t] · u^(m)` and `u` = `noise` (`[B, M, 1, T]`).
/// Differentiable through both the prefix and the inner samples.
pub fn cross_entropy_with_noise(
    g: &mut Graph,
    student: &StudentVars,
    teacher: &dyn TeacherDensity,
    cond: &ConditioningSeq,
    noise: &Tensor,
) -> Result<Var> {
    let shape = g.shape(student.x).to_vec();
    let (b, t) = (shape[0], shape[2]);
    let ns = noise.shape();
    if ns.len() != 4 || ns[0] != b || ns[2] != 1 || ns[3] != t || ns[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_term (noise)",
            left: shape,
            right: ns.to_vec(),
        });
    }
    let m = ns[1];
    let params = teacher.mixture(g, student.x, cond)?;
    let k = g.shape(params.logits)[1];
    let mu = g.reshape(student.mu_tot, &[b, 1, 1, t])?;
    let log_s = g.reshape(student.log_s_tot, &[b, 1, 1, t])?;
    let s = g.exp(log_s);
    let u = g.constant(noise.clone());
    let spread = g.mul(u, s)?;
    let inner = g.add(spread, mu)?;
    let logits = g.reshape(params.logits, &[b, 1, k, t])?;
    let mus = g.reshape(params.mus, &[b, 1, k, t])?;
    let log_ss = g.reshape(params.log_ss, &[b, 1, k, t])?;
    let lp = mol_log_density(g, inner, logits, mus, log_ss, 2)?;
    check_finite(g, lp, "teacher log-density")?;
    let total = g.sum(lp);
    Ok(g.scale(total, -1.0 / (b * m) as f64))
}

/// [`cross_entropy_with_noise`] with `M` fresh inner draws from `rng`.
pub fn cross_entropy_term(
    g: &mut Graph,
    student: &StudentVars,
    teacher: &dyn TeacherDensity,
    cond: &ConditioningSeq,
    m: usize,
    rng: &mut RngStream,
) -> Result<Var> {
    let shape = g.shape(student.x).to_vec();
    let noise = draw_inner_noise(shape[0], m, shape[2], rng);
    cross_entropy_with_noise(g, student, teacher, cond, &noise)
}

/// Single-sample estimate: the student's own `x_t` scored by the teacher.
pub fn naive_cross_entropy_term(
    g: &mut Graph,
    student: &StudentVars,
    teacher: &dyn TeacherDensity,
    cond: &ConditioningSeq,
) -> Result<Var> {
    let b = g.shape(student.x)[0];
    let params = teacher.mixture(g, student.x, cond)?;
    let lp = mol_log_density(g, student.x, params.logits, params.mus, params.log_ss, 1)?;
    check_finite(g, lp, "teacher log-density")?;
    let total = g.sum(lp);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// The three terms of the KL decomposition, summed over time and averaged
/// over the batch.
#[derive(Clone, Copy, Debug)]
pub struct KlTerms {
    pub kl: Var,
    pub cross_entropy: Var,
    pub entropy: Var,
}

pub fn kl_with_noise(
    g: &mut Graph,
    student: &StudentVars,
    teacher: &dyn TeacherDensity,
    cond: &ConditioningSeq,
    noise: &Tensor,
) -> Result<KlTerms> {
    let entropy = student_entropy_term(g, student.log_s_tot);
    let cross_entropy = cross_entropy_with_noise(g, student, teacher, cond, noise)?;
    let kl = g.sub(cross_entropy, entropy)?;
    Ok(KlTerms {
        kl,
        cross_entropy,
        entropy,
    })
}

pub fn kl_loss(
    g: &mut Graph,
    student: &StudentVars,
    teacher: &dyn TeacherDensity,
    cond: &ConditioningSeq,
    m: usize,
    rng: &mut RngStream,
) -> Result<KlTerms> {
    let shape = g.shape(student.x).to_vec();
    let noise = draw_inner_noise(shape[0], m, shape[2], rng);
    kl_with_noise(g, student, teacher, cond, &noise)
}

/// `KL(P_S(c1) ‖ P_T(c1)) − γ · KL(P_S(c1) ‖ P_T(c2))` on one student sample
/// generated with `c1`. Returns the objective and the mismatched KL.
pub fn contrastive_loss(
    g: &mut Graph,
    student: &StudentVars,
    teacher: &dyn TeacherDensity,
    c1: &ConditioningSeq,
    c2: &ConditioningSeq,
    gamma: f64,
    noise: &Tensor,
) -> Result<(Var, Var)> {
    if c1 == c2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs two different conditioning inputs".into(),
        ));
    }
    let matched = kl_with_noise(g, student, teacher, c1, noise)?;
    let ce2 = cross_entropy_with_noise(g, student, teacher, c2, noise)?;
    let kl2 = g.sub(ce2, matched.entropy)?;
    let weighted = g.scale(kl2, -gamma);
    let objective = g.add(matched.kl, weighted)?;
    Ok((objective, kl2))
}

/// Which auxiliary terms a distillation run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPreset {
    KlPower,
    KlPowerPerceptual,
    Full,
}

impl LossPreset {
    pub const ALL: [LossPreset; 3] = [LossPreset::KlPower, LossPreset::KlPowerPerceptual, LossPreset::Full];

    pub fn name(self) -> &'static str {
        match self {
            LossPreset::KlPower => "kl+power",
            LossPreset::KlPowerPerceptual => "kl+power+perceptual",
            LossPreset::Full => "kl+power+perceptual+contrastive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        LossPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub inner_samples: usize,
    pub lambda_power: f64,
    pub lambda_perceptual: f64,
    pub gamma: f64,
    pub perceptual_mode: PerceptualMode,
    pub spectrogram: SpectrogramSpec,
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            inner_samples: 16,
            lambda_power: 1.0,
            lambda_perceptual: 1.0,
            gamma: 0.3,
            perceptual_mode: PerceptualMode::Gram,
            spectrogram: SpectrogramSpec::default(),
            lr: 5e-4,
        }
    }
}

impl DistillConfig {
    pub fn preset(preset: LossPreset) -> Self {
        let full = DistillConfig::default();
        match preset {
            LossPreset::KlPower => DistillConfig {
                lambda_perceptual: 0.0,
                gamma: 0.0,
                ..full
            },
            LossPreset::KlPowerPerceptual => DistillConfig { gamma: 0.0, ..full },
            LossPreset::Full => full,
        }
    }

    /// Only the KL term.
    pub fn kl_only() -> Self {
        DistillConfig {
            lambda_power: 0.0,
            lambda_perceptual: 0.0,
            gamma: 0.0,
            ..DistillConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_samples == 0 {
            return Err(Error::Config("distill.inner_samples must be >= 1".into()));
        }
        let weights = [self.lambda_power, self.lambda_perceptual, self.gamma];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights and gamma must be finite and >= 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("distill.lr must be positive".into()));
        }
        Ok(())
    }
}

/// Loss values of one step. KL-family terms are in nats per timestep.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub kl: f64,
    pub cross_entropy: f64,
    pub entropy: f64,
    pub power: f64,
    pub perceptual: f64,
    /// `−γ · KL` under mismatched conditioning (zero when disabled).
    pub contrastive: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 7] = [
        "kl",
        "cross_entropy",
        "entropy",
        "power",
        "perceptual",
        "contrastive",
        "total",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.kl,
            self.cross_entropy,
            self.entropy,
            self.power,
            self.perceptual,
            self.contrastive,
            self.total,
        ]
    }
}

/// Conditioning and matched reference audio for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillBatch {
    pub cond: ConditioningSeq,
    /// `[B, 1, T]`.
    pub y_ref: Tensor,
}

/// Builds every configured term for one batch and returns the differentiable
/// total with its breakdown.
pub fn distill_objective(
    g: &mut Graph,
    stack: &FlowStack,
    teacher: &dyn TeacherDensity,
    classifier: Option<&PhoneClassifier>,
    batch: &DistillBatch,
    cfg: &DistillConfig,
    rng: &mut RngStream,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let (b, t) = (batch.y_ref.shape()[0], batch.y_ref.shape()[2]);
    let z = draw_latent(b, t, rng);
    let noise = draw_inner_noise(b, cfg.inner_samples, t, rng);
    let zv = g.constant(z);
    let cv = g.constant(batch.cond.upsample(t)?);
    let student = stack.generate(g, zv, cv, Binding::Trainable)?;
    let terms = kl_with_noise(g, &student, teacher, &batch.cond, &noise)?;
    let per_t = 1.0 / t as f64;
    let mut out = LossBreakdown {
        cross_entropy: g.value(terms.cross_entropy).item() * per_t,
        entropy: g.value(terms.entropy).item() * per_t,
        ..LossBreakdown::default()
    };
    out.kl = out.cross_entropy - out.entropy;

    let mut kl_part = terms.kl;
    if cfg.gamma > 0.0 {
        let c2 = batch.cond.roll_batch(1);
        if c2 == batch.cond {
            return Err(Error::InvalidArgument(
                "contrastive loss needs a batch with differing conditioning rows".into(),
            ));
        }
        let ce2 = cross_entropy_with_noise(g, &student, teacher, &c2, &noise)?;
        let kl2 = g.sub(ce2, terms.entropy)?;
        let adj = g.scale(kl2, -cfg.gamma);
        out.contrastive = g.value(adj).item() * per_t;
        kl_part = g.add(kl_part, adj)?;
    }
    let mut total = g.scale(kl_part, per_t);
    if cfg.lambda_power > 0.0 {
        let p = power_loss(g, student.x, &batch.y_ref, &cfg.spectrogram)?;
        out.power = g.value(p).item();
        let w = g.scale(p, cfg.lambda_power);
        total = g.add(total, w)?;
    }
    if cfg.lambda_perceptual > 0.0 {
        let cls = classifier.ok_or(Error::UntrainedClassifier)?;
        let p = perceptual_loss(g, student.x, &batch.y_ref, cls, cfg.perceptual_mode)?;
        out.perceptual = g.value(p).item();
        let w = g.scale(p, cfg.lambda_perceptual);
        total = g.add(total, w)?;
    }
    out.total = g.value(total).item();
    Ok((total, out))
}

/// One optimiser step on the student. The teacher and classifier are only
/// read. A non-finite total aborts before any parameter changes.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    stack: &mut FlowStack,
    teacher: &dyn TeacherDensity,
    classifier: Option<&PhoneClassifier>,
    batch: &DistillBatch,
    cfg: &DistillConfig,
    adam: &mut Adam,
    step: usize,
    rng: &mut RngStream,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let (total, breakdown) = distill_objective(&mut g, stack, teacher, classifier, batch, cfg, rng)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("{breakdown:?}"),
        });
    }
    let grads = g.backward(total).map_err(|e| Error::Diverged {
        step,
        detail: format!("{e}; {breakdown:?}"),
    })?;
    adam.update(stack.params_mut(), &grads.into_named());
    Ok(breakdown)
}
