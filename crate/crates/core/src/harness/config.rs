//! Flat `key=value` run settings.
//!
//! Precedence is command-line overrides, then the config file, then the
//! built-in defaults. Every setting of a run is listed once in
//! [`RunConfig::visit`], which drives both parsing and serialisation, so the
//! text stored inside checkpoints always round-trips.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use crate::distill::{DistillConfig, LossPreset, PerceptualMode, SpectrogramSpec, Window};
use crate::error::{Error, Result};
use crate::harness::classifier::{ClassifierConfig, ClassifierTraining};
use crate::harness::corpus::CorpusSpec;
use crate::student::FlowConfig;
use crate::teacher::TeacherConfig;

/// Ordered string settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value, got `{raw}`", no + 1)));
            };
            map.set(k.trim(), v.trim());
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a single `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// `other` wins on conflicts.
    pub fn merged(&self, other: &ConfigMap) -> ConfigMap {
        let mut out = self.clone();
        out.entries.extend(other.entries.clone());
        out
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Comma-separated list of unsigned integers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsizeList(pub Vec<usize>);

impl FromStr for UsizeList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(UsizeList)
    }
}

impl Display for UsizeList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!("unknown value `{s}`")),
                }
            }
        }
        impl Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name,)+ })
            }
        }
    };
}

keyword_enum!(PerceptualMode { PerceptualMode::Feature => "feature", PerceptualMode::Gram => "gram" });
keyword_enum!(Window { Window::Hann => "hann", Window::Rectangular => "rectangular" });

impl FromStr for LossPreset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LossPreset::parse(s).map_err(|e| e.to_string())
    }
}

impl Display for LossPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Something that walks named settings.
pub trait FieldVisitor {
    fn field<T: FromStr + Display>(&mut self, key: &str, value: &mut T) -> Result<()>
    where
        T::Err: Display;
}

struct Reader<'a> {
    map: &'a ConfigMap,
    seen: BTreeSet<String>,
}

impl FieldVisitor for Reader<'_> {
    fn field<T: FromStr + Display>(&mut self, key: &str, value: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        self.seen.insert(key.to_string());
        if let Some(raw) = self.map.get(key) {
            *value = raw
                .parse()
                .map_err(|e| Error::Config(format!("`{key}={raw}`: {e}")))?;
        }
        Ok(())
    }
}

struct Writer {
    map: ConfigMap,
}

impl FieldVisitor for Writer {
    fn field<T: FromStr + Display>(&mut self, key: &str, value: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        self.map.set(key, &*value);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTraining {
    pub steps: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        TeacherTraining {
            steps: 20_000,
            batch: 4,
            crop_frames: 8,
            lr: 1e-3,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillTraining {
    pub steps: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub checkpoint_every: usize,
    pub preset: LossPreset,
}

impl Default for DistillTraining {
    fn default() -> Self {
        DistillTraining {
            steps: 20_000,
            batch: 4,
            crop_frames: 8,
            checkpoint_every: 1000,
            preset: LossPreset::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSettings {
    /// Samples per generated clip.
    pub length: usize,
    /// Number of held-out conditioning clips to render.
    pub count: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings { length: 2048, count: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub lengths: UsizeList,
    pub reps: usize,
    pub batch: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            lengths: UsizeList(vec![4096, 16384, 65536]),
            reps: 3,
            batch: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapDemoSettings {
    pub steps: usize,
    pub batch: usize,
    pub length: usize,
    pub inner_samples: usize,
    pub lr: f64,
    pub flow_layers: UsizeList,
    pub channels: usize,
}

impl Default for MapDemoSettings {
    fn default() -> Self {
        MapDemoSettings {
            steps: 2000,
            batch: 4,
            length: 64,
            inner_samples: 8,
            lr: 1e-2,
            flow_layers: UsizeList(vec![2, 2]),
            channels: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FibDemoSettings {
    pub length: usize,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub receptive_fields: UsizeList,
}

impl Default for FibDemoSettings {
    fn default() -> Self {
        FibDemoSettings {
            length: 64,
            train_sequences: 32,
            heldout_sequences: 16,
            receptive_fields: UsizeList(vec![2, 8, 32, 64]),
        }
    }
}

/// Everything a command needs. Conditioning widths are derived from the
/// corpus, not configured.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub teacher: TeacherConfig,
    pub teacher_training: TeacherTraining,
    pub classifier: ClassifierConfig,
    pub classifier_training: ClassifierTraining,
    pub student: FlowConfig,
    pub distill: DistillConfig,
    pub distill_training: DistillTraining,
    pub sample: SampleSettings,
    pub bench: BenchSettings,
    pub demo_map: MapDemoSettings,
    pub demo_fib: FibDemoSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut run = RunConfig {
            seed: 0,
            corpus: CorpusSpec::default(),
            teacher: TeacherConfig::default(),
            teacher_training: TeacherTraining::default(),
            classifier: ClassifierConfig::default(),
            classifier_training: ClassifierTraining::default(),
            student: FlowConfig::default(),
            distill: DistillConfig::default(),
            distill_training: DistillTraining::default(),
            sample: SampleSettings::default(),
            bench: BenchSettings::default(),
            demo_map: MapDemoSettings::default(),
            demo_fib: FibDemoSettings::default(),
        };
        run.derive_dependent();
        run
    }
}

impl RunConfig {
    /// Defaults overridden by `map`. Unknown keys are rejected.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut run = RunConfig::default();
        let mut reader = Reader {
            map,
            seen: BTreeSet::new(),
        };
        run.visit(&mut reader)?;
        if let Some(unknown) = map.keys().find(|k| !reader.seen.contains(*k)) {
            return Err(Error::Config(format!("unknown setting `{unknown}`")));
        }
        run.derive_dependent();
        run.validate()?;
        Ok(run)
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut copy = self.clone();
        let mut writer = Writer { map: ConfigMap::new() };
        copy.visit(&mut writer).expect("writing settings cannot fail");
        writer.map
    }

    fn derive_dependent(&mut self) {
        let cond = self.corpus.conditioning_channels();
        self.teacher.conditioning_channels = cond;
        self.student.conditioning_channels = cond;
        self.classifier.num_phones = self.corpus.num_phones;
        self.classifier.frame_rate_divisor = self.corpus.frame_rate_divisor;
        self.classifier_training.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.distill.validate()?;
        let positive = [
            ("teacher.batch", self.teacher_training.batch),
            ("teacher.crop_frames", self.teacher_training.crop_frames),
            ("distill.batch", self.distill_training.batch),
            ("distill.crop_frames", self.distill_training.crop_frames),
            ("sample.length", self.sample.length),
            ("sample.count", self.sample.count),
            ("bench.reps", self.bench.reps),
            ("bench.batch", self.bench.batch),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{key}` must be positive")));
            }
        }
        if self.sample.length > self.corpus.clip_length {
            return Err(Error::Config("sample.length exceeds corpus.clip_length".into()));
        }
        Ok(())
    }

    /// Distillation weights with the terms the preset leaves out zeroed.
    pub fn effective_distill(&self) -> DistillConfig {
        let mut cfg = self.distill.clone();
        match self.distill_training.preset {
            LossPreset::KlPower => {
                cfg.lambda_perceptual = 0.0;
                cfg.gamma = 0.0;
            }
            LossPreset::KlPowerPerceptual => cfg.gamma = 0.0,
            LossPreset::Full => {}
        }
        cfg
    }

    pub fn visit(&mut self, v: &mut impl FieldVisitor) -> Result<()> {
        v.field("seed", &mut self.seed)?;

        let c = &mut self.corpus;
        v.field("corpus.num_phones", &mut c.num_phones)?;
        v.field("corpus.num_speakers", &mut c.num_speakers)?;
        v.field("corpus.sample_rate", &mut c.sample_rate)?;
        v.field("corpus.clip_length", &mut c.clip_length)?;
        v.field("corpus.frame_rate_divisor", &mut c.frame_rate_divisor)?;
        v.field("corpus.f0_min", &mut c.f0_range.0)?;
        v.field("corpus.f0_max", &mut c.f0_range.1)?;
        v.field("corpus.num_clips", &mut c.num_clips)?;
        v.field("corpus.noise_level", &mut c.noise_level)?;
        v.field("corpus.seed", &mut c.seed)?;
        v.field("corpus.held_out", &mut self.classifier_training.held_out)?;

        let t = &mut self.teacher;
        v.field("teacher.num_stacks", &mut t.num_stacks)?;
        v.field("teacher.layers_per_stack", &mut t.layers_per_stack)?;
        v.field("teacher.filter_size", &mut t.filter_size)?;
        v.field("teacher.residual_channels", &mut t.residual_channels)?;
        v.field("teacher.gate_channels", &mut t.gate_channels)?;
        v.field("teacher.skip_channels", &mut t.skip_channels)?;
        v.field("teacher.num_mixtures", &mut t.num_mixtures)?;
        v.field("teacher.bit_depth", &mut t.bit_depth)?;
        let tt = &mut self.teacher_training;
        v.field("teacher.steps", &mut tt.steps)?;
        v.field("teacher.batch", &mut tt.batch)?;
        v.field("teacher.crop_frames", &mut tt.crop_frames)?;
        v.field("teacher.lr", &mut tt.lr)?;
        v.field("teacher.checkpoint_every", &mut tt.checkpoint_every)?;

        let k = &mut self.classifier;
        v.field("classifier.channels", &mut k.channels)?;
        let mut dil = UsizeList(k.dilations.clone());
        v.field("classifier.dilations", &mut dil)?;
        k.dilations = dil.0;
        v.field("classifier.filter_size", &mut k.filter_size)?;
        let kt = &mut self.classifier_training;
        v.field("classifier.steps", &mut kt.steps)?;
        v.field("classifier.batch", &mut kt.batch)?;
        v.field("classifier.crop_frames", &mut kt.crop_frames)?;
        v.field("classifier.lr", &mut kt.lr)?;

        let s = &mut self.student;
        let mut layers = UsizeList(s.layers.clone());
        v.field("student.layers", &mut layers)?;
        s.layers = layers.0;
        v.field("student.filter_size", &mut s.filter_size)?;
        v.field("student.residual_channels", &mut s.residual_channels)?;
        v.field("student.gate_channels", &mut s.gate_channels)?;
        v.field("student.dilation_cycle", &mut s.dilation_cycle)?;

        let d = &mut self.distill;
        v.field("distill.inner_samples", &mut d.inner_samples)?;
        v.field("distill.lambda_power", &mut d.lambda_power)?;
        v.field("distill.lambda_perceptual", &mut d.lambda_perceptual)?;
        v.field("distill.gamma", &mut d.gamma)?;
        v.field("distill.perceptual_mode", &mut d.perceptual_mode)?;
        v.field("distill.lr", &mut d.lr)?;
        let (mut wl, mut hop, mut win) = (d.spectrogram.window_length, d.spectrogram.hop_length, d.spectrogram.window);
        v.field("distill.stft_window_length", &mut wl)?;
        v.field("distill.stft_hop", &mut hop)?;
        v.field("distill.stft_window", &mut win)?;
        d.spectrogram = SpectrogramSpec::new(wl, hop, win)?;
        let dt = &mut self.distill_training;
        v.field("distill.steps", &mut dt.steps)?;
        v.field("distill.batch", &mut dt.batch)?;
        v.field("distill.crop_frames", &mut dt.crop_frames)?;
        v.field("distill.checkpoint_every", &mut dt.checkpoint_every)?;
        v.field("distill.preset", &mut dt.preset)?;

        v.field("sample.length", &mut self.sample.length)?;
        v.field("sample.count", &mut self.sample.count)?;

        v.field("bench.lengths", &mut self.bench.lengths)?;
        v.field("bench.reps", &mut self.bench.reps)?;
        v.field("bench.batch", &mut self.bench.batch)?;

        let m = &mut self.demo_map;
        v.field("demo_map.steps", &mut m.steps)?;
        v.field("demo_map.batch", &mut m.batch)?;
        v.field("demo_map.length", &mut m.length)?;
        v.field("demo_map.inner_samples", &mut m.inner_samples)?;
        v.field("demo_map.lr", &mut m.lr)?;
        v.field("demo_map.flow_layers", &mut m.flow_layers)?;
        v.field("demo_map.channels", &mut m.channels)?;

        let f = &mut self.demo_fib;
        v.field("demo_fib.length", &mut f.length)?;
        v.field("demo_fib.train_sequences", &mut f.train_sequences)?;
        v.field("demo_fib.heldout_sequences", &mut f.heldout_sequences)?;
        v.field("demo_fib.receptive_fields", &mut f.receptive_fields)?;
        Ok(())
    }
}
