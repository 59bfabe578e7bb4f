//! Run configuration: a TOML document whose dotted keys (`trainer.learning_rate`)
//! map onto sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use headpool::data::{DataSpec, DatasetKind};
use headpool::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use headpool::eval::{EvalConfig, Variant};
use headpool::models::{Arch, GeneratorSpec};
use headpool::optim::AdamW;
use headpool::teacher::TeacherConfig;
use headpool::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds teacher training, distillation and evaluation.
    pub seed: u64,
    /// Zero wall-clock fields so reruns write identical files.
    pub deterministic: bool,
    pub data: DataSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub teacher: TeacherSection,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            data: DataSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            teacher: TeacherSection::default(),
            trainer: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub name: DatasetKind,
    pub n_train: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { name: DatasetKind::Gauss8, n_train: 20_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Option<Arch>,
    pub widths: Option<Vec<usize>>,
    pub mid_width: Option<usize>,
    pub time_embed_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub t_total: usize,
    pub t_shifted: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, t_total: 1000, t_shifted: 250 }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> headpool::Result<NoiseSchedule> {
        make_schedule(self.kind, self.t_total)?.with_shift(self.t_shifted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub sample_steps: usize,
    pub gate_samples: usize,
    pub min_mode_coverage: f64,
    /// Teacher checkpoint used by `distill` and `ablate`; relative paths
    /// resolve against the config file's directory.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherConfig::default();
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            sample_steps: t.sample_steps,
            gate_samples: t.gate_samples,
            min_mode_coverage: t.min_mode_coverage,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<Variant>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec() }
    }
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    pub hash: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        config.resolve();
        config.validate().map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        let hash = config.hash();
        Ok(Self { config, path: path.to_path_buf(), hash })
    }

    /// Teacher checkpoint from the command line or the config.
    pub fn teacher_path(&self, flag: Option<&Path>) -> Option<PathBuf> {
        if let Some(p) = flag {
            return Some(p.to_path_buf());
        }
        let p = self.config.teacher.checkpoint.as_ref()?;
        Some(if p.is_relative() { self.path.parent().unwrap_or(Path::new(".")).join(p) } else { p.clone() })
    }
}

impl RunConfig {
    /// Copies the top-level seed and determinism flag into the sections.
    pub fn resolve(&mut self) {
        self.trainer.seed = self.seed;
        self.trainer.deterministic = self.deterministic;
        self.eval.seed = self.seed;
    }

    pub fn validate(&self) -> headpool::Result<()> {
        self.schedule.build()?;
        self.generator_spec().validate()?;
        if self.data.n_train == 0 {
            return Err(headpool::Error::InvalidArgument("data.n_train must be positive".into()));
        }
        if self.ablation.variants.is_empty() {
            return Err(headpool::Error::InvalidArgument("ablation.variants is empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the resolved config as JSON with sorted keys.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec { name: self.data.name, n_train: self.data.n_train, seed: self.data.seed }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        let kind = self.data.name;
        let arch = self.model.arch.unwrap_or(if kind.is_image() { Arch::Tinyunet } else { Arch::Mlp2d });
        let mut spec = GeneratorSpec::default_for(arch, &kind.dims(), kind.cond_classes());
        spec.t_total = self.schedule.t_total;
        if let Some(w) = &self.model.widths {
            spec.widths = w.clone();
        }
        if let Some(m) = self.model.mid_width {
            spec.mid_width = m;
        }
        if let Some(d) = self.model.time_embed_dim {
            spec.time_embed_dim = d;
        }
        spec
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            optimizer: AdamW { lr: t.learning_rate, weight_decay: t.weight_decay, ..AdamW::default() },
            seed: self.seed,
            sample_steps: t.sample_steps,
            gate_samples: t.gate_samples,
            min_mode_coverage: t.min_mode_coverage,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_fill_sections() {
        let cfg: RunConfig = toml::from_str("seed = 3\ntrainer.learning_rate = 0.5\ndata.name = \"checker\"\n").unwrap();
        assert_eq!(cfg.trainer.learning_rate, 0.5);
        assert_eq!(cfg.data.name, DatasetKind::Checker);
        assert_eq!(cfg.trainer.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("trainer.learnin_rate = 0.5\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn hash_ignores_key_order_and_explicit_defaults() {
        let mut a: RunConfig = toml::from_str("seed = 1\ntrainer.iterations = 7\ndata.n_train = 50\n").unwrap();
        let mut b: RunConfig = toml::from_str("data.n_train = 50\ntrainer.iterations = 7\nseed = 1\ndeterministic = true\n").unwrap();
        a.resolve();
        b.resolve();
        assert_eq!(a.hash(), b.hash());
        b.trainer.iterations = 8;
        assert_ne!(a.hash(), b.hash());
    }
}
