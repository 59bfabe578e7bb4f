//! Teacher pre-training by noise-prediction regression, and the quality gate
//! a teacher must pass before it may be distilled.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, mode_coverage, DataSpec, DatasetKind};
use crate::diffusion::{forward_diffuse_rows, NoiseSchedule, StepSchedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{build_generator, GeneratorNet, GeneratorSpec};
use crate::optim::{AdamState, AdamW};
use crate::sampling::teacher_sample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub seed: u64,
    /// Sampler steps used by the quality gate and by distillation.
    pub sample_steps: usize,
    pub gate_samples: usize,
    pub min_mode_coverage: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 128,
            optimizer: AdamW { lr: 2e-3, weight_decay: 0.0, ..AdamW::default() },
            seed: 0,
            sample_steps: 50,
            gate_samples: 2000,
            min_mode_coverage: 7.0 / 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRun {
    pub net: GeneratorNet,
    /// Per-iteration mean squared noise-prediction error.
    pub losses: Vec<f64>,
}

/// RNG for one iteration of a seeded loop, independent of every other iteration.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration + 1);
    rng
}

pub fn train_teacher(
    data: &DataSpec,
    net_spec: GeneratorSpec,
    sched: &NoiseSchedule,
    cfg: &TeacherConfig,
) -> Result<TeacherRun> {
    if net_spec.data_shape != data.dims() || net_spec.cond_classes != data.cond_classes() {
        return Err(Error::ArchMismatch(format!(
            "network expects {:?} with {} classes, dataset has {:?} with {}",
            net_spec.data_shape,
            net_spec.cond_classes,
            data.dims(),
            data.cond_classes()
        )));
    }
    if net_spec.t_total != sched.t_total() {
        return Err(Error::ArchMismatch("network and schedule disagree on T".into()));
    }
    if cfg.batch_size == 0 || cfg.batch_size > data.n_train {
        return Err(Error::InvalidArgument(format!("batch size {} for {} samples", cfg.batch_size, data.n_train)));
    }
    let dataset = generate_dataset(data)?;
    let mut net = build_generator(net_spec, cfg.seed)?;
    let mut adam = AdamState::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, it as u64);
        let idx = sample_indices(&mut rng, dataset.len(), cfg.batch_size).into_vec();
        let batch = dataset.select(&idx);
        let ts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(1..=sched.t_total())).collect();
        let eps = Tensor::randn(batch.x.shape(), &mut rng);
        let x_t = forward_diffuse_rows(&batch.x, &eps, &ts, sched)?;

        let mut g = Graph::new();
        let p = net.bind(&mut g, true);
        let xv = g.constant(x_t);
        let out = net.forward_graph(&mut g, &p, xv, &ts, batch.labels.as_deref())?;
        let target = g.constant(eps);
        let diff = g.sub(out, target);
        let sq = g.mul(diff, diff);
        let loss = g.mean_all(sq);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("teacher loss at iteration {it}")));
        }
        losses.push(value);
        let mut grads = g.backward(loss);
        let gs: Vec<Tensor> = p.vars().iter().map(|&v| grads.take(v).expect("trainable")).collect();
        cfg.optimizer.step(net.params_mut(), &gs, &mut adam);
    }
    net.mark_trained();
    Ok(TeacherRun { net, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub passed: bool,
    pub mode_coverage: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub reason: String,
}

/// Mean of the first and of the last `w` entries.
fn loss_ends(losses: &[f64]) -> Option<(f64, f64)> {
    if losses.is_empty() {
        return None;
    }
    let w = (losses.len() / 10).clamp(1, 100);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

/// Point data: sampled mode coverage must reach `min_mode_coverage`.
/// Image data: the loss curve must be finite and end below where it started.
pub fn teacher_gate(
    teacher: &GeneratorNet,
    data: &DataSpec,
    sched: &NoiseSchedule,
    losses: &[f64],
    cfg: &TeacherConfig,
) -> Result<GateReport> {
    let ends = loss_ends(losses);
    let (initial_loss, final_loss) = (ends.map(|e| e.0), ends.map(|e| e.1));
    if !teacher.is_trained() {
        return Ok(GateReport { passed: false, mode_coverage: None, initial_loss, final_loss, reason: "not trained".into() });
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Ok(GateReport { passed: false, mode_coverage: None, initial_loss, final_loss, reason: "non-finite loss".into() });
    }
    if data.name.is_image() {
        let passed = matches!(ends, Some((a, b)) if b < a);
        let reason = if passed { "loss decreased" } else { "loss did not decrease" };
        return Ok(GateReport { passed, mode_coverage: None, initial_loss, final_loss, reason: reason.into() });
    }
    let samples = sample_teacher_set(teacher, data.name, sched, cfg.sample_steps, cfg.gate_samples, cfg.seed ^ 0x6a7e)?;
    let cov = mode_coverage(data.name, &samples).expect("point data");
    let passed = cov >= cfg.min_mode_coverage;
    Ok(GateReport {
        passed,
        mode_coverage: Some(cov),
        initial_loss,
        final_loss,
        reason: format!("mode coverage {cov:.3} (need {:.3})", cfg.min_mode_coverage),
    })
}

/// `n` teacher samples with uniformly drawn labels (when conditional).
pub fn sample_teacher_set(
    teacher: &GeneratorNet,
    kind: DatasetKind,
    sched: &NoiseSchedule,
    steps: usize,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend(kind.dims());
    let eps = Tensor::randn(&shape, &mut rng);
    let labels: Option<Vec<usize>> =
        (kind.cond_classes() > 0).then(|| (0..n).map(|_| rng.random_range(0..kind.cond_classes())).collect());
    let schedule = StepSchedule::uniform(sched.t_total(), steps)?;
    teacher_sample(teacher, sched, &schedule, &eps, labels.as_deref(), &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::models::Arch;

    #[test]
    fn initial_loss_is_about_one_with_zero_output_layer() {
        let data = DataSpec { name: DatasetKind::Gauss8, n_train: 4096, seed: 0 };
        let sched = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        let spec = GeneratorSpec::default_for(Arch::Mlp2d, &[2], 8);
        let cfg = TeacherConfig { iterations: 1, batch_size: 4096, ..TeacherConfig::default() };
        let run = train_teacher(&data, spec, &sched, &cfg).unwrap();
        assert!((run.losses[0] - 1.0).abs() < 0.05, "{}", run.losses[0]);
        assert!(run.net.is_trained());
    }

    #[test]
    fn short_training_reduces_loss_deterministically() {
        let data = DataSpec { name: DatasetKind::Checker, n_train: 1000, seed: 0 };
        let sched = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        let spec = GeneratorSpec { widths: vec![32, 32], ..GeneratorSpec::default_for(Arch::Mlp2d, &[2], 0) };
        let cfg = TeacherConfig { iterations: 300, batch_size: 64, ..TeacherConfig::default() };
        let a = train_teacher(&data, spec.clone(), &sched, &cfg).unwrap();
        let b = train_teacher(&data, spec, &sched, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        let (first, last) = loss_ends(&a.losses).unwrap();
        assert!(last < first);
        assert!(a.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    }

    #[test]
    fn mismatched_network_rejected() {
        let data = DataSpec { name: DatasetKind::Gauss8, n_train: 100, seed: 0 };
        let sched = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        let spec = GeneratorSpec::default_for(Arch::Mlp2d, &[2], 0);
        assert!(train_teacher(&data, spec, &sched, &TeacherConfig::default()).is_err());
    }
}
