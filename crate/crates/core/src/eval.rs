//! Evaluation reports and the ablation harness.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, mode_coverage, DataSpec, DatasetKind};
use crate::diffusion::{NoiseSchedule, MAX_STUDENT_STEPS};
use crate::error::{Error, Result};
use crate::metrics::{mmd_median, patch_divergence, sliced_wasserstein, DEFAULT_PATCH_CROP};
use crate::models::GeneratorNet;
use crate::pool::PoolLayout;
use crate::sampling::multi_step_sample;
use crate::teacher::sample_teacher_set;
use crate::tensor::Tensor;
use crate::trainer::{distill, TrainConfig};

/// Added to the evaluation seed to draw held-out reference data.
pub const HELD_OUT_SEED_OFFSET: u64 = 0x00c0_ffee_d00d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sample_count: usize,
    pub n_projections: usize,
    pub seed: u64,
    pub patch_crop: usize,
    /// Teacher sampler steps for the patch-divergence reference.
    pub teacher_steps: usize,
    /// MMD uses at most this many samples per set (the Gram matrix is quadratic).
    pub mmd_max_samples: usize,
    /// Highest step count the student was trained for; larger k are flagged.
    pub trained_stage: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sample_count: 2000,
            n_projections: 256,
            seed: 0,
            patch_crop: DEFAULT_PATCH_CROP,
            teacher_steps: 50,
            mmd_max_samples: 1000,
            trained_stage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub k: usize,
    pub swd: f64,
    /// Unbiased MMD clamped at zero.
    pub mmd: f64,
    pub mmd_raw: f64,
    pub patch_div: Option<f64>,
    pub patch_div_raw: Option<f64>,
    pub mode_coverage: Option<f64>,
    pub beyond_trained_stage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub step_counts: Vec<usize>,
    pub metrics: Vec<StepMetrics>,
    pub sample_count: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn get(&self, k: usize) -> Option<&StepMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("bad report JSON: {e}")))
    }

    /// One row per k.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = ["run_id", "k", "swd", "mmd", "patch_div", "mode_coverage", "sample_count", "seed"];
        w.write_record(header).map_err(csv_err)?;
        for m in &self.metrics {
            w.write_record([
                self.run_id.clone(),
                m.k.to_string(),
                m.swd.to_string(),
                m.mmd.to_string(),
                opt(m.patch_div),
                opt(m.mode_coverage),
                self.sample_count.to_string(),
                self.seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// A report plus the samples it was computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Student samples per k, in `report.step_counts` order.
    pub samples: Vec<(usize, Tensor)>,
    /// Held-out data the distribution metrics compare against.
    pub reference: Tensor,
}

/// Balanced labels `0, 1, .., classes-1, 0, ..`; `None` when unconditional.
pub fn balanced_labels(n: usize, classes: usize) -> Option<Vec<usize>> {
    (classes > 0).then(|| (0..n).map(|i| i % classes).collect())
}

/// `n` samples of `net` with `k` steps from noise seeded by `seed`; the
/// noise does not depend on `k`.
pub fn draw_samples(
    net: &GeneratorNet,
    sched: &NoiseSchedule,
    k: usize,
    n: usize,
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend(&net.spec().data_shape);
    let eps = Tensor::randn(&shape, &mut rng);
    multi_step_sample(net, sched, k, &eps, labels, &mut rng)
}

/// [`draw_samples`] with [`balanced_labels`].
pub fn student_samples(
    student: &GeneratorNet,
    kind: DatasetKind,
    sched: &NoiseSchedule,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    let labels = balanced_labels(n, kind.cond_classes());
    draw_samples(student, sched, k, n, labels.as_deref(), seed)
}

/// Metrics of `student` at every k in `step_counts` against held-out data;
/// on image data also the patch divergence against teacher samples.
pub fn evaluate(
    run_id: &str,
    student: &GeneratorNet,
    teacher: Option<&GeneratorNet>,
    kind: DatasetKind,
    sched: &NoiseSchedule,
    step_counts: &[usize],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if step_counts.is_empty() {
        return Err(Error::InvalidArgument("no step counts to evaluate".into()));
    }
    if let Some(&k) = step_counts.iter().find(|&&k| !(1..=MAX_STUDENT_STEPS).contains(&k)) {
        return Err(Error::InvalidArgument(format!("step count {k} outside [1, {MAX_STUDENT_STEPS}]")));
    }
    if cfg.sample_count < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let reference = generate_dataset(&DataSpec {
        name: kind,
        n_train: cfg.sample_count,
        seed: cfg.seed.wrapping_add(HELD_OUT_SEED_OFFSET),
    })?
    .x;
    let teacher_set = if kind.is_image() {
        let t = teacher.ok_or_else(|| Error::InvalidArgument("patch divergence on image data needs the teacher".into()))?;
        Some(sample_teacher_set(t, kind, sched, cfg.teacher_steps, cfg.sample_count, cfg.seed ^ 0x7eac)?)
    } else {
        None
    };
    let mmd_rows: Vec<usize> = (0..cfg.sample_count.min(cfg.mmd_max_samples.max(2))).collect();
    let reference_mmd = reference.select_rows(&mmd_rows);

    let mut metrics = Vec::with_capacity(step_counts.len());
    let mut samples = Vec::with_capacity(step_counts.len());
    for &k in step_counts {
        let x = student_samples(student, kind, sched, k, cfg.sample_count, cfg.seed)?;
        let swd = sliced_wasserstein(&x, &reference, cfg.n_projections, cfg.seed)?;
        let mmd_raw = mmd_median(&x.select_rows(&mmd_rows), &reference_mmd)?.value;
        let patch_div_raw = match &teacher_set {
            Some(t) => Some(patch_divergence(&x, t, cfg.patch_crop)?.value),
            None => None,
        };
        metrics.push(StepMetrics {
            k,
            swd,
            mmd: mmd_raw.max(0.0),
            mmd_raw,
            patch_div: patch_div_raw.map(|v| v.max(0.0)),
            patch_div_raw,
            mode_coverage: mode_coverage(kind, &x),
            beyond_trained_stage: cfg.trained_stage.is_some_and(|s| k > s),
        });
        samples.push((k, x));
    }
    Ok(Evaluation {
        report: EvalReport {
            run_id: run_id.to_string(),
            step_counts: step_counts.to_vec(),
            metrics,
            sample_count: cfg.sample_count,
            seed: cfg.seed,
        },
        samples,
        reference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMultiscaleDual,
    NoRefresh,
    NoPool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoMultiscaleDual, Variant::NoRefresh, Variant::NoPool];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMultiscaleDual => "no_multiscale_dual",
            Variant::NoRefresh => "no_refresh",
            Variant::NoPool => "no_pool",
        }
    }

    /// The training configuration of this variant, derived from `base`.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        match self {
            Variant::Full => base.clone(),
            Variant::NoMultiscaleDual => TrainConfig { layout: Some(PoolLayout::GlobalOnly), ..base.clone() },
            Variant::NoRefresh => TrainConfig { refresh_rate: 0.0, ..base.clone() },
            Variant::NoPool => TrainConfig { groups_per_compartment: 1, m_groups: 1, refresh_rate: 0.0, ..base.clone() },
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
}

/// Trains every variant from the same teacher with the same seed and budget
/// and evaluates its one-step samples.
pub fn run_ablation(
    base_cfg: &TrainConfig,
    variants: &[Variant],
    teacher: &GeneratorNet,
    kind: DatasetKind,
    sched: &NoiseSchedule,
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let out = distill(&variant.apply(base_cfg), teacher, kind, sched, None)?;
            let ev = evaluate(variant.name(), &out.student, Some(teacher), kind, sched, &[1], eval_cfg)?;
            Ok(AblationRow { variant, report: ev.report })
        })
        .collect()
}

/// Table with columns `variant, swd, mmd, patch_div, mode_coverage` (one-step metrics).
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "swd", "mmd", "patch_div", "mode_coverage"]).map_err(csv_err)?;
    for r in rows {
        let m = r.report.get(1).ok_or_else(|| Error::InvalidArgument(format!("{} has no one-step metrics", r.variant.name())))?;
        w.write_record([r.variant.name().to_string(), m.swd.to_string(), m.mmd.to_string(), opt(m.patch_div), opt(m.mode_coverage)])
            .map_err(csv_err)?;
    }
    finish_csv(w)
}

/// Whether the full configuration's patch divergence is at most the
/// no-pool variant's; `None` when either row or value is missing.
pub fn full_beats_no_pool(rows: &[AblationRow]) -> Option<(f64, f64, bool)> {
    let pd = |v: Variant| rows.iter().find(|r| r.variant == v)?.report.get(1)?.patch_div;
    let (full, no_pool) = (pd(Variant::Full)?, pd(Variant::NoPool)?);
    Some((full, no_pool, full <= no_pool))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::models::{build_generator, Arch, GeneratorSpec};

    fn point_net() -> (GeneratorNet, NoiseSchedule) {
        let spec = GeneratorSpec { widths: vec![8, 8], ..GeneratorSpec::default_for(Arch::Mlp2d, &[2], 8) };
        let mut n = build_generator(spec, 0).unwrap();
        n.mark_trained();
        (n, make_schedule(ScheduleKind::Linear, 1000).unwrap().with_shift(250).unwrap())
    }

    #[test]
    fn report_shape_and_json_round_trip() {
        let (net, sched) = point_net();
        let cfg = EvalConfig { sample_count: 200, n_projections: 32, trained_stage: Some(2), ..EvalConfig::default() };
        let ev = evaluate("r", &net, None, DatasetKind::Gauss8, &sched, &[1, 2, 4], &cfg).unwrap();
        assert_eq!(ev.report.step_counts, [1, 2, 4]);
        assert_eq!(ev.samples.len(), 3);
        for m in &ev.report.metrics {
            assert!(m.swd >= 0.0 && m.mmd >= 0.0);
            assert!(m.patch_div.is_none() && m.mode_coverage.is_some());
            assert_eq!(m.beyond_trained_stage, m.k > 2);
        }
        assert_eq!(EvalReport::from_json(&ev.report.to_json()).unwrap(), ev.report);
        assert_eq!(ev.report.to_csv().unwrap().lines().count(), 4);
        assert!(evaluate("r", &net, None, DatasetKind::Gauss8, &sched, &[], &cfg).is_err());
        assert!(evaluate("r", &net, None, DatasetKind::Gauss8, &sched, &[5], &cfg).is_err());
    }

    #[test]
    fn variants_parse_and_configure() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let base = TrainConfig::default();
        assert_eq!(Variant::Full.apply(&base), base);
        assert_eq!(Variant::NoMultiscaleDual.apply(&base).layout, Some(PoolLayout::GlobalOnly));
        assert_eq!(Variant::NoRefresh.apply(&base).refresh_rate, 0.0);
        let np = Variant::NoPool.apply(&base);
        assert_eq!((np.groups_per_compartment, np.m_groups, np.refresh_rate), (1, 1, 0.0));
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn ablation_table_has_one_row_per_variant() {
        let (teacher, sched) = point_net();
        let base = TrainConfig { iterations: 2, batch_size: 4, teacher_steps: 2, head_width: 4, ..TrainConfig::default() };
        let cfg = EvalConfig { sample_count: 50, n_projections: 8, ..EvalConfig::default() };
        let variants = [Variant::Full, Variant::NoRefresh, Variant::NoPool];
        let rows = run_ablation(&base, &variants, &teacher, DatasetKind::Gauss8, &sched, &cfg).unwrap();
        let csv = ablation_csv(&rows).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "variant,swd,mmd,patch_div,mode_coverage");
        assert_eq!(csv.lines().count(), 1 + variants.len());
        let again = run_ablation(&base, &[Variant::Full], &teacher, DatasetKind::Gauss8, &sched, &cfg).unwrap();
        assert_eq!(again[0], rows[0]);
        assert!(full_beats_no_pool(&rows).is_none());
        assert!(run_ablation(&base, &[Variant::NoMultiscaleDual], &teacher, DatasetKind::Gauss8, &sched, &cfg).is_ok());
    }
}
