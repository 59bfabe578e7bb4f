//! Adversarial distillation of a many-step teacher into a few-step student
//! against the dynamic head pool.
//!
//! One iteration draws noise `eps`, a discriminator timestep `t*` and labels,
//! lets the teacher produce `x0` from `eps` in many steps and the student
//! produce `x0_hat` in one, diffuses both to `t*` with the same `eps`, and
//! then for every task type of the pool: checks out head groups, updates the
//! heads on `L_D`, scores the student again with the updated heads for `L_G`,
//! and releases the groups. The student takes one optimizer step per
//! `grad_accum_steps` iterations; the pool is refreshed after every iteration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::diffusion::{
    forward_diffuse, forward_diffuse_var, make_step_schedule, predict_x0, predict_x0_var, NoiseSchedule, StepSchedule,
    MAX_STUDENT_STEPS,
};
use crate::error::{Error, Result};
use crate::graph::{Crop, Graph, Var};
use crate::models::checkpoint::write_atomic;
use crate::models::{
    extract_features, init_student_from_teacher, save_generator, Bound, DiscriminatorHead, FeatureExtractor, GeneratorNet,
    HeadRecipe, DEFAULT_HEAD_BUDGET,
};
use crate::optim::{AdamState, AdamW};
use crate::pool::{init_pool, save_pool, CompartmentKey, DiscriminatorPool, HeadGroup, PoolConfig, PoolLayout, Scale, TaskType};
use crate::sampling::teacher_sample;
use crate::teacher::iteration_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_h: usize,
    pub patch_w: usize,
    pub patches_per_sample: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { patch_h: 16, patch_w: 16, patches_per_sample: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Student step size.
    pub learning_rate: f64,
    pub head_learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub iterations: usize,
    pub t_stars: Vec<usize>,
    /// Head groups checked out per compartment per iteration.
    pub m_groups: usize,
    pub groups_per_compartment: usize,
    pub refresh_rate: f64,
    /// Bottom-up stage: the student is trained for up to this many steps.
    pub stage: usize,
    pub patch_spec: PatchSpec,
    /// Pool layout; derived from the data when absent.
    pub layout: Option<PoolLayout>,
    pub head_width: usize,
    pub head_budget: usize,
    /// Sampler steps of the teacher producing the real samples.
    pub teacher_steps: usize,
    /// Weight of the finite-difference smoothness penalty on real inputs; 0 disables it.
    pub r1_weight: f64,
    pub r1_sigma: f64,
    pub seed: u64,
    /// Record zero wall-clock times so logs are byte-reproducible.
    pub deterministic: bool,
    /// Build batches (including teacher sampling) on a worker thread.
    pub prefetch: bool,
    /// Checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            head_learning_rate: 3e-2,
            optimizer: OptimizerKind::Adamw,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 0.0,
            batch_size: 64,
            grad_accum_steps: 1,
            iterations: 1000,
            t_stars: vec![10, 63, 125, 188],
            m_groups: 1,
            groups_per_compartment: 4,
            refresh_rate: 0.01,
            stage: 1,
            patch_spec: PatchSpec::default(),
            layout: None,
            head_width: 32,
            head_budget: DEFAULT_HEAD_BUDGET,
            teacher_steps: 50,
            r1_weight: 0.0,
            r1_sigma: 0.01,
            seed: 0,
            deterministic: true,
            prefetch: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let bad = |why: String| Err(Error::InvalidArgument(why));
        if !(self.learning_rate > 0.0 && self.head_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.m_groups == 0 || self.teacher_steps == 0 {
            return bad("batch_size, grad_accum_steps, m_groups and teacher_steps must be positive".into());
        }
        if self.m_groups > self.groups_per_compartment {
            return bad(format!("m_groups {} exceeds groups_per_compartment {}", self.m_groups, self.groups_per_compartment));
        }
        if !(1..=MAX_STUDENT_STEPS).contains(&self.stage) {
            return bad(format!("stage {} outside [1, {MAX_STUDENT_STEPS}]", self.stage));
        }
        if self.t_stars.is_empty() {
            return bad("t_stars is empty".into());
        }
        for &t in &self.t_stars {
            sched.check_t(t)?;
        }
        if !(0.0..=1.0).contains(&self.refresh_rate) {
            return bad(format!("refresh_rate {} outside [0, 1]", self.refresh_rate));
        }
        if self.r1_weight < 0.0 || (self.r1_weight > 0.0 && self.r1_sigma <= 0.0) {
            return bad("r1_weight must be non-negative with a positive r1_sigma".into());
        }
        Ok(())
    }

    fn student_optimizer(&self) -> AdamW {
        AdamW { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }

    fn head_optimizer(&self) -> AdamW {
        AdamW { lr: self.head_learning_rate, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn layout_for(&self, kind: DatasetKind) -> PoolLayout {
        self.layout.unwrap_or(if kind.is_image() { PoolLayout::MultiScaleDual } else { PoolLayout::PointDual })
    }
}

fn check_scores(scores: &[Tensor]) -> Result<usize> {
    let first = scores.first().ok_or_else(|| Error::InvalidArgument("empty score list".into()))?;
    let b = first.numel();
    if b == 0 || scores.iter().any(|s| s.numel() != b) {
        return Err(Error::Shape("every head must score the same non-empty batch".into()));
    }
    Ok(b)
}

/// `-(1/B) sum_b sum_h fake[h][b]`.
pub fn adv_loss_g(scores_fake: &[Tensor]) -> Result<f64> {
    let b = check_scores(scores_fake)?;
    Ok(-scores_fake.iter().map(Tensor::sum).sum::<f64>() / b as f64)
}

/// `(1/B) sum_b sum_h (fake[h][b] - real[h][b])`.
pub fn adv_loss_d(scores_fake: &[Tensor], scores_real: &[Tensor]) -> Result<f64> {
    if scores_fake.len() != scores_real.len() {
        return Err(Error::Shape(format!("{} fake vs {} real score lists", scores_fake.len(), scores_real.len())));
    }
    let b = check_scores(scores_fake)?;
    if check_scores(scores_real)? != b {
        return Err(Error::Shape("fake and real batches differ".into()));
    }
    Ok((scores_fake.iter().map(Tensor::sum).sum::<f64>() - scores_real.iter().map(Tensor::sum).sum::<f64>()) / b as f64)
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// Graph form of [`adv_loss_g`]; `scores` are per-head `[B]` vectors.
pub fn adv_loss_g_var(g: &mut Graph, scores: &[Var]) -> Var {
    let total = sum_vars(g, scores);
    let m = g.mean_all(total);
    g.scale(m, -1.0)
}

/// Graph form of [`adv_loss_d`].
pub fn adv_loss_d_var(g: &mut Graph, fake: &[Var], real: &[Var]) -> Var {
    let f = sum_vars(g, fake);
    let r = sum_vars(g, real);
    let d = g.sub(f, r);
    g.mean_all(d)
}

/// Random top-left offsets, `patches_per_sample` per sample, sample-major.
pub fn patch_offsets<R: Rng + ?Sized>(batch: usize, h: usize, w: usize, spec: &PatchSpec, rng: &mut R) -> Result<Vec<Crop>> {
    if spec.patch_h == 0 || spec.patch_w == 0 || spec.patches_per_sample == 0 {
        return Err(Error::InvalidArgument("patch dimensions and count must be positive".into()));
    }
    if spec.patch_h >= h || spec.patch_w >= w {
        return Err(Error::InvalidArgument(format!(
            "patch {}x{} is not smaller than the {h}x{w} image",
            spec.patch_h, spec.patch_w
        )));
    }
    let mut out = Vec::with_capacity(batch * spec.patches_per_sample);
    for src in 0..batch {
        for _ in 0..spec.patches_per_sample {
            out.push(Crop { src, y: rng.random_range(0..=h - spec.patch_h), x: rng.random_range(0..=w - spec.patch_w) });
        }
    }
    Ok(out)
}

/// Crops `patches_per_sample` random windows from every image of `[B, C, H, W]`.
pub fn make_patches<R: Rng + ?Sized>(x: &Tensor, spec: &PatchSpec, rng: &mut R) -> Result<Tensor> {
    let &[b, _, h, w] = x.shape() else {
        return Err(Error::InvalidArgument(format!("patches need image batches [B, C, H, W], got {:?}", x.shape())));
    };
    let crops = patch_offsets(b, h, w, spec, rng)?;
    Ok(crop_tensor(x, crops, spec))
}

fn crop_tensor(x: &Tensor, crops: Vec<Crop>, spec: &PatchSpec) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let c = g.crop(v, crops, spec.patch_h, spec.patch_w);
    g.value(c).clone()
}

/// Per-stage configurations `1..=total_stages`, otherwise identical to `cfg`.
pub fn bottom_up_schedule(total_stages: usize, cfg: &TrainConfig) -> Result<Vec<TrainConfig>> {
    if !(1..=MAX_STUDENT_STEPS).contains(&total_stages) {
        return Err(Error::InvalidArgument(format!("total stages {total_stages} outside [1, {MAX_STUDENT_STEPS}]")));
    }
    Ok((1..=total_stages).map(|stage| TrainConfig { stage, ..cfg.clone() }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub stage: usize,
    pub t_star: usize,
    pub loss_g: f64,
    /// `L_D` per task tag (`global_cond`, `local_uncond`, ...).
    pub loss_d: BTreeMap<String, f64>,
    pub refresh_count: usize,
    pub wallclock_ms: u64,
}

pub const LOG_COLUMNS: [&str; 10] = [
    "iteration",
    "stage",
    "t_star",
    "loss_G",
    "loss_D_global_cond",
    "loss_D_local_cond",
    "loss_D_local_uncond",
    "refresh_count",
    "wallclock_ms",
    "loss_D_global_uncond",
];

/// Renders the training log as CSV; absent compartments leave empty cells.
pub fn log_to_csv(log: &[IterationLog]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOG_COLUMNS).expect("in-memory csv");
    let cell = |m: &BTreeMap<String, f64>, k: &str| m.get(k).map(|v| format!("{v:e}")).unwrap_or_default();
    for r in log {
        w.write_record([
            r.iteration.to_string(),
            r.stage.to_string(),
            r.t_star.to_string(),
            format!("{:e}", r.loss_g),
            cell(&r.loss_d, "global_cond"),
            cell(&r.loss_d, "local_cond"),
            cell(&r.loss_d, "local_uncond"),
            r.refresh_count.to_string(),
            r.wallclock_ms.to_string(),
            cell(&r.loss_d, "global_uncond"),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

/// Everything one iteration needs that does not depend on the student.
#[derive(Debug, Clone)]
pub struct Batch {
    pub iteration: u64,
    pub eps: Tensor,
    pub labels: Option<Vec<usize>>,
    pub t_star: usize,
    /// Teacher samples generated from `eps`.
    pub x0_real: Tensor,
    /// 1-based student step trained this iteration.
    pub step: usize,
    rest_seed: u64,
}

/// Builds the batch of global iteration `iteration`; a pure function of its inputs.
pub fn make_batch(
    teacher: &GeneratorNet,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<Batch> {
    let mut rng = iteration_rng(cfg.seed, iteration);
    let spec = teacher.spec();
    let mut shape = vec![cfg.batch_size];
    shape.extend(&spec.data_shape);
    let eps = Tensor::randn(&shape, &mut rng);
    let labels: Option<Vec<usize>> =
        (spec.cond_classes > 0).then(|| (0..cfg.batch_size).map(|_| rng.random_range(0..spec.cond_classes)).collect());
    let t_star = cfg.t_stars[rng.random_range(0..cfg.t_stars.len())];
    let step = rng.random_range(1..=cfg.stage);
    let rest_seed = rng.random();
    let steps = StepSchedule::uniform(sched.t_total(), cfg.teacher_steps)?;
    let x0_real = teacher_sample(teacher, sched, &steps, &eps, labels.as_deref(), &mut rng)?;
    Ok(Batch { iteration, eps, labels, t_star, x0_real, step, rest_seed })
}

/// Training state carried across iterations and stages.
pub struct Distiller {
    student: GeneratorNet,
    teacher: GeneratorNet,
    extractor: FeatureExtractor,
    pool: DiscriminatorPool,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    layout: PoolLayout,
    student_adam: AdamState,
    accum: Option<Vec<Tensor>>,
    accum_count: usize,
    iteration: u64,
}

impl Distiller {
    /// Student initialized from the teacher, fresh pool.
    pub fn new(teacher: &GeneratorNet, sched: &NoiseSchedule, cfg: TrainConfig, kind: DatasetKind) -> Result<Self> {
        Self::with_student(teacher, init_student_from_teacher(teacher), sched, cfg, kind)
    }

    pub fn with_student(
        teacher: &GeneratorNet,
        student: GeneratorNet,
        sched: &NoiseSchedule,
        cfg: TrainConfig,
        kind: DatasetKind,
    ) -> Result<Self> {
        cfg.validate(sched)?;
        if student.spec() != teacher.spec() {
            return Err(Error::ArchMismatch("student and teacher architectures differ".into()));
        }
        if teacher.spec().data_shape != kind.dims() {
            return Err(Error::ArchMismatch(format!("teacher data shape {:?} vs {:?}", teacher.spec().data_shape, kind.dims())));
        }
        let extractor = FeatureExtractor::new(teacher)?;
        let layout = cfg.layout_for(kind);
        if layout == PoolLayout::MultiScaleDual && !kind.is_image() {
            return Err(Error::InvalidArgument("patch compartments need image data".into()));
        }
        if kind.is_image() {
            let d = &kind.dims();
            patch_offsets(1, d[1], d[2], &cfg.patch_spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        }
        let recipe = HeadRecipe::for_levels(&extractor.level_shapes(), cfg.head_width, teacher.spec().cond_classes, cfg.head_budget);
        let pool = init_pool(
            PoolConfig {
                t_stars: cfg.t_stars.clone(),
                groups_per_compartment: cfg.groups_per_compartment,
                layout,
                refresh_rate: cfg.refresh_rate,
                seed: cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
            },
            recipe,
        )?;
        Ok(Self {
            student,
            teacher: teacher.clone(),
            extractor,
            pool,
            sched: sched.clone(),
            cfg,
            layout,
            student_adam: AdamState::default(),
            accum: None,
            accum_count: 0,
            iteration: 0,
        })
    }

    pub fn student(&self) -> &GeneratorNet {
        &self.student
    }

    pub fn teacher(&self) -> &GeneratorNet {
        &self.teacher
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn pool(&self) -> &DiscriminatorPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut DiscriminatorPool {
        &mut self.pool
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iterations_done(&self) -> u64 {
        self.iteration
    }

    pub fn into_parts(self) -> (GeneratorNet, DiscriminatorPool) {
        (self.student, self.pool)
    }

    /// Moves on to the next bottom-up stage, keeping student, pool and optimizer state.
    pub fn advance_stage(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate(&self.sched)?;
        if cfg.stage < self.cfg.stage {
            return Err(Error::InvalidArgument(format!("stage {} after stage {}", cfg.stage, self.cfg.stage)));
        }
        self.pool.set_refresh_rate(cfg.refresh_rate)?;
        self.cfg = cfg;
        Ok(())
    }

    /// Replaces the pool, e.g. with one restored from a checkpoint.
    pub fn set_pool(&mut self, pool: DiscriminatorPool) -> Result<()> {
        let keys: Vec<_> = pool.keys().collect();
        if keys != self.pool.keys().collect::<Vec<_>>() || pool.recipe() != self.pool.recipe() {
            return Err(Error::ArchMismatch("restored pool does not match the configuration".into()));
        }
        self.pool = pool;
        Ok(())
    }

    /// Sets the global iteration counter (used when resuming).
    pub fn set_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    pub fn next_batch(&self) -> Result<Batch> {
        make_batch(&self.teacher, &self.sched, &self.cfg, self.iteration)
    }

    /// Input of the trained step: pure noise for step 1, otherwise the
    /// student's own detached earlier steps re-noised with fresh noise.
    fn student_input(&self, batch: &Batch, steps: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut x = batch.eps.clone();
        for i in 0..batch.step - 1 {
            let eps_hat = self.student.predict_noise(&x, steps[i], batch.labels.as_deref())?;
            let x0 = predict_x0(&x, &eps_hat, steps[i], &self.sched)?;
            let fresh = Tensor::randn(x.shape(), rng);
            x = forward_diffuse(&x0, &fresh, steps[i + 1], &self.sched)?;
        }
        Ok(x)
    }

    /// One training iteration on a batch produced by [`make_batch`].
    pub fn train_iteration(&mut self, batch: Batch) -> Result<IterationLog> {
        self.iterate(batch, true)
    }

    /// Like [`Self::train_iteration`] with the student held fixed: only heads
    /// and pool state change.
    pub fn critic_iteration(&mut self, batch: Batch) -> Result<IterationLog> {
        self.iterate(batch, false)
    }

    fn iterate(&mut self, batch: Batch, update_student: bool) -> Result<IterationLog> {
        let start = Instant::now();
        if batch.iteration != self.iteration {
            return Err(Error::InvalidArgument(format!("batch {} offered at iteration {}", batch.iteration, self.iteration)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(batch.rest_seed);
        let steps = make_step_schedule(self.sched.t_shifted(), self.cfg.stage)?;
        let t_j = steps.steps()[batch.step - 1];
        let x_in = self.student_input(&batch, steps.steps(), &mut rng)?;
        let labels = batch.labels.as_deref();
        let t_star = batch.t_star;

        let mut g = Graph::new();
        let p = self.student.bind(&mut g, true);
        let xt_fake = student_at_t_star(&mut g, &self.student, &p, x_in, t_j, &batch.eps, labels, t_star, &self.sched)?;
        let xt_real = forward_diffuse(&batch.x0_real, &batch.eps, t_star, &self.sched)?;

        let head_opt = self.cfg.head_optimizer();
        let mut loss_d = BTreeMap::new();
        let mut g_terms = Vec::new();
        for &task in self.layout.task_types() {
            let key = CompartmentKey { t_star, task };
            let mut groups = self.pool.sample_heads(key, self.cfg.m_groups)?;
            let outcome = self.critique(&mut g, &mut groups, task, t_star, xt_fake, &xt_real, labels, &head_opt, &mut rng);
            self.pool.release_heads(groups)?;
            let (ld, lg) = outcome?;
            if !ld.is_finite() {
                return Err(Error::NonFinite(format!("L_D for {key} at iteration {}", self.iteration)));
            }
            loss_d.insert(task.tag().to_string(), ld);
            g_terms.push(lg);
        }
        let total = sum_vars(&mut g, &g_terms);
        let loss_g = g.value(total).data()[0];
        if !loss_g.is_finite() {
            return Err(Error::NonFinite(format!("L_G at iteration {}", self.iteration)));
        }
        if update_student {
            let mut grads = g.backward(total);
            let gs: Vec<Tensor> = p.vars().iter().map(|&v| grads.take(v).expect("student parameter gradient")).collect();
            if gs.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite(format!("student gradient at iteration {}", self.iteration)));
            }
            self.accumulate(gs);
        }

        let refresh_count = self.pool.refresh();
        let log = IterationLog {
            iteration: self.iteration,
            stage: self.cfg.stage,
            t_star,
            loss_g,
            loss_d,
            refresh_count,
            wallclock_ms: if self.cfg.deterministic { 0 } else { start.elapsed().as_millis() as u64 },
        };
        self.iteration += 1;
        Ok(log)
    }

    fn accumulate(&mut self, gs: Vec<Tensor>) {
        match &mut self.accum {
            None => self.accum = Some(gs),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&gs) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
        self.accum_count += 1;
        if self.accum_count == self.cfg.grad_accum_steps {
            let mut acc = self.accum.take().expect("accumulated");
            let scale = 1.0 / self.accum_count as f64;
            for t in &mut acc {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            self.cfg.student_optimizer().step(self.student.params_mut(), &acc, &mut self.student_adam);
            self.accum_count = 0;
        }
    }

    /// Head update on detached features, then the student's adversarial term
    /// against the updated heads on `g`. Returns `(L_D before the update, L_G var)`.
    #[allow(clippy::too_many_arguments)]
    fn critique(
        &self,
        g: &mut Graph,
        groups: &mut [HeadGroup],
        task: TaskType,
        t_star: usize,
        xt_fake: Var,
        xt_real: &Tensor,
        labels: Option<&[usize]>,
        head_opt: &AdamW,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Var)> {
        let (fake_in, real_in, task_labels) = match task.scale {
            Scale::Global => (xt_fake, xt_real.clone(), labels.map(<[usize]>::to_vec)),
            Scale::Local => {
                let &[b, _, h, w] = xt_real.shape() else {
                    return Err(Error::InvalidArgument("local compartments need image data".into()));
                };
                let ps = self.cfg.patch_spec;
                let crops = patch_offsets(b, h, w, &ps, rng)?;
                let lab = labels.map(|l| crops.iter().map(|c| l[c.src]).collect());
                let real = crop_tensor(xt_real, crops.clone(), &ps);
                (g.crop(xt_fake, crops, ps.patch_h, ps.patch_w), real, lab)
            }
        };
        let cond = if task.is_conditional() { task_labels.as_deref() } else { None };
        let real_feats = extract_features(&self.extractor, &real_in, t_star, cond)?;
        let fake_feats = self.extractor.extract_graph(g, fake_in, t_star, cond)?;
        let fake_values: Vec<Tensor> = fake_feats.iter().map(|&f| g.value(f).clone()).collect();
        let perturbed = if self.cfg.r1_weight > 0.0 {
            let noise = Tensor::randn(real_in.shape(), rng);
            let x = real_in.lincomb(1.0, &noise, self.cfg.r1_sigma)?;
            Some(extract_features(&self.extractor, &x, t_star, cond)?)
        } else {
            None
        };

        let ld = update_heads(
            groups,
            &real_feats,
            &fake_values,
            perturbed.as_deref(),
            cond,
            self.cfg.r1_weight,
            self.cfg.r1_sigma,
            head_opt,
        )?;

        let mut scores = Vec::new();
        for group in groups.iter() {
            for (l, head) in group.heads().iter().enumerate() {
                let hp = head.params().bind(g, false);
                scores.push(head.forward_graph(g, &hp, l, fake_feats[l], cond)?);
            }
        }
        Ok((ld, adv_loss_g_var(g, &scores)))
    }
}

/// Student x0 prediction from `x_in` at `t_j`, diffused to `t_star` with `eps`.
#[allow(clippy::too_many_arguments)]
pub fn student_at_t_star(
    g: &mut Graph,
    student: &GeneratorNet,
    p: &Bound,
    x_in: Tensor,
    t_j: usize,
    eps: &Tensor,
    labels: Option<&[usize]>,
    t_star: usize,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let xv = g.constant(x_in);
    let eps_hat = student.forward_graph(g, p, xv, &vec![t_j; eps.rows()], labels)?;
    let x0_fake = predict_x0_var(g, xv, eps_hat, t_j, sched)?;
    let eps_v = g.constant(eps.clone());
    forward_diffuse_var(g, x0_fake, eps_v, t_star, sched)
}

/// `L_G` of one-step generation from `eps` against fixed `heads`, with the
/// student's parameters given as `student_vars` on `g`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    g: &mut Graph,
    student: &GeneratorNet,
    student_vars: Vec<Var>,
    extractor: &FeatureExtractor,
    heads: &[&DiscriminatorHead],
    eps: &Tensor,
    labels: Option<&[usize]>,
    t_star: usize,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let p = student.bind_vars(student_vars)?;
    let xt = student_at_t_star(g, student, &p, eps.clone(), sched.t_shifted(), eps, labels, t_star, sched)?;
    let feats = extractor.extract_graph(g, xt, t_star, labels)?;
    let mut scores = Vec::with_capacity(heads.len());
    for head in heads {
        let hp = head.params().bind(g, false);
        scores.push(head.forward_graph(g, &hp, head.level(), feats[head.level()], labels)?);
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no heads".into()));
    }
    Ok(adv_loss_g_var(g, &scores))
}

/// Scores each head, with its parameters `params[i]`, on its level of `feats`.
fn score_all(
    g: &mut Graph,
    heads: &[&DiscriminatorHead],
    params: &[Vec<Var>],
    feats: &[Var],
    cond: Option<&[usize]>,
) -> Result<Vec<Var>> {
    heads.iter().zip(params).map(|(h, p)| h.forward_graph(g, p, h.level(), feats[h.level()], cond)).collect()
}

/// `L_D` of `heads`, whose parameters are `head_vars` on `g`, on per-level
/// real and fake features.
pub fn discriminator_objective(
    g: &mut Graph,
    heads: &[&DiscriminatorHead],
    head_vars: &[Vec<Var>],
    real_feats: &[Tensor],
    fake_feats: &[Tensor],
    cond: Option<&[usize]>,
) -> Result<Var> {
    if heads.is_empty() || heads.len() != head_vars.len() {
        return Err(Error::InvalidArgument(format!("{} heads with {} parameter lists", heads.len(), head_vars.len())));
    }
    let real: Vec<Var> = real_feats.iter().map(|f| g.constant(f.clone())).collect();
    let fake: Vec<Var> = fake_feats.iter().map(|f| g.constant(f.clone())).collect();
    let sr = score_all(g, heads, head_vars, &real, cond)?;
    let sf = score_all(g, heads, head_vars, &fake, cond)?;
    Ok(adv_loss_d_var(g, &sf, &sr))
}

/// One optimizer step on every head of `groups` against `L_D` (plus the
/// optional smoothness penalty). Returns `L_D` before the step.
#[allow(clippy::too_many_arguments)]
fn update_heads(
    groups: &mut [HeadGroup],
    real_feats: &[Tensor],
    fake_feats: &[Tensor],
    perturbed_real: Option<&[Tensor]>,
    cond: Option<&[usize]>,
    r1_weight: f64,
    r1_sigma: f64,
    opt: &AdamW,
) -> Result<f64> {
    let mut g = Graph::new();
    let heads: Vec<&DiscriminatorHead> = groups.iter().flat_map(|grp| grp.heads()).collect();
    let params: Vec<Vec<Var>> = heads.iter().map(|h| h.params().bind(&mut g, true)).collect();
    let ld = discriminator_objective(&mut g, &heads, &params, real_feats, fake_feats, cond)?;
    let value = g.value(ld).data()[0];
    let mut objective = ld;
    if let Some(pert) = perturbed_real {
        let real: Vec<Var> = real_feats.iter().map(|f| g.constant(f.clone())).collect();
        let pv: Vec<Var> = pert.iter().map(|f| g.constant(f.clone())).collect();
        let sr = score_all(&mut g, &heads, &params, &real, cond)?;
        let sp = score_all(&mut g, &heads, &params, &pv, cond)?;
        let a = sum_vars(&mut g, &sp);
        let b = sum_vars(&mut g, &sr);
        let d = g.sub(a, b);
        let sq = g.mul(d, d);
        let pen = g.mean_all(sq);
        let pen = g.scale(pen, r1_weight / (r1_sigma * r1_sigma));
        objective = g.add(objective, pen);
    }
    let mut grads = g.backward(objective);
    let mut hp = params.iter();
    for head in groups.iter_mut().flat_map(|grp| grp.heads_mut().iter_mut()) {
        let gs: Vec<Tensor> = hp.next().expect("one list per head").iter().map(|&v| grads.take(v).expect("head parameter gradient")).collect();
        step_head(head, &gs, opt);
    }
    Ok(value)
}

fn step_head(head: &mut DiscriminatorHead, grads: &[Tensor], opt: &AdamW) {
    let mut adam = std::mem::take(&mut head.adam);
    opt.step(head.params_mut(), grads, &mut adam);
    head.adam = adam;
}

/// Where and how often [`run_iterations`] writes checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub stage_tag: String,
    /// Merged into the student manifest's provenance.
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

/// Files written into a distillation output directory.
pub const STUDENT_DIR: &str = "student";
pub const POOL_DIR: &str = "pool";
pub const TRAIN_LOG: &str = "train_log.csv";

pub fn write_checkpoint(d: &Distiller, log: &[IterationLog], sink: &CheckpointSink) -> Result<()> {
    let mut prov = sink.provenance.clone();
    prov.insert("iterations".into(), d.iterations_done().into());
    prov.insert("stage".into(), d.config().stage.into());
    save_generator(d.student(), &sink.dir.join(STUDENT_DIR), &sink.stage_tag, prov)?;
    save_pool(d.pool(), &sink.dir.join(POOL_DIR))?;
    write_atomic(&sink.dir.join(TRAIN_LOG), log_to_csv(log).as_bytes())
}

/// Runs `iterations` iterations, optionally building batches on a worker
/// thread; batches are pure functions of the iteration index, so both modes
/// give identical results.
pub fn run_iterations(d: &mut Distiller, iterations: usize, sink: Option<&CheckpointSink>) -> Result<Vec<IterationLog>> {
    let mut log = Vec::with_capacity(iterations);
    let first = d.iteration;
    let every = d.cfg.checkpoint_every;
    let after = |d: &Distiller, log: &[IterationLog], done: usize| -> Result<()> {
        match sink {
            Some(s) if every > 0 && done.is_multiple_of(every) && done < iterations => write_checkpoint(d, log, s),
            _ => Ok(()),
        }
    };
    if d.cfg.prefetch && iterations > 0 {
        let (teacher, sched, cfg) = (d.teacher.clone(), d.sched.clone(), d.cfg.clone());
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = sync_channel(2);
            s.spawn(move || {
                for it in first..first + iterations as u64 {
                    if tx.send(make_batch(&teacher, &sched, &cfg, it)).is_err() {
                        break;
                    }
                }
            });
            for (i, batch) in rx.into_iter().enumerate() {
                log.push(d.train_iteration(batch?)?);
                after(d, &log, i + 1)?;
            }
            Ok(())
        })?;
    } else {
        for i in 0..iterations {
            let batch = d.next_batch()?;
            log.push(d.train_iteration(batch)?);
            after(d, &log, i + 1)?;
        }
    }
    if let Some(s) = sink {
        write_checkpoint(d, &log, s)?;
    }
    Ok(log)
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub student: GeneratorNet,
    pub pool: DiscriminatorPool,
    pub log: Vec<IterationLog>,
}

/// Single-stage distillation from a teacher-initialized student.
pub fn distill(
    cfg: &TrainConfig,
    teacher: &GeneratorNet,
    kind: DatasetKind,
    sched: &NoiseSchedule,
    out_dir: Option<&Path>,
) -> Result<DistillOutcome> {
    let mut d = Distiller::new(teacher, sched, cfg.clone(), kind)?;
    let sink = out_dir.map(|dir| CheckpointSink {
        dir: dir.to_path_buf(),
        stage_tag: format!("stage-{}", cfg.stage),
        provenance: serde_json::Map::new(),
    });
    let log = run_iterations(&mut d, cfg.iterations, sink.as_ref())?;
    let (student, pool) = d.into_parts();
    Ok(DistillOutcome { student, pool, log })
}

/// All stages of [`bottom_up_schedule`] in sequence, each continuing from the
/// previous stage's student and pool. `on_stage` sees the state after each stage.
pub fn distill_bottom_up(
    cfg: &TrainConfig,
    total_stages: usize,
    teacher: &GeneratorNet,
    kind: DatasetKind,
    sched: &NoiseSchedule,
    mut on_stage: impl FnMut(&Distiller, &[IterationLog]) -> Result<()>,
) -> Result<DistillOutcome> {
    let stages = bottom_up_schedule(total_stages, cfg)?;
    let mut d = Distiller::new(teacher, sched, stages[0].clone(), kind)?;
    let mut log = Vec::new();
    for sc in stages {
        d.advance_stage(sc.clone())?;
        let part = run_iterations(&mut d, sc.iterations, None)?;
        on_stage(&d, &part)?;
        log.extend(part);
    }
    let (student, pool) = d.into_parts();
    Ok(DistillOutcome { student, pool, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::models::{build_generator, Arch, GeneratorSpec};

    fn scalar_scores(v: &[f64]) -> Vec<Tensor> {
        v.iter().map(|&x| Tensor::new(vec![1], vec![x]).unwrap()).collect()
    }

    #[test]
    fn loss_examples() {
        assert!((adv_loss_g(&scalar_scores(&[0.3])).unwrap() + 0.3).abs() < 1e-12);
        assert_eq!(adv_loss_g(&scalar_scores(&[0.0, 0.0])).unwrap(), 0.0);
        assert!((adv_loss_g(&scalar_scores(&[0.3, -0.1])).unwrap() + 0.2).abs() < 1e-12);
        assert!((adv_loss_d(&scalar_scores(&[0.3]), &scalar_scores(&[0.7])).unwrap() + 0.4).abs() < 1e-12);
        assert!((adv_loss_d(&scalar_scores(&[0.2, 0.2]), &scalar_scores(&[0.5, 0.1])).unwrap() + 0.2).abs() < 1e-12);
        let s = scalar_scores(&[0.25, -1.5, 3.0]);
        assert_eq!(adv_loss_d(&s, &s).unwrap(), 0.0);
        assert!(adv_loss_g(&[]).is_err());
        assert!(adv_loss_d(&scalar_scores(&[0.1]), &scalar_scores(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn graph_losses_match_scalar_losses() {
        let fake = vec![Tensor::new(vec![2], vec![0.3, -0.2]).unwrap(), Tensor::new(vec![2], vec![1.0, 0.5]).unwrap()];
        let real = vec![Tensor::new(vec![2], vec![0.1, 0.4]).unwrap(), Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap()];
        let mut g = Graph::new();
        let fv: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
        let rv: Vec<Var> = real.iter().map(|t| g.constant(t.clone())).collect();
        let lg = adv_loss_g_var(&mut g, &fv);
        let ld = adv_loss_d_var(&mut g, &fv, &rv);
        assert!((g.value(lg).data()[0] - adv_loss_g(&fake).unwrap()).abs() < 1e-12);
        assert!((g.value(ld).data()[0] - adv_loss_d(&fake, &real).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn patch_shapes_and_top_left_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 1, 32, 32], &mut rng);
        let spec = PatchSpec { patch_h: 16, patch_w: 16, patches_per_sample: 4 };
        let p = make_patches(&x, &spec, &mut rng).unwrap();
        assert_eq!(p.shape(), &[12, 1, 16, 16]);
        let tl = crop_tensor(&x, vec![Crop { src: 1, y: 0, x: 0 }], &spec);
        for y in 0..16 {
            assert_eq!(&tl.data()[y * 16..y * 16 + 16], &x.row(1)[y * 32..y * 32 + 16]);
        }
        assert!(make_patches(&Tensor::zeros(&[4, 2]), &spec, &mut rng).is_err());
        let too_big = PatchSpec { patch_h: 32, patch_w: 16, patches_per_sample: 1 };
        assert!(make_patches(&x, &too_big, &mut rng).is_err());
    }

    #[test]
    fn patch_offsets_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = PatchSpec { patch_h: 16, patch_w: 16, patches_per_sample: 1 };
        let mut counts = vec![0.0; 17 * 17];
        let n = 289 * 60;
        for c in patch_offsets(n, 32, 32, &spec, &mut rng).unwrap() {
            counts[c.y * 17 + c.x] += 1.0;
        }
        let e = n as f64 / 289.0;
        let stat: f64 = counts.iter().map(|o| (o - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new(288.0).unwrap().cdf(stat);
        assert!(p > 1e-3, "p = {p}");
    }

    #[test]
    fn bottom_up_stages() {
        let cfg = TrainConfig::default();
        let s = bottom_up_schedule(3, &cfg).unwrap();
        assert_eq!(s.iter().map(|c| c.stage).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(bottom_up_schedule(1, &cfg).unwrap(), vec![TrainConfig { stage: 1, ..cfg.clone() }]);
        assert!(bottom_up_schedule(0, &cfg).is_err());
        assert!(bottom_up_schedule(5, &cfg).is_err());
    }

    fn tiny_setup(kind: DatasetKind) -> (GeneratorNet, NoiseSchedule, TrainConfig) {
        let spec = match kind {
            DatasetKind::Shapes => GeneratorSpec {
                widths: vec![4, 4, 8],
                mid_width: 8,
                time_embed_dim: 8,
                ..GeneratorSpec::default_for(Arch::Tinyunet, &kind.dims(), kind.cond_classes())
            },
            _ => GeneratorSpec { widths: vec![16, 16], ..GeneratorSpec::default_for(Arch::Mlp2d, &[2], kind.cond_classes()) },
        };
        let mut teacher = build_generator(spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in teacher.params_mut().tensors_mut() {
            let n = Tensor::randn(t.shape(), &mut rng);
            *t = t.lincomb(1.0, &n, 0.1).unwrap();
        }
        teacher.mark_trained();
        let sched = make_schedule(ScheduleKind::Linear, 1000).unwrap().with_shift(250).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 3,
            teacher_steps: 3,
            head_width: 4,
            groups_per_compartment: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        (teacher, sched, cfg)
    }

    #[test]
    fn iteration_scope_on_image_data() {
        let (teacher, sched, cfg) = tiny_setup(DatasetKind::Shapes);
        let mut d = Distiller::new(&teacher, &sched, TrainConfig { refresh_rate: 0.0, ..cfg }, DatasetKind::Shapes).unwrap();
        let teacher_digest = teacher.params().digest();
        let student_digest = d.student().params().digest();
        let before = d.pool().clone();
        let batch = d.next_batch().unwrap();
        let t_star = batch.t_star;
        let log = d.train_iteration(batch).unwrap();
        assert_eq!(log.loss_d.len(), 3);
        assert_eq!(d.teacher().params().digest(), teacher_digest);
        assert_eq!(d.extractor().source().params().digest(), teacher_digest);
        assert_ne!(d.student().params().digest(), student_digest);
        let mut changed = 0;
        for key in before.keys() {
            for (g0, g1) in before.groups(key).unwrap().zip(d.pool().groups(key).unwrap()) {
                if g0 != g1 {
                    assert_eq!(key.t_star, t_star);
                    changed += 1;
                }
            }
        }
        assert_eq!(changed, 3);
    }

    #[test]
    fn fixed_seed_gives_identical_logs_with_and_without_prefetch() {
        let (teacher, sched, cfg) = tiny_setup(DatasetKind::Gauss8);
        let a = distill(&cfg, &teacher, DatasetKind::Gauss8, &sched, None).unwrap();
        let b = distill(&TrainConfig { prefetch: true, ..cfg.clone() }, &teacher, DatasetKind::Gauss8, &sched, None).unwrap();
        assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
        assert_eq!(a.student, b.student);
        assert!(a.log.iter().all(|r| r.loss_d.contains_key("global_uncond")));
    }

    #[test]
    fn zero_iterations_leave_student_at_initialization() {
        let (teacher, sched, cfg) = tiny_setup(DatasetKind::Gauss8);
        let out = distill(&TrainConfig { iterations: 0, ..cfg }, &teacher, DatasetKind::Gauss8, &sched, None).unwrap();
        assert_eq!(out.student, init_student_from_teacher(&teacher));
        assert!(out.log.is_empty());
    }

    #[test]
    fn gradient_accumulation_defers_the_student_step() {
        let (teacher, sched, cfg) = tiny_setup(DatasetKind::Gauss8);
        let mut d = Distiller::new(&teacher, &sched, TrainConfig { grad_accum_steps: 2, ..cfg }, DatasetKind::Gauss8).unwrap();
        let s0 = d.student().clone();
        let b = d.next_batch().unwrap();
        d.train_iteration(b).unwrap();
        assert_eq!(d.student(), &s0);
        let b = d.next_batch().unwrap();
        d.train_iteration(b).unwrap();
        assert_ne!(d.student(), &s0);
    }

    #[test]
    fn stages_never_decrease_and_multi_stage_runs() {
        let (teacher, sched, cfg) = tiny_setup(DatasetKind::Gauss8);
        let mut d = Distiller::new(&teacher, &sched, TrainConfig { stage: 2, ..cfg.clone() }, DatasetKind::Gauss8).unwrap();
        assert!(d.advance_stage(TrainConfig { stage: 1, ..cfg.clone() }).is_err());
        let mut seen = Vec::new();
        let out = distill_bottom_up(&TrainConfig { iterations: 2, ..cfg }, 3, &teacher, DatasetKind::Gauss8, &sched, |d, _| {
            seen.push(d.config().stage);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [1, 2, 3]);
        assert_eq!(out.log.len(), 6);
        assert!(out.log.windows(2).all(|w| w[0].stage <= w[1].stage));
    }

    #[test]
    fn adversarial_gradients_match_finite_differences() {
        use crate::gradcheck::{all_coords, check_graph};
        use crate::models::{init_head, HeadArch, HeadSpec};
        let spec = GeneratorSpec { widths: vec![8, 8], time_embed_dim: 4, ..GeneratorSpec::default_for(Arch::Mlp2d, &[2], 3) };
        let mut teacher = build_generator(spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in teacher.params_mut().tensors_mut() {
            let n = Tensor::randn(t.shape(), &mut rng);
            *t = n.lincomb(0.5, &n, 0.0).unwrap();
        }
        teacher.mark_trained();
        let student = init_student_from_teacher(&teacher);
        assert!(student.params().numel() <= 1000);
        let extractor = FeatureExtractor::new(&teacher).unwrap();
        let head = init_head(HeadSpec { level: 1, arch: HeadArch::Vector { in_dim: 8, width: 4 }, cond_classes: 3 }, 7);
        let sched = make_schedule(ScheduleKind::Linear, 1000).unwrap().with_shift(250).unwrap();
        let eps = Tensor::randn(&[3, 2], &mut rng);
        let labels = [0, 2, 1];

        let inputs = student.params().tensors().to_vec();
        let r = check_graph(&inputs, &all_coords(&inputs), 1e-5, |g, vars| {
            generator_objective(g, &student, vars.to_vec(), &extractor, &[&head], &eps, Some(&labels), 63, &sched).unwrap()
        });
        assert!(r.checked >= 100 && r.max_rel_error < 1e-4, "{r:?}");

        let real = extract_features(&extractor, &Tensor::randn(&[3, 2], &mut rng), 63, Some(&labels)).unwrap();
        let fake = extract_features(&extractor, &Tensor::randn(&[3, 2], &mut rng), 63, Some(&labels)).unwrap();
        let inputs = head.params().tensors().to_vec();
        let r = check_graph(&inputs, &all_coords(&inputs), 1e-5, |g, vars| {
            discriminator_objective(g, &[&head], &[vars.to_vec()], &real, &fake, Some(&labels)).unwrap()
        });
        assert!(r.checked >= 40 && r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn heads_fit_a_frozen_student() {
        use crate::data::DataSpec;
        use crate::teacher::{train_teacher, TeacherConfig};
        let (_, sched, cfg) = tiny_setup(DatasetKind::Gauss8);
        let data = DataSpec { name: DatasetKind::Gauss8, n_train: 2000, seed: 0 };
        let spec = GeneratorSpec { widths: vec![16, 16], ..GeneratorSpec::default_for(Arch::Mlp2d, &[2], 8) };
        let tcfg = TeacherConfig { iterations: 400, batch_size: 64, ..TeacherConfig::default() };
        let teacher = train_teacher(&data, spec, &sched, &tcfg).unwrap().net;
        let cfg = TrainConfig { refresh_rate: 0.0, m_groups: 2, groups_per_compartment: 2, batch_size: 64, t_stars: vec![63], ..cfg };
        let mut d = Distiller::new(&teacher, &sched, cfg, DatasetKind::Gauss8).unwrap();
        let student = d.student().clone();
        let mut ema = None::<f64>;
        let mut decreases = 0;
        for _ in 0..200 {
            let b = d.next_batch().unwrap();
            let ld: f64 = d.critic_iteration(b).unwrap().loss_d.values().sum();
            let next = ema.map_or(ld, |e| 0.95 * e + 0.05 * ld);
            if ema.is_some_and(|e| next < e) {
                decreases += 1;
            }
            ema = Some(next);
        }
        assert_eq!(d.student(), &student);
        assert!(decreases >= 180, "{decreases} of 199");
    }

    #[test]
    fn smoothness_penalty_runs() {
        let (teacher, sched, cfg) = tiny_setup(DatasetKind::Gauss8);
        let out = distill(&TrainConfig { r1_weight: 1.0, ..cfg }, &teacher, DatasetKind::Gauss8, &sched, None).unwrap();
        assert!(out.log.iter().all(|r| r.loss_g.is_finite()));
    }

    #[test]
    fn patch_compartments_rejected_for_points() {
        let (teacher, sched, cfg) = tiny_setup(DatasetKind::Gauss8);
        let cfg = TrainConfig { layout: Some(PoolLayout::MultiScaleDual), ..cfg };
        assert!(Distiller::new(&teacher, &sched, cfg, DatasetKind::Gauss8).is_err());
    }
}
