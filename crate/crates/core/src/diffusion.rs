//! Noise schedules, the forward/reverse diffusion algebra and few-step
//! inference schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Below this `alpha_bar` the reverse map `predict_x0` is refused.
const MIN_ALPHA_BAR: f64 = 1e-12;

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Cumulative signal fraction `alpha_bar[t]` for `t = 0..=t_total`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_total: usize,
    t_shifted: usize,
    alpha_bar: Vec<f64>,
}

/// Closed-form squared-cosine cumulative signal, normalized so that `t = 0` gives 1.
pub fn cosine_alpha_bar(t: f64, t_total: f64) -> f64 {
    let f = |u: f64| ((u / t_total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(t) / f(0.0)
}

pub fn make_schedule(kind: ScheduleKind, t_total: usize) -> Result<NoiseSchedule> {
    if t_total < 2 {
        return Err(Error::InvalidArgument(format!("schedule needs at least 2 timesteps, got {t_total}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_total)
            .map(|i| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (t_total - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => (1..=t_total)
            .map(|t| {
                let prev = cosine_alpha_bar((t - 1) as f64, t_total as f64);
                let cur = cosine_alpha_bar(t as f64, t_total as f64);
                (1.0 - cur / prev).min(COSINE_MAX_BETA)
            })
            .collect(),
    };
    let mut alpha_bar = Vec::with_capacity(t_total + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, t_total, t_shifted: t_total, alpha_bar })
}

impl NoiseSchedule {
    /// Same variance schedule with a reduced effective maximum timestep.
    pub fn with_shift(mut self, t_shifted: usize) -> Result<Self> {
        if t_shifted == 0 || t_shifted > self.t_total {
            return Err(Error::InvalidArgument(format!(
                "shifted max timestep {t_shifted} must lie in [1, {}]",
                self.t_total
            )));
        }
        self.t_shifted = t_shifted;
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    pub fn t_shifted(&self) -> usize {
        self.t_shifted
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_total {
            return Err(Error::TimestepOutOfRange { t, max: self.t_total });
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `t`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha_bar(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    fn reverse_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha_bar(t)?;
        if a < MIN_ALPHA_BAR {
            return Err(Error::InvalidArgument(format!("alpha_bar[{t}] = {a:e} is numerically zero")));
        }
        Ok((1.0 / a.sqrt(), (1.0 - a).sqrt() / a.sqrt()))
    }
}

/// `x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn forward_diffuse(x0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, b) = sched.coefficients(t)?;
    x0.lincomb(a, eps, b)
}

/// Forward diffusion with a separate timestep per batch row.
pub fn forward_diffuse_rows(x0: &Tensor, eps: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    x0.ensure_same_shape(eps, "forward_diffuse_rows")?;
    if ts.len() != x0.rows() {
        return Err(Error::Shape(format!("{} timesteps for {} rows", ts.len(), x0.rows())));
    }
    let n = x0.row_len();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        let (a, b) = sched.coefficients(t)?;
        out.extend(x0.row(i).iter().zip(eps.row(i)).map(|(x, e)| a * x + b * e));
        debug_assert_eq!(out.len(), (i + 1) * n);
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// `x0 = (x_t - sqrt(1 - alpha_bar[t]) * eps_hat) / sqrt(alpha_bar[t])`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, b) = sched.reverse_coefficients(t)?;
    x_t.lincomb(a, eps_hat, -b)
}

/// Differentiable [`forward_diffuse`].
pub fn forward_diffuse_var(g: &mut Graph, x0: Var, eps: Var, t: usize, sched: &NoiseSchedule) -> Result<Var> {
    let (a, b) = sched.coefficients(t)?;
    let sx = g.scale(x0, a);
    let se = g.scale(eps, b);
    Ok(g.add(sx, se))
}

/// Differentiable [`predict_x0`].
pub fn predict_x0_var(g: &mut Graph, x_t: Var, eps_hat: Var, t: usize, sched: &NoiseSchedule) -> Result<Var> {
    let (a, b) = sched.reverse_coefficients(t)?;
    let sx = g.scale(x_t, a);
    let se = g.scale(eps_hat, b);
    Ok(g.sub(sx, se))
}

/// Strictly decreasing denoising timesteps, starting at the maximum timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule {
    steps: Vec<usize>,
}

/// Largest step count accepted for few-step student inference.
pub const MAX_STUDENT_STEPS: usize = 4;

/// `round_half_up(t_max * (k - i) / k)` for `i = 0..k`, computed in integers.
fn fractional_steps(t_max: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| (2 * t_max * (k - i) + k) / (2 * k)).collect()
}

/// Few-step schedule from the shifted max timestep; `k` must be in `[1, 4]`.
pub fn make_step_schedule(t_shifted: usize, k: usize) -> Result<StepSchedule> {
    if !(1..=MAX_STUDENT_STEPS).contains(&k) {
        return Err(Error::InvalidArgument(format!("step count {k} outside [1, {MAX_STUDENT_STEPS}]")));
    }
    StepSchedule::uniform(t_shifted, k)
}

impl StepSchedule {
    /// The same fractional spacing without the few-step cap, as used for the
    /// many-step teacher sampler.
    pub fn uniform(t_max: usize, k: usize) -> Result<Self> {
        if k == 0 || t_max < k {
            return Err(Error::InvalidArgument(format!("cannot place {k} distinct steps in [1, {t_max}]")));
        }
        Ok(Self { steps: fractional_steps(t_max, k) })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_bar_starts_at_one_and_decreases() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(kind, 1000).unwrap();
            assert_eq!(s.alpha_bars()[0], 1.0);
            assert_eq!(s.alpha_bars().len(), 1001);
            for w in s.alpha_bars()[1..].windows(2) {
                assert!(w[1] < w[0], "{kind:?} not strictly decreasing");
            }
            assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
        }
    }

    #[test]
    fn linear_schedule_matches_independent_product() {
        // cumulative product of (1 - beta) with beta linearly spaced in [1e-4, 0.02]
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        let mut log_acc = 0.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            log_acc += (1.0 - beta).ln();
        }
        let last = *s.alpha_bars().last().unwrap();
        assert!((last - log_acc.exp()).abs() < 1e-12);
        assert!(last < 0.01);
        // frozen value of the same product
        assert!((last - 4.035_829_765e-5).abs() < 1e-13, "{last}");
    }

    #[test]
    fn cosine_midpoint_matches_closed_form() {
        let s = make_schedule(ScheduleKind::Cosine, 1000).unwrap();
        let c = ((0.5 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2)
            / (0.008 / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        assert!((s.alpha_bars()[500] - c).abs() < 1e-12);
        assert!((c - 0.493_843_59).abs() < 1e-8, "{c}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(make_schedule(ScheduleKind::Linear, 1).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
        let s = make_schedule(ScheduleKind::Linear, 10).unwrap();
        assert!(s.clone().with_shift(11).is_err());
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(forward_diffuse(&x, &x, 0, &s), Err(Error::TimestepOutOfRange { .. })));
        assert!(forward_diffuse(&x, &x, 11, &s).is_err());
        assert!(forward_diffuse(&x, &Tensor::zeros(&[2, 3]), 1, &s).is_err());
    }

    fn schedule_with(alpha: f64) -> NoiseSchedule {
        NoiseSchedule { kind: ScheduleKind::Linear, t_total: 1, t_shifted: 1, alpha_bar: vec![1.0, alpha] }
    }

    #[test]
    fn forward_and_reverse_scalar_values() {
        let s = schedule_with(0.25);
        let x0 = Tensor::scalar(2.0);
        let eps = Tensor::scalar(1.0);
        let xt = forward_diffuse(&x0, &eps, 1, &s).unwrap();
        assert!((xt.data()[0] - (1.0 + 0.75f64.sqrt())).abs() < 1e-15);
        assert!((xt.data()[0] - 1.8660).abs() < 1e-4);
        let back = predict_x0(&Tensor::scalar(1.8660), &eps, 1, &s).unwrap();
        assert!((back.data()[0] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn identity_and_limit_cases() {
        let x0 = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let eps = Tensor::new(vec![3], vec![0.3, 0.1, -1.0]).unwrap();
        let s = schedule_with(1.0);
        assert_eq!(forward_diffuse(&x0, &eps, 1, &s).unwrap(), x0);
        assert_eq!(predict_x0(&x0, &eps, 1, &s).unwrap(), x0);
        let tiny = schedule_with(1e-20);
        let xt = forward_diffuse(&x0, &eps, 1, &tiny).unwrap();
        for (a, b) in xt.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(predict_x0(&xt, &eps, 1, &tiny).is_err());
    }

    #[test]
    fn round_trip_is_exact_to_double_precision() {
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 10, 250, 999, 1000] {
            let x0 = Tensor::randn(&[4, 2], &mut rng);
            let eps = Tensor::randn(&[4, 2], &mut rng);
            let xt = forward_diffuse(&x0, &eps, t, &s).unwrap();
            let back = predict_x0(&xt, &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn graph_versions_match_tensor_versions() {
        let s = make_schedule(ScheduleKind::Cosine, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::randn(&[3, 2], &mut rng);
        let eps = Tensor::randn(&[3, 2], &mut rng);
        let mut g = Graph::new();
        let (vx, ve) = (g.constant(x0.clone()), g.constant(eps.clone()));
        let xt = forward_diffuse_var(&mut g, vx, ve, 40, &s).unwrap();
        assert_eq!(g.value(xt), &forward_diffuse(&x0, &eps, 40, &s).unwrap());
        let back = predict_x0_var(&mut g, xt, ve, 40, &s).unwrap();
        assert_eq!(g.value(back), &predict_x0(g.value(xt), &eps, 40, &s).unwrap());
    }

    #[test]
    fn published_step_lists() {
        assert_eq!(make_step_schedule(250, 4).unwrap().steps(), &[250, 188, 125, 63]);
        assert_eq!(make_step_schedule(500, 4).unwrap().steps(), &[500, 375, 250, 125]);
        assert_eq!(make_step_schedule(250, 1).unwrap().steps(), &[250]);
        assert!(make_step_schedule(250, 0).is_err());
        assert!(make_step_schedule(250, 5).is_err());
    }

    #[test]
    fn teacher_schedule_is_strictly_decreasing() {
        let s = StepSchedule::uniform(1000, 50).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.steps()[0], 1000);
        assert_eq!(*s.steps().last().unwrap(), 20);
        assert!(s.steps().windows(2).all(|w| w[1] < w[0]));
        assert!(StepSchedule::uniform(3, 4).is_err());
    }
}
