//! Multi-step samplers: x0 prediction at each step, re-noised with fresh
//! noise to the next timestep.

use rand::Rng;

use crate::diffusion::{forward_diffuse, make_step_schedule, predict_x0, NoiseSchedule, StepSchedule};
use crate::error::{Error, Result};
use crate::models::GeneratorNet;
use crate::tensor::Tensor;

/// Denoises `x` (noisy at `steps[0]`) along `steps`, returning the last x0 prediction.
pub fn denoise<R: Rng + ?Sized>(
    net: &GeneratorNet,
    sched: &NoiseSchedule,
    steps: &[usize],
    x: &Tensor,
    cond: Option<&[usize]>,
    rng: &mut R,
) -> Result<Tensor> {
    let (&first, rest) = steps.split_first().ok_or_else(|| Error::InvalidArgument("empty step list".into()))?;
    let mut x_t = x.clone();
    let mut x0 = predict_x0(&x_t, &net.predict_noise(&x_t, first, cond)?, first, sched)?;
    for &t in rest {
        let fresh = Tensor::randn(x.shape(), rng);
        x_t = forward_diffuse(&x0, &fresh, t, sched)?;
        x0 = predict_x0(&x_t, &net.predict_noise(&x_t, t, cond)?, t, sched)?;
    }
    Ok(x0)
}

/// Many-step teacher sampling from pure noise `eps` placed at `steps[0]`.
pub fn teacher_sample<R: Rng + ?Sized>(
    teacher: &GeneratorNet,
    sched: &NoiseSchedule,
    steps: &StepSchedule,
    eps: &Tensor,
    cond: Option<&[usize]>,
    rng: &mut R,
) -> Result<Tensor> {
    if !teacher.is_trained() {
        return Err(Error::Untrained("teacher".into()));
    }
    denoise(teacher, sched, steps.steps(), eps, cond, rng)
}

/// `k`-step student sampling on the shifted schedule; `k = 1` is one forward pass.
pub fn multi_step_sample<R: Rng + ?Sized>(
    student: &GeneratorNet,
    sched: &NoiseSchedule,
    k: usize,
    eps: &Tensor,
    cond: Option<&[usize]>,
    rng: &mut R,
) -> Result<Tensor> {
    let steps = make_step_schedule(sched.t_shifted(), k)?;
    denoise(student, sched, steps.steps(), eps, cond, rng)
}
