use super::{GradSet, ParamSet};
use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at
/// `total_steps`. `step` is clamped into `[0, total_steps]`.
pub fn cosine_warmup_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    (base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

/// `p ← p − lr·g` for every parameter.
pub fn sgd_step(params: &mut ParamSet, grads: &GradSet, lr: f64) -> Result<()> {
    if !params.same_layout(grads) {
        return Err(Error::invalid("gradient set does not match parameter layout"));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Central-difference gradient of `f` at `params`, one scalar at a time.
pub fn finite_diff_grad<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradSet>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut grads = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).map_or(0, |p| p.len());
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("objective near {name}[{i}]")));
            }
            grads.get_mut(name).unwrap().data_mut()[i] = (up - down) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all scalars of two sets.
pub fn max_relative_error(a: &GradSet, b: &GradSet, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
