//! Bias-corrected Adam, used as an ascent method on the ELBO.
//!
//! Global parameters (and amortizer weights) take a dense step every
//! iteration. Explicit per-image rows only step when their image is in the
//! batch, each with its own step count for bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::elbo::{LocalGrad, VariationalGrad};
use crate::inference::state::{LocalFamily, VariationalState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates shaped like the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub first: VariationalState,
    pub second: VariationalState,
    /// Dense step count.
    pub step: u64,
    /// Per-row step counts for an explicit local block.
    pub local_steps: Vec<u64>,
}

impl AdamMoments {
    pub fn new(state: &VariationalState) -> Self {
        let local_rows = match &state.local {
            LocalFamily::Explicit(b) => b.shape().0,
            LocalFamily::Amortized(_) => 0,
        };
        AdamMoments {
            first: state.zeros_like(),
            second: state.zeros_like(),
            step: 0,
            local_steps: vec![0; local_rows],
        }
    }
}

/// One ascent update of `param` at step `t` (1-based).
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    t: u64,
    config: &AdamConfig,
) {
    let c1 = 1.0 - config.beta1.powf(t as f64);
    let c2 = 1.0 - config.beta2.powf(t as f64);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(first.iter_mut()).zip(second.iter_mut()) {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p += config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
}

/// Applies one Adam step of `grad` to `state`.
pub fn adam_step(
    state: &mut VariationalState,
    grad: &VariationalGrad,
    moments: &mut AdamMoments,
    config: &AdamConfig,
) -> Result<()> {
    moments.step += 1;
    let t = moments.step;
    if let Some(g) = &grad.globals {
        let params = state.globals.slices_mut();
        let grads = g.slices();
        let firsts = moments.first.globals.slices_mut();
        let seconds = moments.second.globals.slices_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(firsts).zip(seconds) {
            adam_update(p, g, m, v, t, config);
        }
    }
    match (&mut state.local, &grad.local, &mut moments.first.local, &mut moments.second.local) {
        (
            LocalFamily::Explicit(block),
            LocalGrad::Rows { rows, block: g },
            LocalFamily::Explicit(m),
            LocalFamily::Explicit(v),
        ) => {
            for (j, &r) in rows.iter().enumerate() {
                moments.local_steps[r] += 1;
                let tr = moments.local_steps[r];
                for (p, gm, mm, vm) in [
                    (&mut block.loc, &g.loc, &mut m.loc, &mut v.loc),
                    (&mut block.log_scale, &g.log_scale, &mut m.log_scale, &mut v.log_scale),
                ] {
                    let gr = gm.row(j);
                    adam_update(
                        p.row_mut(r).into_slice().expect("contiguous row"),
                        gr.as_slice().expect("contiguous row"),
                        mm.row_mut(r).into_slice().expect("contiguous row"),
                        vm.row_mut(r).into_slice().expect("contiguous row"),
                        tr,
                        config,
                    );
                }
            }
        }
        (
            LocalFamily::Amortized(mlp),
            LocalGrad::Amortized(g),
            LocalFamily::Amortized(m),
            LocalFamily::Amortized(v),
        ) => {
            for (((p, g), m), v) in mlp
                .slices_mut()
                .into_iter()
                .zip(g.slices())
                .zip(m.slices_mut())
                .zip(v.slices_mut())
            {
                adam_update(p, g, m, v, t, config);
            }
        }
        _ => {
            return Err(Error::InvalidInput(
                "gradient and state use different local families".into(),
            ))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_from_rest_leaves_state() {
        let config = AdamConfig::default();
        let mut p = [1.0, -2.0];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &config);
        assert_eq!(p, [1.0, -2.0]);
        // existing moments decay by β₁ and β₂
        let mut m = [0.4, -0.2];
        let mut v = [0.01, 0.02];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 5, &config);
        assert_abs_diff_eq!(m[0], 0.36, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.02 * 0.999, epsilon = 1e-15);
    }

    #[test]
    fn first_step_is_normalized() {
        let config = AdamConfig::default();
        for &g in &[3.0, -0.25, 1e-3] {
            let mut p = [0.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, &config);
            let expected = config.learning_rate * g / (g.abs() + config.eps);
            assert_abs_diff_eq!(p[0], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let config = AdamConfig::default();
        let mut p = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for t in 1..=2000 {
            adam_update(&mut p, &[-0.7], &mut m, &mut v, t, &config);
            last_step = p[0] - prev;
            prev = p[0];
        }
        assert!(p[0] < 0.0);
        assert_abs_diff_eq!(last_step, -config.learning_rate, epsilon = 1e-6);
    }
}
