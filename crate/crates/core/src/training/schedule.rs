use ndarray::Array2;

use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Number of warmup steps, `ceil(warmup_ratio * total)`. Products within
/// 1e-9 of an integer count as that integer so `0.1 * 30` gives 3.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    let w = warmup_ratio * total_steps as f64;
    let r = w.round();
    if (w - r).abs() < 1e-9 {
        r as usize
    } else {
        w.ceil() as usize
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at
/// `total_steps`. The update taken at step `s` (counting from 0) uses
/// `lr_at(s)`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Input(format!("step {step} beyond total {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(0.0);
    }
    let peak = cfg.peak_lr;
    // keep at least one decay step so the schedule always ends at 0
    let w = warmup_steps(total_steps, cfg.warmup_ratio).min(total_steps - 1);
    Ok(if step < w {
        peak * step as f64 / w as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - w) as f64
    })
}

/// Adam with bias correction; one moment pair per trainable tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(shapes: &[&Array2<f64>], betas: (f64, f64), eps: f64) -> Self {
        Adam {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            t: 0,
            m: shapes.iter().map(|s| Array2::zeros(s.raw_dim())).collect(),
            v: shapes.iter().map(|s| Array2::zeros(s.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[&Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(*g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchor_points() {
        let cfg = TrainConfig::default();
        for total in [10, 30, 94, 1000] {
            assert_eq!(lr_at(0, total, &cfg).unwrap(), 0.0);
            let w = warmup_steps(total, 0.1);
            assert_eq!(w, (total as f64 / 10.0).ceil() as usize);
            assert!((lr_at(w, total, &cfg).unwrap() - 1e-4).abs() < 1e-18);
            assert_eq!(lr_at(total, total, &cfg).unwrap(), 0.0);
        }
        assert!(lr_at(11, 10, &cfg).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Array2::from_elem((1, 2), 1.0);
        let g = Array2::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap();
        let mut opt = Adam::new(&[&p], (0.9, 0.999), 1e-8);
        opt.step(vec![&mut p], &[&g], 0.1);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] - 1.1).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn piecewise_linear_and_bounded(total in 1usize..400, ratio in 0.0f64..0.9) {
            let cfg = TrainConfig { warmup_ratio: ratio, ..TrainConfig::default() };
            let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, &cfg).unwrap()).collect();
            let max = lrs.iter().cloned().fold(0.0, f64::max);
            prop_assert!((max - cfg.peak_lr).abs() < 1e-15);
            let step = cfg.peak_lr / (warmup_steps(total, ratio).min(total - warmup_steps(total, ratio)).max(1) as f64);
            for w in lrs.windows(2) {
                prop_assert!((w[1] - w[0]).abs() <= step + 1e-15);
            }
        }
    }
}
