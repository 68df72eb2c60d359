use ndarray::Zip;

use super::config::Schedule;
use crate::error::Result;
use crate::model::{check_same_shapes, ParamSet};

/// One SGD step with heavy-ball momentum and L2 weight decay:
/// `v <- mu v + g + wd p`, `p <- p - lr v`.
pub fn sgd_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    velocity: &mut P,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_same_shapes(params, grads)?;
    check_same_shapes(params, velocity)?;
    let grads = grads.arrays();
    for ((mut p, mut v), (_, g)) in params
        .arrays_mut()
        .into_iter()
        .zip(velocity.arrays_mut())
        .zip(grads)
    {
        Zip::from(&mut p).and(&mut v).and(&g).for_each(|p, v, &g| {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        });
    }
    Ok(())
}

/// Learning rate used throughout `epoch` (0-based) of an `epochs`-long run.
pub fn learning_rate(schedule: Schedule, lr: f64, floor: f64, epoch: usize, epochs: usize) -> f64 {
    match schedule {
        Schedule::Constant => lr,
        Schedule::Cosine => {
            if epochs <= 1 {
                return lr;
            }
            let progress = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
            floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dense;
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::*;

    fn scalar(v: f64) -> Dense {
        Dense {
            weight: Array2::from_elem((1, 1), v),
            bias: Array1::zeros(1),
        }
    }

    #[test]
    fn plain_step() {
        let mut p = scalar(0.0);
        let mut v = scalar(0.0);
        sgd_step(&mut p, &scalar(1.0), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p.weight[[0, 0]] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = Dense {
            weight: array![[1.0, -2.0], [0.5, 3.0]],
            bias: array![0.1, 0.2],
        };
        let before = p.clone();
        let mut v = p.zeros_like();
        sgd_step(&mut p, &before.zeros_like(), &mut v, 0.3, 0.9, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn three_steps_match_unrolled_recurrence() {
        let (lr, mu, wd) = (0.05, 0.9, 1e-2);
        let grads = [0.7, -1.3, 0.4];
        let mut p = scalar(2.0);
        let mut v = scalar(0.0);
        for g in grads {
            sgd_step(&mut p, &scalar(g), &mut v, lr, mu, wd).unwrap();
        }
        let p0 = 2.0;
        let v1 = grads[0] + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + grads[1] + wd * p1;
        let p2 = p1 - lr * v2;
        let v3 = mu * v2 + grads[2] + wd * p2;
        let p3 = p2 - lr * v3;
        assert!((p.weight[[0, 0]] - p3).abs() < 1e-12);
        assert!((v.weight[[0, 0]] - v3).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(0.0);
        let mut v = scalar(0.0);
        let g = Dense::zeros(2, 1);
        assert!(sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(learning_rate(Schedule::Cosine, 0.1, 0.0, 0, 20), 0.1);
        assert!(learning_rate(Schedule::Cosine, 0.1, 0.0, 19, 20).abs() < 1e-15);
        assert!((learning_rate(Schedule::Cosine, 0.1, 0.01, 19, 20) - 0.01).abs() < 1e-15);
        assert_eq!(learning_rate(Schedule::Constant, 0.1, 0.0, 19, 20), 0.1);
    }

    proptest! {
        #[test]
        fn cosine_is_monotone(lr in 1e-4f64..1.0, frac in 0.0f64..1.0, epochs in 1usize..60) {
            let floor = lr * frac;
            let mut prev = f64::INFINITY;
            for e in 0..epochs {
                let cur = learning_rate(Schedule::Cosine, lr, floor, e, epochs);
                prop_assert!(cur <= prev + 1e-15);
                prop_assert!(cur >= floor - 1e-15 && cur <= lr + 1e-15);
                prev = cur;
            }
        }
    }
}
