//! Adam optimizer with per-slot first/second moment state.

use crate::tensor::Tensor;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, num_slots: usize) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            slots: (0..num_slots)
                .map(|_| Slot { m: Vec::new(), v: Vec::new(), t: 0 })
                .collect(),
        }
    }

    /// One update for the parameter in `slot`. Skipped slots (frozen during
    /// warm-up) keep their step count, so bias correction restarts cleanly
    /// when they thaw.
    pub fn step(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) {
        let s = &mut self.slots[slot];
        if s.m.is_empty() {
            s.m = vec![0.0; param.len()];
            s.v = vec![0.0; param.len()];
        }
        s.t += 1;
        let bc1 = 1.0 - self.beta1.powi(s.t as i32);
        let bc2 = 1.0 - self.beta2.powi(s.t as i32);
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(s.m.iter_mut().zip(s.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction, the first Adam step is ~lr * sign(grad)
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, 1);
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, -0.3]).unwrap();
        adam.step(0, &mut p, &g);
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.data()[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8, 1);
        let mut p = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        for _ in 0..2000 {
            let g = Tensor::from_vec(&[1], vec![2.0 * p.data()[0]]).unwrap();
            adam.step(0, &mut p, &g);
        }
        assert!(p.data()[0].abs() < 1e-2);
    }
}
