use crate::error::{Error, Result};
use crate::tensor::{Parameter, Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Parameter<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            second: zeros.clone(),
            first: zeros,
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }

    /// Applies one update using each parameter's accumulated gradient.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = match (self.first.get_mut(i), self.second.get_mut(i)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::dim("more parameters than optimizer slots")),
            };
            p.value.expect_shape(m.shape(), "adam moment")?;
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.to_f64();
                let m_new = b1 * mi.to_f64() + (1.0 - b1) * g;
                let v_new = b2 * vi.to_f64() + (1.0 - b2) * g * g;
                *mi = T::from_f64(m_new);
                *vi = T::from_f64(v_new);
                let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + self.epsilon);
                *w = T::from_f64(w.to_f64() - step);
            }
            count += 1;
        }
        if count != self.first.len() {
            return Err(Error::dim(format!(
                "optimizer has {} slots, got {count} parameters",
                self.first.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Parameter<f64> {
        Parameter::new(Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(1.25);
        let mut s = AdamState::new([&p]);
        s.update([&mut p], 0.1).unwrap();
        assert_eq!(p.value.data()[0], 1.25);
    }

    #[test]
    fn first_step_closed_form() {
        let (lr, g) = (2e-4, -0.37);
        let mut p = scalar(0.5);
        p.grad.data_mut()[0] = g;
        let mut s = AdamState::new([&p]);
        s.update([&mut p], lr).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let expect = 0.5 - lr * g / (g.abs() + EPSILON);
        assert!((p.value.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn two_step_trace() {
        let lr = 0.01;
        let mut p = scalar(1.0);
        let mut s = AdamState::new([&p]);
        let grads = [0.5, -0.2];
        // Hand-unrolled reference.
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
            p.grad.data_mut()[0] = g;
            s.update([&mut p], lr).unwrap();
        }
        assert!((p.value.data()[0] - w).abs() < 1e-12);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn slot_mismatch_is_error() {
        let mut a = scalar(0.0);
        let mut b = scalar(0.0);
        let mut s = AdamState::new([&a]);
        assert!(s.update([&mut a, &mut b], 0.1).is_err());
    }
}
