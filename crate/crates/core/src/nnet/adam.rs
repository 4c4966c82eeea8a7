use crate::error::{Error, Result};
use crate::real::Real;

use super::ParamBlock;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    /// One update of `params` in place. `blocks` names parameter ranges for
    /// error reporting; a gradient entry outside every block is reported by
    /// index.
    pub fn step(&mut self, params: &mut [T], grads: &[T], blocks: &[ParamBlock]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state sized {} got params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = blocks
                .iter()
                .find(|b| (b.offset..b.offset + b.len()).contains(&i))
                .map(|b| b.name.clone())
                .unwrap_or_else(|| format!("parameter {i}"));
            return Err(Error::Training {
                iter: self.step as usize,
                msg: format!("non-finite gradient in {name}"),
            });
        }
        self.step += 1;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_normalized_gradient() {
        let mut st = AdamState::<f64>::new(1, 0.01);
        let mut p = [1.0];
        st.step(&mut p, &[0.3], &[]).unwrap();
        let expect = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut st = AdamState::<f64>::new(2, 0.1);
        let mut p = [1.0, -1.0];
        st.step(&mut p, &[1.0, 2.0], &[]).unwrap();
        let after_first = p;
        let (m1, _) = st.moments();
        let m1 = m1.to_vec();
        st.step(&mut p, &[0.0, 0.0], &[]).unwrap();
        let (m2, _) = st.moments();
        assert!(m2[0] < m1[0] && m2[1] < m1[1]);
        // params still move on momentum; a fresh state with zero grad does not
        let mut fresh = AdamState::<f64>::new(2, 0.1);
        let mut q = after_first;
        fresh.step(&mut q, &[0.0, 0.0], &[]).unwrap();
        assert_eq!(q, after_first);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let blocks = vec![
            ParamBlock { name: "conv0.weight".into(), offset: 0, shape: [2, 1, 1] },
            ParamBlock { name: "conv0.bias".into(), offset: 2, shape: [1, 1, 1] },
        ];
        let mut st = AdamState::<f32>::new(3, 0.1);
        let mut p = [0.0f32; 3];
        let err = st.step(&mut p, &[0.0, 0.0, f32::NAN], &blocks).unwrap_err();
        assert!(err.to_string().contains("conv0.bias"), "{err}");
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut st = AdamState::<f32>::new(3, 0.05);
            let mut p = [0.5f32, -0.2, 0.1];
            for t in 0..20 {
                let g: Vec<f32> = p.iter().map(|x| 2.0 * x + (t as f32) * 0.01).collect();
                st.step(&mut p, &g, &[]).unwrap();
            }
            p
        };
        assert_eq!(run().map(f32::to_bits), run().map(f32::to_bits));
    }
}
