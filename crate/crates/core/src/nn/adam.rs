use super::param::{ParamKind, ParamSet};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Adam hyperparameters plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient, applied to convolution kernels only.
    pub l2: f64,
    pub t: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-5,
            t: 0,
        }
    }
}

impl AdamState {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) || !(self.lr > 0.0) || !(self.eps > 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::invalid(format!("bad Adam settings: {self:?}")));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// cleared afterwards. Convolution kernels first get `l2 * w` added to their
/// gradient.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, state: &mut AdamState) {
    state.t += 1;
    let b1 = T::lit(state.beta1);
    let b2 = T::lit(state.beta2);
    let one = T::one();
    let correct1 = T::lit(1.0 - state.beta1.powi(state.t as i32));
    let correct2 = T::lit(1.0 - state.beta2.powi(state.t as i32));
    let lr = T::lit(state.lr);
    let eps = T::lit(state.eps);
    let l2 = T::lit(state.l2);
    for block in params.blocks_mut() {
        let decay = block.spec.kind == ParamKind::ConvKernel && state.l2 > 0.0;
        for i in 0..block.value.len() {
            let w = block.value[i];
            let g = if decay { block.grad[i] + l2 * w } else { block.grad[i] };
            let m = b1 * block.m[i] + (one - b1) * g;
            let v = b2 * block.v[i] + (one - b2) * g * g;
            block.m[i] = m;
            block.v[i] = v;
            let m_hat = m / correct1;
            let v_hat = v / correct2;
            block.value[i] = w - lr * m_hat / (v_hat.sqrt() + eps);
        }
        block.grad.fill(T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::{ParamBlock, ParamSpec};

    fn scalar(kind: ParamKind, w: f64) -> ParamSet<f64> {
        ParamSet::new(vec![ParamBlock::new(
            ParamSpec {
                name: "w".into(),
                shape: vec![1],
                kind,
                fan_in: 1,
            },
            vec![w],
        )])
    }

    #[test]
    fn zero_gradient_without_l2_is_a_no_op() {
        let mut p = scalar(ParamKind::ConvKernel, 0.7);
        let mut s = AdamState {
            l2: 0.0,
            ..AdamState::default()
        };
        adam_step(&mut p, &mut s);
        assert_eq!(p.blocks()[0].value[0], 0.7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2, so w' = w - lr * g / (|g| + eps)
        let mut p = scalar(ParamKind::ConvKernel, 0.0);
        p.blocks_mut()[0].grad[0] = 1.0;
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s);
        let expected = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p.blocks()[0].value[0] - expected).abs() < 1e-15);
        assert_eq!(p.blocks()[0].grad[0], 0.0);
    }

    #[test]
    fn quadratic_bowl_decreases_monotonically() {
        let bowl = |lr: f64, steps: usize| {
            let mut p = scalar(ParamKind::Bias, 5.0);
            let mut s = AdamState {
                lr,
                ..AdamState::default()
            };
            let mut trace = vec![25.0];
            for _ in 0..steps {
                let w = p.blocks()[0].value[0];
                p.blocks_mut()[0].grad[0] = 2.0 * w;
                adam_step(&mut p, &mut s);
                trace.push(p.blocks()[0].value[0].powi(2));
            }
            trace
        };
        let slow = bowl(1e-4, 100);
        assert!(slow.windows(2).all(|w| w[1] < w[0]));
        // a large step size overshoots near the minimum but still converges
        let fast = bowl(0.1, 1000);
        assert!(fast[..40].windows(2).all(|w| w[1] < w[0]));
        assert!(*fast.last().unwrap() < 0.01);
    }

    #[test]
    fn l2_alone_shrinks_kernels_but_not_biases() {
        let mut p = scalar(ParamKind::ConvKernel, 0.5);
        let mut s = AdamState {
            lr: 1e-3,
            ..AdamState::default()
        };
        let mut norm = p.squared_norm();
        for _ in 0..20 {
            adam_step(&mut p, &mut s);
            assert!(p.squared_norm() < norm);
            norm = p.squared_norm();
        }
        let mut b = scalar(ParamKind::Bias, 0.5);
        adam_step(&mut b, &mut AdamState::default());
        assert_eq!(b.blocks()[0].value[0], 0.5);
    }
}
