//! Bias-corrected Adam.

use crate::checkpoint::Entry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// `adam.t`, then `adam.m.<name>` / `adam.v.<name>` shaped like the parameter.
    pub fn to_entries(&self, names: &[String], params: &[&Tensor]) -> Vec<Entry> {
        let mut out = vec![Entry::scalar("adam.t", self.t as f64)];
        for ((name, p), (m, v)) in names.iter().zip(params).zip(self.m.iter().zip(&self.v)) {
            let dims = p.shape().0.to_vec();
            out.push(Entry::new(format!("adam.m.{name}"), dims.clone(), m.clone()));
            out.push(Entry::new(format!("adam.v.{name}"), dims, v.clone()));
        }
        out
    }

    pub fn from_entries(entries: &[Entry], names: &[String], params: &[&Tensor]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Validation(format!("checkpoint has no optimizer entry {name}")))
        };
        let t = find("adam.t")?.data[0];
        if !(t >= 0.0 && t.fract() == 0.0) {
            return Err(Error::Validation(format!("invalid optimizer step {t}")));
        }
        let mut state = AdamState { m: Vec::new(), v: Vec::new(), t: t as u64 };
        for (name, p) in names.iter().zip(params) {
            for (prefix, slot) in [("adam.m", &mut state.m), ("adam.v", &mut state.v)] {
                let e = find(&format!("{prefix}.{name}"))?;
                slot.push(e.to_tensor(p.shape())?.into_vec());
            }
        }
        Ok(state)
    }
}

/// One Adam update of every parameter:
///
/// ```text
/// m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// All gradients are checked before anything is modified.
pub fn adam_step(
    names: &[String],
    params: &[&Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() || params.len() != state.m.len() || names.len() != params.len() {
        return Err(Error::shape(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(Error::shape(format!(
                "adam_step: parameter {} is {} but its gradient is {}",
                names[i],
                p.shape(),
                g.shape()
            )));
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} at element {pos} of parameter {}",
                g.data()[pos],
                names[i]
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut out = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut theta = p.data().to_vec();
        for (((th, &gj), mj), vj) in theta.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *th -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        out.push(Tensor::new(p.shape(), theta).map_err(|_| {
            Error::Numerical(format!("update of parameter {} produced non-finite values", names[i]))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    /// Scalar Adam written out independently of the tensor code.
    fn reference_trajectory(theta0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
        let (mut theta, mut m, mut v) = (theta0, 0.0f64, 0.0f64);
        let mut out = Vec::new();
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            out.push(theta);
        }
        out
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = Tensor::full(Shape::new(2, 1, 1, 3), 0.7);
        let g = Tensor::zeros(p.shape());
        let mut st = AdamState::zeros_like(&[&p]);
        let out = adam_step(&names(1), &[&p], &[&g], &mut st, &AdamConfig::default()).unwrap();
        assert!(out[0].bit_eq(&p));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = scalar(0.0);
        let mut st = AdamState::zeros_like(&[&p]);
        let out = adam_step(&names(1), &[&p], &[&scalar(0.3)], &mut st, &AdamConfig::default()).unwrap();
        let expected = -1e-3 * 0.3 / (0.3 + 1e-8);
        assert!((out[0].data()[0] - expected).abs() < 1e-15);
        assert!((out[0].data()[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn ten_step_trajectory_matches_reference() {
        let grads = [0.3, -0.1, 0.25, 2.0, -1.5, 0.0, 0.01, -0.4, 0.9, 0.05];
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let expected = reference_trajectory(0.5, &grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        let mut p = scalar(0.5);
        let mut st = AdamState::zeros_like(&[&p]);
        for (g, want) in grads.iter().zip(expected) {
            p = adam_step(&names(1), &[&p], &[&scalar(*g)], &mut st, &cfg).unwrap().remove(0);
            assert!((p.data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_freezes_params_but_advances_moments() {
        let p = Tensor::full(Shape::new(1, 1, 1, 2), -0.25);
        let g = Tensor::full(p.shape(), 0.5);
        let mut st = AdamState::zeros_like(&[&p]);
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        let out = adam_step(&names(1), &[&p], &[&g], &mut st, &cfg).unwrap();
        assert!(out[0].bit_eq(&p));
        assert_eq!(st.t, 1);
        assert!(st.m[0].iter().all(|&m| m != 0.0) && st.v[0].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn rejects_bad_gradients() {
        let p = Tensor::zeros(Shape::new(1, 1, 1, 2));
        let mut st = AdamState::zeros_like(&[&p]);
        let short = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(matches!(
            adam_step(&names(1), &[&p], &[&short], &mut st, &AdamConfig::default()),
            Err(Error::Shape(_))
        ));
        // Gradients built from raw parts can still carry NaN.
        let nan = Tensor::from_parts(p.shape(), vec![0.0, f64::NAN]);
        match adam_step(&["enc1.conv1.weight".to_string()], &[&p], &[&nan], &mut st, &AdamConfig::default()) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("enc1.conv1.weight")),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { lr: -1.0, ..AdamConfig::default() }.validate().is_err());
    }
}
