use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// L2 norm over every gradient buffer in the set.
pub fn global_grad_norm(params: &ParamSet) -> f64 {
    params
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescale all gradients so their global norm is at most `max_norm`.
/// Returns the factor applied (1.0 when under the threshold).
pub fn clip_gradients(params: &mut ParamSet, max_norm: f64) -> Result<f64> {
    let norm = global_grad_norm(params);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for (_, t) in params.iter_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(scale)
}

/// Heavy-ball momentum: `v = momentum * v + g`, `theta -= lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocities: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update over every parameter with a gradient buffer, then zero
    /// the gradients.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64, momentum: f64) {
        if self.velocities.len() < params.len() {
            self.velocities.resize(params.len(), Vec::new());
        }
        for (id, t) in params.iter_mut() {
            let (data, grad) = t.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            let v = &mut self.velocities[id.0];
            if v.is_empty() {
                v.resize(grad.len(), 0.0);
            }
            for ((x, g), vi) in data.iter_mut().zip(grad.iter_mut()).zip(v.iter_mut()) {
                *vi = momentum * *vi + *g;
                *x -= lr * *vi;
                *g = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn with_grad(g: Vec<f64>) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.insert("p", Tensor::zeros(&[g.len()]));
        ps.get_mut(id).grad_mut().unwrap().copy_from_slice(&g);
        ps
    }

    #[test]
    fn under_threshold_untouched() {
        let mut ps = with_grad(vec![1.5, 2.0]);
        assert_eq!(clip_gradients(&mut ps, 5.0).unwrap(), 1.0);
        assert_eq!(ps.by_name("p").unwrap().grad().unwrap(), &[1.5, 2.0]);
    }

    #[test]
    fn over_threshold_scaled() {
        let mut ps = with_grad(vec![6.0, 8.0]);
        assert_eq!(clip_gradients(&mut ps, 5.0).unwrap(), 0.5);
        assert!((global_grad_norm(&ps) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_is_untouched() {
        let mut ps = with_grad(vec![3.0, 4.0]);
        assert_eq!(clip_gradients(&mut ps, 5.0).unwrap(), 1.0);
        assert_eq!(ps.by_name("p").unwrap().grad().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let mut ps = with_grad(vec![f64::INFINITY]);
        assert!(matches!(
            clip_gradients(&mut ps, 5.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn vanilla_step() {
        let mut ps = with_grad(vec![1.0]);
        Sgd::new().step(&mut ps, 0.1, 0.0);
        let t = ps.by_name("p").unwrap();
        assert_eq!(t.data(), &[-0.1]);
        assert_eq!(t.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn momentum_recursion() {
        let (lr, mu, g) = (0.015, 0.9, 2.0);
        let mut ps = with_grad(vec![g]);
        let mut opt = Sgd::new();
        opt.step(&mut ps, lr, mu);
        ps.iter_mut()
            .for_each(|(_, t)| t.grad_mut().unwrap()[0] = g);
        opt.step(&mut ps, lr, mu);
        let expect = -lr * (g + (mu * g + g));
        assert!((ps.by_name("p").unwrap().data()[0] - expect).abs() < 1e-15);

        // With no gradient the velocity keeps moving the parameter.
        let before = ps.by_name("p").unwrap().data()[0];
        opt.step(&mut ps, lr, mu);
        let v = mu * (mu * g + g);
        assert!((ps.by_name("p").unwrap().data()[0] - (before - lr * v)).abs() < 1e-15);
    }
}
