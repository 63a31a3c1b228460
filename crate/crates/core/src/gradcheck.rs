//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;

/// Anything whose scalar loss can be rebuilt on a fresh graph.
pub trait Differentiable {
    /// Builds the loss, registering every trainable tensor with
    /// [`Graph::param`] in the order of [`Differentiable::params_mut`].
    fn loss(&self, g: &mut Graph) -> Result<NodeId>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Tensors larger than this are checked on a seeded random subsample.
    pub max_per_tensor: usize,
    pub seed: u64,
    /// Denominator floor of the relative error, so exact zeros compare cleanly.
    pub abs_floor: f64,
    /// Debug: run the analytic pass with a deliberately wrong GELU rule.
    pub corrupt_gelu_backward: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_per_tensor: 64,
            seed: 0,
            abs_floor: 1e-6,
            corrupt_gelu_backward: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss(target: &impl Differentiable) -> Result<f64> {
    let mut g = Graph::new();
    let loss = target.loss(&mut g)?;
    Ok(g.value(loss).item())
}

/// Compares backward gradients with central differences. Mismatches are
/// reported, never raised; errors only come from building the loss.
pub fn grad_check(target: &mut impl Differentiable, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    assert!(cfg.step > 0.0, "finite-difference step must be positive");
    let mut g = if cfg.corrupt_gelu_backward {
        Graph::with_corrupted_gelu_backward()
    } else {
        Graph::new()
    };
    let loss = target.loss(&mut g)?;
    let grads = g.backward(loss)?;
    drop(g);

    let names: Vec<String> = grads.iter().map(|(n, _)| n.to_string()).collect();
    let analytic = grads.into_tensors();
    let mut sampler = rng::rng_from(rng::named_seed(cfg.seed, "gradcheck"));
    let mut reports = Vec::with_capacity(analytic.len());

    for (i, (name, grad)) in names.into_iter().zip(&analytic).enumerate() {
        let numel = grad.numel();
        let picks: Vec<usize> = if numel <= cfg.max_per_tensor {
            (0..numel).collect()
        } else {
            let mut v = index::sample(&mut sampler, numel, cfg.max_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        for &j in &picks {
            let orig = target.params_mut()[i].data()[j];
            target.params_mut()[i].data_mut()[j] = orig + cfg.step;
            let plus = eval_loss(target)?;
            target.params_mut()[i].data_mut()[j] = orig - cfg.step;
            let minus = eval_loss(target)?;
            target.params_mut()[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(grad.data()[j], numeric, cfg.abs_floor));
        }
        reports.push(ParamReport {
            name,
            checked: picks.len(),
            max_rel_error: worst,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        params: reports,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic(Tensor);

    impl Differentiable for Quadratic {
        fn loss(&self, g: &mut Graph) -> Result<NodeId> {
            let t = g.param("theta", self.0.clone());
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    struct GeluSum(Tensor);

    impl Differentiable for GeluSum {
        fn loss(&self, g: &mut Graph) -> Result<NodeId> {
            let t = g.param("x", self.0.clone());
            let y = g.gelu(t);
            Ok(g.sum(y))
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn quadratic_gradient_is_two_theta() {
        let mut q = Quadratic(Tensor::new(vec![4], vec![0.5, -1.25, 2.0, 0.1]).unwrap());
        let cfg = GradCheckConfig {
            tolerance: 1e-8,
            ..Default::default()
        };
        let report = grad_check(&mut q, &cfg).unwrap();
        assert!(report.passed(), "{report:?}");
        let mut g = Graph::new();
        let l = q.loss(&mut g).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("theta").unwrap().data(), &[1.0, -2.5, 4.0, 0.2]);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let mut m = GeluSum(Tensor::new(vec![3], vec![0.3, -0.8, 1.7]).unwrap());
        assert!(grad_check(&mut m, &GradCheckConfig::default()).unwrap().passed());
        let cfg = GradCheckConfig {
            corrupt_gelu_backward: true,
            ..Default::default()
        };
        assert!(!grad_check(&mut m, &cfg).unwrap().passed());
    }

    #[test]
    fn large_tensors_are_subsampled() {
        let mut q = Quadratic(Tensor::from_fn(&[200], |i| i as f64 * 0.01));
        let report = grad_check(&mut q, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.params[0].checked, 64);
        assert!(report.passed());
    }
}
