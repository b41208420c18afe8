//! Tiny stub predictors and finite-difference helpers shared by the unit
//! tests and the acceptance suite. Not part of the production surface.

use ndarray::{Array4, ArrayD, IxDyn};

use crate::autodiff::{Grads, Graph, NodeId};
use crate::denoiser::DenoiseModel;
use crate::error::Result;
use crate::nn::ParamStore;

/// Two-parameter affine predictor: output = a * y_t + b.
#[derive(Debug, Clone)]
pub struct LinearStub {
    pub params: ParamStore,
    pub shape: (usize, usize, usize),
}

impl LinearStub {
    pub fn new(a: f64, b: f64, shape: (usize, usize, usize)) -> Self {
        let mut params = ParamStore::new();
        params.insert("a", ArrayD::from_elem(IxDyn(&[1]), a));
        params.insert("b", ArrayD::from_elem(IxDyn(&[1]), b));
        Self { params, shape }
    }

    pub fn with_params(params: ParamStore, shape: (usize, usize, usize)) -> Self {
        Self { params, shape }
    }
}

impl DenoiseModel for LinearStub {
    fn predict_into(
        &self,
        g: &mut Graph,
        y_t: NodeId,
        _t: &[f64],
        _context: &Array4<f64>,
        trainable: bool,
    ) -> Result<NodeId> {
        let a = if trainable {
            g.param("a", self.params.get("a")?.clone())
        } else {
            g.constant(self.params.get("a")?.clone())
        };
        let b = if trainable {
            g.param("b", self.params.get("b")?.clone())
        } else {
            g.constant(self.params.get("b")?.clone())
        };
        let m = g.mul_scalar_node(y_t, a);
        Ok(g.add_scalar_node(m, b))
    }

    fn target_shape(&self) -> (usize, usize, usize) {
        self.shape
    }
}

/// Predicts `on_match` when the input equals `match_input`, `otherwise`
/// for any other input. Parameter-free.
#[derive(Debug, Clone)]
pub struct SwitchStub {
    pub match_input: Array4<f64>,
    pub on_match: Array4<f64>,
    pub otherwise: Array4<f64>,
}

impl DenoiseModel for SwitchStub {
    fn predict_into(
        &self,
        g: &mut Graph,
        y_t: NodeId,
        _t: &[f64],
        _context: &Array4<f64>,
        _trainable: bool,
    ) -> Result<NodeId> {
        let matches = g.value(y_t).iter().zip(self.match_input.iter()).all(|(a, b)| a == b);
        let out = if matches { &self.on_match } else { &self.otherwise };
        Ok(g.constant(out.clone().into_dyn()))
    }

    fn target_shape(&self) -> (usize, usize, usize) {
        let d = self.match_input.dim();
        (d.1, d.2, d.3)
    }
}

/// Central finite-difference check of `eval` against analytic gradients.
/// Returns the largest relative error seen.
pub fn fd_check_params<F>(eval: F, params: &ParamStore, analytic: &Grads, step: f64) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let mut worst: f64 = 0.0;
    for (name, value) in params.iter() {
        for flat in 0..value.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] += step;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let an = analytic[name].as_slice().unwrap()[flat];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(((fd - an) / denom).abs());
        }
    }
    worst
}
