//! Central finite-difference verification of analytic gradients.

use crate::graph::{Graph, NodeId};
use crate::params::{Bound, ParamStore};

/// Step used for central differences in `f64`.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward-pass gradients of `loss_fn` against central differences
/// for every parameter of `store`. At most `max_per_param` entries of each
/// tensor are probed (evenly strided) so larger layers stay affordable.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    loss_fn: F,
    tolerance: f64,
    max_per_param: usize,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &Bound) -> NodeId,
{
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let b = s.bind_frozen(&mut g);
        let loss = loss_fn(&mut g, &b);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = loss_fn(&mut g, &bound);
    let mut grads = g.backward(loss);
    let analytic = bound.grads(&mut grads);

    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let mut worst = 0.0f64;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[id.index()].data()[i], numeric));
            checked += 1;
        }
        params.push(ParamCheck {
            name: store.params()[id.index()].name.clone(),
            max_rel_error: worst,
            checked,
        });
    }
    GradCheckReport { params, tolerance }
}
