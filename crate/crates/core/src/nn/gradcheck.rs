//! Central finite-difference check of autodiff gradients.

use super::graph::{Graph, NodeId};
use super::params::ParameterSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the autodiff gradient of `loss_fn` with central differences for
/// every scalar of every trainable parameter. Frozen parameters are skipped.
///
/// The error per scalar is `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(params: &mut ParameterSet, loss_fn: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet, &mut Graph) -> Result<NodeId>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut graph = Graph::new();
    let loss = loss_fn(params, &mut graph)?;
    let grads = graph.backward(loss)?;
    drop(graph);

    let eval = |ps: &ParameterSet| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss_fn(ps, &mut g)?;
        g.value(l).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    for id in ids {
        let n = params.value(id).numel();
        let ad = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for (i, &g_ad) in ad.iter().enumerate() {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + epsilon;
            let up = eval(params);
            params.value_mut(id).data_mut()[i] = orig - epsilon;
            let down = eval(params);
            params.value_mut(id).data_mut()[i] = orig;
            let g_fd = (up? - down?) / (2.0 * epsilon);
            let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
