use super::{DiffError, Graph, NodeId, ParamId, ParamStore};

/// Result of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// finite differences of step `eps`, over every element of every trainable
/// parameter (or a strided subset when `max_coords` is smaller).
pub fn grad_check<F>(
    f: F,
    store: &ParamStore,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, DiffError>,
{
    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        if let Some((node, op)) = g.first_non_finite() {
            return Err(DiffError::NonFinite { node: node.index(), op });
        }
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if let Some((node, op)) = g.first_non_finite() {
        return Err(DiffError::NonFinite { node: node.index(), op });
    }
    let grads = g.backward(loss, store)?;

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let stride = match max_coords {
        Some(m) if m > 0 && coords.len() > m => coords.len().div_ceil(m),
        _ => 1,
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        checked: 0,
    };
    for &(id, i) in coords.iter().step_by(stride) {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(id).data()[i];
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if report.worst_param.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = Some(store.name(id).to_string());
            report.worst_index = i;
        }
    }
    Ok(report)
}
