//! Central finite-difference gradient checking.

use super::{DiffArray, Graph, NodeId};

#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the discrete structure fingerprint changed
    /// between the +eps and -eps evaluations (e.g. a depth-sort flip).
    pub skipped: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Checks the analytic gradient of a scalar-valued graph function against
/// central finite differences over every element of every input.
///
/// `f` must be deterministic across evaluations (seed anything random) and
/// returns the scalar loss node plus a fingerprint of any discrete structure
/// (0 when there is none). A coordinate is skipped when the fingerprint
/// differs between the two perturbed evaluations.
pub fn finite_difference_check_multi<F>(inputs: &[DiffArray], eps: f64, mut f: F) -> FdReport
where
    F: FnMut(&mut Graph, &[NodeId]) -> (NodeId, u64),
{
    assert!(eps > 0.0, "finite differences need eps > 0");
    let mut work: Vec<DiffArray> = inputs.to_vec();
    for w in &mut work {
        w.requires_grad = true;
    }

    // analytic pass
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = work.iter().map(|w| graph.input(w)).collect();
    let (loss, _) = f(&mut graph, &ids);
    assert_eq!(graph.numel(loss), 1, "gradient check needs a scalar loss");
    let grads = graph.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| vec![0.0; graph.numel(id)])
        })
        .collect();

    let mut eval = |work: &[DiffArray]| -> (f64, u64) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = work.iter().map(|w| g.input(w)).collect();
        let (loss, fp) = f(&mut g, &ids);
        (g.scalar_value(loss), fp)
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..work.len() {
        for j in 0..work[i].values.len() {
            let orig = work[i].values[j];
            work[i].values[j] = orig + eps;
            let (lp, fp_plus) = eval(&work);
            work[i].values[j] = orig - eps;
            let (lm, fp_minus) = eval(&work);
            work[i].values[j] = orig;
            if fp_plus != fp_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.checked += 1;
        }
    }
    report
}

/// Single-input convenience wrapper: returns the max relative error.
pub fn finite_difference_check<F>(f: F, x: &DiffArray, eps: f64) -> f64
where
    F: FnMut(&mut Graph, NodeId) -> NodeId,
{
    let mut f = f;
    finite_difference_check_multi(std::slice::from_ref(x), eps, |g, ids| (f(g, ids[0]), 0))
        .max_rel_err
}
