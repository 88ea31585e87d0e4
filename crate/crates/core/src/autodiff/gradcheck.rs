use super::graph::{Graph, NodeId};
use super::AutodiffError;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|numeric - analytic| / max(1, |analytic|)`.
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a relu kink.
    pub excluded: usize,
}

/// Checks every coordinate of `leaf` against central differences of the
/// graph's designated loss.
pub fn finite_difference_check(
    graph: &mut Graph<f64>,
    leaf: NodeId,
    epsilon: f64,
) -> Result<GradCheckReport, AutodiffError> {
    let n = graph.value(leaf)?.len();
    let coords: Vec<usize> = (0..n).collect();
    finite_difference_check_coords(graph, leaf, epsilon, &coords)
}

/// Like [`finite_difference_check`], restricted to the listed coordinates.
///
/// A coordinate is excluded when the relu activation pattern at `x ± ε`
/// differs from the one at `x`, since the difference quotient then spans a
/// kink. The graph is left evaluated at the original leaf value.
pub fn finite_difference_check_coords(
    graph: &mut Graph<f64>,
    leaf: NodeId,
    epsilon: f64,
    coords: &[usize],
) -> Result<GradCheckReport, AutodiffError> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(AutodiffError::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-6, 1e-4]"
        )));
    }
    if !graph.operands(leaf).is_empty() {
        return Err(AutodiffError::NotALeaf(leaf.index()));
    }
    graph.forward()?;
    let base_pattern = graph.relu_pattern()?;
    let original = graph.value(leaf)?.clone();
    let analytic = graph.backward()?.get_or_zeros(leaf, original.shape());

    let eval = |graph: &mut Graph<f64>, i: usize, delta: f64| -> Result<(f64, bool), AutodiffError> {
        let mut t = original.clone();
        t.data_mut()[i] += delta;
        graph.set_value(leaf, t)?;
        graph.forward()?;
        Ok((graph.loss_value()?, graph.relu_pattern()? == base_pattern))
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for &i in coords {
        if i >= original.len() {
            return Err(AutodiffError::InvalidArgument(format!("coordinate {i} out of range")));
        }
        let (plus, same_plus) = eval(graph, i, epsilon)?;
        let (minus, same_minus) = eval(graph, i, -epsilon)?;
        if !(same_plus && same_minus) {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let err = (numeric - a).abs() / a.abs().max(1.0);
        report.max_error = report.max_error.max(err);
        report.checked += 1;
    }
    graph.set_value(leaf, original)?;
    graph.forward()?;
    Ok(report)
}
