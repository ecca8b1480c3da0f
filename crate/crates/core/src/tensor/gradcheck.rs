//! Central finite-difference gradient verification.
//!
//! The checker is deliberately independent of the backward pass: it only
//! calls the forward path, perturbing one input element at a time. Any
//! scalar-valued computation over a set of input tensors can be checked.

use super::{Tape, Tensor, TensorData, TensorError};

/// Result of one gradient check: the largest error over every element of
/// every input, where error is `|analytic − numeric| / max(|analytic|,
/// |numeric|, 1)`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_err: f64,
    /// (input index, element index) where the max was observed.
    pub worst: Option<(usize, usize)>,
}

/// Compares tape gradients of `build`'s scalar output against central
/// finite differences with step `h` at the given input point.
///
/// `build` must be deterministic (no dropout) for the comparison to make
/// sense.
pub fn check_gradients<F>(inputs: &[TensorData], h: f64, build: F) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>, TensorError>,
{
    // analytic pass
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let leaves: Vec<Tensor<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&tape, &leaves)?;
        tape.backward(loss)?;
        leaves
            .iter()
            .map(|l| {
                l.grad()
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; l.numel()])
            })
            .collect()
    };

    let eval = |point: &[TensorData]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let leaves: Vec<Tensor<'_>> = point.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        Ok(build(&tape, &leaves)?.scalar_value())
    };

    let mut point: Vec<TensorData> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_err: 0.0,
        worst: None,
    };
    for i in 0..point.len() {
        for e in 0..point[i].numel() {
            let orig = point[i].data()[e];
            point[i].data_mut()[e] = orig + h;
            let f_plus = eval(&point)?;
            point[i].data_mut()[e] = orig - h;
            let f_minus = eval(&point)?;
            point[i].data_mut()[e] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[i][e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > report.max_err {
                report.max_err = err;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}
