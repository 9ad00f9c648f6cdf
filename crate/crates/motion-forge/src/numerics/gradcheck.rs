//! Central finite-difference verification of analytic gradients.

/// d f / d x[i] by central differences for each index in `indices`.
pub fn finite_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut xs = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = xs[i];
            xs[i] = orig + step;
            let hi = f(&xs);
            xs[i] = orig - step;
            let lo = f(&xs);
            xs[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// Compares analytic and numeric derivatives at the given indices.
/// Accepts when |a − n| ≤ rtol·max(|a|,|n|) + atol for every index.
pub fn compare_gradients(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    rtol: f64,
    atol: f64,
) -> Result<(), String> {
    let numeric = finite_difference(f, x, indices, step);
    for (pos, &i) in indices.iter().enumerate() {
        let (a, n) = (analytic[i], numeric[pos]);
        let tol = rtol * a.abs().max(n.abs()) + atol;
        if (a - n).abs() > tol {
            return Err(format!(
                "gradient mismatch at index {i}: analytic {a:.9e} vs numeric {n:.9e} (tol {tol:.3e})"
            ));
        }
    }
    Ok(())
}

/// Every index when the input is small, else an evenly spread subset.
pub fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}
