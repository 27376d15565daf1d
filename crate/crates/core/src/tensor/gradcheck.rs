//! Central finite differences, used to check analytic gradients.

use super::Tensor2D;

/// Numerical gradient of `f` with respect to each input tensor using the
/// central difference `(f(x + h) - f(x - h)) / 2h` per element.
pub fn finite_difference(
    inputs: &[Tensor2D],
    h: f64,
    f: impl Fn(&[Tensor2D]) -> f64,
) -> Vec<Tensor2D> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor2D::zeros(inputs[t].rows(), inputs[t].cols());
        for e in 0..inputs[t].len() {
            let orig = work[t].data()[e];
            work[t].data_mut()[e] = orig + h;
            let plus = f(&work);
            work[t].data_mut()[e] = orig - h;
            let minus = f(&work);
            work[t].data_mut()[e] = orig;
            g.data_mut()[e] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `||a - b||_2 / max(||a||_2, ||b||_2)`, or the absolute difference when
/// both are below `1e-12`.
pub fn relative_error(a: &Tensor2D, b: &Tensor2D) -> f64 {
    let norm = |t: &Tensor2D| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
