//! Small dense helpers over `ndarray`.

use ndarray::{Array2, ArrayView1, Axis};

pub type Matrix = Array2<f64>;

/// Scales `v` to unit length in place and returns the original norm.
/// A zero vector is left untouched.
pub fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn cosine_view(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    match a.as_slice() {
        Some(s) => cosine(s, b),
        None => cosine(&a.to_vec(), b),
    }
}

/// Max-subtracted softmax along `axis` (1 = across each row, 0 = down each column).
pub fn softmax(logits: &Matrix, axis: usize) -> Matrix {
    let mut out = logits.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    out
}

/// Backward pass of [`softmax`]: given probabilities `p` and upstream
/// gradient `g`, returns the gradient with respect to the logits.
pub fn softmax_backward(p: &Matrix, g: &Matrix, axis: usize) -> Matrix {
    let mut out = Matrix::zeros(p.raw_dim());
    for ((pl, gl), mut ol) in p
        .lanes(Axis(axis))
        .into_iter()
        .zip(g.lanes(Axis(axis)))
        .zip(out.lanes_mut(Axis(axis)))
    {
        let inner: f64 = pl.iter().zip(gl.iter()).map(|(a, b)| a * b).sum();
        for ((o, &pv), &gv) in ol.iter_mut().zip(pl.iter()).zip(gl.iter()) {
            *o = pv * (gv - inner);
        }
    }
    out
}
