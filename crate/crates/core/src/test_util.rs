//! Plain-loop oracles shared by unit tests.

use crate::autodiff::LinearLayer;

/// `y[i,o] = b[o] + Σ_j W[o,j]·x[i,j]` by explicit loops.
pub fn linear_ref(layer: &LinearLayer<f64>, x: &[f64], rows: usize) -> Vec<f64> {
    let (out, inp) = (layer.out_features(), layer.in_features());
    let mut y = vec![0.0; rows * out];
    for i in 0..rows {
        for o in 0..out {
            let mut acc = layer.bias.as_ref().map_or(0.0, |b| b.data()[o]);
            for j in 0..inp {
                acc += layer.weight.at2(o, j) * x[i * inp + j];
            }
            y[i * out + o] = acc;
        }
    }
    y
}

pub fn concat_ref(parts: &[(&[f64], usize)], rows: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..rows {
        for (p, w) in parts {
            out.extend_from_slice(&p[r * w..(r + 1) * w]);
        }
    }
    out
}

pub fn add_ref(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Singular values via nalgebra, descending.
pub fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}
