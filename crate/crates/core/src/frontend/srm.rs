//! Fixed high-pass residual kernels from steganalysis rich models.

use crate::tensor::{Float, Tensor};

/// 5×5 "KV" / SQUARE5x5 kernel, normalizer 12.
pub const SQUARE_5X5: [[f64; 5]; 5] = [
    [-1.0, 2.0, -2.0, 2.0, -1.0],
    [2.0, -6.0, 8.0, -6.0, 2.0],
    [-2.0, 8.0, -12.0, 8.0, -2.0],
    [2.0, -6.0, 8.0, -6.0, 2.0],
    [-1.0, 2.0, -2.0, 2.0, -1.0],
];

/// 3×3 second-order kernel embedded in 5×5, normalizer 4.
pub const SQUARE_3X3: [[f64; 5]; 5] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, -1.0, 2.0, -1.0, 0.0],
    [0.0, 2.0, -4.0, 2.0, 0.0],
    [0.0, -1.0, 2.0, -1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0],
];

/// Horizontal 1-D second-order kernel embedded in 5×5, normalizer 2.
pub const SECOND_ORDER_1D: [[f64; 5]; 5] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, -2.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0],
];

pub const KERNELS: [(&[[f64; 5]; 5], f64); 3] = [
    (&SQUARE_3X3, 4.0),
    (&SQUARE_5X5, 12.0),
    (&SECOND_ORDER_1D, 2.0),
];

/// Normalized kernel `k` as a flat 5×5 array.
pub fn normalized(k: usize) -> [f64; 25] {
    let (taps, norm) = KERNELS[k];
    let mut out = [0.0; 25];
    for (i, row) in taps.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[i * 5 + j] = v / norm;
        }
    }
    out
}

/// Weight tensor `3 × cin × 5 × 5`: output channel `k` applies kernel `k`
/// to every input channel and sums.
pub fn weights<T: Float>(cin: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(3 * cin * 25);
    for k in 0..3 {
        let taps = normalized(k);
        for _ in 0..cin {
            data.extend(taps.iter().map(|&v| T::of(v)));
        }
    }
    Tensor::new(&[3, cin, 5, 5], data).expect("static shape")
}
