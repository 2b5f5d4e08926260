//! Reference numerics, generic over the float width. `f64` instantiation
//! backs finite-difference oracles; `f32` instantiation mirrors the engine's
//! rounding (f32 storage, f64 reduction accumulators) for occlusion oracles.

#![allow(dead_code)]

use num_traits::Float;

/// Row-major matrix with plain-loop kernels.
#[derive(Debug, Clone)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Float + std::ops::AddAssign> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat {
            rows,
            cols,
            data: data.iter().map(|&v| T::from(v).unwrap()).collect(),
        }
    }

    pub fn row_slice(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }
}

pub fn matmul<T: Float + std::ops::AddAssign>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = T::zero();
            for k in 0..a.cols {
                acc += a.at(i, k) * b.at(k, j);
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    out
}

fn broadcast_at<T: Float>(m: &Mat<T>, i: usize, j: usize) -> T {
    m.data[(i % m.rows) * m.cols + (j % m.cols)]
}

pub fn bcast_binary<T: Float + std::ops::AddAssign>(
    a: &Mat<T>,
    b: &Mat<T>,
    f: impl Fn(T, T) -> T,
) -> Mat<T> {
    let rows = a.rows.max(b.rows);
    let cols = a.cols.max(b.cols);
    let mut out = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            out.data[i * cols + j] = f(broadcast_at(a, i, j), broadcast_at(b, i, j));
        }
    }
    out
}

pub fn add<T: Float + std::ops::AddAssign>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    bcast_binary(a, b, |x, y| x + y)
}

pub fn mul<T: Float + std::ops::AddAssign>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    bcast_binary(a, b, |x, y| x * y)
}

pub fn map<T: Float + std::ops::AddAssign>(a: &Mat<T>, f: impl Fn(T) -> T) -> Mat<T> {
    Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|&v| f(v)).collect(),
    }
}

pub fn tanh_m<T: Float + std::ops::AddAssign>(a: &Mat<T>) -> Mat<T> {
    map(a, |v| v.tanh())
}

pub fn sigmoid_m<T: Float + std::ops::AddAssign>(a: &Mat<T>) -> Mat<T> {
    map(a, |v| T::one() / (T::one() + (-v).exp()))
}

pub fn relu_m<T: Float + std::ops::AddAssign>(a: &Mat<T>) -> Mat<T> {
    map(a, |v| v.max(T::zero()))
}

pub fn log_m<T: Float + std::ops::AddAssign>(a: &Mat<T>) -> Mat<T> {
    let clamp = T::from(1e-12).unwrap();
    map(a, |v| v.max(clamp).ln())
}

pub fn concat<T: Float + std::ops::AddAssign>(axis: usize, parts: &[&Mat<T>]) -> Mat<T> {
    if axis == 0 {
        let cols = parts[0].cols;
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Mat { rows, cols, data }
    } else {
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows, rows);
            for i in 0..rows {
                for j in 0..p.cols {
                    out.data[i * cols + off + j] = p.at(i, j);
                }
            }
            off += p.cols;
        }
        out
    }
}

/// Softmax along `axis` with max-shift and f64 sum accumulation.
pub fn softmax<T: Float + std::ops::AddAssign>(axis: usize, a: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(a.rows, a.cols);
    let (slices, len) = if axis == 1 {
        (a.rows, a.cols)
    } else {
        (a.cols, a.rows)
    };
    let idx = |s: usize, i: usize| {
        if axis == 1 {
            s * a.cols + i
        } else {
            i * a.cols + s
        }
    };
    for s in 0..slices {
        let mut max = T::neg_infinity();
        for i in 0..len {
            max = max.max(a.data[idx(s, i)]);
        }
        let mut sum = 0.0f64;
        for i in 0..len {
            let e = (a.data[idx(s, i)] - max).exp();
            out.data[idx(s, i)] = e;
            sum += e.to_f64().unwrap();
        }
        for i in 0..len {
            let v = out.data[idx(s, i)].to_f64().unwrap() / sum;
            out.data[idx(s, i)] = T::from(v).unwrap();
        }
    }
    out
}

pub fn mean_all<T: Float + std::ops::AddAssign>(a: &Mat<T>) -> T {
    let sum: f64 = a.data.iter().map(|v| v.to_f64().unwrap()).sum();
    T::from(sum / (a.rows * a.cols) as f64).unwrap()
}

pub fn mean_axis<T: Float + std::ops::AddAssign>(axis: usize, a: &Mat<T>) -> Mat<T> {
    if axis == 0 {
        let mut out = Mat::zeros(1, a.cols);
        for j in 0..a.cols {
            let mut acc = 0.0f64;
            for i in 0..a.rows {
                acc += a.at(i, j).to_f64().unwrap();
            }
            out.data[j] = T::from(acc / a.rows as f64).unwrap();
        }
        out
    } else {
        let mut out = Mat::zeros(a.rows, 1);
        for i in 0..a.rows {
            let mut acc = 0.0f64;
            for j in 0..a.cols {
                acc += a.at(i, j).to_f64().unwrap();
            }
            out.data[i] = T::from(acc / a.cols as f64).unwrap();
        }
        out
    }
}

pub fn embedding<T: Float + std::ops::AddAssign>(table: &Mat<T>, ids: &[u32]) -> Mat<T> {
    let mut out = Mat::zeros(ids.len(), table.cols);
    for (r, &id) in ids.iter().enumerate() {
        for j in 0..table.cols {
            out.data[r * table.cols + j] = table.at(id as usize, j);
        }
    }
    out
}

/// Accumulate `a @ b` into `out` (row-major, ascending contraction index).
pub fn matmul_acc<T: Float + std::ops::AddAssign>(a: &Mat<T>, b: &Mat<T>, out: &mut [T]) {
    assert_eq!(a.cols, b.rows);
    for i in 0..a.rows {
        for j in 0..b.cols {
            for k in 0..a.cols {
                out[i * b.cols + j] += a.at(i, k) * b.at(k, j);
            }
        }
    }
}

/// Gate order i, f, g, o; state rows are h then c. The preactivation starts
/// from the bias and accumulates the two matmuls, matching the engine's
/// fused kernel order.
pub fn lstm_cell<T: Float + std::ops::AddAssign>(
    state: &Mat<T>,
    x: &Mat<T>,
    wx: &Mat<T>,
    wh: &Mat<T>,
    b: &Mat<T>,
) -> Mat<T> {
    let h = state.cols;
    let hv = Mat {
        rows: 1,
        cols: h,
        data: state.data[0..h].to_vec(),
    };
    let mut pre = b.data.clone();
    matmul_acc(x, wx, &mut pre);
    matmul_acc(&hv, wh, &mut pre);
    let sig = |v: T| T::one() / (T::one() + (-v).exp());
    let mut out = Mat::zeros(2, h);
    for j in 0..h {
        let i_g = sig(pre[j]);
        let f_g = sig(pre[h + j]);
        let g_g = pre[2 * h + j].tanh();
        let o_g = sig(pre[3 * h + j]);
        let c_next = f_g * state.data[h + j] + i_g * g_g;
        out.data[j] = o_g * c_next.tanh();
        out.data[h + j] = c_next;
    }
    out
}

pub fn masked_fill<T: Float + std::ops::AddAssign>(x: &Mat<T>, keep: &Mat<T>, fill: T) -> Mat<T> {
    let half = T::from(0.5).unwrap();
    bcast_binary(x, keep, |v, m| if m >= half { v } else { fill })
}

pub fn layer_norm<T: Float + std::ops::AddAssign>(
    x: &Mat<T>,
    gain: &Mat<T>,
    bias: &Mat<T>,
    eps: f64,
) -> Mat<T> {
    let d = x.cols;
    let mut out = Mat::zeros(x.rows, d);
    for i in 0..x.rows {
        let row = x.row_slice(i);
        let mean: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / d as f64;
        let var: f64 = row
            .iter()
            .map(|v| (v.to_f64().unwrap() - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            let xhat = T::from((row[j].to_f64().unwrap() - mean) * inv).unwrap();
            out.data[i * d + j] = xhat * gain.data[j] + bias.data[j];
        }
    }
    out
}
