//! Fully-connected kernels. Weights are `[out × in]`, activations `[batch × features]`.

use matrixmultiply::dgemm;

/// `out[b, o] = Σ_i x[b, i] · w[o, i] + bias[o]`.
pub(crate) fn forward(x: &[f64], batch: usize, w: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_out = bias.len();
    let n_in = w.len() / n_out;
    debug_assert_eq!(x.len(), batch * n_in);
    debug_assert_eq!(out.len(), batch * n_out);
    if batch == 1 {
        // gemm packing dominates for a single row
        for ((o, row), b) in out.iter_mut().zip(w.chunks_exact(n_in)).zip(bias) {
            *o = crate::tensor::dot(row, x) + b;
        }
        return;
    }
    // SAFETY: slice lengths checked above; strides describe row-major
    // x[batch × in], wᵀ (via swapped strides) and out[batch × out].
    unsafe {
        dgemm(
            batch,
            n_in,
            n_out,
            1.0,
            x.as_ptr(),
            n_in as isize,
            1,
            w.as_ptr(),
            1,
            n_in as isize,
            0.0,
            out.as_mut_ptr(),
            n_out as isize,
            1,
        );
    }
    for row in out.chunks_exact_mut(n_out) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Parameter gradients of a dense layer: `dw = gᵀ x`, `db = Σ_b g[b, ·]`.
pub(crate) fn backward_params(
    x: &[f64],
    g: &[f64],
    batch: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let n_out = db.len();
    let n_in = dw.len() / n_out;
    debug_assert_eq!(x.len(), batch * n_in);
    debug_assert_eq!(g.len(), batch * n_out);
    if batch == 1 {
        for ((row, &gv), d) in dw.chunks_exact_mut(n_in).zip(g).zip(db.iter_mut()) {
            row.iter_mut().zip(x).for_each(|(r, v)| *r = gv * v);
            *d = gv;
        }
        return;
    }
    // SAFETY: lengths checked above; g is read transposed via strides.
    unsafe {
        dgemm(
            n_out,
            batch,
            n_in,
            1.0,
            g.as_ptr(),
            1,
            n_out as isize,
            x.as_ptr(),
            n_in as isize,
            1,
            0.0,
            dw.as_mut_ptr(),
            n_in as isize,
            1,
        );
    }
    db.iter_mut().for_each(|v| *v = 0.0);
    for row in g.chunks_exact(n_out) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Input gradient `dx = g w`.
pub(crate) fn backward_input(g: &[f64], batch: usize, w: &[f64], n_out: usize, dx: &mut [f64]) {
    let n_in = w.len() / n_out;
    debug_assert_eq!(g.len(), batch * n_out);
    debug_assert_eq!(dx.len(), batch * n_in);
    if batch == 1 {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (row, &gv) in w.chunks_exact(n_in).zip(g) {
            if gv != 0.0 {
                crate::tensor::axpy(gv, row, dx);
            }
        }
        return;
    }
    // SAFETY: lengths checked above.
    unsafe {
        dgemm(
            batch,
            n_out,
            n_in,
            1.0,
            g.as_ptr(),
            n_out as isize,
            1,
            w.as_ptr(),
            n_in as isize,
            1,
            0.0,
            dx.as_mut_ptr(),
            n_in as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(x: &[f64], b: usize, w: &[f64], bias: &[f64]) -> Vec<f64> {
        let o = bias.len();
        let i = w.len() / o;
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            for c in 0..o {
                let mut acc = bias[c];
                for k in 0..i {
                    acc += x[r * i + k] * w[c * i + k];
                }
                out[r * o + c] = acc;
            }
        }
        out
    }

    #[test]
    fn gemm_paths_match_loops() {
        for b in [1, 3] {
            check(b);
        }
    }

    fn check(b: usize) {
        let (i, o) = (5, 4);
        let x: Vec<f64> = (0..b * i).map(|v| (v as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..o * i).map(|v| (v as f64 * 0.11).cos()).collect();
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let mut out = vec![0.0; b * o];
        forward(&x, b, &w, &bias, &mut out);
        let want = naive_forward(&x, b, &w, &bias);
        for (a, e) in out.iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }

        let g: Vec<f64> = (0..b * o).map(|v| v as f64 - 5.0).collect();
        let mut dw = vec![0.0; o * i];
        let mut db = vec![0.0; o];
        backward_params(&x, &g, b, &mut dw, &mut db);
        for c in 0..o {
            let s: f64 = (0..b).map(|r| g[r * o + c]).sum();
            assert!((db[c] - s).abs() < 1e-12);
            for k in 0..i {
                let s: f64 = (0..b).map(|r| g[r * o + c] * x[r * i + k]).sum();
                assert!((dw[c * i + k] - s).abs() < 1e-12);
            }
        }
        let mut dx = vec![0.0; b * i];
        backward_input(&g, b, &w, o, &mut dx);
        for r in 0..b {
            for k in 0..i {
                let s: f64 = (0..o).map(|c| g[r * o + c] * w[c * i + k]).sum();
                assert!((dx[r * i + k] - s).abs() < 1e-12);
            }
        }
    }
}
