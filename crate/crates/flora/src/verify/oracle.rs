//! Independent reference math for the verification suites.
//!
//! Everything in this module works on plain `f64` slices and deliberately
//! avoids the tape, the fused layers, and their cached weights, so it can
//! serve as the second route in every fused-vs-reference comparison.

/// Plain triple-loop matrix product, accumulating over the inner index in
/// ascending order. `a` is `m x k`, `b` is `k x n`, both row-major.
pub fn matmul_ref(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Element-wise sum of two equally sized buffers.
pub fn add_ref(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Block-tiled repeat-and-add: `dy` (`q x l`) is stacked `d/q` times
/// vertically and added to `y` (`d x l`).
pub fn repeat_add_ref(y: &[f64], d: usize, l: usize, dy: &[f64], q: usize) -> Vec<f64> {
    assert_eq!(y.len(), d * l);
    assert_eq!(dy.len(), q * l);
    assert_eq!(d % q, 0, "tile divisibility");
    let mut out = vec![0.0; d * l];
    for i in 0..d {
        for c in 0..l {
            out[i * l + c] = y[i * l + c] + dy[(i % q) * l + c];
        }
    }
    out
}

/// Unfused LoRA output `Z = WX + B(AX)` computed as four separate steps.
pub fn lora_ref(
    w: &[f64],
    d_o: usize,
    d_i: usize,
    a: &[f64],
    r: usize,
    b: &[f64],
    x: &[f64],
    l: usize,
) -> Vec<f64> {
    let wx = matmul_ref(w, d_o, d_i, x, l);
    let ax = matmul_ref(a, r, d_i, x, l);
    let bax = matmul_ref(b, d_o, r, &ax, l);
    add_ref(&wx, &bax)
}

/// Unfused FFA output: separate `WX`, `AX`, explicit tile of `AX`, then add.
pub fn ffa_ref(
    w: &[f64],
    d_o: usize,
    d_i: usize,
    a: &[f64],
    rank2: usize,
    x: &[f64],
    l: usize,
) -> Vec<f64> {
    let wx = matmul_ref(w, d_o, d_i, x, l);
    let ax = matmul_ref(a, rank2, d_i, x, l);
    repeat_add_ref(&wx, d_o, l, &ax, rank2)
}

/// Unfused fused-backward layer: `WX + B dx` via two products and an add.
pub fn fbl_ref(
    w: &[f64],
    d_o: usize,
    d_i: usize,
    b: &[f64],
    r: usize,
    x: &[f64],
    dx: &[f64],
    l: usize,
) -> Vec<f64> {
    let wx = matmul_ref(w, d_o, d_i, x, l);
    let bdx = matmul_ref(b, d_o, r, dx, l);
    add_ref(&wx, &bdx)
}

/// Unfused forward-backward block: the four separate products of
/// `[[W B],[A C]] [x; dx]`, combined per output partition. `c` may be
/// `None`, in which case the `C dx` term is zero.
#[allow(clippy::too_many_arguments)]
pub fn ffbl_ref(
    w: &[f64],
    d_o: usize,
    d_i: usize,
    a: &[f64],
    r: usize,
    b: &[f64],
    c: Option<&[f64]>,
    x: &[f64],
    dx: &[f64],
    l: usize,
) -> (Vec<f64>, Vec<f64>) {
    let wx = matmul_ref(w, d_o, d_i, x, l);
    let bdx = matmul_ref(b, d_o, r, dx, l);
    let ax = matmul_ref(a, r, d_i, x, l);
    let cdx = match c {
        Some(c) => matmul_ref(c, r, r, dx, l),
        None => vec![0.0; r * l],
    };
    (add_ref(&wx, &bdx), add_ref(&ax, &cdx))
}

/// Central finite differences of a scalar function at `point`.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe);
        probe[i] = point[i] - step;
        let down = f(&probe);
        probe[i] = point[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Normalized maximum relative error between two buffers:
/// `max_i |a_i - b_i| / max(||a||_inf, ||b||_inf, 1e-300)`.
///
/// Normalizing by the largest magnitude keeps near-zero entries from
/// blowing up comparisons where the overall scale is O(1).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "comparison length");
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_case() {
        // [[1,0],[0,1]] x [[2],[3]] = [[2],[3]]
        let out = matmul_ref(&[1.0, 0.0, 0.0, 1.0], 2, 2, &[2.0, 3.0], 1);
        assert_eq!(out, vec![2.0, 3.0]);
    }

    #[test]
    fn matmul_hand_sum() {
        // [[1,1]] x [[2],[3]] = [[5]]
        let out = matmul_ref(&[1.0, 1.0], 1, 2, &[2.0, 3.0], 1);
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn repeat_add_tiling_definition() {
        // y=[[1],[3],[5],[7]], dy=[[10],[20]] -> [[11],[23],[15],[27]]
        let out = repeat_add_ref(&[1.0, 3.0, 5.0, 7.0], 4, 1, &[10.0, 20.0], 2);
        assert_eq!(out, vec![11.0, 23.0, 15.0, 27.0]);
    }

    #[test]
    fn lora_hand_computation() {
        // W=I2, A=[[1,1]], B=[[1],[1]], x=[[2],[3]] -> [[7],[8]]
        let out = lora_ref(
            &[1.0, 0.0, 0.0, 1.0],
            2,
            2,
            &[1.0, 1.0],
            1,
            &[1.0, 1.0],
            &[2.0, 3.0],
            1,
        );
        assert_eq!(out, vec![7.0, 8.0]);
    }

    #[test]
    fn ffbl_hand_computation() {
        // W=I2, B=[[1],[1]], A=[[1,0]], C=[[2]], x=[[1],[2]], dx=[[3]]
        // -> y=[[4],[5]], dy=[[7]]
        let (y, dy) = ffbl_ref(
            &[1.0, 0.0, 0.0, 1.0],
            2,
            2,
            &[1.0, 0.0],
            1,
            &[1.0, 1.0],
            Some(&[2.0]),
            &[1.0, 2.0],
            &[3.0],
            1,
        );
        assert_eq!(y, vec![4.0, 5.0]);
        assert_eq!(dy, vec![7.0]);
    }

    #[test]
    fn finite_diff_on_quadratic() {
        // f(x, y) = x^2 + 2xy; df/dx = 2x + 2y, df/dy = 2x
        let f = |v: &[f64]| v[0] * v[0] + 2.0 * v[0] * v[1];
        let g = finite_diff_grad(f, &[3.0, 4.0], 1e-5);
        assert!((g[0] - 14.0).abs() < 1e-8);
        assert!((g[1] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_is_scale_normalized() {
        assert_eq!(max_rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e = max_rel_err(&[100.0, 0.0], &[100.0, 1e-8]);
        assert!(e > 0.0 && e < 1e-9);
    }
}
