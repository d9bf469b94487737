//! Array-level kernels backing the tape ops.

use ndarray::{ArrayD, Ix2, Ix3};

use super::Scalar;

pub(crate) fn add_values<E: Scalar>(a: &ArrayD<E>, b: &ArrayD<E>) -> ArrayD<E> {
    a + b
}

pub(crate) fn matmul_values<E: Scalar>(a: &ArrayD<E>, b: &ArrayD<E>) -> ArrayD<E> {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
    let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
    assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims");
    a2.dot(&b2).into_dyn()
}

pub(crate) fn transpose_value<E: Scalar>(a: &ArrayD<E>) -> ArrayD<E> {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("transpose needs 2-d");
    let mut out = ndarray::Array2::<E>::zeros((a2.ncols(), a2.nrows()));
    for (i, row) in a2.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[j, i]] = v;
        }
    }
    out.into_dyn()
}

/// Sums over axes so the result has `shape`. `shape` must be reachable from
/// `a.shape()` by the usual broadcast rules (missing leading axes or size-1).
pub(crate) fn sum_to_values<E: Scalar>(a: &ArrayD<E>, shape: &[usize]) -> ArrayD<E> {
    let mut cur = a.clone();
    // Collapse extra leading axes first.
    while cur.ndim() > shape.len() {
        cur = cur.sum_axis(ndarray::Axis(0));
    }
    assert_eq!(cur.ndim(), shape.len(), "sum_to rank mismatch");
    for ax in 0..shape.len() {
        if cur.shape()[ax] != shape[ax] {
            assert_eq!(shape[ax], 1, "sum_to target must be 1 on reduced axes");
            let summed = cur.sum_axis(ndarray::Axis(ax));
            cur = summed.insert_axis(ndarray::Axis(ax));
        }
    }
    cur
}

/// im2col: `[C,H,W] -> [C*k*k, Ho*Wo]` with stride 1 and zero padding.
pub fn unfold_arr<E: Scalar>(x: &ArrayD<E>, k: usize, pad: usize) -> ArrayD<E> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("unfold needs [C,H,W]");
    let (c, h, w) = x3.dim();
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut out = ndarray::Array2::<E>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = ci * k * k + dy * k + dx;
                let mut orow = out.row_mut(row);
                for oy in 0..ho {
                    let iy = oy + dy;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox + dx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        orow[oy * wo + ox] = x3[[ci, iy, ix - pad]];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// col2im, the exact adjoint of [`unfold_arr`] for an input of spatial size `hw`.
pub fn fold_arr<E: Scalar>(cols: &ArrayD<E>, k: usize, pad: usize, hw: (usize, usize)) -> ArrayD<E> {
    let c2 = cols.view().into_dimensionality::<Ix2>().expect("fold needs 2-d");
    let (h, w) = hw;
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let rows = c2.nrows();
    assert_eq!(c2.ncols(), ho * wo, "fold column count");
    assert_eq!(rows % (k * k), 0, "fold row count");
    let c = rows / (k * k);
    let mut out = ndarray::Array3::<E>::zeros((c, h, w));
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = c2.row(ci * k * k + dy * k + dx);
                for oy in 0..ho {
                    let iy = oy + dy;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox + dx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        out[[ci, iy, ix - pad]] = out[[ci, iy, ix - pad]] + row[oy * wo + ox];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// 2x2 mean pooling over the spatial axes of `[C,H,W]`.
pub fn avg_pool2_arr<E: Scalar>(x: &ArrayD<E>) -> ArrayD<E> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("avg_pool2 needs [C,H,W]");
    let (c, h, w) = x3.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let quarter = E::from_f64(0.25);
    let mut out = ndarray::Array3::<E>::zeros((c, h / 2, w / 2));
    for ci in 0..c {
        for y in 0..h / 2 {
            for x_ in 0..w / 2 {
                let s = x3[[ci, 2 * y, 2 * x_]]
                    + x3[[ci, 2 * y, 2 * x_ + 1]]
                    + x3[[ci, 2 * y + 1, 2 * x_]]
                    + x3[[ci, 2 * y + 1, 2 * x_ + 1]];
                out[[ci, y, x_]] = s * quarter;
            }
        }
    }
    out.into_dyn()
}

/// Adjoint of [`avg_pool2_arr`]: each coarse value spread to its 2x2 block / 4.
pub(crate) fn up_spread2_arr<E: Scalar>(x: &ArrayD<E>) -> ArrayD<E> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("up_spread2 needs [C,H,W]");
    let (c, h, w) = x3.dim();
    let quarter = E::from_f64(0.25);
    let mut out = ndarray::Array3::<E>::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let v = x3[[ci, y, x_]] * quarter;
                out[[ci, 2 * y, 2 * x_]] = v;
                out[[ci, 2 * y, 2 * x_ + 1]] = v;
                out[[ci, 2 * y + 1, 2 * x_]] = v;
                out[[ci, 2 * y + 1, 2 * x_ + 1]] = v;
            }
        }
    }
    out.into_dyn()
}

// Factor-2 bilinear interpolation with half-pixel centers: output index I
// samples input position I/2 - 1/4, clamped at the edges. Source taps and
// weights along one axis.
fn up2_taps(i_out: usize, n_in: usize) -> [(usize, f64); 2] {
    if i_out % 2 == 0 {
        let i = i_out / 2;
        let lo = i.saturating_sub(1);
        if i == 0 {
            [(0, 0.25), (0, 0.75)]
        } else {
            [(lo, 0.25), (i, 0.75)]
        }
    } else {
        let i = i_out / 2;
        let hi = (i + 1).min(n_in - 1);
        [(i, 0.75), (hi, 0.25)]
    }
}

pub fn bilinear_up2_arr<E: Scalar>(x: &ArrayD<E>) -> ArrayD<E> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("bilinear_up2 needs [C,H,W]");
    let (c, h, w) = x3.dim();
    let mut out = ndarray::Array3::<E>::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for oy in 0..h * 2 {
            let ty = up2_taps(oy, h);
            for ox in 0..w * 2 {
                let tx = up2_taps(ox, w);
                let mut acc = E::zero();
                for (iy, wy) in ty {
                    for (ix, wx) in tx {
                        acc = acc + x3[[ci, iy, ix]] * E::from_f64(wy * wx);
                    }
                }
                out[[ci, oy, ox]] = acc;
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn bilinear_up2t_arr<E: Scalar>(g: &ArrayD<E>) -> ArrayD<E> {
    let g3 = g.view().into_dimensionality::<Ix3>().expect("bilinear_up2t needs [C,H,W]");
    let (c, h2, w2) = g3.dim();
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "bilinear_up2t needs even dims");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = ndarray::Array3::<E>::zeros((c, h, w));
    for ci in 0..c {
        for oy in 0..h2 {
            let ty = up2_taps(oy, h);
            for ox in 0..w2 {
                let tx = up2_taps(ox, w);
                let gv = g3[[ci, oy, ox]];
                for (iy, wy) in ty {
                    for (ix, wx) in tx {
                        out[[ci, iy, ix]] = out[[ci, iy, ix]] + gv * E::from_f64(wy * wx);
                    }
                }
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn sigmoid_e<E: Scalar>(x: E) -> E {
    let one = E::one();
    if x >= E::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub(crate) fn softplus_e<E: Scalar>(x: E) -> E {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    let z = if x > E::zero() { x } else { E::zero() };
    z + (-(x.abs())).exp().ln_1p()
}

#[allow(dead_code)]
pub(crate) fn assert_finite<E: Scalar>(a: &ArrayD<E>, what: &str) {
    assert!(a.iter().all(|v| v.is_finite()), "non-finite values in {what}");
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn inner(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    // <A x, y> == <x, A^T y> for every linear op and its declared adjoint.
    #[test]
    fn adjoint_pairs_agree() {
        let x = randn(&[3, 8, 8], 1);

        let y = randn(&[3 * 9, 64], 2);
        assert!((inner(&unfold_arr(&x, 3, 1), &y) - inner(&x, &fold_arr(&y, 3, 1, (8, 8)))).abs() < 1e-10);

        let y = randn(&[2 * 25, 36], 3);
        assert!((inner(&unfold_arr(&randn(&[2, 8, 8], 4), 5, 1), &y)
            - inner(&randn(&[2, 8, 8], 4), &fold_arr(&y, 5, 1, (8, 8))))
        .abs()
            < 1e-10);

        let y = randn(&[3, 4, 4], 5);
        assert!((inner(&avg_pool2_arr(&x), &y) - inner(&x, &up_spread2_arr(&y))).abs() < 1e-10);

        let y = randn(&[3, 16, 16], 6);
        assert!((inner(&bilinear_up2_arr(&x), &y) - inner(&x, &bilinear_up2t_arr(&y))).abs() < 1e-10);
    }

    #[test]
    fn bilinear_up2_preserves_constant() {
        let x = ArrayD::from_elem(IxDyn(&[1, 4, 4]), 3.5f64);
        let u = bilinear_up2_arr(&x);
        assert!(u.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn unfold_matches_direct_conv() {
        // conv via im2col == direct nested-loop conv
        let x = randn(&[2, 6, 6], 7);
        let w = randn(&[3, 2, 3, 3], 8);
        let cols = unfold_arr(&x, 3, 1);
        let wmat = w.to_shape(IxDyn(&[3, 18])).unwrap().to_owned();
        let y = matmul_values(&wmat, &cols);
        let y = y.to_shape(IxDyn(&[3, 6, 6])).unwrap().to_owned();

        for co in 0..3 {
            for oy in 0..6i64 {
                for ox in 0..6i64 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for dy in -1..=1i64 {
                            for dx in -1..=1i64 {
                                let iy = oy + dy;
                                let ix = ox + dx;
                                if iy < 0 || iy >= 6 || ix < 0 || ix >= 6 {
                                    continue;
                                }
                                acc += w[[co, ci, (dy + 1) as usize, (dx + 1) as usize]]
                                    * x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                    assert!((y[[co, oy as usize, ox as usize]] - acc).abs() < 1e-10);
                }
            }
        }
    }
}
