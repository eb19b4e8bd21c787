//! 3x3 / stride 1 / pad 1 convolution and 2x2 max pooling on single
//! channel-major images.

use super::{s, Scalar};

/// Valid output-column range for kernel column `kx` (input column `ox + kx - 1`).
#[inline]
fn cols(kx: usize, w: usize) -> (usize, usize) {
    (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w })
}

/// `out[cout, h, w] += conv(x[cin, h, w], weight[cout, cin, 3, 3])`.
pub(crate) fn conv_forward<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[S],
    cout: usize,
    out: &mut [S],
) {
    let plane = h * w;
    for oc in 0..cout {
        let o = &mut out[oc * plane..(oc + 1) * plane];
        for ic in 0..cin {
            let xin = &x[ic * plane..(ic + 1) * plane];
            let k = &weight[(oc * cin + ic) * 9..(oc * cin + ic) * 9 + 9];
            for ky in 0..3 {
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let row_in = &xin[(iy - 1) * w..iy * w];
                    let row_out = &mut o[oy * w..(oy + 1) * w];
                    for kx in 0..3 {
                        let wv = k[ky * 3 + kx];
                        let (a, b) = cols(kx, w);
                        let src = &row_in[a + kx - 1..b + kx - 1];
                        for (d, &v) in row_out[a..b].iter_mut().zip(src) {
                            *d = *d + wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// `dweight += correlate(dz, x)`.
pub(crate) fn conv_backward_weight<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    dz: &[S],
    cout: usize,
    dweight: &mut [S],
) {
    let plane = h * w;
    for oc in 0..cout {
        let g = &dz[oc * plane..(oc + 1) * plane];
        for ic in 0..cin {
            let xin = &x[ic * plane..(ic + 1) * plane];
            let k = &mut dweight[(oc * cin + ic) * 9..(oc * cin + ic) * 9 + 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (a, b) = cols(kx, w);
                    let mut acc = 0.0f64;
                    for oy in 0..h {
                        let iy = oy + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let row_in = &xin[(iy - 1) * w + a + kx - 1..(iy - 1) * w + b + kx - 1];
                        let row_g = &g[oy * w + a..oy * w + b];
                        let mut row = S::zero();
                        for (&gv, &xv) in row_g.iter().zip(row_in) {
                            row = row + gv * xv;
                        }
                        acc += row.to_f64().unwrap_or(f64::NAN);
                    }
                    k[ky * 3 + kx] = k[ky * 3 + kx] + s::<S>(acc);
                }
            }
        }
    }
}

/// `dx += conv_transpose(dz, weight)`.
pub(crate) fn conv_backward_input<S: Scalar>(
    dz: &[S],
    cout: usize,
    h: usize,
    w: usize,
    weight: &[S],
    cin: usize,
    dx: &mut [S],
) {
    let plane = h * w;
    for oc in 0..cout {
        let g = &dz[oc * plane..(oc + 1) * plane];
        for ic in 0..cin {
            let d = &mut dx[ic * plane..(ic + 1) * plane];
            let k = &weight[(oc * cin + ic) * 9..(oc * cin + ic) * 9 + 9];
            for ky in 0..3 {
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let row_g = &g[oy * w..(oy + 1) * w];
                    let row_d = &mut d[(iy - 1) * w..iy * w];
                    for kx in 0..3 {
                        let wv = k[ky * 3 + kx];
                        let (a, b) = cols(kx, w);
                        let dst = &mut row_d[a + kx - 1..b + kx - 1];
                        for (dv, &gv) in dst.iter_mut().zip(&row_g[a..b]) {
                            *dv = *dv + wv * gv;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling (floor on odd sizes). Returns pooled values and the
/// in-plane index of each maximum; the first maximum wins ties.
pub(crate) fn maxpool<S: Scalar>(
    y: &[S],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [S],
    argmax: &mut [u32],
) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        let plane = &y[ch * h * w..(ch + 1) * h * w];
        for py in 0..ho {
            for px in 0..wo {
                let mut best = 2 * py * w + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * py + dy) * w + 2 * px + dx;
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                let o = ch * ho * wo + py * wo + px;
                out[o] = plane[best];
                argmax[o] = best as u32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of zero-padded cross-correlation.
    fn naive(x: &[f64], cin: usize, h: usize, w: usize, k: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for oc in 0..cout {
            for oy in 0..h as i64 {
                for ox in 0..w as i64 {
                    let mut acc = 0.0;
                    for ic in 0..cin {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += k[((oc * cin + ic) * 9) + (ky * 3 + kx) as usize]
                                    * x[ic * h * w + (iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[oc * h * w + oy as usize * w + ox as usize] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let z = (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt;
                ((z >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn forward_matches_naive() {
        let (cin, cout, h, w) = (3, 4, 5, 7);
        let x = pseudo(cin * h * w, 1);
        let k = pseudo(cout * cin * 9, 2);
        let mut out = vec![0.0; cout * h * w];
        conv_forward(&x, cin, h, w, &k, cout, &mut out);
        let want = naive(&x, cin, h, w, &k, cout);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <conv(x, k), g> == <x, conv_T(g, k)> == <k, corr(g, x)>
        let (cin, cout, h, w) = (2, 3, 4, 6);
        let x = pseudo(cin * h * w, 3);
        let k = pseudo(cout * cin * 9, 4);
        let g = pseudo(cout * h * w, 5);
        let y = naive(&x, cin, h, w, &k, cout);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        conv_backward_input(&g, cout, h, w, &k, cin, &mut dx);
        let mid: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let mut dk = vec![0.0; k.len()];
        conv_backward_weight(&x, cin, h, w, &g, cout, &mut dk);
        let rhs: f64 = dk.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((lhs - mid).abs() < 1e-12);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_odd_sizes() {
        let y: Vec<f64> = (0..15).map(|i| i as f64).collect(); // 1 x 3 x 5
        let mut out = vec![0.0; 2];
        let mut idx = vec![0; 2];
        maxpool(&y, 1, 3, 5, &mut out, &mut idx);
        assert_eq!(out, vec![6.0, 8.0]);
        assert_eq!(idx, vec![6, 8]);
    }
}
