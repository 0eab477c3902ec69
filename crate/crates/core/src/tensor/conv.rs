//! Periodic (circular padding) 2-D convolution via im2col + gemm.

use rayon::prelude::*;

use super::{gemm, Real};

/// Fill `col` (`cin*k*k` rows by `h*w` columns) with circularly shifted input.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let oy = dy as isize - r;
                let ox = dx as isize - r;
                for i in 0..h {
                    let si = (i as isize + oy).rem_euclid(h as isize) as usize;
                    let src = &plane[si * w..(si + 1) * w];
                    let d = &mut dst[i * w..(i + 1) * w];
                    let s = ox.rem_euclid(w as isize) as usize;
                    // d[j] = src[(j + s) % w]
                    d[..w - s].copy_from_slice(&src[s..]);
                    d[w - s..].copy_from_slice(&src[..s]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into `dx`.
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx_out[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let src_col = &col[row * hw..(row + 1) * hw];
                let oy = dy as isize - r;
                let ox = dx as isize - r;
                let s = ox.rem_euclid(w as isize) as usize;
                for i in 0..h {
                    let si = (i as isize + oy).rem_euclid(h as isize) as usize;
                    let dst = &mut plane[si * w..(si + 1) * w];
                    let c_row = &src_col[i * w..(i + 1) * w];
                    for j in 0..w {
                        let jj = if j + s >= w { j + s - w } else { j + s };
                        dst[jj] += c_row[j];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvShape {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// `y[b] = W * x[b] + bias`, with `W` shaped `[cout, cin, k, k]`.
pub(crate) fn forward<T: Real>(s: ConvShape, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = s.hw();
    let mut out = vec![T::zero(); s.batch * s.cout * hw];
    let in_per = s.cin * hw;
    out.par_chunks_mut(s.cout * hw).enumerate().for_each(|(b, o)| {
        let xb = &x[b * in_per..(b + 1) * in_per];
        if let Some(bias) = bias {
            for (c, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bias[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if s.k == 1 {
            gemm(s.cout, s.cin, hw, wt, false, xb, false, o, beta);
        } else {
            let mut col = vec![T::zero(); s.ckk() * hw];
            im2col(xb, s.cin, s.h, s.w, s.k, &mut col);
            gemm(s.cout, s.ckk(), hw, wt, false, &col, false, o, beta);
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    s: ConvShape,
    x: &[T],
    wt: &[T],
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let hw = s.hw();
    let in_per = s.cin * hw;
    let out_per = s.cout * hw;
    let wlen = s.cout * s.ckk();
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<f64>)> = (0..s.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_per..(b + 1) * in_per];
            let gb = &dy[b * out_per..(b + 1) * out_per];
            let mut dw = vec![T::zero(); wlen];
            let mut dxb = if need_dx { vec![T::zero(); in_per] } else { Vec::new() };
            if s.k == 1 {
                gemm(s.cout, hw, s.cin, gb, false, xb, true, &mut dw, T::zero());
                if need_dx {
                    gemm(s.cin, s.cout, hw, wt, true, gb, false, &mut dxb, T::zero());
                }
            } else {
                let mut col = vec![T::zero(); s.ckk() * hw];
                im2col(xb, s.cin, s.h, s.w, s.k, &mut col);
                gemm(s.cout, hw, s.ckk(), gb, false, &col, true, &mut dw, T::zero());
                if need_dx {
                    gemm(s.ckk(), s.cout, hw, wt, true, gb, false, &mut col, T::zero());
                    col2im(&col, s.cin, s.h, s.w, s.k, &mut dxb);
                }
            }
            let db: Vec<f64> = gb
                .chunks(hw)
                .map(|c| c.iter().map(|v| v.as_f64()).sum())
                .collect();
            (dxb, dw, db)
        })
        .collect();

    // Ordered reduction keeps results independent of the thread count.
    let mut dw = vec![T::zero(); wlen];
    let mut db = vec![0.0f64; s.cout];
    let mut dx = if need_dx { Some(Vec::with_capacity(s.batch * in_per)) } else { None };
    for (dxb, dwb, dbb) in per_sample {
        for (a, b) in dw.iter_mut().zip(&dwb) {
            *a += *b;
        }
        for (a, b) in db.iter_mut().zip(&dbb) {
            *a += *b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&dxb);
        }
    }
    ConvGrads {
        dx,
        dw,
        db: db.into_iter().map(T::from_f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(s: ConvShape, x: &[f64], w: &[f64]) -> Vec<f64> {
        let r = (s.k / 2) as isize;
        let mut y = vec![0.0; s.batch * s.cout * s.h * s.w];
        for b in 0..s.batch {
            for o in 0..s.cout {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let mut acc = 0.0;
                        for c in 0..s.cin {
                            for dy in 0..s.k {
                                for dx in 0..s.k {
                                    let ii = (i as isize + dy as isize - r).rem_euclid(s.h as isize) as usize;
                                    let jj = (j as isize + dx as isize - r).rem_euclid(s.w as isize) as usize;
                                    acc += w[((o * s.cin + c) * s.k + dy) * s.k + dx]
                                        * x[((b * s.cin + c) * s.h + ii) * s.w + jj];
                                }
                            }
                        }
                        y[((b * s.cout + o) * s.h + i) * s.w + j] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_loop() {
        for k in [1, 3, 5] {
            let s = ConvShape { batch: 2, cin: 3, cout: 2, h: 6, w: 8, k };
            let x: Vec<f64> = (0..s.batch * s.cin * 48).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..s.cout * s.ckk()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let y = forward(s, &x, &w, None);
            assert_eq!(y, naive(s, &x, &w));
        }
    }

    #[test]
    fn col2im_is_adjoint() {
        let (cin, h, w, k) = (2, 5, 4, 3);
        let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..cin * k * k * h * w).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, cin, h, w, k, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, cin, h, w, k, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
