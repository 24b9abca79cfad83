//! im2col convolution kernels. Cross-correlation, no kernel flip.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.padding == 0 && self.stride == 1
    }
}

/// Unfolds one sample `[C, H, W]` into `[C·kh·kw, H'·W']`.
fn im2col<T: Real>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *out = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[C·kh·kw, H'·W']` back onto `[C, H, W]`, summing overlaps.
fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeometry, x: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.out_pixels();
    let k = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.filters * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let cols_ref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let on = &mut out[n * g.filters * p..(n + 1) * g.filters * p];
        if let Some(b) = bias {
            for (f, chunk) in on.chunks_exact_mut(p).enumerate() {
                chunk.fill(b[f]);
            }
        }
        T::gemm(
            g.filters,
            k,
            p,
            T::one(),
            kernel,
            (k as isize, 1),
            cols_ref,
            (p as isize, 1),
            if bias.is_some() { T::one() } else { T::zero() },
            on,
            (p as isize, 1),
        );
    }
    out
}

/// Accumulates gradients for whichever of input / kernel / bias are requested.
pub(crate) fn backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut dx: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let p = g.out_pixels();
    let k = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if dx.is_some() && !g.is_pointwise() {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let gn = &grad_out[n * g.filters * p..(n + 1) * g.filters * p];
        if let Some(db) = dbias.as_deref_mut() {
            for (f, chunk) in gn.chunks_exact(p).enumerate() {
                let s: f64 = chunk.iter().map(|v| v.to_f64_lossy()).sum();
                db[f] += T::from_f64_lossy(s);
            }
        }
        if let Some(dk) = dkernel.as_deref_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let cols_ref: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dK[F, k] += dOut[F, p] · cols[k, p]^T
            T::gemm(
                g.filters,
                p,
                k,
                T::one(),
                gn,
                (p as isize, 1),
                cols_ref,
                (1, p as isize),
                T::one(),
                dk,
                (k as isize, 1),
            );
        }
        if let Some(dxa) = dx.as_deref_mut() {
            let dxn = &mut dxa[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                // dx[C, p] += K^T[C, F] · dOut[F, p]
                T::gemm(
                    k,
                    g.filters,
                    p,
                    T::one(),
                    kernel,
                    (1, k as isize),
                    gn,
                    (p as isize, 1),
                    T::one(),
                    dxn,
                    (p as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.filters,
                    p,
                    T::one(),
                    kernel,
                    (1, k as isize),
                    gn,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (p as isize, 1),
                );
                col2im(g, &dcols, dxn);
            }
        }
    }
}
