//! Per-item layer kernels on channel-major buffers.

use crate::real::Real;

/// Unfold a zero-padded 3x3 neighbourhood: row `ci * 9 + ky * 3 + kx` of the
/// result holds input channel `ci` shifted by `(ky - 1, kx - 1)`.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::zero(); cin * 9 * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (x0, x1) = (kx.saturating_sub(1), (w + kx).saturating_sub(1).min(w));
                let (y0, y1) = (ky.saturating_sub(1), (h + ky).saturating_sub(1).min(h));
                // output pixel (y, x) reads input (y + ky - 1, x + kx - 1)
                for sy in y0..y1 {
                    let y = sy + 1 - ky;
                    let xs = x0 + 1 - kx;
                    let len = x1 - x0;
                    row[y * w + xs..y * w + xs + len]
                        .copy_from_slice(&plane[sy * w + x0..sy * w + x1]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `gx`.
fn col2im_add<T: Real>(col: &[T], cin: usize, h: usize, w: usize, gx: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut gx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (x0, x1) = (kx.saturating_sub(1), (w + kx).saturating_sub(1).min(w));
                let (y0, y1) = (ky.saturating_sub(1), (h + ky).saturating_sub(1).min(h));
                for sy in y0..y1 {
                    let y = sy + 1 - ky;
                    let xs = x0 + 1 - kx;
                    let src = &row[y * w + xs..y * w + xs + (x1 - x0)];
                    for (d, &s) in plane[sy * w + x0..sy * w + x1].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded 3x3 convolution; returns pre-activations `cout x h x w`.
pub fn conv3x3_forward<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let hw = h * w;
    let col = im2col(x, cin, h, w);
    let mut out = vec![T::zero(); cout * hw];
    for (co, row) in out.chunks_mut(hw).enumerate() {
        row.fill(bias[co]);
    }
    let k = cin * 9;
    T::gemm(
        cout,
        k,
        hw,
        weight,
        k,
        1,
        &col,
        hw,
        1,
        T::one(),
        &mut out,
        hw,
        1,
    );
    out
}

/// Backward of [`conv3x3_forward`] given the gradient w.r.t. its
/// pre-activation output. Accumulates into `gw`, `gb` and (if given) `gx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    gout: &[T],
    gw: &mut [T],
    gb: &mut [T],
    gx: Option<&mut [T]>,
) {
    let hw = h * w;
    let k = cin * 9;
    let col = im2col(x, cin, h, w);
    T::gemm(cout, hw, k, gout, hw, 1, &col, 1, hw, T::one(), gw, k, 1);
    for (co, row) in gout.chunks(hw).enumerate() {
        gb[co] += row.iter().copied().sum::<T>();
    }
    if let Some(gx) = gx {
        let mut gcol = vec![T::zero(); k * hw];
        T::gemm(
            k,
            cout,
            hw,
            weight,
            1,
            k,
            gout,
            hw,
            1,
            T::zero(),
            &mut gcol,
            hw,
            1,
        );
        col2im_add(&gcol, cin, h, w, gx);
    }
}

/// 1x1 convolution to a single output channel.
pub fn conv1x1_forward<T: Real>(x: &[T], cin: usize, hw: usize, weight: &[T], bias: T) -> Vec<T> {
    let mut out = vec![bias; hw];
    for ci in 0..cin {
        let wv = weight[ci];
        for (o, &v) in out.iter_mut().zip(&x[ci * hw..(ci + 1) * hw]) {
            *o += wv * v;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv1x1_backward<T: Real>(
    x: &[T],
    cin: usize,
    hw: usize,
    weight: &[T],
    gout: &[T],
    gw: &mut [T],
    gb: &mut T,
    gx: &mut [T],
) {
    *gb += gout.iter().copied().sum::<T>();
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        gw[ci] += plane.iter().zip(gout).map(|(&a, &g)| a * g).sum::<T>();
        let wv = weight[ci];
        for (d, &g) in gx[ci * hw..(ci + 1) * hw].iter_mut().zip(gout) {
            *d += wv * g;
        }
    }
}

pub fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zero the gradient wherever the rectifier output was not positive.
pub fn relu_backward<T: Real>(out: &[T], grad: &mut [T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 average pooling with stride 2.
pub fn avgpool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..];
        let dst = &mut out[ch * oh * ow..];
        for y in 0..oh {
            for x in 0..ow {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = s * quarter;
            }
        }
    }
    out
}

/// Gradient of [`avgpool2`]; `h`, `w` are the input (pre-pool) sizes.
pub fn avgpool2_backward<T: Real>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                gx[ch * h * w + y * w + x] = g[ch * oh * ow + (y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    gx
}

/// Nearest-neighbour x2 upsampling; `h`, `w` are the input sizes.
pub fn upsample2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &x[ch * h * w + (y / 2) * w..][..w];
            let dst = &mut out[ch * oh * ow + y * ow..][..ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]; `h`, `w` are the input (pre-upsample) sizes.
pub fn upsample2_backward<T: Real>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                gx[ch * h * w + (y / 2) * w + x / 2] += g[ch * oh * ow + y * ow + x];
            }
        }
    }
    gx
}

/// `y = W x + b` with `W` stored `fout x fin`.
pub fn linear_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    fin: usize,
    fout: usize,
) -> Vec<T> {
    (0..fout)
        .map(|o| {
            bias[o]
                + weight[o * fin..(o + 1) * fin]
                    .iter()
                    .zip(x)
                    .map(|(&a, &b)| a * b)
                    .sum::<T>()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    weight: &[T],
    fin: usize,
    fout: usize,
    gout: &[T],
    gw: &mut [T],
    gb: &mut [T],
) -> Vec<T> {
    let mut gx = vec![T::zero(); fin];
    for o in 0..fout {
        let g = gout[o];
        gb[o] += g;
        for i in 0..fin {
            gw[o * fin + i] += g * x[i];
            gx[i] += weight[o * fin + i] * g;
        }
    }
    gx
}
