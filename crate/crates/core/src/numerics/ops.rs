//! Forward and backward kernels. The free functions are usable directly on
//! tensors; [`super::Graph`] wraps them with gradient bookkeeping.

use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::{Real, Tensor};

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn expect_rank3<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(shape_err(op, x.shape(), &[0, 0, 0])),
    }
}

pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (h, wd, cin) = expect_rank3("conv2d", x)?;
        let (k, cout) = match *w.shape() {
            [k1, k2, ci, co] if k1 == k2 && ci == cin => (k1, co),
            _ => return Err(shape_err("conv2d", x.shape(), w.shape())),
        };
        if b.shape() != [cout] {
            return Err(shape_err("conv2d", w.shape(), b.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", x.shape(), w.shape()));
        }
        Ok(ConvGeometry {
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

fn im2col<T: Real>(g: &ConvGeometry, x: &[T]) -> Vec<T> {
    let kk = g.patch_len();
    let mut patches = vec![T::zero(); g.ho * g.wo * kk];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = (oy * g.wo + ox) * kk;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = row + (ky * g.k + kx) * g.cin;
                    patches[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    patches
}

fn col2im<T: Real>(g: &ConvGeometry, dpatches: &[T]) -> Vec<T> {
    let kk = g.patch_len();
    let mut dx = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = (oy * g.wo + ox) * kk;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = row + (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] += dpatches[src + c];
                    }
                }
            }
        }
    }
    dx
}

/// Returns the output and the im2col patch matrix kept for the backward pass.
pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let patches = im2col(g, x.data());
    let p = g.ho * g.wo;
    let mut out = Vec::with_capacity(p * g.cout);
    for _ in 0..p {
        out.extend_from_slice(b.data());
    }
    T::gemm(p, g.patch_len(), g.cout, &patches, false, w.data(), false, &mut out, T::one());
    (
        Tensor::new(&[g.ho, g.wo, g.cout], out).expect("conv output shape"),
        patches,
    )
}

/// Gradients `(dx, dw, db)` given the saved patches.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    w: &Tensor<T>,
    patches: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = g.ho * g.wo;
    let kk = g.patch_len();
    let mut dw = vec![T::zero(); kk * g.cout];
    T::gemm(kk, p, g.cout, patches, true, dy, false, &mut dw, T::zero());
    let mut db = vec![T::zero(); g.cout];
    for row in dy.chunks_exact(g.cout) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    let mut dpatches = vec![T::zero(); p * kk];
    T::gemm(p, g.cout, kk, dy, false, w.data(), true, &mut dpatches, T::zero());
    (col2im(g, &dpatches), dw, db)
}

/// 2-D convolution, `x: [H, W, Cin]`, `w: [k, k, Cin, Cout]`, `b: [Cout]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x, w, b, stride, padding)?;
    Ok(conv2d_forward(&g, x, w, b).0)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Also returns the flat source index of every output element.
pub(crate) fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = expect_rank3("maxpool2", x)?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(shape_err("maxpool2", x.shape(), &[2, 2, c]));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut arg = Vec::with_capacity(ho * wo * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best = (2 * oy * w + 2 * ox) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[ho, wo, c], out)?, arg))
}

pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(maxpool2_forward(x)?.0)
}

/// Mean over all spatial positions: `[H, W, C] -> [1, 1, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = expect_rank3("global_avg_pool", x)?;
    let mut acc = vec![T::zero(); c];
    for cell in x.data().chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(cell) {
            *a += *v;
        }
    }
    let n = T::from_usize(h * w).unwrap();
    acc.iter_mut().for_each(|a| *a = *a / n);
    Tensor::new(&[1, 1, c], acc)
}

/// Channel-wise product `y[h, w, c] = x[h, w, c] * s[c]`, with `s` of any
/// shape holding exactly `C` values.
pub fn elem_mul<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, c) = expect_rank3("elem_mul", x)?;
    if s.len() != c {
        return Err(shape_err("elem_mul", x.shape(), s.shape()));
    }
    let sd = s.data();
    let data = x
        .data()
        .chunks_exact(c)
        .flat_map(|cell| cell.iter().zip(sd).map(|(a, b)| *a * *b))
        .collect();
    Tensor::new(x.shape(), data)
}

/// `a - b`, where `b` may omit leading dimensions of `a` (broadcast).
pub fn elem_sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_sub_shapes(a, b)?;
    let bd = b.data();
    let data = a
        .data()
        .chunks_exact(bd.len())
        .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| *x - *y))
        .collect();
    Tensor::new(a.shape(), data)
}

pub(crate) fn check_sub_shapes<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (ar, br) = (a.shape().len(), b.shape().len());
    if br > ar || a.shape()[ar - br..] != *b.shape() {
        return Err(shape_err("elem_sub", a.shape(), b.shape()));
    }
    Ok(())
}

/// Fully connected layer: `x: [N, in]`, `w: [in, out]`, `b: [out]`.
pub fn fc<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin, fout) = fc_dims(x, w, b)?;
    let mut out = Vec::with_capacity(n * fout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    T::gemm(n, fin, fout, x.data(), false, w.data(), false, &mut out, T::one());
    Tensor::new(&[n, fout], out)
}

pub(crate) fn fc_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, fin) = match *x.shape() {
        [n, f] => (n, f),
        _ => return Err(shape_err("fc", x.shape(), w.shape())),
    };
    match *w.shape() {
        [wi, wo] if wi == fin && b.shape() == [wo] => Ok((n, fin, wo)),
        _ => Err(shape_err("fc", x.shape(), w.shape())),
    }
}

/// Integer cell window `[x0, x1) x [y0, y1)` on a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiWindow {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RoiWindow {
    /// Quantizes a box given in feature-map coordinates: the box is clipped to
    /// the map and its edges are rounded to cell boundaries.
    pub fn from_box(b: &BBox, feat_w: usize, feat_h: usize) -> Result<RoiWindow> {
        let c = b.clip(feat_w as f32, feat_h as f32);
        if !(c.width() >= 1.0 && c.height() >= 1.0) {
            return Err(Error::invalid(format!(
                "roi_pool: box {b:?} is degenerate on a {feat_w}x{feat_h} map"
            )));
        }
        let quant = |lo: f32, hi: f32, extent: usize| {
            let start = (lo.round() as usize).min(extent - 1);
            let end = (hi.round() as usize).clamp(start + 1, extent);
            (start, end)
        };
        let (x0, x1) = quant(c.x1, c.x2, feat_w);
        let (y0, y1) = quant(c.y1, c.y2, feat_h);
        Ok(RoiWindow { x0, y0, x1, y1 })
    }

    /// Source rows (or columns) of bin `i` out of `out` over `[lo, hi)`.
    pub fn bin_range(lo: usize, hi: usize, i: usize, out: usize) -> (usize, usize) {
        let len = hi - lo;
        let start = lo + i * len / out;
        let end = (lo + ((i + 1) * len).div_ceil(out)).min(hi);
        (start, end)
    }
}

/// Max ROI pooling of several windows into `[N, out, out, C]`, returning the
/// flat argmax source index per output element (`usize::MAX` for empty bins).
pub(crate) fn roi_pool_forward<T: Real>(
    x: &Tensor<T>,
    windows: &[RoiWindow],
    out: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = expect_rank3("roi_pool", x)?;
    let xd = x.data();
    let mut values = Vec::with_capacity(windows.len() * out * out * c);
    let mut arg = Vec::with_capacity(values.capacity());
    for win in windows {
        if win.x1 > w || win.y1 > h || win.x0 >= win.x1 || win.y0 >= win.y1 {
            return Err(Error::invalid(format!(
                "roi_pool: window {win:?} outside a {w}x{h} map"
            )));
        }
        for by in 0..out {
            let (ys, ye) = RoiWindow::bin_range(win.y0, win.y1, by, out);
            for bx in 0..out {
                let (xs, xe) = RoiWindow::bin_range(win.x0, win.x1, bx, out);
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for yy in ys..ye {
                        for xx in xs..xe {
                            let idx = (yy * w + xx) * c + ch;
                            if best == usize::MAX || xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    values.push(if best == usize::MAX { T::zero() } else { xd[best] });
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(&[windows.len(), out, out, c], values)?, arg))
}

/// ROI max pooling of one box (feature coordinates) to `[out, out, C]`.
pub fn roi_pool<T: Real>(feat: &Tensor<T>, b: &BBox, out: usize) -> Result<Tensor<T>> {
    let (h, w, c) = expect_rank3("roi_pool", feat)?;
    let win = RoiWindow::from_box(b, w, h)?;
    let (t, _) = roi_pool_forward(feat, &[win], out)?;
    t.reshape(&[out, out, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps() {
        let r = relu(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_half_at_zero() {
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        let s = sigmoid(&t(&[2], &[-800.0, 800.0]));
        assert!(s.data()[0] >= 0.0 && s.data()[1] <= 1.0);
    }

    #[test]
    fn gap_of_constant() {
        let x = Tensor::full(&[3, 5, 2], 1.25f64);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.25, 1.25]);
    }

    #[test]
    fn conv_single_pixel_uses_center_weight() {
        let x = t(&[1, 1, 1], &[2.0]);
        let w = t(&[3, 3, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let b = t(&[1], &[0.5]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0 * 2.0 + 0.5]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (h, w, cin, cout) = (5, 4, 2, 3);
        let x: Vec<f64> = (0..h * w * cin).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..9 * cin * cout).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let xt = t(&[h, w, cin], &x);
        let wt_t = t(&[3, 3, cin, cout], &wt);
        let y = conv2d(&xt, &wt_t, &t(&[cout], &bias), 1, 1).unwrap();
        for oy in 0..h {
            for ox in 0..w {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[(iy as usize * w + ix as usize) * cin + ci]
                                    * wt[((ky * 3 + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let got = y.data()[(oy * w + ox) * cout + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let x = Tensor::<f64>::zeros(&[4, 4, 2]);
        let w = Tensor::<f64>::zeros(&[3, 3, 3, 1]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d") && msg.contains("[4, 4, 2]") && msg.contains("[3, 3, 3, 1]"));
        assert!(elem_mul(&x, &Tensor::zeros(&[3])).is_err());
        assert!(elem_sub(&x, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn elem_mul_ones_is_identity() {
        let x = t(&[2, 2, 2], &[0.1, -0.2, 0.3, 1e-30, 7.5, -8.25, 0.0, 3.0]);
        let ones = Tensor::full(&[1, 1, 2], 1.0);
        assert_eq!(elem_mul(&x, &ones).unwrap(), x);
    }

    #[test]
    fn roi_pool_identity_and_constant() {
        let data: Vec<f64> = (0..49 * 2).map(|i| i as f64).collect();
        let x = t(&[7, 7, 2], &data);
        let full = BBox::new(0.0, 0.0, 7.0, 7.0);
        assert_eq!(roi_pool(&x, &full, 7).unwrap(), x);

        let c = Tensor::full(&[5, 9, 3], 0.75f64);
        let pooled = roi_pool(&c, &BBox::new(1.0, 0.0, 8.0, 4.0), 7).unwrap();
        assert!(pooled.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn roi_pool_single_hot_cell() {
        for hot in 0..14 * 14 {
            let mut data = vec![0.0f64; 14 * 14];
            data[hot] = 1.0;
            let x = t(&[14, 14, 1], &data);
            let p = roi_pool(&x, &BBox::new(0.0, 0.0, 14.0, 14.0), 7).unwrap();
            // Oracle: bin (by, bx) owns rows 2by..2by+2 and cols 2bx..2bx+2.
            let (hy, hx) = (hot / 14, hot % 14);
            let expected = (hy / 2) * 7 + hx / 2;
            let nonzero: Vec<usize> = (0..49).filter(|&i| p.data()[i] != 0.0).collect();
            assert_eq!(nonzero, vec![expected]);
        }
    }

    #[test]
    fn roi_pool_rejects_degenerate() {
        let x = Tensor::<f64>::zeros(&[4, 4, 1]);
        assert!(roi_pool(&x, &BBox::new(3.5, 0.0, 8.0, 4.0), 7).is_err());
        assert!(roi_pool(&x, &BBox::new(1.0, 1.0, 1.5, 3.0), 7).is_err());
    }
}
