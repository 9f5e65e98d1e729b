//! Custom tensor ops with hand-written backward passes.
//!
//! Convolutions are lowered to `im2col` + one large matmul so that both the
//! forward and the backward pass run through the gemm kernels; the stock
//! transposed-convolution backward is an order of magnitude slower on CPU.

use std::ops::AddAssign;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

/// Geometry of a 2D sliding window (kernel, stride, zero padding per axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    /// Square kernel with "same"-style padding `k / 2`.
    pub fn square(k: usize, stride: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            ph: k / 2,
            pw: k / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        )
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

fn im2col<T: Copy + Default>(
    src: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    g: ConvGeom,
) -> Vec<T> {
    let (ho, wo) = g.out_hw(h, w);
    let rows = c * g.kh * g.kw;
    let l = ho * wo;
    let mut dst = vec![T::default(); n * rows * l];
    for b in 0..n {
        for ch in 0..c {
            let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (ch * g.kh + i) * g.kw + j;
                    let out = &mut dst[(row * n + b) * l..(row * n + b + 1) * l];
                    for oy in 0..ho {
                        let iy = (oy * g.sh + i) as isize - g.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.sw + j) as isize - g.pw as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im<T: Copy + Default + AddAssign>(
    src: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    g: ConvGeom,
) -> Vec<T> {
    let (ho, wo) = g.out_hw(h, w);
    let l = ho * wo;
    let mut dst = vec![T::default(); n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            let plane = &mut dst[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (ch * g.kh + i) * g.kw + j;
                    let col = &src[(row * n + b) * l..(row * n + b + 1) * l];
                    for oy in 0..ho {
                        let iy = (oy * g.sh + i) as isize - g.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let col_row = &col[oy * wo..(oy + 1) * wo];
                        for (ox, v) in col_row.iter().enumerate() {
                            let ix = (ox * g.sw + j) as isize - g.pw as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

pub(crate) fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

/// `(N, C, H, W)` -> `(C*kh*kw, N*Ho*Wo)`.
struct Im2Col {
    geom: ConvGeom,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let (ho, wo) = self.geom.out_hw(h, w);
        let shape = Shape::from((c * self.geom.kh * self.geom.kw, n * ho * wo));
        let dims = (n, c, h, w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, dims, self.geom)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, dims, self.geom)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let g = grad_res.contiguous()?.apply_op1(Col2Im {
            geom: self.geom,
            n,
            c,
            h,
            w,
        })?;
        Ok(Some(g))
    }
}

/// Adjoint of [`Im2Col`]: scatter-adds columns back into an image.
struct Col2Im {
    geom: ConvGeom,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = (self.n, self.c, self.h, self.w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, dims, self.geom)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, dims, self.geom)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from(dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col { geom: self.geom })?))
    }
}

/// Correlation of `x: (N, Ci, H, W)` with `weight: (Co, Ci, kh, kw)`, no bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, geom: ConvGeom) -> candle_core::Result<Tensor> {
    let (n, ci, h, w) = x.dims4()?;
    let (co, wci, kh, kw) = weight.dims4()?;
    if wci != ci || kh != geom.kh || kw != geom.kw {
        candle_core::bail!(
            "conv2d: input {:?} incompatible with weight {:?} / {:?}",
            x.dims(),
            weight.dims(),
            geom
        );
    }
    let (ho, wo) = geom.out_hw(h, w);
    let w2 = weight.reshape((co, ci * kh * kw))?;
    let cols = if geom.is_pointwise() {
        channels_first(&x.reshape((n, ci, h * w))?)?
    } else {
        x.contiguous()?.apply_op1(Im2Col { geom })?
    };
    let out = w2.matmul(&cols)?.reshape((co, n, ho * wo))?;
    batch_first(&out)?.reshape((n, co, ho, wo))
}

/// `(N, C, L)` -> `(C, N*L)`.
fn channels_first(x: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, l) = x.dims3()?;
    if n == 1 {
        return x.reshape((c, l));
    }
    x.transpose(0, 1)?.contiguous()?.reshape((c, n * l))
}

/// `(C, N, L)` -> `(N, C, L)`.
fn batch_first(x: &Tensor) -> candle_core::Result<Tensor> {
    let (c, n, l) = x.dims3()?;
    if n == 1 {
        return x.reshape((1, c, l));
    }
    x.transpose(0, 1)?.contiguous()
}

/// Temporal `im2col` for per-frame feature maps laid out `(N*T, C, H, W)`:
/// produces `(C*k, N*T*H*W)` where row `c*k + dt`, column block `t` holds
/// frame `t + dt - k/2` of the same clip (zero outside the clip).
struct TemporalIm2Col {
    clips: usize,
    k: usize,
}

fn temporal_im2col<T: Copy + Default>(src: &[T], (nt, c, s): (usize, usize, usize), clips: usize, k: usize) -> Vec<T> {
    let t_len = nt / clips;
    let pad = k / 2;
    let mut dst = vec![T::default(); nt * c * k * s];
    for n in 0..clips {
        for t in 0..t_len {
            let f = n * t_len + t;
            for dt in 0..k {
                let st = t as isize + dt as isize - pad as isize;
                if st < 0 || st >= t_len as isize {
                    continue;
                }
                let frame = &src[(n * t_len + st as usize) * c * s..(n * t_len + st as usize + 1) * c * s];
                for ch in 0..c {
                    let row = ch * k + dt;
                    dst[(row * nt + f) * s..(row * nt + f + 1) * s].copy_from_slice(&frame[ch * s..(ch + 1) * s]);
                }
            }
        }
    }
    dst
}

fn temporal_col2im<T: Copy + Default + AddAssign>(
    src: &[T],
    (nt, c, s): (usize, usize, usize),
    clips: usize,
    k: usize,
) -> Vec<T> {
    let t_len = nt / clips;
    let pad = k / 2;
    let mut dst = vec![T::default(); nt * c * s];
    for n in 0..clips {
        for t in 0..t_len {
            let f = n * t_len + t;
            for dt in 0..k {
                let st = t as isize + dt as isize - pad as isize;
                if st < 0 || st >= t_len as isize {
                    continue;
                }
                let frame = &mut dst[(n * t_len + st as usize) * c * s..(n * t_len + st as usize + 1) * c * s];
                for ch in 0..c {
                    for (d, v) in frame[ch * s..(ch + 1) * s]
                        .iter_mut()
                        .zip(&src[((ch * k + dt) * nt + f) * s..((ch * k + dt) * nt + f + 1) * s])
                    {
                        *d += *v;
                    }
                }
            }
        }
    }
    dst
}

impl CustomOp1 for TemporalIm2Col {
    fn name(&self) -> &'static str {
        "temporal-im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (nt, c, h, w) = layout.shape().dims4()?;
        let dims = (nt, c, h * w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(temporal_im2col(contiguous_slice(v, layout)?, dims, self.clips, self.k)),
            CpuStorage::F64(v) => CpuStorage::F64(temporal_im2col(contiguous_slice(v, layout)?, dims, self.clips, self.k)),
            other => candle_core::bail!("temporal-im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from((c * self.k, nt * h * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let g = grad_res.contiguous()?.apply_op1(TemporalCol2Im {
            clips: self.clips,
            k: self.k,
            c,
            h,
            w,
        })?;
        Ok(Some(g))
    }
}

struct TemporalCol2Im {
    clips: usize,
    k: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for TemporalCol2Im {
    fn name(&self) -> &'static str {
        "temporal-col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let nt = layout.shape().dims2()?.1 / (self.h * self.w);
        let dims = (nt, self.c, self.h * self.w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(temporal_col2im(contiguous_slice(v, layout)?, dims, self.clips, self.k)),
            CpuStorage::F64(v) => CpuStorage::F64(temporal_col2im(contiguous_slice(v, layout)?, dims, self.clips, self.k)),
            other => candle_core::bail!("temporal-col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from((nt, self.c, self.h, self.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(TemporalIm2Col {
            clips: self.clips,
            k: self.k,
        })?))
    }
}

/// Convolution along time of `x: (N*T, Ci, H, W)` (frames of `clips` clips)
/// with `weight: (Co, Ci, k, 1)`, zero padding `k / 2`; returns
/// `(N*T, Co, H, W)`.
pub fn temporal_conv(x: &Tensor, weight: &Tensor, clips: usize) -> candle_core::Result<Tensor> {
    let (nt, ci, h, w) = x.dims4()?;
    let (co, wci, k, one) = weight.dims4()?;
    if wci != ci || one != 1 || clips == 0 || nt % clips != 0 {
        candle_core::bail!(
            "temporal_conv: input {:?} ({clips} clips) incompatible with weight {:?}",
            x.dims(),
            weight.dims()
        );
    }
    let cols = x.contiguous()?.apply_op1(TemporalIm2Col { clips, k })?;
    let w2 = weight.reshape((co, ci * k))?;
    let out = w2.matmul(&cols)?.reshape((co, nt, h * w))?;
    batch_first(&out)?.reshape((nt, co, h, w))
}

struct Relu;

impl CustomOp1 for Relu {
    fn name(&self) -> &'static str {
        "relu-fast"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, layout)?.iter().map(|&x| x.max(0.0)).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, layout)?.iter().map(|&x| x.max(0.0)).collect()),
            other => candle_core::bail!("relu: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op2_no_bwd(&res.contiguous()?, &ReluGrad)?))
    }
}

struct ReluGrad;

impl CustomOp2 for ReluGrad {
    fn name(&self) -> &'static str {
        "relu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(g), CpuStorage::F32(r)) => CpuStorage::F32(
                contiguous_slice(g, l1)?
                    .iter()
                    .zip(contiguous_slice(r, l2)?)
                    .map(|(&g, &r)| if r > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            (CpuStorage::F64(g), CpuStorage::F64(r)) => CpuStorage::F64(
                contiguous_slice(g, l1)?
                    .iter()
                    .zip(contiguous_slice(r, l2)?)
                    .map(|(&g, &r)| if r > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            _ => candle_core::bail!("relu-grad: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Rectifier with a single-pass backward.
pub fn relu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Relu)
}

struct Sigmoid;

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(
                contiguous_slice(v, layout)?
                    .iter()
                    .map(|&x| sigmoid_scalar(x as f64) as f32)
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous_slice(v, layout)?
                    .iter()
                    .map(|&x| sigmoid_scalar(x))
                    .collect(),
            ),
            other => candle_core::bail!("sigmoid: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let local = (res * (res.ones_like()? - res)?)?;
        Ok(Some((grad_res * local)?))
    }
}

/// Logistic function, stable for large |x| in both passes.
pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn naive_conv(
        x: &[f64],
        (n, ci, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        co: usize,
        g: ConvGeom,
    ) -> Vec<f64> {
        let (ho, wo) = g.out_hw(h, w);
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                                    let ix = (ox * g.sw + j) as isize - g.pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((b * ci + c) * h + iy as usize) * w + ix as usize]
                                        * wt[((o * ci + c) * g.kh + i) * g.kw + j];
                                }
                            }
                        }
                        out[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let dev = Device::Cpu;
        for geom in [
            ConvGeom::square(3, 1),
            ConvGeom::square(5, 2),
            ConvGeom { kh: 3, kw: 1, sh: 1, sw: 1, ph: 1, pw: 0 },
            ConvGeom { kh: 3, kw: 3, sh: 2, sw: 1, ph: 1, pw: 1 },
        ] {
            let dims = (2, 3, 9, 7);
            let x = ramp(2 * 3 * 9 * 7, 2.0);
            let wt = ramp(4 * 3 * geom.kh * geom.kw, 1.0);
            let expected = naive_conv(&x, dims, &wt, 4, geom);
            let xt = Tensor::from_vec(x, dims, &dev).unwrap();
            let wt = Tensor::from_vec(wt, (4, 3, geom.kh, geom.kw), &dev).unwrap();
            let got: Vec<f64> = conv2d(&xt, &wt, geom).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(got.len(), expected.len());
            for (a, b) in got.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for {geom:?}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = (1, 2, 6, 5);
        let g = ConvGeom::square(3, 2);
        let x = ramp(60, 1.0);
        let cols = im2col(&x, dims, g);
        let y = ramp(cols.len(), 3.0);
        let back = col2im(&y, dims, g);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let dev = Device::Cpu;
        let geom = ConvGeom::square(3, 2);
        let x = Var::from_tensor(&Tensor::from_vec(ramp(2 * 2 * 7 * 7, 1.0), (2, 2, 7, 7), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::from_vec(ramp(3 * 2 * 9, 0.7), (3, 2, 3, 3), &dev).unwrap()).unwrap();
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            conv2d(x, w, geom).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let l = conv2d(x.as_tensor(), w.as_tensor(), geom).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = l.backward().unwrap();
        let gx: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xv: Vec<f64> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for idx in [0usize, 17, 50, 97, 150, 195] {
            let mut plus = xv.clone();
            plus[idx] += h;
            let mut minus = xv.clone();
            minus[idx] -= h;
            let tp = Tensor::from_vec(plus, (2, 2, 7, 7), &dev).unwrap();
            let tm = Tensor::from_vec(minus, (2, 2, 7, 7), &dev).unwrap();
            let fd = (loss(&tp, w.as_tensor()) - loss(&tm, w.as_tensor())) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", gx[idx]);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::new(&[-1000.0f32, 0.0, 1000.0], &dev).unwrap()).unwrap();
        let s = sigmoid(x.as_tensor()).unwrap();
        let v: Vec<f32> = s.to_vec1().unwrap();
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        let g = s.sum_all().unwrap().backward().unwrap();
        let gv: Vec<f32> = g.get(x.as_tensor()).unwrap().to_vec1().unwrap();
        assert!(gv.iter().all(|v| v.is_finite()));
        assert_eq!(gv[1], 0.25);
    }

    #[test]
    fn temporal_conv_matches_naive_loop() {
        let (clips, t, ci, co, hw, k) = (2, 5, 3, 2, 4, 5);
        let x: Vec<f64> = (0..clips * t * ci * hw).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
        let wt: Vec<f64> = (0..co * ci * k).map(|i| ((i * 13 % 17) as f64 - 8.0) / 5.0).collect();
        let dev = Device::Cpu;
        let xt = Tensor::from_vec(x.clone(), (clips * t, ci, 2, 2), &dev).unwrap();
        let wt_t = Tensor::from_vec(wt.clone(), (co, ci, k, 1), &dev).unwrap();
        let y: Vec<f64> = temporal_conv(&xt, &wt_t, clips).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for n in 0..clips {
            for tt in 0..t {
                for o in 0..co {
                    for s in 0..hw {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for dt in 0..k {
                                let st = tt as isize + dt as isize - (k / 2) as isize;
                                if st < 0 || st >= t as isize {
                                    continue;
                                }
                                acc += x[((n * t + st as usize) * ci + c) * hw + s] * wt[(o * ci + c) * k + dt];
                            }
                        }
                        let got = y[((n * t + tt) * co + o) * hw + s];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_conv_backward_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(
            &Tensor::from_vec((0..48).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), (6, 2, 2, 2), &dev).unwrap(),
        )
        .unwrap();
        let w = Var::from_tensor(
            &Tensor::from_vec((0..18).map(|i| (i as f64 * 0.71).cos()).collect::<Vec<_>>(), (3, 2, 3, 1), &dev).unwrap(),
        )
        .unwrap();
        let probe = Tensor::from_vec((0..72).map(|i| (i as f64 * 0.13).sin()).collect::<Vec<_>>(), (6, 3, 2, 2), &dev).unwrap();
        let f = |x: &Tensor, w: &Tensor| -> f64 {
            (temporal_conv(x, w, 2).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let grads = (temporal_conv(x.as_tensor(), w.as_tensor(), 2).unwrap() * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gx: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let gw: Vec<f64> = grads.get(w.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        for i in [0, 7, 20, 47] {
            let mut p = xv.clone();
            p[i] += h;
            let mut m = xv.clone();
            m[i] -= h;
            let fd = (f(&Tensor::from_vec(p, (6, 2, 2, 2), &dev).unwrap(), w.as_tensor())
                - f(&Tensor::from_vec(m, (6, 2, 2, 2), &dev).unwrap(), w.as_tensor()))
                / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-6, "x[{i}]: {fd} vs {}", gx[i]);
        }
        let wv: Vec<f64> = w.flatten_all().unwrap().to_vec1().unwrap();
        for i in [0, 5, 17] {
            let mut p = wv.clone();
            p[i] += h;
            let mut m = wv.clone();
            m[i] -= h;
            let fd = (f(x.as_tensor(), &Tensor::from_vec(p, (3, 2, 3, 1), &dev).unwrap())
                - f(x.as_tensor(), &Tensor::from_vec(m, (3, 2, 3, 1), &dev).unwrap()))
                / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_forward_and_backward() {
        let x = Var::from_tensor(&Tensor::new(&[-1.0f64, 0.0, 2.0, -0.5, 3.0], &Device::Cpu).unwrap()).unwrap();
        let y = relu(x.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0, 0.0, 2.0, 0.0, 3.0]);
        let g = (y * 2.0).unwrap().sum_all().unwrap().backward().unwrap();
        let gx: Vec<f64> = g.get(x.as_tensor()).unwrap().to_vec1().unwrap();
        assert_eq!(gx, vec![0.0, 0.0, 2.0, 0.0, 2.0]);
    }
}
