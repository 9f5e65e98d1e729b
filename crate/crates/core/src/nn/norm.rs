//! Fused batch normalisation with a closed-form backward pass.

use std::sync::{Arc, Mutex};

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use super::ops::contiguous_slice;

/// Per-channel mean and biased variance.
pub(crate) type Stats = (Vec<f64>, Vec<f64>);

pub(crate) struct BatchNormOp {
    pub eps: f64,
    /// Running statistics to normalise with; `None` means batch statistics.
    pub fixed: Option<Arc<Stats>>,
    /// Statistics actually used by the last forward pass.
    pub used: Arc<Mutex<Option<Stats>>>,
}

fn split_dims(shape: &Shape) -> (usize, usize, usize) {
    let dims = shape.dims();
    let inner = dims[2..].iter().product::<usize>();
    (dims[0], dims[1], inner)
}

fn batch_stats<T: WithDType>(x: &[T], (n, c, inner): (usize, usize, usize)) -> Stats {
    let m = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let s: f64 = x[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().map(|v| v.to_f64()).sum();
            mean[ch] += s;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for b in 0..n {
        for ch in 0..c {
            let mu = mean[ch];
            let s: f64 = x[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mu;
                    d * d
                })
                .sum();
            var[ch] += s;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

fn normalise<T: WithDType>(x: &[T], g: &[T], b: &[T], dims: (usize, usize, usize), stats: &Stats, eps: f64) -> Vec<T> {
    let (n, c, inner) = dims;
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..n {
        for ch in 0..c {
            let scale = g[ch].to_f64() / (stats.1[ch] + eps).sqrt();
            let shift = b[ch].to_f64() - stats.0[ch] * scale;
            let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
            out.extend(
                x[(bi * c + ch) * inner..(bi * c + ch + 1) * inner]
                    .iter()
                    .map(|&v| v * scale + shift),
            );
        }
    }
    out
}

impl BatchNormOp {
    fn forward<T: WithDType>(&self, x: &[T], g: &[T], b: &[T], dims: (usize, usize, usize)) -> Vec<T> {
        let stats = match &self.fixed {
            Some(s) => (**s).clone(),
            None => batch_stats(x, dims),
        };
        let out = normalise(x, g, b, dims, &stats, self.eps);
        *self.used.lock().expect("stats lock") = Some(stats);
        out
    }

    fn backward<T: WithDType>(
        &self,
        x: &[T],
        g: &[T],
        dy: &[T],
        (n, c, inner): (usize, usize, usize),
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let guard = self.used.lock().expect("stats lock");
        let (mean, var) = guard.as_ref().expect("backward before forward");
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                let (mu, is) = (mean[ch], inv[ch]);
                for (xv, gv) in x[r.clone()].iter().zip(&dy[r]) {
                    let gv = gv.to_f64();
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * (xv.to_f64() - mu) * is;
                }
            }
        }
        let m = (n * inner) as f64;
        let train = self.fixed.is_none();
        let mut dx = Vec::with_capacity(x.len());
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                let k = g[ch].to_f64() * inv[ch];
                if train {
                    let (mu, is) = (mean[ch], inv[ch]);
                    let (db, dg) = (dbeta[ch] / m, dgamma[ch] / m);
                    dx.extend(x[r.clone()].iter().zip(&dy[r]).map(|(xv, gv)| {
                        let xhat = (xv.to_f64() - mu) * is;
                        T::from_f64(k * (gv.to_f64() - db - xhat * dg))
                    }));
                } else {
                    let kt = T::from_f64(k);
                    dx.extend(dy[r].iter().map(|&gv| gv * kt));
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
        (dx, cast(dgamma), cast(dbeta))
    }
}

fn host_vec<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.contiguous()?.flatten_all()?.to_vec1::<T>()
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = split_dims(l1.shape());
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(self.forward(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(b, l3)?,
                dims,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(self.forward(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(b, l3)?,
                dims,
            )),
            _ => candle_core::bail!("batch-norm: unsupported dtype {:?}", s1.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = split_dims(x.shape());
        let c = dims.1;
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let (dx, dg, db) = self.backward::<$t>(&host_vec(x)?, &host_vec(gamma)?, &host_vec(grad)?, dims);
                (
                    Tensor::from_vec(dx, x.shape(), dev)?,
                    Tensor::from_vec(dg, c, dev)?,
                    Tensor::from_vec(db, c, dev)?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            other => candle_core::bail!("batch-norm: unsupported dtype {other:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

pub(crate) fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    fixed: Option<Arc<Stats>>,
) -> candle_core::Result<(Tensor, Stats)> {
    if x.rank() < 2 || x.dim(1)? != gamma.elem_count() {
        candle_core::bail!("batch-norm: input {:?} vs {} channels", x.dims(), gamma.elem_count());
    }
    let used = Arc::new(Mutex::new(None));
    let op = BatchNormOp {
        eps,
        fixed,
        used: used.clone(),
    };
    let y = x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    let stats = used.lock().expect("stats lock").clone().expect("forward ran");
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn reference(x: &Tensor, g: &Tensor, b: &Tensor, eps: f64) -> Tensor {
        let mean = x.mean_keepdim((0, 2, 3)).unwrap();
        let xc = x.broadcast_sub(&mean).unwrap();
        let var = xc.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap();
        let c = x.dim(1).unwrap();
        xc.broadcast_div(&(var + eps).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn matches_composed_ops_forward_and_backward() {
        let x = Var::from_tensor(&random(&[3, 4, 5, 2], 1)).unwrap();
        let g = Var::from_tensor(&random(&[4], 2)).unwrap();
        let b = Var::from_tensor(&random(&[4], 3)).unwrap();
        let w = random(&[3, 4, 5, 2], 4);
        let (y, _) = batch_norm(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5, None).unwrap();
        let r = reference(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5);
        let diff: f64 = (&y - &r).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-12);

        let gy = (y * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (r * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            let a = gy.get(v.as_tensor()).unwrap();
            let e = gr.get(v.as_tensor()).unwrap();
            let d: f64 = (a - e).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(d < 1e-10, "{d}");
        }
    }

    #[test]
    fn fixed_statistics_are_an_affine_map() {
        let x = Var::from_tensor(&random(&[2, 3, 4], 5)).unwrap();
        let g = Tensor::new(&[1.0f64, 2.0, 0.5], &Device::Cpu).unwrap();
        let b = Tensor::new(&[0.0f64, 1.0, -1.0], &Device::Cpu).unwrap();
        let stats = Arc::new((vec![0.5, -0.5, 0.0], vec![1.0, 4.0, 0.25]));
        let (y, _) = batch_norm(x.as_tensor(), &g, &b, 0.0, Some(stats)).unwrap();
        let yv: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        // channel 1 of sample 0: (x + 0.5) / 2 * 2 + 1
        for i in 4..8 {
            assert!((yv[i] - (xv[i] + 0.5 + 1.0)).abs() < 1e-12);
        }
        let grads = y.sum_all().unwrap().backward().unwrap();
        let gx: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!((gx[0] - 1.0).abs() < 1e-12 && (gx[4] - 1.0).abs() < 1e-12 && (gx[8] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f32_agrees_with_f64() {
        let x = random(&[2, 3, 4, 4], 9);
        let g = random(&[3], 10);
        let b = random(&[3], 11);
        let (y64, _) = batch_norm(&x, &g, &b, 1e-5, None).unwrap();
        let f = |t: &Tensor| t.to_dtype(DType::F32).unwrap();
        let (y32, s) = batch_norm(&f(&x), &f(&g), &f(&b), 1e-5, None).unwrap();
        let d: f64 = (y64 - y32.to_dtype(DType::F64).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!(d < 1e-5);
        assert_eq!(s.0.len(), 3);
    }
}
