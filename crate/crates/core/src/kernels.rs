//! Fused CPU kernels for the per-point hot path: training-mode batch norm
//! (with optional ReLU) and max-pooling over points. Both carry hand-written
//! backward passes so autograd sees one node instead of a dozen broadcasts.

use std::sync::{Arc, Mutex};

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType};

/// Per-channel batch mean and biased variance.
#[derive(Debug, Clone, Default)]
pub(crate) struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("fused kernels need contiguous input"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn channel_stats<T: WithDType>(x: &[T], cols: usize) -> ChannelStats {
    let rows = (x.len() / cols) as f64;
    let mut mean = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows);
    ChannelStats { mean, var }
}

/// `y = γ·(x − μ)/√(σ² + ε) + β` over the rows of `x: R × C`, then ReLU.
/// The batch statistics are published through `stats`.
struct BatchNormTrain {
    eps: f64,
    relu: bool,
    stats: Arc<Mutex<ChannelStats>>,
}

impl BatchNormTrain {
    fn fwd<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], cols: usize) -> CpuStorage {
        let st = channel_stats(x, cols);
        let scale: Vec<f64> = st
            .var
            .iter()
            .zip(gamma)
            .map(|(v, g)| g.to_f64() / (v + self.eps).sqrt())
            .collect();
        let shift: Vec<f64> = st
            .mean
            .iter()
            .zip(&scale)
            .zip(beta)
            .map(|((m, s), b)| b.to_f64() - m * s)
            .collect();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(cols) {
            for ((&v, s), b) in row.iter().zip(&scale).zip(&shift) {
                let y = v.to_f64() * s + b;
                out.push(T::from_f64(if self.relu { y.max(0.0) } else { y }));
            }
        }
        *self.stats.lock().expect("stats lock") = st;
        T::to_cpu_storage_owned(out)
    }

    fn bwd_t<T: WithDType>(&self, x: &Tensor, gamma: &Tensor, res: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (rows, cols) = x.dims2()?;
        let (xv, mut gv, gam) = (host::<T>(x)?, host::<T>(grad)?, host::<T>(gamma)?);
        if self.relu {
            let yv = host::<T>(res)?;
            for (g, y) in gv.iter_mut().zip(&yv) {
                if y.to_f64() <= 0.0 {
                    *g = T::zero();
                }
            }
        }
        let st = self.stats.lock().expect("stats lock").clone();
        let inv: Vec<f64> = st.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        // dβ = Σ g, dγ = inv·(Σ g·x − μ·Σ g)
        let mut sum_g = vec![0.0; cols];
        let mut sum_gx = vec![0.0; cols];
        for (xr, gr) in xv.chunks_exact(cols).zip(gv.chunks_exact(cols)) {
            for (((sg, sgx), &xi), &gi) in sum_g.iter_mut().zip(sum_gx.iter_mut()).zip(xr).zip(gr) {
                let g = gi.to_f64();
                *sg += g;
                *sgx += g * xi.to_f64();
            }
        }
        let dbeta = sum_g;
        let dgamma: Vec<f64> = (0..cols)
            .map(|c| inv[c] * (sum_gx[c] - st.mean[c] * dbeta[c]))
            .collect();

        // dx = A·g + B·x + C per channel
        let n = rows as f64;
        let mut a = vec![0.0; cols];
        let mut b = vec![0.0; cols];
        let mut cc = vec![0.0; cols];
        for c in 0..cols {
            let gi = gam[c].to_f64() * inv[c];
            a[c] = gi;
            b[c] = -gi * inv[c] * dgamma[c] / n;
            cc[c] = -gi * dbeta[c] / n - b[c] * st.mean[c];
        }
        let mut dx = Vec::with_capacity(xv.len());
        for (xr, gr) in xv.chunks_exact(cols).zip(gv.chunks_exact(cols)) {
            for ((((&xi, &gi), a), b), c) in xr.iter().zip(gr).zip(&a).zip(&b).zip(&cc) {
                dx.push(T::from_f64(a * gi.to_f64() + b * xi.to_f64() + c));
            }
        }
        let to_t = |v: Vec<f64>| -> Vec<T> { v.into_iter().map(T::from_f64).collect() };
        let dev = x.device();
        Ok((
            Tensor::from_vec(dx, (rows, cols), dev)?,
            Tensor::from_vec(to_t(dgamma), cols, dev)?,
            Tensor::from_vec(to_t(dbeta), cols, dev)?,
        ))
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (rows, cols) = l1.shape().dims2()?;
        if l2.shape().elem_count() != cols || l3.shape().elem_count() != cols {
            bail!("batch norm parameters must have {cols} entries");
        }
        let out = match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(contiguous(s1, l1)?, contiguous(s2, l2)?, contiguous(s3, l3)?, cols),
            CpuStorage::F64(_) => self.fwd::<f64>(contiguous(s1, l1)?, contiguous(s2, l2)?, contiguous(s3, l3)?, cols),
            _ => bail!("batch norm supports f32 and f64 only"),
        };
        Ok((out, Shape::from((rows, cols))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => self.bwd_t::<f32>(x, gamma, res, grad)?,
            DType::F64 => self.bwd_t::<f64>(x, gamma, res, grad)?,
            dt => bail!("batch norm backward does not support {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Training-mode batch norm over the rows of `x`, returning the output and
/// the batch statistics.
pub(crate) fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    relu: bool,
) -> Result<(Tensor, ChannelStats)> {
    let stats = Arc::new(Mutex::new(ChannelStats::default()));
    let y = x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        BatchNormTrain {
            eps,
            relu,
            stats: stats.clone(),
        },
    )?;
    let st = stats.lock().expect("stats lock").clone();
    Ok((y, st))
}

/// Training-mode batch norm of `x: (B·N) × C`, optional ReLU, then max over
/// each cloud's `N` rows, giving `B × C`. The per-point activations are never
/// materialised; only the winning row of each (cloud, channel) gets the
/// direct gradient.
struct BatchNormMaxTrain {
    eps: f64,
    relu: bool,
    points: usize,
    stats: Arc<Mutex<ChannelStats>>,
    argmax: Arc<Mutex<Vec<u32>>>,
}

impl BatchNormMaxTrain {
    fn fwd<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], cols: usize) -> CpuStorage {
        let st = channel_stats(x, cols);
        let scale: Vec<f64> = st
            .var
            .iter()
            .zip(gamma)
            .map(|(v, g)| g.to_f64() / (v + self.eps).sqrt())
            .collect();
        let shift: Vec<f64> = st
            .mean
            .iter()
            .zip(&scale)
            .zip(beta)
            .map(|((m, s), b)| b.to_f64() - m * s)
            .collect();
        let batch = x.len() / (cols * self.points);
        let mut out = Vec::with_capacity(batch * cols);
        let mut arg = vec![0u32; batch * cols];
        let mut best = vec![0.0f64; cols];
        for (bi, cloud) in x.chunks_exact(self.points * cols).enumerate() {
            let a = &mut arg[bi * cols..(bi + 1) * cols];
            for (p, row) in cloud.chunks_exact(cols).enumerate() {
                for ((((m, ai), &v), s), t) in best.iter_mut().zip(a.iter_mut()).zip(row).zip(&scale).zip(&shift) {
                    let y = v.to_f64() * s + t;
                    if p == 0 || y > *m {
                        *m = y;
                        *ai = p as u32;
                    }
                }
            }
            out.extend(best.iter().map(|&m| T::from_f64(if self.relu { m.max(0.0) } else { m })));
        }
        *self.stats.lock().expect("stats lock") = st;
        *self.argmax.lock().expect("argmax lock") = arg;
        T::to_cpu_storage_owned(out)
    }

    fn bwd_t<T: WithDType>(&self, x: &Tensor, gamma: &Tensor, res: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (rows, cols) = x.dims2()?;
        let n = self.points;
        let (xv, mut gv, gam) = (host::<T>(x)?, host::<T>(grad)?, host::<T>(gamma)?);
        if self.relu {
            let yv = host::<T>(res)?;
            for (g, y) in gv.iter_mut().zip(&yv) {
                if y.to_f64() <= 0.0 {
                    *g = T::zero();
                }
            }
        }
        let st = self.stats.lock().expect("stats lock").clone();
        let arg = self.argmax.lock().expect("argmax lock").clone();
        let inv: Vec<f64> = st.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut sum_g = vec![0.0; cols];
        let mut sum_gx = vec![0.0; cols];
        for (j, g) in gv.iter().enumerate() {
            let (b, c) = (j / cols, j % cols);
            let g = g.to_f64();
            sum_g[c] += g;
            sum_gx[c] += g * xv[(b * n + arg[j] as usize) * cols + c].to_f64();
        }
        let dbeta = sum_g;
        let dgamma: Vec<f64> = (0..cols)
            .map(|c| inv[c] * (sum_gx[c] - st.mean[c] * dbeta[c]))
            .collect();

        let rn = rows as f64;
        let mut a = vec![0.0; cols];
        let mut b = vec![0.0; cols];
        let mut cc = vec![0.0; cols];
        for c in 0..cols {
            let gi = gam[c].to_f64() * inv[c];
            a[c] = gi;
            b[c] = -gi * inv[c] * dgamma[c] / rn;
            cc[c] = -gi * dbeta[c] / rn - b[c] * st.mean[c];
        }
        let mut dx: Vec<T> = Vec::with_capacity(xv.len());
        for xr in xv.chunks_exact(cols) {
            dx.extend(xr.iter().zip(&b).zip(&cc).map(|((&xi, b), c)| T::from_f64(b * xi.to_f64() + c)));
        }
        for (j, g) in gv.iter().enumerate() {
            let (bi, c) = (j / cols, j % cols);
            let i = (bi * n + arg[j] as usize) * cols + c;
            dx[i] = T::from_f64(dx[i].to_f64() + a[c] * g.to_f64());
        }
        let to_t = |v: Vec<f64>| -> Vec<T> { v.into_iter().map(T::from_f64).collect() };
        let dev = x.device();
        Ok((
            Tensor::from_vec(dx, (rows, cols), dev)?,
            Tensor::from_vec(to_t(dgamma), cols, dev)?,
            Tensor::from_vec(to_t(dbeta), cols, dev)?,
        ))
    }
}

impl CustomOp3 for BatchNormMaxTrain {
    fn name(&self) -> &'static str {
        "batch-norm-max-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (rows, cols) = l1.shape().dims2()?;
        if self.points == 0 || rows % self.points != 0 {
            bail!("{rows} rows do not split into clouds of {} points", self.points);
        }
        if l2.shape().elem_count() != cols || l3.shape().elem_count() != cols {
            bail!("batch norm parameters must have {cols} entries");
        }
        let out = match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(contiguous(s1, l1)?, contiguous(s2, l2)?, contiguous(s3, l3)?, cols),
            CpuStorage::F64(_) => self.fwd::<f64>(contiguous(s1, l1)?, contiguous(s2, l2)?, contiguous(s3, l3)?, cols),
            _ => bail!("batch norm supports f32 and f64 only"),
        };
        Ok((out, Shape::from((rows / self.points, cols))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => self.bwd_t::<f32>(x, gamma, res, grad)?,
            DType::F64 => self.bwd_t::<f64>(x, gamma, res, grad)?,
            dt => bail!("batch norm backward does not support {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// [`batch_norm_train`] followed by max-pooling over clouds of `points` rows.
pub(crate) fn batch_norm_max_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    relu: bool,
    points: usize,
) -> Result<(Tensor, ChannelStats)> {
    let stats = Arc::new(Mutex::new(ChannelStats::default()));
    let y = x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        BatchNormMaxTrain {
            eps,
            relu,
            points,
            stats: stats.clone(),
            argmax: Arc::new(Mutex::new(Vec::new())),
        },
    )?;
    let st = stats.lock().expect("stats lock").clone();
    Ok((y, st))
}

/// Max over dim 1 of `B × N × C`. Ties resolve to the first point, which
/// alone receives the gradient.
struct MaxOverPoints {
    argmax: Arc<Mutex<Vec<u32>>>,
}

impl MaxOverPoints {
    fn fwd<T: WithDType>(&self, x: &[T], b: usize, n: usize, c: usize) -> CpuStorage {
        let mut out = Vec::with_capacity(b * c);
        let mut arg = vec![0u32; b * c];
        for bi in 0..b {
            let cloud = &x[bi * n * c..(bi + 1) * n * c];
            let mut best: Vec<T> = cloud[..c].to_vec();
            let a = &mut arg[bi * c..(bi + 1) * c];
            for (p, row) in cloud.chunks_exact(c).enumerate().skip(1) {
                for ((m, ai), &v) in best.iter_mut().zip(a.iter_mut()).zip(row) {
                    if v > *m {
                        *m = v;
                        *ai = p as u32;
                    }
                }
            }
            out.extend(best);
        }
        *self.argmax.lock().expect("argmax lock") = arg;
        T::to_cpu_storage_owned(out)
    }

    fn bwd_t<T: WithDType>(&self, x: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let g = host::<T>(grad)?;
        let arg = self.argmax.lock().expect("argmax lock");
        let mut dx = vec![T::zero(); b * n * c];
        for bi in 0..b {
            for ci in 0..c {
                let j = bi * c + ci;
                dx[(bi * n + arg[j] as usize) * c + ci] = g[j];
            }
        }
        Tensor::from_vec(dx, (b, n, c), x.device())
    }
}

impl CustomOp1 for MaxOverPoints {
    fn name(&self) -> &'static str {
        "max-over-points"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, n, c) = l.shape().dims3()?;
        if n == 0 {
            bail!("cannot pool over zero points");
        }
        let out = match s {
            CpuStorage::F32(_) => self.fwd::<f32>(contiguous(s, l)?, b, n, c),
            CpuStorage::F64(_) => self.fwd::<f64>(contiguous(s, l)?, b, n, c),
            _ => bail!("max pooling supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(match x.dtype() {
            DType::F32 => self.bwd_t::<f32>(x, grad)?,
            DType::F64 => self.bwd_t::<f64>(x, grad)?,
            dt => bail!("max pooling backward does not support {dt:?}"),
        }))
    }
}

pub(crate) fn max_over_points(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(MaxOverPoints {
        argmax: Arc::new(Mutex::new(Vec::new())),
    })
}
