//! Training objectives: cross-entropy, temperature-scaled distillation,
//! contrastive representation distillation (CRD) and their weighted sum.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::models::ForwardOutput;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the distillation term.
    pub alpha: f64,
    /// Weight of the CRD term.
    pub beta: f64,
    /// Weight of the cross-entropy term.
    pub gamma: f64,
    pub tau_kd: f64,
    pub tau_crd: f64,
    /// CRD negatives per sample; `None` means `min(4096, M − 1)`.
    pub n_negatives: Option<usize>,
    pub embed_dim: usize,
    pub buffer_momentum: f64,
    /// Multiply the distillation term by `tau_kd²` so its gradient scale does
    /// not depend on the temperature.
    pub kd_scale_by_tau_sq: bool,
    /// Compute distillation terms on known-class samples only.
    pub distill_closed_only: bool,
    /// Weight of the feature-transform orthogonality penalty (teacher only).
    pub transform_reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.8,
            gamma: 1.0,
            tau_kd: 10.0,
            tau_crd: 0.1,
            n_negatives: None,
            embed_dim: 128,
            buffer_momentum: 0.5,
            kd_scale_by_tau_sq: true,
            distill_closed_only: false,
            transform_reg_weight: 0.001,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_kd > 0.0 && self.tau_crd > 0.0) {
            return Err(Error::config("temperatures must be strictly positive"));
        }
        if [self.alpha, self.beta, self.gamma, self.transform_reg_weight]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.buffer_momentum) {
            return Err(Error::config("buffer_momentum must lie in [0, 1]"));
        }
        if self.embed_dim == 0 || self.n_negatives == Some(0) {
            return Err(Error::config("embed_dim and n_negatives must be positive"));
        }
        Ok(())
    }

    /// Negatives per sample for a dataset of `m` samples.
    pub fn resolve_negatives(&self, m: usize) -> Result<usize> {
        let n = self.n_negatives.unwrap_or_else(|| 4096.min(m.saturating_sub(1)));
        if n == 0 || n >= m {
            return Err(Error::config(format!(
                "CRD needs 1 ≤ n_negatives < dataset size, got N = {n}, M = {m}"
            )));
        }
        Ok(n)
    }
}

/// Temperature softmax of a single logit vector.
pub fn soft_softmax(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Row-wise `log softmax(z / tau)` over the last dimension.
pub fn log_soft_softmax(z: &Tensor, tau: f64) -> Result<Tensor> {
    let scaled = (z / tau)?;
    let max = scaled.max_keepdim(D::Minus1)?.detach();
    let shifted = scaled.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

fn label_tensor(labels: &[u32], device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(labels, labels.len(), device)?)
}

/// Mean cross-entropy of `B × C` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid(format!("label {l} outside {c} classes")));
    }
    let lp = log_soft_softmax(logits, 1.0)?;
    let idx = label_tensor(labels, logits.device())?.unsqueeze(1)?;
    Ok(lp.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Cross-entropy between `softmax(teacher/τ)` and `softmax(student/τ)`,
/// averaged over the batch and optionally scaled by `τ²`. The teacher side
/// is treated as a constant.
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor, tau: f64, scale_by_tau_sq: bool) -> Result<Tensor> {
    if student_logits.dims() != teacher_logits.dims() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student_logits.dims(),
            teacher_logits.dims()
        )));
    }
    let (_, c) = student_logits.dims2()?;
    if c < 2 {
        return Err(Error::Shape("distillation needs at least two classes".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let target = log_soft_softmax(&teacher_logits.detach(), tau)?.exp()?;
    let log_pred = log_soft_softmax(student_logits, tau)?;
    let ce = (target * log_pred)?.sum(1)?.mean_all()?.neg()?;
    Ok(if scale_by_tau_sq { (ce * (tau * tau))? } else { ce })
}

/// Critic `h(t, s) = e^{⟨t,s⟩/τ} / (e^{⟨t,s⟩/τ} + N/M)` on unit vectors.
pub fn crd_critic_h(t_embed: &[f64], s_embed: &[f64], tau: f64, n: usize, m: usize) -> Result<f64> {
    if t_embed.len() != s_embed.len() {
        return Err(Error::Shape("embeddings differ in length".into()));
    }
    for (name, v) in [("teacher", t_embed), ("student", s_embed)] {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("{name} embedding has norm {norm}, expected 1")));
        }
    }
    if !(tau > 0.0) || m == 0 {
        return Err(Error::invalid("critic needs τ > 0 and M ≥ 1"));
    }
    let dot: f64 = t_embed.iter().zip(s_embed).map(|(a, b)| a * b).sum();
    let e = (dot / tau).exp();
    Ok(e / (e + n as f64 / m as f64))
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + log(1 + e^{-|x|})
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(1e-12)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Learned projections `G^S`, `G^T` into the shared embedding space.
pub struct CrdHead {
    student_w: Var,
    student_b: Var,
    teacher_w: Var,
    teacher_b: Var,
}

impl CrdHead {
    pub fn new(student_dim: usize, teacher_dim: usize, embed_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut var = |shape: &[usize], fan_in: usize| -> Result<Var> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let t = Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?;
            Ok(Var::from_tensor(&t)?)
        };
        Ok(Self {
            student_w: var(&[embed_dim, student_dim], student_dim)?,
            student_b: var(&[embed_dim], student_dim)?,
            teacher_w: var(&[embed_dim, teacher_dim], teacher_dim)?,
            teacher_b: var(&[embed_dim], teacher_dim)?,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.student_w.clone(),
            self.student_b.clone(),
            self.teacher_w.clone(),
            self.teacher_b.clone(),
        ]
    }

    /// Projects and L2-normalises both feature batches.
    pub fn embed(&self, student_feat: &Tensor, teacher_feat: &Tensor) -> Result<(Tensor, Tensor)> {
        let proj = |x: &Tensor, w: &Var, b: &Var| -> Result<Tensor> {
            l2_normalize(&x.matmul(&w.t()?)?.broadcast_add(b)?)
        };
        Ok((
            proj(student_feat, &self.student_w, &self.student_b)?,
            proj(teacher_feat, &self.teacher_w, &self.teacher_b)?,
        ))
    }
}

/// Per-sample memory of teacher and student embeddings, one row per
/// training-set position; the source of CRD negatives.
#[derive(Debug, Clone)]
pub struct CrdMemory {
    dataset_size: usize,
    embed_dim: usize,
    n_negatives: usize,
    momentum: f64,
    teacher_bank: Vec<f32>,
    student_bank: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bank {
    Teacher,
    Student,
}

fn normalize_into(row: &mut [f32], src: impl Iterator<Item = f64>) {
    let v: Vec<f64> = src.collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for (d, x) in row.iter_mut().zip(v) {
        *d = (x / norm) as f32;
    }
}

impl CrdMemory {
    /// Banks filled with random unit vectors.
    pub fn new(dataset_size: usize, embed_dim: usize, n_negatives: usize, momentum: f64, seed: u64) -> Result<Self> {
        if n_negatives == 0 || n_negatives >= dataset_size {
            return Err(Error::config(format!(
                "CRD needs 1 ≤ N < M, got N = {n_negatives}, M = {dataset_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = || {
            let mut b = vec![0f32; dataset_size * embed_dim];
            for row in b.chunks_exact_mut(embed_dim) {
                let g: Vec<f64> = (0..embed_dim).map(|_| rng.sample(StandardNormal)).collect();
                normalize_into(row, g.into_iter());
            }
            b
        };
        let teacher_bank = bank();
        let student_bank = bank();
        Ok(Self {
            dataset_size,
            embed_dim,
            n_negatives,
            momentum,
            teacher_bank,
            student_bank,
        })
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    pub fn n_negatives(&self) -> usize {
        self.n_negatives
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn row(&self, bank: Bank, i: usize) -> &[f32] {
        let b = match bank {
            Bank::Teacher => &self.teacher_bank,
            Bank::Student => &self.student_bank,
        };
        &b[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    /// Overwrites a bank row (normalised); used to set up controlled cases.
    pub fn set_row(&mut self, bank: Bank, i: usize, values: &[f64]) {
        let d = self.embed_dim;
        let b = match bank {
            Bank::Teacher => &mut self.teacher_bank,
            Bank::Student => &mut self.student_bank,
        };
        normalize_into(&mut b[i * d..(i + 1) * d], values.iter().copied());
    }

    /// Rows `idx` of a bank as a `len(idx) × D` tensor.
    pub fn gather(&self, bank: Bank, idx: &[u32], dtype: DType) -> Result<Tensor> {
        let mut out = Vec::with_capacity(idx.len() * self.embed_dim);
        for &i in idx {
            out.extend_from_slice(self.row(bank, i as usize));
        }
        Ok(Tensor::from_vec(out, (idx.len(), self.embed_dim), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Draws `N` negatives per sample uniformly with replacement from all
    /// rows except the sample's own.
    pub fn sample_negatives<R: Rng>(&self, indices: &[u32], rng: &mut R) -> Result<Negatives> {
        let m = self.dataset_size as u32;
        let mut idx = Vec::with_capacity(indices.len() * self.n_negatives);
        for &own in indices {
            if own >= m {
                return Err(Error::invalid(format!("sample index {own} outside memory of size {m}")));
            }
            for _ in 0..self.n_negatives {
                let j = rng.random_range(0..m - 1);
                idx.push(if j >= own { j + 1 } else { j });
            }
        }
        Ok(Negatives {
            per_sample: self.n_negatives,
            idx,
        })
    }

    /// Momentum update `row ← normalise(μ·row + (1 − μ)·new)` for each sample.
    pub fn update(&mut self, indices: &[u32], student_embed: &Tensor, teacher_embed: &Tensor) -> Result<()> {
        let s = student_embed.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let t = teacher_embed.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        if s.len() != indices.len() || t.len() != indices.len() {
            return Err(Error::Shape("embedding rows must match indices".into()));
        }
        let (mu, d) = (self.momentum, self.embed_dim);
        for ((&i, sr), tr) in indices.iter().zip(&s).zip(&t) {
            let i = i as usize;
            for (bank, new) in [(&mut self.student_bank, sr), (&mut self.teacher_bank, tr)] {
                let row = &mut bank[i * d..(i + 1) * d];
                let mixed: Vec<f64> = row
                    .iter()
                    .zip(new)
                    .map(|(&old, &n)| mu * old as f64 + (1.0 - mu) * n)
                    .collect();
                normalize_into(row, mixed.into_iter());
            }
        }
        Ok(())
    }
}

/// Negative indices, `per_sample` consecutive entries per batch row.
#[derive(Debug, Clone, PartialEq)]
pub struct Negatives {
    pub per_sample: usize,
    pub idx: Vec<u32>,
}

impl Negatives {
    pub fn select_rows(&self, rows: &[usize]) -> Negatives {
        let n = self.per_sample;
        Negatives {
            per_sample: n,
            idx: rows.iter().flat_map(|&r| self.idx[r * n..(r + 1) * n].iter().copied()).collect(),
        }
    }
}

/// The two halves of the CRD objective.
#[derive(Debug, Clone)]
pub struct CrdTerms {
    /// `−mean log h(t_i, s_i)`
    pub positive: Tensor,
    /// `N · mean −log(1 − h)` over negatives of both anchors
    pub negative: Tensor,
}

impl CrdTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.positive + &self.negative)?)
    }
}

/// CRD objective on unit embeddings.
///
/// `neg_teacher` (`B × N × D`) holds teacher-bank rows contrasted with each
/// student embedding; `neg_student` holds student-bank rows contrasted with
/// each teacher embedding.
pub fn crd_objective(
    student_embed: &Tensor,
    teacher_embed: &Tensor,
    neg_teacher: &Tensor,
    neg_student: &Tensor,
    tau: f64,
    dataset_size: usize,
) -> Result<CrdTerms> {
    let (_, n, _) = neg_teacher.dims3()?;
    let log_ratio = (n as f64 / dataset_size as f64).ln();
    let pos = ((student_embed * teacher_embed)?.sum(1)? / tau)?;
    let positive = softplus(&(pos.neg()? + log_ratio)?)?.mean_all()?;
    let score = |bank: &Tensor, anchor: &Tensor| -> Result<Tensor> {
        Ok((bank.matmul(&anchor.unsqueeze(2)?)?.squeeze(2)? / tau)?)
    };
    let neg_s = softplus(&(score(neg_teacher, student_embed)? - log_ratio)?)?.mean_all()?;
    let neg_t = softplus(&(score(neg_student, teacher_embed)? - log_ratio)?)?.mean_all()?;
    let negative = ((neg_s + neg_t)? * (0.5 * n as f64))?;
    Ok(CrdTerms { positive, negative })
}

/// Everything CRD needs besides the two feature batches.
pub struct CrdBatch<'a> {
    pub head: &'a CrdHead,
    pub memory: &'a CrdMemory,
    /// Training-set position of each batch row.
    pub indices: &'a [u32],
    pub negatives: &'a Negatives,
}

/// CRD loss on penultimate features; returns the loss and the two unit
/// embeddings for the subsequent memory update.
pub fn crd_loss(
    student_penult: &Tensor,
    teacher_penult: &Tensor,
    batch: &CrdBatch<'_>,
    tau: f64,
) -> Result<(CrdTerms, Tensor, Tensor)> {
    let b = student_penult.dim(0)?;
    let n = batch.negatives.per_sample;
    if batch.indices.len() != b || batch.negatives.idx.len() != b * n {
        return Err(Error::Shape("indices/negatives do not match the batch".into()));
    }
    let m = batch.memory.dataset_size();
    if n >= m {
        return Err(Error::config(format!("CRD needs N < M, got N = {n}, M = {m}")));
    }
    let (s, t) = batch.head.embed(student_penult, &teacher_penult.detach())?;
    let d = batch.memory.embed_dim();
    let dtype = s.dtype();
    let neg_t = batch.memory.gather(Bank::Teacher, &batch.negatives.idx, dtype)?.reshape((b, n, d))?;
    let neg_s = batch.memory.gather(Bank::Student, &batch.negatives.idx, dtype)?.reshape((b, n, d))?;
    let terms = crd_objective(&s, &t, &neg_t, &neg_s, tau, m)?;
    Ok((terms, s, t))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub kd: f64,
    pub crd: f64,
    pub total: f64,
}

pub struct JointLoss {
    pub total: Tensor,
    pub components: LossComponents,
    /// Rows, indices and embeddings to push into the CRD memory.
    pub memory_update: Option<(Vec<u32>, Tensor, Tensor)>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `α·KD + β·CRD + γ·CE`.
///
/// CE uses every student logit (so pseudo-open samples target class `k`);
/// KD compares the first `k` student logits with the `k` teacher logits.
/// Terms with zero weight are reported but kept out of the graph.
pub fn joint_loss(
    student: &ForwardOutput,
    teacher: &ForwardOutput,
    labels: &[u32],
    crd: Option<&CrdBatch<'_>>,
    cfg: &LossConfig,
) -> Result<JointLoss> {
    let (b, cs) = student.logits.dims2()?;
    let (bt, k) = teacher.logits.dims2()?;
    if b != bt || labels.len() != b {
        return Err(Error::Shape(format!("batch sizes differ: student {b}, teacher {bt}, labels {}", labels.len())));
    }
    if cs != k && cs != k + 1 {
        return Err(Error::Shape(format!("student has {cs} classes, teacher {k}; expected k or k+1")));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize > k) {
        return Err(Error::invalid(format!("label {l} exceeds unknown class {k}")));
    }

    let ce = cross_entropy(&student.logits, labels)?;

    let rows: Vec<usize> = (0..b)
        .filter(|&i| !cfg.distill_closed_only || (labels[i] as usize) < k)
        .collect();
    let zero = || Tensor::zeros((), student.logits.dtype(), student.logits.device());
    let (kd, crd_part) = if rows.is_empty() {
        (zero()?, None)
    } else {
        let (s_logits, t_logits, s_pen, t_pen) = if rows.len() == b {
            (student.logits.clone(), teacher.logits.clone(), student.penultimate.clone(), teacher.penultimate.clone())
        } else {
            let r: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
            let r = Tensor::from_vec(r, rows.len(), student.logits.device())?;
            (
                student.logits.index_select(&r, 0)?,
                teacher.logits.index_select(&r, 0)?,
                student.penultimate.index_select(&r, 0)?,
                teacher.penultimate.index_select(&r, 0)?,
            )
        };
        let kd = kd_loss(&s_logits.narrow(1, 0, k)?, &t_logits, cfg.tau_kd, cfg.kd_scale_by_tau_sq)?;
        let crd_part = match crd {
            Some(c) => {
                let idx: Vec<u32> = rows.iter().map(|&r| c.indices[r]).collect();
                let negs = c.negatives.select_rows(&rows);
                let sub = CrdBatch {
                    head: c.head,
                    memory: c.memory,
                    indices: &idx,
                    negatives: &negs,
                };
                let (terms, s, t) = crd_loss(&s_pen, &t_pen, &sub, cfg.tau_crd)?;
                Some((terms.total()?, (idx, s, t)))
            }
            None => None,
        };
        (kd, crd_part)
    };

    let mut total = zero()?;
    let mut add = |w: f64, term: &Tensor| -> Result<()> {
        if w != 0.0 {
            total = (&total + (term * w)?)?;
        }
        Ok(())
    };
    add(cfg.gamma, &ce)?;
    add(cfg.alpha, &kd)?;
    let (crd_value, memory_update) = match crd_part {
        Some((term, upd)) => {
            add(cfg.beta, &term)?;
            (scalar(&term)?, Some(upd))
        }
        None => (0.0, None),
    };

    let components = LossComponents {
        ce: scalar(&ce)?,
        kd: scalar(&kd)?,
        crd: crd_value,
        total: scalar(&total)?,
    };
    Ok(JointLoss {
        total,
        components,
        memory_update,
    })
}
