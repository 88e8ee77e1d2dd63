//! Teacher and student point-cloud classifiers.
//!
//! Teacher (PointNet with both alignment networks):
//!
//! ```text
//! input T-Net(3) → point MLP 64 → feature T-Net(64) → point MLP 128 → 1024
//!   → max-pool → FC 512 → FC 256 → FC k
//! ```
//!
//! Student: a single 3 → 1024 point layer, max-pool, and the same
//! 512-256-k head. Every learned layer except the logits is followed by
//! batch normalisation. For `k = 10` this gives 3,463,763 and 666,378
//! trainable scalars respectively.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PointCloud;
use crate::kernels;
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 256;
const GLOBAL_DIM: usize = 1024;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Teacher,
    Student,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Teacher => "teacher",
            Arch::Student => "student",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Arch::Teacher),
            "student" => Ok(Arch::Student),
            other => Err(Error::invalid(format!("unsupported architecture {other:?}"))),
        }
    }
}

struct Dense {
    weight: Var,
    bias: Var,
}

impl Dense {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

/// Dense + batch norm, with optional ReLU.
struct Block {
    dense: Dense,
    bn: BatchNorm,
    relu: bool,
}

impl Block {
    /// `x` is `rows × in`; batch statistics are taken over rows.
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let bn = &self.bn;
        if train {
            // the bias shifts the batch mean and nothing else
            let lin = x.matmul(&self.dense.weight.t()?)?;
            let rows = lin.dim(0)?;
            let (y, st) = kernels::batch_norm_train(&lin, &bn.gamma, &bn.beta, BN_EPS, self.relu)?;
            self.update_running(st, rows, &lin)?;
            Ok(y)
        } else {
            let y = self.affine_eval(x)?;
            Ok(if self.relu { y.relu()? } else { y })
        }
    }

    /// Forward pass followed by max-pooling over clouds of `points` rows.
    fn forward_pooled(&self, x: &Tensor, points: usize, train: bool) -> Result<Tensor> {
        if train {
            let lin = x.matmul(&self.dense.weight.t()?)?;
            let (y, st) = kernels::batch_norm_max_train(&lin, &self.bn.gamma, &self.bn.beta, BN_EPS, self.relu, points)?;
            self.update_running(st, lin.dim(0)?, &lin)?;
            Ok(y)
        } else {
            let y = self.affine_eval(x)?;
            let y = if self.relu { y.relu()? } else { y };
            let (rows, c) = y.dims2()?;
            Ok(kernels::max_over_points(&y.reshape((rows / points, points, c))?)?)
        }
    }

    fn update_running(&self, st: kernels::ChannelStats, rows: usize, like: &Tensor) -> Result<()> {
        let bn = &self.bn;
        let c = st.mean.len();
        let dtype = like.dtype();
        let mean = (Tensor::from_vec(st.mean, c, like.device())?.to_dtype(dtype)? + self.dense.bias.as_tensor())?;
        let unbiased =
            (Tensor::from_vec(st.var, c, like.device())?.to_dtype(dtype)? * (rows as f64 / (rows.max(2) - 1) as f64))?;
        bn.running_mean
            .set(&((bn.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean * BN_MOMENTUM)?)?)?;
        bn.running_var
            .set(&((bn.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?)?;
        Ok(())
    }

    fn affine_eval(&self, x: &Tensor) -> Result<Tensor> {
        // normalisation and bias folded into one affine map
        let bn = &self.bn;
        let scale = bn.gamma.broadcast_div(&(bn.running_var.as_tensor() + BN_EPS)?.sqrt()?)?;
        let shift = (bn.beta.as_tensor() + (self.dense.bias.as_tensor() - bn.running_mean.as_tensor())?.mul(&scale)?)?;
        Ok(x.matmul(&self.dense.weight.t()?)?.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

struct Builder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl Builder {
    fn var(&mut self, name: String, shape: &[usize], values: Vec<f64>, trainable: bool) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        if trainable {
            self.params.push((name, v.clone()));
        } else {
            self.buffers.push((name, v.clone()));
        }
        Ok(v)
    }

    /// Uniform(±1/√fan_in) for weights and bias, the usual default for
    /// linear and 1×1 convolution layers.
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Dense> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
        };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        Ok(Dense {
            weight: self.var(format!("{name}.weight"), &[fan_out, fan_in], w, true)?,
            bias: self.var(format!("{name}.bias"), &[fan_out], b, true)?,
        })
    }

    /// All-zero weights and bias, so an added identity starts exact.
    fn zero_dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Dense> {
        Ok(Dense {
            weight: self.var(format!("{name}.weight"), &[fan_out, fan_in], vec![0.0; fan_in * fan_out], true)?,
            bias: self.var(format!("{name}.bias"), &[fan_out], vec![0.0; fan_out], true)?,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.var(format!("{name}.weight"), &[c], vec![1.0; c], true)?,
            beta: self.var(format!("{name}.bias"), &[c], vec![0.0; c], true)?,
            running_mean: self.var(format!("{name}.running_mean"), &[c], vec![0.0; c], false)?,
            running_var: self.var(format!("{name}.running_var"), &[c], vec![1.0; c], false)?,
        })
    }

    fn block(&mut self, prefix: &str, idx: usize, fan_in: usize, fan_out: usize, relu: bool, conv: bool) -> Result<Block> {
        let layer = if conv { "conv" } else { "fc" };
        Ok(Block {
            dense: self.dense(&format!("{prefix}.{layer}{idx}"), fan_in, fan_out)?,
            bn: self.bn(&format!("{prefix}.bn{}", if conv { idx } else { idx + 3 }), fan_out)?,
            relu,
        })
    }
}

/// Alignment network predicting a `k × k` transform per cloud.
struct TNet {
    k: usize,
    point_mlp: Vec<Block>,
    fc: Vec<Block>,
    out: Dense,
}

impl TNet {
    fn new(b: &mut Builder, prefix: &str, k: usize) -> Result<Self> {
        Ok(Self {
            k,
            point_mlp: vec![
                b.block(prefix, 1, k, 64, true, true)?,
                b.block(prefix, 2, 64, 128, true, true)?,
                b.block(prefix, 3, 128, GLOBAL_DIM, true, true)?,
            ],
            fc: vec![
                b.block(prefix, 1, GLOBAL_DIM, 512, true, false)?,
                b.block(prefix, 2, 512, 256, true, false)?,
            ],
            out: b.zero_dense(&format!("{prefix}.fc3"), 256, k * k)?,
        })
    }

    /// `x`: `(B·N) × k` point features → `B × k × k`.
    fn forward(&self, x: &Tensor, batch: usize, n: usize, train: bool) -> Result<Tensor> {
        let (last, hidden) = self.point_mlp.split_last().expect("point MLP is non-empty");
        let mut h = x.clone();
        for blk in hidden {
            h = blk.forward(&h, train)?;
        }
        let mut g = last.forward_pooled(&h, n, train)?;
        debug_assert_eq!(g.dims2()?, (batch, GLOBAL_DIM));
        for blk in &self.fc {
            g = blk.forward(&g, train)?;
        }
        let eye = Tensor::eye(self.k, x.dtype(), x.device())?.reshape((1, self.k * self.k))?;
        Ok(self.out.forward(&g)?.broadcast_add(&eye)?.reshape((batch, self.k, self.k))?)
    }
}

struct Head {
    fc1: Block,
    fc2: Block,
    logits: Dense,
}

impl Head {
    fn new(b: &mut Builder, num_classes: usize) -> Result<Self> {
        Ok(Self {
            fc1: b.block("head", 1, GLOBAL_DIM, 512, true, false)?,
            fc2: b.block("head", 2, 512, FEATURE_DIM, true, false)?,
            logits: b.dense("head.fc3", FEATURE_DIM, num_classes)?,
        })
    }

    fn forward(&self, global: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let h = self.fc1.forward(global, train)?;
        let penultimate = self.fc2.forward(&h, train)?;
        let logits = self.logits.forward(&penultimate)?;
        Ok((penultimate, logits))
    }
}

enum Net {
    Teacher {
        input_tnet: TNet,
        conv1: Block,
        feature_tnet: TNet,
        conv2: Block,
        conv3: Block,
        head: Head,
    },
    Student {
        conv1: Block,
        head: Head,
    },
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × FEATURE_DIM` features feeding the logit layer.
    pub penultimate: Tensor,
    /// `B × num_classes`.
    pub logits: Tensor,
    /// Teacher only: `[B × 3 × 3 input transform, B × 64 × 64 feature transform]`.
    pub transform_matrices: Option<Vec<Tensor>>,
}

pub struct ModelHandle {
    arch: Arch,
    num_classes: usize,
    seed: u64,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
    net: Net,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("arch", &self.arch)
            .field("num_classes", &self.num_classes)
            .field("seed", &self.seed)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

pub fn build_model(arch: Arch, num_classes: usize, rng_seed: u64) -> Result<ModelHandle> {
    build_model_with(arch, num_classes, rng_seed, DType::F32)
}

pub fn build_model_with(arch: Arch, num_classes: usize, rng_seed: u64, dtype: DType) -> Result<ModelHandle> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("num_classes must be at least 2, got {num_classes}")));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        dtype,
        device: Device::Cpu,
        params: Vec::new(),
        buffers: Vec::new(),
    };
    let net = match arch {
        Arch::Teacher => Net::Teacher {
            input_tnet: TNet::new(&mut b, "stn", 3)?,
            conv1: b.block("feat", 1, 3, 64, true, true)?,
            feature_tnet: TNet::new(&mut b, "fstn", 64)?,
            conv2: b.block("feat", 2, 64, 128, true, true)?,
            conv3: b.block("feat", 3, 128, GLOBAL_DIM, false, true)?,
            head: Head::new(&mut b, num_classes)?,
        },
        Arch::Student => Net::Student {
            conv1: b.block("feat", 1, 3, GLOBAL_DIM, false, true)?,
            head: Head::new(&mut b, num_classes)?,
        },
    };
    Ok(ModelHandle {
        arch,
        num_classes,
        seed: rng_seed,
        params: b.params,
        buffers: b.buffers,
        net,
    })
}

impl ModelHandle {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_parameters(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params[0].1.dtype()
    }

    /// `batch` is `B × N × 3`. `train` selects batch statistics (and updates
    /// the running estimates) instead of the stored running estimates.
    pub fn forward(&self, batch: &Tensor, train: bool) -> Result<ForwardOutput> {
        let (b, n, c) = batch.dims3()?;
        if c != 3 || n == 0 || b == 0 {
            return Err(Error::Shape(format!("expected B × N × 3 with B, N ≥ 1, got {:?}", batch.dims())));
        }
        let check = batch.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::invalid("input batch contains non-finite coordinates"));
        }
        let x = batch.to_dtype(self.dtype())?;
        match &self.net {
            Net::Teacher {
                input_tnet,
                conv1,
                feature_tnet,
                conv2,
                conv3,
                head,
            } => {
                let t_in = input_tnet.forward(&x.reshape((b * n, 3))?, b, n, train)?;
                let x = x.matmul(&t_in)?.reshape((b * n, 3))?;
                let h = conv1.forward(&x, train)?;
                let t_feat = feature_tnet.forward(&h, b, n, train)?;
                let h = h.reshape((b, n, 64))?.matmul(&t_feat)?.reshape((b * n, 64))?;
                let global = conv3.forward_pooled(&conv2.forward(&h, train)?, n, train)?;
                let (penultimate, logits) = head.forward(&global, train)?;
                Ok(ForwardOutput {
                    penultimate,
                    logits,
                    transform_matrices: Some(vec![t_in, t_feat]),
                })
            }
            Net::Student { conv1, head } => {
                let global = conv1.forward_pooled(&x.reshape((b * n, 3))?, n, train)?;
                let (penultimate, logits) = head.forward(&global, train)?;
                Ok(ForwardOutput {
                    penultimate,
                    logits,
                    transform_matrices: None,
                })
            }
        }
    }

    pub fn forward_clouds(&self, clouds: &[&PointCloud], train: bool) -> Result<ForwardOutput> {
        self.forward(&clouds_to_tensor(clouds)?, train)
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        // A single metadata entry: the header map is unordered, so several
        // keys would make the file bytes vary between identical saves.
        let mut fields = BTreeMap::new();
        fields.insert("format", CHECKPOINT_FORMAT.to_string());
        fields.insert("arch", self.arch.to_string());
        fields.insert("num_classes", self.num_classes.to_string());
        fields.insert("seed", self.seed.to_string());
        fields.insert("regime", meta.regime.clone());
        fields.insert("meta", serde_json::to_string(meta)?);
        let info = HashMap::from([(CHECKPOINT_KEY.to_string(), serde_json::to_string(&fields)?)]);
        let tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .chain(&self.buffers)
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        safetensors::serialize_to_file(tensors, Some(info), path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let ck_err = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(CHECKPOINT_KEY))
            .ok_or_else(|| ck_err("unrecognised checkpoint format".into()))?;
        let info: BTreeMap<String, String> = serde_json::from_str(raw).map_err(|e| ck_err(e.to_string()))?;
        let get = |k: &str| info.get(k).cloned().ok_or_else(|| ck_err(format!("missing metadata {k:?}")));
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(ck_err("unrecognised checkpoint format".into()));
        }
        let arch: Arch = get("arch")?.parse()?;
        let num_classes: usize = get("num_classes")?.parse().map_err(|_| ck_err("bad num_classes".into()))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| ck_err("bad seed".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(&get("meta")?)?;

        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let dtype = tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| ck_err("no tensors".into()))?;
        let model = build_model_with(arch, num_classes, seed, dtype)?;
        for (name, var) in model.params.iter().chain(&model.buffers) {
            let t = tensors.get(name).ok_or_else(|| ck_err(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(ck_err(format!("tensor {name} has shape {:?}, expected {:?}", t.dims(), var.dims())));
            }
            var.set(t)?;
        }
        if tensors.len() != model.params.len() + model.buffers.len() {
            return Err(ck_err("unexpected extra tensors".into()));
        }
        Ok((model, meta))
    }

    /// Flat copy of every parameter and buffer, for bit-level comparisons.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(n, v)| Ok((n.clone(), v.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)))
            .collect()
    }
}

const CHECKPOINT_FORMAT: &str = "osrkd-checkpoint-v1";
const CHECKPOINT_KEY: &str = "osrkd";

/// Training metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub regime: String,
    pub epochs: usize,
    pub class_names: Vec<String>,
    pub n_points: usize,
}

/// Stacks clouds of equal size into a `B × N × 3` f32 tensor.
pub fn clouds_to_tensor(clouds: &[&PointCloud]) -> Result<Tensor> {
    let n = clouds.first().map(|c| c.len()).ok_or_else(|| Error::invalid("empty batch"))?;
    if clouds.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("clouds in a batch must have equal point counts".into()));
    }
    let flat: Vec<f32> = clouds.iter().flat_map(|c| c.flat()).collect();
    Ok(Tensor::from_vec(flat, (clouds.len(), n, 3), &Device::Cpu)?)
}

/// Orthogonality penalty `‖I − A·Aᵀ‖²_F`, averaged over a `B × K × K` batch
/// of transforms (a single `K × K` matrix is treated as a batch of one).
pub fn transform_regularizer(transforms: &Tensor) -> Result<Tensor> {
    let a = match transforms.rank() {
        2 => transforms.unsqueeze(0)?,
        3 => transforms.clone(),
        _ => return Err(Error::Shape(format!("expected square matrices, got {:?}", transforms.dims()))),
    };
    let (_, r, c) = a.dims3()?;
    if r != c {
        return Err(Error::Shape(format!("transform is {r}×{c}, not square")));
    }
    let eye = Tensor::eye(r, a.dtype(), a.device())?.unsqueeze(0)?;
    let diff = eye.broadcast_sub(&a.matmul(&a.transpose(1, 2)?)?)?;
    Ok(diff.sqr()?.sum((1, 2))?.mean(0)?)
}

/// Index of the largest entry in each row of `B × C` logits or probabilities;
/// ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let rows = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Softmax over the last dimension.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}
