//! The staged classifier: patch embedding, shift-transformer stages with
//! downsampling merges, global pooling, and the normalized prediction head.
//! Also home of the model-level Lipschitz report and the checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{
    AvgPoolLayer, CenterNorm, LiResConv, LlnHead, PatchEmbed, PatchMerge, PoolKind, ShiftLayer,
};
use crate::ops;
use crate::scalar::Scalar;
use crate::spectral::SigmaEstimate;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Deterministic per-site seed derivation.
fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Architecture configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub input_channels: usize,
    /// Side length of the (square) input image.
    pub input_size: usize,
    pub patch_size: usize,
    /// Blocks per stage; stages are separated by 2x2 patch merges.
    pub stage_depths: Vec<usize>,
    /// Channel width per stage.
    pub embed_dims: Vec<usize>,
    /// Fraction of channels shifted per direction in every block.
    pub shift_fraction: f64,
    /// Stochastic-depth / dropout rate.
    pub p_drop: f64,
    pub num_classes: usize,
}

impl ArchConfig {
    /// Small configuration that trains in seconds on synthetic data.
    pub fn desk() -> Self {
        ArchConfig {
            input_channels: 3,
            input_size: 8,
            patch_size: 1,
            stage_depths: vec![1, 1, 1, 1],
            embed_dims: vec![16, 16, 16, 16],
            shift_fraction: 0.125,
            p_drop: 0.0,
            num_classes: 2,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Spatial side length at the input of each stage (after the patch embed
    /// and any preceding merges).
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size / self.patch_size;
        let mut out = Vec::with_capacity(self.num_stages());
        for _ in 0..self.num_stages() {
            out.push(s);
            s /= 2;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.is_empty() {
            return Err(Error::config("stage_depths", "need at least one stage"));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::config("stage_depths", "every stage needs >= 1 block"));
        }
        if self.embed_dims.len() != self.stage_depths.len() {
            return Err(Error::config(
                "embed_dims",
                format!(
                    "{} dims for {} stages",
                    self.embed_dims.len(),
                    self.stage_depths.len()
                ),
            ));
        }
        if self.embed_dims.iter().any(|&d| d == 0 || d % 2 != 0) {
            return Err(Error::config("embed_dims", "dims must be positive and even"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least two classes"));
        }
        if self.patch_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!("{} does not divide input size {}", self.patch_size, self.input_size),
            ));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::config("p_drop", format!("must be in [0, 1), got {}", self.p_drop)));
        }
        let mut s = self.input_size / self.patch_size;
        for stage in 0..self.num_stages() {
            if s == 0 {
                return Err(Error::config(
                    "stage_depths",
                    format!("feature map vanishes before stage {stage}"),
                ));
            }
            // validates the shift group size against this stage's width
            ShiftLayer::new(self.embed_dims[stage], self.shift_fraction)?;
            if stage + 1 < self.num_stages() {
                if !s.is_multiple_of(2) {
                    return Err(Error::config(
                        "input_size",
                        format!("stage {stage} size {s} is not divisible by the 2x2 merge"),
                    ));
                }
                s /= 2;
            }
        }
        Ok(())
    }

    /// Flat `key = value` serialization (embedded in checkpoints).
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        format!(
            "input_channels = {}\ninput_size = {}\npatch_size = {}\nstage_depths = {}\n\
             embed_dims = {}\nshift_fraction = {}\np_drop = {}\nnum_classes = {}\n",
            self.input_channels,
            self.input_size,
            self.patch_size,
            join(&self.stage_depths),
            join(&self.embed_dims),
            self.shift_fraction,
            self.p_drop,
            self.num_classes,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ArchConfig::desk();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config("arch", format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let usize_of = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::config(key, format!("`{v}` is not a non-negative integer")))
            };
            let f64_of = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::config(key, format!("`{v}` is not a number")))
            };
            let list_of = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .map(|p| {
                        p.trim().parse().map_err(|_| {
                            Error::config(key, format!("`{p}` is not a non-negative integer"))
                        })
                    })
                    .collect()
            };
            match key {
                "input_channels" => cfg.input_channels = usize_of(value)?,
                "input_size" => cfg.input_size = usize_of(value)?,
                "patch_size" => cfg.patch_size = usize_of(value)?,
                "stage_depths" => cfg.stage_depths = list_of(value)?,
                "embed_dims" => cfg.embed_dims = list_of(value)?,
                "shift_fraction" => cfg.shift_fraction = f64_of(value)?,
                "p_drop" => cfg.p_drop = f64_of(value)?,
                "num_classes" => cfg.num_classes = usize_of(value)?,
                other => {
                    return Err(Error::config(other, "unknown architecture field"));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ShiftBlock<S> {
    pub shift: ShiftLayer,
    pub norm: CenterNorm<S>,
    pub conv: LiResConv<S>,
}

#[derive(Debug, Clone)]
pub struct Stage<S> {
    pub blocks: Vec<ShiftBlock<S>>,
    pub merge: Option<PatchMerge<S>>,
}

#[derive(Debug, Clone)]
pub struct LipShiFTModel<S> {
    pub cfg: ArchConfig,
    pub patch_embed: PatchEmbed<S>,
    pub stages: Vec<Stage<S>>,
    pub pool: AvgPoolLayer,
    pub head: LlnHead<S>,
}

/// Tape leaves for every parameter, in [`LipShiFTModel::params`] order.
pub struct TapedParams {
    pub vars: Vec<Var>,
}

/// Differentiable certification constants for the current parameters.
pub struct TapedBound {
    /// Product of per-layer Lipschitz bounds, head excluded.
    pub backbone: Var,
    /// Backbone discounted by `(1 - p_drop)`.
    pub scaled: Var,
    /// `[classes, classes]` pairwise distances of normalized head rows.
    pub pair_constants: Var,
}

#[derive(Debug, Clone)]
pub struct LayerBound {
    pub name: String,
    pub bound: f64,
    pub converged: bool,
}

/// Frozen-parameter Lipschitz accounting for reporting and certification.
#[derive(Debug, Clone)]
pub struct LipschitzReport {
    pub per_layer: Vec<LayerBound>,
    pub backbone_bound: f64,
    pub scaled_bound: f64,
    /// Pairwise distances of normalized head rows, in `[0, 2]`.
    pub pair_constants: Tensor<f64>,
    /// Head rows that fell back to the unnormalized path.
    pub head_degenerate: Vec<usize>,
}

impl LipschitzReport {
    /// Per-pair margin Lipschitz constants `K[i][j]` used by certification:
    /// row distances times the backbone product (optionally the drop-scaled
    /// product).
    pub fn cert_constants(&self, drop_scaling: bool) -> Tensor<f64> {
        let l = if drop_scaling { self.scaled_bound } else { self.backbone_bound };
        self.pair_constants.scale(l)
    }
}

impl<S: Scalar> LipShiFTModel<S> {
    pub fn build(cfg: ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut salt = 0u64;
        let mut next_seed = || {
            salt += 1;
            mix(seed, salt)
        };
        let patch_embed = PatchEmbed::new(
            cfg.patch_size,
            cfg.input_channels,
            cfg.embed_dims[0],
            next_seed(),
        );
        let mut stages = Vec::with_capacity(cfg.num_stages());
        for s in 0..cfg.num_stages() {
            let dim = cfg.embed_dims[s];
            let blocks = (0..cfg.stage_depths[s])
                .map(|_| {
                    Ok(ShiftBlock {
                        shift: ShiftLayer::new(dim, cfg.shift_fraction)?,
                        norm: CenterNorm::new(dim),
                        conv: LiResConv::new(dim, next_seed()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let merge = if s + 1 < cfg.num_stages() {
                Some(PatchMerge::new(2, dim, cfg.embed_dims[s + 1], next_seed()))
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        let head = LlnHead::new(cfg.num_classes, *cfg.embed_dims.last().unwrap(), next_seed());
        Ok(LipShiFTModel {
            cfg,
            patch_embed,
            stages,
            pool: AvgPoolLayer { kind: PoolKind::Global },
            head,
        })
    }

    /// Named parameters in a fixed traversal order; [`TapedParams`] and the
    /// checkpoint format use the same order.
    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("patch_embed.w".into(), &self.patch_embed.w),
            ("patch_embed.b".into(), &self.patch_embed.b),
        ];
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                out.push((format!("stage{s}.block{b}.norm.gamma"), &block.norm.gamma));
                out.push((format!("stage{s}.block{b}.norm.beta"), &block.norm.beta));
                out.push((format!("stage{s}.block{b}.conv.w"), &block.conv.w));
                out.push((format!("stage{s}.block{b}.conv.b"), &block.conv.b));
            }
            if let Some(m) = &stage.merge {
                out.push((format!("stage{s}.merge.w"), &m.w));
                out.push((format!("stage{s}.merge.b"), &m.b));
            }
        }
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("patch_embed.w".into(), &mut self.patch_embed.w),
            ("patch_embed.b".into(), &mut self.patch_embed.b),
        ];
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                out.push((format!("stage{s}.block{b}.norm.gamma"), &mut block.norm.gamma));
                out.push((format!("stage{s}.block{b}.norm.beta"), &mut block.norm.beta));
                out.push((format!("stage{s}.block{b}.conv.w"), &mut block.conv.w));
                out.push((format!("stage{s}.block{b}.conv.b"), &mut block.conv.b));
            }
            if let Some(m) = &mut stage.merge {
                out.push((format!("stage{s}.merge.w"), &mut m.w));
                out.push((format!("stage{s}.merge.b"), &mut m.b));
            }
        }
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.b".into(), &mut self.head.b));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Pushes every parameter as a tape leaf.
    pub fn stage_params(&self, tape: &mut Tape<S>) -> TapedParams {
        let vars = self
            .params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        TapedParams { vars }
    }

    /// Forward pass on the tape. `x` must be an `[N,H,W,C]` leaf (use
    /// [`ops::nchw_to_nhwc`] on dataset tensors first); `seed` drives the
    /// stochastic regularizers when `training` is set.
    pub fn forward_t(
        &self,
        tape: &mut Tape<S>,
        tp: &TapedParams,
        x: Var,
        training: bool,
        seed: u64,
    ) -> Result<Var> {
        let mut idx = 0usize;
        let next = |idx: &mut usize| {
            let v = tp.vars[*idx];
            *idx += 1;
            v
        };
        let p = self.cfg.p_drop;
        let (pe_w, pe_b) = (next(&mut idx), next(&mut idx));
        let mut x = self.patch_embed.forward_t(tape, x, pe_w, pe_b)?;
        let mut site = 0u64;
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.shift.forward_t(tape, x)?;
                let shape = tape.value(x).shape().to_vec();
                let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                let flat = tape.reshape(x, vec![n * h * w, c])?;
                let (g, be) = (next(&mut idx), next(&mut idx));
                let y = block.norm.forward_t(tape, flat, g, be)?;
                let (wv, bv) = (next(&mut idx), next(&mut idx));
                site += 1;
                let drop = if training && p > 0.0 {
                    Some((p, mix(seed, site), n))
                } else {
                    None
                };
                let y = block.conv.forward_t(tape, y, wv, bv, drop)?;
                let y = tape.maxmin(y)?;
                site += 1;
                let y = if training && p > 0.0 {
                    tape.dropout(y, p, mix(seed, site))?
                } else {
                    y
                };
                x = tape.reshape(y, vec![n, h, w, c])?;
            }
            if let Some(m) = &stage.merge {
                let (wv, bv) = (next(&mut idx), next(&mut idx));
                x = m.forward_t(tape, x, wv, bv)?;
            }
        }
        let pooled = self.pool.forward_t(tape, x)?;
        let (hw, hb) = (next(&mut idx), next(&mut idx));
        self.head.forward_t(tape, pooled, hw, hb)
    }

    /// Evaluation-mode logits for a `[N,C,H,W]` batch.
    pub fn forward(&self, x_nchw: &Tensor<S>) -> Result<Tensor<S>> {
        let nhwc = ops::nchw_to_nhwc(x_nchw)?;
        let mut tape = Tape::new();
        let tp = self.stage_params(&mut tape);
        let xv = tape.leaf(nhwc);
        let z = self.forward_t(&mut tape, &tp, xv, false, 0)?;
        Ok(tape.value(z).clone())
    }

    /// Argmax class per sample (first index on exact ties).
    pub fn predict(&self, x_nchw: &Tensor<S>) -> Result<Vec<usize>> {
        let z = self.forward(x_nchw)?;
        let (n, c) = (z.shape()[0], z.shape()[1]);
        Ok((0..n)
            .map(|i| {
                let row = &z.data()[i * c..(i + 1) * c];
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Differentiable Lipschitz bound of the current (taped) parameters.
    /// The spectral norms are re-run to tolerance on every call, so the value
    /// tracks the parameters exactly; the pooling factor is a constant.
    pub fn bound_t(&self, tape: &mut Tape<S>, tp: &TapedParams) -> Result<TapedBound> {
        let mut idx = 0usize;
        let next = |idx: &mut usize| {
            let v = tp.vars[*idx];
            *idx += 1;
            v
        };
        let (pe_w, _) = (next(&mut idx), next(&mut idx));
        let mut salt = 0xB0u64;
        let mut prod = self.patch_embed.bound_t(tape, pe_w, mix(salt, 1))?;
        for stage in &self.stages {
            for block in &stage.blocks {
                let (g, _) = (next(&mut idx), next(&mut idx));
                let gb = block.norm.bound_t(tape, g);
                prod = tape.mul(prod, gb)?;
                let (wv, _) = (next(&mut idx), next(&mut idx));
                salt += 1;
                let cb = block.conv.bound_t(tape, wv, mix(salt, 1))?;
                prod = tape.mul(prod, cb)?;
            }
            if let Some(m) = &stage.merge {
                let (wv, _) = (next(&mut idx), next(&mut idx));
                salt += 1;
                let mb = m.bound_t(tape, wv, mix(salt, 1))?;
                prod = tape.mul(prod, mb)?;
            }
        }
        let last = self.cfg.num_stages() - 1;
        let size = self.cfg.stage_sizes()[last];
        let pool_bound = self
            .pool
            .bound::<S>(size, size, self.cfg.embed_dims[last], 0)?
            .bound();
        let backbone = tape.scale(prod, S::from_f(pool_bound));
        let scaled = tape.scale(backbone, S::from_f(1.0 - self.cfg.p_drop));
        let (hw, _) = (next(&mut idx), next(&mut idx));
        let pair_constants = self.head.pair_constants_t(tape, hw)?;
        Ok(TapedBound { backbone, scaled, pair_constants })
    }

    /// Frozen-parameter Lipschitz accounting with fresh power iterations.
    pub fn lipschitz_report(&self, seed: u64) -> Result<LipschitzReport> {
        let mut per_layer = Vec::new();
        let push = |name: String, est: SigmaEstimate, per_layer: &mut Vec<LayerBound>| {
            per_layer.push(LayerBound { name, bound: est.bound(), converged: est.converged });
        };
        let exact = |v: f64| SigmaEstimate {
            value: v,
            iterations_used: 0,
            converged: true,
            tolerance: 0.0,
        };
        push(
            "patch_embed".into(),
            self.patch_embed.bound(mix(seed, 1))?,
            &mut per_layer,
        );
        let mut salt = 1u64;
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                push(format!("stage{s}.block{b}.shift"), exact(block.shift.bound()), &mut per_layer);
                push(format!("stage{s}.block{b}.norm"), exact(block.norm.bound()), &mut per_layer);
                salt += 1;
                push(
                    format!("stage{s}.block{b}.conv"),
                    block.conv.bound(mix(seed, salt))?,
                    &mut per_layer,
                );
                push(format!("stage{s}.block{b}.maxmin"), exact(1.0), &mut per_layer);
            }
            if let Some(m) = &stage.merge {
                salt += 1;
                push(format!("stage{s}.merge"), m.bound(mix(seed, salt))?, &mut per_layer);
            }
        }
        let last = self.cfg.num_stages() - 1;
        let size = self.cfg.stage_sizes()[last];
        push(
            "pool".into(),
            self.pool.bound::<S>(size, size, self.cfg.embed_dims[last], mix(seed, salt + 1))?,
            &mut per_layer,
        );
        let backbone_bound = per_layer.iter().map(|l| l.bound).product();
        let khat = self.head.pair_constants();
        let pair_constants =
            Tensor::from_fn(khat.shape().to_vec(), |i| khat.data()[i].to_f());
        Ok(LipschitzReport {
            per_layer,
            backbone_bound,
            scaled_bound: backbone_bound * (1.0 - self.cfg.p_drop),
            pair_constants,
            head_degenerate: self.head.degenerate_rows(),
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LSFT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32(w: &mut impl IoWrite, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl IoWrite, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl IoRead, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("checkpoint truncated while reading {what}: {e}")))
}

fn read_u32(r: &mut impl IoRead, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl IoRead, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("implausible {what} length {len}")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
}

impl<S: Scalar> LipShiFTModel<S> {
    /// Serializes the architecture and all parameters (f32 payload,
    /// little-endian). Saving an `f32` model and reloading is lossless.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        write_str(&mut w, &self.cfg.to_text())?;
        let params = self.params();
        write_u32(&mut w, params.len() as u32)?;
        for (name, t) in params {
            write_str(&mut w, &name)?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                write_u32(&mut w, d as u32)?;
            }
            for &v in t.data() {
                w.write_all(&(v.to_f() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let cfg = ArchConfig::from_text(&read_str(&mut r, "architecture")?)?;
        let count = read_u32(&mut r, "parameter count")? as usize;
        let mut loaded: Vec<(String, Tensor<S>)> = Vec::with_capacity(count);
        for i in 0..count {
            let name = read_str(&mut r, &format!("parameter {i} name"))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, &format!("{name} rank"))?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r, &format!("{name} dims"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b, &format!("{name} data"))?;
                data.push(S::from_f(f32::from_le_bytes(b) as f64));
            }
            loaded.push((name, Tensor::new(shape, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        let mut model = LipShiFTModel::build(cfg, 0)?;
        let params = model.params_mut();
        if params.len() != loaded.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture expects {}",
                loaded.len(),
                params.len()
            )));
        }
        for ((name, slot), (got_name, tensor)) in params.into_iter().zip(loaded) {
            if name != got_name {
                return Err(Error::Format(format!(
                    "checkpoint parameter `{got_name}` where `{name}` was expected"
                )));
            }
            if slot.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(n: usize, cfg: &ArchConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(
            vec![n, cfg.input_channels, cfg.input_size, cfg.input_size],
            |_| rng.gen_range(0.0..1.0),
        )
    }

    #[test]
    fn desk_config_validates() {
        ArchConfig::desk().validate().unwrap();
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = ArchConfig::desk();
        cfg.p_drop = 0.1;
        cfg.shift_fraction = 1.0 / 8.0;
        let parsed = ArchConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn config_rejects_unknown_key() {
        let err = ArchConfig::from_text("nonsense = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let model = LipShiFTModel::<f64>::build(ArchConfig::desk(), 42).unwrap();
        let x = random_input(3, &model.cfg, 1);
        let z = model.forward(&x).unwrap();
        assert_eq!(z.shape(), &[3, 2]);
        assert!(z.is_finite());
    }

    #[test]
    fn init_backbone_bound_is_near_one() {
        let model = LipShiFTModel::<f64>::build(ArchConfig::desk(), 7).unwrap();
        let report = model.lipschitz_report(0).unwrap();
        // Every affine layer is spectrally normalized at init, so the product
        // stays within float error of the pooling factor alone.
        let affine_layers = 8; // patch embed + 4 convs + 3 merges
        assert!(report.backbone_bound <= 1.05f64.powi(affine_layers));
        assert!(report.per_layer.iter().all(|l| l.converged));
        assert_relative_eq!(report.scaled_bound, report.backbone_bound);
    }

    #[test]
    fn taped_bound_matches_report() {
        let model = LipShiFTModel::<f64>::build(ArchConfig::desk(), 3).unwrap();
        let report = model.lipschitz_report(0).unwrap();
        let mut tape = Tape::new();
        let tp = model.stage_params(&mut tape);
        let tb = model.bound_t(&mut tape, &tp).unwrap();
        assert_relative_eq!(
            tape.value(tb.backbone).item(),
            report.backbone_bound,
            max_relative = 1e-6
        );
        let k = tape.value(tb.pair_constants);
        for (a, b) in k.data().iter().zip(report.pair_constants.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_lossless_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lsft");
        let model = LipShiFTModel::<f32>::build(ArchConfig::desk(), 9).unwrap();
        model.save_checkpoint(&path).unwrap();
        let reloaded = LipShiFTModel::<f32>::load_checkpoint(&path).unwrap();
        for ((n1, t1), (n2, t2)) in model.params().iter().zip(reloaded.params()) {
            assert_eq!(*n1, n2);
            assert_eq!(t1.data(), t2.data(), "parameter {n1} changed in roundtrip");
        }
        let path2 = dir.path().join("m2.lsft");
        reloaded.save_checkpoint(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_truncation_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lsft");
        let model = LipShiFTModel::<f32>::build(ArchConfig::desk(), 9).unwrap();
        model.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = LipShiFTModel::<f32>::load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let model = LipShiFTModel::<f64>::build(ArchConfig::desk(), 5).unwrap();
        let x = random_input(2, &model.cfg, 2);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn model_is_empirically_lipschitz() {
        // Random + ascent probes on the full network never exceed the
        // certified backbone product times the worst head pair constant.
        let model = LipShiFTModel::<f64>::build(ArchConfig::desk(), 11).unwrap();
        let report = model.lipschitz_report(0).unwrap();
        let kmax = report
            .pair_constants
            .data()
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        // logits themselves are 1-Lipschitz in the head input (unit rows), so
        // the full-map constant is bounded by backbone * sqrt(classes).
        let limit = report.backbone_bound * (model.cfg.num_classes as f64).sqrt();
        assert!(kmax <= 2.0 + 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = vec![
            1,
            model.cfg.input_channels,
            model.cfg.input_size,
            model.cfg.input_size,
        ];
        for _ in 0..50 {
            let a = Tensor::from_fn(shape.clone(), |_| rng.gen_range(-1.0..1.0));
            let b = Tensor::from_fn(shape.clone(), |_| rng.gen_range(-1.0..1.0));
            let za = model.forward(&a).unwrap();
            let zb = model.forward(&b).unwrap();
            let num = za.sub(&zb).unwrap().norm_l2();
            let den = a.sub(&b).unwrap().norm_l2();
            if den > 1e-9 {
                assert!(
                    num / den <= limit * (1.0 + 1e-6),
                    "ratio {} exceeds {}",
                    num / den,
                    limit
                );
            }
        }
    }
}
