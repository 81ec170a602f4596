//! Model definition, forward pass and checkpoint serialization.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::MilError;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilDims {
    /// Instance feature dimension.
    pub d: usize,
    /// Embedding width.
    pub d_e: usize,
    /// Attention hidden width.
    pub h: usize,
    pub n_classes: usize,
}

/// Per-class attention gives one softmax column per prediction class; shared
/// attention uses a single column (the original single-branch formulation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    PerClass,
    Shared,
}

/// Dense affine map, `w` row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Affine {
    /// Uniform initialization in ±sqrt(6 / (fan_in + fan_out)).
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut SplitMix64) -> Affine {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| (rng.next_f64() * 2.0 - 1.0) * bound)
            .collect();
        Affine {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *out_v = acc;
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Per-feature standardization applied to instances on entry to the model.
/// Features with zero spread in the fitting set map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, d: usize) -> Scaler {
        let mut mean = vec![0.0; d];
        let mut n = 0.0f64;
        for row in rows.clone() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            n += 1.0;
        }
        for m in &mut mean {
            *m /= n.max(1.0);
        }
        let mut var = vec![0.0; d];
        for row in rows {
            for ((va, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *va += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n.max(1.0)).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Scaler { mean, std }
    }

    #[inline]
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// The trainable unit: embedder, attention branches and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub dims: MilDims,
    pub attention_mode: AttentionMode,
    pub embed: Affine,
    pub attn_hidden: Affine,
    pub attn_score: Affine,
    pub classifier: Affine,
    pub unit_dropout: f64,
    pub scaler: Option<Scaler>,
    pub schema_id: String,
    pub class_names: Vec<String>,
    pub seed: u64,
}

impl MilModel {
    pub fn init(
        dims: MilDims,
        attention_mode: AttentionMode,
        unit_dropout: f64,
        schema_id: &str,
        class_names: Vec<String>,
        seed: u64,
    ) -> Result<MilModel, MilError> {
        if dims.n_classes < 2 {
            return Err(MilError::Config(format!(
                "n_classes must be >= 2, got {}",
                dims.n_classes
            )));
        }
        if class_names.len() != dims.n_classes {
            return Err(MilError::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                dims.n_classes
            )));
        }
        if !(0.0..1.0).contains(&unit_dropout) {
            return Err(MilError::Config("unit_dropout must lie in [0,1)".into()));
        }
        let mut rng = SplitMix64::new(seed).derive(0x0de1);
        let branches = match attention_mode {
            AttentionMode::PerClass => dims.n_classes,
            AttentionMode::Shared => 1,
        };
        Ok(MilModel {
            dims,
            attention_mode,
            embed: Affine::init(dims.d, dims.d_e, &mut rng),
            attn_hidden: Affine::init(dims.d_e, dims.h, &mut rng),
            attn_score: Affine::init(dims.h, branches, &mut rng),
            classifier: Affine::init(branches * dims.d_e, dims.n_classes, &mut rng),
            unit_dropout,
            scaler: None,
            schema_id: schema_id.to_string(),
            class_names,
            seed,
        })
    }

    pub fn branches(&self) -> usize {
        match self.attention_mode {
            AttentionMode::PerClass => self.dims.n_classes,
            AttentionMode::Shared => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.embed.param_count()
            + self.attn_hidden.param_count()
            + self.attn_score.param_count()
            + self.classifier.param_count()
    }

    /// Attention column used for tile saliency: the malignant column when
    /// per-class branches exist, otherwise the single shared column.
    pub fn saliency_branch(&self, class: usize) -> usize {
        match self.attention_mode {
            AttentionMode::PerClass => class.min(self.branches() - 1),
            AttentionMode::Shared => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of one forward pass: `alpha` is `k x branches` (each column sums to
/// 1 over the k instances), `bag_repr` is `branches x d_e` flattened.
#[derive(Debug, Clone)]
pub struct AttentionResult {
    pub alpha: Vec<f64>,
    pub bag_repr: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl AttentionResult {
    pub fn alpha_at(&self, instance: usize, branch: usize, branches: usize) -> f64 {
        self.alpha[instance * branches + branch]
    }

    /// One attention column as a vector over instances.
    pub fn alpha_column(&self, branch: usize, branches: usize) -> Vec<f64> {
        let k = self.alpha.len() / branches;
        (0..k).map(|i| self.alpha[i * branches + branch]).collect()
    }
}

/// Intermediate activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub k: usize,
    /// Instances after scaling, `k x d`.
    pub v: Vec<f64>,
    /// Pre-activation embeddings, `k x d_e`.
    pub e_pre: Vec<f64>,
    /// Embeddings after ReLU and dropout, `k x d_e`.
    pub e: Vec<f64>,
    /// Dropout multipliers on the embedding (empty in eval mode).
    pub emb_mask: Vec<f64>,
    /// tanh hidden activations, `k x h`.
    pub t: Vec<f64>,
    /// Hidden activations after dropout, `k x h`.
    pub t_drop: Vec<f64>,
    /// Dropout multipliers on the attention hidden layer (empty in eval mode).
    pub attn_mask: Vec<f64>,
    /// Raw attention scores, `k x branches`.
    pub scores: Vec<f64>,
    pub result: AttentionResult,
}

fn softmax_inplace(vals: &mut [f64]) {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in vals.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in vals.iter_mut() {
        *v /= sum;
    }
}

/// Forward pass over a bag of `k` raw instance vectors. In train mode the
/// rng drives inverted unit dropout on the embedding and the attention hidden
/// layer; eval mode is deterministic and uses every unit.
pub fn forward_traced(
    model: &MilModel,
    instances: &[Vec<f64>],
    mode: Mode,
    rng: &mut SplitMix64,
) -> Result<ForwardTrace, MilError> {
    let k = instances.len();
    if k == 0 {
        return Err(MilError::Input("bag contains no instances".into()));
    }
    let dims = model.dims;
    for (i, row) in instances.iter().enumerate() {
        if row.len() != dims.d {
            return Err(MilError::Input(format!(
                "instance {i} has dimension {} (model expects {})",
                row.len(),
                dims.d
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(MilError::Input(format!(
                "instance {i} contains a non-finite value"
            )));
        }
    }

    let mut v = Vec::with_capacity(k * dims.d);
    for row in instances {
        match &model.scaler {
            Some(s) => v.extend(s.apply(row)),
            None => v.extend_from_slice(row),
        }
    }

    let dropout = model.unit_dropout;
    let train_dropout = mode == Mode::Train && dropout > 0.0;
    let keep = 1.0 - dropout;

    // embed + ReLU + dropout
    let mut e_pre = vec![0.0; k * dims.d_e];
    for i in 0..k {
        model
            .embed
            .apply_row(&v[i * dims.d..(i + 1) * dims.d], &mut e_pre[i * dims.d_e..(i + 1) * dims.d_e]);
    }
    let mut emb_mask = Vec::new();
    if train_dropout {
        emb_mask = (0..k * dims.d_e)
            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect();
    }
    let mut e = vec![0.0; k * dims.d_e];
    for idx in 0..k * dims.d_e {
        let relu = e_pre[idx].max(0.0);
        e[idx] = if train_dropout { relu * emb_mask[idx] } else { relu };
    }

    // attention hidden: tanh + dropout
    let mut t = vec![0.0; k * dims.h];
    for i in 0..k {
        model
            .attn_hidden
            .apply_row(&e[i * dims.d_e..(i + 1) * dims.d_e], &mut t[i * dims.h..(i + 1) * dims.h]);
    }
    for val in &mut t {
        *val = val.tanh();
    }
    let mut attn_mask = Vec::new();
    if train_dropout {
        attn_mask = (0..k * dims.h)
            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect();
    }
    let t_drop: Vec<f64> = if train_dropout {
        t.iter().zip(&attn_mask).map(|(a, m)| a * m).collect()
    } else {
        t.clone()
    };

    // scores and per-branch softmax over instances
    let branches = model.branches();
    let mut scores = vec![0.0; k * branches];
    for i in 0..k {
        model
            .attn_score
            .apply_row(&t_drop[i * dims.h..(i + 1) * dims.h], &mut scores[i * branches..(i + 1) * branches]);
    }
    let mut alpha = scores.clone();
    for br in 0..branches {
        let mut col: Vec<f64> = (0..k).map(|i| alpha[i * branches + br]).collect();
        softmax_inplace(&mut col);
        for i in 0..k {
            alpha[i * branches + br] = col[i];
        }
    }

    // bag representation: per branch, attention-weighted sum of embeddings
    let mut bag_repr = vec![0.0; branches * dims.d_e];
    for br in 0..branches {
        for i in 0..k {
            let a = alpha[i * branches + br];
            let row = &e[i * dims.d_e..(i + 1) * dims.d_e];
            let out = &mut bag_repr[br * dims.d_e..(br + 1) * dims.d_e];
            for (o, val) in out.iter_mut().zip(row) {
                *o += a * val;
            }
        }
    }

    let mut logits = vec![0.0; dims.n_classes];
    model.classifier.apply_row(&bag_repr, &mut logits);
    let mut probs = logits.clone();
    softmax_inplace(&mut probs);

    Ok(ForwardTrace {
        k,
        v,
        e_pre,
        e,
        emb_mask,
        t,
        t_drop,
        attn_mask,
        scores,
        result: AttentionResult {
            alpha,
            bag_repr,
            logits,
            probs,
        },
    })
}

impl MilModel {
    pub fn forward(
        &self,
        instances: &[Vec<f64>],
        mode: Mode,
        rng: &mut SplitMix64,
    ) -> Result<AttentionResult, MilError> {
        Ok(forward_traced(self, instances, mode, rng)?.result)
    }

    /// Deterministic eval-mode forward.
    pub fn infer(&self, instances: &[Vec<f64>]) -> Result<AttentionResult, MilError> {
        let mut rng = SplitMix64::new(0);
        self.forward(instances, Mode::Eval, &mut rng)
    }
}

// ---------------------------------------------------------------------------
// pooling baseline (no attention)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
}

/// Attention-free baseline: embed instances, pool element-wise, classify.
#[derive(Debug, Clone)]
pub struct PoolingModel {
    pub d: usize,
    pub d_e: usize,
    pub n_classes: usize,
    pub embed: Affine,
    pub classifier: Affine,
    pub scaler: Option<Scaler>,
}

impl PoolingModel {
    pub fn init(d: usize, d_e: usize, n_classes: usize, seed: u64) -> PoolingModel {
        let mut rng = SplitMix64::new(seed).derive(0xb001);
        PoolingModel {
            d,
            d_e,
            n_classes,
            embed: Affine::init(d, d_e, &mut rng),
            classifier: Affine::init(d_e, n_classes, &mut rng),
            scaler: None,
        }
    }
}

/// Logits from mean or element-wise max aggregation of embedded instances.
pub fn aggregate_baseline(
    model: &PoolingModel,
    instances: &[Vec<f64>],
    method: Pooling,
) -> Result<Vec<f64>, MilError> {
    let k = instances.len();
    if k == 0 {
        return Err(MilError::Input("bag contains no instances".into()));
    }
    let mut pooled = vec![
        match method {
            Pooling::Mean => 0.0,
            Pooling::Max => f64::NEG_INFINITY,
        };
        model.d_e
    ];
    let mut emb = vec![0.0; model.d_e];
    for row in instances {
        if row.len() != model.d {
            return Err(MilError::Input(format!(
                "instance dimension {} (model expects {})",
                row.len(),
                model.d
            )));
        }
        let scaled;
        let input = match &model.scaler {
            Some(s) => {
                scaled = s.apply(row);
                &scaled[..]
            }
            None => &row[..],
        };
        model.embed.apply_row(input, &mut emb);
        for (p, &val) in pooled.iter_mut().zip(&emb) {
            let v = val.max(0.0); // same ReLU as the attention model
            match method {
                Pooling::Mean => *p += v / k as f64,
                Pooling::Max => *p = p.max(v),
            }
        }
    }
    let mut logits = vec![0.0; model.n_classes];
    model.classifier.apply_row(&pooled, &mut logits);
    Ok(logits)
}

// ---------------------------------------------------------------------------
// checkpoint serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    schema_id: String,
    class_names: Vec<String>,
    seed: u64,
    dims: MilDims,
    attention_mode: AttentionMode,
    unit_dropout: f64,
    scaler: Option<Scaler>,
    param_order: Vec<String>,
}

const PARAM_ORDER: [&str; 8] = [
    "embed.w",
    "embed.b",
    "attn_hidden.w",
    "attn_hidden.b",
    "attn_score.w",
    "attn_score.b",
    "classifier.w",
    "classifier.b",
];

/// JSON header line followed by every parameter tensor as little-endian f64
/// in the documented order.
pub fn save_checkpoint(mut w: impl Write, model: &MilModel) -> Result<(), MilError> {
    let header = CheckpointHeader {
        format: "milmodel-v1".into(),
        schema_id: model.schema_id.clone(),
        class_names: model.class_names.clone(),
        seed: model.seed,
        dims: model.dims,
        attention_mode: model.attention_mode,
        unit_dropout: model.unit_dropout,
        scaler: model.scaler.clone(),
        param_order: PARAM_ORDER.iter().map(|s| s.to_string()).collect(),
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes())?;
    for tensor in [
        &model.embed.w,
        &model.embed.b,
        &model.attn_hidden.w,
        &model.attn_hidden.b,
        &model.attn_score.w,
        &model.attn_score.b,
        &model.classifier.w,
        &model.classifier.b,
    ] {
        for &v in tensor {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(mut r: impl Read) -> Result<MilModel, MilError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let newline = buf
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| MilError::BadCheckpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&buf[..newline])
        .map_err(|e| MilError::BadCheckpoint(format!("header: {e}")))?;
    if header.format != "milmodel-v1" {
        return Err(MilError::BadCheckpoint(format!(
            "unsupported format '{}'",
            header.format
        )));
    }
    let dims = header.dims;
    let branches = match header.attention_mode {
        AttentionMode::PerClass => dims.n_classes,
        AttentionMode::Shared => 1,
    };
    let shapes = [
        (dims.d_e * dims.d),
        dims.d_e,
        (dims.h * dims.d_e),
        dims.h,
        (branches * dims.h),
        branches,
        (dims.n_classes * branches * dims.d_e),
        dims.n_classes,
    ];
    let expected: usize = shapes.iter().sum::<usize>() * 8;
    let payload = &buf[newline + 1..];
    if payload.len() != expected {
        return Err(MilError::BadCheckpoint(format!(
            "payload length {} (expected {expected})",
            payload.len()
        )));
    }
    let mut offset = 0usize;
    let mut take = |count: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&payload[offset..offset + 8]);
            out.push(f64::from_le_bytes(bytes));
            offset += 8;
        }
        out
    };
    let embed_w = take(shapes[0]);
    let embed_b = take(shapes[1]);
    let ah_w = take(shapes[2]);
    let ah_b = take(shapes[3]);
    let as_w = take(shapes[4]);
    let as_b = take(shapes[5]);
    let c_w = take(shapes[6]);
    let c_b = take(shapes[7]);
    Ok(MilModel {
        dims,
        attention_mode: header.attention_mode,
        embed: Affine {
            in_dim: dims.d,
            out_dim: dims.d_e,
            w: embed_w,
            b: embed_b,
        },
        attn_hidden: Affine {
            in_dim: dims.d_e,
            out_dim: dims.h,
            w: ah_w,
            b: ah_b,
        },
        attn_score: Affine {
            in_dim: dims.h,
            out_dim: branches,
            w: as_w,
            b: as_b,
        },
        classifier: Affine {
            in_dim: branches * dims.d_e,
            out_dim: dims.n_classes,
            w: c_w,
            b: c_b,
        },
        unit_dropout: header.unit_dropout,
        scaler: header.scaler,
        schema_id: header.schema_id,
        class_names: header.class_names,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(k_classes: usize, mode: AttentionMode, seed: u64) -> MilModel {
        MilModel::init(
            MilDims {
                d: 4,
                d_e: 6,
                h: 3,
                n_classes: k_classes,
            },
            mode,
            0.0,
            "test",
            (0..k_classes).map(|c| format!("C{c}")).collect(),
            seed,
        )
        .unwrap()
    }

    fn random_bag(seed: u64, k: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = SplitMix64::new(seed);
        (0..k)
            .map(|_| (0..d).map(|_| rng.next_gauss()).collect())
            .collect()
    }

    #[test]
    fn single_instance_attention_is_exactly_one() {
        let m = model(2, AttentionMode::PerClass, 1);
        let res = m.infer(&random_bag(2, 1, 4)).unwrap();
        assert_eq!(res.alpha, vec![1.0, 1.0]); // one row, both branches
    }

    #[test]
    fn duplicate_instances_get_uniform_attention() {
        let m = model(3, AttentionMode::PerClass, 2);
        let row = vec![0.3, -0.8, 1.2, 0.05];
        let bag = vec![row.clone(); 5];
        let res = m.infer(&bag).unwrap();
        for i in 0..5 {
            for br in 0..3 {
                assert!((res.alpha_at(i, br, 3) - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let m = model(3, AttentionMode::PerClass, 3);
        for seed in 0..20 {
            let bag = random_bag(seed, 1 + (seed as usize % 7), 4);
            let res = m.infer(&bag).unwrap();
            for br in 0..3 {
                let s: f64 = res.alpha_column(br, 3).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            let p: f64 = res.probs.iter().sum();
            assert!((p - 1.0).abs() < 1e-9);
            assert!(res.probs.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn bag_repr_matches_weighted_sum_oracle() {
        // independent re-summation of sum_i alpha_i * e_i
        let m = model(2, AttentionMode::PerClass, 4);
        let bag = random_bag(9, 5, 4);
        let mut rng = SplitMix64::new(0);
        let trace = forward_traced(&m, &bag, Mode::Eval, &mut rng).unwrap();
        let d_e = m.dims.d_e;
        for br in 0..2 {
            for j in 0..d_e {
                let mut acc = 0.0;
                for i in 0..5 {
                    acc += trace.result.alpha[i * 2 + br] * trace.e[i * d_e + j];
                }
                let got = trace.result.bag_repr[br * d_e + j];
                assert!((acc - got).abs() < 1e-12, "branch {br} dim {j}");
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let m = model(2, AttentionMode::PerClass, 5);
        let bag = random_bag(11, 6, 4);
        let res = m.infer(&bag).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| bag[i].clone()).collect();
        let res_p = m.infer(&permuted).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for br in 0..2 {
                assert!(
                    (res_p.alpha_at(new_i, br, 2) - res.alpha_at(old_i, br, 2)).abs() < 1e-12
                );
            }
        }
        for c in 0..2 {
            assert!((res_p.logits[c] - res.logits[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_shift_invariance() {
        // adding a constant to every score column leaves alpha unchanged;
        // exercised through the softmax directly
        let m = model(2, AttentionMode::PerClass, 6);
        let bag = random_bag(13, 4, 4);
        let mut rng = SplitMix64::new(0);
        let trace = forward_traced(&m, &bag, Mode::Eval, &mut rng).unwrap();
        let mut shifted = trace.scores.clone();
        for i in 0..4 {
            for br in 0..2 {
                shifted[i * 2 + br] += 7.5;
            }
        }
        for br in 0..2 {
            let mut col: Vec<f64> = (0..4).map(|i| shifted[i * 2 + br]).collect();
            super::softmax_inplace(&mut col);
            for i in 0..4 {
                assert!((col[i] - trace.result.alpha[i * 2 + br]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let m = model(3, AttentionMode::PerClass, 7);
        let bag = random_bag(17, 5, 4);
        let a = m.infer(&bag).unwrap();
        let b = m.infer(&bag).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.alpha.iter().zip(&b.alpha) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn empty_or_nan_bags_rejected() {
        let m = model(2, AttentionMode::PerClass, 8);
        assert!(matches!(m.infer(&[]), Err(MilError::Input(_))));
        let mut bag = random_bag(19, 3, 4);
        bag[1][2] = f64::NAN;
        assert!(matches!(m.infer(&bag), Err(MilError::Input(_))));
    }

    #[test]
    fn shared_mode_has_single_column() {
        let m = model(3, AttentionMode::Shared, 9);
        assert_eq!(m.branches(), 1);
        let res = m.infer(&random_bag(23, 4, 4)).unwrap();
        assert_eq!(res.alpha.len(), 4);
        let s: f64 = res.alpha.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(res.logits.len(), 3);
    }

    #[test]
    fn scaler_fit_and_apply() {
        let rows = [vec![1.0, 10.0], vec![3.0, 10.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = Scaler::fit(refs.iter().map(|r| &r[..]), 2);
        assert_eq!(s.mean, vec![2.0, 10.0]);
        assert_eq!(s.std[0], 1.0);
        // zero-spread feature falls back to unit scale
        assert_eq!(s.std[1], 1.0);
        assert_eq!(s.apply(&[3.0, 10.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = model(3, AttentionMode::PerClass, 10);
        m.scaler = Some(Scaler {
            mean: vec![0.5; 4],
            std: vec![2.0; 4],
        });
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &m).unwrap();
        let back = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(m, back);
        // and the round-trip re-serializes identically
        let mut buf2 = Vec::new();
        save_checkpoint(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let m = model(2, AttentionMode::PerClass, 11);
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &m).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            load_checkpoint(&buf[..]),
            Err(MilError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn pooling_singleton_mean_equals_max() {
        let pm = PoolingModel::init(4, 6, 2, 12);
        let bag = random_bag(29, 1, 4);
        let mean = aggregate_baseline(&pm, &bag, Pooling::Mean).unwrap();
        let max = aggregate_baseline(&pm, &bag, Pooling::Max).unwrap();
        for (a, b) in mean.iter().zip(&max) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_mean_idempotent_under_duplication() {
        let pm = PoolingModel::init(4, 6, 2, 13);
        let one = random_bag(31, 1, 4);
        let five = vec![one[0].clone(); 5];
        let single = aggregate_baseline(&pm, &one, Pooling::Mean).unwrap();
        let dup = aggregate_baseline(&pm, &five, Pooling::Mean).unwrap();
        for (a, b) in single.iter().zip(&dup) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn max_pooling_ignores_dominated_instance() {
        // identity embedding (d_e = d, w = I, b = 0) makes domination in
        // feature space carry over to embedding space
        let mut pm = PoolingModel::init(3, 3, 2, 14);
        pm.embed.w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        pm.embed.b = vec![0.0; 3];
        let bag = vec![vec![3.0, 1.0, 2.0], vec![0.5, 4.0, 1.0]];
        let base = aggregate_baseline(&pm, &bag, Pooling::Max).unwrap();
        let mut extended = bag.clone();
        extended.push(vec![0.2, 0.9, 0.4]); // dominated element-wise
        let with_dominated = aggregate_baseline(&pm, &extended, Pooling::Max).unwrap();
        assert_eq!(base, with_dominated);
    }
}
