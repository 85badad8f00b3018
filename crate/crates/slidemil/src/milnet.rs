//! The attention-MIL network and its hand-written reverse-mode
//! gradients.
//!
//! Forward path per bag: a tiny convolutional featurizer (conv 3x3 ->
//! ReLU -> 2x2 max-pool -> conv 3x3 -> ReLU -> global spatial max-pool)
//! turns each of the N instances into a feature vector h_k; a two-layer
//! attention scorer e_k = w . tanh(V h_k) is softmax-normalized into
//! weights a_k; the bag feature z = sum_k a_k h_k is concatenated with
//! the clinical vector and classified linearly. Instances may instead be
//! precomputed feature vectors (frozen, no gradient into them).
//!
//! Backward is exact: softmax-attention Jacobian, tanh/sigmoid, both
//! convolutions, max-pool routing (ties to the lowest linear index) and
//! the concatenation split. All arithmetic is f64.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Instance source: trainable conv featurizer over pixel tensors, or
/// frozen externally computed feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturizerKind {
    Conv,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilConfig {
    /// Side length S of the (square) featurizer input.
    pub input_size: usize,
    /// Channels after the first convolution.
    pub conv1_channels: usize,
    /// Instance feature dimension D.
    pub feature_dim: usize,
    /// Attention hidden width L.
    pub attn_hidden: usize,
    /// Clinical vector length C; 0 disables clinical fusion.
    pub clinical_dim: usize,
    /// Number of classes K.
    pub classes: usize,
    /// Gated attention variant (tanh path multiplied by a sigmoid gate).
    pub gated: bool,
    pub featurizer: FeaturizerKind,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig {
            input_size: 224,
            conv1_channels: 8,
            feature_dim: 32,
            attn_hidden: 16,
            clinical_dim: 0,
            classes: 2,
            gated: false,
            featurizer: FeaturizerKind::Conv,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.featurizer == FeaturizerKind::Conv && self.input_size < 2 {
            return Err(Error::Config("input_size must be >= 2".into()));
        }
        for (name, v) in [
            ("conv1_channels", self.conv1_channels),
            ("feature_dim", self.feature_dim),
            ("attn_hidden", self.attn_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        Ok(())
    }
}

/// All learnable parameters, with gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub cfg: MilConfig,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    /// Attention first layer, L x D.
    pub attn_v: Tensor,
    /// Gate layer, L x D; present only in the gated variant.
    pub attn_u: Option<Tensor>,
    /// Attention output layer, L.
    pub attn_w: Tensor,
    /// Classifier, K x (D + C).
    pub clf_w: Tensor,
    pub clf_b: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

impl MilModel {
    /// Seeded Xavier-uniform initialization; biases start at zero.
    pub fn init(cfg: MilConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (c1, d, l) = (cfg.conv1_channels, cfg.feature_dim, cfg.attn_hidden);
        let (conv1_w, conv1_b, conv2_w, conv2_b) = if cfg.featurizer == FeaturizerKind::Conv {
            (
                xavier(rng, &[c1, 3, 3, 3], 3 * 9, c1 * 9),
                Tensor::zeros(&[c1]),
                xavier(rng, &[d, c1, 3, 3], c1 * 9, d * 9),
                Tensor::zeros(&[d]),
            )
        } else {
            (
                Tensor::zeros(&[0]),
                Tensor::zeros(&[0]),
                Tensor::zeros(&[0]),
                Tensor::zeros(&[0]),
            )
        };
        let attn_v = xavier(rng, &[l, d], d, l);
        let attn_u = if cfg.gated {
            Some(xavier(rng, &[l, d], d, l))
        } else {
            None
        };
        let attn_w = xavier(rng, &[l], l, 1);
        let fused = d + cfg.clinical_dim;
        let clf_w = xavier(rng, &[cfg.classes, fused], fused, cfg.classes);
        let clf_b = Tensor::zeros(&[cfg.classes]);
        Ok(MilModel {
            cfg,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            attn_v,
            attn_u,
            attn_w,
            clf_w,
            clf_b,
        })
    }

    /// Parameters in their declared (checkpoint) order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = Vec::with_capacity(9);
        if self.cfg.featurizer == FeaturizerKind::Conv {
            v.push(("conv1_w", &self.conv1_w));
            v.push(("conv1_b", &self.conv1_b));
            v.push(("conv2_w", &self.conv2_w));
            v.push(("conv2_b", &self.conv2_b));
        }
        v.push(("attn_v", &self.attn_v));
        if let Some(u) = &self.attn_u {
            v.push(("attn_u", u));
        }
        v.push(("attn_w", &self.attn_w));
        v.push(("clf_w", &self.clf_w));
        v.push(("clf_b", &self.clf_b));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v: Vec<(&'static str, &mut Tensor)> = Vec::with_capacity(9);
        if self.cfg.featurizer == FeaturizerKind::Conv {
            v.push(("conv1_w", &mut self.conv1_w));
            v.push(("conv1_b", &mut self.conv1_b));
            v.push(("conv2_w", &mut self.conv2_w));
            v.push(("conv2_b", &mut self.conv2_b));
        }
        v.push(("attn_v", &mut self.attn_v));
        if let Some(u) = &mut self.attn_u {
            v.push(("attn_u", u));
        }
        v.push(("attn_w", &mut self.attn_w));
        v.push(("clf_w", &mut self.clf_w));
        v.push(("clf_b", &mut self.clf_b));
        v
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.grad_mut();
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite())
    }
}

/// Bag instances: raw pixel tensors or frozen feature vectors.
#[derive(Debug, Clone)]
pub enum Instances {
    Images(Vec<Tensor>),
    Features(Vec<Vec<f64>>),
}

impl Instances {
    pub fn len(&self) -> usize {
        match self {
            Instances::Images(v) => v.len(),
            Instances::Features(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One bag ready for the network: N instances plus the slide's clinical
/// vector (empty when clinical fusion is off).
#[derive(Debug, Clone)]
pub struct BagInput {
    pub instances: Instances,
    pub clinical: Vec<f64>,
}

/// Per-instance featurizer intermediates kept for backward.
#[derive(Debug, Clone)]
struct FeatCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    pooled: Vec<f64>,
    pool_idx: Vec<usize>,
    pre2: Vec<f64>,
    gmax_idx: Vec<usize>,
}

/// Forward pass results and cached intermediates.
#[derive(Debug, Clone)]
pub struct BagForward {
    /// Instance features, N x D.
    pub h: Vec<Vec<f64>>,
    /// Softmax attention weights, length N, summing to 1.
    pub attention: Vec<f64>,
    /// Attention-pooled bag feature z, length D.
    pub bag_feature: Vec<f64>,
    /// concat(z, clinical), length D + C.
    pub fused: Vec<f64>,
    /// Classifier outputs, length K.
    pub logits: Vec<f64>,
    tanh_v: Vec<Vec<f64>>,
    gate_s: Vec<Vec<f64>>,
    feat: Vec<FeatCache>,
}

/// Gradients w.r.t. the instance features, returned by `backward` as a
/// diagnostic (parameter gradients accumulate into the model buffers).
#[derive(Debug, Clone)]
pub struct BagBackward {
    pub dh: Vec<Vec<f64>>,
}

/// 3x3 convolution with zero padding 1, same spatial size.
fn conv3x3(
    input: &[f64],
    in_ch: usize,
    size: usize,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
    out: &mut Vec<f64>,
) {
    let plane = size * size;
    out.clear();
    out.resize(out_ch * plane, 0.0);
    for o in 0..out_ch {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let wbase = (o * in_ch + i) * 9;
            for ky in 0..3usize {
                let (ylo, yhi) = row_range(ky, size);
                for kx in 0..3usize {
                    let wv = weights[wbase + ky * 3 + kx];
                    let (xlo, xhi) = row_range(kx, size);
                    for y in ylo..yhi {
                        let iy = y + ky - 1;
                        let orow = y * size;
                        let irow = iy * size;
                        for x in xlo..xhi {
                            out_plane[orow + x] += wv * in_plane[irow + x + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Output rows for which the kernel tap stays inside the padded input.
#[inline]
fn row_range(k: usize, size: usize) -> (usize, usize) {
    match k {
        0 => (1, size),
        1 => (0, size),
        _ => (0, size - 1),
    }
}

/// Backward of `conv3x3`: accumulates weight/bias gradients and,
/// optionally, the gradient w.r.t. the input.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    in_ch: usize,
    size: usize,
    weights: &[f64],
    out_ch: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let plane = size * size;
    for o in 0..out_ch {
        let dout_plane = &dout[o * plane..(o + 1) * plane];
        db[o] += dout_plane.iter().sum::<f64>();
        for i in 0..in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let wbase = (o * in_ch + i) * 9;
            for ky in 0..3usize {
                let (ylo, yhi) = row_range(ky, size);
                for kx in 0..3usize {
                    let (xlo, xhi) = row_range(kx, size);
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let iy = y + ky - 1;
                        let orow = y * size;
                        let irow = iy * size;
                        for x in xlo..xhi {
                            acc += dout_plane[orow + x] * in_plane[irow + x + kx - 1];
                        }
                    }
                    dw[wbase + ky * 3 + kx] += acc;
                    if let Some(di) = dinput.as_deref_mut() {
                        let wv = weights[wbase + ky * 3 + kx];
                        let di_plane = &mut di[i * plane..(i + 1) * plane];
                        for y in ylo..yhi {
                            let iy = y + ky - 1;
                            let orow = y * size;
                            let irow = iy * size;
                            for x in xlo..xhi {
                                di_plane[irow + x + kx - 1] += wv * dout_plane[orow + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// ReLU + 2x2 max-pool (stride 2, partial windows dropped). Returns the
/// pooled map and, per pooled cell, the linear index of the winning
/// input position (first maximum in row-major scan order).
fn relu_maxpool2x2(pre: &[f64], channels: usize, size: usize) -> (Vec<f64>, Vec<usize>, usize) {
    let half = size / 2;
    let plane = size * size;
    let mut pooled = vec![0.0; channels * half * half];
    let mut winners = vec![0usize; channels * half * half];
    for c in 0..channels {
        let pre_plane = &pre[c * plane..(c + 1) * plane];
        for py in 0..half {
            for px in 0..half {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for wy in 0..2 {
                    for wx in 0..2 {
                        let idx = (2 * py + wy) * size + 2 * px + wx;
                        let v = pre_plane[idx].max(0.0);
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                pooled[(c * half + py) * half + px] = best;
                winners[(c * half + py) * half + px] = best_idx;
            }
        }
    }
    (pooled, winners, half)
}

/// ReLU + global spatial max per channel, with winner indices.
fn relu_global_max(pre: &[f64], channels: usize, plane: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; channels];
    let mut winners = vec![0usize; channels];
    for c in 0..channels {
        let pre_plane = &pre[c * plane..(c + 1) * plane];
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (i, &v) in pre_plane.iter().enumerate() {
            let r = v.max(0.0);
            if r > best {
                best = r;
                best_idx = i;
            }
        }
        out[c] = best;
        winners[c] = best_idx;
    }
    (out, winners)
}

/// Numerically stable softmax (max subtraction). Every output is in
/// (0, 1] and the outputs sum to 1.
pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Run the conv featurizer on one instance tensor [3, S, S].
/// Returns the D-length feature vector.
pub fn featurize(model: &MilModel, instance: &Tensor) -> Result<Vec<f64>> {
    let (h, _) = featurize_cached(model, instance)?;
    Ok(h)
}

fn featurize_cached(model: &MilModel, instance: &Tensor) -> Result<(Vec<f64>, FeatCache)> {
    let s = model.cfg.input_size;
    if instance.shape() != [3, s, s] {
        return Err(Error::Dimension {
            what: "featurizer input".into(),
            expected: 3 * s * s,
            got: instance.len(),
        });
    }
    if !instance.all_finite() {
        return Err(Error::Validation("non-finite featurizer input".into()));
    }
    let c1 = model.cfg.conv1_channels;
    let d = model.cfg.feature_dim;
    let mut pre1 = Vec::new();
    conv3x3(
        instance.data(),
        3,
        s,
        model.conv1_w.data(),
        model.conv1_b.data(),
        c1,
        &mut pre1,
    );
    let (pooled, pool_idx, half) = relu_maxpool2x2(&pre1, c1, s);
    let mut pre2 = Vec::new();
    conv3x3(
        &pooled,
        c1,
        half,
        model.conv2_w.data(),
        model.conv2_b.data(),
        d,
        &mut pre2,
    );
    let (h, gmax_idx) = relu_global_max(&pre2, d, half * half);
    Ok((
        h,
        FeatCache {
            input: instance.data().to_vec(),
            pre1,
            pooled,
            pool_idx,
            pre2,
            gmax_idx,
        },
    ))
}

/// Identity passthrough for an externally computed feature vector;
/// validates the dimension against the model.
pub fn featurize_precomputed(model: &MilModel, stored: &[f64]) -> Result<Vec<f64>> {
    if stored.len() != model.cfg.feature_dim {
        return Err(Error::Dimension {
            what: "precomputed feature vector".into(),
            expected: model.cfg.feature_dim,
            got: stored.len(),
        });
    }
    Ok(stored.to_vec())
}

/// Attention weights for a bag of instance features: softmax over
/// e_k = w . tanh(V h_k) (times a sigmoid gate in the gated variant).
pub fn attention(model: &MilModel, h: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (e, _, _) = attention_scores(model, h)?;
    Ok(softmax(&e))
}

/// Raw attention scores plus the tanh (and gate) activations.
#[allow(clippy::type_complexity)]
fn attention_scores(
    model: &MilModel,
    h: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if h.is_empty() {
        return Err(Error::Data("attention over an empty bag".into()));
    }
    let d = model.cfg.feature_dim;
    let l = model.cfg.attn_hidden;
    let v = model.attn_v.data();
    let w = model.attn_w.data();
    let mut e = Vec::with_capacity(h.len());
    let mut tanh_v = Vec::with_capacity(h.len());
    let mut gate_s = Vec::with_capacity(h.len());
    for hk in h {
        if hk.len() != d {
            return Err(Error::Dimension {
                what: "instance feature".into(),
                expected: d,
                got: hk.len(),
            });
        }
        if hk.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite instance feature".into()));
        }
        let mut t = vec![0.0; l];
        for li in 0..l {
            let row = &v[li * d..(li + 1) * d];
            t[li] = row.iter().zip(hk).map(|(a, b)| a * b).sum::<f64>().tanh();
        }
        let mut ek = 0.0;
        if let Some(u) = &model.attn_u {
            let u = u.data();
            let mut sg = vec![0.0; l];
            for li in 0..l {
                let row = &u[li * d..(li + 1) * d];
                sg[li] = sigmoid(row.iter().zip(hk).map(|(a, b)| a * b).sum::<f64>());
                ek += w[li] * t[li] * sg[li];
            }
            gate_s.push(sg);
        } else {
            for li in 0..l {
                ek += w[li] * t[li];
            }
        }
        e.push(ek);
        tanh_v.push(t);
    }
    Ok((e, tanh_v, gate_s))
}

/// Full forward pass over one bag.
pub fn forward(model: &MilModel, bag: &BagInput) -> Result<BagForward> {
    if bag.clinical.len() != model.cfg.clinical_dim {
        return Err(Error::Dimension {
            what: "clinical vector".into(),
            expected: model.cfg.clinical_dim,
            got: bag.clinical.len(),
        });
    }
    if bag.instances.is_empty() {
        return Err(Error::Data("bag has no instances".into()));
    }
    let d = model.cfg.feature_dim;
    let mut h = Vec::with_capacity(bag.instances.len());
    let mut feat = Vec::new();
    match &bag.instances {
        Instances::Images(images) => {
            if model.cfg.featurizer != FeaturizerKind::Conv {
                return Err(Error::Config(
                    "model expects precomputed features, bag has images".into(),
                ));
            }
            for img in images {
                let (hk, cache) = featurize_cached(model, img)?;
                h.push(hk);
                feat.push(cache);
            }
        }
        Instances::Features(rows) => {
            for row in rows {
                h.push(featurize_precomputed(model, row)?);
            }
        }
    }
    let (e, tanh_v, gate_s) = attention_scores(model, &h)?;
    let attention = softmax(&e);
    let mut bag_feature = vec![0.0; d];
    for (ak, hk) in attention.iter().zip(&h) {
        for (z, v) in bag_feature.iter_mut().zip(hk) {
            *z += ak * v;
        }
    }
    let mut fused = Vec::with_capacity(d + bag.clinical.len());
    fused.extend_from_slice(&bag_feature);
    fused.extend_from_slice(&bag.clinical);
    let k = model.cfg.classes;
    let wk = model.clf_w.data();
    let mut logits = model.clf_b.data().to_vec();
    for (ki, logit) in logits.iter_mut().enumerate() {
        let row = &wk[ki * fused.len()..(ki + 1) * fused.len()];
        *logit += row.iter().zip(&fused).map(|(a, b)| a * b).sum::<f64>();
    }
    debug_assert_eq!(logits.len(), k);
    Ok(BagForward {
        h,
        attention,
        bag_feature,
        fused,
        logits,
        tanh_v,
        gate_s,
        feat,
    })
}

/// Exact reverse pass. Parameter gradients accumulate into the model's
/// gradient buffers (call `zero_grads` between steps); returns the
/// gradients w.r.t. the instance features.
pub fn backward(model: &mut MilModel, fwd: &BagForward, dlogits: &[f64]) -> Result<BagBackward> {
    let cfg = model.cfg.clone();
    let (d, l, k) = (cfg.feature_dim, cfg.attn_hidden, cfg.classes);
    let n = fwd.h.len();
    let fused_len = fwd.fused.len();
    if dlogits.len() != k {
        return Err(Error::Dimension {
            what: "dlogits".into(),
            expected: k,
            got: dlogits.len(),
        });
    }

    // Classifier: logits = clf_w . fused + clf_b
    let mut dfused = vec![0.0; fused_len];
    {
        let clf_w = model.clf_w.data().to_vec();
        let gw = model.clf_w.grad_mut();
        for ki in 0..k {
            for j in 0..fused_len {
                gw[ki * fused_len + j] += dlogits[ki] * fwd.fused[j];
            }
        }
        let gb = model.clf_b.grad_mut();
        for ki in 0..k {
            gb[ki] += dlogits[ki];
        }
        for j in 0..fused_len {
            let mut acc = 0.0;
            for ki in 0..k {
                acc += clf_w[ki * fused_len + j] * dlogits[ki];
            }
            dfused[j] = acc;
        }
    }
    // Concatenation split: clinical features receive no gradient.
    let dz = &dfused[..d];

    // Attention pooling: z = sum_k a_k h_k
    let a = &fwd.attention;
    let dot: Vec<f64> = fwd
        .h
        .iter()
        .map(|hk| hk.iter().zip(dz).map(|(x, g)| x * g).sum::<f64>())
        .collect();
    let weighted: f64 = a.iter().zip(&dot).map(|(ak, dk)| ak * dk).sum();
    // Softmax Jacobian: de_k = a_k (dot_k - sum_j a_j dot_j)
    let de: Vec<f64> = a
        .iter()
        .zip(&dot)
        .map(|(ak, dk)| ak * (dk - weighted))
        .collect();

    // Direct pooling path: dL/dh_k += a_k dz.
    let mut dh: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    for (i, dh_i) in dh.iter_mut().enumerate() {
        for j in 0..d {
            dh_i[j] = a[i] * dz[j];
        }
    }

    // Attention scorer: e_k = w . (tanh(V h_k) [* sigmoid(U h_k)])
    {
        let v = model.attn_v.data().to_vec();
        let w = model.attn_w.data().to_vec();
        let u = model.attn_u.as_ref().map(|t| t.data().to_vec());
        let mut gv = vec![0.0; l * d];
        let mut gu = vec![0.0; l * d];
        let mut gw = vec![0.0; l];
        for i in 0..n {
            let t = &fwd.tanh_v[i];
            let hk = &fwd.h[i];
            match &u {
                None => {
                    for li in 0..l {
                        gw[li] += de[i] * t[li];
                        let dpre = de[i] * w[li] * (1.0 - t[li] * t[li]);
                        for j in 0..d {
                            gv[li * d + j] += dpre * hk[j];
                            dh[i][j] += v[li * d + j] * dpre;
                        }
                    }
                }
                Some(u) => {
                    let sg = &fwd.gate_s[i];
                    for li in 0..l {
                        gw[li] += de[i] * t[li] * sg[li];
                        let dpre_v = de[i] * w[li] * sg[li] * (1.0 - t[li] * t[li]);
                        let dpre_u = de[i] * w[li] * t[li] * sg[li] * (1.0 - sg[li]);
                        for j in 0..d {
                            gv[li * d + j] += dpre_v * hk[j];
                            gu[li * d + j] += dpre_u * hk[j];
                            dh[i][j] += v[li * d + j] * dpre_v + u[li * d + j] * dpre_u;
                        }
                    }
                }
            }
        }
        for (gbuf, add) in model.attn_v.grad_mut().iter_mut().zip(&gv) {
            *gbuf += add;
        }
        if let Some(ut) = &mut model.attn_u {
            for (gbuf, add) in ut.grad_mut().iter_mut().zip(&gu) {
                *gbuf += add;
            }
        }
        for (gbuf, add) in model.attn_w.grad_mut().iter_mut().zip(&gw) {
            *gbuf += add;
        }
    }

    // Featurizer (conv instances only; precomputed features are frozen).
    if !fwd.feat.is_empty() {
        let s = cfg.input_size;
        let half = s / 2;
        let plane2 = half * half;
        let c1 = cfg.conv1_channels;
        let conv2_w = model.conv2_w.data().to_vec();
        let mut g_conv1_w = vec![0.0; model.conv1_w.len()];
        let mut g_conv1_b = vec![0.0; model.conv1_b.len()];
        let mut g_conv2_w = vec![0.0; model.conv2_w.len()];
        let mut g_conv2_b = vec![0.0; model.conv2_b.len()];
        for (i, cache) in fwd.feat.iter().enumerate() {
            // Global max-pool routing through ReLU.
            let mut dpre2 = vec![0.0; d * plane2];
            for fd in 0..d {
                let idx = cache.gmax_idx[fd];
                if cache.pre2[fd * plane2 + idx] > 0.0 {
                    dpre2[fd * plane2 + idx] += dh[i][fd];
                }
            }
            // conv2 backward into the pooled map.
            let mut dpooled = vec![0.0; c1 * plane2];
            conv3x3_backward(
                &cache.pooled,
                c1,
                half,
                &conv2_w,
                d,
                &dpre2,
                &mut g_conv2_w,
                &mut g_conv2_b,
                Some(&mut dpooled),
            );
            // 2x2 max-pool routing through ReLU.
            let plane1 = s * s;
            let mut dpre1 = vec![0.0; c1 * plane1];
            for c in 0..c1 {
                for cell in 0..plane2 {
                    let g = dpooled[c * plane2 + cell];
                    if g == 0.0 {
                        continue;
                    }
                    let idx = cache.pool_idx[c * plane2 + cell];
                    if cache.pre1[c * plane1 + idx] > 0.0 {
                        dpre1[c * plane1 + idx] += g;
                    }
                }
            }
            // conv1 backward; input gradients are not needed.
            conv3x3_backward(
                &cache.input,
                3,
                s,
                &[],
                c1,
                &dpre1,
                &mut g_conv1_w,
                &mut g_conv1_b,
                None,
            );
        }
        for (gbuf, add) in model.conv1_w.grad_mut().iter_mut().zip(&g_conv1_w) {
            *gbuf += add;
        }
        for (gbuf, add) in model.conv1_b.grad_mut().iter_mut().zip(&g_conv1_b) {
            *gbuf += add;
        }
        for (gbuf, add) in model.conv2_w.grad_mut().iter_mut().zip(&g_conv2_w) {
            *gbuf += add;
        }
        for (gbuf, add) in model.conv2_b.grad_mut().iter_mut().zip(&g_conv2_b) {
            *gbuf += add;
        }
    }
    Ok(BagBackward { dh })
}

/// Central-difference check of `backward` against the cross-entropy
/// loss. Returns the maximum relative error
/// |g_a - g_n| / (|g_a| + |g_n| + 1e-12) over every parameter element.
pub fn grad_check(model: &MilModel, bag: &BagInput, label: usize, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Validation("eps must be > 0".into()));
    }
    let mut work = model.clone();
    work.zero_grads();
    let fwd = forward(&work, bag)?;
    let (_, dlogits) = crate::train::cross_entropy(&fwd.logits, label)?;
    backward(&mut work, &fwd, &dlogits)?;
    let analytic: Vec<Vec<f64>> = work
        .params()
        .iter()
        .map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let loss_at = |m: &MilModel| -> Result<f64> {
        let f = forward(m, bag)?;
        Ok(crate::train::cross_entropy(&f.logits, label)?.0)
    };
    let mut max_rel: f64 = 0.0;
    let param_count = work.params().len();
    for pi in 0..param_count {
        let len = work.params()[pi].1.len();
        for j in 0..len {
            let orig = work.params()[pi].1.data()[j];
            work.params_mut()[pi].1.data_mut()[j] = orig + eps;
            let plus = loss_at(&work)?;
            work.params_mut()[pi].1.data_mut()[j] = orig - eps;
            let minus = loss_at(&work)?;
            work.params_mut()[pi].1.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let ga = analytic[pi][j];
            let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs() + 1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

const CHECKPOINT_FORMAT: &str = "slidemil-checkpoint-v1";
const FEATURES_FORMAT: &str = "slidemil-features-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config_hash: String,
    config: MilConfig,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

/// Write a checkpoint: one JSON header line, then the little-endian
/// 64-bit float parameter blob in declared order.
pub fn save_checkpoint(model: &MilModel, config_hash: &str, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config_hash: config_hash.to_string(),
        config: model.cfg.clone(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| ParamHeader {
                name: (*name).to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    for (_, t) in model.params() {
        for v in t.data() {
            file.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Read a checkpoint. When `expected_hash` is given it must match the
/// stored config hash.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<(MilModel, String)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Data(format!("{}: missing checkpoint header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&raw[..newline])
        .map_err(|e| Error::Data(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!(
            "{}: unknown checkpoint format '{}'",
            path.display(),
            header.format
        )));
    }
    if let Some(expected) = expected_hash {
        if header.config_hash != expected {
            return Err(Error::ConfigHash {
                file: path.to_path_buf(),
                expected: expected.to_string(),
                found: header.config_hash,
            });
        }
    }
    let mut rng = crate::seed::rng_from(0);
    let mut model = MilModel::init(header.config.clone(), &mut rng)?;
    let blob = &raw[newline + 1..];
    let mut offset = 0usize;
    for (expected_param, (name, tensor)) in header.params.iter().zip(model.params_mut()) {
        if expected_param.name != name || expected_param.shape != tensor.shape() {
            return Err(Error::Dimension {
                what: format!("checkpoint parameter {}", expected_param.name),
                expected: expected_param.shape.iter().product(),
                got: tensor.len(),
            });
        }
        for v in tensor.data_mut().iter_mut() {
            let end = offset + 8;
            if end > blob.len() {
                return Err(Error::Data(format!(
                    "{}: checkpoint blob truncated",
                    path.display()
                )));
            }
            *v = f64::from_le_bytes(blob[offset..end].try_into().expect("8 bytes"));
            offset = end;
        }
    }
    if offset != blob.len() {
        return Err(Error::Data(format!(
            "{}: checkpoint blob has {} trailing bytes",
            path.display(),
            blob.len() - offset
        )));
    }
    Ok((model, header.config_hash))
}

#[derive(Serialize, Deserialize)]
struct FeaturesHeader {
    format: String,
    count: usize,
    dim: usize,
}

/// Write a precomputed-features file: JSON header {count, dim}, then a
/// row-major little-endian 32-bit float blob.
pub fn write_features(path: &Path, dim: usize, rows: &[Vec<f64>]) -> Result<()> {
    for r in rows {
        if r.len() != dim {
            return Err(Error::Dimension {
                what: "feature row".into(),
                expected: dim,
                got: r.len(),
            });
        }
    }
    let header = FeaturesHeader {
        format: FEATURES_FORMAT.to_string(),
        count: rows.len(),
        dim,
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    for r in rows {
        for v in r {
            file.write_all(&(*v as f32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Read a precomputed-features file into f64 rows in stored order.
pub fn read_features(path: &Path) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Data(format!("{}: missing features header", path.display())))?;
    let header: FeaturesHeader = serde_json::from_slice(&raw[..newline])
        .map_err(|e| Error::Data(format!("{}: bad features header: {e}", path.display())))?;
    if header.format != FEATURES_FORMAT {
        return Err(Error::Data(format!(
            "{}: unknown features format '{}'",
            path.display(),
            header.format
        )));
    }
    let blob = &raw[newline + 1..];
    let expected = header.count * header.dim * 4;
    if blob.len() != expected {
        return Err(Error::Dimension {
            what: format!("{} feature blob bytes", path.display()),
            expected,
            got: blob.len(),
        });
    }
    let mut rows = Vec::with_capacity(header.count);
    let mut offset = 0;
    for _ in 0..header.count {
        let mut row = Vec::with_capacity(header.dim);
        for _ in 0..header.dim {
            row.push(f64::from(f32::from_le_bytes(
                blob[offset..offset + 4].try_into().expect("4 bytes"),
            )));
            offset += 4;
        }
        rows.push(row);
    }
    Ok((header.dim, rows))
}
