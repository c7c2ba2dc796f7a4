//! Agent model: a frozen random-feature backbone feeding two linear heads.
//!
//! The shared head produces logits `ŷ₁`, the personalized head `ŷ₂`; the
//! prediction is `softmax(μ·ŷ₂ + (1−μ)·ŷ₁)` and the loss is the batch-mean
//! cross-entropy of that prediction. Gradients are analytic: with
//! `δ = softmax(z) − e_y`, the per-sample gradient with respect to either
//! head is `δ ⊗ [f, 1]`, scaled by `1−μ` for the shared head and by `μ` for
//! the personalized head.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;

const HEADER_WORDS: usize = 3;

/// Frozen `h × d` rectifier layer shared by every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    input_dim: usize,
    feature_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Backbone {
    /// Gaussian entries scaled by `1/√d`, drawn from a stream derived from `seed`.
    pub fn random(input_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 {
            return Err(Error::config(
                "model.feature_dim",
                "backbone dimensions must be positive",
            ));
        }
        let mut r = rng::stream(seed, &[rng::tag::BACKBONE]);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let mut draw = || Distribution::<f64>::sample(&StandardNormal, &mut r) * scale;
        let weights: Vec<f64> = (0..feature_dim * input_dim).map(|_| draw()).collect();
        let bias: Vec<f64> = (0..feature_dim).map(|_| draw()).collect();
        Ok(Backbone {
            input_dim,
            feature_dim,
            weights,
            bias,
        })
    }

    pub fn from_parts(input_dim: usize, feature_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != input_dim * feature_dim {
            return Err(Error::shape("backbone weights", input_dim * feature_dim, weights.len()));
        }
        if bias.len() != feature_dim {
            return Err(Error::shape("backbone bias", feature_dim, bias.len()));
        }
        Ok(Backbone {
            input_dim,
            feature_dim,
            weights,
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// `max(0, W x + b)`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.feature_dim];
        self.features_into(x, &mut out)?;
        Ok(out)
    }

    pub fn features_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::shape("input vector", self.input_dim, x.len()));
        }
        if out.len() != self.feature_dim {
            return Err(Error::shape("feature buffer", self.feature_dim, out.len()));
        }
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * self.input_dim..(k + 1) * self.input_dim];
            let s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[k];
            *o = s.max(0.0);
        }
        Ok(())
    }

    /// Featurizes a labelled sample set once; the backbone never changes, so
    /// training reuses the cached features.
    pub fn featurize(&self, samples: &[Sample]) -> Result<FeatureMatrix> {
        let h = self.feature_dim;
        let mut rows = vec![0.0; samples.len() * h];
        let mut labels = Vec::with_capacity(samples.len());
        for (s, out) in samples.iter().zip(rows.chunks_exact_mut(h)) {
            self.features_into(&s.x, out)?;
            labels.push(s.label);
        }
        Ok(FeatureMatrix { dim: h, rows, labels })
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn serialized_len(&self) -> usize {
        8 * (HEADER_WORDS + self.param_count())
    }

    /// Header `(h, d, 2)` as little-endian u64, then weights and bias as
    /// little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        for word in [self.feature_dim as u64, self.input_dim as u64, 2] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// One labelled example in input space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

/// Backbone features for a sample set, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    rows: Vec<f64>,
    labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn from_rows(dim: usize, rows: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != dim * labels.len() {
            return Err(Error::shape("feature rows", dim * labels.len(), rows.len()));
        }
        Ok(FeatureMatrix { dim, rows, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterRole {
    Shared,
    Personalized,
}

impl AdapterRole {
    fn tag(self) -> u64 {
        match self {
            AdapterRole::Shared => 0,
            AdapterRole::Personalized => 1,
        }
    }
}

/// Linear head `c × h` plus bias, flattened as the weight rows followed by
/// the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    classes: usize,
    features: usize,
    role: AdapterRole,
    params: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros(classes: usize, features: usize, role: AdapterRole) -> Self {
        AdapterParams {
            classes,
            features,
            role,
            params: vec![0.0; classes * features + classes],
        }
    }

    pub fn from_flat(classes: usize, features: usize, role: AdapterRole, params: Vec<f64>) -> Result<Self> {
        let len = classes * features + classes;
        if params.len() != len {
            return Err(Error::shape("adapter parameters", len, params.len()));
        }
        Ok(AdapterParams {
            classes,
            features,
            role,
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn role(&self) -> AdapterRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight(&self) -> &[f64] {
        &self.params[..self.classes * self.features]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.classes * self.features..]
    }

    pub fn same_shape(&self, other: &AdapterParams) -> bool {
        self.classes == other.classes && self.features == other.features
    }

    /// `weight · feats + bias`.
    pub fn logits(&self, feats: &[f64]) -> Result<Vec<f64>> {
        if feats.len() != self.features {
            return Err(Error::shape("feature vector", self.features, feats.len()));
        }
        let w = self.weight();
        let b = self.bias();
        Ok((0..self.classes)
            .map(|k| {
                w[k * self.features..(k + 1) * self.features]
                    .iter()
                    .zip(feats)
                    .map(|(a, x)| a * x)
                    .sum::<f64>()
                    + b[k]
            })
            .collect())
    }

    /// `params -= step · grad`.
    pub fn descend(&mut self, step: f64, grad: &[f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= step * g;
        }
    }

    pub fn serialized_len(&self) -> usize {
        8 * (HEADER_WORDS + self.params.len())
    }

    /// Header `(c, h, role)` as little-endian u64, then the flattened
    /// parameters as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        self.write_bytes(&mut out);
        out
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        for word in [self.classes as u64, self.features as u64, self.role.tag()] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Parses one adapter from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let word = |i: usize| -> Result<u64> {
            bytes
                .get(8 * i..8 * i + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::InvalidInput("truncated adapter header".into()))
        };
        let classes = word(0)? as usize;
        let features = word(1)? as usize;
        let role = match word(2)? {
            0 => AdapterRole::Shared,
            1 => AdapterRole::Personalized,
            t => return Err(Error::InvalidInput(format!("unknown adapter role tag {t}"))),
        };
        let len = classes
            .checked_mul(features)
            .and_then(|x| x.checked_add(classes))
            .ok_or_else(|| Error::InvalidInput("adapter shape overflows".into()))?;
        let end = 8 * (HEADER_WORDS + len);
        if bytes.len() < end {
            return Err(Error::InvalidInput(format!(
                "truncated adapter payload: need {end} bytes, have {}",
                bytes.len()
            )));
        }
        let params = bytes[8 * HEADER_WORDS..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((
            AdapterParams {
                classes,
                features,
                role,
                params,
            },
            end,
        ))
    }
}

/// Batch-mean loss and both head gradients, evaluated at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub loss: f64,
    pub shared: Vec<f64>,
    pub personalized: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub communicated: usize,
    pub frozen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualAdapterModel {
    backbone: Arc<Backbone>,
    pub shared: AdapterParams,
    pub personalized: AdapterParams,
    mu: f64,
}

impl DualAdapterModel {
    /// Both heads start at zero.
    pub fn new(backbone: Arc<Backbone>, classes: usize, mu: f64) -> Result<Self> {
        check_mu(mu)?;
        if classes == 0 {
            return Err(Error::config("federation.classes", "need at least one class"));
        }
        let h = backbone.feature_dim();
        Ok(DualAdapterModel {
            backbone,
            shared: AdapterParams::zeros(classes, h, AdapterRole::Shared),
            personalized: AdapterParams::zeros(classes, h, AdapterRole::Personalized),
            mu,
        })
    }

    pub fn with_adapters(
        backbone: Arc<Backbone>,
        shared: AdapterParams,
        personalized: AdapterParams,
        mu: f64,
    ) -> Result<Self> {
        check_mu(mu)?;
        if !shared.same_shape(&personalized) {
            return Err(Error::shape("personalized adapter", shared.len(), personalized.len()));
        }
        if shared.features() != backbone.feature_dim() {
            return Err(Error::shape("adapter feature width", backbone.feature_dim(), shared.features()));
        }
        Ok(DualAdapterModel {
            backbone,
            shared,
            personalized,
            mu,
        })
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn classes(&self) -> usize {
        self.shared.classes()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn set_mu(&mut self, mu: f64) -> Result<()> {
        check_mu(mu)?;
        self.mu = mu;
        Ok(())
    }

    /// `μ·ŷ₂ + (1−μ)·ŷ₁` for one feature vector.
    pub fn mixed_logits(&self, feats: &[f64]) -> Result<Vec<f64>> {
        let y1 = self.shared.logits(feats)?;
        let y2 = self.personalized.logits(feats)?;
        Ok(y1
            .iter()
            .zip(&y2)
            .map(|(a, b)| self.mu * b + (1.0 - self.mu) * a)
            .collect())
    }

    /// Class probabilities for one input.
    pub fn mixed_predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.backbone.features(x)?;
        let z = self.mixed_logits(&f)?;
        Ok(softmax(&z))
    }

    pub fn loss(&self, batch: &[Sample]) -> Result<f64> {
        Ok(self.loss_and_grads(batch)?.loss)
    }

    pub fn grad_shared(&self, batch: &[Sample]) -> Result<Vec<f64>> {
        Ok(self.loss_and_grads(batch)?.shared)
    }

    pub fn grad_personalized(&self, batch: &[Sample]) -> Result<Vec<f64>> {
        Ok(self.loss_and_grads(batch)?.personalized)
    }

    pub fn loss_and_grads(&self, batch: &[Sample]) -> Result<HeadGrads> {
        let feats = self.backbone.featurize(batch)?;
        self.grads_on(&feats, None)
    }

    /// Loss and gradients over cached features, restricted to `rows` when
    /// given (a minibatch), otherwise over every row.
    pub fn grads_on(&self, feats: &FeatureMatrix, rows: Option<&[usize]>) -> Result<HeadGrads> {
        let mut pass = HeadPass::new(self)?;
        pass.run(feats, rows, true)?;
        let (loss, g) = pass.finish();
        let personalized = g.iter().map(|v| self.mu * v).collect();
        let shared = g.iter().map(|v| (1.0 - self.mu) * v).collect();
        Ok(HeadGrads {
            loss,
            shared,
            personalized,
        })
    }

    /// Batch-mean loss over cached features.
    pub fn loss_on(&self, feats: &FeatureMatrix, rows: Option<&[usize]>) -> Result<f64> {
        let mut pass = HeadPass::new(self)?;
        pass.run(feats, rows, false)?;
        Ok(pass.finish().0)
    }

    /// Predicted class per row: argmax of the mixed logits, ties to the
    /// lowest class index.
    pub fn predict_on(&self, feats: &FeatureMatrix) -> Result<Vec<usize>> {
        let pass = HeadPass::new(self)?;
        if feats.dim() != pass.h {
            return Err(Error::shape("feature width", pass.h, feats.dim()));
        }
        let mut z = vec![0.0; pass.c];
        Ok((0..feats.len())
            .map(|i| {
                pass.logits_into(feats.row(i), &mut z);
                argmax(&z)
            })
            .collect())
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            trainable: self.shared.len() + self.personalized.len(),
            communicated: self.shared.len(),
            frozen: self.backbone.param_count(),
        }
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::config("train.mu", format!("must lie in [0, 1], got {mu}")));
    }
    Ok(())
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Accumulator for one forward (and optionally backward) sweep. The two
/// heads are folded into a single combined head `μ·V + (1−μ)·W` first, so
/// each sample costs one matrix-vector product.
struct HeadPass {
    c: usize,
    h: usize,
    combined: Vec<f64>,
    grad: Vec<f64>,
    loss: f64,
    count: usize,
}

impl HeadPass {
    fn new(model: &DualAdapterModel) -> Result<Self> {
        let mu = model.mu;
        let combined = model
            .shared
            .as_slice()
            .iter()
            .zip(model.personalized.as_slice())
            .map(|(w, v)| mu * v + (1.0 - mu) * w)
            .collect();
        let c = model.shared.classes();
        let h = model.shared.features();
        Ok(HeadPass {
            c,
            h,
            combined,
            grad: vec![0.0; c * h + c],
            loss: 0.0,
            count: 0,
        })
    }

    #[inline]
    fn logits_into(&self, f: &[f64], z: &mut [f64]) {
        let (w, b) = self.combined.split_at(self.c * self.h);
        for (k, zk) in z.iter_mut().enumerate() {
            let row = &w[k * self.h..(k + 1) * self.h];
            *zk = dot(row, f) + b[k];
        }
    }

    fn run(&mut self, feats: &FeatureMatrix, rows: Option<&[usize]>, with_grad: bool) -> Result<()> {
        if feats.dim() != self.h {
            return Err(Error::shape("feature width", self.h, feats.dim()));
        }
        let n = rows.map_or(feats.len(), <[usize]>::len);
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut z = vec![0.0; self.c];
        for t in 0..n {
            let i = rows.map_or(t, |r| r[t]);
            let label = feats.label(i);
            if label >= self.c {
                return Err(Error::InvalidInput(format!(
                    "label {label} out of range for {} classes",
                    self.c
                )));
            }
            let f = feats.row(i);
            self.logits_into(f, &mut z);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let zy = z[label] - m;
            let mut s = 0.0;
            for zk in z.iter_mut() {
                *zk = (*zk - m).exp();
                s += *zk;
            }
            // z now holds exp(z - m)
            self.loss += s.ln() - zy;
            if with_grad {
                let (gw, gb) = self.grad.split_at_mut(self.c * self.h);
                for k in 0..self.c {
                    let delta = z[k] / s - if k == label { 1.0 } else { 0.0 };
                    axpy(delta, f, &mut gw[k * self.h..(k + 1) * self.h]);
                    gb[k] += delta;
                }
            }
            self.count += 1;
        }
        Ok(())
    }

    fn finish(self) -> (f64, Vec<f64>) {
        let inv = 1.0 / self.count as f64;
        (self.loss * inv, self.grad.into_iter().map(|g| g * inv).collect())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators let the compiler vectorize
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::{compare_gradients, finite_diff_grad, naive_matvec, FiniteDiffSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_backbone(d: usize) -> Backbone {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Backbone::from_parts(d, d, w, vec![0.0; d]).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize, h: usize, c: usize, mu: f64) -> DualAdapterModel {
        let bb = Arc::new(Backbone::random(d, h, rng.random()).unwrap());
        let mut m = DualAdapterModel::new(bb, c, mu).unwrap();
        for p in m.shared.as_mut_slice() {
            *p = rng.random::<f64>() - 0.5;
        }
        for p in m.personalized.as_mut_slice() {
            *p = rng.random::<f64>() - 0.5;
        }
        m
    }

    fn random_batch(rng: &mut ChaCha8Rng, d: usize, c: usize, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| Sample {
                x: (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect(),
                label: rng.random_range(0..c),
            })
            .collect()
    }

    /// Scalar-by-scalar cross-entropy: features, both heads, mixing and a
    /// log-sum-exp, all written out independently of `HeadPass`.
    fn reference_loss(m: &DualAdapterModel, batch: &[Sample]) -> f64 {
        let bb = m.backbone();
        let (d, h, c) = (bb.input_dim(), bb.feature_dim(), m.classes());
        let mut total = 0.0;
        for s in batch {
            let mut f = naive_matvec(h, d, bb.weights(), &s.x);
            for k in 0..h {
                f[k] = (f[k] + bb.bias()[k]).max(0.0);
            }
            let y1 = naive_matvec(c, h, m.shared.weight(), &f);
            let y2 = naive_matvec(c, h, m.personalized.weight(), &f);
            let z: Vec<f64> = (0..c)
                .map(|k| {
                    m.mu() * (y2[k] + m.personalized.bias()[k])
                        + (1.0 - m.mu()) * (y1[k] + m.shared.bias()[k])
                })
                .collect();
            let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
            total += lse - z[s.label];
        }
        total / batch.len() as f64
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let bb = Backbone::from_parts(3, 2, vec![1.0, -2.0, 0.5, 0.3, 0.1, -1.0], vec![0.0; 2]).unwrap();
        assert_eq!(bb.features(&[0.0; 3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rectifier_clamps_negative_features() {
        let bb = identity_backbone(2);
        assert_eq!(bb.features(&[1.0, -2.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn features_match_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bb = Backbone::random(7, 13, 5).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..7).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let got = bb.features(&x).unwrap();
            let mut want = naive_matvec(13, 7, bb.weights(), &x);
            for k in 0..13 {
                want[k] = (want[k] + bb.bias()[k]).max(0.0);
                assert!((got[k] - want[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn feature_dimension_mismatch_is_shape_error() {
        let bb = Backbone::random(4, 3, 0).unwrap();
        assert_eq!(bb.features(&[1.0; 5]).unwrap_err().category(), "shape-error");
    }

    #[test]
    fn backbone_is_seed_deterministic() {
        let a = Backbone::random(16, 32, 42).unwrap();
        let b = Backbone::random(16, 32, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a, Backbone::random(16, 32, 43).unwrap());
    }

    #[test]
    fn head_logits_cases() {
        let zero = AdapterParams::zeros(3, 4, AdapterRole::Shared);
        assert_eq!(zero.logits(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
        let id = AdapterParams::from_flat(2, 2, AdapterRole::Shared, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(id.logits(&[3.0, 1.0]).unwrap(), vec![3.0, 1.0]);
        assert_eq!(id.logits(&[3.0]).unwrap_err().category(), "shape-error");

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: Vec<f64> = (0..5 * 6 + 5).map(|_| rng.random::<f64>() - 0.5).collect();
        let a = AdapterParams::from_flat(5, 6, AdapterRole::Personalized, params).unwrap();
        let f: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let got = a.logits(&f).unwrap();
        let want = naive_matvec(5, 6, a.weight(), &f);
        for k in 0..5 {
            assert!((got[k] - (want[k] + a.bias()[k])).abs() < 1e-14);
        }
    }

    fn two_by_two_model(mu: f64) -> DualAdapterModel {
        // identity backbone; shared gives (2f0, 0), personalized (0, 2f1)
        let bb = Arc::new(identity_backbone(2));
        let shared = AdapterParams::from_flat(2, 2, AdapterRole::Shared, vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let pers =
            AdapterParams::from_flat(2, 2, AdapterRole::Personalized, vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        DualAdapterModel::with_adapters(bb, shared, pers, mu).unwrap()
    }

    #[test]
    fn mixed_predict_endpoints_and_midpoint() {
        let x = [1.0, 1.0];
        // ŷ₁ = (2, 0), ŷ₂ = (0, 2)
        assert_eq!(two_by_two_model(1.0).mixed_predict(&x).unwrap(), softmax(&[0.0, 2.0]));
        assert_eq!(two_by_two_model(0.0).mixed_predict(&x).unwrap(), softmax(&[2.0, 0.0]));
        assert_eq!(two_by_two_model(0.5).mixed_predict(&x).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn zero_adapters_give_log_c_loss() {
        let bb = Arc::new(Backbone::random(4, 6, 1).unwrap());
        let m = DualAdapterModel::new(bb, 7, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(&mut rng, 4, 7, 9);
        assert_eq!(m.loss(&batch).unwrap(), (7.0f64).ln());
    }

    #[test]
    fn saturated_prediction_has_tiny_loss() {
        let bb = Arc::new(identity_backbone(2));
        let shared = AdapterParams::from_flat(2, 2, AdapterRole::Shared, vec![30.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let pers = AdapterParams::from_flat(2, 2, AdapterRole::Personalized, vec![30.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let m = DualAdapterModel::with_adapters(bb, shared, pers, 0.5).unwrap();
        let loss = m.loss(&[Sample { x: vec![1.0, 0.0], label: 0 }]).unwrap();
        assert!(loss < 1e-8 && loss >= 0.0, "{loss}");
    }

    #[test]
    fn loss_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let mu = rng.random::<f64>();
            let m = random_model(&mut rng, 5, 8, 4, mu);
            let batch = random_batch(&mut rng, 5, 4, 12);
            let got = m.loss(&batch).unwrap();
            let want = reference_loss(&m, &batch);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn loss_input_errors() {
        let bb = Arc::new(Backbone::random(2, 3, 1).unwrap());
        let m = DualAdapterModel::new(bb, 3, 0.5).unwrap();
        assert_eq!(m.loss(&[]).unwrap_err().category(), "invalid-input");
        let bad = [Sample { x: vec![0.0, 0.0], label: 3 }];
        assert_eq!(m.loss(&bad).unwrap_err().category(), "invalid-input");
    }

    #[test]
    fn gradients_vanish_at_mu_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m1 = random_model(&mut rng, 3, 5, 3, 1.0);
        let batch = random_batch(&mut rng, 3, 3, 6);
        assert!(m1.grad_shared(&batch).unwrap().iter().all(|&g| g == 0.0));
        let m0 = random_model(&mut rng, 3, 5, 3, 0.0);
        assert!(m0.grad_personalized(&batch).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = FiniteDiffSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let mu = rng.random::<f64>();
            let m = random_model(&mut rng, 4, 6, 3, mu);
            let batch = random_batch(&mut rng, 4, 3, 8);
            let analytic = m.loss_and_grads(&batch).unwrap();

            let f_shared = |p: &[f64]| {
                let mut mm = m.clone();
                mm.shared.as_mut_slice().copy_from_slice(p);
                reference_loss(&mm, &batch)
            };
            let num = finite_diff_grad(f_shared, m.shared.as_slice(), &spec).unwrap();
            let check = compare_gradients(&analytic.shared, &num, &spec);
            assert!(check.passes(&spec), "{check:?}");

            let f_pers = |p: &[f64]| {
                let mut mm = m.clone();
                mm.personalized.as_mut_slice().copy_from_slice(p);
                reference_loss(&mm, &batch)
            };
            let num = finite_diff_grad(f_pers, m.personalized.as_slice(), &spec).unwrap();
            let check = compare_gradients(&analytic.personalized, &num, &spec);
            assert!(check.passes(&spec), "{check:?}");

            // Richardson-style consistency of the oracle itself
            let fine = FiniteDiffSpec { step: 1e-6, ..spec };
            let num_fine = finite_diff_grad(f_pers, m.personalized.as_slice(), &fine).unwrap();
            let check = compare_gradients(&num_fine, &num, &FiniteDiffSpec { rel_tol: 1e-4, ..spec });
            assert!(check.passes(&FiniteDiffSpec { rel_tol: 1e-4, ..spec }), "{check:?}");
        }
    }

    #[test]
    fn mu_scaling_of_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 3, 4, 3, 0.5);
        let batch = random_batch(&mut rng, 3, 3, 5);
        let g = m.loss_and_grads(&batch).unwrap();
        // at μ = 0.5 both chain-rule factors are 0.5, so the two gradients coincide
        // and each is half the gradient with respect to the mixed head
        for (a, b) in g.shared.iter().zip(&g.personalized) {
            assert_eq!(a, b);
        }
        let feats = m.backbone().featurize(&batch).unwrap();
        let mut full = HeadPass::new(&m).unwrap();
        full.run(&feats, None, true).unwrap();
        let (_, raw) = full.finish();
        for (a, r) in g.shared.iter().zip(&raw) {
            assert_eq!(*a, 0.5 * r);
        }
    }

    #[test]
    fn param_count_examples() {
        let bb = Arc::new(Backbone::random(32, 64, 0).unwrap());
        let m = DualAdapterModel::new(bb, 10, 0.5).unwrap();
        assert_eq!(
            m.param_counts(),
            ParamCounts {
                trainable: 1300,
                communicated: 650,
                frozen: 2112
            }
        );
        let tiny = DualAdapterModel::new(Arc::new(Backbone::random(1, 1, 0).unwrap()), 1, 0.5).unwrap();
        assert_eq!(tiny.param_counts().communicated, 2);
        let default = DualAdapterModel::new(Arc::new(Backbone::random(64, 128, 0).unwrap()), 10, 0.5).unwrap();
        let pc = default.param_counts();
        assert!((pc.communicated as f64) / ((pc.frozen + pc.communicated) as f64) < 0.25);
    }

    #[test]
    fn adapter_bytes_round_trip() {
        let a = AdapterParams::from_flat(2, 3, AdapterRole::Personalized, (0..8).map(|v| v as f64 * 0.5).collect()).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(bytes.len(), a.serialized_len());
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        let (back, used) = AdapterParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(used, bytes.len());
        assert!(AdapterParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    proptest! {
        #[test]
        fn mixed_predict_is_on_simplex(seed in any::<u64>(), mu in 0.0f64..=1.0, scale in 0.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = random_model(&mut rng, 3, 5, 4, mu);
            for p in m.shared.as_mut_slice() { *p *= scale; }
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let p = m.mixed_predict(&x).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
