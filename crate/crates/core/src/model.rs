//! Patch classifiers: a miniature trainable convnet, an adapter for external
//! predictions, and an oracle that reads ground-truth label maps.
//!
//! MiniNet layout (56x56x3 input, CHW, values in [0, 1]):
//! conv1 3->8 3x3 pad 1, ReLU, 2x2 max-pool -> 28x28x8;
//! conv2 8->16 3x3 pad 1, ReLU, 2x2 max-pool -> 14x14x16;
//! fully connected 3136 -> 3, softmax.
//!
//! Parameters live in one flat vector in this order (row-major within each
//! tensor): conv1_w[8][3][3][3], conv1_b[8], conv2_w[16][8][3][3],
//! conv2_b[16], fc_w[3][3136], fc_b[3]. Checkpoints store the same order.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotate::{self, LabelMap, LabelRule, TissueClass};
use crate::cohort::{self, CohortError};
use crate::raster::{Rect, RgbImage};
use crate::rng::{derive, SplitMix64};
use crate::tiler::PatchRecord;

pub const PATCH_SIZE: usize = 224;
pub const INPUT_SIZE: usize = 56;
const POOL: usize = PATCH_SIZE / INPUT_SIZE;
const C0: usize = 3;
const C1: usize = 8;
const C2: usize = 16;
const N1: usize = INPUT_SIZE;
const N2: usize = N1 / 2;
const N3: usize = N2 / 2;
const FEATURES: usize = C2 * N3 * N3;
const N_CLASSES: usize = 3;

const W1: usize = 0;
const B1: usize = W1 + C1 * C0 * 9;
const W2: usize = B1 + C1;
const B2: usize = W2 + C2 * C1 * 9;
const WF: usize = B2 + C2;
const BF: usize = WF + N_CLASSES * FEATURES;
pub const N_PARAMS: usize = BF + N_CLASSES;

/// Named parameter tensors as (name, offset, len, fan_in).
pub const TENSORS: [(&str, usize, usize, usize); 6] = [
    ("conv1_w", W1, B1 - W1, C0 * 9),
    ("conv1_b", B1, C1, C0 * 9),
    ("conv2_w", W2, B2 - W2, C1 * 9),
    ("conv2_b", B2, C2, C1 * 9),
    ("fc_w", WF, BF - WF, FEATURES),
    ("fc_b", BF, N_CLASSES, FEATURES),
];

const CHECKPOINT_MAGIC: &[u8; 5] = b"MNET1";
const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("patch is {width}x{height}, expected {PATCH_SIZE}x{PATCH_SIZE}")]
    WrongPatchSize { width: usize, height: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("need at least {needed} patches, got {found}")]
    TooFewPatches { needed: usize, found: usize },
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("missing {0} corpus")]
    MissingCorpus(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no prediction for patch {0}")]
    MissingPatchId(String),
    #[error("malformed predictions row {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("predictions row {line} sums to {sum}")]
    NonNormalizedRow { line: u64, sum: f64 },
    #[error("invalid probability vector {0:?}")]
    InvalidProbs([f64; 3]),
    #[error("no label map for slide {0}")]
    UnknownSlide(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Probabilities over (tumor, stroma, other).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassProbs {
    pub p: [f64; 3],
}

impl ClassProbs {
    pub fn new(p: [f64; 3]) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidProbs(p));
        }
        Ok(Self { p })
    }

    pub fn one_hot(class: TissueClass) -> Self {
        let mut p = [0.0; 3];
        p[class.index()] = 1.0;
        Self { p }
    }

    /// Numerically stable softmax.
    pub fn softmax(logits: [f64; 3]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = logits.map(|z| (z - m).exp());
        let s: f64 = e.iter().sum();
        Self { p: e.map(|v| v / s) }
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> TissueClass {
        let mut best = 0;
        for i in 1..3 {
            if self.p[i] > self.p[best] {
                best = i;
            }
        }
        TissueClass::from_index(best).expect("index < 3")
    }
}

/// Area-downsamples a 224x224 patch to 56x56 and scales to [0, 1], CHW.
pub fn prepare(patch: &RgbImage) -> Result<Vec<f64>> {
    if (patch.width(), patch.height()) != (PATCH_SIZE, PATCH_SIZE) {
        return Err(ModelError::WrongPatchSize {
            width: patch.width(),
            height: patch.height(),
        });
    }
    let mut out = vec![0.0; C0 * N1 * N1];
    let data = patch.data();
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let o = (y / POOL) * N1 + x / POOL;
            let i = (y * PATCH_SIZE + x) * 3;
            for c in 0..C0 {
                out[c * N1 * N1 + o] += data[i + c] as f64;
            }
        }
    }
    let scale = 1.0 / (255.0 * (POOL * POOL) as f64);
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// A prepared training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: TissueClass,
}

impl Sample {
    pub fn new(patch: &RgbImage, label: TissueClass) -> Result<Self> {
        Ok(Self {
            input: prepare(patch)?,
            label,
        })
    }
}

/// SHA-256 over labels and inputs, hex-encoded.
pub fn corpus_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update([s.label.code()]);
        for v in &s.input {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn valid_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

/// 3x3 convolution with zero padding 1 and stride 1, CHW layout.
fn conv3x3(input: &[f64], cin: usize, n: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let nn = n * n;
    let mut out = vec![0.0; cout * nn];
    for oc in 0..cout {
        let o = &mut out[oc * nn..(oc + 1) * nn];
        o.fill(b[oc]);
        for ic in 0..cin {
            let inp = &input[ic * nn..(ic + 1) * nn];
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, n);
                for kx in 0..3 {
                    let (x0, x1) = valid_range(kx, n);
                    let wv = w[((oc * cin + ic) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let orow = &mut o[y * n + x0..y * n + x1];
                        let irow = &inp[iy * n + x0 + kx - 1..iy * n + x1 + kx - 1];
                        for (a, v) in orow.iter_mut().zip(irow) {
                            *a += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of `conv3x3`; also input gradients
/// when `din` is given.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    n: usize,
    w: &[f64],
    dout: &[f64],
    cout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    let nn = n * n;
    for oc in 0..cout {
        let d = &dout[oc * nn..(oc + 1) * nn];
        db[oc] += d.iter().sum::<f64>();
        for ic in 0..cin {
            let inp = &input[ic * nn..(ic + 1) * nn];
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, n);
                for kx in 0..3 {
                    let (x0, x1) = valid_range(kx, n);
                    let wi = ((oc * cin + ic) * 3 + ky) * 3 + kx;
                    let wv = w[wi];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let drow = &d[y * n + x0..y * n + x1];
                        let ioff = iy * n + x0 + kx - 1;
                        let irow = &inp[ioff..ioff + (x1 - x0)];
                        acc += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(din) = din.as_deref_mut() {
                            let dirow = &mut din[ic * nn + ioff..ic * nn + ioff + (x1 - x0)];
                            for (g, dv) in dirow.iter_mut().zip(drow) {
                                *g += wv * dv;
                            }
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
}

/// 2x2 max-pool; returns pooled values and the argmax input index of each
/// (first maximum in scan order).
fn maxpool2(input: &[f64], c: usize, n: usize) -> (Vec<f64>, Vec<u32>) {
    let m = n / 2;
    let mut out = vec![0.0; c * m * m];
    let mut idx = vec![0u32; c * m * m];
    for ch in 0..c {
        for y in 0..m {
            for x in 0..m {
                let base = ch * n * n + 2 * y * n + 2 * x;
                let mut best = base;
                for cand in [base + 1, base + n, base + n + 1] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                out[ch * m * m + y * m + x] = input[best];
                idx[ch * m * m + y * m + x] = best as u32;
            }
        }
    }
    (out, idx)
}

struct Activations {
    a1: Vec<f64>,
    p1: Vec<f64>,
    i1: Vec<u32>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    i2: Vec<u32>,
    logits: [f64; 3],
}

/// The miniature convnet.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniNet {
    params: Vec<f64>,
}

impl MiniNet {
    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; N_PARAMS],
        }
    }

    /// Every tensor uniform in +-1/sqrt(fan_in), drawn in parameter order.
    pub fn init(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut params = vec![0.0; N_PARAMS];
        for (_, off, len, fan_in) in TENSORS {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[off..off + len] {
                *v = rng.uniform(-bound, bound);
            }
        }
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != N_PARAMS {
            return Err(ModelError::Checkpoint(format!(
                "expected {N_PARAMS} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let p = &self.params;
        let mut a1 = conv3x3(x, C0, N1, &p[W1..B1], &p[B1..W2], C1);
        a1.iter_mut().for_each(|v| *v = v.max(0.0));
        let (p1, i1) = maxpool2(&a1, C1, N1);
        let mut a2 = conv3x3(&p1, C1, N2, &p[W2..B2], &p[B2..WF], C2);
        a2.iter_mut().for_each(|v| *v = v.max(0.0));
        let (p2, i2) = maxpool2(&a2, C2, N2);
        let logits = std::array::from_fn(|k| {
            let w = &p[WF + k * FEATURES..WF + (k + 1) * FEATURES];
            p[BF + k] + w.iter().zip(&p2).map(|(a, b)| a * b).sum::<f64>()
        });
        Activations {
            a1,
            p1,
            i1,
            a2,
            p2,
            i2,
            logits,
        }
    }

    /// Which piece of the piecewise-linear network `x` falls in: ReLU signs
    /// and max-pool winners. Two parameter vectors with equal patterns lie on
    /// one smooth piece for this input.
    pub fn activation_pattern(&self, x: &[f64]) -> Vec<u32> {
        let act = self.activations(x);
        let signs = |a: &[f64]| a.iter().map(|&v| u32::from(v > 0.0)).collect::<Vec<_>>();
        let mut out = signs(&act.a1);
        out.extend(signs(&act.a2));
        out.extend(act.i1);
        out.extend(act.i2);
        out
    }

    /// Logits of a prepared input.
    pub fn logits(&self, x: &[f64]) -> [f64; 3] {
        self.activations(x).logits
    }

    pub fn predict(&self, x: &[f64]) -> ClassProbs {
        ClassProbs::softmax(self.logits(x))
    }

    pub fn forward(&self, patch: &RgbImage) -> Result<ClassProbs> {
        Ok(self.predict(&prepare(patch)?))
    }

    /// Adds the cross-entropy gradient of one sample, scaled by `scale`, to
    /// `grad`; returns `-ln p_label` and the predicted class.
    fn accumulate(&self, s: &Sample, scale: f64, grad: &mut [f64]) -> (f64, TissueClass) {
        let p = &self.params;
        let act = self.activations(&s.input);
        let probs = ClassProbs::softmax(act.logits);
        let m = act.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + act.logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let loss = lse - act.logits[s.label.index()];

        let mut dlogits = probs.p;
        dlogits[s.label.index()] -= 1.0;
        dlogits.iter_mut().for_each(|v| *v *= scale);

        let mut dp2 = vec![0.0; FEATURES];
        for k in 0..N_CLASSES {
            let dk = dlogits[k];
            grad[BF + k] += dk;
            let w = &p[WF + k * FEATURES..WF + (k + 1) * FEATURES];
            let gw = &mut grad[WF + k * FEATURES..WF + (k + 1) * FEATURES];
            for j in 0..FEATURES {
                gw[j] += dk * act.p2[j];
                dp2[j] += w[j] * dk;
            }
        }

        let mut da2 = vec![0.0; act.a2.len()];
        for (j, &i) in act.i2.iter().enumerate() {
            if act.a2[i as usize] > 0.0 {
                da2[i as usize] += dp2[j];
            }
        }
        let mut dp1 = vec![0.0; act.p1.len()];
        let (gw2, rest) = grad[W2..WF].split_at_mut(B2 - W2);
        conv3x3_backward(&act.p1, C1, N2, &p[W2..B2], &da2, C2, gw2, rest, Some(&mut dp1));

        let mut da1 = vec![0.0; act.a1.len()];
        for (j, &i) in act.i1.iter().enumerate() {
            if act.a1[i as usize] > 0.0 {
                da1[i as usize] += dp1[j];
            }
        }
        let (gw1, rest) = grad[W1..W2].split_at_mut(B1 - W1);
        conv3x3_backward(&s.input, C0, N1, &p[W1..B1], &da1, C1, gw1, rest, None);

        (loss, probs.argmax())
    }

    /// Mean cross-entropy plus `weight_decay * 0.5 * |w|^2` over all
    /// parameters, and its gradient.
    pub fn loss_and_gradients(&self, batch: &[&Sample], weight_decay: f64) -> Result<(f64, Vec<f64>)> {
        let (loss, grad, _) = self.batch_gradients(batch, weight_decay)?;
        Ok((loss, grad))
    }

    fn batch_gradients(&self, batch: &[&Sample], weight_decay: f64) -> Result<(f64, Vec<f64>, usize)> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; N_PARAMS];
        let mut loss = 0.0;
        let mut correct = 0;
        for s in batch {
            let (l, pred) = self.accumulate(s, scale, &mut grad);
            loss += l * scale;
            correct += usize::from(pred == s.label);
        }
        if weight_decay != 0.0 {
            loss += 0.5 * weight_decay * self.params.iter().map(|w| w * w).sum::<f64>();
            for (g, w) in grad.iter_mut().zip(&self.params) {
                *g += weight_decay * w;
            }
        }
        Ok((loss, grad, correct))
    }

    /// Loss alone, for finite-difference checks.
    pub fn loss(&self, batch: &[&Sample], weight_decay: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut loss = 0.0;
        for s in batch {
            let z = self.logits(&s.input);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[s.label.index()];
        }
        loss /= batch.len() as f64;
        Ok(loss + 0.5 * weight_decay * self.params.iter().map(|w| w * w).sum::<f64>())
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let correct = samples
            .par_iter()
            .filter(|s| self.predict(&s.input).argmax() == s.label)
            .count();
        correct as f64 / samples.len() as f64
    }

    /// `MNET1`, parameter count as u64 LE, then each parameter as f64 LE.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in &self.params {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| ModelError::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)
            .map_err(|_| ModelError::Checkpoint("truncated header".into()))?;
        let n = u64::from_le_bytes(buf) as usize;
        if n != N_PARAMS {
            return Err(ModelError::Checkpoint(format!("expected {N_PARAMS} parameters, got {n}")));
        }
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| ModelError::Checkpoint("truncated parameters".into()))?;
            params.push(f64::from_le_bytes(buf));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        Self::from_params(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_max: usize,
    pub seed: u64,
    pub patience: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 4,
            epochs_max: 30,
            seed: 0,
            patience: 5,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(ModelError::InvalidConfig("patience must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ModelError::InvalidConfig("weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Fraction of samples classified correctly before each update.
    pub accuracy: f64,
}

/// Minibatch SGD over `data` with a shuffle stream seeded by `cfg.seed`.
struct Sgd<'a> {
    data: &'a [Sample],
    cfg: TrainConfig,
    rng: SplitMix64,
    order: Vec<usize>,
    epoch: usize,
}

impl<'a> Sgd<'a> {
    fn new(data: &'a [Sample], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.len() < cfg.batch_size {
            return Err(ModelError::TooFewPatches {
                needed: cfg.batch_size,
                found: data.len(),
            });
        }
        Ok(Self {
            data,
            cfg,
            rng: SplitMix64::new(derive(cfg.seed, "sgd")),
            order: (0..data.len()).collect(),
            epoch: 0,
        })
    }

    fn epoch(&mut self, net: &mut MiniNet) -> EpochStats {
        self.epoch += 1;
        self.rng.shuffle(&mut self.order);
        let (mut loss, mut correct, mut batches) = (0.0, 0, 0);
        for chunk in self.order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &self.data[i]).collect();
            let (l, g, c) = net
                .batch_gradients(&batch, self.cfg.weight_decay)
                .expect("chunks are nonempty");
            for (w, gi) in net.params.iter_mut().zip(&g) {
                *w -= self.cfg.learning_rate * gi;
            }
            loss += l;
            correct += c;
            batches += 1;
        }
        EpochStats {
            epoch: self.epoch,
            loss: loss / batches as f64,
            accuracy: correct as f64 / self.data.len() as f64,
        }
    }
}

/// Trains for `cfg.epochs_max` epochs.
pub fn train(net: &MiniNet, data: &[Sample], cfg: &TrainConfig) -> Result<(MiniNet, Vec<EpochStats>)> {
    train_epochs(net, data, cfg, cfg.epochs_max)
}

pub fn train_epochs(net: &MiniNet, data: &[Sample], cfg: &TrainConfig, epochs: usize) -> Result<(MiniNet, Vec<EpochStats>)> {
    let mut sgd = Sgd::new(data, *cfg)?;
    let mut net = net.clone();
    let trace = (0..epochs).map(|_| sgd.epoch(&mut net)).collect();
    Ok((net, trace))
}

/// Tracks the best validation score. Accuracy ranks first and validation
/// loss breaks ties; an epoch that improves neither counts toward patience,
/// so full ties keep the earliest epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    /// (epoch, accuracy, loss)
    best: Option<(usize, f64, f64)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records `score` for `epoch`; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        self.observe_with_loss(epoch, score, 0.0)
    }

    pub fn observe_with_loss(&mut self, epoch: usize, accuracy: f64, loss: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some((_, a, l)) => accuracy > a || (accuracy == a && loss < l),
        };
        if improved {
            self.best = Some((epoch, accuracy, loss));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _, _)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(_, s, _)| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EarlyStopResult {
    pub optimal_epochs: usize,
    pub best_validation_accuracy: f64,
    pub validation_trace: Vec<f64>,
    pub validation_loss_trace: Vec<f64>,
    pub phase1_trace: Vec<EpochStats>,
    pub phase2_trace: Vec<EpochStats>,
    #[serde(skip)]
    pub net: MiniNet,
}

/// Holds out a stratified third of `data` to pick the epoch count, then
/// retrains from `net` on all of `data` for that many epochs.
pub fn train_early_stop(net: &MiniNet, data: &[Sample], cfg: &TrainConfig) -> Result<EarlyStopResult> {
    cfg.validate()?;
    let labels: Vec<TissueClass> = data.iter().map(|s| s.label).collect();
    let (train_idx, val_idx) = cohort::holdout_split(&labels, 1.0 / 3.0, derive(cfg.seed, "holdout"))?;
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| data[i].clone()).collect();
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| data[i].clone()).collect();
    if val_set.is_empty() {
        return Err(ModelError::TooFewPatches {
            needed: 3,
            found: data.len(),
        });
    }

    let mut sgd = Sgd::new(&train_set, *cfg)?;
    let mut phase_net = net.clone();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut phase1_trace = Vec::new();
    let mut validation_trace = Vec::new();
    let mut validation_loss_trace = Vec::new();
    let val_refs: Vec<&Sample> = val_set.iter().collect();
    for epoch in 1..=cfg.epochs_max {
        phase1_trace.push(sgd.epoch(&mut phase_net));
        let acc = phase_net.accuracy(&val_set);
        let loss = phase_net.loss(&val_refs, 0.0)?;
        validation_trace.push(acc);
        validation_loss_trace.push(loss);
        if stopper.observe_with_loss(epoch, acc, loss) {
            break;
        }
    }
    let optimal_epochs = stopper.best_epoch().unwrap_or(0);
    let (final_net, phase2_trace) = train_epochs(net, data, cfg, optimal_epochs)?;
    Ok(EarlyStopResult {
        optimal_epochs,
        best_validation_accuracy: stopper.best_score().unwrap_or(0.0),
        validation_trace,
        validation_loss_trace,
        phase1_trace,
        phase2_trace,
        net: final_net,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub best_index: usize,
    pub best: TrainConfig,
    /// Mean held-out-fold accuracy per grid entry.
    pub scores: Vec<f64>,
    pub fold_scores: Vec<Vec<f64>>,
}

/// k-fold selection over `grid`, each fold trained from `init` for
/// `epochs_max` epochs. Ties go to the earliest grid entry.
pub fn cross_validate(grid: &[TrainConfig], data: &[Sample], k: usize, seed: u64, init: &MiniNet) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(ModelError::EmptyGrid);
    }
    let labels: Vec<TissueClass> = data.iter().map(|s| s.label).collect();
    let folds = cohort::kfold(&labels, k, seed)?;
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..k).map(move |f| (g, f))).collect();
    let accs = jobs
        .par_iter()
        .map(|&(g, f)| {
            let held: Vec<Sample> = folds[f].iter().map(|&i| data[i].clone()).collect();
            let train_set: Vec<Sample> = folds
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != f)
                .flat_map(|(_, idx)| idx.iter().map(|&i| data[i].clone()))
                .collect();
            let (net, _) = train(init, &train_set, &grid[g])?;
            Ok(net.accuracy(&held))
        })
        .collect::<Result<Vec<f64>>>()?;
    let fold_scores: Vec<Vec<f64>> = accs.chunks(k).map(|c| c.to_vec()).collect();
    let scores: Vec<f64> = fold_scores.iter().map(|f| f.iter().sum::<f64>() / k as f64).collect();
    let mut best_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best_index] {
            best_index = i;
        }
    }
    Ok(CvResult {
        best_index,
        best: grid[best_index],
        scores,
        fold_scores,
    })
}

/// Pretraining strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SetupId {
    /// Generic pretraining, then domain pretraining, then target.
    Setup1,
    /// Generic pretraining, then target.
    Setup2,
    /// Random init, then domain pretraining, then target.
    Setup3,
}

impl SetupId {
    pub const ALL: [SetupId; 3] = [SetupId::Setup1, SetupId::Setup2, SetupId::Setup3];

    /// Whether the setup pretrains on the (generic, domain) corpora.
    pub fn pretraining(self) -> (bool, bool) {
        match self {
            SetupId::Setup1 => (true, true),
            SetupId::Setup2 => (true, false),
            SetupId::Setup3 => (false, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SetupId::Setup1 => "SETUP-1",
            SetupId::Setup2 => "SETUP-2",
            SetupId::Setup3 => "SETUP-3",
        }
    }
}

impl std::str::FromStr for SetupId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "setup1" | "setup-1" => Ok(SetupId::Setup1),
            "2" | "setup2" | "setup-2" => Ok(SetupId::Setup2),
            "3" | "setup3" | "setup-3" => Ok(SetupId::Setup3),
            _ => Err(format!("unknown setup {s:?}")),
        }
    }
}

/// Per-stage training configs. The initial weights come from `init_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetupConfig {
    pub init_seed: u64,
    pub generic: TrainConfig,
    pub domain: TrainConfig,
    pub target: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: String,
    pub corpus_hash: String,
    pub n_patches: usize,
    pub epochs: usize,
    pub trace: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub setup: SetupId,
    pub init_seed: u64,
    pub stages: Vec<StageRecord>,
    pub optimal_epochs: usize,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetupResult {
    pub net: MiniNet,
    pub provenance: Provenance,
}

fn pretrain(
    net: &MiniNet,
    stage: &str,
    data: &[Sample],
    cfg: &TrainConfig,
    stages: &mut Vec<StageRecord>,
) -> Result<MiniNet> {
    let (out, trace) = train(net, data, cfg)?;
    stages.push(StageRecord {
        stage: stage.to_string(),
        corpus_hash: corpus_hash(data),
        n_patches: data.len(),
        epochs: trace.len(),
        trace,
    });
    Ok(out)
}

fn check_corpora(id: SetupId, generic: &[Sample], domain: &[Sample]) -> Result<()> {
    let (needs_generic, needs_domain) = id.pretraining();
    if needs_generic && generic.is_empty() {
        return Err(ModelError::MissingCorpus("generic"));
    }
    if needs_domain && domain.is_empty() {
        return Err(ModelError::MissingCorpus("domain"));
    }
    Ok(())
}

/// Initial weights for `id` after its pretraining stages, with their records.
pub fn pretrain_setup(
    id: SetupId,
    generic: &[Sample],
    domain: &[Sample],
    cfg: &SetupConfig,
) -> Result<(MiniNet, Vec<StageRecord>)> {
    check_corpora(id, generic, domain)?;
    let (needs_generic, needs_domain) = id.pretraining();
    let mut stages = Vec::new();
    let mut net = MiniNet::init(cfg.init_seed);
    if needs_generic {
        net = pretrain(&net, "generic", generic, &cfg.generic, &mut stages)?;
    }
    if needs_domain {
        net = pretrain(&net, "domain", domain, &cfg.domain, &mut stages)?;
    }
    Ok((net, stages))
}

/// Early-stopped target training on top of `pretrained`.
pub fn finish_setup(
    id: SetupId,
    pretrained: &MiniNet,
    mut stages: Vec<StageRecord>,
    target: &[Sample],
    cfg: &SetupConfig,
) -> Result<SetupResult> {
    if target.is_empty() {
        return Err(ModelError::MissingCorpus("target"));
    }
    let es = train_early_stop(pretrained, target, &cfg.target)?;
    stages.push(StageRecord {
        stage: "target".to_string(),
        corpus_hash: corpus_hash(target),
        n_patches: target.len(),
        epochs: es.optimal_epochs,
        trace: es.phase2_trace.clone(),
    });
    Ok(SetupResult {
        net: es.net,
        provenance: Provenance {
            setup: id,
            init_seed: cfg.init_seed,
            stages,
            optimal_epochs: es.optimal_epochs,
            validation_accuracy: es.best_validation_accuracy,
        },
    })
}

/// Setup1: generic, domain, target. Setup2: generic, target. Setup3: random
/// init, domain, target.
pub fn run_setup(
    id: SetupId,
    generic: &[Sample],
    domain: &[Sample],
    target: &[Sample],
    cfg: &SetupConfig,
) -> Result<SetupResult> {
    check_corpora(id, generic, domain)?;
    if target.is_empty() {
        return Err(ModelError::MissingCorpus("target"));
    }
    let (net, stages) = pretrain_setup(id, generic, domain, cfg)?;
    finish_setup(id, &net, stages, target, cfg)
}

/// What a classifier sees of a patch.
#[derive(Debug, Clone, Copy)]
pub struct PatchRef<'a> {
    pub patch_id: &'a str,
    pub slide_id: &'a str,
    pub rect: Rect,
    pub pixels: &'a RgbImage,
}

/// Read-only after construction; safe to call from many threads.
pub trait Classifier: Sync {
    fn classify(&self, patch: &PatchRef<'_>) -> Result<ClassProbs>;
}

impl Classifier for MiniNet {
    fn classify(&self, patch: &PatchRef<'_>) -> Result<ClassProbs> {
        self.forward(patch.pixels)
    }
}

/// Looks predictions up by patch id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalClassifier {
    probs: HashMap<String, ClassProbs>,
}

impl ExternalClassifier {
    /// Parses `patch_id,p_tumor,p_stroma,p_other`. Rows within 1e-6 of
    /// summing to one are renormalized.
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["patch_id", "p_tumor", "p_stroma", "p_other"] {
            return Err(ModelError::MalformedRow {
                line: 1,
                reason: "header must be patch_id,p_tumor,p_stroma,p_other".into(),
            });
        }
        let mut probs = HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 4 {
                return Err(ModelError::MalformedRow {
                    line,
                    reason: format!("expected 4 fields, got {}", rec.len()),
                });
            }
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = rec[k + 1].trim().parse::<f64>().map_err(|e| ModelError::MalformedRow {
                    line,
                    reason: format!("{:?}: {e}", &rec[k + 1]),
                })?;
                if !p[k].is_finite() || p[k] < 0.0 {
                    return Err(ModelError::MalformedRow {
                        line,
                        reason: format!("probability {} out of range", p[k]),
                    });
                }
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(ModelError::NonNormalizedRow { line, sum });
            }
            probs.insert(rec[0].to_string(), ClassProbs { p: p.map(|v| v / sum) });
        }
        Ok(Self { probs })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

impl Classifier for ExternalClassifier {
    fn classify(&self, patch: &PatchRef<'_>) -> Result<ClassProbs> {
        self.probs
            .get(patch.patch_id)
            .copied()
            .ok_or_else(|| ModelError::MissingPatchId(patch.patch_id.to_string()))
    }
}

/// Returns one-hot ground truth from per-slide label maps. A window with
/// no qualifying label is reported as *other*, so it never enters the ratio.
#[derive(Debug, Clone, Default)]
pub struct OracleClassifier {
    maps: BTreeMap<String, LabelMap>,
    min_coverage: f64,
}

impl OracleClassifier {
    pub fn new(min_coverage: f64) -> Self {
        Self {
            maps: BTreeMap::new(),
            min_coverage,
        }
    }

    pub fn insert(&mut self, slide_id: impl Into<String>, lm: LabelMap) {
        self.maps.insert(slide_id.into(), lm);
    }
}

impl Classifier for OracleClassifier {
    fn classify(&self, patch: &PatchRef<'_>) -> Result<ClassProbs> {
        let lm = self
            .maps
            .get(patch.slide_id)
            .ok_or_else(|| ModelError::UnknownSlide(patch.slide_id.to_string()))?;
        let label = annotate::patch_label(lm, patch.rect, self.min_coverage, LabelRule::SingleClass)
            .map_err(|e| ModelError::UnknownSlide(format!("{}: {e}", patch.slide_id)))?;
        Ok(ClassProbs::one_hot(label.unwrap_or(TissueClass::Other)))
    }
}

/// Labels every patch, in input order.
pub fn classify_manifest<C: Classifier + ?Sized>(
    classifier: &C,
    patches: &[PatchRecord],
) -> Result<Vec<(TissueClass, ClassProbs)>> {
    patches
        .par_iter()
        .map(|p| {
            let id = p.patch_id();
            let probs = classifier.classify(&PatchRef {
                patch_id: &id,
                slide_id: &p.slide_id,
                rect: p.rect,
                pixels: &p.pixels,
            })?;
            Ok((probs.argmax(), probs))
        })
        .collect()
}
