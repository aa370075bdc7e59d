//! Modular neural network mapping link features to an operating-mode
//! distribution.
//!
//! A shared two-layer ReLU trunk (128, 64) feeds four speed-regime modules.
//! Each module has a 32-unit ReLU layer and a linear head whose outputs are
//! the logits of that regime's bins. The 23 logits are normalized by one
//! joint softmax. Training minimizes the mean squared error between the
//! softmax output and the target fractions with Adam.
//!
//! Parameters live in one flat `Vec<f64>`; [`Layout`] records where each
//! dense layer's weights (row-major, `out × in`) and biases sit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::kinematics::{OpModeBin, OpModeDistribution, NUM_BINS};
use crate::par::{self, Execution};
use crate::{Error, Result};

pub const TRUNK1: usize = 128;
pub const TRUNK2: usize = 64;
pub const MODULE_HIDDEN: usize = 32;

const FORMAT: &str = "opmode-mnn-weights";
const FORMAT_VERSION: u32 = 1;

/// Samples per gradient chunk. Chunk sums are added in order, so the batch
/// gradient does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    BrakeIdle,
    Low,
    Moderate,
    High,
}

impl Module {
    pub const ALL: [Module; 4] = [
        Module::BrakeIdle,
        Module::Low,
        Module::Moderate,
        Module::High,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::BrakeIdle => "brake_idle",
            Module::Low => "low",
            Module::Moderate => "moderate",
            Module::High => "high",
        }
    }

    /// Bins produced by this module's head, in head-output order.
    pub fn bins(self) -> &'static [OpModeBin] {
        use OpModeBin::*;
        match self {
            Module::BrakeIdle => &[Braking, Idle],
            Module::Low => &[B11, B12, B13, B14, B15, B16],
            Module::Moderate => &[B21, B22, B23, B24, B25, B27, B28, B29, B30],
            Module::High => &[B33, B35, B37, B38, B39, B40],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.inputs * self.outputs]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.outputs]
    }

    fn forward(&self, p: &[f64], x: &[f64], relu: bool) -> Vec<f64> {
        let w = self.weights(p);
        self.bias(p)
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                let z = b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                if relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    }

    /// Accumulate parameter gradients for upstream gradient `dout` and
    /// return the gradient with respect to the input.
    fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dout: &[f64]) -> Vec<f64> {
        let w = self.weights(p);
        let mut dx = vec![0.0; self.inputs];
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g[self.b + o] += d;
            let off = o * self.inputs;
            let grow = &mut g[self.w + off..self.w + off + self.inputs];
            for (gi, xi) in grow.iter_mut().zip(x) {
                *gi += d * xi;
            }
            for (dxi, wi) in dx.iter_mut().zip(&w[off..off + self.inputs]) {
                *dxi += d * wi;
            }
        }
        dx
    }
}

/// Offsets of every dense layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    input_dim: usize,
    shared1: Dense,
    shared2: Dense,
    hidden: [Dense; 4],
    head: [Dense; 4],
    len: usize,
}

impl Layout {
    pub fn new(input_dim: usize) -> Layout {
        let mut off = 0;
        let mut dense = |inputs: usize, outputs: usize| {
            let d = Dense {
                inputs,
                outputs,
                w: off,
                b: off + inputs * outputs,
            };
            off += inputs * outputs + outputs;
            d
        };
        let shared1 = dense(input_dim, TRUNK1);
        let shared2 = dense(TRUNK1, TRUNK2);
        let mut hidden = [shared1; 4];
        let mut head = [shared1; 4];
        for (k, m) in Module::ALL.iter().enumerate() {
            hidden[k] = dense(TRUNK2, MODULE_HIDDEN);
            head[k] = dense(MODULE_HIDDEN, m.bins().len());
        }
        Layout {
            input_dim,
            shared1,
            shared2,
            hidden,
            head,
            len: off,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_params(&self) -> usize {
        self.len
    }

    fn dense_layers(&self) -> Vec<(String, Dense)> {
        let mut v = vec![
            ("shared1".to_string(), self.shared1),
            ("shared2".to_string(), self.shared2),
        ];
        for (k, m) in Module::ALL.iter().enumerate() {
            v.push((format!("hidden_{}", m.name()), self.hidden[k]));
            v.push((format!("head_{}", m.name()), self.head[k]));
        }
        v
    }

    pub fn dims(&self) -> Vec<LayerDims> {
        self.dense_layers()
            .into_iter()
            .map(|(name, d)| LayerDims {
                name,
                inputs: d.inputs,
                outputs: d.outputs,
            })
            .collect()
    }

    /// Parameter index ranges `(weights, biases)` of a named layer.
    pub fn ranges(&self, name: &str) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        self.dense_layers()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| (d.w..d.b, d.b..d.b + d.outputs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    layout: Layout,
    params: Vec<f64>,
    schema_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.001,
            epochs: 500,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Invalid("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Activations kept for the backward pass.
struct Trace {
    h1: Vec<f64>,
    h2: Vec<f64>,
    hm: [Vec<f64>; 4],
    probs: [f64; NUM_BINS],
}

pub fn init(input_dim: usize, seed: u64) -> Result<ModelWeights> {
    if input_dim == 0 {
        return Err(Error::Invalid("input dimension must be at least 1".into()));
    }
    let layout = Layout::new(input_dim);
    let mut params = vec![0.0; layout.num_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, d) in layout.dense_layers() {
        let bound = (6.0 / d.inputs as f64).sqrt();
        for w in &mut params[d.w..d.b] {
            *w = rng.gen_range(-bound..=bound);
        }
    }
    Ok(ModelWeights {
        layout,
        params,
        schema_hash: String::new(),
    })
}

pub fn softmax(z: &[f64; NUM_BINS]) -> [f64; NUM_BINS] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_BINS];
    let mut sum = 0.0;
    for (o, &zi) in out.iter_mut().zip(z) {
        *o = (zi - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    out
}

/// Mean over the 23 bins of the squared difference.
pub fn loss(pred: &OpModeDistribution, target: &OpModeDistribution) -> f64 {
    loss_raw(pred.fractions(), target.fractions())
}

fn loss_raw(pred: &[f64; NUM_BINS], target: &[f64; NUM_BINS]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / NUM_BINS as f64
}

impl ModelWeights {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim
    }

    pub fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    pub fn set_schema_hash(&mut self, hash: &str) {
        self.schema_hash = hash.to_string();
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layout.input_dim {
            return Err(Error::Invalid(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.layout.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("input contains non-finite values".into()));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> (Trace, [f64; NUM_BINS]) {
        let p = &self.params;
        let l = &self.layout;
        let h1 = l.shared1.forward(p, x, true);
        let h2 = l.shared2.forward(p, &h1, true);
        let mut z = [0.0; NUM_BINS];
        let hm = std::array::from_fn(|k| {
            let h = l.hidden[k].forward(p, &h2, true);
            let out = l.head[k].forward(p, &h, false);
            for (bin, v) in Module::ALL[k].bins().iter().zip(out) {
                z[bin.index()] = v;
            }
            h
        });
        let probs = softmax(&z);
        (Trace { h1, h2, hm, probs }, z)
    }

    /// The 23 pre-softmax outputs in bin index order.
    pub fn logits(&self, x: &[f64]) -> Result<[f64; NUM_BINS]> {
        self.check_input(x)?;
        Ok(self.trace(x).1)
    }

    pub fn forward(&self, x: &[f64]) -> Result<OpModeDistribution> {
        self.check_input(x)?;
        Ok(OpModeDistribution::from_raw(self.trace(x).0.probs))
    }

    pub fn predict(&self, xs: &[Vec<f64>], exec: Execution) -> Result<Vec<OpModeDistribution>> {
        par::map(exec, xs, |x| self.forward(x))
            .into_iter()
            .collect()
    }

    /// Add the gradient of one sample's loss to `g` and return the loss.
    fn accumulate(&self, g: &mut [f64], x: &[f64], target: &[f64; NUM_BINS]) -> f64 {
        let p = &self.params;
        let l = &self.layout;
        let (tr, _) = self.trace(x);
        let n = NUM_BINS as f64;
        let dp: Vec<f64> = tr
            .probs
            .iter()
            .zip(target)
            .map(|(p, t)| 2.0 * (p - t) / n)
            .collect();
        let dot: f64 = dp.iter().zip(&tr.probs).map(|(a, b)| a * b).sum();
        let dz: Vec<f64> = tr
            .probs
            .iter()
            .zip(&dp)
            .map(|(p, d)| p * (d - dot))
            .collect();

        let mut dh2 = vec![0.0; TRUNK2];
        for (k, m) in Module::ALL.iter().enumerate() {
            let dhead: Vec<f64> = m.bins().iter().map(|b| dz[b.index()]).collect();
            let mut dh = l.head[k].backward(p, g, &tr.hm[k], &dhead);
            relu_mask(&mut dh, &tr.hm[k]);
            let d = l.hidden[k].backward(p, g, &tr.h2, &dh);
            dh2.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        relu_mask(&mut dh2, &tr.h2);
        let mut dh1 = l.shared2.backward(p, g, &tr.h1, &dh2);
        relu_mask(&mut dh1, &tr.h1);
        l.shared1.backward(p, g, x, &dh1);
        loss_raw(&tr.probs, target)
    }

    /// Mean gradient and mean loss over a batch.
    pub fn backward(
        &self,
        xs: &[&[f64]],
        targets: &[&[f64; NUM_BINS]],
        exec: Execution,
    ) -> Result<(Vec<f64>, f64)> {
        if xs.is_empty() || xs.len() != targets.len() {
            return Err(Error::Invalid(
                "batch must be non-empty with one target per input".into(),
            ));
        }
        for x in xs {
            self.check_input(x)?;
        }
        let pairs: Vec<(&[f64], &[f64; NUM_BINS])> =
            xs.iter().copied().zip(targets.iter().copied()).collect();
        let parts = par::map_chunks(exec, &pairs, GRAD_CHUNK, |chunk| {
            let mut g = vec![0.0; self.params.len()];
            let mut loss = 0.0;
            for (x, t) in chunk {
                loss += self.accumulate(&mut g, x, t);
            }
            (g, loss)
        });
        let mut iter = parts.into_iter();
        let (mut grad, mut loss) = iter.next().expect("non-empty batch");
        for (g, l) in iter {
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            loss += l;
        }
        let n = xs.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        Ok((grad, loss / n))
    }

    pub fn adam_step(
        &mut self,
        grads: &[f64],
        state: &mut AdamState,
        cfg: &TrainConfig,
    ) -> Result<()> {
        adam_update(&mut self.params, grads, state, cfg)
    }
}

fn relu_mask(d: &mut [f64], activation: &[f64]) {
    for (di, a) in d.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *di = 0.0;
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Invalid(format!(
            "shape mismatch: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient {} at parameter {i} (step {})",
            grads[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Divergence(format!(
            "parameter {i} became non-finite at step {}",
            state.step
        )));
    }
    Ok(())
}

/// Encoded inputs with their target fractions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<[f64; NUM_BINS]>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, target: &OpModeDistribution) {
        self.inputs.push(x);
        self.targets.push(*target.fractions());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Mean loss of `w` over a data set; NaN when the set is empty.
pub fn evaluate_loss(w: &ModelWeights, data: &TrainData, exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = par::map_range(exec, data.len(), |i| {
        w.forward(&data.inputs[i])
            .map(|p| loss_raw(p.fractions(), &data.targets[i]))
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / data.len() as f64)
}

/// Train from a fresh initialization. Train loss per epoch is the mean of the
/// per-batch losses seen during the epoch, weighted by batch size; test loss
/// is evaluated on the full test set after the epoch.
pub fn train(
    train_set: &TrainData,
    test_set: &TrainData,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(ModelWeights, Vec<EpochLoss>)> {
    cfg.validate()?;
    let first = train_set
        .inputs
        .first()
        .ok_or_else(|| Error::Invalid("training set is empty".into()))?;
    let mut w = init(first.len(), cfg.seed)?;
    let mut state = AdamState::new(w.params.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    // Shuffling draws from a stream distinct from initialization.
    let shuffle_seed = cfg.seed ^ 0x5eed_5eed_5eed_5eed;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in
            crate::dataset::batches(train_set.len(), cfg.batch_size, shuffle_seed, epoch as u64)
        {
            let xs: Vec<&[f64]> = batch
                .iter()
                .map(|&i| train_set.inputs[i].as_slice())
                .collect();
            let ts: Vec<&[f64; NUM_BINS]> = batch.iter().map(|&i| &train_set.targets[i]).collect();
            let (g, l) = w.backward(&xs, &ts, exec)?;
            if !l.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {l} in epoch {epoch}"
                )));
            }
            total += l * batch.len() as f64;
            w.adam_step(&g, &mut state, cfg)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
        }
        let train_loss = total / train_set.len() as f64;
        let test_loss = evaluate_loss(&w, test_set, exec)?;
        if epoch == 1 || epoch % 50 == 0 || epoch == cfg.epochs {
            log::info!("epoch {epoch}: train loss {train_loss:.6e}, test loss {test_loss:.6e}");
        }
        history.push(EpochLoss {
            epoch,
            train_loss,
            test_loss,
        });
    }
    Ok((w, history))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format: String,
    version: u32,
    schema_hash: String,
    input_dim: usize,
    layers: Vec<LayerDims>,
    params: Vec<f64>,
}

pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<()> {
    let file = WeightsFile {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        schema_hash: w.schema_hash.clone(),
        input_dim: w.layout.input_dim,
        layers: w.layout.dims(),
        params: w.params.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Load weights saved by [`save_weights`], rejecting files whose feature
/// schema hash differs from `expected_schema_hash`.
pub fn load_weights(path: &Path, expected_schema_hash: &str) -> Result<ModelWeights> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: WeightsFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let bad = |msg: String| Error::Invalid(format!("{}: {msg}", path.display()));
    if file.format != FORMAT || file.version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported weights format {} v{}",
            file.format, file.version
        )));
    }
    if file.schema_hash != expected_schema_hash {
        return Err(bad(format!(
            "feature schema hash {} does not match the configured schema {}",
            file.schema_hash, expected_schema_hash
        )));
    }
    if file.input_dim == 0 {
        return Err(bad("input dimension is zero".into()));
    }
    let layout = Layout::new(file.input_dim);
    if file.layers != layout.dims() {
        return Err(bad(
            "layer dimensions do not match the network architecture".into(),
        ));
    }
    if file.params.len() != layout.num_params() {
        return Err(bad(format!(
            "expected {} parameters, found {}",
            layout.num_params(),
            file.params.len()
        )));
    }
    if file.params.iter().any(|p| !p.is_finite()) {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(ModelWeights {
        layout,
        params: file.params,
        schema_hash: file.schema_hash,
    })
}

pub fn write_history(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for h in history {
        w.serialize(h).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochLoss>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}
