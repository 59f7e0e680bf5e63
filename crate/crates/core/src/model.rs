//! Differentiable classifier abstraction, the built-in reference classifier
//! with hand-derived gradients, attack loss functions, and the trainer.
//!
//! The reference architecture: per-coordinate normalization, a per-frame dense
//! embedding with tanh, a temporal mean-pool over valid frames, tanh hidden
//! layers, and a linear logit head. Everything is smooth, so finite-difference
//! checks are clean, and the adjoint is exact by construction.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamParams};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::sequence::SkeletonSequence;

/// Behavioral interface of a classifier the attack and defense can drive:
/// a deterministic logit map plus its exact input adjoint.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Expected (frames, joints) of inputs after preprocessing.
    fn expected_shape(&self) -> (usize, usize);

    /// Logit vector of length `num_classes`.
    fn forward(&self, seq: &SkeletonSequence) -> Result<Vec<f64>>;

    /// Pullback of a logit cotangent to input coordinates (T x I x 3).
    fn input_gradient(&self, seq: &SkeletonSequence, cotangent: &[f64]) -> Result<Array3<f64>>;

    /// Attack loss, logits, and input gradient in one evaluation.
    /// Implementations may fuse the passes; the default recomputes.
    fn loss_forward_grad(
        &self,
        seq: &SkeletonSequence,
        spec: &LossSpec,
    ) -> Result<(f64, Vec<f64>, Array3<f64>)> {
        let logits = self.forward(seq)?;
        let (loss, dlogits) = loss_from_logits(&logits, spec);
        let grad = self.input_gradient(seq, &dlogits)?;
        Ok((loss, logits, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// No nonlinearity. Used to build exactly-linear models in tests.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activated value.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer, row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn xavier(out_dim: usize, in_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            out_dim,
            in_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }

    /// `W^T d`, accumulated into `out`.
    #[inline]
    fn apply_transposed(&self, d: &[f64], out: &mut [f64]) {
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let di = d[o];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += w * di;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceClassifier {
    t_fixed: usize,
    num_joints: usize,
    num_classes: usize,
    activation: Activation,
    /// Per-coordinate normalization, length `num_joints * 3`.
    norm_mean: Vec<f64>,
    norm_scale: Vec<f64>,
    embed: Linear,
    hidden: Vec<Linear>,
    output: Linear,
}

/// Forward-pass caches reused by the adjoint and the weight gradients.
struct ForwardState {
    valid: Vec<usize>,
    frame_inputs: Vec<Vec<f64>>,
    frame_embeds: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    hidden_acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ReferenceClassifier {
    /// Freshly initialized (untrained) model with unit normalization.
    pub fn new(
        t_fixed: usize,
        num_joints: usize,
        num_classes: usize,
        embed_dim: usize,
        hidden_dims: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if t_fixed == 0 || num_joints == 0 || num_classes == 0 || embed_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let in_dim = num_joints * 3;
        let embed = Linear::xavier(embed_dim, in_dim, &mut rng);
        let mut hidden = Vec::new();
        let mut prev = embed_dim;
        for &h in hidden_dims {
            if h == 0 {
                return Err(Error::Config("hidden layer width must be positive".into()));
            }
            hidden.push(Linear::xavier(h, prev, &mut rng));
            prev = h;
        }
        let output = Linear::xavier(num_classes, prev, &mut rng);
        Ok(Self {
            t_fixed,
            num_joints,
            num_classes,
            activation: Activation::Tanh,
            norm_mean: vec![0.0; in_dim],
            norm_scale: vec![1.0; in_dim],
            embed,
            hidden,
            output,
        })
    }

    /// All-zero weights; logits are identically zero. Test helper.
    pub fn zeroed(t_fixed: usize, num_joints: usize, num_classes: usize, embed_dim: usize) -> Self {
        let in_dim = num_joints * 3;
        Self {
            t_fixed,
            num_joints,
            num_classes,
            activation: Activation::Tanh,
            norm_mean: vec![0.0; in_dim],
            norm_scale: vec![1.0; in_dim],
            embed: Linear::zeros(embed_dim, in_dim),
            hidden: Vec::new(),
            output: Linear::zeros(num_classes, embed_dim),
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn set_activation(&mut self, act: Activation) {
        self.activation = act;
    }

    pub fn set_normalization(&mut self, mean: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        let in_dim = self.num_joints * 3;
        if mean.len() != in_dim || scale.len() != in_dim {
            return Err(Error::contract("normalization constants must have length joints*3"));
        }
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::contract("normalization scales must be positive"));
        }
        self.norm_mean = mean;
        self.norm_scale = scale;
        Ok(())
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.hidden.iter().map(|l| l.out_dim).collect()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.out_dim
    }

    fn check_input(&self, seq: &SkeletonSequence) -> Result<()> {
        if seq.num_frames() != self.t_fixed || seq.num_joints() != self.num_joints {
            return Err(Error::contract(format!(
                "model expects {}x{} input, got {}x{}",
                self.t_fixed,
                self.num_joints,
                seq.num_frames(),
                seq.num_joints()
            )));
        }
        if seq.num_valid_frames() == 0 {
            return Err(Error::contract("input has no valid frames"));
        }
        Ok(())
    }

    fn run_forward(&self, seq: &SkeletonSequence) -> Result<ForwardState> {
        self.check_input(seq)?;
        let in_dim = self.num_joints * 3;
        let valid: Vec<usize> = seq.valid_frames().collect();
        let mut frame_inputs = Vec::with_capacity(valid.len());
        let mut frame_embeds = Vec::with_capacity(valid.len());
        let mut pooled = vec![0.0; self.embed.out_dim];
        let mut z = Vec::new();
        for &t in &valid {
            let mut x = Vec::with_capacity(in_dim);
            for j in 0..self.num_joints {
                for a in 0..3 {
                    let d = j * 3 + a;
                    x.push((seq.coords()[[t, j, a]] - self.norm_mean[d]) / self.norm_scale[d]);
                }
            }
            self.embed.apply(&x, &mut z);
            let e: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
            for (p, ei) in pooled.iter_mut().zip(&e) {
                *p += ei;
            }
            frame_inputs.push(x);
            frame_embeds.push(e);
        }
        let n = valid.len() as f64;
        for p in pooled.iter_mut() {
            *p /= n;
        }
        let mut hidden_acts = Vec::with_capacity(self.hidden.len());
        let mut h = pooled.clone();
        for layer in &self.hidden {
            layer.apply(&h, &mut z);
            h = z.iter().map(|&v| self.activation.apply(v)).collect();
            hidden_acts.push(h.clone());
        }
        let mut logits = Vec::new();
        self.output.apply(&h, &mut logits);
        Ok(ForwardState {
            valid,
            frame_inputs,
            frame_embeds,
            pooled,
            hidden_acts,
            logits,
        })
    }

    fn input_gradient_from_state(&self, state: &ForwardState, cotangent: &[f64]) -> Array3<f64> {
        let (dp, _) = self.backprop_head(state, cotangent);
        let n = state.valid.len() as f64;
        let mut grad = Array3::zeros((self.t_fixed, self.num_joints, 3));
        let mut dx = vec![0.0; self.num_joints * 3];
        for (fi, &t) in state.valid.iter().enumerate() {
            let dz0: Vec<f64> = dp
                .iter()
                .zip(&state.frame_embeds[fi])
                .map(|(&d, &y)| d / n * self.activation.derivative_from_output(y))
                .collect();
            dx.iter_mut().for_each(|v| *v = 0.0);
            self.embed.apply_transposed(&dz0, &mut dx);
            for j in 0..self.num_joints {
                for a in 0..3 {
                    let d = j * 3 + a;
                    grad[[t, j, a]] = dx[d] / self.norm_scale[d];
                }
            }
        }
        grad
    }

    /// Backprop from a logit cotangent down to the pooled features, returning
    /// (d_pooled, per-hidden-layer dz) for reuse by weight gradients.
    fn backprop_head(&self, state: &ForwardState, cotangent: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let last = state
            .hidden_acts
            .last()
            .unwrap_or(&state.pooled);
        let mut dh = vec![0.0; last.len()];
        self.output.apply_transposed(cotangent, &mut dh);
        let mut dzs = vec![Vec::new(); self.hidden.len()];
        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let act = &state.hidden_acts[l];
            let dz: Vec<f64> = dh
                .iter()
                .zip(act)
                .map(|(&d, &y)| d * self.activation.derivative_from_output(y))
                .collect();
            let mut prev = vec![0.0; layer.in_dim];
            layer.apply_transposed(&dz, &mut prev);
            dzs[l] = dz;
            dh = prev;
        }
        (dh, dzs)
    }
}

impl Classifier for ReferenceClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn expected_shape(&self) -> (usize, usize) {
        (self.t_fixed, self.num_joints)
    }

    fn forward(&self, seq: &SkeletonSequence) -> Result<Vec<f64>> {
        Ok(self.run_forward(seq)?.logits)
    }

    fn input_gradient(&self, seq: &SkeletonSequence, cotangent: &[f64]) -> Result<Array3<f64>> {
        if cotangent.len() != self.num_classes {
            return Err(Error::contract("cotangent length must equal num_classes"));
        }
        let state = self.run_forward(seq)?;
        Ok(self.input_gradient_from_state(&state, cotangent))
    }

    fn loss_forward_grad(
        &self,
        seq: &SkeletonSequence,
        spec: &LossSpec,
    ) -> Result<(f64, Vec<f64>, Array3<f64>)> {
        spec.validate(self.num_classes)?;
        let state = self.run_forward(seq)?;
        let (loss, dlogits) = loss_from_logits(&state.logits, spec);
        let grad = self.input_gradient_from_state(&state, &dlogits);
        Ok((loss, state.logits, grad))
    }
}

// ---------------------------------------------------------------------------
// Attack losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    UntargetedMargin,
    TargetedMargin,
    TargetedCrossEntropy,
}

/// The attack objective: which misclassification counts as success and with
/// what confidence margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub mode: LossMode,
    pub true_label: usize,
    pub target_label: Option<usize>,
    pub conf: f64,
}

impl LossSpec {
    pub fn untargeted(true_label: usize, conf: f64) -> Self {
        Self {
            mode: LossMode::UntargetedMargin,
            true_label,
            target_label: None,
            conf,
        }
    }

    pub fn targeted(true_label: usize, target_label: usize, conf: f64) -> Self {
        Self {
            mode: LossMode::TargetedMargin,
            true_label,
            target_label: Some(target_label),
            conf,
        }
    }

    pub fn targeted_cross_entropy(true_label: usize, target_label: usize) -> Self {
        Self {
            mode: LossMode::TargetedCrossEntropy,
            true_label,
            target_label: Some(target_label),
            conf: 0.0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.true_label >= num_classes {
            return Err(Error::contract(format!(
                "true label {} out of range for {} classes",
                self.true_label, num_classes
            )));
        }
        if self.conf < 0.0 {
            return Err(Error::contract("conf must be nonnegative"));
        }
        match self.mode {
            LossMode::UntargetedMargin => Ok(()),
            LossMode::TargetedMargin | LossMode::TargetedCrossEntropy => {
                let t = self.target_label.ok_or_else(|| {
                    Error::contract("targeted mode requires a target label")
                })?;
                if t >= num_classes {
                    return Err(Error::contract(format!(
                        "target label {t} out of range for {num_classes} classes"
                    )));
                }
                if t == self.true_label {
                    return Err(Error::contract("target label must differ from true label"));
                }
                Ok(())
            }
        }
    }

    /// Whether the adversary's goal holds for these logits (argmax with
    /// lowest-index tie-breaking).
    pub fn goal_satisfied(&self, logits: &[f64]) -> bool {
        let pred = argmax(logits);
        match self.mode {
            LossMode::UntargetedMargin => pred != self.true_label,
            LossMode::TargetedMargin | LossMode::TargetedCrossEntropy => {
                Some(pred) == self.target_label
            }
        }
    }
}

/// Lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax over `k != excluded`, lowest index on ties.
fn argmax_excluding(values: &[f64], excluded: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in values.iter().enumerate() {
        if i == excluded {
            continue;
        }
        if best == usize::MAX || v > values[best] {
            best = i;
        }
    }
    best
}

/// Loss value and its gradient with respect to the logits.
pub fn loss_from_logits(logits: &[f64], spec: &LossSpec) -> (f64, Vec<f64>) {
    let mut d = vec![0.0; logits.len()];
    match spec.mode {
        LossMode::UntargetedMargin => {
            let l = spec.true_label;
            let runner = argmax_excluding(logits, l);
            let margin = logits[l] - logits[runner] + spec.conf;
            if margin > 0.0 {
                d[l] = 1.0;
                d[runner] = -1.0;
                (margin, d)
            } else {
                (0.0, d)
            }
        }
        LossMode::TargetedMargin => {
            let lt = spec.target_label.expect("validated targeted spec");
            let runner = argmax_excluding(logits, lt);
            let margin = logits[runner] - logits[lt] + spec.conf;
            if margin > 0.0 {
                d[runner] = 1.0;
                d[lt] = -1.0;
                (margin, d)
            } else {
                (0.0, d)
            }
        }
        LossMode::TargetedCrossEntropy => {
            let lt = spec.target_label.expect("validated targeted spec");
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
            let loss = m + sum.ln() - logits[lt];
            for (di, &x) in d.iter_mut().zip(logits) {
                *di = (x - m).exp() / sum;
            }
            d[lt] -= 1.0;
            (loss, d)
        }
    }
}

/// Attack loss and its exact gradient with respect to the input coordinates.
pub fn loss_and_input_grad<C: Classifier>(
    model: &C,
    seq: &SkeletonSequence,
    spec: &LossSpec,
) -> Result<(f64, Array3<f64>)> {
    spec.validate(model.num_classes())?;
    let (loss, _, grad) = model.loss_forward_grad(seq, spec)?;
    Ok((loss, grad))
}

/// Central finite-difference gradient of the attack loss; the test oracle for
/// [`loss_and_input_grad`].
pub fn fd_gradient<C: Classifier>(
    model: &C,
    seq: &SkeletonSequence,
    spec: &LossSpec,
    step: f64,
) -> Result<Array3<f64>> {
    if !(step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    spec.validate(model.num_classes())?;
    let mut probe = seq.clone();
    let mut out = Array3::zeros((seq.num_frames(), seq.num_joints(), 3));
    for t in 0..seq.num_frames() {
        for j in 0..seq.num_joints() {
            for a in 0..3 {
                let base = seq.coords()[[t, j, a]];
                probe.coords_mut()[[t, j, a]] = base + step;
                let (hi, _) = loss_from_logits(&model.forward(&probe)?, spec);
                probe.coords_mut()[[t, j, a]] = base - step;
                let (lo, _) = loss_from_logits(&model.forward(&probe)?, spec);
                probe.coords_mut()[[t, j, a]] = base;
                out[[t, j, a]] = (hi - lo) / (2.0 * step);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Std of Gaussian noise added to valid-frame coordinates during training
    /// (data augmentation for noise-consistent models); 0 disables it.
    pub noise_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dims: vec![64, 32],
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ReferenceClassifier,
    pub holdout_accuracy: f64,
    pub final_train_loss: f64,
}

/// Floor on per-coordinate normalization scales so near-static coordinates do
/// not blow up under division.
const NORM_SCALE_FLOOR: f64 = 0.05;

/// Target mean margin (top logit minus runner-up) after output calibration.
/// Cross-entropy training inflates logit scales arbitrarily; rescaling the
/// output layer to a fixed margin scale leaves every prediction unchanged but
/// keeps downstream loss gradients commensurate with the attack's penalty
/// weights.
const CALIBRATED_MARGIN: f64 = 2.0;

struct GradBuffer {
    embed_w: Vec<f64>,
    embed_b: Vec<f64>,
    hidden_w: Vec<Vec<f64>>,
    hidden_b: Vec<Vec<f64>>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

impl GradBuffer {
    fn zeros_like(model: &ReferenceClassifier) -> Self {
        Self {
            embed_w: vec![0.0; model.embed.weight.len()],
            embed_b: vec![0.0; model.embed.bias.len()],
            hidden_w: model.hidden.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            hidden_b: model.hidden.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            out_w: vec![0.0; model.output.weight.len()],
            out_b: vec![0.0; model.output.bias.len()],
        }
    }

    fn clear(&mut self) {
        self.embed_w.iter_mut().for_each(|v| *v = 0.0);
        self.embed_b.iter_mut().for_each(|v| *v = 0.0);
        for w in &mut self.hidden_w {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut self.hidden_b {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        self.out_w.iter_mut().for_each(|v| *v = 0.0);
        self.out_b.iter_mut().for_each(|v| *v = 0.0);
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.embed_w);
        out.extend_from_slice(&self.embed_b);
        for (w, b) in self.hidden_w.iter().zip(&self.hidden_b) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.out_w);
        out.extend_from_slice(&self.out_b);
    }
}

impl ReferenceClassifier {
    fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.embed.weight);
        out.extend_from_slice(&self.embed.bias);
        for l in &self.hidden {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.output.weight);
        out.extend_from_slice(&self.output.bias);
        out
    }

    fn set_params_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        take(&mut self.embed.weight);
        take(&mut self.embed.bias);
        for l in &mut self.hidden {
            take(&mut l.weight);
            take(&mut l.bias);
        }
        take(&mut self.output.weight);
        take(&mut self.output.bias);
        debug_assert_eq!(pos, flat.len());
    }

    fn param_count(&self) -> usize {
        self.embed.param_count()
            + self.hidden.iter().map(Linear::param_count).sum::<usize>()
            + self.output.param_count()
    }

    /// Cross-entropy loss of one sample and weight-gradient accumulation.
    fn accumulate_example(
        &self,
        seq: &SkeletonSequence,
        label: usize,
        grads: &mut GradBuffer,
    ) -> Result<f64> {
        let state = self.run_forward(seq)?;
        // Cross-entropy toward the true label via a stable log-softmax.
        let m = state.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = state.logits.iter().map(|&x| (x - m).exp()).sum();
        let loss = m + sum.ln() - state.logits[label];
        let mut dlogits: Vec<f64> = state.logits.iter().map(|&x| (x - m).exp() / sum).collect();
        dlogits[label] -= 1.0;

        // Output layer.
        let last = state.hidden_acts.last().unwrap_or(&state.pooled);
        for o in 0..self.output.out_dim {
            for i in 0..self.output.in_dim {
                grads.out_w[o * self.output.in_dim + i] += dlogits[o] * last[i];
            }
            grads.out_b[o] += dlogits[o];
        }
        let (dp, dzs) = self.backprop_head(&state, &dlogits);
        for (l, dz) in dzs.iter().enumerate() {
            let input = if l == 0 {
                &state.pooled
            } else {
                &state.hidden_acts[l - 1]
            };
            let layer = &self.hidden[l];
            for o in 0..layer.out_dim {
                for i in 0..layer.in_dim {
                    grads.hidden_w[l][o * layer.in_dim + i] += dz[o] * input[i];
                }
                grads.hidden_b[l][o] += dz[o];
            }
        }
        // Embedding layer, per valid frame.
        let n = state.valid.len() as f64;
        for (fi, x) in state.frame_inputs.iter().enumerate() {
            let e = &state.frame_embeds[fi];
            for o in 0..self.embed.out_dim {
                let dz0 = dp[o] / n * self.activation.derivative_from_output(e[o]);
                if dz0 == 0.0 {
                    continue;
                }
                let row = &mut grads.embed_w[o * self.embed.in_dim..(o + 1) * self.embed.in_dim];
                for (wi, xi) in row.iter_mut().zip(x) {
                    *wi += dz0 * xi;
                }
                grads.embed_b[o] += dz0;
            }
        }
        Ok(loss)
    }
}

/// Per-coordinate mean and floored std over valid frames of the training set.
fn normalization_constants(train: &[SkeletonSequence]) -> (Vec<f64>, Vec<f64>) {
    let in_dim = train[0].num_joints() * 3;
    let mut mean = vec![0.0; in_dim];
    let mut count = 0usize;
    for seq in train {
        for t in seq.valid_frames() {
            count += 1;
            for j in 0..seq.num_joints() {
                for a in 0..3 {
                    mean[j * 3 + a] += seq.coords()[[t, j, a]];
                }
            }
        }
    }
    let n = count.max(1) as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; in_dim];
    for seq in train {
        for t in seq.valid_frames() {
            for j in 0..seq.num_joints() {
                for a in 0..3 {
                    let d = seq.coords()[[t, j, a]] - mean[j * 3 + a];
                    var[j * 3 + a] += d * d;
                }
            }
        }
    }
    let scale = var
        .iter()
        .map(|&v| (v / n).sqrt().max(NORM_SCALE_FLOOR))
        .collect();
    (mean, scale)
}

/// Mini-batch Adam on cross-entropy. Deterministic for a fixed seed: weight
/// init, shuffling, and augmentation noise all derive from `cfg.seed`.
pub fn train_reference_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.train.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    let num_classes = dataset.num_classes;
    for seq in dataset.train.iter().chain(&dataset.test) {
        if seq.label() >= num_classes {
            return Err(Error::Training(format!(
                "label {} out of range for {} classes",
                seq.label(),
                num_classes
            )));
        }
    }
    let t_fixed = dataset.train[0].num_frames();
    let num_joints = dataset.train[0].num_joints();
    let mut model = ReferenceClassifier::new(
        t_fixed,
        num_joints,
        num_classes,
        cfg.embed_dim,
        &cfg.hidden_dims,
        cfg.seed,
    )?;
    let (mean, scale) = normalization_constants(&dataset.train);
    model.set_normalization(mean, scale)?;

    let mut adam = Adam::new(AdamParams::with_learning_rate(cfg.learning_rate), model.param_count());
    let mut params = model.params_flat();
    let mut grads = GradBuffer::zeros_like(&model);
    let mut flat_grads = Vec::with_capacity(params.len());
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            grads.clear();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let seq = &dataset.train[idx];
                let loss = if cfg.noise_std > 0.0 {
                    let mut noisy = seq.clone();
                    for t in 0..noisy.num_frames() {
                        if !noisy.frame_valid(t) {
                            continue;
                        }
                        for j in 0..noisy.num_joints() {
                            for a in 0..3 {
                                let z: f64 = rng.sample(rand_distr::StandardNormal);
                                noisy.coords_mut()[[t, j, a]] += cfg.noise_std * z;
                            }
                        }
                    }
                    model.accumulate_example(&noisy, seq.label(), &mut grads)?
                } else {
                    model.accumulate_example(seq, seq.label(), &mut grads)?
                };
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss in epoch {epoch}; training diverged"
                )));
            }
            epoch_loss += batch_loss;
            grads.flatten_into(&mut flat_grads);
            let inv = 1.0 / batch.len() as f64;
            for g in flat_grads.iter_mut() {
                *g *= inv;
            }
            adam.step(&mut params, &flat_grads);
            model.set_params_flat(&params);
        }
        final_loss = epoch_loss / dataset.train.len() as f64;
    }

    // Margin calibration: scale the output layer so the mean training-set
    // margin equals CALIBRATED_MARGIN. Argmax decisions are unaffected.
    let mut gap_sum = 0.0;
    for seq in &dataset.train {
        let logits = model.forward(seq)?;
        let top = argmax(&logits);
        let runner = argmax_excluding(&logits, top);
        gap_sum += logits[top] - logits[runner];
    }
    let mean_gap = gap_sum / dataset.train.len() as f64;
    if mean_gap > 0.0 {
        let scale = CALIBRATED_MARGIN / mean_gap;
        for w in model.output.weight.iter_mut().chain(model.output.bias.iter_mut()) {
            *w *= scale;
        }
    }

    let holdout_accuracy = accuracy(&model, &dataset.test)?;
    Ok(TrainOutcome {
        model,
        holdout_accuracy,
        final_train_loss: final_loss,
    })
}

/// Fraction of sequences whose argmax logit matches the label.
pub fn accuracy<C: Classifier>(model: &C, sequences: &[SkeletonSequence]) -> Result<f64> {
    if sequences.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for seq in sequences {
        if argmax(&model.forward(seq)?) == seq.label() {
            correct += 1;
        }
    }
    Ok(correct as f64 / sequences.len() as f64)
}

// ---------------------------------------------------------------------------
// Model file format
// ---------------------------------------------------------------------------

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    out_dim: usize,
    in_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    t_fixed: usize,
    num_joints: usize,
    num_classes: usize,
    activation: Activation,
    norm_mean: Vec<f64>,
    norm_scale: Vec<f64>,
    embed: LayerDoc,
    hidden: Vec<LayerDoc>,
    output: LayerDoc,
}

fn layer_doc(l: &Linear) -> LayerDoc {
    LayerDoc {
        out_dim: l.out_dim,
        in_dim: l.in_dim,
        weight: l.weight.clone(),
        bias: l.bias.clone(),
    }
}

fn layer_from_doc(doc: LayerDoc, field: &str) -> Result<Linear> {
    if doc.weight.len() != doc.out_dim * doc.in_dim || doc.bias.len() != doc.out_dim {
        return Err(Error::validation(field, "weight/bias lengths do not match dims"));
    }
    if doc.weight.iter().chain(&doc.bias).any(|v| !v.is_finite()) {
        return Err(Error::validation(field, "non-finite parameter"));
    }
    Ok(Linear {
        out_dim: doc.out_dim,
        in_dim: doc.in_dim,
        weight: doc.weight,
        bias: doc.bias,
    })
}

impl ReferenceClassifier {
    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            format_version: MODEL_FORMAT_VERSION,
            t_fixed: self.t_fixed,
            num_joints: self.num_joints,
            num_classes: self.num_classes,
            activation: self.activation,
            norm_mean: self.norm_mean.clone(),
            norm_scale: self.norm_scale.clone(),
            embed: layer_doc(&self.embed),
            hidden: self.hidden.iter().map(layer_doc).collect(),
            output: layer_doc(&self.output),
        };
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Training(format!("model serialization failed: {e}")))
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::validation(
                "format_version",
                format!("unsupported version {}", doc.format_version),
            ));
        }
        let in_dim = doc.num_joints * 3;
        if doc.norm_mean.len() != in_dim || doc.norm_scale.len() != in_dim {
            return Err(Error::validation("norm_mean", "length must be joints*3"));
        }
        let embed = layer_from_doc(doc.embed, "embed")?;
        if embed.in_dim != in_dim {
            return Err(Error::validation("embed", "input dim must be joints*3"));
        }
        let mut prev = embed.out_dim;
        let mut hidden = Vec::new();
        for (i, h) in doc.hidden.into_iter().enumerate() {
            let layer = layer_from_doc(h, "hidden")?;
            if layer.in_dim != prev {
                return Err(Error::validation(
                    "hidden",
                    format!("layer {i} input dim {} does not chain from {}", layer.in_dim, prev),
                ));
            }
            prev = layer.out_dim;
            hidden.push(layer);
        }
        let output = layer_from_doc(doc.output, "output")?;
        if output.in_dim != prev || output.out_dim != doc.num_classes {
            return Err(Error::validation("output", "dims do not chain to num_classes"));
        }
        Ok(Self {
            t_fixed: doc.t_fixed,
            num_joints: doc.num_joints,
            num_classes: doc.num_classes,
            activation: doc.activation,
            norm_mean: doc.norm_mean,
            norm_scale: doc.norm_scale,
            embed,
            hidden,
            output,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::dataio::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }
}
