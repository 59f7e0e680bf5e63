//! Adversarial skeleton actions by ADMM dual optimization.
//!
//! The primal problem minimizes the attack loss subject to hinge-shaped
//! equality constraints on bone lengths, joint-angle changes, and speeds. The
//! dual is optimized by alternating an Adam inner minimization of the
//! augmented Lagrangian over the adversarial sequence with a single ascent
//! step on the multipliers at step size `beta`.
//!
//! The unconstrained C&W baseline (l2 distance plus the same margin loss) is
//! provided for comparison; its results carry the same metrics and trace.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamParams};
use crate::constraints::{
    all_violations, constraint_grad_with, dual_update, ConstraintConfig, ViolationVectors,
};
pub use crate::constraints::DualState;
use crate::error::{Error, Result};
use crate::evaluation::attack_metrics;
use crate::model::{argmax, Classifier, LossSpec};
use crate::sequence::SkeletonSequence;
use crate::topology::SkeletonTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Penalty weight and dual step size.
    pub beta: f64,
    /// Outer (dual) iterations. The dual step is small relative to trained
    /// margins, so the default allows the multipliers a long maturation.
    pub outer_iters: usize,
    /// Adam steps per dual update.
    pub inner_steps: usize,
    pub adam: AdamParams,
    pub loss: LossSpec,
    pub constraints: ConstraintConfig,
    pub seed: u64,
    /// Multiplier applied to the Adam learning rate after each outer round of
    /// the second half of the schedule. The first half runs at full rate;
    /// the shrinking steps afterwards let the iterate settle inside the
    /// feasible set instead of cycling at the constraint boundaries.
    pub lr_decay: f64,
    /// Stop early once the loss reaches zero and every residual is below this.
    pub early_stop_tol: f64,
    /// An iterate counts as feasible for best-iterate selection when its
    /// largest residual is below this.
    pub feasible_tol: f64,
    /// Trade-off constant `c` of the C&W objective.
    pub cw_tradeoff: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            outer_iters: 240,
            inner_steps: 20,
            adam: AdamParams::with_learning_rate(1e-3),
            loss: LossSpec::untargeted(0, 1.0),
            constraints: ConstraintConfig::default(),
            seed: 0,
            lr_decay: 0.93,
            early_stop_tol: 1e-4,
            feasible_tol: 1e-3,
            cw_tradeoff: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.outer_iters == 0 || self.inner_steps == 0 {
            return Err(Error::Config("iteration counts must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(self.early_stop_tol > 0.0 && self.feasible_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        self.constraints.validate()?;
        self.loss.validate(num_classes)
    }
}

/// One internal-iteration snapshot of the augmented Lagrangian terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub main_loss: f64,
    pub bone_term: f64,
    pub joint_term: f64,
    pub speed_term: f64,
    pub penalty_term: f64,
    pub max_bone_residual: f64,
    pub max_joint_residual: f64,
    pub max_speed_residual: f64,
}

/// Loss-evolution diagnostics: one record per internal iteration executed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub records: Vec<TraceRecord>,
}

impl AttackTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Largest residual (across families) within a slice of the records.
    pub fn max_residual_in(&self, range: std::ops::Range<usize>) -> f64 {
        self.records[range]
            .iter()
            .map(|r| {
                r.max_bone_residual
                    .max(r.max_joint_residual)
                    .max(r.max_speed_residual)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: SkeletonSequence,
    pub success: bool,
    pub predicted: usize,
    pub loss_spec: LossSpec,
    pub metrics: crate::evaluation::AttackMetrics,
    pub trace: AttackTrace,
    /// Adam steps actually taken.
    pub iterations: usize,
}

/// Value and gradient of the augmented Lagrangian
/// `L(x', l) + <lambda, B'> + <nu, J'> + <omega, S'> + beta/2 (|B'|^2 + |J'|^2 + |S'|^2)`
/// at `adv`. The gradient is zero on masked frames and frozen joints.
pub fn augmented_lagrangian<C: Classifier>(
    model: &C,
    topo: &SkeletonTopology,
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    dual: &DualState,
    cfg: &AttackConfig,
) -> Result<(f64, Array3<f64>)> {
    let parts = lagrangian_parts(model, topo, orig, adv, dual, cfg)?;
    Ok((parts.value, parts.grad))
}

struct LagrangianParts {
    value: f64,
    grad: Array3<f64>,
    loss: f64,
    violations: ViolationVectors,
    record: TraceRecord,
}

fn lagrangian_parts<C: Classifier>(
    model: &C,
    topo: &SkeletonTopology,
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    dual: &DualState,
    cfg: &AttackConfig,
) -> Result<LagrangianParts> {
    let (loss, _, mut grad) = model.loss_forward_grad(adv, &cfg.loss)?;
    let violations = all_violations(orig, adv, topo, &cfg.constraints)?;
    let cgrad = constraint_grad_with(orig, adv, topo, &cfg.constraints, dual, &violations)?;
    grad += &cgrad;
    apply_masks(&mut grad, adv);

    let (bone_term, joint_term, speed_term) = dual.inner_products(&violations);
    let (nb, nj, ns) = violations.squared_norms();
    let penalty_term = dual.beta / 2.0 * (nb + nj + ns);
    let value = loss + bone_term + joint_term + speed_term + penalty_term;
    let record = TraceRecord {
        main_loss: loss,
        bone_term,
        joint_term,
        speed_term,
        penalty_term,
        max_bone_residual: violations.max_bone(),
        max_joint_residual: violations.max_joint(),
        max_speed_residual: violations.max_speed(),
    };
    Ok(LagrangianParts {
        value,
        grad,
        loss,
        violations,
        record,
    })
}

/// Learning rate for an outer round: full rate through the first half of the
/// schedule, then geometric decay.
fn scheduled_lr(cfg: &AttackConfig, round: usize) -> f64 {
    let hold = cfg.outer_iters / 2;
    if round <= hold {
        cfg.adam.learning_rate
    } else {
        cfg.adam.learning_rate * cfg.lr_decay.powi((round - hold) as i32)
    }
}

/// Zeros gradient entries the attack may not touch: masked frames and joints
/// outside the actor mask.
fn apply_masks(grad: &mut Array3<f64>, seq: &SkeletonSequence) {
    for t in 0..seq.num_frames() {
        let frame_dead = !seq.frame_valid(t);
        for j in 0..seq.num_joints() {
            if frame_dead || !seq.joint_perturbable(j) {
                for a in 0..3 {
                    grad[[t, j, a]] = 0.0;
                }
            }
        }
    }
}

fn check_finite_input(orig: &SkeletonSequence) -> Result<()> {
    if orig.coords().iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("input sequence contains non-finite coordinates"));
    }
    Ok(())
}

fn finalize<C: Classifier>(
    model: &C,
    topo: &SkeletonTopology,
    orig: &SkeletonSequence,
    adv: SkeletonSequence,
    spec: &LossSpec,
    trace: AttackTrace,
    iterations: usize,
) -> Result<AttackResult> {
    let logits = model.forward(&adv)?;
    let predicted = argmax(&logits);
    let success = spec.goal_satisfied(&logits);
    let mut metrics = attack_metrics(orig, &adv, topo)?;
    metrics.success = success;
    Ok(AttackResult {
        adversarial: adv,
        success,
        predicted,
        loss_spec: *spec,
        metrics,
        trace,
        iterations,
    })
}

/// ADMM attack: `outer_iters` rounds of (`inner_steps` Adam steps on the
/// augmented Lagrangian, one dual ascent step). Adam state warm-starts across
/// rounds. Returns the feasible iterate with the lowest main loss, or the last
/// iterate if none was feasible.
pub fn admm_attack<C: Classifier>(
    model: &C,
    topo: &SkeletonTopology,
    orig: &SkeletonSequence,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_finite_input(orig)?;
    cfg.validate(model.num_classes())?;

    let mut adv = orig.clone();
    let initial = all_violations(orig, &adv, topo, &cfg.constraints)?;
    let mut dual = DualState::zeros_like(&initial, cfg.beta);
    let mut trace = AttackTrace::default();
    let mut best: Option<(f64, SkeletonSequence)> = None;
    let mut iterations = 0usize;

    'outer: for round in 0..cfg.outer_iters {
        // Fresh optimizer state per round: each inner minimization is its own
        // argmin, and stale second moments from constraint-wall contacts would
        // otherwise paralyze coordinates for hundreds of steps.
        let mut adam = Adam::new(cfg.adam, adv.coords().len());
        adam.set_learning_rate(scheduled_lr(cfg, round));
        for _ in 0..cfg.inner_steps {
            let parts = lagrangian_parts(model, topo, orig, &adv, &dual, cfg)?;
            if !parts.value.is_finite() {
                return Err(Error::Diverged {
                    iterations,
                    trace: Box::new(trace),
                });
            }
            let feasible = parts.violations.max_residual() <= cfg.feasible_tol;
            if feasible && best.as_ref().map_or(true, |(l, _)| parts.loss < *l) {
                best = Some((parts.loss, adv.clone()));
            }
            if parts.loss == 0.0 && parts.violations.max_residual() < cfg.early_stop_tol {
                best = Some((parts.loss, adv.clone()));
                break 'outer;
            }
            trace.records.push(parts.record);
            let grad = parts
                .grad
                .as_slice()
                .expect("gradient array is standard layout");
            adam.step(
                adv.coords_mut().as_slice_mut().expect("coords are standard layout"),
                grad,
            );
            iterations += 1;
            if adv.coords().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    iterations,
                    trace: Box::new(trace),
                });
            }
        }
        let violations = all_violations(orig, &adv, topo, &cfg.constraints)?;
        dual = dual_update(&dual, &violations, cfg.beta)?;
    }

    // The iterate left after the last step never went through the loop head;
    // give it the same chance at best-iterate selection.
    let parts = lagrangian_parts(model, topo, orig, &adv, &dual, cfg)?;
    let feasible = parts.violations.max_residual() <= cfg.feasible_tol;
    if feasible && best.as_ref().map_or(true, |(l, _)| parts.loss < *l) {
        best = Some((parts.loss, adv.clone()));
    }

    let chosen = best.map(|(_, seq)| seq).unwrap_or(adv);
    finalize(model, topo, orig, chosen, &cfg.loss, trace, iterations)
}

/// C&W baseline: Adam on `|x' - x|_2 + c * loss(x')` with the same iteration
/// budget and no skeleton constraints. Returns the successful iterate with the
/// smallest l2 distance, or the last iterate.
pub fn cw_attack<C: Classifier>(
    model: &C,
    topo: &SkeletonTopology,
    orig: &SkeletonSequence,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_finite_input(orig)?;
    cfg.validate(model.num_classes())?;
    if cfg.cw_tradeoff < 0.0 {
        return Err(Error::Config("cw_tradeoff must be nonnegative".into()));
    }

    let mut adv = orig.clone();
    let mut adam = Adam::new(cfg.adam, adv.coords().len());
    let mut trace = AttackTrace::default();
    let mut best: Option<(f64, SkeletonSequence)> = None;
    let mut iterations = 0usize;
    let total = cfg.outer_iters * cfg.inner_steps;

    for step_index in 0..total {
        // Same step budget and decay schedule as the ADMM attack. The C&W
        // objective has no stiff walls, so one continuing optimizer is fine.
        if step_index % cfg.inner_steps == 0 {
            adam.set_learning_rate(scheduled_lr(cfg, step_index / cfg.inner_steps));
        }
        let (loss, logits, mut grad) = model.loss_forward_grad(&adv, &cfg.loss)?;
        for g in grad.iter_mut() {
            *g *= cfg.cw_tradeoff;
        }
        // l2 distance over perturbable coordinates with subgradient 0 at zero.
        let mut l2_sq = 0.0;
        for t in orig.valid_frames() {
            for j in 0..orig.num_joints() {
                if !orig.joint_perturbable(j) {
                    continue;
                }
                for a in 0..3 {
                    let d = adv.coords()[[t, j, a]] - orig.coords()[[t, j, a]];
                    l2_sq += d * d;
                }
            }
        }
        let l2 = l2_sq.sqrt();
        if l2 > 0.0 {
            for t in orig.valid_frames() {
                for j in 0..orig.num_joints() {
                    for a in 0..3 {
                        let d = adv.coords()[[t, j, a]] - orig.coords()[[t, j, a]];
                        grad[[t, j, a]] += d / l2;
                    }
                }
            }
        }
        apply_masks(&mut grad, &adv);
        let value = l2 + cfg.cw_tradeoff * loss;
        if !value.is_finite() {
            return Err(Error::Diverged {
                iterations,
                trace: Box::new(trace),
            });
        }

        let goal = cfg.loss.goal_satisfied(&logits);
        if goal && best.as_ref().map_or(true, |(d, _)| l2 < *d) {
            best = Some((l2, adv.clone()));
        }
        // Residual diagnostics make C&W traces comparable with ADMM traces.
        let violations = all_violations(orig, &adv, topo, &cfg.constraints)?;
        trace.records.push(TraceRecord {
            main_loss: loss,
            bone_term: 0.0,
            joint_term: 0.0,
            speed_term: 0.0,
            penalty_term: l2,
            max_bone_residual: violations.max_bone(),
            max_joint_residual: violations.max_joint(),
            max_speed_residual: violations.max_speed(),
        });
        if goal && l2 == 0.0 {
            break; // already misclassified; nothing to minimize
        }

        adam.step(
            adv.coords_mut().as_slice_mut().expect("coords are standard layout"),
            grad.as_slice().expect("gradient array is standard layout"),
        );
        iterations += 1;
        if adv.coords().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iterations,
                trace: Box::new(trace),
            });
        }
    }

    // Consider the final iterate as well.
    let logits = model.forward(&adv)?;
    if cfg.loss.goal_satisfied(&logits) {
        let m = attack_metrics(orig, &adv, topo)?;
        if best.as_ref().map_or(true, |(d, _)| m.l2 < *d) {
            best = Some((m.l2, adv.clone()));
        }
    }

    let chosen = best.map(|(_, seq)| seq).unwrap_or(adv);
    finalize(model, topo, orig, chosen, &cfg.loss, trace, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic_dataset, GeneratorConfig};
    use crate::model::{loss_and_input_grad, train_reference_model, ReferenceClassifier, TrainConfig};

    fn mini_dataset() -> crate::dataio::Dataset {
        generate_synthetic_dataset(&GeneratorConfig {
            num_classes: 3,
            sequences_per_class: 30,
            num_frames: 16,
            topology: "chain5".into(),
            seed: 7,
            ..Default::default()
        })
        .unwrap()
    }

    fn mini_model(data: &crate::dataio::Dataset) -> ReferenceClassifier {
        train_reference_model(
            data,
            &TrainConfig {
                embed_dim: 16,
                hidden_dims: vec![16],
                epochs: 20,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap()
        .model
    }

    #[test]
    fn augmented_lagrangian_reduces_to_loss_at_origin() {
        let data = mini_dataset();
        let model = mini_model(&data);
        let orig = &data.test[0];
        let cfg = AttackConfig {
            loss: LossSpec::untargeted(orig.label(), 1.0),
            ..Default::default()
        };
        let v = all_violations(orig, orig, &data.topology, &cfg.constraints).unwrap();
        let dual = DualState::zeros_like(&v, cfg.beta);
        let (value, grad) = augmented_lagrangian(&model, &data.topology, orig, orig, &dual, &cfg).unwrap();
        let (loss, lgrad) = loss_and_input_grad(&model, orig, &cfg.loss).unwrap();
        assert_eq!(value, loss);
        for (a, b) in grad.iter().zip(lgrad.iter()) {
            assert_eq!(a, b);
        }

        // With beta = 0 and zero dual it is the bare loss regardless of adv.
        let mut adv = orig.clone();
        adv.coords_mut()[[0, 1, 0]] += 0.05;
        let cfg0 = AttackConfig {
            beta: 1.0, // beta in cfg is the dual step; penalty weight comes from dual.beta
            ..cfg.clone()
        };
        let v = all_violations(orig, &adv, &data.topology, &cfg0.constraints).unwrap();
        let dual0 = DualState::zeros_like(&v, 0.0);
        let (value, _) = augmented_lagrangian(&model, &data.topology, orig, &adv, &dual0, &cfg0).unwrap();
        let (loss, _) = loss_and_input_grad(&model, &adv, &cfg0.loss).unwrap();
        assert_eq!(value, loss);
    }

    #[test]
    fn augmented_lagrangian_matches_finite_differences() {
        use rand::prelude::*;
        let data = mini_dataset();
        let model = mini_model(&data);
        let orig = &data.test[1];
        let mut adv = orig.clone();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for v in adv.coords_mut().iter_mut() {
            *v += rng.random_range(-0.03..0.03);
        }
        let cfg = AttackConfig {
            loss: LossSpec::untargeted(orig.label(), 1.0),
            constraints: ConstraintConfig {
                eps_bone: 1e-3,
                eps_joint: 1e-3,
                eps_speed: 1e-3,
                speed_floor: 1e-3,
            },
            ..Default::default()
        };
        let v = all_violations(orig, &adv, &data.topology, &cfg.constraints).unwrap();
        let mut dual = DualState::zeros_like(&v, 1.0);
        for m in dual
            .lambda
            .iter_mut()
            .chain(dual.nu.iter_mut())
            .chain(dual.omega.iter_mut())
        {
            *m = rng.random_range(0.0..1.0);
        }
        let (_, grad) = augmented_lagrangian(&model, &data.topology, orig, &adv, &dual, &cfg).unwrap();

        let mut probe = adv.clone();
        let mut worst = 0.0f64;
        let scale = grad.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-12);
        let step = 1e-6;
        for t in 0..adv.num_frames() {
            for j in 0..adv.num_joints() {
                for a in 0..3 {
                    let base = adv.coords()[[t, j, a]];
                    probe.coords_mut()[[t, j, a]] = base + step;
                    let (hi, _) =
                        augmented_lagrangian(&model, &data.topology, orig, &probe, &dual, &cfg).unwrap();
                    probe.coords_mut()[[t, j, a]] = base - step;
                    let (lo, _) =
                        augmented_lagrangian(&model, &data.topology, orig, &probe, &dual, &cfg).unwrap();
                    probe.coords_mut()[[t, j, a]] = base;
                    let fd = (hi - lo) / (2.0 * step);
                    worst = worst.max((fd - grad[[t, j, a]]).abs() / scale);
                }
            }
        }
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn constant_model_cannot_be_attacked() {
        let data = mini_dataset();
        let model = ReferenceClassifier::zeroed(16, 5, 3, 8);
        let orig = &data.test[0];
        // Zero logits: argmax is class 0; a label-0 sequence cannot flip.
        let cfg = AttackConfig {
            loss: LossSpec::untargeted(0, 1.0),
            outer_iters: 3,
            inner_steps: 5,
            ..Default::default()
        };
        let result = admm_attack(&model, &data.topology, orig, &cfg).unwrap();
        assert!(!result.success);
        assert_eq!(result.iterations, 15);
        // No gradient signal: the adversarial sequence never moved.
        assert_eq!(result.adversarial.coords(), orig.coords());
        let v = all_violations(orig, &result.adversarial, &data.topology, &cfg.constraints).unwrap();
        assert!(v.max_residual() <= cfg.feasible_tol);
    }

    #[test]
    fn already_misclassified_succeeds_immediately() {
        let data = mini_dataset();
        let model = mini_model(&data);
        let orig = data.test.iter().next().unwrap();
        let logits = model.forward(orig).unwrap();
        let predicted = argmax(&logits);
        // Claim a different label so the sample is "already misclassified".
        let fake_label = (predicted + 1) % 3;
        let cfg = AttackConfig {
            loss: LossSpec::untargeted(fake_label, 0.0),
            ..Default::default()
        };
        let result = admm_attack(&model, &data.topology, orig, &cfg).unwrap();
        assert!(result.success);
        assert_eq!(result.iterations, 0);
        assert!(result.trace.is_empty());
        assert_eq!(result.adversarial.coords(), orig.coords());
        assert_eq!(result.metrics.l2, 0.0);
        assert_eq!(result.metrics.delta_bone_rel, 0.0);

        let cw = cw_attack(&model, &data.topology, orig, &cfg).unwrap();
        assert!(cw.success);
        assert_eq!(cw.metrics.l2, 0.0);
    }

    #[test]
    fn attack_flips_a_trained_model() {
        let data = mini_dataset();
        let model = mini_model(&data);
        let mut successes = 0;
        let mut n = 0;
        for orig in data.test.iter().take(6) {
            let logits = model.forward(orig).unwrap();
            if argmax(&logits) != orig.label() {
                continue; // only attack correctly classified inputs here
            }
            n += 1;
            let cfg = AttackConfig {
                loss: LossSpec::untargeted(orig.label(), 1.0),
                ..Default::default()
            };
            let result = admm_attack(&model, &data.topology, orig, &cfg).unwrap();
            if result.success {
                successes += 1;
                // Self-consistency: re-evaluating the model agrees with the flag.
                let logits = model.forward(&result.adversarial).unwrap();
                assert!(cfg.loss.goal_satisfied(&logits));
            }
        }
        assert!(n > 0);
        assert!(successes > 0, "no attack succeeded on {n} sequences");
    }

    #[test]
    fn attack_is_deterministic() {
        let data = mini_dataset();
        let model = mini_model(&data);
        let orig = &data.test[2];
        let cfg = AttackConfig {
            loss: LossSpec::untargeted(orig.label(), 1.0),
            outer_iters: 5,
            inner_steps: 10,
            ..Default::default()
        };
        let a = admm_attack(&model, &data.topology, orig, &cfg).unwrap();
        let b = admm_attack(&model, &data.topology, orig, &cfg).unwrap();
        assert_eq!(a.adversarial.coords(), b.adversarial.coords());
        assert_eq!(a.success, b.success);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn frozen_joints_stay_fixed() {
        let data = mini_dataset();
        let model = mini_model(&data);
        let orig = data.test[3]
            .clone()
            .with_actor_mask(vec![true, true, false, true, false])
            .unwrap();
        let cfg = AttackConfig {
            loss: LossSpec::untargeted(orig.label(), 1.0),
            outer_iters: 5,
            inner_steps: 10,
            ..Default::default()
        };
        let result = admm_attack(&model, &data.topology, &orig, &cfg).unwrap();
        for t in 0..orig.num_frames() {
            for &j in &[2usize, 4] {
                for a in 0..3 {
                    assert_eq!(
                        result.adversarial.coords()[[t, j, a]],
                        orig.coords()[[t, j, a]]
                    );
                }
            }
        }
    }

    #[test]
    fn dual_multipliers_never_decrease() {
        let data = mini_dataset();
        let model = mini_model(&data);
        let orig = &data.test[4];
        let cfg = AttackConfig {
            loss: LossSpec::untargeted(orig.label(), 1.0),
            outer_iters: 4,
            inner_steps: 5,
            ..Default::default()
        };
        // Reproduce the loop by hand to watch the multipliers.
        let mut adv = orig.clone();
        let v0 = all_violations(orig, &adv, &data.topology, &cfg.constraints).unwrap();
        let mut dual = DualState::zeros_like(&v0, cfg.beta);
        let mut adam = Adam::new(cfg.adam, adv.coords().len());
        for _ in 0..cfg.outer_iters {
            for _ in 0..cfg.inner_steps {
                let (_, grad) =
                    augmented_lagrangian(&model, &data.topology, orig, &adv, &dual, &cfg).unwrap();
                adam.step(
                    adv.coords_mut().as_slice_mut().unwrap(),
                    grad.as_slice().unwrap(),
                );
            }
            let v = all_violations(orig, &adv, &data.topology, &cfg.constraints).unwrap();
            let next = dual_update(&dual, &v, cfg.beta).unwrap();
            for (a, b) in dual.lambda.iter().zip(&next.lambda) {
                assert!(b >= a);
            }
            for (a, b) in dual.nu.iter().zip(&next.nu) {
                assert!(b >= a);
            }
            for (a, b) in dual.omega.iter().zip(&next.omega) {
                assert!(b >= a);
            }
            dual = next;
        }
    }

    #[test]
    fn non_finite_input_is_a_contract_error() {
        let data = mini_dataset();
        let model = mini_model(&data);
        let mut orig = data.test[0].clone();
        orig.coords_mut()[[0, 0, 0]] = f64::NAN;
        let cfg = AttackConfig {
            loss: LossSpec::untargeted(0, 1.0),
            ..Default::default()
        };
        assert!(matches!(
            admm_attack(&model, &data.topology, &orig, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cw_with_zero_tradeoff_minimizes_distance_only() {
        let data = mini_dataset();
        let model = mini_model(&data);
        // Pick a correctly classified input.
        let orig = data
            .test
            .iter()
            .find(|s| argmax(&model.forward(s).unwrap()) == s.label())
            .unwrap();
        let cfg = AttackConfig {
            loss: LossSpec::untargeted(orig.label(), 1.0),
            cw_tradeoff: 0.0,
            outer_iters: 3,
            inner_steps: 5,
            ..Default::default()
        };
        let result = cw_attack(&model, &data.topology, orig, &cfg).unwrap();
        // Pure distance minimization never leaves the original point.
        assert!(!result.success);
        assert_eq!(result.adversarial.coords(), orig.coords());
    }
}
