//! Equality-constraint residuals for bones, joint angles, and speeds, plus the
//! analytic gradient of the multiplier and penalty terms with respect to the
//! adversarial coordinates.
//!
//! Every residual is hinge-clamped (`max(violation - eps, 0)`), so the vectors
//! are nonnegative by construction. The hinge subgradient at the kink is zero:
//! entries that are exactly feasible push nothing.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::{dist3, joint_at};
use crate::sequence::SkeletonSequence;
use crate::topology::SkeletonTopology;

/// Tolerances of the three constraint families.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConstraintConfig {
    /// Relative bone-length tolerance (typical 0.01 - 0.03).
    pub eps_bone: f64,
    /// Joint-angle-change tolerance in radians (typical 0.1 - 0.2).
    pub eps_joint: f64,
    /// Relative speed-change tolerance (typically <= 0.10).
    pub eps_speed: f64,
    /// Floor for the speed denominator, in meters per frame. Keeps the ratio
    /// finite for joints that do not move in the original sequence.
    pub speed_floor: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            eps_bone: 0.03,
            eps_joint: 0.2,
            eps_speed: 0.1,
            speed_floor: 1e-3,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_bone >= 0.0 && self.eps_joint >= 0.0 && self.eps_speed >= 0.0) {
            return Err(Error::Config("constraint tolerances must be nonnegative".into()));
        }
        if !(self.speed_floor > 0.0) {
            return Err(Error::Config("speed_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Flattened residuals of the three families with maps from flat position back
/// to (frame, element index). Only valid frames / frame pairs contribute.
#[derive(Debug, Clone, Default)]
pub struct ViolationVectors {
    pub bone: Vec<f64>,
    pub joint: Vec<f64>,
    pub speed: Vec<f64>,
    /// (frame, bone index) per `bone` entry.
    pub bone_index: Vec<(usize, usize)>,
    /// (frame, triple index) per `joint` entry.
    pub joint_index: Vec<(usize, usize)>,
    /// (earlier frame of the pair, joint index) per `speed` entry.
    pub speed_index: Vec<(usize, usize)>,
}

impl ViolationVectors {
    pub fn max_bone(&self) -> f64 {
        self.bone.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_joint(&self) -> f64 {
        self.joint.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_speed(&self) -> f64 {
        self.speed.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest residual across all three families.
    pub fn max_residual(&self) -> f64 {
        self.max_bone().max(self.max_joint()).max(self.max_speed())
    }

    pub fn squared_norms(&self) -> (f64, f64, f64) {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum();
        (sq(&self.bone), sq(&self.joint), sq(&self.speed))
    }
}

/// Lagrange multipliers for the three residual families plus the penalty
/// weight `beta` of the augmented term.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
    pub omega: Vec<f64>,
    pub beta: f64,
}

impl DualState {
    /// All-zero multipliers shaped after a violation vector.
    pub fn zeros_like(v: &ViolationVectors, beta: f64) -> Self {
        Self {
            lambda: vec![0.0; v.bone.len()],
            nu: vec![0.0; v.joint.len()],
            omega: vec![0.0; v.speed.len()],
            beta,
        }
    }

    pub fn conforms(&self, v: &ViolationVectors) -> bool {
        self.lambda.len() == v.bone.len()
            && self.nu.len() == v.joint.len()
            && self.omega.len() == v.speed.len()
    }

    /// `<lambda, B'> + <nu, J'> + <omega, S'>` split by family.
    pub fn inner_products(&self, v: &ViolationVectors) -> (f64, f64, f64) {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum();
        (
            dot(&self.lambda, &v.bone),
            dot(&self.nu, &v.joint),
            dot(&self.omega, &v.speed),
        )
    }
}

/// Single-step dual ascent: each multiplier moves up by `beta` times its
/// residual. Residuals are nonnegative, so multipliers never decrease.
pub fn dual_update(dual: &DualState, violations: &ViolationVectors, beta: f64) -> Result<DualState> {
    if !dual.conforms(violations) {
        return Err(Error::contract("dual state does not conform to violation vectors"));
    }
    let step = |m: &[f64], r: &[f64]| m.iter().zip(r).map(|(x, y)| x + beta * y).collect();
    Ok(DualState {
        lambda: step(&dual.lambda, &violations.bone),
        nu: step(&dual.nu, &violations.joint),
        omega: step(&dual.omega, &violations.speed),
        beta: dual.beta,
    })
}

fn check_pair(orig: &SkeletonSequence, adv: &SkeletonSequence, topo: &SkeletonTopology) -> Result<()> {
    if orig.num_joints() != topo.num_joints() {
        return Err(Error::contract("sequence joint count does not match topology"));
    }
    if !orig.same_shape(adv) {
        return Err(Error::contract(
            "original and adversarial sequences differ in shape or mask",
        ));
    }
    Ok(())
}

/// Residuals `max(|B' - B|/B - eps_bone, 0)` over valid (frame, bone) entries.
pub fn bone_violations(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    topo: &SkeletonTopology,
    cfg: &ConstraintConfig,
) -> Result<Vec<f64>> {
    Ok(bone_violations_indexed(orig, adv, topo, cfg)?.0)
}

pub(crate) fn bone_violations_indexed(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    topo: &SkeletonTopology,
    cfg: &ConstraintConfig,
) -> Result<(Vec<f64>, Vec<(usize, usize)>)> {
    check_pair(orig, adv, topo)?;
    let mut values = Vec::new();
    let mut index = Vec::new();
    for t in orig.valid_frames() {
        for (i, bone) in topo.bones().iter().enumerate() {
            let b_orig = dist3(joint_at(orig, t, bone.child), joint_at(orig, t, bone.parent));
            if b_orig <= 0.0 {
                return Err(Error::Geometry(format!(
                    "zero original bone length at frame {t}, bone {i}"
                )));
            }
            let b_adv = dist3(joint_at(adv, t, bone.child), joint_at(adv, t, bone.parent));
            values.push(((b_adv - b_orig).abs() / b_orig - cfg.eps_bone).max(0.0));
            index.push((t, i));
        }
    }
    Ok((values, index))
}

/// Residuals `max(J' - eps_joint, 0)` over valid (frame, triple) entries.
pub fn joint_violations(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    topo: &SkeletonTopology,
    cfg: &ConstraintConfig,
) -> Result<Vec<f64>> {
    Ok(joint_violations_indexed(orig, adv, topo, cfg)?.0)
}

pub(crate) fn joint_violations_indexed(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    topo: &SkeletonTopology,
    cfg: &ConstraintConfig,
) -> Result<(Vec<f64>, Vec<(usize, usize)>)> {
    check_pair(orig, adv, topo)?;
    let bound = crate::geometry::joint_angle_change_bound(orig, adv, topo)?;
    let mut values = Vec::new();
    let mut index = Vec::new();
    for t in orig.valid_frames() {
        for k in 0..topo.num_angle_triples() {
            values.push((bound[[t, k]] - cfg.eps_joint).max(0.0));
            index.push((t, k));
        }
    }
    Ok((values, index))
}

/// Residuals `max(|S' - S| / max(S, speed_floor) - eps_speed, 0)` over valid
/// (frame pair, joint) entries.
pub fn speed_violations(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    cfg: &ConstraintConfig,
) -> Result<Vec<f64>> {
    Ok(speed_violations_indexed(orig, adv, cfg)?.0)
}

pub(crate) fn speed_violations_indexed(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    cfg: &ConstraintConfig,
) -> Result<(Vec<f64>, Vec<(usize, usize)>)> {
    if !orig.same_shape(adv) {
        return Err(Error::contract(
            "original and adversarial sequences differ in shape or mask",
        ));
    }
    if orig.num_frames() < 2 {
        return Err(Error::Degenerate("speed constraints need at least 2 frames".into()));
    }
    let mut values = Vec::new();
    let mut index = Vec::new();
    for t in 0..orig.num_frames() - 1 {
        if !orig.pair_valid(t) {
            continue;
        }
        for m in 0..orig.num_joints() {
            let s_orig = dist3(joint_at(orig, t + 1, m), joint_at(orig, t, m));
            let s_adv = dist3(joint_at(adv, t + 1, m), joint_at(adv, t, m));
            let denom = s_orig.max(cfg.speed_floor);
            values.push(((s_adv - s_orig).abs() / denom - cfg.eps_speed).max(0.0));
            index.push((t, m));
        }
    }
    Ok((values, index))
}

/// All three residual families with their index maps in one pass.
pub fn all_violations(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    topo: &SkeletonTopology,
    cfg: &ConstraintConfig,
) -> Result<ViolationVectors> {
    let (bone, bone_index) = bone_violations_indexed(orig, adv, topo, cfg)?;
    let (joint, joint_index) = joint_violations_indexed(orig, adv, topo, cfg)?;
    let (speed, speed_index) = speed_violations_indexed(orig, adv, cfg)?;
    Ok(ViolationVectors {
        bone,
        joint,
        speed,
        bone_index,
        joint_index,
        speed_index,
    })
}

#[inline]
fn unit_or_zero(d: [f64; 3]) -> [f64; 3] {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if n <= 0.0 {
        [0.0; 3]
    } else {
        [d[0] / n, d[1] / n, d[2] / n]
    }
}

#[inline]
fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Analytic gradient of
/// `<lambda, B'> + <nu, J'> + <omega, S'> + beta/2 (|B'|^2 + |J'|^2 + |S'|^2)`
/// with respect to the adversarial coordinates.
///
/// Each active residual `r` contributes `(multiplier + beta * r)` times the
/// gradient of its pre-hinge violation; inactive entries (including entries
/// exactly at the kink) contribute nothing. Frozen joints and masked frames
/// receive no gradient.
pub fn constraint_grad(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    topo: &SkeletonTopology,
    cfg: &ConstraintConfig,
    dual: &DualState,
) -> Result<Array3<f64>> {
    let violations = all_violations(orig, adv, topo, cfg)?;
    constraint_grad_with(orig, adv, topo, cfg, dual, &violations)
}

/// As [`constraint_grad`] but reusing residuals the caller already computed.
pub(crate) fn constraint_grad_with(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    topo: &SkeletonTopology,
    cfg: &ConstraintConfig,
    dual: &DualState,
    violations: &ViolationVectors,
) -> Result<Array3<f64>> {
    if !dual.conforms(violations) {
        return Err(Error::contract("dual state does not conform to violation vectors"));
    }
    let beta = dual.beta;
    let mut grad = Array3::zeros((orig.num_frames(), orig.num_joints(), 3));
    let add = |g: &mut Array3<f64>, t: usize, j: usize, v: [f64; 3], w: f64| {
        if !adv.joint_perturbable(j) {
            return;
        }
        g[[t, j, 0]] += w * v[0];
        g[[t, j, 1]] += w * v[1];
        g[[t, j, 2]] += w * v[2];
    };

    // Bone terms.
    for (e, &(t, i)) in violations.bone_index.iter().enumerate() {
        let r = violations.bone[e];
        if r <= 0.0 {
            continue;
        }
        let w = dual.lambda[e] + beta * r;
        let bone = &topo.bones()[i];
        let b_orig = dist3(joint_at(orig, t, bone.child), joint_at(orig, t, bone.parent));
        let d = sub3(joint_at(adv, t, bone.child), joint_at(adv, t, bone.parent));
        let b_adv = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let sign = if b_adv >= b_orig { 1.0 } else { -1.0 };
        let u = unit_or_zero(d);
        let scale = w * sign / b_orig;
        add(&mut grad, t, bone.child, u, scale);
        add(&mut grad, t, bone.parent, [-u[0], -u[1], -u[2]], scale);
    }

    // Joint-angle terms. The bound depends on each joint only through the
    // magnitude of that joint's own displacement.
    for (e, &(t, k)) in violations.joint_index.iter().enumerate() {
        let r = violations.joint[e];
        if r <= 0.0 {
            continue;
        }
        let w = dual.nu[e] + beta * r;
        let triple = &topo.angle_triples()[k];
        let b_ab = dist3(
            joint_at(orig, t, triple.grandparent),
            joint_at(orig, t, triple.parent),
        );
        let b_bc = dist3(joint_at(orig, t, triple.parent), joint_at(orig, t, triple.child));
        let u_a = unit_or_zero(sub3(
            joint_at(adv, t, triple.grandparent),
            joint_at(orig, t, triple.grandparent),
        ));
        let u_b = unit_or_zero(sub3(
            joint_at(adv, t, triple.parent),
            joint_at(orig, t, triple.parent),
        ));
        let u_c = unit_or_zero(sub3(
            joint_at(adv, t, triple.child),
            joint_at(orig, t, triple.child),
        ));
        add(&mut grad, t, triple.grandparent, u_a, w / b_ab);
        add(&mut grad, t, triple.parent, u_b, w * (1.0 / b_ab + 1.0 / b_bc));
        add(&mut grad, t, triple.child, u_c, w / b_bc);
    }

    // Speed terms.
    for (e, &(t, m)) in violations.speed_index.iter().enumerate() {
        let r = violations.speed[e];
        if r <= 0.0 {
            continue;
        }
        let w = dual.omega[e] + beta * r;
        let s_orig = dist3(joint_at(orig, t + 1, m), joint_at(orig, t, m));
        let denom = s_orig.max(cfg.speed_floor);
        let d = sub3(joint_at(adv, t + 1, m), joint_at(adv, t, m));
        let s_adv = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let sign = if s_adv >= s_orig { 1.0 } else { -1.0 };
        let u = unit_or_zero(d);
        let scale = w * sign / denom;
        add(&mut grad, t + 1, m, u, scale);
        add(&mut grad, t, m, [-u[0], -u[1], -u[2]], scale);
    }

    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::SkeletonSequence;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    /// Chain skeleton with unit-ish bones moving smoothly; generic positions.
    fn test_pair(seed: u64, t: usize, joints: usize, noise: f64) -> (SkeletonSequence, SkeletonSequence) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut coords = Array3::zeros((t, joints, 3));
        for tau in 0..t {
            let mut pos = [0.0f64; 3];
            for j in 0..joints {
                if j > 0 {
                    let phase = 0.7 * tau as f64 / t as f64 + 0.3 * j as f64;
                    pos[0] += 0.8 * phase.cos();
                    pos[1] += 0.8 * phase.sin();
                    pos[2] += 0.1 * (j as f64);
                }
                for a in 0..3 {
                    coords[[tau, j, a]] = pos[a];
                }
            }
        }
        let orig = SkeletonSequence::new(coords, 0).unwrap();
        let mut adv = orig.clone();
        if noise > 0.0 {
            for v in adv.coords_mut().iter_mut() {
                *v += rng.random_range(-noise..noise);
            }
        }
        (orig, adv)
    }

    fn constraint_value(
        orig: &SkeletonSequence,
        adv: &SkeletonSequence,
        topo: &SkeletonTopology,
        cfg: &ConstraintConfig,
        dual: &DualState,
    ) -> f64 {
        let v = all_violations(orig, adv, topo, cfg).unwrap();
        let (lb, lj, ls) = dual.inner_products(&v);
        let (nb, nj, ns) = v.squared_norms();
        lb + lj + ls + dual.beta / 2.0 * (nb + nj + ns)
    }

    fn fd_constraint_grad(
        orig: &SkeletonSequence,
        adv: &SkeletonSequence,
        topo: &SkeletonTopology,
        cfg: &ConstraintConfig,
        dual: &DualState,
        step: f64,
    ) -> Array3<f64> {
        let mut out = Array3::zeros((adv.num_frames(), adv.num_joints(), 3));
        let mut probe = adv.clone();
        for t in 0..adv.num_frames() {
            for j in 0..adv.num_joints() {
                for a in 0..3 {
                    let base = adv.coords()[[t, j, a]];
                    probe.coords_mut()[[t, j, a]] = base + step;
                    let hi = constraint_value(orig, &probe, topo, cfg, dual);
                    probe.coords_mut()[[t, j, a]] = base - step;
                    let lo = constraint_value(orig, &probe, topo, cfg, dual);
                    probe.coords_mut()[[t, j, a]] = base;
                    out[[t, j, a]] = (hi - lo) / (2.0 * step);
                }
            }
        }
        out
    }

    fn max_rel_err(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-12);
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn residual_examples_from_stretching() {
        let topo = SkeletonTopology::chain(2).unwrap();
        let mut coords = Array3::zeros((1, 2, 3));
        coords[[0, 1, 0]] = 1.0;
        let orig = SkeletonSequence::new(coords, 0).unwrap();

        let cfg = ConstraintConfig {
            eps_bone: 0.03,
            ..Default::default()
        };
        let mut adv = orig.clone();
        adv.coords_mut()[[0, 1, 0]] = 1.05;
        let v = bone_violations(&orig, &adv, &topo, &cfg).unwrap();
        assert!((v[0] - 0.02).abs() <= 1e-12);

        adv.coords_mut()[[0, 1, 0]] = 1.02;
        let v = bone_violations(&orig, &adv, &topo, &cfg).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn joint_residual_example() {
        // Displace the grandparent by 0.15 * B_ab with eps_joint = 0.1.
        let topo = SkeletonTopology::chain(3).unwrap();
        let mut coords = Array3::zeros((1, 3, 3));
        coords[[0, 1, 0]] = 1.0;
        coords[[0, 2, 0]] = 1.0;
        coords[[0, 2, 1]] = 1.0;
        let orig = SkeletonSequence::new(coords, 0).unwrap();
        let mut adv = orig.clone();
        adv.coords_mut()[[0, 0, 1]] -= 0.15;
        let cfg = ConstraintConfig {
            eps_joint: 0.1,
            ..Default::default()
        };
        let v = joint_violations(&orig, &adv, &topo, &cfg).unwrap();
        assert!((v[0] - 0.05).abs() <= 1e-12);
    }

    #[test]
    fn speed_residual_examples() {
        let cfg = ConstraintConfig {
            eps_speed: 0.1,
            speed_floor: 1e-3,
            ..Default::default()
        };
        // Original speed 0.10, adversarial 0.12.
        let mut coords = Array3::zeros((2, 1, 3));
        coords[[1, 0, 0]] = 0.10;
        let orig = SkeletonSequence::new(coords, 0).unwrap();
        let mut adv = orig.clone();
        adv.coords_mut()[[1, 0, 0]] = 0.12;
        let v = speed_violations(&orig, &adv, &cfg).unwrap();
        assert!((v[0] - 0.10).abs() <= 1e-12);

        // Originally static joint, tiny adversarial displacement under the floor.
        let orig = SkeletonSequence::new(Array3::from_elem((2, 1, 3), 0.5), 0).unwrap();
        let mut adv = orig.clone();
        adv.coords_mut()[[1, 0, 0]] += 1e-4;
        let v = speed_violations(&orig, &adv, &cfg).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn identical_sequences_have_zero_residuals_and_grad() {
        let topo = SkeletonTopology::chain(4).unwrap();
        let (orig, _) = test_pair(5, 4, 4, 0.0);
        let cfg = ConstraintConfig::default();
        let v = all_violations(&orig, &orig, &topo, &cfg).unwrap();
        assert!(v.bone.iter().all(|&x| x == 0.0));
        assert!(v.joint.iter().all(|&x| x == 0.0));
        assert!(v.speed.iter().all(|&x| x == 0.0));
        let mut dual = DualState::zeros_like(&v, 1.0);
        for l in dual.lambda.iter_mut() {
            *l = 0.7;
        }
        let g = constraint_grad(&orig, &orig, &topo, &cfg, &dual).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_dual_and_beta_give_zero_grad() {
        let topo = SkeletonTopology::chain(4).unwrap();
        let (orig, adv) = test_pair(6, 4, 4, 0.2);
        let cfg = ConstraintConfig {
            eps_bone: 0.0,
            eps_joint: 0.0,
            eps_speed: 0.0,
            speed_floor: 1e-3,
        };
        let v = all_violations(&orig, &adv, &topo, &cfg).unwrap();
        let dual = DualState::zeros_like(&v, 0.0);
        let g = constraint_grad(&orig, &adv, &topo, &cfg, &dual).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_active_bone_matches_finite_differences() {
        let topo = SkeletonTopology::chain(2).unwrap();
        let mut coords = Array3::zeros((2, 2, 3));
        coords[[0, 1, 0]] = 1.0;
        coords[[1, 1, 0]] = 1.0;
        let orig = SkeletonSequence::new(coords, 0).unwrap();
        let mut adv = orig.clone();
        adv.coords_mut()[[0, 1, 0]] = 1.21;
        adv.coords_mut()[[0, 1, 1]] = 0.13;
        let cfg = ConstraintConfig {
            eps_bone: 0.03,
            eps_joint: f64::INFINITY,
            eps_speed: f64::INFINITY,
            speed_floor: 1e-3,
        };
        let v = all_violations(&orig, &adv, &topo, &cfg).unwrap();
        assert_eq!(v.bone.iter().filter(|&&r| r > 0.0).count(), 1);
        assert!(v.joint.iter().chain(&v.speed).all(|&r| r == 0.0));
        let mut dual = DualState::zeros_like(&v, 0.0);
        dual.lambda[0] = 1.0;
        let g = constraint_grad(&orig, &adv, &topo, &cfg, &dual).unwrap();
        let fd = fd_constraint_grad(&orig, &adv, &topo, &cfg, &dual, 1e-6);
        assert!(max_rel_err(&g, &fd) < 1e-6, "rel err {}", max_rel_err(&g, &fd));
    }

    #[test]
    fn random_active_case_matches_finite_differences() {
        let topo = SkeletonTopology::chain(4).unwrap();
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let (orig, adv) = test_pair(100 + seed, 4, 4, 0.15);
            // Small tolerances keep most hinges active and far from kinks.
            let cfg = ConstraintConfig {
                eps_bone: 1e-3,
                eps_joint: 1e-3,
                eps_speed: 1e-3,
                speed_floor: 1e-3,
            };
            let v = all_violations(&orig, &adv, &topo, &cfg).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(777 + seed);
            let mut dual = DualState::zeros_like(&v, 1.0);
            for l in dual
                .lambda
                .iter_mut()
                .chain(dual.nu.iter_mut())
                .chain(dual.omega.iter_mut())
            {
                *l = rng.random_range(0.0..2.0);
            }
            let g = constraint_grad(&orig, &adv, &topo, &cfg, &dual).unwrap();
            let fd = fd_constraint_grad(&orig, &adv, &topo, &cfg, &dual, 1e-6);
            worst = worst.max(max_rel_err(&g, &fd));
        }
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn frozen_joints_get_no_gradient() {
        let topo = SkeletonTopology::chain(4).unwrap();
        let (orig, adv) = test_pair(55, 4, 4, 0.2);
        let adv = adv
            .with_actor_mask(vec![true, false, true, false])
            .unwrap();
        let cfg = ConstraintConfig {
            eps_bone: 0.0,
            eps_joint: 0.0,
            eps_speed: 0.0,
            speed_floor: 1e-3,
        };
        let v = all_violations(&orig, &adv, &topo, &cfg).unwrap();
        let dual = DualState::zeros_like(&v, 1.0);
        let g = constraint_grad(&orig, &adv, &topo, &cfg, &dual).unwrap();
        for t in 0..4 {
            for a in 0..3 {
                assert_eq!(g[[t, 1, a]], 0.0);
                assert_eq!(g[[t, 3, a]], 0.0);
            }
        }
    }

    #[test]
    fn residual_continuity_under_step_halving() {
        let topo = SkeletonTopology::chain(4).unwrap();
        let (orig, adv) = test_pair(9, 4, 4, 0.1);
        let cfg = ConstraintConfig::default();
        let base: f64 = all_violations(&orig, &adv, &topo, &cfg)
            .unwrap()
            .bone
            .iter()
            .sum();
        let mut prev_change = f64::INFINITY;
        for k in 0..4 {
            let h = 0.01 / f64::powi(2.0, k);
            let mut probe = adv.clone();
            probe.coords_mut()[[1, 2, 0]] += h;
            let moved: f64 = all_violations(&orig, &probe, &topo, &cfg)
                .unwrap()
                .bone
                .iter()
                .sum();
            let change = (moved - base).abs();
            // No jumps: the change shrinks with the step.
            assert!(change <= prev_change + 1e-12);
            prev_change = change;
        }
    }

    proptest! {
        #[test]
        fn residuals_are_nonnegative(seed in 0u64..500, noise in 0.0f64..0.5) {
            let topo = SkeletonTopology::chain(4).unwrap();
            let (orig, adv) = test_pair(seed, 3, 4, noise.max(1e-3));
            let cfg = ConstraintConfig::default();
            let v = all_violations(&orig, &adv, &topo, &cfg).unwrap();
            prop_assert!(v.bone.iter().all(|&x| x >= 0.0));
            prop_assert!(v.joint.iter().all(|&x| x >= 0.0));
            prop_assert!(v.speed.iter().all(|&x| x >= 0.0));
            prop_assert_eq!(v.bone.len(), v.bone_index.len());
            prop_assert_eq!(v.joint.len(), v.joint_index.len());
            prop_assert_eq!(v.speed.len(), v.speed_index.len());
        }
    }

    #[test]
    fn dual_update_arithmetic() {
        let v = ViolationVectors {
            bone: vec![0.5],
            joint: vec![],
            speed: vec![],
            bone_index: vec![(0, 0)],
            joint_index: vec![],
            speed_index: vec![],
        };
        let dual = DualState::zeros_like(&v, 2.0);
        let next = dual_update(&dual, &v, 2.0).unwrap();
        assert_eq!(next.lambda[0], 1.0);

        // Repeated updates with a constant residual accumulate linearly.
        let mut cur = dual;
        for _ in 0..5 {
            cur = dual_update(&cur, &v, 2.0).unwrap();
        }
        assert_eq!(cur.lambda[0], 5.0 * 2.0 * 0.5);

        // Zero violations leave the dual unchanged.
        let zero = ViolationVectors {
            bone: vec![0.0],
            joint: vec![],
            speed: vec![],
            bone_index: vec![(0, 0)],
            joint_index: vec![],
            speed_index: vec![],
        };
        let same = dual_update(&cur, &zero, 2.0).unwrap();
        assert_eq!(same.lambda, cur.lambda);
    }
}
