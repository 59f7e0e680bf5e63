//! Skeleton geometry: bone lengths, per-joint speeds, the differentiable
//! joint-angle-change bound, and kinetic energy.
//!
//! All functions treat masked-out frames as absent: their rows in the returned
//! arrays are zero and carry no meaning. Callers consult the sequence's frame
//! mask to tell which rows are live.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::sequence::SkeletonSequence;
use crate::topology::{Bone, SkeletonTopology};

#[inline]
pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[inline]
pub(crate) fn joint_at(seq: &SkeletonSequence, frame: usize, joint: usize) -> [f64; 3] {
    let c = seq.coords();
    [c[[frame, joint, 0]], c[[frame, joint, 1]], c[[frame, joint, 2]]]
}

/// Euclidean length of one bone on one frame.
pub(crate) fn bone_length_at(seq: &SkeletonSequence, frame: usize, bone: &Bone) -> f64 {
    dist3(joint_at(seq, frame, bone.child), joint_at(seq, frame, bone.parent))
}

fn check_shape(seq: &SkeletonSequence, topo: &SkeletonTopology) -> Result<()> {
    if seq.num_joints() != topo.num_joints() {
        return Err(Error::contract(format!(
            "sequence has {} joints, topology expects {}",
            seq.num_joints(),
            topo.num_joints()
        )));
    }
    Ok(())
}

/// T x num_bones matrix of bone lengths. Rows of masked-out frames are zero.
pub fn bone_lengths(seq: &SkeletonSequence, topo: &SkeletonTopology) -> Result<Array2<f64>> {
    check_shape(seq, topo)?;
    let mut out = Array2::zeros((seq.num_frames(), topo.num_bones()));
    for t in seq.valid_frames() {
        for (i, bone) in topo.bones().iter().enumerate() {
            out[[t, i]] = bone_length_at(seq, t, bone);
        }
    }
    Ok(out)
}

/// (T-1) x I matrix of per-joint displacement magnitudes between consecutive
/// frames. Pairs touching a masked-out frame are zero.
pub fn speeds(seq: &SkeletonSequence) -> Result<Array2<f64>> {
    let t_len = seq.num_frames();
    if t_len < 2 {
        return Err(Error::Degenerate(format!(
            "speeds need at least 2 frames, got {t_len}"
        )));
    }
    let mut out = Array2::zeros((t_len - 1, seq.num_joints()));
    for t in 0..t_len - 1 {
        if !seq.pair_valid(t) {
            continue;
        }
        for m in 0..seq.num_joints() {
            out[[t, m]] = dist3(joint_at(seq, t + 1, m), joint_at(seq, t, m));
        }
    }
    Ok(out)
}

/// T x num_triples matrix of the differentiable upper bound on joint-angle
/// change between `orig` and `adv`.
///
/// For the triple (a, b, c) at frame `t`, with displacement magnitudes
/// `D_j = |adv_j - orig_j|` and original bone lengths `B_ab`, `B_bc`:
///
/// ```text
/// J' = D_a / B_ab + D_b / B_ab + D_b / B_bc + D_c / B_bc
/// ```
///
/// The bound is in radians in the small-angle regime. Masked-out frames are zero.
pub fn joint_angle_change_bound(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    topo: &SkeletonTopology,
) -> Result<Array2<f64>> {
    check_shape(orig, topo)?;
    if !orig.same_shape(adv) {
        return Err(Error::contract(
            "original and adversarial sequences differ in shape or mask",
        ));
    }
    let mut out = Array2::zeros((orig.num_frames(), topo.num_angle_triples()));
    for t in orig.valid_frames() {
        for (k, triple) in topo.angle_triples().iter().enumerate() {
            let b_ab = dist3(
                joint_at(orig, t, triple.grandparent),
                joint_at(orig, t, triple.parent),
            );
            let b_bc = dist3(
                joint_at(orig, t, triple.parent),
                joint_at(orig, t, triple.child),
            );
            if b_ab <= 0.0 || b_bc <= 0.0 {
                return Err(Error::Geometry(format!(
                    "zero original bone length in triple {k} at frame {t}"
                )));
            }
            let d_a = dist3(joint_at(adv, t, triple.grandparent), joint_at(orig, t, triple.grandparent));
            let d_b = dist3(joint_at(adv, t, triple.parent), joint_at(orig, t, triple.parent));
            let d_c = dist3(joint_at(adv, t, triple.child), joint_at(orig, t, triple.child));
            out[[t, k]] = d_a / b_ab + d_b / b_ab + d_b / b_bc + d_c / b_bc;
        }
    }
    Ok(out)
}

/// Total kinetic energy: the sum of squared inter-frame displacements over
/// valid consecutive pairs and joints (unit mass, unit frame time).
pub fn kinetic_energy(seq: &SkeletonSequence) -> Result<f64> {
    let s = speeds(seq)?;
    let mut k = 0.0;
    for t in 0..seq.num_frames() - 1 {
        if !seq.pair_valid(t) {
            continue;
        }
        for m in 0..seq.num_joints() {
            k += s[[t, m]] * s[[t, m]];
        }
    }
    Ok(k)
}
