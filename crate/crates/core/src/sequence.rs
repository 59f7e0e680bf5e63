//! Skeleton action sequences: a T x I x 3 coordinate array with a frame
//! validity mask, a class label, and an optional mask of perturbable joints.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry;
use crate::topology::SkeletonTopology;

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    coords: Array3<f64>,
    frame_mask: Vec<bool>,
    label: usize,
    actor_mask: Option<Vec<bool>>,
}

impl SkeletonSequence {
    /// Wraps a T x I x 3 coordinate array. All frames are marked valid.
    pub fn new(coords: Array3<f64>, label: usize) -> Result<Self> {
        let t = coords.shape()[0];
        Self::with_mask(coords, vec![true; t], label)
    }

    pub fn with_mask(coords: Array3<f64>, frame_mask: Vec<bool>, label: usize) -> Result<Self> {
        let shape = coords.shape();
        if shape[0] == 0 || shape[1] == 0 {
            return Err(Error::contract("sequence needs at least one frame and one joint"));
        }
        if shape[2] != 3 {
            return Err(Error::contract(format!(
                "coordinates must be 3-dimensional, got {}",
                shape[2]
            )));
        }
        if frame_mask.len() != shape[0] {
            return Err(Error::contract(format!(
                "frame mask length {} != num frames {}",
                frame_mask.len(),
                shape[0]
            )));
        }
        Ok(Self {
            coords,
            frame_mask,
            label,
            actor_mask: None,
        })
    }

    /// Restricts the perturbable joints; `mask[j] == false` freezes joint `j`.
    pub fn with_actor_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.num_joints() {
            return Err(Error::contract(format!(
                "actor mask length {} != num joints {}",
                mask.len(),
                self.num_joints()
            )));
        }
        self.actor_mask = Some(mask);
        Ok(self)
    }

    pub fn num_frames(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn num_joints(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn set_label(&mut self, label: usize) {
        self.label = label;
    }

    pub fn coords(&self) -> &Array3<f64> {
        &self.coords
    }

    /// Mutable access for optimizers. Callers are responsible for keeping the
    /// masking invariants intact; `validate` re-checks them.
    pub fn coords_mut(&mut self) -> &mut Array3<f64> {
        &mut self.coords
    }

    pub fn frame_mask(&self) -> &[bool] {
        &self.frame_mask
    }

    pub fn actor_mask(&self) -> Option<&[bool]> {
        self.actor_mask.as_deref()
    }

    pub fn frame_valid(&self, frame: usize) -> bool {
        self.frame_mask[frame]
    }

    /// True when both frames of the consecutive pair starting at `frame` are valid.
    pub fn pair_valid(&self, frame: usize) -> bool {
        self.frame_mask[frame] && self.frame_mask[frame + 1]
    }

    pub fn joint_perturbable(&self, joint: usize) -> bool {
        self.actor_mask.as_ref().map_or(true, |m| m[joint])
    }

    pub fn valid_frames(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_frames()).filter(|&t| self.frame_mask[t])
    }

    pub fn num_valid_frames(&self) -> usize {
        self.frame_mask.iter().filter(|&&v| v).count()
    }

    /// Same shape, same masks, same label.
    pub fn same_shape(&self, other: &SkeletonSequence) -> bool {
        self.coords.shape() == other.coords.shape() && self.frame_mask == other.frame_mask
    }
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    /// NaN or infinity at (frame, joint, axis).
    NonFinite { frame: usize, joint: usize, axis: usize },
    /// A bone of zero length on a valid frame.
    ZeroBoneLength { frame: usize, bone: usize },
    /// Joint count differs from the topology.
    ShapeMismatch { expected_joints: usize, actual_joints: usize },
    /// A masked-out frame carries nonzero coordinates.
    PaddingNotZero { frame: usize },
    /// No valid frame at all.
    EmptyMask,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::NonFinite { frame, joint, axis } => {
                write!(f, "non-finite coordinate at frame {frame}, joint {joint}, axis {axis}")
            }
            Finding::ZeroBoneLength { frame, bone } => {
                write!(f, "zero bone length at frame {frame}, bone {bone}")
            }
            Finding::ShapeMismatch {
                expected_joints,
                actual_joints,
            } => write!(f, "topology expects {expected_joints} joints, sequence has {actual_joints}"),
            Finding::PaddingNotZero { frame } => write!(f, "padding not zero at masked frame {frame}"),
            Finding::EmptyMask => write!(f, "frame mask selects no frames"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Report-only check of every sequence invariant against a topology.
pub fn validate(seq: &SkeletonSequence, topo: &SkeletonTopology) -> ValidationReport {
    let mut findings = Vec::new();
    if seq.num_joints() != topo.num_joints() {
        findings.push(Finding::ShapeMismatch {
            expected_joints: topo.num_joints(),
            actual_joints: seq.num_joints(),
        });
    }
    if seq.num_valid_frames() == 0 {
        findings.push(Finding::EmptyMask);
    }
    for t in 0..seq.num_frames() {
        for j in 0..seq.num_joints() {
            for a in 0..3 {
                if !seq.coords()[[t, j, a]].is_finite() {
                    findings.push(Finding::NonFinite { frame: t, joint: j, axis: a });
                }
            }
        }
        if !seq.frame_valid(t) {
            let zero = (0..seq.num_joints())
                .all(|j| (0..3).all(|a| seq.coords()[[t, j, a]] == 0.0));
            if !zero {
                findings.push(Finding::PaddingNotZero { frame: t });
            }
        }
    }
    if seq.num_joints() == topo.num_joints() {
        for t in seq.valid_frames() {
            for (i, bone) in topo.bones().iter().enumerate() {
                let len = geometry::bone_length_at(seq, t, bone);
                if !(len > 0.0) {
                    findings.push(Finding::ZeroBoneLength { frame: t, bone: i });
                }
            }
        }
    }
    ValidationReport { findings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn chain3_seq() -> SkeletonSequence {
        // Two frames of a 3-joint chain along y.
        let mut coords = Array3::zeros((2, 3, 3));
        for t in 0..2 {
            for j in 0..3 {
                coords[[t, j, 1]] = j as f64 * 0.5;
            }
        }
        SkeletonSequence::new(coords, 0).unwrap()
    }

    #[test]
    fn well_formed_sequence_is_clean() {
        let topo = SkeletonTopology::chain(3).unwrap();
        let report = validate(&chain3_seq(), &topo);
        assert!(report.is_clean(), "unexpected findings: {:?}", report.findings);
    }

    #[test]
    fn coincident_joint_and_parent_is_flagged() {
        let topo = SkeletonTopology::chain(3).unwrap();
        let mut seq = chain3_seq();
        // Collapse joint 1 onto its parent in frame 0.
        seq.coords_mut()[[0, 1, 1]] = 0.0;
        let report = validate(&seq, &topo);
        assert!(report
            .findings
            .iter()
            .any(|f| matches!(f, Finding::ZeroBoneLength { frame: 0, bone: 0 })));
    }

    #[test]
    fn nonzero_padding_is_flagged() {
        let topo = SkeletonTopology::chain(3).unwrap();
        let base = chain3_seq();
        let mut mask = base.frame_mask().to_vec();
        mask[1] = false;
        let seq = SkeletonSequence::with_mask(base.coords().clone(), mask, 0).unwrap();
        let report = validate(&seq, &topo);
        assert!(report
            .findings
            .iter()
            .any(|f| matches!(f, Finding::PaddingNotZero { frame: 1 })));
    }

    #[test]
    fn nan_is_flagged() {
        let topo = SkeletonTopology::chain(3).unwrap();
        let mut seq = chain3_seq();
        seq.coords_mut()[[1, 2, 0]] = f64::NAN;
        let report = validate(&seq, &topo);
        assert!(report
            .findings
            .iter()
            .any(|f| matches!(f, Finding::NonFinite { frame: 1, joint: 2, axis: 0 })));
    }
}
