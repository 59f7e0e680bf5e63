//! Skeleton topology: the bone graph and the joint-angle triples derived from it.
//!
//! A topology is defined by a parent list. Joint indices are 0-based throughout
//! the crate; the constructor and the file formats use the conventional 1-based
//! parent list with `0` as the "no parent" sentinel, so the NTU list can be
//! written down exactly as published.

use crate::error::{Error, Result};

/// Sentinel in a 1-based parent list marking a root joint.
pub const NO_PARENT: usize = 0;

/// A bone, identified by its child joint and that joint's parent. Bones are
/// ordered by child index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bone {
    pub child: usize,
    pub parent: usize,
}

/// A 2-bone chain (grandparent, parent, child) whose inner angle at `parent`
/// is subject to the joint-angle constraint. Ordered by child index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AngleTriple {
    pub grandparent: usize,
    pub parent: usize,
    pub child: usize,
}

#[derive(Debug, Clone)]
pub struct SkeletonTopology {
    num_joints: usize,
    /// 0-based parent per joint; `None` for roots.
    parent: Vec<Option<usize>>,
    bones: Vec<Bone>,
    angle_triples: Vec<AngleTriple>,
}

impl SkeletonTopology {
    /// Builds a topology from a 1-based parent list (`parents[j]` is the parent
    /// of joint `j+1`; `NO_PARENT` marks roots). Rejects out-of-range parents,
    /// self-loops, and cycles.
    pub fn from_parent_list(parents: &[usize]) -> Result<Self> {
        let num_joints = parents.len();
        if num_joints == 0 {
            return Err(Error::Topology("empty parent list".into()));
        }
        let mut parent = Vec::with_capacity(num_joints);
        for (j, &p) in parents.iter().enumerate() {
            if p == NO_PARENT {
                parent.push(None);
            } else if p > num_joints {
                return Err(Error::Topology(format!(
                    "joint {} has parent {} out of range 1..={}",
                    j + 1,
                    p,
                    num_joints
                )));
            } else if p == j + 1 {
                return Err(Error::Topology(format!("joint {} is its own parent", j + 1)));
            } else {
                parent.push(Some(p - 1));
            }
        }
        // Walking parent links from any joint must reach a root within
        // num_joints steps, otherwise the list contains a cycle.
        for start in 0..num_joints {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > num_joints {
                    return Err(Error::Topology(format!(
                        "cycle detected following parents from joint {}",
                        start + 1
                    )));
                }
            }
        }
        let bones = (0..num_joints)
            .filter_map(|j| parent[j].map(|p| Bone { child: j, parent: p }))
            .collect();
        let angle_triples = (0..num_joints)
            .filter_map(|c| {
                let b = parent[c]?;
                let a = parent[b]?;
                Some(AngleTriple {
                    grandparent: a,
                    parent: b,
                    child: c,
                })
            })
            .collect();
        Ok(Self {
            num_joints,
            parent,
            bones,
            angle_triples,
        })
    }

    /// The 25-joint NTU RGB+D skeleton. Joint 1 is the spine base; joints 2-25
    /// carry the published preceding-joint list.
    pub fn ntu25() -> Self {
        const PARENTS: [usize; 25] = [
            NO_PARENT,
            1, 21, 3, 21, 5, 6, 7, 21, 9, 10, 11, 1, 13, 14, 15, 1, 17, 18, 19, 2, 8, 8, 12, 12,
        ];
        Self::from_parent_list(&PARENTS).expect("ntu25 parent list is well-formed")
    }

    /// A straight chain of `n` joints; joint 1 is the root. Handy for tests.
    pub fn chain(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Topology("chain needs at least one joint".into()));
        }
        let parents: Vec<usize> = (0..n).collect(); // 0, 1, 2, ... == NO_PARENT, j-1, ...
        Self::from_parent_list(&parents)
    }

    /// Looks a topology up by its dataset name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ntu25" => Ok(Self::ntu25()),
            "chain5" => Self::chain(5),
            other => Err(Error::Config(format!("unknown topology `{other}`"))),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    /// 0-based parent of a joint, `None` for roots.
    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    /// 1-based parent list with `NO_PARENT` sentinel, as used in files.
    pub fn parent_list(&self) -> Vec<usize> {
        self.parent
            .iter()
            .map(|p| p.map(|q| q + 1).unwrap_or(NO_PARENT))
            .collect()
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    pub fn angle_triples(&self) -> &[AngleTriple] {
        &self.angle_triples
    }

    pub fn num_angle_triples(&self) -> usize {
        self.angle_triples.len()
    }
}

/// Enumerates every (grandparent, parent, child) chain of the topology,
/// ordered by child index.
pub fn derive_angle_triples(topo: &SkeletonTopology) -> Vec<AngleTriple> {
    topo.angle_triples().to_vec()
}
