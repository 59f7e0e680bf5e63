//! Sequence and dataset file formats, the synthetic forward-kinematics
//! generator, and frame-count normalization.
//!
//! All files are versioned JSON documents. Reals are serialized as
//! shortest-round-trip decimals, so write/read cycles are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::SkeletonSequence;
use crate::topology::SkeletonTopology;

pub const FILE_FORMAT_VERSION: u32 = 1;

/// Writes a file atomically: the bytes land in a sibling temp file which is
/// renamed over the target, so failures never leave partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(Error::Io)
}

// ---------------------------------------------------------------------------
// Sequence files
// ---------------------------------------------------------------------------

/// On-disk form of a skeleton sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub format_version: u32,
    pub num_frames: usize,
    pub num_joints: usize,
    /// frame -> joint -> [x, y, z] in meters.
    pub coords: Vec<Vec<[f64; 3]>>,
    pub frame_mask: Vec<bool>,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub actor_mask: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metadata: Option<BTreeMap<String, String>>,
}

impl SequenceRecord {
    pub fn from_sequence(seq: &SkeletonSequence) -> Self {
        let coords = (0..seq.num_frames())
            .map(|t| {
                (0..seq.num_joints())
                    .map(|j| {
                        [
                            seq.coords()[[t, j, 0]],
                            seq.coords()[[t, j, 1]],
                            seq.coords()[[t, j, 2]],
                        ]
                    })
                    .collect()
            })
            .collect();
        Self {
            format_version: FILE_FORMAT_VERSION,
            num_frames: seq.num_frames(),
            num_joints: seq.num_joints(),
            coords,
            frame_mask: seq.frame_mask().to_vec(),
            label: seq.label(),
            actor_mask: seq.actor_mask().map(|m| m.to_vec()),
            metadata: None,
        }
    }

    /// Dimension checks with precise field names.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FILE_FORMAT_VERSION {
            return Err(Error::validation(
                "format_version",
                format!("unsupported version {}", self.format_version),
            ));
        }
        if self.coords.len() != self.num_frames {
            return Err(Error::validation(
                "coords",
                format!("{} frames declared, {} present", self.num_frames, self.coords.len()),
            ));
        }
        for (t, frame) in self.coords.iter().enumerate() {
            if frame.len() != self.num_joints {
                return Err(Error::validation(
                    "coords",
                    format!(
                        "frame {t} has {} joints, {} declared",
                        frame.len(),
                        self.num_joints
                    ),
                ));
            }
        }
        if self.frame_mask.len() != self.num_frames {
            return Err(Error::validation(
                "frame_mask",
                format!(
                    "length {} does not match num_frames {}",
                    self.frame_mask.len(),
                    self.num_frames
                ),
            ));
        }
        if let Some(mask) = &self.actor_mask {
            if mask.len() != self.num_joints {
                return Err(Error::validation(
                    "actor_mask",
                    format!("length {} does not match num_joints {}", mask.len(), self.num_joints),
                ));
            }
        }
        Ok(())
    }

    pub fn to_sequence(&self) -> Result<SkeletonSequence> {
        self.validate()?;
        let mut coords = Array3::zeros((self.num_frames, self.num_joints, 3));
        for (t, frame) in self.coords.iter().enumerate() {
            for (j, xyz) in frame.iter().enumerate() {
                for a in 0..3 {
                    coords[[t, j, a]] = xyz[a];
                }
            }
        }
        let seq = SkeletonSequence::with_mask(coords, self.frame_mask.clone(), self.label)?;
        match &self.actor_mask {
            Some(mask) => seq.with_actor_mask(mask.clone()),
            None => Ok(seq),
        }
    }
}

pub fn write_sequence(record: &SequenceRecord, path: &Path) -> Result<()> {
    record.validate()?;
    let text = serde_json::to_string(record)
        .map_err(|e| Error::validation("record", e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_sequence(path: &Path) -> Result<SequenceRecord> {
    let text = fs::read_to_string(path)?;
    let record: SequenceRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    record.validate()?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Frame-count normalization
// ---------------------------------------------------------------------------

/// Uniform-index subsampling above `t_target`, zero padding below it. Retained
/// frames keep their coordinates and mask bits; padding frames are masked out.
pub fn subsample_or_pad(seq: &SkeletonSequence, t_target: usize) -> Result<SkeletonSequence> {
    if t_target == 0 {
        return Err(Error::contract("t_target must be at least 1"));
    }
    let t = seq.num_frames();
    let i = seq.num_joints();
    if t == t_target {
        return Ok(seq.clone());
    }
    let mut coords = Array3::zeros((t_target, i, 3));
    let mut mask = vec![false; t_target];
    if t > t_target {
        let ratio = t as f64 / t_target as f64;
        for out_t in 0..t_target {
            let src = ((out_t as f64 * ratio).round() as usize).min(t - 1);
            for j in 0..i {
                for a in 0..3 {
                    coords[[out_t, j, a]] = seq.coords()[[src, j, a]];
                }
            }
            mask[out_t] = seq.frame_valid(src);
        }
    } else {
        for out_t in 0..t {
            for j in 0..i {
                for a in 0..3 {
                    coords[[out_t, j, a]] = seq.coords()[[out_t, j, a]];
                }
            }
            mask[out_t] = seq.frame_valid(out_t);
        }
        // Remaining frames stay zero with mask false.
    }
    let out = SkeletonSequence::with_mask(coords, mask, seq.label())?;
    match seq.actor_mask() {
        Some(m) => out.with_actor_mask(m.to_vec()),
        None => Ok(out),
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

/// Sinusoidal angle trajectory of one joint within one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrajectory {
    /// Class-specific posture offset added to the joint's base angle (radians).
    pub base: f64,
    /// Swing amplitude (radians).
    pub amplitude: f64,
    /// Phase offset (radians).
    pub phase: f64,
}

/// Angle-trajectory parameters of one action class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTrajectory {
    /// Cycles per sequence.
    pub frequency: f64,
    /// One entry per joint.
    pub joints: Vec<JointTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub sequences_per_class: usize,
    pub num_frames: usize,
    /// "ntu25" or "chain5".
    pub topology: String,
    /// Per-bone lengths indexed like `SkeletonTopology::bones()`; `None` uses
    /// the topology's built-in table.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bone_lengths: Option<Vec<f64>>,
    /// Explicit per-class trajectories; `None` derives them from the seed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_trajectories: Option<Vec<ClassTrajectory>>,
    /// Std of the per-sequence angle jitter (radians).
    pub angle_noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            sequences_per_class: 600,
            num_frames: 48,
            topology: "ntu25".into(),
            bone_lengths: None,
            class_trajectories: None,
            angle_noise_std: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.sequences_per_class == 0 || self.num_frames == 0 {
            return Err(Error::Config("generator counts must be positive".into()));
        }
        if self.angle_noise_std < 0.0 {
            return Err(Error::Config("angle_noise_std must be nonnegative".into()));
        }
        if let Some(lens) = &self.bone_lengths {
            if lens.iter().any(|&l| !(l > 0.0)) {
                return Err(Error::Config("bone lengths must be positive".into()));
            }
        }
        Ok(())
    }
}

/// In-memory dataset with its topology and 80/20 split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub topology: SkeletonTopology,
    pub topology_name: String,
    pub num_classes: usize,
    pub num_frames: usize,
    pub class_names: Vec<String>,
    pub train: Vec<SkeletonSequence>,
    pub test: Vec<SkeletonSequence>,
}

/// Plausible human segment lengths for the 25-joint skeleton, indexed by bone
/// (child order). Chain topologies default to 0.3 m per bone.
fn default_bone_lengths(topo: &SkeletonTopology, name: &str) -> Vec<f64> {
    if name == "ntu25" {
        // child joints 2..=25
        return vec![
            0.25, // 2: spine mid
            0.10, // 3: neck
            0.15, // 4: head
            0.20, // 5: l shoulder
            0.25, // 6: l elbow
            0.25, // 7: l wrist
            0.08, // 8: l hand
            0.20, // 9: r shoulder
            0.25, // 10: r elbow
            0.25, // 11: r wrist
            0.08, // 12: r hand
            0.10, // 13: l hip
            0.40, // 14: l knee
            0.40, // 15: l ankle
            0.15, // 16: l foot
            0.10, // 17: r hip
            0.40, // 18: r knee
            0.40, // 19: r ankle
            0.15, // 20: r foot
            0.25, // 21: spine shoulder
            0.05, // 22: l hand tip
            0.05, // 23: l thumb
            0.05, // 24: r hand tip
            0.05, // 25: r thumb
        ];
    }
    vec![0.3; topo.num_bones()]
}

/// Fixed skeleton-frame data shared by all sequences of a dataset: per joint a
/// swing-circle basis and a base angle.
struct JointFrame {
    u: [f64; 3],
    v: [f64; 3],
    base_angle: f64,
}

/// Radius of the root joints' sway circle. Keeps every joint moving so no
/// original speed sits at the constraint denominator floor.
const ROOT_DRIFT_RADIUS: f64 = 0.15;

/// Whole-body translation speed in meters per frame, along a random
/// per-sequence direction. Keeps low-speed frames away from the constraint
/// denominator floor without drowning the pose features in translation.
const BODY_DRIFT_SPEED: f64 = 0.008;

fn unit_gaussian_vector(rng: &mut ChaCha12Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn orthonormal_pair(rng: &mut ChaCha12Rng) -> ([f64; 3], [f64; 3]) {
    let u = unit_gaussian_vector(rng);
    loop {
        let r = unit_gaussian_vector(rng);
        let dot = u[0] * r[0] + u[1] * r[1] + u[2] * r[2];
        let mut v = [r[0] - dot * u[0], r[1] - dot * u[1], r[2] - dot * u[2]];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            v = [v[0] / n, v[1] / n, v[2] / n];
            return (u, v);
        }
    }
}

/// Std of the per-class, per-joint posture offsets in the derived default
/// trajectories. Spaces class mean poses a couple of centimeters apart at
/// human bone lengths.
const CLASS_BASE_SPREAD: f64 = 0.028;

/// Default per-class trajectories: distinct frequencies plus per-joint posture
/// offsets, amplitudes, and phases drawn from the class stream.
fn derive_class_trajectories(
    num_classes: usize,
    num_joints: usize,
    seed: u64,
) -> Vec<ClassTrajectory> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..num_classes)
        .map(|c| {
            // Near-integer cycle counts keep the time-mean pose insensitive to
            // the per-sequence phase shift.
            let frequency = 1.0 + c as f64 + rng.random_range(0.0..0.08);
            let joints = (0..num_joints)
                .map(|_| JointTrajectory {
                    base: CLASS_BASE_SPREAD * rng.sample::<f64, _>(StandardNormal),
                    amplitude: rng.random_range(0.12..0.35),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                })
                .collect();
            ClassTrajectory { frequency, joints }
        })
        .collect()
}

/// Builds the dataset by forward kinematics: every joint sits at its bone
/// length from its parent along a class- and time-dependent direction, so bone
/// lengths are constant across frames by construction.
pub fn generate_synthetic_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let topo = SkeletonTopology::by_name(&cfg.topology)?;
    let num_joints = topo.num_joints();
    let bone_lengths = match &cfg.bone_lengths {
        Some(lens) => {
            if lens.len() != topo.num_bones() {
                return Err(Error::Config(format!(
                    "bone length table has {} entries, topology has {} bones",
                    lens.len(),
                    topo.num_bones()
                )));
            }
            lens.clone()
        }
        None => default_bone_lengths(&topo, &cfg.topology),
    };
    let classes = match &cfg.class_trajectories {
        Some(c) => {
            if c.len() != cfg.num_classes {
                return Err(Error::Config("one trajectory per class required".into()));
            }
            for traj in c {
                if traj.joints.len() != num_joints {
                    return Err(Error::Config("one joint trajectory per joint required".into()));
                }
            }
            c.clone()
        }
        None => derive_class_trajectories(cfg.num_classes, num_joints, cfg.seed),
    };

    // Structure stream: swing bases and base angles shared by every sequence.
    let mut structure_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    structure_rng.set_stream(0);
    let joint_frames: Vec<JointFrame> = (0..num_joints)
        .map(|_| {
            let (u, v) = orthonormal_pair(&mut structure_rng);
            JointFrame {
                u,
                v,
                base_angle: structure_rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    // Children sorted so parents are always computed first.
    let mut order: Vec<usize> = (0..num_joints).collect();
    let depth: Vec<usize> = (0..num_joints)
        .map(|j| {
            let mut d = 0;
            let mut cur = j;
            while let Some(p) = topo.parent(cur) {
                d += 1;
                cur = p;
            }
            d
        })
        .collect();
    order.sort_by_key(|&j| (depth[j], j));

    // Bone length per child joint.
    let mut bone_of_child = vec![0.0f64; num_joints];
    for (i, bone) in topo.bones().iter().enumerate() {
        bone_of_child[bone.child] = bone_lengths[i];
    }

    let t_len = cfg.num_frames;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let train_per_class = (cfg.sequences_per_class * 4) / 5;
    for class in 0..cfg.num_classes {
        let traj = &classes[class];
        for s in 0..cfg.sequences_per_class {
            let global_index = class * cfg.sequences_per_class + s;
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1000 + global_index as u64);
            let jitter: Vec<f64> = (0..num_joints)
                .map(|_| cfg.angle_noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let seq_phase = rng.random_range(0.0..std::f64::consts::TAU);
            let root_offset = [
                0.05 * rng.sample::<f64, _>(StandardNormal),
                0.05 * rng.sample::<f64, _>(StandardNormal),
                0.05 * rng.sample::<f64, _>(StandardNormal),
            ];
            let drift_dir = unit_gaussian_vector(&mut rng);

            let mut coords = Array3::zeros((t_len, num_joints, 3));
            for t in 0..t_len {
                let omega = std::f64::consts::TAU * traj.frequency * t as f64 / t_len as f64;
                for &j in &order {
                    let jt = &traj.joints[j];
                    let angle = joint_frames[j].base_angle
                        + jt.base
                        + jitter[j]
                        + jt.amplitude * (omega + jt.phase + seq_phase).sin();
                    let (sin, cos) = angle.sin_cos();
                    match topo.parent(j) {
                        None => {
                            // Roots sway on a small circle and the whole body
                            // drifts at constant velocity, so every joint keeps
                            // moving between frames.
                            for a in 0..3 {
                                coords[[t, j, a]] = root_offset[a]
                                    + BODY_DRIFT_SPEED * t as f64 * drift_dir[a]
                                    + ROOT_DRIFT_RADIUS
                                        * (cos * joint_frames[j].u[a] + sin * joint_frames[j].v[a]);
                            }
                        }
                        Some(p) => {
                            let b = bone_of_child[j];
                            for a in 0..3 {
                                coords[[t, j, a]] = coords[[t, p, a]]
                                    + b * (cos * joint_frames[j].u[a] + sin * joint_frames[j].v[a]);
                            }
                        }
                    }
                }
            }
            let seq = SkeletonSequence::new(coords, class)?;
            if s < train_per_class {
                train.push(seq);
            } else {
                test.push(seq);
            }
        }
    }

    Ok(Dataset {
        topology: topo,
        topology_name: cfg.topology.clone(),
        num_classes: cfg.num_classes,
        num_frames: t_len,
        class_names: (0..cfg.num_classes).map(|c| format!("class_{c}")).collect(),
        train,
        test,
    })
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub topology: String,
    /// 1-based parent list with 0 for roots.
    pub parent_list: Vec<usize>,
    pub num_frames: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut index = 0usize;
    for (split, seqs) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
        for seq in seqs.iter() {
            let name = format!("seq_{index:05}.json");
            write_sequence(&SequenceRecord::from_sequence(seq), &dir.join(&name))?;
            entries.push(ManifestEntry {
                path: name,
                label: seq.label(),
                split,
            });
            index += 1;
        }
    }
    let manifest = DatasetManifest {
        format_version: FILE_FORMAT_VERSION,
        topology: dataset.topology_name.clone(),
        parent_list: dataset.topology.parent_list(),
        num_frames: dataset.num_frames,
        num_classes: dataset.num_classes,
        class_names: dataset.class_names.clone(),
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::validation("manifest", e.to_string()))?;
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FILE_FORMAT_VERSION {
        return Err(Error::validation(
            "format_version",
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let topology = SkeletonTopology::from_parent_list(&manifest.parent_list)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in &manifest.entries {
        let record = read_sequence(&dir.join(&entry.path))?;
        let mut seq = record.to_sequence()?;
        seq.set_label(entry.label);
        match entry.split {
            Split::Train => train.push(seq),
            Split::Test => test.push(seq),
        }
    }
    Ok(Dataset {
        topology,
        topology_name: manifest.topology,
        num_classes: manifest.num_classes,
        num_frames: manifest.num_frames,
        class_names: manifest.class_names,
        train,
        test,
    })
}
