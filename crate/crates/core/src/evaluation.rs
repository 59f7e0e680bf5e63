//! Perturbation metrics, batch attack/defense/transfer evaluation, and
//! certified-accuracy curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{admm_attack, cw_attack, AttackConfig, AttackResult};
use crate::constraints::all_violations;
use crate::error::{Error, Result};
use crate::geometry;
use crate::model::{Classifier, LossMode, LossSpec};
use crate::sequence::SkeletonSequence;
use crate::smoothing::{certify, CertificationResult, SmoothingConfig};
use crate::topology::SkeletonTopology;

/// Perturbation size in the four units reported by the attack tables:
/// mean relative bone-length change, mean joint-angle-change bound, relative
/// kinetic-energy change, and the l2 distance over perturbable coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub delta_bone_rel: f64,
    pub delta_joint: f64,
    pub delta_kinetic_rel: f64,
    pub l2: f64,
    pub success: bool,
}

impl AttackMetrics {
    pub fn zero() -> Self {
        Self {
            delta_bone_rel: 0.0,
            delta_joint: 0.0,
            delta_kinetic_rel: 0.0,
            l2: 0.0,
            success: false,
        }
    }
}

/// Computes the metric suite between an original and a perturbed sequence.
/// Means run over valid frames only; `l2` covers perturbable coordinates
/// (valid frames, actor-mask joints). The `success` flag is left `false` for
/// the caller to fill in.
pub fn attack_metrics(
    orig: &SkeletonSequence,
    adv: &SkeletonSequence,
    topo: &SkeletonTopology,
) -> Result<AttackMetrics> {
    if !orig.same_shape(adv) {
        return Err(Error::contract("attack_metrics: shape mismatch"));
    }
    let b_orig = geometry::bone_lengths(orig, topo)?;
    let b_adv = geometry::bone_lengths(adv, topo)?;
    let mut bone_sum = 0.0;
    let mut bone_n = 0usize;
    for t in orig.valid_frames() {
        for i in 0..topo.num_bones() {
            let b = b_orig[[t, i]];
            if b <= 0.0 {
                return Err(Error::Geometry(format!(
                    "zero original bone length at frame {t}, bone {i}"
                )));
            }
            bone_sum += (b_adv[[t, i]] - b).abs() / b;
            bone_n += 1;
        }
    }

    let j = geometry::joint_angle_change_bound(orig, adv, topo)?;
    let mut joint_sum = 0.0;
    let mut joint_n = 0usize;
    for t in orig.valid_frames() {
        for k in 0..topo.num_angle_triples() {
            joint_sum += j[[t, k]];
            joint_n += 1;
        }
    }

    let delta_kinetic_rel = if orig.num_frames() >= 2 {
        let k_orig = geometry::kinetic_energy(orig)?;
        let k_adv = geometry::kinetic_energy(adv)?;
        (k_adv - k_orig).abs() / k_orig.max(1e-12)
    } else {
        0.0
    };

    let mut l2_sq = 0.0;
    for t in orig.valid_frames() {
        for joint in 0..orig.num_joints() {
            if !orig.joint_perturbable(joint) {
                continue;
            }
            for a in 0..3 {
                let d = adv.coords()[[t, joint, a]] - orig.coords()[[t, joint, a]];
                l2_sq += d * d;
            }
        }
    }

    Ok(AttackMetrics {
        delta_bone_rel: if bone_n > 0 { bone_sum / bone_n as f64 } else { 0.0 },
        delta_joint: if joint_n > 0 { joint_sum / joint_n as f64 } else { 0.0 },
        delta_kinetic_rel,
        l2: l2_sq.sqrt(),
        success: false,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceRow {
    pub index: usize,
    pub label: usize,
    pub target_label: Option<usize>,
    pub predicted: usize,
    pub success: bool,
    pub delta_bone_rel: f64,
    pub delta_joint: f64,
    pub delta_kinetic_rel: f64,
    pub l2: f64,
    pub iterations: usize,
    pub max_bone_residual: f64,
    pub max_joint_residual: f64,
    pub max_speed_residual: f64,
}

/// Batch means; key names are part of the report schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub success_rate: f64,
    pub delta_bone_rel_mean: f64,
    pub delta_joint_mean: f64,
    pub delta_kinetic_rel_mean: f64,
    pub l2_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentStamp {
    pub seed: u64,
    pub crate_version: String,
    pub format_version: u32,
}

impl EnvironmentStamp {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            format_version: crate::dataio::FILE_FORMAT_VERSION,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<SequenceRow>,
    /// `None` for an empty batch: the means are undefined.
    pub aggregates: Option<Aggregates>,
    pub config: serde_json::Value,
    pub environment: EnvironmentStamp,
}

/// Aggregates recomputed from rows in input order.
pub fn aggregate_rows(rows: &[SequenceRow]) -> Option<Aggregates> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(Aggregates {
        success_rate: rows.iter().filter(|r| r.success).count() as f64 / n,
        delta_bone_rel_mean: rows.iter().map(|r| r.delta_bone_rel).sum::<f64>() / n,
        delta_joint_mean: rows.iter().map(|r| r.delta_joint).sum::<f64>() / n,
        delta_kinetic_rel_mean: rows.iter().map(|r| r.delta_kinetic_rel).sum::<f64>() / n,
        l2_mean: rows.iter().map(|r| r.l2).sum::<f64>() / n,
    })
}

impl EvaluationReport {
    /// Fixed-width human-readable table alongside the JSON document.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "index label target pred success  dB/B      dJ        dK/K      l2        iters\n",
        );
        for r in &self.rows {
            let target = r
                .target_label
                .map(|t| t.to_string())
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<5} {:<5} {:<6} {:<4} {:<7}  {:<9.6} {:<9.6} {:<9.6} {:<9.6} {}\n",
                r.index, r.label, target, r.predicted, r.success, r.delta_bone_rel, r.delta_joint,
                r.delta_kinetic_rel, r.l2, r.iterations
            ));
        }
        match &self.aggregates {
            Some(a) => out.push_str(&format!(
                "\nsuccess_rate {:.4}  delta_bone_rel_mean {:.6}  delta_joint_mean {:.6}  \
                 delta_kinetic_rel_mean {:.6}  l2_mean {:.6}\n",
                a.success_rate,
                a.delta_bone_rel_mean,
                a.delta_joint_mean,
                a.delta_kinetic_rel_mean,
                a.l2_mean
            )),
            None => out.push_str("\n(empty batch; aggregates undefined)\n"),
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Batch attack evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Admm,
    Cw,
}

/// How per-sequence attack goals are derived from a batch request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalRule {
    Untargeted,
    /// Fixed target class; sequences already labeled with it are skipped.
    TargetedFixed(usize),
    /// Per-sequence uniformly random target different from the label.
    TargetedRandom,
}

impl GoalRule {
    /// Builds the per-sequence loss spec; `None` means the sequence is not
    /// attackable under this rule (its label equals the fixed target).
    fn instantiate(
        &self,
        template: &LossSpec,
        label: usize,
        num_classes: usize,
        seed: u64,
        index: usize,
    ) -> Option<LossSpec> {
        match *self {
            GoalRule::Untargeted => Some(LossSpec::untargeted(label, template.conf)),
            GoalRule::TargetedFixed(target) => {
                if target == label {
                    None
                } else {
                    Some(targeted_with_mode(template, label, target))
                }
            }
            GoalRule::TargetedRandom => {
                use rand::prelude::*;
                let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream(2000 + index as u64);
                let offset = rng.random_range(1..num_classes);
                let target = (label + offset) % num_classes;
                Some(targeted_with_mode(template, label, target))
            }
        }
    }
}

fn targeted_with_mode(template: &LossSpec, label: usize, target: usize) -> LossSpec {
    match template.mode {
        LossMode::TargetedCrossEntropy => LossSpec::targeted_cross_entropy(label, target),
        _ => LossSpec::targeted(label, target, template.conf),
    }
}

/// Runs `f` over `0..n` on a pool of `jobs` threads (or rayon's default),
/// returning results in input order so the merge is deterministic.
pub(crate) fn run_indexed<T, F>(jobs: Option<usize>, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    match jobs {
        Some(1) => (0..n).map(f).collect(),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| (0..n).into_par_iter().map(|i| f(i)).collect())
        }
        None => (0..n).into_par_iter().map(|i| f(i)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct AttackEvaluation {
    pub report: EvaluationReport,
    /// Per-row attack results in row order (skipped sequences absent).
    pub results: Vec<AttackResult>,
}

/// Attacks every sequence of the batch and aggregates the metric suite.
pub fn evaluate_attack<C: Classifier + Sync>(
    model: &C,
    topo: &SkeletonTopology,
    sequences: &[SkeletonSequence],
    base_cfg: &AttackConfig,
    method: AttackMethod,
    goal: GoalRule,
    jobs: Option<usize>,
) -> Result<AttackEvaluation> {
    let num_classes = model.num_classes();
    let planned: Vec<(usize, LossSpec)> = sequences
        .iter()
        .enumerate()
        .filter_map(|(i, seq)| {
            goal.instantiate(&base_cfg.loss, seq.label(), num_classes, base_cfg.seed, i)
                .map(|spec| (i, spec))
        })
        .collect();

    let outcomes = run_indexed(jobs, planned.len(), |k| {
        let (i, spec) = planned[k];
        let mut cfg = base_cfg.clone();
        cfg.loss = spec;
        let result = match method {
            AttackMethod::Admm => admm_attack(model, topo, &sequences[i], &cfg),
            AttackMethod::Cw => cw_attack(model, topo, &sequences[i], &cfg),
        }?;
        let v = all_violations(&sequences[i], &result.adversarial, topo, &cfg.constraints)?;
        let row = SequenceRow {
            index: i,
            label: sequences[i].label(),
            target_label: spec.target_label,
            predicted: result.predicted,
            success: result.success,
            delta_bone_rel: result.metrics.delta_bone_rel,
            delta_joint: result.metrics.delta_joint,
            delta_kinetic_rel: result.metrics.delta_kinetic_rel,
            l2: result.metrics.l2,
            iterations: result.iterations,
            max_bone_residual: v.max_bone(),
            max_joint_residual: v.max_joint(),
            max_speed_residual: v.max_speed(),
        };
        Ok((row, result))
    })?;

    let mut rows = Vec::with_capacity(outcomes.len());
    let mut results = Vec::with_capacity(outcomes.len());
    for (row, result) in outcomes {
        rows.push(row);
        results.push(result);
    }
    let aggregates = aggregate_rows(&rows);
    let config = serde_json::json!({
        "method": method,
        "beta": base_cfg.beta,
        "outer_iters": base_cfg.outer_iters,
        "inner_steps": base_cfg.inner_steps,
        "learning_rate": base_cfg.adam.learning_rate,
        "eps_bone": base_cfg.constraints.eps_bone,
        "eps_joint": base_cfg.constraints.eps_joint,
        "eps_speed": base_cfg.constraints.eps_speed,
        "conf": base_cfg.loss.conf,
        "cw_tradeoff": base_cfg.cw_tradeoff,
    });
    Ok(AttackEvaluation {
        report: EvaluationReport {
            rows,
            aggregates,
            config,
            environment: EnvironmentStamp::new(base_cfg.seed),
        },
        results,
    })
}

// ---------------------------------------------------------------------------
// Transfer evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    /// Fraction of adversarial sequences that also fool the target model
    /// under their original goals.
    pub transfer_rate: f64,
    pub transferred: usize,
    pub total: usize,
}

pub fn evaluate_transfer<C: Classifier>(
    source_results: &[AttackResult],
    target_model: &C,
) -> Result<TransferOutcome> {
    if source_results.is_empty() {
        return Err(Error::contract("transfer evaluation needs adversarial sequences"));
    }
    let mut transferred = 0usize;
    for result in source_results {
        result.loss_spec.validate(target_model.num_classes())?;
        let logits = target_model.forward(&result.adversarial)?;
        if result.loss_spec.goal_satisfied(&logits) {
            transferred += 1;
        }
    }
    Ok(TransferOutcome {
        transfer_rate: transferred as f64 / source_results.len() as f64,
        transferred,
        total: source_results.len(),
    })
}

// ---------------------------------------------------------------------------
// Certified-accuracy curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationRow {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub pa_lower: f64,
    pub pb_upper: f64,
    pub radius: f64,
    pub abstained: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifiedCurve {
    pub sigma: f64,
    pub radii: Vec<f64>,
    /// certified_accuracy[i] = fraction of sequences certified correct with
    /// radius >= radii[i].
    pub certified_accuracy: Vec<f64>,
    pub rows: Vec<CertificationRow>,
}

/// Certifies the batch at each noise level and tabulates certified accuracy
/// over the radius grid.
pub fn evaluate_certified<C: Classifier + Sync>(
    model: &C,
    sequences: &[SkeletonSequence],
    base_cfg: &SmoothingConfig,
    sigmas: &[f64],
    radii: &[f64],
    jobs: Option<usize>,
) -> Result<Vec<CertifiedCurve>> {
    let mut curves = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let results: Vec<(CertificationResult, usize)> =
            run_indexed(jobs, sequences.len(), |i| {
                let mut cfg = base_cfg.clone();
                cfg.sigma = sigma;
                // Distinct noise per sequence, still fully derived from the seed.
                cfg.seed = derive_seed(base_cfg.seed, i as u64);
                let r = certify(model, &sequences[i], &cfg, sequences[i].label())?;
                Ok((r, sequences[i].label()))
            })?;
        let rows: Vec<CertificationRow> = results
            .iter()
            .enumerate()
            .map(|(i, (r, label))| CertificationRow {
                index: i,
                label: *label,
                predicted: r.predicted,
                pa_lower: r.pa_lower,
                pb_upper: r.pb_upper,
                radius: r.radius,
                abstained: r.abstained,
            })
            .collect();
        let n = rows.len().max(1) as f64;
        let certified_accuracy = radii
            .iter()
            .map(|&r| {
                rows.iter()
                    .filter(|row| !row.abstained && row.predicted == row.label && row.radius >= r)
                    .count() as f64
                    / n
            })
            .collect();
        curves.push(CertifiedCurve {
            sigma,
            radii: radii.to_vec(),
            certified_accuracy,
            rows,
        });
    }
    Ok(curves)
}

/// SplitMix64 scramble for deriving per-item seeds from a master seed.
pub(crate) fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
