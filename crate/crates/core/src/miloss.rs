//! Dependency losses between one latent dimension and a binary label.
//!
//! For every sample `z` with label `s_z`, the conditional density `p(z|s_z)`
//! is estimated in the same-label half of the batch and the marginal `p(z)`
//! in the whole batch, with the neighbor rank scaled by the set-size ratio.
//! Neighbor identities are found once per evaluation from the current values
//! and held fixed, so gradients flow through the distances only.

use thiserror::Error;

use crate::density::{scaled_m, DensityError, SampleSet, SmoothingSpec, EPS_FLOOR};
use crate::diffnet::Var;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("latent batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Latent values of one dimension with their ±1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    z: Vec<f64>,
    s: Vec<i8>,
}

impl LatentBatch {
    /// Requires equal lengths, labels in {-1, +1}, and equal label counts.
    pub fn new(z: Vec<f64>, s: Vec<i8>) -> Result<Self, LossError> {
        if z.len() != s.len() {
            return Err(LossError::Batch(format!("{} values but {} labels", z.len(), s.len())));
        }
        if let Some(bad) = s.iter().find(|&&l| l != 1 && l != -1) {
            return Err(LossError::Batch(format!("label {bad} is not ±1")));
        }
        let pos = s.iter().filter(|&&l| l == 1).count();
        let neg = s.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(LossError::Batch("both labels must be present".into()));
        }
        if pos != neg {
            return Err(LossError::Batch(format!("unbalanced labels: {pos} vs {neg}")));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(LossError::Batch("non-finite latent value".into()));
        }
        Ok(Self { z, s })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn s(&self) -> &[i8] {
        &self.s
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Same labels, new values.
    pub fn with_values(&self, z: Vec<f64>) -> Result<Self, LossError> {
        Self::new(z, self.s.clone())
    }
}

/// Which objective a latent encoder is currently trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPhase {
    /// `(p(z|s) − p(z))²`
    SqDiff,
    /// `(1 − p(z|s)/p(z))²`
    SqRatio,
    /// `log p(z|s)/p(z)`, used for reporting only.
    LogRatio,
}

impl LossPhase {
    pub fn name(self) -> &'static str {
        match self {
            LossPhase::SqDiff => "sq_diff",
            LossPhase::SqRatio => "sq_ratio",
            LossPhase::LogRatio => "log_ratio",
        }
    }
}

/// Thresholds of the squared-difference → squared-ratio curriculum.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSchedule {
    /// Leave `SqDiff` once the trailing mean falls below this.
    pub switch_threshold_sqdiff: f64,
    /// `SqRatio` training counts as converged below this trailing mean.
    pub switch_threshold_sqratio: f64,
    /// Trailing-mean window length.
    pub window: usize,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self { switch_threshold_sqdiff: 1e-3, switch_threshold_sqratio: 1e-3, window: 10 }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.switch_threshold_sqdiff > 0.0) || !(self.switch_threshold_sqratio > 0.0) {
            return Err("phase thresholds must be positive".into());
        }
        if self.window == 0 {
            return Err("phase window must be positive".into());
        }
        Ok(())
    }

    fn trailing_mean(&self, history: &[f64]) -> f64 {
        let tail = &history[history.len().saturating_sub(self.window)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// True once the trailing `SqRatio` loss is below its threshold.
    pub fn converged(&self, history: &[f64]) -> bool {
        !history.is_empty() && self.trailing_mean(history) < self.switch_threshold_sqratio
    }
}

/// Next phase given the losses recorded in the current one. `SqRatio` is
/// terminal; `LogRatio` is never entered by training.
pub fn select_phase(history: &[f64], phase: LossPhase, schedule: &PhaseSchedule) -> LossPhase {
    assert!(!history.is_empty(), "select_phase needs at least one loss value");
    match phase {
        LossPhase::SqDiff if schedule.trailing_mean(history) < schedule.switch_threshold_sqdiff => {
            LossPhase::SqRatio
        }
        other => other,
    }
}

/// Frozen neighbor assignment for one batch.
struct Term {
    /// `m / N` of the set this term estimates in.
    mass: f64,
    /// `(weight, neighbor index per sample)` for each window tap.
    taps: Vec<(f64, Vec<usize>)>,
}

struct NeighborPlan {
    n: usize,
    conditional: Vec<Term>,
    marginal: Vec<Term>,
}

impl NeighborPlan {
    fn build(batch: &LatentBatch, spec: &SmoothingSpec) -> Result<Self, LossError> {
        let n = batch.len();
        let full = SampleSet::new(&batch.z)?;
        // Per label: the batch indices in that group and its sample set.
        let groups: Vec<(Vec<usize>, SampleSet)> = [-1i8, 1]
            .iter()
            .map(|&label| {
                let idx: Vec<usize> = (0..n).filter(|&i| batch.s[i] == label).collect();
                let vals: Vec<f64> = idx.iter().map(|&i| batch.z[i]).collect();
                SampleSet::new(&vals).map(|set| (idx, set))
            })
            .collect::<Result<_, _>>()?;
        // Position of each sample inside its own label group.
        let mut local = vec![0usize; n];
        for (idx, _) in &groups {
            for (k, &i) in idx.iter().enumerate() {
                local[i] = k;
            }
        }
        let group_of = |i: usize| usize::from(batch.s[i] == 1);

        let n_q = groups[0].0.len();
        let scale = n as f64 / n_q as f64;
        let check = |rank: i64, available: usize| {
            if rank < 1 || rank as usize > available {
                Err(DensityError::RankOutOfRange { rank, available })
            } else {
                Ok(rank as usize)
            }
        };

        let mut conditional = Vec::new();
        let mut marginal = Vec::new();
        for &m in spec.m_values() {
            let mut taps = Vec::new();
            for (rank, w) in spec.taps(m) {
                let rank = check(rank, n_q - 1)?;
                let nbr = (0..n)
                    .map(|i| {
                        let (idx, set) = &groups[group_of(i)];
                        idx[set.neighbor_of_member(local[i], rank)]
                    })
                    .collect();
                taps.push((w, nbr));
            }
            conditional.push(Term { mass: m as f64 / n_q as f64, taps });

            let mp = scaled_m(m, scale);
            let mut taps = Vec::new();
            for (rank, w) in spec.scaled_taps(m, scale) {
                let rank = check(rank, n - 1)?;
                let nbr = (0..n).map(|i| full.neighbor_of_member(i, rank)).collect();
                taps.push((w, nbr));
            }
            marginal.push(Term { mass: mp as f64 / n as f64, taps });
        }
        Ok(Self { n, conditional, marginal })
    }

    /// Per-sample densities for one side; also counts clamped radii.
    fn densities(&self, terms: &[Term], z: &[f64], clamped: &mut usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for term in terms {
            let mut eps = vec![0.0; self.n];
            for (w, nbr) in &term.taps {
                for i in 0..self.n {
                    eps[i] += w * (z[i] - z[nbr[i]]).abs();
                }
            }
            for i in 0..self.n {
                let e = if eps[i] < EPS_FLOOR {
                    *clamped += 1;
                    EPS_FLOOR
                } else {
                    eps[i]
                };
                out[i] += term.mass / (2.0 * e);
            }
        }
        let k = terms.len() as f64;
        out.iter_mut().for_each(|d| *d /= k);
        out
    }

    fn densities_var<'t>(&self, terms: &[Term], z: Var<'t>) -> Var<'t> {
        let own = z.gather((0..self.n).collect());
        let mut total: Option<Var<'t>> = None;
        for term in terms {
            let mut eps: Option<Var<'t>> = None;
            for (w, nbr) in &term.taps {
                let d = (own - z.gather(nbr.clone())).abs().scale(*w);
                eps = Some(match eps {
                    Some(e) => e + d,
                    None => d,
                });
            }
            let dens = eps.expect("at least one tap").clamp_min(EPS_FLOOR).recip().scale(term.mass / 2.0);
            total = Some(match total {
                Some(t) => t + dens,
                None => dens,
            });
        }
        total.expect("at least one M value").scale(1.0 / terms.len() as f64)
    }
}

/// A recorded scalar loss and the number of radii clamped while building it.
pub struct DependencyLoss<'t> {
    pub value: Var<'t>,
    pub clamped: usize,
}

/// Plain-valued estimate with its clamp count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    pub value: f64,
    pub clamped: usize,
}

fn plan_and_count(batch: &LatentBatch, spec: &SmoothingSpec) -> Result<(NeighborPlan, usize), LossError> {
    let plan = NeighborPlan::build(batch, spec)?;
    let mut clamped = 0;
    plan.densities(&plan.conditional, &batch.z, &mut clamped);
    plan.densities(&plan.marginal, &batch.z, &mut clamped);
    Ok((plan, clamped))
}

fn check_var(batch: &LatentBatch, z: Var<'_>) -> Result<(), LossError> {
    let v = z.value();
    if v.len() != batch.len() {
        return Err(LossError::Batch(format!("recorded latent has {} values, batch {}", v.len(), batch.len())));
    }
    if v.data() != batch.z.as_slice() {
        return Err(LossError::Batch("recorded latent values differ from the batch".into()));
    }
    Ok(())
}

/// Mutual information between the latent and the label, up to the constant
/// `p(s)` factor: the batch mean of `log p(z|s_z)/p(z)`.
pub fn mi_estimate(batch: &LatentBatch, spec: &SmoothingSpec) -> Result<MiEstimate, LossError> {
    let plan = NeighborPlan::build(batch, spec)?;
    let mut clamped = 0;
    let cond = plan.densities(&plan.conditional, &batch.z, &mut clamped);
    let marg = plan.densities(&plan.marginal, &batch.z, &mut clamped);
    let total: f64 = cond.iter().zip(&marg).map(|(q, p)| (q / p).ln()).sum();
    Ok(MiEstimate { value: total / batch.len() as f64, clamped })
}

/// `mean (p(z|s) − p(z))²` recorded on `z`'s tape. `z` must hold the batch's
/// values.
pub fn loss_sq_diff<'t>(
    batch: &LatentBatch,
    z: Var<'t>,
    spec: &SmoothingSpec,
) -> Result<DependencyLoss<'t>, LossError> {
    check_var(batch, z)?;
    let (plan, clamped) = plan_and_count(batch, spec)?;
    let cond = plan.densities_var(&plan.conditional, z);
    let marg = plan.densities_var(&plan.marginal, z);
    Ok(DependencyLoss { value: (cond - marg).square().mean(), clamped })
}

/// `mean (1 − p(z|s)/p(z))²` recorded on `z`'s tape.
pub fn loss_sq_ratio<'t>(
    batch: &LatentBatch,
    z: Var<'t>,
    spec: &SmoothingSpec,
) -> Result<DependencyLoss<'t>, LossError> {
    check_var(batch, z)?;
    let (plan, clamped) = plan_and_count(batch, spec)?;
    let cond = plan.densities_var(&plan.conditional, z);
    let marg = plan.densities_var(&plan.marginal, z);
    Ok(DependencyLoss { value: (cond / marg).add_scalar(-1.0).square().mean(), clamped })
}

/// Phase-selected training loss.
pub fn phase_loss<'t>(
    phase: LossPhase,
    batch: &LatentBatch,
    z: Var<'t>,
    spec: &SmoothingSpec,
) -> Result<DependencyLoss<'t>, LossError> {
    match phase {
        LossPhase::SqDiff => loss_sq_diff(batch, z, spec),
        LossPhase::SqRatio => loss_sq_ratio(batch, z, spec),
        LossPhase::LogRatio => panic!("the log-ratio objective is evaluation only"),
    }
}

/// Plain value of a phase loss, for reporting.
pub fn loss_value(phase: LossPhase, batch: &LatentBatch, spec: &SmoothingSpec) -> Result<f64, LossError> {
    Ok(FrozenNeighbors::new(batch, spec)?.loss_at(phase, &batch.z))
}

/// A batch's neighbor assignment, held fixed while its values move. The
/// recorded losses differentiate exactly this function.
pub struct FrozenNeighbors {
    plan: NeighborPlan,
}

impl FrozenNeighbors {
    pub fn new(batch: &LatentBatch, spec: &SmoothingSpec) -> Result<Self, LossError> {
        Ok(Self { plan: NeighborPlan::build(batch, spec)? })
    }

    /// Phase loss at values `z` (one per batch sample) under the frozen
    /// assignment.
    pub fn loss_at(&self, phase: LossPhase, z: &[f64]) -> f64 {
        assert_eq!(z.len(), self.plan.n, "one value per batch sample");
        let mut clamped = 0;
        let cond = self.plan.densities(&self.plan.conditional, z, &mut clamped);
        let marg = self.plan.densities(&self.plan.marginal, z, &mut clamped);
        let n = z.len() as f64;
        let pairs = cond.iter().zip(&marg);
        match phase {
            LossPhase::SqDiff => pairs.map(|(q, p)| (q - p).powi(2)).sum::<f64>() / n,
            LossPhase::SqRatio => pairs.map(|(q, p)| (q / p - 1.0).powi(2)).sum::<f64>() / n,
            LossPhase::LogRatio => pairs.map(|(q, p)| (q / p).ln()).sum::<f64>() / n,
        }
    }
}

/// Mean of [`mi_estimate`] over independent latents of `n` samples with
/// balanced random labels: the estimator's offset at independence for this
/// spec and batch size. Simulated from uniform points with a fixed seed, so
/// the value is deterministic.
pub fn null_offset(spec: &SmoothingSpec, n: usize) -> Result<f64, LossError> {
    use rand::{Rng, SeedableRng};
    let n = n - n % 2;
    let reps = (100_000 / n.max(1)).clamp(4, 64);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6e75_6c6c);
    let s: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { -1 } else { 1 }).collect();
    let mut total = 0.0;
    for _ in 0..reps {
        let z: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        total += mi_estimate(&LatentBatch::new(z, s.clone())?, spec)?.value;
    }
    Ok(total / reps as f64)
}

/// [`mi_estimate`] minus [`null_offset`] for the batch size.
pub fn mi_estimate_centered(batch: &LatentBatch, spec: &SmoothingSpec) -> Result<MiEstimate, LossError> {
    let raw = mi_estimate(batch, spec)?;
    Ok(MiEstimate { value: raw.value - null_offset(spec, batch.len())?, clamped: raw.clamped })
}

/// Sum of per-dimension estimates; an upper bound on the joint mutual
/// information when the dimensions are independent.
pub fn mi_upper_bound(latents: &[LatentBatch], spec: &SmoothingSpec) -> Result<f64, LossError> {
    let Some(first) = latents.first() else { return Ok(0.0) };
    let mut total = 0.0;
    for (d, batch) in latents.iter().enumerate() {
        if batch.s != first.s {
            return Err(LossError::Batch(format!("dimension {d} has a different label vector")));
        }
        total += mi_estimate(batch, spec)?.value;
    }
    Ok(total)
}
