//! Nearest-neighbor density and density-ratio estimation on the real line.
//!
//! The density at `z` is estimated from the distance `ε(z, M)` to its `M`-th
//! nearest neighbor: `p(z) ≈ (M/N) / (2·ε(z, M))`, where 2 is the length of
//! the one-dimensional unit ball. Ratios of two such estimates only need the
//! radii, because the ball constant cancels.
//!
//! Radii are smoothed over the ranks `M-2..=M+2` with fixed weights and
//! densities are averaged over a list of `M` values.

use thiserror::Error;

/// Radii below this are clamped and reported.
pub const EPS_FLOOR: f64 = 1e-9;

/// Rank offsets of the smoothing window.
pub const WINDOW_OFFSETS: [i64; 5] = [-2, -1, 0, 1, 2];

/// Length of the one-dimensional unit ball.
const UNIT_BALL_1D: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("sample set is empty")]
    EmptySet,
    #[error("sample set contains a non-finite value")]
    NonFinite,
    #[error("neighbor rank {rank} out of range 1..={available}")]
    RankOutOfRange { rank: i64, available: usize },
    #[error("query {0} is not a member of the set it should be excluded from")]
    NotAMember(f64),
    #[error("invalid smoothing spec: {0}")]
    Smoothing(String),
}

/// A value together with whether any radius had to be clamped to [`EPS_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub clamped: bool,
}

/// Where the query point sits relative to the two sets of a ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    /// The query belongs to neither set.
    External,
    /// The query is one of the `q` samples only.
    InQ,
    /// The query is a `q` sample and `q ⊆ p`.
    InBoth,
}

impl Membership {
    fn in_p(self) -> bool {
        matches!(self, Membership::InBoth)
    }

    fn in_q(self) -> bool {
        !matches!(self, Membership::External)
    }
}

/// One-dimensional samples, kept sorted for neighbor walks.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    sorted: Vec<f64>,
    /// `order[k]` is the caller's index of `sorted[k]`.
    order: Vec<usize>,
    /// `position[i]` is where the caller's sample `i` landed in `sorted`.
    position: Vec<usize>,
}

impl SampleSet {
    pub fn new(points: &[f64]) -> Result<Self, DensityError> {
        if points.is_empty() {
            return Err(DensityError::EmptySet);
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(DensityError::NonFinite);
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].total_cmp(&points[b]).then(a.cmp(&b)));
        let sorted = order.iter().map(|&i| points[i]).collect();
        let mut position = vec![0; points.len()];
        for (k, &i) in order.iter().enumerate() {
            position[i] = k;
        }
        Ok(Self { sorted, order, position })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// The samples in the caller's original order.
    pub fn points(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (k, &i) in self.order.iter().enumerate() {
            out[i] = self.sorted[k];
        }
        out
    }

    /// Sorted position of some sample equal to `z`.
    fn member_position(&self, z: f64) -> Result<usize, DensityError> {
        let p = self.sorted.partition_point(|&v| v < z);
        if p < self.len() && self.sorted[p] == z {
            Ok(p)
        } else {
            Err(DensityError::NotAMember(z))
        }
    }

    fn available(&self, exclude_self: bool) -> usize {
        self.len() - usize::from(exclude_self)
    }

    /// Walks outward from `z` and returns the `k`-th nearest sample (1-based)
    /// as `(caller index, distance)`. `skip` is a sorted position to ignore.
    /// Equal distances resolve toward the lower side.
    fn walk(&self, z: f64, k: usize, skip: Option<usize>) -> (usize, f64) {
        let n = self.len();
        let start = match skip {
            Some(p) => p,
            None => self.sorted.partition_point(|&v| v < z),
        };
        let mut lo = start as isize - 1;
        let mut hi = match skip {
            Some(p) => p + 1,
            None => start,
        };
        let mut found = (usize::MAX, f64::NAN);
        for _ in 0..k {
            let dl = if lo >= 0 { z - self.sorted[lo as usize] } else { f64::INFINITY };
            let dh = if hi < n { self.sorted[hi] - z } else { f64::INFINITY };
            if dl <= dh {
                found = (lo as usize, dl);
                lo -= 1;
            } else {
                found = (hi, dh);
                hi += 1;
            }
        }
        (self.order[found.0], found.1)
    }

    /// `k`-th nearest other sample of the caller's sample `i`.
    pub(crate) fn neighbor_of_member(&self, i: usize, k: usize) -> usize {
        let p = self.position[i];
        self.walk(self.sorted[p], k, Some(p)).0
    }

    fn radius(&self, z: f64, rank: i64, exclude_self: bool) -> Result<f64, DensityError> {
        let available = self.available(exclude_self);
        if rank < 1 || rank as usize > available {
            return Err(DensityError::RankOutOfRange { rank, available });
        }
        let skip = if exclude_self { Some(self.member_position(z)?) } else { None };
        Ok(self.walk(z, rank as usize, skip).1)
    }
}

/// Smoothing window weights over `M-2..=M+2` and the list of `M` values
/// whose density estimates are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingSpec {
    weights: [f64; 5],
    m_values: Vec<usize>,
}

impl Default for SmoothingSpec {
    fn default() -> Self {
        Self::gaussian(1.0, vec![5, 10, 20]).expect("default smoothing is valid")
    }
}

impl SmoothingSpec {
    pub fn new(weights: [f64; 5], m_values: Vec<usize>) -> Result<Self, DensityError> {
        let bad = |msg: String| Err(DensityError::Smoothing(msg));
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad(format!("weights must be finite and non-negative, got {weights:?}"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("weights sum to {total}, not 1"));
        }
        if m_values.is_empty() {
            return bad("at least one M value is required".into());
        }
        let spec = Self { weights, m_values };
        let lowest = spec.m_values.iter().map(|&m| spec.lowest_rank(m)).min().unwrap();
        if lowest < 1 {
            return bad(format!("window reaches rank {lowest}; every rank must be at least 1"));
        }
        Ok(spec)
    }

    /// Normalized Gaussian weights with standard deviation `sigma` over the
    /// window offsets.
    pub fn gaussian(sigma: f64, m_values: Vec<usize>) -> Result<Self, DensityError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(DensityError::Smoothing(format!("sigma must be positive, got {sigma}")));
        }
        let raw = WINDOW_OFFSETS.map(|o| (-(o as f64).powi(2) / (2.0 * sigma * sigma)).exp());
        let total: f64 = raw.iter().sum();
        Self::new(raw.map(|w| w / total), m_values)
    }

    /// Only the `M`-th neighbor contributes.
    pub fn unsmoothed(m_values: Vec<usize>) -> Result<Self, DensityError> {
        Self::new([0.0, 0.0, 1.0, 0.0, 0.0], m_values)
    }

    pub fn weights(&self) -> &[f64; 5] {
        &self.weights
    }

    pub fn m_values(&self) -> &[usize] {
        &self.m_values
    }

    /// Same weights, different `M` list.
    pub fn with_m_values(&self, m_values: Vec<usize>) -> Result<Self, DensityError> {
        Self::new(self.weights, m_values)
    }

    /// `(rank, weight)` pairs with non-zero weight around `m`.
    pub(crate) fn taps(&self, m: usize) -> impl Iterator<Item = (i64, f64)> + '_ {
        WINDOW_OFFSETS
            .iter()
            .zip(self.weights)
            .filter(|(_, w)| *w > 0.0)
            .map(move |(o, w)| (m as i64 + o, w))
    }

    /// Taps for the set-size-scaled window: every rank `m + offset` is
    /// multiplied by `scale` and rounded, so the window covers the same
    /// probability mass in a set `scale` times larger.
    pub(crate) fn scaled_taps(&self, m: usize, scale: f64) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.taps(m).map(move |(r, w)| (scaled_m(r.max(1) as usize, scale) as i64, w))
    }

    fn lowest_rank(&self, m: usize) -> i64 {
        self.taps(m).map(|(r, _)| r).min().unwrap_or(m as i64)
    }

    /// Largest rank any tap reaches for an `M` scaled by `scale`.
    pub fn highest_rank(&self, scale: f64) -> i64 {
        self.m_values
            .iter()
            .flat_map(|&m| self.scaled_taps(m, scale).map(|(r, _)| r))
            .max()
            .unwrap_or(0)
    }
}

/// `round(scale · m)`, at least 1.
pub fn scaled_m(m: usize, scale: f64) -> usize {
    ((scale * m as f64).round() as usize).max(1)
}

/// Distance from `z` to its `m`-th nearest point in `set`, computed by order
/// statistic selection over all distances. With `exclude_self`, one
/// zero-distance match (the query itself) is dropped first.
pub fn epsilon(z: f64, set: &SampleSet, m: usize, exclude_self: bool) -> Result<f64, DensityError> {
    let mut dist: Vec<f64> = set.sorted.iter().map(|p| (z - p).abs()).collect();
    if exclude_self {
        let own = dist.iter().position(|&d| d == 0.0).ok_or(DensityError::NotAMember(z))?;
        dist.swap_remove(own);
    }
    if m < 1 || m > dist.len() {
        return Err(DensityError::RankOutOfRange { rank: m as i64, available: dist.len() });
    }
    let (_, nth, _) = dist.select_nth_unstable_by(m - 1, f64::total_cmp);
    Ok(*nth)
}

/// Window-weighted radius `Σ_k w_k · ε(z, m + offset_k)`.
pub fn epsilon_smoothed(
    z: f64,
    set: &SampleSet,
    spec: &SmoothingSpec,
    m: usize,
    exclude_self: bool,
) -> Result<f64, DensityError> {
    scaled_radius(z, set, spec, m, 1.0, exclude_self)
}

fn scaled_radius(
    z: f64,
    set: &SampleSet,
    spec: &SmoothingSpec,
    m: usize,
    scale: f64,
    exclude_self: bool,
) -> Result<f64, DensityError> {
    let mut total = 0.0;
    for (rank, w) in spec.scaled_taps(m, scale) {
        total += w * set.radius(z, rank, exclude_self)?;
    }
    Ok(total)
}

fn clamp(eps: f64) -> (f64, bool) {
    if eps < EPS_FLOOR {
        (EPS_FLOOR, true)
    } else {
        (eps, false)
    }
}

/// Density at `z`, averaged over the smoothing spec's `M` values.
pub fn density_at(
    z: f64,
    set: &SampleSet,
    spec: &SmoothingSpec,
    exclude_self: bool,
) -> Result<Estimate, DensityError> {
    let n = set.len() as f64;
    let mut total = 0.0;
    let mut clamped = false;
    for &m in spec.m_values() {
        let (eps, c) = clamp(epsilon_smoothed(z, set, spec, m, exclude_self)?);
        clamped |= c;
        total += (m as f64 / n) / (eps * UNIT_BALL_1D);
    }
    Ok(Estimate { value: total / spec.m_values().len() as f64, clamped })
}

/// Radius ratio `ε_p(z, (N_p/N_q)·m) / ε_q(z, m)`, which estimates
/// `q(z)/p(z)`: the conditional over the marginal when `q` is a same-label
/// subset of `p`. The smoothing window on the `p` side is scaled with `m`.
pub fn density_ratio(
    z: f64,
    p_set: &SampleSet,
    q_set: &SampleSet,
    m: usize,
    spec: &SmoothingSpec,
    membership: Membership,
) -> Result<Estimate, DensityError> {
    let scale = p_set.len() as f64 / q_set.len() as f64;
    let (eps_p, cp) = clamp(scaled_radius(z, p_set, spec, m, scale, membership.in_p())?);
    let (eps_q, cq) = clamp(epsilon_smoothed(z, q_set, spec, m, membership.in_q())?);
    Ok(Estimate { value: eps_p / eps_q, clamped: cp || cq })
}

/// `q(z)/p(z)` with both densities averaged over the smoothing spec's `M` values
/// (`p` at the set-size-scaled `M`). Reduces to [`density_ratio`] for a
/// single `M` when the scaling is exact.
pub fn averaged_density_ratio(
    z: f64,
    p_set: &SampleSet,
    q_set: &SampleSet,
    spec: &SmoothingSpec,
    membership: Membership,
) -> Result<Estimate, DensityError> {
    let (n_p, n_q) = (p_set.len() as f64, q_set.len() as f64);
    let scale = n_p / n_q;
    let (mut dens_p, mut dens_q) = (0.0, 0.0);
    let mut clamped = false;
    for &m in spec.m_values() {
        let mp = scaled_m(m, scale);
        let (eps_p, cp) = clamp(scaled_radius(z, p_set, spec, m, scale, membership.in_p())?);
        let (eps_q, cq) = clamp(epsilon_smoothed(z, q_set, spec, m, membership.in_q())?);
        clamped |= cp || cq;
        dens_p += (mp as f64 / n_p) / eps_p;
        dens_q += (m as f64 / n_q) / eps_q;
    }
    Ok(Estimate { value: dens_q / dens_p, clamped })
}

/// Monte-Carlo estimate of `KL(q ‖ p)` from samples: the mean over the `q`
/// samples of the log density ratio, with each `q` sample excluded from its
/// own neighbor search.
pub fn kl_divergence(
    q_samples: &[f64],
    p_samples: &[f64],
    spec: &SmoothingSpec,
) -> Result<Estimate, DensityError> {
    let q = SampleSet::new(q_samples)?;
    let p = SampleSet::new(p_samples)?;
    let mut total = 0.0;
    let mut clamped = false;
    for &z in q_samples {
        let r = averaged_density_ratio(z, &p, &q, spec, Membership::InQ)?;
        clamped |= r.clamped;
        total += r.value.ln();
    }
    Ok(Estimate { value: total / q_samples.len() as f64, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn set(points: &[f64]) -> SampleSet {
        SampleSet::new(points).unwrap()
    }

    fn normals(n: usize, mean: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| { let e: f64 = StandardNormal.sample(&mut rng); mean + e }).collect()
    }

    #[test]
    fn epsilon_examples() {
        let s = set(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(epsilon(0.0, &s, 2, false).unwrap(), 1.0);
        assert_eq!(epsilon(0.0, &s, 2, true).unwrap(), 2.0);
        assert_eq!(epsilon(5.0, &set(&[5.0]), 1, false).unwrap(), 0.0);
    }

    #[test]
    fn epsilon_rank_range() {
        let s = set(&[0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(epsilon(0.0, &s, 0, false), Err(DensityError::RankOutOfRange { .. })));
        assert!(matches!(epsilon(0.0, &s, 4, true), Err(DensityError::RankOutOfRange { .. })));
        assert!(epsilon(0.0, &s, 4, false).is_ok());
        assert!(matches!(epsilon(0.5, &s, 1, true), Err(DensityError::NotAMember(_))));
    }

    #[test]
    fn epsilon_order_statistic_on_uniform() {
        // Expected M-th neighbor distance of an interior point is about
        // M / (2N) for unit density.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = Uniform::new(0.0, 1.0);
        let pts: Vec<f64> = (0..1000).map(|_| u.sample(&mut rng)).collect();
        let eps = epsilon(0.5, &set(&pts), 10, false).unwrap();
        let oracle = 10.0 / (2.0 * 1000.0);
        assert!((eps - oracle).abs() <= 0.5 * oracle, "eps = {eps}");
    }

    #[test]
    fn smoothed_uniform_window() {
        let s = set(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let spec = SmoothingSpec::new([0.2; 5], vec![3]).unwrap();
        let e = epsilon_smoothed(0.0, &s, &spec, 3, false).unwrap();
        assert!((e - 2.0).abs() < 1e-12);
    }

    #[test]
    fn smoothed_degenerate_window_is_plain_epsilon() {
        let s = set(&[0.3, 1.7, 2.0, 3.1, 4.4, 5.0, 6.9]);
        let spec = SmoothingSpec::unsmoothed(vec![3]).unwrap();
        assert_eq!(
            epsilon_smoothed(0.0, &s, &spec, 3, false).unwrap(),
            epsilon(0.0, &s, 3, false).unwrap()
        );
    }

    #[test]
    fn smoothed_gaussian_window_matches_direct_sum() {
        let pts = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s = set(&pts);
        let spec = SmoothingSpec::gaussian(1.0, vec![3]).unwrap();
        // Direct evaluation: sorted distances from 0 are 0..=6, so rank r
        // sits at distance r - 1.
        let raw: Vec<f64> = (-2..=2).map(|o: i32| (-(o * o) as f64 / 2.0).exp()).collect();
        let norm: f64 = raw.iter().sum();
        let direct: f64 = raw.iter().zip(1..=5).map(|(w, r)| w / norm * (r as f64 - 1.0)).sum();
        let e = epsilon_smoothed(0.0, &s, &spec, 3, false).unwrap();
        assert!((e - direct).abs() < 1e-12, "{e} vs {direct}");
    }

    #[test]
    fn smoothing_spec_validation() {
        assert!(SmoothingSpec::new([0.2; 5], vec![2]).is_err());
        assert!(SmoothingSpec::new([0.2; 5], vec![3]).is_ok());
        assert!(SmoothingSpec::new([0.3; 5], vec![3]).is_err());
        assert!(SmoothingSpec::new([-0.1, 0.3, 0.4, 0.2, 0.2], vec![3]).is_err());
        assert!(SmoothingSpec::new([0.2; 5], vec![]).is_err());
        let w = SmoothingSpec::default().weights().iter().sum::<f64>();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_at_arithmetic() {
        let s = set(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let spec = SmoothingSpec::unsmoothed(vec![2]).unwrap();
        let d = density_at(2.0, &s, &spec, false).unwrap();
        assert!((d.value - 0.2).abs() < 1e-15);
        assert!(!d.clamped);
    }

    #[test]
    fn duplicate_points_are_clamped_and_flagged() {
        let s = set(&[1.0; 8]);
        let spec = SmoothingSpec::unsmoothed(vec![3]).unwrap();
        let d = density_at(1.0, &s, &spec, true).unwrap();
        assert!(d.clamped);
        assert!(d.value.is_finite() && d.value > 0.0);
    }

    #[test]
    fn gaussian_density_at_mode() {
        let pts = normals(10_000, 0.0, 3);
        let spec = SmoothingSpec::gaussian(1.0, vec![10, 20, 40]).unwrap();
        let d = density_at(0.0, &set(&pts), &spec, false).unwrap().value;
        let pdf = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((d - pdf).abs() < 0.1 * pdf, "density {d}");
    }

    #[test]
    fn density_error_shrinks_with_sample_size() {
        // Average absolute error over several draws at the mode.
        let pdf = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let spec = SmoothingSpec::unsmoothed(vec![10]).unwrap();
        let err = |n: usize| {
            (0..20)
                .map(|seed| {
                    let pts = normals(n, 0.0, 100 + seed);
                    (density_at(0.0, &set(&pts), &spec, false).unwrap().value - pdf).abs()
                })
                .sum::<f64>()
                / 20.0
        };
        let (small, large) = (err(2_500), err(10_000));
        assert!(large <= small, "error {small} -> {large}");
    }

    #[test]
    fn identical_sets_give_unit_ratio() {
        let pts = normals(200, 0.0, 5);
        let s = set(&pts);
        let spec = SmoothingSpec::default();
        for &z in pts.iter().take(20) {
            for m in [5, 10] {
                let r = density_ratio(z, &s, &s, m, &spec, Membership::InBoth).unwrap();
                assert_eq!(r.value, 1.0);
            }
        }
    }

    #[test]
    fn duplicated_superset_ratio_near_one() {
        let q = normals(2_000, 0.0, 6);
        let mut p = q.clone();
        p.extend(normals(2_000, 0.0, 6));
        let (ps, qs) = (set(&p), set(&q));
        let spec = SmoothingSpec::unsmoothed(vec![10]).unwrap();
        let mean: f64 = q
            .iter()
            .take(500)
            .map(|&z| density_ratio(z, &ps, &qs, 10, &spec, Membership::External).unwrap().value)
            .sum::<f64>()
            / 500.0;
        assert!((mean - 1.0).abs() < 0.1, "mean ratio {mean}");
    }

    #[test]
    fn mixture_ratio_near_two() {
        let q = normals(2_000, 0.0, 7);
        let mut p = q.clone();
        p.extend(normals(2_000, 10.0, 8));
        let (ps, qs) = (set(&p), set(&q));
        let spec = SmoothingSpec::default();
        let near: Vec<f64> = q.iter().copied().filter(|z| z.abs() < 1.0).collect();
        let mean = near
            .iter()
            .map(|&z| density_ratio(z, &ps, &qs, 10, &spec, Membership::InBoth).unwrap().value)
            .sum::<f64>()
            / near.len() as f64;
        assert!((mean - 2.0).abs() < 0.15 * 2.0, "mean ratio {mean}");
    }

    #[test]
    fn kl_of_shifted_gaussians() {
        let q = normals(5_000, 0.0, 9);
        let p = normals(5_000, 1.0, 10);
        let spec = SmoothingSpec::default();
        let kl = kl_divergence(&q, &p, &spec).unwrap().value;
        assert!((kl - 0.5).abs() < 0.1, "kl {kl}");
        let same = normals(5_000, 0.0, 12);
        let null = kl_divergence(&q, &same, &spec).unwrap().value;
        assert!(null.abs() < 0.05, "null kl {null}");
    }

    #[test]
    fn averaged_ratio_reduces_to_single_m() {
        let q = normals(300, 0.0, 13);
        let mut p = q.clone();
        p.extend(normals(300, 0.5, 14));
        let (ps, qs) = (set(&p), set(&q));
        let spec = SmoothingSpec::gaussian(1.0, vec![7]).unwrap();
        for &z in q.iter().take(30) {
            let a = averaged_density_ratio(z, &ps, &qs, &spec, Membership::InBoth).unwrap().value;
            let b = density_ratio(z, &ps, &qs, 7, &spec, Membership::InBoth).unwrap().value;
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn neighbor_walk_matches_selection() {
        let pts = normals(300, 0.0, 15);
        let s = set(&pts);
        for (i, &z) in pts.iter().enumerate().take(40) {
            for k in [1, 2, 7, 40] {
                let j = s.neighbor_of_member(i, k);
                assert_ne!(i, j);
                assert_eq!((z - pts[j]).abs(), epsilon(z, &s, k, true).unwrap());
                assert_eq!(s.radius(z, k as i64, true).unwrap(), epsilon(z, &s, k, true).unwrap());
            }
        }
    }

    #[test]
    fn radius_derivative_is_sign_of_offset() {
        // With neighbor identity frozen, ε = |z − z_j| so dε/dz = sign(z − z_j).
        let pts = normals(200, 0.0, 16);
        let s = set(&pts);
        let h = 1e-7;
        for i in 0..20 {
            let j = s.neighbor_of_member(i, 5);
            let z = pts[i];
            let fd = ((z + h - pts[j]).abs() - (z - h - pts[j]).abs()) / (2.0 * h);
            assert!((fd - (z - pts[j]).signum()).abs() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn epsilon_nondecreasing_in_m(pts in prop::collection::vec(-100.0f64..100.0, 8..60), z in -100.0f64..100.0) {
            let s = set(&pts);
            let mut prev = 0.0;
            for m in 1..=pts.len() {
                let e = epsilon(z, &s, m, false).unwrap();
                prop_assert!(e >= prev);
                prev = e;
            }
        }

        #[test]
        fn translation_invariance(pts in prop::collection::vec(-10.0f64..10.0, 30..60), shift in -5.0f64..5.0) {
            let spec = SmoothingSpec::gaussian(1.0, vec![3, 5]).unwrap();
            let s = set(&pts);
            let moved: Vec<f64> = pts.iter().map(|p| p + shift).collect();
            let t = set(&moved);
            let z = pts[0];
            let a = density_at(z, &s, &spec, true).unwrap().value;
            let b = density_at(z + shift, &t, &spec, true).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }

        #[test]
        fn scale_equivariance(pts in prop::collection::vec(-10.0f64..10.0, 30..60), a in 0.1f64..10.0) {
            let spec = SmoothingSpec::gaussian(1.0, vec![3, 5]).unwrap();
            let z = 0.123;
            let d = density_at(z, &set(&pts), &spec, false).unwrap().value;
            let scaled: Vec<f64> = pts.iter().map(|p| p * a).collect();
            let ds = density_at(z * a, &set(&scaled), &spec, false).unwrap().value;
            prop_assert!((ds - d / a).abs() <= 1e-9 * (d / a));
        }
    }
}
