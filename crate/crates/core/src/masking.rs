//! Random and context-aware token masking.
//!
//! Both strategies draw an exact number of masked tokens,
//! `clamp(round(r·N), 1, N-1)`, by Gumbel-top-k: token `i` gets the key
//! `ln(wᵢ) + Gᵢ` with `Gᵢ = -ln(-ln Uᵢ)`, `Uᵢ ~ U(0,1)` drawn in index order,
//! and the largest keys are masked. Tokens inside the chest region carry
//! weight `w ≥ 1`, tokens outside weight 1, so `w` shifts where masks fall
//! but never how many. With `w = 1` the draw is uniform over subsets and is
//! bit-identical to [`random_mask`] on the same stream.

use std::fmt;
use std::str::FromStr;

use rand::distributions::Open01;
use rand::{Rng as _, SeedableRng};

use crate::par::{self, Execution};
use crate::rng::Rng;
use crate::{Error, Result};

/// Per-patch flag marking the inside of the chest contour.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    grid_side: usize,
    inside: Vec<bool>,
}

impl RegionMask {
    pub fn new(grid_side: usize, inside: Vec<bool>) -> Result<Self> {
        if grid_side == 0 || inside.len() != grid_side * grid_side {
            return Err(Error::shape("region", &[grid_side, grid_side], &[inside.len()]));
        }
        Ok(RegionMask { grid_side, inside })
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn len(&self) -> usize {
        self.inside.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inside.is_empty()
    }

    pub fn is_inside(&self, token: usize) -> bool {
        self.inside[token]
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn inside_count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn outside_count(&self) -> usize {
        self.len() - self.inside_count()
    }
}

/// `REGION <g>` header followed by `g` lines of `0`/`1`.
impl fmt::Display for RegionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "REGION {}", self.grid_side)?;
        for row in self.inside.chunks(self.grid_side) {
            let line: String = row.iter().map(|&b| if b { '1' } else { '0' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl FromStr for RegionMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |field: String| Error::Format { format: "region", field };
        let mut lines = s.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let g: usize = header
            .strip_prefix("REGION ")
            .ok_or_else(|| bad(format!("header {header:?}")))?
            .trim()
            .parse()
            .map_err(|_| bad(format!("grid side in {header:?}")))?;
        let mut inside = Vec::with_capacity(g * g);
        for r in 0..g {
            let line = lines.next().ok_or_else(|| bad(format!("missing row {r}")))?;
            if line.len() != g {
                return Err(bad(format!("row {r} has {} cells, expected {g}", line.len())));
            }
            for c in line.chars() {
                match c {
                    '0' => inside.push(false),
                    '1' => inside.push(true),
                    other => return Err(bad(format!("row {r} cell {other:?}"))),
                }
            }
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing rows".into()));
        }
        RegionMask::new(g, inside)
    }
}

/// Exact partition of token indices into masked and visible.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    n_tokens: usize,
    masked: Vec<usize>,
    visible: Vec<usize>,
    mask_ratio: f64,
}

impl MaskPlan {
    /// Builds a plan from an explicit masked set. Unlike the samplers, this
    /// accepts any count in `0..=n`, including the empty and full sets.
    pub fn with_masked(n_tokens: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if let Some(&bad) = masked.iter().find(|&&i| i >= n_tokens) {
            return Err(Error::Index {
                op: "mask_plan",
                index: bad,
                len: n_tokens,
            });
        }
        let mut is_masked = vec![false; n_tokens];
        for &i in &masked {
            is_masked[i] = true;
        }
        let visible = (0..n_tokens).filter(|&i| !is_masked[i]).collect();
        let mask_ratio = masked.len() as f64 / n_tokens as f64;
        Ok(MaskPlan {
            n_tokens,
            masked,
            visible,
            mask_ratio,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio
    }

    /// For each token, its row in `concat(visible rows, masked rows)`.
    pub fn restore_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.n_tokens];
        for (row, &tok) in self.visible.iter().chain(&self.masked).enumerate() {
            idx[tok] = row;
        }
        idx
    }
}

/// Number of masked tokens for `n` tokens at ratio `r`: `clamp(round(r·n), 1, n-1)`.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

fn check_ratio(n: usize, ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::config(format!("masking needs at least 2 tokens, got {n}")));
    }
    Ok(())
}

/// Standard Gumbel variate `-ln(-ln U)`, `U` uniform on the open interval.
pub fn gumbel(rng: &mut Rng) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// Gumbel-top-k over per-token log-weights.
fn gumbel_top_k(log_weights: &[f64], ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    let n = log_weights.len();
    check_ratio(n, ratio)?;
    let m = mask_count(n, ratio);
    let keys: Vec<f64> = log_weights.iter().map(|lw| lw + gumbel(rng)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let mut plan = MaskPlan::with_masked(n, order[..m].to_vec())?;
    plan.mask_ratio = ratio;
    Ok(plan)
}

/// Uniform masking of `n` tokens: every subset of the exact size is equally likely.
pub fn random_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    gumbel_top_k(&vec![0.0; n], ratio, rng)
}

/// Masks inside-region tokens with relative weight `inside_weight`.
pub fn context_aware_mask(
    region: &RegionMask,
    ratio: f64,
    inside_weight: f64,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    if !(inside_weight >= 1.0 && inside_weight.is_finite()) {
        return Err(Error::config(format!(
            "inside_weight {inside_weight} must be a finite value >= 1"
        )));
    }
    let inside = region.inside_count();
    if inside_weight > 1.0 && (inside == 0 || inside == region.len()) {
        log::warn!(
            "region has {inside} of {} patches inside; context-aware masking degenerates to uniform",
            region.len()
        );
    }
    let lw = inside_weight.ln();
    let log_weights: Vec<f64> = region
        .inside
        .iter()
        .map(|&b| if b { lw } else { 0.0 })
        .collect();
    gumbel_top_k(&log_weights, ratio, rng)
}

/// Horizontal and vertical semi-axes of the fallback chest ellipse, relative to the grid.
pub const CONTOUR_AXES: (f64, f64) = (0.35, 0.45);

/// Centered axis-aligned ellipse on a `g × g` grid whose area best matches `cover·g²`.
///
/// Patch `(i, j)` is scored by the ellipse scale at which its center enters,
/// `s = sqrt((dx/ax)² + (dy/ay)²)`; patches are admitted one score level at a
/// time (ties together, which keeps the mask mirror-symmetric) and the level
/// whose count is closest to `cover·g²` wins. Ties between levels prefer the smaller.
pub fn default_contour(grid_side: usize, cover: f64) -> Result<RegionMask> {
    if !(cover > 0.0 && cover < 1.0) {
        return Err(Error::config(format!("contour cover {cover} must lie in (0, 1)")));
    }
    if grid_side == 0 {
        return Err(Error::config("grid side must be positive"));
    }
    let g = grid_side;
    let center = g as f64 / 2.0;
    let (ax, ay) = CONTOUR_AXES;
    let score = |k: usize| {
        let dy = (k / g) as f64 + 0.5 - center;
        let dx = (k % g) as f64 + 0.5 - center;
        ((dx / ax).powi(2) + (dy / ay).powi(2)).sqrt()
    };
    let scores: Vec<f64> = (0..g * g).map(score).collect();
    let mut levels = scores.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs().max(1.0));

    let target = cover * (g * g) as f64;
    let mut best = (f64::INFINITY, levels[0]);
    for &level in &levels {
        let count = scores.iter().filter(|&&s| s <= level + 1e-9 * level.max(1.0)).count();
        let err = (count as f64 - target).abs();
        if err < best.0 {
            best = (err, level);
        }
    }
    let threshold = best.1 + 1e-9 * best.1.max(1.0);
    RegionMask::new(g, scores.iter().map(|&s| s <= threshold).collect())
}

/// Empirical summary of a batch of masking draws against one region.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStats {
    pub draws: usize,
    /// Mean over draws of `|masked ∩ inside| / |inside|`.
    pub inside_rate: f64,
    pub outside_rate: f64,
    pub inside_se: f64,
    pub outside_se: f64,
    /// Mean and standard error of the per-draw `inside_rate - outside_rate`.
    pub diff_mean: f64,
    pub diff_se: f64,
    /// Mean masked fraction over all tokens.
    pub masked_fraction: f64,
    /// Per-token masking frequency, indexed like the region.
    pub frequency: Vec<f64>,
}

impl MaskStats {
    /// How many standard errors the inside rate exceeds the outside rate by.
    pub fn separation(&self) -> f64 {
        if self.diff_se == 0.0 {
            if self.diff_mean > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            self.diff_mean / self.diff_se
        }
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn mask_stats(plans: &[MaskPlan], region: &RegionMask) -> Result<MaskStats> {
    if plans.is_empty() {
        return Err(Error::contract("mask_stats over zero plans"));
    }
    let (n_in, n_out) = (region.inside_count(), region.outside_count());
    if n_in == 0 || n_out == 0 {
        return Err(Error::contract(
            "mask_stats needs a region with both inside and outside patches",
        ));
    }
    let mut counts = vec![0usize; region.len()];
    let mut inside = Vec::with_capacity(plans.len());
    let mut outside = Vec::with_capacity(plans.len());
    let mut fraction = 0.0;
    for plan in plans {
        if plan.n_tokens() != region.len() {
            return Err(Error::shape("mask_stats", &[plan.n_tokens()], &[region.len()]));
        }
        let hit_in = plan.masked().iter().filter(|&&i| region.is_inside(i)).count();
        let hit_out = plan.masked().len() - hit_in;
        inside.push(hit_in as f64 / n_in as f64);
        outside.push(hit_out as f64 / n_out as f64);
        fraction += plan.masked().len() as f64 / plan.n_tokens() as f64;
        for &i in plan.masked() {
            counts[i] += 1;
        }
    }
    let diff: Vec<f64> = inside.iter().zip(&outside).map(|(a, b)| a - b).collect();
    let (inside_rate, inside_se) = mean_se(&inside);
    let (outside_rate, outside_se) = mean_se(&outside);
    let (diff_mean, diff_se) = mean_se(&diff);
    let draws = plans.len();
    Ok(MaskStats {
        draws,
        inside_rate,
        outside_rate,
        inside_se,
        outside_se,
        diff_mean,
        diff_se,
        masked_fraction: fraction / draws as f64,
        frequency: counts.iter().map(|&c| c as f64 / draws as f64).collect(),
    })
}

/// Draws `draws` independent plans. Draw `i` uses ChaCha stream `i` of `seed`,
/// so the result does not depend on the execution mode or thread count.
pub fn sample_plans(
    region: &RegionMask,
    ratio: f64,
    inside_weight: f64,
    seed: u64,
    draws: usize,
    exec: Execution,
) -> Result<Vec<MaskPlan>> {
    par::map_range(exec, draws, |i| {
        let mut rng = Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        context_aware_mask(region, ratio, inside_weight, &mut rng)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn quad_region() -> RegionMask {
        // tokens 0 and 1 inside
        RegionMask::new(2, vec![true, true, false, false]).unwrap()
    }

    #[test]
    fn unit_weight_reduces_to_random_mask() {
        let region = default_contour(8, 0.5).unwrap();
        for seed in 0..50 {
            let a = context_aware_mask(&region, 0.75, 1.0, &mut rng::from_seed(seed)).unwrap();
            let b = random_mask(64, 0.75, &mut rng::from_seed(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn huge_weight_masks_inside_first() {
        let region = quad_region();
        let mut r = rng::from_seed(3);
        let hits = (0..1000)
            .filter(|_| {
                let p = context_aware_mask(&region, 0.5, 1e9, &mut r).unwrap();
                p.masked() == [0, 1]
            })
            .count();
        assert!(hits >= 999, "{hits}");
    }

    /// Exact distribution of the inside count under successive weighted sampling
    /// without replacement, enumerated over all ordered picks.
    fn exact_inside_expectation(weights: &[f64], inside: &[bool], m: usize) -> f64 {
        fn rec(weights: &[f64], inside: &[bool], taken: &mut Vec<usize>, m: usize, p: f64) -> f64 {
            if taken.len() == m {
                return p * taken.iter().filter(|&&i| inside[i]).count() as f64;
            }
            let rest: f64 = (0..weights.len())
                .filter(|i| !taken.contains(i))
                .map(|i| weights[i])
                .sum();
            let mut total = 0.0;
            for i in 0..weights.len() {
                if taken.contains(&i) {
                    continue;
                }
                taken.push(i);
                total += rec(weights, inside, taken, m, p * weights[i] / rest);
                taken.pop();
            }
            total
        }
        rec(weights, inside, &mut Vec::new(), m, 1.0)
    }

    #[test]
    fn weighted_inside_count_matches_oracles() {
        let region = quad_region();
        let exact = exact_inside_expectation(&[3.0, 3.0, 1.0, 1.0], region.inside(), 2);
        assert!((exact - (2.0 * 0.45 + (0.3 + 12.0 / 56.0))).abs() < 1e-12);

        // Brute-force Monte-Carlo of the key scheme with an independent generator.
        use rand::SeedableRng;
        let mut other = rand::rngs::StdRng::seed_from_u64(99);
        let draws = 1_000_000;
        let mut oracle = 0usize;
        let mut ours = Vec::with_capacity(draws);
        let mut r = rng::from_seed(17);
        for _ in 0..draws {
            let mut keys: Vec<(f64, usize)> = (0..4)
                .map(|i| {
                    let u: f64 = other.sample(Open01);
                    let w: f64 = if i < 2 { 3.0 } else { 1.0 };
                    (w.ln() - (-u.ln()).ln(), i)
                })
                .collect();
            keys.sort_by(|a, b| b.0.total_cmp(&a.0));
            oracle += keys[..2].iter().filter(|k| k.1 < 2).count();
            let p = context_aware_mask(&region, 0.5, 3.0, &mut r).unwrap();
            ours.push(p.masked().iter().filter(|&&i| i < 2).count() as f64);
        }
        let (mean, se) = mean_se(&ours);
        let oracle_mean = oracle as f64 / draws as f64;
        assert!((mean - oracle_mean).abs() < 3.0 * se * 2f64.sqrt(), "{mean} vs {oracle_mean}");
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs exact {exact}");
    }

    #[test]
    fn clamp_rule() {
        assert_eq!(mask_count(4, 0.99), 3);
        assert_eq!(mask_count(4, 0.01), 1);
        assert_eq!(mask_count(64, 0.75), 48);
        let p = random_mask(4, 0.99, &mut rng::from_seed(0)).unwrap();
        assert_eq!(p.masked().len(), 3);
        assert_eq!(p.visible().len(), 1);
    }

    #[test]
    fn invalid_parameters() {
        let region = quad_region();
        let mut r = rng::from_seed(0);
        assert!(matches!(random_mask(4, 0.0, &mut r), Err(Error::Config(_))));
        assert!(matches!(random_mask(4, 1.0, &mut r), Err(Error::Config(_))));
        assert!(matches!(
            context_aware_mask(&region, 0.5, 0.5, &mut r),
            Err(Error::Config(_))
        ));
        let all_in = RegionMask::new(2, vec![true; 4]).unwrap();
        assert!(context_aware_mask(&all_in, 0.5, 4.0, &mut r).is_ok());
    }

    #[test]
    fn same_seed_same_plan() {
        let a = random_mask(64, 0.75, &mut rng::from_seed(8)).unwrap();
        let b = random_mask(64, 0.75, &mut rng::from_seed(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn contour_properties() {
        let r = default_contour(8, 0.5).unwrap();
        assert!((r.inside_count() as i64 - 32).abs() <= 2, "{}", r.inside_count());
        for g in [5, 8, 13, 20] {
            let r = default_contour(g, 0.4).unwrap();
            for i in 0..g {
                for j in 0..g {
                    assert_eq!(r.is_inside(i * g + j), r.is_inside(i * g + g - 1 - j));
                }
            }
        }
        let nearly_all = default_contour(8, 0.999).unwrap();
        assert!(nearly_all.inside_count() >= 60);
        assert_eq!(default_contour(8, 0.3).unwrap(), default_contour(8, 0.3).unwrap());
    }

    #[test]
    fn region_text_round_trip_and_errors() {
        let r = default_contour(6, 0.5).unwrap();
        let text = r.to_string();
        assert!(text.starts_with("REGION 6\n"));
        assert_eq!(text.parse::<RegionMask>().unwrap(), r);
        assert!("REGION 2\n01\n1".parse::<RegionMask>().is_err());
        assert!("REGION 2\n01\n12\n".parse::<RegionMask>().is_err());
        assert!("GRID 2\n01\n10\n".parse::<RegionMask>().is_err());
    }

    #[test]
    fn stats_single_plan_is_exact() {
        let region = RegionMask::new(2, vec![true, true, true, false]).unwrap();
        let plan = MaskPlan::with_masked(4, vec![0, 3]).unwrap();
        let s = mask_stats(std::slice::from_ref(&plan), &region).unwrap();
        assert_eq!(s.inside_rate, 1.0 / 3.0);
        assert_eq!(s.outside_rate, 1.0);
        assert_eq!(s.frequency, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn stats_uniform_vs_weighted() {
        let region = default_contour(8, 0.5).unwrap();
        let uniform = sample_plans(&region, 0.75, 1.0, 5, 10_000, Execution::Parallel).unwrap();
        let s = mask_stats(&uniform, &region).unwrap();
        assert!(s.diff_mean.abs() < 3.0 * s.diff_se + 1e-12, "{s:?}");
        let weighted = sample_plans(&region, 0.75, 4.0, 5, 10_000, Execution::Parallel).unwrap();
        let s = mask_stats(&weighted, &region).unwrap();
        assert!(s.inside_rate >= s.outside_rate);
        assert!(s.separation() > 3.0);
        let seq = sample_plans(&region, 0.75, 4.0, 5, 500, Execution::Sequential).unwrap();
        assert_eq!(seq[..], weighted[..500]);
    }

    #[test]
    fn inside_rate_is_monotone_in_weight() {
        let region = default_contour(8, 0.4).unwrap();
        let mut prev: Option<MaskStats> = None;
        for w in [1.0, 2.0, 4.0, 16.0] {
            let plans = sample_plans(&region, 0.5, w, 21, 10_000, Execution::Parallel).unwrap();
            let s = mask_stats(&plans, &region).unwrap();
            if let Some(p) = prev {
                let slack = 3.0 * (p.inside_se.powi(2) + s.inside_se.powi(2)).sqrt();
                assert!(s.inside_rate + slack >= p.inside_rate, "w={w}");
            }
            prev = Some(s);
        }
    }

    #[test]
    fn restore_index_inverts_concat() {
        let plan = MaskPlan::with_masked(5, vec![3, 1]).unwrap();
        let order: Vec<usize> = plan.visible().iter().chain(plan.masked()).copied().collect();
        let restore = plan.restore_index();
        for tok in 0..5 {
            assert_eq!(order[restore[tok]], tok);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn exact_count_and_partition(g in 2usize..9, ratio in 0.001f64..0.999, w in 1.0f64..50.0, cover in 0.05f64..0.95, seed in any::<u64>()) {
            let region = default_contour(g, cover).unwrap();
            let n = g * g;
            let plan = context_aware_mask(&region, ratio, w, &mut rng::from_seed(seed)).unwrap();
            prop_assert_eq!(plan.masked().len(), mask_count(n, ratio));
            let mut all: Vec<usize> = plan.masked().iter().chain(plan.visible()).copied().collect();
            prop_assert!(plan.masked().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(plan.visible().windows(2).all(|w| w[0] < w[1]));
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
