//! Room posteriors from neighbor affinities, their bounds under the
//! unprocessed neighbors, and the stop test.

use crate::config::{DependentFormula, StopRule};

/// Largest affinity used when turning an unprocessed neighbor into odds.
const ALPHA_CAP: f64 = 1.0 - 1e-12;
/// Largest number of unprocessed neighbors `brute_force_bounds` enumerates.
pub const BRUTE_FORCE_LIMIT: usize = 12;

fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        p.ln() - (-p).ln_1p()
    }
}

/// Inverse of `logit`; an undefined sum (`0/0` odds) maps to zero.
fn sigmoid(lo: f64) -> f64 {
    if lo.is_nan() {
        0.0
    } else if lo >= 0.0 {
        1.0 / (1.0 + (-lo).exp())
    } else {
        let e = lo.exp();
        e / (1.0 + e)
    }
}

fn log_odds(prior: f64, alphas: &[f64], eq2_prior: bool) -> f64 {
    let mut lo: f64 = alphas.iter().map(|&a| logit(a)).sum();
    if alphas.is_empty() || eq2_prior {
        lo += logit(prior);
    }
    lo
}

/// `prod a / (prod a + prod (1 - a))`, optionally weighted by the prior's
/// odds. Without neighbors the prior is returned; `0/0` gives zero.
pub fn posterior_independent(prior: f64, alphas: &[f64], eq2_prior: bool) -> f64 {
    if alphas.is_empty() {
        return prior;
    }
    let lo = log_odds(prior, alphas, eq2_prior);
    if lo.is_nan() {
        log::warn!("contradictory neighbor affinities; posterior set to 0");
    }
    sigmoid(lo)
}

/// Posterior of one room from its cluster affinities.
pub fn posterior_dependent(prior: f64, clusters: &[f64], formula: DependentFormula, eq2_prior: bool) -> f64 {
    match formula {
        DependentFormula::Odds => posterior_independent(prior, clusters, eq2_prior),
        DependentFormula::Verbatim => {
            if clusters.is_empty() {
                return prior;
            }
            if prior >= 1.0 {
                return 1.0;
            }
            let prod: f64 = clusters.iter().product();
            1.0 / (1.0 + (1.0 - prod) / (1.0 - prior))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: f64,
    pub exp: f64,
    pub max: f64,
}

/// Evidence for one query over its candidate rooms `0..m`.
#[derive(Debug, Clone, Default)]
pub struct Evidence {
    pub prior: Vec<f64>,
    /// Group affinity with the query device, per processed neighbor and room.
    pub processed: Vec<Vec<f64>>,
    /// Same for neighbors not processed yet.
    pub unprocessed: Vec<Vec<f64>>,
    /// Probability that each unprocessed neighbor is in each room; rows sum
    /// to one. Only the exhaustive enumeration uses it.
    pub placement: Vec<Vec<f64>>,
    pub eq2_prior: bool,
}

/// Per-room log factors of an unprocessed neighbor: `inside[j]` when it is
/// in room `j`, `outside` when it is elsewhere.
struct WorldTerms {
    inside: Vec<f64>,
    outside: f64,
}

impl WorldTerms {
    fn new(alphas: &[f64]) -> Self {
        let rho: Vec<f64> = alphas
            .iter()
            .map(|&a| {
                let a = a.clamp(0.0, ALPHA_CAP);
                a / (1.0 - a)
            })
            .collect();
        let mean = rho.iter().sum::<f64>() / rho.len() as f64;
        if mean <= 0.0 {
            return WorldTerms {
                inside: vec![0.0; rho.len()],
                outside: 0.0,
            };
        }
        let low = rho.iter().copied().fold(f64::INFINITY, f64::min);
        WorldTerms {
            inside: rho.iter().map(|r| (r / mean).ln().max(0.0)).collect(),
            outside: (low / mean).ln(),
        }
    }
}

impl Evidence {
    pub fn rooms(&self) -> usize {
        self.prior.len()
    }

    fn processed_in(&self, j: usize) -> Vec<f64> {
        self.processed.iter().map(|a| a[j]).collect()
    }

    pub fn posterior(&self) -> Vec<f64> {
        (0..self.rooms())
            .map(|j| posterior_independent(self.prior[j], &self.processed_in(j), self.eq2_prior))
            .collect()
    }

    fn world_posterior(&self, j: usize, world: &[usize], terms: &[WorldTerms]) -> f64 {
        let mut lo = log_odds(self.prior[j], &self.processed_in(j), self.eq2_prior);
        for (t, &w) in terms.iter().zip(world) {
            lo += if w == j { t.inside[j] } else { t.outside };
        }
        sigmoid(lo)
    }

    fn terms(&self) -> Vec<WorldTerms> {
        self.unprocessed.iter().map(|a| WorldTerms::new(a)).collect()
    }

    /// `max`: every unprocessed neighbor in the room. `min`: all of them in
    /// the most likely other room. `exp`: the current posterior.
    pub fn bounds(&self) -> Vec<Bounds> {
        let m = self.rooms();
        let p = self.posterior();
        let terms = self.terms();
        let u = self.unprocessed.len();
        (0..m)
            .map(|j| {
                let max = self.world_posterior(j, &vec![j; u], &terms);
                let rival = (0..m)
                    .filter(|&r| r != j)
                    .fold(None, |best: Option<usize>, r| match best {
                        Some(b) if p[b] >= p[r] => Some(b),
                        _ => Some(r),
                    })
                    .unwrap_or(j);
                let min = self.world_posterior(j, &vec![rival; u], &terms);
                Bounds { min, exp: p[j], max }
            })
            .collect()
    }

    /// Minimum, `placement`-weighted mean and maximum over every assignment
    /// of the unprocessed neighbors to rooms. `None` above
    /// `BRUTE_FORCE_LIMIT` neighbors.
    pub fn brute_force_bounds(&self) -> Option<Vec<Bounds>> {
        let m = self.rooms();
        let u = self.unprocessed.len();
        if u > BRUTE_FORCE_LIMIT || m == 0 {
            return None;
        }
        let terms = self.terms();
        let mut out = vec![
            Bounds {
                min: f64::INFINITY,
                exp: 0.0,
                max: f64::NEG_INFINITY,
            };
            m
        ];
        let mut world = vec![0usize; u];
        loop {
            let weight: f64 = world.iter().enumerate().map(|(i, &w)| self.placement[i][w]).product();
            for (j, b) in out.iter_mut().enumerate() {
                let p = self.world_posterior(j, &world, &terms);
                b.min = b.min.min(p);
                b.max = b.max.max(p);
                b.exp += weight * p;
            }
            let mut i = 0;
            while i < u {
                world[i] += 1;
                if world[i] < m {
                    break;
                }
                world[i] = 0;
                i += 1;
            }
            if i == u {
                break;
            }
        }
        Some(out)
    }
}

/// Index of the largest value, ties to the smaller index, with the runner-up.
pub fn top_two(p: &[f64]) -> (usize, Option<usize>) {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    (idx[0], idx.get(1).copied())
}

/// Whether processing can end with the current leader.
pub fn should_stop(p: &[f64], bounds: &[Bounds], rule: StopRule) -> bool {
    if p.len() <= 1 {
        return true;
    }
    let (a, b) = top_two(p);
    let b = b.expect("at least two rooms");
    let strict = (0..p.len()).all(|r| r == a || bounds[a].min > bounds[r].max);
    match rule {
        StopRule::Exhaustive => false,
        StopRule::Strict => strict,
        StopRule::Loose => strict || bounds[a].min >= bounds[b].exp || bounds[a].exp >= bounds[b].max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn two_confident_neighbors() {
        assert_relative_eq!(posterior_independent(0.3, &[0.9, 0.9], false), 81.0 / 82.0, epsilon = 1e-12);
    }

    #[test]
    fn no_neighbors_returns_prior() {
        assert_eq!(posterior_independent(0.3, &[], false), 0.3);
        assert_eq!(posterior_dependent(0.3, &[], DependentFormula::Verbatim, false), 0.3);
    }

    #[test]
    fn single_neighbor_returns_its_affinity() {
        assert_relative_eq!(posterior_independent(0.3, &[0.1217], false), 0.1217, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_odds() {
        assert_eq!(posterior_independent(0.5, &[0.0, 1.0], false), 0.0);
        assert_eq!(posterior_independent(0.5, &[0.0, 0.4], false), 0.0);
        assert_eq!(posterior_independent(0.5, &[1.0, 0.4], false), 1.0);
    }

    #[test]
    fn prior_odds_factor() {
        // odds 0.6/0.4 * 0.2/0.8 = 0.375
        assert_relative_eq!(posterior_independent(0.2, &[0.6], true), 0.375 / 1.375, epsilon = 1e-12);
    }

    #[test]
    fn verbatim_dependent_formula() {
        assert_relative_eq!(
            posterior_dependent(0.5, &[0.5, 0.5], DependentFormula::Verbatim, false),
            0.4,
            epsilon = 1e-12
        );
        assert_eq!(posterior_dependent(1.0, &[0.5], DependentFormula::Verbatim, false), 1.0);
    }

    #[test]
    fn no_unprocessed_collapses_bounds() {
        let e = Evidence {
            prior: vec![0.5, 0.5],
            processed: vec![vec![0.3, 0.1]],
            ..Evidence::default()
        };
        for b in e.bounds() {
            assert_eq!(b.min, b.exp);
            assert_eq!(b.max, b.exp);
        }
    }

    #[test]
    fn single_room_always_stops() {
        assert!(should_stop(&[0.2], &[Bounds { min: 0.0, exp: 0.2, max: 1.0 }], StopRule::Strict));
    }

    #[test]
    fn stop_rules() {
        let p = [0.6, 0.3];
        let wide = [Bounds { min: 0.35, exp: 0.6, max: 0.9 }, Bounds { min: 0.1, exp: 0.3, max: 0.5 }];
        assert!(!should_stop(&p, &wide, StopRule::Strict));
        assert!(should_stop(&p, &wide, StopRule::Loose));
        assert!(!should_stop(&p, &wide, StopRule::Exhaustive));
        let tight = [Bounds { min: 0.55, exp: 0.6, max: 0.9 }, Bounds { min: 0.1, exp: 0.3, max: 0.5 }];
        assert!(should_stop(&p, &tight, StopRule::Strict));
    }

    #[test]
    fn ties_prefer_the_smaller_index() {
        assert_eq!(top_two(&[0.2, 0.5, 0.5]), (1, Some(2)));
    }

    fn evidence() -> impl Strategy<Value = Evidence> {
        (2usize..=4).prop_flat_map(|m| {
            (
                prop::collection::vec(0.01f64..1.0, m),
                prop::collection::vec(prop::collection::vec(0.0f64..0.99, m), 0..4),
                prop::collection::vec(prop::collection::vec(0.0f64..0.99, m), 0..=3),
                prop::collection::vec(prop::collection::vec(0.01f64..1.0, m), 3),
                any::<bool>(),
            )
                .prop_map(|(prior, processed, unprocessed, raw, eq2)| {
                    let s: f64 = prior.iter().sum();
                    let placement = raw[..unprocessed.len()]
                        .iter()
                        .map(|row| {
                            let t: f64 = row.iter().sum();
                            row.iter().map(|v| v / t).collect()
                        })
                        .collect();
                    Evidence {
                        prior: prior.iter().map(|v| v / s).collect(),
                        processed,
                        unprocessed,
                        placement,
                        eq2_prior: eq2,
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn bounds_match_exhaustive_enumeration(e in evidence()) {
            let fast = e.bounds();
            let slow = e.brute_force_bounds().unwrap();
            for (f, s) in fast.iter().zip(&slow) {
                prop_assert!((f.min - s.min).abs() <= 1e-9, "{f:?} {s:?}");
                prop_assert!((f.max - s.max).abs() <= 1e-9, "{f:?} {s:?}");
                prop_assert!(f.min <= f.exp + 1e-12 && f.exp <= f.max + 1e-12);
                prop_assert!(f.min - 1e-12 <= s.exp && s.exp <= f.max + 1e-12);
            }
            let p = e.posterior();
            for (b, q) in fast.iter().zip(&p) {
                prop_assert_eq!(b.exp, *q);
            }
        }

        #[test]
        fn posterior_stays_in_unit_interval(prior in 0.0f64..=1.0, a in prop::collection::vec(0.0f64..=1.0, 0..10), eq2 in any::<bool>()) {
            let p = posterior_independent(prior, &a, eq2);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn strict_stop_never_changes_the_answer(e in evidence()) {
            prop_assume!(!e.processed.is_empty() || e.eq2_prior);
            let b = e.bounds();
            let p = e.posterior();
            if should_stop(&p, &b, StopRule::Strict) {
                let mut all = e.clone();
                all.processed.append(&mut all.unprocessed);
                prop_assert_eq!(top_two(&p).0, top_two(&all.posterior()).0);
            }
        }
    }
}
