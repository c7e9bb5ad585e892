//! Exact multi-hypothesis detection by enumerating every `k`-subset of the
//! fleet. Each hypothesis fits one nominal parameter to the systems outside
//! the subset and a free parameter to each system inside it; the hypothesis
//! with the smallest total squared misfit wins.

use combinations::Combinations;
use nalgebra::DVector;

use crate::error::{FleetError, Result};
use crate::model::{
    binomial_count, solve_normal_equations, Diagnostics, FleetDataset, FleetStats, Hypothesis, PNorm,
    Solution,
};
use crate::par::{self, Execution};

pub const DEFAULT_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Largest number of hypotheses that will be enumerated.
    pub cap: u128,
    pub execution: Execution,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            execution: Execution::default(),
        }
    }
}

/// Parameter estimates and misfit under one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisFit {
    pub hypothesis: Hypothesis,
    pub cost: f64,
    pub nominal: DVector<f64>,
    /// `(system index, own estimate)` for every system in the hypothesis.
    pub anomal: Vec<(usize, DVector<f64>)>,
}

impl HypothesisFit {
    /// Expresses the fit as a solution with exactly the hypothesized systems
    /// deviating from the nominal estimate.
    pub fn to_solution(&self, systems: usize, p: PNorm) -> Solution {
        let mut per_system = vec![self.nominal.clone(); systems];
        for (i, theta) in &self.anomal {
            per_system[*i] = theta.clone();
        }
        Solution::new(
            self.nominal.clone(),
            per_system,
            0.0,
            p,
            0.0,
            self.cost,
            Diagnostics {
                method: "oracle".into(),
                converged: true,
                ..Diagnostics::default()
            },
        )
    }
}

/// A system's own least-squares fit and SSE, or `(rank, dim)` when its
/// Gram matrix is singular.
type OwnFit = std::result::Result<(DVector<f64>, f64), (usize, usize)>;

/// Cached per-system statistics and own fits for repeated hypothesis
/// evaluation. Pooled fits are obtained by subtracting the hypothesized
/// systems from the fleet totals, so each evaluation costs `O(k m² + m³)`.
#[derive(Debug, Clone)]
pub struct Oracle {
    stats: FleetStats,
    pooled_yy: f64,
    own: Vec<OwnFit>,
}

impl Oracle {
    pub fn new(fleet: &FleetDataset) -> Self {
        let stats = fleet.stats();
        let pooled_yy = stats.systems.iter().map(|s| s.yy).sum();
        let own = stats
            .systems
            .iter()
            .map(|s| match solve_normal_equations(&s.gram, &s.moment, "own fit") {
                Ok(theta) => {
                    let sse = s.sse(&theta);
                    Ok((theta, sse))
                }
                Err(FleetError::Singular { rank, dim, .. }) => Err((rank, dim)),
                Err(_) => Err((0, s.moment.len())),
            })
            .collect();
        Self {
            stats,
            pooled_yy,
            own,
        }
    }

    pub fn fleet_size(&self) -> usize {
        self.stats.systems.len()
    }

    /// Total SSE when every system keeps its own fit.
    pub fn own_fits_sse(&self) -> Result<f64> {
        self.own
            .iter()
            .enumerate()
            .map(|(i, f)| match f {
                Ok((_, sse)) => Ok(*sse),
                Err((rank, dim)) => Err(FleetError::Singular {
                    context: format!("own fit of system {}", i + 1),
                    rank: *rank,
                    dim: *dim,
                }),
            })
            .sum()
    }

    pub fn evaluate(&self, h: &Hypothesis) -> Result<HypothesisFit> {
        let n = self.fleet_size();
        if h.len() >= n {
            return Err(FleetError::domain(
                "hypothesis leaves no normal systems to estimate the nominal parameter",
            ));
        }
        if h.anomaly_set().last().is_some_and(|&i| i >= n) {
            return Err(FleetError::domain("hypothesis index out of range"));
        }
        let mut gram = self.stats.pooled_gram.clone();
        let mut moment = self.stats.pooled_moment.clone();
        let mut yy = self.pooled_yy;
        let mut cost = 0.0;
        let mut anomal = Vec::with_capacity(h.len());
        for &s in h.anomaly_set() {
            let st = &self.stats.systems[s];
            gram -= &st.gram;
            moment -= &st.moment;
            yy -= st.yy;
            match &self.own[s] {
                Ok((theta, sse)) => {
                    cost += sse;
                    anomal.push((s, theta.clone()));
                }
                Err((rank, dim)) => {
                    return Err(FleetError::Singular {
                        context: format!("own fit of system {}", s + 1),
                        rank: *rank,
                        dim: *dim,
                    })
                }
            }
        }
        let context = format!("normal-set fit under hypothesis {:?}", h.tags());
        let nominal = solve_normal_equations(&gram, &moment, &context)?;
        let pooled_sse = (yy - 2.0 * nominal.dot(&moment) + nominal.dot(&(&gram * &nominal))).max(0.0);
        Ok(HypothesisFit {
            hypothesis: h.clone(),
            cost: cost + pooled_sse,
            nominal,
            anomal,
        })
    }
}

pub fn solve_hypothesis(fleet: &FleetDataset, h: &Hypothesis) -> Result<HypothesisFit> {
    Oracle::new(fleet).evaluate(h)
}

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub best: HypothesisFit,
    /// Every hypothesis with its cost, best first; ties ordered by subset.
    pub ranking: Vec<(Hypothesis, f64)>,
}

pub fn brute_force_detect(fleet: &FleetDataset, k: usize, opts: OracleOptions) -> Result<BruteForceResult> {
    let n = fleet.len();
    if k >= n {
        return Err(FleetError::domain(format!(
            "k = {k} must be smaller than the fleet size {n}"
        )));
    }
    let count = binomial_count(n as i64, k as i64)?;
    if count > opts.cap {
        return Err(FleetError::Refusal { count, cap: opts.cap });
    }
    let oracle = Oracle::new(fleet);
    let subsets: Vec<Vec<usize>> = Combinations::new(n, k).collect();
    let costs = par::try_map(opts.execution, &subsets, |_, s| {
        let h = Hypothesis::new(s.clone(), n)?;
        oracle.evaluate(&h).map(|fit| fit.cost)
    })?;
    let mut ranking: Vec<(Hypothesis, f64)> = subsets
        .into_iter()
        .zip(costs)
        .map(|(s, c)| (Hypothesis::new(s, n).expect("valid subset"), c))
        .collect();
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let best = oracle.evaluate(&ranking[0].0)?;
    Ok(BruteForceResult { best, ranking })
}

mod combinations {
    /// Lexicographic `k`-subsets of `0..n`.
    pub struct Combinations {
        n: usize,
        current: Option<Vec<usize>>,
    }

    impl Combinations {
        pub fn new(n: usize, k: usize) -> Self {
            Self {
                n,
                current: (k <= n).then(|| (0..k).collect()),
            }
        }
    }

    impl Iterator for Combinations {
        type Item = Vec<usize>;

        fn next(&mut self) -> Option<Vec<usize>> {
            let out = self.current.clone()?;
            let k = out.len();
            let mut next = out.clone();
            let mut i = k;
            loop {
                if i == 0 {
                    self.current = None;
                    break;
                }
                i -= 1;
                if next[i] < self.n - k + i {
                    next[i] += 1;
                    for j in (i + 1)..k {
                        next[j] = next[j - 1] + 1;
                    }
                    self.current = Some(next);
                    break;
                }
            }
            Some(out)
        }
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn enumerates_all_subsets_in_order() {
            let all: Vec<Vec<usize>> = Combinations::new(4, 2).collect();
            assert_eq!(
                all,
                vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
            );
            assert_eq!(Combinations::new(5, 0).count(), 1);
            assert_eq!(Combinations::new(7, 3).count(), 35);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_fleet, GenConfig};
    use crate::model::{least_squares, residual_sse, SystemDataset};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn planted(n: usize, tags: Vec<usize>, noise: f64, seed: u64) -> FleetDataset {
        let cfg = GenConfig::planted(n, 30, vec![1.0, -0.5], vec![4.0, 3.0], tags, noise, seed);
        generate_fleet(&cfg).unwrap()
    }

    fn opts() -> OracleOptions {
        OracleOptions::default()
    }

    #[test]
    fn empty_hypothesis_is_the_pooled_fit() {
        let fleet = planted(5, vec![2], 0.3, 11);
        let fit = solve_hypothesis(&fleet, &Hypothesis::empty()).unwrap();
        let pooled = least_squares(fleet.systems()).unwrap();
        assert!((&fit.nominal - &pooled).amax() < 1e-10);
        let sse: f64 = fleet.systems().iter().map(|s| residual_sse(s, &pooled).unwrap()).sum();
        assert!((fit.cost - sse).abs() < 1e-8 * sse);
        let k0 = brute_force_detect(&fleet, 0, opts()).unwrap();
        assert_eq!(k0.ranking.len(), 1);
        assert!((k0.best.cost - sse).abs() < 1e-8 * sse);
    }

    #[test]
    fn full_hypothesis_is_rejected() {
        let fleet = planted(3, vec![1], 0.3, 1);
        let all = Hypothesis::new(vec![0, 1, 2], 3).unwrap();
        assert!(matches!(solve_hypothesis(&fleet, &all), Err(FleetError::Domain(_))));
        assert!(brute_force_detect(&fleet, 3, opts()).is_err());
    }

    #[test]
    fn single_anomaly_cost_by_independent_summation() {
        let fleet = generate_fleet(&GenConfig::planted(6, 25, vec![0.3, 0.2], vec![1.0, 0.0], vec![4], 0.5, 9)).unwrap();
        let h = Hypothesis::new(vec![1], 6).unwrap();
        let fit = solve_hypothesis(&fleet, &h).unwrap();
        let rest: Vec<SystemDataset> = fleet
            .systems()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, s)| s.clone())
            .collect();
        let naive_sse = |s: &SystemDataset, th: &DVector<f64>| -> f64 {
            let mut acc = 0.0;
            for t in 0..s.observations() {
                let mut pred = 0.0;
                for q in 0..s.dim() {
                    pred += s.regressors()[(t, q)] * th[q];
                }
                acc += (s.measurements()[t] - pred).powi(2);
            }
            acc
        };
        let pool = least_squares(&rest).unwrap();
        let own = least_squares(std::slice::from_ref(&fleet.systems()[1])).unwrap();
        let expected: f64 = rest.iter().map(|s| naive_sse(s, &pool)).sum::<f64>() + naive_sse(&fleet.systems()[1], &own);
        assert!((fit.cost - expected).abs() < 1e-9 * expected, "{} vs {expected}", fit.cost);
    }

    #[test]
    fn dominant_anomaly_is_found() {
        let fleet = planted(4, vec![3], 0.0, 5);
        let res = brute_force_detect(&fleet, 1, opts()).unwrap();
        assert_eq!(res.best.hypothesis.anomaly_set(), &[2]);
        assert_eq!(res.ranking.len(), 4);
    }

    #[test]
    fn cap_refuses() {
        let fleet = planted(30, vec![1], 0.1, 2);
        let o = OracleOptions {
            cap: 100,
            ..OracleOptions::default()
        };
        match brute_force_detect(&fleet, 3, o) {
            Err(FleetError::Refusal { count, cap }) => assert_eq!((count, cap), (4060, 100)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fit_as_solution_has_exactly_k_deviations() {
        let fleet = planted(6, vec![2, 5], 0.2, 3);
        let res = brute_force_detect(&fleet, 2, opts()).unwrap();
        let sol = res.best.to_solution(6, PNorm::L2);
        assert_eq!(sol.flagged, res.best.hypothesis.anomaly_set());
        assert_eq!(sol.flagged.len(), 2);
        assert!(sol.is_consistent());
    }

    #[test]
    fn sequential_and_parallel_rankings_agree() {
        let fleet = planted(9, vec![1, 7], 0.4, 8);
        let a = brute_force_detect(&fleet, 2, OracleOptions { execution: Execution::Sequential, ..opts() }).unwrap();
        let b = brute_force_detect(&fleet, 2, OracleOptions { execution: Execution::Parallel, ..opts() }).unwrap();
        assert_eq!(a.ranking.len(), b.ranking.len());
        for (x, y) in a.ranking.iter().zip(&b.ranking) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1.to_bits(), y.1.to_bits());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shuffled_reenumeration_agrees(seed in 0u64..10_000) {
            let fleet = planted(6, vec![2, 4], 1.0, seed);
            let res = brute_force_detect(&fleet, 2, opts()).unwrap();
            let mut subsets: Vec<Vec<usize>> = Combinations::new(6, 2).collect();
            let mut rng = crate::datagen::rng_from_seed(seed ^ 0x5eed);
            subsets.shuffle(&mut rng);
            let mut best: Option<(Vec<usize>, f64)> = None;
            for s in subsets {
                let c = solve_hypothesis(&fleet, &Hypothesis::new(s.clone(), 6).unwrap()).unwrap().cost;
                let better = match &best {
                    None => true,
                    Some((bs, bc)) => c < *bc || (c == *bc && s < *bs),
                };
                if better {
                    best = Some((s, c));
                }
            }
            let expected = best.unwrap().0;
            prop_assert_eq!(res.best.hypothesis.anomaly_set(), expected.as_slice());
        }

        #[test]
        fn optimal_cost_is_monotone_in_k(seed in 0u64..10_000) {
            let fleet = planted(6, vec![3], 1.0, seed);
            let costs: Vec<f64> = (0..4).map(|k| brute_force_detect(&fleet, k, opts()).unwrap().best.cost).collect();
            for w in costs.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }

        #[test]
        fn relabeling_permutes_the_answer(seed in 0u64..10_000) {
            let fleet = planted(6, vec![2], 0.5, seed);
            let mut perm: Vec<usize> = (0..6).collect();
            let mut rng = crate::datagen::rng_from_seed(seed + 1);
            perm.shuffle(&mut rng);
            let relabeled = fleet.permuted(&perm).unwrap();
            let a = brute_force_detect(&fleet, 1, opts()).unwrap().best.hypothesis;
            let b = brute_force_detect(&relabeled, 1, opts()).unwrap().best.hypothesis;
            // permuted() places old system perm[j] at position j.
            let mapped: Vec<usize> = b.anomaly_set().iter().map(|&j| perm[j]).collect();
            prop_assert_eq!(a.anomaly_set(), mapped.as_slice());
        }
    }
}
