//! Per-layer expert bit-width allocation.
//!
//! Each expert `i` gets `b_i` in {1, 2, 3}, minimizing
//! `sum_i c_i * eps[i][b_i]^gamma` subject to `sum_i b_i = n * k` and,
//! optionally, at least one 3-bit and one 2-bit expert. `c_i` is the expert
//! significance, `phi_i^alpha * w_i^beta` for the default strategy.
//!
//! [`solve_ip`] is an exact dynamic program over the remaining budget;
//! [`brute_force_oracle`] enumerates all `3^n` vectors and exists to check it.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Infeasibility, Result};
use crate::numerics::SeededRng;
use crate::profiler::ExpertStats;

pub const BIT_OPTIONS: [u8; 3] = [1, 2, 3];
const ORACLE_MAX_N: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    pub significance: Vec<f64>,
    /// `eps[i][b - 1]` for `b` in 1..=3.
    pub eps: Vec<[f64; 3]>,
    pub target_sum: u32,
    pub gamma: f64,
    pub floors: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub bits: Vec<u8>,
    pub objective: f64,
}

impl AllocationProblem {
    pub fn n(&self) -> usize {
        self.significance.len()
    }

    fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return arg_err("allocation problem has no experts");
        }
        if self.eps.len() != self.n() {
            return arg_err(format!(
                "{} error rows for {} experts",
                self.eps.len(),
                self.n()
            ));
        }
        if self.significance.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return arg_err("significance values must be finite and non-negative");
        }
        if self.eps.iter().flatten().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return arg_err("error values must be finite and non-negative");
        }
        if !self.gamma.is_finite() {
            return arg_err("gamma must be finite");
        }
        Ok(())
    }

    /// Cost of giving expert `i` `bits` bits.
    pub fn cost(&self, i: usize, bits: u8) -> f64 {
        self.significance[i] * self.eps[i][bits as usize - 1].powf(self.gamma)
    }

    /// Objective of a complete assignment, summed in index order.
    pub fn objective(&self, bits: &[u8]) -> f64 {
        bits.iter().enumerate().fold(0.0, |acc, (i, &b)| acc + self.cost(i, b))
    }

    pub fn is_feasible(&self, bits: &[u8]) -> bool {
        bits.len() == self.n()
            && bits.iter().all(|b| BIT_OPTIONS.contains(b))
            && bits.iter().map(|&b| b as u32).sum::<u32>() == self.target_sum
            && (!self.floors || (bits.contains(&3) && bits.contains(&2)))
    }

    /// Names the first constraint that rules out every assignment, if any.
    pub fn infeasibility(&self) -> Option<Infeasibility> {
        let n = self.n();
        let t = self.target_sum;
        if (t as usize) < n || t as usize > 3 * n {
            return Some(Infeasibility::BudgetOutOfRange { n, target: t });
        }
        if self.floors && !completable(n, t, true, true) {
            return Some(Infeasibility::Floors { n, target: t });
        }
        None
    }
}

/// Can `r` more experts reach exactly `budget` bits while still placing a
/// 3-bit expert (`need3`) and a 2-bit expert (`need2`)?
fn completable(r: usize, budget: u32, need3: bool, need2: bool) -> bool {
    let fixed = need3 as usize + need2 as usize;
    if r < fixed {
        return false;
    }
    let free = (r - fixed) as i64;
    let rest = budget as i64 - 3 * need3 as i64 - 2 * need2 as i64;
    rest >= free && rest <= 3 * free
}

/// Relative slack under which two objectives count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

fn tie_slack(best: f64) -> f64 {
    TIE_TOLERANCE * best.abs().max(1.0)
}

/// Exact minimizer. Among assignments whose objective is within a relative
/// `1e-9` of the optimum, the lexicographically smallest bit vector wins.
///
/// A dynamic program over (expert index, remaining budget, floors still
/// owed) gives the optimal completion cost of every partial assignment;
/// the answer is then built greedily from expert 0, taking the smallest
/// width whose best completion stays within the tie slack.
pub fn solve_ip(p: &AllocationProblem) -> Result<Solution> {
    p.validate()?;
    if let Some(why) = p.infeasibility() {
        return Err(Error::Infeasible(why));
    }
    let n = p.n();
    let width = 3 * n + 1;
    let idx = |i: usize, budget: usize, flags: usize| (i * width + budget) * 4 + flags;
    // flags bit 0: a 3-bit expert is still owed; bit 1: a 2-bit expert is.
    let next_flags = |flags: usize, bits: u8| match bits {
        3 => flags & !1,
        2 => flags & !2,
        _ => flags,
    };
    let mut best = vec![f64::INFINITY; (n + 1) * width * 4];
    best[idx(n, 0, 0)] = 0.0;
    for i in (0..n).rev() {
        for budget in 0..width {
            for flags in 0..4 {
                let mut m = f64::INFINITY;
                for bits in BIT_OPTIONS {
                    let b = bits as usize;
                    if b > budget {
                        break;
                    }
                    let rest = best[idx(i + 1, budget - b, next_flags(flags, bits))];
                    if rest.is_finite() {
                        m = m.min(p.cost(i, bits) + rest);
                    }
                }
                best[idx(i, budget, flags)] = m;
            }
        }
    }
    let start_flags = if p.floors { 3 } else { 0 };
    let optimum = best[idx(0, p.target_sum as usize, start_flags)];
    if !optimum.is_finite() {
        return Err(Error::Infeasible(Infeasibility::Floors { n, target: p.target_sum }));
    }
    let limit = optimum + tie_slack(optimum);
    let (mut budget, mut flags, mut partial) = (p.target_sum as usize, start_flags, 0f64);
    let mut bits = Vec::with_capacity(n);
    for i in 0..n {
        let choice = BIT_OPTIONS
            .into_iter()
            .filter(|&b| b as usize <= budget)
            .find(|&b| {
                let rest = best[idx(i + 1, budget - b as usize, next_flags(flags, b))];
                rest.is_finite() && partial + p.cost(i, b) + rest <= limit
            })
            .expect("optimal completion exists");
        partial += p.cost(i, choice);
        budget -= choice as usize;
        flags = next_flags(flags, choice);
        bits.push(choice);
    }
    Ok(Solution { objective: p.objective(&bits), bits })
}

/// Enumerates all `3^n` assignments in lexicographic order.
pub fn brute_force_oracle(p: &AllocationProblem) -> Result<Solution> {
    p.validate()?;
    let n = p.n();
    if n > ORACLE_MAX_N {
        return arg_err(format!("brute force limited to {ORACLE_MAX_N} experts, got {n}"));
    }
    let mut feasible: Vec<(Vec<u8>, f64)> = Vec::new();
    let mut bits = vec![1u8; n];
    'enumerate: loop {
        if p.is_feasible(&bits) {
            feasible.push((bits.clone(), p.objective(&bits)));
        }
        // odometer, last index fastest
        let mut pos = n;
        loop {
            if pos == 0 {
                break 'enumerate;
            }
            pos -= 1;
            if bits[pos] < 3 {
                bits[pos] += 1;
                break;
            }
            bits[pos] = 1;
        }
    }
    let Some(min) = feasible.iter().map(|f| f.1).reduce(f64::min) else {
        return Err(Error::Infeasible(
            p.infeasibility().unwrap_or(Infeasibility::Floors { n, target: p.target_sum }),
        ));
    };
    let (bits, objective) = feasible
        .into_iter()
        .find(|f| f.1 <= min + tie_slack(min))
        .expect("minimum is attained");
    Ok(Solution { bits, objective })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// `c = phi^alpha * w^beta` with measured errors.
    #[default]
    Pmq,
    /// Uniform significance; Hessian-weighted RTN error proxy.
    Hessian,
    Frequency,
    Weight,
    Random,
    /// Uniform significance with measured errors.
    Fnorm,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Pmq,
        Strategy::Hessian,
        Strategy::Frequency,
        Strategy::Weight,
        Strategy::Random,
        Strategy::Fnorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Pmq => "pmq",
            Strategy::Hessian => "hessian",
            Strategy::Frequency => "frequency",
            Strategy::Weight => "weight",
            Strategy::Random => "random",
            Strategy::Fnorm => "fnorm",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationParams {
    /// Average expert bit-width per layer.
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub strategy: Strategy,
    pub floors: bool,
    pub seed: u64,
}

impl Default for AllocationParams {
    fn default() -> Self {
        Self {
            k: 2.0,
            alpha: 1.0,
            beta: 2.0,
            gamma: 2.0,
            strategy: Strategy::Pmq,
            floors: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub config_digest: String,
    pub strategy: Strategy,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub bits: Vec<Vec<u8>>,
    pub objective: Vec<f64>,
}

impl BitAllocation {
    /// Every expert at the same width; useful for baselines and debugging.
    pub fn uniform(config_digest: &str, n_layers: usize, n_experts: usize, bits: u8) -> Self {
        Self {
            config_digest: config_digest.to_string(),
            strategy: Strategy::Fnorm,
            k: bits as f64,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            bits: vec![vec![bits; n_experts]; n_layers],
            objective: vec![0.0; n_layers],
        }
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// `n * k` as an integer, or an error suggesting the nearest workable `k`.
pub fn integral_budget(n: usize, k: f64) -> Result<u32> {
    let total = n as f64 * k;
    let rounded = total.round();
    if (total - rounded).abs() > 1e-9 || rounded < 0.0 {
        let lo = total.floor() / n as f64;
        let hi = total.ceil() / n as f64;
        return arg_err(format!(
            "k = {k} gives a non-integral bit total {total} for {n} experts; \
             nearest feasible k values are {lo} and {hi}"
        ));
    }
    Ok(rounded as u32)
}

fn random_assignment(p: &AllocationProblem, rng: &mut SeededRng) -> Result<Vec<u8>> {
    if let Some(why) = p.infeasibility() {
        return Err(Error::Infeasible(why));
    }
    let n = p.n();
    let mut bits = Vec::with_capacity(n);
    let (mut budget, mut need3, mut need2) = (p.target_sum, p.floors, p.floors);
    for i in 0..n {
        let options: Vec<u8> = BIT_OPTIONS
            .into_iter()
            .filter(|&b| {
                b as u32 <= budget
                    && completable(n - i - 1, budget - b as u32, need3 && b != 3, need2 && b != 2)
            })
            .collect();
        let b = options[rng.below(options.len())];
        need3 &= b != 3;
        need2 &= b != 2;
        budget -= b as u32;
        bits.push(b);
    }
    rng.shuffle(&mut bits);
    Ok(bits)
}

/// Solves one allocation per layer for the chosen strategy.
pub fn allocate_model(stats: &ExpertStats, params: &AllocationParams) -> Result<BitAllocation> {
    let n_layers = stats.phi.len();
    let mut rng = SeededRng::new(params.seed);
    let mut bits = Vec::with_capacity(n_layers);
    let mut objective = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let n = stats.phi[l].len();
        let target_sum = integral_budget(n, params.k)?;
        let measured: Vec<[f64; 3]> = stats
            .eps
            .get(l)
            .filter(|rows| rows.len() == n)
            .ok_or_else(|| Error::Argument(format!("stats lack quantization errors for layer {l}")))?
            .iter()
            .map(|e| {
                if e.len() != 3 {
                    return arg_err("each expert needs errors for 1, 2 and 3 bits");
                }
                Ok([e[0] as f64, e[1] as f64, e[2] as f64])
            })
            .collect::<Result<_>>()?;
        let phi: Vec<f64> = stats.phi[l].iter().map(|&v| v as f64).collect();
        let w: Vec<f64> = stats.w[l].iter().map(|&v| v as f64).collect();
        let pmq_significance: Vec<f64> = phi
            .iter()
            .zip(&w)
            .map(|(f, m)| f.powf(params.alpha) * m.powf(params.beta))
            .collect();
        let (significance, eps) = match params.strategy {
            Strategy::Pmq | Strategy::Random => (pmq_significance, measured),
            Strategy::Frequency => (phi, measured),
            Strategy::Weight => (w, measured),
            Strategy::Fnorm => (vec![1.0; n], measured),
            Strategy::Hessian => {
                let proxy = stats
                    .hessian_proxy
                    .as_ref()
                    .and_then(|h| h.get(l))
                    .ok_or_else(|| Error::Argument("stats lack the Hessian error proxy".into()))?;
                let eps = proxy
                    .iter()
                    .map(|e| [e[0] as f64, e[1] as f64, e[2] as f64])
                    .collect();
                (vec![1.0; n], eps)
            }
        };
        let problem = AllocationProblem {
            significance,
            eps,
            target_sum,
            gamma: params.gamma,
            floors: params.floors,
        };
        let solution = if params.strategy == Strategy::Random {
            let b = random_assignment(&problem, &mut rng)?;
            Solution { objective: problem.objective(&b), bits: b }
        } else {
            solve_ip(&problem)?
        };
        bits.push(solution.bits);
        objective.push(solution.objective);
    }
    Ok(BitAllocation {
        config_digest: stats.config_digest.clone(),
        strategy: params.strategy,
        k: params.k,
        alpha: params.alpha,
        beta: params.beta,
        gamma: params.gamma,
        bits,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(c: Vec<f64>, eps: Vec<[f64; 3]>, target: u32, floors: bool) -> AllocationProblem {
        AllocationProblem { significance: c, eps, target_sum: target, gamma: 1.0, floors }
    }

    #[test]
    fn worked_example() {
        let p = problem(vec![4.0, 2.0, 1.0], vec![[0.9, 0.3, 0.1]; 3], 6, true);
        let s = solve_ip(&p).unwrap();
        assert_eq!(s.bits, vec![3, 2, 1]);
        assert!((s.objective - 1.9).abs() < 1e-12);
        assert_eq!(brute_force_oracle(&p).unwrap(), s);
    }

    #[test]
    fn floors_make_small_instance_infeasible() {
        let p = problem(vec![1.0, 1.0], vec![[0.9, 0.3, 0.1]; 2], 4, true);
        let e1 = solve_ip(&p).unwrap_err();
        let e2 = brute_force_oracle(&p).unwrap_err();
        assert!(matches!(e1, Error::Infeasible(Infeasibility::Floors { n: 2, target: 4 })));
        assert_eq!(e1.to_string(), e2.to_string());
        assert_eq!(e1.exit_code(), 3);
    }

    #[test]
    fn budget_out_of_range() {
        let p = problem(vec![1.0; 3], vec![[0.9, 0.3, 0.1]; 3], 10, false);
        assert!(matches!(
            solve_ip(&p),
            Err(Error::Infeasible(Infeasibility::BudgetOutOfRange { .. }))
        ));
    }

    #[test]
    fn symmetric_instance_returns_lex_smallest() {
        let p = problem(vec![1.0; 8], vec![[0.9, 0.3, 0.1]; 8], 20, true);
        let s = solve_ip(&p).unwrap();
        // Lex-smallest vector achieving the optimal multiset.
        let mut sorted = s.bits.clone();
        sorted.sort_unstable();
        assert_eq!(s.bits, sorted);
        assert_eq!(s.bits.iter().map(|&b| b as u32).sum::<u32>(), 20);
    }

    #[test]
    fn single_feasible_vector() {
        let p = problem(vec![1.0, 2.0, 3.0], vec![[0.9, 0.3, 0.1]; 3], 3, false);
        assert_eq!(brute_force_oracle(&p).unwrap().bits, vec![1, 1, 1]);
        assert_eq!(solve_ip(&p).unwrap().bits, vec![1, 1, 1]);
    }

    #[test]
    fn oracle_size_limit() {
        let p = problem(vec![1.0; 11], vec![[0.9, 0.3, 0.1]; 11], 22, true);
        assert!(matches!(brute_force_oracle(&p), Err(Error::Argument(_))));
        assert!(solve_ip(&p).is_ok());
    }

    #[test]
    fn large_instance_solves() {
        let mut rng = SeededRng::new(3);
        let n = 64;
        let c: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let eps: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let a = rng.uniform();
                [a * 3.0, a * 1.5, a]
            })
            .collect();
        let p = AllocationProblem { significance: c, eps, target_sum: 128, gamma: 2.0, floors: true };
        let s = solve_ip(&p).unwrap();
        assert!(p.is_feasible(&s.bits));
    }

    #[test]
    fn non_integral_budget_names_neighbours() {
        assert_eq!(integral_budget(8, 1.375).unwrap(), 11);
        let err = integral_budget(8, 1.3).unwrap_err().to_string();
        assert!(err.contains("1.25") && err.contains("1.375"), "{err}");
        assert_eq!(integral_budget(8, 2.5).unwrap(), 20);
    }

    #[test]
    fn random_strategy_is_seeded_and_feasible() {
        let mut stats = ExpertStats::empty(2, 8, 2);
        stats.phi = vec![vec![0.25; 8]; 2];
        stats.w = vec![vec![0.125; 8]; 2];
        stats.eps = vec![vec![vec![0.9, 0.3, 0.1]; 8]; 2];
        let params = AllocationParams { strategy: Strategy::Random, seed: 5, ..Default::default() };
        let a = allocate_model(&stats, &params).unwrap();
        let b = allocate_model(&stats, &params).unwrap();
        assert_eq!(a, b);
        for layer in &a.bits {
            assert_eq!(layer.iter().map(|&x| x as u32).sum::<u32>(), 16);
            assert!(layer.contains(&3) && layer.contains(&2));
        }
    }

    mod props {
        use super::{brute_force_oracle, solve_ip, AllocationProblem};
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = AllocationProblem> {
            (3usize..=7).prop_flat_map(|n| {
                (
                    proptest::collection::vec(0.0f64..2.0, n),
                    proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), n),
                    n as u32..=3 * n as u32,
                    any::<bool>(),
                    prop_oneof![Just(1.0), Just(2.0)],
                )
                    .prop_map(|(c, e, t, floors, gamma)| AllocationProblem {
                        significance: c,
                        eps: e.into_iter().map(|(a, b, c)| [a, b, c]).collect(),
                        target_sum: t,
                        gamma,
                        floors,
                    })
            })
        }

        proptest! {
            #[test]
            fn solver_matches_oracle(p in instance()) {
                match (solve_ip(&p), brute_force_oracle(&p)) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                    (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
                    (a, b) => prop_assert!(false, "solver {:?} vs oracle {:?}", a, b),
                }
            }

            #[test]
            fn scaling_significance_keeps_argmin(p in instance(), scale in 0.1f64..10.0) {
                if let Ok(a) = solve_ip(&p) {
                    let mut q = p.clone();
                    q.significance.iter_mut().for_each(|c| *c *= scale);
                    let b = solve_ip(&q).unwrap();
                    // Equal up to ties broken by float rounding.
                    prop_assert!((q.objective(&a.bits) - b.objective).abs() <= 1e-9 * b.objective.abs().max(1.0));
                }
            }

            #[test]
            fn higher_significance_never_gets_fewer_bits(
                c in proptest::collection::vec(0.01f64..5.0, 3..=8),
                e3 in 0.01f64..0.3,
                gaps in (0.01f64..0.5, 0.01f64..0.5),
                frac in 0.0f64..1.0,
            ) {
                let n = c.len();
                let row = [e3 + gaps.0 + gaps.1, e3 + gaps.1, e3];
                let lo = n as u32 + 3;
                let target = lo + ((3 * n as u32 - lo) as f64 * frac) as u32;
                let p = AllocationProblem { significance: c.clone(), eps: vec![row; n], target_sum: target, gamma: 2.0, floors: true };
                let s = solve_ip(&p).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        if c[i] > c[j] {
                            prop_assert!(s.bits[i] >= s.bits[j], "{:?} {:?}", c, s.bits);
                        }
                    }
                }
            }
        }
    }
}
