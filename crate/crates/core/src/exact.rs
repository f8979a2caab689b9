//! Exact balanced transport for desk-scale instances, kept free of the iterative
//! solvers so it can serve as an independent oracle.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernels::CostMatrix;
use crate::measures::{ConstraintMode, DiscreteMeasure, TransportPlan};

/// Largest `m1 * m2` accepted by [`exact_ot_enum`].
pub const MAX_ENUM_CELLS: usize = 36;
/// Largest size for the permutation search on uniform equal-size inputs.
pub const MAX_PERMUTATION_SIZE: usize = 8;

#[derive(Debug, Clone)]
pub struct ExactOtResult {
    pub cost: f64,
    pub plan: TransportPlan,
}

fn check_masses(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<()> {
    let (a, b) = (mu.total_mass(), nu.total_mass());
    if (a - b).abs() > 1e-9 * a.max(b).max(1.0) {
        return Err(Error::MassMismatch { source_mass: a, target_mass: b });
    }
    Ok(())
}

fn finish(plan: Array2<f64>, cost: &Array2<f64>) -> Result<ExactOtResult> {
    let total = (&plan * cost).sum();
    Ok(ExactOtResult { cost: total, plan: TransportPlan::new(plan, ConstraintMode::NonNegative)? })
}

/// Monotone (north-west corner) coupling of the sorted supports, optimal for `|x - y|^p`, `p >= 1`.
pub fn exact_ot_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64) -> Result<ExactOtResult> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "1-D transport needs 1-D points, got {} and {}",
            mu.dim(),
            nu.dim()
        )));
    }
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::InvalidConfig(format!("p must be >= 1, got {p}")));
    }
    check_masses(mu, nu)?;
    let (x, y) = (mu.points().column(0), nu.points().column(0));
    let mut rows: Vec<usize> = (0..mu.len()).collect();
    let mut cols: Vec<usize> = (0..nu.len()).collect();
    rows.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    cols.sort_by(|&i, &j| y[i].total_cmp(&y[j]));

    let mut plan = Array2::zeros((mu.len(), nu.len()));
    let mut supply: Vec<f64> = rows.iter().map(|&i| mu.weights()[i]).collect();
    let mut demand: Vec<f64> = cols.iter().map(|&j| nu.weights()[j]).collect();
    let (mut r, mut c) = (0, 0);
    while r < rows.len() && c < cols.len() {
        let flow = supply[r].min(demand[c]);
        plan[[rows[r], cols[c]]] += flow;
        supply[r] -= flow;
        demand[c] -= flow;
        // Advance whichever side is exhausted; on a tie, the row, unless it is the last one.
        if supply[r] <= demand[c] && r + 1 < rows.len() {
            r += 1;
        } else {
            c += 1;
        }
    }
    let cost = Array2::from_shape_fn(plan.dim(), |(i, j)| (x[i] - y[j]).abs().powf(p));
    finish(plan, &cost)
}

/// Exhaustive solution of the balanced transportation problem.
///
/// Uniform inputs of equal size up to [`MAX_PERMUTATION_SIZE`] are solved by trying every
/// permutation. Everything else enumerates every basic feasible solution (spanning-tree basis)
/// and keeps the cheapest.
pub fn exact_ot_enum(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &CostMatrix) -> Result<ExactOtResult> {
    let (m1, m2) = (mu.len(), nu.len());
    if cost.dim() != (m1, m2) {
        return Err(Error::DimensionMismatch(format!("cost is {:?}, supports {m1} x {m2}", cost.dim())));
    }
    check_masses(mu, nu)?;
    if m1 == m2 && m1 <= MAX_PERMUTATION_SIZE && is_uniform(mu) && is_uniform(nu) {
        return permutation_search(mu.total_mass(), &cost.entries);
    }
    if m1 * m2 > MAX_ENUM_CELLS {
        return Err(Error::TooLarge(format!("{m1} x {m2} exceeds {MAX_ENUM_CELLS} cells")));
    }
    tree_search(mu.weights().as_slice().unwrap(), nu.weights().as_slice().unwrap(), &cost.entries)
}

fn is_uniform(m: &DiscreteMeasure) -> bool {
    let w = m.weights();
    let first = w[0];
    w.iter().all(|v| (v - first).abs() <= 1e-12 * first.abs().max(1e-300))
}

fn permutation_search(mass: f64, cost: &Array2<f64>) -> Result<ExactOtResult> {
    let m = cost.nrows();
    let mut perm: Vec<usize> = (0..m).collect();
    let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>();
    let mut best = perm.clone();
    let mut best_score = score(&perm);
    // Heap's algorithm, iterative form.
    let mut counters = vec![0usize; m];
    let mut i = 1;
    while i < m {
        if counters[i] < i {
            let k = if i % 2 == 0 { 0 } else { counters[i] };
            perm.swap(k, i);
            let s = score(&perm);
            if s < best_score {
                best_score = s;
                best.clone_from(&perm);
            }
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    let w = mass / m as f64;
    let mut plan = Array2::zeros((m, m));
    for (i, &j) in best.iter().enumerate() {
        plan[[i, j]] = w;
    }
    finish(plan, cost)
}

/// Enumerates the basic feasible solutions of the transportation polytope.
///
/// A basis is a spanning tree of the bipartite graph on rows and columns, and its flows
/// follow from peeling leaves: a leaf line ships its whole remaining amount to its only
/// neighbour. The search peels one leaf at a time, which only ever produces non-negative
/// flows, and accepts a peeling order only if every removed line was the smallest leaf at
/// its turn, so each tree is visited once. Lines are numbered rows first, then columns.
fn tree_search(supply: &[f64], demand: &[f64], cost: &Array2<f64>) -> Result<ExactOtResult> {
    let (m1, m2) = (supply.len(), demand.len());
    let scale = supply.iter().sum::<f64>().max(1e-300);
    let mut search = LeafSearch {
        m1,
        residual: supply.iter().chain(demand.iter()).copied().collect(),
        active: vec![true; m1 + m2],
        active_rows: m1,
        active_cols: m2,
        last_attached: vec![None; m1 + m2],
        removed: Vec::with_capacity(m1 + m2),
        edges: Vec::with_capacity(m1 + m2),
        cost,
        tol: 1e-12 * scale,
        best_cost: f64::INFINITY,
        best_edges: Vec::new(),
    };
    search.peel(0.0);
    if search.best_cost == f64::INFINITY {
        return Err(Error::InvalidConfig("no feasible transport plan found".into()));
    }
    let mut plan = Array2::zeros((m1, m2));
    for &(i, j, flow) in &search.best_edges {
        plan[[i, j]] += flow;
    }
    finish(plan, cost)
}

struct LeafSearch<'a> {
    m1: usize,
    residual: Vec<f64>,
    active: Vec<bool>,
    active_rows: usize,
    active_cols: usize,
    /// Step at which each line last received a peeled neighbour.
    last_attached: Vec<Option<usize>>,
    /// Peeled line at each step.
    removed: Vec<usize>,
    edges: Vec<(usize, usize, f64)>,
    cost: &'a Array2<f64>,
    tol: f64,
    best_cost: f64,
    best_edges: Vec<(usize, usize, f64)>,
}

impl LeafSearch<'_> {
    fn is_row(&self, line: usize) -> bool {
        line < self.m1
    }

    /// True when `line` has been a leaf since before some peeled line larger than itself,
    /// which means an earlier step did not peel the smallest leaf.
    fn breaks_order(&self, line: usize) -> bool {
        let since = self.last_attached[line].map_or(0, |t| t + 1);
        self.removed[since..].iter().any(|&r| r > line)
    }

    fn peel(&mut self, acc: f64) {
        // Costs are non-negative, so a partial cost already at the incumbent cannot improve.
        if acc >= self.best_cost {
            return;
        }
        let n = self.active.len();
        if self.active_rows + self.active_cols == 1 {
            let last = (0..n).find(|&l| self.active[l]).expect("one line remains");
            if self.residual[last].abs() <= self.tol && !self.breaks_order(last) && acc < self.best_cost {
                self.best_cost = acc;
                self.best_edges.clone_from(&self.edges);
            }
            return;
        }
        for leaf in 0..n {
            if !self.active[leaf] {
                continue;
            }
            let row = self.is_row(leaf);
            let (same, other) =
                if row { (self.active_rows, self.active_cols) } else { (self.active_cols, self.active_rows) };
            // The remaining lines must still form a connected bipartite tree.
            if same == 1 && other > 1 {
                continue;
            }
            if self.breaks_order(leaf) {
                continue;
            }
            let flow = self.residual[leaf];
            let final_pair = self.active_rows + self.active_cols == 2;
            let partners = if row { self.m1..n } else { 0..self.m1 };
            for partner in partners {
                if !self.active[partner] || flow > self.residual[partner] + self.tol {
                    continue;
                }
                let (i, j) = if row { (leaf, partner - self.m1) } else { (partner, leaf - self.m1) };
                let step = self.removed.len();
                let saved_attach = self.last_attached[partner];
                // Restored by value: undoing the subtraction would let rounding drift accumulate.
                let saved_residual = self.residual[partner];
                self.active[leaf] = false;
                if row {
                    self.active_rows -= 1;
                } else {
                    self.active_cols -= 1;
                }
                self.residual[partner] -= flow;
                // With two lines left the survivor was already a leaf; keep its leaf time so the
                // terminal check can reject the order that peels the larger of the pair.
                if !final_pair {
                    self.last_attached[partner] = Some(step);
                }
                self.removed.push(leaf);
                self.edges.push((i, j, flow.max(0.0)));

                self.peel(acc + flow.max(0.0) * self.cost[[i, j]]);

                self.edges.pop();
                self.removed.pop();
                self.last_attached[partner] = saved_attach;
                self.residual[partner] = saved_residual;
                if row {
                    self.active_rows += 1;
                } else {
                    self.active_cols += 1;
                }
                self.active[leaf] = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{cost_points, CostSpec};
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(points: &[f64], weights: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::new(
            Array2::from_shape_vec((points.len(), 1), points.to_vec()).unwrap(),
            Array1::from(weights.to_vec()),
        )
        .unwrap()
    }

    fn check_marginals(r: &ExactOtResult, mu: &DiscreteMeasure, nu: &DiscreteMeasure) {
        let m = r.plan.marginals();
        for (a, b) in m.row_marginal.iter().zip(mu.weights()) {
            assert!((a - b).abs() <= 1e-12, "row {a} vs {b}");
        }
        for (a, b) in m.col_marginal.iter().zip(nu.weights()) {
            assert!((a - b).abs() <= 1e-12, "col {a} vs {b}");
        }
    }

    #[test]
    fn one_d_examples() {
        let d0 = line(&[0.0], &[1.0]);
        let d1 = line(&[1.0], &[1.0]);
        assert_eq!(exact_ot_1d(&d0, &d1, 1.0).unwrap().cost, 1.0);
        let a = line(&[0.0, 1.0], &[0.5, 0.5]);
        let b = line(&[3.0, 2.0], &[0.5, 0.5]);
        let r = exact_ot_1d(&a, &b, 1.0).unwrap();
        assert!((r.cost - 2.0).abs() < 1e-15);
        assert_eq!(r.plan.alpha(), &array![[0.0, 0.5], [0.5, 0.0]]);
        assert_eq!(exact_ot_1d(&a, &a, 1.0).unwrap().cost, 0.0);
    }

    #[test]
    fn one_d_errors() {
        let a = line(&[0.0], &[1.0]);
        let b = line(&[0.0], &[2.0]);
        assert!(matches!(exact_ot_1d(&a, &b, 1.0), Err(Error::MassMismatch { .. })));
        let flat = DiscreteMeasure::uniform(array![[0.0, 1.0]], 1.0).unwrap();
        assert!(matches!(exact_ot_1d(&flat, &flat, 1.0), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn enum_examples() {
        let a = line(&[0.0], &[2.0]);
        let b = line(&[5.0], &[2.0]);
        let r = exact_ot_enum(&a, &b, &CostMatrix::new(array![[3.0]]).unwrap()).unwrap();
        assert_eq!(r.cost, 6.0);
        assert_eq!(r.plan.alpha(), &array![[2.0]]);

        let u = line(&[0.0, 1.0], &[0.5, 0.5]);
        let r = exact_ot_enum(&u, &u, &CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.plan.alpha(), &array![[0.5, 0.0], [0.0, 0.5]]);
    }

    #[test]
    fn three_by_three_matches_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for _ in 0..20 {
            let c = Array2::from_shape_fn((3, 3), |_| rng.random_range(0.0..5.0));
            let u = line(&[0.0, 1.0, 2.0], &[1.0 / 3.0; 3]);
            let r = exact_ot_enum(&u, &u, &CostMatrix::new(c.clone()).unwrap()).unwrap();
            let best = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / 3.0)
                .fold(f64::INFINITY, f64::min);
            assert!((r.cost - best).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_search_agrees_with_permutations_on_uniform_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for m in 1..=4 {
            let c = Array2::from_shape_fn((m, m), |_| rng.random_range(0.0..5.0));
            let w = vec![1.0 / m as f64; m];
            let by_tree = tree_search(&w, &w, &c).unwrap();
            let by_perm = permutation_search(1.0, &c).unwrap();
            assert!((by_tree.cost - by_perm.cost).abs() < 1e-12);
        }
    }

    #[test]
    fn enum_limits() {
        let a = DiscreteMeasure::new(Array2::zeros((7, 1)), Array1::from_elem(7, 1.0)).unwrap();
        let b = DiscreteMeasure::new(Array2::zeros((6, 1)), Array1::from_elem(6, 7.0 / 6.0)).unwrap();
        let c = CostMatrix::new(Array2::zeros((7, 6))).unwrap();
        assert!(matches!(exact_ot_enum(&a, &b, &c), Err(Error::TooLarge(_))));
        let b = DiscreteMeasure::new(Array2::zeros((6, 1)), Array1::from_elem(6, 1.0)).unwrap();
        let c = CostMatrix::new(Array2::zeros((7, 6))).unwrap();
        assert!(matches!(exact_ot_enum(&a, &b, &c), Err(Error::MassMismatch { .. })));
    }

    fn random_line(rng: &mut ChaCha8Rng, m: usize, mass: f64) -> DiscreteMeasure {
        let pts: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        line(&pts, &raw.iter().map(|w| w * mass / s).collect::<Vec<_>>())
    }

    #[test]
    fn enumeration_at_the_cell_limit_matches_one_d() {
        // Long searches used to lose the optimum to rounding drift in the residuals.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (m1, m2) in [(3, 12), (12, 3), (4, 9)] {
            let a = random_line(&mut rng, m1, 1.0);
            let b = random_line(&mut rng, m2, 1.0);
            let c = cost_points(a.points().view(), b.points().view(), &CostSpec::euclidean(1.0)).unwrap();
            let e = exact_ot_enum(&a, &b, &c).unwrap();
            let o = exact_ot_1d(&a, &b, 1.0).unwrap();
            assert!((e.cost - o.cost).abs() <= 1e-10, "{m1}x{m2}: {} vs {}", e.cost, o.cost);
        }
    }

    #[test]
    fn one_d_agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let (m1, m2) = (rng.random_range(1..=5), rng.random_range(1..=5));
            let a = random_line(&mut rng, m1, 1.0);
            let b = random_line(&mut rng, m2, 1.0);
            for p in [1.0, 2.0] {
                let c = cost_points(a.points().view(), b.points().view(), &CostSpec::euclidean(p)).unwrap();
                let e = exact_ot_enum(&a, &b, &c).unwrap();
                let o = exact_ot_1d(&a, &b, p).unwrap();
                assert!((e.cost - o.cost).abs() <= 1e-10, "{} vs {}", e.cost, o.cost);
                check_marginals(&e, &a, &b);
                check_marginals(&o, &a, &b);
                assert!((e.cost - (e.plan.alpha() * &c.entries).sum()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cost_invariant_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_line(&mut rng, 4, 1.0);
        let b = random_line(&mut rng, 3, 1.0);
        let c = cost_points(a.points().view(), b.points().view(), &CostSpec::euclidean(1.0)).unwrap();
        let base = exact_ot_enum(&a, &b, &c).unwrap().cost;
        let rp = [2, 0, 3, 1];
        let cp = [1, 2, 0];
        let a2 = line(
            &rp.iter().map(|&i| a.points()[[i, 0]]).collect::<Vec<_>>(),
            &rp.iter().map(|&i| a.weights()[i]).collect::<Vec<_>>(),
        );
        let b2 = line(
            &cp.iter().map(|&i| b.points()[[i, 0]]).collect::<Vec<_>>(),
            &cp.iter().map(|&i| b.weights()[i]).collect::<Vec<_>>(),
        );
        let c2 = cost_points(a2.points().view(), b2.points().view(), &CostSpec::euclidean(1.0)).unwrap();
        assert!((exact_ot_enum(&a2, &b2, &c2).unwrap().cost - base).abs() < 1e-12);
    }

    #[test]
    fn one_d_cost_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let ms: Vec<_> = (0..3)
                .map(|_| {
                    let m = rng.random_range(1..=5);
                    random_line(&mut rng, m, 2.0)
                })
                .collect();
            let d = |x: &DiscreteMeasure, y: &DiscreteMeasure| exact_ot_1d(x, y, 1.0).unwrap().cost;
            assert!(d(&ms[0], &ms[2]) <= d(&ms[0], &ms[1]) + d(&ms[1], &ms[2]) + 1e-12);
        }
    }
}
