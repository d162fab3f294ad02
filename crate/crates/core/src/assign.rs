use crate::error::{DvtError, Result};
use crate::tensor::Tensor;

/// Pairwise cost table for bipartite assignment. Entries must be finite
/// except for the +inf sentinel, which forbids a pair.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * m {
            return Err(DvtError::InvalidShape {
                op: "CostMatrix::new",
                details: format!("{n}x{m} needs {} values, got {}", n * m, values.len()),
            });
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(DvtError::NonFinite("cost matrix".into()));
        }
        Ok(Self { n, m, values })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }
}

/// Row-to-column assignment; `mapping[i]` is the column chosen for row i.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub mapping: Vec<usize>,
    pub total_cost: f64,
}

/// Which similarity drives adjacent-frame query matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    Cosine,
    NegativeDot,
}

impl Default for CostMetric {
    fn default() -> Self {
        CostMetric::Cosine
    }
}

/// Minimum-cost assignment with a deterministic tie-break: among all optimal
/// assignments, the lexicographically smallest mapping is returned.
///
/// Internally the matrix is padded to square with a large finite constant
/// (dummy rows see a uniform cost, so they never change which real pairs are
/// optimal) and +inf sentinels are replaced by a constant large enough that
/// a forbidden pair is never chosen while a feasible assignment exists.
pub fn hungarian_min(cost: &CostMatrix) -> Result<Assignment> {
    if cost.n > cost.m {
        return Err(DvtError::InvalidShape {
            op: "hungarian_min",
            details: format!("{}x{} has more rows than columns", cost.n, cost.m),
        });
    }
    if cost.n == 0 {
        return Ok(Assignment {
            mapping: Vec::new(),
            total_cost: 0.0,
        });
    }
    for i in 0..cost.n {
        if (0..cost.m).all(|j| cost.at(i, j) == f64::INFINITY) {
            return Err(DvtError::Eval(format!(
                "assignment infeasible: row {i} forbids every column"
            )));
        }
    }

    let size = cost.m;
    let max_abs = cost
        .values
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    // Any total using one forbidden pair must exceed any fully feasible total.
    let forbid = (2 * size + 1) as f64 * max_abs + 1.0;
    let pad = 10.0 * max_abs + 1.0;

    let entry = |i: usize, j: usize| -> f64 {
        if i >= cost.n {
            pad
        } else {
            let v = cost.at(i, j);
            if v == f64::INFINITY {
                forbid
            } else {
                v
            }
        }
    };

    let mapping = solve_square(size, &entry);
    let mapping: Vec<usize> = mapping[..cost.n].to_vec();

    // Refine to the lexicographically smallest optimal mapping: fix columns
    // row by row, always choosing the smallest column that still completes
    // to the optimal total.
    let best_total: f64 = mapping
        .iter()
        .enumerate()
        .map(|(i, &j)| entry(i, j))
        .sum();
    let eps = 1e-9 * (1.0 + best_total.abs());

    let mut chosen: Vec<usize> = Vec::with_capacity(cost.n);
    let mut prefix_cost = 0.0;
    for i in 0..cost.n {
        let mut picked = None;
        for c in 0..cost.m {
            if chosen.contains(&c) || cost.at(i, c) == f64::INFINITY {
                continue;
            }
            let rest = optimal_rest(cost, i + 1, &chosen, c, &entry);
            if prefix_cost + entry(i, c) + rest <= best_total + eps {
                picked = Some(c);
                break;
            }
        }
        let c = picked.ok_or_else(|| {
            DvtError::Eval(format!("assignment infeasible at row {i}"))
        })?;
        prefix_cost += entry(i, c);
        chosen.push(c);
    }

    let total_cost: f64 = chosen.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
    if !total_cost.is_finite() {
        return Err(DvtError::Eval(
            "assignment infeasible: forbidden pair unavoidable".into(),
        ));
    }
    Ok(Assignment {
        mapping: chosen,
        total_cost,
    })
}

/// Optimal cost of assigning rows `from..n` to the columns not used by the
/// prefix nor by `extra`.
fn optimal_rest(
    cost: &CostMatrix,
    from: usize,
    chosen: &[usize],
    extra: usize,
    entry: &impl Fn(usize, usize) -> f64,
) -> f64 {
    let free_cols: Vec<usize> = (0..cost.m)
        .filter(|c| !chosen.contains(c) && *c != extra)
        .collect();
    let rows: Vec<usize> = (from..cost.n).collect();
    if rows.is_empty() {
        return 0.0;
    }
    let sub = |ri: usize, cj: usize| entry(rows[ri], free_cols[cj]);
    let sub_size = free_cols.len();
    let padded = |ri: usize, cj: usize| if ri >= rows.len() { 0.0 } else { sub(ri, cj) };
    let mapping = solve_square(sub_size, &padded);
    mapping[..rows.len()]
        .iter()
        .enumerate()
        .map(|(ri, &cj)| sub(ri, cj))
        .sum()
}

/// Shortest-augmenting-path assignment on an implicit square matrix.
/// Returns the column chosen for each row.
fn solve_square(size: usize, entry: &impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut p = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];

    for i in 1..=size {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=size {
                if !used[j] {
                    let cur = entry(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut mapping = vec![0usize; size];
    for j in 1..=size {
        if p[j] > 0 {
            mapping[p[j] - 1] = j - 1;
        }
    }
    mapping
}

/// Exhaustive minimum over every injective row-to-column mapping. Exponential;
/// only for verification at small sizes. Enumerates mappings in lexicographic
/// order, so ties resolve to the lexicographically smallest mapping.
pub fn brute_force_min(cost: &CostMatrix) -> Result<Assignment> {
    if cost.n > cost.m {
        return Err(DvtError::InvalidShape {
            op: "brute_force_min",
            details: format!("{}x{} has more rows than columns", cost.n, cost.m),
        });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut current = Vec::with_capacity(cost.n);
    let mut used = vec![false; cost.m];
    fn recurse(
        cost: &CostMatrix,
        row: usize,
        acc: f64,
        current: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if row == cost.rows() {
            if best.as_ref().map_or(true, |(_, b)| acc < *b) {
                *best = Some((current.clone(), acc));
            }
            return;
        }
        for j in 0..cost.cols() {
            if used[j] {
                continue;
            }
            let c = cost.at(row, j);
            if c == f64::INFINITY {
                continue;
            }
            used[j] = true;
            current.push(j);
            recurse(cost, row + 1, acc + c, current, used, best);
            current.pop();
            used[j] = false;
        }
    }
    recurse(cost, 0, 0.0, &mut current, &mut used, &mut best);
    match best {
        Some((mapping, total_cost)) => Ok(Assignment {
            mapping,
            total_cost,
        }),
        None => Err(DvtError::Eval("assignment infeasible".into())),
    }
}

/// cost[i][j] = 1 - cos(A_i, B_j), in [0, 2]. A zero-norm row contributes
/// similarity 0 (cost 1) and logs a diagnostic.
pub fn cosine_cost(a: &Tensor, b: &Tensor) -> Result<CostMatrix> {
    pairwise_cost(a, b, CostMetric::Cosine)
}

pub fn pairwise_cost(a: &Tensor, b: &Tensor, metric: CostMetric) -> Result<CostMatrix> {
    let (n, da) = a.as_2d();
    let (m, db) = b.as_2d();
    if da != db {
        return Err(DvtError::ShapeMismatch {
            op: "pairwise_cost",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let norm = |row: &[f64]| row.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut values = Vec::with_capacity(n * m);
    for i in 0..n {
        let ra = a.row(i);
        let na = norm(ra);
        for j in 0..m {
            let rb = b.row(j);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let v = match metric {
                CostMetric::Cosine => {
                    let nb = norm(rb);
                    if na == 0.0 || nb == 0.0 {
                        log::warn!("cosine_cost: zero-norm row (a[{i}] or b[{j}]), treating similarity as 0");
                        1.0
                    } else {
                        (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
                    }
                }
                CostMetric::NegativeDot => -dot,
            };
            values.push(v);
        }
    }
    CostMatrix::new(n, m, values)
}

/// Reorder `cur` rows so slot n keeps the identity it had in `prev_matched`.
/// Returns the reordered tensor and the permutation: slot n takes row
/// `perm[n]` of `cur`.
pub fn match_adjacent(
    prev_matched: &Tensor,
    cur: &Tensor,
    metric: CostMetric,
) -> Result<(Tensor, Vec<usize>)> {
    if prev_matched.shape() != cur.shape() {
        return Err(DvtError::ShapeMismatch {
            op: "match_adjacent",
            left: prev_matched.shape().to_vec(),
            right: cur.shape().to_vec(),
        });
    }
    let cost = pairwise_cost(prev_matched, cur, metric)?;
    let assignment = hungarian_min(&cost)?;
    let (n, d) = cur.as_2d();
    let mut data = Vec::with_capacity(n * d);
    for &j in &assignment.mapping {
        data.extend_from_slice(cur.row(j));
    }
    Ok((
        Tensor::new(cur.shape().to_vec(), data)?,
        assignment.mapping,
    ))
}

/// Apply a slot permutation to any row-major per-slot tensor (same convention
/// as `match_adjacent`: output row n = input row perm[n]).
pub fn permute_rows(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (n, d) = x.as_2d();
    if perm.len() != n {
        return Err(DvtError::InvalidShape {
            op: "permute_rows",
            details: format!("{} rows vs {} permutation entries", n, perm.len()),
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for &j in perm {
        data.extend_from_slice(x.row(j));
    }
    Tensor::new(x.shape().to_vec(), data)
}
