//! Conditional datasets and the ways of pairing their samples.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};

/// Per-condition source and target samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDataset {
    dim: usize,
    sources: Vec<Tensor>,
    targets: Vec<Tensor>,
    weights: Vec<f64>,
}

impl ConditionalDataset {
    /// Dataset with uniform condition weights.
    pub fn new(sources: Vec<Tensor>, targets: Vec<Tensor>) -> Result<Self> {
        let q = sources.len();
        Self::with_weights(sources, targets, vec![1.0 / q.max(1) as f64; q])
    }

    /// Weights are normalised to sum to one.
    pub fn with_weights(sources: Vec<Tensor>, targets: Vec<Tensor>, weights: Vec<f64>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::TooFewConditions { needed: 1, got: 0 });
        }
        if sources.len() != targets.len() || sources.len() != weights.len() {
            return Err(invalid(format!(
                "{} source sets, {} target sets and {} weights",
                sources.len(),
                targets.len(),
                weights.len()
            )));
        }
        let dim = sources[0].cols();
        for (q, (s, t)) in sources.iter().zip(&targets).enumerate() {
            for (m, domain) in [(s, "source"), (t, "target")] {
                if m.shape().len() != 2 || m.rows() == 0 {
                    return Err(Error::EmptyCondition { cond: q, domain });
                }
                if m.cols() != dim {
                    return Err(Error::DimMismatch {
                        context: format!("condition {q} {domain} samples"),
                        expected: dim,
                        got: m.cols(),
                    });
                }
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(total > 0.0) {
            return Err(invalid(format!("condition weights must be non-negative with positive sum, got {weights:?}")));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self {
            dim,
            sources,
            targets,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_conditions(&self) -> usize {
        self.sources.len()
    }

    pub fn source(&self, q: usize) -> &Tensor {
        &self.sources[q]
    }

    pub fn target(&self, q: usize) -> &Tensor {
        &self.targets[q]
    }

    pub fn sources(&self) -> &[Tensor] {
        &self.sources
    }

    pub fn targets(&self) -> &[Tensor] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_cond(&self, q: usize) -> Result<()> {
        if q < self.num_conditions() {
            Ok(())
        } else {
            Err(invalid(format!(
                "condition {q} out of range for {} conditions",
                self.num_conditions()
            )))
        }
    }
}

/// Paired rows with the condition each pair was drawn under.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub cond: Vec<usize>,
    /// Seed of the sampler that produced the batch.
    pub seed: u64,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }
}

/// Draws pair batches from a dataset with its own seeded stream.
#[derive(Clone, Debug)]
pub struct Sampler {
    seed: u64,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Condition index drawn from the dataset weights.
    pub fn condition(&mut self, ds: &ConditionalDataset) -> usize {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (q, w) in ds.weights().iter().enumerate() {
            acc += w;
            if u < acc {
                return q;
            }
        }
        ds.weights().iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    fn rows(&mut self, m: &Tensor, n: usize) -> Tensor {
        let idx: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..m.rows())).collect();
        m.select_rows(&idx)
    }

    /// `n` pairs from the product of condition `q`'s source and target
    /// samples, with replacement.
    pub fn independent(&mut self, ds: &ConditionalDataset, q: usize, n: usize) -> Result<PairBatch> {
        ds.check_cond(q)?;
        if n == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        let x = self.rows(ds.source(q), n);
        let y = self.rows(ds.target(q), n);
        Ok(PairBatch {
            x,
            y,
            cond: vec![q; n],
            seed: self.seed,
        })
    }

    /// `n` pairs from the product of the marginals, ignoring conditions.
    /// `cond` records the condition of each source row.
    pub fn marginal(&mut self, ds: &ConditionalDataset, n: usize) -> Result<PairBatch> {
        if n == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        let d = ds.dim();
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n * d);
        let mut cond = Vec::with_capacity(n);
        for _ in 0..n {
            let qx = self.condition(ds);
            let qy = self.condition(ds);
            let sx = ds.source(qx);
            let ty = ds.target(qy);
            x.extend_from_slice(sx.row(self.rng.random_range(0..sx.rows())));
            y.extend_from_slice(ty.row(self.rng.random_range(0..ty.rows())));
            cond.push(qx);
        }
        Ok(PairBatch {
            x: Tensor::matrix(n, d, x)?,
            y: Tensor::matrix(n, d, y)?,
            cond,
            seed: self.seed,
        })
    }
}

/// One-shot independent conditional coupling.
pub fn independent_coupling(ds: &ConditionalDataset, q: usize, n: usize, seed: u64) -> Result<PairBatch> {
    Sampler::new(seed).independent(ds, q, n)
}

fn check_cost(cost: &Tensor) -> Result<usize> {
    if cost.shape().len() != 2 {
        return Err(invalid(format!("cost must be a matrix, got shape {:?}", cost.shape())));
    }
    let (r, c) = (cost.rows(), cost.cols());
    if r != c {
        return Err(Error::NonSquare { rows: r, cols: c });
    }
    Ok(r)
}

/// Minimum-cost assignment. `perm[i]` is the column given to row `i`.
/// Among optimal assignments the lexicographically smallest is returned.
pub fn hungarian(cost: &Tensor) -> Result<Vec<usize>> {
    let n = check_cost(cost)?;
    let c = |i: usize, j: usize| cost.data()[i * n + j];

    // Shortest augmenting paths with dual potentials; on ties an unassigned
    // column is preferred, which keeps paths short on near-uniform costs.
    const FREE: usize = usize::MAX;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut row_to_col = vec![FREE; n];
    let mut col_to_row = vec![FREE; n];
    let mut path = vec![FREE; n];
    let mut shortest = vec![f64::INFINITY; n];
    let mut row_seen = vec![false; n];
    let mut col_seen = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);
    for cur in 0..n {
        remaining.clear();
        remaining.extend((0..n).rev());
        shortest.fill(f64::INFINITY);
        row_seen.fill(false);
        col_seen.fill(false);
        let mut min_val = 0.0;
        let mut i = cur;
        let sink = loop {
            row_seen[i] = true;
            let row = &cost.data()[i * n..(i + 1) * n];
            let ui = u[i];
            let mut lowest = f64::INFINITY;
            let mut index = 0;
            for (it, &j) in remaining.iter().enumerate() {
                let r = min_val + row[j] - ui - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && col_to_row[j] == FREE) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining.swap_remove(index);
            col_seen[j] = true;
            if col_to_row[j] == FREE {
                break j;
            }
            i = col_to_row[j];
        };
        u[cur] += min_val;
        for r in 0..n {
            if row_seen[r] && r != cur {
                u[r] += min_val - shortest[row_to_col[r]];
            }
        }
        for j in 0..n {
            if col_seen[j] {
                v[j] -= min_val - shortest[j];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            col_to_row[j] = r;
            std::mem::swap(&mut row_to_col[r], &mut j);
            if r == cur {
                break;
            }
        }
    }

    let scale = cost.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-10 * (1.0 + scale);
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (c(i, j) - u[i] - v[j]).abs() <= tol)
                .collect()
        })
        .collect();
    let refined = lexicographic_matching(&tight, row_to_col.clone());
    if assignment_cost(cost, &refined) <= assignment_cost(cost, &row_to_col) {
        Ok(refined)
    } else {
        Ok(row_to_col)
    }
}

/// Sum of `cost[i][perm[i]]` in row order.
pub fn assignment_cost(cost: &Tensor, perm: &[usize]) -> f64 {
    let n = perm.len();
    perm.iter().enumerate().map(|(i, &j)| cost.data()[i * n + j]).sum()
}

/// Lexicographically smallest perfect matching in the bipartite graph given
/// by `adj`, starting from the perfect matching `row_to_col`.
fn lexicographic_matching(adj: &[Vec<usize>], mut row_to_col: Vec<usize>) -> Vec<usize> {
    let n = adj.len();
    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut prev_row = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut queue = Vec::with_capacity(n);
    for i in 0..n {
        for &j in &adj[i] {
            if j == row_to_col[i] {
                break;
            }
            if col_to_row[j] < i {
                continue;
            }
            // Row k = owner of j must move; search an alternating path from k
            // through rows > i that ends at the column i releases.
            let release = row_to_col[i];
            let k = col_to_row[j];
            seen.fill(false);
            queue.clear();
            queue.push(k);
            prev_row[k] = usize::MAX;
            seen[j] = true;
            let mut found = None;
            let mut head = 0;
            'bfs: while head < queue.len() {
                let r = queue[head];
                head += 1;
                for &cj in &adj[r] {
                    if seen[cj] {
                        continue;
                    }
                    seen[cj] = true;
                    if cj == release {
                        found = Some((r, cj));
                        break 'bfs;
                    }
                    let owner = col_to_row[cj];
                    if owner <= i {
                        continue;
                    }
                    prev_row[owner] = r;
                    queue.push(owner);
                }
            }
            if let Some((mut r, mut cj)) = found {
                loop {
                    let old = row_to_col[r];
                    row_to_col[r] = cj;
                    col_to_row[cj] = r;
                    if r == k {
                        break;
                    }
                    cj = old;
                    r = prev_row[r];
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
    }
    row_to_col
}

/// Exhaustive search over all permutations in lexicographic order, keeping
/// the first strict improvement. Exponential; for tests and tiny inputs.
pub fn brute_force_assignment(cost: &Tensor) -> Result<Vec<usize>> {
    let n = check_cost(cost)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = assignment_cost(cost, &perm);
    while next_permutation(&mut perm) {
        let c = assignment_cost(cost, &perm);
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let Some(i) = (0..p.len() - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..p.len()).rev().find(|&j| p[j] > p[i]).expect("successor exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Squared Euclidean cost between rows of `x` and rows of `y`.
pub fn sq_euclidean_cost(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.cols() != y.cols() {
        return Err(Error::DimMismatch {
            context: "cost matrix rows".into(),
            expected: x.cols(),
            got: y.cols(),
        });
    }
    let mut data = Vec::with_capacity(x.rows() * y.rows());
    for a in x.rows_iter() {
        for b in y.rows_iter() {
            data.push(a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum());
        }
    }
    Ok(Tensor::matrix(x.rows(), y.rows(), data)?)
}

/// Euclidean cost between rows of `x` and rows of `y`.
pub fn euclidean_cost(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut c = sq_euclidean_cost(x, y)?;
    c.data_mut().iter_mut().for_each(|v| *v = v.sqrt());
    Ok(c)
}

/// Permutation of `y` rows minimising the total squared distance to `x` rows.
pub fn ot_assignment(x: &Tensor, y: &Tensor) -> Result<Vec<usize>> {
    if x.rows() != y.rows() {
        return Err(invalid(format!(
            "OT coupling needs equal batch sizes, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    hungarian(&sq_euclidean_cost(x, y)?)
}

/// Which rows may be matched to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OtScope {
    /// The whole batch is one matching problem.
    Batch,
    /// Rows only match rows with the same condition index.
    PerCondition,
}

/// Re-pairs the `y` rows of a batch by minibatch optimal transport.
pub fn ot_coupling(batch: &PairBatch, scope: OtScope) -> Result<PairBatch> {
    let n = batch.len();
    if batch.x.rows() != n || batch.y.rows() != n {
        return Err(invalid(format!(
            "OT coupling needs equal batch sizes, got {} and {}",
            batch.x.rows(),
            batch.y.rows()
        )));
    }
    let groups: Vec<Vec<usize>> = match scope {
        OtScope::Batch => vec![(0..n).collect()],
        OtScope::PerCondition => {
            let q = batch.cond.iter().copied().max().map_or(0, |m| m + 1);
            let mut g = vec![Vec::new(); q];
            for (i, &c) in batch.cond.iter().enumerate() {
                g[c].push(i);
            }
            g.retain(|g| !g.is_empty());
            g
        }
    };
    let mut y_idx: Vec<usize> = (0..n).collect();
    for rows in &groups {
        let xs = batch.x.select_rows(rows);
        let ys = batch.y.select_rows(rows);
        let perm = ot_assignment(&xs, &ys)?;
        for (a, &b) in perm.iter().enumerate() {
            y_idx[rows[a]] = rows[b];
        }
    }
    Ok(PairBatch {
        x: batch.x.clone(),
        y: batch.y.select_rows(&y_idx),
        cond: batch.cond.clone(),
        seed: batch.seed,
    })
}
