//! Exact earth mover's distance between discrete distributions.
//!
//! [`solve_emd`] runs the primal network simplex on the bipartite transport
//! graph. The basis is a spanning tree of `rows + cols - 1` cells, seeded by
//! the least-cost rule; entering cells come from a block search over reduced
//! costs and leave through the tree cycle they close. After a long streak of
//! degenerate pivots the solver switches to Bland's rule, which cannot cycle.
//!
//! [`oracle::emd_oracle`] solves the same LP with a dense two-phase tableau
//! and exists to cross-check the solver on small instances.

pub mod oracle;

use crate::mask::Mask;
use crate::visual::CostMatrix;

pub use oracle::emd_oracle;

/// Marginals must sum to one within this tolerance.
pub const MASS_TOLERANCE: f64 = 1e-9;
/// Reduced costs above `-PRICE_TOLERANCE` count as non-negative.
const PRICE_TOLERANCE: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("supply sums to {supply}, demand to {demand}; both must be 1")]
    UnbalancedProblem { supply: f64, demand: f64 },
    #[error("supply or demand has no mass")]
    InfeasibleZeroMass,
    #[error("negative or non-finite weight")]
    InvalidWeight,
    #[error("cost matrix has {got} entries, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cost entry {0} is not finite")]
    NonFiniteCost(usize),
    #[error("proposal mask has no foreground cell")]
    EmptyProposalMask,
    #[error("support masks hold {masks} foreground cells, cost matrix has {rows} rows")]
    SupportMismatch { masks: usize, rows: usize },
    #[error("problem has {cells} cells; the oracle is limited to {limit}")]
    TooLarge { cells: usize, limit: usize },
    #[error("no optimum after {0} pivots")]
    IterationLimit(usize),
}

/// Cost matrix (`rows x cols`, row-major) plus source and sink weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    rows: usize,
    cols: usize,
    cost: Vec<f64>,
    supply: Vec<f64>,
    demand: Vec<f64>,
}

impl TransportProblem {
    pub fn new(cost: Vec<f64>, supply: Vec<f64>, demand: Vec<f64>) -> Result<Self, TransportError> {
        let (rows, cols) = (supply.len(), demand.len());
        if rows == 0 || cols == 0 {
            return Err(TransportError::InfeasibleZeroMass);
        }
        if cost.len() != rows * cols {
            return Err(TransportError::DimMismatch {
                expected: rows * cols,
                got: cost.len(),
            });
        }
        if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
            return Err(TransportError::NonFiniteCost(i));
        }
        if supply
            .iter()
            .chain(&demand)
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(TransportError::InvalidWeight);
        }
        let (s, d): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
        if s == 0.0 || d == 0.0 {
            return Err(TransportError::InfeasibleZeroMass);
        }
        if (s - 1.0).abs() > MASS_TOLERANCE || (d - 1.0).abs() > MASS_TOLERANCE {
            return Err(TransportError::UnbalancedProblem {
                supply: s,
                demand: d,
            });
        }
        Ok(Self {
            rows,
            cols,
            cost,
            supply,
            demand,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cost(&self, row: usize, col: usize) -> f64 {
        self.cost[row * self.cols + col]
    }

    pub fn costs(&self) -> &[f64] {
        &self.cost
    }

    pub fn supply(&self) -> &[f64] {
        &self.supply
    }

    pub fn demand(&self) -> &[f64] {
        &self.demand
    }

    /// Swaps the roles of sources and sinks.
    pub fn transposed(&self) -> Self {
        let mut cost = vec![0.0; self.cost.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                cost[j * self.rows + i] = self.cost(i, j);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            cost,
            supply: self.demand.clone(),
            demand: self.supply.clone(),
        }
    }

    /// Total cost of a dense plan.
    pub fn plan_cost(&self, plan: &[f64]) -> f64 {
        plan.iter().zip(&self.cost).map(|(x, c)| x * c).sum()
    }
}

/// An optimal plan; `flows` lists basic cells with positive flow.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    pub value: f64,
    pub rows: usize,
    pub cols: usize,
    pub flows: Vec<(usize, usize, f64)>,
    pub pivots: usize,
}

impl TransportSolution {
    pub fn dense_plan(&self) -> Vec<f64> {
        let mut plan = vec![0.0; self.rows * self.cols];
        for &(i, j, f) in &self.flows {
            plan[i * self.cols + j] += f;
        }
        plan
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for &(i, _, f) in &self.flows {
            out[i] += f;
        }
        out
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for &(_, j, f) in &self.flows {
            out[j] += f;
        }
        out
    }
}

/// Spanning-tree basis over `rows + cols` nodes; node `i < rows` is a source,
/// node `rows + j` a sink.
struct Basis<'a> {
    p: &'a TransportProblem,
    cell: Vec<usize>,
    flow: Vec<f64>,
    adj: Vec<Vec<usize>>,
    potential: Vec<f64>,
    parent_slot: Vec<usize>,
    depth: Vec<usize>,
    order: Vec<usize>,
}

const NO_SLOT: usize = usize::MAX;

impl<'a> Basis<'a> {
    /// Least-cost seeding: repeatedly fill the cheapest cell whose row and
    /// column are still open, then close exactly one of the two lines. Each
    /// step closes one line, so the `rows + cols - 1` chosen cells form a tree.
    fn least_cost(p: &'a TransportProblem) -> Self {
        let (n, m) = (p.rows, p.cols);
        let mut order: Vec<usize> = (0..n * m).collect();
        order.sort_by(|&a, &b| p.cost[a].total_cmp(&p.cost[b]).then(a.cmp(&b)));
        let mut supply = p.supply.clone();
        let mut demand = p.demand.clone();
        let mut row_open = vec![true; n];
        let mut col_open = vec![true; m];
        let (mut rows_left, mut cols_left) = (n, m);
        let mut cell = Vec::with_capacity(n + m - 1);
        let mut flow = Vec::with_capacity(n + m - 1);
        for &c in &order {
            if cell.len() == n + m - 1 {
                break;
            }
            let (i, j) = (c / m, c % m);
            if !row_open[i] || !col_open[j] {
                continue;
            }
            let x = supply[i].min(demand[j]);
            supply[i] -= x;
            demand[j] -= x;
            cell.push(c);
            flow.push(x);
            let close_row = if rows_left == 1 {
                false
            } else if cols_left == 1 {
                true
            } else {
                supply[i] <= demand[j]
            };
            if close_row {
                row_open[i] = false;
                rows_left -= 1;
            } else {
                col_open[j] = false;
                cols_left -= 1;
            }
        }
        debug_assert_eq!(cell.len(), n + m - 1);
        let mut adj = vec![Vec::new(); n + m];
        for (slot, &c) in cell.iter().enumerate() {
            adj[c / m].push(slot);
            adj[n + c % m].push(slot);
        }
        Self {
            p,
            cell,
            flow,
            adj,
            potential: vec![0.0; n + m],
            parent_slot: vec![NO_SLOT; n + m],
            depth: vec![0; n + m],
            order: Vec::with_capacity(n + m),
        }
    }

    fn ends(&self, slot: usize) -> (usize, usize) {
        let c = self.cell[slot];
        (c / self.p.cols, self.p.rows + c % self.p.cols)
    }

    /// Recomputes potentials, parents and depths by a traversal from node 0.
    fn refresh(&mut self) {
        let nodes = self.p.rows + self.p.cols;
        self.parent_slot.iter_mut().for_each(|s| *s = NO_SLOT);
        self.order.clear();
        self.order.push(0);
        self.potential[0] = 0.0;
        self.depth[0] = 0;
        let mut head = 0;
        while head < self.order.len() {
            let u = self.order[head];
            head += 1;
            for k in 0..self.adj[u].len() {
                let slot = self.adj[u][k];
                if slot == self.parent_slot[u] {
                    continue;
                }
                let (r, c) = self.ends(slot);
                let v = if u == r { c } else { r };
                let cost = self.p.cost[self.cell[slot]];
                // u_i + v_j = c_ij on every basic cell
                self.potential[v] = cost - self.potential[u];
                self.parent_slot[v] = slot;
                self.depth[v] = self.depth[u] + 1;
                self.order.push(v);
            }
        }
        debug_assert_eq!(self.order.len(), nodes, "basis is not a spanning tree");
    }

    fn reduced_cost(&self, c: usize) -> f64 {
        let (i, j) = (c / self.p.cols, c % self.p.cols);
        self.p.cost[c] - self.potential[i] - self.potential[self.p.rows + j]
    }

    fn parent_node(&self, v: usize) -> usize {
        let (r, c) = self.ends(self.parent_slot[v]);
        if v == r {
            c
        } else {
            r
        }
    }

    /// Tree path from the sink of `entering` to its source, as slots.
    fn cycle(&self, entering: usize) -> Vec<usize> {
        let mut a = entering / self.p.cols;
        let mut b = self.p.rows + entering % self.p.cols;
        let mut from_sink = Vec::new();
        let mut from_source = Vec::new();
        while self.depth[b] > self.depth[a] {
            from_sink.push(self.parent_slot[b]);
            b = self.parent_node(b);
        }
        while self.depth[a] > self.depth[b] {
            from_source.push(self.parent_slot[a]);
            a = self.parent_node(a);
        }
        while a != b {
            from_sink.push(self.parent_slot[b]);
            b = self.parent_node(b);
            from_source.push(self.parent_slot[a]);
            a = self.parent_node(a);
        }
        from_sink.extend(from_source.into_iter().rev());
        from_sink
    }

    /// Pivots `entering` into the basis. Returns the step length.
    fn pivot(&mut self, entering: usize, bland: bool) -> f64 {
        let path = self.cycle(entering);
        // Slots at even positions lose flow, odd positions gain.
        let mut leave = path[0];
        for &slot in path.iter().step_by(2) {
            let better = if bland {
                self.flow[slot] < self.flow[leave]
                    || (self.flow[slot] == self.flow[leave] && self.cell[slot] < self.cell[leave])
            } else {
                self.flow[slot] < self.flow[leave]
            };
            if better {
                leave = slot;
            }
        }
        let theta = self.flow[leave];
        for (k, &slot) in path.iter().enumerate() {
            if k % 2 == 0 {
                self.flow[slot] -= theta;
            } else {
                self.flow[slot] += theta;
            }
        }
        let (r, c) = self.ends(leave);
        self.adj[r].retain(|&s| s != leave);
        self.adj[c].retain(|&s| s != leave);
        self.cell[leave] = entering;
        self.flow[leave] = theta;
        let (r, c) = self.ends(leave);
        self.adj[r].push(leave);
        self.adj[c].push(leave);
        theta
    }
}

/// Solves the transport problem exactly.
pub fn solve_emd(p: &TransportProblem) -> Result<TransportSolution, TransportError> {
    let (n, m) = (p.rows, p.cols);
    let cells = n * m;
    let mut basis = Basis::least_cost(p);
    let block = ((cells as f64).sqrt().ceil() as usize).max(16).min(cells);
    let max_pivots = 50 * cells + 1000;
    let degenerate_limit = 2 * (n + m) + 50;
    let mut degenerate_streak = 0usize;
    let mut bland = false;
    let mut cursor = 0usize;
    let mut pivots = 0usize;

    loop {
        basis.refresh();
        let entering = if bland {
            (0..cells).find(|&c| basis.reduced_cost(c) < -PRICE_TOLERANCE)
        } else {
            let mut best = None;
            let mut best_rc = -PRICE_TOLERANCE;
            let mut scanned = 0;
            while scanned < cells {
                let stop = (scanned + block).min(cells);
                while scanned < stop {
                    let c = cursor;
                    cursor = if cursor + 1 == cells { 0 } else { cursor + 1 };
                    scanned += 1;
                    let rc = basis.reduced_cost(c);
                    if rc < best_rc {
                        best_rc = rc;
                        best = Some(c);
                    }
                }
                if best.is_some() {
                    break;
                }
            }
            best
        };
        let Some(entering) = entering else {
            break;
        };
        if pivots == max_pivots {
            return Err(TransportError::IterationLimit(pivots));
        }
        let theta = basis.pivot(entering, bland);
        pivots += 1;
        if theta > 0.0 {
            degenerate_streak = 0;
        } else {
            degenerate_streak += 1;
            if degenerate_streak > degenerate_limit {
                bland = true;
            }
        }
    }

    let mut flows: Vec<(usize, usize, f64)> = basis
        .cell
        .iter()
        .zip(&basis.flow)
        .filter(|(_, &f)| f > 0.0)
        .map(|(&c, &f)| (c / m, c % m, f))
        .collect();
    flows.sort_by_key(|&(i, j, _)| (i, j));
    let value = flows.iter().map(|&(i, j, f)| f * p.cost(i, j)).sum::<f64>();
    Ok(TransportSolution {
        value,
        rows: n,
        cols: m,
        flows,
        pivots,
    })
}

/// Uniform mass over every support foreground patch (stacked over shots, one
/// per cost row) against uniform mass over the proposal's foreground patches.
pub fn masked_distributions(
    cost: &CostMatrix,
    support_masks: &[Mask],
    proposal: &Mask,
) -> Result<TransportProblem, TransportError> {
    let support_fg: usize = support_masks.iter().map(Mask::area).sum();
    if support_fg != cost.rows() {
        return Err(TransportError::SupportMismatch {
            masks: support_fg,
            rows: cost.rows(),
        });
    }
    if proposal.len() != cost.cols() {
        return Err(TransportError::DimMismatch {
            expected: cost.cols(),
            got: proposal.len(),
        });
    }
    let cols: Vec<usize> = proposal.foreground().collect();
    if cols.is_empty() {
        return Err(TransportError::EmptyProposalMask);
    }
    if support_fg == 0 {
        return Err(TransportError::InfeasibleZeroMass);
    }
    let supply = vec![1.0 / support_fg as f64; support_fg];
    let demand = vec![1.0 / cols.len() as f64; cols.len()];
    TransportProblem::new(cost.select_columns(&cols), supply, demand)
}
