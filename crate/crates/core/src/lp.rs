//! Small dense linear programs.
//!
//! [`solve_lp`] is a two-phase tableau simplex with Bland's rule, which keeps
//! it deterministic and free of cycling on the degenerate programs the
//! capacity module produces. [`brute_force_lp`] is an independent grid
//! search used by tests to certify simplex results.

use thiserror::Error;

/// Absolute feasibility tolerance promised for optimal solutions.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-7;

const PIVOT_EPS: f64 = 1e-11;
const COST_EPS: f64 = 1e-10;
const PHASE_ONE_EPS: f64 = 1e-8;
const MAX_GRID_POINTS: u64 = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("constraint row {row} has {got} coefficients, expected {expected}")]
    RowWidth {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("variable {var} has lower bound {lo} above upper bound {hi}")]
    Bounds { var: usize, lo: f64, hi: f64 },
    #[error("non-finite coefficient in {0}")]
    NonFinite(&'static str),
    #[error("grid oracle supports at most 4 free dimensions, problem has {0}")]
    TooManyDimensions(usize),
    #[error("grid oracle needs equality rows with disjoint supports")]
    UnsupportedEquality,
    #[error("grid oracle needs a finite box for variable {0}")]
    UnboundedBox(usize),
    #[error("grid of {0} points exceeds the oracle budget")]
    GridTooLarge(u64),
    #[error("grid resolution must be positive, got {0}")]
    Resolution(f64),
}

/// `minimize objective·x` subject to `eq_matrix·x = eq_rhs`,
/// `ineq_matrix·x <= ineq_rhs` and `lo <= x <= hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub eq_matrix: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    pub ineq_matrix: Vec<Vec<f64>>,
    pub ineq_rhs: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    /// New program with every variable bounded to `[0, inf)`.
    pub fn minimize(objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            objective,
            eq_matrix: Vec::new(),
            eq_rhs: Vec::new(),
            ineq_matrix: Vec::new(),
            ineq_rhs: Vec::new(),
            bounds: vec![(0.0, f64::INFINITY); n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn eq(mut self, row: Vec<f64>, rhs: f64) -> Self {
        self.eq_matrix.push(row);
        self.eq_rhs.push(rhs);
        self
    }

    pub fn le(mut self, row: Vec<f64>, rhs: f64) -> Self {
        self.ineq_matrix.push(row);
        self.ineq_rhs.push(rhs);
        self
    }

    pub fn ge(self, row: Vec<f64>, rhs: f64) -> Self {
        let neg = row.into_iter().map(|a| -a).collect();
        self.le(neg, -rhs)
    }

    pub fn bound(mut self, var: usize, lo: f64, hi: f64) -> Self {
        self.bounds[var] = (lo, hi);
        self
    }

    pub fn check(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::NonFinite("objective"));
        }
        let rows = self.eq_matrix.iter().chain(&self.ineq_matrix);
        for (r, row) in rows.enumerate() {
            if row.len() != n {
                return Err(LpError::RowWidth {
                    row: r,
                    got: row.len(),
                    expected: n,
                });
            }
            if row.iter().any(|a| !a.is_finite()) {
                return Err(LpError::NonFinite("constraint matrix"));
            }
        }
        if self.eq_rhs.len() != self.eq_matrix.len() || self.ineq_rhs.len() != self.ineq_matrix.len()
        {
            return Err(LpError::NonFinite("right-hand side length"));
        }
        if self.eq_rhs.iter().chain(&self.ineq_rhs).any(|b| !b.is_finite()) {
            return Err(LpError::NonFinite("right-hand side"));
        }
        if self.bounds.len() != n {
            return Err(LpError::RowWidth {
                row: usize::MAX,
                got: self.bounds.len(),
                expected: n,
            });
        }
        for (var, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY
            {
                return Err(LpError::Bounds { var, lo, hi });
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        dot(&self.objective, x)
    }

    /// Largest absolute violation of any constraint or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (row, &b) in self.eq_matrix.iter().zip(&self.eq_rhs) {
            worst = worst.max((dot(row, x) - b).abs());
        }
        for (row, &b) in self.ineq_matrix.iter().zip(&self.ineq_rhs) {
            worst = worst.max(dot(row, x) - b);
        }
        for (&xi, &(lo, hi)) in x.iter().zip(&self.bounds) {
            worst = worst.max(lo - xi).max(xi - hi);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective_value: f64,
}

impl LpSolution {
    fn without_point(status: LpStatus, n: usize) -> Self {
        let objective_value = match status {
            LpStatus::Unbounded => f64::NEG_INFINITY,
            _ => f64::INFINITY,
        };
        Self {
            status,
            x: vec![f64::NAN; n],
            objective_value,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Simplex

/// How an original variable is rebuilt from non-negative tableau columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// `x = offset + y`
    Shift { col: usize, offset: f64 },
    /// `x = offset - y`
    Flip { col: usize, offset: f64 },
    /// `x = y+ - y-`
    Split { pos: usize, neg: usize },
}

struct Tableau {
    /// `rows x (cols + 1)`; the last column is the right-hand side.
    a: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize, cost: &mut [f64]) {
        let width = self.cols + 1;
        let p = self.a[r][c];
        for v in self.a[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.a[r].clone();
        for (i, row) in self.a.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for j in 0..width {
                    row[j] -= f * pivot_row[j];
                }
                row[c] = 0.0;
            }
        }
        let f = cost[c];
        if f != 0.0 {
            for j in 0..width {
                cost[j] -= f * pivot_row[j];
            }
            cost[c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Runs Bland's rule on reduced costs `cost` (last entry is minus the
    /// objective value). Columns with `allowed[j] == false` never enter.
    /// Returns false when the program is unbounded.
    fn optimize(&mut self, cost: &mut [f64], allowed: &[bool]) -> bool {
        loop {
            let entering = (0..self.cols).find(|&j| allowed[j] && cost[j] < -COST_EPS);
            let Some(c) = entering else {
                return true;
            };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.a.iter().enumerate() {
                let aij = row[c];
                if aij > PIVOT_EPS {
                    let ratio = row[self.cols] / aij;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((k, best)) => {
                            if ratio < best - 1e-12
                                || (ratio <= best + 1e-12 && self.basis[i] < self.basis[k])
                            {
                                Some((i, ratio))
                            } else {
                                Some((k, best))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return false,
                Some((r, _)) => self.pivot(r, c, cost),
            }
        }
    }
}

/// Solves `lp` to optimality, or reports it infeasible or unbounded.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.check()?;
    let n = lp.num_vars();

    // Map every variable onto non-negative columns.
    let mut maps = Vec::with_capacity(n);
    let mut cols = 0usize;
    let mut upper_rows: Vec<(usize, f64)> = Vec::new();
    for &(lo, hi) in &lp.bounds {
        if lo.is_finite() {
            maps.push(VarMap::Shift { col: cols, offset: lo });
            if hi.is_finite() {
                upper_rows.push((cols, hi - lo));
            }
            cols += 1;
        } else if hi.is_finite() {
            maps.push(VarMap::Flip { col: cols, offset: hi });
            cols += 1;
        } else {
            maps.push(VarMap::Split {
                pos: cols,
                neg: cols + 1,
            });
            cols += 2;
        }
    }

    // Substitute into a row: returns transformed coefficients and constant.
    let transform = |row: &[f64]| -> (Vec<f64>, f64) {
        let mut out = vec![0.0; cols];
        let mut constant = 0.0;
        for (j, &a) in row.iter().enumerate() {
            match maps[j] {
                VarMap::Shift { col, offset } => {
                    out[col] += a;
                    constant += a * offset;
                }
                VarMap::Flip { col, offset } => {
                    out[col] -= a;
                    constant += a * offset;
                }
                VarMap::Split { pos, neg } => {
                    out[pos] += a;
                    out[neg] -= a;
                }
            }
        }
        (out, constant)
    };

    // Rows: (coefficients, rhs, is_inequality).
    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    for (row, &b) in lp.eq_matrix.iter().zip(&lp.eq_rhs) {
        let (coef, k) = transform(row);
        rows.push((coef, b - k, false));
    }
    for (row, &b) in lp.ineq_matrix.iter().zip(&lp.ineq_rhs) {
        let (coef, k) = transform(row);
        rows.push((coef, b - k, true));
    }
    for &(col, ub) in &upper_rows {
        let mut coef = vec![0.0; cols];
        coef[col] = 1.0;
        rows.push((coef, ub, true));
    }
    let (obj, _) = transform(&lp.objective);

    let m = rows.len();
    let slack_count = rows.iter().filter(|r| r.2).count();
    let slack_base = cols;
    let art_base = cols + slack_count;

    // Decide the initial basic column for each row.
    let mut art_count = 0;
    let mut plan = Vec::with_capacity(m); // (slack col, slack sign, needs artificial)
    let mut next_slack = slack_base;
    for (_, b, ineq) in &rows {
        if *ineq {
            let slack = next_slack;
            next_slack += 1;
            if *b >= 0.0 {
                plan.push((Some(slack), false));
            } else {
                art_count += 1;
                plan.push((Some(slack), true));
            }
        } else {
            art_count += 1;
            plan.push((None, true));
        }
    }
    let total = art_base + art_count;
    let mut tab = Tableau {
        a: vec![vec![0.0; total + 1]; m],
        basis: vec![0; m],
        cols: total,
    };
    let mut next_art = art_base;
    for (r, ((coef, b, _), (slack, needs_art))) in rows.iter().zip(&plan).enumerate() {
        let sign = if *b < 0.0 { -1.0 } else { 1.0 };
        let row = &mut tab.a[r];
        for (j, &a) in coef.iter().enumerate() {
            row[j] = sign * a;
        }
        if let Some(s) = slack {
            row[*s] = sign;
        }
        row[total] = sign * b;
        if *needs_art {
            row[next_art] = 1.0;
            tab.basis[r] = next_art;
            next_art += 1;
        } else {
            tab.basis[r] = slack.expect("inequality rows carry a slack");
        }
    }

    // Phase one: minimize the sum of artificials.
    let mut allowed = vec![true; total];
    if art_count > 0 {
        let mut cost = vec![0.0; total + 1];
        for c in cost.iter_mut().take(total).skip(art_base) {
            *c = 1.0;
        }
        for r in 0..m {
            if tab.basis[r] >= art_base {
                for j in 0..=total {
                    cost[j] -= tab.a[r][j];
                }
            }
        }
        tab.optimize(&mut cost, &allowed);
        let infeasibility = -cost[total];
        if infeasibility > PHASE_ONE_EPS {
            return Ok(LpSolution::without_point(LpStatus::Infeasible, n));
        }
        // Drive remaining (zero-valued) artificials out of the basis.
        let mut r = 0;
        while r < tab.a.len() {
            if tab.basis[r] >= art_base {
                let col = (0..art_base).find(|&j| tab.a[r][j].abs() > 1e-9);
                match col {
                    Some(c) => {
                        let mut dummy = vec![0.0; total + 1];
                        tab.pivot(r, c, &mut dummy);
                        r += 1;
                    }
                    None => {
                        // Redundant row.
                        tab.a.remove(r);
                        tab.basis.remove(r);
                    }
                }
            } else {
                r += 1;
            }
        }
        for a in allowed.iter_mut().skip(art_base) {
            *a = false;
        }
    }

    // Phase two.
    let mut cost = vec![0.0; total + 1];
    cost[..cols].copy_from_slice(&obj);
    for r in 0..tab.a.len() {
        let b = tab.basis[r];
        let cb = cost[b];
        if cb != 0.0 {
            for j in 0..=total {
                cost[j] -= cb * tab.a[r][j];
            }
        }
    }
    if !tab.optimize(&mut cost, &allowed) {
        return Ok(LpSolution::without_point(LpStatus::Unbounded, n));
    }

    let mut y = vec![0.0; total];
    for (r, &b) in tab.basis.iter().enumerate() {
        y[b] = tab.a[r][total];
    }
    let x: Vec<f64> = maps
        .iter()
        .map(|m| match *m {
            VarMap::Shift { col, offset } => offset + y[col],
            VarMap::Flip { col, offset } => offset - y[col],
            VarMap::Split { pos, neg } => y[pos] - y[neg],
        })
        .collect();
    let objective_value = lp.evaluate(&x);
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective_value,
    })
}

// ---------------------------------------------------------------------------
// Grid oracle

/// Exhaustive grid search over the feasible box.
///
/// Each equality row must have a support disjoint from every other equality
/// row; one variable per row is solved for from the others. Of the remaining
/// free variables, one is optimized exactly along a line for each grid point
/// over the rest, so the grid has one dimension fewer than the problem.
pub fn brute_force_lp(lp: &LinearProgram, resolution: f64) -> Result<LpSolution, LpError> {
    lp.check()?;
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(LpError::Resolution(resolution));
    }
    let n = lp.num_vars();
    let boxes = implied_box(lp);
    let pinned: Vec<bool> = lp.bounds.iter().map(|&(lo, hi)| lo == hi).collect();

    // Pick a dependent variable per equality row.
    let mut owner_row: Vec<Option<usize>> = vec![None; n];
    let mut dependents = Vec::with_capacity(lp.eq_matrix.len());
    for (r, row) in lp.eq_matrix.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            if a != 0.0 && !pinned[j] {
                if owner_row[j].is_some() {
                    return Err(LpError::UnsupportedEquality);
                }
                owner_row[j] = Some(r);
            }
        }
        // Prefer a variable with an infinite box as the dependent one.
        let candidates: Vec<usize> = (0..n).filter(|&j| owner_row[j] == Some(r)).collect();
        let dep = candidates
            .iter()
            .copied()
            .rev()
            .find(|&j| !boxes[j].1.is_finite() || !boxes[j].0.is_finite())
            .or_else(|| candidates.last().copied());
        match dep {
            Some(j) => dependents.push(Some(j)),
            // Row over pinned variables only.
            None => dependents.push(None),
        }
    }
    let is_dependent: Vec<bool> = {
        let mut v = vec![false; n];
        for j in dependents.iter().flatten() {
            v[*j] = true;
        }
        v
    };
    let free: Vec<usize> = (0..n).filter(|&j| !pinned[j] && !is_dependent[j]).collect();
    if free.len() > 4 {
        return Err(LpError::TooManyDimensions(free.len()));
    }

    // The line variable may have an unbounded box; grid variables may not.
    let unbounded: Vec<usize> = free
        .iter()
        .copied()
        .filter(|&j| !boxes[j].0.is_finite() || !boxes[j].1.is_finite())
        .collect();
    let line_var = match unbounded.as_slice() {
        [] => free.last().copied(),
        [j] => Some(*j),
        [_, second, ..] => return Err(LpError::UnboundedBox(*second)),
    };
    let grid_vars: Vec<usize> = free.iter().copied().filter(|&j| Some(j) != line_var).collect();

    let axes: Vec<Vec<f64>> = grid_vars
        .iter()
        .map(|&j| {
            let (lo, hi) = boxes[j];
            let steps = ((hi - lo) / resolution).floor() as u64;
            let mut axis: Vec<f64> = (0..=steps).map(|k| lo + k as f64 * resolution).collect();
            if axis.last().is_some_and(|&v| v < hi - 1e-12) {
                axis.push(hi);
            }
            for v in axis.iter_mut() {
                *v = v.min(hi);
            }
            axis
        })
        .collect();
    let points: u64 = axes
        .iter()
        .map(|a| a.len() as u64)
        .try_fold(1u64, |acc, len| acc.checked_mul(len))
        .unwrap_or(u64::MAX);
    if points > MAX_GRID_POINTS {
        return Err(LpError::GridTooLarge(points));
    }

    // Direction of the line variable, including its effect on dependents.
    let mut dir = vec![0.0; n];
    if let Some(l) = line_var {
        dir[l] = 1.0;
        if let Some(r) = owner_row[l] {
            if let Some(dep) = dependents[r] {
                dir[dep] = -lp.eq_matrix[r][l] / lp.eq_matrix[r][dep];
            }
        }
    }

    let tol = 1e-12;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut unbounded_hit = false;
    let mut base = vec![0.0; n];
    let mut idx = vec![0usize; axes.len()];
    'outer: loop {
        for (j, &(lo, _)) in lp.bounds.iter().enumerate() {
            if pinned[j] {
                base[j] = lo;
            }
        }
        for (k, &j) in grid_vars.iter().enumerate() {
            base[j] = axes[k][idx[k]];
        }
        if let Some(l) = line_var {
            base[l] = 0.0;
        }
        let mut eq_ok = true;
        for (r, dep) in dependents.iter().enumerate() {
            let row = &lp.eq_matrix[r];
            match dep {
                Some(d) => {
                    let others: f64 = row
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != *d)
                        .map(|(j, a)| a * base[j])
                        .sum();
                    base[*d] = (lp.eq_rhs[r] - others) / row[*d];
                }
                None => {
                    if (dot(row, &base) - lp.eq_rhs[r]).abs() > tol {
                        eq_ok = false;
                    }
                }
            }
        }

        if eq_ok {
            // Feasible interval for the line parameter.
            let mut t_lo = f64::NEG_INFINITY;
            let mut t_hi = f64::INFINITY;
            let mut restrict = |coef: f64, slack: f64| {
                // constraint: coef * t <= slack
                if coef.abs() < 1e-15 {
                    if slack < -tol {
                        t_lo = f64::INFINITY;
                    }
                } else if coef > 0.0 {
                    t_hi = t_hi.min(slack / coef);
                } else {
                    t_lo = t_lo.max(slack / coef);
                }
            };
            for j in 0..n {
                let (lo, hi) = lp.bounds[j];
                if hi.is_finite() {
                    restrict(dir[j], hi - base[j] + tol);
                }
                if lo.is_finite() {
                    restrict(-dir[j], base[j] - lo + tol);
                }
            }
            for (row, &b) in lp.ineq_matrix.iter().zip(&lp.ineq_rhs) {
                restrict(dot(row, &dir), b - dot(row, &base) + tol);
            }
            if t_lo <= t_hi {
                let slope = dot(&lp.objective, &dir);
                let t = if slope > 0.0 {
                    t_lo
                } else if slope < 0.0 {
                    t_hi
                } else if t_lo.is_finite() {
                    t_lo
                } else if t_hi.is_finite() {
                    t_hi
                } else {
                    0.0
                };
                if t.is_infinite() {
                    unbounded_hit = true;
                    break 'outer;
                }
                let x: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + t * d).collect();
                let value = lp.evaluate(&x);
                if best.as_ref().is_none_or(|(v, _)| value < *v) {
                    best = Some((value, x));
                }
            }
        }

        // Advance the odometer.
        let mut k = 0;
        loop {
            if k == idx.len() {
                break 'outer;
            }
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }

    if unbounded_hit {
        return Ok(LpSolution::without_point(LpStatus::Unbounded, n));
    }
    Ok(match best {
        Some((objective_value, x)) => LpSolution {
            status: LpStatus::Optimal,
            x,
            objective_value,
        },
        None => LpSolution::without_point(LpStatus::Infeasible, n),
    })
}

/// Bounds tightened by rows whose coefficients are all non-negative over
/// variables with finite lower bounds.
fn implied_box(lp: &LinearProgram) -> Vec<(f64, f64)> {
    let mut boxes = lp.bounds.clone();
    let rows = lp
        .eq_matrix
        .iter()
        .zip(&lp.eq_rhs)
        .chain(lp.ineq_matrix.iter().zip(&lp.ineq_rhs));
    for (row, &b) in rows {
        if row.iter().any(|&a| a < 0.0) {
            continue;
        }
        let floor: f64 = row
            .iter()
            .zip(&lp.bounds)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, (lo, _))| a * lo)
            .sum();
        if !floor.is_finite() {
            continue;
        }
        for (j, &a) in row.iter().enumerate() {
            if a > 0.0 {
                let cap = (b - (floor - a * lp.bounds[j].0)) / a;
                if cap < boxes[j].1 {
                    boxes[j].1 = cap.max(boxes[j].0);
                }
            }
        }
    }
    boxes
}
