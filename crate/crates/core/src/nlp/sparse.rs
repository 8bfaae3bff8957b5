//! Sparse symmetric LDLᵀ for quasi-definite KKT matrices.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Symmetric matrix in compressed-column form with both triangles stored.
#[derive(Debug, Clone)]
pub struct SymCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SymCsc {
    /// Builds the pattern from lower-triangle `(row, col)` pairs (duplicates
    /// allowed). Returns the matrix and, for every input pair, the slots it
    /// contributes to: `(lower slot, upper slot)`, equal on the diagonal.
    pub fn from_lower_pattern(n: usize, entries: &[(usize, usize)]) -> (Self, Vec<(usize, usize)>) {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(i, j) in entries {
            debug_assert!(i >= j && i < n);
            cols[j].push(i);
            if i != j {
                cols[i].push(j);
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for c in cols.iter_mut() {
            c.sort_unstable();
            c.dedup();
            row_idx.extend_from_slice(c);
            col_ptr.push(row_idx.len());
        }
        let m = SymCsc {
            n,
            values: vec![0.0; row_idx.len()],
            col_ptr,
            row_idx,
        };
        let slots = entries.iter().map(|&(i, j)| (m.slot(i, j), m.slot(j, i))).collect();
        (m, slots)
    }

    fn slot(&self, row: usize, col: usize) -> usize {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        let k = self.row_idx[range.clone()].binary_search(&row).expect("entry in pattern");
        range.start + k
    }

    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.n {
            let xj = x[j];
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * xj;
            }
        }
    }
}

/// Minimum-degree ordering of a symmetric pattern. Ties go to the smallest
/// index, so the result is deterministic.
pub fn minimum_degree(a: &SymCsc) -> Vec<usize> {
    let n = a.n;
    let mut adj: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            a.row_idx[a.col_ptr[j]..a.col_ptr[j + 1]]
                .iter()
                .copied()
                .filter(|&i| i != j)
                .collect()
        })
        .collect();
    let mut done = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|j| Reverse((adj[j].len(), j))).collect();
    let mut order = Vec::with_capacity(n);
    let mut merged = Vec::new();
    while let Some(Reverse((deg, v))) = heap.pop() {
        if done[v] || adj[v].len() != deg {
            continue;
        }
        done[v] = true;
        order.push(v);
        let nb = std::mem::take(&mut adj[v]);
        for &u in &nb {
            // adj[u] <- (adj[u] ∪ nb) \ {u, v}
            merged.clear();
            let cur = &adj[u];
            let (mut i, mut k) = (0, 0);
            while i < cur.len() || k < nb.len() {
                let next = match (cur.get(i), nb.get(k)) {
                    (Some(&x), Some(&y)) if x == y => {
                        i += 1;
                        k += 1;
                        x
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        i += 1;
                        x
                    }
                    (Some(_), Some(&y)) => {
                        k += 1;
                        y
                    }
                    (Some(&x), None) => {
                        i += 1;
                        x
                    }
                    (None, Some(&y)) => {
                        k += 1;
                        y
                    }
                    (None, None) => unreachable!(),
                };
                if next != u && next != v {
                    merged.push(next);
                }
            }
            std::mem::swap(&mut adj[u], &mut merged);
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

/// Up-looking LDLᵀ factorization with a fixed fill-reducing permutation.
#[derive(Debug, Clone)]
pub struct Ldl {
    n: usize,
    perm: Vec<usize>,
    pinv: Vec<usize>,
    parent: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    // permuted upper-triangle pattern: for each permuted column, (permuted row, source slot)
    up_ptr: Vec<usize>,
    up: Vec<(usize, usize)>,
}

const NONE: usize = usize::MAX;

impl Ldl {
    /// Orders the pattern of `a` and computes the elimination tree and column counts.
    pub fn analyze(a: &SymCsc) -> Self {
        let perm = minimum_degree(a);
        Self::analyze_with(a, perm)
    }

    pub fn analyze_with(a: &SymCsc, perm: Vec<usize>) -> Self {
        let n = a.n;
        let mut pinv = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }
        // Upper triangle of P A Pᵀ by columns.
        let mut up_cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for j in 0..n {
            let pj = pinv[j];
            for s in a.col_ptr[j]..a.col_ptr[j + 1] {
                let pi = pinv[a.row_idx[s]];
                if pi <= pj {
                    up_cols[pj].push((pi, s));
                }
            }
        }
        let mut up_ptr = vec![0];
        let mut up = Vec::new();
        for c in up_cols {
            up.extend(c);
            up_ptr.push(up.len());
        }

        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for &(i0, _) in &up[up_ptr[k]..up_ptr[k + 1]] {
                let mut i = i0;
                if i >= k {
                    continue;
                }
                while flag[i] != k {
                    if parent[i] == NONE {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let nnz = lp[n];
        Ldl {
            n,
            perm,
            pinv,
            parent,
            lp,
            li: vec![0; nnz],
            lx: vec![0.0; nnz],
            d: vec![0.0; n],
            up_ptr,
            up,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization of `a`, which must have the analyzed pattern.
    /// Returns the inertia read off the pivots.
    pub fn factor(&mut self, a: &SymCsc) -> Inertia {
        let n = self.n;
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut inertia = Inertia::default();
        for k in 0..n {
            y[k] = 0.0;
            let mut top = n;
            flag[k] = k;
            for &(i0, s) in &self.up[self.up_ptr[k]..self.up_ptr[k + 1]] {
                y[i0] += a.values[s];
                let mut len = 0;
                let mut i = i0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            let mut dk = y[k];
            y[k] = 0.0;
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let p2 = self.lp[i] + lnz[i];
                for p in self.lp[i]..p2 {
                    y[self.li[p]] -= self.lx[p] * yi;
                }
                let l_ki = yi / self.d[i];
                dk -= l_ki * yi;
                self.li[p2] = k;
                self.lx[p2] = l_ki;
                lnz[i] += 1;
            }
            if !dk.is_finite() || dk == 0.0 {
                inertia.zero += 1;
            } else if dk > 0.0 {
                inertia.positive += 1;
            } else {
                inertia.negative += 1;
            }
            self.d[k] = dk;
        }
        inertia
    }

    /// Solves `A x = b` in place using the last factorization.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|k| b[self.perm[k]]).collect();
        for j in 0..n {
            let xj = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut xj = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                xj -= self.lx[p] * x[self.li[p]];
            }
            x[j] = xj;
        }
        for k in 0..n {
            b[self.perm[k]] = x[k];
        }
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_permutation(&self) -> &[usize] {
        &self.pinv
    }
}
