//! Sparse LDLᵀ factorization of quasi-definite matrices.
//!
//! Up-looking factorization over an elimination tree (the QDLDL scheme) with a
//! minimum-degree fill-reducing permutation. Pivots whose sign disagrees with
//! the expected inertia are replaced by a small signed value, so factoring a
//! regularized KKT matrix never fails.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::sparse::CscMatrix;

const NONE: usize = usize::MAX;

/// Greedy minimum-degree ordering on the graph of a symmetric pattern given by
/// its upper triangle. Returns `perm` with `perm[k]` = original index of the
/// k-th pivot. Ties break on the smaller index, so the result is deterministic.
pub(crate) fn minimum_degree(upper: &CscMatrix) -> Vec<usize> {
    let n = upper.ncols;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in upper.triplets() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut merged: Vec<usize> = Vec::new();
    while let Some(Reverse((deg, v))) = heap.pop() {
        if done[v] || deg != adj[v].len() {
            continue;
        }
        done[v] = true;
        order.push(v);
        let nbrs = std::mem::take(&mut adj[v]);
        for &u in &nbrs {
            // adj[u] <- (adj[u] ∪ nbrs) \ {u, v}
            let au = &adj[u];
            merged.clear();
            merged.reserve(au.len() + nbrs.len());
            let (mut a, mut b) = (0, 0);
            while a < au.len() || b < nbrs.len() {
                let next = if b >= nbrs.len() || (a < au.len() && au[a] < nbrs[b]) {
                    a += 1;
                    au[a - 1]
                } else if a >= au.len() || nbrs[b] < au[a] {
                    b += 1;
                    nbrs[b - 1]
                } else {
                    a += 1;
                    b += 1;
                    au[a - 1]
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

/// Symbolic analysis: permutation, permuted pattern and column counts of L.
#[derive(Debug, Clone)]
pub(crate) struct Symbolic {
    n: usize,
    perm: Vec<usize>,
    /// Permuted upper-triangular pattern.
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// `map[p]` = position in the permuted value array of entry `p` of the
    /// original upper-triangular input.
    map: Vec<usize>,
    etree: Vec<usize>,
    lp: Vec<usize>,
}

impl Symbolic {
    pub(crate) fn analyze(upper: &CscMatrix) -> Symbolic {
        let n = upper.ncols;
        let perm = minimum_degree(upper);
        let mut iperm = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }
        // Permuted pattern, keeping track of where every input entry lands.
        let mut counts = vec![0usize; n + 1];
        let mut targets = Vec::with_capacity(upper.nnz());
        for (i, j, _) in upper.triplets() {
            let (pi, pj) = (iperm[i], iperm[j]);
            let (r, c) = if pi <= pj { (pi, pj) } else { (pj, pi) };
            counts[c + 1] += 1;
            targets.push((r, c));
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let ap = counts.clone();
        let mut next = counts;
        let mut ai = vec![0usize; targets.len()];
        let mut map = vec![0usize; targets.len()];
        for (p, &(r, c)) in targets.iter().enumerate() {
            let q = next[c];
            ai[q] = r;
            map[p] = q;
            next[c] += 1;
        }
        // Elimination tree and column counts.
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for p in ap[j]..ap[j + 1] {
                let mut i = ai[p];
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        Symbolic {
            n,
            perm,
            ap,
            ai,
            map,
            etree,
            lp,
        }
    }

    pub(crate) fn nnz_l(&self) -> usize {
        self.lp[self.n]
    }
}

/// Numeric factor `P A Pᵀ = L D Lᵀ`.
#[derive(Debug, Clone)]
pub(crate) struct LdlFactor {
    sym: Symbolic,
    ax: Vec<f64>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    /// Expected pivot signs in the permuted order.
    signs: Vec<f64>,
    pub(crate) regularized_pivots: usize,
    // workspace
    y_vals: Vec<f64>,
    y_mark: Vec<bool>,
    y_idx: Vec<usize>,
    elim: Vec<usize>,
    next_space: Vec<usize>,
    x: Vec<f64>,
}

/// Threshold below which a pivot is considered to have the wrong sign.
const PIVOT_EPS: f64 = 1e-13;
/// Replacement magnitude for bad pivots.
const PIVOT_DELTA: f64 = 1e-7;

impl LdlFactor {
    /// `signs[i]` is the expected sign of pivot `i` in the original ordering.
    pub(crate) fn new(sym: Symbolic, signs: &[f64]) -> LdlFactor {
        let n = sym.n;
        let nnz_l = sym.nnz_l();
        let signs = sym.perm.iter().map(|&p| signs[p]).collect();
        let nnz_a = sym.ai.len();
        LdlFactor {
            sym,
            ax: vec![0.0; nnz_a],
            li: vec![0; nnz_l],
            lx: vec![0.0; nnz_l],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            signs,
            regularized_pivots: 0,
            y_vals: vec![0.0; n],
            y_mark: vec![false; n],
            y_idx: vec![0; n],
            elim: vec![0; n],
            next_space: vec![0; n],
            x: vec![0.0; n],
        }
    }

    /// Loads values laid out like the upper-triangular matrix passed to
    /// [`Symbolic::analyze`] and factors.
    pub(crate) fn factor(&mut self, values: &[f64]) {
        for (p, &v) in values.iter().enumerate() {
            self.ax[self.sym.map[p]] = v;
        }
        self.factor_loaded();
    }

    fn factor_loaded(&mut self) {
        let n = self.sym.n;
        let (ap, ai) = (&self.sym.ap, &self.sym.ai);
        let (lp, etree) = (&self.sym.lp, &self.sym.etree);
        self.next_space[..n].copy_from_slice(&lp[..n]);
        self.regularized_pivots = 0;
        for k in 0..n {
            self.d[k] = 0.0;
            let mut nnz_y = 0;
            for p in ap[k]..ap[k + 1] {
                let b = ai[p];
                if b == k {
                    self.d[k] += self.ax[p];
                    continue;
                }
                self.y_vals[b] += self.ax[p];
                if !self.y_mark[b] {
                    self.y_mark[b] = true;
                    self.elim[0] = b;
                    let mut nnz_e = 1;
                    let mut next = etree[b];
                    while next != NONE && next < k {
                        if self.y_mark[next] {
                            break;
                        }
                        self.y_mark[next] = true;
                        self.elim[nnz_e] = next;
                        nnz_e += 1;
                        next = etree[next];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        self.y_idx[nnz_y] = self.elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for t in (0..nnz_y).rev() {
                let c = self.y_idx[t];
                let end = self.next_space[c];
                let yc = self.y_vals[c];
                for q in lp[c]..end {
                    self.y_vals[self.li[q]] -= self.lx[q] * yc;
                }
                let l_kc = yc * self.dinv[c];
                self.li[end] = k;
                self.lx[end] = l_kc;
                self.d[k] -= yc * l_kc;
                self.next_space[c] += 1;
                self.y_vals[c] = 0.0;
                self.y_mark[c] = false;
            }
            if self.d[k] * self.signs[k] <= PIVOT_EPS {
                self.d[k] = self.signs[k] * PIVOT_DELTA;
                self.regularized_pivots += 1;
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
    }

    /// Solves `A x = b` in place.
    pub(crate) fn solve(&mut self, b: &mut [f64]) {
        let n = self.sym.n;
        let perm = &self.sym.perm;
        let lp = &self.sym.lp;
        for k in 0..n {
            self.x[k] = b[perm[k]];
        }
        for i in 0..n {
            let xi = self.x[i];
            for q in lp[i]..lp[i + 1] {
                self.x[self.li[q]] -= self.lx[q] * xi;
            }
        }
        for i in 0..n {
            self.x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = self.x[i];
            for q in lp[i]..lp[i + 1] {
                acc -= self.lx[q] * self.x[self.li[q]];
            }
            self.x[i] = acc;
        }
        for k in 0..n {
            b[perm[k]] = self.x[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn upper_of(m: &DMatrix<f64>) -> CscMatrix {
        let mut t = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..=j {
                if m[(i, j)] != 0.0 || i == j {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        CscMatrix::from_triplets(m.nrows(), m.ncols(), &t)
    }

    #[test]
    fn solves_quasi_definite_system() {
        // [[P, A'], [A, -delta]] with P PD.
        let k = DMatrix::from_row_slice(
            5,
            5,
            &[
                4.0, 1.0, 0.0, 1.0, 0.0, //
                1.0, 3.0, 0.5, 0.0, 1.0, //
                0.0, 0.5, 2.0, 1.0, 1.0, //
                1.0, 0.0, 1.0, -1e-3, 0.0, //
                0.0, 1.0, 1.0, 0.0, -2.0,
            ],
        );
        let up = upper_of(&k);
        let sym = Symbolic::analyze(&up);
        let mut f = LdlFactor::new(sym, &[1.0, 1.0, 1.0, -1.0, -1.0]);
        f.factor(&up.nzval);
        let rhs = [1.0, -2.0, 0.5, 3.0, 1.0];
        let mut x = rhs;
        f.solve(&mut x);
        let r = &k * nalgebra::DVector::from_row_slice(&x) - nalgebra::DVector::from_row_slice(&rhs);
        assert!(r.amax() < 1e-12, "residual {}", r.amax());
        assert_eq!(f.regularized_pivots, 0);
    }

    #[test]
    fn arrow_matrix_ordering_avoids_fill() {
        // Hub node 0 connected to everything: eliminating it first would fill
        // the whole matrix; minimum degree defers it to the end.
        let n = 30;
        let mut t = vec![(0, 0, n as f64)];
        for j in 1..n {
            t.push((0, j, 1.0));
            t.push((j, j, 2.0));
        }
        let up = CscMatrix::from_triplets(n, n, &t);
        let perm = minimum_degree(&up);
        let pos = perm.iter().position(|&v| v == 0).unwrap();
        assert!(pos >= n - 2, "hub eliminated at {pos}");
        let sym = Symbolic::analyze(&up);
        assert_eq!(sym.nnz_l(), n - 1);
    }
}
