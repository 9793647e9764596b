use std::collections::BTreeMap;

use super::QuadraticProgram;
use crate::error::{Error, Result};
use crate::sparse::CscMatrix;

/// Sparse affine form `Σ coef·y[idx] + constant` over decision coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        LinExpr::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(idx: usize) -> Self {
        LinExpr {
            terms: vec![(idx, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(idx: usize, coef: f64) -> Self {
        LinExpr {
            terms: vec![(idx, coef)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, idx: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((idx, coef));
        }
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    /// self += scale · other
    pub fn add_scaled(&mut self, other: &LinExpr, scale: f64) -> &mut Self {
        if scale != 0.0 {
            self.terms
                .extend(other.terms.iter().map(|&(i, c)| (i, c * scale)));
            self.constant += other.constant * scale;
        }
        self
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        LinExpr {
            terms: self.terms.iter().map(|&(i, c)| (i, c * s)).collect(),
            constant: self.constant * s,
        }
    }

    /// Merges duplicate coordinates, drops exact zeros, sorts by index.
    pub fn compact(&mut self) {
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(i, c) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => out.push((i, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        self.terms = out;
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.1 == 0.0)
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * y[i]).sum::<f64>() + self.constant
    }
}

/// Incremental construction of a [`QuadraticProgram`] over named variables.
#[derive(Debug, Clone)]
pub struct QpBuilder<K: Ord + Clone> {
    keys: Vec<K>,
    index: BTreeMap<K, usize>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    c: Vec<f64>,
    offset: f64,
    p: Vec<(usize, usize, f64)>,
    eq: Vec<LinExpr>,
    le: Vec<LinExpr>,
}

impl<K: Ord + Clone + std::fmt::Debug> Default for QpBuilder<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Ord + Clone + std::fmt::Debug> QpBuilder<K> {
    pub fn new() -> Self {
        QpBuilder {
            keys: Vec::new(),
            index: BTreeMap::new(),
            lb: Vec::new(),
            ub: Vec::new(),
            c: Vec::new(),
            offset: 0.0,
            p: Vec::new(),
            eq: Vec::new(),
            le: Vec::new(),
        }
    }

    /// Adds a variable; panics if the key already exists.
    pub fn add_var(&mut self, key: K, lb: f64, ub: f64) -> usize {
        let idx = self.keys.len();
        if self.index.insert(key.clone(), idx).is_some() {
            panic!("duplicate variable {key:?}");
        }
        self.keys.push(key);
        self.lb.push(lb);
        self.ub.push(ub);
        self.c.push(0.0);
        idx
    }

    pub fn free_var(&mut self, key: K) -> usize {
        self.add_var(key, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn get(&self, key: &K) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn num_vars(&self) -> usize {
        self.keys.len()
    }

    pub fn num_eq(&self) -> usize {
        self.eq.len()
    }

    pub fn num_le(&self) -> usize {
        self.le.len()
    }

    /// Adds `expr` (linear part and constant) to the objective.
    pub fn add_objective(&mut self, expr: &LinExpr, scale: f64) {
        for &(i, v) in &expr.terms {
            self.c[i] += scale * v;
        }
        self.offset += scale * expr.constant;
    }

    /// Adds `v · y_i · y_j` to the objective.
    pub fn add_quadratic(&mut self, i: usize, j: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        if i == j {
            self.p.push((i, i, 2.0 * v));
        } else {
            let (r, c) = if i < j { (i, j) } else { (j, i) };
            self.p.push((r, c, v));
        }
    }

    /// Adds `scale · e1 · e2` (product of two affine forms) to the objective.
    pub fn add_product(&mut self, e1: &LinExpr, e2: &LinExpr, scale: f64) {
        for &(i, a) in &e1.terms {
            for &(j, b) in &e2.terms {
                self.add_quadratic(i, j, scale * a * b);
            }
        }
        let mut lin = e1.scaled(e2.constant);
        lin.add_scaled(e2, e1.constant);
        lin.constant = e1.constant * e2.constant;
        self.add_objective(&lin, scale);
    }

    /// expr == 0
    pub fn add_eq(&mut self, expr: LinExpr) -> usize {
        self.eq.push(expr);
        self.eq.len() - 1
    }

    /// expr <= 0
    pub fn add_le(&mut self, expr: LinExpr) -> usize {
        self.le.push(expr);
        self.le.len() - 1
    }

    /// Finalizes into a validated program and the key of every coordinate.
    /// Key ordering of the variables: `perm[old] = new`.
    pub fn sorted_permutation(&self) -> Vec<usize> {
        let mut perm = vec![0; self.keys.len()];
        for (new, old) in self.index.values().enumerate() {
            perm[*old] = new;
        }
        perm
    }

    /// Like [`build`](Self::build) with variables renumbered in key order.
    /// Returns the permutation `perm[old] = new` as well.
    pub fn build_sorted(self) -> Result<(QuadraticProgram, Vec<K>, Vec<usize>)> {
        let perm = self.sorted_permutation();
        let n = perm.len();
        let mut keys: Vec<Option<K>> = vec![None; n];
        let mut lb = vec![0.0; n];
        let mut ub = vec![0.0; n];
        let mut c = vec![0.0; n];
        for old in 0..n {
            let new = perm[old];
            keys[new] = Some(self.keys[old].clone());
            lb[new] = self.lb[old];
            ub[new] = self.ub[old];
            c[new] = self.c[old];
        }
        let keys: Vec<K> = keys.into_iter().map(|k| k.expect("permutation")).collect();
        let remap = |e: &LinExpr| LinExpr {
            terms: e.terms.iter().map(|&(j, v)| (perm[j], v)).collect(),
            constant: e.constant,
        };
        let p = self
            .p
            .iter()
            .map(|&(i, j, v)| {
                let (a, b) = (perm[i], perm[j]);
                if a <= b {
                    (a, b, v)
                } else {
                    (b, a, v)
                }
            })
            .collect();
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        let sorted = QpBuilder {
            eq: self.eq.iter().map(remap).collect(),
            le: self.le.iter().map(remap).collect(),
            keys,
            index,
            lb,
            ub,
            c,
            offset: self.offset,
            p,
        };
        let (qp, keys) = sorted.build()?;
        Ok((qp, keys, perm))
    }

    pub fn build(self) -> Result<(QuadraticProgram, Vec<K>)> {
        let n = self.keys.len();
        for (k, (l, u)) in self.keys.iter().zip(self.lb.iter().zip(&self.ub)) {
            if l > u {
                return Err(Error::Validation(format!(
                    "variable {k:?} has empty bounds [{l}, {u}]"
                )));
            }
        }
        let rows = |rows: &[LinExpr]| {
            let mut t = Vec::new();
            let mut b = Vec::with_capacity(rows.len());
            for (r, e) in rows.iter().enumerate() {
                t.extend(e.terms.iter().map(|&(j, v)| (r, j, v)));
                b.push(-e.constant);
            }
            (CscMatrix::from_triplets(rows.len(), n, &t), b)
        };
        let (a_eq, b_eq) = rows(&self.eq);
        let (a_in, b_in) = rows(&self.le);
        let p = CscMatrix::from_triplets(n, n, &self.p);
        let qp = QuadraticProgram::new(
            p,
            self.c,
            self.offset,
            a_eq,
            b_eq,
            a_in,
            b_in,
            self.lb,
            self.ub,
        )?;
        Ok((qp, self.keys))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compact_merges_and_drops() {
        let mut e = LinExpr::zero();
        e.add_term(3, 1.0).add_term(1, 2.0).add_term(3, -1.0).add_constant(4.0);
        e.compact();
        assert_eq!(e.terms, vec![(1, 2.0)]);
        assert_eq!(e.eval(&[0.0, 1.5, 0.0, 9.0]), 7.0);
    }

    #[test]
    fn product_objective_matches_direct_evaluation() {
        let mut b: QpBuilder<u32> = QpBuilder::new();
        let x = b.free_var(0);
        let y = b.free_var(1);
        let mut e1 = LinExpr::term(x, 2.0);
        e1.add_term(y, -1.0).add_constant(0.5);
        let mut e2 = LinExpr::term(y, 3.0);
        e2.add_constant(-1.0);
        b.add_product(&e1, &e1, 1.0);
        b.add_product(&e2, &e2, 0.5);
        let (qp, keys) = b.build().unwrap();
        assert_eq!(keys, vec![0, 1]);
        let pt = [0.3, -0.7];
        let direct = e1.eval(&pt).powi(2) + 0.5 * e2.eval(&pt).powi(2);
        assert!((qp.objective(&pt) - direct).abs() < 1e-12);
    }
}
