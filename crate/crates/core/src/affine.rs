//! Expressions affine in the uncertainty ξ whose coefficients are affine in
//! the decision vector y:  `b(y) + Σ_k a_k(y) ξ_k`.

use std::collections::BTreeMap;

use crate::qp::LinExpr;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BiAffine {
    pub b: LinExpr,
    /// ξ index → coefficient. Indices address the stacked history vector.
    pub a: BTreeMap<usize, LinExpr>,
}

impl BiAffine {
    pub fn zero() -> Self {
        BiAffine::default()
    }

    pub fn constant(c: f64) -> Self {
        BiAffine {
            b: LinExpr::constant(c),
            a: BTreeMap::new(),
        }
    }

    pub fn from_expr(b: LinExpr) -> Self {
        BiAffine { b, a: BTreeMap::new() }
    }

    pub fn add_xi(&mut self, k: usize, coef: &LinExpr, scale: f64) -> &mut Self {
        self.a.entry(k).or_default().add_scaled(coef, scale);
        self
    }

    pub fn add_xi_const(&mut self, k: usize, c: f64) -> &mut Self {
        if c != 0.0 {
            self.a.entry(k).or_default().add_constant(c);
        }
        self
    }

    pub fn add_scaled(&mut self, other: &BiAffine, scale: f64) -> &mut Self {
        self.b.add_scaled(&other.b, scale);
        for (k, e) in &other.a {
            self.add_xi(*k, e, scale);
        }
        self
    }

    pub fn scaled(&self, s: f64) -> BiAffine {
        let mut out = BiAffine::zero();
        out.add_scaled(self, s);
        out
    }

    pub fn compact(&mut self) {
        self.b.compact();
        for e in self.a.values_mut() {
            e.compact();
        }
        self.a.retain(|_, e| !(e.terms.is_empty() && e.constant == 0.0));
    }

    /// Numeric ξ-coefficients at `y`, keyed like `a`.
    pub fn xi_coefficients(&self, y: &[f64]) -> BTreeMap<usize, f64> {
        self.a.iter().map(|(k, e)| (*k, e.eval(y))).collect()
    }

    pub fn eval(&self, y: &[f64], xi: &[f64]) -> f64 {
        self.b.eval(y) + self.a.iter().map(|(k, e)| e.eval(y) * xi[*k]).sum::<f64>()
    }

    /// True when no ξ-coefficient depends on y or is nonzero.
    pub fn is_deterministic(&self) -> bool {
        self.a.values().all(|e| e.terms.iter().all(|t| t.1 == 0.0) && e.constant == 0.0)
    }

    /// Largest ξ index referenced, if any.
    pub fn max_xi(&self) -> Option<usize> {
        self.a.keys().next_back().copied()
    }

    /// Re-indexes ξ through `f`.
    pub fn map_xi(&self, f: impl Fn(usize) -> usize) -> BiAffine {
        let mut out = BiAffine::from_expr(self.b.clone());
        for (k, e) in &self.a {
            out.add_xi(f(*k), e, 1.0);
        }
        out
    }
}
