//! Blocked cross-class pair scans.
//!
//! L2 distances are screened with the `|x|^2 + |y|^2 - 2 x.y` expansion
//! (block Gram products, clamped at 0). Whenever a screened value is within
//! its rounding band of a decision threshold the pair is recomputed with the
//! direct difference formula, so every decision matches a naive double loop
//! over direct distances bit for bit.

use rayon::prelude::*;

use crate::norm::Norm;
use crate::tensor::Tensor;

const BLOCK: usize = 256;
const EDGE: f64 = 1e-9;

/// A cross-class pair with a certified interval around its distance.
pub struct Candidate<'s, 'a> {
    scan: &'s PairScan<'a>,
    pub i: usize,
    pub j: usize,
    /// Lower and upper bounds on the exact (scaled) distance.
    pub lo: f64,
    pub hi: f64,
    exact: Option<f64>,
}

impl Candidate<'_, '_> {
    /// Direct-formula distance, identical to a naive loop's value.
    pub fn exact(&mut self) -> f64 {
        if let Some(d) = self.exact {
            return d;
        }
        let d = self.scan.exact_distance(self.i, self.j);
        self.exact = Some(d);
        d
    }

    /// `Some(true)` if the distance is certainly `< t`, `Some(false)` if
    /// certainly `>= t`, `None` if undecided by the screen.
    fn below(&self, t: f64) -> Option<bool> {
        if self.hi * (1.0 + EDGE) < t {
            Some(true)
        } else if self.lo * (1.0 - EDGE) > t {
            Some(false)
        } else {
            None
        }
    }

    /// Exact evaluation of `dist <= t`.
    pub fn within(&mut self, t: f64) -> bool {
        if self.hi * (1.0 + EDGE) < t {
            true
        } else if self.lo * (1.0 - EDGE) > t {
            false
        } else {
            self.exact() <= t
        }
    }

    /// Exact evaluation of `alpha * dist < numerator` as a naive loop writes it.
    pub fn violates(&mut self, alpha: f64, numerator: f64) -> bool {
        if numerator <= 0.0 {
            return false;
        }
        if alpha <= 0.0 {
            return alpha * self.exact() < numerator;
        }
        match self.below(numerator / alpha) {
            Some(b) => b,
            None => alpha * self.exact() < numerator,
        }
    }
}

/// Cross-class pair scanner over the rows of a matrix.
pub struct PairScan<'a> {
    rows: &'a Tensor,
    labels: &'a [usize],
    norm: Norm,
    factor: f64,
    sq_norms: Vec<f64>,
}

impl<'a> PairScan<'a> {
    /// `factor` multiplies every distance (e.g. `1/sqrt(dim)`).
    pub fn new(rows: &'a Tensor, labels: &'a [usize], norm: Norm, factor: f64) -> Self {
        assert_eq!(rows.rows(), labels.len(), "one label per row");
        let sq_norms = match norm {
            Norm::L2 => (0..rows.rows())
                .map(|i| rows.row(i).iter().map(|v| v * v).sum())
                .collect(),
            Norm::Linf => Vec::new(),
        };
        PairScan {
            rows,
            labels,
            norm,
            factor,
            sq_norms,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn exact_distance(&self, i: usize, j: usize) -> f64 {
        self.norm.dist(self.rows.row(i), self.rows.row(j)) * self.factor
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for bi in (0..n).step_by(BLOCK) {
            for bj in (bi..n).step_by(BLOCK) {
                out.push((bi, bj));
            }
        }
        out
    }

    /// Folds `visit` over every cross-class pair `i < j`, block by block.
    /// Block accumulators are merged in block order, so the result does not
    /// depend on the thread pool.
    pub fn fold<A, I, V, M>(&self, init: I, visit: V, merge: M) -> A
    where
        A: Send,
        I: Fn() -> A + Sync,
        V: Fn(&mut A, &mut Candidate<'_, 'a>) + Sync,
        M: Fn(A, A) -> A,
    {
        let partials: Vec<A> = self
            .blocks()
            .into_par_iter()
            .map(|(bi, bj)| {
                let mut acc = init();
                self.visit_block(bi, bj, &mut acc, &visit);
                acc
            })
            .collect();
        partials.into_iter().fold(init(), merge)
    }

    fn visit_block<A, V>(&self, bi: usize, bj: usize, acc: &mut A, visit: &V)
    where
        V: Fn(&mut A, &mut Candidate<'_, 'a>),
    {
        let n = self.len();
        let (ei, ej) = ((bi + BLOCK).min(n), (bj + BLOCK).min(n));
        let gram = match self.norm {
            Norm::L2 => Some(self.gram(bi, ei, bj, ej)),
            Norm::Linf => None,
        };
        let dim = self.rows.cols() as f64;
        let width = ej - bj;
        for i in bi..ei {
            let start = if bi == bj { i + 1 } else { bj };
            for j in start..ej {
                if self.labels[i] == self.labels[j] {
                    continue;
                }
                let mut cand = match &gram {
                    Some(g) => {
                        let (ni, nj) = (self.sq_norms[i], self.sq_norms[j]);
                        let approx = (ni + nj - 2.0 * g[(i - bi) * width + (j - bj)]).max(0.0);
                        let band = 4.0 * (dim + 4.0) * f64::EPSILON * (ni + nj);
                        Candidate {
                            scan: self,
                            i,
                            j,
                            lo: (approx - band).max(0.0).sqrt() * self.factor,
                            hi: (approx + band).sqrt() * self.factor,
                            exact: None,
                        }
                    }
                    None => {
                        let d = self.exact_distance(i, j);
                        Candidate {
                            scan: self,
                            i,
                            j,
                            lo: d,
                            hi: d,
                            exact: Some(d),
                        }
                    }
                };
                visit(acc, &mut cand);
            }
        }
    }

    fn gram(&self, bi: usize, ei: usize, bj: usize, ej: usize) -> Vec<f64> {
        let d = self.rows.cols();
        let (m, n) = (ei - bi, ej - bj);
        let a = &self.rows.data()[bi * d..ei * d];
        let b = &self.rows.data()[bj * d..ej * d];
        let mut c = vec![0.0; m * n];
        // SAFETY: a is m x d row-major, b read as d x n via (col stride d),
        // c is m x n row-major; all slices have exactly those extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                d,
                n,
                1.0,
                a.as_ptr(),
                d as isize,
                1,
                b.as_ptr(),
                1,
                d as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        c
    }

    /// Closest cross-class pair `(distance, i, j)`; ties resolve to the
    /// lexicographically first pair.
    pub fn min_pair(&self) -> Option<(f64, usize, usize)> {
        self.fold(
            || None::<(f64, usize, usize)>,
            |best, c| {
                if let Some((b, _, _)) = *best {
                    if c.lo * (1.0 - EDGE) > b {
                        return;
                    }
                }
                let d = c.exact();
                let cand = (d, c.i, c.j);
                if best.is_none_or(|b| lex_less(cand, b)) {
                    *best = Some(cand);
                }
            },
            |a, b| match (a, b) {
                (Some(x), Some(y)) => Some(if lex_less(y, x) { y } else { x }),
                (x, None) => x,
                (None, y) => y,
            },
        )
    }

    /// Farthest cross-class pair; ties resolve to the lexicographically first pair.
    pub fn max_pair(&self) -> Option<(f64, usize, usize)> {
        let better = |a: (f64, usize, usize), b: (f64, usize, usize)| {
            a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
        };
        self.fold(
            || None::<(f64, usize, usize)>,
            |best, c| {
                if let Some((b, _, _)) = *best {
                    if c.hi * (1.0 + EDGE) < b {
                        return;
                    }
                }
                let cand = (c.exact(), c.i, c.j);
                if best.is_none_or(|b| better(cand, b)) {
                    *best = Some(cand);
                }
            },
            |a, b| match (a, b) {
                (Some(x), Some(y)) => Some(if better(y, x) { y } else { x }),
                (x, None) => x,
                (None, y) => y,
            },
        )
    }

    /// Number of cross-class pairs and the sum of their screened distances
    /// (midpoint of the certified interval).
    pub fn count_and_mean(&self) -> (usize, f64) {
        let (count, sum) = self.fold(
            || (0usize, 0.0f64),
            |acc, c| {
                acc.0 += 1;
                acc.1 += 0.5 * (c.lo + c.hi);
            },
            |a, b| (a.0 + b.0, a.1 + b.1),
        );
        (
            count,
            if count > 0 {
                sum / count as f64
            } else {
                f64::NAN
            },
        )
    }

    /// For pairs with distance `<= ceiling`: their count and, per alpha, how
    /// many satisfy `alpha * dist < numerator`.
    pub fn count_violations(
        &self,
        ceiling: f64,
        alphas: &[f64],
        numerator: f64,
    ) -> (usize, Vec<usize>) {
        self.fold(
            || (0usize, vec![0usize; alphas.len()]),
            |acc, c| {
                if !c.within(ceiling) {
                    return;
                }
                acc.0 += 1;
                for (k, &a) in alphas.iter().enumerate() {
                    if c.violates(a, numerator) {
                        acc.1[k] += 1;
                    }
                }
            },
            |mut a, b| {
                a.0 += b.0;
                for (x, y) in a.1.iter_mut().zip(b.1) {
                    *x += y;
                }
                a
            },
        )
    }
}

fn lex_less(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
}
