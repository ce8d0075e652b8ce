//! Assembly, inertia-controlled regularization, factorization and solution of
//! the symmetric saddle-point systems
//!
//! ```text
//! K = [ B        ∇c(x) ]         K · (Δx, -Δλ̃) = rhs
//!     [ ∇c(x)ᵀ  -δ·I   ]
//! ```
//!
//! with `δ = ω̃` for the penalty/ALM subproblems and `δ = ω + ω̃` for the
//! modified method. `B` is *suitable* when `K` has exactly `n` positive and
//! `m` negative eigenvalues; [`regularize`] produces such a `B` from any
//! symmetric Hessian by a diagonal shift.
//!
//! The factorization is a dense Bunch-Kaufman LDLᵀ with partial pivoting.
//! The inertia is read off the block-diagonal factor: each 1x1 pivot
//! contributes its sign, each 2x2 pivot one positive and one negative
//! eigenvalue.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalue sign counts of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_zero: usize,
}

impl Inertia {
    /// The suitable-`B` target: `n` positive, `m` negative, no zero
    /// eigenvalues.
    pub fn saddle_target(n: usize, m: usize) -> Self {
        Inertia {
            n_pos: n,
            n_neg: m,
            n_zero: 0,
        }
    }
}

/// An assembled saddle-point system.
#[derive(Debug, Clone)]
pub struct KktSystem {
    n: usize,
    m: usize,
    delta: f64,
    matrix: DMatrix<f64>,
}

impl KktSystem {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Magnitude of the `(2,2)` block.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// The assembled `(n+m) x (n+m)` matrix `K`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// The `B` block of `K`.
    pub fn b_block(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.matrix.view((0, 0), (self.n, self.n))
    }

    /// The `J = ∇c` block of `K`.
    pub fn jac_block(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.matrix.view((0, self.n), (self.n, self.m))
    }
}

fn is_bitwise_symmetric(a: &DMatrix<f64>) -> bool {
    for i in 0..a.nrows() {
        for j in 0..i {
            if a[(i, j)].to_bits() != a[(j, i)].to_bits() {
                return false;
            }
        }
    }
    true
}

fn inf_norm(a: &DMatrix<f64>) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..a.nrows() {
        let mut row = 0.0;
        for j in 0..a.ncols() {
            row += a[(i, j)].abs();
        }
        norm = norm.max(row);
    }
    norm
}

/// Builds `K = [[B, J], [Jᵀ, -delta·I]]`.
///
/// `B` must be symmetric `n x n`, `J` is `n x m`, `delta >= 0`. The sign
/// convention pairs `K` with the unknown block `(Δx, -Δλ̃)`.
pub fn assemble(b: &DMatrix<f64>, j: &DMatrix<f64>, delta: f64) -> Result<KktSystem> {
    let n = b.nrows();
    if b.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "B (square)",
            expected: n,
            actual: b.ncols(),
        });
    }
    if !is_bitwise_symmetric(b) {
        return Err(Error::NotSymmetric("B"));
    }
    if j.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "J rows",
            expected: n,
            actual: j.nrows(),
        });
    }
    let m = j.ncols();
    if m == 0 || !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "assemble requires m >= 1 and delta >= 0 (got m={m}, delta={delta})"
        )));
    }
    let dim = n + m;
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(b);
    k.view_mut((0, n), (n, m)).copy_from(j);
    k.view_mut((n, 0), (m, n)).copy_from(&j.transpose());
    for i in 0..m {
        k[(n + i, n + i)] = -delta;
    }
    Ok(KktSystem {
        n,
        m,
        delta,
        matrix: k,
    })
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Single { col: usize },
    Double { col: usize },
}

/// Bunch-Kaufman LDLᵀ factorization of an assembled system, with the inertia
/// implied by its block-diagonal factor.
#[derive(Debug, Clone)]
pub struct KktFactorization {
    n: usize,
    m: usize,
    /// Strict lower triangle: multipliers of L. Diagonal and first
    /// subdiagonal of each 2x2 block: D.
    storage: DMatrix<f64>,
    blocks: Vec<Block>,
    /// `perm[i]` is the original row index living at position `i` of the
    /// permuted matrix, i.e. `(P K Pᵀ)[i][j] = K[perm[i]][perm[j]]`.
    perm: Vec<usize>,
    inertia: Inertia,
}

/// Relative pivot threshold below which a block counts as singular.
const SINGULAR_PIVOT_REL: f64 = 1e-14;

/// Factors `K` and returns the factorization together with the inertia of
/// `K`. Pivot blocks with magnitude below `1e-14 · ‖K‖∞` trigger
/// [`Error::SingularSystem`].
pub fn factor_with_inertia(system: &KktSystem) -> Result<(KktFactorization, Inertia)> {
    let fact = factor_symmetric(&system.matrix, system.n, system.m)?;
    let inertia = fact.inertia;
    Ok((fact, inertia))
}

fn factor_symmetric(k: &DMatrix<f64>, n: usize, m: usize) -> Result<KktFactorization> {
    let dim = k.nrows();
    debug_assert_eq!(dim, n + m);
    let norm = inf_norm(k);
    if norm == 0.0 {
        return Err(Error::SingularSystem);
    }
    let tol = SINGULAR_PIVOT_REL * norm;
    // Bunch-Kaufman constant minimizing the bound on element growth.
    let alpha = (1.0 + 17.0_f64.sqrt()) / 8.0;

    let mut a = k.clone();
    let mut perm: Vec<usize> = (0..dim).collect();
    let mut blocks = Vec::with_capacity(dim);
    let (mut n_pos, mut n_neg) = (0usize, 0usize);

    let mut col = 0;
    while col < dim {
        let absakk = a[(col, col)].abs();
        let (imax, colmax) = {
            let mut imax = col;
            let mut colmax = 0.0f64;
            for i in col + 1..dim {
                let v = a[(i, col)].abs();
                if v > colmax {
                    colmax = v;
                    imax = i;
                }
            }
            (imax, colmax)
        };

        if absakk.max(colmax) < tol {
            return Err(Error::SingularSystem);
        }

        let use_double;
        if absakk >= alpha * colmax {
            use_double = false;
        } else {
            // Largest off-diagonal magnitude in row/column `imax` of the
            // trailing submatrix, excluding the diagonal.
            let mut rowmax = 0.0f64;
            for j in col..imax {
                rowmax = rowmax.max(a[(imax, j)].abs());
            }
            for i in imax + 1..dim {
                rowmax = rowmax.max(a[(i, imax)].abs());
            }
            if absakk * rowmax >= alpha * colmax * colmax {
                use_double = false;
            } else if a[(imax, imax)].abs() >= alpha * rowmax {
                swap_symmetric(&mut a, &mut perm, col, imax);
                use_double = false;
            } else {
                if imax != col + 1 {
                    swap_symmetric(&mut a, &mut perm, col + 1, imax);
                }
                use_double = true;
            }
        }

        if !use_double {
            let d = a[(col, col)];
            if d.abs() < tol {
                return Err(Error::SingularSystem);
            }
            if d > 0.0 {
                n_pos += 1;
            } else {
                n_neg += 1;
            }
            let w: Vec<f64> = (col + 1..dim).map(|i| a[(i, col)]).collect();
            for (wi_off, &wi) in w.iter().enumerate() {
                let i = col + 1 + wi_off;
                let li = wi / d;
                for (wj_off, &wj) in w.iter().enumerate().take(wi_off + 1) {
                    let j = col + 1 + wj_off;
                    a[(i, j)] -= li * wj;
                }
                a[(i, col)] = li;
            }
            blocks.push(Block::Single { col });
            col += 1;
        } else {
            let d11 = a[(col, col)];
            let d21 = a[(col + 1, col)];
            let d22 = a[(col + 1, col + 1)];
            let det = d11 * d22 - d21 * d21;
            let mean = 0.5 * (d11 + d22);
            let radius = (0.25 * (d11 - d22) * (d11 - d22) + d21 * d21).sqrt();
            let eig_small = (mean.abs() - radius).abs();
            if eig_small < tol {
                return Err(Error::SingularSystem);
            }
            // Signs of the block eigenvalues mean ± radius.
            for eig in [mean + radius, mean - radius] {
                if eig > 0.0 {
                    n_pos += 1;
                } else {
                    n_neg += 1;
                }
            }
            let w1: Vec<f64> = (col + 2..dim).map(|i| a[(i, col)]).collect();
            let w2: Vec<f64> = (col + 2..dim).map(|i| a[(i, col + 1)]).collect();
            for off_i in 0..w1.len() {
                let i = col + 2 + off_i;
                let l1 = (d22 * w1[off_i] - d21 * w2[off_i]) / det;
                let l2 = (d11 * w2[off_i] - d21 * w1[off_i]) / det;
                for off_j in 0..=off_i {
                    let j = col + 2 + off_j;
                    a[(i, j)] -= l1 * w1[off_j] + l2 * w2[off_j];
                }
                a[(i, col)] = l1;
                a[(i, col + 1)] = l2;
            }
            blocks.push(Block::Double { col });
            col += 2;
        }
    }

    Ok(KktFactorization {
        n,
        m,
        storage: a,
        blocks,
        perm,
        inertia: Inertia {
            n_pos,
            n_neg,
            n_zero: 0,
        },
    })
}

/// Symmetric interchange of rows/columns `r` and `s` (r < s) in the lower
/// triangle, including already-computed multiplier columns.
fn swap_symmetric(a: &mut DMatrix<f64>, perm: &mut [usize], r: usize, s: usize) {
    debug_assert!(r < s);
    let dim = a.nrows();
    for j in 0..r {
        a.swap((r, j), (s, j));
    }
    for i in r + 1..s {
        a.swap((i, r), (s, i));
    }
    for i in s + 1..dim {
        a.swap((i, r), (i, s));
    }
    a.swap((r, r), (s, s));
    perm.swap(r, s);
}

impl KktFactorization {
    pub fn inertia(&self) -> Inertia {
        self.inertia
    }

    /// Crude condition estimate from the extreme eigenvalues of the
    /// block-diagonal factor. Diagnostic only.
    pub fn condition_estimate(&self) -> f64 {
        let mut max_e = 0.0f64;
        let mut min_e = f64::INFINITY;
        for block in &self.blocks {
            match *block {
                Block::Single { col } => {
                    let d = self.storage[(col, col)].abs();
                    max_e = max_e.max(d);
                    min_e = min_e.min(d);
                }
                Block::Double { col } => {
                    let d11 = self.storage[(col, col)];
                    let d21 = self.storage[(col + 1, col)];
                    let d22 = self.storage[(col + 1, col + 1)];
                    let mean = 0.5 * (d11 + d22);
                    let radius = (0.25 * (d11 - d22) * (d11 - d22) + d21 * d21).sqrt();
                    for eig in [mean + radius, mean - radius] {
                        max_e = max_e.max(eig.abs());
                        min_e = min_e.min(eig.abs());
                    }
                }
            }
        }
        if min_e == 0.0 {
            f64::INFINITY
        } else {
            max_e / min_e
        }
    }

    /// Solves `K · (dx, s) = rhs` and returns `(dx, dλ̃)` with `dλ̃ = -s`,
    /// undoing the sign convention of the assembled system.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let dim = self.n + self.m;
        if rhs.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "KKT right-hand side",
                expected: dim,
                actual: rhs.len(),
            });
        }

        let mut z = DVector::zeros(dim);
        for i in 0..dim {
            z[i] = rhs[self.perm[i]];
        }

        // Forward substitution with unit lower triangular L.
        for block in &self.blocks {
            match *block {
                Block::Single { col } => {
                    let zk = z[col];
                    for i in col + 1..dim {
                        z[i] -= self.storage[(i, col)] * zk;
                    }
                }
                Block::Double { col } => {
                    let zk = z[col];
                    let zk1 = z[col + 1];
                    for i in col + 2..dim {
                        z[i] -= self.storage[(i, col)] * zk + self.storage[(i, col + 1)] * zk1;
                    }
                }
            }
        }

        // Block-diagonal solve.
        for block in &self.blocks {
            match *block {
                Block::Single { col } => {
                    z[col] /= self.storage[(col, col)];
                }
                Block::Double { col } => {
                    let d11 = self.storage[(col, col)];
                    let d21 = self.storage[(col + 1, col)];
                    let d22 = self.storage[(col + 1, col + 1)];
                    let det = d11 * d22 - d21 * d21;
                    let (b1, b2) = (z[col], z[col + 1]);
                    z[col] = (d22 * b1 - d21 * b2) / det;
                    z[col + 1] = (d11 * b2 - d21 * b1) / det;
                }
            }
        }

        // Back substitution with Lᵀ.
        for block in self.blocks.iter().rev() {
            match *block {
                Block::Single { col } => {
                    let mut acc = z[col];
                    for i in col + 1..dim {
                        acc -= self.storage[(i, col)] * z[i];
                    }
                    z[col] = acc;
                }
                Block::Double { col } => {
                    let mut acc0 = z[col];
                    let mut acc1 = z[col + 1];
                    for i in col + 2..dim {
                        acc0 -= self.storage[(i, col)] * z[i];
                        acc1 -= self.storage[(i, col + 1)] * z[i];
                    }
                    z[col] = acc0;
                    z[col + 1] = acc1;
                }
            }
        }

        let mut sol = DVector::zeros(dim);
        for i in 0..dim {
            sol[self.perm[i]] = z[i];
        }

        let dx = sol.rows(0, self.n).into_owned();
        let dlambda = -sol.rows(self.n, self.m).into_owned();
        Ok((dx, dlambda))
    }
}

/// Result of the inertia-correcting shift: `B = H + ξ·I` with the smallest
/// accepted shift, its factorization and the achieved inertia.
#[derive(Debug, Clone)]
pub struct RegularizedKkt {
    pub b: DMatrix<f64>,
    pub xi: f64,
    pub inertia: Inertia,
    pub factorization: KktFactorization,
}

/// Maximum number of shift trials (ξ = 0, ξ₁, 10ξ₁, …).
pub const MAX_SHIFT_TRIALS: usize = 60;

/// Finds the smallest shift `ξ` from the schedule `0, 1e-8·(1+‖H‖∞),
/// 10·ξ, …` such that `K = [[H+ξI, J], [Jᵀ, -delta·I]]` has inertia
/// `(n, m, 0)`. Trial systems that factor as singular simply advance the
/// schedule.
pub fn regularize(h: &DMatrix<f64>, j: &DMatrix<f64>, delta: f64) -> Result<RegularizedKkt> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "H (square)",
            expected: n,
            actual: h.ncols(),
        });
    }
    if !is_bitwise_symmetric(h) {
        return Err(Error::NotSymmetric("H"));
    }
    let m = j.ncols();
    let target = Inertia::saddle_target(n, m);
    let xi1 = 1e-8 * (1.0 + inf_norm(h));

    let mut xi = 0.0;
    for trial in 0..MAX_SHIFT_TRIALS {
        let mut b = h.clone();
        for i in 0..n {
            b[(i, i)] += xi;
        }
        let system = assemble(&b, j, delta)?;
        match factor_with_inertia(&system) {
            Ok((factorization, inertia)) => {
                if inertia == target {
                    return Ok(RegularizedKkt {
                        b,
                        xi,
                        inertia,
                        factorization,
                    });
                }
            }
            Err(Error::SingularSystem) => {}
            Err(e) => return Err(e),
        }
        xi = if trial == 0 { xi1 } else { xi * 10.0 };
    }
    Err(Error::RegularizationFailed {
        trials: MAX_SHIFT_TRIALS,
    })
}

/// Shift schedule used by [`regularize`], exposed so callers can reproduce
/// the trial sequence (e.g. to make a matrix positive definite for scaling
/// purposes).
pub fn shift_schedule(h_inf_norm: f64) -> impl Iterator<Item = f64> {
    let xi1 = 1e-8 * (1.0 + h_inf_norm);
    (0..MAX_SHIFT_TRIALS).scan(0.0f64, move |state, trial| {
        let current = *state;
        *state = if trial == 0 { xi1 } else { *state * 10.0 };
        Some(current)
    })
}
