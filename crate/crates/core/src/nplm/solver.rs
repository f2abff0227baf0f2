use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One labelled classification problem: rows of `k` with `is_data[a] == false`
/// belong to the reference sample and carry weight `w_ref`.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub k: &'a DMatrix<f64>,
    pub kc: &'a DMatrix<f64>,
    pub is_data: &'a [bool],
    pub w_ref: f64,
    pub lambda: f64,
}

impl Problem<'_> {
    fn check(&self) -> Result<()> {
        let m = self.k.ncols();
        if self.is_data.len() != self.k.nrows() {
            return Err(Error::invalid("label count does not match kernel rows"));
        }
        if self.kc.nrows() != m || self.kc.ncols() != m {
            return Err(Error::invalid("center kernel must be M×M"));
        }
        if !(self.w_ref > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("w_ref must be positive and lambda non-negative"));
        }
        Ok(())
    }

    fn predictions(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.k * w;
        if let Some(row) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow {
                row,
                detail: "non-finite model output".into(),
            });
        }
        Ok(f)
    }

    fn loss_at(&self, f: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let mut data = 0.0;
        let mut reference = 0.0;
        for (&fa, &y) in f.iter().zip(self.is_data) {
            if y {
                data += softplus(-fa);
            } else {
                reference += softplus(fa);
            }
        }
        self.w_ref * reference + data + self.lambda * w.dot(&(self.kc * w))
    }

    /// Residual `∂loss/∂f` and curvature `∂²loss/∂f²` per row.
    fn residuals(&self, f: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = f.len();
        let mut r = DVector::zeros(n);
        let mut h = DVector::zeros(n);
        for a in 0..n {
            let p = sigmoid(f[a]);
            let q = sigmoid(-f[a]);
            if self.is_data[a] {
                r[a] = -q;
                h[a] = p * q;
            } else {
                r[a] = self.w_ref * p;
                h[a] = self.w_ref * p * q;
            }
        }
        (r, h)
    }

    fn gradient(&self, r: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.k.tr_mul(r) + (self.kc * w) * (2.0 * self.lambda)
    }

    fn hessian_times(&self, h: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let kv = (self.k * v).component_mul(h);
        self.k.tr_mul(&kv) + (self.kc * v) * (2.0 * self.lambda)
    }

    fn hessian(&self, h: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.k.clone();
        for (mut row, &hv) in a.row_iter_mut().zip(h.iter()) {
            row *= hv.sqrt();
        }
        let mut out = a.transpose() * &a;
        out += self.kc * (2.0 * self.lambda);
        out
    }
}

/// Loss and gradient of the regularized weighted cross-entropy
/// `Σ w_R(1−y)·softplus(f) + y·softplus(−f) + λ·wᵀK_c w` with `f = K·w`.
pub fn nplm_objective(problem: &Problem<'_>, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    problem.check()?;
    if w.len() != problem.k.ncols() {
        return Err(Error::invalid("weight length does not match kernel columns"));
    }
    let f = problem.predictions(w)?;
    let (r, _) = problem.residuals(&f);
    Ok((problem.loss_at(&f, w), problem.gradient(&r, w)))
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub grad_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub weights: DVector<f64>,
    /// Model output on every row of the problem.
    pub predictions: DVector<f64>,
    /// Objective after each accepted step, starting with the value at `w = 0`.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

struct Preconditioner(Cholesky<f64, Dyn>);

impl Preconditioner {
    fn new(mut h: DMatrix<f64>) -> Result<Self> {
        let m = h.nrows();
        let scale = (h.trace() / m as f64).max(f64::MIN_POSITIVE);
        let mut jitter = 0.0;
        for _ in 0..20 {
            if let Some(c) = Cholesky::new(h.clone()) {
                return Ok(Self(c));
            }
            let next = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
            for i in 0..m {
                h[(i, i)] += next - jitter;
            }
            jitter = next;
        }
        Err(Error::Numerical("Hessian preconditioner is not positive definite".into()))
    }

    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        self.0.solve(r)
    }
}

/// Preconditioned CG for `H p = −g`; returns the step and the iteration count.
fn newton_direction(
    problem: &Problem<'_>,
    h: &DVector<f64>,
    g: &DVector<f64>,
    pre: &Preconditioner,
    rel_tol: f64,
) -> (DVector<f64>, usize) {
    let m = g.len();
    let mut x = DVector::zeros(m);
    let mut r = -g;
    let mut z = pre.apply(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let target = rel_tol * g.norm();
    for it in 1..=2 * m {
        let hp = problem.hessian_times(h, &p);
        let php = p.dot(&hp);
        if !(php > 0.0) {
            return (if it == 1 { -g } else { x }, it);
        }
        let alpha = rz / php;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &hp, 1.0);
        if r.norm() <= target {
            return (x, it);
        }
        z = pre.apply(&r);
        let rz_next = r.dot(&z);
        p = &z + &p * (rz_next / rz);
        rz = rz_next;
    }
    (x, 2 * m)
}

/// Eigenvalues of the center kernel below this fraction of the largest are
/// dropped from the whitened basis.
const EIGEN_FLOOR: f64 = 1e-12;

/// Minimizes the objective from `w = 0` with Newton–CG and backtracking.
///
/// The iteration runs in whitened coordinates `β` with `w = T·β` and
/// `Tᵀ K_c T = I`, where `T` spans the numerically nonzero eigenspace of
/// `K_c`. In those coordinates the penalty is `λ‖β‖²` and the Hessian stays
/// well conditioned for wide kernels; the reported gradient norm is the one
/// with respect to `β`.
pub fn solve(problem: &Problem<'_>, options: SolverOptions) -> Result<Solution> {
    problem.check()?;
    let eig = problem.kc.clone().symmetric_eigen();
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return Err(Error::Numerical("center kernel matrix has no positive eigenvalue".into()));
    }
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > EIGEN_FLOOR * top)
        .collect();
    let m = problem.kc.nrows();
    let mut t = DMatrix::zeros(m, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        let scale = eig.eigenvalues[i].sqrt().recip();
        t.set_column(j, &(eig.eigenvectors.column(i) * scale));
    }
    let phi = problem.k * &t;
    let identity = DMatrix::identity(keep.len(), keep.len());
    let whitened = Problem {
        k: &phi,
        kc: &identity,
        ..*problem
    };
    let sol = newton(&whitened, options)?;
    Ok(Solution {
        weights: &t * &sol.weights,
        ..sol
    })
}

fn newton(problem: &Problem<'_>, options: SolverOptions) -> Result<Solution> {
    let m = problem.k.ncols();
    let mut w = DVector::zeros(m);
    let mut f = DVector::zeros(problem.k.nrows());
    let mut loss = problem.loss_at(&f, &w);
    let mut trace = vec![loss];
    let (mut r, mut h) = problem.residuals(&f);
    let mut g = problem.gradient(&r, &w);
    let mut pre = Preconditioner::new(problem.hessian(&h))?;
    let row_norms: DVector<f64> = DVector::from_iterator(
        problem.k.nrows(),
        problem.k.row_iter().map(|r| r.norm_squared()),
    );
    let kc_trace = 2.0 * problem.lambda * problem.kc.trace();
    let mut iterations = 0;
    loop {
        let gnorm = g.norm();
        // With large weights the gradient cannot be resolved below the change
        // caused by one rounding of w, roughly ε·‖H‖·‖w‖.
        let floor = f64::EPSILON * (h.dot(&row_norms) + kc_trace) * w.norm();
        if gnorm < options.grad_tolerance.max(floor) {
            return Ok(Solution {
                weights: w,
                predictions: f,
                loss_trace: trace,
                iterations,
                grad_norm: gnorm,
            });
        }
        if iterations >= options.max_iterations {
            return Err(Error::Convergence {
                iterations,
                grad_norm: gnorm,
            });
        }
        iterations += 1;

        let (mut step, cg_iters) = newton_direction(problem, &h, &g, &pre, gnorm.sqrt().min(0.1));
        let mut slope = g.dot(&step);
        if !(slope < 0.0) {
            step = -&g;
            slope = -gnorm * gnorm;
        }
        let kstep = problem.k * &step;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let w_try = &w + &step * alpha;
            let f_try = &f + &kstep * alpha;
            if f_try.iter().all(|v| v.is_finite()) {
                let l_try = problem.loss_at(&f_try, &w_try);
                // Near the optimum the decrease drops below the rounding noise of a
                // sum over every row; accept a full step there if it does not
                // measurably increase the loss.
                let noise = 1e-13 * (1.0 + loss.abs());
                let armijo = l_try <= loss + 1e-4 * alpha * slope;
                let flat = alpha == 1.0 && l_try <= loss + noise && -slope < noise;
                if armijo || flat {
                    accepted = Some((w_try, f_try, l_try));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((w_new, f_new, l_new)) = accepted else {
            if gnorm < 10.0 * floor {
                return Ok(Solution {
                    weights: w,
                    predictions: f,
                    loss_trace: trace,
                    iterations,
                    grad_norm: gnorm,
                });
            }
            return Err(Error::Convergence {
                iterations,
                grad_norm: gnorm,
            });
        };
        w = w_new;
        f = f_new;
        loss = l_new;
        trace.push(loss);
        (r, h) = problem.residuals(&f);
        g = problem.gradient(&r, &w);
        if cg_iters > 10 {
            pre = Preconditioner::new(problem.hessian(&h))?;
        }
    }
}
