//! Nonnegativity-constrained lasso by ADMM and RSS-path selection of `lambda`.
//!
//! The problem is
//!
//! ```text
//! minimize 1/2 |y - X b|^2 + lambda |b|_1   subject to  Cc b >= 0
//! ```
//!
//! split as `b - g = 0`, `Cc b - e = 0` with scaled duals `u`, `t`. The
//! returned estimate is `g`, which is exactly sparse.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::scalar::{abs, lit, to_f64, Real};

/// ADMM tolerances and iteration cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Over-relaxation factor in `[1, 2)`.
    pub alpha: f64,
    pub max_iters: usize,
    pub rho: RhoPolicy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eps_abs: 1e-4,
            eps_rel: 1e-2,
            alpha: 1.5,
            max_iters: 5000,
            rho: RhoPolicy::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_abs > 0.0 && self.eps_rel > 0.0) {
            return Err(FodError::validation("ADMM tolerances must be positive"));
        }
        if !(1.0..2.0).contains(&self.alpha) {
            return Err(FodError::validation(format!(
                "relaxation factor must lie in [1, 2), got {}",
                self.alpha
            )));
        }
        if self.max_iters == 0 {
            return Err(FodError::validation("max_iters must be positive"));
        }
        match self.rho {
            RhoPolicy::Lambda { floor } if floor > 0.0 => Ok(()),
            RhoPolicy::Fixed(r) if r > 0.0 => Ok(()),
            _ => Err(FodError::validation("rho must be positive")),
        }
    }

    /// `rho` used for penalty `lambda`.
    pub fn rho_for(&self, lambda: f64) -> f64 {
        match self.rho {
            RhoPolicy::Lambda { floor } => lambda.max(floor),
            RhoPolicy::Fixed(r) => r,
        }
    }
}

/// How the augmented-Lagrangian penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoPolicy {
    /// `rho = max(lambda, floor)`; one factorization per `lambda`.
    Lambda { floor: f64 },
    /// The same `rho` for every `lambda`, so one factorization serves a path.
    Fixed(f64),
}

impl Default for RhoPolicy {
    fn default() -> Self {
        RhoPolicy::Lambda { floor: 1e-6 }
    }
}

/// Design and constraint operators.
///
/// The framed form stores `X = U C` and `Cc = V C` with a short, wide `C`;
/// the `beta` update then reduces to a system of the size of `C`'s row count.
#[derive(Debug, Clone)]
pub enum LassoDesign<T: Real> {
    Dense {
        x: DMatrix<T>,
        cc: DMatrix<T>,
        xtx: DMatrix<T>,
        ctc: DMatrix<T>,
    },
    Framed {
        u: DMatrix<T>,
        v: DMatrix<T>,
        c: DMatrix<T>,
        utu: DMatrix<T>,
        vtv: DMatrix<T>,
        /// `C C^T`.
        gram: DMatrix<T>,
        gram_lu: LU<T, Dyn, Dyn>,
        /// Transposed copies so every product in the iteration is a plain
        /// column-major matrix-vector product.
        v_tr: DMatrix<T>,
        c_tr: DMatrix<T>,
    },
}

impl<T: Real> LassoDesign<T> {
    pub fn dense(x: DMatrix<T>, cc: DMatrix<T>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 || cc.nrows() == 0 || cc.ncols() != x.ncols() {
            return Err(FodError::validation(format!(
                "incompatible lasso design: X {}x{}, Cc {}x{}",
                x.nrows(),
                x.ncols(),
                cc.nrows(),
                cc.ncols()
            )));
        }
        let xtx = x.tr_mul(&x);
        let ctc = cc.tr_mul(&cc);
        Ok(LassoDesign::Dense { x, cc, xtx, ctc })
    }

    pub fn framed(u: DMatrix<T>, v: DMatrix<T>, c: DMatrix<T>) -> Result<Self> {
        if u.nrows() == 0
            || v.nrows() == 0
            || c.ncols() == 0
            || u.ncols() != c.nrows()
            || v.ncols() != c.nrows()
        {
            return Err(FodError::validation(format!(
                "incompatible framed design: U {}x{}, V {}x{}, C {}x{}",
                u.nrows(),
                u.ncols(),
                v.nrows(),
                v.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        let gram = &c * c.transpose();
        let gram_lu = gram.clone().lu();
        if !gram_lu.is_invertible() {
            return Err(FodError::validation("framed design needs C with full row rank"));
        }
        let utu = u.tr_mul(&u);
        let vtv = v.tr_mul(&v);
        let v_tr = v.transpose();
        let c_tr = c.transpose();
        Ok(LassoDesign::Framed {
            u,
            v,
            c,
            utu,
            vtv,
            gram,
            gram_lu,
            v_tr,
            c_tr,
        })
    }

    /// Number of measurements.
    pub fn n(&self) -> usize {
        match self {
            LassoDesign::Dense { x, .. } => x.nrows(),
            LassoDesign::Framed { u, .. } => u.nrows(),
        }
    }

    /// Number of coefficients.
    pub fn p(&self) -> usize {
        match self {
            LassoDesign::Dense { x, .. } => x.ncols(),
            LassoDesign::Framed { c, .. } => c.ncols(),
        }
    }

    /// Number of constraints.
    pub fn l(&self) -> usize {
        match self {
            LassoDesign::Dense { cc, .. } => cc.nrows(),
            LassoDesign::Framed { v, .. } => v.nrows(),
        }
    }

    pub fn x_mul(&self, beta: &DVector<T>) -> DVector<T> {
        match self {
            LassoDesign::Dense { x, .. } => x * beta,
            LassoDesign::Framed { u, c, .. } => u * (c * beta),
        }
    }

    pub fn xt_mul(&self, y: &DVector<T>) -> DVector<T> {
        match self {
            LassoDesign::Dense { x, .. } => x.tr_mul(y),
            LassoDesign::Framed { u, c, .. } => c.tr_mul(&u.tr_mul(y)),
        }
    }

    pub fn cc_mul(&self, beta: &DVector<T>) -> DVector<T> {
        match self {
            LassoDesign::Dense { cc, .. } => cc * beta,
            LassoDesign::Framed { v, c, .. } => v * (c * beta),
        }
    }

    pub fn cct_mul(&self, w: &DVector<T>) -> DVector<T> {
        match self {
            LassoDesign::Dense { cc, .. } => cc.tr_mul(w),
            LassoDesign::Framed { v, c, .. } => c.tr_mul(&v.tr_mul(w)),
        }
    }

    /// Explicit `X` (materialized for the framed form).
    pub fn x_matrix(&self) -> DMatrix<T> {
        match self {
            LassoDesign::Dense { x, .. } => x.clone(),
            LassoDesign::Framed { u, c, .. } => u * c,
        }
    }

    /// Explicit `Cc` (materialized for the framed form).
    pub fn cc_matrix(&self) -> DMatrix<T> {
        match self {
            LassoDesign::Dense { cc, .. } => cc.clone(),
            LassoDesign::Framed { v, c, .. } => v * c,
        }
    }

    /// Factorizes `X^T X + rho I + rho Cc^T Cc`.
    pub fn factor(&self, rho: T) -> Result<NormalFactor<T>> {
        if rho <= T::zero() {
            return Err(FodError::validation("rho must be positive"));
        }
        match self {
            LassoDesign::Dense { xtx, ctc, .. } => {
                let mut m = xtx + ctc * rho;
                for i in 0..m.nrows() {
                    m[(i, i)] += rho;
                }
                let chol = Cholesky::new(m)
                    .ok_or_else(|| FodError::Solver("normal matrix is not positive definite".into()))?;
                Ok(NormalFactor::Dense { chol, rho })
            }
            LassoDesign::Framed { utu, vtv, gram, .. } => {
                // (rho I + C^T A C)^{-1} r = r_perp / rho + C^T (rho I + A G)^{-1} a
                // where r = C^T a + r_perp and G = C C^T.
                let a = utu + vtv * rho;
                let mut m = &a * gram;
                for i in 0..m.nrows() {
                    m[(i, i)] += rho;
                }
                let lu = m.lu();
                if !lu.is_invertible() {
                    return Err(FodError::Solver("reduced normal matrix is singular".into()));
                }
                Ok(NormalFactor::Framed { lu, rho })
            }
        }
    }
}

/// Cached factorization of the `beta`-update system for one `rho`.
#[derive(Debug, Clone)]
pub enum NormalFactor<T: Real> {
    Dense { chol: Cholesky<T, Dyn>, rho: T },
    Framed { lu: LU<T, Dyn, Dyn>, rho: T },
}

impl<T: Real> NormalFactor<T> {
    pub fn rho(&self) -> T {
        match self {
            NormalFactor::Dense { rho, .. } | NormalFactor::Framed { rho, .. } => *rho,
        }
    }

    /// Solves the `beta`-update system for right-hand side `r`.
    pub fn solve(&self, design: &LassoDesign<T>, r: &DVector<T>) -> DVector<T> {
        match (self, design) {
            (NormalFactor::Dense { chol, .. }, _) => chol.solve(r),
            (NormalFactor::Framed { lu, rho }, LassoDesign::Framed { c, gram_lu, .. }) => {
                let cr = c * r;
                let a = gram_lu.solve(&cr).unwrap_or(cr);
                let mut out = r - c.tr_mul(&a);
                out /= *rho;
                let z = lu.solve(&a).unwrap_or_else(|| DVector::zeros(a.len()));
                out += c.tr_mul(&z);
                out
            }
            (NormalFactor::Framed { .. }, LassoDesign::Dense { .. }) => {
                panic!("framed factorization used with a dense design")
            }
        }
    }
}

/// Iterates of the splitting, reusable as a warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState<T: Real> {
    pub beta: DVector<T>,
    pub gamma: DVector<T>,
    pub eta: DVector<T>,
    /// Scaled dual of `beta = gamma`.
    pub u: DVector<T>,
    /// Scaled dual of `Cc beta = eta`.
    pub t: DVector<T>,
    pub rho: T,
    pub iterations: usize,
}

impl<T: Real> AdmmState<T> {
    pub fn zeros(p: usize, l: usize, rho: T) -> Self {
        AdmmState {
            beta: DVector::zeros(p),
            gamma: DVector::zeros(p),
            eta: DVector::zeros(l),
            u: DVector::zeros(p),
            t: DVector::zeros(l),
            rho,
            iterations: 0,
        }
    }

    /// Re-expresses the scaled duals for a new `rho`.
    pub fn rescaled(&self, rho: T) -> Self {
        let f = self.rho / rho;
        AdmmState {
            u: &self.u * f,
            t: &self.t * f,
            rho,
            iterations: 0,
            ..self.clone()
        }
    }
}

/// Result of one constrained-lasso solve.
#[derive(Debug, Clone)]
pub struct AdmmOutcome<T: Real> {
    /// Sparse estimate (`gamma`).
    pub estimate: DVector<T>,
    pub state: AdmmState<T>,
    pub converged: bool,
    pub primal_residual: T,
    pub dual_residual: T,
}

/// Elementwise soft thresholding `(|v_i| - kappa)_+ sign(v_i)`.
pub fn soft_threshold<T: Real>(v: &DVector<T>, kappa: T) -> DVector<T> {
    v.map(|x| shrink(x, kappa))
}

#[inline]
fn shrink<T: Real>(x: T, kappa: T) -> T {
    if x > kappa {
        x - kappa
    } else if x < -kappa {
        x + kappa
    } else {
        T::zero()
    }
}

/// Solver bound to one design, caching the factorization for the last `rho`.
#[derive(Debug, Clone)]
pub struct LassoSolver<'a, T: Real> {
    design: &'a LassoDesign<T>,
    config: SolverConfig,
    factor: Option<NormalFactor<T>>,
}

impl<'a, T: Real> LassoSolver<'a, T> {
    pub fn new(design: &'a LassoDesign<T>, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        Ok(LassoSolver {
            design,
            config,
            factor: None,
        })
    }

    pub fn design(&self) -> &LassoDesign<T> {
        self.design
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    fn factor_for(&mut self, rho: T) -> Result<&NormalFactor<T>> {
        let stale = match &self.factor {
            Some(f) => f.rho() != rho,
            None => true,
        };
        if stale {
            self.factor = Some(self.design.factor(rho)?);
        }
        Ok(self.factor.as_ref().expect("factor present"))
    }

    /// Solves for one `lambda`, optionally warm-started.
    pub fn solve(&mut self, y: &DVector<T>, lambda: T, warm: Option<&AdmmState<T>>) -> Result<AdmmOutcome<T>> {
        let xty = self.check_data(y, lambda)?;
        self.solve_with_xty(&xty, lambda, warm)
    }

    fn check_data(&self, y: &DVector<T>, lambda: T) -> Result<DVector<T>> {
        if y.len() != self.design.n() {
            return Err(FodError::validation(format!(
                "signal has {} entries, design expects {}",
                y.len(),
                self.design.n()
            )));
        }
        if !(lambda >= T::zero()) {
            return Err(FodError::validation("lambda must be nonnegative"));
        }
        Ok(self.design.xt_mul(y))
    }

    fn solve_with_xty(&mut self, xty: &DVector<T>, lambda: T, warm: Option<&AdmmState<T>>) -> Result<AdmmOutcome<T>> {
        let cfg = self.config;
        let (p, l) = (self.design.p(), self.design.l());
        let rho: T = lit(cfg.rho_for(to_f64(lambda)));
        let mut st = match warm {
            Some(w) if w.beta.len() == p && w.eta.len() == l => w.rescaled(rho),
            Some(_) => return Err(FodError::validation("warm start has the wrong dimensions")),
            None => AdmmState::zeros(p, l, rho),
        };
        let design = self.design;
        let factor = self.factor_for(rho)?.clone();
        let params = IterParams {
            rho,
            kappa: lambda / rho,
            alpha: lit(cfg.alpha),
            eps_abs: lit(cfg.eps_abs),
            eps_rel: lit(cfg.eps_rel),
            sqrt_pl: lit(((p + l) as f64).sqrt()),
            sqrt_p: lit((p as f64).sqrt()),
            max_iters: cfg.max_iters,
        };
        let (converged, r_norm, d_norm) = match (design, &factor) {
            (LassoDesign::Framed { .. }, NormalFactor::Framed { lu, .. }) => {
                iterate_framed(&mut st, xty, &params, design, lu)
            }
            _ => iterate_generic(&mut st, xty, &params, design, &factor),
        };
        Ok(AdmmOutcome {
            estimate: st.gamma.clone(),
            state: st,
            converged,
            primal_residual: r_norm,
            dual_residual: d_norm,
        })
    }
}

struct IterParams<T> {
    rho: T,
    kappa: T,
    alpha: T,
    eps_abs: T,
    eps_rel: T,
    sqrt_pl: T,
    sqrt_p: T,
    max_iters: usize,
}

impl<T: Real> IterParams<T> {
    /// Primal test from squared norms: `|r| <= eps_pri`.
    fn primal_ok(&self, r2: T, beta_cb2: T, gamma_eta2: T) -> bool {
        let big = if beta_cb2 > gamma_eta2 { beta_cb2 } else { gamma_eta2 };
        r2.sqrt() <= self.eps_abs * self.sqrt_pl + self.eps_rel * big.sqrt()
    }

    /// Dual test `|d| <= eps_dual`, with `dual_scale = |u + Cc' t|`.
    fn dual_ok(&self, d: T, dual_scale: T) -> bool {
        d <= self.eps_abs * self.sqrt_p + self.eps_rel * self.rho * dual_scale
    }
}

#[inline]
fn positive<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn iterate_generic<T: Real>(
    st: &mut AdmmState<T>,
    xty: &DVector<T>,
    prm: &IterParams<T>,
    design: &LassoDesign<T>,
    factor: &NormalFactor<T>,
) -> (bool, T, T) {
    let rho = prm.rho;
    let one_m_alpha = T::one() - prm.alpha;
    let mut r2 = T::zero();
    let mut d_norm = T::zero();
    let mut iters = 0;
    let mut converged = false;
    while iters < prm.max_iters {
        iters += 1;
        let mut rhs = &st.gamma - &st.u;
        rhs += design.cct_mul(&(&st.eta - &st.t));
        rhs *= rho;
        rhs += xty;
        st.beta = factor.solve(design, &rhs);
        let cb = design.cc_mul(&st.beta);

        let beta_hat = &st.beta * prm.alpha + &st.gamma * one_m_alpha;
        let cb_hat = &cb * prm.alpha + &st.eta * one_m_alpha;

        let gamma_prev = std::mem::replace(&mut st.gamma, soft_threshold(&(&beta_hat + &st.u), prm.kappa));
        let eta_prev = std::mem::replace(&mut st.eta, (&cb_hat + &st.t).map(positive));

        st.u += &beta_hat - &st.gamma;
        st.t += &cb_hat - &st.eta;

        r2 = (&st.beta - &st.gamma).norm_squared() + (&cb - &st.eta).norm_squared();
        d_norm = rho * ((&st.gamma - &gamma_prev) + design.cct_mul(&(&st.eta - &eta_prev))).norm();
        let dual_scale = (&st.u + design.cct_mul(&st.t)).norm();
        if prm.primal_ok(
            r2,
            st.beta.norm_squared() + cb.norm_squared(),
            st.gamma.norm_squared() + st.eta.norm_squared(),
        ) && prm.dual_ok(d_norm, dual_scale)
        {
            converged = true;
            break;
        }
    }
    st.iterations = iters;
    (converged, r2.sqrt(), d_norm)
}

/// Same iteration as [`iterate_generic`] for `X = U C`, `Cc = V C`, with
/// every product routed through the short side of `C` and no per-iteration
/// allocation. The dual residual is only evaluated once the primal test
/// passes.
fn iterate_framed<T: Real>(
    st: &mut AdmmState<T>,
    xty: &DVector<T>,
    prm: &IterParams<T>,
    design: &LassoDesign<T>,
    lu: &LU<T, Dyn, Dyn>,
) -> (bool, T, T) {
    let LassoDesign::Framed {
        v,
        c,
        gram,
        gram_lu,
        v_tr,
        c_tr,
        ..
    } = design
    else {
        unreachable!("framed iteration on a dense design")
    };
    let rho = prm.rho;
    let (alpha, one_m_alpha) = (prm.alpha, T::one() - prm.alpha);
    let (zero, one) = (T::zero(), T::one());
    let k = c.nrows();
    let p = c.ncols();
    let l = v.nrows();

    let mut veta = v_tr * &st.eta;
    let mut vt = v_tr * &st.t;
    let mut veta_prev = veta.clone();
    let mut wk = DVector::<T>::zeros(k);
    let mut a = DVector::<T>::zeros(k);
    let mut z = DVector::<T>::zeros(k);
    let mut cbs = DVector::<T>::zeros(k);
    let mut rhs = DVector::<T>::zeros(p);
    let mut gamma_prev = DVector::<T>::zeros(p);
    let mut wp = DVector::<T>::zeros(p);
    let mut cb = DVector::<T>::zeros(l);

    let mut r2 = zero;
    let mut d_norm = T::max_value().unwrap_or_else(T::one);
    let mut iters = 0;
    let mut converged = false;
    while iters < prm.max_iters {
        iters += 1;
        // rhs = X'y + rho (gamma - u) + rho C' V' (eta - t)
        wk.copy_from(&veta);
        wk -= &vt;
        rhs.gemv(one, c_tr, &wk, zero);
        rhs += &st.gamma;
        rhs -= &st.u;
        rhs *= rho;
        rhs += xty;

        // beta = r_perp / rho + C' M^{-1} a,  a = G^{-1} C r
        a.gemv(one, c, &rhs, zero);
        gram_lu.solve_mut(&mut a);
        st.beta.copy_from(&rhs);
        st.beta.gemv(-one, c_tr, &a, one);
        st.beta /= rho;
        z.copy_from(&a);
        lu.solve_mut(&mut z);
        st.beta.gemv(one, c_tr, &z, one);
        // C beta = G z
        cbs.gemv(one, gram, &z, zero);
        cb.gemv(one, v, &cbs, zero);

        gamma_prev.copy_from(&st.gamma);
        veta_prev.copy_from(&veta);
        let mut rb = zero;
        let mut n_beta = zero;
        let mut n_gamma = zero;
        for i in 0..p {
            let b = st.beta[i];
            let bh = alpha * b + one_m_alpha * st.gamma[i];
            let g = shrink(bh + st.u[i], prm.kappa);
            st.u[i] += bh - g;
            st.gamma[i] = g;
            rb += (b - g) * (b - g);
            n_beta += b * b;
            n_gamma += g * g;
        }
        let mut rc = zero;
        let mut n_cb = zero;
        let mut n_eta = zero;
        for i in 0..l {
            let x = cb[i];
            let xh = alpha * x + one_m_alpha * st.eta[i];
            let e = positive(xh + st.t[i]);
            st.t[i] += xh - e;
            st.eta[i] = e;
            rc += (x - e) * (x - e);
            n_cb += x * x;
            n_eta += e * e;
        }
        r2 = rb + rc;

        veta.gemv(one, v_tr, &st.eta, zero);
        vt.gemv(one, v_tr, &st.t, zero);

        if !prm.primal_ok(r2, n_beta + n_cb, n_gamma + n_eta) {
            continue;
        }
        wk.copy_from(&veta);
        wk -= &veta_prev;
        wp.copy_from(&st.gamma);
        wp -= &gamma_prev;
        wp.gemv(one, c_tr, &wk, one);
        d_norm = rho * wp.norm();

        wp.copy_from(&st.u);
        wp.gemv(one, c_tr, &vt, one);
        if prm.dual_ok(d_norm, wp.norm()) {
            converged = true;
            break;
        }
    }
    st.iterations = iters;
    (converged, r2.sqrt(), d_norm)
}

/// One-shot solve of the constrained lasso.
pub fn solve_constrained_lasso<T: Real>(
    design: &LassoDesign<T>,
    y: &DVector<T>,
    lambda: T,
    config: &SolverConfig,
    warm: Option<&AdmmState<T>>,
) -> Result<AdmmOutcome<T>> {
    LassoSolver::new(design, *config)?.solve(y, lambda, warm)
}

/// `1/2 |y - X b|^2 + lambda |b|_1`.
pub fn objective<T: Real>(design: &LassoDesign<T>, y: &DVector<T>, lambda: T, beta: &DVector<T>) -> T {
    let r = y - design.x_mul(beta);
    lit::<T>(0.5) * r.norm_squared() + lambda * beta.iter().fold(T::zero(), |a, b| a + abs(*b))
}

/// Optimality diagnostics of an ADMM outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktReport {
    /// Largest violation of `0 in X^T(Xb - y) + lambda d|b| - Cc^T mu`.
    pub stationarity: f64,
    /// Largest `|mu_i (Cc b)_i|`.
    pub complementarity: f64,
    /// Largest `max(0, -(Cc b)_i)`.
    pub infeasibility: f64,
}

/// Checks the optimality conditions at `outcome.estimate`, using
/// `mu = max(0, -rho t)` as the constraint multipliers.
pub fn kkt_report<T: Real>(design: &LassoDesign<T>, y: &DVector<T>, lambda: T, outcome: &AdmmOutcome<T>) -> KktReport {
    let b = &outcome.estimate;
    let rho = outcome.state.rho;
    let mu = outcome.state.t.map(|v| {
        let m = -(v * rho);
        if m > T::zero() {
            m
        } else {
            T::zero()
        }
    });
    let g = design.xt_mul(&(design.x_mul(b) - y)) - design.cct_mul(&mu);
    let mut stat = 0.0f64;
    for i in 0..b.len() {
        let gi = to_f64(g[i]);
        let lam = to_f64(lambda);
        let v = if b[i] > T::zero() {
            (gi + lam).abs()
        } else if b[i] < T::zero() {
            (gi - lam).abs()
        } else {
            (gi.abs() - lam).max(0.0)
        };
        stat = stat.max(v);
    }
    let cb = design.cc_mul(b);
    let mut comp = 0.0f64;
    let mut infeas = 0.0f64;
    for i in 0..cb.len() {
        comp = comp.max(to_f64(abs(mu[i] * cb[i])));
        infeas = infeas.max(-to_f64(cb[i]));
    }
    KktReport {
        stationarity: stat,
        complementarity: comp,
        infeasibility: infeas,
    }
}

/// Descending `lambda` grid with the RSS-rule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub lambdas: Vec<f64>,
    /// Averaging window `T`.
    pub window: usize,
    /// Threshold on the averaged relative RSS change.
    pub threshold: f64,
    /// Keep fitting after the rule fires (for diagnostics).
    #[serde(default)]
    pub full_path: bool,
}

impl LambdaPath {
    /// `k` log-spaced values from `hi` down to `lo`.
    pub fn log_spaced(hi: f64, lo: f64, k: usize, window: usize, threshold: f64) -> Result<Self> {
        if !(hi > lo && lo > 0.0) || k < 2 {
            return Err(FodError::validation("lambda grid needs hi > lo > 0 and at least two values"));
        }
        let (a, b) = (hi.log10(), lo.log10());
        let lambdas = (0..k)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (k - 1) as f64))
            .collect();
        let path = LambdaPath {
            lambdas,
            window,
            threshold,
            full_path: false,
        };
        path.validate()?;
        Ok(path)
    }

    /// Simulation defaults: 100 values on `1 .. 1e-5`, `T = 5`.
    pub fn simulation(threshold: f64) -> Self {
        Self::log_spaced(1.0, 1e-5, 100, 5, threshold).expect("valid default grid")
    }

    /// Real-data defaults: 120 values on `10^0.5 .. 1e-5`, `T = 6`, `3e-3`.
    pub fn real_data() -> Self {
        Self::log_spaced(10f64.sqrt(), 1e-5, 120, 6, 3e-3).expect("valid default grid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.lambdas.len() <= self.window {
            return Err(FodError::validation(format!(
                "need K > T >= 1, got K = {}, T = {}",
                self.lambdas.len(),
                self.window
            )));
        }
        if !self.lambdas.windows(2).all(|w| w[0] > w[1]) || self.lambdas.last().copied().unwrap_or(0.0) <= 0.0 {
            return Err(FodError::validation("lambda grid must be positive and strictly descending"));
        }
        if !(self.threshold > 0.0) {
            return Err(FodError::validation("RSS threshold must be positive"));
        }
        Ok(())
    }
}

/// Floor applied to RSS values before taking logs.
pub const RSS_FLOOR: f64 = 1e-300;

/// Relative RSS changes `delta_k` for `k = 1..K-1` (0-based; `delta[0]` is
/// unused and set to NaN).
pub fn rss_deltas(lambdas: &[f64], rss: &[f64]) -> Vec<f64> {
    let mut d = vec![f64::NAN; rss.len()];
    for k in 1..rss.len() {
        let num = rss[k].max(RSS_FLOOR).ln() - rss[k - 1].max(RSS_FLOOR).ln();
        let den = lambdas[k].ln() - lambdas[k - 1].ln();
        d[k] = (num / den).abs();
    }
    d
}

/// First 0-based index `k >= window` at which the mean of the last `window`
/// deltas drops below `threshold`.
pub fn rss_rule_index(deltas: &[f64], window: usize, threshold: f64) -> Option<usize> {
    (window..deltas.len()).find(|&k| {
        let mean = deltas[k + 1 - window..=k].iter().sum::<f64>() / window as f64;
        mean < threshold
    })
}

/// Outcome of a `lambda` path fit.
#[derive(Debug, Clone)]
pub struct PathFit<T: Real> {
    pub lambda: f64,
    /// Index of the selected `lambda` in the grid.
    pub index: usize,
    /// Whether the RSS rule fired; otherwise the last grid value is used.
    pub fired: bool,
    pub outcome: AdmmOutcome<T>,
    /// RSS for every fitted grid point.
    pub rss: Vec<f64>,
    /// Whether every solve along the fitted part of the path converged.
    pub all_converged: bool,
    pub iterations: usize,
}

impl<'a, T: Real> LassoSolver<'a, T> {
    /// Fits the path with warm starts and selects `lambda` by the RSS rule.
    pub fn fit_path(&mut self, y: &DVector<T>, path: &LambdaPath) -> Result<PathFit<T>> {
        path.validate()?;
        let xty = self.check_data(y, T::zero())?;
        let k_total = path.lambdas.len();
        let mut rss = Vec::with_capacity(k_total);
        let mut deltas = Vec::with_capacity(k_total);
        let mut warm: Option<AdmmState<T>> = None;
        let mut chosen: Option<(usize, AdmmOutcome<T>)> = None;
        let mut last: Option<AdmmOutcome<T>> = None;
        let mut all_converged = true;
        let mut iterations = 0;
        for (k, &lam) in path.lambdas.iter().enumerate() {
            let out = self.solve_with_xty(&xty, lit(lam), warm.as_ref())?;
            iterations += out.state.iterations;
            all_converged &= out.converged;
            let r = y - self.design.x_mul(&out.estimate);
            rss.push(to_f64(r.norm_squared()));
            deltas.push(if k == 0 {
                f64::NAN
            } else {
                let num = rss[k].max(RSS_FLOOR).ln() - rss[k - 1].max(RSS_FLOOR).ln();
                (num / (lam.ln() - path.lambdas[k - 1].ln())).abs()
            });
            warm = Some(out.state.clone());
            if chosen.is_none() && k >= path.window {
                let mean = deltas[k + 1 - path.window..=k].iter().sum::<f64>() / path.window as f64;
                if mean < path.threshold {
                    chosen = Some((k, out.clone()));
                    if !path.full_path {
                        break;
                    }
                }
            }
            last = Some(out);
        }
        let (index, outcome, fired) = match chosen {
            Some((k, o)) => (k, o, true),
            None => (k_total - 1, last.expect("nonempty path"), false),
        };
        Ok(PathFit {
            lambda: path.lambdas[index],
            index,
            fired,
            outcome,
            rss,
            all_converged,
            iterations,
        })
    }

    /// Fits a single `lambda` from a cold start (fast mode reuse).
    pub fn fit_fixed(&mut self, y: &DVector<T>, lambda: f64) -> Result<AdmmOutcome<T>> {
        self.solve(y, lit(lambda), None)
    }
}
