//! Teacher–student theory of online AFA learning with erf units.
//!
//! A student `ŷ = Σ_k W2^k σ(λ^k)`, `λ = W1 x/√D`, learns a teacher
//! `y = Σ_m W̃2^m σ(ν^m)`, `ν = W̃1 x/√D`, from fresh Gaussian inputs, with
//! `σ(x) = erf(x/√2)`. In the limit `D → ∞` at `t = steps/D` the dynamics
//! close on the order parameters `Q, R, T, W2, W̃2, f = W1F/D, f̃ = W̃1F/D,
//! q_f = F·F/D`. Gaussian expectations that have no closed form are estimated
//! by Monte Carlo over the joint law of `(λ, ν, ρ = F·x/√D)`.

use std::f64::consts::{FRAC_2_PI, PI, SQRT_2};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{FlabError, Result};
use crate::numerics::{matmul_nt, mix_seed, Matrix, Rng};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const PSD_TOL: f64 = 1e-8;
const MC_SHARD: usize = 4096;

#[inline]
fn sigma(x: f64) -> f64 {
    libm::erf(x / SQRT_2)
}

#[inline]
fn sigma_prime(x: f64) -> f64 {
    SQRT_2_OVER_PI * (-0.5 * x * x).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TheoryRule {
    Afa,
    Pepita,
}

impl std::str::FromStr for TheoryRule {
    type Err = FlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "afa" => Ok(TheoryRule::Afa),
            "pepita" => Ok(TheoryRule::Pepita),
            other => Err(FlabError::InvalidConfig(format!(
                "unknown theory rule '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for TheoryRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TheoryRule::Afa => "afa",
            TheoryRule::Pepita => "pepita",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentConfig {
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub eta: f64,
    /// `‖W1^k‖²/D` at initialization.
    pub q0: f64,
    /// Feedback entries are `N(0, κ²)` in the `1/√D`-rescaled convention.
    pub kappa: f64,
    pub seed: u64,
}

impl Default for TeacherStudentConfig {
    fn default() -> Self {
        Self {
            d: 500,
            k: 2,
            m: 2,
            eta: 0.05,
            q0: 1.0,
            kappa: 1.0,
            seed: 0,
        }
    }
}

impl TeacherStudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.m == 0 {
            return Err(FlabError::InvalidConfig(
                "D, K and M must be at least 1".into(),
            ));
        }
        if self.k + self.m > self.d {
            return Err(FlabError::InvalidConfig(format!(
                "orthogonal init needs K + M ≤ D, got {} + {} > {}",
                self.k, self.m, self.d
            )));
        }
        if !(self.eta >= 0.0) || !(self.q0 > 0.0) || !(self.kappa >= 0.0) {
            return Err(FlabError::InvalidConfig(
                "η, κ must be nonnegative and q0 positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderParams {
    pub q: Matrix,
    pub r: Matrix,
    pub t: Matrix,
    pub w2: Vec<f64>,
    pub tw2: Vec<f64>,
    pub f: Vec<f64>,
    pub tf: Vec<f64>,
    pub qf: f64,
}

impl OrderParams {
    pub fn k(&self) -> usize {
        self.w2.len()
    }

    pub fn m(&self) -> usize {
        self.tw2.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (k, m) = (self.k(), self.m());
        if self.q.shape() != (k, k) {
            return Err(FlabError::dims("Q", self.q.shape(), (k, k)));
        }
        if self.r.shape() != (k, m) {
            return Err(FlabError::dims("R", self.r.shape(), (k, m)));
        }
        if self.t.shape() != (m, m) {
            return Err(FlabError::dims("T", self.t.shape(), (m, m)));
        }
        if self.f.len() != k || self.tf.len() != m {
            return Err(FlabError::dims(
                "feedback overlaps",
                (self.f.len(), self.tf.len()),
                (k, m),
            ));
        }
        Ok(())
    }

    /// Covariance of `(λ_1…λ_K, ν_1…ν_M, ρ)`.
    pub fn covariance(&self) -> Matrix {
        let (k, m) = (self.k(), self.m());
        let n = k + m + 1;
        let mut c = Matrix::zeros(n, n);
        for i in 0..k {
            for j in 0..k {
                c.set(i, j, self.q.get(i, j));
            }
            for j in 0..m {
                c.set(i, k + j, self.r.get(i, j));
                c.set(k + j, i, self.r.get(i, j));
            }
            c.set(i, n - 1, self.f[i]);
            c.set(n - 1, i, self.f[i]);
        }
        for i in 0..m {
            for j in 0..m {
                c.set(k + i, k + j, self.t.get(i, j));
            }
            c.set(k + i, n - 1, self.tf[i]);
            c.set(n - 1, k + i, self.tf[i]);
        }
        c.set(n - 1, n - 1, self.qf);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        psd_factor(&self.covariance()).map(|_| ())
    }
}

/// Lower-triangular `L` with `L Lᵀ = C` for positive semidefinite `C`.
/// Pivots within tolerance of zero give zero columns; clearly negative
/// pivots are rejected.
pub fn psd_factor(c: &Matrix) -> Result<Matrix> {
    let n = c.rows();
    if c.cols() != n {
        return Err(FlabError::dims("covariance", c.shape(), (n, n)));
    }
    let scale = (0..n)
        .map(|i| c.get(i, i).abs())
        .fold(0.0, f64::max)
        .max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (c.get(i, j) - c.get(j, i)).abs() > 1e-10 * scale {
                return Err(FlabError::InvalidCovariance(format!(
                    "not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let tol = PSD_TOL * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = c.get(j, j);
        for p in 0..j {
            d -= l.get(j, p) * l.get(j, p);
        }
        if d < -tol {
            return Err(FlabError::InvalidCovariance(format!(
                "not positive semidefinite: pivot {j} is {d:e}"
            )));
        }
        if d <= tol {
            for i in j + 1..n {
                let mut s = c.get(i, j);
                for p in 0..j {
                    s -= l.get(i, p) * l.get(j, p);
                }
                if s.abs() > 1e-6 * scale {
                    return Err(FlabError::InvalidCovariance(format!(
                        "not positive semidefinite: zero pivot {j} with residual {s:e} in row {i}"
                    )));
                }
            }
            continue;
        }
        let dj = d.sqrt();
        l.set(j, j, dj);
        for i in j + 1..n {
            let mut s = c.get(i, j);
            for p in 0..j {
                s -= l.get(i, p) * l.get(j, p);
            }
            l.set(i, j, s / dj);
        }
    }
    Ok(l)
}

/// `Q = W1 W1ᵀ/D`, `R = W1 W̃1ᵀ/D`, `T = W̃1 W̃1ᵀ/D`, `f = W1F/D`,
/// `f̃ = W̃1F/D`, `q_f = F·F/D`.
pub fn order_params_from_weights(
    w1: &Matrix,
    w2: &[f64],
    tw1: &Matrix,
    tw2: &[f64],
    feedback: &[f64],
) -> Result<OrderParams> {
    let d = w1.cols();
    if tw1.cols() != d || feedback.len() != d {
        return Err(FlabError::dims(
            "teacher/feedback",
            (tw1.cols(), feedback.len()),
            (d, d),
        ));
    }
    if w2.len() != w1.rows() || tw2.len() != tw1.rows() {
        return Err(FlabError::dims(
            "second layer",
            (w2.len(), tw2.len()),
            (w1.rows(), tw1.rows()),
        ));
    }
    let inv = 1.0 / d as f64;
    let fm = Matrix::row_vector(feedback)?;
    let dot = |a: &Matrix, b: &Matrix| -> Result<Matrix> { Ok(matmul_nt(a, b)?.scale(inv)) };
    let mut q = dot(w1, w1)?;
    q.symmetrize();
    let mut t = dot(tw1, tw1)?;
    t.symmetrize();
    Ok(OrderParams {
        q,
        r: dot(w1, tw1)?,
        t,
        w2: w2.to_vec(),
        tw2: tw2.to_vec(),
        f: dot(w1, &fm)?.into_data(),
        tf: dot(tw1, &fm)?.into_data(),
        qf: feedback.iter().map(|v| v * v).sum::<f64>() * inv,
    })
}

/// `E[σ(a) σ(b)]` for zero-mean Gaussians with `Var a = caa`, `Cov = cab`,
/// `Var b = cbb`: `(2/π) arcsin(cab / √((1+caa)(1+cbb)))`.
pub fn i2_erf(caa: f64, cab: f64, cbb: f64) -> Result<f64> {
    if !(caa >= 0.0) || !(cbb >= 0.0) || !cab.is_finite() {
        return Err(FlabError::InvalidCovariance(format!(
            "variances ({caa}, {cbb}) must be nonnegative"
        )));
    }
    let bound = (caa * cbb).sqrt();
    if cab.abs() > bound + 1e-10 * (1.0 + bound) {
        return Err(FlabError::InvalidCovariance(format!(
            "|cab| = {} exceeds √(caa·cbb) = {bound}",
            cab.abs()
        )));
    }
    let x = (cab / ((1.0 + caa) * (1.0 + cbb)).sqrt()).clamp(-1.0, 1.0);
    Ok(FRAC_2_PI * x.asin())
}

/// `E[σ(λ^k) e] = Σ_l W2^l I2(k,l) − Σ_m W̃2^m I2(k,m)`.
fn sigma_e_analytic(op: &OrderParams) -> Result<Vec<f64>> {
    let (k, m) = (op.k(), op.m());
    (0..k)
        .map(|a| {
            let mut s = 0.0;
            for b in 0..k {
                s += op.w2[b] * i2_erf(op.q.get(a, a), op.q.get(a, b), op.q.get(b, b))?;
            }
            for b in 0..m {
                s -= op.tw2[b] * i2_erf(op.q.get(a, a), op.r.get(a, b), op.t.get(b, b))?;
            }
            Ok(s)
        })
        .collect()
}

/// `½ΣW2W2 I2(k,l) + ½ΣW̃2W̃2 I2(m,n) − ΣW2W̃2 I2(k,m)`, clamped at 0.
pub fn gen_error(op: &OrderParams) -> Result<f64> {
    op.check_shapes()?;
    let (k, m) = (op.k(), op.m());
    let mut eg = 0.0;
    for a in 0..k {
        for b in 0..k {
            eg +=
                0.5 * op.w2[a] * op.w2[b] * i2_erf(op.q.get(a, a), op.q.get(a, b), op.q.get(b, b))?;
        }
        for b in 0..m {
            eg -= op.w2[a] * op.tw2[b] * i2_erf(op.q.get(a, a), op.r.get(a, b), op.t.get(b, b))?;
        }
    }
    for a in 0..m {
        for b in 0..m {
            eg += 0.5
                * op.tw2[a]
                * op.tw2[b]
                * i2_erf(op.t.get(a, a), op.t.get(a, b), op.t.get(b, b))?;
        }
    }
    if eg < 0.0 {
        if eg < -1e-12 {
            return Err(FlabError::InvalidCovariance(format!(
                "negative generalization error {eg:e}"
            )));
        }
        eg = 0.0;
    }
    Ok(eg)
}

/// Monte-Carlo estimates (mean and standard error) of the moments driving the ODEs.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    /// `E[σ'(λ^k) λ^l e]`, K×K
    pub lam: Matrix,
    /// `E[σ'(λ^k) ν^m e]`, K×M
    pub nu: Matrix,
    /// `E[σ'(λ^k) σ'(λ^l) e²]`, K×K
    pub sq: Matrix,
    /// `E[σ(λ^k) e]`
    pub sig: Vec<f64>,
    /// `E[ρ σ'(λ^k) e]`
    pub rho: Vec<f64>,
    pub lam_se: Matrix,
    pub nu_se: Matrix,
    pub sq_se: Matrix,
    pub sig_se: Vec<f64>,
    pub rho_se: Vec<f64>,
    pub n_samples: usize,
}

fn shard_sums(l: &Matrix, op: &OrderParams, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let (k, m) = (op.k(), op.m());
    let dim = k + m + 1;
    let width = 2 * k * k + k * m + 2 * k;
    let mut sum = vec![0.0; width];
    let mut sumsq = vec![0.0; width];
    let mut rng = Rng::new(seed);
    let mut g = vec![0.0; dim];
    let mut z = vec![0.0; dim];
    let mut v = vec![0.0; width];
    let mut sp = vec![0.0; k];
    for _ in 0..n {
        for x in g.iter_mut() {
            *x = rng.normal();
        }
        for i in 0..dim {
            let mut s = 0.0;
            for j in 0..=i {
                s += l.get(i, j) * g[j];
            }
            z[i] = s;
        }
        let (lam, rest) = z.split_at(k);
        let (nu, rho) = rest.split_at(m);
        let rho = rho[0];
        let mut e = 0.0;
        for a in 0..k {
            e += op.w2[a] * sigma(lam[a]);
            sp[a] = sigma_prime(lam[a]);
        }
        for b in 0..m {
            e -= op.tw2[b] * sigma(nu[b]);
        }
        let mut o = 0;
        for a in 0..k {
            let spe = sp[a] * e;
            for b in 0..k {
                v[o] = spe * lam[b];
                o += 1;
            }
            for b in 0..m {
                v[o] = spe * nu[b];
                o += 1;
            }
            for b in 0..k {
                v[o] = spe * sp[b] * e;
                o += 1;
            }
            v[o] = sigma(lam[a]) * e;
            v[o + 1] = rho * spe;
            o += 2;
        }
        for i in 0..width {
            sum[i] += v[i];
            sumsq[i] += v[i] * v[i];
        }
    }
    (sum, sumsq)
}

/// Estimates every moment from `n_samples` draws. Shards of fixed size run in
/// parallel with seeds derived from `seed`, and are reduced in shard order, so
/// the result does not depend on the thread count.
pub fn mc_moments(op: &OrderParams, n_samples: usize, seed: u64) -> Result<Moments> {
    op.check_shapes()?;
    if n_samples < 2 {
        return Err(FlabError::InvalidArgument(
            "need at least two Monte-Carlo samples".into(),
        ));
    }
    let l = psd_factor(&op.covariance())?;
    let shards = n_samples.div_ceil(MC_SHARD);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let n = MC_SHARD.min(n_samples - s * MC_SHARD);
            shard_sums(&l, op, n, mix_seed(seed, s as u64))
        })
        .collect();
    let width = parts[0].0.len();
    let mut sum = vec![0.0; width];
    let mut sumsq = vec![0.0; width];
    for (s, q) in &parts {
        for i in 0..width {
            sum[i] += s[i];
            sumsq[i] += q[i];
        }
    }
    let n = n_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| ((q / n - mu * mu).max(0.0) / (n - 1.0)).sqrt())
        .collect();

    let (k, m) = (op.k(), op.m());
    let mut out = Moments {
        lam: Matrix::zeros(k, k),
        nu: Matrix::zeros(k, m),
        sq: Matrix::zeros(k, k),
        sig: vec![0.0; k],
        rho: vec![0.0; k],
        lam_se: Matrix::zeros(k, k),
        nu_se: Matrix::zeros(k, m),
        sq_se: Matrix::zeros(k, k),
        sig_se: vec![0.0; k],
        rho_se: vec![0.0; k],
        n_samples,
    };
    let mut o = 0;
    for a in 0..k {
        for b in 0..k {
            out.lam.set(a, b, mean[o]);
            out.lam_se.set(a, b, se[o]);
            o += 1;
        }
        for b in 0..m {
            out.nu.set(a, b, mean[o]);
            out.nu_se.set(a, b, se[o]);
            o += 1;
        }
        for b in 0..k {
            out.sq.set(a, b, mean[o]);
            out.sq_se.set(a, b, se[o]);
            o += 1;
        }
        out.sig[a] = mean[o];
        out.sig_se[a] = se[o];
        out.rho[a] = mean[o + 1];
        out.rho_se[a] = se[o + 1];
        o += 2;
    }
    Ok(out)
}

/// Time derivatives of the evolving order parameters, with the Monte-Carlo
/// standard error of each entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivative {
    pub dq: Matrix,
    pub dr: Matrix,
    pub dw2: Vec<f64>,
    pub df: Vec<f64>,
    pub dq_se: Matrix,
    pub dr_se: Matrix,
    pub df_se: Vec<f64>,
}

/// Right-hand side of the ODEs:
///
/// ```text
/// dQ^{kl}/dt = −η f^k E[σ'(λ^k)λ^l e] − η f^l E[σ'(λ^l)λ^k e] + η² f^k f^l E[σ'(λ^k)σ'(λ^l)e²]
/// dR^{km}/dt = −η f^k E[σ'(λ^k)ν^m e]
/// dW2^k/dt   = −η E[σ(λ^k)e]
/// df^k/dt    = −η f^k E[ρ σ'(λ^k)e]
/// ```
///
/// `E[σ(λ^k)e]` is a combination of `I2` terms and uses the closed form;
/// everything else comes from [`mc_moments`].
pub fn ode_rhs(op: &OrderParams, eta: f64, n_samples: usize, seed: u64) -> Result<Derivative> {
    let mo = mc_moments(op, n_samples, seed)?;
    let k = op.k();
    let m = op.m();
    let mut dq = Matrix::zeros(k, k);
    let mut dq_se = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let v = -eta * op.f[a] * mo.lam.get(a, b) - eta * op.f[b] * mo.lam.get(b, a)
                + eta * eta * op.f[a] * op.f[b] * mo.sq.get(a, b);
            // the three estimates share samples; adding SEs bounds the combined error
            let se = eta * op.f[a].abs() * mo.lam_se.get(a, b)
                + eta * op.f[b].abs() * mo.lam_se.get(b, a)
                + eta * eta * (op.f[a] * op.f[b]).abs() * mo.sq_se.get(a, b);
            dq.set(a, b, v);
            dq_se.set(a, b, se);
        }
    }
    dq.symmetrize();
    let mut dr = Matrix::zeros(k, m);
    let mut dr_se = Matrix::zeros(k, m);
    for a in 0..k {
        for b in 0..m {
            dr.set(a, b, -eta * op.f[a] * mo.nu.get(a, b));
            dr_se.set(a, b, eta * op.f[a].abs() * mo.nu_se.get(a, b));
        }
    }
    let dw2 = sigma_e_analytic(op)?
        .into_iter()
        .map(|s| -eta * s)
        .collect();
    let df = (0..k).map(|a| -eta * op.f[a] * mo.rho[a]).collect();
    let df_se = (0..k).map(|a| eta * op.f[a].abs() * mo.rho_se[a]).collect();
    Ok(Derivative {
        dq,
        dr,
        dw2,
        df,
        dq_se,
        dr_se,
        df_se,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<OrderParams>,
    pub eg: Vec<f64>,
}

impl Trajectory {
    fn push(&mut self, t: f64, op: OrderParams, eg: f64) {
        self.times.push(t);
        self.states.push(op);
        self.eg.push(eg);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `ε_g` at time `t`, linearly interpolated between records.
    pub fn eg_at(&self, t: f64) -> Option<f64> {
        let i = self.times.iter().position(|&s| s >= t)?;
        if self.times[i] == t || i == 0 {
            return Some(self.eg[i]);
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        Some(self.eg[i - 1] * (1.0 - w) + self.eg[i] * w)
    }

    /// Columns: `t, eg`, then `q_a_b` (row-major), `r_a_m`, `w2_a`, `f_a`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,eg");
        if let Some(op) = self.states.first() {
            let (k, m) = (op.k(), op.m());
            for a in 0..k {
                for b in 0..k {
                    write!(s, ",q_{a}_{b}").unwrap();
                }
            }
            for a in 0..k {
                for b in 0..m {
                    write!(s, ",r_{a}_{b}").unwrap();
                }
            }
            for a in 0..k {
                write!(s, ",w2_{a}").unwrap();
            }
            for a in 0..k {
                write!(s, ",f_{a}").unwrap();
            }
        }
        s.push('\n');
        for ((t, eg), op) in self.times.iter().zip(&self.eg).zip(&self.states) {
            write!(s, "{t},{eg}").unwrap();
            for v in
                op.q.data()
                    .iter()
                    .chain(op.r.data())
                    .chain(&op.w2)
                    .chain(&op.f)
            {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn alignment(&self) -> Vec<AlignmentPoint> {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(&t, op)| alignment_point(t, op))
            .collect()
    }
}

/// `n` geometrically spaced times in `[t_min, t_max]`, preceded by 0.
pub fn log_times(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    let mut v = vec![0.0];
    if t_max <= 0.0 || n == 0 {
        return v;
    }
    let t_min = t_min.min(t_max);
    if n == 1 {
        v.push(t_max);
        return v;
    }
    let r = (t_max / t_min).ln() / (n - 1) as f64;
    v.extend((0..n).map(|i| t_min * (r * i as f64).exp()));
    v[n] = t_max;
    v
}

/// Maps record times onto step indices, dropping duplicates.
fn record_steps(times: &[f64], step_len: f64, max_steps: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = times
        .iter()
        .map(|t| ((t / step_len).round() as usize).min(max_steps))
        .collect();
    steps.push(max_steps);
    steps.sort_unstable();
    steps.dedup();
    steps
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrateOptions {
    pub n_mc: usize,
    pub n_records: usize,
    pub seed: u64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            n_mc: 100_000,
            n_records: 60,
            seed: 0,
        }
    }
}

/// Explicit Euler with per-step Monte-Carlo seeds `mix_seed(seed, step)`; `Q`
/// is re-symmetrized after every step. `ε_g` and the state are recorded at
/// log-spaced times plus `t = 0` and `t_max`.
pub fn integrate(
    op0: &OrderParams,
    eta: f64,
    t_max: f64,
    dt: f64,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !(t_max >= 0.0) {
        return Err(FlabError::InvalidArgument(format!(
            "need dt > 0 and t_max ≥ 0, got {dt}, {t_max}"
        )));
    }
    op0.validate()?;
    let n_steps = (t_max / dt).round() as usize;
    let rec = record_steps(&log_times(dt, t_max, opts.n_records), dt, n_steps);
    let mut traj = Trajectory::default();
    let mut op = op0.clone();
    let mut next = 0;
    for step in 0..=n_steps {
        if next < rec.len() && rec[next] == step {
            traj.push(step as f64 * dt, op.clone(), gen_error(&op)?);
            next += 1;
        }
        if step == n_steps {
            break;
        }
        if eta == 0.0 {
            continue;
        }
        let d = ode_rhs(&op, eta, opts.n_mc, mix_seed(opts.seed, step as u64)).map_err(
            |e| match e {
                FlabError::InvalidCovariance(msg) => {
                    FlabError::InvalidCovariance(format!("at t = {}: {msg}", step as f64 * dt))
                }
                other => other,
            },
        )?;
        op.q.axpy(dt, &d.dq)?;
        op.q.symmetrize();
        op.r.axpy(dt, &d.dr)?;
        for (w, dw) in op.w2.iter_mut().zip(&d.dw2) {
            *w += dt * dw;
        }
        for (f, df) in op.f.iter_mut().zip(&d.df) {
            *f += dt * df;
        }
        if !op.q.is_finite() || !op.f.iter().all(|v| v.is_finite()) {
            return Err(FlabError::NonFinite("ODE integration"));
        }
    }
    Ok(traj)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyPrediction {
    pub w2: Vec<f64>,
    pub f: Vec<f64>,
}

/// Low-order behavior from the orthogonal initialization (`W2 = 0`, `R = 0`,
/// `T = I`, `Q = q0 I`):
///
/// ```text
/// dW2^k/dt = 2/(π²(1+q0)) η² f^k(0) ‖W̃2‖² t + O(t²)   ⇒ W2^k(t) = ½ · that coefficient · t²
/// df^k/dt|₀ = (2/π) η f^k(0) Σ_m W̃2^m f̃^m / √((1+q0)(1+T^{mm}))
/// ```
///
/// The `f` slope follows from Stein's lemma on the joint Gaussian `(λ, ν, ρ)`.
pub fn early_expansion(op0: &OrderParams, eta: f64, t: f64) -> Result<EarlyPrediction> {
    let q0 = check_early_init(op0)?;
    let norm2: f64 = op0.tw2.iter().map(|v| v * v).sum();
    let wf: f64 = op0.tw2.iter().zip(&op0.tf).map(|(a, b)| a * b).sum();
    let w2 = op0
        .f
        .iter()
        .map(|&f| 0.5 * 2.0 / (PI * PI * (1.0 + q0)) * eta * eta * f * norm2 * t * t)
        .collect();
    let f = op0
        .f
        .iter()
        .map(|&f| f + FRAC_2_PI * eta * f * wf / (2.0 * (1.0 + q0)).sqrt() * t)
        .collect();
    Ok(EarlyPrediction { w2, f })
}

/// `dR^{km}/dt|₀ = √2/(π√(1+q0)) η f^k(0) W̃2^m` under the orthogonal initialization.
pub fn early_dr(op0: &OrderParams, eta: f64) -> Result<Matrix> {
    let q0 = check_early_init(op0)?;
    let c = SQRT_2 / (PI * (1.0 + q0).sqrt()) * eta;
    Ok(Matrix::from_fn(op0.k(), op0.m(), |a, b| {
        c * op0.f[a] * op0.tw2[b]
    }))
}

fn check_early_init(op: &OrderParams) -> Result<f64> {
    op.check_shapes()?;
    let tol = 1e-8;
    let q0 = op.q.get(0, 0);
    if op.w2.iter().any(|v| v.abs() > tol) {
        return Err(FlabError::InitMismatch("W2 must be zero".into()));
    }
    if op.r.max_abs() > tol {
        return Err(FlabError::InitMismatch("R must be zero".into()));
    }
    if op.t.max_abs_diff(&Matrix::identity(op.m()))? > tol {
        return Err(FlabError::InitMismatch("T must be the identity".into()));
    }
    if op.q.max_abs_diff(&Matrix::identity(op.k()).scale(q0))? > tol * q0.max(1.0) {
        return Err(FlabError::InitMismatch("Q must be q0·I".into()));
    }
    Ok(q0)
}

/// Explicit weights of a teacher–student pair.
#[derive(Clone, Debug)]
pub struct TeacherStudent {
    pub w1: Matrix,
    pub w2: Vec<f64>,
    pub tw1: Matrix,
    pub tw2: Vec<f64>,
    pub feedback: Vec<f64>,
}

impl TeacherStudent {
    /// Orthonormal directions (Gram–Schmidt on Gaussian vectors) give the
    /// teacher rows (×√D, so `T = I`) and the student rows (×√(q0 D), so
    /// `Q = q0 I`, `R = 0`); `W2 = 0`, `W̃2 ~ N(0, 1)`, `F ~ N(0, κ²)`.
    pub fn init(cfg: &TeacherStudentConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, k, m) = (cfg.d, cfg.k, cfg.m);
        let mut rng = Rng::new(cfg.seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k + m);
        while basis.len() < k + m {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for _ in 0..2 {
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        let sd = (d as f64).sqrt();
        let sq = (cfg.q0 * d as f64).sqrt();
        let tw1 = Matrix::from_fn(m, d, |i, j| basis[i][j] * sd);
        let w1 = Matrix::from_fn(k, d, |i, j| basis[m + i][j] * sq);
        let tw2 = (0..m).map(|_| rng.normal()).collect();
        let feedback = (0..d).map(|_| cfg.kappa * rng.normal()).collect();
        Ok(Self {
            w1,
            w2: vec![0.0; k],
            tw1,
            tw2,
            feedback,
        })
    }

    pub fn order_params(&self) -> Result<OrderParams> {
        order_params_from_weights(&self.w1, &self.w2, &self.tw1, &self.tw2, &self.feedback)
    }

    fn d(&self) -> usize {
        self.w1.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateOptions {
    pub t_max: f64,
    pub n_records: usize,
    /// Size of the held-out set used to estimate `ε_g`.
    pub n_test: usize,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            t_max: 1.0e4,
            n_records: 60,
            n_test: 20_000,
        }
    }
}

/// Held-out estimate of `½E[e²]`.
fn empirical_eg(ts: &TeacherStudent, x: &Matrix, y: &[f64]) -> Result<f64> {
    let inv = 1.0 / (ts.d() as f64).sqrt();
    let lam = matmul_nt(x, &ts.w1)?;
    let mut s = 0.0;
    for (r, yr) in y.iter().enumerate() {
        let yhat: f64 = lam
            .row(r)
            .iter()
            .zip(&ts.w2)
            .map(|(l, w)| w * sigma(l * inv))
            .sum();
        s += (yhat - yr) * (yhat - yr);
    }
    Ok(0.5 * s / y.len() as f64)
}

/// Online training of the explicit student at finite `D`. Each step draws a
/// fresh `x ~ N(0, I_D)` and applies, with `λ = W1x/√D`, `f = W1F/D`,
///
/// * AFA: `W1^k −= η f^k e σ'(λ^k) x/√D`, `W2 −= (η/D) e σ(λ)`;
/// * PEPITA: `x' = x − F e/√D`, `W1^k −= η (σ(λ^k) − σ(λ'^k)) x'/√D`,
///   `W2 −= (η/D) e σ(λ')` with `λ' = W1x'/√D`.
///
/// `t = steps/D`. The recorded `ε_g` is estimated on a fixed held-out set.
pub fn simulate_finite_d(
    cfg: &TeacherStudentConfig,
    rule: TheoryRule,
    opts: &SimulateOptions,
) -> Result<Trajectory> {
    let mut ts = TeacherStudent::init(cfg)?;
    simulate_from(&mut ts, cfg, rule, opts)
}

pub fn simulate_from(
    ts: &mut TeacherStudent,
    cfg: &TeacherStudentConfig,
    rule: TheoryRule,
    opts: &SimulateOptions,
) -> Result<Trajectory> {
    let d = ts.d();
    let (k, m) = (ts.w1.rows(), ts.tw1.rows());
    let sd = (d as f64).sqrt();
    let inv_sd = 1.0 / sd;
    let eta = cfg.eta;
    let eta2 = eta / d as f64;

    let base = Rng::new(cfg.seed);
    let mut test_rng = base.fork(1);
    let mut rng = base.fork(2);
    let n_test = opts.n_test.max(1);
    let mut xt = Matrix::zeros(n_test, d);
    test_rng.fill_normal(xt.data_mut());
    let nu_t = matmul_nt(&xt, &ts.tw1)?;
    let y_t: Vec<f64> = (0..n_test)
        .map(|r| {
            nu_t.row(r)
                .iter()
                .zip(&ts.tw2)
                .map(|(n, w)| w * sigma(n * inv_sd))
                .sum()
        })
        .collect();

    let n_steps = (opts.t_max * d as f64).round() as usize;
    let rec = record_steps(
        &log_times(1.0, opts.t_max, opts.n_records),
        1.0 / d as f64,
        n_steps,
    );
    let mut traj = Trajectory::default();
    let mut next = 0;
    let mut x = vec![0.0; d];
    let mut xm = vec![0.0; d];
    let mut lam = vec![0.0; k];
    let mut lam_e = vec![0.0; k];
    let mut coef = vec![0.0; k];
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(p, q)| p * q).sum() };

    for step in 0..=n_steps {
        if next < rec.len() && rec[next] == step {
            let op = ts.order_params()?;
            traj.push(step as f64 / d as f64, op, empirical_eg(ts, &xt, &y_t)?);
            next += 1;
        }
        if step == n_steps {
            break;
        }
        rng.fill_normal(&mut x);
        let mut e = 0.0;
        for a in 0..k {
            lam[a] = dot(ts.w1.row(a), &x) * inv_sd;
            e += ts.w2[a] * sigma(lam[a]);
        }
        for b in 0..m {
            e -= ts.tw2[b] * sigma(dot(ts.tw1.row(b), &x) * inv_sd);
        }
        match rule {
            TheoryRule::Afa => {
                for a in 0..k {
                    let f = dot(ts.w1.row(a), &ts.feedback) / d as f64;
                    coef[a] = eta * f * e * sigma_prime(lam[a]) * inv_sd;
                }
                for a in 0..k {
                    let c = coef[a];
                    ts.w1
                        .row_mut(a)
                        .iter_mut()
                        .zip(&x)
                        .for_each(|(w, xv)| *w -= c * xv);
                    ts.w2[a] -= eta2 * e * sigma(lam[a]);
                }
            }
            TheoryRule::Pepita => {
                for (o, (xv, fv)) in xm.iter_mut().zip(x.iter().zip(&ts.feedback)) {
                    *o = xv - fv * e * inv_sd;
                }
                for a in 0..k {
                    lam_e[a] = dot(ts.w1.row(a), &xm) * inv_sd;
                    coef[a] = eta * (sigma(lam[a]) - sigma(lam_e[a])) * inv_sd;
                }
                for a in 0..k {
                    let c = coef[a];
                    ts.w1
                        .row_mut(a)
                        .iter_mut()
                        .zip(&xm)
                        .for_each(|(w, xv)| *w -= c * xv);
                    ts.w2[a] -= eta2 * e * sigma(lam_e[a]);
                }
            }
        }
    }
    if !ts.w1.is_finite() {
        return Err(FlabError::NonFinite("finite-D simulation"));
    }
    Ok(traj)
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NAN;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Second-layer alignment angles at one time, in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPoint {
    pub t: f64,
    /// `W2` vs `W̃2` (NaN unless K = M).
    pub w2_teacher: f64,
    /// `W2` vs the closest of the sign-flipped, unit-permuted copies of `W̃2`.
    pub w2_degenerate: f64,
    /// `f` vs `W2`.
    pub f_w2: f64,
    pub f_norm: f64,
}

/// The teacher is unchanged by permuting hidden units and, since erf is odd,
/// by flipping the sign of a unit's incoming and outgoing weights.
pub fn alignment_point(t: f64, op: &OrderParams) -> AlignmentPoint {
    let f_norm = op.f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let f_w2 = angle(&op.f, &op.w2);
    if op.k() != op.m() {
        return AlignmentPoint {
            t,
            w2_teacher: f64::NAN,
            w2_degenerate: f64::NAN,
            f_w2,
            f_norm,
        };
    }
    let k = op.k();
    let w2_teacher = angle(&op.w2, &op.tw2);
    let mut best = f64::NAN;
    if k <= 8 {
        for p in permutations(k) {
            for signs in 0..(1u32 << k) {
                let cand: Vec<f64> = (0..k)
                    .map(|i| {
                        let s = if signs >> i & 1 == 1 { -1.0 } else { 1.0 };
                        s * op.tw2[p[i]]
                    })
                    .collect();
                let a = angle(&op.w2, &cand);
                if !(a >= best) {
                    best = a;
                }
            }
        }
    }
    AlignmentPoint {
        t,
        w2_teacher,
        w2_degenerate: best,
        f_w2,
        f_norm,
    }
}

pub fn alignment_csv(points: &[AlignmentPoint]) -> String {
    let mut s = String::from("t,angle_w2_teacher,angle_w2_degenerate,angle_f_w2,norm_f\n");
    for p in points {
        writeln!(
            s,
            "{},{},{},{},{}",
            p.t, p.w2_teacher, p.w2_degenerate, p.f_w2, p.f_norm
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;

    fn random_op(k: usize, m: usize, d: usize, seed: u64) -> (TeacherStudent, OrderParams) {
        let mut rng = Rng::new(seed);
        let ts = TeacherStudent {
            w1: gaussian(&mut rng, k, d, 0.0, 1.0).unwrap(),
            w2: (0..k).map(|_| rng.normal()).collect(),
            tw1: gaussian(&mut rng, m, d, 0.0, 1.0).unwrap(),
            tw2: (0..m).map(|_| rng.normal()).collect(),
            feedback: (0..d).map(|_| rng.normal()).collect(),
        };
        let op = ts.order_params().unwrap();
        (ts, op)
    }

    #[test]
    fn i2_closed_form_values() {
        assert_eq!(i2_erf(1.0, 0.0, 2.0).unwrap(), 0.0);
        assert!((i2_erf(1.0, 1.0, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((i2_erf(1.0, 0.5, 1.0).unwrap() - FRAC_2_PI * 0.25f64.asin()).abs() < 1e-15);
        assert!((i2_erf(1.0, 0.5, 1.0).unwrap() - 0.160_861).abs() < 1e-6);
        assert!(matches!(
            i2_erf(1.0, 2.0, 1.0),
            Err(FlabError::InvalidCovariance(_))
        ));
        assert!(i2_erf(-1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn i2_matches_monte_carlo() {
        let mut rng = Rng::new(1);
        let n = 1_000_000;
        let (caa, cab, cbb): (f64, f64, f64) = (1.0, 0.5, 1.0);
        let b_coef = cab / caa.sqrt();
        let b_res = (cbb - b_coef * b_coef).sqrt();
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let g1 = rng.normal();
            let g2 = rng.normal();
            let v = sigma(caa.sqrt() * g1) * sigma(b_coef * g1 + b_res * g2);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - i2_erf(caa, cab, cbb).unwrap()).abs() < 3.0 * se);
    }

    #[test]
    fn order_params_oracle() {
        let (ts, op) = random_op(3, 2, 2000, 2);
        let d = 2000.0;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / d;
        for a in 0..3 {
            for b in 0..3 {
                assert!((op.q.get(a, b) - dot(ts.w1.row(a), ts.w1.row(b))).abs() < 1e-12);
            }
            for b in 0..2 {
                assert!((op.r.get(a, b) - dot(ts.w1.row(a), ts.tw1.row(b))).abs() < 1e-12);
            }
            assert!((op.f[a] - dot(ts.w1.row(a), &ts.feedback)).abs() < 1e-12);
        }
        assert!((op.qf - dot(&ts.feedback, &ts.feedback)).abs() < 1e-12);

        let same = order_params_from_weights(&ts.w1, &ts.w2, &ts.w1, &ts.w2, &ts.feedback).unwrap();
        assert!(same.q.max_abs_diff(&same.r).unwrap() < 1e-15);
        assert!(same.q.max_abs_diff(&same.t).unwrap() < 1e-15);

        // feedback orthogonal to the student rows
        let mut w1 = Matrix::zeros(2, 4);
        w1.set(0, 0, 1.0);
        w1.set(1, 1, 1.0);
        let o =
            order_params_from_weights(&w1, &[0.0, 0.0], &w1, &[1.0, 1.0], &[0.0, 0.0, 1.0, 1.0])
                .unwrap();
        assert_eq!(o.f, vec![0.0, 0.0]);
    }

    #[test]
    fn gen_error_cases() {
        let (ts, _) = random_op(2, 2, 300, 3);
        let perfect =
            order_params_from_weights(&ts.tw1, &ts.tw2, &ts.tw1, &ts.tw2, &ts.feedback).unwrap();
        assert!(gen_error(&perfect).unwrap().abs() < 1e-12);

        let single = OrderParams {
            q: Matrix::identity(1),
            r: Matrix::zeros(1, 1),
            t: Matrix::identity(1),
            w2: vec![0.0],
            tw2: vec![1.0],
            f: vec![0.0],
            tf: vec![0.0],
            qf: 1.0,
        };
        assert!((gen_error(&single).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn gen_error_matches_finite_d_monte_carlo() {
        let d = 500;
        let (ts, op) = random_op(2, 2, d, 4);
        let mut rng = Rng::new(5);
        let n = 200_000;
        let mut x = Matrix::zeros(n, d);
        rng.fill_normal(x.data_mut());
        let inv = 1.0 / (d as f64).sqrt();
        let lam = matmul_nt(&x, &ts.w1).unwrap();
        let nu = matmul_nt(&x, &ts.tw1).unwrap();
        let mut s = 0.0;
        let mut s2 = 0.0;
        for r in 0..n {
            let yh: f64 = (0..2).map(|a| ts.w2[a] * sigma(lam.get(r, a) * inv)).sum();
            let y: f64 = (0..2).map(|a| ts.tw2[a] * sigma(nu.get(r, a) * inv)).sum();
            let v = 0.5 * (yh - y) * (yh - y);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let eg = gen_error(&op).unwrap();
        assert!((mean - eg).abs() < 3.0 * se, "{mean} vs {eg} (se {se})");
    }

    #[test]
    fn psd_factor_handles_singular_covariance() {
        // rank-one 3×3
        let v = [1.0, 2.0, -1.0];
        let c = Matrix::from_fn(3, 3, |i, j| v[i] * v[j]);
        let l = psd_factor(&c).unwrap();
        let back = matmul_nt(&l, &l).unwrap();
        assert!(back.max_abs_diff(&c).unwrap() < 1e-12);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            psd_factor(&bad),
            Err(FlabError::InvalidCovariance(_))
        ));
    }

    #[test]
    fn moments_basic_properties() {
        // perfect student: e = 0 almost surely
        let (ts, _) = random_op(2, 2, 300, 6);
        let perfect =
            order_params_from_weights(&ts.tw1, &ts.tw2, &ts.tw1, &ts.tw2, &ts.feedback).unwrap();
        let mo = mc_moments(&perfect, 20_000, 1).unwrap();
        assert!(mo.lam.max_abs() < 1e-12 && mo.sq.max_abs() < 1e-12);
        assert!(mo.sig.iter().chain(&mo.rho).all(|v| v.abs() < 1e-12));

        // W2 = 0, R = 0: E[σ(λ)e] = 0
        let mut op = TeacherStudent::init(&TeacherStudentConfig {
            d: 50,
            ..TeacherStudentConfig::default()
        })
        .unwrap()
        .order_params()
        .unwrap();
        op.w2 = vec![0.0; 2];
        let mo = mc_moments(&op, 200_000, 2).unwrap();
        for a in 0..2 {
            assert!(mo.sig[a].abs() < 3.0 * mo.sig_se[a]);
        }
        assert!(sigma_e_analytic(&op)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn moments_are_self_consistent_and_deterministic() {
        let (_, op) = random_op(1, 1, 400, 7);
        let a = mc_moments(&op, 1_000_000, 10).unwrap();
        let b = mc_moments(&op, 1_000_000, 11).unwrap();
        let pairs = [
            (
                a.lam.get(0, 0),
                b.lam.get(0, 0),
                a.lam_se.get(0, 0),
                b.lam_se.get(0, 0),
            ),
            (
                a.nu.get(0, 0),
                b.nu.get(0, 0),
                a.nu_se.get(0, 0),
                b.nu_se.get(0, 0),
            ),
            (
                a.sq.get(0, 0),
                b.sq.get(0, 0),
                a.sq_se.get(0, 0),
                b.sq_se.get(0, 0),
            ),
            (a.sig[0], b.sig[0], a.sig_se[0], b.sig_se[0]),
            (a.rho[0], b.rho[0], a.rho_se[0], b.rho_se[0]),
        ];
        for (x, y, sx, sy) in pairs {
            assert!(
                (x - y).abs() < 3.0 * (sx * sx + sy * sy).sqrt(),
                "{x} vs {y}"
            );
        }
        // MC E[σ(λ)e] agrees with its I2 closed form
        let exact = sigma_e_analytic(&op).unwrap()[0];
        assert!((a.sig[0] - exact).abs() < 3.0 * a.sig_se[0]);
        assert_eq!(
            mc_moments(&op, 10_000, 3).unwrap(),
            mc_moments(&op, 10_000, 3).unwrap()
        );
    }

    #[test]
    fn rhs_fixed_points() {
        let (ts, _) = random_op(2, 2, 300, 8);
        let perfect =
            order_params_from_weights(&ts.tw1, &ts.tw2, &ts.tw1, &ts.tw2, &ts.feedback).unwrap();
        let d = ode_rhs(&perfect, 0.05, 10_000, 1).unwrap();
        assert!(d.dq.max_abs() < 1e-12 && d.dr.max_abs() < 1e-12);
        assert!(d.dw2.iter().chain(&d.df).all(|v| v.abs() < 1e-12));

        let (_, mut op) = random_op(2, 2, 300, 9);
        op.f = vec![0.0; 2];
        let d = ode_rhs(&op, 0.05, 10_000, 1).unwrap();
        assert_eq!(d.dq.max_abs(), 0.0);
        assert_eq!(d.dr.max_abs(), 0.0);
        assert!(d.df.iter().all(|v| *v == 0.0));
        assert!(d.dw2.iter().any(|v| *v != 0.0));
        assert!(d.dq.is_symmetric(0.0));
    }

    #[test]
    fn early_dr_within_standard_errors() {
        let cfg = TeacherStudentConfig {
            d: 200,
            ..TeacherStudentConfig::default()
        };
        let op = TeacherStudent::init(&cfg).unwrap().order_params().unwrap();
        let d = ode_rhs(&op, cfg.eta, 1_000_000, 4).unwrap();
        let pred = early_dr(&op, cfg.eta).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let diff = (d.dr.get(a, b) - pred.get(a, b)).abs();
                assert!(
                    diff <= 3.0 * d.dr_se.get(a, b),
                    "{} vs {}",
                    d.dr.get(a, b),
                    pred.get(a, b)
                );
            }
            assert!(d.dw2[a].abs() < 1e-15);
        }
    }

    #[test]
    fn early_expansion_against_integration() {
        let cfg = TeacherStudentConfig {
            d: 200,
            kappa: 3.0,
            ..TeacherStudentConfig::default()
        };
        let op = TeacherStudent::init(&cfg).unwrap().order_params().unwrap();
        let eta = 1.0;
        let opts = IntegrateOptions {
            n_mc: 400_000,
            n_records: 10,
            seed: 3,
        };
        let traj = integrate(&op, eta, 0.1, 0.01, &opts).unwrap();
        let last = traj.states.last().unwrap();
        let t = *traj.times.last().unwrap();
        let pred = early_expansion(&op, eta, t).unwrap();
        for a in 0..2 {
            // Euler sums the linear dW2 ramp on a grid: Σ coef·(i dt)·dt = ½coef t² (1 − dt/t)
            let w2_euler = pred.w2[a] * (1.0 - 0.01 / t);
            assert!(
                (last.w2[a] - w2_euler).abs() <= 0.05 * pred.w2[a].abs() + 1e-12,
                "{} vs {}",
                last.w2[a],
                w2_euler
            );
            let slope_pred = (pred.f[a] - op.f[a]) / t;
            let slope_ode = (last.f[a] - op.f[a]) / t;
            assert!(
                (slope_ode - slope_pred).abs() <= 0.2 * slope_pred.abs() + 1e-9,
                "{slope_ode} vs {slope_pred}"
            );
        }
        let zero_f = OrderParams {
            f: vec![0.0; 2],
            ..op.clone()
        };
        let p = early_expansion(&zero_f, eta, 1.0).unwrap();
        assert!(p.w2.iter().chain(&p.f).all(|v| *v == 0.0));
        let zero_tf = OrderParams {
            tf: vec![0.0; 2],
            ..op.clone()
        };
        assert_eq!(early_expansion(&zero_tf, eta, 1.0).unwrap().f, op.f);
        let mut moved = op.clone();
        moved.w2[0] = 0.1;
        assert!(matches!(
            early_expansion(&moved, eta, 1.0),
            Err(FlabError::InitMismatch(_))
        ));
    }

    #[test]
    fn zero_rate_trajectories_are_constant() {
        let cfg = TeacherStudentConfig {
            d: 100,
            eta: 0.0,
            ..TeacherStudentConfig::default()
        };
        let op = TeacherStudent::init(&cfg).unwrap().order_params().unwrap();
        let traj = integrate(&op, 0.0, 10.0, 0.5, &IntegrateOptions::default()).unwrap();
        assert!(traj.eg.iter().all(|&e| e == traj.eg[0]));
        assert!(traj.times.windows(2).all(|w| w[0] < w[1]));
        let single = integrate(&op, 0.05, 0.0, 0.5, &IntegrateOptions::default()).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.to_csv().lines().count(), 2);

        let opts = SimulateOptions {
            t_max: 2.0,
            n_records: 5,
            n_test: 500,
        };
        for rule in [TheoryRule::Afa, TheoryRule::Pepita] {
            let sim = simulate_finite_d(&cfg, rule, &opts).unwrap();
            assert!(sim.eg.iter().all(|&e| e == sim.eg[0]));
        }
    }

    #[test]
    fn init_is_orthogonal() {
        let cfg = TeacherStudentConfig {
            d: 300,
            q0: 0.5,
            k: 3,
            m: 2,
            ..TeacherStudentConfig::default()
        };
        let op = TeacherStudent::init(&cfg).unwrap().order_params().unwrap();
        assert!(op.t.max_abs_diff(&Matrix::identity(2)).unwrap() < 1e-12);
        assert!(op.q.max_abs_diff(&Matrix::identity(3).scale(0.5)).unwrap() < 1e-12);
        assert!(op.r.max_abs() < 1e-12);
        op.validate().unwrap();
    }

    #[test]
    fn simulation_is_deterministic_and_learns() {
        let cfg = TeacherStudentConfig {
            d: 100,
            eta: 0.2,
            kappa: 1.0,
            ..TeacherStudentConfig::default()
        };
        let opts = SimulateOptions {
            t_max: 50.0,
            n_records: 8,
            n_test: 2000,
        };
        let a = simulate_finite_d(&cfg, TheoryRule::Afa, &opts).unwrap();
        let b = simulate_finite_d(&cfg, TheoryRule::Afa, &opts).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let p = simulate_finite_d(&cfg, TheoryRule::Pepita, &opts).unwrap();
        assert_eq!(a.times, p.times);
        assert_eq!(a.eg[0], p.eg[0]);
        assert!(a.eg.last().unwrap() < &a.eg[0]);
        assert!(p.eg.last().unwrap() < &p.eg[0]);
    }

    #[test]
    fn alignment_orbit() {
        let op = OrderParams {
            q: Matrix::identity(2),
            r: Matrix::zeros(2, 2),
            t: Matrix::identity(2),
            w2: vec![-2.0, 1.0],
            tw2: vec![1.0, 2.0],
            f: vec![-1.0, 0.5],
            tf: vec![0.0; 2],
            qf: 1.0,
        };
        let p = alignment_point(3.0, &op);
        assert!((p.w2_teacher - 90.0).abs() < 1e-9);
        assert!(p.w2_degenerate.abs() < 1e-4);
        assert!(p.f_w2.abs() < 1e-4);
        assert!((p.f_norm - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(permutations(3).len(), 6);
        assert!(alignment_csv(&[p]).starts_with("t,angle_w2_teacher"));
    }

    #[test]
    fn log_time_grid() {
        let g = log_times(1.0, 1000.0, 4);
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 0.0);
        assert!((g[2] - 10.0).abs() < 1e-9 && (g[4] - 1000.0).abs() < 1e-9);
        let traj = Trajectory {
            times: vec![0.0, 1.0, 3.0],
            states: vec![],
            eg: vec![1.0, 0.5, 0.1],
        };
        assert!((traj.eg_at(2.0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(traj.eg_at(0.0), Some(1.0));
        assert_eq!(traj.eg_at(4.0), None);
    }
}
