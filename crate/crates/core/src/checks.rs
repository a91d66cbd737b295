//! Randomized property suites with fixed seeds. Each check reports a single
//! pass/fail outcome with a short measurement summary.

use std::fmt;
use std::str::FromStr;

use crate::error::{FlabError, Result};
use crate::mirror::{factorize_feedback, mirror_increment, mirror_step_in_place, MirrorConfig};
use crate::network::{init_network, ActivationKind, InitKind, NetworkConfig};
use crate::numerics::{entry_std, gaussian, linear_fit_slope, mix_seed, uniform, Matrix, Rng};
use crate::rules::{afa_update, ff_goodness_update, pepita_hebbian_update, pepita_update};
use crate::theory::{
    early_dr, i2_erf, mc_moments, ode_rhs, TeacherStudent, TeacherStudentConfig, Trajectory,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Taylor,
    FfEquivalence,
    I2,
    Mirror,
    EarlyExpansion,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Taylor,
        Suite::FfEquivalence,
        Suite::I2,
        Suite::Mirror,
        Suite::EarlyExpansion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Taylor => "taylor",
            Suite::FfEquivalence => "ff-equivalence",
            Suite::I2 => "i2",
            Suite::Mirror => "mirror",
            Suite::EarlyExpansion => "early-expansion",
        }
    }

    pub fn run(self, seed: u64) -> Result<Vec<CheckOutcome>> {
        match self {
            Suite::Taylor => taylor_suite(seed),
            Suite::FfEquivalence => ff_equivalence_suite(seed),
            Suite::I2 => i2_suite(seed),
            Suite::Mirror => mirror_suite(seed),
            Suite::EarlyExpansion => early_expansion_suite(seed),
        }
    }
}

impl FromStr for Suite {
    type Err = FlabError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| FlabError::InvalidArgument(format!("unknown check suite '{s}'")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn erf_net_config(sizes: Vec<usize>) -> NetworkConfig {
    let depth = sizes.len() - 1;
    NetworkConfig {
        layer_sizes: sizes,
        activations: vec![ActivationKind::Erf; depth],
        init: InitKind::HeNormal,
        feedback_scale: 1.0,
        dropout_rate: 0.0,
        normalize_activations: false,
        seed: 0,
    }
}

/// Log-log slope of `‖ΔW1^{PEPITA} − ΔW1^{AFA}‖_F` against the feedback scale
/// `ε ∈ {1e-1, …, 1e-4}` on random two-layer erf nets; the second-order
/// remainder gives a slope of 2.
pub fn taylor_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed);
    let eps: Vec<f64> = (1..=4).map(|k| 10f64.powi(-k)).collect();
    let logs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let mut slopes = Vec::new();
    for _ in 0..10 {
        let n0 = 5 + rng.below(20);
        let n1 = 4 + rng.below(20);
        let n2 = 2 + rng.below(6);
        let net = init_network(&erf_net_config(vec![n0, n1, n2]), &mut rng)?;
        let x = gaussian(&mut rng, 4, n0, 0.0, 1.0)?;
        let y = gaussian(&mut rng, 4, n2, 0.0, 1.0)?;
        let mut diffs = Vec::with_capacity(eps.len());
        for &e in &eps {
            let mut s = net.clone();
            s.feedback = net.feedback.scale(e);
            let p = pepita_update(&s, &x, &y, None)?;
            let a = afa_update(&s, &x, &y, None)?;
            diffs.push(p.deltas[0].sub(&a.deltas[0])?.frobenius_norm().ln());
        }
        slopes.push(linear_fit_slope(&logs, &diffs));
    }
    let lo = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![CheckOutcome::new(
        "pepita-afa remainder is second order",
        lo >= 1.8 && hi <= 2.2,
        format!(
            "slopes over {} nets in [{lo:.4}, {hi:.4}], required [1.8, 2.2]",
            slopes.len()
        ),
    )])
}

/// Hidden-layer deltas of the goodness rule and the Hebbian PEPITA rule on
/// random ReLU nets of depth 2–4 and widths up to 64.
pub fn ff_equivalence_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let nets = 100;
    for _ in 0..nets {
        let depth = 2 + rng.below(3);
        let sizes: Vec<usize> = (0..=depth).map(|_| 2 + rng.below(63)).collect();
        let mut cfg = NetworkConfig::classifier(sizes.clone());
        cfg.feedback_scale = 1.0;
        let net = init_network(&cfg, &mut rng)?;
        let batch = 1 + rng.below(4);
        let x = uniform(&mut rng, batch, sizes[0], 0.0, 1.0)?;
        let mut y = Matrix::zeros(batch, sizes[depth]);
        for r in 0..batch {
            let c = rng.below(sizes[depth]);
            y.set(r, c, 1.0);
        }
        let ff = ff_goodness_update(&net, &x, &y, None)?;
        let hb = pepita_hebbian_update(&net, &x, &y, None)?;
        for l in 0..depth - 1 {
            worst = worst.max(ff.deltas[l].max_abs_diff(&hb.deltas[l])?);
        }
    }
    Ok(vec![CheckOutcome::new(
        "goodness and hebbian hidden deltas agree",
        worst <= 1e-12,
        format!("max entrywise difference {worst:e} over {nets} nets, required ≤ 1e-12"),
    )])
}

/// Monte-Carlo estimate and standard error of `E[σ(a)σ(b)]`.
pub fn i2_monte_carlo(caa: f64, cab: f64, cbb: f64, n: usize, seed: u64) -> (f64, f64) {
    let sa = caa.sqrt();
    let (b1, b2) = if caa > 0.0 {
        let c = cab / sa;
        (c, (cbb - c * c).max(0.0).sqrt())
    } else {
        (0.0, cbb.sqrt())
    };
    let mut rng = Rng::new(seed);
    let mut s = 0.0;
    let mut s2 = 0.0;
    for _ in 0..n {
        let g1 = rng.normal();
        let g2 = rng.normal();
        let v = libm::erf(sa * g1 / std::f64::consts::SQRT_2)
            * libm::erf((b1 * g1 + b2 * g2) / std::f64::consts::SQRT_2);
        s += v;
        s2 += v * v;
    }
    let nf = n as f64;
    let mean = s / nf;
    (mean, ((s2 / nf - mean * mean).max(0.0) / (nf - 1.0)).sqrt())
}

pub fn i2_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    use rayon::prelude::*;
    let exact = i2_erf(1.0, 1.0, 1.0)?;
    let mut out = vec![CheckOutcome::new(
        "i2 exact value",
        (exact - 1.0 / 3.0).abs() <= 1e-15,
        format!("I2(1, 1, 1) = {exact:.17}"),
    )];
    let mut rng = Rng::new(seed);
    let triples: Vec<(f64, f64, f64)> = (0..100)
        .map(|_| {
            let caa = rng.uniform_range(0.1, 3.0);
            let cbb = rng.uniform_range(0.1, 3.0);
            let rho = rng.uniform_range(-0.99, 0.99);
            (caa, rho * (caa * cbb).sqrt(), cbb)
        })
        .collect();
    let z: Vec<f64> = triples
        .par_iter()
        .enumerate()
        .map(|(i, &(a, b, c))| {
            let (mean, se) = i2_monte_carlo(a, b, c, 1_000_000, mix_seed(seed, i as u64));
            i2_erf(a, b, c).map(|v| (mean - v).abs() / se)
        })
        .collect::<Result<_>>()?;
    let worst = z.iter().cloned().fold(0.0, f64::max);
    out.push(CheckOutcome::new(
        "i2 analytic vs monte carlo",
        worst <= 3.0,
        format!(
            "max |MC − analytic|/SE = {worst:.3} over {} triples at 1e6 samples, required ≤ 3",
            z.len()
        ),
    ));
    Ok(out)
}

fn cosine(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.inner(b)? / (a.frobenius_norm() * b.frobenius_norm()))
}

pub fn mirror_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed);
    let w = gaussian(&mut rng, 32, 32, 0.0, 1.0)?;
    let n = 100_000;
    let mut acc = Matrix::zeros(32, 32);
    let mut xi = vec![0.0; 32];
    for _ in 0..n {
        rng.fill_normal(&mut xi);
        acc.axpy(1.0, &mirror_increment(&w, &xi, 1.0)?)?;
    }
    let c = cosine(&acc, &w.transpose())?;
    let mut out = vec![CheckOutcome::new(
        "mean mirror increment aligns with the transpose",
        c >= 0.99,
        format!("cosine {c:.6} over {n} increments, required ≥ 0.99"),
    )];

    let mut cfg = NetworkConfig::classifier(vec![32, 32, 32, 10]);
    cfg.feedback_scale = 1.0;
    let mut net = factorize_feedback(&init_network(&cfg, &mut rng)?, &mut rng)?;
    let mc = MirrorConfig {
        lr_mirror: 0.1,
        weight_decay_mirror: 0.1,
        noise_std: 1.0,
        premirror_epochs: 0,
        target_std: entry_std(&net.feedback),
    };
    let mut drift: f64 = 0.0;
    let mut prev = entry_std(&net.feedback);
    for _ in 0..200 {
        mirror_step_in_place(&mut net, &mc, &mut rng)?;
        let s = entry_std(&net.feedback);
        drift = drift.max((s / prev - 1.0).abs());
        prev = s;
    }
    out.push(CheckOutcome::new(
        "product feedback std is held per step",
        drift <= 1e-6,
        format!("max relative per-step drift {drift:e} over 200 steps, required ≤ 1e-6"),
    ));
    Ok(out)
}

/// `dR/dt` and `dW2/dt` at the orthogonal initialization against the
/// closed-form slopes, within three Monte-Carlo standard errors.
pub fn early_expansion_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = TeacherStudentConfig {
        seed,
        ..TeacherStudentConfig::default()
    };
    let op = TeacherStudent::init(&cfg)?.order_params()?;
    let n_mc = 1_000_000;
    let d = ode_rhs(&op, cfg.eta, n_mc, mix_seed(seed, 1))?;
    let pred = early_dr(&op, cfg.eta)?;
    let mut worst_r: f64 = 0.0;
    for a in 0..op.k() {
        for b in 0..op.m() {
            worst_r = worst_r.max((d.dr.get(a, b) - pred.get(a, b)).abs() / d.dr_se.get(a, b));
        }
    }
    let mo = mc_moments(&op, n_mc, mix_seed(seed, 2))?;
    let mut worst_w: f64 = 0.0;
    for a in 0..op.k() {
        // dW2/dt = −η E[σ(λ)e]; the η factor cancels in the ratio
        worst_w = worst_w.max(mo.sig[a].abs() / mo.sig_se[a]);
    }
    let closed = d.dw2.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(vec![
        CheckOutcome::new(
            "dR/dt at t=0 matches the closed form",
            worst_r <= 3.0,
            format!("max |MC − closed form|/SE = {worst_r:.3} at {n_mc} samples, required ≤ 3"),
        ),
        CheckOutcome::new(
            "dW2/dt at t=0 vanishes",
            worst_w <= 3.0 && closed <= 1e-15,
            format!("max |MC|/SE = {worst_w:.3}, closed form {closed:e}, required ≤ 3 SE"),
        ),
    ])
}

/// Relative-or-absolute agreement of two `ε_g` curves at log-spaced times.
pub fn compare_trajectories(
    theory: &Trajectory,
    empirical: &Trajectory,
    t_min: f64,
    t_max: f64,
    n: usize,
) -> CheckOutcome {
    let times = crate::theory::log_times(t_min, t_max, n);
    let mut worst: f64 = 0.0;
    let mut worst_t = f64::NAN;
    let mut ok = true;
    for &t in &times[1..] {
        match (theory.eg_at(t), empirical.eg_at(t)) {
            (Some(a), Some(b)) => {
                let tol = (0.10 * b.abs()).max(0.02);
                let ratio = (a - b).abs() / tol;
                if ratio > worst {
                    worst = ratio;
                    worst_t = t;
                }
                ok &= ratio <= 1.0;
            }
            _ => ok = false,
        }
    }
    CheckOutcome::new(
        "theory and simulation agree",
        ok,
        format!(
            "worst |Δε_g| / max(10%, 0.02) = {worst:.3} at t = {worst_t:.1} over {n} log-spaced times in [{t_min}, {t_max}]"
        ),
    )
}

/// A plateau, then a drop to below half the plateau level at a time in
/// `[lo, hi]`, ending well below it.
pub fn plateau_then_drop(traj: &Trajectory, lo: f64, hi: f64) -> CheckOutcome {
    let plateau: Vec<f64> = traj
        .times
        .iter()
        .zip(&traj.eg)
        .filter(|(t, _)| (1.0..=50.0).contains(*t))
        .map(|(_, e)| *e)
        .collect();
    if plateau.is_empty() {
        return CheckOutcome::new(
            "plateau followed by a drop",
            false,
            "no records in t ∈ [1, 50]".into(),
        );
    }
    let level = plateau.iter().sum::<f64>() / plateau.len() as f64;
    let flat = plateau.iter().all(|e| (e / level - 1.0).abs() <= 0.05);
    let drop = traj
        .times
        .iter()
        .zip(&traj.eg)
        .find(|(_, e)| **e < 0.5 * level)
        .map(|(t, _)| *t);
    let last = *traj.eg.last().unwrap_or(&f64::NAN);
    let ok = flat && drop.is_some_and(|t| (lo..=hi).contains(&t)) && last < 0.25 * level;
    CheckOutcome::new(
        "plateau followed by a drop",
        ok,
        format!(
            "plateau ε_g ≈ {level:.4} (flat within 5%: {flat}), halves at t = {}, final {last:.4}, drop required in [{lo}, {hi}]",
            drop.map_or("never".to_string(), |t| format!("{t:.1}"))
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn cheap_suites_pass() {
        for s in [Suite::Taylor, Suite::FfEquivalence] {
            let out = s.run(0).unwrap();
            assert!(out.iter().all(|o| o.passed), "{:?}", out);
        }
    }

    #[test]
    fn i2_monte_carlo_degenerate_variance() {
        let (m, _) = i2_monte_carlo(0.0, 0.0, 1.0, 1000, 1);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn comparison_helpers() {
        let traj = Trajectory {
            times: vec![0.0, 10.0, 100.0, 1000.0, 10000.0],
            states: vec![],
            eg: vec![0.4, 0.4, 0.4, 0.05, 0.01],
        };
        assert!(plateau_then_drop(&traj, 300.0, 5000.0).passed);
        assert!(!plateau_then_drop(&traj, 2000.0, 5000.0).passed);
        assert!(compare_trajectories(&traj, &traj, 1.0, 1e4, 20).passed);
        let mut off = traj.clone();
        off.eg[2] = 0.3;
        assert!(!compare_trajectories(&off, &traj, 1.0, 1e4, 20).passed);
    }
}
