//! Weight mirroring over a factorized feedback matrix `F = F_1 F_2 … F_L`.
//!
//! In mirror mode each factor receives `ΔF_ℓ = η_F ξ (W_ℓ ξ)ᵀ` for white
//! noise `ξ`. Since `E[ξ ξᵀ] = σ_ξ² I`, the mean increment is `η_F σ_ξ² W_ℓᵀ`,
//! so the product drifts toward `W_1ᵀ … W_Lᵀ = W_totᵀ`. After every step the
//! factors are rescaled so that the product keeps its initial entry std.

use crate::error::{FlabError, Result};
use crate::network::Network;
use crate::numerics::{entry_std, gaussian, matmul_nt, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct MirrorConfig {
    pub lr_mirror: f64,
    pub weight_decay_mirror: f64,
    pub noise_std: f64,
    pub premirror_epochs: usize,
    /// Entry std the product `F` is held at.
    pub target_std: f64,
}

impl MirrorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_mirror > 0.0) {
            return Err(FlabError::InvalidConfig(format!(
                "mirror learning rate must be positive, got {}",
                self.lr_mirror
            )));
        }
        if !(self.weight_decay_mirror >= 0.0) {
            return Err(FlabError::InvalidConfig(
                "mirror weight decay must be nonnegative".into(),
            ));
        }
        if !(self.noise_std > 0.0) {
            return Err(FlabError::InvalidConfig(format!(
                "mirror noise std must be positive, got {}",
                self.noise_std
            )));
        }
        if !(self.target_std > 0.0) {
            return Err(FlabError::InvalidConfig(
                "mirror target std must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Replaces `net.feedback` by a product of `L` Gaussian factors whose entry
/// std matches the network's configured feedback std.
pub fn factorize_feedback(net: &Network, rng: &mut Rng) -> Result<Network> {
    let sizes = net.layer_sizes();
    let depth = net.depth();
    let target = net.config.feedback_std();
    // std of a product entry is Π s_ℓ · √(Π n_mid); split the budget evenly.
    let mids: f64 = sizes[1..depth].iter().map(|&n| n as f64).product();
    let s = (target / mids.sqrt()).powf(1.0 / depth as f64);
    let mut factors = Vec::with_capacity(depth);
    for l in 0..depth {
        factors.push(gaussian(rng, sizes[l], sizes[l + 1], 0.0, s)?);
    }
    let mut out = net.clone();
    out.feedback_factors = Some(factors);
    if target > 0.0 {
        rescale_to(&mut out, target)?;
    } else {
        out.feedback = out.factor_product().unwrap()?;
    }
    Ok(out)
}

fn rescale_to(net: &mut Network, target: f64) -> Result<()> {
    let depth = net.depth();
    let product = net.factor_product().ok_or(FlabError::Unfactorized)??;
    let current = entry_std(&product);
    if !(current > 0.0) || !current.is_finite() {
        return Err(FlabError::DegenerateFeedback);
    }
    let k = (target / current).powf(1.0 / depth as f64);
    let factors = net.feedback_factors.as_mut().unwrap();
    for f in factors.iter_mut() {
        f.scale_in_place(k);
    }
    net.feedback = net.factor_product().unwrap()?;
    Ok(())
}

/// Scales every factor by `(σ_target / σ_t)^{1/L}`, `σ_t` being the entry std
/// of the current product, and refreshes the cached product.
pub fn renormalize_factors(net: &Network, cfg: &MirrorConfig) -> Result<Network> {
    let mut out = net.clone();
    rescale_to(&mut out, cfg.target_std)?;
    Ok(out)
}

/// The raw increment `η_F ξ (W_ℓ ξ)ᵀ` for a given noise vector.
pub fn mirror_increment(w: &Matrix, xi: &[f64], lr: f64) -> Result<Matrix> {
    let xi_row = Matrix::row_vector(xi)?;
    // (W ξ)ᵀ as a row: ξᵀ Wᵀ
    let r = matmul_nt(&xi_row, w)?;
    Ok(Matrix::from_fn(xi.len(), r.cols(), |i, j| {
        lr * xi[i] * r.get(0, j)
    }))
}

fn step_in_place(net: &mut Network, cfg: &MirrorConfig, rng: &mut Rng) -> Result<()> {
    let factors = net
        .feedback_factors
        .as_mut()
        .ok_or(FlabError::Unfactorized)?;
    let shrink = 1.0 - cfg.lr_mirror * cfg.weight_decay_mirror;
    for (f, w) in factors.iter_mut().zip(&net.weights) {
        let mut xi = vec![0.0; w.cols()];
        for v in xi.iter_mut() {
            *v = cfg.noise_std * rng.normal();
        }
        let inc = mirror_increment(w, &xi, cfg.lr_mirror)?;
        if shrink != 1.0 {
            f.scale_in_place(shrink);
        }
        f.axpy(1.0, &inc)?;
    }
    rescale_to(net, cfg.target_std)
}

/// One mirror-mode update of every factor followed by renormalization.
pub fn mirror_step(net: &Network, cfg: &MirrorConfig, rng: &mut Rng) -> Result<Network> {
    let mut out = net.clone();
    mirror_step_in_place(&mut out, cfg, rng)?;
    Ok(out)
}

pub fn mirror_step_in_place(net: &mut Network, cfg: &MirrorConfig, rng: &mut Rng) -> Result<()> {
    check_step(cfg)?;
    step_in_place(net, cfg, rng)
}

// Stepping tolerates η_F = 0 (a pure renormalization); configs built for
// training reject it in `validate`.
fn check_step(cfg: &MirrorConfig) -> Result<()> {
    if cfg.lr_mirror == 0.0 {
        MirrorConfig {
            lr_mirror: 1.0,
            ..cfg.clone()
        }
        .validate()
    } else {
        cfg.validate()
    }
}

/// `premirror_epochs × steps_per_epoch` mirror steps before any training.
pub fn pre_mirror(
    net: &Network,
    cfg: &MirrorConfig,
    rng: &mut Rng,
    steps_per_epoch: usize,
) -> Result<Network> {
    check_step(cfg)?;
    if net.feedback_factors.is_none() {
        return Err(FlabError::Unfactorized);
    }
    let mut out = net.clone();
    for _ in 0..cfg.premirror_epochs * steps_per_epoch {
        step_in_place(&mut out, cfg, rng)?;
    }
    Ok(out)
}
