//! Loss terms of the stage-one objective, built on the autodiff graph.

use crate::encoders::Encoders;
use crate::error::{contract, Result};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

use super::regime::RegimeConfig;

/// Reconstruction terms: `L_xc`, `L_cx` and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct ReconTerms {
    pub xc: Var,
    pub cx: Var,
    pub recon: Var,
}

/// Weighted combination `lambda_xc * L_xc + lambda_cx * L_cx`.
pub fn combine_recon<T: Real>(g: &mut Graph<T>, xc: Var, cx: Var, lambda_xc: f64, lambda_cx: f64) -> ReconTerms {
    let a = g.scale(xc, lambda_xc);
    let b = g.scale(cx, lambda_cx);
    let recon = g.add(a, b);
    ReconTerms { xc, cx, recon }
}

/// Cross-modal reconstruction: `Decoder_c(z_x)` against context features and
/// `Decoder_x(z_c)` against the segments, each an element-averaged MSE.
#[allow(clippy::too_many_arguments)]
pub fn recon_loss<T: Real>(
    g: &mut Graph<T>,
    enc: &Encoders<T>,
    store: &ParamStore<T>,
    z_x: Var,
    z_c: Var,
    x_target: &Tensor<T>,
    c_target: &Tensor<T>,
    lambda_xc: f64,
    lambda_cx: f64,
) -> Result<ReconTerms> {
    let bx = g.value(z_x).rows();
    let bc = g.value(z_c).rows();
    if bx == 0 || bc == 0 || x_target.is_empty() || c_target.is_empty() {
        return Err(contract("reconstruction loss on an empty batch"));
    }
    if bx != bc || x_target.rows() != bx || c_target.rows() != bx {
        return Err(contract("reconstruction batch sizes differ"));
    }
    let c_hat = enc.decode_context_graph(g, store, z_x);
    let xc = g.mse(c_hat, c_target);
    let x_hat = enc.decode_sensor_graph(g, store, z_c);
    let cx = g.mse(x_hat, x_target);
    Ok(combine_recon(g, xc, cx, lambda_xc, lambda_cx))
}

/// Mean over the batch of `0.5 * sum_j (mu_j^2 + exp(logvar_j) - 1 - logvar_j)`.
pub fn kl_loss<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    if g.value(mu).shape() != g.value(logvar).shape() {
        return Err(contract("mu and logvar shapes differ"));
    }
    let batch = g.value(mu).rows().max(1);
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let t = g.add(mu2, var);
    let t = g.sub(t, logvar);
    let t = g.add_scalar(t, -1.0);
    let s = g.sum_all(t);
    Ok(g.scale(s, 0.5 / batch as f64))
}

/// Supervised contrastive loss with context ids as labels.
///
/// Returns the loss node and whether every anchor lacked a positive (loss 0).
pub fn supcon_loss<T: Real>(g: &mut Graph<T>, z: Var, labels: &[usize], tau: f64) -> Result<(Var, bool)> {
    let n = g.value(z).rows();
    if n < 2 {
        return Err(contract("contrastive loss needs at least two samples"));
    }
    if !(tau > 0.0) {
        return Err(contract("temperature must be positive"));
    }
    if labels.len() != n {
        return Err(contract("label count does not match batch"));
    }
    let degenerate = !(0..n).any(|i| (0..n).any(|j| j != i && labels[j] == labels[i]));
    let l = g.supcon(z, labels, tau);
    Ok((l, degenerate))
}

/// Graph nodes of the full stage-one objective.
#[derive(Clone, Copy, Debug)]
pub struct PretrainTerms {
    pub total: Var,
    pub xc: Var,
    pub cx: Var,
    pub recon: Var,
    pub kl: Var,
    pub con: Var,
    pub con_degenerate: bool,
}

/// A mini-batch prepared for the stage-one objective.
pub struct PretrainBatch<T: Real> {
    /// `[batch, length, channels]`
    pub x_input: Tensor<T>,
    /// `[batch, channels * length]`
    pub x_target: Tensor<T>,
    /// `[batch, text]`
    pub c_features: Tensor<T>,
    pub context_labels: Vec<usize>,
    /// Reparameterization noise `[batch, latent]`; `None` uses `z_c = mu_c`.
    pub eps: Option<Tensor<T>>,
}

/// `L_pre = L_recon + lambda * (L_KL + gamma * L_con)`; all components are reported.
pub fn pretrain_loss<T: Real>(
    g: &mut Graph<T>,
    enc: &Encoders<T>,
    store: &ParamStore<T>,
    batch: &PretrainBatch<T>,
    regime: &RegimeConfig,
    tau: f64,
) -> Result<PretrainTerms> {
    regime.validate()?;
    let x = g.input(batch.x_input.clone());
    let c = g.input(batch.c_features.clone());
    let z_x = enc.sensor_graph(g, store, x);
    let (mu, logvar) = enc.context_graph(g, store, c);
    let z_c = match &batch.eps {
        Some(eps) => enc.reparameterize(g, mu, logvar, eps.clone()),
        None => mu,
    };
    let r = recon_loss(
        g,
        enc,
        store,
        z_x,
        z_c,
        &batch.x_target,
        &batch.c_features,
        regime.lambda_xc,
        regime.lambda_cx,
    )?;
    let kl = kl_loss(g, mu, logvar)?;
    let (con, con_degenerate) = if batch.context_labels.len() >= 2 {
        supcon_loss(g, z_c, &batch.context_labels, tau)?
    } else {
        (g.input(Tensor::scalar(T::zero())), true)
    };
    let total = if regime.lambda == 0.0 {
        r.recon
    } else {
        let reg = if regime.gamma == 0.0 {
            kl
        } else {
            let wc = g.scale(con, regime.gamma);
            g.add(kl, wc)
        };
        let reg = g.scale(reg, regime.lambda);
        g.add(r.recon, reg)
    };
    Ok(PretrainTerms {
        total,
        xc: r.xc,
        cx: r.cx,
        recon: r.recon,
        kl,
        con,
        con_degenerate,
    })
}
