//! Shared building blocks: linear layers, layer norm, the feed-forward
//! block, and linear cross-attention. One implementation serves the frozen
//! encoder, the prototype-update pass, and the target-reconstruction pass.

use rand::Rng;

use crate::config::PhiKind;
use crate::error::Result;
use crate::Tensor;

pub const LN_EPS: f64 = 1e-5;

impl PhiKind {
    /// Elementwise map into [0, ∞) used on queries and keys.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            PhiKind::EluPlusOne => x.elu_plus_one(),
            PhiKind::Relu => x.relu(),
        }
    }
}

/// How attention is computed; shared by every layer of a model.
#[derive(Debug, Clone, Copy)]
pub struct AttnSettings {
    pub phi: PhiKind,
    pub normalize: bool,
    pub eps: f64,
}

#[derive(Clone)]
pub struct Linear {
    /// in_dim × out_dim
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights ~ N(0, 1/fan_in), zero bias.
    pub fn seeded<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R, trainable: bool) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Tensor::randn(&[in_dim, out_dim], std, rng, trainable),
            bias: Tensor::zeros(&[out_dim], trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.add(&self.bias)?)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Clone)]
pub struct LayerNormPair {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormPair {
    pub fn identity(dim: usize, trainable: bool) -> Self {
        LayerNormPair {
            gamma: Tensor::ones(&[dim], trainable),
            beta: Tensor::zeros(&[dim], trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(&self.gamma, &self.beta, LN_EPS)?)
    }
}

/// Two-layer MLP C → 4C → C with GELU.
#[derive(Clone)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Ffn {
    pub fn seeded<R: Rng>(dim: usize, rng: &mut R, trainable: bool) -> Self {
        Ffn {
            lin1: Linear::seeded(dim, 4 * dim, rng, trainable),
            lin2: Linear::seeded(4 * dim, dim, rng, trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&self.lin1.forward(x)?.gelu())
    }
}

/// The four attention projections of one layer.
#[derive(Clone)]
pub struct AttnProjections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttnProjections {
    pub fn seeded<R: Rng>(dim: usize, rng: &mut R, trainable: bool) -> Self {
        AttnProjections {
            query: Linear::seeded(dim, dim, rng, trainable),
            key: Linear::seeded(dim, dim, rng, trainable),
            value: Linear::seeded(dim, dim, rng, trainable),
            output: Linear::seeded(dim, dim, rng, trainable),
        }
    }
}

/// One pre-norm block: 2 layer norms, 4 projections, 1 FFN. The same
/// parameter set serves both directions of a decoder layer.
#[derive(Clone)]
pub struct LayerParams {
    pub ln_attn: LayerNormPair,
    pub ln_ffn: LayerNormPair,
    pub attn: AttnProjections,
    pub ffn: Ffn,
}

impl LayerParams {
    pub fn seeded<R: Rng>(dim: usize, rng: &mut R, trainable: bool) -> Self {
        LayerParams {
            ln_attn: LayerNormPair::identity(dim, trainable),
            ln_ffn: LayerNormPair::identity(dim, trainable),
            attn: AttnProjections::seeded(dim, rng, trainable),
            ffn: Ffn::seeded(dim, rng, trainable),
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let mut push = |name: String, t: &Tensor| out.push((name, t.clone()));
        push(format!("{prefix}.ln_attn.gamma"), &self.ln_attn.gamma);
        push(format!("{prefix}.ln_attn.beta"), &self.ln_attn.beta);
        push(format!("{prefix}.ln_ffn.gamma"), &self.ln_ffn.gamma);
        push(format!("{prefix}.ln_ffn.beta"), &self.ln_ffn.beta);
        for (tag, lin) in [
            ("query", &self.attn.query),
            ("key", &self.attn.key),
            ("value", &self.attn.value),
            ("output", &self.attn.output),
        ] {
            push(format!("{prefix}.attn.{tag}.weight"), &lin.weight);
            push(format!("{prefix}.attn.{tag}.bias"), &lin.bias);
        }
        push(format!("{prefix}.ffn.lin1.weight"), &self.ffn.lin1.weight);
        push(format!("{prefix}.ffn.lin1.bias"), &self.ffn.lin1.bias);
        push(format!("{prefix}.ffn.lin2.weight"), &self.ffn.lin2.weight);
        push(format!("{prefix}.ffn.lin2.bias"), &self.ffn.lin2.bias);
    }
}

/// Linear cross-attention before the output projection:
/// φ(q)·(φ(k)ᵀ·v), optionally row-normalized by φ(q)·(φ(k)ᵀ·1).
///
/// The normalizer is clamped from below at `eps` rather than shifted by it,
/// so whenever the mass is comfortably positive the result is the exact
/// convex combination of value rows.
pub fn lca_attend(
    q_feat: &Tensor,
    k_feat: &Tensor,
    values: &Tensor,
    normalize: bool,
    eps: f64,
) -> Result<Tensor> {
    let key_value = k_feat.transpose()?.matmul(values)?; // C×C
    let raw = q_feat.matmul(&key_value)?; // A×C
    if !normalize {
        return Ok(raw);
    }
    let ones = Tensor::ones(&[k_feat.shape()[0], 1], false);
    let key_mass = k_feat.transpose()?.matmul(&ones)?; // C×1
    let denom = q_feat.matmul(&key_mass)?.clamp_min(eps); // A×1
    Ok(raw.div(&denom)?)
}

/// Full linear cross-attention: project, map through φ, attend, project out.
pub fn linear_cross_attention(
    q_src: &Tensor,
    kv_src: &Tensor,
    params: &AttnProjections,
    settings: &AttnSettings,
) -> Result<Tensor> {
    let q_feat = settings.phi.apply(&params.query.forward(q_src)?);
    let k_feat = settings.phi.apply(&params.key.forward(kv_src)?);
    let values = params.value.forward(kv_src)?;
    let attended = lca_attend(&q_feat, &k_feat, &values, settings.normalize, settings.eps)?;
    params.output.forward(&attended)
}
