//! Prototype-guided bidirectional decoder: every layer first folds the
//! current target features into the prototypes, then reconstructs the
//! target from the updated prototypes, reusing one parameter set for both
//! directions. The position-aligned constraint adds an FFN transform of the
//! updated prototypes onto the naive reconstruction.

use rand::Rng;

use crate::attention::{linear_cross_attention, AttnSettings, LayerParams};
use crate::config::ModelConfig;
use crate::error::{ProadError, Result};
use crate::Tensor;

/// Learnable prototype tokens, one row per token.
pub struct PrototypeBank {
    pub tokens: Tensor,
}

impl PrototypeBank {
    /// N(0, 1/√C) init, matching token-embedding scale.
    pub fn seeded<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        PrototypeBank {
            tokens: Tensor::randn(&[count, dim], std, rng, true),
        }
    }
}

/// Per-layer outputs of a decoder pass.
pub struct DecoderTrace {
    /// Updated prototypes P entering each layer's reconstruction.
    pub prototypes: Vec<Tensor>,
    /// Naive reconstruction f_rec per layer.
    pub reconstructed: Vec<Tensor>,
    /// Constraint term added onto f_rec per layer.
    pub regularizer: Vec<Tensor>,
    /// Final per-layer output f_D (also the next layer's target stream).
    pub decoded: Vec<Tensor>,
}

impl DecoderTrace {
    pub fn final_stream(&self) -> &Tensor {
        self.decoded.last().expect("trace has at least one layer")
    }

    pub fn all_finite(&self) -> bool {
        self.prototypes.iter().all(Tensor::is_finite)
            && self.reconstructed.iter().all(Tensor::is_finite)
            && self.regularizer.iter().all(Tensor::is_finite)
            && self.decoded.iter().all(Tensor::is_finite)
    }
}

/// Prototype-update pass: pre-norm residual attention from the current
/// target features, then a residual FFN.
pub fn prototype_update(
    protos: &Tensor,
    target: &Tensor,
    layer: &LayerParams,
    settings: &AttnSettings,
) -> Result<Tensor> {
    let protos_norm = layer.ln_attn.forward(protos)?;
    let target_norm = layer.ln_attn.forward(target)?;
    let attended = protos.add(&linear_cross_attention(
        &protos_norm,
        &target_norm,
        &layer.attn,
        settings,
    )?)?;
    Ok(attended.add(&layer.ffn.forward(&layer.ln_ffn.forward(&attended)?)?)?)
}

/// Target-reconstruction pass. With the constraint on, the FFN transform of
/// the updated prototypes lands on the matching patch position (requires one
/// prototype per patch); with it off the layer degrades to a standard block
/// whose FFN reads the reconstruction itself.
pub fn target_reconstruct(
    target: &Tensor,
    protos_next: &Tensor,
    layer: &LayerParams,
    settings: &AttnSettings,
    constraint_on: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    if constraint_on && protos_next.shape()[0] != target.shape()[0] {
        return Err(ProadError::Config(format!(
            "prototype-based constraint needs one prototype per patch ({} vs {})",
            protos_next.shape()[0],
            target.shape()[0]
        )));
    }
    let target_norm = layer.ln_attn.forward(target)?;
    let protos_norm = layer.ln_attn.forward(protos_next)?;
    let reconstructed = target.add(&linear_cross_attention(
        &target_norm,
        &protos_norm,
        &layer.attn,
        settings,
    )?)?;
    let regularizer = if constraint_on {
        layer.ffn.forward(&layer.ln_ffn.forward(protos_next)?)?
    } else {
        layer.ffn.forward(&layer.ln_ffn.forward(&reconstructed)?)?
    };
    let decoded = reconstructed.add(&regularizer)?;
    Ok((reconstructed, regularizer, decoded))
}

/// Runs the full decoder stack. With `dynamic_on == false` the prototypes
/// are updated once before the first layer and held fixed afterwards.
pub fn decoder_forward(
    q_bn: &Tensor,
    p_bn: &Tensor,
    layers: &[LayerParams],
    settings: &AttnSettings,
    constraint_on: bool,
    dynamic_on: bool,
) -> Result<DecoderTrace> {
    if layers.is_empty() {
        return Err(ProadError::Config("decoder needs at least one layer".into()));
    }
    let mut trace = DecoderTrace {
        prototypes: Vec::with_capacity(layers.len()),
        reconstructed: Vec::with_capacity(layers.len()),
        regularizer: Vec::with_capacity(layers.len()),
        decoded: Vec::with_capacity(layers.len()),
    };
    let mut target = q_bn.clone();
    let mut protos = p_bn.clone();
    for (idx, layer) in layers.iter().enumerate() {
        let protos_next = if dynamic_on || idx == 0 {
            prototype_update(&protos, &target, layer, settings)?
        } else {
            protos.clone()
        };
        let (reconstructed, regularizer, decoded) =
            target_reconstruct(&target, &protos_next, layer, settings, constraint_on)?;
        trace.prototypes.push(protos_next.clone());
        trace.reconstructed.push(reconstructed);
        trace.regularizer.push(regularizer);
        trace.decoded.push(decoded.clone());
        protos = protos_next;
        target = decoded;
    }
    Ok(trace)
}

/// Learnable-parameter ledger; the frozen encoder is excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLedger {
    pub bottleneck: usize,
    pub decoder: usize,
    pub prototypes: usize,
}

impl ParamLedger {
    pub fn total(&self) -> usize {
        self.bottleneck + self.decoder + self.prototypes
    }
}

/// Exact learnable counts from the architecture alone.
///
/// Per decoder layer: 2 layer norms (4C) + 4 projections (4(C²+C)) +
/// FFN (8C²+5C) = 12C²+13C. Bottleneck: 8C²+5C. Prototypes: M·C.
pub fn count_parameters(cfg: &ModelConfig) -> ParamLedger {
    let c = cfg.dim;
    ParamLedger {
        bottleneck: 8 * c * c + 5 * c,
        decoder: cfg.decoder_layers * (12 * c * c + 13 * c),
        prototypes: cfg.prototypes * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PhiKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn settings() -> AttnSettings {
        AttnSettings {
            phi: PhiKind::EluPlusOne,
            normalize: true,
            eps: 1e-6,
        }
    }

    fn zeroed_outputs(layer: &mut LayerParams, dim: usize) {
        layer.attn.output.weight = Tensor::zeros(&[dim, dim], true);
        layer.ffn.lin2.weight = Tensor::zeros(&[4 * dim, dim], true);
    }

    #[test]
    fn prototype_update_with_zero_out_projections_is_identity() {
        let dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = LayerParams::seeded(dim, &mut rng, true);
        zeroed_outputs(&mut layer, dim);
        let protos = Tensor::randn(&[5, dim], 1.0, &mut rng, false);
        let target = Tensor::randn(&[8, dim], 1.0, &mut rng, false);
        let out = prototype_update(&protos, &target, &layer, &settings()).unwrap();
        assert_eq!(out.to_vec(), protos.to_vec());
    }

    #[test]
    fn prototype_update_output_shape_is_token_count_by_dim() {
        let dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer = LayerParams::seeded(dim, &mut rng, true);
        for n in [1, 4, 9] {
            let protos = Tensor::randn(&[5, dim], 1.0, &mut rng, false);
            let target = Tensor::randn(&[n, dim], 1.0, &mut rng, false);
            let out = prototype_update(&protos, &target, &layer, &settings()).unwrap();
            assert_eq!(out.shape(), &[5, dim]);
        }
    }

    #[test]
    fn target_reconstruct_with_zero_out_projections_is_identity() {
        let dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut layer = LayerParams::seeded(dim, &mut rng, true);
        zeroed_outputs(&mut layer, dim);
        let target = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let protos = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let (_, _, decoded) =
            target_reconstruct(&target, &protos, &layer, &settings(), true).unwrap();
        assert_eq!(decoded.to_vec(), target.to_vec());
    }

    #[test]
    fn regularizer_depends_only_on_prototypes() {
        let dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let layer = LayerParams::seeded(dim, &mut rng, true);
        let protos = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let target_a = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let target_b = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let (_, reg_a, _) =
            target_reconstruct(&target_a, &protos, &layer, &settings(), true).unwrap();
        let (_, reg_b, _) =
            target_reconstruct(&target_b, &protos, &layer, &settings(), true).unwrap();
        assert_eq!(reg_a.to_vec(), reg_b.to_vec());
    }

    #[test]
    fn constraint_with_mismatched_counts_is_rejected() {
        let dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let layer = LayerParams::seeded(dim, &mut rng, true);
        let target = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let protos = Tensor::randn(&[3, dim], 1.0, &mut rng, false);
        assert!(target_reconstruct(&target, &protos, &layer, &settings(), true).is_err());
        assert!(target_reconstruct(&target, &protos, &layer, &settings(), false).is_ok());
    }

    #[test]
    fn static_decoder_reuses_the_first_prototype_update() {
        let dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let layers: Vec<LayerParams> =
            (0..3).map(|_| LayerParams::seeded(dim, &mut rng, true)).collect();
        let q = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let p = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let trace = decoder_forward(&q, &p, &layers, &settings(), true, false).unwrap();
        let first = trace.prototypes[0].to_vec();
        for l in 1..3 {
            assert_eq!(trace.prototypes[l].to_vec(), first);
        }
        // dynamic mode actually changes them
        let dynamic = decoder_forward(&q, &p, &layers, &settings(), true, true).unwrap();
        assert_ne!(dynamic.prototypes[1].to_vec(), dynamic.prototypes[0].to_vec());
    }

    #[test]
    fn one_layer_forward_composes_the_two_passes() {
        let dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layers = vec![LayerParams::seeded(dim, &mut rng, true)];
        let q = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let p = Tensor::randn(&[4, dim], 1.0, &mut rng, false);
        let trace = decoder_forward(&q, &p, &layers, &settings(), true, true).unwrap();
        let protos_next = prototype_update(&p, &q, &layers[0], &settings()).unwrap();
        let (rec, reg, dec) =
            target_reconstruct(&q, &protos_next, &layers[0], &settings(), true).unwrap();
        assert_eq!(trace.prototypes[0].to_vec(), protos_next.to_vec());
        assert_eq!(trace.reconstructed[0].to_vec(), rec.to_vec());
        assert_eq!(trace.regularizer[0].to_vec(), reg.to_vec());
        assert_eq!(trace.decoded[0].to_vec(), dec.to_vec());
    }

    #[test]
    fn empty_layer_list_is_rejected() {
        let q = Tensor::zeros(&[4, 6], false);
        let p = Tensor::zeros(&[4, 6], false);
        assert!(decoder_forward(&q, &p, &[], &settings(), true, true).is_err());
    }

    #[test]
    fn paper_scale_ledger_matches_published_counts() {
        let ledger = count_parameters(&ModelConfig::paper_scale());
        assert_eq!(ledger.bottleneck, 4_722_432);
        assert_eq!(ledger.decoder, 56_702_976);
        assert_eq!(ledger.prototypes, 605_952);
        assert_eq!(ledger.total(), 62_031_360);
    }

    #[test]
    fn prototype_count_factorization_is_forced() {
        assert_eq!(789 * 768, 605_952);
    }

    #[test]
    fn desk_ledger_matches_hand_sum() {
        let cfg = ModelConfig {
            dim: 64,
            decoder_layers: 2,
            prototypes: 64,
            ..ModelConfig::default()
        };
        let ledger = count_parameters(&cfg);
        // bottleneck: 64·256 + 256 + 256·64 + 64
        assert_eq!(ledger.bottleneck, 16_384 + 256 + 16_384 + 64);
        // per layer: 2·(64+64) + 4·(64·64+64) + (64·256+256 + 256·64+64)
        let per_layer = 256 + 4 * (4_096 + 64) + (16_384 + 256 + 16_384 + 64);
        assert_eq!(ledger.decoder, 2 * per_layer);
        assert_eq!(ledger.prototypes, 64 * 64);
    }
}
