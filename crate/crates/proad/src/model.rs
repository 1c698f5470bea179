//! Model assembly: frozen encoder, shared bottleneck, prototype bank, and
//! the decoder stack, built deterministically from (config, seed).

use rand::Rng;

use crate::attention::{AttnSettings, LayerParams};
use crate::bottleneck::Bottleneck;
use crate::config::ModelConfig;
use crate::decoder::{decoder_forward, DecoderTrace, PrototypeBank};
use crate::encoder::{Encoder, EncoderConfig, FeatureStack};
use crate::error::Result;
use crate::rng;
use crate::Tensor;

pub struct ProAdModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub bottleneck: Bottleneck,
    pub prototypes: PrototypeBank,
    pub layers: Vec<LayerParams>,
}

impl ProAdModel {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::seeded(
            EncoderConfig::from_model(cfg),
            &mut rng::stream(seed, "encoder"),
        );
        let mut init = rng::stream(seed, "model");
        let bottleneck = Bottleneck::seeded(cfg.dim, &mut init);
        let prototypes = PrototypeBank::seeded(cfg.prototypes, cfg.dim, &mut init);
        let layers = (0..cfg.decoder_layers)
            .map(|_| LayerParams::seeded(cfg.dim, &mut init, true))
            .collect();
        Ok(ProAdModel {
            cfg: cfg.clone(),
            encoder,
            bottleneck,
            prototypes,
            layers,
        })
    }

    pub fn attn_settings(&self) -> AttnSettings {
        AttnSettings {
            phi: self.cfg.phi,
            normalize: self.cfg.normalize,
            eps: self.cfg.lca_eps,
        }
    }

    /// Learnable parameters in canonical order; the frozen encoder is not
    /// part of this registry.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.bottleneck.named_params(&mut out);
        out.push(("prototypes".into(), self.prototypes.tokens.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named_params(&format!("decoder.{i}"), &mut out);
        }
        out
    }

    pub fn learnable_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bottleneck pair plus decoder stack on already-encoded features.
    /// The feature path runs at the configured drop rate only when both
    /// `training` and the noisy-bottleneck toggle are on.
    pub fn forward<R: Rng>(
        &self,
        features: &FeatureStack,
        training: bool,
        rng: &mut R,
    ) -> Result<DecoderTrace> {
        let prob = if self.cfg.anb { self.cfg.drop_prob } else { 0.0 };
        let (q_bn, p_bn) = self.bottleneck.pair(
            &features.fused,
            &self.prototypes.tokens,
            prob,
            training,
            rng,
        )?;
        decoder_forward(
            &q_bn,
            &p_bn,
            &self.layers,
            &self.attn_settings(),
            self.cfg.constraint,
            self.cfg.dynamic,
        )
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Hash over all learnable values; used for determinism checks.
    pub fn param_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.named_params() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data().iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        rng::fnv1a64(&bytes)
    }
}
