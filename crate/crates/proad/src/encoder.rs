//! Frozen multi-layer patch encoder standing in for a pre-trained backbone.
//! Random seeded weights, linear self-attention blocks, and a fused input
//! built by summing a contiguous range of layer outputs.

use rand::Rng;

use crate::attention::{AttnSettings, LayerParams, Linear};
use crate::config::{ModelConfig, PhiKind};
use crate::decoder::prototype_update;
use crate::error::{ProadError, Result};
use crate::Tensor;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub num_layers: usize,
    /// 1-based inclusive fusion range.
    pub fuse_from: usize,
    pub fuse_to: usize,
}

impl EncoderConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        EncoderConfig {
            patch_size: cfg.patch_size,
            dim: cfg.dim,
            num_layers: cfg.encoder_layers,
            fuse_from: cfg.fuse_from,
            fuse_to: cfg.fuse_to,
        }
    }
}

/// Per-layer patch features plus their fused sum.
pub struct FeatureStack {
    /// Output of every encoder layer, each N×C.
    pub per_layer: Vec<Tensor>,
    /// Sum of the layers in the fusion range, N×C.
    pub fused: Tensor,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    patch_proj: Linear,
    blocks: Vec<LayerParams>,
    settings: AttnSettings,
}

impl Encoder {
    /// All weights seeded-random and frozen.
    pub fn seeded<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Self {
        let patch_inputs = cfg.patch_size * cfg.patch_size * 3;
        let patch_proj = Linear::seeded(patch_inputs, cfg.dim, rng, false);
        let blocks = (0..cfg.num_layers)
            .map(|_| LayerParams::seeded(cfg.dim, rng, false))
            .collect();
        Encoder {
            cfg,
            patch_proj,
            blocks,
            settings: AttnSettings {
                phi: PhiKind::EluPlusOne,
                normalize: true,
                eps: 1e-6,
            },
        }
    }

    /// Rearranges H×W×3 pixels in [0,1] into an N×(3p²) patch matrix,
    /// mapped to [-1,1]. Raster order over patches, then pixels, then
    /// channels.
    pub fn patchify(&self, pixels: &[f64], height: usize, width: usize) -> Result<Tensor> {
        let p = self.cfg.patch_size;
        if height % p != 0 || width % p != 0 {
            return Err(ProadError::Config(format!(
                "image {height}x{width} not divisible by patch size {p}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(ProadError::Data(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                height * width * 3
            )));
        }
        let (gy, gx) = (height / p, width / p);
        let cols = p * p * 3;
        let mut data = vec![0.0; gy * gx * cols];
        for ty in 0..gy {
            for tx in 0..gx {
                let patch = ty * gx + tx;
                let mut col = 0;
                for py in 0..p {
                    for px in 0..p {
                        let pixel = ((ty * p + py) * width + (tx * p + px)) * 3;
                        for ch in 0..3 {
                            data[patch * cols + col] = pixels[pixel + ch] * 2.0 - 1.0;
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(&[gy * gx, cols], data, false)?)
    }

    /// Multi-scale features for one image. Deterministic; no gradients reach
    /// the encoder's parameters.
    pub fn encode(&self, pixels: &[f64], height: usize, width: usize) -> Result<FeatureStack> {
        let mut tokens = self.patch_proj.forward(&self.patchify(pixels, height, width)?)?;
        let mut per_layer = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            // a self-attention block is the prototype-update pass on (x, x)
            tokens = prototype_update(&tokens, &tokens, block, &self.settings)?;
            per_layer.push(tokens.clone());
        }
        let fused = self.fuse(&per_layer)?;
        Ok(FeatureStack { per_layer, fused })
    }

    fn fuse(&self, per_layer: &[Tensor]) -> Result<Tensor> {
        let mut acc = per_layer[self.cfg.fuse_from - 1].clone();
        for layer in &per_layer[self.cfg.fuse_from..self.cfg.fuse_to] {
            acc = acc.add(layer)?;
        }
        Ok(acc)
    }

    pub fn all_params(&self) -> Vec<Tensor> {
        let mut out = vec![self.patch_proj.weight.clone(), self.patch_proj.bias.clone()];
        let mut named = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            block.named_params(&format!("encoder.{i}"), &mut named);
        }
        out.extend(named.into_iter().map(|(_, t)| t));
        out
    }

    /// Hash of every parameter byte; used to assert frozen-ness after runs.
    pub fn param_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in self.all_params() {
            for v in t.data().iter() {
                bytes.extend_from_slice(&v.to_le_bits_bytes());
            }
        }
        crate::rng::fnv1a64(&bytes)
    }
}

trait LeBitsBytes {
    fn to_le_bits_bytes(&self) -> [u8; 8];
}

impl LeBitsBytes for f64 {
    fn to_le_bits_bytes(&self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_encoder(seed: u64) -> Encoder {
        let cfg = EncoderConfig {
            patch_size: 8,
            dim: 64,
            num_layers: 8,
            fuse_from: 2,
            fuse_to: 7,
        };
        Encoder::seeded(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn test_pixels(side: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..side * side * 3).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = desk_encoder(5);
        let b = desk_encoder(5);
        assert_eq!(a.param_hash(), b.param_hash());
        let c = desk_encoder(6);
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn every_parameter_is_frozen() {
        let enc = desk_encoder(5);
        assert!(enc.all_params().iter().all(|t| !t.requires_grad()));
    }

    #[test]
    fn output_shapes_follow_the_patch_count() {
        let enc = desk_encoder(5);
        let stack = enc.encode(&test_pixels(64, 1), 64, 64).unwrap();
        assert_eq!(stack.per_layer.len(), 8);
        for layer in &stack.per_layer {
            assert_eq!(layer.shape(), &[64, 64]);
        }
        assert_eq!(stack.fused.shape(), &[64, 64]);
    }

    #[test]
    fn encoding_is_bitwise_deterministic() {
        let enc = desk_encoder(5);
        let px = test_pixels(64, 1);
        let a = enc.encode(&px, 64, 64).unwrap();
        let b = enc.encode(&px, 64, 64).unwrap();
        assert_eq!(a.fused.to_vec(), b.fused.to_vec());
        for (la, lb) in a.per_layer.iter().zip(&b.per_layer) {
            assert_eq!(la.to_vec(), lb.to_vec());
        }
    }

    #[test]
    fn fusion_is_the_plain_sum_of_the_range() {
        let enc = desk_encoder(5);
        let stack = enc.encode(&test_pixels(64, 1), 64, 64).unwrap();
        let n = stack.fused.numel();
        let mut expect = vec![0.0; n];
        // layers 2..=7, 1-based
        for layer in &stack.per_layer[1..7] {
            for (e, v) in expect.iter_mut().zip(layer.data().iter()) {
                *e += *v;
            }
        }
        let got = stack.fused.to_vec();
        for i in 0..n {
            assert!((got[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_on_features_leave_encoder_gradient_free() {
        let enc = desk_encoder(5);
        let stack = enc.encode(&test_pixels(64, 1), 64, 64).unwrap();
        // features do not even require grad: the frozen graph is dropped
        assert!(!stack.fused.requires_grad());
        assert!(enc.all_params().iter().all(|t| t.grad().is_none()));
    }

    #[test]
    fn indivisible_image_size_is_rejected() {
        let enc = desk_encoder(5);
        assert!(enc.encode(&test_pixels(30, 1), 30, 30).is_err());
    }
}
