//! Adaptive noisy bottleneck: one shared MLP that dropout-perturbs image
//! features while passing prototypes through at rate zero, keeping both in
//! the same feature space.

use rand::Rng;

use crate::attention::Linear;
use crate::error::Result;
use crate::Tensor;

pub struct Bottleneck {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Bottleneck {
    /// C → 4C → C, the width forced by the published parameter count.
    pub fn seeded<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Bottleneck {
            lin1: Linear::seeded(dim, 4 * dim, rng, true),
            lin2: Linear::seeded(4 * dim, dim, rng, true),
        }
    }

    /// Dropout(W2·Dropout(GELU(W1·x + b1)) + b2) at the given rate.
    pub fn forward<R: Rng>(
        &self,
        x: &Tensor,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        let hidden = self
            .lin1
            .forward(x)?
            .gelu()
            .dropout(rate, training, rng)?;
        Ok(self.lin2.forward(&hidden)?.dropout(rate, training, rng)?)
    }

    /// Features take the noisy path, prototypes the rate-0 path; both share
    /// this bottleneck's weights.
    pub fn pair<R: Rng>(
        &self,
        fused: &Tensor,
        protos: &Tensor,
        prob: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor)> {
        let q_bn = self.forward(fused, prob, training, rng)?;
        let p_bn = self.forward(protos, 0.0, training, rng)?;
        Ok((q_bn, p_bn))
    }

    pub fn named_params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("bottleneck.lin1.weight".into(), self.lin1.weight.clone()));
        out.push(("bottleneck.lin1.bias".into(), self.lin1.bias.clone()));
        out.push(("bottleneck.lin2.weight".into(), self.lin2.weight.clone()));
        out.push(("bottleneck.lin2.bias".into(), self.lin2.bias.clone()));
    }
}
