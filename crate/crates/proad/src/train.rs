//! Distance-weighted decay loss, the stabilized AdamW variant, the cosine
//! warmup schedule, and the seeded training loop.

use crate::config::TrainConfig;
use crate::datagen::{BatchIterator, ImageSample};
use crate::decoder::DecoderTrace;
use crate::encoder::FeatureStack;
use crate::error::{ProadError, Result};
use crate::model::ProAdModel;
use crate::rng;
use crate::Tensor;

const NORM_FLOOR_SQ: f64 = 1e-24; // (1e-12)² under the sqrt
const MEAN_DISTANCE_FLOOR: f64 = 1e-12;

/// Per-position cosine distance between matching rows: d_i = 1 - cos(e_i, x_i).
/// Zero-norm rows are guarded so values stay in [0, 2] and gradients finite.
pub fn distance_map(encoder_feat: &Tensor, decoded_feat: &Tensor) -> Result<Tensor> {
    if encoder_feat.shape() != decoded_feat.shape() {
        return Err(ProadError::Config(format!(
            "distance map needs matching shapes, got {:?} vs {:?}",
            encoder_feat.shape(),
            decoded_feat.shape()
        )));
    }
    let rows = encoder_feat.shape()[0];
    let dot = encoder_feat.mul(decoded_feat)?.sum_last_keep()?;
    let norm_e = encoder_feat
        .mul(encoder_feat)?
        .sum_last_keep()?
        .clamp_min(NORM_FLOOR_SQ)
        .sqrt();
    let norm_d = decoded_feat
        .mul(decoded_feat)?
        .sum_last_keep()?
        .clamp_min(NORM_FLOOR_SQ)
        .sqrt();
    let cos = dot.div(&norm_e.mul(&norm_d)?)?.clamp(-1.0, 1.0);
    Ok(cos.rsub_scalar(1.0).reshape(&[rows])?)
}

/// Same computation on raw buffers, for decay factors and anomaly maps.
pub fn distance_values(encoder_feat: &[f64], decoded_feat: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let e = &encoder_feat[r * cols..(r + 1) * cols];
        let d = &decoded_feat[r * cols..(r + 1) * cols];
        let mut dot = 0.0;
        let mut ee = 0.0;
        let mut dd = 0.0;
        for c in 0..cols {
            dot += e[c] * d[c];
            ee += e[c] * e[c];
            dd += d[c] * d[c];
        }
        let denom = ee.max(NORM_FLOOR_SQ).sqrt() * dd.max(NORM_FLOOR_SQ).sqrt();
        out[r] = 1.0 - (dot / denom).clamp(-1.0, 1.0);
    }
    out
}

/// α^τ with α = d / mean(d); degenerate all-zero maps yield α ≡ 1. The
/// result is a detached weighting, never part of the graph. Non-finite
/// distances also fall back to α ≡ 1 so the loss value itself can surface
/// the failure with a proper diagnostic.
pub fn decay_factors(distances: &[f64], tau: f64) -> Vec<f64> {
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    if !mean.is_finite() || mean <= MEAN_DISTANCE_FLOOR {
        return vec![1.0; distances.len()];
    }
    distances.iter().map(|d| (d / mean).powf(tau)).collect()
}

/// Supervision pairing: decoder layer i reconstructs encoder layer
/// fuse_from + i (1-based), clamped to the end of the fusion range.
/// Returned indices are zero-based (decoder_layer, encoder_layer).
pub fn layer_pairing(decoder_layers: usize, fuse_from: usize, fuse_to: usize) -> Vec<(usize, usize)> {
    (0..decoder_layers)
        .map(|i| (i, (fuse_from - 1 + i).min(fuse_to - 1)))
        .collect()
}

/// Mean cosine distance over all supervised pairs, with the per-position
/// decay weighting attached as a gradient hook on each decoded feature map.
/// The hook leaves the forward value untouched.
pub fn decay_loss(
    trace: &DecoderTrace,
    features: &FeatureStack,
    pairing: &[(usize, usize)],
    tau: f64,
) -> Result<Tensor> {
    if pairing.is_empty() {
        return Err(ProadError::Config("empty layer pairing".into()));
    }
    let mut total: Option<Tensor> = None;
    for &(dec_idx, enc_idx) in pairing {
        let decoded = trace.decoded.get(dec_idx).ok_or_else(|| {
            ProadError::Config(format!("pairing references missing decoder layer {dec_idx}"))
        })?;
        let encoder_feat = features.per_layer.get(enc_idx).ok_or_else(|| {
            ProadError::Config(format!("pairing references missing encoder layer {enc_idx}"))
        })?;
        let (rows, cols) = (decoded.shape()[0], decoded.shape()[1]);
        let scale = {
            let d_vals = distance_values(&encoder_feat.data(), &decoded.data(), rows, cols);
            let alpha_tau = decay_factors(&d_vals, tau);
            let mut s = vec![0.0; rows * cols];
            for r in 0..rows {
                s[r * cols..(r + 1) * cols].fill(alpha_tau[r]);
            }
            s
        };
        let hooked = decoded.attach_grad_hook(&scale)?;
        let term = distance_map(encoder_feat, &hooked)?.mean_all();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap().div_scalar(pairing.len() as f64))
}

/// Linear warmup to `base_lr`, then cosine decay to zero.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay and a per-tensor RMS clamp on the Adam
/// update, the stabilizing modification of the stable variant.
pub struct StableAdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
    pub step_count: u64,
    /// (m, v) per parameter tensor, in registry order.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Step skipped because a gradient was non-finite; state untouched.
    Rejected { param: String },
}

impl StableAdamW {
    pub fn new(params: &[(String, Tensor)], weight_decay: f64, clip_threshold: f64) -> Self {
        StableAdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_threshold,
            step_count: 0,
            moments: params
                .iter()
                .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> StepOutcome {
        debug_assert_eq!(params.len(), self.moments.len());
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        for ((name, _), g) in params.iter().zip(&grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return StepOutcome::Rejected { param: name.clone() };
            }
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (((_, tensor), grad), (m, v)) in params.iter().zip(&grads).zip(&mut self.moments) {
            let n = grad.len();
            let mut update = vec![0.0; n];
            let mut sq_sum = 0.0;
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                update[i] = m_hat / (v_hat.sqrt() + self.eps);
                sq_sum += update[i] * update[i];
            }
            let rms = (sq_sum / n as f64).sqrt();
            // min(1, θ/rms); rms == 0 falls through to 1
            let clip = (self.clip_threshold / rms).min(1.0);
            let mut data = tensor.data_mut();
            for i in 0..n {
                data[i] -= lr * self.weight_decay * data[i];
                data[i] -= lr * clip * update[i];
            }
        }
        StepOutcome::Applied
    }
}

/// One line of the run log: epoch index, global step, current lr, mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} step={} lr={} loss={:.12}",
            self.epoch, self.step, self.lr, self.loss
        )
    }
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub rejected_steps: usize,
    pub global_step: usize,
    pub epochs_run: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        if self.rejected_steps > 0 {
            out.push_str(&format!("rejected_steps={}\n", self.rejected_steps));
        }
        out
    }
}

/// Optimizer state carried across a resume.
pub struct ResumeState {
    pub start_epoch: usize,
    pub global_step: usize,
    pub optimizer: StableAdamW,
}

/// Seeded training loop over the normal split. Encoder features are
/// computed once (the encoder is frozen and deterministic) and reused
/// across epochs. Dropout and shuffling draw from per-step and per-epoch
/// substreams so a resumed run retraces the original exactly.
pub fn train(
    model: &ProAdModel,
    samples: &[ImageSample],
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<ResumeState>,
) -> Result<(TrainReport, StableAdamW)> {
    cfg.validate()?;
    let normals: Vec<&ImageSample> = samples.iter().filter(|s| s.is_train()).collect();
    if normals.is_empty() {
        return Err(ProadError::Data(
            "training needs at least one normal training sample".into(),
        ));
    }
    let mut stacks = Vec::with_capacity(normals.len());
    for s in &normals {
        stacks.push(model.encoder.encode(&s.pixels, s.height, s.width)?);
    }
    let pairing = layer_pairing(
        model.cfg.decoder_layers,
        model.cfg.fuse_from,
        model.cfg.fuse_to,
    );
    let params = model.named_params();
    let batches = BatchIterator::new(normals.len(), cfg.batch_size, seed)?;
    let steps_per_epoch = batches.steps_per_epoch();
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    let (start_epoch, mut global_step, mut optimizer) = match resume {
        Some(r) => (r.start_epoch, r.global_step, r.optimizer),
        None => (
            0,
            0,
            StableAdamW::new(&params, cfg.weight_decay, cfg.clip_threshold),
        ),
    };

    let mut report = TrainReport::default();
    for epoch in start_epoch..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut last_lr = 0.0;
        for batch in batches.epoch(epoch as u64) {
            let lr = lr_schedule(global_step, total_steps, warmup_steps, cfg.lr);
            let mut drop_rng = rng::substream(seed, "dropout", global_step as u64);
            model.zero_grad();
            let mut batch_loss: Option<Tensor> = None;
            for &idx in &batch {
                let trace = model.forward(&stacks[idx], true, &mut drop_rng)?;
                let loss = decay_loss(&trace, &stacks[idx], &pairing, cfg.tau)?;
                if !loss.item().is_finite() {
                    return Err(ProadError::Numeric(diagnose_non_finite(
                        &trace,
                        &stacks[idx],
                        normals[idx].id.as_str(),
                    )));
                }
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            let loss = batch_loss.unwrap().div_scalar(batch.len() as f64);
            let loss_value = loss.item();
            loss.backward()?;
            if let StepOutcome::Rejected { .. } = optimizer.step(&params, lr) {
                report.rejected_steps += 1;
            }
            epoch_loss += loss_value;
            epoch_batches += 1;
            last_lr = lr;
            global_step += 1;
        }
        report.records.push(EpochRecord {
            epoch: epoch + 1,
            step: global_step,
            lr: last_lr,
            loss: epoch_loss / epoch_batches as f64,
        });
    }
    report.global_step = global_step;
    report.epochs_run = cfg.epochs;
    Ok((report, optimizer))
}

/// Names the first non-finite tensor along the forward chain.
fn diagnose_non_finite(trace: &DecoderTrace, features: &FeatureStack, sample: &str) -> String {
    if !features.fused.is_finite() {
        return format!("non-finite loss on {sample}: first bad tensor is encoder.fused");
    }
    for l in 0..trace.decoded.len() {
        for (tag, t) in [
            ("prototypes", &trace.prototypes[l]),
            ("reconstructed", &trace.reconstructed[l]),
            ("regularizer", &trace.regularizer[l]),
            ("decoded", &trace.decoded[l]),
        ] {
            if !t.is_finite() {
                return format!(
                    "non-finite loss on {sample}: first bad tensor is decoder.{l}.{tag}"
                );
            }
        }
    }
    format!("non-finite loss on {sample}: all traced tensors finite, loss reduction overflowed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_is_zero_for_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6, 5], 1.0, &mut rng, false);
        let d = distance_map(&x, &x.clone()).unwrap();
        assert!(d.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn distance_is_two_for_opposite_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[6, 5], 1.0, &mut rng, false);
        let neg = x.neg();
        let d = distance_map(&x, &neg).unwrap();
        assert!(d.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn distance_is_one_for_orthogonal_rows() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 2.0], false).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![0.0, 3.0, 4.0, 0.0], false).unwrap();
        let d = distance_map(&a, &b).unwrap();
        assert!(d.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_distances_give_unit_decay_factors() {
        let alpha = decay_factors(&[0.7; 10], 3.0);
        assert!(alpha.iter().all(|&a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_exponent_gives_unit_factors_for_any_map() {
        let alpha = decay_factors(&[0.1, 0.9, 0.4], 0.0);
        assert_eq!(alpha, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn decay_factors_match_hand_computation() {
        // d = [0.1, 0.3] → α = [0.5, 1.5] → α³ = [0.125, 3.375]
        let alpha = decay_factors(&[0.1, 0.3], 3.0);
        assert!((alpha[0] - 0.125).abs() < 1e-12);
        assert!((alpha[1] - 3.375).abs() < 1e-12);
    }

    #[test]
    fn degenerate_all_zero_map_yields_unit_factors() {
        let alpha = decay_factors(&[0.0; 8], 3.0);
        assert_eq!(alpha, vec![1.0; 8]);
    }

    #[test]
    fn schedule_hits_base_lr_at_warmup_end() {
        let lr = lr_schedule(10, 100, 10, 1e-3);
        assert_eq!(lr, 1e-3);
    }

    #[test]
    fn schedule_tail_is_nearly_zero() {
        let lr = lr_schedule(999, 1000, 10, 1e-3);
        assert!(lr < 1e-6);
    }

    #[test]
    fn schedule_midpoint_is_half_base() {
        // cosine phase spans steps 10..1010; midpoint at 510
        let lr = lr_schedule(510, 1010, 10, 1e-3);
        assert!((lr - 5e-4).abs() < 1e-12);
    }

    fn quadratic_params(value: f64) -> Vec<(String, Tensor)> {
        vec![("w".into(), Tensor::from_vec(&[1], vec![value], true).unwrap())]
    }

    #[test]
    fn zero_gradient_and_zero_decay_leaves_parameters_unchanged() {
        let params = quadratic_params(1.5);
        let mut opt = StableAdamW::new(&params, 0.0, 1.0);
        params[0].1.zero_grad();
        assert_eq!(opt.step(&params, 1e-2), StepOutcome::Applied);
        assert_eq!(params[0].1.item(), 1.5);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_multiplicatively() {
        let params = quadratic_params(2.0);
        let mut opt = StableAdamW::new(&params, 0.1, 1.0);
        assert_eq!(opt.step(&params, 0.5), StepOutcome::Applied);
        assert!((params[0].1.item() - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn one_step_matches_hand_stepped_reference() {
        // loss = w², grad = 2w at w = 3
        let params = quadratic_params(3.0);
        let w = &params[0].1;
        w.mul(w).unwrap().sum_all().backward().unwrap();
        let mut opt = StableAdamW::new(&params, 0.01, 1.0);
        assert_eq!(opt.step(&params, 0.1), StepOutcome::Applied);

        // reference, stepped by hand
        let g: f64 = 6.0;
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let m_hat = m / 0.1;
        let v_hat = v / 0.001;
        let u: f64 = m_hat / (v_hat.sqrt() + 1e-8);
        let rms = u.abs();
        let clip = (1.0 / rms).min(1.0);
        let expect = (3.0 - 0.1 * 0.01 * 3.0) - 0.1 * clip * u;
        assert!((params[0].1.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejects_the_step() {
        let params = quadratic_params(1.0);
        let mut opt = StableAdamW::new(&params, 0.0, 1.0);
        params[0].1.accumulate_grad_for_test(f64::NAN);
        let outcome = opt.step(&params, 1e-2);
        assert!(matches!(outcome, StepOutcome::Rejected { .. }));
        assert_eq!(params[0].1.item(), 1.0);
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn pairing_walks_the_fusion_range_in_order() {
        assert_eq!(layer_pairing(4, 2, 7), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(layer_pairing(8, 2, 9), (0..8).map(|i| (i, i + 1)).collect::<Vec<_>>());
        // more decoder layers than fused encoder layers: clamp at the end
        assert_eq!(layer_pairing(3, 2, 3), vec![(0, 1), (1, 2), (2, 2)]);
    }

    trait GradForTest {
        fn accumulate_grad_for_test(&self, v: f64);
    }

    impl GradForTest for Tensor {
        fn accumulate_grad_for_test(&self, v: f64) {
            // route a NaN gradient through a hook-free graph
            let target = Tensor::from_vec(&[1], vec![v], false).unwrap();
            self.mul(&target).unwrap().sum_all().backward().unwrap();
        }
    }
}
