//! Inference-side evaluation: per-pixel anomaly maps from encoder/decoder
//! feature discrepancies, image scoring, and the full metric report.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::datagen::ImageSample;
use crate::error::{ProadError, Result};
use crate::metrics;
use crate::model::ProAdModel;
use crate::rng;
use crate::train::{distance_values, layer_pairing};

/// Smoothing width of the anomaly map at the reference 392-pixel resolution.
const SIGMA_AT_392: f64 = 4.0;
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Bilinear upsampling with the pixel-center (align_corners = false)
/// convention and edge clamping.
pub fn bilinear_upsample(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dst_h * dst_w];
    let sy = src_h as f64 / dst_h as f64;
    let sx = src_w as f64 / dst_w as f64;
    for y in 0..dst_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, src_h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f64;
        for x in 0..dst_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, src_w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bot = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            out[y * dst_w + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Separable Gaussian blur with edge replication. `sigma <= 0` is identity.
pub fn gaussian_smooth(map: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return map.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut norm = 0.0;
    for i in -radius..=radius {
        let v = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        norm += v;
    }
    for v in &mut kernel {
        *v /= norm;
    }
    let clamp_w = |v: i64| v.clamp(0, width as i64 - 1) as usize;
    let clamp_h = |v: i64| v.clamp(0, height as i64 - 1) as usize;
    let mut horiz = vec![0.0; map.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sxi = clamp_w(x as i64 + ki as i64 - radius);
                acc += kv * map[y * width + sxi];
            }
            horiz[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; map.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let syi = clamp_h(y as i64 + ki as i64 - radius);
                acc += kv * horiz[syi * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Per-pixel anomaly scores for one sample plus the image-level score
/// (max of the smoothed map).
pub struct AnomalyMap {
    pub sample_id: String,
    /// Patch-grid mean distance over supervised pairs, before upsampling.
    pub grid: Vec<f64>,
    pub grid_side: usize,
    /// Smoothed full-resolution scores, H×W.
    pub smoothed: Vec<f64>,
    pub image_score: f64,
}

/// Runs inference (dropout disabled) and assembles the anomaly map.
pub fn anomaly_map(model: &ProAdModel, sample: &ImageSample) -> Result<AnomalyMap> {
    let stack = model
        .encoder
        .encode(&sample.pixels, sample.height, sample.width)?;
    // eval mode draws nothing from the stream
    let mut eval_rng = rng::stream(0, "eval");
    let trace = model.forward(&stack, false, &mut eval_rng)?;
    let pairing = layer_pairing(
        model.cfg.decoder_layers,
        model.cfg.fuse_from,
        model.cfg.fuse_to,
    );
    let grid_side = model.cfg.grid();
    let patches = grid_side * grid_side;
    let mut grid = vec![0.0; patches];
    for &(dec_idx, enc_idx) in &pairing {
        let decoded = &trace.decoded[dec_idx];
        let enc_feat = &stack.per_layer[enc_idx];
        let d = distance_values(&enc_feat.data(), &decoded.data(), patches, model.cfg.dim);
        for (g, di) in grid.iter_mut().zip(&d) {
            *g += di / pairing.len() as f64;
        }
    }
    let upsampled = bilinear_upsample(&grid, grid_side, grid_side, sample.height, sample.width);
    let sigma = SIGMA_AT_392 * sample.height as f64 / 392.0;
    let smoothed = gaussian_smooth(&upsampled, sample.height, sample.width, sigma);
    let image_score = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !image_score.is_finite() {
        return Err(ProadError::Numeric(format!(
            "non-finite anomaly score on {}",
            sample.id
        )));
    }
    Ok(AnomalyMap {
        sample_id: sample.id.clone(),
        grid,
        grid_side,
        smoothed,
        image_score,
    })
}

/// One metric block; image-level rows leave `aupro` unset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricBlock {
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
    pub aupro: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassReport {
    pub category: String,
    pub image: MetricBlock,
    pub pixel: MetricBlock,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub config_hash: String,
    pub per_class: Vec<ClassReport>,
    /// Mean over classes.
    pub image: MetricBlock,
    pub pixel: MetricBlock,
}

impl EvalReport {
    /// Deterministic plain-text form, one key: value per line with
    /// per-class blocks.
    pub fn to_text(&self) -> String {
        fn block(out: &mut String, label: &str, m: &MetricBlock) {
            out.push_str(&format!("{label}.auroc: {:.6}\n", m.auroc));
            out.push_str(&format!("{label}.ap: {:.6}\n", m.ap));
            out.push_str(&format!("{label}.f1_max: {:.6}\n", m.f1_max));
            if let Some(p) = m.aupro {
                out.push_str(&format!("{label}.aupro: {p:.6}\n"));
            }
        }
        let mut out = String::from("proad eval report v1\n");
        out.push_str(&format!("config_hash: {}\n", self.config_hash));
        out.push_str(&format!("classes: {}\n", self.per_class.len()));
        for c in &self.per_class {
            out.push_str(&format!("[class {}]\n", c.category));
            block(&mut out, "image", &c.image);
            block(&mut out, "pixel", &c.pixel);
        }
        out.push_str("[aggregate]\n");
        block(&mut out, "image", &self.image);
        block(&mut out, "pixel", &self.pixel);
        out
    }
}

pub struct EvalOutcome {
    pub report: EvalReport,
    /// Maps in test-sample order, for dumps and downstream analysis.
    pub maps: Vec<AnomalyMap>,
}

/// Full evaluation over the test split: image metrics from image scores,
/// pixel metrics from smoothed maps against ground-truth masks.
pub fn evaluate(model: &ProAdModel, samples: &[ImageSample], cfg: &RunConfig) -> Result<EvalOutcome> {
    let test: Vec<&ImageSample> = samples.iter().filter(|s| !s.is_train()).collect();
    if test.is_empty() {
        return Err(ProadError::Data("evaluation needs test samples".into()));
    }
    let mut maps = Vec::with_capacity(test.len());
    for s in &test {
        maps.push(anomaly_map(model, s)?);
    }

    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in test.iter().enumerate() {
        by_class.entry(s.category.clone()).or_default().push(i);
    }

    let mut per_class = Vec::new();
    for (category, indices) in &by_class {
        let annotate =
            |e: ProadError| ProadError::Metric(format!("class {category}: {e}"));
        let image_scores: Vec<f64> = indices.iter().map(|&i| maps[i].image_score).collect();
        let image_labels: Vec<u8> = indices
            .iter()
            .map(|&i| u8::from(test[i].is_anomalous()))
            .collect();
        let image = MetricBlock {
            auroc: metrics::auroc(&image_scores, &image_labels).map_err(annotate)?,
            ap: metrics::average_precision(&image_scores, &image_labels).map_err(annotate)?,
            f1_max: metrics::f1_max(&image_scores, &image_labels).map_err(annotate)?,
            aupro: None,
        };

        let mut pixel_scores = Vec::new();
        let mut pixel_labels = Vec::new();
        let mut class_maps: Vec<&[f64]> = Vec::new();
        let mut class_masks: Vec<&[u8]> = Vec::new();
        for &i in indices {
            pixel_scores.extend_from_slice(&maps[i].smoothed);
            pixel_labels.extend(test[i].mask.iter().map(|&m| u8::from(m != 0)));
            class_maps.push(&maps[i].smoothed);
            class_masks.push(&test[i].mask);
        }
        let (h, w) = (test[indices[0]].height, test[indices[0]].width);
        let pixel = MetricBlock {
            auroc: metrics::auroc(&pixel_scores, &pixel_labels).map_err(annotate)?,
            ap: metrics::average_precision(&pixel_scores, &pixel_labels).map_err(annotate)?,
            f1_max: metrics::f1_max(&pixel_scores, &pixel_labels).map_err(annotate)?,
            aupro: Some(
                metrics::aupro(&class_maps, &class_masks, h, w, DEFAULT_FPR_LIMIT)
                    .map_err(annotate)?,
            ),
        };
        per_class.push(ClassReport {
            category: category.clone(),
            image,
            pixel,
        });
    }

    let mean = |f: &dyn Fn(&ClassReport) -> f64| {
        per_class.iter().map(|c| f(c)).sum::<f64>() / per_class.len() as f64
    };
    let report = EvalReport {
        config_hash: cfg.config_hash(),
        image: MetricBlock {
            auroc: mean(&|c| c.image.auroc),
            ap: mean(&|c| c.image.ap),
            f1_max: mean(&|c| c.image.f1_max),
            aupro: None,
        },
        pixel: MetricBlock {
            auroc: mean(&|c| c.pixel.auroc),
            ap: mean(&|c| c.pixel.ap),
            f1_max: mean(&|c| c.pixel.f1_max),
            aupro: Some(mean(&|c| c.pixel.aupro.unwrap_or(0.0))),
        },
        per_class,
    };
    Ok(EvalOutcome { report, maps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_a_constant_stays_constant() {
        let src = vec![0.7; 4];
        let up = bilinear_upsample(&src, 2, 2, 8, 8);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn smoothing_preserves_total_mass_away_from_edges() {
        let mut map = vec![0.0; 32 * 32];
        map[16 * 32 + 16] = 1.0;
        let sm = gaussian_smooth(&map, 32, 32, 1.5);
        let total: f64 = sm.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        // peak stays at the hot pixel
        let argmax = sm
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 16 * 32 + 16);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let map = vec![0.1, 0.9, 0.4, 0.2];
        assert_eq!(gaussian_smooth(&map, 2, 2, 0.0), map);
    }
}
