//! Detection and localization metrics: AUROC (midrank Mann–Whitney),
//! step-interpolated average precision, F1-max over thresholds, and AUPRO
//! (per-region overlap vs false-positive rate, integrated to an FPR limit).

use crate::error::{ProadError, Result};

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ProadError::Metric("non-finite score".into()));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l != 0).count();
    (pos, labels.len() - pos)
}

/// Rank-based AUROC with midrank tie handling.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(ProadError::Metric("scores/labels length mismatch".into()));
    }
    check_finite(scores)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(ProadError::Metric(
            "AUROC needs both classes present".into(),
        ));
    }
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[idx[k]] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = (0..n).filter(|&k| labels[k] != 0).map(|k| ranks[k]).sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Walks distinct thresholds in descending score order, grouping ties.
/// Calls `visit(tp, fp)` after each threshold.
fn sweep_thresholds(scores: &[f64], labels: &[u8], mut visit: impl FnMut(usize, usize)) {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        visit(tp, fp);
        i = j + 1;
    }
}

/// Step-interpolated area under the precision-recall curve.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(ProadError::Metric("scores/labels length mismatch".into()));
    }
    check_finite(scores)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(ProadError::Metric("AP needs at least one positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    sweep_thresholds(scores, labels, |tp, fp| {
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    });
    Ok(ap)
}

/// Maximum F1 over all distinct-score thresholds.
pub fn f1_max(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(ProadError::Metric("scores/labels length mismatch".into()));
    }
    check_finite(scores)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(ProadError::Metric("F1-max needs at least one positive".into()));
    }
    let mut best: f64 = 0.0;
    sweep_thresholds(scores, labels, |tp, fp| {
        let fneg = n_pos - tp;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        best = best.max(f1);
    });
    Ok(best)
}

/// 8-connected components of a binary mask; each component is a pixel-index
/// list.
pub fn connected_components(mask: &[u8], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / width, p % width);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] != 0 && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        components.push(comp);
    }
    components
}

/// PRO-vs-FPR curve points swept over all distinct scores, starting from the
/// implicit (0, 0).
pub fn pro_curve(
    maps: &[&[f64]],
    masks: &[&[u8]],
    height: usize,
    width: usize,
) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(ProadError::Metric("maps/masks length mismatch".into()));
    }
    let pixels = height * width;
    let mut region_of: Vec<Vec<Option<usize>>> = Vec::with_capacity(maps.len());
    let mut region_sizes: Vec<usize> = Vec::new();
    let mut n_neg = 0usize;
    for (img, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.len() != pixels || mask.len() != pixels {
            return Err(ProadError::Metric(format!(
                "image {img}: buffer sizes do not match {height}x{width}"
            )));
        }
        check_finite(map)?;
        let mut assignment = vec![None; pixels];
        for comp in connected_components(mask, height, width) {
            let region_id = region_sizes.len();
            region_sizes.push(comp.len());
            for p in comp {
                assignment[p] = Some(region_id);
            }
        }
        n_neg += mask.iter().filter(|&&m| m == 0).count();
        region_of.push(assignment);
    }
    if region_sizes.is_empty() {
        return Err(ProadError::Metric(
            "AUPRO needs at least one anomalous region".into(),
        ));
    }
    if n_neg == 0 {
        return Err(ProadError::Metric("AUPRO needs normal pixels".into()));
    }

    // global descending sweep over every pixel
    let mut order: Vec<(usize, usize)> = (0..maps.len())
        .flat_map(|img| (0..pixels).map(move |p| (img, p)))
        .collect();
    order.sort_by(|&(ia, pa), &(ib, pb)| maps[ib][pb].total_cmp(&maps[ia][pa]));

    let mut hits = vec![0usize; region_sizes.len()];
    let mut fp = 0usize;
    let mut points = vec![(0.0, 0.0)];
    let total = order.len();
    let mut i = 0;
    while i < total {
        let mut j = i;
        let t = maps[order[i].0][order[i].1];
        while j + 1 < total && maps[order[j + 1].0][order[j + 1].1] == t {
            j += 1;
        }
        for &(img, p) in &order[i..=j] {
            match region_of[img][p] {
                Some(r) => hits[r] += 1,
                None => fp += 1,
            }
        }
        let pro = hits
            .iter()
            .zip(&region_sizes)
            .map(|(&h, &s)| h as f64 / s as f64)
            .sum::<f64>()
            / region_sizes.len() as f64;
        points.push((fp as f64 / n_neg as f64, pro));
        i = j + 1;
    }
    Ok(points)
}

/// Trapezoidal integral of a curve over fpr in [0, limit], normalized by the
/// limit. Vertical segments contribute nothing, matching the dense sweep.
pub fn integrate_to_limit(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_at) / 2.0;
            break;
        }
    }
    area / limit
}

/// Area under the per-region-overlap curve up to `fpr_limit`, normalized.
pub fn aupro(
    maps: &[&[f64]],
    masks: &[&[u8]],
    height: usize,
    width: usize,
    fpr_limit: f64,
) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(ProadError::Metric(format!(
            "fpr_limit must be in (0,1], got {fpr_limit}"
        )));
    }
    let points = pro_curve(maps, masks, height, width)?;
    Ok(integrate_to_limit(&points, fpr_limit))
}
