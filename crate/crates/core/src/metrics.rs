//! Anomaly scoring and evaluation: per-pixel heatmaps upsampled from patch
//! scores, the region-overlap curve capped at a per-pixel false-positive
//! rate, ranking metrics, and the image-level score.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Per-pixel anomaly score field aligned to an input image.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

/// Binary ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub data: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "BinaryMask::new",
                expected: format!("{} pixels", height * width),
                got: format!("{}", data.len()),
            });
        }
        Ok(BinaryMask {
            data,
            height,
            width,
        })
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

/// Region-overlap curve and its capped, normalized integral.
#[derive(Clone, Debug)]
pub struct ProCurve {
    /// (per-pixel false positive rate, mean per-region overlap), fpr
    /// strictly increasing within [0, cap].
    pub points: Vec<(f64, f64)>,
    pub capped_auc: f64,
    pub fpr_cap: f64,
}

/// Bilinear upsampling of a patch-score grid to image resolution.
/// Half-pixel sample centers with edge clamping.
pub fn heatmap_from_patch_scores(
    per_patch: &[f64],
    grid: (usize, usize),
    out: (usize, usize),
) -> Result<Heatmap> {
    let (rows, cols) = grid;
    let (out_h, out_w) = out;
    if per_patch.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            op: "heatmap_from_patch_scores",
            expected: format!("{} patch scores", rows * cols),
            got: format!("{}", per_patch.len()),
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("empty heatmap output size".into()));
    }
    let mut values = vec![0.0f64; out_h * out_w];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * rows as f64 / out_h as f64 - 0.5)
            .clamp(0.0, (rows - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let wy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * cols as f64 / out_w as f64 - 0.5)
                .clamp(0.0, (cols - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let wx = sx - x0 as f64;
            let v00 = per_patch[y0 * cols + x0];
            let v01 = per_patch[y0 * cols + x1];
            let v10 = per_patch[y1 * cols + x0];
            let v11 = per_patch[y1 * cols + x1];
            values[oy * out_w + ox] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                + wy * ((1.0 - wx) * v10 + wx * v11);
        }
    }
    Ok(Heatmap {
        values,
        height: out_h,
        width: out_w,
        grid_rows: rows,
        grid_cols: cols,
    })
}

/// Connected components of true pixels under 8-connectivity, as pixel
/// index lists.
pub fn connected_regions(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            region.push(p);
            let (py, px) = (p / w, p % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = py as i64 + dy;
                    let nx = px as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

fn count_at_least(sorted_asc: &[f64], t: f64) -> usize {
    sorted_asc.len() - sorted_asc.partition_point(|&v| v < t)
}

/// Region-overlap curve over decreasing score thresholds, stopped once the
/// per-pixel false positive rate passes `fpr_cap`, with the last point
/// interpolated exactly to the cap. The capped integral is normalized by
/// the cap.
///
/// Thresholds sweep rank quantiles of the pooled heatmap values; when the
/// pool has at most `num_thresholds` distinct values every distinct value
/// is used, which makes the result exact.
pub fn pro_score(
    heatmaps: &[Heatmap],
    masks: &[BinaryMask],
    fpr_cap: f64,
    num_thresholds: usize,
) -> Result<ProCurve> {
    if heatmaps.len() != masks.len() || heatmaps.is_empty() {
        return Err(Error::Data(format!(
            "pro_score needs matching heatmap/mask lists, got {} and {}",
            heatmaps.len(),
            masks.len()
        )));
    }
    if !(0.0 < fpr_cap && fpr_cap <= 1.0) {
        return Err(Error::Config(format!("fpr cap {fpr_cap} outside (0, 1]")));
    }
    let mut region_scores: Vec<Vec<f64>> = Vec::new();
    let mut normal_scores: Vec<f64> = Vec::new();
    let mut pooled: Vec<f64> = Vec::new();
    for (hm, mask) in heatmaps.iter().zip(masks) {
        if hm.height != mask.height || hm.width != mask.width {
            return Err(Error::ShapeMismatch {
                op: "pro_score",
                expected: format!("{}x{}", hm.height, hm.width),
                got: format!("{}x{}", mask.height, mask.width),
            });
        }
        if hm.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite heatmap value".into()));
        }
        pooled.extend_from_slice(&hm.values);
        for region in connected_regions(mask) {
            let mut scores: Vec<f64> = region.iter().map(|&p| hm.values[p]).collect();
            scores.sort_unstable_by(f64::total_cmp);
            region_scores.push(scores);
        }
        for (p, &is_anom) in mask.data.iter().enumerate() {
            if !is_anom {
                normal_scores.push(hm.values[p]);
            }
        }
    }
    if region_scores.is_empty() {
        return Err(Error::Data(
            "pro_score requires at least one anomalous region".into(),
        ));
    }
    if normal_scores.is_empty() {
        return Err(Error::Data("pro_score requires normal pixels".into()));
    }
    normal_scores.sort_unstable_by(f64::total_cmp);
    let total_normal = normal_scores.len() as f64;

    pooled.sort_unstable_by(f64::total_cmp);
    pooled.dedup();
    let thresholds: Vec<f64> = if pooled.len() <= num_thresholds.max(2) {
        pooled.iter().rev().copied().collect()
    } else {
        let t = num_thresholds.max(2);
        let n = pooled.len();
        let mut picked: Vec<f64> = (0..t)
            .map(|i| pooled[(i * (n - 1)) / (t - 1)])
            .collect();
        picked.dedup();
        picked.reverse();
        picked
    };

    let num_regions = region_scores.len() as f64;
    let mut raw_points: Vec<(f64, f64)> = Vec::with_capacity(thresholds.len() + 1);
    raw_points.push((0.0, 0.0));
    for &t in &thresholds {
        let fpr = count_at_least(&normal_scores, t) as f64 / total_normal;
        let overlap: f64 = region_scores
            .iter()
            .map(|scores| count_at_least(scores, t) as f64 / scores.len() as f64)
            .sum::<f64>()
            / num_regions;
        raw_points.push((fpr, overlap));
        if fpr >= fpr_cap {
            break;
        }
    }

    // keep the best overlap per distinct fpr; both are nondecreasing as
    // thresholds fall, so the last entry wins
    let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(raw_points.len());
    for (fpr, overlap) in raw_points {
        match dedup.last_mut() {
            Some((last_fpr, last_ov)) if (*last_fpr - fpr).abs() == 0.0 => {
                *last_ov = last_ov.max(overlap)
            }
            _ => dedup.push((fpr, overlap)),
        }
    }

    // integrate the polyline over [0, cap]
    let mut area = 0.0f64;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for pair in dedup.windows(2) {
        let (f0, o0) = pair[0];
        let (f1, o1) = pair[1];
        if points.is_empty() {
            points.push((f0, o0));
        }
        if f1 <= fpr_cap {
            area += (f1 - f0) * (o0 + o1) / 2.0;
            points.push((f1, o1));
        } else {
            let w = fpr_cap - f0;
            let o_cap = o0 + (o1 - o0) * w / (f1 - f0);
            area += w * (o0 + o_cap) / 2.0;
            points.push((fpr_cap, o_cap));
            break;
        }
    }
    if points.is_empty() {
        points = dedup;
    }
    // extend a curve that never reached the cap with its final overlap
    if let Some(&(last_fpr, last_ov)) = points.last() {
        if last_fpr < fpr_cap {
            area += (fpr_cap - last_fpr) * last_ov;
            points.push((fpr_cap, last_ov));
        }
    }
    Ok(ProCurve {
        points,
        capped_auc: area / fpr_cap,
        fpr_cap,
    })
}

/// Probability a random positive outranks a random negative, ties counted
/// one half (rank-sum formulation).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "roc_auc",
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied entries share the mean rank
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += mean_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (positives * (positives + 1)) as f64 / 2.0;
    Ok(u / (positives as f64 * negatives as f64))
}

/// Average precision over descending score thresholds, tied scores grouped.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "pr_auc",
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 || total_pos == labels.len() {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Mean and standard deviation of one score term over validation normals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::MissingNormStats);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(MeanStd {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn z(&self, v: f64) -> f64 {
        (v - self.mean) / self.std.max(1e-12)
    }
}

/// Normalization statistics for the three global-score terms, fitted on a
/// held-out normal validation split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mse: MeanStd,
    pub dissim: MeanStd,
    pub max_nll: MeanStd,
}

/// Raw per-image score terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreParts {
    pub mse: f64,
    pub ssim_value: f64,
    pub max_nll: f64,
}

impl ScoreParts {
    pub fn dissim(&self) -> f64 {
        1.0 - self.ssim_value
    }
}

pub fn fit_norm_stats(parts: &[ScoreParts]) -> Result<NormStats> {
    let mses: Vec<f64> = parts.iter().map(|p| p.mse).collect();
    let dis: Vec<f64> = parts.iter().map(|p| p.dissim()).collect();
    let nll: Vec<f64> = parts.iter().map(|p| p.max_nll).collect();
    Ok(NormStats {
        mse: MeanStd::fit(&mses)?,
        dissim: MeanStd::fit(&dis)?,
        max_nll: MeanStd::fit(&nll)?,
    })
}

/// Image-level anomaly score: z-normalized reconstruction terms plus the
/// z-normalized maximum patch NLL, weighted by `alpha`.
pub fn global_score_with_alpha(
    parts: &ScoreParts,
    stats: Option<&NormStats>,
    alpha: f64,
) -> Result<f64> {
    let stats = stats.ok_or(Error::MissingNormStats)?;
    Ok(stats.mse.z(parts.mse) + stats.dissim.z(parts.dissim()) + alpha * stats.max_nll.z(parts.max_nll))
}

pub fn global_score(parts: &ScoreParts, stats: Option<&NormStats>) -> Result<f64> {
    global_score_with_alpha(parts, stats, 1.0)
}

/// Sidecar describing a raw float heatmap file.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RawHeatmapMeta {
    pub height: usize,
    pub width: usize,
}

/// 16-bit binary PGM, min-max normalized per image (flat image when the
/// range is empty). Samples are written most significant byte first.
pub fn write_heatmap_pgm(hm: &Heatmap, path: &Path) -> Result<()> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &hm.values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(hm.values.len() * 2 + 32);
    bytes.extend_from_slice(format!("P5\n{} {}\n65535\n", hm.width, hm.height).as_bytes());
    for &v in &hm.values {
        let q = if span > 0.0 {
            ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_file(path, &bytes)
}

/// Raw little-endian f32 grid plus a JSON sidecar with the dimensions.
pub fn write_heatmap_raw(hm: &Heatmap, raw_path: &Path, meta_path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(hm.values.len() * 4);
    for &v in &hm.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(raw_path, &bytes)?;
    let meta = RawHeatmapMeta {
        height: hm.height,
        width: hm.width,
    };
    write_file(meta_path, serde_json::to_string_pretty(&meta)?.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_patch_scores_give_constant_heatmap() {
        let hm = heatmap_from_patch_scores(&[3.0; 6], (2, 3), (8, 12)).unwrap();
        assert_eq!(hm.height, 8);
        assert_eq!(hm.width, 12);
        assert!(hm.values.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn hot_patch_matches_pointwise_bilinear() {
        // 2x2 grid with one hot patch, upsampled to 4x4
        let scores = [1.0, 0.0, 0.0, 0.0];
        let hm = heatmap_from_patch_scores(&scores, (2, 2), (4, 4)).unwrap();
        let reference = |oy: usize, ox: usize| -> f64 {
            let sy = ((oy as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
            let sx = ((ox as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
            // value field is (1-sy)*(1-sx) for the hot corner
            (1.0 - sy) * (1.0 - sx)
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let want = reference(oy, ox);
                let got = hm.values[oy * 4 + ox];
                assert!((got - want).abs() < 1e-12, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn upsample_preserves_bounds() {
        let scores = [0.1, 0.9, -0.4, 0.5, 0.2, 0.0];
        let hm = heatmap_from_patch_scores(&scores, (2, 3), (17, 23)).unwrap();
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &v in &hm.values {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn eight_connectivity_links_diagonals() {
        let mask = BinaryMask::new(
            3,
            3,
            vec![true, false, false, false, true, false, false, false, true],
        )
        .unwrap();
        assert_eq!(connected_regions(&mask).len(), 1);
        let mask4 = BinaryMask::new(2, 3, vec![true, false, true, false, false, false]).unwrap();
        assert_eq!(connected_regions(&mask4).len(), 2);
    }

    #[test]
    fn perfect_heatmap_scores_full_pro() {
        let mask = BinaryMask::new(4, 4, (0..16).map(|i| i == 5 || i == 6).collect()).unwrap();
        let hm = Heatmap {
            values: mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            height: 4,
            width: 4,
            grid_rows: 4,
            grid_cols: 4,
        };
        let curve = pro_score(&[hm], &[mask], 0.3, 200).unwrap();
        assert!((curve.capped_auc - 1.0).abs() < 1e-12, "{}", curve.capped_auc);
    }

    #[test]
    fn pro_requires_an_anomalous_region() {
        let mask = BinaryMask::new(2, 2, vec![false; 4]).unwrap();
        let hm = Heatmap {
            values: vec![0.0; 4],
            height: 2,
            width: 2,
            grid_rows: 2,
            grid_cols: 2,
        };
        assert!(pro_score(&[hm], &[mask], 0.3, 10).is_err());
    }

    #[test]
    fn pro_points_are_strictly_increasing_in_fpr() {
        let mask = BinaryMask::new(4, 4, (0..16).map(|i| i < 3).collect()).unwrap();
        let hm = Heatmap {
            values: (0..16).map(|i| (i % 7) as f64).collect(),
            height: 4,
            width: 4,
            grid_rows: 4,
            grid_cols: 4,
        };
        let curve = pro_score(&[hm], &[mask], 0.3, 50).unwrap();
        for pair in curve.points.windows(2) {
            assert!(pair[1].0 > pair[0].0);
        }
        assert!(curve.points.iter().all(|&(f, o)| (0.0..=0.3 + 1e-12).contains(&f)
            && (0.0..=1.0).contains(&o)));
        assert!((0.0..=1.0).contains(&curve.capped_auc));
    }

    #[test]
    fn roc_perfect_separation() {
        let auc = roc_auc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn roc_pairwise_three_quarters() {
        let auc = roc_auc(&[0.9, 0.2, 0.5, 0.1], &[true, true, false, false]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roc_all_ties_is_half() {
        let auc = roc_auc(&[0.4; 6], &[true, false, true, false, true, false]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn roc_rejects_single_class() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn pr_auc_perfect_is_one() {
        let ap = pr_auc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_maps_mean_to_zero() {
        let stats = MeanStd::fit(&[1.0, 2.0, 3.0]).unwrap();
        assert!((stats.z(2.0)).abs() < 1e-12);
    }

    #[test]
    fn global_score_monotone_in_max_nll() {
        let parts: Vec<ScoreParts> = (0..10)
            .map(|i| ScoreParts {
                mse: 0.1 + 0.01 * i as f64,
                ssim_value: 0.9 - 0.01 * i as f64,
                max_nll: 1.0 + 0.1 * i as f64,
            })
            .collect();
        let stats = fit_norm_stats(&parts).unwrap();
        let lo = ScoreParts {
            mse: 0.15,
            ssim_value: 0.85,
            max_nll: 1.2,
        };
        let hi = ScoreParts {
            max_nll: 1.9,
            ..lo
        };
        let a = global_score(&lo, Some(&stats)).unwrap();
        let b = global_score(&hi, Some(&stats)).unwrap();
        assert!(b > a);
        assert!(global_score(&lo, None).is_err());
    }

    #[test]
    fn pgm_quantization_error_is_bounded() {
        let dir = std::env::temp_dir().join("vtadl_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("hm.pgm");
        let hm = Heatmap {
            values: (0..64).map(|i| (i as f64 * 0.37).sin()).collect(),
            height: 8,
            width: 8,
            grid_rows: 2,
            grid_cols: 2,
        };
        write_heatmap_pgm(&hm, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n8 8\n65535\n";
        assert!(bytes.starts_with(header));
        let lo = hm.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = hm.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let samples = &bytes[header.len()..];
        for (i, &v) in hm.values.iter().enumerate() {
            let q = u16::from_be_bytes([samples[2 * i], samples[2 * i + 1]]) as f64 / 65535.0;
            let normalized = (v - lo) / (hi - lo);
            assert!((q - normalized).abs() <= 1.0 / 65535.0);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
