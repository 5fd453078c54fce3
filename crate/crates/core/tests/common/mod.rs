//! Independent oracles shared by the integration suites. These re-derive
//! expected values by brute force and never touch the implementation paths
//! they check.

#![allow(dead_code)]

use vtadl_core::metrics::{connected_regions, BinaryMask, Heatmap};

/// Region-overlap curve by exhaustive sweep over every distinct pooled
/// value, trapezoid-integrated to the cap. Same curve convention as the
/// library: an implicit (0, 0) start, best overlap per distinct fpr, and
/// linear interpolation exactly at the cap.
pub fn pro_oracle(heatmaps: &[Heatmap], masks: &[BinaryMask], cap: f64) -> f64 {
    let mut regions: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, mask) in masks.iter().enumerate() {
        for region in connected_regions(mask) {
            regions.push((i, region));
        }
    }
    assert!(!regions.is_empty());
    let mut thresholds: Vec<f64> = heatmaps
        .iter()
        .flat_map(|h| h.values.iter().copied())
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.reverse();

    let total_normal: usize = masks
        .iter()
        .map(|m| m.data.iter().filter(|&&b| !b).count())
        .sum();

    let mut points = vec![(0.0f64, 0.0f64)];
    for &t in &thresholds {
        let mut fp = 0usize;
        for (hm, mask) in heatmaps.iter().zip(masks) {
            for (p, &anom) in mask.data.iter().enumerate() {
                if !anom && hm.values[p] >= t {
                    fp += 1;
                }
            }
        }
        let fpr = fp as f64 / total_normal as f64;
        let mut overlap_sum = 0.0;
        for (img, region) in &regions {
            let hit = region
                .iter()
                .filter(|&&p| heatmaps[*img].values[p] >= t)
                .count();
            overlap_sum += hit as f64 / region.len() as f64;
        }
        let overlap = overlap_sum / regions.len() as f64;
        points.push((fpr, overlap));
        if fpr >= cap {
            break;
        }
    }

    // best overlap per distinct fpr
    let mut dedup: Vec<(f64, f64)> = Vec::new();
    for (f, o) in points {
        match dedup.last_mut() {
            Some((lf, lo)) if *lf == f => *lo = lo.max(o),
            _ => dedup.push((f, o)),
        }
    }
    let mut area = 0.0;
    let mut last = dedup[0];
    let mut reached = last.0 >= cap;
    for &(f, o) in &dedup[1..] {
        if f <= cap {
            area += (f - last.0) * (last.1 + o) / 2.0;
            last = (f, o);
        } else {
            let w = cap - last.0;
            let oc = last.1 + (o - last.1) * w / (f - last.0);
            area += w * (last.1 + oc) / 2.0;
            last = (cap, oc);
            reached = true;
            break;
        }
        if f >= cap {
            reached = true;
        }
    }
    if !reached && last.0 < cap {
        area += (cap - last.0) * last.1;
    }
    area / cap
}

/// Probability estimate by direct pairwise comparison, ties worth half.
pub fn roc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random instance for the metric oracle suite: a 16x16 heatmap with a few
/// rectangular anomalous regions.
pub fn random_instance(
    rng: &mut impl rand::Rng,
    distinct_levels: usize,
) -> (Heatmap, BinaryMask) {
    let (h, w) = (16usize, 16usize);
    let values: Vec<f64> = (0..h * w)
        .map(|_| (rng.gen_range(0..distinct_levels) as f64) / distinct_levels as f64)
        .collect();
    let mut mask = vec![false; h * w];
    let n_regions = rng.gen_range(1..=3usize);
    for _ in 0..n_regions {
        let rh = rng.gen_range(2..5usize);
        let rw = rng.gen_range(2..5usize);
        let y0 = rng.gen_range(0..h - rh);
        let x0 = rng.gen_range(0..w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                mask[y * w + x] = true;
            }
        }
    }
    (
        Heatmap {
            values,
            height: h,
            width: w,
            grid_rows: h,
            grid_cols: w,
        },
        BinaryMask::new(h, w, mask).unwrap(),
    )
}
