//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

/// Mean as the first value plus the Neumaier-compensated mean of the
/// deviations from it, the reduction every mean is defined with.
pub fn mean(values: &[f64]) -> f64 {
    let first = values[0];
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in values {
        let v = x - first;
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    first + (sum + comp) / values.len() as f64
}

/// Euclidean distance, squared differences summed in index order.
pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

/// Mean over anchors of the largest hinge over every (positive, negative)
/// pair, enumerated exhaustively.
pub fn triplet(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let mut terms = Vec::new();
    for a in 0..rows.len() {
        let mut worst = 0.0f64;
        for p in 0..rows.len() {
            if labels[p] != labels[a] {
                continue;
            }
            for n in 0..rows.len() {
                if labels[n] == labels[a] {
                    continue;
                }
                let term = margin + euclid(&rows[a], &rows[p]) - euclid(&rows[a], &rows[n]);
                worst = worst.max(term);
            }
        }
        terms.push(worst);
    }
    mean(&terms)
}

/// Part loss of a `[B, C, T, H, W]` volume: strip `h` describes item `b`
/// by the mean over frames and columns of each channel, and the strip
/// losses are averaged.
pub fn part_loss(volume: &[f64], shape: [usize; 5], labels: &[usize], margin: f64) -> f64 {
    let [b, c, t, h, w] = shape;
    let at = |bi: usize, ci: usize, ti: usize, hi: usize, wi: usize| volume[(((bi * c + ci) * t + ti) * h + hi) * w + wi];
    let mut strips = Vec::new();
    for hi in 0..h {
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|bi| {
                (0..c)
                    .map(|ci| {
                        let cells = (0..t).flat_map(|ti| (0..w).map(move |wi| (ti, wi)));
                        mean(&cells.map(|(ti, wi)| at(bi, ci, ti, hi, wi)).collect::<Vec<_>>())
                    })
                    .collect()
            })
            .collect();
        strips.push(triplet(&rows, labels, margin));
    }
    mean(&strips)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0)
}

/// CMC curve and mAP from a distance matrix. The position of gallery item
/// `j` is the number of items strictly closer plus the equally distant ones
/// with a lower index. Probes without a true match are left out.
pub fn cmc_map(dist: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> (Vec<f64>, f64) {
    let g = gallery_ids.len();
    let mut first_hits = Vec::new();
    let mut ap_sum = 0.0;
    for (i, row) in dist.iter().enumerate() {
        let position = |j: usize| (0..g).filter(|&k| row[k] < row[j] || (row[k] == row[j] && k < j)).count();
        let mut ranks: Vec<usize> = (0..g).filter(|&j| gallery_ids[j] == probe_ids[i]).map(position).collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort_unstable();
        first_hits.push(ranks[0]);
        let mut precision = 0.0;
        for (k, &r) in ranks.iter().enumerate() {
            precision += (k + 1) as f64 / (r + 1) as f64;
        }
        ap_sum += precision / ranks.len() as f64;
    }
    let scored = first_hits.len();
    let cmc = (0..g)
        .map(|k| first_hits.iter().filter(|&&f| f <= k).count() as f64 / scored as f64)
        .collect();
    (cmc, ap_sum / scored as f64)
}
