//! Retrieval evaluation: cosine distances, CMC and mean average precision,
//! multi-trial summaries.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `1 - a·b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_distance", format!("lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine distance of a zero vector".into()));
    }
    // One square root of the product keeps `a == b` at exactly 0.
    Ok((1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0))
}

/// Probe and gallery descriptors (`[P, d]` and `[G, d]`) with identity and
/// camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub probe: Tensor,
    pub probe_ids: Vec<usize>,
    pub probe_cams: Vec<usize>,
    pub gallery: Tensor,
    pub gallery_ids: Vec<usize>,
    pub gallery_cams: Vec<usize>,
    /// Require every probe identity to occur in the gallery. When false,
    /// probes without a match are left out of the scores.
    pub strict: bool,
}

impl EvalSet {
    pub fn validate(&self) -> Result<()> {
        let (ps, gs) = (self.probe.shape(), self.gallery.shape());
        if ps.len() != 2 || gs.len() != 2 || ps[1] != gs[1] {
            return Err(Error::shape("eval", format!("probe {ps:?} vs gallery {gs:?}")));
        }
        if self.probe_ids.len() != ps[0] || self.probe_cams.len() != ps[0] {
            return Err(Error::shape("eval", "probe labels do not match probe count"));
        }
        if self.gallery_ids.len() != gs[0] || self.gallery_cams.len() != gs[0] {
            return Err(Error::shape("eval", "gallery labels do not match gallery count"));
        }
        Ok(())
    }

    /// Cosine distances `[P, G]`.
    pub fn distances(&self) -> Result<Tensor> {
        self.validate()?;
        let d = self.probe.shape()[1];
        let (p, g) = (self.probe.shape()[0], self.gallery.shape()[0]);
        let rows: Vec<Vec<f64>> = (0..p)
            .into_par_iter()
            .map(|i| {
                let a = &self.probe.data()[i * d..(i + 1) * d];
                (0..g)
                    .map(|j| cosine_distance(a, &self.gallery.data()[j * d..(j + 1) * d]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Tensor::new([p, g], rows.concat())
    }
}

/// CMC curve over ranks `1..=G` and mean average precision.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcResult {
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl CmcResult {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }
}

/// Gallery indices sorted by ascending distance, ties by index.
pub fn ranking(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// Scores a precomputed `[P, G]` distance matrix.
pub fn score_distances(
    distances: &Tensor,
    probe_ids: &[usize],
    gallery_ids: &[usize],
    strict: bool,
) -> Result<CmcResult> {
    let [p, g] = *distances.shape() else {
        return Err(Error::shape("score_distances", format!("expected [P, G], got {:?}", distances.shape())));
    };
    if probe_ids.len() != p || gallery_ids.len() != g {
        return Err(Error::shape("score_distances", "label counts do not match the matrix"));
    }
    let mut hits = vec![0usize; g];
    let mut ap_sum = 0.0;
    let mut scored = 0usize;
    for (i, &id) in probe_ids.iter().enumerate() {
        let order = ranking(&distances.data()[i * g..(i + 1) * g]);
        let matches: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|&(_, &j)| gallery_ids[j] == id)
            .map(|(rank, _)| rank)
            .collect();
        let Some(&first) = matches.first() else {
            if strict {
                return Err(Error::InvalidArgument(format!("probe {i} (identity {id}) has no gallery match")));
            }
            continue;
        };
        scored += 1;
        hits[first] += 1;
        let precision: f64 = matches.iter().enumerate().map(|(k, &rank)| (k + 1) as f64 / (rank + 1) as f64).sum();
        ap_sum += precision / matches.len() as f64;
    }
    if scored == 0 {
        return Err(Error::InvalidArgument("no probe has a gallery match".into()));
    }
    let mut cmc = Vec::with_capacity(g);
    let mut cumulative = 0;
    for h in hits {
        cumulative += h;
        cmc.push(cumulative as f64 / scored as f64);
    }
    Ok(CmcResult {
        cmc,
        map: ap_sum / scored as f64,
    })
}

/// Ranks the gallery for every probe by cosine distance and scores it.
pub fn rank_and_score(set: &EvalSet) -> Result<CmcResult> {
    let d = set.distances()?;
    score_distances(&d, &set.probe_ids, &set.gallery_ids, set.strict)
}

/// Mean and sample standard deviation over trials.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSummary {
    pub mean: CmcResult,
    pub cmc_std: Vec<f64>,
    pub map_std: f64,
    pub trials: usize,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let std = if n > 1.0 {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

pub fn multi_trial(results: &[CmcResult]) -> Result<TrialSummary> {
    let Some(first) = results.first() else {
        return Err(Error::InvalidArgument("no trials to summarize".into()));
    };
    let ranks = first.cmc.len();
    if results.iter().any(|r| r.cmc.len() != ranks) {
        return Err(Error::InvalidArgument("trials have different gallery sizes".into()));
    }
    let (mut cmc, mut cmc_std) = (Vec::with_capacity(ranks), Vec::with_capacity(ranks));
    for r in 0..ranks {
        let (m, s) = mean_std(results.iter().map(|x| x.cmc[r]));
        cmc.push(m);
        cmc_std.push(s);
    }
    let (map, map_std) = mean_std(results.iter().map(|x| x.map));
    Ok(TrialSummary {
        mean: CmcResult { cmc, map },
        cmc_std,
        map_std,
        trials: results.len(),
    })
}

/// `rank<TAB>cmc` lines followed by `mAP<TAB>value`.
pub fn format_summary(result: &CmcResult) -> String {
    let mut out = String::new();
    for (r, v) in result.cmc.iter().enumerate() {
        let _ = writeln!(out, "{}\t{v:.16e}", r + 1);
    }
    let _ = writeln!(out, "mAP\t{:.16e}", result.map);
    out
}

/// Distance matrix as CSV, one probe per row.
pub fn format_distance_csv(distances: &Tensor) -> String {
    let g = distances.shape()[1];
    let mut out = String::new();
    for row in distances.data().chunks(g) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_special_cases() {
        assert_eq!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), 2.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn correct_match_second() {
        let d = Tensor::new([1, 2], vec![0.1, 0.5]).unwrap();
        let r = score_distances(&d, &[7], &[3, 7], true).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0]);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn perfect_ranking() {
        let d = Tensor::new([2, 3], vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.5]).unwrap();
        let r = score_distances(&d, &[0, 1], &[0, 1, 2], true).unwrap();
        assert_eq!(r.cmc, vec![1.0; 3]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(ranking(&[0.5, 0.2, 0.5, 0.2]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn missing_identity_strictness() {
        let d = Tensor::new([2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(score_distances(&d, &[0, 5], &[0, 1], true).is_err());
        let r = score_distances(&d, &[0, 5], &[0, 1], false).unwrap();
        assert_eq!(r.cmc, vec![1.0, 1.0]);
    }

    #[test]
    fn multi_trial_statistics() {
        let a = CmcResult { cmc: vec![1.0, 1.0], map: 1.0 };
        let b = CmcResult { cmc: vec![0.0, 1.0], map: 0.5 };
        let s = multi_trial(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(s.cmc_std, vec![0.0, 0.0]);
        let s = multi_trial(&[a, b]).unwrap();
        assert_eq!(s.mean.cmc, vec![0.5, 1.0]);
        assert!((s.cmc_std[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(multi_trial(&[]).is_err());
    }

    #[test]
    fn summary_format() {
        let r = CmcResult { cmc: vec![0.5, 1.0], map: 0.75 };
        let text = format_summary(&r);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("1\t5.0"));
        assert!(lines[2].starts_with("mAP\t7.5"));
        let back: f64 = lines[2].split('\t').nth(1).unwrap().parse().unwrap();
        assert_eq!(back, 0.75);
    }
}
