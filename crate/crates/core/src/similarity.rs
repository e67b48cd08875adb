//! Agreement metrics between two saliency masks.

use serde::Serialize;

use crate::error::{Error, Result};

/// Fraction of pixels kept for the top-pixel overlap.
pub const TOP_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Similarity {
    /// `None` when either mask is constant.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Jaccard index of the `top_k` highest pixels of each mask.
    pub top5_jaccard: f64,
    pub top_k: usize,
    pub pixels: usize,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Indices of the `k` largest values; ties go to the lower index.
fn top_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
    order.truncate(k);
    order.sort_unstable();
    order
}

pub fn compare_masks(a: &[f64], b: &[f64]) -> Result<Similarity> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "masks of {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("compare_masks"));
    }
    let n = a.len();
    let top_k = ((TOP_FRACTION * n as f64).ceil() as usize).clamp(1, n);
    let (ta, tb) = (top_indices(a, top_k), top_indices(b, top_k));
    let common = ta.iter().filter(|i| tb.binary_search(i).is_ok()).count();
    Ok(Similarity {
        pearson: pearson(a, b),
        spearman: pearson(&average_ranks(a), &average_ranks(b)),
        top5_jaccard: common as f64 / (2 * top_k - common) as f64,
        top_k,
        pixels: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks() {
        let a: Vec<f64> = (0..40).map(|i| ((i * 7) % 13) as f64).collect();
        let s = compare_masks(&a, &a).unwrap();
        assert_eq!(s.pearson, Some(1.0));
        assert_eq!(s.spearman, Some(1.0));
        assert_eq!(s.top5_jaccard, 1.0);
        assert_eq!(s.top_k, 2);
    }

    #[test]
    fn negated_mask() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        let s = compare_masks(&a, &b).unwrap();
        assert!((s.pearson.unwrap() + 1.0).abs() < 1e-12);
        assert!((s.spearman.unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(s.top5_jaccard, 0.0);
    }

    #[test]
    fn constant_mask_has_no_correlation() {
        let s = compare_masks(&[0.0; 9], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        assert_eq!(s.pearson, None);
        assert_eq!(s.spearman, None);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"pearson\":null"));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_is_rank_based() {
        // Monotone but nonlinear: Spearman 1, Pearson below 1.
        let a: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v.powi(4)).collect();
        let s = compare_masks(&a, &b).unwrap();
        assert_eq!(s.spearman, Some(1.0));
        assert!(s.pearson.unwrap() < 0.99);
    }

    #[test]
    fn rejects_mismatch() {
        assert!(compare_masks(&[1.0], &[1.0, 2.0]).is_err());
        assert!(compare_masks(&[], &[]).is_err());
    }
}
