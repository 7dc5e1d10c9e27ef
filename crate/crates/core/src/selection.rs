//! Feature selection: Higher Criticism thresholding, the fixed
//! `sqrt(2 log p)` chi-square threshold, and top-m selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ChiSquareScores;

/// Denominator used in the HC curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HcVariant {
    /// `sqrt(max{sqrt(n)(j/p - pi_(j)), 0} + j/p)`.
    #[default]
    AsPrinted,
    /// `sqrt(j/p (1 - j/p))`.
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionOrigin {
    Hct,
    FixedChi2,
    TopM,
}

/// Sorted 0-based feature indices plus where they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub indices: Vec<usize>,
    pub origin: SelectionOrigin,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// p-values in ascending order.
    pub sorted_pvalues: Vec<f64>,
    /// Feature index of each entry of `sorted_pvalues`.
    pub order: Vec<usize>,
    /// `hc_curve[j - 1]` is the HC score at rank `j`; NaN where undefined.
    pub hc_curve: Vec<f64>,
    /// 1-based rank of the HC maximum, absent when the constraint set is empty.
    pub j_hat: Option<usize>,
    pub threshold: f64,
    pub retained: Vec<usize>,
    pub fallback_used: bool,
}

impl SelectionResult {
    pub fn feature_set(&self) -> FeatureSet {
        FeatureSet {
            indices: self.retained.clone(),
            origin: SelectionOrigin::Hct,
        }
    }
}

fn hc_score(p: usize, n: usize, j: usize, pj: f64, variant: HcVariant) -> f64 {
    let frac = j as f64 / p as f64;
    let gap = frac - pj;
    let denom = match variant {
        HcVariant::AsPrinted => ((n as f64).sqrt() * gap).max(0.0) + frac,
        HcVariant::Binomial => frac * (1.0 - frac),
    };
    if denom > 0.0 {
        (p as f64).sqrt() * gap / denom.sqrt()
    } else {
        f64::NAN
    }
}

/// Higher Criticism threshold over `pvalues` for sample size `n`.
///
/// The maximum is taken over ranks `j` with `pi_(j) > log(p)/p` and `j < p/2`
/// (smallest `j` wins ties). When that set is empty, or its best score is not
/// positive, only the smallest p-value is kept and `fallback_used` is set.
pub fn hct(pvalues: &[f64], n: usize, variant: HcVariant) -> Result<SelectionResult> {
    let p = pvalues.len();
    if p < 2 {
        return Err(Error::InvalidArgument(format!("HCT needs at least 2 p-values, got {p}")));
    }
    if let Some(bad) = pvalues.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("p-value {bad} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| pvalues[i]).collect();
    let hc_curve: Vec<f64> = sorted
        .iter()
        .enumerate()
        .map(|(i, &pj)| hc_score(p, n, i + 1, pj, variant))
        .collect();

    let floor = (p as f64).ln() / p as f64;
    let last_rank = p.div_ceil(2) - 1;
    let mut best: Option<(usize, f64)> = None;
    for j in 1..=last_rank {
        let pj = sorted[j - 1];
        let hc = hc_curve[j - 1];
        if pj > floor && hc.is_finite() && best.is_none_or(|(_, b)| hc > b) {
            best = Some((j, hc));
        }
    }
    let (j_hat, threshold, fallback_used) = match best {
        Some((j, hc)) if hc > 0.0 => (Some(j), sorted[j - 1], false),
        _ => (None, sorted[0], true),
    };
    let retained: Vec<usize> = (0..p).filter(|&i| pvalues[i] <= threshold).collect();
    Ok(SelectionResult {
        sorted_pvalues: sorted,
        order,
        hc_curve,
        j_hat,
        threshold,
        retained,
        fallback_used,
    })
}

/// Threshold `sqrt(2 log p)` used by the simplified IF step.
pub fn chi2_threshold(p: f64) -> f64 {
    (2.0 * p.ln()).sqrt()
}

/// Keep features with `psi_j >= sqrt(2 log p)`. May be empty.
pub fn fixed_threshold_select(chi2: &ChiSquareScores, p: f64) -> FeatureSet {
    let t = chi2_threshold(p);
    FeatureSet {
        indices: chi2
            .scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s >= t)
            .map(|(j, _)| j)
            .collect(),
        origin: SelectionOrigin::FixedChi2,
    }
}

/// The `m` largest scores; ties go to the smaller index.
pub fn top_m_select(scores: &[f64], m: usize) -> Result<FeatureSet> {
    if m == 0 || m > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "m = {m} outside 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut indices = order[..m].to_vec();
    indices.sort_unstable();
    Ok(FeatureSet {
        indices,
        origin: SelectionOrigin::TopM,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_constraint_set_falls_back() {
        let pv = [0.7, 0.001, 0.9, 0.2, 0.5];
        let r = hct(&pv, 100, HcVariant::AsPrinted).unwrap();
        assert!(r.fallback_used);
        assert_eq!(r.j_hat, None);
        assert_eq!(r.retained, vec![1]);
        assert_eq!(r.sorted_pvalues, vec![0.001, 0.2, 0.5, 0.7, 0.9]);
    }

    #[test]
    fn all_ones_curve_is_nonpositive() {
        let r = hct(&[1.0; 10], 50, HcVariant::AsPrinted).unwrap();
        assert!(r.hc_curve.iter().all(|h| h.is_nan() || *h <= 0.0));
        assert!(r.fallback_used);
    }

    #[test]
    fn hc_formula_by_hand() {
        // p = 4, n = 9, rank 1 p-value 0.05: gap = 0.2, denom = 3*0.2 + 0.25.
        let r = hct(&[0.05, 0.6, 0.7, 0.8], 9, HcVariant::AsPrinted).unwrap();
        let expect = 2.0 * 0.2 / (0.85_f64).sqrt();
        assert!((r.hc_curve[0] - expect).abs() < 1e-12);
        // log(4)/4 = 0.3466 > 0.05, and only rank 1 is < p/2: fallback.
        assert!(r.fallback_used);
    }

    #[test]
    fn argmax_ties_take_smallest_rank() {
        let p = 20;
        let mut pv = vec![0.9; p];
        for v in pv.iter_mut().take(8) {
            *v = 0.16;
        }
        let r = hct(&pv, 1, HcVariant::AsPrinted).unwrap();
        let j = r.j_hat.unwrap();
        let best = r.hc_curve[j - 1];
        for jj in 1..j {
            if r.sorted_pvalues[jj - 1] > (p as f64).ln() / p as f64 {
                assert!(r.hc_curve[jj - 1] < best);
            }
        }
        for jj in j..p / 2 {
            assert!(r.hc_curve[jj - 1] <= best);
        }
    }

    #[test]
    fn retained_matches_threshold() {
        let pv: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64 / 200.0 + 0.001).collect();
        let r = hct(&pv, 30, HcVariant::AsPrinted).unwrap();
        let expect: Vec<usize> = (0..200).filter(|&i| pv[i] <= r.threshold).collect();
        assert_eq!(r.retained, expect);
        if let Some(j) = r.j_hat {
            assert!(r.sorted_pvalues[j - 1] > (200f64).ln() / 200.0);
            assert!(j < 100);
        }
    }

    #[test]
    fn rejects_bad_pvalues() {
        assert!(hct(&[0.5], 10, HcVariant::AsPrinted).is_err());
        assert!(hct(&[0.5, 1.5], 10, HcVariant::AsPrinted).is_err());
    }

    #[test]
    fn fixed_threshold_keeps_boundary() {
        let chi = ChiSquareScores {
            scores: vec![1.9, 2.0, 2.1],
            n: 10,
        };
        let s = fixed_threshold_select(&chi, std::f64::consts::E.powi(2));
        assert_eq!(s.indices, vec![1, 2]);
        let neg = ChiSquareScores {
            scores: vec![-1.0, -0.5],
            n: 10,
        };
        assert!(fixed_threshold_select(&neg, 100.0).is_empty());
    }

    #[test]
    fn top_m_examples() {
        assert_eq!(top_m_select(&[3.0, 1.0, 2.0], 2).unwrap().indices, vec![0, 2]);
        assert_eq!(top_m_select(&[3.0, 1.0, 2.0], 3).unwrap().indices, vec![0, 1, 2]);
        assert_eq!(top_m_select(&[2.0, 2.0, 1.0], 1).unwrap().indices, vec![0]);
        assert!(top_m_select(&[1.0], 0).is_err());
        assert!(top_m_select(&[1.0], 2).is_err());
    }
}
