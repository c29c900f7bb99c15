//! Representation self-calibration.
//!
//! Each modality feature `h` is decomposed into `n` components. Every component
//! is scored by the conformal predictor through the modality's unimodal head,
//! and the `K` most reliable are averaged into `h̃`. A KL penalty keeps the
//! components close to `h` and apart from each other.

use serde::Serialize;

use crate::conformal::{nonconformity, ConformalState};
use crate::error::{dim_err, CpscError, Result};
use crate::model::CpscModel;
use crate::numeric::{kl_softmax, l2_norm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityLossTerms {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Mean of `KL(P(h) ‖ P(c_k))`.
    pub consistency: f64,
    /// Mean of `KL(P(c_i) ‖ P(c_j))` over ordered pairs `i ≠ j`.
    pub diversity: f64,
    pub total: f64,
}

fn check_components(h: &[f64], components: &[Vec<f64>]) -> Result<()> {
    if components.len() < 2 {
        return Err(CpscError::Config(format!(
            "diversity loss needs at least 2 components, got {}",
            components.len()
        )));
    }
    if let Some(c) = components.iter().find(|c| c.len() != h.len()) {
        return Err(dim_err(format!("component width {} vs feature width {}", c.len(), h.len())));
    }
    Ok(())
}

pub fn diversity_loss(h: &[f64], components: &[Vec<f64>], lambda1: f64, lambda2: f64) -> Result<DiversityLossTerms> {
    check_components(h, components)?;
    let n = components.len() as f64;
    let mut consistency = 0.0;
    for c in components {
        consistency += kl_softmax(h, c)?.0;
    }
    consistency /= n;
    let mut diversity = 0.0;
    for (i, ci) in components.iter().enumerate() {
        for (j, cj) in components.iter().enumerate() {
            if i != j {
                diversity += kl_softmax(ci, cj)?.0;
            }
        }
    }
    diversity /= n * (n - 1.0);
    Ok(DiversityLossTerms {
        lambda1,
        lambda2,
        consistency,
        diversity,
        total: lambda1 * consistency - lambda2 * diversity,
    })
}

/// Gradients of `diversity_loss(..).total` w.r.t. `h` and each component.
pub fn diversity_loss_grad(
    h: &[f64],
    components: &[Vec<f64>],
    lambda1: f64,
    lambda2: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_components(h, components)?;
    let n = components.len();
    let d = h.len();
    let mut dh = vec![0.0; d];
    let mut dc = vec![vec![0.0; d]; n];
    let w_cons = lambda1 / n as f64;
    let w_div = -lambda2 / (n * (n - 1)) as f64;
    if w_cons != 0.0 {
        for (k, c) in components.iter().enumerate() {
            let (_, ga, gb) = kl_softmax(h, c)?;
            for t in 0..d {
                dh[t] += w_cons * ga[t];
                dc[k][t] += w_cons * gb[t];
            }
        }
    }
    if w_div != 0.0 {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (_, ga, gb) = kl_softmax(&components[i], &components[j])?;
                for t in 0..d {
                    dc[i][t] += w_div * ga[t];
                    dc[j][t] += w_div * gb[t];
                }
            }
        }
    }
    Ok((dh, dc))
}

/// Component-wise mean of `components[k]` for `k ∈ selected`.
pub fn mean_of(components: &[Vec<f64>], selected: &[usize]) -> Vec<f64> {
    let d = components.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for &k in selected {
        for (o, v) in out.iter_mut().zip(&components[k]) {
            *o += v;
        }
    }
    let scale = 1.0 / selected.len() as f64;
    out.iter_mut().for_each(|o| *o *= scale);
    out
}

/// Indices of the `k` largest values, larger value first, ties to the
/// smaller index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Top-`k` selection by reliability and the mean of the selected components.
pub fn reconstruct_topk(components: &[Vec<f64>], reliability: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if reliability.len() != components.len() {
        return Err(dim_err(format!(
            "{} reliability scores for {} components",
            reliability.len(),
            components.len()
        )));
    }
    if k == 0 || k > components.len() {
        return Err(CpscError::Config(format!(
            "top_k must be in 1..={}, got {k}",
            components.len()
        )));
    }
    let selected = top_k_indices(reliability, k);
    Ok((mean_of(components, &selected), selected))
}

/// Conformal reliability of each component w.r.t. `label`.
pub fn score_components(
    model: &CpscModel,
    conformal: Option<&ConformalState>,
    m: usize,
    components: &[Vec<f64>],
    label: usize,
) -> Result<Vec<f64>> {
    let cp = conformal.ok_or_else(|| CpscError::Calibration("conformal predictor not calibrated".into()))?;
    components
        .iter()
        .map(|c| {
            let probs = model.unimodal_predict(m, c)?;
            if label >= probs.len() {
                return Err(CpscError::Index {
                    index: label,
                    len: probs.len(),
                });
            }
            Ok(cp.rank_reliability(&probs, label))
        })
        .collect()
}

/// Scored components of one modality of one sample with the chosen subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub modality: usize,
    pub reliability: Vec<f64>,
    pub selected: Vec<usize>,
    /// True when every reliability was zero and the selection fell back to
    /// the lowest nonconformity for the label.
    pub fallback: bool,
}

/// Scores the components and picks `k` of them. When no component places the
/// label inside its prediction set, the `k` with the lowest nonconformity for
/// the label are taken instead.
pub fn select_components(
    model: &CpscModel,
    conformal: Option<&ConformalState>,
    m: usize,
    components: &[Vec<f64>],
    label: usize,
    k: usize,
) -> Result<ComponentSet> {
    let reliability = score_components(model, conformal, m, components, label)?;
    if k == components.len() {
        return Ok(ComponentSet {
            modality: m,
            selected: (0..k).collect(),
            reliability,
            fallback: false,
        });
    }
    if reliability.iter().all(|&r| r == 0.0) {
        let conformity = components
            .iter()
            .map(|c| Ok(-nonconformity(&model.unimodal_predict(m, c)?, label)?))
            .collect::<Result<Vec<f64>>>()?;
        return Ok(ComponentSet {
            modality: m,
            selected: top_k_indices(&conformity, k),
            reliability,
            fallback: true,
        });
    }
    Ok(ComponentSet {
        modality: m,
        selected: top_k_indices(&reliability, k),
        reliability,
        fallback: false,
    })
}

/// Deviation of the selected mean from a reference feature next to the mean
/// deviation of the selected components themselves; `lhs ≤ rhs` always holds.
pub fn reconstruction_bound(components: &[Vec<f64>], selected: &[usize], h_star: &[f64]) -> Result<(f64, f64)> {
    if selected.is_empty() {
        return Err(CpscError::Config("empty selection".into()));
    }
    if let Some(&k) = selected.iter().find(|&&k| k >= components.len()) {
        return Err(CpscError::Index {
            index: k,
            len: components.len(),
        });
    }
    if components.iter().any(|c| c.len() != h_star.len()) {
        return Err(dim_err("component and reference widths differ"));
    }
    let mean = mean_of(components, selected);
    let dev = |v: &[f64]| l2_norm(&v.iter().zip(h_star).map(|(a, b)| a - b).collect::<Vec<_>>());
    let lhs = dev(&mean);
    let rhs = selected.iter().map(|&k| dev(&components[k])).sum::<f64>() / selected.len() as f64;
    Ok((lhs, rhs))
}

/// Fixed-width histogram of reliability values on `[0, 1]`, one per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityHistogram {
    bins: usize,
    counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub epoch: usize,
    pub modality: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
}

impl ReliabilityHistogram {
    pub fn new(modalities: usize, bins: usize) -> Self {
        Self {
            bins,
            counts: vec![vec![0; bins]; modalities],
        }
    }

    pub fn record(&mut self, modality: usize, value: f64) {
        let b = ((value * self.bins as f64).floor() as usize).min(self.bins - 1);
        self.counts[modality][b] += 1;
    }

    pub fn counts(&self, modality: usize) -> &[u64] {
        &self.counts[modality]
    }

    pub fn rows(&self, epoch: usize) -> Vec<HistogramRow> {
        let width = 1.0 / self.bins as f64;
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(m, counts)| {
                counts.iter().enumerate().map(move |(b, &count)| HistogramRow {
                    epoch,
                    modality: m,
                    bin_lo: b as f64 * width,
                    bin_hi: (b + 1) as f64 * width,
                    count,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numeric::{kl_div, softmax, Tensor2D};
    use proptest::prelude::*;

    fn scalar_kl(a: &[f64], b: &[f64]) -> f64 {
        // Independent of the log-domain path: plain probabilities and logs.
        let ea: Vec<f64> = a.iter().map(|x| x.exp()).collect();
        let eb: Vec<f64> = b.iter().map(|x| x.exp()).collect();
        let sa: f64 = ea.iter().sum();
        let sb: f64 = eb.iter().sum();
        ea.iter()
            .zip(&eb)
            .map(|(x, y)| (x / sa) * ((x / sa) / (y / sb)).ln())
            .sum()
    }

    #[test]
    fn components_equal_to_feature_give_zero() {
        let h = vec![0.3, -0.2, 1.0];
        let t = diversity_loss(&h, &[h.clone(), h.clone(), h.clone()], 0.8, 0.2).unwrap();
        assert_eq!(t.total, 0.0);
        assert_eq!(t.consistency, 0.0);
        assert_eq!(t.diversity, 0.0);
    }

    #[test]
    fn no_diversity_weight_is_non_negative() {
        let t = diversity_loss(&[0.1, 0.9], &[vec![1.0, 0.0], vec![0.0, 2.0]], 0.8, 0.0).unwrap();
        assert!(t.total >= 0.0);
    }

    #[test]
    fn two_component_hand_case() {
        let h = [1.0, 0.0];
        let c = [vec![0.5, 0.5], vec![2.0, -1.0]];
        let t = diversity_loss(&h, &c, 0.8, 0.2).unwrap();
        let cons = (scalar_kl(&h, &c[0]) + scalar_kl(&h, &c[1])) / 2.0;
        let div = (scalar_kl(&c[0], &c[1]) + scalar_kl(&c[1], &c[0])) / 2.0;
        assert!((t.consistency - cons).abs() < 1e-12);
        assert!((t.diversity - div).abs() < 1e-12);
        assert!((t.total - (0.8 * cons - 0.2 * div)).abs() < 1e-12);
    }

    #[test]
    fn single_component_is_a_config_error() {
        assert!(matches!(
            diversity_loss(&[1.0], &[vec![1.0]], 0.8, 0.2),
            Err(CpscError::Config(_))
        ));
    }

    #[test]
    fn diversity_gradient_matches_finite_differences() {
        let h = vec![0.4, -0.3, 1.2, 0.0];
        let comps = vec![
            vec![0.9, 0.1, 0.0, 0.5],
            vec![0.2, 0.7, 1.5, 0.3],
            vec![1.1, 0.0, 0.4, 0.8],
        ];
        let (dh, dc) = diversity_loss_grad(&h, &comps, 0.8, 0.2).unwrap();
        let eps = 1e-6;
        let f = |h: &[f64], c: &[Vec<f64>]| diversity_loss(h, c, 0.8, 0.2).unwrap().total;
        for t in 0..4 {
            let mut hp = h.clone();
            let mut hm = h.clone();
            hp[t] += eps;
            hm[t] -= eps;
            let fd = (f(&hp, &comps) - f(&hm, &comps)) / (2.0 * eps);
            assert!((fd - dh[t]).abs() < 1e-7 * (1.0 + fd.abs()));
            for k in 0..3 {
                let mut cp = comps.clone();
                let mut cm = comps.clone();
                cp[k][t] += eps;
                cm[k][t] -= eps;
                let fd = (f(&h, &cp) - f(&h, &cm)) / (2.0 * eps);
                assert!((fd - dc[k][t]).abs() < 1e-7 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn reconstruct_examples() {
        let comps = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0]];
        let (h, sel) = reconstruct_topk(&comps, &[0.1, 0.2, 0.3], 3).unwrap();
        assert!((h[0] - 4.0 / 3.0).abs() < 1e-15 && (h[1] - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(sel, vec![2, 1, 0]);
        let (h, sel) = reconstruct_topk(&comps, &[0.1, 0.6, 0.3], 1).unwrap();
        assert_eq!((h, sel), (vec![0.0, 2.0], vec![1]));
        let (_, sel) = reconstruct_topk(&comps, &[0.5, 0.5, 0.2], 1).unwrap();
        assert_eq!(sel, vec![0]);
        assert!(reconstruct_topk(&comps, &[0.1, 0.2], 1).is_err());
        assert!(reconstruct_topk(&comps, &[0.1, 0.2, 0.3], 0).is_err());
    }

    #[test]
    fn reconstruction_bound_examples() {
        let same = vec![vec![1.0, 2.0]; 3];
        let (l, r) = reconstruction_bound(&same, &[0, 2], &[0.0, 0.0]).unwrap();
        assert!((l - r).abs() < 1e-15);
        let sym = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
        let (l, r) = reconstruction_bound(&sym, &[0, 1], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(r > 0.0);
    }

    fn scoring_model() -> CpscModel {
        let cfg = ModelConfig {
            input_dims: vec![2, 2],
            hidden_dim: 2,
            feature_dim: 4,
            components: 3,
            top_k: 1,
            classes: 4,
        };
        let mut model = CpscModel::new(cfg, 0).unwrap();
        // Unimodal head 0 passes the component straight through as logits.
        let eye: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..4).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        model.unimodal_heads[0].weight.value = Tensor2D::from_rows(&eye).unwrap();
        model.unimodal_heads[0].bias.value.fill(0.0);
        model
    }

    fn logits_for(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn scoring_examples() {
        let model = scoring_model();
        let cp = ConformalState::with_fixed_quantile(0.1, 1.0).unwrap();
        // Label ranked first of a 4-element set.
        let c = logits_for(&[0.4, 0.3, 0.2, 0.1]);
        let r = score_components(&model, Some(&cp), 0, &[c.clone()], 0).unwrap();
        assert!((r[0] - 0.75).abs() < 1e-12);

        // Label outside the set.
        let tight = ConformalState::with_fixed_quantile(0.1, 0.65).unwrap();
        let r = score_components(&model, Some(&tight), 0, &[c], 3).unwrap();
        assert_eq!(r[0], 0.0);

        // Uniform probabilities: tie-break by class index.
        let u = vec![0.0; 4];
        let r = score_components(&model, Some(&cp), 0, &[u.clone(), u], 2).unwrap();
        assert_eq!(r, vec![0.25, 0.25]);

        assert!(matches!(
            score_components(&model, None, 0, &[vec![0.0; 4]], 0),
            Err(CpscError::Calibration(_))
        ));
    }

    #[test]
    fn all_zero_reliability_falls_back_to_conformity() {
        let model = scoring_model();
        let cp = ConformalState::with_fixed_quantile(0.1, 0.05).unwrap();
        let comps = vec![
            logits_for(&[0.5, 0.2, 0.2, 0.1]),
            logits_for(&[0.2, 0.6, 0.1, 0.1]),
            logits_for(&[0.3, 0.1, 0.3, 0.3]),
        ];
        let set = select_components(&model, Some(&cp), 0, &comps, 1, 2).unwrap();
        assert!(set.fallback);
        assert_eq!(set.reliability, vec![0.0; 3]);
        assert_eq!(set.selected, vec![1, 0]);
    }

    #[test]
    fn histogram_bins() {
        let mut h = ReliabilityHistogram::new(2, 4);
        for v in [0.0, 0.24, 0.25, 0.99, 1.0] {
            h.record(1, v);
        }
        assert_eq!(h.counts(1), &[2, 1, 0, 2]);
        let rows = h.rows(3);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[4].modality, 1);
        assert_eq!(rows[4].count, 2);
        assert_eq!(rows[7].bin_hi, 1.0);
    }

    #[test]
    fn kl_terms_use_softmax_of_features() {
        let a = [0.2, 0.5, -0.1];
        let b = [0.0, 1.0, 0.3];
        let direct = kl_div(&softmax(&a).unwrap(), &softmax(&b).unwrap()).unwrap();
        assert!((direct - scalar_kl(&a, &b)).abs() < 1e-14);
    }

    fn components_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, usize)> {
        (2usize..6, 1usize..5).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
                prop::collection::vec(0.0f64..1.0, n),
                1..=n,
            )
        })
    }

    proptest! {
        #[test]
        fn reconstruction_is_permutation_covariant((comps, rel, k) in components_strategy(), rot in 0usize..6) {
            // Distinct reliabilities so the tie-break does not depend on order.
            let rel: Vec<f64> = rel.iter().enumerate().map(|(i, r)| r + i as f64 * 1e-6).collect();
            let (h, _) = reconstruct_topk(&comps, &rel, k).unwrap();
            let r = rot % comps.len();
            let mut c2 = comps.clone();
            let mut r2 = rel.clone();
            c2.rotate_left(r);
            r2.rotate_left(r);
            let (h2, _) = reconstruct_topk(&c2, &r2, k).unwrap();
            for (a, b) in h.iter().zip(&h2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn selection_invariant_to_positive_scaling((comps, rel, k) in components_strategy(), s in 0.01f64..100.0) {
            let scaled: Vec<f64> = rel.iter().map(|r| r * s).collect();
            prop_assert_eq!(
                reconstruct_topk(&comps, &rel, k).unwrap().1,
                reconstruct_topk(&comps, &scaled, k).unwrap().1
            );
        }

        #[test]
        fn reconstruction_bound_holds_per_instance((comps, _, k) in components_strategy(), seed in any::<u64>()) {
            let d = comps[0].len();
            let h_star: Vec<f64> = (0..d).map(|i| ((seed >> (i * 8)) & 0xff) as f64 / 64.0 - 2.0).collect();
            let selected: Vec<usize> = (0..k).collect();
            let (lhs, rhs) = reconstruction_bound(&comps, &selected, &h_star).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn diversity_total_decomposes((comps, _, _) in components_strategy(), l1 in 0.0f64..2.0, l2 in 0.0f64..2.0) {
            let h = comps[0].iter().map(|x| x * 0.5).collect::<Vec<_>>();
            let t = diversity_loss(&h, &comps, l1, l2).unwrap();
            prop_assert!(t.consistency >= 0.0 && t.diversity >= 0.0);
            prop_assert!((t.total - (l1 * t.consistency - l2 * t.diversity)).abs() < 1e-12);
        }
    }
}
