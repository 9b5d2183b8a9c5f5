//! Pairwise EER significance tests with Holm-Bonferroni correction.

use statrs::function::erf::erfc;

use crate::data::ProtocolSet;
use crate::error::{Error, Result};
use crate::eval::{class_scores, eer_from_scores, ScoreSet};

/// Per-trial error indicators at the system's own EER threshold, bona fide
/// first, in protocol order.
fn errors_at_eer(scores: &ScoreSet, protocol: &ProtocolSet) -> Result<Vec<bool>> {
    let (bona, spoof) = class_scores(scores, protocol)?;
    let tau = eer_from_scores(&bona, &spoof)?.threshold;
    Ok(bona.iter().map(|&s| s < tau).chain(spoof.iter().map(|&s| s >= tau)).collect())
}

/// Two-sided two-proportion z-test on the error rates of two systems at
/// their EER thresholds.
pub fn eer_significance_pair(a: &ScoreSet, b: &ScoreSet, protocol: &ProtocolSet) -> Result<f64> {
    let (ea, eb) = (errors_at_eer(a, protocol)?, errors_at_eer(b, protocol)?);
    if ea == eb {
        return Ok(1.0);
    }
    let n = ea.len() as f64;
    let (ka, kb) = (ea.iter().filter(|&&e| e).count() as f64, eb.iter().filter(|&&e| e).count() as f64);
    let pooled = (ka + kb) / (2.0 * n);
    let se = (pooled * (1.0 - pooled) * 2.0 / n).sqrt();
    if se == 0.0 {
        return Ok(1.0);
    }
    let z = ((ka - kb) / n).abs() / se;
    Ok(erfc(z / std::f64::consts::SQRT_2).min(1.0))
}

/// Holm's step-down procedure; flags in input order.
pub fn holm_bonferroni(pvalues: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Param(format!("alpha {alpha} outside (0, 1)")));
    }
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Param(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvalues[i].total_cmp(&pvalues[j]));
    let mut reject = vec![false; m];
    for (k, &i) in order.iter().enumerate() {
        if pvalues[i] > alpha / (m - k) as f64 {
            break;
        }
        reject[i] = true;
    }
    Ok(reject)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceMatrix {
    pub labels: Vec<String>,
    /// Symmetric, unit diagonal.
    pub p: Vec<Vec<f64>>,
    pub reject: Vec<Vec<bool>>,
    pub alpha: f64,
}

impl SignificanceMatrix {
    /// `labelA,labelB,p,reject` for each pair in the upper triangle.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("labelA,labelB,p,reject\n");
        let m = self.labels.len();
        for i in 0..m {
            for j in i + 1..m {
                out.push_str(&format!(
                    "{},{},{:.6e},{}\n",
                    self.labels[i], self.labels[j], self.p[i][j], self.reject[i][j]
                ));
            }
        }
        out
    }
}

/// All pairwise tests, corrected together.
pub fn build_matrix(sets: &[(String, ScoreSet)], protocol: &ProtocolSet, alpha: f64) -> Result<SignificanceMatrix> {
    let m = sets.len();
    if m < 2 {
        return Err(Error::InsufficientInput("significance testing needs at least two score sets".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let pvals = pairs
        .iter()
        .map(|&(i, j)| eer_significance_pair(&sets[i].1, &sets[j].1, protocol))
        .collect::<Result<Vec<_>>>()?;
    let flags = holm_bonferroni(&pvals, alpha)?;
    let mut p = vec![vec![1.0; m]; m];
    let mut reject = vec![vec![false; m]; m];
    for (&(i, j), (&pv, &r)) in pairs.iter().zip(pvals.iter().zip(&flags)) {
        p[i][j] = pv;
        p[j][i] = pv;
        reject[i][j] = r;
        reject[j][i] = r;
    }
    Ok(SignificanceMatrix { labels: sets.iter().map(|(l, _)| l.clone()).collect(), p, reject, alpha })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{Label, TrialRecord};

    fn setup(n: usize, seed: u64) -> (ProtocolSet, ScoreSet, ScoreSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<TrialRecord> = (0..n)
            .map(|i| TrialRecord::new(format!("t{i:04}"), if i % 2 == 0 { Label::Bonafide } else { Label::Spoof }))
            .collect();
        let (mut a, mut b) = (ScoreSet::new(), ScoreSet::new());
        for r in &records {
            let sign = if r.label == Label::Bonafide { 1.0 } else { -1.0 };
            a.insert(&r.trial_id, sign * 0.8 + rng.gen_range(-1.0..1.0)).unwrap();
            b.insert(&r.trial_id, sign * 0.3 + rng.gen_range(-1.0..1.0)).unwrap();
        }
        (ProtocolSet::new(records, None, ".").unwrap(), a, b)
    }

    #[test]
    fn identical_and_symmetric() {
        let (p, a, b) = setup(200, 1);
        assert_eq!(eer_significance_pair(&a, &a, &p).unwrap(), 1.0);
        let (ab, ba) = (eer_significance_pair(&a, &b, &p).unwrap(), eer_significance_pair(&b, &a, &p).unwrap());
        assert_eq!(ab, ba);
        assert!(ab > 0.0 && ab < 1.0);
    }

    #[test]
    fn perfect_versus_coin_flip() {
        let n = 1000;
        let records: Vec<TrialRecord> = (0..n)
            .map(|i| TrialRecord::new(format!("t{i}"), if i < n / 2 { Label::Bonafide } else { Label::Spoof }))
            .collect();
        let p = ProtocolSet::new(records, None, ".").unwrap();
        let (mut a, mut b) = (ScoreSet::new(), ScoreSet::new());
        for (i, r) in p.records.iter().enumerate() {
            a.insert(&r.trial_id, if r.label == Label::Bonafide { 1.0 } else { -1.0 }).unwrap();
            b.insert(&r.trial_id, (i % 2) as f64).unwrap();
        }
        let pv = eer_significance_pair(&a, &b, &p).unwrap();
        // z = 0.5 / sqrt(0.25·0.75·2/1000)
        let z: f64 = 0.5 / (0.25f64 * 0.75 * 2.0 / 1000.0).sqrt();
        assert!(pv < 1e-6);
        assert!((pv - erfc(z / 2f64.sqrt())).abs() <= 1e-12 * pv.max(1e-300));
    }

    #[test]
    fn mismatched_coverage_is_an_input_error() {
        let (p, a, _) = setup(10, 2);
        let mut short = ScoreSet::new();
        a.iter().skip(1).for_each(|(k, v)| short.insert(k, v).unwrap());
        assert!(matches!(eer_significance_pair(&a, &short, &p), Err(Error::MissingTrials(_))));
    }

    #[test]
    fn holm_examples() {
        assert_eq!(holm_bonferroni(&[], 0.05).unwrap(), Vec::<bool>::new());
        assert_eq!(holm_bonferroni(&[0.01, 0.02, 0.04], 0.05).unwrap(), vec![true; 3]);
        assert_eq!(holm_bonferroni(&[0.04, 0.04, 0.04], 0.05).unwrap(), vec![false; 3]);
        assert_eq!(holm_bonferroni(&[0.04, 0.001, 0.3], 0.05).unwrap(), vec![false, true, false]);
        assert_eq!(holm_bonferroni(&[0.02, 0.001, 0.3], 0.05).unwrap(), vec![true, true, false]);
        assert!(holm_bonferroni(&[1.2], 0.05).is_err());
        assert!(holm_bonferroni(&[0.2], 1.0).is_err());
    }

    #[test]
    fn matrix_shapes() {
        let (p, a, b) = setup(100, 3);
        let m = build_matrix(&[("x".into(), a.clone()), ("y".into(), a.clone())], &p, 0.05).unwrap();
        assert_eq!(m.p[0][1], 1.0);
        assert!(!m.reject[0][1]);
        let m = build_matrix(&[("a".into(), a.clone()), ("b".into(), b), ("c".into(), a)], &p, 0.05).unwrap();
        assert_eq!(m.to_csv().lines().count(), 4);
        for i in 0..3 {
            assert_eq!((m.p[i][i], m.reject[i][i]), (1.0, false));
            for j in 0..3 {
                assert_eq!(m.p[i][j], m.p[j][i]);
            }
        }
        assert!(build_matrix(&[("a".into(), ScoreSet::new())], &p, 0.05).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn holm_sits_between_bonferroni_and_uncorrected(ps in prop::collection::vec(0.0f64..0.2, 0..12)) {
            let holm = holm_bonferroni(&ps, 0.05).unwrap();
            let m = ps.len() as f64;
            for (p, r) in ps.iter().zip(&holm) {
                if *p <= 0.05 / m { prop_assert!(*r); }
                if *r { prop_assert!(*p <= 0.05); }
            }
        }

        #[test]
        fn lowering_a_p_value_never_unrejects(ps in prop::collection::vec(0.0f64..0.1, 1..10), idx: prop::sample::Index, factor in 0.0f64..1.0) {
            let before = holm_bonferroni(&ps, 0.05).unwrap();
            let mut lowered = ps.clone();
            let i = idx.index(ps.len());
            lowered[i] *= factor;
            let after = holm_bonferroni(&lowered, 0.05).unwrap();
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(!b || *a);
            }
        }

        #[test]
        fn flipping_the_positive_class_keeps_p(seed in 0u64..500) {
            let (p, a, b) = setup(60, seed);
            let flip_scores = |s: &ScoreSet| {
                let mut out = ScoreSet::new();
                s.iter().for_each(|(k, v)| out.insert(k, -v).unwrap());
                out
            };
            let flipped = ProtocolSet::new(
                p.records.iter().map(|r| TrialRecord::new(r.trial_id.clone(), match r.label {
                    Label::Bonafide => Label::Spoof,
                    Label::Spoof => Label::Bonafide,
                })).collect(),
                None,
                ".",
            ).unwrap();
            let orig = eer_significance_pair(&a, &b, &p).unwrap();
            let again = eer_significance_pair(&flip_scores(&a), &flip_scores(&b), &flipped).unwrap();
            prop_assert!((orig - again).abs() < 1e-12, "{} vs {}", orig, again);
        }
    }
}
