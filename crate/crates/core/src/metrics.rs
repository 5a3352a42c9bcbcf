//! Overlap metrics, fold aggregation and the rank-sum significance test.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Significance level for rank-sum comparisons.
pub const SIGNIFICANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    /// Both prediction and ground truth are empty.
    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    fn ratio(&self, num: u64, den: u64) -> f64 {
        if den == 0 {
            if self.both_empty() {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    }

    pub fn dice(&self) -> f64 {
        self.ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn sensitivity(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fn_)
    }

    /// `TP / (TP + FP)`, the formula reported as specificity.
    pub fn specificity(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp)
    }

    /// `TN / (TN + FP)`. Defined as 1 when there are no negatives in either
    /// map.
    pub fn true_specificity(&self) -> f64 {
        let den = self.tn + self.fp;
        if den == 0 {
            if self.tn + self.fp + self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tn as f64 / den as f64
        }
    }

    pub fn scores(&self) -> MetricScores {
        MetricScores {
            dice: self.dice(),
            iou: self.iou(),
            sensitivity: self.sensitivity(),
            specificity: self.specificity(),
            true_specificity: self.true_specificity(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub dice: f64,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub true_specificity: f64,
}

impl MetricScores {
    pub const NAMES: [&'static str; 5] = ["dice", "iou", "sensitivity", "specificity", "true_specificity"];

    pub fn values(&self) -> [f64; 5] {
        [self.dice, self.iou, self.sensitivity, self.specificity, self.true_specificity]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.values()[i])
    }
}

fn as_binary(v: f64) -> Option<bool> {
    if v == 0.0 {
        Some(false)
    } else if v == 1.0 {
        Some(true)
    } else {
        None
    }
}

/// Pixel counts of two binary maps of equal shape.
pub fn confusion<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} and ground truth {:?} differ", pred.shape(), gt.shape())));
    }
    confusion_slices(pred.data(), gt.data())
}

pub fn confusion_slices<S: Scalar>(pred: &[S], gt: &[S]) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        let (Some(p), Some(g)) = (as_binary(p.to_f64()), as_binary(g.to_f64())) else {
            return Err(Error::Domain(format!("confusion counts need binary maps, got {p} / {g}")));
        };
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `1` where `p > threshold`, else `0`.
pub fn binarize<S: Scalar>(prob: &Tensor<S>, threshold: f64) -> Tensor<S> {
    prob.map(|p| if p.to_f64() > threshold { S::one() } else { S::zero() })
}

/// Per-pixel arg-max over channels, as a `[n, 1, ...]` label map.
pub fn argmax_labels<S: Scalar>(prob: &Tensor<S>) -> Tensor<S> {
    let (n, c) = (prob.batch(), prob.channels());
    let p: usize = prob.spatial().iter().product();
    let mut shape = prob.shape().to_vec();
    shape[1] = 1;
    let mut out = Tensor::zeros(&shape);
    for b in 0..n {
        for i in 0..p {
            let mut best = 0;
            for k in 1..c {
                if prob.data()[(b * c + k) * p + i] > prob.data()[(b * c + best) * p + i] {
                    best = k;
                }
            }
            out.data_mut()[b * p + i] = S::from_f64(best as f64);
        }
    }
    out
}

/// Per-class one-vs-rest counts of label maps, for `classes` labels.
pub fn class_confusions<S: Scalar>(pred_labels: &Tensor<S>, gt_labels: &Tensor<S>, classes: usize) -> Result<Vec<ConfusionCounts>> {
    if pred_labels.shape() != gt_labels.shape() {
        return Err(Error::Shape("label maps differ in shape".into()));
    }
    let mut out = vec![ConfusionCounts::default(); classes];
    for (&p, &g) in pred_labels.data().iter().zip(gt_labels.data()) {
        let (p, g) = (p.to_f64() as usize, g.to_f64() as usize);
        if p >= classes || g >= classes {
            return Err(Error::Domain(format!("label outside 0..{classes}")));
        }
        for (k, c) in out.iter_mut().enumerate() {
            match (p == k, g == k) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(out)
}

/// Mean of per-class scores weighted by ground-truth pixel frequency.
pub fn weighted_mean_scores(per_class: &[ConfusionCounts]) -> MetricScores {
    let total: u64 = per_class.iter().map(|c| c.tp + c.fn_).sum();
    let mut acc = [0.0; 5];
    for c in per_class {
        let w = if total == 0 { 1.0 / per_class.len() as f64 } else { (c.tp + c.fn_) as f64 / total as f64 };
        for (a, v) in acc.iter_mut().zip(c.scores().values()) {
            *a += w * v;
        }
    }
    MetricScores { dice: acc[0], iou: acc[1], sensitivity: acc[2], specificity: acc[3], true_specificity: acc[4] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

pub fn aggregate_folds(metric: &str, values: &[f64]) -> Result<FoldScores> {
    if values.len() < 2 {
        return Err(Error::Contract(format!("aggregating {metric} needs at least two folds, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(FoldScores { metric: metric.to_string(), values: values.to_vec(), mean, std: var.sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSumMethod {
    /// Exact null distribution for small samples, normal approximation
    /// otherwise.
    Auto,
    Exact,
    Normal,
}

/// Largest combined sample size for which [`RankSumMethod::Auto`] uses the
/// exact distribution.
pub const EXACT_LIMIT: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann-Whitney statistic of the first group.
    pub u: f64,
    pub p_value: f64,
    pub significant: bool,
    pub exact: bool,
}

/// Mid-ranks (1-based) of the pooled sample, and the tie-group sizes.
fn midranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut all: Vec<(f64, usize)> = a.iter().chain(b).copied().enumerate().map(|(i, v)| (v, i)).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut ranks = vec![0.0; all.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for item in &all[i..=j] {
            ranks[item.1] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("rank-sum test needs two non-empty groups".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("rank-sum test needs finite values".into()));
    }
    Ok(())
}

/// Normal approximation with tie and continuity correction.
fn normal_p(u: f64, n1: usize, n2: usize, ties: &[usize]) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let n = n1f + n2f;
    let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n1f * n2f / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let dev = (u - n1f * n2f / 2.0).abs();
    let z = ((dev - 0.5).max(0.0)) / var.sqrt();
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Exact two-sided p under random assignment of the pooled mid-ranks,
/// by counting size-`n1` subsets per rank sum.
fn exact_p(ranks: &[f64], n1: usize, r1: f64) -> f64 {
    // Doubled mid-ranks are integers.
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = r2.iter().sum();
    let mut counts = vec![vec![0.0f64; max_sum + 1]; n1 + 1];
    counts[0][0] = 1.0;
    for &r in &r2 {
        for k in (1..=n1).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            for s in (r..=max_sum).rev() {
                hi[0][s] += lo[k - 1][s - r];
            }
        }
    }
    let n = ranks.len() as f64;
    let center = n1 as f64 * (n + 1.0); // doubled expected rank sum
    let obs = (2.0 * r1 - center).abs();
    let (mut extreme, mut total) = (0.0, 0.0);
    for (s, &c) in counts[n1].iter().enumerate() {
        total += c;
        if (s as f64 - center).abs() >= obs - 1e-9 {
            extreme += c;
        }
    }
    (extreme / total).min(1.0)
}

/// Two-sided Wilcoxon rank-sum (Mann-Whitney) test.
pub fn rank_sum_test_with(a: &[f64], b: &[f64], method: RankSumMethod) -> Result<RankSumResult> {
    check_groups(a, b)?;
    let (n1, n2) = (a.len(), b.len());
    let (ranks, ties) = midranks(a, b);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let exact = match method {
        RankSumMethod::Exact => true,
        RankSumMethod::Normal => false,
        RankSumMethod::Auto => n1 + n2 <= EXACT_LIMIT,
    };
    let p = if ties.len() == 1 {
        1.0
    } else if exact {
        exact_p(&ranks, n1, r1)
    } else {
        normal_p(u, n1, n2, &ties)
    };
    Ok(RankSumResult { u, p_value: p, significant: p < SIGNIFICANCE, exact })
}

pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    rank_sum_test_with(a, b, RankSumMethod::Auto)
}

/// One `(metric, class, fold, value)` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub metric: String,
    pub class: String,
    pub fold: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAggregate {
    pub model: String,
    pub class: String,
    pub scores: FoldScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    pub test: RankSumResult,
}

/// Per-fold records, fold aggregates and pairwise comparisons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<MetricRecord>,
    pub aggregates: Vec<ModelAggregate>,
    pub comparisons: Vec<Comparison>,
    /// Per-sample dice scores for each model, pooled over folds.
    pub sample_dice: Vec<(String, Vec<f64>)>,
}

impl EvaluationReport {
    pub fn push_fold(&mut self, model: &str, class: &str, fold: usize, scores: &MetricScores) {
        for (name, v) in MetricScores::NAMES.iter().zip(scores.values()) {
            self.records.push(MetricRecord {
                model: model.into(),
                metric: (*name).into(),
                class: class.into(),
                fold,
                value: v,
            });
        }
    }

    /// Fills `aggregates` from the fold records.
    pub fn aggregate(&mut self) -> Result<()> {
        self.aggregates.clear();
        let mut keys: Vec<(String, String, String)> = Vec::new();
        for r in &self.records {
            let k = (r.model.clone(), r.class.clone(), r.metric.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (model, class, metric) in keys {
            let vals: Vec<f64> = self
                .records
                .iter()
                .filter(|r| r.model == model && r.class == class && r.metric == metric)
                .map(|r| r.value)
                .collect();
            if vals.len() >= 2 {
                self.aggregates.push(ModelAggregate { model, class, scores: aggregate_folds(&metric, &vals)? });
            }
        }
        Ok(())
    }

    pub fn aggregate_for(&self, model: &str, class: &str, metric: &str) -> Option<&FoldScores> {
        self.aggregates
            .iter()
            .find(|a| a.model == model && a.class == class && a.scores.metric == metric)
            .map(|a| &a.scores)
    }

    /// Rank-sum comparison of per-sample dice between two models.
    pub fn compare(&mut self, a: &str, b: &str) -> Result<&Comparison> {
        let get = |m: &str| {
            self.sample_dice
                .iter()
                .find(|(n, _)| n == m)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Contract(format!("no per-sample scores for `{m}`")))
        };
        let (av, bv) = (get(a)?, get(b)?);
        let test = rank_sum_test(&av, &bv)?;
        self.comparisons.push(Comparison {
            a: a.into(),
            b: b.into(),
            metric: "dice".into(),
            a_values: av,
            b_values: bv,
            test,
        });
        Ok(self.comparisons.last().expect("just pushed"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `model,metric,class,fold,value` rows; aggregate rows use `mean` and
    /// `std` in the fold column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,metric,class,fold,value\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.model, r.metric, r.class, r.fold, r.value);
        }
        for a in &self.aggregates {
            let _ = writeln!(s, "{},{},{},mean,{}", a.model, a.scores.metric, a.class, a.scores.mean);
            let _ = writeln!(s, "{},{},{},std,{}", a.model, a.scores.metric, a.class, a.scores.std);
        }
        s
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_enumerated_counts_and_scores() {
        let c = confusion(&t(&[1.0, 1.0, 0.0, 0.0]), &t(&[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        assert_eq!(c.dice(), 0.5);
        assert!((c.iou() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.sensitivity(), 0.5);
        assert_eq!(c.specificity(), 0.5);
        assert_eq!(c.true_specificity(), 0.5);
        let ones = t(&[1.0; 5]);
        let c = confusion(&ones, &ones).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 0 });
        assert_eq!(c.scores().values()[..4], [1.0; 4]);
        let z = t(&[0.0; 5]);
        let c = confusion(&z, &z).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 5 });
        assert_eq!(c.scores().values(), [1.0; 5]);
        let c = confusion(&z, &t(&[0.0, 1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(c.dice(), 0.0);
        assert_eq!(c.specificity(), 0.0);
        assert!(confusion(&t(&[0.5]), &t(&[1.0])).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let p = t(&[0.0, 0.2, 0.5, 0.51, 1.0]);
        assert_eq!(binarize(&p, 0.5).data(), &[0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(binarize(&p, 0.0).data(), &[0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(binarize(&p, 1.0).data(), &[0.0; 5]);
    }

    #[test]
    fn fold_aggregation() {
        let f = aggregate_folds("dice", &[0.9; 5]).unwrap();
        assert!((f.mean - 0.9).abs() < 1e-15 && f.std.abs() < 1e-15);
        let f = aggregate_folds("dice", &[0.8, 1.0]).unwrap();
        assert!((f.mean - 0.9).abs() < 1e-15);
        assert!((f.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(aggregate_folds("dice", &[]).is_err());
    }

    #[test]
    fn rank_sum_basic_properties() {
        let a = [0.1, 0.5, 0.3];
        assert_eq!(rank_sum_test(&a, &a).unwrap().p_value, 1.0);
        assert_eq!(rank_sum_test(&[2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap().p_value, 1.0);
        let p = rank_sum_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((p.p_value - 0.1).abs() < 1e-12 && p.exact);
        let x = [0.2, 0.9, 0.4, 0.7];
        let y = [0.1, 0.3, 0.35];
        for m in [RankSumMethod::Exact, RankSumMethod::Normal] {
            let pa = rank_sum_test_with(&x, &y, m).unwrap().p_value;
            let pb = rank_sum_test_with(&y, &x, m).unwrap().p_value;
            assert!((pa - pb).abs() < 1e-12);
        }
        assert!(rank_sum_test(&[], &[1.0]).is_err());
    }

    #[test]
    fn large_samples_use_the_normal_approximation() {
        let a: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| i as f64 + 25.0).collect();
        let r = rank_sum_test(&a, &b).unwrap();
        assert!(!r.exact && r.significant);
    }

    #[test]
    fn multiclass_weighting() {
        let gt = t(&[0.0, 1.0, 1.0, 2.0]);
        let pred = t(&[0.0, 1.0, 2.0, 2.0]);
        let cc = class_confusions(&pred, &gt, 3).unwrap();
        assert_eq!(cc[1], ConfusionCounts { tp: 1, fp: 0, fn_: 1, tn: 2 });
        let w = weighted_mean_scores(&cc);
        let want = 0.25 * 1.0 + 0.5 * cc[1].dice() + 0.25 * cc[2].dice();
        assert!((w.dice - want).abs() < 1e-15);
        let probs = Tensor::from_vec(vec![1, 3, 1, 2], vec![0.1, 0.7, 0.8, 0.2, 0.1, 0.1]).unwrap();
        assert_eq!(argmax_labels(&probs).data(), &[1.0, 0.0]);
    }

    #[test]
    fn report_round_trips_and_writes_csv() {
        let mut r = EvaluationReport::default();
        for f in 0..3 {
            let s = MetricScores { dice: 0.8 + 0.05 * f as f64, ..Default::default() };
            r.push_fold("V1", "lesion", f, &s);
        }
        r.aggregate().unwrap();
        assert!((r.aggregate_for("V1", "lesion", "dice").unwrap().mean - 0.85).abs() < 1e-12);
        r.sample_dice = vec![("V1".into(), vec![0.1, 0.2, 0.3]), ("V7".into(), vec![0.1, 0.2, 0.3])];
        assert_eq!(r.compare("V1", "V7").unwrap().test.p_value, 1.0);
        let back = EvaluationReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert!(csv.starts_with("model,metric,class,fold,value\n"));
        assert!(csv.contains("V1,dice,lesion,mean,"));
    }

    proptest! {
        #[test]
        fn iou_never_exceeds_dice(tp in 0u64..50, fp in 0u64..50, fnn in 0u64..50) {
            prop_assume!(tp + fp + fnn > 0);
            let c = ConfusionCounts { tp, fp, fn_: fnn, tn: 0 };
            prop_assert!(c.iou() <= c.dice() + 1e-15);
        }

        #[test]
        fn counts_sum_to_pixels(v in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..64)) {
            let p: Vec<f64> = v.iter().map(|x| x.0 as u8 as f64).collect();
            let g: Vec<f64> = v.iter().map(|x| x.1 as u8 as f64).collect();
            let c = confusion_slices(&p, &g).unwrap();
            prop_assert_eq!(c.total() as usize, v.len());
        }
    }
}
