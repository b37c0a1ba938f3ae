//! Dice overlap, ROC/AUC and paired bootstrap significance.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::BrainMask;
use crate::rng::substream;
use crate::volume::{LabelMap, Volume, LEFT, RIGHT};

/// Which foreground a metric looks at. `Both` merges left and right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Left,
    Right,
    Both,
}

impl Selector {
    pub const ALL: [Selector; 3] = [Selector::Left, Selector::Right, Selector::Both];

    #[inline]
    pub fn is_positive(self, label: u8) -> bool {
        match self {
            Selector::Left => label == LEFT,
            Selector::Right => label == RIGHT,
            Selector::Both => label == LEFT || label == RIGHT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Selector::Left => "left",
            Selector::Right => "right",
            Selector::Both => "both",
        }
    }
}

/// `(|R ∩ X|, |R|, |X|)` for one subject.
fn overlap_counts(reference: &LabelMap, pred: &LabelMap, sel: Selector) -> Result<(u64, u64, u64)> {
    if reference.dims != pred.dims {
        return Err(Error::Shape(format!("reference dims {:?} vs prediction dims {:?}", reference.dims, pred.dims)));
    }
    let (mut inter, mut r, mut x) = (0u64, 0u64, 0u64);
    for (&a, &b) in reference.data.iter().zip(&pred.data) {
        let pa = sel.is_positive(a);
        let pb = sel.is_positive(b);
        inter += u64::from(pa && pb);
        r += u64::from(pa);
        x += u64::from(pb);
    }
    Ok((inter, r, x))
}

fn dice_from_counts(inter: u64, r: u64, x: u64) -> f64 {
    if r + x == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (r + x) as f64
    }
}

/// DSC of one subject. Both sets empty counts as perfect agreement.
pub fn dsc_per_subject(reference: &LabelMap, pred: &LabelMap, sel: Selector) -> Result<f64> {
    let (i, r, x) = overlap_counts(reference, pred, sel)?;
    Ok(dice_from_counts(i, r, x))
}

/// Cross-subject DSC: `2 Σ|R_i ∩ X_i| / Σ(|R_i| + |X_i|)`.
pub fn dsc_pooled(refs: &[LabelMap], preds: &[LabelMap], sel: Selector) -> Result<f64> {
    if refs.len() != preds.len() {
        return Err(Error::Shape(format!("{} references vs {} predictions", refs.len(), preds.len())));
    }
    let (mut i, mut r, mut x) = (0, 0, 0);
    for (a, b) in refs.iter().zip(preds) {
        let (ci, cr, cx) = overlap_counts(a, b, sel)?;
        i += ci;
        r += cr;
        x += cx;
    }
    Ok(dice_from_counts(i, r, x))
}

/// One voxel's score and reference class, pooled across subjects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub score: f32,
    pub positive: bool,
}

/// Foreground score for `sel` from per-class probability volumes
/// `[background, left, right]`.
pub fn selector_score(probs: &[Volume; 3], sel: Selector, i: usize) -> f32 {
    match sel {
        Selector::Left => probs[1].data[i],
        Selector::Right => probs[2].data[i],
        Selector::Both => probs[1].data[i] + probs[2].data[i],
    }
}

/// Collects in-mask `(score, positive)` pairs across subjects.
pub fn pool_voxels(
    probs: &[[Volume; 3]],
    refs: &[LabelMap],
    masks: &[BrainMask],
    sel: Selector,
) -> Result<Vec<Scored>> {
    if probs.len() != refs.len() || refs.len() != masks.len() {
        return Err(Error::Shape("probability, reference and mask lists differ in length".into()));
    }
    let mut out = Vec::new();
    for ((p, r), m) in probs.iter().zip(refs).zip(masks) {
        if p.iter().any(|v| v.dims != r.dims) || m.dims != r.dims {
            return Err(Error::Shape("probability volume dims differ from reference".into()));
        }
        for i in 0..r.data.len() {
            if m.data[i] {
                out.push(Scored { score: selector_score(p, sel, i), positive: sel.is_positive(r.data[i]) });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn class_totals(samples: &[Scored]) -> Result<(usize, usize)> {
    let pos = samples.iter().filter(|s| s.positive).count();
    let neg = samples.len() - pos;
    if pos == 0 {
        return Err(Error::DegenerateClass("no positive voxels".into()));
    }
    if neg == 0 {
        return Err(Error::DegenerateClass("no negative voxels".into()));
    }
    Ok((pos, neg))
}

/// Operating point when voxels with `score >= threshold` are called positive.
pub fn roc_point_at(samples: &[Scored], threshold: f64) -> Result<RocPoint> {
    let (pos, neg) = class_totals(samples)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for s in samples {
        if f64::from(s.score) >= threshold {
            if s.positive {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok(RocPoint { threshold, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 })
}

/// ROC over thresholds `k / (n - 1)`, `k = 0..n`, plus one threshold
/// above 1 so both `(1, 1)` and `(0, 0)` are present. Points are ordered
/// by threshold descending.
pub fn roc_curve(samples: &[Scored], n_thresholds: usize) -> Result<Vec<RocPoint>> {
    if n_thresholds < 2 {
        return Err(Error::Config("need at least two ROC thresholds".into()));
    }
    let (pos, neg) = class_totals(samples)?;
    let steps = n_thresholds - 1;
    // Bucket k holds scores in [k/steps, (k+1)/steps); the top bucket also takes exactly 1.0.
    let mut tp_hist = vec![0usize; n_thresholds + 1];
    let mut fp_hist = vec![0usize; n_thresholds + 1];
    for s in samples {
        let v = f64::from(s.score);
        if !(0.0..=1.0 + 1e-6).contains(&v) {
            return Err(Error::Precondition(format!("score {v} outside [0, 1]")));
        }
        let mut k = (v * steps as f64).floor() as usize;
        // Guard against floating-point floor landing one bucket high.
        while k > 0 && (k as f64 / steps as f64) > v {
            k -= 1;
        }
        while k < steps && ((k + 1) as f64 / steps as f64) <= v {
            k += 1;
        }
        let k = k.min(n_thresholds);
        if s.positive {
            tp_hist[k] += 1;
        } else {
            fp_hist[k] += 1;
        }
    }
    let mut points = Vec::with_capacity(n_thresholds + 1);
    points.push(RocPoint { threshold: 1.0 + 1.0 / steps as f64, fpr: 0.0, tpr: 0.0 });
    let (mut tp, mut fp) = (0usize, 0usize);
    for k in (0..=steps).rev() {
        tp += tp_hist[k];
        fp += fp_hist[k];
        if k == steps {
            tp += tp_hist[n_thresholds];
            fp += fp_hist[n_thresholds];
        }
        points.push(RocPoint { threshold: k as f64 / steps as f64, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(points)
}

/// Trapezoidal area under ROC points, sorted by FPR (then TPR).
pub fn auc(points: &[RocPoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Precondition("AUC needs at least two ROC points".into()));
    }
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// Single operating point of a hard segmentation over in-mask voxels.
pub fn roc_point_single(preds: &[LabelMap], refs: &[LabelMap], masks: &[BrainMask], sel: Selector) -> Result<(f64, f64)> {
    if preds.len() != refs.len() || refs.len() != masks.len() {
        return Err(Error::Shape("prediction, reference and mask lists differ in length".into()));
    }
    let (mut tp, mut fp, mut pos, mut neg) = (0u64, 0u64, 0u64, 0u64);
    for ((p, r), m) in preds.iter().zip(refs).zip(masks) {
        if p.dims != r.dims || m.dims != r.dims {
            return Err(Error::Shape("prediction dims differ from reference".into()));
        }
        for i in 0..r.data.len() {
            if !m.data[i] {
                continue;
            }
            let truth = sel.is_positive(r.data[i]);
            let called = sel.is_positive(p.data[i]);
            if truth {
                pos += 1;
                tp += u64::from(called);
            } else {
                neg += 1;
                fp += u64::from(called);
            }
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateClass("reference has no positive or no negative voxels".into()));
    }
    Ok((fp as f64 / neg as f64, tp as f64 / pos as f64))
}

/// Overlap counts of one subject, enough to pool DSC across any resample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub reference: u64,
    pub prediction: u64,
}

impl Overlap {
    pub fn of(reference: &LabelMap, pred: &LabelMap, sel: Selector) -> Result<Self> {
        let (intersection, reference, prediction) = overlap_counts(reference, pred, sel)?;
        Ok(Overlap { intersection, reference, prediction })
    }

    pub fn dsc(&self) -> f64 {
        dice_from_counts(self.intersection, self.reference, self.prediction)
    }
}

/// What each bootstrap resample compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapStatistic {
    /// Mean of the resampled subjects' DSC.
    #[default]
    MeanDsc,
    /// DSC pooled over the resampled subjects' voxels.
    PooledDsc,
}

/// Paired subject bootstrap. `stat` maps the resampled subject indices to
/// `(A, B)`; returns the fraction of resamples with B > A, ties counted half.
fn paired_bootstrap(m: usize, n: usize, seed: u64, stat: impl Fn(&[usize]) -> (f64, f64) + Sync) -> Result<f64> {
    if n < 1 {
        return Err(Error::Config("need at least one bootstrap resample".into()));
    }
    if m < 2 {
        return Err(Error::Precondition("bootstrap needs at least two paired subjects".into()));
    }
    let score: f64 = (0..n)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, "bootstrap", r as u64);
            let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
            let (a, b) = stat(&picks);
            if b > a {
                1.0
            } else if b == a {
                0.5
            } else {
                0.0
            }
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(score / n as f64)
}

/// Empirical p-value for "A is no better than B": the fraction of paired
/// subject resamples in which B's mean DSC exceeds A's, ties counted half.
pub fn bootstrap_pvalue(dsc_a: &[f64], dsc_b: &[f64], n: usize, seed: u64) -> Result<f64> {
    if dsc_a.len() != dsc_b.len() {
        return Err(Error::Precondition("bootstrap needs two paired lists of equal length".into()));
    }
    let mean = |v: &[f64], picks: &[usize]| picks.iter().map(|&k| v[k]).sum::<f64>() / picks.len() as f64;
    paired_bootstrap(dsc_a.len(), n, seed, |p| (mean(dsc_a, p), mean(dsc_b, p)))
}

/// As [`bootstrap_pvalue`], but each resample compares pooled DSC.
pub fn bootstrap_pvalue_pooled(a: &[Overlap], b: &[Overlap], n: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Precondition("bootstrap needs two paired lists of equal length".into()));
    }
    let pooled = |v: &[Overlap], picks: &[usize]| {
        let (i, r, x) = picks.iter().fold((0, 0, 0), |(i, r, x), &k| {
            (i + v[k].intersection, r + v[k].reference, x + v[k].prediction)
        });
        dice_from_counts(i, r, x)
    };
    paired_bootstrap(a.len(), n, seed, |p| (pooled(a, p), pooled(b, p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerClass {
    pub left: f64,
    pub right: f64,
    pub both: f64,
}

impl PerClass {
    pub fn get(&self, sel: Selector) -> f64 {
        match sel {
            Selector::Left => self.left,
            Selector::Right => self.right,
            Selector::Both => self.both,
        }
    }

    pub fn from_fn(mut f: impl FnMut(Selector) -> Result<f64>) -> Result<Self> {
        Ok(PerClass { left: f(Selector::Left)?, right: f(Selector::Right)?, both: f(Selector::Both)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectScores {
    pub id: String,
    pub watershed: PerClass,
    pub network: PerClass,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRow {
    pub name: String,
    pub values: PerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub subjects: Vec<SubjectScores>,
    /// Test subjects left out because their watershed failed.
    pub excluded: Vec<String>,
    pub dsc_watershed: PerClass,
    pub dsc_network: PerClass,
    pub auc_network: PerClass,
    /// Network ROC for the merged foreground, threshold descending.
    pub roc_network: Vec<RocPoint>,
    /// Single operating point of the watershed, `[fpr, tpr]`, merged foreground.
    pub roc_watershed: [f64; 2],
    /// p-value of "network is no better than watershed" per selector.
    pub p_value: PerClass,
    pub n_bootstraps: usize,
    /// DSC (region growing), DSC (network), AUC (network) by left/right/both.
    pub table: Vec<TableRow>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        for pc in [&self.dsc_watershed, &self.dsc_network, &self.auc_network, &self.p_value] {
            if !Selector::ALL.iter().all(|&s| in_unit(pc.get(s))) {
                return Err(Error::Validation("report value outside [0, 1]".into()));
            }
        }
        let monotone = self.roc_network.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        if !monotone {
            return Err(Error::Validation("ROC points are not monotone".into()));
        }
        Ok(())
    }

    pub fn format_table(&self) -> String {
        let mut s = format!("{:<28}{:>10}{:>10}{:>10}\n", "", "left", "right", "both");
        for row in &self.table {
            s.push_str(&format!(
                "{:<28}{:>10.3}{:>10.3}{:>10.3}\n",
                row.name, row.values.left, row.values.right, row.values.both
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(data: Vec<u8>) -> LabelMap {
        LabelMap::new([data.len(), 1, 1], [1.0; 3], data).unwrap()
    }

    fn scored(pos: &[f32], neg: &[f32]) -> Vec<Scored> {
        pos.iter()
            .map(|&s| Scored { score: s, positive: true })
            .chain(neg.iter().map(|&s| Scored { score: s, positive: false }))
            .collect()
    }

    #[test]
    fn dice_basic_cases() {
        let a = lm(vec![1, 1, 0, 0, 2]);
        assert_eq!(dsc_per_subject(&a, &a, Selector::Both).unwrap(), 1.0);
        assert_eq!(dsc_per_subject(&lm(vec![1, 1, 0, 0]), &lm(vec![0, 0, 1, 1]), Selector::Left).unwrap(), 0.0);
        assert_eq!(dsc_per_subject(&lm(vec![0, 0]), &lm(vec![0, 0]), Selector::Both).unwrap(), 1.0);
        // |R| = 4, X holds two of them plus two others.
        let r = lm(vec![1, 1, 1, 1, 0, 0]);
        let x = lm(vec![1, 1, 0, 0, 1, 1]);
        assert_eq!(dsc_per_subject(&r, &x, Selector::Left).unwrap(), 0.5);
    }

    #[test]
    fn pooled_dice_example() {
        // A: |R| = 4, |X| = 4, overlap 2. B: |R| = 2, |X| = 2, overlap 2.
        let ra = lm(vec![1, 1, 1, 1, 0, 0]);
        let xa = lm(vec![1, 1, 0, 0, 1, 1]);
        let rb = lm(vec![2, 2, 0]);
        let xb = lm(vec![2, 2, 0]);
        let d = dsc_pooled(&[ra, rb], &[xa, xb], Selector::Both).unwrap();
        assert!((d - 2.0 * 4.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn selectors_split_labels() {
        let r = lm(vec![1, 2, 0]);
        let x = lm(vec![2, 1, 0]);
        assert_eq!(dsc_per_subject(&r, &x, Selector::Both).unwrap(), 1.0);
        assert_eq!(dsc_per_subject(&r, &x, Selector::Left).unwrap(), 0.0);
    }

    #[test]
    fn dims_mismatch_is_error() {
        let a = lm(vec![0, 1]);
        let b = lm(vec![0, 1, 1]);
        assert!(dsc_per_subject(&a, &b, Selector::Both).is_err());
        assert!(dsc_pooled(&[a.clone()], &[], Selector::Both).is_err());
    }

    #[test]
    fn roc_threshold_table() {
        let s = scored(&[0.9, 0.4], &[0.5, 0.1]);
        let p = roc_point_at(&s, 0.45).unwrap();
        assert_eq!((p.fpr, p.tpr), (0.5, 0.5));
        let p0 = roc_point_at(&s, 0.0).unwrap();
        assert_eq!((p0.fpr, p0.tpr), (1.0, 1.0));
        let p1 = roc_point_at(&s, 1.01).unwrap();
        assert_eq!((p1.fpr, p1.tpr), (0.0, 0.0));
        let curve = roc_curve(&s, 200).unwrap();
        assert!((auc(&curve).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!((curve[0].fpr, curve[0].tpr), (0.0, 0.0));
        let last = curve.last().unwrap();
        assert_eq!((last.fpr, last.tpr, last.threshold), (1.0, 1.0, 0.0));
    }

    #[test]
    fn roc_curve_matches_point_queries() {
        let s = scored(&[0.95, 0.7, 0.31, 1.0, 0.0], &[0.3, 0.2, 0.705, 0.0, 1.0]);
        let curve = roc_curve(&s, 21).unwrap();
        for p in &curve {
            let q = roc_point_at(&s, p.threshold).unwrap();
            assert_eq!((p.fpr, p.tpr), (q.fpr, q.tpr), "threshold {}", p.threshold);
        }
    }

    #[test]
    fn perfect_separator() {
        let s = scored(&[0.8, 0.9, 1.0], &[0.0, 0.1, 0.2]);
        let curve = roc_curve(&s, 200).unwrap();
        assert!(curve.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&curve).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_classes() {
        assert!(matches!(roc_curve(&scored(&[0.5], &[]), 10), Err(Error::DegenerateClass(_))));
        assert!(matches!(roc_curve(&scored(&[], &[0.5]), 10), Err(Error::DegenerateClass(_))));
    }

    #[test]
    fn single_point_cases() {
        let r = vec![lm(vec![1, 1, 0, 0])];
        let m = vec![BrainMask::full([4, 1, 1])];
        assert_eq!(roc_point_single(&r, &r, &m, Selector::Both).unwrap(), (0.0, 1.0));
        assert_eq!(roc_point_single(&[lm(vec![1, 1, 1, 1])], &r, &m, Selector::Both).unwrap(), (1.0, 1.0));
        assert_eq!(roc_point_single(&[lm(vec![1, 0, 0, 0])], &r, &m, Selector::Both).unwrap(), (0.0, 0.5));
    }

    #[test]
    fn bootstrap_cases() {
        assert_eq!(bootstrap_pvalue(&[0.9, 0.8, 0.7], &[0.5, 0.4, 0.3], 1000, 1).unwrap(), 0.0);
        assert_eq!(bootstrap_pvalue(&[0.9, 0.8, 0.7], &[0.9, 0.8, 0.7], 1000, 1).unwrap(), 0.5);
        assert!(bootstrap_pvalue(&[0.9, 0.8], &[0.5, 0.4], 0, 1).is_err());
        assert!(bootstrap_pvalue(&[0.9], &[0.5], 10, 1).is_err());
    }

    #[test]
    fn bootstrap_matches_exhaustive_enumeration() {
        let a = [0.9, 0.9];
        let b = [0.9, 0.1];
        // All 4 equiprobable ordered resamples of two subjects.
        let mut exact = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let ma = (a[i] + a[j]) / 2.0;
                let mb = (b[i] + b[j]) / 2.0;
                exact += if mb > ma { 1.0 } else if mb == ma { 0.5 } else { 0.0 };
            }
        }
        exact /= 4.0;
        assert_eq!(exact, 0.125);
        let mc = bootstrap_pvalue(&a, &b, 20_000, 3).unwrap();
        assert!((mc - exact).abs() <= 0.05, "{mc}");
    }

    #[test]
    fn pooled_bootstrap_cases() {
        let o = |i, r, x| Overlap { intersection: i, reference: r, prediction: x };
        let good = [o(10, 10, 10), o(9, 10, 10), o(8, 10, 9)];
        let bad = [o(5, 10, 10), o(4, 10, 10), o(3, 10, 9)];
        assert_eq!(bootstrap_pvalue_pooled(&good, &bad, 200, 1).unwrap(), 0.0);
        assert_eq!(bootstrap_pvalue_pooled(&good, &good, 200, 1).unwrap(), 0.5);
        assert_eq!(o(3, 4, 4).dsc(), 0.75);
        // Subjects of equal size: pooled and mean statistics agree in sign.
        let a = [o(9, 10, 10), o(2, 10, 10)];
        let b = [o(5, 10, 10), o(5, 10, 10)];
        let da: Vec<f64> = a.iter().map(Overlap::dsc).collect();
        let db: Vec<f64> = b.iter().map(Overlap::dsc).collect();
        assert_eq!(bootstrap_pvalue_pooled(&a, &b, 500, 3).unwrap(), bootstrap_pvalue(&da, &db, 500, 3).unwrap());
    }

    #[test]
    fn bootstrap_independent_of_thread_count() {
        let a: Vec<f64> = (0..7).map(|i| 0.7 + 0.03 * i as f64).collect();
        let b: Vec<f64> = (0..7).map(|i| 0.75 + 0.01 * (i % 3) as f64).collect();
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let wide = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let p1 = serial.install(|| bootstrap_pvalue(&a, &b, 500, 9).unwrap());
        let p3 = wide.install(|| bootstrap_pvalue(&a, &b, 500, 9).unwrap());
        assert_eq!(p1, p3);
    }
}
