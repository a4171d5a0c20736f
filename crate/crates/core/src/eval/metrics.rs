use serde::{Deserialize, Serialize};

use crate::domain::{argmax_situation, ProbabilityVector, Situation, TaxonomySubset};
use crate::error::{invalid, Result};

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: {a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(invalid(format!("{what}: no samples")));
    }
    Ok(())
}

/// Common taxonomy of a list of distributions, checked against the labels.
fn taxonomy_of(probs: &[ProbabilityVector], labels: &[Situation]) -> Result<TaxonomySubset> {
    let tax = probs[0].taxonomy();
    if probs.iter().any(|p| p.taxonomy() != tax) {
        return Err(invalid("probability vectors have different class counts"));
    }
    if let Some(l) = labels.iter().find(|l| !tax.contains(**l)) {
        return Err(invalid(format!("label {l} is outside the C={} taxonomy", tax.size())));
    }
    Ok(tax)
}

/// Percent of exact matches.
pub fn accuracy(preds: &[Situation], labels: &[Situation]) -> Result<f64> {
    check_lengths(preds.len(), labels.len(), "accuracy")?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Percent of samples whose label is among the `k` most probable tags
/// (ties broken in canonical order).
pub fn accuracy_at_k(probs: &[ProbabilityVector], labels: &[Situation], k: usize) -> Result<f64> {
    check_lengths(probs.len(), labels.len(), "accuracy@k")?;
    let c = taxonomy_of(probs, labels)?.size();
    if k == 0 || k > c {
        return Err(invalid(format!("K must be within 1..={c}, got {k}")));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.ranked().iter().take(k).any(|(s, _)| s == *l))
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub macro_auc: f64,
    pub per_class: Vec<(Situation, f64)>,
    /// Classes of the taxonomy with no positive or no negative sample.
    pub skipped: Vec<Situation>,
}

/// Mann-Whitney AUC of `scores` for the positives, with midranks for ties.
fn rank_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|p| **p).count() as f64;
    let n_neg = n as f64 - n_pos;
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Macro one-vs-rest AUC over the classes present in `labels`.
pub fn macro_auc_ovr(probs: &[ProbabilityVector], labels: &[Situation]) -> Result<AucResult> {
    check_lengths(probs.len(), labels.len(), "auc")?;
    let tax = taxonomy_of(probs, labels)?;
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for (k, &c) in tax.members().iter().enumerate() {
        let positive: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        let n_pos = positive.iter().filter(|p| **p).count();
        if n_pos == 0 || n_pos == labels.len() {
            skipped.push(c);
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p.as_slice()[k]).collect();
        per_class.push((c, rank_auc(&scores, &positive)));
    }
    if per_class.len() < 2 {
        return Err(invalid("AUC is undefined with fewer than two classes present"));
    }
    let macro_auc = per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64;
    Ok(AucResult {
        macro_auc,
        per_class,
        skipped,
    })
}

/// Counts with rows = true class and columns = predicted class, in
/// canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub taxonomy: TaxonomySubset,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(taxonomy: TaxonomySubset) -> Self {
        let c = taxonomy.size();
        ConfusionMatrix {
            taxonomy,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.taxonomy.size())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.taxonomy != self.taxonomy {
            return Err(invalid("confusion matrices have different taxonomies"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Header row of predicted tags, then one row per true tag.
    pub fn to_csv(&self) -> String {
        let tags = self.taxonomy.members();
        let mut out = String::from("true\\predicted");
        for t in tags {
            out.push(',');
            out.push_str(t.as_str());
        }
        out.push('\n');
        for (t, row) in tags.iter().zip(&self.counts) {
            out.push_str(t.as_str());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(preds: &[Situation], labels: &[Situation], taxonomy: TaxonomySubset) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(invalid(format!("confusion matrix: {} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut m = ConfusionMatrix::new(taxonomy);
    for (p, l) in preds.iter().zip(labels) {
        if !taxonomy.contains(*p) || !taxonomy.contains(*l) {
            return Err(invalid(format!("{l} -> {p} is outside the C={} taxonomy", taxonomy.size())));
        }
        m.counts[l.index()][p.index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointOverlap {
    pub uamat_accuracy: f64,
    pub sp_accuracy: f64,
    /// Percent of streams both branches get right.
    pub overlap: f64,
}

pub fn joint_overlap(uamat: &[ProbabilityVector], sp: &[ProbabilityVector], labels: &[Situation]) -> Result<JointOverlap> {
    check_lengths(uamat.len(), labels.len(), "joint overlap (uamat)")?;
    check_lengths(sp.len(), labels.len(), "joint overlap (sp)")?;
    let a: Vec<Situation> = uamat.iter().map(argmax_situation).collect();
    let b: Vec<Situation> = sp.iter().map(argmax_situation).collect();
    let both = labels
        .iter()
        .enumerate()
        .filter(|&(i, l)| a[i] == *l && b[i] == *l)
        .count();
    let result = JointOverlap {
        uamat_accuracy: accuracy(&a, labels)?,
        sp_accuracy: accuracy(&b, labels)?,
        overlap: 100.0 * both as f64 / labels.len() as f64,
    };
    assert!(result.overlap <= result.uamat_accuracy.min(result.sp_accuracy));
    Ok(result)
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for a single
/// value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = f.precision().unwrap_or(2);
        write!(f, "{:.p$}({:.p$})", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Situation::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[Work, Gym], &[Work, Gym]).unwrap(), 100.0);
        assert_eq!(accuracy(&[Work, Gym], &[Gym, Work]).unwrap(), 0.0);
        assert!((accuracy(&[Work, Gym, Party], &[Work, Gym, Work]).unwrap() - 66.67).abs() < 0.01);
        assert!(accuracy(&[Work], &[Work, Gym]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn top_k_ties_use_canonical_order() {
        let p = [pv(&[0.3, 0.3, 0.3, 0.1])];
        assert_eq!(accuracy_at_k(&p, &[Party], 2).unwrap(), 0.0);
        assert_eq!(accuracy_at_k(&p, &[Gym], 2).unwrap(), 100.0);
        assert!(accuracy_at_k(&p, &[Gym], 0).is_err());
        assert!(accuracy_at_k(&p, &[Gym], 5).is_err());
        assert!(accuracy_at_k(&p, &[TaxonomySubset::C8.members()[5]], 1).is_err());
    }

    #[test]
    fn auc_examples() {
        let probs = [
            pv(&[0.7, 0.1, 0.1, 0.1]),
            pv(&[0.6, 0.2, 0.1, 0.1]),
            pv(&[0.1, 0.7, 0.1, 0.1]),
            pv(&[0.1, 0.1, 0.1, 0.7]),
        ];
        let perfect = macro_auc_ovr(&probs, &[Work, Work, Gym, Sleep]).unwrap();
        assert_eq!(perfect.macro_auc, 1.0);
        assert_eq!(perfect.skipped, [Party]);
        let flat = vec![pv(&[0.25; 4]); 6];
        let labels = [Work, Gym, Party, Sleep, Work, Gym];
        assert_eq!(macro_auc_ovr(&flat, &labels).unwrap().macro_auc, 0.5);
        let r = macro_auc_ovr(&flat[..3], &[Work, Gym, Work]).unwrap();
        assert_eq!(r.skipped, [Party, Sleep]);
        assert!(macro_auc_ovr(&flat[..2], &[Work, Work]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let labels = [Work, Gym, Gym, Party];
        let m = confusion_matrix(&labels, &labels, TaxonomySubset::C4).unwrap();
        assert_eq!(m.counts[1][1], 2);
        assert_eq!(m.total(), 4);
        assert!((0..4).all(|i| (0..4).all(|j| i == j || m.counts[i][j] == 0)));
        let m = confusion_matrix(&[Gym, Gym, Work, Gym], &labels, TaxonomySubset::C4).unwrap();
        assert_eq!(m.column_sums(), [1, 3, 0, 0]);
        assert_eq!(m.row_sums(), [1, 2, 1, 0]);
        assert!(m.to_csv().starts_with("true\\predicted,work,gym,party,sleep\nwork,0,1,0,0\n"));
    }

    #[test]
    fn overlap_examples() {
        let a = [pv(&[0.7, 0.1, 0.1, 0.1]), pv(&[0.1, 0.7, 0.1, 0.1])];
        let b = [pv(&[0.1, 0.7, 0.1, 0.1]), pv(&[0.1, 0.7, 0.1, 0.1])];
        let labels = [Work, Gym];
        let same = joint_overlap(&a, &a, &labels).unwrap();
        assert_eq!((same.overlap, same.uamat_accuracy), (100.0, 100.0));
        let disjoint = joint_overlap(&a, &b, &[Work, Party]).unwrap();
        assert_eq!((disjoint.uamat_accuracy, disjoint.sp_accuracy, disjoint.overlap), (50.0, 0.0, 0.0));
        assert!(joint_overlap(&a, &b[..1], &labels).is_err());
    }

    #[test]
    fn mean_std_formatting() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(m.to_string(), "2.00(1.00)");
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
