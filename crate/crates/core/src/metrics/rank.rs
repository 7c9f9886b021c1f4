use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("metric scores"));
    }
    let mut pos = 0;
    for &l in labels {
        if l == 1.0 {
            pos += 1;
        } else if l != 0.0 {
            return Err(Error::contract(format!("label {l} is not 0 or 1")));
        }
    }
    Ok((pos, labels.len() - pos))
}

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve by the Mann–Whitney statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let ranks = midranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1.0).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((r_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision. Scores are visited in descending order one tie block
/// at a time; each block contributes its share of positives times the
/// precision at the end of the block.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let p = pos as f64;
    let (mut tp, mut seen, mut ap) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut dtp = 0.0;
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            dtp += labels[idx[j]];
            j += 1;
        }
        tp += dtp;
        seen += (j - i) as f64;
        if dtp > 0.0 {
            ap += dtp / p * (tp / seen);
        }
        i = j;
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(auroc(&s, &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auroc(&s, &[1.0; 4]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auprc_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(auprc(&s, &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((auprc(&s, &[1.0, 0.0, 1.0, 0.0]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(auprc(&[0.4; 5], &[1.0, 0.0, 1.0, 0.0, 0.0]).unwrap(), 0.4);
        assert!(matches!(auprc(&s, &[0.0; 4]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn labels_must_be_binary() {
        assert!(matches!(auroc(&[0.1, 0.2], &[1.0, 0.5]), Err(Error::Contract(_))));
        assert!(matches!(auroc(&[0.1], &[1.0, 0.0]), Err(Error::Shape { .. })));
    }
}
