use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// ASCII characters are lowercased and kept only if alphanumeric; anything
/// else (CJK, Latin-1, emoji) passes through unchanged.
pub fn normalize(s: &str) -> String {
    s.chars()
        .filter_map(|c| {
            if c.is_ascii() {
                c.is_ascii_alphanumeric().then(|| c.to_ascii_lowercase())
            } else {
                Some(c)
            }
        })
        .collect()
}

/// Edit distance over characters (unit insert, delete, substitute).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Per-pair CER on normalized strings.
pub fn pair_cer(pred: &str, gt: &str) -> f64 {
    let (p, g) = (normalize(pred), normalize(gt));
    levenshtein(&p, &g) as f64 / g.chars().count().max(1) as f64
}

pub fn pair_correct(pred: &str, gt: &str) -> bool {
    normalize(pred) == normalize(gt)
}

/// Fraction of `(pred, gt)` pairs that match after normalization.
pub fn word_accuracy<P: AsRef<str>, G: AsRef<str>>(pairs: &[(P, G)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let ok = pairs.iter().filter(|(p, g)| pair_correct(p.as_ref(), g.as_ref())).count();
    Ok(ok as f64 / pairs.len() as f64)
}

/// Mean of `levenshtein(pred, gt) / max(1, |gt|)` over normalized pairs.
pub fn char_error_rate<P: AsRef<str>, G: AsRef<str>>(pairs: &[(P, G)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    Ok(pairs.iter().map(|(p, g)| pair_cer(p.as_ref(), g.as_ref())).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub gt_text: String,
    pub pred_text: String,
    pub height_px: usize,
    pub word_correct: bool,
    pub cer: f64,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, gt_text: impl Into<String>, pred_text: impl Into<String>, height_px: usize) -> Self {
        let (gt_text, pred_text) = (gt_text.into(), pred_text.into());
        EvalRecord {
            id: id.into(),
            word_correct: pair_correct(&pred_text, &gt_text),
            cer: pair_cer(&pred_text, &gt_text),
            gt_text,
            pred_text,
            height_px,
        }
    }
}

/// Summary over a record set.
pub fn summarize(records: &[EvalRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let n = records.len() as f64;
    let acc = records.iter().filter(|r| r.word_correct).count() as f64 / n;
    let cer = records.iter().map(|r| r.cer).sum::<f64>() / n;
    Ok((acc, cer))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeightBuckets {
    /// Height below 32 px.
    pub small: Vec<EvalRecord>,
    /// 32 to 63 px.
    pub medium: Vec<EvalRecord>,
    /// 64 px and up.
    pub large: Vec<EvalRecord>,
}

pub fn bucket_by_height(records: &[EvalRecord]) -> HeightBuckets {
    let mut b = HeightBuckets::default();
    for r in records {
        match r.height_px {
            h if h < 32 => b.small.push(r.clone()),
            h if h < 64 => b.medium.push(r.clone()),
            _ => b.large.push(r.clone()),
        }
    }
    b
}
