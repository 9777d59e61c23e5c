//! Accuracy, clustering, semantic and frequency-bucketed AP metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    EmptySet,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("prediction for query {query_id}: {reason}")]
    InvalidPrediction { query_id: u64, reason: String },
    #[error("class {0:?} has no frequency bucket")]
    MissingBucket(String),
    #[error("buckets line {line}: {message}")]
    BucketParse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub query_id: u64,
    pub ground_truth: String,
    pub predicted_ordering: Vec<String>,
    pub confidence: f64,
}

impl LabeledPrediction {
    pub fn top1(&self) -> &str {
        &self.predicted_ordering[0]
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let fail = |reason: &str| EvalError::InvalidPrediction {
            query_id: self.query_id,
            reason: reason.into(),
        };
        if self.predicted_ordering.is_empty() {
            return Err(fail("empty ordering"));
        }
        let distinct: HashSet<&String> = self.predicted_ordering.iter().collect();
        if distinct.len() != self.predicted_ordering.len() {
            return Err(fail("repeated name in ordering"));
        }
        Ok(())
    }
}

fn validate_all(preds: &[LabeledPrediction]) -> Result<(), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptySet);
    }
    preds.iter().try_for_each(LabeledPrediction::validate)
}

pub fn topk_accuracy(preds: &[LabeledPrediction], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    validate_all(preds)?;
    let hits = preds
        .iter()
        .filter(|p| p.predicted_ordering.iter().take(k).any(|n| *n == p.ground_truth))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Maximum-weight assignment of rows to columns. The matrix is zero-padded
/// to square; `result[row]` is `None` when the row lands on a padding column.
pub fn hungarian_max(weights: &[Vec<u64>]) -> (u64, Vec<Option<usize>>) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return (0, Vec::new());
    }
    let w = |i: usize, j: usize| -> i64 {
        if i < rows && j < cols {
            weights[i][j] as i64
        } else {
            0
        }
    };
    let max_w = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| w(i, j)).max().unwrap_or(0);
    let cost = |i: usize, j: usize| max_w - w(i, j);

    // shortest augmenting path with potentials, 1-based with a virtual column 0
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![None; rows];
    let mut total = 0u64;
    for j in 1..=n {
        let i = owner[j] - 1;
        if i < rows && j - 1 < cols {
            result[i] = Some(j - 1);
            total += weights[i][j - 1];
        }
    }
    (total, result)
}

/// Optimal one-to-one naming of predicted clusters with ground-truth classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub predicted: Vec<String>,
    pub ground_truth: Vec<String>,
    /// Matched ground-truth name per predicted cluster.
    pub mapping: HashMap<String, Option<String>>,
    pub matched: u64,
    pub total: usize,
}

/// First-seen order, so results do not depend on hashing.
fn distinct_in_order<'a>(names: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    names.filter(|n| seen.insert(*n)).map(str::to_string).collect()
}

pub fn optimal_assignment(pairs: &[(String, String)]) -> Result<ClusterAssignment, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let predicted = distinct_in_order(pairs.iter().map(|(p, _)| p.as_str()));
    let ground_truth = distinct_in_order(pairs.iter().map(|(_, g)| g.as_str()));
    let p_idx: HashMap<&str, usize> = predicted.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let g_idx: HashMap<&str, usize> = ground_truth.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut confusion = vec![vec![0u64; ground_truth.len()]; predicted.len()];
    for (p, g) in pairs {
        confusion[p_idx[p.as_str()]][g_idx[g.as_str()]] += 1;
    }
    let (matched, rows) = hungarian_max(&confusion);
    let mapping = predicted
        .iter()
        .zip(&rows)
        .map(|(p, j)| (p.clone(), j.map(|j| ground_truth[j].clone())))
        .collect();
    Ok(ClusterAssignment {
        predicted,
        ground_truth,
        mapping,
        matched,
        total: pairs.len(),
    })
}

/// `pairs` are (predicted name, ground-truth name) per item.
pub fn clustering_accuracy(pairs: &[(String, String)]) -> Result<f64, EvalError> {
    let a = optimal_assignment(pairs)?;
    Ok(a.matched as f64 / a.total as f64)
}

pub fn exact_match(a: &str, b: &str) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

/// Per-item mean of `name_sim(cluster name, ground truth)`. A cluster is named
/// by its matched ground-truth class; an unmatched cluster keeps its own name.
pub fn semantic_accuracy<F>(pairs: &[(String, String)], name_sim: F) -> Result<f64, EvalError>
where
    F: Fn(&str, &str) -> f64,
{
    let a = optimal_assignment(pairs)?;
    let sum: f64 = pairs
        .iter()
        .map(|(p, g)| {
            let name = a.mapping[p].as_deref().unwrap_or(p);
            name_sim(name, g)
        })
        .sum();
    Ok(sum / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Rare,
    Common,
    Frequent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrequencyBuckets {
    map: HashMap<String, Frequency>,
}

impl FrequencyBuckets {
    pub fn new(map: HashMap<String, Frequency>) -> Self {
        FrequencyBuckets { map }
    }

    /// Lines of `name<TAB>rare|common|frequent`; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| EvalError::BucketParse { line: i + 1, message };
            let (name, bucket) = line.rsplit_once('\t').ok_or_else(|| err("missing tab".into()))?;
            let f = match bucket.trim() {
                "rare" => Frequency::Rare,
                "common" => Frequency::Common,
                "frequent" => Frequency::Frequent,
                other => return Err(err(format!("unknown bucket {other:?}"))),
            };
            if map.insert(name.to_string(), f).is_some() {
                return Err(err(format!("duplicate class {name:?}")));
            }
        }
        Ok(FrequencyBuckets { map })
    }

    pub fn get(&self, name: &str) -> Option<Frequency> {
        self.map.get(name).copied()
    }
}

/// All-point interpolated AP of a ranked list of hit flags against `positives`.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub rare: Option<f64>,
    pub common: Option<f64>,
    pub frequent: Option<f64>,
    pub all: f64,
    pub per_class: BTreeMap<String, f64>,
    pub classes: BTreeMap<Frequency, usize>,
}

pub fn bucketed_ap(preds: &[LabeledPrediction], buckets: &FrequencyBuckets) -> Result<ApReport, EvalError> {
    validate_all(preds)?;
    let mut gt_count: BTreeMap<&str, usize> = BTreeMap::new();
    for p in preds {
        *gt_count.entry(p.ground_truth.as_str()).or_default() += 1;
    }
    let mut by_predicted: HashMap<&str, Vec<&LabeledPrediction>> = HashMap::new();
    for p in preds {
        by_predicted.entry(p.top1()).or_default().push(p);
    }

    let mut per_class = BTreeMap::new();
    let mut sums: BTreeMap<Frequency, (f64, usize)> = BTreeMap::new();
    for (&class, &positives) in &gt_count {
        let bucket = buckets.get(class).ok_or_else(|| EvalError::MissingBucket(class.to_string()))?;
        let mut ranked = by_predicted.get(class).cloned().unwrap_or_default();
        ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.query_id.cmp(&b.query_id)));
        let hits: Vec<bool> = ranked.iter().map(|p| p.ground_truth == class).collect();
        let ap = average_precision(&hits, positives);
        per_class.insert(class.to_string(), ap);
        let s = sums.entry(bucket).or_default();
        s.0 += ap;
        s.1 += 1;
    }
    let mean = |f: Frequency| sums.get(&f).map(|(s, n)| s / *n as f64);
    Ok(ApReport {
        rare: mean(Frequency::Rare),
        common: mean(Frequency::Common),
        frequent: mean(Frequency::Frequent),
        all: per_class.values().sum::<f64>() / per_class.len() as f64,
        classes: sums.iter().map(|(f, (_, n))| (*f, *n)).collect(),
        per_class,
    })
}

/// Percentage with one decimal, halves rounded up.
pub fn format_percent(fraction: f64) -> String {
    // the small bias absorbs binary representation error at exact halves
    let tenths = (fraction * 1000.0 + 0.5 + 1e-7).floor();
    format!("{:.1}", tenths / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    /// `top_k[i]` is top-(i+1) accuracy.
    pub top_k: Vec<f64>,
    pub cacc: f64,
    pub sacc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<ApReport>,
    #[serde(default)]
    pub fallbacks: usize,
}

impl EvalReport {
    pub fn compute(
        preds: &[LabeledPrediction],
        max_k: usize,
        buckets: Option<&FrequencyBuckets>,
    ) -> Result<Self, EvalError> {
        validate_all(preds)?;
        let top_k = (1..=max_k.max(1)).map(|k| topk_accuracy(preds, k)).collect::<Result<_, _>>()?;
        let pairs: Vec<(String, String)> = preds
            .iter()
            .map(|p| (p.top1().to_string(), p.ground_truth.clone()))
            .collect();
        Ok(EvalReport {
            count: preds.len(),
            top_k,
            cacc: clustering_accuracy(&pairs)?,
            sacc: semantic_accuracy(&pairs, exact_match)?,
            ap: buckets.map(|b| bucketed_ap(preds, b)).transpose()?,
            fallbacks: 0,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("queries: {}\n", self.count);
        for (i, acc) in self.top_k.iter().enumerate() {
            out.push_str(&format!("top-{} accuracy: {}%\n", i + 1, format_percent(*acc)));
        }
        out.push_str(&format!("cACC: {}%\n", format_percent(self.cacc)));
        out.push_str(&format!("sACC: {}%\n", format_percent(self.sacc)));
        if let Some(ap) = &self.ap {
            let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{}%", format_percent(x)));
            out.push_str(&format!("AP_r: {}\n", cell(ap.rare)));
            out.push_str(&format!("AP_c: {}\n", cell(ap.common)));
            out.push_str(&format!("AP_f: {}\n", cell(ap.frequent)));
            out.push_str(&format!("AP_all: {}%\n", format_percent(ap.all)));
        }
        out.push_str(&format!("fallbacks: {}\n", self.fallbacks));
        out
    }
}
