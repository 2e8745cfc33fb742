//! Iterative self-training: retrain, promote the most confident unlabeled
//! sample, repeat.

use crate::coarse::logistic::{LogisticClassifier, TrainConfig};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Unlabeled {
    pub id: u64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IterativeOutcome {
    pub classifier: LogisticClassifier,
    /// Retrain rounds performed.
    pub iterations: usize,
    /// Promoted samples in promotion order.
    pub promoted: Vec<(u64, String)>,
}

/// Runs `min(|unlabeled|, max_rounds)` rounds. Each round trains on the
/// current labeled set, starting from the previous round's weights, and
/// promotes the single most confident unlabeled
/// sample (ties go to the smaller id). Seeds are never relabeled. With no
/// rounds the classifier is trained once on the seeds.
pub fn iterative_classify(
    labeled: &[(Vec<f64>, String)],
    unlabeled: &[Unlabeled],
    cfg: &TrainConfig,
    max_rounds: Option<usize>,
) -> Result<IterativeOutcome> {
    let mut xs: Vec<&[f64]> = labeled.iter().map(|(x, _)| x.as_slice()).collect();
    let mut ys: Vec<String> = labeled.iter().map(|(_, y)| y.clone()).collect();
    let mut pool: Vec<&Unlabeled> = unlabeled.iter().collect();
    pool.sort_by_key(|u| u.id);
    let rounds = max_rounds.map_or(pool.len(), |m| m.min(pool.len()));

    let train = |xs: &[&[f64]], ys: &[String], init: Option<&LogisticClassifier>| {
        let yr: Vec<&str> = ys.iter().map(String::as_str).collect();
        LogisticClassifier::train_from(xs, &yr, cfg, init)
    };

    let mut promoted = Vec::with_capacity(rounds);
    let mut classifier: Option<LogisticClassifier> = None;
    for _ in 0..rounds {
        let clf = train(&xs, &ys, classifier.as_ref())?;
        let mut best: Option<(usize, f64, String)> = None;
        for (i, u) in pool.iter().enumerate() {
            let p = clf.predict(&u.x);
            if best.as_ref().is_none_or(|b| p.confidence > b.1) {
                best = Some((i, p.confidence, p.label));
            }
        }
        let (i, _, label) = best.expect("pool is non-empty");
        let u = pool.remove(i);
        xs.push(&u.x);
        ys.push(label.clone());
        promoted.push((u.id, label));
        classifier = Some(clf);
    }
    let classifier = match classifier {
        Some(c) => c,
        None => train(&xs, &ys, None)?,
    };
    Ok(IterativeOutcome {
        classifier,
        iterations: rounds,
        promoted,
    })
}
