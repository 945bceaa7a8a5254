//! Representation and task metrics.
//!
//! Alignment and uniformity both L2-normalise features first.
//! Alignment is the mean squared distance over same-class pairs, and
//! uniformity is `log mean exp(−2‖a−b‖²)` over distinct pairs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::latentdr::dump::LatentDump;
use crate::latentdr::{degrade, restore, AugmentRngs};
use crate::model::ModelBundle;
use crate::rng::RngStreams;
use crate::tensor::{Graph, Tensor};

/// Above this many same-class pairs alignment is estimated from a seeded
/// sample of pairs.
pub const ALIGNMENT_PAIR_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentScore {
    pub value: f64,
    pub pair_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformityScore {
    pub value: f64,
    pub pair_count: usize,
}

/// Rows scaled to unit length; all-zero rows stay zero.
pub fn l2_normalize(features: &Tensor) -> Tensor {
    let d = features.cols();
    let mut out = features.clone();
    for row in out.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn alignment(features: &Tensor, classes: &[usize]) -> Result<AlignmentScore> {
    alignment_capped(features, classes, ALIGNMENT_PAIR_CAP, 0)
}

/// Exact below `cap` pairs; otherwise the mean over `cap` pairs drawn
/// uniformly (with replacement) from all same-class pairs.
pub fn alignment_capped(features: &Tensor, classes: &[usize], cap: usize, seed: u64) -> Result<AlignmentScore> {
    if classes.len() != features.rows() {
        return Err(Error::Dimension {
            op: "alignment",
            lhs: features.shape().to_vec(),
            rhs: vec![classes.len()],
        });
    }
    let z = l2_normalize(features);
    let n_classes = classes.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in classes.iter().enumerate() {
        members[c].push(i);
    }
    let pairs_per_class: Vec<usize> = members.iter().map(|m| m.len() * m.len().saturating_sub(1) / 2).collect();
    let total: usize = pairs_per_class.iter().sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("alignment needs a class with two samples".into()));
    }
    if total <= cap {
        let mut sum = 0.0;
        for m in &members {
            for (a, &i) in m.iter().enumerate() {
                for &j in &m[a + 1..] {
                    sum += sq_dist(z.row(i), z.row(j));
                }
            }
        }
        return Ok(AlignmentScore {
            value: sum / total as f64,
            pair_count: total,
        });
    }
    let mut rng = RngStreams::new(seed).stream("metrics/alignment");
    let mut sum = 0.0;
    for _ in 0..cap {
        let mut k = rng.gen_range(0..total);
        let c = pairs_per_class
            .iter()
            .position(|&p| {
                if k < p {
                    true
                } else {
                    k -= p;
                    false
                }
            })
            .expect("k < total");
        let (i, j) = unrank_pair(k, members[c].len());
        sum += sq_dist(z.row(members[c][i]), z.row(members[c][j]));
    }
    Ok(AlignmentScore {
        value: sum / cap as f64,
        pair_count: cap,
    })
}

/// The `k`-th pair `(i, j)`, `i < j < n`, in row-major order.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    unreachable!("pair rank out of range")
}

pub fn uniformity(features: &Tensor) -> Result<UniformityScore> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!("uniformity needs two samples, got {n}")));
    }
    let z = l2_normalize(features);
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += (-2.0 * sq_dist(z.row(i), z.row(j))).exp();
        }
    }
    let pairs = n * (n - 1) / 2;
    Ok(UniformityScore {
        value: (sum / pairs as f64).ln(),
        pair_count: pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracySuite {
    pub clean: f64,
    pub degraded: f64,
    pub restored: f64,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Row ranges of at most `batch` rows; a trailing chunk of one row is
/// merged into its predecessor so every chunk has at least two rows.
pub fn eval_chunks(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let batch = batch.max(2);
    let mut chunks: Vec<std::ops::Range<usize>> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|r| r.len() == 1) {
        let last = chunks.pop().expect("nonempty");
        chunks.last_mut().expect("nonempty").end = last.end;
    }
    chunks
}

/// Clean, degraded and restored accuracy in evaluation mode. The split is
/// processed in chunks of `batch` rows, which is the mixing population
/// seen by the degrader.
pub fn accuracy_suite(
    bundle: &ModelBundle,
    x: &Tensor,
    labels: &[usize],
    batch: usize,
    rngs: &mut AugmentRngs,
) -> Result<AccuracySuite> {
    if labels.is_empty() || x.rows() != labels.len() {
        return Err(Error::Validation(format!(
            "accuracy suite needs a nonempty split with one label per row ({} rows, {} labels)",
            x.rows(),
            labels.len()
        )));
    }
    let (degrader, restorer) = match (&bundle.degrader, &bundle.restorer) {
        (Some(d), Some(r)) => (d, r),
        _ => return Err(Error::Config("accuracy suite needs both operators".into())),
    };
    let reg = &bundle.registry;
    let (mut clean, mut degraded, mut restored) = (Vec::new(), Vec::new(), Vec::new());
    for range in eval_chunks(labels.len(), batch) {
        let idx: Vec<usize> = range.collect();
        let mut g = Graph::new();
        let xv = g.constant(x.select_rows(&idx)?);
        let z = bundle.encode(&mut g, xv)?;
        let logits = bundle.classify(&mut g, z)?;
        clean.extend(g.value(logits).argmax_rows());
        if idx.len() < degrader.min_batch() {
            // a lone row cannot be mixed with anything; count it as undegraded
            degraded.extend(g.value(logits).argmax_rows());
            restored.extend(g.value(logits).argmax_rows());
            continue;
        }
        let z_d = degrade(&mut g, reg, z, degrader, false, rngs)?.output;
        let logits_d = bundle.classify_augmented(&mut g, z_d)?;
        degraded.extend(g.value(logits_d).argmax_rows());
        let z_r = restore(&mut g, reg, z_d, z, restorer, false, &mut rngs.restore_dropout)?;
        let logits_r = bundle.classify_augmented(&mut g, z_r)?;
        restored.extend(g.value(logits_r).argmax_rows());
    }
    Ok(AccuracySuite {
        clean: accuracy(&clean, labels),
        degraded: accuracy(&degraded, labels),
        restored: accuracy(&restored, labels),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NnQueryResult {
    pub query_id: Option<usize>,
    pub neighbor_ids: Vec<usize>,
    pub distances: Vec<f64>,
    pub neighbor_classes: Vec<usize>,
    pub neighbor_domains: Vec<usize>,
}

/// Labels attached to the rows of a neighbour bank.
#[derive(Clone, Copy, Debug)]
pub struct NnBank<'a> {
    pub features: &'a Tensor,
    pub classes: &'a [usize],
    pub domains: &'a [usize],
}

/// The `k` closest bank rows by Euclidean distance, ties to the lower
/// index. `query_id` (if the query is itself a bank row) is skipped.
pub fn nearest_neighbors(query: &[f64], bank: NnBank<'_>, k: usize, query_id: Option<usize>) -> Result<NnQueryResult> {
    let n = bank.features.rows();
    if query.len() != bank.features.cols() || bank.classes.len() != n || bank.domains.len() != n {
        return Err(Error::Dimension {
            op: "nearest_neighbors",
            lhs: bank.features.shape().to_vec(),
            rhs: vec![query.len()],
        });
    }
    let available = n - usize::from(query_id.is_some_and(|q| q < n));
    if k > available {
        return Err(Error::Range {
            what: "neighbour count",
            value: k,
            limit: available,
        });
    }
    let mut cand: Vec<(f64, usize)> = (0..n)
        .filter(|&i| Some(i) != query_id)
        .map(|i| (sq_dist(query, bank.features.row(i)).sqrt(), i))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.truncate(k);
    Ok(NnQueryResult {
        query_id,
        neighbor_ids: cand.iter().map(|c| c.1).collect(),
        distances: cand.iter().map(|c| c.0).collect(),
        neighbor_classes: cand.iter().map(|c| bank.classes[c.1]).collect(),
        neighbor_domains: cand.iter().map(|c| bank.domains[c.1]).collect(),
    })
}

/// Alignment and uniformity of each tensor group in a latent dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpMetrics {
    pub rows: Vec<(&'static str, Option<f64>, Option<f64>)>,
}

pub fn dump_metrics(dump: &LatentDump) -> DumpMetrics {
    let rows = [("z", &dump.z), ("z_d", &dump.z_d), ("z_r", &dump.z_r)]
        .into_iter()
        .map(|(name, t)| {
            (
                name,
                alignment(t, &dump.labels).ok().map(|s| s.value),
                uniformity(t).ok().map(|s| s.value),
            )
        })
        .collect();
    DumpMetrics { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_closed_forms() {
        let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert_eq!(alignment(&same, &[0, 0, 1]).unwrap().value, 0.0);
        // unit vectors at squared distance 0.25: cos = 1 − 0.125
        let c: f64 = 0.875;
        let s = (1.0 - c * c).sqrt();
        let pair = Tensor::from_rows(&[[1.0, 0.0], [c, s]]).unwrap();
        let a = alignment(&pair, &[0, 0]).unwrap();
        assert!((a.value - 0.25).abs() < 1e-15);
        assert_eq!(a.pair_count, 1);
        assert!(matches!(alignment(&pair, &[0, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn uniformity_closed_forms() {
        let same = Tensor::from_rows(&[[0.0, 3.0], [0.0, 3.0], [0.0, 3.0]]).unwrap();
        assert_eq!(uniformity(&same).unwrap().value, 0.0);
        let anti = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(uniformity(&anti).unwrap().value, -8.0);
        assert!(uniformity(&Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn unrank_enumerates_pairs() {
        let n = 5;
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(unrank_pair(k, n), (i, j));
                k += 1;
            }
        }
    }

    #[test]
    fn capped_alignment_is_close() {
        let mut rng = RngStreams::new(1).stream("x");
        let data: Vec<f64> = (0..60 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::matrix(60, 3, data).unwrap();
        let classes: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let exact = alignment(&x, &classes).unwrap();
        assert_eq!(exact.pair_count, 870);
        let approx = alignment_capped(&x, &classes, 500, 3).unwrap();
        assert_eq!(approx.pair_count, 500);
        assert!((exact.value - approx.value).abs() < 0.1 * exact.value);
        assert_eq!(approx, alignment_capped(&x, &classes, 500, 3).unwrap());
    }

    #[test]
    fn chunks_never_leave_a_single_row() {
        assert_eq!(eval_chunks(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(eval_chunks(9, 4), vec![0..4, 4..9]);
        assert_eq!(eval_chunks(1, 4), vec![0..1]);
    }

    #[test]
    fn neighbour_with_duplicate_row() {
        let bank = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [3.0, 0.0]]).unwrap();
        let b = NnBank { features: &bank, classes: &[0, 1, 1, 2], domains: &[0, 0, 1, 1] };
        let r = nearest_neighbors(&[1.0, 1.0], b, 2, Some(1)).unwrap();
        assert_eq!(r.neighbor_ids, vec![2, 0]);
        assert_eq!(r.distances[0], 0.0);
        assert_eq!(r.neighbor_domains, vec![1, 0]);
        assert!(matches!(nearest_neighbors(&[1.0, 1.0], b, 4, Some(1)), Err(Error::Range { .. })));
        let all = nearest_neighbors(&[0.0, 0.0], b, 4, None).unwrap();
        assert_eq!(all.neighbor_ids, vec![0, 1, 2, 3]);
    }
}
