//! Precision/recall evaluation of top-1 retrieval under a frame tolerance.

use std::collections::HashMap;
use std::io::Write;

use super::QueryResult;
use crate::error::{Error, Result};
use crate::trainer::Manifest;

/// Frame indices of queries and map images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub query_frames: HashMap<String, i64>,
    pub map_frames: HashMap<String, i64>,
}

impl GroundTruth {
    pub fn from_manifests(queries: &Manifest, map: &Manifest) -> Self {
        let frames = |m: &Manifest| {
            m.entries
                .iter()
                .filter_map(|e| e.frame.map(|f| (e.id.clone(), f)))
                .collect()
        };
        Self {
            query_frames: frames(queries),
            map_frames: frames(map),
        }
    }

    fn is_match(&self, query_frame: i64, map_id: &str, vision_offset: i64) -> Option<bool> {
        self.map_frames
            .get(map_id)
            .map(|&f| (f - query_frame).abs() <= vision_offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// Ordered by descending threshold.
    pub points: Vec<PrPoint>,
    /// Fraction in `[0, 1]`.
    pub precision_at_full_recall: f64,
}

impl PrCurve {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "threshold,precision,recall")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall)?;
        }
        writeln!(out, "{}", self.summary())
    }

    pub fn summary(&self) -> String {
        format!(
            "# precision_at_full_recall={:.1}",
            self.precision_at_full_recall * 100.0
        )
    }
}

/// Top-1 correctness per query, failing on any missing frame.
fn top1_correctness(
    results: &[QueryResult],
    gt: &GroundTruth,
    vision_offset: i64,
) -> Result<Vec<(f64, bool)>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        let Some(&qf) = gt.query_frames.get(&r.query_id) else {
            missing.push(r.query_id.clone());
            continue;
        };
        let correct = match r.top1() {
            None => Some(false),
            Some(id) => gt.is_match(qf, id, vision_offset),
        };
        match correct {
            Some(c) => out.push((r.best_score, c)),
            None => missing.push(r.query_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    Ok(out)
}

/// Sweeps a threshold over the best scores. At threshold θ the queries with
/// `best_score ≥ θ` count as retrieved; precision is the correct fraction of
/// those and recall the retrieved fraction of all queries.
pub fn evaluate(results: &[QueryResult], gt: &GroundTruth, vision_offset: i64) -> Result<PrCurve> {
    if results.is_empty() {
        return Err(Error::dataset("no query results to evaluate"));
    }
    let mut scored = top1_correctness(results, gt, vision_offset)?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total = scored.len() as f64;
    let mut points = Vec::new();
    let mut correct = 0usize;
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            correct += scored[i].1 as usize;
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: correct as f64 / i as f64,
            recall: i as f64 / total,
        });
    }
    let precision_at_full_recall = points.last().map_or(0.0, |p| p.precision);
    Ok(PrCurve {
        points,
        precision_at_full_recall,
    })
}

/// For each `k`, the fraction of queries with at least one correct map image
/// among their first `k` ranked results.
pub fn holistic_precision_vs_topk(
    results: &[QueryResult],
    gt: &GroundTruth,
    vision_offset: i64,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let mut missing = Vec::new();
    let mut first_hit: Vec<Option<usize>> = Vec::with_capacity(results.len());
    for r in results {
        let Some(&qf) = gt.query_frames.get(&r.query_id) else {
            missing.push(r.query_id.clone());
            continue;
        };
        let mut hit = None;
        for (rank, (id, _)) in r.ranked.iter().enumerate() {
            match gt.is_match(qf, id, vision_offset) {
                Some(true) => {
                    hit = Some(rank);
                    break;
                }
                Some(false) => {}
                None => {
                    missing.push(r.query_id.clone());
                    break;
                }
            }
        }
        first_hit.push(hit);
    }
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    let total = first_hit.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count();
            (k, hits as f64 / total)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(queries: &[(&str, i64)], map: &[(&str, i64)]) -> GroundTruth {
        GroundTruth {
            query_frames: queries.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            map_frames: map.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn result(q: &str, ranked: &[(&str, f64)]) -> QueryResult {
        QueryResult {
            query_id: q.into(),
            ranked: ranked.iter().map(|(a, b)| (a.to_string(), *b)).collect(),
            best_score: ranked.first().map_or(0.0, |r| r.1),
        }
    }

    #[test]
    fn vision_offset_boundary() {
        let g = gt(&[("q", 10)], &[("m13", 13), ("m14", 14)]);
        let ok = evaluate(&[result("q", &[("m13", 1.0)])], &g, 3).unwrap();
        assert_eq!(ok.precision_at_full_recall, 1.0);
        let bad = evaluate(&[result("q", &[("m14", 1.0)])], &g, 3).unwrap();
        assert_eq!(bad.precision_at_full_recall, 0.0);
    }

    #[test]
    fn all_correct_is_perfect() {
        let g = gt(&[("a", 1), ("b", 2)], &[("x", 1), ("y", 2)]);
        let c = evaluate(&[result("a", &[("x", 0.3)]), result("b", &[("y", 0.9)])], &g, 0).unwrap();
        assert!(c.points.iter().all(|p| p.precision == 1.0));
        assert_eq!(c.precision_at_full_recall, 1.0);
        assert_eq!(c.summary(), "# precision_at_full_recall=100.0");
    }

    #[test]
    fn hand_enumerated_sweep() {
        // scores .9 correct, .8 correct, .7 wrong, .6 correct
        let g = gt(
            &[("a", 0), ("b", 1), ("c", 2), ("d", 3)],
            &[("m0", 0), ("m1", 1), ("m2", 2), ("m3", 3), ("mx", 50)],
        );
        let rs = vec![
            result("c", &[("mx", 0.7)]),
            result("a", &[("m0", 0.9)]),
            result("d", &[("m3", 0.6)]),
            result("b", &[("m1", 0.8)]),
        ];
        let c = evaluate(&rs, &g, 0).unwrap();
        let expect = [
            (0.9, 1.0, 0.25),
            (0.8, 1.0, 0.5),
            (0.7, 2.0 / 3.0, 0.75),
            (0.6, 0.75, 1.0),
        ];
        assert_eq!(c.points.len(), 4);
        for (p, e) in c.points.iter().zip(expect) {
            assert_eq!((p.threshold, p.precision, p.recall), e);
        }
        assert_eq!(c.precision_at_full_recall, 0.75);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("threshold,precision,recall\n0.9,1,0.25\n"));
        assert!(text.ends_with("# precision_at_full_recall=75.0\n"));
    }

    #[test]
    fn missing_ground_truth_lists_queries() {
        let g = gt(&[("a", 0)], &[("m", 0)]);
        let rs = vec![result("a", &[("m", 1.0)]), result("b", &[("m", 1.0)]), result("c", &[("m", 1.0)])];
        match evaluate(&rs, &g, 0) {
            Err(Error::MissingGroundTruth(ids)) => assert_eq!(ids, vec!["b", "c"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn topk_membership() {
        let g = gt(&[("a", 0), ("b", 1)], &[("m0", 0), ("m1", 1), ("m2", 2)]);
        let rs = vec![
            result("a", &[("m2", 0.9), ("m1", 0.8), ("m0", 0.1)]),
            result("b", &[("m1", 0.9), ("m2", 0.5), ("m0", 0.1)]),
        ];
        let t = holistic_precision_vs_topk(&rs, &g, 0, &[1, 2, 3]).unwrap();
        assert_eq!(t, vec![(1, 0.5), (2, 0.5), (3, 1.0)]);
        let top1 = evaluate(&rs, &g, 0).unwrap().precision_at_full_recall;
        assert_eq!(t[0].1, top1);
    }
}
