//! Plot-ready report tables: ranked rows, cumulative re-evaluated utility
//! curves with running min/max bands, expected tie-broken curves for mean
//! rankings, and confidence whiskers. All numbers come from re-evaluation
//! samples and stored bounds, never from recomputed statistics, so the
//! tables are pure functions of (ranking, re-evaluation report).

use serde::{Deserialize, Serialize};

use crate::runner::ReevalReport;
use crate::space::TemplateId;

pub const REPORT_FORMAT: &str = "coup-report/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub rank: u64,
    pub id: TemplateId,
    pub score: f64,
    pub m: u64,
    pub lcb: f64,
    pub ucb: f64,
    pub reeval_mean: f64,
    pub reeval_m: u64,
}

pub fn ranking_rows(reeval: &ReevalReport) -> Vec<RankingRow> {
    reeval
        .entries
        .iter()
        .map(|e| RankingRow {
            rank: e.rank,
            id: e.id.clone(),
            score: e.score,
            m: e.run_m,
            lcb: e.lcb,
            ucb: e.ucb,
            reeval_mean: e.reeval_mean,
            reeval_m: e.run_m + e.fresh_m,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: u64,
    pub cumulative_average: f64,
    pub running_min: f64,
    pub running_max: f64,
}

/// Cumulative average of re-evaluated utility over the ranking prefix,
/// with running min/max bands.
pub fn cumulative_curve(reeval: &ReevalReport) -> Vec<CurvePoint> {
    let mut out = Vec::with_capacity(reeval.entries.len());
    let mut sum = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, e) in reeval.entries.iter().enumerate() {
        sum += e.reeval_mean;
        lo = lo.min(e.reeval_mean);
        hi = hi.max(e.reeval_mean);
        out.push(CurvePoint {
            k: i as u64 + 1,
            cumulative_average: sum / (i + 1) as f64,
            running_min: lo,
            running_max: hi,
        });
    }
    out
}

/// A maximal run of consecutive ranks sharing one exact score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieGroup {
    pub start_rank: u64,
    pub size: u64,
    pub score: f64,
    pub mean_reeval: f64,
}

pub fn tie_groups(reeval: &ReevalReport) -> Vec<TieGroup> {
    let mut out: Vec<TieGroup> = Vec::new();
    let mut i = 0;
    while i < reeval.entries.len() {
        let score = reeval.entries[i].score;
        let mut j = i + 1;
        while j < reeval.entries.len() && reeval.entries[j].score == score {
            j += 1;
        }
        let mean_reeval = reeval.entries[i..j]
            .iter()
            .map(|e| e.reeval_mean)
            .sum::<f64>()
            / (j - i) as f64;
        out.push(TieGroup {
            start_rank: i as u64 + 1,
            size: (j - i) as u64,
            score,
            mean_reeval,
        });
        i = j;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCurvePoint {
    pub k: u64,
    pub expected_cumulative_average: f64,
}

/// Expected cumulative average under random tie-breaking: every member of
/// a tie group occupies each of the group's positions with equal
/// probability, so a cutoff splitting a group takes (slots below the
/// cutoff) times the group's mean re-evaluated utility.
pub fn expected_tie_broken_curve(reeval: &ReevalReport) -> Vec<ExpectedCurvePoint> {
    let groups = tie_groups(reeval);
    let n = reeval.entries.len() as u64;
    let mut out = Vec::with_capacity(n as usize);
    for k in 1..=n {
        let mut expected_sum = 0.0;
        for g in &groups {
            let end = g.start_rank + g.size - 1;
            let slots_below = if end <= k {
                g.size
            } else if g.start_rank > k {
                0
            } else {
                k - g.start_rank + 1
            };
            expected_sum += slots_below as f64 * g.mean_reeval;
        }
        out.push(ExpectedCurvePoint {
            k,
            expected_cumulative_average: expected_sum / k as f64,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiskerRow {
    pub rank: u64,
    pub id: TemplateId,
    pub lcb: f64,
    pub ucb: f64,
    pub reeval_mean: f64,
}

/// Confidence whiskers for the top 100 ranked arms.
pub fn whiskers(reeval: &ReevalReport) -> Vec<WhiskerRow> {
    reeval
        .entries
        .iter()
        .take(100)
        .map(|e| WhiskerRow {
            rank: e.rank,
            id: e.id.clone(),
            lcb: e.lcb,
            ucb: e.ucb,
            reeval_mean: e.reeval_mean,
        })
        .collect()
}

fn tsv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = format!("# format: {REPORT_FORMAT}\n{header}\n");
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

pub fn ranking_tsv(rows: &[RankingRow]) -> String {
    tsv(
        "rank\tid\tscore\tm\tlcb\tucb\treeval_mean\treeval_m",
        rows.iter().map(|r| {
            format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.rank, r.id, r.score, r.m, r.lcb, r.ucb, r.reeval_mean, r.reeval_m
            )
        }),
    )
}

pub fn curve_tsv(points: &[CurvePoint]) -> String {
    tsv(
        "k\tcumulative_average\trunning_min\trunning_max",
        points.iter().map(|p| {
            format!(
                "{}\t{}\t{}\t{}",
                p.k, p.cumulative_average, p.running_min, p.running_max
            )
        }),
    )
}

pub fn expected_curve_tsv(points: &[ExpectedCurvePoint]) -> String {
    tsv(
        "k\texpected_cumulative_average",
        points
            .iter()
            .map(|p| format!("{}\t{}", p.k, p.expected_cumulative_average)),
    )
}

pub fn tie_groups_tsv(groups: &[TieGroup]) -> String {
    tsv(
        "start_rank\tsize\tscore\tmean_reeval",
        groups.iter().map(|g| {
            format!(
                "{}\t{}\t{}\t{}",
                g.start_rank, g.size, g.score, g.mean_reeval
            )
        }),
    )
}

pub fn whiskers_tsv(rows: &[WhiskerRow]) -> String {
    tsv(
        "rank\tid\tlcb\tucb\treeval_mean",
        rows.iter().map(|r| {
            format!(
                "{}\t{}\t{}\t{}\t{}",
                r.rank, r.id, r.lcb, r.ucb, r.reeval_mean
            )
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::RankBy;
    use crate::runner::{ReevalEntry, ReevalReport, REEVAL_FORMAT};
    use crate::space::ParamValue;
    use approx::assert_relative_eq;

    fn entry(rank: u64, score: f64, reeval_mean: f64) -> ReevalEntry {
        ReevalEntry {
            rank,
            id: TemplateId {
                values: vec![("x".into(), ParamValue::Int(rank as i64))],
            },
            score,
            run_m: 10,
            run_mean: score,
            lcb: score - 0.1,
            ucb: score + 0.1,
            fresh_m: 0,
            reeval_mean,
            fresh: vec![],
        }
    }

    fn report(rows: &[(f64, f64)]) -> ReevalReport {
        ReevalReport {
            format: REEVAL_FORMAT.into(),
            rank_by: RankBy::Mean,
            min_samples: 10,
            entries: rows
                .iter()
                .enumerate()
                .map(|(i, &(score, mean))| entry(i as u64 + 1, score, mean))
                .collect(),
        }
    }

    #[test]
    fn split_tie_group_contributes_its_mean_per_slot() {
        // One group of three with re-evaluated means 1.0, 0.5, 0.0.
        let r = report(&[(0.7, 1.0), (0.7, 0.5), (0.7, 0.0)]);
        let curve = expected_tie_broken_curve(&r);
        assert_relative_eq!(curve[0].expected_cumulative_average, 0.5);
        assert_relative_eq!(curve[1].expected_cumulative_average, 0.5);
        assert_relative_eq!(curve[2].expected_cumulative_average, 0.5);
    }

    #[test]
    fn tie_free_expected_curve_is_the_deterministic_curve() {
        let r = report(&[(0.9, 0.8), (0.7, 0.6), (0.5, 0.1)]);
        let expected = expected_tie_broken_curve(&r);
        let plain = cumulative_curve(&r);
        for (e, p) in expected.iter().zip(&plain) {
            assert_relative_eq!(
                e.expected_cumulative_average,
                p.cumulative_average,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn expected_curve_matches_exhaustive_permutations() {
        // Two tie groups: sizes 3 and 2. Average cumulative sums over all
        // 3! x 2! within-group arrangements and compare with the formula.
        let means_a = [1.0, 0.5, 0.0];
        let means_b = [0.8, 0.4];
        let r = report(&[
            (0.7, means_a[0]),
            (0.7, means_a[1]),
            (0.7, means_a[2]),
            (0.3, means_b[0]),
            (0.3, means_b[1]),
        ]);
        let perms3 = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let perms2 = [[0, 1], [1, 0]];
        let mut sums = [0.0f64; 5];
        let mut count = 0;
        for pa in &perms3 {
            for pb in &perms2 {
                let order: Vec<f64> = pa
                    .iter()
                    .map(|&i| means_a[i])
                    .chain(pb.iter().map(|&i| means_b[i]))
                    .collect();
                let mut acc = 0.0;
                for (k, v) in order.iter().enumerate() {
                    acc += v;
                    sums[k] += acc;
                }
                count += 1;
            }
        }
        let curve = expected_tie_broken_curve(&r);
        for k in 0..5 {
            let brute = sums[k] / count as f64 / (k + 1) as f64;
            assert_relative_eq!(
                curve[k].expected_cumulative_average,
                brute,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn full_cutoff_equals_the_grand_mean_in_both_modes() {
        let r = report(&[(0.7, 1.0), (0.7, 0.5), (0.3, 0.3), (0.2, 0.2)]);
        let grand = (1.0 + 0.5 + 0.3 + 0.2) / 4.0;
        let expected = expected_tie_broken_curve(&r);
        let plain = cumulative_curve(&r);
        assert_relative_eq!(
            expected.last().unwrap().expected_cumulative_average,
            grand,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            plain.last().unwrap().cumulative_average,
            grand,
            max_relative = 1e-12
        );
    }

    #[test]
    fn bands_track_running_extremes() {
        let r = report(&[(0.9, 0.6), (0.8, 0.9), (0.7, 0.2), (0.6, 0.5)]);
        let curve = cumulative_curve(&r);
        let mins: Vec<f64> = curve.iter().map(|p| p.running_min).collect();
        let maxs: Vec<f64> = curve.iter().map(|p| p.running_max).collect();
        assert_eq!(mins, vec![0.6, 0.6, 0.2, 0.2]);
        assert_eq!(maxs, vec![0.6, 0.9, 0.9, 0.9]);
    }

    #[test]
    fn grouping_requires_exact_score_equality() {
        let r = report(&[(0.7, 1.0), (0.7, 0.0), (0.7 - 1e-12, 0.5)]);
        let groups = tie_groups(&r);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].size, 2);
        assert_relative_eq!(groups[0].mean_reeval, 0.5);
        assert_eq!(groups[1].start_rank, 3);
    }

    #[test]
    fn tsv_output_is_deterministic_and_versioned() {
        let r = report(&[(0.9, 0.8), (0.7, 0.6)]);
        let rows = ranking_rows(&r);
        let text = ranking_tsv(&rows);
        assert_eq!(text, ranking_tsv(&rows));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# format: coup-report/v1"));
        assert_eq!(
            lines.next(),
            Some("rank\tid\tscore\tm\tlcb\tucb\treeval_mean\treeval_m")
        );
        assert_eq!(lines.count(), 2);
        let w = whiskers_tsv(&whiskers(&r));
        assert!(w.starts_with("# format: coup-report/v1\nrank\tid\tlcb"));
        let groups = tie_groups(&r);
        let g = tie_groups_tsv(&groups);
        assert_eq!(g.lines().count(), 2 + groups.len());
    }
}
