use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ExperimentResult;
use crate::search::Relationship;

pub const CSV_HEADER: &str =
    "allocator,start_state,noise,pct_overall,pct_natural,pct_reversed,partial";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AggregateRow {
    pub allocator: String,
    /// A starting state name, or `averaged`.
    pub start_state: String,
    pub noise: usize,
    pub pct_overall: f64,
    pub pct_natural: f64,
    pub pct_reversed: f64,
    pub natural_runs: usize,
    pub reversed_runs: usize,
    /// Set when the two classes differ in size, one is empty, or fewer
    /// results than expected were supplied.
    pub partial: bool,
}

#[derive(Default)]
struct Tally {
    natural: (usize, usize),
    reversed: (usize, usize),
}

fn pct(solved: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * solved as f64 / total as f64
    }
}

/// One row per (allocator, state, noise) and one `averaged` row per
/// (allocator, noise), whose percentages are means over the state rows.
///
/// `expected` is the number of results a complete row holds.
pub fn aggregate(results: &[ExperimentResult], expected: Option<usize>) -> Vec<AggregateRow> {
    let mut cells: BTreeMap<(String, usize, String), Tally> = BTreeMap::new();
    for r in results {
        let key = (r.spec.profile.clone(), r.spec.noise, r.spec.state.clone());
        let t = cells.entry(key).or_default();
        let class = match r.relationship {
            Relationship::Natural => &mut t.natural,
            Relationship::Reversed => &mut t.reversed,
        };
        class.1 += 1;
        if r.solved {
            class.0 += 1;
        }
    }
    let mut rows = Vec::new();
    let mut groups: BTreeMap<(String, usize), Vec<AggregateRow>> = BTreeMap::new();
    for ((allocator, noise, state), t) in cells {
        let total = t.natural.1 + t.reversed.1;
        let row = AggregateRow {
            allocator: allocator.clone(),
            start_state: state,
            noise,
            pct_overall: pct(t.natural.0 + t.reversed.0, total),
            pct_natural: pct(t.natural.0, t.natural.1),
            pct_reversed: pct(t.reversed.0, t.reversed.1),
            natural_runs: t.natural.1,
            reversed_runs: t.reversed.1,
            partial: t.natural.1 != t.reversed.1
                || t.natural.1 == 0
                || expected.is_some_and(|e| total != e),
        };
        groups.entry((allocator, noise)).or_default().push(row);
    }
    for ((allocator, noise), group) in groups {
        let n = group.len() as f64;
        let mean = |f: fn(&AggregateRow) -> f64| group.iter().map(f).sum::<f64>() / n;
        let averaged = AggregateRow {
            allocator,
            start_state: "averaged".into(),
            noise,
            pct_overall: mean(|r| r.pct_overall),
            pct_natural: mean(|r| r.pct_natural),
            pct_reversed: mean(|r| r.pct_reversed),
            natural_runs: group.iter().map(|r| r.natural_runs).sum(),
            reversed_runs: group.iter().map(|r| r.reversed_runs).sum(),
            partial: group.iter().any(|r| r.partial),
        };
        rows.extend(group);
        rows.push(averaged);
    }
    rows
}

/// CSV with percentages rounded to integers.
pub fn to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.allocator,
            r.start_state,
            r.noise,
            r.pct_overall.round() as i64,
            r.pct_natural.round() as i64,
            r.pct_reversed.round() as i64,
            r.partial
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::{generate_grid, ExperimentResult, PAPER_SIZES};

    fn results(solve: impl Fn(Relationship) -> bool, state: &str) -> Vec<ExperimentResult> {
        generate_grid(&PAPER_SIZES, &[0], &["ideal".into()], &[state.into()])
            .into_iter()
            .map(|spec| {
                let relationship = spec.relationship();
                ExperimentResult {
                    spec,
                    relationship,
                    seed: 0,
                    target_distance: 0,
                    solved: solve(relationship),
                    candidates_tried: 1,
                    candidates_to_best: Some(1),
                    time_to_best_ms: None,
                    final_distance: None,
                    initial_distance: None,
                    failures: 0,
                    marker_noise: 0,
                    solution: None,
                }
            })
            .collect()
    }

    #[test]
    fn all_solved() {
        let rows = aggregate(&results(|_| true, "s"), Some(72));
        assert_eq!(rows.len(), 2);
        assert_eq!(
            to_csv(&rows),
            format!(
                "{CSV_HEADER}\nideal,s,0,100,100,100,false\nideal,averaged,0,100,100,100,false\n"
            )
        );
    }

    #[test]
    fn natural_half() {
        let rows = aggregate(&results(|r| r == Relationship::Natural, "s"), None);
        let r = &rows[0];
        assert_eq!(
            (r.pct_overall, r.pct_natural, r.pct_reversed),
            (50.0, 100.0, 0.0)
        );
        assert_eq!((r.natural_runs, r.reversed_runs), (36, 36));
    }

    #[test]
    fn averaged_over_states_and_partial_rows() {
        let mut all = results(|_| true, "a");
        all.extend(results(|_| false, "b"));
        let rows = aggregate(&all, Some(72));
        let avg = rows.iter().find(|r| r.start_state == "averaged").unwrap();
        assert_eq!(avg.pct_overall, 50.0);
        assert!(!avg.partial);

        let mut short = results(|_| true, "a");
        short.pop();
        let rows = aggregate(&short, Some(72));
        assert!(rows.iter().all(|r| r.partial));
    }
}
