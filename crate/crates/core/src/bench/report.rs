//! Report CSV I/O and aggregate tables.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{BenchRow, Setting};
use crate::error::{Error, Result};
use crate::fewshot::Method;
use crate::unlearn::LevelLabel;

pub const ROW_HEADER: [&str; 7] = [
    "forget_dataset",
    "level",
    "method",
    "shots",
    "seed",
    "setting",
    "accuracy",
];
const FAILED: &str = "FAILED";

pub fn write_rows_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROW_HEADER)?;
    for r in rows {
        w.write_record([
            r.forget_dataset.clone(),
            r.level.to_string(),
            r.method.to_string(),
            r.shots.to_string(),
            r.seed.to_string(),
            r.setting.to_string(),
            r.accuracy
                .map_or_else(|| FAILED.to_string(), |a| format!("{a:.3}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn bad_row(detail: String) -> Error {
    Error::Format {
        path: Default::default(),
        detail,
    }
}

pub fn read_rows_csv(input: impl Read) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(ROW_HEADER) {
        return Err(bad_row("unexpected report header".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| {
            rec.get(i)
                .ok_or_else(|| bad_row(format!("short record {rec:?}")))
        };
        let num = |i: usize| -> Result<u64> {
            field(i)?
                .parse()
                .map_err(|_| bad_row(format!("bad number in {rec:?}")))
        };
        let accuracy = match field(6)? {
            FAILED => None,
            a => Some(
                a.parse()
                    .map_err(|_| bad_row(format!("bad accuracy in {rec:?}")))?,
            ),
        };
        rows.push(BenchRow {
            forget_dataset: field(0)?.to_string(),
            level: field(1)?.parse()?,
            method: field(2)?.parse()?,
            shots: num(3)? as usize,
            seed: num(4)?,
            setting: field(5)?.parse()?,
            accuracy,
        });
    }
    Ok(rows)
}

/// Mean accuracy of one group; `shots == None` is the overall average over
/// all non-zero shot counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub setting: Setting,
    pub level: LevelLabel,
    pub method: Method,
    pub shots: Option<usize>,
    pub mean: f64,
    pub count: usize,
}

type GroupKey = (Setting, LevelLabel, Method, Option<usize>);
type MemberKey = (String, usize, u64);

/// Per-shot averages across forget datasets and seeds plus the overall
/// average excluding zero-shot rows. FAILED rows are skipped. Members are
/// summed in sorted key order, so the result does not depend on row order.
pub fn aggregate(rows: &[BenchRow]) -> Result<Vec<AggregateRow>> {
    if rows.is_empty() {
        return Err(Error::Empty("report rows"));
    }
    let mut groups: BTreeMap<GroupKey, Vec<(MemberKey, f64)>> = BTreeMap::new();
    for r in rows {
        let Some(acc) = r.accuracy else { continue };
        let member = (r.forget_dataset.clone(), r.shots, r.seed);
        groups
            .entry((r.setting, r.level, r.method, Some(r.shots)))
            .or_default()
            .push((member.clone(), acc));
        if r.shots > 0 {
            groups
                .entry((r.setting, r.level, r.method, None))
                .or_default()
                .push((member, acc));
        }
    }
    Ok(groups
        .into_iter()
        .map(|((setting, level, method, shots), mut members)| {
            members.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let sum: f64 = members.iter().map(|(_, v)| v).sum();
            AggregateRow {
                setting,
                level,
                method,
                shots,
                mean: sum / members.len() as f64,
                count: members.len(),
            }
        })
        .collect())
}

pub fn write_aggregates_csv(rows: &[AggregateRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "setting",
        "level",
        "method",
        "shots",
        "mean_accuracy",
        "count",
    ])?;
    for r in rows {
        w.write_record([
            r.setting.to_string(),
            r.level.to_string(),
            r.method.to_string(),
            r.shots
                .map_or_else(|| "overall".to_string(), |k| k.to_string()),
            r.mean.to_string(),
            r.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The same cell with and without unlearning.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPair {
    pub forget_dataset: String,
    pub level: LevelLabel,
    pub method: Method,
    pub shots: usize,
    pub seed: u64,
    pub transductive: f64,
    pub inductive: f64,
}

pub fn scatter_pairs(rows: &[BenchRow]) -> Vec<ScatterPair> {
    let key = |r: &BenchRow| (r.forget_dataset.clone(), r.level, r.method, r.shots, r.seed);
    let trans: BTreeMap<_, f64> = rows
        .iter()
        .filter(|r| r.setting == Setting::Transductive)
        .filter_map(|r| r.accuracy.map(|a| (key(r), a)))
        .collect();
    rows.iter()
        .filter(|r| r.setting == Setting::Inductive)
        .filter_map(|r| {
            let inductive = r.accuracy?;
            let transductive = *trans.get(&key(r))?;
            Some(ScatterPair {
                forget_dataset: r.forget_dataset.clone(),
                level: r.level,
                method: r.method,
                shots: r.shots,
                seed: r.seed,
                transductive,
                inductive,
            })
        })
        .collect()
}

pub fn write_pairs_csv(pairs: &[ScatterPair], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "forget_dataset",
        "level",
        "method",
        "shots",
        "seed",
        "transductive",
        "inductive",
    ])?;
    for p in pairs {
        w.write_record([
            p.forget_dataset.clone(),
            p.level.to_string(),
            p.method.to_string(),
            p.shots.to_string(),
            p.seed.to_string(),
            format!("{:.3}", p.transductive),
            format!("{:.3}", p.inductive),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(f: &str, shots: usize, seed: u64, setting: Setting, acc: Option<f64>) -> BenchRow {
        BenchRow {
            forget_dataset: f.into(),
            level: LevelLabel::Default,
            method: Method::SepRes,
            shots,
            seed,
            setting,
            accuracy: acc,
        }
    }

    #[test]
    fn single_row_aggregate_is_the_row() {
        let agg = aggregate(&[row("a", 4, 0, Setting::Inductive, Some(37.125))]).unwrap();
        assert_eq!(agg.len(), 2);
        assert!(agg.iter().all(|a| a.mean == 37.125 && a.count == 1));
    }

    #[test]
    fn zero_shot_rows_are_not_in_the_overall_average() {
        let rows = [
            row("a", 0, 0, Setting::Inductive, Some(10.0)),
            row("a", 1, 0, Setting::Inductive, Some(50.0)),
            row("a", 4, 0, Setting::Inductive, Some(70.0)),
        ];
        let agg = aggregate(&rows).unwrap();
        let overall = agg.iter().find(|a| a.shots.is_none()).unwrap();
        assert_eq!((overall.mean, overall.count), (60.0, 2));
    }

    #[test]
    fn failed_rows_are_skipped_and_round_trip() {
        let rows = vec![
            row("a", 1, 0, Setting::Inductive, None),
            row("a", 1, 0, Setting::Transductive, Some(12.5)),
        ];
        let mut buf = Vec::new();
        write_rows_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("forget_dataset,level,method,shots,seed,setting,accuracy\n"));
        assert!(text.contains(",inductive,FAILED\n"));
        assert_eq!(read_rows_csv(buf.as_slice()).unwrap(), rows);
        let agg = aggregate(&rows).unwrap();
        assert!(agg.iter().all(|a| a.setting == Setting::Transductive));
        assert!(scatter_pairs(&rows).is_empty());
    }

    #[test]
    fn empty_rows_are_rejected() {
        assert!(matches!(aggregate(&[]), Err(Error::Empty(_))));
    }
}
