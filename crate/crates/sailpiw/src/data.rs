//! Interaction-log loading, degree filtering, and temporal block splitting.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
    pub category_id: Option<u32>,
}

/// Chronological partition into one base block and the incremental blocks.
/// Validation/test halves of training block `t` come from block `t + 1`.
#[derive(Debug, Clone)]
pub struct TemporalDataset {
    pub base: Vec<InteractionRecord>,
    pub incremental: Vec<Vec<InteractionRecord>>,
}

impl TemporalDataset {
    /// Block 0 is the base; blocks 1..=n are the incremental blocks.
    pub fn block(&self, t: usize) -> &[InteractionRecord] {
        if t == 0 {
            &self.base
        } else {
            &self.incremental[t - 1]
        }
    }

    pub fn n_blocks(&self) -> usize {
        1 + self.incremental.len()
    }

    /// First (chronological) half of block `t + 1`.
    pub fn val_for(&self, t: usize) -> &[InteractionRecord] {
        let next = self.block(t + 1);
        &next[..next.len() / 2]
    }

    /// Second half of block `t + 1`.
    pub fn test_for(&self, t: usize) -> &[InteractionRecord] {
        let next = self.block(t + 1);
        &next[next.len() / 2..]
    }
}

/// Loads `user_id,item_id,timestamp[,category_id]` CSV, then iteratively
/// removes users/items below the degree thresholds until a fixpoint.
/// Returned records are sorted by timestamp (stable, so input order breaks ties).
pub fn load_interactions(
    path: &Path,
    min_degree_user: usize,
    min_degree_item: usize,
) -> Result<Vec<InteractionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_interactions(std::io::BufReader::new(file), min_degree_user, min_degree_item)
}

pub fn parse_interactions<R: BufRead>(
    reader: R,
    min_degree_user: usize,
    min_degree_item: usize,
) -> Result<Vec<InteractionRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && trimmed.starts_with("user_id") {
            continue;
        }
        records.push(parse_row(trimmed, line_no)?);
    }
    let filtered = degree_filter(records, min_degree_user, min_degree_item);
    if filtered.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sorted = filtered;
    sorted.sort_by_key(|r| r.timestamp);
    Ok(sorted)
}

fn parse_row(line: &str, line_no: usize) -> Result<InteractionRecord> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 3 || fields.len() > 4 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 3 or 4 comma-separated fields, got {}", fields.len()),
        });
    }
    let field = |i: usize, name: &str| -> Result<i64> {
        fields[i].parse::<i64>().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid {name} `{}`", fields[i]),
        })
    };
    let user_id = field(0, "user_id")?;
    let item_id = field(1, "item_id")?;
    let timestamp = field(2, "timestamp")?;
    if user_id < 0 || item_id < 0 || timestamp < 0 {
        return Err(Error::Parse {
            line: line_no,
            msg: "ids and timestamp must be nonnegative".into(),
        });
    }
    let category_id = if fields.len() == 4 && !fields[3].is_empty() {
        Some(fields[3].parse::<u32>().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid category_id `{}`", fields[3]),
        })?)
    } else {
        None
    };
    Ok(InteractionRecord {
        user_id: user_id as u64,
        item_id: item_id as u64,
        timestamp,
        category_id,
    })
}

/// Removes low-degree users/items until no removal changes any degree.
/// Dropping an item can push a user below threshold and vice versa.
fn degree_filter(
    mut records: Vec<InteractionRecord>,
    min_degree_user: usize,
    min_degree_item: usize,
) -> Vec<InteractionRecord> {
    if min_degree_user == 0 && min_degree_item == 0 {
        return records;
    }
    loop {
        let mut user_deg: HashMap<u64, usize> = HashMap::new();
        let mut item_deg: HashMap<u64, usize> = HashMap::new();
        for r in &records {
            *user_deg.entry(r.user_id).or_default() += 1;
            *item_deg.entry(r.item_id).or_default() += 1;
        }
        let before = records.len();
        records.retain(|r| {
            user_deg[&r.user_id] >= min_degree_user && item_deg[&r.item_id] >= min_degree_item
        });
        if records.len() == before {
            return records;
        }
    }
}

/// Splits sorted records into a base block plus `n_inc` incremental blocks.
/// Integer remainders go to the earliest block still below its ideal size.
pub fn split_temporal(
    records: Vec<InteractionRecord>,
    base_frac: f64,
    n_inc: usize,
) -> Result<TemporalDataset> {
    let n = records.len();
    if n < n_inc * 2 {
        return Err(Error::TooFewRecords { got: n, need: n_inc * 2 });
    }
    debug_assert!(records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));

    let inc_frac = (1.0 - base_frac) / n_inc as f64;
    let ideals: Vec<f64> = std::iter::once(base_frac * n as f64)
        .chain(std::iter::repeat(inc_frac * n as f64).take(n_inc))
        .collect();
    let mut sizes: Vec<usize> = ideals.iter().map(|x| x.floor() as usize).collect();
    let mut remainder = n - sizes.iter().sum::<usize>();
    while remainder > 0 {
        let pick = (0..sizes.len())
            .find(|&i| (sizes[i] as f64) < ideals[i])
            .unwrap_or(0);
        sizes[pick] += 1;
        remainder -= 1;
    }

    let mut rest = records;
    let base = rest.drain(..sizes[0]).collect();
    let mut incremental = Vec::with_capacity(n_inc);
    for &s in &sizes[1..] {
        incremental.push(rest.drain(..s).collect());
    }
    debug_assert!(rest.is_empty());
    Ok(TemporalDataset { base, incremental })
}

/// Per-block manifest: index, record count, timestamp range.
pub fn block_manifest(ds: &TemporalDataset) -> serde_json::Value {
    let blocks: Vec<_> = (0..ds.n_blocks())
        .map(|t| {
            let b = ds.block(t);
            json!({
                "block": t,
                "records": b.len(),
                "min_timestamp": b.iter().map(|r| r.timestamp).min(),
                "max_timestamp": b.iter().map(|r| r.timestamp).max(),
            })
        })
        .collect();
    json!({ "blocks": blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: u64, i: u64, ts: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: u,
            item_id: i,
            timestamp: ts,
            category_id: None,
        }
    }

    fn synth_records(n: usize) -> Vec<InteractionRecord> {
        (0..n).map(|k| rec(k as u64 % 7, k as u64 % 5, k as i64)).collect()
    }

    #[test]
    fn all_filtered_gives_empty_dataset_error() {
        let csv = "user_id,item_id,timestamp\n1,10,5\n2,11,6\n3,12,7\n";
        let err = parse_interactions(csv.as_bytes(), 2, 0).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn unfiltered_rows_sorted_by_timestamp() {
        let csv = "user_id,item_id,timestamp\n\
                   1,10,9\n2,11,3\n3,12,7\n4,13,1\n5,14,5\n\
                   6,15,2\n7,16,8\n8,17,0\n9,18,6\n10,19,4\n";
        let recs = parse_interactions(csv.as_bytes(), 0, 0).unwrap();
        assert_eq!(recs.len(), 10);
        assert!(recs.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn degree_filter_cascades_to_fixpoint() {
        // User 1 holds items 10 and 11; item 11 has only user 1.
        // With min_degree_item=2 item 11 goes, dropping user 1 to degree 1,
        // so with min_degree_user=2 user 1 goes too, and then item 10 keeps
        // user 2 and 3.
        let csv = "user_id,item_id,timestamp\n\
                   1,10,0\n1,11,1\n2,10,2\n2,12,3\n3,10,4\n3,12,5\n";
        let recs = parse_interactions(csv.as_bytes(), 2, 2).unwrap();
        assert!(recs.iter().all(|r| r.user_id != 1 && r.item_id != 11));
        assert_eq!(recs.len(), 4);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let csv = "user_id,item_id,timestamp\n1,10,5\n2,x,6\n";
        let err = parse_interactions(csv.as_bytes(), 0, 0).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn category_column_is_optional() {
        let csv = "user_id,item_id,timestamp,category_id\n1,10,5,3\n2,11,6,\n";
        let recs = parse_interactions(csv.as_bytes(), 0, 0).unwrap();
        assert_eq!(recs[0].category_id, Some(3));
        assert_eq!(recs[1].category_id, None);
    }

    #[test]
    fn split_100_records_is_exact() {
        let ds = split_temporal(synth_records(100), 0.6, 4).unwrap();
        assert_eq!(ds.base.len(), 60);
        assert!(ds.incremental.iter().all(|b| b.len() == 10));
        // Validation for the base block is records 60..65, test 65..70.
        let val = ds.val_for(0);
        let test = ds.test_for(0);
        assert_eq!(val.len(), 5);
        assert_eq!(test.len(), 5);
        assert_eq!(val[0].timestamp, 60);
        assert_eq!(test[0].timestamp, 65);
    }

    #[test]
    fn split_10_records() {
        let ds = split_temporal(synth_records(10), 0.6, 4).unwrap();
        assert_eq!(ds.base.len(), 6);
        assert!(ds.incremental.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn split_101_records_distributes_remainder() {
        let ds = split_temporal(synth_records(101), 0.6, 4).unwrap();
        let total: usize = ds.base.len() + ds.incremental.iter().map(Vec::len).sum::<usize>();
        assert_eq!(total, 101);
        assert!((ds.base.len() as f64 - 60.6).abs() <= 1.0);
        for b in &ds.incremental {
            assert!((b.len() as f64 - 10.1).abs() <= 1.0);
        }
        // Counting oracle for the documented rule: floor everything, then the
        // remainder goes to the earliest block below its ideal size.
        assert_eq!(ds.base.len(), 61);
    }

    #[test]
    fn concatenating_blocks_reproduces_input() {
        let recs = synth_records(137);
        let mut sorted = recs.clone();
        sorted.sort_by_key(|r| r.timestamp);
        let ds = split_temporal(sorted.clone(), 0.6, 4).unwrap();
        let mut rebuilt = ds.base.clone();
        for b in &ds.incremental {
            rebuilt.extend(b.iter().cloned());
        }
        assert_eq!(rebuilt, sorted);
    }

    #[test]
    fn too_few_records_error() {
        let err = split_temporal(synth_records(7), 0.6, 4).unwrap_err();
        assert!(matches!(err, Error::TooFewRecords { .. }));
    }

    #[test]
    fn manifest_reports_counts_and_ranges() {
        let ds = split_temporal(synth_records(100), 0.6, 4).unwrap();
        let m = block_manifest(&ds);
        assert_eq!(m["blocks"].as_array().unwrap().len(), 5);
        assert_eq!(m["blocks"][0]["records"], 60);
        assert_eq!(m["blocks"][0]["min_timestamp"], 0);
    }
}
