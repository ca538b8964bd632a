//! Interaction-log preprocessing and ranking metrics.
//!
//! Pipeline: read a delimited log through a configurable column map, drop
//! negative feedback and users without any positive signal, prune to a
//! k-core, group per user in time order and hold out the last item.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
    pub click: bool,
    pub like: bool,
    pub follow: bool,
    pub comment: bool,
    pub forward: bool,
    pub long_view: bool,
    pub dislike: bool,
}

impl Interaction {
    pub fn is_positive(&self) -> bool {
        self.click || self.like || self.follow || self.comment || self.forward || self.long_view
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    /// Rows dropped while parsing.
    pub skipped: usize,
}

/// Header names for each field. Signal columns are optional; a missing
/// column reads as `false`. Without a `long_view` column, a view counts as
/// long when `watch_time >= long_view_fraction * duration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub delimiter: char,
    pub user: String,
    pub item: String,
    pub timestamp: String,
    pub click: Option<String>,
    pub like: Option<String>,
    pub follow: Option<String>,
    pub comment: Option<String>,
    pub forward: Option<String>,
    pub long_view: Option<String>,
    pub dislike: Option<String>,
    pub watch_time: Option<String>,
    pub duration: Option<String>,
    pub long_view_fraction: f64,
}

impl Default for ColumnMap {
    fn default() -> Self {
        let some = |s: &str| Some(s.to_string());
        Self {
            delimiter: ',',
            user: "user_id".into(),
            item: "item_id".into(),
            timestamp: "timestamp".into(),
            click: some("click"),
            like: some("like"),
            follow: some("follow"),
            comment: some("comment"),
            forward: some("forward"),
            long_view: some("long_view"),
            dislike: some("dislike"),
            watch_time: None,
            duration: None,
            long_view_fraction: 0.8,
        }
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim() {
        "1" | "true" | "True" | "TRUE" => Some(true),
        "0" | "false" | "False" | "FALSE" | "" => Some(false),
        _ => None,
    }
}

/// Parses a delimited log with a header row. Rows that fail to parse are
/// counted in `skipped`; a header missing a required column is an error.
pub fn read_log(input: impl Read, map: &ColumnMap) -> Result<InteractionLog> {
    ensure!(map.delimiter.is_ascii(), Config, "delimiter must be a single ASCII character");
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(map.delimiter as u8)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Config(format!("log has no `{name}` column")));
    let (u, i, t) = (need(&map.user)?, need(&map.item)?, need(&map.timestamp)?);
    let opt = |c: &Option<String>| -> Result<Option<usize>> { c.as_deref().map(need).transpose() };
    let flags = [&map.click, &map.like, &map.follow, &map.comment, &map.forward, &map.long_view, &map.dislike]
        .map(|c| opt(c).unwrap_or(None));
    let (watch, dur) = (opt(&map.watch_time)?, opt(&map.duration)?);

    let mut log = InteractionLog::default();
    for row in reader.records() {
        let Ok(row) = row else {
            log.skipped += 1;
            continue;
        };
        let parsed = (|| {
            let mut f = [false; 7];
            for (slot, c) in f.iter_mut().zip(flags) {
                if let Some(c) = c {
                    *slot = parse_flag(row.get(c)?)?;
                }
            }
            if flags[5].is_none() {
                if let (Some(w), Some(d)) = (watch, dur) {
                    let (w, d): (f64, f64) = (row.get(w)?.parse().ok()?, row.get(d)?.parse().ok()?);
                    f[5] = d > 0.0 && w >= map.long_view_fraction * d;
                }
            }
            Some(Interaction {
                user_id: row.get(u)?.parse().ok()?,
                item_id: row.get(i)?.parse().ok()?,
                timestamp: row.get(t)?.parse().ok()?,
                click: f[0],
                like: f[1],
                follow: f[2],
                comment: f[3],
                forward: f[4],
                long_view: f[5],
                dislike: f[6],
            })
        })();
        match parsed {
            Some(r) => log.records.push(r),
            None => log.skipped += 1,
        }
    }
    Ok(log)
}

/// Drops disliked records, then every record of users left without a
/// positive interaction.
pub fn filter_interactions(log: &InteractionLog) -> InteractionLog {
    let kept: Vec<Interaction> = log.records.iter().filter(|r| !r.dislike).copied().collect();
    let active: HashSet<u64> = kept.iter().filter(|r| r.is_positive()).map(|r| r.user_id).collect();
    InteractionLog { records: kept.into_iter().filter(|r| active.contains(&r.user_id)).collect(), skipped: log.skipped }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreFilterResult {
    pub log: InteractionLog,
    /// Pruning passes until nothing changed.
    pub rounds: usize,
}

impl CoreFilterResult {
    pub fn is_empty(&self) -> bool {
        self.log.records.is_empty()
    }
}

/// Prunes until every user has at least `k` interactions and every item at
/// least `k` distinct users.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> CoreFilterResult {
    let mut records = log.records.clone();
    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut user_count: HashMap<u64, usize> = HashMap::new();
        let mut item_users: HashMap<u64, HashSet<u64>> = HashMap::new();
        for r in &records {
            *user_count.entry(r.user_id).or_default() += 1;
            item_users.entry(r.item_id).or_default().insert(r.user_id);
        }
        let before = records.len();
        records.retain(|r| user_count[&r.user_id] >= k && item_users[&r.item_id].len() >= k);
        if records.len() == before {
            break;
        }
    }
    CoreFilterResult { log: InteractionLog { records, skipped: log.skipped }, rounds }
}

pub fn five_core_filter(log: &InteractionLog) -> CoreFilterResult {
    k_core_filter(log, 5)
}

/// Per-user `(item, timestamp)` lists in time order; equal timestamps keep
/// log order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserSequenceSet {
    pub users: BTreeMap<u64, Vec<(u64, i64)>>,
}

impl UserSequenceSet {
    pub fn items(&self, user: u64) -> Vec<u64> {
        self.users.get(&user).map(|s| s.iter().map(|x| x.0).collect()).unwrap_or_default()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.users.values().map(Vec::len).collect()
    }
}

pub fn group_sequences(log: &InteractionLog) -> UserSequenceSet {
    let mut users: BTreeMap<u64, Vec<(u64, i64)>> = BTreeMap::new();
    for r in &log.records {
        users.entry(r.user_id).or_default().push((r.item_id, r.timestamp));
    }
    users.par_iter_mut().for_each(|(_, seq)| seq.sort_by_key(|x| x.1));
    UserSequenceSet { users }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: BTreeMap<u64, Vec<u64>>,
    pub test: BTreeMap<u64, u64>,
}

/// Holds out each user's chronologically last item.
pub fn leave_one_out_split(seqs: &UserSequenceSet) -> Result<Split> {
    let mut split = Split::default();
    for (&u, seq) in &seqs.users {
        let Some(((last, _), prior)) = seq.split_last() else { continue };
        if prior.is_empty() {
            bail!(Validation, "user {u} has a single interaction; nothing left to train on");
        }
        split.train.insert(u, prior.iter().map(|x| x.0).collect());
        split.test.insert(u, *last);
    }
    Ok(split)
}

/// 1-based position of `truth` in `ranked`, if present.
fn rank_of(ranked: &[u64], truth: u64) -> Option<usize> {
    ranked.iter().position(|&x| x == truth).map(|p| p + 1)
}

/// Fraction of users whose held-out item is in their top `k`.
pub fn hr_at_k(ranked: &[Vec<u64>], truth: &[u64], k: usize) -> Result<f64> {
    ensure!(k >= 1, Validation, "K must be at least 1");
    ensure!(ranked.len() == truth.len(), Shape, "{} rankings for {} users", ranked.len(), truth.len());
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = ranked.iter().zip(truth).filter(|(r, &t)| rank_of(r, t).is_some_and(|p| p <= k)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean of `1/log₂(rank+1)` over users whose item ranks within `k`.
pub fn ndcg_at_k(ranked: &[Vec<u64>], truth: &[u64], k: usize) -> Result<f64> {
    ensure!(k >= 1, Validation, "K must be at least 1");
    ensure!(ranked.len() == truth.len(), Shape, "{} rankings for {} users", ranked.len(), truth.len());
    if truth.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = ranked
        .iter()
        .zip(truth)
        .filter_map(|(r, &t)| rank_of(r, t).filter(|&p| p <= k))
        .map(|p| 1.0 / ((p + 1) as f64).log2())
        .sum();
    Ok(total / truth.len() as f64)
}

/// HR@K and NDCG@K from 1-based ranks (`None` = not retrieved).
pub fn metrics_from_ranks(ranks: &[Option<usize>], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let n = ranks.len() as f64;
    let within = || ranks.iter().filter_map(|r| r.filter(|&p| p >= 1 && p <= k));
    (within().count() as f64 / n, within().map(|p| 1.0 / ((p + 1) as f64).log2()).sum::<f64>() / n)
}

/// Text sequence file: one user per line,
/// `user_id<TAB>length<TAB>item,item,...<TAB>ts,ts,...`.
pub fn write_sequence_file(seqs: &UserSequenceSet, mut out: impl Write) -> Result<()> {
    for (u, seq) in &seqs.users {
        let items: Vec<String> = seq.iter().map(|x| x.0.to_string()).collect();
        let ts: Vec<String> = seq.iter().map(|x| x.1.to_string()).collect();
        writeln!(out, "{u}\t{}\t{}\t{}", seq.len(), items.join(","), ts.join(","))?;
    }
    Ok(())
}

pub fn read_sequence_file(input: impl BufRead) -> Result<UserSequenceSet> {
    let mut users = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Validation(format!("malformed sequence line {}", n + 1));
        let parts: Vec<&str> = line.split('\t').collect();
        ensure!(parts.len() == 4, Validation, "sequence line {} has {} fields", n + 1, parts.len());
        let list = |s: &str| -> Result<Vec<i64>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',').map(|x| x.parse().map_err(|_| bad())).collect()
        };
        let user: u64 = parts[0].parse().map_err(|_| bad())?;
        let len: usize = parts[1].parse().map_err(|_| bad())?;
        let (items, ts) = (list(parts[2])?, list(parts[3])?);
        ensure!(items.len() == len && ts.len() == len, Validation, "sequence line {} disagrees with its length", n + 1);
        ensure!(items.iter().all(|&i| i >= 0), Validation, "negative item id on line {}", n + 1);
        users.insert(user, items.into_iter().map(|i| i as u64).zip(ts).collect());
    }
    Ok(UserSequenceSet { users })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: u64, item: u64, ts: i64) -> Interaction {
        Interaction { user_id: user, item_id: item, timestamp: ts, click: true, ..Default::default() }
    }

    #[test]
    fn reads_with_column_map_and_counts_bad_rows() {
        let text = "uid;vid;time;is_click;watch;dur;dislike\n\
                    1;10;5;1;9;10;0\n\
                    2;11;6;0;1;10;0\n\
                    x;12;7;1;1;1;0\n\
                    3;13;8;maybe;1;1;0\n";
        let map = ColumnMap {
            delimiter: ';',
            user: "uid".into(),
            item: "vid".into(),
            timestamp: "time".into(),
            click: Some("is_click".into()),
            like: None,
            follow: None,
            comment: None,
            forward: None,
            long_view: None,
            watch_time: Some("watch".into()),
            duration: Some("dur".into()),
            ..ColumnMap::default()
        };
        let log = read_log(text.as_bytes(), &map).unwrap();
        assert_eq!(log.skipped, 2);
        assert_eq!(log.records.len(), 2);
        assert!(log.records[0].long_view && !log.records[1].long_view);
        let missing = ColumnMap { user: "nope".into(), ..map };
        assert!(read_log(text.as_bytes(), &missing).is_err());
    }

    #[test]
    fn filtering_examples() {
        let mut disliked = rec(1, 1, 0);
        disliked.dislike = true;
        let neutral = Interaction { user_id: 2, item_id: 3, ..Default::default() };
        let log = InteractionLog { records: vec![disliked, rec(1, 2, 1), neutral], skipped: 0 };
        let out = filter_interactions(&log);
        assert_eq!(out.records, vec![rec(1, 2, 1)]);
    }

    #[test]
    fn core_filter_examples() {
        let core: Vec<_> = (0..5).flat_map(|u| (0..5).map(move |i| rec(u, i, i as i64))).collect();
        let log = InteractionLog { records: core.clone(), skipped: 0 };
        assert_eq!(five_core_filter(&log).log.records, core);
        let chain = InteractionLog { records: vec![rec(0, 0, 0), rec(0, 1, 1), rec(1, 1, 2)], skipped: 0 };
        assert!(five_core_filter(&chain).is_empty());
    }

    #[test]
    fn split_examples() {
        let seqs = group_sequences(&InteractionLog { records: vec![rec(1, 30, 3), rec(1, 10, 1), rec(1, 20, 2)], skipped: 0 });
        let s = leave_one_out_split(&seqs).unwrap();
        assert_eq!(s.train[&1], vec![10, 20]);
        assert_eq!(s.test[&1], 30);
        let tied = group_sequences(&InteractionLog { records: vec![rec(1, 5, 0), rec(1, 6, 0), rec(1, 7, 0)], skipped: 0 });
        assert_eq!(leave_one_out_split(&tied).unwrap().test[&1], 7);
        let short = group_sequences(&InteractionLog { records: vec![rec(1, 5, 0)], skipped: 0 });
        assert!(leave_one_out_split(&short).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(hr_at_k(&[vec![4, 5]], &[4], 1).unwrap(), 1.0);
        assert_eq!(hr_at_k(&[vec![4, 5]], &[9], 2).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&[vec![4, 5]], &[4], 1).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[vec![1, 2, 3]], &[3], 3).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&[vec![1, 2, 3]], &[3], 2).unwrap(), 0.0);
        assert!(hr_at_k(&[vec![1]], &[1], 0).is_err());
        assert_eq!(metrics_from_ranks(&[Some(1), Some(3), None], 3), (2.0 / 3.0, 1.5 / 3.0));
    }

    #[test]
    fn sequence_file_round_trip() {
        let seqs = group_sequences(&InteractionLog { records: vec![rec(2, 7, -1), rec(2, 8, 4), rec(9, 1, 0)], skipped: 0 });
        let mut buf = Vec::new();
        write_sequence_file(&seqs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "2\t2\t7,8\t-1,4\n9\t1\t1\t0\n");
        assert_eq!(read_sequence_file(buf.as_slice()).unwrap(), seqs);
        assert!(read_sequence_file(&b"1\t3\t1,2\t0,0\n"[..]).is_err());
    }
}
