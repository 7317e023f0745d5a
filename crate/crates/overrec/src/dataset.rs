//! Interaction-log ingestion and leave-one-out split construction.
//!
//! Raw logs are parsed as implicit feedback (ratings are discarded), users
//! and items with fewer than five interactions are filtered out, and each
//! user's history becomes one evaluation query (last item held out) plus
//! one corpus entry (second-to-last item held out). Item identifiers are
//! re-indexed densely by first appearance so downstream code works on
//! `0..item_count`.

use std::collections::HashMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::knn::CorpusEntry;
use crate::rntk::ItemSequence;

/// Minimum number of interactions a user or item must have to survive
/// filtering.
pub const MIN_OCCURRENCES: usize = 5;
/// Default cap on sequence length; longer histories keep the most recent
/// items.
pub const DEFAULT_MAX_LEN: usize = 50;

/// One implicit-feedback interaction.
#[derive(Clone, Debug, Eq, PartialEq)]
pub struct InteractionEvent {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Supported raw log formats.
#[derive(Clone, Copy, Debug, Eq, PartialEq)]
pub enum EventFormat {
    /// `user,item,rating,timestamp`
    AmazonCsv,
    /// `user::item::rating::timestamp`
    MovielensDat,
}

impl FromStr for EventFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "amazon-csv" | "amazon_csv" => Ok(EventFormat::AmazonCsv),
            "movielens-dat" | "movielens_dat" => Ok(EventFormat::MovielensDat),
            other => Err(format!(
                "unknown format '{other}' (expected amazon-csv|movielens-dat)"
            )),
        }
    }
}

/// Filtering flavour: iterate removals to a fixed point, or stop after one
/// simultaneous user+item pass.
#[derive(Clone, Copy, Debug, Default, Eq, PartialEq)]
pub enum FiveCoreMode {
    #[default]
    FixedPoint,
    SinglePass,
}

impl FromStr for FiveCoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixedpoint" => Ok(FiveCoreMode::FixedPoint),
            "singlepass" => Ok(FiveCoreMode::SinglePass),
            other => Err(format!(
                "unknown five-core mode '{other}' (expected fixedpoint|singlepass)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed record: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("input contains no events")]
    EmptyInput,
    #[error("no events survive the {threshold}-occurrence filter")]
    EmptyAfterFilter { threshold: usize },
    #[error("no evaluation queries can be built (every user has fewer than 3 interactions)")]
    InsufficientData,
    #[error("{path}: malformed split file at line {line}: {detail}")]
    MalformedSplit { path: PathBuf, line: usize, detail: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Leave-one-out evaluation data: corpus entries with supervised targets,
/// queries with held-out test targets, and the dense item index.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub corpus: Vec<CorpusEntry>,
    pub queries: Vec<(ItemSequence, u32)>,
    pub item_count: usize,
    pub user_count: usize,
    /// Interactions surviving the occurrence filter.
    pub action_count: usize,
    /// Dense index -> original item token.
    pub item_map: Vec<String>,
    pub max_len: usize,
}

/// Parse a raw interaction log. Ratings are discarded.
pub fn parse_events<R: BufRead>(
    reader: R,
    format: EventFormat,
) -> Result<Vec<InteractionEvent>, DatasetError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: PathBuf::from("<stream>"),
            source,
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        let fields: Vec<&str> = match format {
            EventFormat::AmazonCsv => line.split(',').collect(),
            EventFormat::MovielensDat => line.split("::").collect(),
        };
        if fields.len() != 4 {
            return Err(DatasetError::MalformedLine {
                line: line_no,
                detail: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let (user, item, _rating, ts) = (fields[0], fields[1], fields[2], fields[3]);
        if user.is_empty() || item.is_empty() {
            return Err(DatasetError::MalformedLine {
                line: line_no,
                detail: "empty user or item identifier".into(),
            });
        }
        let timestamp: i64 = ts.trim().parse().map_err(|_| DatasetError::MalformedLine {
            line: line_no,
            detail: format!("bad timestamp '{ts}'"),
        })?;
        if timestamp < 0 {
            return Err(DatasetError::MalformedLine {
                line: line_no,
                detail: format!("negative timestamp {timestamp}"),
            });
        }
        events.push(InteractionEvent {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    if events.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    Ok(events)
}

/// Remove users and items with fewer than [`MIN_OCCURRENCES`] events.
///
/// Each pass counts users and items simultaneously and drops every event
/// touching an under-threshold entity; removing items can push a user
/// below the threshold (and vice versa), so the fixed-point mode repeats
/// until nothing changes.
pub fn five_core_filter(
    mut events: Vec<InteractionEvent>,
    mode: FiveCoreMode,
) -> Result<Vec<InteractionEvent>, DatasetError> {
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *user_counts.entry(e.user.as_str()).or_insert(0) += 1;
            *item_counts.entry(e.item.as_str()).or_insert(0) += 1;
        }
        let before = events.len();
        let kept: Vec<InteractionEvent> = events
            .iter()
            .filter(|e| {
                user_counts[e.user.as_str()] >= MIN_OCCURRENCES
                    && item_counts[e.item.as_str()] >= MIN_OCCURRENCES
            })
            .cloned()
            .collect();
        events = kept;
        if events.is_empty() {
            return Err(DatasetError::EmptyAfterFilter { threshold: MIN_OCCURRENCES });
        }
        if events.len() == before || mode == FiveCoreMode::SinglePass {
            return Ok(events);
        }
    }
}

/// Build the leave-one-out split from filtered events.
///
/// Per user, events sorted by timestamp (ties by input order) form the
/// history `s`. The query holds out the last item, the corpus entry the
/// second-to-last, and both inputs keep at most `max_len` most recent
/// items. Users with exactly two interactions contribute a corpus entry
/// only; consecutive repeats of the same item are collapsed so a target
/// never equals the input's last element.
pub fn build_split(
    events: &[InteractionEvent],
    max_len: usize,
) -> Result<SplitDataset, DatasetError> {
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut item_map: Vec<String> = Vec::new();
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut histories: Vec<Vec<(i64, usize, u32)>> = Vec::new();
    let mut user_names: Vec<&str> = Vec::new();

    for (order, e) in events.iter().enumerate() {
        let item = *item_index.entry(e.item.as_str()).or_insert_with(|| {
            item_map.push(e.item.clone());
            (item_map.len() - 1) as u32
        });
        let ui = *user_index.entry(e.user.as_str()).or_insert_with(|| {
            histories.push(Vec::new());
            user_names.push(e.user.as_str());
            histories.len() - 1
        });
        histories[ui].push((e.timestamp, order, item));
    }

    let mut corpus = Vec::new();
    let mut queries = Vec::new();
    for (ui, history) in histories.iter_mut().enumerate() {
        history.sort_by_key(|&(ts, order, _)| (ts, order));
        let mut s: Vec<u32> = Vec::with_capacity(history.len());
        for &(_, _, item) in history.iter() {
            if s.last() != Some(&item) {
                s.push(item);
            }
        }
        let t = s.len();
        let user = user_names[ui];
        let tail = |upto: usize| -> Vec<u32> {
            let start = upto.saturating_sub(max_len);
            s[start..upto].to_vec()
        };
        if t >= 3 {
            queries.push((
                ItemSequence { user: user.to_string(), items: tail(t - 1) },
                s[t - 1],
            ));
            corpus.push(CorpusEntry {
                sequence: ItemSequence { user: user.to_string(), items: tail(t - 2) },
                target: s[t - 2],
            });
        } else if t == 2 {
            corpus.push(CorpusEntry {
                sequence: ItemSequence { user: user.to_string(), items: tail(1) },
                target: s[1],
            });
        }
    }
    if queries.is_empty() {
        return Err(DatasetError::InsufficientData);
    }

    Ok(SplitDataset {
        corpus,
        queries,
        item_count: item_map.len(),
        user_count: histories.len(),
        action_count: events.len(),
        item_map,
        max_len,
    })
}

fn split_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("corpus.tsv"),
        dir.join("queries.tsv"),
        dir.join("manifest.tsv"),
    )
}

/// Persist the split as line-oriented text: `user<TAB>items<TAB>target`
/// files plus a manifest with the counts and the item re-index map.
pub fn save_split(split: &SplitDataset, dir: &Path) -> Result<(), DatasetError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (corpus_path, queries_path, manifest_path) = split_paths(dir);

    let items_str =
        |items: &[u32]| items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    let mut corpus_text = String::new();
    for entry in &split.corpus {
        corpus_text.push_str(&format!(
            "{}\t{}\t{}\n",
            entry.sequence.user,
            items_str(&entry.sequence.items),
            entry.target
        ));
    }
    fs::write(&corpus_path, corpus_text).map_err(io_err(&corpus_path))?;

    let mut query_text = String::new();
    for (q, target) in &split.queries {
        query_text.push_str(&format!("{}\t{}\t{}\n", q.user, items_str(&q.items), target));
    }
    fs::write(&queries_path, query_text).map_err(io_err(&queries_path))?;

    let mut manifest = String::new();
    manifest.push_str(&format!("users\t{}\n", split.user_count));
    manifest.push_str(&format!("items\t{}\n", split.item_count));
    manifest.push_str(&format!("actions\t{}\n", split.action_count));
    manifest.push_str(&format!("corpus\t{}\n", split.corpus.len()));
    manifest.push_str(&format!("queries\t{}\n", split.queries.len()));
    manifest.push_str(&format!("max_len\t{}\n", split.max_len));
    for (idx, token) in split.item_map.iter().enumerate() {
        manifest.push_str(&format!("item\t{idx}\t{token}\n"));
    }
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))
}

/// Load a split previously written by [`save_split`].
pub fn load_split(dir: &Path) -> Result<SplitDataset, DatasetError> {
    let (corpus_path, queries_path, manifest_path) = split_paths(dir);
    let malformed = |path: &Path, line: usize, detail: &str| DatasetError::MalformedSplit {
        path: path.to_path_buf(),
        line,
        detail: detail.to_string(),
    };

    let read = |path: &Path| -> Result<String, DatasetError> {
        fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    };

    let parse_rows = |path: &Path| -> Result<Vec<(String, Vec<u32>, u32)>, DatasetError> {
        let mut rows = Vec::new();
        for (i, line) in read(path)?.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed(path, i + 1, "expected 3 tab-separated fields"));
            }
            let items: Result<Vec<u32>, _> =
                fields[1].split(' ').map(|t| t.parse::<u32>()).collect();
            let items = items.map_err(|_| malformed(path, i + 1, "bad item id"))?;
            if items.is_empty() {
                return Err(malformed(path, i + 1, "empty item sequence"));
            }
            let target: u32 =
                fields[2].parse().map_err(|_| malformed(path, i + 1, "bad target id"))?;
            rows.push((fields[0].to_string(), items, target));
        }
        Ok(rows)
    };

    let corpus = parse_rows(&corpus_path)?
        .into_iter()
        .map(|(user, items, target)| CorpusEntry {
            sequence: ItemSequence { user, items },
            target,
        })
        .collect();
    let queries = parse_rows(&queries_path)?
        .into_iter()
        .map(|(user, items, target)| (ItemSequence { user, items }, target))
        .collect();

    let mut user_count = 0usize;
    let mut item_count = 0usize;
    let mut action_count = 0usize;
    let mut max_len = DEFAULT_MAX_LEN;
    let mut item_map: Vec<(usize, String)> = Vec::new();
    for (i, line) in read(&manifest_path)?.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["users", v] => user_count = parse_count(&manifest_path, i, v)?,
            ["items", v] => item_count = parse_count(&manifest_path, i, v)?,
            ["actions", v] => action_count = parse_count(&manifest_path, i, v)?,
            ["corpus", _] | ["queries", _] => {}
            ["max_len", v] => max_len = parse_count(&manifest_path, i, v)?,
            ["item", idx, token] => {
                item_map.push((parse_count(&manifest_path, i, idx)?, token.to_string()));
            }
            _ => return Err(malformed(&manifest_path, i + 1, "unrecognised manifest line")),
        }
    }
    item_map.sort_by_key(|(idx, _)| *idx);
    let item_map: Vec<String> = item_map.into_iter().map(|(_, token)| token).collect();
    if item_map.len() != item_count {
        return Err(malformed(&manifest_path, 0, "item map size disagrees with item count"));
    }

    Ok(SplitDataset {
        corpus,
        queries,
        item_count,
        user_count,
        action_count,
        item_map,
        max_len,
    })
}

fn parse_count(path: &Path, line: usize, v: &str) -> Result<usize, DatasetError> {
    v.parse().map_err(|_| DatasetError::MalformedSplit {
        path: path.to_path_buf(),
        line: line + 1,
        detail: format!("bad count '{v}'"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn ev(user: &str, item: &str, ts: i64) -> InteractionEvent {
        InteractionEvent { user: user.into(), item: item.into(), timestamp: ts }
    }

    #[test]
    fn parse_amazon_and_movielens() {
        let events =
            parse_events(Cursor::new("u1,i1,5.0,100\n"), EventFormat::AmazonCsv).unwrap();
        assert_eq!(events, vec![ev("u1", "i1", 100)]);

        let events = parse_events(
            Cursor::new("1::20::3::978300760\n"),
            EventFormat::MovielensDat,
        )
        .unwrap();
        assert_eq!(events, vec![ev("1", "20", 978300760)]);
    }

    #[test]
    fn parse_errors() {
        let err = parse_events(Cursor::new("u1,i1\n"), EventFormat::AmazonCsv).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedLine { line: 1, .. }));

        let err = parse_events(Cursor::new(""), EventFormat::AmazonCsv).unwrap_err();
        assert!(matches!(err, DatasetError::EmptyInput));

        let err = parse_events(Cursor::new("u,i,5,-3\n"), EventFormat::AmazonCsv).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedLine { line: 1, .. }));
    }

    #[test]
    fn five_core_removes_sparse_items_then_user() {
        // One user, six events over six distinct items: every item is
        // below threshold, so nothing survives.
        let events: Vec<_> = (0..6).map(|i| ev("u", &format!("i{i}"), i)).collect();
        let err = five_core_filter(events, FiveCoreMode::FixedPoint).unwrap_err();
        assert!(matches!(err, DatasetError::EmptyAfterFilter { threshold: 5 }));
    }

    #[test]
    fn five_core_keeps_dense_block() {
        let mut events = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                events.push(ev(&format!("u{u}"), &format!("i{i}"), i));
            }
        }
        let kept = five_core_filter(events.clone(), FiveCoreMode::FixedPoint).unwrap();
        assert_eq!(kept.len(), 25);
        let kept = five_core_filter(events, FiveCoreMode::SinglePass).unwrap();
        assert_eq!(kept.len(), 25);
    }

    #[test]
    fn five_core_cascade_needs_fixed_point() {
        // Items i0..i4 are shared by five heavy users; user "weak" has
        // exactly five events but one of them points at a one-off item, so
        // the fixed point drops the weak user while a single pass keeps it.
        let mut events = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                events.push(ev(&format!("u{u}"), &format!("i{i}"), i));
            }
        }
        for i in 0..4 {
            events.push(ev("weak", &format!("i{i}"), 50 + i));
        }
        events.push(ev("weak", "rare", 99));

        let single = five_core_filter(events.clone(), FiveCoreMode::SinglePass).unwrap();
        assert!(single.iter().any(|e| e.user == "weak"));
        assert!(!single.iter().any(|e| e.item == "rare"));

        let fixed = five_core_filter(events, FiveCoreMode::FixedPoint).unwrap();
        assert!(!fixed.iter().any(|e| e.user == "weak"));
    }

    #[test]
    fn build_split_conventions() {
        let events: Vec<_> = (0..5).map(|i| ev("u", &format!("i{i}"), i)).collect();
        let split = build_split(&events, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(split.queries.len(), 1);
        assert_eq!(split.queries[0].0.items, vec![0, 1, 2, 3]);
        assert_eq!(split.queries[0].1, 4);
        assert_eq!(split.corpus.len(), 1);
        assert_eq!(split.corpus[0].sequence.items, vec![0, 1, 2]);
        assert_eq!(split.corpus[0].target, 3);
        assert_eq!(split.item_count, 5);
        assert_eq!(split.user_count, 1);
        assert_eq!(split.action_count, 5);
    }

    #[test]
    fn build_split_caps_length() {
        let events: Vec<_> = (0..60).map(|i| ev("u", &format!("i{i}"), i)).collect();
        let split = build_split(&events, 50).unwrap();
        let (q, target) = &split.queries[0];
        assert_eq!(q.items.len(), 50);
        // Most recent 50 of the first 59 items.
        assert_eq!(q.items[0], 9);
        assert_eq!(*q.items.last().unwrap(), 58);
        assert_eq!(*target, 59);
    }

    #[test]
    fn two_event_user_contributes_corpus_only() {
        let mut events = vec![ev("short", "a", 0), ev("short", "b", 1)];
        events.extend((0..5).map(|i| ev("long", &format!("i{i}"), i)));
        let split = build_split(&events, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(split.queries.len(), 1);
        assert_eq!(split.corpus.len(), 2);
        let short = split.corpus.iter().find(|e| e.sequence.user == "short").unwrap();
        assert_eq!(short.sequence.items.len(), 1);
    }

    #[test]
    fn adjacent_repeats_are_collapsed() {
        let events = vec![
            ev("u", "a", 0),
            ev("u", "a", 1),
            ev("u", "b", 2),
            ev("u", "b", 3),
            ev("u", "c", 4),
        ];
        let split = build_split(&events, DEFAULT_MAX_LEN).unwrap();
        let (q, target) = &split.queries[0];
        assert_eq!(q.items, vec![0, 1]);
        assert_eq!(*target, 2);
        assert_ne!(*q.items.last().unwrap(), *target);
    }

    #[test]
    fn timestamp_ties_break_by_input_order() {
        let events = vec![
            ev("u", "a", 0),
            ev("u", "b", 0),
            ev("u", "c", 0),
            ev("u", "d", 0),
            ev("u", "e", 0),
        ];
        let split = build_split(&events, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(split.queries[0].0.items, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rerun_is_identical_and_round_trips() {
        let mut events = Vec::new();
        for u in 0..6 {
            for i in 0..6 {
                events.push(ev(&format!("u{u}"), &format!("i{}", (i + u) % 6), (i * 7) as i64));
            }
        }
        let filtered = five_core_filter(events, FiveCoreMode::FixedPoint).unwrap();
        let a = build_split(&filtered, DEFAULT_MAX_LEN).unwrap();
        let b = build_split(&filtered, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        save_split(&a, dir.path()).unwrap();
        let loaded = load_split(dir.path()).unwrap();
        assert_eq!(a, loaded);
    }

    #[test]
    fn no_corpus_target_leaks_test_target() {
        let mut events = Vec::new();
        for u in 0..5 {
            for i in 0..7 {
                events.push(ev(&format!("u{u}"), &format!("i{}", (i * 3 + u) % 7), i as i64));
            }
        }
        let split = build_split(&events, DEFAULT_MAX_LEN).unwrap();
        for (q, test_target) in &split.queries {
            let corpus_entry = split
                .corpus
                .iter()
                .find(|e| e.sequence.user == q.user)
                .expect("same user contributes a corpus entry");
            assert_ne!(corpus_entry.target, *test_target);
        }
    }
}
