use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ItemCatalog, ItemId, UserSequence};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserRecord {
    user: u64,
    items: Vec<u64>,
    #[serde(default)]
    titles: BTreeMap<String, String>,
}

/// Raw interactions keyed by original ids, before filtering.
#[derive(Default)]
struct RawCorpus {
    users: BTreeMap<u64, Vec<u64>>,
    titles: BTreeMap<u64, String>,
}

impl RawCorpus {
    fn add_title(&mut self, item: u64, title: String, path: &Path, line: usize) -> Result<()> {
        match self.titles.get(&item) {
            Some(existing) if *existing != title => Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("conflicting titles for item {item}"),
            }),
            Some(_) => Ok(()),
            None => {
                self.titles.insert(item, title);
                Ok(())
            }
        }
    }

    /// Drops items with unusable titles (and their interactions), then users
    /// left with fewer than `min_len` interactions, then re-densifies ids in
    /// ascending order of the original ids.
    fn finish(self, min_len: usize, max_title: usize) -> Result<(Vec<UserSequence>, ItemCatalog)> {
        let valid: BTreeMap<u64, String> = self
            .titles
            .into_iter()
            .filter(|(_, t)| !t.trim().is_empty() && t.chars().count() <= max_title)
            .collect();
        let item_index: BTreeMap<u64, ItemId> = valid
            .keys()
            .enumerate()
            .map(|(i, &orig)| (orig, i))
            .collect();

        let sequences: Vec<UserSequence> = self
            .users
            .into_values()
            .map(|items| {
                items
                    .iter()
                    .filter_map(|i| item_index.get(i).copied())
                    .collect::<Vec<_>>()
            })
            .filter(|items| items.len() >= min_len)
            .enumerate()
            .map(|(user_id, items)| UserSequence { user_id, items })
            .collect();
        if sequences.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let catalog = ItemCatalog::new(valid.into_values().collect())?;
        Ok((sequences, catalog))
    }
}

/// Loads a JSON-lines interaction file (one user object per line).
pub fn load_interactions(
    path: impl AsRef<Path>,
    min_len: usize,
    max_title: usize,
) -> Result<(Vec<UserSequence>, ItemCatalog)> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_jsonl(BufReader::new(file), path, min_len, max_title)
}

pub fn parse_jsonl(
    reader: impl BufRead,
    path: &Path,
    min_len: usize,
    max_title: usize,
) -> Result<(Vec<UserSequence>, ItemCatalog)> {
    let mut raw = RawCorpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: UserRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if raw.users.contains_key(&record.user) {
            return Err(parse_err(format!("duplicate user {}", record.user)));
        }
        for (key, title) in record.titles {
            let item: u64 = key
                .parse()
                .map_err(|_| parse_err(format!("title key `{key}` is not an item id")))?;
            raw.add_title(item, title, path, line_no)?;
        }
        raw.users.insert(record.user, record.items);
    }
    raw.finish(min_len, max_title)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    user: u64,
    item: u64,
    timestamp: i64,
    title: String,
}

/// Loads `user,item,timestamp,title` rows (with header), ordering each user's
/// interactions by timestamp; equal timestamps keep file order.
pub fn load_csv(
    path: impl AsRef<Path>,
    min_len: usize,
    max_title: usize,
) -> Result<(Vec<UserSequence>, ItemCatalog)> {
    let path = path.as_ref();
    read_csv(File::open(path)?, path, min_len, max_title)
}

fn read_csv(
    reader: impl Read,
    path: &Path,
    min_len: usize,
    max_title: usize,
) -> Result<(Vec<UserSequence>, ItemCatalog)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut raw = RawCorpus::default();
    let mut timed: BTreeMap<u64, Vec<(i64, u64)>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        raw.add_title(row.item, row.title, path, line)?;
        timed
            .entry(row.user)
            .or_default()
            .push((row.timestamp, row.item));
    }
    for (user, mut events) in timed {
        events.sort_by_key(|&(t, _)| t);
        raw.users
            .insert(user, events.into_iter().map(|(_, i)| i).collect());
    }
    raw.finish(min_len, max_title)
}

/// Writes sequences in the JSON-lines format read by [`load_interactions`].
///
/// Each line carries the titles of its own items; catalog items that no
/// sequence references are attached to the first line so that the catalog
/// survives a reload unchanged.
pub fn write_jsonl(
    path: impl AsRef<Path>,
    seqs: &[UserSequence],
    catalog: &ItemCatalog,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let referenced: BTreeSet<ItemId> = seqs.iter().flat_map(|s| s.items.iter().copied()).collect();
    for (n, s) in seqs.iter().enumerate() {
        let mut titles = BTreeMap::new();
        for &item in &s.items {
            titles.insert(item.to_string(), catalog.title(item)?.to_string());
        }
        if n == 0 {
            for item in (0..catalog.len()).filter(|i| !referenced.contains(i)) {
                titles.insert(item.to_string(), catalog.title(item)?.to_string());
            }
        }
        let record = UserRecord {
            user: s.user_id as u64,
            items: s.items.iter().map(|&i| i as u64).collect(),
            titles,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<(Vec<UserSequence>, ItemCatalog)> {
        parse_jsonl(text.as_bytes(), Path::new("mem"), 5, 200)
    }

    #[test]
    fn short_users_are_dropped() {
        let text = r#"{"user": 1, "items": [1,2,3,4], "titles": {"1":"a","2":"b","3":"c","4":"d"}}
{"user": 2, "items": [1,2,3,4,1], "titles": {}}"#;
        let (seqs, catalog) = parse(text).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].items, vec![0, 1, 2, 3, 0]);
        assert_eq!(catalog.len(), 4);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse(""), Err(Error::EmptyDataset)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"user\": 1, \"items\": [1], \"titles\": {\"1\": \"a\"}}\n{not json}\n";
        match parse(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlong_and_empty_titles_drop_items() {
        let long = "x".repeat(201);
        let text = format!(
            r#"{{"user": 0, "items": [1,2,3,4,5,6,7], "titles": {{"1":"a","2":"b","3":"c","4":"d","5":"e","6":"{long}","7":""}}}}"#
        );
        let (seqs, catalog) = parse(&text).unwrap();
        assert_eq!(seqs[0].items, vec![0, 1, 2, 3, 4]);
        assert_eq!(catalog.len(), 5);
    }

    #[test]
    fn csv_orders_by_timestamp() {
        let text = "user,item,timestamp,title\n\
                    9,30,5,c\n9,10,1,a\n9,20,3,b\n9,40,7,d\n9,50,9,e\n";
        let (seqs, catalog) = read_csv(text.as_bytes(), Path::new("mem"), 5, 200).unwrap();
        assert_eq!(seqs[0].items, vec![0, 1, 2, 3, 4]);
        assert_eq!(catalog.title(2).unwrap(), "c");
    }
}
