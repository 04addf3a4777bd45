//! CSV ingestion of score matrices and bids, and persistence of results.
//!
//! Formats (UTF-8, `\n` line endings, mandatory header row):
//!
//! * dense scores / probabilities: header of item ids, then one row of values per user
//! * triplet scores: `user_id,item_id,score`, missing pairs are 0
//! * bids: `item_id,bid`
//! * lists: `user_id,rank,item_id` with 1-based ranks
//! * trade-off table: `t,ecn,ecpm,gini,pot` (optionally `pot_bound`)

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{Mode, RankingLists, RankingProbabilities, ScoreMatrix, TradeoffPoint};

/// Significant digits used for derived numeric output.
pub const SIGNIFICANT_DIGITS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreFormat {
    Dense,
    Triplet,
}

impl FromStr for ScoreFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ScoreFormat::Dense),
            "triplet" => Ok(ScoreFormat::Triplet),
            other => Err(Error::InvalidInput(format!(
                "unknown score format {other:?} (expected dense or triplet)"
            ))),
        }
    }
}

/// External ids of the dense user and item indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IdMap {
    /// Ids `"0", "1", ...` for both axes.
    pub fn sequential(num_users: usize, num_items: usize) -> Self {
        Self {
            users: (0..num_users).map(|u| u.to_string()).collect(),
            items: (0..num_items).map(|i| i.to_string()).collect(),
        }
    }

    fn item_index(&self) -> HashMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    fn user_index(&self) -> HashMap<&str, usize> {
        self.users
            .iter()
            .enumerate()
            .map(|(u, id)| (id.as_str(), u))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScores {
    pub scores: ScoreMatrix,
    pub ids: IdMap,
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

fn write_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn parse_value(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("{what} {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(
            path,
            line,
            format!("{what} {field:?} is not finite"),
        ));
    }
    Ok(v)
}

fn check_score(path: &Path, line: u64, v: f64, mode: Mode) -> Result<()> {
    if v < 0.0 {
        return Err(Error::parse(path, line, format!("score {v} is negative")));
    }
    if mode == Mode::Ctr && v > 1.0 {
        return Err(Error::parse(
            path,
            line,
            format!("score {v} outside [0, 1] in ctr mode"),
        ));
    }
    Ok(())
}

/// Reads a score matrix with unit item weights.
pub fn load_scores(
    path: impl AsRef<Path>,
    format: ScoreFormat,
    mode: Mode,
) -> Result<LoadedScores> {
    let path = path.as_ref();
    let (w, ids) = match format {
        ScoreFormat::Dense => read_dense(path, |line, v| check_score(path, line, v, mode))?,
        ScoreFormat::Triplet => read_triplets(path, mode)?,
    };
    let scores = ScoreMatrix::with_unit_gamma(w)?;
    Ok(LoadedScores { scores, ids })
}

fn read_dense(path: &Path, check: impl Fn(u64, f64) -> Result<()>) -> Result<(Array2<f64>, IdMap)> {
    let mut rdr = reader(path)?;
    let items: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if items.is_empty() || items.iter().all(String::is_empty) {
        return Err(Error::parse(path, 1, "missing header row of item ids"));
    }
    let mut values = Vec::new();
    let mut users = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for field in record.iter() {
            let v = parse_value(path, line, field, "value")?;
            check(line, v)?;
            values.push(v);
        }
        users += 1;
    }
    if users == 0 {
        return Err(Error::parse(path, 1, "no user rows"));
    }
    let w = Array2::from_shape_vec((users, items.len()), values)
        .map_err(|e| Error::Internal(e.to_string()))?;
    Ok((
        w,
        IdMap {
            users: (0..users).map(|u| u.to_string()).collect(),
            items,
        },
    ))
}

fn read_triplets(path: &Path, mode: Mode) -> Result<(Array2<f64>, IdMap)> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?;
    if header.len() != 3 {
        return Err(Error::parse(
            path,
            1,
            "header must be user_id,item_id,score",
        ));
    }
    let mut ids = IdMap::default();
    let mut user_idx: HashMap<String, usize> = HashMap::new();
    let mut item_idx: HashMap<String, usize> = HashMap::new();
    let mut entries: HashMap<(usize, usize), f64> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let (user, item, score) = (&record[0], &record[1], &record[2]);
        let v = parse_value(path, line, score, "score")?;
        check_score(path, line, v, mode)?;
        let u = *user_idx.entry(user.to_owned()).or_insert_with(|| {
            ids.users.push(user.to_owned());
            ids.users.len() - 1
        });
        let i = *item_idx.entry(item.to_owned()).or_insert_with(|| {
            ids.items.push(item.to_owned());
            ids.items.len() - 1
        });
        if entries.insert((u, i), v).is_some() {
            return Err(Error::parse(
                path,
                line,
                format!("duplicate entry for user {user:?}, item {item:?}"),
            ));
        }
    }
    if entries.is_empty() {
        return Err(Error::parse(path, 1, "no score rows"));
    }
    let mut w = Array2::zeros((ids.users.len(), ids.items.len()));
    for ((u, i), v) in entries {
        w[[u, i]] = v;
    }
    Ok((w, ids))
}

/// Writes scores in the dense format with shortest round-trip decimal output.
pub fn save_scores(path: impl AsRef<Path>, scores: &ScoreMatrix, ids: &IdMap) -> Result<()> {
    let path = path.as_ref();
    write_dense(path, scores.w(), &ids.items, |v| format!("{v}"))
}

fn write_dense(
    path: &Path,
    x: &Array2<f64>,
    items: &[String],
    fmt: impl Fn(f64) -> String,
) -> Result<()> {
    if items.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            axis: "item ids",
            expected: x.ncols(),
            found: items.len(),
        });
    }
    let mut wtr = writer(path)?;
    wtr.write_record(items).map_err(|e| write_err(path, e))?;
    for row in x.rows() {
        wtr.write_record(row.iter().map(|&v| fmt(v)))
            .map_err(|e| write_err(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Writes `user_ids.csv` and `item_ids.csv` into `dir`.
pub fn save_id_map(dir: impl AsRef<Path>, ids: &IdMap) -> Result<()> {
    let dir = dir.as_ref();
    for (name, header, values) in [
        ("user_ids.csv", "user_id", &ids.users),
        ("item_ids.csv", "item_id", &ids.items),
    ] {
        let path = dir.join(name);
        let mut wtr = writer(&path)?;
        wtr.write_record(["index", header])
            .map_err(|e| write_err(&path, e))?;
        for (i, id) in values.iter().enumerate() {
            wtr.write_record([i.to_string().as_str(), id])
                .map_err(|e| write_err(&path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads `item_id,bid` rows aligned to the item ids. Every item needs a bid.
pub fn load_bids(path: impl AsRef<Path>, ids: &IdMap) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let index = ids.item_index();
    let mut bids = vec![None; ids.items.len()];
    let mut rdr = reader(path)?;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(Error::parse(path, line, "expected item_id,bid"));
        }
        let item = &record[0];
        let bid = parse_value(path, line, &record[1], "bid")?;
        if bid <= 0.0 {
            return Err(Error::parse(
                path,
                line,
                format!("bid {bid} must be positive"),
            ));
        }
        let &i = index
            .get(item)
            .ok_or_else(|| Error::parse(path, line, format!("unknown item id {item:?}")))?;
        if bids[i].replace(bid).is_some() {
            return Err(Error::parse(
                path,
                line,
                format!("duplicate bid for item {item:?}"),
            ));
        }
    }
    bids.into_iter()
        .enumerate()
        .map(|(i, b)| {
            b.ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{}: no bid for item {:?}",
                    path.display(),
                    ids.items[i]
                ))
            })
        })
        .collect()
}

/// Writes lists as `user_id,rank,item_id`.
pub fn save_lists(path: impl AsRef<Path>, lists: &RankingLists, ids: &IdMap) -> Result<()> {
    let path = path.as_ref();
    if ids.users.len() != lists.num_users() || ids.items.len() != lists.num_items() {
        return Err(Error::InvalidInput(
            "id map does not match the lists".into(),
        ));
    }
    let mut wtr = writer(path)?;
    wtr.write_record(["user_id", "rank", "item_id"])
        .map_err(|e| write_err(path, e))?;
    for (u, list) in lists.lists().iter().enumerate() {
        for (r, &i) in list.iter().enumerate() {
            wtr.write_record([ids.users[u].as_str(), &(r + 1).to_string(), &ids.items[i]])
                .map_err(|e| write_err(path, e))?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Reads lists written by [`save_lists`].
pub fn load_lists(path: impl AsRef<Path>, ids: &IdMap) -> Result<RankingLists> {
    let path = path.as_ref();
    let users = ids.user_index();
    let items = ids.item_index();
    let mut slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); ids.users.len()];
    let mut rdr = reader(path)?;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::parse(path, line, "expected user_id,rank,item_id"));
        }
        let &u = users
            .get(&record[0])
            .ok_or_else(|| Error::parse(path, line, format!("unknown user id {:?}", &record[0])))?;
        let rank: usize = record[1]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad rank {:?}", &record[1])))?;
        let &i = items
            .get(&record[2])
            .ok_or_else(|| Error::parse(path, line, format!("unknown item id {:?}", &record[2])))?;
        slots[u].push((rank, i));
    }
    let k = slots.first().map_or(0, Vec::len);
    let lists = slots
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            s.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    RankingLists::new(lists, k, ids.items.len())
}

/// Writes probabilities in the dense format with 12 significant digits.
pub fn save_probs(path: impl AsRef<Path>, probs: &RankingProbabilities, ids: &IdMap) -> Result<()> {
    write_dense(path.as_ref(), probs.matrix(), &ids.items, |v| {
        format_significant(v, SIGNIFICANT_DIGITS)
    })
}

/// Reads probabilities written by [`save_probs`].
pub fn load_probs(path: impl AsRef<Path>, k: usize) -> Result<(RankingProbabilities, IdMap)> {
    let path = path.as_ref();
    let (x, ids) = read_dense(path, |_, _| Ok(()))?;
    Ok((RankingProbabilities::new(x, k)?, ids))
}

/// Writes a trade-off table, with a trailing `pot_bound` column when given.
pub fn save_tradeoff(
    path: impl AsRef<Path>,
    points: &[TradeoffPoint],
    pot_bound: Option<&[f64]>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(b) = pot_bound {
        if b.len() != points.len() {
            return Err(Error::DimensionMismatch {
                axis: "pot_bound",
                expected: points.len(),
                found: b.len(),
            });
        }
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("t,ecn,ecpm,gini,pot");
    if pot_bound.is_some() {
        out.push_str(",pot_bound");
    }
    out.push('\n');
    let f = |v: f64| format_significant(v, SIGNIFICANT_DIGITS);
    for (row, p) in points.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}",
            f(p.tax_rate),
            f(p.ecn),
            p.ecpm.map(f).unwrap_or_default(),
            f(p.gini),
            f(p.pot)
        ));
        if let Some(b) = pot_bound {
            out.push(',');
            out.push_str(&f(b[row]));
        }
        out.push('\n');
    }
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Writes `key,value` rows.
pub fn save_summary(path: impl AsRef<Path>, rows: &[(String, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("metric,value\n");
    for (key, v) in rows {
        out.push_str(&format!(
            "{key},{}\n",
            format_significant(*v, SIGNIFICANT_DIGITS)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Decimal text with `digits` significant digits, trailing zeros dropped.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exponent = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exponent) {
        let decimals = (digits as i32 - 1 - exponent).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s
        }
    } else {
        format!("{:.*e}", digits - 1, x)
    }
}

/// Writes Lorenz curve points as `population_share,utility_share`.
pub fn save_lorenz(path: impl AsRef<Path>, points: &[(f64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("population_share,utility_share\n");
    for (x, y) in points {
        out.push_str(&format!(
            "{},{}\n",
            format_significant(*x, SIGNIFICANT_DIGITS),
            format_significant(*y, SIGNIFICANT_DIGITS)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::path::PathBuf;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn triplets_fill_missing_with_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.csv",
            "user_id,item_id,score\nalice,x,0.5\nalice,y,0.25\nbob,y,0.75\n",
        );
        let loaded = load_scores(&p, ScoreFormat::Triplet, Mode::Ctr).unwrap();
        assert_eq!(loaded.ids.users, vec!["alice", "bob"]);
        assert_eq!(loaded.ids.items, vec!["x", "y"]);
        assert_eq!(
            loaded.scores.w(),
            &ndarray::array![[0.5, 0.25], [0.0, 0.75]]
        );
    }

    #[test]
    fn dense_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "a,b,c\n0.2,0.7,0.1\n");
        let loaded = load_scores(&p, ScoreFormat::Dense, Mode::Ctr).unwrap();
        assert_eq!(loaded.scores.w(), &ndarray::array![[0.2, 0.7, 0.1]]);
    }

    #[test]
    fn dense_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let w = ndarray::array![[0.1 + 0.2, 1.0 / 3.0], [1e-17, 0.999_999_999_999_9]];
        let scores = ScoreMatrix::with_unit_gamma(w.clone()).unwrap();
        let ids = IdMap::sequential(2, 2);
        let p = dir.path().join("s.csv");
        save_scores(&p, &scores, &ids).unwrap();
        let loaded = load_scores(&p, ScoreFormat::Dense, Mode::Ctr).unwrap();
        assert_eq!(loaded.scores.w(), &w);
        assert_eq!(loaded.ids, ids);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "a,b\n0.1,0.2\n0.3,oops\n");
        match load_scores(&p, ScoreFormat::Dense, Mode::Ctr) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "r.csv", "a,b\n0.1,0.2\n0.3\n");
        assert!(matches!(
            load_scores(&p, ScoreFormat::Dense, Mode::Ctr),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn ctr_range_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.csv", "user_id,item_id,score\nu,i,1.5\n");
        assert!(matches!(
            load_scores(&p, ScoreFormat::Triplet, Mode::Ctr),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(load_scores(&p, ScoreFormat::Triplet, Mode::Exposure).is_ok());
        let p = write(
            dir.path(),
            "dup.csv",
            "user_id,item_id,score\nu,i,0.5\nu,i,0.4\n",
        );
        assert!(matches!(
            load_scores(&p, ScoreFormat::Triplet, Mode::Ctr),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err =
            load_scores("/nonexistent/scores.csv", ScoreFormat::Dense, Mode::Ctr).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/scores.csv"));
    }

    #[test]
    fn bids_align_to_items() {
        let dir = tempfile::tempdir().unwrap();
        let ids = IdMap {
            users: vec!["u".into()],
            items: vec!["x".into(), "y".into()],
        };
        let p = write(
            dir.path(),
            "b.csv",
            "item_id,bid\ny,3\nx,2.718281828459045\n",
        );
        let bids = load_bids(&p, &ids).unwrap();
        assert_eq!(bids, vec![std::f64::consts::E, 3.0]);
        let gamma = crate::types::gamma_from_bids(&bids).unwrap();
        approx::assert_abs_diff_eq!(gamma[0], 1.0, epsilon = 1e-15);

        let p = write(dir.path(), "neg.csv", "item_id,bid\nx,0\ny,1\n");
        assert!(load_bids(&p, &ids).is_err());
        let p = write(dir.path(), "unk.csv", "item_id,bid\nx,2\nz,1\n");
        assert!(load_bids(&p, &ids)
            .unwrap_err()
            .to_string()
            .contains("unknown item"));
    }

    #[test]
    fn tradeoff_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        save_tradeoff(&p, &[], None).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "t,ecn,ecpm,gini,pot\n");

        let point = TradeoffPoint {
            tax_rate: 0.0,
            ecn: 1.0 / 3.0,
            ecpm: None,
            gini: 0.25,
            pot: 0.0,
        };
        save_tradeoff(&p, &[point], None).unwrap();
        let body = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "0,0.333333333333,,0.25,0");
    }

    #[test]
    fn lists_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids = IdMap {
            users: vec!["a".into(), "b".into()],
            items: vec!["x".into(), "y".into(), "z".into()],
        };
        let lists = RankingLists::new(vec![vec![2, 0], vec![1, 2]], 2, 3).unwrap();
        let p = dir.path().join("lists.csv");
        save_lists(&p, &lists, &ids).unwrap();
        let body = fs::read_to_string(&p).unwrap();
        assert!(body.starts_with("user_id,rank,item_id\na,1,z\na,2,x\n"));
        assert_eq!(load_lists(&p, &ids).unwrap(), lists);
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(0.0, 12), "0");
        assert_eq!(format_significant(1.0, 12), "1");
        assert_eq!(format_significant(-2.5, 12), "-2.5");
        assert_eq!(format_significant(1.0 / 3.0, 12), "0.333333333333");
        assert_eq!(format_significant(12345.678901234567, 12), "12345.6789012");
        assert_eq!(format_significant(1.5e-9, 12), "1.50000000000e-9");
        let x: f64 = 1.234_567_890_123_456e20;
        let back: f64 = format_significant(x, 12).parse().unwrap();
        assert!(((back - x) / x).abs() < 1e-11);
    }
}
