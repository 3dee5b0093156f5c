//! The tab-separated results file.
//!
//! ```text
//! # key=value            (zero or more provenance lines)
//! idx	label	predict	radius	correct	time
//! 0	3	3	0.412345	1	PT0.183S
//! ```
//!
//! `predict = -1` encodes an abstention.

use crate::error::{Error, Result};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

pub const RESULTS_HEADER: &str = "idx\tlabel\tpredict\tradius\tcorrect\ttime";

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub idx: usize,
    pub label: usize,
    pub predict: Option<usize>,
    pub radius: f64,
    pub correct: bool,
    pub time: Duration,
}

impl ResultRow {
    /// The row without its trailing time column; this part is reproducible.
    pub fn body(&self) -> String {
        let p = self.predict.map_or(-1, |c| c as i64);
        format!("{}\t{}\t{}\t{:.6}\t{}", self.idx, self.label, p, self.radius, self.correct as u8)
    }

    pub fn line(&self) -> String {
        format!("{}\t{}", self.body(), iso_duration(self.time))
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("results line {lineno}: bad {what} in `{line}`"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("column count"));
        }
        let predict: i64 = f[2].parse().map_err(|_| bad("predict"))?;
        Ok(ResultRow {
            idx: f[0].parse().map_err(|_| bad("idx"))?,
            label: f[1].parse().map_err(|_| bad("label"))?,
            predict: if predict < 0 { None } else { Some(predict as usize) },
            radius: f[3].parse().map_err(|_| bad("radius"))?,
            correct: match f[4] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("correct flag")),
            },
            time: parse_iso_duration(f[5]).ok_or_else(|| bad("time"))?,
        })
    }
}

pub fn iso_duration(d: Duration) -> String {
    format!("PT{:.3}S", d.as_secs_f64())
}

fn parse_iso_duration(s: &str) -> Option<Duration> {
    let secs: f64 = s.strip_prefix("PT")?.strip_suffix('S')?.parse().ok()?;
    (secs >= 0.0).then(|| Duration::from_secs_f64(secs))
}

fn parse(text: &str) -> Result<(Vec<(String, String)>, Vec<ResultRow>)> {
    let mut meta = Vec::new();
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (n, line) in text.lines().enumerate() {
        if let Some(c) = line.strip_prefix('#') {
            let c = c.trim_start();
            let (k, v) = c.split_once('=').unwrap_or((c, ""));
            meta.push((k.to_string(), v.to_string()));
        } else if !seen_header {
            if line != RESULTS_HEADER {
                return Err(Error::Data(format!("results header expected, found `{line}`")));
            }
            seen_header = true;
        } else if !line.is_empty() {
            rows.push(ResultRow::parse(line, n + 1)?);
        }
    }
    if !seen_header {
        return Err(Error::Data("results file has no header".into()));
    }
    Ok((meta, rows))
}

/// Provenance lines and rows of a results file.
pub fn read_results(path: impl AsRef<Path>) -> Result<(Vec<(String, String)>, Vec<ResultRow>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse(&text)
}

/// Fraction of rows that are correct, not abstained and certified at `r`.
pub fn certified_accuracy(rows: &[ResultRow], r: f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows.iter().filter(|x| x.correct && x.predict.is_some() && x.radius >= r).count();
    hits as f64 / rows.len() as f64
}

/// An append-only results file.
pub struct ResultsFile {
    path: PathBuf,
    file: File,
    existing: Vec<ResultRow>,
}

impl ResultsFile {
    /// Creates the file with provenance and header, or reopens an existing
    /// one for resumption. A torn final line is dropped. Reopening with
    /// different provenance is an error.
    pub fn open(path: &Path, provenance: &[(String, String)]) -> Result<Self> {
        let mut existing = Vec::new();
        let resumable = path.exists() && fs::metadata(path)?.len() > 0;
        if resumable {
            let mut text = fs::read_to_string(path)?;
            if !text.ends_with('\n') {
                let keep = text.rfind('\n').map_or(0, |i| i + 1);
                text.truncate(keep);
                fs::write(path, &text)?;
            }
            let (meta, rows) = parse(&text)?;
            if meta != provenance {
                return Err(Error::Data(format!(
                    "{} was written with a different configuration; remove it or pick another output",
                    path.display()
                )));
            }
            existing = rows;
        } else {
            let mut head = String::new();
            for (k, v) in provenance {
                head.push_str(&format!("# {k}={v}\n"));
            }
            head.push_str(RESULTS_HEADER);
            head.push('\n');
            fs::write(path, head)?;
        }
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(ResultsFile { path: path.to_path_buf(), file, existing })
    }

    pub fn existing(&self) -> &[ResultRow] {
        &self.existing
    }

    pub fn append(&mut self, row: &ResultRow) -> Result<()> {
        writeln!(self.file, "{}", row.line())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::Data(format!("{}: writing row {}: {e}", self.path.display(), row.idx)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(idx: usize, predict: Option<usize>, radius: f64) -> ResultRow {
        ResultRow { idx, label: 1, predict, radius, correct: predict == Some(1), time: Duration::from_millis(1234) }
    }

    #[test]
    fn line_format() {
        assert_eq!(row(4, None, 0.0).line(), "4\t1\t-1\t0.000000\t0\tPT1.234S");
        assert_eq!(row(0, Some(1), 0.42081).body(), "0\t1\t1\t0.420810\t1");
    }

    #[test]
    fn round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tsv");
        let prov = vec![("sigma".to_string(), "0.25".to_string())];
        let mut f = ResultsFile::open(&p, &prov).unwrap();
        f.append(&row(0, Some(1), 0.5)).unwrap();
        f.append(&row(1, None, 0.0)).unwrap();
        drop(f);
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("2\t1\t1\t0.1");
        fs::write(&p, text).unwrap();

        let f = ResultsFile::open(&p, &prov).unwrap();
        assert_eq!(f.existing().len(), 2);
        let (meta, rows) = read_results(&p).unwrap();
        assert_eq!(meta, prov);
        assert_eq!(rows[0].radius, 0.5);
        assert!(ResultsFile::open(&p, &[]).is_err());
    }

    #[test]
    fn accuracy_definition() {
        let rows = vec![row(0, Some(1), 0.5), row(1, None, 0.0), row(2, Some(0), 1.0), row(3, Some(1), 0.1)];
        assert_eq!(certified_accuracy(&rows, 0.0), 0.5);
        assert_eq!(certified_accuracy(&rows, 0.2), 0.25);
        assert_eq!(certified_accuracy(&rows, 0.6), 0.0);
    }
}
