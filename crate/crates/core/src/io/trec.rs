//! TREC run (`qid Q0 docid rank score tag`) and qrels (`qid 0 docid grade`)
//! text formats.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::Qrels;
use crate::retrieval::{RankedList, RunFile};

pub fn format_run(run: &RunFile, tag: &str) -> String {
    let mut out = String::new();
    for list in run.lists() {
        for (rank, (doc, score)) in list.entries.iter().enumerate() {
            writeln!(out, "{} Q0 {} {} {} {}", list.query_id, doc, rank + 1, score, tag).expect("write to string");
        }
    }
    out
}

/// Parses a run; queries keep their order of first appearance. Ranks must be
/// contiguous from 1 and scores non-increasing within each query.
pub fn parse_run(text: &str, path: &Path) -> Result<RunFile> {
    let mut lists: Vec<RankedList> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let rank: usize = fields[3].parse().map_err(|_| err(format!("bad rank {:?}", fields[3])))?;
        let score: f32 = fields[4].parse().map_err(|_| err(format!("bad score {:?}", fields[4])))?;
        if !score.is_finite() {
            return Err(err("non-finite score".into()));
        }
        let i = *slot.entry(fields[0].to_string()).or_insert_with(|| {
            lists.push(RankedList {
                query_id: fields[0].to_string(),
                entries: Vec::new(),
            });
            lists.len() - 1
        });
        let list = &mut lists[i];
        if rank != list.entries.len() + 1 {
            return Err(err(format!(
                "rank {rank} for query {} is not contiguous (expected {})",
                fields[0],
                list.entries.len() + 1
            )));
        }
        if let Some((_, prev)) = list.entries.last() {
            if score > *prev {
                return Err(err(format!("score {score} increases within query {}", fields[0])));
            }
        }
        list.entries.push((fields[2].to_string(), score));
    }
    Ok(RunFile::new(lists))
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, d, g) in qrels.iter() {
        writeln!(out, "{q} 0 {d} {g}").expect("write to string");
    }
    out
}

pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let grade: i64 = fields[3].parse().map_err(|_| err(format!("bad grade {:?}", fields[3])))?;
        if grade < 0 {
            return Err(err(format!("negative grade {grade}")));
        }
        qrels
            .insert(fields[0], fields[2], grade as u32)
            .map_err(|e| err(e.to_string()))?;
    }
    Ok(qrels)
}

pub fn read_run(path: impl AsRef<Path>) -> Result<RunFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text, path)
}

pub fn write_run(path: impl AsRef<Path>, run: &RunFile, tag: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_run(run, tag)).map_err(|e| Error::io(path, e))
}

pub fn read_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&text, path)
}

pub fn write_qrels(path: impl AsRef<Path>, qrels: &Qrels) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_qrels(qrels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::round_score;
    use proptest::prelude::*;

    #[test]
    fn run_text_layout() {
        let run = RunFile::new(vec![RankedList {
            query_id: "q1".into(),
            entries: vec![("d2".into(), 1.5), ("d1".into(), 0.25)],
        }]);
        assert_eq!(format_run(&run, "sbmoe"), "q1 Q0 d2 1 1.5 sbmoe\nq1 Q0 d1 2 0.25 sbmoe\n");
    }

    #[test]
    fn run_validation() {
        let p = Path::new("run");
        assert!(parse_run("q Q0 d 2 1.0 t\n", p).is_err());
        assert!(parse_run("q Q0 a 1 1.0 t\nq Q0 b 2 2.0 t\n", p).is_err());
        assert!(parse_run("q Q0 a 1 1.0\n", p).is_err());
        let run = parse_run("q2 Q0 a 1 1.0 t\nq1 Q0 b 1 3 t\n\n", p).unwrap();
        assert_eq!(run.lists()[0].query_id, "q2");
        assert_eq!(run.lists()[1].entries, vec![("b".to_string(), 3.0)]);
    }

    #[test]
    fn qrels_parse() {
        let p = Path::new("qrels");
        let q = parse_qrels("q1 0 d1 1\nq1 0 d3 2\nq2 Q0 d2 0\n", p).unwrap();
        assert_eq!(q.grade("q1", "d3"), 2);
        assert_eq!(q.len(), 3);
        assert!(parse_qrels("q1 0 d1 -1\n", p).is_err());
        assert!(parse_qrels("q1 0 d1 1\nq1 0 d1 2\n", p).is_err());
        assert_eq!(format_qrels(&q), "q1 0 d1 1\nq1 0 d3 2\nq2 0 d2 0\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn run_round_trip(scores in prop::collection::vec(-1e4f64..1e4, 1..20)) {
            let mut s: Vec<f32> = scores.iter().map(|&v| round_score(v)).collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let run = RunFile::new(vec![RankedList {
                query_id: "q".into(),
                entries: s.iter().enumerate().map(|(i, v)| (format!("d{i}"), *v)).collect(),
            }]);
            let text = format_run(&run, "t");
            let back = parse_run(&text, Path::new("mem")).unwrap();
            prop_assert_eq!(back, run);
        }
    }
}
