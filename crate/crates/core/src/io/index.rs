//! On-disk layout of a refined document index: a directory holding
//! `docs.sbme` (+ `docs.ids`), `routing.tsv` and `meta.txt`.
//!
//! `routing.tsv` has one line per document: `doc_id<TAB>expert` for TOP-1,
//! `doc_id<TAB>expert<TAB>w_0,w_1,..` when weights exist, `doc_id<TAB>-`
//! when no block was applied. `meta.txt` holds `key=value` lines for
//! `fingerprint`, `pooling`, `random_style`, `experts` and `dim`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::moe::{Pooling, Routing};
use crate::numerics::Matrix;
use crate::retrieval::RefinedIndex;

use super::{read_embeddings, read_text, write_embeddings, write_text};

#[derive(Debug, Clone, PartialEq)]
pub struct IndexMeta {
    pub fingerprint: String,
    /// `None` for the identity baseline.
    pub pooling: Option<Pooling>,
    pub random_style: Option<Pooling>,
    pub experts: usize,
    pub dim: usize,
}

impl IndexMeta {
    pub fn format(&self) -> String {
        let opt = |p: Option<Pooling>| p.map_or("none", Pooling::name);
        format!(
            "fingerprint={}\npooling={}\nrandom_style={}\nexperts={}\ndim={}\n",
            self.fingerprint,
            opt(self.pooling),
            opt(self.random_style),
            self.experts,
            self.dim
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut meta = IndexMeta {
            fingerprint: String::new(),
            pooling: None,
            random_style: None,
            experts: 0,
            dim: 0,
        };
        for (lineno, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            let opt = |v: &str| -> Result<Option<Pooling>> {
                if v == "none" {
                    Ok(None)
                } else {
                    v.parse().map(Some)
                }
            };
            match k {
                "fingerprint" => meta.fingerprint = v.to_string(),
                "pooling" => meta.pooling = opt(v).map_err(|e| err(e.to_string()))?,
                "random_style" => meta.random_style = opt(v).map_err(|e| err(e.to_string()))?,
                "experts" => meta.experts = v.parse().map_err(|_| err(format!("bad experts {v:?}")))?,
                "dim" => meta.dim = v.parse().map_err(|_| err(format!("bad dim {v:?}")))?,
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        if meta.fingerprint.is_empty() {
            return Err(Error::invalid(format!("{} has no fingerprint", path.display())));
        }
        Ok(meta)
    }
}

pub fn format_routing(ids: &[String], routing: &Routing) -> String {
    let mut out = String::new();
    for (i, id) in ids.iter().enumerate() {
        match routing {
            Routing::Identity(_) => writeln!(out, "{id}\t-"),
            Routing::Selected(s) => writeln!(out, "{id}\t{}", s[i]),
            Routing::Weights(w) => {
                let ws: Vec<String> = w.row(i).iter().map(|v| v.to_string()).collect();
                writeln!(out, "{id}\t{}\t{}", routing.top_expert(i).expect("weights"), ws.join(","))
            }
        }
        .expect("write to string");
    }
    out
}

/// Parses `routing.tsv`; returns the document ids and the routing.
pub fn parse_routing(text: &str, path: &Path) -> Result<(Vec<String>, Routing)> {
    let mut ids = Vec::new();
    let mut selected = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut width = None;
    let mut identity = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        ids.push(f.first().copied().unwrap_or_default().to_string());
        match f.as_slice() {
            [_, "-"] => identity += 1,
            [_, e] => selected.push(e.parse().map_err(|_| err(format!("bad expert {e:?}")))?),
            [_, _, ws] => {
                let row: Vec<f64> = ws
                    .split(',')
                    .map(|v| v.parse().map_err(|_| err(format!("bad weight {v:?}"))))
                    .collect::<Result<_>>()?;
                if *width.get_or_insert(row.len()) != row.len() {
                    return Err(err("weight rows differ in length".into()));
                }
                weights.extend(row);
            }
            _ => return Err(err(format!("expected 2 or 3 fields, found {}", f.len()))),
        }
    }
    let n = ids.len();
    let routing = if identity == n {
        Routing::Identity(n)
    } else if selected.len() == n {
        Routing::Selected(selected)
    } else if let (Some(w), true) = (width, weights.len() == n * width.unwrap_or(0)) {
        Routing::Weights(Matrix::from_vec(n, w, weights)?)
    } else {
        return Err(Error::invalid(format!("{} mixes routing kinds", path.display())));
    };
    Ok((ids, routing))
}

pub fn write_index(dir: impl AsRef<Path>, index: &RefinedIndex, meta: &IndexMeta) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_embeddings(dir.join("docs.sbme"), &index.docs)?;
    write_text(dir.join("routing.tsv"), &format_routing(index.docs.ids(), &index.routing))?;
    write_text(dir.join("meta.txt"), &meta.format())
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<(RefinedIndex, IndexMeta)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.txt");
    let meta = IndexMeta::parse(&read_text(&meta_path)?, &meta_path)?;
    let docs = read_embeddings(dir.join("docs.sbme"))?;
    let routing_path = dir.join("routing.tsv");
    let (ids, routing) = parse_routing(&read_text(&routing_path)?, &routing_path)?;
    if ids != docs.ids() {
        return Err(Error::invalid(format!(
            "{} does not list the indexed documents in order",
            routing_path.display()
        )));
    }
    Ok((
        RefinedIndex {
            docs,
            routing,
            fingerprint: meta.fingerprint.clone(),
        },
        meta,
    ))
}
