//! Plain-text checkpoint container.
//!
//! ```text
//! lsidn-checkpoint v1
//! meta <key> <value>            # zero or more, value runs to end of line
//! param <name> <rows> <cols>    # one block per parameter, in store order
//! <cols values>                 # `rows` lines, row-major
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! reading a checkpoint back reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "lsidn-checkpoint v1";

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            meta: Vec::new(),
            params,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (_, p) in self.params.iter() {
            let t = &p.value;
            let _ = writeln!(out, "param {} {} {}", p.name, t.rows(), t.cols());
            for r in 0..t.rows() {
                let line: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(bad(0, "missing header")),
        }
        let mut ck = Checkpoint::default();
        loop {
            let Some((n, line)) = lines.next() else {
                return Err(Error::Checkpoint("missing end marker".into()));
            };
            let line = line.trim();
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("param ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                let [name, rows, cols] = fields[..] else {
                    return Err(bad(n, "expected `param <name> <rows> <cols>`"));
                };
                let rows: usize = rows.parse().map_err(|_| bad(n, "bad row count"))?;
                let cols: usize = cols.parse().map_err(|_| bad(n, "bad column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (m, row) = lines.next().ok_or_else(|| bad(n, "truncated parameter"))?;
                    let before = data.len();
                    for tok in row.split_whitespace() {
                        data.push(tok.parse::<f64>().map_err(|_| bad(m, "bad value"))?);
                    }
                    if data.len() - before != cols {
                        return Err(bad(m, "wrong number of values"));
                    }
                }
                ck.params.add(name, Tensor::new(rows, cols, data)?)?;
            } else if !line.is_empty() {
                return Err(bad(n, "unrecognized line"));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
