//! Plain-text sparse triplet format for quadratic programs.
//!
//! ```text
//! qp 1
//! n <n>
//! offset <value>
//! P <nnz>            upper triangle, one "row col value" line per entry
//! c                  n lines
//! Aeq <rows> <nnz>   triplet lines
//! beq                rows lines
//! Ain <rows> <nnz>
//! bin
//! lb                 n lines, "inf"/"-inf" for absent bounds
//! ub
//! ```
//!
//! Indices are 0-based. Values use the shortest decimal form that round-trips,
//! so a dump reloads bit-for-bit.

use std::io::{BufRead, Write};
use std::path::Path;

use super::QuadraticProgram;
use crate::error::{Error, Result};
use crate::sparse::CscMatrix;

pub fn write_qp<W: Write>(qp: &QuadraticProgram, mut w: W) -> std::io::Result<()> {
    writeln!(w, "qp 1")?;
    writeln!(w, "n {}", qp.n)?;
    writeln!(w, "offset {}", qp.offset)?;
    writeln!(w, "P {}", qp.p.nnz())?;
    write_triplets(&qp.p, &mut w)?;
    writeln!(w, "c")?;
    write_vec(&qp.c, &mut w)?;
    writeln!(w, "Aeq {} {}", qp.a_eq.nrows, qp.a_eq.nnz())?;
    write_triplets(&qp.a_eq, &mut w)?;
    writeln!(w, "beq")?;
    write_vec(&qp.b_eq, &mut w)?;
    writeln!(w, "Ain {} {}", qp.a_in.nrows, qp.a_in.nnz())?;
    write_triplets(&qp.a_in, &mut w)?;
    writeln!(w, "bin")?;
    write_vec(&qp.b_in, &mut w)?;
    writeln!(w, "lb")?;
    write_vec(&qp.lb, &mut w)?;
    writeln!(w, "ub")?;
    write_vec(&qp.ub, &mut w)
}

fn write_triplets<W: Write>(m: &CscMatrix, w: &mut W) -> std::io::Result<()> {
    for (i, j, v) in m.triplets() {
        writeln!(w, "{i} {j} {v}")?;
    }
    Ok(())
}

fn write_vec<W: Write>(v: &[f64], w: &mut W) -> std::io::Result<()> {
    for x in v {
        writeln!(w, "{x}")?;
    }
    Ok(())
}

struct Lines<R: BufRead> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        loop {
            self.line += 1;
            match self.inner.next() {
                None => return Err(Error::parse(format!("line {}", self.line), "unexpected end of file")),
                Some(l) => {
                    let l = l?;
                    let t = l.trim();
                    if !t.is_empty() && !t.starts_with('#') {
                        return Ok(t.to_string());
                    }
                }
            }
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(format!("line {}", self.line), msg)
    }

    /// Reads a header `<tag> <k integers>`.
    fn header(&mut self, tag: &str, k: usize) -> Result<Vec<usize>> {
        let l = self.next_line()?;
        let mut it = l.split_whitespace();
        if it.next() != Some(tag) {
            return Err(self.err(format!("expected section '{tag}', found '{l}'")));
        }
        let vals: Vec<usize> = it
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| self.err(format!("bad integer in '{l}': {e}")))?;
        if vals.len() != k {
            return Err(self.err(format!("section '{tag}' expects {k} integers")));
        }
        Ok(vals)
    }

    fn float(&mut self) -> Result<f64> {
        let l = self.next_line()?;
        l.parse::<f64>().map_err(|e| self.err(format!("bad number '{l}': {e}")))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        (0..count).map(|_| self.float()).collect()
    }

    fn triplets(&mut self, nnz: usize, nrows: usize, ncols: usize) -> Result<CscMatrix> {
        let mut t = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let l = self.next_line()?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(self.err(format!("expected 'row col value', found '{l}'")));
            }
            let i: usize = parts[0].parse().map_err(|_| self.err("bad row index"))?;
            let j: usize = parts[1].parse().map_err(|_| self.err("bad column index"))?;
            let v: f64 = parts[2].parse().map_err(|_| self.err("bad value"))?;
            if i >= nrows || j >= ncols {
                return Err(self.err(format!("entry ({i},{j}) outside {nrows}x{ncols}")));
            }
            t.push((i, j, v));
        }
        Ok(CscMatrix::from_triplets(nrows, ncols, &t))
    }
}

pub fn read_qp<R: BufRead>(r: R) -> Result<QuadraticProgram> {
    let mut l = Lines {
        inner: r.lines(),
        line: 0,
    };
    let version = l.header("qp", 1)?;
    if version[0] != 1 {
        return Err(l.err(format!("unsupported version {}", version[0])));
    }
    let n = l.header("n", 1)?[0];
    let off_line = l.next_line()?;
    let offset = off_line
        .strip_prefix("offset")
        .and_then(|s| s.trim().parse::<f64>().ok())
        .ok_or_else(|| l.err("expected 'offset <value>'"))?;
    let nnz = l.header("P", 1)?[0];
    let p = l.triplets(nnz, n, n)?;
    l.header("c", 0)?;
    let c = l.floats(n)?;
    let h = l.header("Aeq", 2)?;
    let a_eq = l.triplets(h[1], h[0], n)?;
    l.header("beq", 0)?;
    let b_eq = l.floats(h[0])?;
    let h = l.header("Ain", 2)?;
    let a_in = l.triplets(h[1], h[0], n)?;
    l.header("bin", 0)?;
    let b_in = l.floats(h[0])?;
    l.header("lb", 0)?;
    let lb = l.floats(n)?;
    l.header("ub", 0)?;
    let ub = l.floats(n)?;
    QuadraticProgram::new(p, c, offset, a_eq, b_eq, a_in, b_in, lb, ub)
}

pub fn save(qp: &QuadraticProgram, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_qp(qp, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<QuadraticProgram> {
    let f = std::fs::File::open(path)?;
    read_qp(std::io::BufReader::new(f))
}
