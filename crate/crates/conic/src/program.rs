//! Standard-form conic programs and their plain-text dump format.
//!
//! The text format is line oriented. Blank lines and lines starting with `#`
//! are ignored.
//!
//! ```text
//! conic-program v1
//! n <variables>
//! m <rows>
//! cones <count>
//! <kind> <size>        # kind ∈ {zero, nonneg, soc, psd}; psd size is the matrix order
//! c <nnz>
//! <col> <value>
//! b <nnz>
//! <row> <value>
//! A <nnz>
//! <row> <col> <value>
//! P <nnz>              # optional; full symmetric storage
//! <row> <col> <value>
//! end
//! ```
//!
//! Values are written in shortest round-trip form, so parsing a dump
//! reproduces the program bit for bit. Rows are grouped by cone in the order
//! of the cone list.

use std::fmt::Write as _;

use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::{Cone, ConicError};

/// `minimize ½xᵀPx + cᵀx  s.t.  Ax + s = b, s ∈ K₁ × … × K_p`.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    /// Symmetric positive semidefinite, both triangles stored.
    pub p: CsrMatrix<f64>,
    pub c: Vec<f64>,
    pub a: CsrMatrix<f64>,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConicProgram {
    /// Builds a program from a triplet list. Duplicate triplets are summed.
    pub fn from_triplets(
        c: Vec<f64>,
        triplets: &[(usize, usize, f64)],
        b: Vec<f64>,
        cones: Vec<Cone>,
    ) -> Result<Self, ConicError> {
        let n = c.len();
        let m = b.len();
        let mut coo = CooMatrix::new(m, n);
        for &(i, j, v) in triplets {
            if i >= m || j >= n {
                return Err(ConicError::Dimension(format!(
                    "triplet ({i}, {j}) outside a {m}×{n} constraint matrix"
                )));
            }
            if v != 0.0 {
                coo.push(i, j, v);
            }
        }
        let prog = Self {
            p: CsrMatrix::zeros(n, n),
            c,
            a: CsrMatrix::from(&coo),
            b,
            cones,
        };
        prog.validate()?;
        Ok(prog)
    }

    /// Sets the quadratic term from triplets covering both triangles.
    /// Duplicates are summed.
    pub fn with_quadratic(mut self, triplets: &[(usize, usize, f64)]) -> Result<Self, ConicError> {
        let n = self.c.len();
        let mut coo = CooMatrix::new(n, n);
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(ConicError::Dimension(format!(
                    "quadratic triplet ({i}, {j}) outside {n}×{n}"
                )));
            }
            if v != 0.0 {
                coo.push(i, j, v);
            }
        }
        self.p = CsrMatrix::from(&coo);
        self.validate()?;
        Ok(self)
    }

    pub fn has_quadratic(&self) -> bool {
        self.p.nnz() > 0
    }

    /// `½xᵀPx + cᵀx`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for (i, j, v) in self.p.triplet_iter() {
            quad += x[i] * v * x[j];
        }
        0.5 * quad + self.c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>()
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    /// Checks that the cone list partitions the rows and every entry is finite.
    pub fn validate(&self) -> Result<(), ConicError> {
        let m = self.b.len();
        if self.a.nrows() != m || self.a.ncols() != self.c.len() {
            return Err(ConicError::Dimension(format!(
                "A is {}×{}, expected {}×{}",
                self.a.nrows(),
                self.a.ncols(),
                m,
                self.c.len()
            )));
        }
        if self.p.nrows() != self.c.len() || self.p.ncols() != self.c.len() {
            return Err(ConicError::Dimension(
                "P does not match the variable count".into(),
            ));
        }
        let scale = self.p.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, j, v) in self.p.triplet_iter() {
            let vt = self
                .p
                .get_entry(j, i)
                .map(|e| e.into_value())
                .unwrap_or(0.0);
            if (v - vt).abs() > 1e-12 * scale {
                return Err(ConicError::Invalid(format!(
                    "P is not symmetric at ({i}, {j})"
                )));
            }
        }
        let total: usize = self.cones.iter().map(Cone::dim).sum();
        if total != m {
            return Err(ConicError::Dimension(format!(
                "cones cover {total} rows but the program has {m}"
            )));
        }
        for cone in &self.cones {
            if let Cone::SecondOrder(0) = cone {
                return Err(ConicError::Invalid(
                    "second-order cone of dimension 0".into(),
                ));
            }
        }
        let finite = self
            .c
            .iter()
            .chain(&self.b)
            .chain(self.a.values())
            .chain(self.p.values())
            .all(|x| x.is_finite());
        if !finite {
            return Err(ConicError::Invalid("non-finite problem data".into()));
        }
        Ok(())
    }

    /// Row ranges of each cone, in order.
    pub fn cone_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.cones
            .iter()
            .map(|k| {
                let r = start..start + k.dim();
                start += k.dim();
                r
            })
            .collect()
    }

    /// Renders the program in the plain-text dump format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "conic-program v1");
        let _ = writeln!(out, "n {}", self.c.len());
        let _ = writeln!(out, "m {}", self.b.len());
        let _ = writeln!(out, "cones {}", self.cones.len());
        for k in &self.cones {
            let size = match *k {
                Cone::Psd(order) => order,
                other => other.dim(),
            };
            let _ = writeln!(out, "{} {}", k.name(), size);
        }
        let sparse = |v: &[f64]| -> Vec<(usize, f64)> {
            v.iter()
                .copied()
                .enumerate()
                .filter(|(_, x)| *x != 0.0)
                .collect()
        };
        let c = sparse(&self.c);
        let _ = writeln!(out, "c {}", c.len());
        for (i, x) in c {
            let _ = writeln!(out, "{i} {x:?}");
        }
        let b = sparse(&self.b);
        let _ = writeln!(out, "b {}", b.len());
        for (i, x) in b {
            let _ = writeln!(out, "{i} {x:?}");
        }
        let _ = writeln!(out, "A {}", self.a.nnz());
        for (i, j, x) in self.a.triplet_iter() {
            let _ = writeln!(out, "{i} {j} {x:?}");
        }
        if self.has_quadratic() {
            let _ = writeln!(out, "P {}", self.p.nnz());
            for (i, j, x) in self.p.triplet_iter() {
                let _ = writeln!(out, "{i} {j} {x:?}");
            }
        }
        let _ = writeln!(out, "end");
        out
    }

    /// Parses the plain-text dump format.
    pub fn from_text(text: &str) -> Result<Self, ConicError> {
        let lines: Vec<(usize, Vec<&str>)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                (
                    i + 1,
                    l.split('#')
                        .next()
                        .unwrap_or("")
                        .split_whitespace()
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, t)| !t.is_empty())
            .collect();
        let mut cur = Cursor {
            lines: &lines,
            pos: 0,
        };

        let (no, toks) = cur.next("header")?;
        if toks != ["conic-program", "v1"] {
            return Err(parse_err(no, "missing `conic-program v1` header"));
        }
        let n = cur.header("n")?;
        let m = cur.header("m")?;
        let ncones = cur.header("cones")?;
        let mut cones = Vec::with_capacity(ncones);
        for _ in 0..ncones {
            let (no, toks) = cur.next("cone")?;
            let [kind, size] = toks[..] else {
                return Err(parse_err(no, "expected `<kind> <size>`"));
            };
            let size: usize = num(no, size)?;
            cones.push(match kind {
                "zero" => Cone::Zero(size),
                "nonneg" => Cone::Nonnegative(size),
                "soc" => Cone::SecondOrder(size),
                "psd" => Cone::Psd(size),
                other => return Err(parse_err(no, format!("unknown cone kind `{other}`"))),
            });
        }
        let c = cur.vector("c", n)?;
        let b = cur.vector("b", m)?;
        let a = cur.triplets("A")?;
        let p = match cur.peek() {
            Some(["P", ..]) => Some(cur.triplets("P")?),
            _ => None,
        };
        let (no, toks) = cur.next("end")?;
        if toks != ["end"] {
            return Err(parse_err(no, "expected `end`"));
        }
        let prog = Self::from_triplets(c, &a, b, cones)?;
        match p {
            Some(p) => prog.with_quadratic(&p),
            None => Ok(prog),
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> ConicError {
    ConicError::Parse {
        line,
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, ConicError> {
    s.parse()
        .map_err(|_| parse_err(line, format!("cannot parse `{s}`")))
}

struct Cursor<'a, 'b> {
    lines: &'a [(usize, Vec<&'b str>)],
    pos: usize,
}

impl<'b> Cursor<'_, 'b> {
    fn peek(&self) -> Option<&[&'b str]> {
        self.lines.get(self.pos).map(|(_, t)| t.as_slice())
    }

    fn next(&mut self, what: &str) -> Result<(usize, Vec<&'b str>), ConicError> {
        let item = self
            .lines
            .get(self.pos)
            .cloned()
            .ok_or_else(|| parse_err(0, format!("unexpected end of input, expected {what}")))?;
        self.pos += 1;
        Ok(item)
    }

    fn header(&mut self, key: &str) -> Result<usize, ConicError> {
        let (no, toks) = self.next(key)?;
        match toks[..] {
            [k, v] if k == key => num(no, v),
            _ => Err(parse_err(no, format!("expected `{key} <count>`"))),
        }
    }

    fn vector(&mut self, key: &str, len: usize) -> Result<Vec<f64>, ConicError> {
        let count = self.header(key)?;
        let mut v = vec![0.0; len];
        for _ in 0..count {
            let (no, toks) = self.next("entry")?;
            let [i, x] = toks[..] else {
                return Err(parse_err(no, "expected `<index> <value>`"));
            };
            let i: usize = num(no, i)?;
            if i >= len {
                return Err(parse_err(no, format!("index {i} out of range")));
            }
            v[i] = num(no, x)?;
        }
        Ok(v)
    }

    fn triplets(&mut self, key: &str) -> Result<Vec<(usize, usize, f64)>, ConicError> {
        let nnz = self.header(key)?;
        let mut out = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let (no, toks) = self.next("triplet")?;
            let [i, j, x] = toks[..] else {
                return Err(parse_err(no, "expected `<row> <col> <value>`"));
            };
            out.push((num(no, i)?, num(no, j)?, num(no, x)?));
        }
        Ok(out)
    }
}
