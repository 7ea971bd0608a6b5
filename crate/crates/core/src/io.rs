//! Plain-text matrix files and the versioned container used for learned models.
//!
//! Values are written with the shortest representation that parses back to the
//! same bits, so every write/read cycle is exact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CONTAINER_MAGIC: &str = "pstd-container";
pub const CONTAINER_VERSION: u32 = 1;

fn write_rows<T: Scalar, W: Write>(out: &mut W, m: &DMatrix<T>) -> Result<()> {
    for r in 0..m.nrows() {
        let mut line = String::new();
        for c in 0..m.ncols() {
            if c > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{:e}", m[(r, c)]));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn parse_value<T: Scalar>(tok: &str) -> Result<T> {
    tok.parse::<T>().map_err(|_| Error::Parse(format!("bad number `{tok}`")))
}

fn read_rows<T: Scalar>(lines: &mut impl Iterator<Item = std::io::Result<String>>, rows: usize, cols: usize) -> Result<DMatrix<T>> {
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let line = lines.next().ok_or_else(|| Error::Parse(format!("missing matrix row {r}")))??;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != cols {
            return Err(Error::Parse(format!("row {r}: expected {cols} values, found {}", toks.len())));
        }
        for (c, tok) in toks.iter().enumerate() {
            m[(r, c)] = parse_value(tok)?;
        }
    }
    Ok(m)
}

fn parse_shape(line: &str) -> Result<(usize, usize)> {
    let mut it = line.split_whitespace().map(|t| t.parse::<usize>());
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(r)), Some(Ok(c)), None) => Ok((r, c)),
        _ => Err(Error::Parse(format!("bad shape header `{line}`"))),
    }
}

/// Writes a matrix as a `rows cols` header followed by row-major values.
pub fn write_matrix<T: Scalar>(path: &Path, m: &DMatrix<T>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{} {}", m.nrows(), m.ncols())?;
    write_rows(&mut out, m)?;
    out.flush()?;
    Ok(())
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<DMatrix<T>> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))??;
    let (rows, cols) = parse_shape(&header)?;
    read_rows(&mut lines, rows, cols)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry<T: Scalar> {
    Text(String),
    Scalar(T),
    Matrix(DMatrix<T>),
}

/// Ordered named entries tagged with a kind string.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<T: Scalar> {
    pub kind: String,
    pub entries: Vec<(String, Entry<T>)>,
}

impl<T: Scalar> Container<T> {
    pub fn new(kind: &str) -> Self {
        Container { kind: kind.to_string(), entries: Vec::new() }
    }

    pub fn text(&mut self, key: &str, value: &str) -> &mut Self {
        self.entries.push((key.to_string(), Entry::Text(value.to_string())));
        self
    }

    pub fn scalar(&mut self, key: &str, value: T) -> &mut Self {
        self.entries.push((key.to_string(), Entry::Scalar(value)));
        self
    }

    pub fn matrix(&mut self, key: &str, value: DMatrix<T>) -> &mut Self {
        self.entries.push((key.to_string(), Entry::Matrix(value)));
        self
    }

    fn get(&self, key: &str) -> Option<&Entry<T>> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, e)| e)
    }

    pub fn get_text(&self, key: &str) -> Result<&str> {
        match self.get(key) {
            Some(Entry::Text(s)) => Ok(s),
            _ => Err(Error::Parse(format!("container entry `{key}` missing or not text"))),
        }
    }

    pub fn get_scalar(&self, key: &str) -> Result<T> {
        match self.get(key) {
            Some(Entry::Scalar(x)) => Ok(*x),
            _ => Err(Error::Parse(format!("container entry `{key}` missing or not a scalar"))),
        }
    }

    pub fn get_matrix(&self, key: &str) -> Result<&DMatrix<T>> {
        match self.get(key) {
            Some(Entry::Matrix(m)) => Ok(m),
            _ => Err(Error::Parse(format!("container entry `{key}` missing or not a matrix"))),
        }
    }

    pub fn has(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    /// Entries whose key starts with `prefix`, with the prefix stripped.
    pub fn matrices_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a DMatrix<T>)> + 'a {
        self.entries.iter().filter_map(move |(k, e)| match e {
            Entry::Matrix(m) => k.strip_prefix(prefix).map(|rest| (rest, m)),
            _ => None,
        })
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{CONTAINER_MAGIC} {CONTAINER_VERSION} {}", self.kind)?;
        for (key, entry) in &self.entries {
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("container key `{key}` must be nonempty without whitespace")));
            }
            match entry {
                Entry::Text(s) => {
                    if s.contains('\n') {
                        return Err(Error::invalid("container text must be a single line"));
                    }
                    writeln!(out, "text {key} {s}")?
                }
                Entry::Scalar(x) => writeln!(out, "scalar {key} {x:e}")?,
                Entry::Matrix(m) => {
                    writeln!(out, "matrix {key} {} {}", m.nrows(), m.ncols())?;
                    write_rows(out, m)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty container".into()))??;
        let mut head = header.split_whitespace();
        if head.next() != Some(CONTAINER_MAGIC) {
            return Err(Error::Parse("not a model container".into()));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse("missing container version".into()))?;
        if version != CONTAINER_VERSION {
            return Err(Error::Parse(format!("unsupported container version {version}")));
        }
        let kind = head.next().ok_or_else(|| Error::Parse("missing container kind".into()))?;
        let mut container = Container::new(kind);
        while let Some(line) = lines.next() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            let tag = parts.next().unwrap_or_default();
            let key = parts.next().ok_or_else(|| Error::Parse(format!("bad entry `{line}`")))?;
            let rest = parts.next().unwrap_or_default();
            match tag {
                "text" => {
                    container.text(key, rest);
                }
                "scalar" => {
                    container.scalar(key, parse_value(rest.trim())?);
                }
                "matrix" => {
                    let (r, c) = parse_shape(rest)?;
                    let m = read_rows(&mut lines, r, c)?;
                    container.matrix(key, m);
                }
                other => return Err(Error::Parse(format!("unknown entry tag `{other}`"))),
            }
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn matrix_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = dmatrix![0.1, 1.0 / 3.0, -2.5e-300; f64::MAX, 0.0, 7.0];
        let p = dir.path().join("m.txt");
        write_matrix(&p, &m).unwrap();
        let back: DMatrix<f64> = read_matrix(&p).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn container_round_trip() {
        let mut c = Container::<f32>::new("demo");
        c.text("tag", "hello world").scalar("g", 0.9).matrix("a", DMatrix::from_element(2, 0, 0.0));
        c.matrix("op.1", dmatrix![1.5f32, 2.0]);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::<f32>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_text("tag").unwrap(), "hello world");
        assert_eq!(back.matrices_with_prefix("op.").count(), 1);
    }

    #[test]
    fn rejects_wrong_version() {
        let text = "pstd-container 9 x\n";
        assert!(Container::<f64>::read_from(text.as_bytes()).is_err());
    }
}
