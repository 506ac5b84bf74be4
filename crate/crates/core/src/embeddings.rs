//! Word-embedding tables and the word2vec-style binary and text formats.
//!
//! Binary layout: an ASCII header `<vocab_count> <dim>\n`, then for every
//! entry the token bytes, one space, `dim` little-endian `f32` values and a
//! single `\n`. The text layout shares the header and writes one entry per
//! line as the token followed by `dim` space-separated decimals.
//!
//! Tokens are kept as raw bytes so that a binary file round-trips exactly even
//! when a vocabulary is not valid UTF-8.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Which structural rule a malformed embedding file broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    Header,
    Truncated,
    Duplicate,
    Empty,
    Parse,
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FormatErrorKind::Header => "header",
            FormatErrorKind::Truncated => "truncated",
            FormatErrorKind::Duplicate => "duplicate",
            FormatErrorKind::Empty => "empty",
            FormatErrorKind::Parse => "parse",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("format error ({kind}) at byte offset {offset}: {detail}")]
    Format {
        kind: FormatErrorKind,
        offset: u64,
        detail: String,
    },
    #[error("dimension mismatch: {left} vs {right}")]
    Dim { left: usize, right: usize },
    #[error("degenerate vector: zero norm")]
    DegenerateVector,
    #[error("cannot write an empty embedding table")]
    EmptyTable,
    #[error("invalid token {0:?}: tokens must be non-empty and contain no spaces or newlines")]
    InvalidToken(String),
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EmbeddingError {
    fn format(kind: FormatErrorKind, offset: u64, detail: impl Into<String>) -> Self {
        EmbeddingError::Format {
            kind,
            offset,
            detail: detail.into(),
        }
    }

    /// The format rule that was violated, if this is a format error.
    pub fn format_kind(&self) -> Option<FormatErrorKind> {
        match self {
            EmbeddingError::Format { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

/// Cosine similarity, always inside `[-1, 1]` and never NaN.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<SimilarityScore> for f64 {
    fn from(s: SimilarityScore) -> f64 {
        s.0
    }
}

/// Computes `u·v / (‖u‖‖v‖)` in 64-bit arithmetic, clamped to `[-1, 1]`.
pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<SimilarityScore> {
    if u.len() != v.len() {
        return Err(EmbeddingError::Dim {
            left: u.len(),
            right: v.len(),
        });
    }
    let mut dot = 0.0f64;
    let mut uu = 0.0f64;
    let mut vv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.into(), b.into());
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if !(uu > 0.0 && vv > 0.0) {
        return Err(EmbeddingError::DegenerateVector);
    }
    let value = dot / (uu.sqrt() * vv.sqrt());
    if value.is_nan() {
        return Err(EmbeddingError::DegenerateVector);
    }
    Ok(SimilarityScore(value.clamp(-1.0, 1.0)))
}

pub fn l2_norm<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter()
        .map(|&x| {
            let x: f64 = x.into();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

fn valid_token(token: &[u8]) -> bool {
    !token.is_empty() && !token.iter().any(|&b| b == b' ' || b == b'\n')
}

/// An immutable-after-load vocabulary of fixed-dimension vectors.
///
/// Entries keep file order; lookup is exact and case-sensitive.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<Vec<u8>>,
    vectors: Vec<f32>,
    norms: Vec<f64>,
    index: HashMap<Vec<u8>, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tokens: Vec::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Builds a table from `(token, vector)` pairs, all of dimension `dim`.
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: AsRef<[u8]>,
    {
        let mut table = Self::new(dim);
        for (token, vector) in entries {
            table.insert(token.as_ref(), &vector)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, token: &[u8], vector: &[f32]) -> Result<()> {
        if !valid_token(token) {
            return Err(EmbeddingError::InvalidToken(
                String::from_utf8_lossy(token).into_owned(),
            ));
        }
        if vector.len() != self.dim {
            return Err(EmbeddingError::Dim {
                left: self.dim,
                right: vector.len(),
            });
        }
        if self.index.contains_key(token) {
            return Err(EmbeddingError::DuplicateToken(
                String::from_utf8_lossy(token).into_owned(),
            ));
        }
        self.index.insert(token.to_vec(), self.tokens.len());
        self.tokens.push(token.to_vec());
        self.vectors.extend_from_slice(vector);
        self.norms.push(l2_norm(vector));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> Option<&[f32]> {
        self.lookup_bytes(token.as_bytes())
    }

    pub fn lookup_bytes(&self, token: &[u8]) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.vector_at(i))
    }

    /// Cached L2 norm of a stored token.
    pub fn norm(&self, token: &str) -> Option<f64> {
        self.index.get(token.as_bytes()).map(|&i| self.norms[i])
    }

    fn vector_at(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Entries in stored order.
    pub fn iter(&self) -> impl Iterator<Item = (&[u8], &[f32])> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .map(move |(i, t)| (t.as_slice(), self.vector_at(i)))
    }

    pub fn write_binary_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.is_empty() || self.dim == 0 {
            return Err(EmbeddingError::EmptyTable);
        }
        writeln!(w, "{} {}", self.len(), self.dim)?;
        for (token, vector) in self.iter() {
            w.write_all(token)?;
            w.write_all(b" ")?;
            for &x in vector {
                w.write_f32::<LittleEndian>(x)?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_binary_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Text serialisation. `f32` values print with Rust's shortest
    /// round-trip formatting, so reading the text back is lossless.
    pub fn write_text_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.is_empty() || self.dim == 0 {
            return Err(EmbeddingError::EmptyTable);
        }
        writeln!(w, "{} {}", self.len(), self.dim)?;
        for (token, vector) in self.iter() {
            w.write_all(token)?;
            for &x in vector {
                write!(w, " {x:?}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_text_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

pub fn load_binary(path: &Path) -> Result<EmbeddingTable> {
    read_binary(BufReader::new(File::open(path)?))
}

pub fn load_text(path: &Path) -> Result<EmbeddingTable> {
    read_text(BufReader::new(File::open(path)?))
}

/// Hex SHA-256 of a file's bytes, recorded in reports next to results.
pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut file = BufReader::new(File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Reader that tracks the byte offset for error reporting.
struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: BufRead> Counting<R> {
    fn read_until(&mut self, delim: u8, buf: &mut Vec<u8>) -> io::Result<usize> {
        let n = self.inner.read_until(delim, buf)?;
        self.offset += n as u64;
        Ok(n)
    }

    /// Fills `buf` completely, returning how many bytes were available.
    fn fill(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        self.offset += filled as u64;
        Ok(filled)
    }

    fn at_eof(&mut self) -> io::Result<bool> {
        Ok(self.inner.fill_buf()?.is_empty())
    }
}

fn parse_header(line: &[u8], offset: u64) -> Result<(usize, usize)> {
    let bad = |detail: &str| EmbeddingError::format(FormatErrorKind::Header, offset, detail);
    let line = line
        .strip_suffix(b"\n")
        .ok_or_else(|| bad("header line is not newline-terminated"))?;
    let text = std::str::from_utf8(line).map_err(|_| bad("header is not ASCII"))?;
    let mut parts = text.split(' ');
    let (Some(count), Some(dim), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad("expected `<vocab_count> <dim>`"));
    };
    let is_decimal = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !is_decimal(count) || !is_decimal(dim) {
        return Err(bad("header fields must be decimal integers"));
    }
    let count: usize = count.parse().map_err(|_| bad("vocab count out of range"))?;
    let dim: usize = dim.parse().map_err(|_| bad("dimension out of range"))?;
    if count == 0 || dim == 0 {
        return Err(EmbeddingError::format(
            FormatErrorKind::Empty,
            offset,
            "vocab count and dimension must be positive",
        ));
    }
    Ok((count, dim))
}

fn insert_parsed(table: &mut EmbeddingTable, token: &[u8], vector: &[f32], offset: u64) -> Result<()> {
    if table.index.contains_key(token) {
        return Err(EmbeddingError::format(
            FormatErrorKind::Duplicate,
            offset,
            format!("token {:?} appears twice", String::from_utf8_lossy(token)),
        ));
    }
    if let Some(bad) = vector.iter().position(|x| !x.is_finite()) {
        return Err(EmbeddingError::format(
            FormatErrorKind::Parse,
            offset,
            format!("component {bad} is not finite"),
        ));
    }
    table.insert(token, vector)
}

/// Guards against headers that claim absurd sizes before any data is read.
fn reserve_hint(count: usize, dim: usize) -> usize {
    count.saturating_mul(dim).min(1 << 20)
}

/// Parses the binary format from any buffered reader.
pub fn read_binary<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut r = Counting {
        inner: reader,
        offset: 0,
    };
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.is_empty() {
        return Err(EmbeddingError::format(FormatErrorKind::Header, 0, "missing header"));
    }
    let (count, dim) = parse_header(&line, 0)?;
    let vector_bytes = dim
        .checked_mul(4)
        .ok_or_else(|| EmbeddingError::format(FormatErrorKind::Header, 0, "dimension too large"))?;

    let mut table = EmbeddingTable::new(dim);
    table.vectors.reserve(reserve_hint(count, dim));
    let mut token = Vec::new();
    let mut raw = vec![0u8; vector_bytes];
    let mut vector = vec![0f32; dim];
    for entry in 0..count {
        let start = r.offset;
        token.clear();
        r.read_until(b' ', &mut token)?;
        if token.last() != Some(&b' ') {
            return Err(EmbeddingError::format(
                FormatErrorKind::Truncated,
                r.offset,
                format!("entry {entry} of {count}: token not terminated by a space"),
            ));
        }
        token.pop();
        if !valid_token(&token) {
            return Err(EmbeddingError::format(
                FormatErrorKind::Parse,
                start,
                format!("entry {entry}: empty token or token containing a newline"),
            ));
        }
        let got = r.fill(&mut raw)?;
        if got < raw.len() {
            return Err(EmbeddingError::format(
                FormatErrorKind::Truncated,
                r.offset,
                format!("entry {entry}: expected {} vector bytes, found {got}", raw.len()),
            ));
        }
        for (dst, chunk) in vector.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        let mut nl = [0u8; 1];
        if r.fill(&mut nl)? == 0 {
            return Err(EmbeddingError::format(
                FormatErrorKind::Truncated,
                r.offset,
                format!("entry {entry}: missing trailing newline"),
            ));
        }
        if nl[0] != b'\n' {
            return Err(EmbeddingError::format(
                FormatErrorKind::Parse,
                r.offset - 1,
                format!("entry {entry}: expected newline after vector"),
            ));
        }
        insert_parsed(&mut table, &token, &vector, start)?;
    }
    if !r.at_eof()? {
        return Err(EmbeddingError::format(
            FormatErrorKind::Parse,
            r.offset,
            "trailing bytes after the declared entries",
        ));
    }
    Ok(table)
}

/// Parses the text format. Trailing spaces and `\r\n` line ends are accepted.
pub fn read_text<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut r = Counting {
        inner: reader,
        offset: 0,
    };
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.is_empty() {
        return Err(EmbeddingError::format(FormatErrorKind::Header, 0, "missing header"));
    }
    if line.ends_with(b"\r\n") {
        line.truncate(line.len() - 2);
        line.push(b'\n');
    }
    let (count, dim) = parse_header(&line, 0)?;

    let mut table = EmbeddingTable::new(dim);
    table.vectors.reserve(reserve_hint(count, dim));
    let mut vector = Vec::with_capacity(dim);
    for entry in 0..count {
        let start = r.offset;
        line.clear();
        if r.read_until(b'\n', &mut line)? == 0 {
            return Err(EmbeddingError::format(
                FormatErrorKind::Truncated,
                start,
                format!("expected {count} entries, found {entry}"),
            ));
        }
        let parse_err =
            |detail: String| EmbeddingError::format(FormatErrorKind::Parse, start, detail);
        let text = std::str::from_utf8(&line)
            .map_err(|_| parse_err(format!("entry {entry}: line is not UTF-8")))?;
        let text = text.trim_end_matches(['\n', '\r']);
        let mut fields = text.split(' ').filter(|f| !f.is_empty());
        let token = fields
            .next()
            .ok_or_else(|| parse_err(format!("entry {entry}: blank line")))?;
        vector.clear();
        for field in fields {
            let x: f32 = field
                .parse()
                .map_err(|_| parse_err(format!("entry {entry}: non-numeric component {field:?}")))?;
            vector.push(x);
        }
        if vector.len() != dim {
            return Err(parse_err(format!(
                "entry {entry}: expected {dim} components, found {}",
                vector.len()
            )));
        }
        if token.contains('\t') {
            return Err(parse_err(format!("entry {entry}: tab in token")));
        }
        insert_parsed(&mut table, token.as_bytes(), &vector, start)?;
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if rest.iter().any(|b| !b.is_ascii_whitespace()) {
        return Err(EmbeddingError::format(
            FormatErrorKind::Parse,
            r.offset,
            "trailing data after the declared entries",
        ));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn fixture_bytes() -> Vec<u8> {
        let mut bytes = b"2 3\n".to_vec();
        for (tok, v) in [("a", [1f32, 0., 0.]), ("b", [0., 1., 0.])] {
            bytes.extend_from_slice(tok.as_bytes());
            bytes.push(b' ');
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            bytes.push(b'\n');
        }
        bytes
    }

    #[test]
    fn reads_constructed_binary_fixture() {
        let t = read_binary(Cursor::new(fixture_bytes())).unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.len(), 2);
        assert_eq!(t.lookup("a").unwrap(), &[1., 0., 0.]);
        assert_eq!(t.lookup("b").unwrap(), &[0., 1., 0.]);
    }

    #[test]
    fn binary_round_trip_is_byte_identical() {
        let bytes = fixture_bytes();
        let t = read_binary(Cursor::new(&bytes)).unwrap();
        let mut out = Vec::new();
        t.write_binary_to(&mut out).unwrap();
        assert_eq!(out, bytes);
    }

    #[test]
    fn header_promising_more_entries_is_truncated() {
        let mut bytes = b"5 300\n".to_vec();
        for i in 0..4 {
            bytes.extend_from_slice(format!("w{i} ").as_bytes());
            bytes.extend(std::iter::repeat_n(0u8, 1200));
            bytes.push(b'\n');
        }
        let err = read_binary(Cursor::new(bytes)).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Truncated));
    }

    #[test]
    fn short_vector_is_truncated() {
        let mut bytes = fixture_bytes();
        bytes.truncate(bytes.len() - 6);
        let err = read_binary(Cursor::new(bytes)).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Truncated));
    }

    #[test]
    fn header_errors() {
        for bad in [&b"2\n"[..], b"x 3\n", b"2 3", b"2  3\n", b"-1 3\n", b""] {
            let err = read_binary(Cursor::new(bad.to_vec())).unwrap_err();
            assert_eq!(err.format_kind(), Some(FormatErrorKind::Header), "{bad:?}");
        }
        for empty in [&b"0 3\n"[..], b"2 0\n"] {
            let err = read_binary(Cursor::new(empty.to_vec())).unwrap_err();
            assert_eq!(err.format_kind(), Some(FormatErrorKind::Empty));
        }
    }

    #[test]
    fn duplicate_token_is_rejected() {
        let mut bytes = fixture_bytes();
        let pos = bytes.iter().rposition(|&b| b == b'b').unwrap();
        bytes[pos] = b'a';
        let err = read_binary(Cursor::new(bytes)).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Duplicate));
    }

    #[test]
    fn text_fixture_and_errors() {
        let t = read_text(Cursor::new(b"2 2\na 1.0 0.0\nb 0.0 1.0\n".to_vec())).unwrap();
        assert_eq!(t.lookup("a").unwrap(), &[1., 0.]);
        assert_eq!(t.lookup("b").unwrap(), &[0., 1.]);

        let err = read_text(Cursor::new(b"1 2\na 1.0 x\n".to_vec())).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Parse));
        let err = read_text(Cursor::new(b"3 2\na 1.0 0.0\n".to_vec())).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Truncated));
        let err = read_text(Cursor::new(b"2 1\na 1\na 2\n".to_vec())).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Duplicate));
    }

    #[test]
    fn text_and_binary_agree() {
        let bin = read_binary(Cursor::new(fixture_bytes())).unwrap();
        let txt = read_text(Cursor::new(b"2 3\na 1 0 0\nb 0 1 0 \n".to_vec())).unwrap();
        assert_eq!(bin, txt);
    }

    #[test]
    fn single_entry_writer_layout() {
        let t = EmbeddingTable::from_entries(1, [("a", vec![2.5f32])]).unwrap();
        let mut out = Vec::new();
        t.write_binary_to(&mut out).unwrap();
        let mut expected = b"1 1\na ".to_vec();
        expected.extend_from_slice(&2.5f32.to_le_bytes());
        expected.push(b'\n');
        assert_eq!(out, expected);
    }

    #[test]
    fn empty_table_cannot_be_written() {
        let err = EmbeddingTable::new(3).write_binary_to(&mut Vec::new()).unwrap_err();
        assert!(matches!(err, EmbeddingError::EmptyTable));
    }

    #[test]
    fn lookup_is_exact_and_case_sensitive() {
        let t = read_binary(Cursor::new(fixture_bytes())).unwrap();
        assert!(t.lookup("zzz").is_none());
        assert!(t.lookup("A").is_none());
        assert_eq!(t.norm("a"), Some(1.0));
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f64, -2.0, 5.5];
        assert!((cosine(&v, &v).unwrap().value() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap().value(), 0.0);
        let c = cosine(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap().value();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine(&[1.0f64], &[1.0, 0.0]),
            Err(EmbeddingError::Dim { .. })
        ));
        assert!(matches!(
            cosine(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(EmbeddingError::DegenerateVector)
        ));
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("nonzero", |v| l2_norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_properties(
            (u, v) in (1usize..12).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d))),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let c = cosine(&u, &v).unwrap().value();
            prop_assert_eq!(c, cosine(&v, &u).unwrap().value());
            prop_assert!(c.abs() <= 1.0);
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((cosine(&su, &sv).unwrap().value() - c).abs() < 1e-6);
        }

        #[test]
        fn cached_norms_match(v in proptest::collection::vec(-100.0f32..100.0, 1..20)) {
            let t = EmbeddingTable::from_entries(v.len(), [("tok", v.clone())]).unwrap();
            let exact = l2_norm(&v);
            let cached = t.norm("tok").unwrap();
            prop_assert!((cached - exact).abs() <= 1e-6 * exact.max(1e-30));
        }
    }
}
