//! Binary embedding-stream format.
//!
//! All integers are little-endian `u32`, all vectors little-endian `f32`.
//!
//! ```text
//! header:  "MCPE" | version=1 | d | C
//!          C × (name_len | name bytes (UTF-8))
//!          C × (P_c | P_c × d floats)        prompt embeddings
//! records: label (0xFFFFFFFF = unlabeled) | N | N × d floats   until EOF
//! ```
//!
//! Every stored vector must be unit-norm within [`UNIT_SLACK`].

use std::fs::File;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{norm, Matrix};

pub const MAGIC: &[u8; 4] = b"MCPE";
pub const VERSION: u32 = 1;
pub const UNLABELED: u32 = 0xFFFF_FFFF;
/// Norm tolerance for stored vectors.
pub const UNIT_SLACK: f64 = 1e-4;
/// Norm deviation above this (but within the slack) is accepted with a warning.
pub const WARN_SLACK: f64 = 1e-5;
/// Upper bound on views per record and prompts per class; guards allocations
/// against corrupt counts.
pub const MAX_COUNT: u32 = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub dim: usize,
    pub class_names: Vec<String>,
    /// Per class, its prompt embeddings (each of length `dim`).
    pub prompts: Vec<Vec<Vec<f64>>>,
}

impl StreamHeader {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.class_names.is_empty() {
            return Err(Error::invalid("header needs d >= 1 and C >= 1"));
        }
        if self.prompts.len() != self.class_names.len() {
            return Err(Error::invalid("one prompt list per class is required"));
        }
        for (c, list) in self.prompts.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::invalid(format!("class {c} has no prompt embeddings")));
            }
            for p in list {
                check_vector(p, self.dim).map_err(|m| Error::invalid(format!("class {c} prompt: {m}")))?;
            }
        }
        Ok(())
    }

    /// Encoded size of the header in bytes.
    pub fn encoded_len(&self) -> u64 {
        let names: u64 = self.class_names.iter().map(|n| 4 + n.len() as u64).sum();
        let prompts: u64 = self.prompts.iter().map(|p| 4 + (p.len() * self.dim * 4) as u64).sum();
        16 + names + prompts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub label: Option<usize>,
    /// `N × d`; row 0 is the original view.
    pub views: Matrix,
}

impl SampleRecord {
    pub fn encoded_len(&self) -> u64 {
        8 + (self.views.rows() * self.views.cols() * 4) as u64
    }
}

fn check_vector(v: &[f64], dim: usize) -> std::result::Result<(), String> {
    if v.len() != dim {
        return Err(format!("dimension {} does not match d = {dim}", v.len()));
    }
    let n = norm(v);
    if !n.is_finite() || (n - 1.0).abs() > UNIT_SLACK {
        return Err(format!("vector norm {n} is not within {UNIT_SLACK} of 1"));
    }
    Ok(())
}

pub struct StreamWriter<W: Write> {
    inner: W,
    dim: usize,
    classes: usize,
    written: u64,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut inner: W, header: &StreamHeader) -> Result<Self> {
        header.validate()?;
        inner.write_all(MAGIC)?;
        put_u32(&mut inner, VERSION)?;
        put_u32(&mut inner, to_u32(header.dim)?)?;
        put_u32(&mut inner, to_u32(header.classes())?)?;
        for name in &header.class_names {
            put_u32(&mut inner, to_u32(name.len())?)?;
            inner.write_all(name.as_bytes())?;
        }
        for list in &header.prompts {
            put_u32(&mut inner, to_u32(list.len())?)?;
            for p in list {
                put_f32s(&mut inner, p)?;
            }
        }
        Ok(Self {
            inner,
            dim: header.dim,
            classes: header.classes(),
            written: 0,
        })
    }

    pub fn write_record(&mut self, record: &SampleRecord) -> Result<()> {
        let views = &record.views;
        if views.rows() == 0 || views.rows() > MAX_COUNT as usize {
            return Err(Error::invalid(format!("record has {} views", views.rows())));
        }
        if views.cols() != self.dim {
            return Err(Error::invalid(format!(
                "record dimension {} does not match d = {}",
                views.cols(),
                self.dim
            )));
        }
        let label = match record.label {
            Some(l) if l >= self.classes => {
                return Err(Error::invalid(format!("label {l} out of range for C = {}", self.classes)))
            }
            Some(l) => l as u32,
            None => UNLABELED,
        };
        for v in views.iter_rows() {
            check_vector(v, self.dim).map_err(Error::InvalidArgument)?;
        }
        put_u32(&mut self.inner, label)?;
        put_u32(&mut self.inner, views.rows() as u32)?;
        put_f32s(&mut self.inner, views.as_slice())?;
        self.written += 1;
        Ok(())
    }

    pub fn records_written(&self) -> u64 {
        self.written
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{n} does not fit in u32")))
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32s(w: &mut impl Write, vals: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for &v in vals {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Streaming reader. Records are decoded one at a time; the iterator ends
/// at a clean EOF on a record boundary and yields an error for anything
/// else.
pub struct StreamReader<R: Read> {
    inner: R,
    header: StreamHeader,
    offset: u64,
    warnings: u64,
    records: u64,
    failed: bool,
    buf: Vec<u8>,
}

impl<R: Read> StreamReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut r = Self {
            inner,
            header: StreamHeader {
                dim: 0,
                class_names: Vec::new(),
                prompts: Vec::new(),
            },
            offset: 0,
            warnings: 0,
            records: 0,
            failed: false,
            buf: Vec::new(),
        };
        r.header = r.read_header()?;
        Ok(r)
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    /// Vectors accepted with a norm deviation above [`WARN_SLACK`].
    pub fn warnings(&self) -> u64 {
        self.warnings
    }

    pub fn records_read(&self) -> u64 {
        self.records
    }

    /// Byte offset of the next unread byte.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn read_exact_at(&mut self, n: usize, what: &str) -> Result<()> {
        self.buf.resize(n, 0);
        let start = self.offset;
        let mut got = 0;
        while got < n {
            match self.inner.read(&mut self.buf[got..]) {
                Ok(0) => {
                    return Err(Error::format(
                        start + got as u64,
                        format!("truncated {what}: expected {n} bytes, found {got}"),
                    ))
                }
                Ok(k) => got += k,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += n as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        self.read_exact_at(4, what)?;
        Ok(u32::from_le_bytes(self.buf[..4].try_into().expect("4 bytes")))
    }

    fn read_vectors(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let d = self.header.dim;
        let start = self.offset;
        self.read_exact_at(count * d * 4, what)?;
        let vals: Vec<f64> = self
            .buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        for (i, v) in vals.chunks_exact(d).enumerate() {
            let n = norm(v);
            let dev = (n - 1.0).abs();
            if !n.is_finite() || dev > UNIT_SLACK {
                return Err(Error::format(
                    start + (i * d * 4) as u64,
                    format!("{what}: vector norm {n} is not within {UNIT_SLACK} of 1"),
                ));
            }
            if dev > WARN_SLACK {
                self.warnings += 1;
                log::warn!("{what} at byte {}: norm deviates by {dev:.2e}", start + (i * d * 4) as u64);
            }
        }
        Ok(vals)
    }

    fn read_count(&mut self, what: &str) -> Result<usize> {
        let at = self.offset;
        let n = self.read_u32(what)?;
        if n > MAX_COUNT {
            return Err(Error::format(at, format!("{what} {n} exceeds the limit {MAX_COUNT}")));
        }
        Ok(n as usize)
    }

    fn read_header(&mut self) -> Result<StreamHeader> {
        self.read_exact_at(4, "magic")?;
        if &self.buf[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"MCPE\""));
        }
        let version = self.read_u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let dim = self.read_u32("dimension")? as usize;
        let classes = self.read_u32("class count")? as usize;
        if dim == 0 || classes == 0 {
            return Err(Error::format(8, "d and C must be at least 1"));
        }
        if dim > MAX_COUNT as usize || classes > MAX_COUNT as usize {
            return Err(Error::format(8, "d or C exceeds the supported limit"));
        }
        self.header.dim = dim;
        let mut names = Vec::with_capacity(classes);
        for _ in 0..classes {
            let len = self.read_count("class name length")?;
            let at = self.offset;
            self.read_exact_at(len, "class name")?;
            let name = String::from_utf8(self.buf[..len].to_vec())
                .map_err(|_| Error::format(at, "class name is not valid UTF-8"))?;
            names.push(name);
        }
        let mut prompts = Vec::with_capacity(classes);
        for c in 0..classes {
            let at = self.offset;
            let p = self.read_count("prompt count")?;
            if p == 0 {
                return Err(Error::format(at, format!("class {c} has no prompt embeddings")));
            }
            let vals = self.read_vectors(p, "prompt embedding")?;
            prompts.push(vals.chunks_exact(dim).map(<[f64]>::to_vec).collect());
        }
        Ok(StreamHeader {
            dim,
            class_names: names,
            prompts,
        })
    }

    fn next_record(&mut self) -> Result<Option<SampleRecord>> {
        // A clean EOF is only allowed before the first byte of a record.
        let start = self.offset;
        let mut first = [0u8; 1];
        loop {
            match self.inner.read(&mut first) {
                Ok(0) => return Ok(None),
                Ok(_) => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += 1;
        self.read_exact_at(3, "record label")?;
        let mut label_bytes = [first[0], 0, 0, 0];
        label_bytes[1..].copy_from_slice(&self.buf[..3]);
        let raw = u32::from_le_bytes(label_bytes);
        let label = if raw == UNLABELED {
            None
        } else if (raw as usize) < self.header.classes() {
            Some(raw as usize)
        } else {
            return Err(Error::format(
                start,
                format!("label {raw} out of range for C = {}", self.header.classes()),
            ));
        };
        let at = self.offset;
        let n = self.read_count("view count")?;
        if n == 0 {
            return Err(Error::format(at, "record has zero views"));
        }
        let vals = self.read_vectors(n, "view")?;
        self.records += 1;
        Ok(Some(SampleRecord {
            label,
            views: Matrix::from_vec(n, self.header.dim, vals)?,
        }))
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.next_record() {
            Ok(r) => r.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<StreamReader<BufReader<File>>> {
    StreamReader::new(BufReader::new(File::open(path)?))
}

/// Write a whole stream to `path`; returns the record count.
pub fn write_stream<I>(path: impl AsRef<Path>, header: &StreamHeader, records: I) -> Result<u64>
where
    I: IntoIterator<Item = Result<SampleRecord>>,
{
    let mut w = StreamWriter::new(BufWriter::new(File::create(path)?), header)?;
    for r in records {
        w.write_record(&r?)?;
    }
    let n = w.records_written();
    w.finish()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap()
    }

    fn header(rng: &mut ChaCha8Rng, c: usize, d: usize) -> StreamHeader {
        StreamHeader {
            dim: d,
            class_names: (0..c).map(|i| format!("class_{i}")).collect(),
            prompts: (0..c).map(|_| vec![unit(rng, d), unit(rng, d)]).collect(),
        }
    }

    fn encode(h: &StreamHeader, recs: &[SampleRecord]) -> Vec<u8> {
        let mut w = StreamWriter::new(Vec::new(), h).unwrap();
        for r in recs {
            w.write_record(r).unwrap();
        }
        w.finish().unwrap()
    }

    fn records(rng: &mut ChaCha8Rng, n: usize, c: usize, d: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| {
                let views = rng.random_range(1..5);
                let rows: Vec<Vec<f64>> = (0..views).map(|_| unit(rng, d)).collect();
                SampleRecord {
                    label: if i % 7 == 3 { None } else { Some(rng.random_range(0..c)) },
                    views: Matrix::from_rows(&rows, d).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn round_trip_within_f32_and_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = header(&mut rng, 3, 8);
        let recs = records(&mut rng, 100, 3, 8);
        let bytes = encode(&h, &recs);
        let mut reader = StreamReader::new(bytes.as_slice()).unwrap();
        assert_eq!(reader.header().class_names, h.class_names);
        let back: Vec<SampleRecord> = reader.by_ref().map(Result::unwrap).collect();
        assert_eq!(back.len(), 100);
        assert_eq!(reader.warnings(), 0);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert!(a.views.max_abs_diff(&b.views) < 1e-7);
        }
        // Re-encoding what was read reproduces the bytes exactly.
        let h2 = reader.header().clone();
        assert_eq!(encode(&h2, &back), bytes);
    }

    #[test]
    fn header_size_matches_layout_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 512;
        let h = StreamHeader {
            dim: d,
            class_names: (0..10).map(|i| format!("c{i}")).collect(),
            prompts: (0..10).map(|_| vec![unit(&mut rng, d)]).collect(),
        };
        let recs = records(&mut rng, 3, 10, d);
        let bytes = encode(&h, &recs);
        let names: usize = h.class_names.iter().map(|n| 4 + n.len()).sum();
        let rec_bytes: usize = recs.iter().map(|r| 8 + r.views.rows() * d * 4).sum();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + names + 10 * (4 + 512 * 4) + rec_bytes);
        assert_eq!(h.encoded_len() as usize, bytes.len() - rec_bytes);
    }

    #[test]
    fn truncation_names_the_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = header(&mut rng, 2, 4);
        let recs = records(&mut rng, 2, 2, 4);
        let bytes = encode(&h, &recs);
        let cut = bytes.len() - 5;
        let mut reader = StreamReader::new(&bytes[..cut]).unwrap();
        assert!(reader.next().unwrap().is_ok());
        match reader.next().unwrap() {
            Err(Error::Format { offset, message }) => {
                assert!(message.contains("truncated"), "{message}");
                assert_eq!(offset, cut as u64);
            }
            other => panic!("expected a format error, got {other:?}"),
        }
        assert!(reader.next().is_none());

        // Truncated inside the header.
        match StreamReader::new(&bytes[..10]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = header(&mut rng, 2, 4);
        let mut bytes = encode(&h, &[]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(StreamReader::new(bad.as_slice()), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(StreamReader::new(bad.as_slice()), Err(Error::Format { offset: 4, .. })));

        // A record whose vector is scaled by 2.
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        let mut reader = StreamReader::new(bytes.as_slice()).unwrap();
        let err = reader.next().unwrap().unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == h.encoded_len() + 8));
    }

    #[test]
    fn rejects_label_out_of_range_and_zero_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = header(&mut rng, 2, 4);
        let base = encode(&h, &[]);
        let mut bytes = base.clone();
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        let mut reader = StreamReader::new(bytes.as_slice()).unwrap();
        assert!(reader.next().unwrap().is_err());

        let mut bytes = base;
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let mut reader = StreamReader::new(bytes.as_slice()).unwrap();
        assert!(reader.next().unwrap().is_err());
    }

    #[test]
    fn writer_validates_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = header(&mut rng, 2, 4);
        let mut w = StreamWriter::new(Vec::new(), &h).unwrap();
        let bad_dim = SampleRecord {
            label: Some(0),
            views: Matrix::from_rows(&[unit(&mut rng, 3)], 3).unwrap(),
        };
        assert!(w.write_record(&bad_dim).is_err());
        let bad_label = SampleRecord {
            label: Some(2),
            views: Matrix::from_rows(&[unit(&mut rng, 4)], 4).unwrap(),
        };
        assert!(w.write_record(&bad_label).is_err());
        let not_unit = SampleRecord {
            label: Some(1),
            views: Matrix::from_rows(&[vec![0.5, 0.0, 0.0, 0.0]], 4).unwrap(),
        };
        assert!(w.write_record(&not_unit).is_err());
    }

    #[test]
    fn near_unit_vectors_raise_warnings() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = header(&mut rng, 2, 4);
        let mut bytes = encode(&h, &[]);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for v in [1.00005f32, 0.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut reader = StreamReader::new(bytes.as_slice()).unwrap();
        assert!(reader.next().unwrap().is_ok());
        assert_eq!(reader.warnings(), 1);
    }
}
