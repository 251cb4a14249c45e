//! Corpus ingestion, train/validation splitting and padded batching.
//!
//! Input rows look like `"class","field1"[,"field2"...]` with a 1-based class.
//! Quoting follows RFC 4180 (`""` inside a quoted field is a literal quote).
//! The reader is strict: stray quotes and unterminated fields are errors.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::vocab::{Vocabulary, PAD_INDEX};

pub const DEFAULT_MAX_LEN: usize = 4096;

/// One parsed CSV row, label already 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvRecord {
    pub line: usize,
    pub label: usize,
    pub fields: Vec<String>,
}

impl CsvRecord {
    pub fn text(&self) -> String {
        self.fields.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub label: usize,
    pub text: String,
    indices: Vec<usize>,
}

impl Document {
    /// Encodes `text`, truncating to `max_len` symbols.
    pub fn new(label: usize, text: impl Into<String>, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let text = text.into();
        let mut indices = vocab.encode(&text);
        if indices.is_empty() {
            return Err(Error::EmptyDocument);
        }
        indices.truncate(max_len.max(1));
        Ok(Document { label, text, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Anything carrying a class label; lets the splitter work on raw rows and documents alike.
pub trait Labeled {
    fn label(&self) -> usize;
}

impl Labeled for Document {
    fn label(&self) -> usize {
        self.label
    }
}

impl Labeled for CsvRecord {
    fn label(&self) -> usize {
        self.label
    }
}

/// Splits CSV text into records of raw fields, tracking the line each record starts on.
pub fn parse_csv(input: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut records = Vec::new();
    let mut chars = input.chars().peekable();
    let mut line = 1usize;

    while chars.peek().is_some() {
        let start_line = line;
        let mut fields = Vec::new();
        let mut field = String::new();
        let mut quoted = false;
        let mut at_field_start = true;
        let mut after_quote = false;

        loop {
            let Some(c) = chars.next() else {
                if quoted {
                    return Err(Error::Parse {
                        line: start_line,
                        message: "unterminated quoted field".into(),
                    });
                }
                fields.push(std::mem::take(&mut field));
                break;
            };
            if quoted {
                match c {
                    '"' if chars.peek() == Some(&'"') => {
                        chars.next();
                        field.push('"');
                    }
                    '"' => {
                        quoted = false;
                        after_quote = true;
                    }
                    '\n' => {
                        line += 1;
                        field.push(c);
                    }
                    _ => field.push(c),
                }
                continue;
            }
            match c {
                ',' => {
                    fields.push(std::mem::take(&mut field));
                    at_field_start = true;
                    after_quote = false;
                }
                '\r' if chars.peek() == Some(&'\n') => {}
                '\n' => {
                    line += 1;
                    fields.push(std::mem::take(&mut field));
                    break;
                }
                '"' if at_field_start => {
                    quoted = true;
                    at_field_start = false;
                }
                '"' => {
                    return Err(Error::Parse {
                        line,
                        message: "quote inside unquoted field".into(),
                    })
                }
                _ if after_quote => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unexpected {c:?} after closing quote"),
                    })
                }
                _ => {
                    at_field_start = false;
                    field.push(c);
                }
            }
        }
        // Blank lines carry no record.
        if !(fields.len() == 1 && fields[0].is_empty()) {
            records.push((start_line, fields));
        }
    }
    Ok(records)
}

pub fn parse_records(input: &str, classes: usize) -> Result<Vec<CsvRecord>> {
    parse_csv(input)?
        .into_iter()
        .map(|(line, mut fields)| {
            if fields.len() < 2 {
                return Err(Error::Row {
                    line,
                    message: format!("expected at least 2 fields, found {}", fields.len()),
                });
            }
            let raw = fields.remove(0);
            let class: usize = raw.trim().parse().map_err(|_| Error::Row {
                line,
                message: format!("class {raw:?} is not a positive integer"),
            })?;
            if class < 1 || class > classes {
                return Err(Error::Row {
                    line,
                    message: format!("class {class} outside [1, {classes}]"),
                });
            }
            Ok(CsvRecord {
                line,
                label: class - 1,
                fields,
            })
        })
        .collect()
}

pub fn read_records(path: &Path, classes: usize) -> Result<Vec<CsvRecord>> {
    let input = fs::read_to_string(path)?;
    parse_records(&input, classes)
}

pub fn records_to_documents(records: &[CsvRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Document>> {
    records
        .iter()
        .map(|r| {
            Document::new(r.label, r.text(), vocab, max_len).map_err(|e| match e {
                Error::EmptyDocument => Error::Row {
                    line: r.line,
                    message: "document is empty after encoding".into(),
                },
                e => e,
            })
        })
        .collect()
}

pub fn load_csv(path: &Path, classes: usize, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Document>> {
    let records = read_records(path, classes)?;
    records_to_documents(&records, vocab, max_len)
}

/// Writes records with every field quoted and labels back in 1-based form.
pub fn write_records<W: Write>(out: W, records: &[CsvRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .terminator(csv::Terminator::Any(b'\n'))
        .flexible(true)
        .from_writer(out);
    for r in records {
        let label = (r.label + 1).to_string();
        let row = std::iter::once(label.as_str()).chain(r.fields.iter().map(String::as_str));
        w.write_record(row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Balanced validation split: exactly `per_class` items of each label in
/// `0..classes` go to validation. Both halves keep their input order.
pub fn split_train_val<D: Labeled + Clone>(
    docs: &[D],
    classes: usize,
    per_class: usize,
    rng: &mut Rng,
) -> Result<(Vec<D>, Vec<D>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, d) in docs.iter().enumerate() {
        let label = d.label();
        if label >= classes {
            return Err(Error::Parameter(format!("label {label} outside 0..{classes}")));
        }
        by_class[label].push(i);
    }
    let mut in_val = vec![false; docs.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::Parameter(format!(
                "class {} has {} examples, fewer than the {} requested for validation",
                class + 1,
                members.len(),
                per_class
            )));
        }
        rng.shuffle(members);
        for &i in &members[..per_class] {
            in_val[i] = true;
        }
    }
    let mut train = Vec::with_capacity(docs.len());
    let mut val = Vec::with_capacity(per_class * classes);
    for (d, &v) in docs.iter().zip(&in_val) {
        if v {
            val.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, val))
}

/// Per-position validity for a padded batch, row-major `[rows × steps]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    steps: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn from_lengths(lengths: &[usize], steps: usize) -> Self {
        let mut data = vec![false; lengths.len() * steps];
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..len.min(steps) {
                data[b * steps + t] = true;
            }
        }
        Mask {
            rows: lengths.len(),
            steps,
            data,
        }
    }

    pub fn from_vec(rows: usize, steps: usize, data: Vec<bool>) -> Self {
        assert_eq!(rows * steps, data.len());
        Mask { rows, steps, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn get(&self, b: usize, t: usize) -> bool {
        self.data[b * self.steps + t]
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.data[b * self.steps..(b + 1) * self.steps]
    }

    /// Number of valid positions per row.
    pub fn lengths(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|b| self.row(b).iter().filter(|&&v| v).count())
            .collect()
    }

    /// Index of the last valid position per row, if any.
    pub fn last_valid(&self, b: usize) -> Option<usize> {
        self.row(b).iter().rposition(|&v| v)
    }

    pub fn rows_range(&self, start: usize, end: usize) -> Mask {
        Mask {
            rows: end - start,
            steps: self.steps,
            data: self.data[start * self.steps..end * self.steps].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[size × steps]` symbol indices; `PAD_INDEX` where masked.
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
    pub mask: Mask,
    pub labels: Vec<usize>,
    /// Position of each row in the document list the batch was built from.
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn from_docs<'a>(docs: impl IntoIterator<Item = (usize, &'a Document)>) -> Self {
        let docs: Vec<(usize, &Document)> = docs.into_iter().collect();
        let steps = docs.iter().map(|(_, d)| d.len()).max().unwrap_or(0).max(1);
        let mut indices = vec![PAD_INDEX; docs.len() * steps];
        let mut lengths = Vec::with_capacity(docs.len());
        let mut labels = Vec::with_capacity(docs.len());
        let mut ids = Vec::with_capacity(docs.len());
        for (b, (id, d)) in docs.iter().enumerate() {
            indices[b * steps..b * steps + d.len()].copy_from_slice(d.indices());
            lengths.push(d.len());
            labels.push(d.label);
            ids.push(*id);
        }
        let mask = Mask::from_lengths(&lengths, steps);
        Batch {
            indices,
            lengths,
            mask,
            labels,
            ids,
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn steps(&self) -> usize {
        self.mask.steps()
    }

    /// Rows `start..end`, keeping the batch's padded width.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        let steps = self.steps();
        Batch {
            indices: self.indices[start * steps..end * steps].to_vec(),
            lengths: self.lengths[start..end].to_vec(),
            mask: self.mask.rows_range(start, end),
            labels: self.labels[start..end].to_vec(),
            ids: self.ids[start..end].to_vec(),
        }
    }
}

pub fn make_batches(docs: &[Document], batch_size: usize, rng: &mut Rng, shuffle: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch::from_docs(chunk.iter().map(|&i| (i, &docs[i]))))
        .collect())
}
