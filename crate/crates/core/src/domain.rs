//! Tabular schemas, CSV ingestion and the one-hot binary encoding of records.
//!
//! Every attribute owns a contiguous group of bits. A categorical attribute
//! gets one bit per declared value; a continuous attribute with boundaries
//! `b_0 < b_1 < ... < b_m` gets one bit per bucket `[b_i, b_{i+1})`, with
//! values outside `[b_0, b_m]` clamped into the first or last bucket.
//! Groups appear in schema order and bits within a group in declared order.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("row {row}: unknown value {value:?} for categorical attribute {attr:?}")]
    UnknownCategoricalValue { row: usize, attr: String, value: String },
    #[error("row {row}: malformed row ({reason})")]
    MalformedRow { row: usize, reason: String },
    #[error("input contains no header or no data rows")]
    EmptyFile,
    #[error("header is missing column {0:?}")]
    MissingColumn(String),
    #[error("record {index} is not a valid one-hot encoding")]
    InvalidRecord { index: usize },
    #[error("record count must be at least 1")]
    EmptyRequest,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How the values of one attribute map onto bits.
#[derive(Debug, Clone, PartialEq)]
pub enum AttributeKind {
    Categorical { values: Vec<String> },
    Continuous { bounds: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub kind: AttributeKind,
}

impl Attribute {
    pub fn categorical(name: &str, values: &[&str]) -> Self {
        Attribute {
            name: name.to_string(),
            kind: AttributeKind::Categorical {
                values: values.iter().map(|v| v.to_string()).collect(),
            },
        }
    }

    pub fn continuous(name: &str, bounds: &[f64]) -> Self {
        Attribute {
            name: name.to_string(),
            kind: AttributeKind::Continuous { bounds: bounds.to_vec() },
        }
    }

    /// Number of bits this attribute contributes.
    pub fn size(&self) -> usize {
        match &self.kind {
            AttributeKind::Categorical { values } => values.len(),
            AttributeKind::Continuous { bounds } => bounds.len() - 1,
        }
    }

    /// Maps a raw field onto a value index within the group.
    fn encode_field(&self, row: usize, field: &str) -> Result<usize, DataError> {
        match &self.kind {
            AttributeKind::Categorical { values } => {
                values.iter().position(|v| v == field).ok_or_else(|| {
                    DataError::UnknownCategoricalValue {
                        row,
                        attr: self.name.clone(),
                        value: field.to_string(),
                    }
                })
            }
            AttributeKind::Continuous { bounds } => {
                let x: f64 = field.trim().parse().map_err(|_| DataError::MalformedRow {
                    row,
                    reason: format!("{:?} is not a number for attribute {:?}", field, self.name),
                })?;
                if x.is_nan() {
                    return Err(DataError::MalformedRow {
                        row,
                        reason: format!("NaN for attribute {:?}", self.name),
                    });
                }
                Ok(bucket_of(bounds, x))
            }
        }
    }

    /// A canonical field value for bucket/value `index` that re-encodes to `index`.
    pub fn decode_value(&self, index: usize) -> String {
        match &self.kind {
            AttributeKind::Categorical { values } => values[index].clone(),
            AttributeKind::Continuous { bounds } => format!("{}", bounds[index]),
        }
    }
}

fn bucket_of(bounds: &[f64], x: f64) -> usize {
    let buckets = bounds.len() - 1;
    // number of interior boundaries b_1..b_{m-1} that are <= x
    let above = bounds[1..buckets].partition_point(|&b| b <= x);
    above.min(buckets - 1)
}

/// An ordered list of attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct Schema {
    attributes: Vec<Attribute>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    attributes: Vec<RawAttribute>,
}

#[derive(Serialize, Deserialize)]
struct RawAttribute {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<Vec<f64>>,
}

impl TryFrom<RawSchema> for Schema {
    type Error = DataError;

    fn try_from(raw: RawSchema) -> Result<Self, DataError> {
        let attributes = raw
            .attributes
            .into_iter()
            .map(|a| match (a.values, a.bounds) {
                (Some(values), None) => Ok(Attribute {
                    name: a.name,
                    kind: AttributeKind::Categorical { values },
                }),
                (None, Some(bounds)) => Ok(Attribute {
                    name: a.name,
                    kind: AttributeKind::Continuous { bounds },
                }),
                _ => Err(DataError::InvalidSchema(format!(
                    "attribute {:?} needs exactly one of `values` or `bounds`",
                    a.name
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Schema::new(attributes)
    }
}

impl From<Schema> for RawSchema {
    fn from(schema: Schema) -> Self {
        RawSchema {
            attributes: schema
                .attributes
                .into_iter()
                .map(|a| match a.kind {
                    AttributeKind::Categorical { values } => RawAttribute {
                        name: a.name,
                        values: Some(values),
                        bounds: None,
                    },
                    AttributeKind::Continuous { bounds } => RawAttribute {
                        name: a.name,
                        values: None,
                        bounds: Some(bounds),
                    },
                })
                .collect(),
        }
    }
}

impl Schema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self, DataError> {
        if attributes.is_empty() {
            return Err(DataError::InvalidSchema("schema has no attributes".into()));
        }
        let mut names = HashSet::new();
        for a in &attributes {
            if !names.insert(a.name.as_str()) {
                return Err(DataError::InvalidSchema(format!("duplicate attribute {:?}", a.name)));
            }
            match &a.kind {
                AttributeKind::Categorical { values } => {
                    if values.is_empty() {
                        return Err(DataError::InvalidSchema(format!(
                            "attribute {:?} has no values",
                            a.name
                        )));
                    }
                    let distinct: HashSet<_> = values.iter().collect();
                    if distinct.len() != values.len() {
                        return Err(DataError::InvalidSchema(format!(
                            "attribute {:?} repeats a value",
                            a.name
                        )));
                    }
                }
                AttributeKind::Continuous { bounds } => {
                    if bounds.len() < 2 {
                        return Err(DataError::InvalidSchema(format!(
                            "attribute {:?} needs at least two bounds",
                            a.name
                        )));
                    }
                    if bounds.iter().any(|b| !b.is_finite())
                        || bounds.windows(2).any(|w| w[0] >= w[1])
                    {
                        return Err(DataError::InvalidSchema(format!(
                            "bounds of {:?} must be finite and strictly increasing",
                            a.name
                        )));
                    }
                }
            }
        }
        Ok(Schema { attributes })
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        serde_json::from_str(text).map_err(|e| DataError::InvalidSchema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        Schema::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    /// Total binary dimension `d`.
    pub fn dimension(&self) -> usize {
        self.attributes.iter().map(Attribute::size).sum()
    }

    pub fn layout(&self) -> GroupLayout {
        GroupLayout::from_sizes(&self.attributes.iter().map(Attribute::size).collect::<Vec<_>>())
    }

    /// Encodes one row of raw fields (in schema order).
    pub fn encode_fields(&self, row: usize, fields: &[&str]) -> Result<RecordBits, DataError> {
        let layout = self.layout();
        let mut bits = RecordBits::zeros(layout.dimension());
        for (g, (attr, field)) in self.attributes.iter().zip(fields).enumerate() {
            let v = attr.encode_field(row, field)?;
            bits.set(layout.bit(g, v), true);
        }
        Ok(bits)
    }

    /// Decodes a one-hot record back to one field per attribute.
    pub fn decode(&self, record: &RecordBits) -> Option<Vec<String>> {
        let values = self.layout().active_values(record)?;
        Some(
            self.attributes
                .iter()
                .zip(values)
                .map(|(a, v)| a.decode_value(v))
                .collect(),
        )
    }
}

/// Contiguous bit ranges, one per attribute group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    offsets: Vec<usize>,
}

impl GroupLayout {
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        GroupLayout { offsets }
    }

    pub fn num_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn dimension(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn group_size(&self, g: usize) -> usize {
        self.offsets[g + 1] - self.offsets[g]
    }

    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.num_groups()).map(|g| self.group_size(g)).collect()
    }

    /// Bit index of value `v` in group `g`.
    pub fn bit(&self, g: usize, v: usize) -> usize {
        debug_assert!(v < self.group_size(g));
        self.offsets[g] + v
    }

    /// `(group, value)` owning bit `bit`.
    pub fn locate(&self, bit: usize) -> (usize, usize) {
        let g = self.offsets.partition_point(|&o| o <= bit) - 1;
        (g, bit - self.offsets[g])
    }

    /// Number of one-hot valid records, `Π |group|`, saturating.
    pub fn domain_size(&self) -> u128 {
        (0..self.num_groups()).fold(1u128, |acc, g| acc.saturating_mul(self.group_size(g) as u128))
    }

    /// The active value of every group, or `None` if the record is not one-hot.
    pub fn active_values(&self, record: &RecordBits) -> Option<Vec<usize>> {
        if record.len() != self.dimension() {
            return None;
        }
        (0..self.num_groups())
            .map(|g| {
                let mut active = None;
                for v in 0..self.group_size(g) {
                    if record.get(self.bit(g, v)) {
                        if active.is_some() {
                            return None;
                        }
                        active = Some(v);
                    }
                }
                active
            })
            .collect()
    }

    pub fn is_valid(&self, record: &RecordBits) -> bool {
        self.active_values(record).is_some()
    }

    /// Builds the one-hot record selecting `values[g]` in every group.
    pub fn record_from_values(&self, values: &[usize]) -> RecordBits {
        assert_eq!(values.len(), self.num_groups());
        let mut bits = RecordBits::zeros(self.dimension());
        for (g, &v) in values.iter().enumerate() {
            bits.set(self.bit(g, v), true);
        }
        bits
    }
}

/// A fixed-length bit vector. Ordered lexicographically with bit 0 first,
/// so `"001" < "010" < "100"`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RecordBits {
    words: Vec<u64>,
    len: usize,
}

impl RecordBits {
    pub fn zeros(len: usize) -> Self {
        RecordBits { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i % 64);
        if on {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// `⟨self, other⟩` over {0,1}.
    #[inline]
    pub fn inner(&self, other: &RecordBits) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.get(i))
    }

    pub fn from_bitstring(s: &str) -> Option<Self> {
        let mut bits = RecordBits::zeros(s.len());
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => bits.set(i, true),
                _ => return None,
            }
        }
        Some(bits)
    }

    pub fn to_bitstring(&self) -> String {
        (0..self.len).map(|i| if self.get(i) { '1' } else { '0' }).collect()
    }
}

impl fmt::Debug for RecordBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RecordBits({})", self.to_bitstring())
    }
}

impl fmt::Display for RecordBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

impl Ord for RecordBits {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.words.iter().zip(&other.words) {
            let diff = a ^ b;
            if diff != 0 {
                let pos = diff.trailing_zeros();
                // the record holding the 0 at the first differing position is smaller
                return if (a >> pos) & 1 == 0 { Ordering::Less } else { Ordering::Greater };
            }
        }
        self.len.cmp(&other.len)
    }
}

impl PartialOrd for RecordBits {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for RecordBits {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bitstring())
    }
}

impl<'de> Deserialize<'de> for RecordBits {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        RecordBits::from_bitstring(&s).ok_or_else(|| serde::de::Error::custom("expected a 0/1 string"))
    }
}

/// `n` one-hot records over the binary domain of a schema. Immutable.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    schema: Schema,
    layout: GroupLayout,
    records: Vec<RecordBits>,
}

impl EncodedDataset {
    pub fn new(schema: Schema, records: Vec<RecordBits>) -> Result<Self, DataError> {
        let layout = schema.layout();
        if let Some(index) = records.iter().position(|r| !layout.is_valid(r)) {
            return Err(DataError::InvalidRecord { index });
        }
        Ok(EncodedDataset { schema, layout, records })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn records(&self) -> &[RecordBits] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn d(&self) -> usize {
        self.layout.dimension()
    }
}

/// Reads a header + rows CSV and encodes every row against `schema`.
/// Columns are matched by header name; extra columns are ignored.
pub fn encode_csv<R: Read>(reader: R, schema: &Schema) -> Result<EncodedDataset, DataError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = csv.records();
    let header = match rows.next() {
        None => return Err(DataError::EmptyFile),
        Some(h) => h.map_err(|e| DataError::MalformedRow { row: 0, reason: e.to_string() })?,
    };
    let width = header.len();
    let columns = schema
        .attributes()
        .iter()
        .map(|a| {
            header
                .iter()
                .position(|h| h.trim() == a.name)
                .ok_or_else(|| DataError::MissingColumn(a.name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut records = Vec::new();
    for (i, row) in rows.enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| DataError::MalformedRow { row: row_no, reason: e.to_string() })?;
        if row.len() != width {
            return Err(DataError::MalformedRow {
                row: row_no,
                reason: format!("expected {} fields, found {}", width, row.len()),
            });
        }
        let fields: Vec<&str> = columns.iter().map(|&c| &row[c]).collect();
        records.push(schema.encode_fields(row_no, &fields)?);
    }
    if records.is_empty() {
        return Err(DataError::EmptyFile);
    }
    EncodedDataset::new(schema.clone(), records)
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<EncodedDataset, DataError> {
    encode_csv(File::open(path)?, schema)
}

/// Writes `n` rows drawn from a seeded latent-cluster model over `schema`.
///
/// Each row first picks one of three clusters; every cluster carries its own
/// skewed distribution per attribute, which gives the data correlated
/// marginals. Output is a pure function of `(schema, n, seed)`.
pub fn write_synthetic_csv<W: Write>(
    writer: W,
    schema: &Schema,
    n: usize,
    seed: u64,
) -> Result<(), DataError> {
    if n == 0 {
        return Err(DataError::EmptyRequest);
    }
    const CLUSTERS: usize = 3;
    let mut rng = seeds::sub_rng(seed, "synthetic-csv", 0);
    let cluster_weights: Vec<f64> = (0..CLUSTERS).map(|_| 0.2 + rng.random::<f64>()).collect();
    let tables: Vec<Vec<Vec<f64>>> = (0..CLUSTERS)
        .map(|_| {
            schema
                .attributes()
                .iter()
                .map(|a| (0..a.size()).map(|_| rng.random::<f64>().powi(3) + 0.02).collect())
                .collect()
        })
        .collect();

    let mut out = csv::Writer::from_writer(writer);
    out.write_record(schema.attributes().iter().map(|a| a.name.as_str()))
        .map_err(csv_io)?;
    for _ in 0..n {
        let c = pick(&cluster_weights, rng.random::<f64>());
        let row: Vec<String> = schema
            .attributes()
            .iter()
            .zip(&tables[c])
            .map(|(a, weights)| {
                let v = pick(weights, rng.random::<f64>());
                match &a.kind {
                    AttributeKind::Categorical { values } => values[v].clone(),
                    AttributeKind::Continuous { bounds } => {
                        let (lo, hi) = (bounds[v], bounds[v + 1]);
                        let x = lo + (hi - lo) * rng.random::<f64>();
                        format!("{}", if x < hi { x } else { lo })
                    }
                }
            })
            .collect();
        out.write_record(&row).map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Io(io::Error::other(e))
}

fn pick(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = u * total;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}

pub fn generate_synthetic_csv(
    schema: &Schema,
    n: usize,
    seed: u64,
    path: &Path,
) -> Result<PathBuf, DataError> {
    if n == 0 {
        return Err(DataError::EmptyRequest);
    }
    let mut buf = Vec::new();
    write_synthetic_csv(&mut buf, schema, n, seed)?;
    std::fs::write(path, buf)?;
    Ok(path.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCounts {
    pub attribute: String,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordStats {
    pub n: usize,
    pub d: usize,
    pub groups: Vec<GroupCounts>,
}

pub fn record_stats(ds: &EncodedDataset) -> RecordStats {
    let layout = ds.layout();
    let mut counts: Vec<Vec<u64>> = layout.sizes().iter().map(|&s| vec![0; s]).collect();
    for r in ds.records() {
        for bit in r.ones() {
            let (g, v) = layout.locate(bit);
            counts[g][v] += 1;
        }
    }
    RecordStats {
        n: ds.n(),
        d: ds.d(),
        groups: ds
            .schema()
            .attributes()
            .iter()
            .zip(counts)
            .map(|(a, counts)| GroupCounts { attribute: a.name.clone(), counts })
            .collect(),
    }
}
