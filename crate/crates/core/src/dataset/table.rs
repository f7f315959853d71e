//! Self-described little-endian columnar data files.
//!
//! ```text
//! "LRDSTAB1" | schema_hash u32 | rows u32 | column blocks in schema order
//! ```
//!
//! Each column block holds `rows * width` values of the column dtype. The
//! schema itself lives in `meta/info.json`; the hash ties a file to it.

use super::{DType, DatasetError, FeatureValue};

pub const TABLE_MAGIC: [u8; 8] = *b"LRDSTAB1";
pub const TABLE_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub name: String,
    pub dtype: DType,
    pub width: usize,
}

/// FNV-1a over a canonical rendering of the column list.
pub fn schema_hash(columns: &[ColumnSpec]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for c in columns {
        let text = format!("{}:{}:{};", c.name, c.dtype.tag(), c.width);
        for b in text.bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl Column {
    fn empty(dtype: DType) -> Self {
        match dtype {
            DType::F32 => Column::F32(Vec::new()),
            DType::F64 => Column::F64(Vec::new()),
            DType::I64 => Column::I64(Vec::new()),
        }
    }

    fn len(&self) -> usize {
        match self {
            Column::F32(v) => v.len(),
            Column::F64(v) => v.len(),
            Column::I64(v) => v.len(),
        }
    }

    fn push(&mut self, value: &FeatureValue) -> bool {
        match (self, value) {
            (Column::F32(c), FeatureValue::F32(v)) => c.extend_from_slice(v),
            (Column::F64(c), FeatureValue::F64(v)) => c.extend_from_slice(v),
            (Column::I64(c), FeatureValue::I64(v)) => c.extend_from_slice(v),
            _ => return false,
        }
        true
    }

    fn slice(&self, start: usize, end: usize) -> FeatureValue {
        match self {
            Column::F32(v) => FeatureValue::F32(v[start..end].to_vec()),
            Column::F64(v) => FeatureValue::F64(v[start..end].to_vec()),
            Column::I64(v) => FeatureValue::I64(v[start..end].to_vec()),
        }
    }
}

/// One data file held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: Vec<ColumnSpec>,
    rows: usize,
    columns: Vec<Column>,
}

impl Table {
    pub fn new(schema: Vec<ColumnSpec>) -> Self {
        let columns = schema.iter().map(|c| Column::empty(c.dtype)).collect();
        Self {
            schema,
            rows: 0,
            columns,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn schema(&self) -> &[ColumnSpec] {
        &self.schema
    }

    /// Appends one row given per-column values in schema order.
    pub fn push_row(&mut self, values: &[FeatureValue]) -> Result<(), DatasetError> {
        if values.len() != self.schema.len() {
            return Err(DatasetError::SchemaMismatch(format!(
                "row has {} columns, schema has {}",
                values.len(),
                self.schema.len()
            )));
        }
        for ((spec, col), v) in self.schema.iter().zip(&self.columns).zip(values) {
            if v.dtype() != spec.dtype || v.len() != spec.width {
                return Err(DatasetError::SchemaMismatch(format!(
                    "column '{}' expects {}[{}], got {}[{}]",
                    spec.name,
                    spec.dtype.tag(),
                    spec.width,
                    v.dtype().tag(),
                    v.len()
                )));
            }
            debug_assert_eq!(col.len(), self.rows * spec.width);
        }
        for (col, v) in self.columns.iter_mut().zip(values) {
            let ok = col.push(v);
            debug_assert!(ok);
        }
        self.rows += 1;
        Ok(())
    }

    pub fn value(&self, column: usize, row: usize) -> FeatureValue {
        let w = self.schema[column].width;
        self.columns[column].slice(row * w, (row + 1) * w)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TABLE_HEADER_LEN + self.byte_len());
        out.extend_from_slice(&TABLE_MAGIC);
        out.extend_from_slice(&schema_hash(&self.schema).to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        for col in &self.columns {
            match col {
                Column::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Column::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Column::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    fn byte_len(&self) -> usize {
        self.schema
            .iter()
            .map(|c| c.dtype.size() * c.width * self.rows)
            .sum()
    }

    pub fn decode(bytes: &[u8], schema: Vec<ColumnSpec>) -> Result<Self, DatasetError> {
        if bytes.len() < TABLE_HEADER_LEN || bytes[..8] != TABLE_MAGIC {
            return Err(DatasetError::Corrupt("missing table magic".into()));
        }
        let hash = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if hash != schema_hash(&schema) {
            return Err(DatasetError::SchemaMismatch(format!(
                "file schema hash {hash:#010x} does not match {:#010x}",
                schema_hash(&schema)
            )));
        }
        let rows = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected: usize = schema.iter().map(|c| c.dtype.size() * c.width * rows).sum();
        if bytes.len() != TABLE_HEADER_LEN + expected {
            return Err(DatasetError::Corrupt(format!(
                "table declares {rows} rows ({expected} bytes) but holds {}",
                bytes.len() - TABLE_HEADER_LEN
            )));
        }
        let mut pos = TABLE_HEADER_LEN;
        let mut columns = Vec::with_capacity(schema.len());
        for c in &schema {
            let n = c.width * rows;
            let size = c.dtype.size();
            let block = &bytes[pos..pos + n * size];
            pos += n * size;
            columns.push(match c.dtype {
                DType::F32 => Column::F32(
                    block
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => Column::F64(
                    block
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                DType::I64 => Column::I64(
                    block
                        .chunks_exact(8)
                        .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
            });
        }
        Ok(Self {
            schema,
            rows,
            columns,
        })
    }
}
