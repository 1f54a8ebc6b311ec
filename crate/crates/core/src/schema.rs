//! Attribute schemas, record tables, one-hot encoding and k-way distribution tables.
//!
//! Records are stored as category indices into the owning attribute's category
//! list, so every cell of a [`RecordTable`] is valid by construction. Category
//! order always follows the schema declaration, never the order in which labels
//! show up in data.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("attribute `{0}` must have at least two categories")]
    TooFewCategories(String),
    #[error("attribute `{attribute}` lists category `{label}` more than once")]
    DuplicateCategory { attribute: String, label: String },
    #[error("attribute `{0}` is declared more than once")]
    DuplicateAttribute(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{attribute}` with role {role} cannot appear in a {view} view")]
    RoleNotInView { attribute: String, role: Role, view: View },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` is missing")]
    MissingColumn(String),
    #[error("row {row}: `{label}` is not a category of `{attribute}`")]
    UnknownLabel { row: usize, attribute: String, label: String },
    #[error("row {row}: missing value for `{attribute}`")]
    MissingValue { row: usize, attribute: String },
    #[error("row {row}: expected {expected} cells, found {found}")]
    RowLength { row: usize, expected: usize, found: usize },
    #[error("row {row}: category index {index} out of range for `{attribute}`")]
    IndexOutOfRange { row: usize, attribute: String, index: usize },
    #[error("schemas declare no shared attributes")]
    NoSharedAttributes,
    #[error("shared attribute `{0}` is present in only one schema")]
    SharedInOneSchema(String),
    #[error("shared attribute `{0}` has different category sets in the two schemas")]
    CategorySetMismatch(String),
    #[error("row {row}: block `{attribute}` sums to {sum}, expected 1")]
    BlockSum { row: usize, attribute: String, sum: f64 },
    #[error("matrix width {found} does not match one-hot width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("table is empty")]
    EmptyTable,
    #[error("attribute `{0}` appears more than once in the tuple")]
    DuplicateInTuple(String),
    #[error("distribution order must be 1, 2 or 3, got {0}")]
    BadOrder(usize),
    #[error("schema mismatch: {0}")]
    Mismatch(String),
    #[error("attribute cross-product is too large to key")]
    KeyOverflow,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Toml { path: String, source: toml::de::Error },
}

pub type Result<T, E = SchemaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Shared,
    #[serde(rename = "source_a")]
    SourceAOnly,
    #[serde(rename = "source_b")]
    SourceBOnly,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Shared => "shared",
            Role::SourceAOnly => "source_a",
            Role::SourceBOnly => "source_b",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    SourceA,
    SourceB,
    Joint,
}

impl View {
    pub fn admits(self, role: Role) -> bool {
        match self {
            View::Joint => true,
            View::SourceA => role != Role::SourceBOnly,
            View::SourceB => role != Role::SourceAOnly,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::SourceA => "source_a",
            View::SourceB => "source_b",
            View::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub role: Role,
    pub categories: Vec<String>,
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, role: Role, categories: &[&str]) -> Self {
        AttributeSpec {
            name: name.into(),
            role,
            categories: categories.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 {
            return Err(SchemaError::TooFewCategories(self.name.clone()));
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if !seen.insert(c.as_str()) {
                return Err(SchemaError::DuplicateCategory {
                    attribute: self.name.clone(),
                    label: c.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Key of a full attribute combination: the mixed-radix index of the record's
/// category vector under its schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComboKey(pub u128);

/// An ordered, validated attribute list for one view of the data.
///
/// A joint schema is kept in canonical role order (shared, source-A-only,
/// source-B-only); declaration order is preserved within each role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    attributes: Vec<AttributeSpec>,
    view: View,
}

impl DatasetSchema {
    pub fn new(mut attributes: Vec<AttributeSpec>, view: View) -> Result<Self> {
        let mut names = HashSet::new();
        for a in &attributes {
            a.validate()?;
            if !names.insert(a.name.as_str()) {
                return Err(SchemaError::DuplicateAttribute(a.name.clone()));
            }
            if !view.admits(a.role) {
                return Err(SchemaError::RoleNotInView {
                    attribute: a.name.clone(),
                    role: a.role,
                    view,
                });
            }
        }
        if view == View::Joint {
            attributes.sort_by_key(|a| a.role);
        }
        let mut radix: u128 = 1;
        for a in &attributes {
            radix = radix
                .checked_mul(a.dim() as u128)
                .ok_or(SchemaError::KeyOverflow)?;
        }
        Ok(DatasetSchema { attributes, view })
    }

    /// Loads a joint schema from a TOML file with one `[[attribute]]` table per
    /// attribute (`name`, `role`, `categories`). Other keys are ignored.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            SchemaError::Toml { source, .. } => SchemaError::Toml {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            attribute: Vec<AttributeSpec>,
        }
        let file: File = toml::from_str(text).map_err(|source| SchemaError::Toml {
            path: "<schema>".into(),
            source,
        })?;
        DatasetSchema::new(file.attribute, View::Joint)
    }

    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            attribute: &'a [AttributeSpec],
        }
        toml::to_string(&File {
            attribute: &self.attributes,
        })
        .expect("schema serializes")
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.attributes
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.dim()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn attribute(&self, name: &str) -> Result<&AttributeSpec> {
        self.attributes
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| SchemaError::UnknownAttribute(name.to_string()))
    }

    /// One-hot width: the sum of attribute dimensions.
    pub fn width(&self) -> usize {
        self.attributes.iter().map(|a| a.dim()).sum()
    }

    /// Column offset of each attribute's block in the one-hot layout.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.attributes
            .iter()
            .map(|a| {
                let o = acc;
                acc += a.dim();
                o
            })
            .collect()
    }

    /// `(offset, dim)` of every attribute block.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        self.offsets().into_iter().zip(self.dims()).collect()
    }

    pub fn roles(&self) -> Vec<Role> {
        self.attributes.iter().map(|a| a.role).collect()
    }

    pub fn count_with_role(&self, role: Role) -> usize {
        self.attributes.iter().filter(|a| a.role == role).count()
    }

    /// The sub-schema seen by `view`: shared + source-A-only for `SourceA`,
    /// shared + source-B-only for `SourceB`.
    pub fn project_view(&self, view: View) -> Result<DatasetSchema> {
        let attrs = self
            .attributes
            .iter()
            .filter(|a| view.admits(a.role))
            .cloned()
            .collect();
        DatasetSchema::new(attrs, view)
    }

    /// Joint schema of two source views: shared attributes (in `a`'s category
    /// order), then `a`'s own attributes, then `b`'s.
    pub fn joint_of(a: &DatasetSchema, b: &DatasetSchema) -> Result<DatasetSchema> {
        align_shared(a, b)?;
        let mut attrs: Vec<AttributeSpec> = a.attributes.clone();
        for attr in &b.attributes {
            if attr.role != Role::Shared {
                attrs.push(attr.clone());
            }
        }
        DatasetSchema::new(attrs, View::Joint)
    }

    /// True if both schemas declare the same attributes (name, role, category
    /// list), ignoring view tag.
    pub fn same_attributes(&self, other: &DatasetSchema) -> bool {
        self.attributes == other.attributes
    }

    pub fn combo_key(&self, row: &[u16]) -> ComboKey {
        let mut key: u128 = 0;
        for (a, &c) in self.attributes.iter().zip(row) {
            key = key * a.dim() as u128 + c as u128;
        }
        ComboKey(key)
    }

    pub fn decode_key(&self, key: ComboKey) -> Vec<u16> {
        let mut rest = key.0;
        let mut row = vec![0u16; self.len()];
        for (j, a) in self.attributes.iter().enumerate().rev() {
            let d = a.dim() as u128;
            row[j] = (rest % d) as u16;
            rest /= d;
        }
        row
    }

    pub fn labels_of<'a>(&'a self, row: &[u16]) -> Vec<&'a str> {
        self.attributes
            .iter()
            .zip(row)
            .map(|(a, &c)| a.categories[c as usize].as_str())
            .collect()
    }
}

/// Individual-level categorical records under a schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordTable {
    schema: DatasetSchema,
    cells: Vec<u16>,
    n_rows: usize,
}

impl RecordTable {
    pub fn new(schema: DatasetSchema) -> Self {
        RecordTable {
            schema,
            cells: Vec::new(),
            n_rows: 0,
        }
    }

    pub fn from_rows(schema: DatasetSchema, rows: &[Vec<u16>]) -> Result<Self> {
        let mut t = RecordTable::new(schema);
        for r in rows {
            t.push_row(r)?;
        }
        Ok(t)
    }

    pub fn from_label_rows(schema: DatasetSchema, rows: &[Vec<&str>]) -> Result<Self> {
        let mut t = RecordTable::new(schema);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != t.schema.len() {
                return Err(SchemaError::RowLength {
                    row: i + 1,
                    expected: t.schema.len(),
                    found: r.len(),
                });
            }
            let mut idx = Vec::with_capacity(r.len());
            for (a, label) in t.schema.attributes.iter().zip(r) {
                let c = a.category_index(label).ok_or_else(|| SchemaError::UnknownLabel {
                    row: i + 1,
                    attribute: a.name.clone(),
                    label: label.to_string(),
                })?;
                idx.push(c as u16);
            }
            t.push_unchecked(&idx);
        }
        Ok(t)
    }

    pub fn push_row(&mut self, row: &[u16]) -> Result<()> {
        if row.len() != self.schema.len() {
            return Err(SchemaError::RowLength {
                row: self.n_rows + 1,
                expected: self.schema.len(),
                found: row.len(),
            });
        }
        for (a, &c) in self.schema.attributes.iter().zip(row) {
            if c as usize >= a.dim() {
                return Err(SchemaError::IndexOutOfRange {
                    row: self.n_rows + 1,
                    attribute: a.name.clone(),
                    index: c as usize,
                });
            }
        }
        self.push_unchecked(row);
        Ok(())
    }

    pub(crate) fn push_unchecked(&mut self, row: &[u16]) {
        debug_assert_eq!(row.len(), self.schema.len());
        self.cells.extend_from_slice(row);
        self.n_rows += 1;
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.n_rows
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows == 0
    }

    pub fn n_attributes(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[u16] {
        let w = self.schema.len();
        &self.cells[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u16]> + '_ {
        let w = self.schema.len().max(1);
        self.cells.chunks_exact(w).take(self.n_rows)
    }

    pub fn get(&self, i: usize, j: usize) -> u16 {
        self.cells[i * self.schema.len() + j]
    }

    pub fn column(&self, j: usize) -> Vec<u16> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn key(&self, i: usize) -> ComboKey {
        self.schema.combo_key(self.row(i))
    }

    pub fn distinct_keys(&self) -> HashSet<ComboKey> {
        (0..self.n_rows).map(|i| self.key(i)).collect()
    }

    /// Rows `idx`, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> RecordTable {
        let mut t = RecordTable::new(self.schema.clone());
        t.cells.reserve(idx.len() * self.schema.len());
        for &i in idx {
            t.push_unchecked(self.row(i));
        }
        t
    }

    /// Appends the rows of `other`, which must carry identical attributes.
    pub fn extend(&mut self, other: &RecordTable) -> Result<()> {
        if !self.schema.same_attributes(&other.schema) {
            return Err(SchemaError::Mismatch(
                "cannot concatenate tables with different attributes".into(),
            ));
        }
        self.cells.extend_from_slice(&other.cells);
        self.n_rows += other.n_rows;
        Ok(())
    }

    /// Projects every row onto `target`, matching attributes by name. Category
    /// lists must be identical for every projected attribute.
    pub fn project(&self, target: &DatasetSchema) -> Result<RecordTable> {
        let mut src_cols = Vec::with_capacity(target.len());
        for a in target.attributes() {
            let j = self
                .schema
                .index_of(&a.name)
                .ok_or_else(|| SchemaError::UnknownAttribute(a.name.clone()))?;
            if self.schema.attributes[j].categories != a.categories {
                return Err(SchemaError::Mismatch(format!(
                    "attribute `{}` has a different category list",
                    a.name
                )));
            }
            src_cols.push(j);
        }
        let mut t = RecordTable::new(target.clone());
        t.cells.reserve(self.n_rows * target.len());
        let mut buf = vec![0u16; target.len()];
        for r in self.rows() {
            for (b, &j) in buf.iter_mut().zip(&src_cols) {
                *b = r[j];
            }
            t.push_unchecked(&buf);
        }
        Ok(t)
    }

    /// Replaces the schema tag with an attribute-identical schema (e.g. a view
    /// schema re-tagged as joint).
    pub fn with_schema(mut self, schema: DatasetSchema) -> Result<RecordTable> {
        if !self.schema.same_attributes(&schema) {
            return Err(SchemaError::Mismatch("attribute lists differ".into()));
        }
        self.schema = schema;
        Ok(self)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SchemaError + '_ {
    move |source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> SchemaError + '_ {
    move |source| SchemaError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a delimited file whose header names the schema's attributes (any
/// order) and whose cells are category labels.
pub fn load_table(path: &Path, schema: &DatasetSchema) -> Result<RecordTable> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_table(file, schema).map_err(|e| match e {
        SchemaError::Csv { source, .. } => SchemaError::Csv {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn read_table<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<RecordTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let to_err = |source| SchemaError::Csv {
        path: "<input>".into(),
        source,
    };
    let header = rdr.headers().map_err(to_err)?.clone();
    // column position in the file of each schema attribute
    let mut pos = vec![usize::MAX; schema.len()];
    for (c, name) in header.iter().enumerate() {
        let j = schema
            .index_of(name.trim())
            .ok_or_else(|| SchemaError::UnknownColumn(name.to_string()))?;
        if pos[j] != usize::MAX {
            return Err(SchemaError::DuplicateAttribute(name.to_string()));
        }
        pos[j] = c;
    }
    if let Some(j) = pos.iter().position(|&p| p == usize::MAX) {
        return Err(SchemaError::MissingColumn(
            schema.attributes[j].name.clone(),
        ));
    }
    let mut table = RecordTable::new(schema.clone());
    let mut buf = vec![0u16; schema.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(to_err)?;
        let row = i + 1;
        for (j, a) in schema.attributes.iter().enumerate() {
            let cell = rec.get(pos[j]).map(str::trim).unwrap_or("");
            if cell.is_empty() {
                return Err(SchemaError::MissingValue {
                    row,
                    attribute: a.name.clone(),
                });
            }
            buf[j] = a.category_index(cell).ok_or_else(|| SchemaError::UnknownLabel {
                row,
                attribute: a.name.clone(),
                label: cell.to_string(),
            })? as u16;
        }
        table.push_unchecked(&buf);
    }
    Ok(table)
}

pub fn write_table(path: &Path, table: &RecordTable) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut wtr = csv::Writer::from_writer(std::io::BufWriter::new(file));
    wtr.write_record(table.schema.names()).map_err(csv_err(path))?;
    for r in table.rows() {
        wtr.write_record(table.schema.labels_of(r))
            .map_err(csv_err(path))?;
    }
    wtr.flush().map_err(io_err(path))?;
    Ok(())
}

/// Per shared attribute, the permutation taking `b`'s category indices to
/// `a`'s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    pub entries: Vec<SharedAlignment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedAlignment {
    pub attribute: String,
    /// `permutation[i]` is the index in `a` of `b`'s category `i`.
    pub permutation: Vec<usize>,
}

impl AlignmentMap {
    pub fn is_identity(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.permutation.iter().enumerate().all(|(i, &p)| i == p))
    }

    /// Follows `self` (b→a) after `other` (c→b), giving c→a.
    pub fn compose(&self, other: &AlignmentMap) -> AlignmentMap {
        let entries = self
            .entries
            .iter()
            .filter_map(|e| {
                let o = other.entries.iter().find(|o| o.attribute == e.attribute)?;
                Some(SharedAlignment {
                    attribute: e.attribute.clone(),
                    permutation: o.permutation.iter().map(|&i| e.permutation[i]).collect(),
                })
            })
            .collect();
        AlignmentMap { entries }
    }

    /// Rewrites a table in `b`'s schema so its shared attributes use `a`'s
    /// category order. The result's schema takes `a`'s shared specs.
    pub fn apply(&self, table: &RecordTable, a: &DatasetSchema) -> Result<RecordTable> {
        let mut attrs = table.schema.attributes.clone();
        let mut remap: Vec<Option<&Vec<usize>>> = vec![None; attrs.len()];
        for e in &self.entries {
            let j = table
                .schema
                .index_of(&e.attribute)
                .ok_or_else(|| SchemaError::UnknownAttribute(e.attribute.clone()))?;
            attrs[j] = a.attribute(&e.attribute)?.clone();
            remap[j] = Some(&e.permutation);
        }
        let schema = DatasetSchema::new(attrs, table.schema.view)?;
        let mut out = RecordTable::new(schema);
        let mut buf = vec![0u16; table.n_attributes()];
        for r in table.rows() {
            for (j, (&c, m)) in r.iter().zip(&remap).enumerate() {
                buf[j] = match m {
                    Some(p) => p[c as usize] as u16,
                    None => c,
                };
            }
            out.push_unchecked(&buf);
        }
        Ok(out)
    }
}

/// Aligns the shared attributes of two source schemas.
pub fn align_shared(a: &DatasetSchema, b: &DatasetSchema) -> Result<AlignmentMap> {
    let shared_a: Vec<&AttributeSpec> = a
        .attributes
        .iter()
        .filter(|x| x.role == Role::Shared)
        .collect();
    let shared_b: Vec<&AttributeSpec> = b
        .attributes
        .iter()
        .filter(|x| x.role == Role::Shared)
        .collect();
    if shared_a.is_empty() || shared_b.is_empty() {
        return Err(SchemaError::NoSharedAttributes);
    }
    for sb in &shared_b {
        if !shared_a.iter().any(|sa| sa.name == sb.name) {
            return Err(SchemaError::SharedInOneSchema(sb.name.clone()));
        }
    }
    let mut entries = Vec::with_capacity(shared_a.len());
    for sa in &shared_a {
        let sb = shared_b
            .iter()
            .find(|sb| sb.name == sa.name)
            .ok_or_else(|| SchemaError::SharedInOneSchema(sa.name.clone()))?;
        if sa.dim() != sb.dim() {
            return Err(SchemaError::CategorySetMismatch(sa.name.clone()));
        }
        let permutation = sb
            .categories
            .iter()
            .map(|c| {
                sa.category_index(c)
                    .ok_or_else(|| SchemaError::CategorySetMismatch(sa.name.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(SharedAlignment {
            attribute: sa.name.clone(),
            permutation,
        });
    }
    Ok(AlignmentMap { entries })
}

/// One-hot (real records) or per-block probability rows (generator output).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    pub schema: DatasetSchema,
    pub data: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    #[default]
    Argmax,
    Sample {
        seed: u64,
    },
}

pub fn encode(records: &RecordTable) -> EncodedMatrix {
    let schema = records.schema.clone();
    let offsets = schema.offsets();
    let mut data = Array2::<f64>::zeros((records.len(), schema.width()));
    for (i, r) in records.rows().enumerate() {
        for (&o, &c) in offsets.iter().zip(r) {
            data[[i, o + c as usize]] = 1.0;
        }
    }
    EncodedMatrix { schema, data }
}

/// Tolerance on per-block sums accepted by [`decode`].
pub const BLOCK_SUM_TOL: f64 = 1e-6;

pub fn decode(matrix: &EncodedMatrix, mode: DecodeMode) -> Result<RecordTable> {
    decode_rows(&matrix.schema, matrix.data.view(), mode)
}

/// Decodes probability rows block by block: argmax (ties go to the lowest
/// category index) or one categorical draw per block.
pub fn decode_rows<F>(
    schema: &DatasetSchema,
    data: ArrayView2<'_, F>,
    mode: DecodeMode,
) -> Result<RecordTable>
where
    F: Copy + Into<f64>,
{
    if data.ncols() != schema.width() {
        return Err(SchemaError::WidthMismatch {
            expected: schema.width(),
            found: data.ncols(),
        });
    }
    let blocks = schema.blocks();
    let mut rng = match mode {
        DecodeMode::Sample { seed } => Some(seeded(seed, "decode")),
        DecodeMode::Argmax => None,
    };
    let mut table = RecordTable::new(schema.clone());
    let mut buf = vec![0u16; schema.len()];
    for (i, row) in data.outer_iter().enumerate() {
        for (j, &(o, d)) in blocks.iter().enumerate() {
            let block: Vec<f64> = (0..d).map(|k| row[o + k].into()).collect();
            let sum: f64 = block.iter().sum();
            if !((1.0 - BLOCK_SUM_TOL)..=(1.0 + BLOCK_SUM_TOL)).contains(&sum) {
                return Err(SchemaError::BlockSum {
                    row: i + 1,
                    attribute: schema.attributes[j].name.clone(),
                    sum,
                });
            }
            buf[j] = match rng.as_mut() {
                None => {
                    let mut best = 0;
                    for k in 1..d {
                        if block[k] > block[best] {
                            best = k;
                        }
                    }
                    best as u16
                }
                Some(rng) => {
                    let u: f64 = rng.gen::<f64>() * sum;
                    let mut acc = 0.0;
                    let mut pick = d - 1;
                    for (k, &p) in block.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    pick as u16
                }
            };
        }
        table.push_unchecked(&buf);
    }
    Ok(table)
}

/// Relative frequencies over the full cross-product of an attribute tuple.
/// Cells are stored row-major in tuple order; zero cells are present.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionTable {
    pub attributes: Vec<String>,
    pub dims: Vec<usize>,
    pub cells: Vec<f64>,
}

impl DistributionTable {
    /// N_b: the number of cells in the cross-product.
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_index(&self, cats: &[usize]) -> usize {
        cats.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }

    pub fn get(&self, cats: &[usize]) -> f64 {
        self.cells[self.cell_index(cats)]
    }

    pub fn same_layout(&self, other: &DistributionTable) -> bool {
        self.attributes == other.attributes && self.dims == other.dims
    }
}

pub fn kway_distribution(records: &RecordTable, attrs: &[&str]) -> Result<DistributionTable> {
    if attrs.is_empty() || attrs.len() > 3 {
        return Err(SchemaError::BadOrder(attrs.len()));
    }
    let mut cols = Vec::with_capacity(attrs.len());
    for (i, name) in attrs.iter().enumerate() {
        if attrs[..i].contains(name) {
            return Err(SchemaError::DuplicateInTuple(name.to_string()));
        }
        cols.push(
            records
                .schema
                .index_of(name)
                .ok_or_else(|| SchemaError::UnknownAttribute(name.to_string()))?,
        );
    }
    if records.is_empty() {
        return Err(SchemaError::EmptyTable);
    }
    Ok(distribution_by_columns(records, &cols))
}

/// Unchecked variant of [`kway_distribution`] addressed by column index, used
/// by the metric loops. Any tuple length is accepted.
pub(crate) fn distribution_by_columns(records: &RecordTable, cols: &[usize]) -> DistributionTable {
    let schema = &records.schema;
    let dims: Vec<usize> = cols.iter().map(|&j| schema.attributes[j].dim()).collect();
    let n_cells: usize = dims.iter().product();
    let mut counts = vec![0u64; n_cells];
    for r in records.rows() {
        let mut idx = 0;
        for (&j, &d) in cols.iter().zip(&dims) {
            idx = idx * d + r[j] as usize;
        }
        counts[idx] += 1;
    }
    let n = records.len().max(1) as f64;
    DistributionTable {
        attributes: cols
            .iter()
            .map(|&j| schema.attributes[j].name.clone())
            .collect(),
        dims,
        cells: counts.into_iter().map(|c| c as f64 / n).collect(),
    }
}

/// Counts of each category of every attribute, in schema order.
pub fn category_counts(records: &RecordTable) -> Vec<Vec<u64>> {
    let dims = records.schema.dims();
    let mut counts: Vec<Vec<u64>> = dims.iter().map(|&d| vec![0; d]).collect();
    for r in records.rows() {
        for (c, &v) in counts.iter_mut().zip(r) {
            c[v as usize] += 1;
        }
    }
    counts
}
