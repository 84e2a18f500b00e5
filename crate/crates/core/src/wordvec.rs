//! Word-vector loading and class-name prototypes.
//!
//! A class name such as `"ride_horse"` or `"IceSkating"` is split into tokens,
//! the vectors of the tokens found in the store are averaged, and the mean is
//! L2-normalized so that Euclidean distance between prototypes behaves like
//! cosine distance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Result, ZslError};

/// Token to vector dictionary with a fixed dimensionality.
#[derive(Debug, Clone)]
pub struct WordVectorStore {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl WordVectorStore {
    /// Builds a store from in-memory entries; tokens are lower-cased.
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        if dim == 0 {
            return Err(ZslError::Format("word vectors must have positive dimension".into()));
        }
        let mut store = WordVectorStore {
            dim,
            entries: HashMap::new(),
        };
        for (token, vector) in entries {
            store.insert(token.as_ref(), vector)?;
        }
        Ok(store)
    }

    fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        let token = token.to_lowercase();
        if token.is_empty() {
            return Err(ZslError::Format("empty token".into()));
        }
        if vector.len() != self.dim {
            return Err(ZslError::Format(format!(
                "token {token:?} has {} components, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if self.entries.contains_key(&token) {
            return Err(ZslError::Format(format!("duplicate token {token:?}")));
        }
        self.entries.insert(token, vector);
        Ok(())
    }

    /// Loads a text file of `token f_1 ... f_d` lines with an optional
    /// `count dim` header line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| ZslError::io(path, e))?;
        Self::read(BufReader::new(file), &path.display().to_string())
    }

    pub fn read<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| ZslError::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let mut dim: Option<usize> = None;
        let mut declared_count: Option<usize> = None;
        let mut entries: HashMap<String, Vec<f64>> = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| ZslError::io(source, e))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap();
            let rest: Vec<&str> = fields.collect();
            if lineno == 1 && rest.len() == 1 {
                if let (Ok(count), Ok(d)) = (token.parse::<usize>(), rest[0].parse::<usize>()) {
                    if d == 0 {
                        return Err(parse_err(lineno, "header declares zero dimension".into()));
                    }
                    declared_count = Some(count);
                    dim = Some(d);
                    continue;
                }
            }
            let values = rest
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| parse_err(lineno, format!("bad float for token {token:?}: {e}")))?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(lineno, format!("non-finite component for token {token:?}")));
            }
            let expected = *dim.get_or_insert(values.len());
            if expected == 0 {
                return Err(parse_err(lineno, format!("token {token:?} has no components")));
            }
            if values.len() != expected {
                return Err(ZslError::Format(format!(
                    "{source}: line {lineno}: token {token:?} has {} floats, expected {expected}",
                    values.len()
                )));
            }
            let key = token.to_lowercase();
            if entries.contains_key(&key) {
                return Err(ZslError::Format(format!("{source}: line {lineno}: duplicate token {key:?}")));
            }
            entries.insert(key, values);
        }
        let dim = dim.ok_or_else(|| ZslError::Format(format!("{source}: no word vectors found")))?;
        if let Some(count) = declared_count {
            if count != entries.len() {
                log::warn!("{source}: header declares {count} tokens, found {}", entries.len());
            }
        }
        Ok(WordVectorStore { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(Vec::as_slice)
    }
}

/// Splits a class name on whitespace, underscores, hyphens and camelCase
/// boundaries, lower-casing every token.
pub fn tokenize_class_name(name: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for piece in name.split(|c: char| c.is_whitespace() || c == '_' || c == '-') {
        let chars: Vec<char> = piece.chars().collect();
        let mut current = String::new();
        for (i, &c) in chars.iter().enumerate() {
            if i > 0 && c.is_uppercase() {
                let prev = chars[i - 1];
                let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
                // "IceSkating" -> ice|skating, "HTMLParser" -> html|parser
                if prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower) {
                    tokens.push(std::mem::take(&mut current).to_lowercase());
                }
            }
            current.push(c);
        }
        if !current.is_empty() {
            tokens.push(current.to_lowercase());
        }
    }
    tokens
}

/// Canonical form used for exact class-name matching across datasets.
pub fn canonical_name(name: &str) -> String {
    tokenize_class_name(name).join("_")
}

/// Unit-norm semantic prototype of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    pub class_name: String,
    pub vector: Array1<f64>,
    pub normalized: bool,
    /// Tokens of the class name that were not found in the store.
    pub skipped_tokens: Vec<String>,
}

/// Averages the vectors of the class name's tokens and normalizes the mean.
pub fn compose_class_vector(store: &WordVectorStore, class_name: &str) -> Result<ClassEmbedding> {
    let tokens = tokenize_class_name(class_name);
    if tokens.is_empty() {
        return Err(ZslError::Lookup(format!("class name {class_name:?} has no tokens")));
    }
    let mut sum = Array1::<f64>::zeros(store.dim());
    let mut found = 0usize;
    let mut skipped = Vec::new();
    for token in &tokens {
        match store.get(token) {
            Some(v) => {
                sum += &ndarray::ArrayView1::from(v);
                found += 1;
            }
            None => skipped.push(token.clone()),
        }
    }
    if found == 0 {
        return Err(ZslError::Lookup(format!(
            "no token of class {class_name:?} is in the vocabulary (missing: {})",
            skipped.join(", ")
        )));
    }
    if !skipped.is_empty() {
        log::warn!("class {class_name:?}: skipping unknown tokens {skipped:?}");
    }
    let mean = sum / found as f64;
    let norm = mean.dot(&mean).sqrt();
    if !(norm > 0.0) {
        return Err(ZslError::Degenerate(format!("class {class_name:?} composes to a zero vector")));
    }
    Ok(ClassEmbedding {
        class_name: class_name.to_string(),
        vector: mean / norm,
        normalized: true,
        skipped_tokens: skipped,
    })
}

/// Per-class attribute rows loaded from `class,a_1,...,a_m` CSV.
#[derive(Debug, Clone)]
pub struct AttributeTable {
    dim: usize,
    rows: HashMap<String, Vec<f64>>,
}

impl AttributeTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| ZslError::io(path, e))?;
        Self::read(file, &path.display().to_string())
    }

    pub fn read<R: std::io::Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| ZslError::Format(format!("{source}: {e}")))?.clone();
        if headers.len() < 2 || &headers[0] != "class" {
            return Err(ZslError::Format(format!("{source}: header must be `class,a_1,...`")));
        }
        let dim = headers.len() - 1;
        let mut rows = HashMap::new();
        for (i, record) in rdr.records().enumerate() {
            let lineno = i + 2;
            let record = record.map_err(|e| ZslError::Parse {
                path: source.into(),
                line: lineno,
                message: e.to_string(),
            })?;
            if record.len() != dim + 1 {
                return Err(ZslError::Parse {
                    path: source.into(),
                    line: lineno,
                    message: format!("expected {} fields, found {}", dim + 1, record.len()),
                });
            }
            let values = record
                .iter()
                .skip(1)
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| ZslError::Parse {
                    path: source.into(),
                    line: lineno,
                    message: e.to_string(),
                })?;
            let key = canonical_name(&record[0]);
            if rows.insert(key.clone(), values).is_some() {
                return Err(ZslError::Format(format!("{source}: duplicate attribute row for {key:?}")));
            }
        }
        Ok(AttributeTable { dim, rows })
    }

    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut map = HashMap::new();
        for (name, values) in rows {
            if values.len() != dim {
                return Err(ZslError::Format(format!("attribute row {:?} has wrong length", name.as_ref())));
            }
            map.insert(canonical_name(name.as_ref()), values);
        }
        Ok(AttributeTable { dim, rows: map })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Normalized attribute vector of a class.
    pub fn embedding(&self, class_name: &str) -> Result<Array1<f64>> {
        let row = self
            .rows
            .get(&canonical_name(class_name))
            .ok_or_else(|| ZslError::Lookup(format!("class {class_name:?} missing from attribute table")))?;
        let v = Array1::from(row.clone());
        let norm = v.dot(&v).sqrt();
        if !(norm > 0.0) {
            return Err(ZslError::Degenerate(format!("attribute row of {class_name:?} is all zero")));
        }
        Ok(v / norm)
    }
}

/// Where class prototypes come from.
#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    WordVectors(WordVectorStore),
    Attributes(AttributeTable),
    /// Word-vector block stacked on top of the attribute block; each block
    /// is normalized on its own before the stacked vector is normalized.
    Concatenated {
        words: WordVectorStore,
        attributes: AttributeTable,
    },
}

impl EmbeddingSource {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::WordVectors(w) => w.dim(),
            EmbeddingSource::Attributes(a) => a.dim(),
            EmbeddingSource::Concatenated { words, attributes } => words.dim() + attributes.dim(),
        }
    }

    pub fn embed(&self, class_name: &str) -> Result<Array1<f64>> {
        match self {
            EmbeddingSource::WordVectors(w) => Ok(compose_class_vector(w, class_name)?.vector),
            EmbeddingSource::Attributes(a) => a.embedding(class_name),
            EmbeddingSource::Concatenated { words, attributes } => {
                let w = compose_class_vector(words, class_name)?.vector;
                let a = attributes.embedding(class_name)?;
                let mut stacked = ndarray::concatenate![ndarray::Axis(0), w, a];
                let norm = stacked.dot(&stacked).sqrt();
                stacked /= norm;
                Ok(stacked)
            }
        }
    }
}

/// Produces the prototype matrix for a list of class names.
pub trait PrototypeSource: Sync {
    fn class_matrix(&self, class_names: &[String]) -> Result<ClassMatrix>;
}

impl PrototypeSource for EmbeddingSource {
    fn class_matrix(&self, class_names: &[String]) -> Result<ClassMatrix> {
        build_class_matrix(self, class_names)
    }
}

impl PrototypeSource for ClassMatrix {
    /// Looks columns up by exact name.
    fn class_matrix(&self, class_names: &[String]) -> Result<ClassMatrix> {
        let mut out = Array2::zeros((self.dim(), class_names.len()));
        for (j, name) in class_names.iter().enumerate() {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| ZslError::Lookup(format!("class {name:?} has no prototype")))?;
            out.column_mut(j).assign(&self.matrix.column(i));
        }
        Ok(ClassMatrix {
            names: class_names.to_vec(),
            matrix: out,
        })
    }
}

/// Prototype matrix `Z`: one unit-norm column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatrix {
    pub names: Vec<String>,
    /// d_z x C
    pub matrix: Array2<f64>,
}

impl ClassMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Columns for the given class indices, in order.
    pub fn select(&self, classes: &[usize]) -> Array2<f64> {
        self.matrix.select(ndarray::Axis(1), classes)
    }
}

pub fn build_class_matrix(source: &EmbeddingSource, class_names: &[String]) -> Result<ClassMatrix> {
    let mut matrix = Array2::zeros((source.dim(), class_names.len()));
    for (j, name) in class_names.iter().enumerate() {
        matrix.column_mut(j).assign(&source.embed(name)?);
    }
    Ok(ClassMatrix {
        names: class_names.to_vec(),
        matrix,
    })
}
