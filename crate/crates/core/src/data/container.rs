//! The on-disk dataset container: a JSON manifest plus flat little-endian
//! sidecar arrays (or arrays inlined in the manifest). See FORMATS.md.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const FORMAT: &str = "adrgnn-dataset";
pub const SCHEMA_VERSION: u64 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl Values {
    pub fn len(&self) -> usize {
        match self {
            Values::F64(v) => v.len(),
            Values::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            Values::F64(_) => "f64",
            Values::I64(_) => "i64",
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Values::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Values::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

/// A row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub values: Values,
}

impl Array {
    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self { shape, values: Values::F64(values) }
    }

    pub fn i64(shape: Vec<usize>, values: Vec<i64>) -> Self {
        Self { shape, values: Values::I64(values) }
    }
}

/// Parsed manifest and arrays. `fields` keeps the kind-specific top-level
/// keys (for example the temporal window lengths).
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub name: String,
    pub n_nodes: usize,
    pub normalize_features: bool,
    pub metadata: Map<String, Value>,
    pub fields: Map<String, Value>,
    pub arrays: BTreeMap<String, Array>,
}

const RESERVED: [&str; 8] =
    ["format", "schema_version", "kind", "name", "n_nodes", "normalize_features", "metadata", "arrays"];

/// Accepts either the manifest file or the directory holding it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

struct Loc<'a> {
    file: &'a str,
}

impl Loc<'_> {
    fn err(&self, pointer: &str, msg: impl Into<String>) -> Error {
        Error::format(format!("{}#{}", self.file, pointer), msg)
    }

    fn get<'v>(&self, obj: &'v Map<String, Value>, base: &str, key: &str) -> Result<&'v Value> {
        obj.get(key).ok_or_else(|| self.err(&format!("{base}/{key}"), "missing"))
    }

    fn string(&self, obj: &Map<String, Value>, base: &str, key: &str) -> Result<String> {
        match self.get(obj, base, key)? {
            Value::String(s) => Ok(s.clone()),
            _ => Err(self.err(&format!("{base}/{key}"), "expected a string")),
        }
    }

    fn uint(&self, v: &Value, pointer: &str) -> Result<usize> {
        v.as_u64().map(|x| x as usize).ok_or_else(|| self.err(pointer, "expected a non-negative integer"))
    }
}

impl Container {
    pub fn new(kind: &str, name: &str, n_nodes: usize) -> Self {
        Self {
            kind: kind.into(),
            name: name.into(),
            n_nodes,
            normalize_features: false,
            metadata: Map::new(),
            fields: Map::new(),
            arrays: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let manifest = manifest_path(path);
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let file = manifest.display().to_string();
        Self::parse(&text, dir, &file)
    }

    /// Parses manifest text; sidecar files are resolved against `dir`.
    pub fn parse(text: &str, dir: &Path, file: &str) -> Result<Self> {
        let loc = Loc { file };
        let root: Value = serde_json::from_str(text).map_err(|e| loc.err("", format!("invalid JSON: {e}")))?;
        let Value::Object(root) = root else {
            return Err(loc.err("", "manifest must be a JSON object"));
        };
        let format = loc.string(&root, "", "format")?;
        if format != FORMAT {
            return Err(loc.err("/format", format!("expected \"{FORMAT}\", found \"{format}\"")));
        }
        let version = loc.get(&root, "", "schema_version")?;
        if version.as_u64() != Some(SCHEMA_VERSION) {
            return Err(loc.err("/schema_version", format!("unsupported schema version {version}")));
        }
        let kind = loc.string(&root, "", "kind")?;
        let name = match root.get("name") {
            None => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(loc.err("/name", "expected a string")),
        };
        let n_nodes = loc.uint(loc.get(&root, "", "n_nodes")?, "/n_nodes")?;
        if n_nodes == 0 {
            return Err(loc.err("/n_nodes", "must be positive"));
        }
        let normalize_features = match root.get("normalize_features") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(loc.err("/normalize_features", "expected a boolean")),
        };
        let metadata = match root.get("metadata") {
            None => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => return Err(loc.err("/metadata", "expected an object")),
        };
        let Value::Object(specs) = loc.get(&root, "", "arrays")? else {
            return Err(loc.err("/arrays", "expected an object"));
        };
        let mut arrays = BTreeMap::new();
        for (key, spec) in specs {
            let base = format!("/arrays/{key}");
            arrays.insert(key.clone(), read_array(&loc, &base, spec, dir)?);
        }
        let fields = root.into_iter().filter(|(k, _)| !RESERVED.contains(&k.as_str())).collect();
        Ok(Self { kind, name, n_nodes, normalize_features, metadata, fields, arrays })
    }

    /// Writes `manifest.json` into `dir`, with arrays either inlined or as
    /// `<key>.bin` sidecars.
    pub fn write(&self, dir: &Path, inline: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut specs = Map::new();
        for (key, array) in &self.arrays {
            let mut spec = Map::new();
            spec.insert("dtype".into(), json!(array.values.dtype()));
            spec.insert("shape".into(), json!(array.shape));
            if inline {
                let data = match &array.values {
                    Values::F64(v) => json!(v),
                    Values::I64(v) => json!(v),
                };
                spec.insert("data".into(), data);
            } else {
                let file = format!("{key}.bin");
                let path = dir.join(&file);
                std::fs::write(&path, array.values.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
                spec.insert("file".into(), json!(file));
            }
            specs.insert(key.clone(), Value::Object(spec));
        }
        let mut root = Map::new();
        root.insert("format".into(), json!(FORMAT));
        root.insert("schema_version".into(), json!(SCHEMA_VERSION));
        root.insert("kind".into(), json!(self.kind));
        root.insert("name".into(), json!(self.name));
        root.insert("n_nodes".into(), json!(self.n_nodes));
        root.insert("normalize_features".into(), json!(self.normalize_features));
        root.insert("metadata".into(), Value::Object(self.metadata.clone()));
        for (k, v) in &self.fields {
            root.insert(k.clone(), v.clone());
        }
        root.insert("arrays".into(), Value::Object(specs));
        let text = serde_json::to_string_pretty(&Value::Object(root))
            .map_err(|e| Error::format(MANIFEST, e.to_string()))?;
        let path = dir.join(MANIFEST);
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn array(&self, key: &str) -> Result<&Array> {
        self.arrays.get(key).ok_or_else(|| Error::format(format!("#/arrays/{key}"), "missing"))
    }

    /// Checks `key` has the given rank and, where `Some`, the given extents.
    pub fn expect_shape(&self, key: &str, dims: &[Option<usize>]) -> Result<&Array> {
        let a = self.array(key)?;
        let ok = a.shape.len() == dims.len() && a.shape.iter().zip(dims).all(|(s, d)| d.is_none_or(|d| d == *s));
        if !ok {
            let want: Vec<String> = dims.iter().map(|d| d.map_or("*".into(), |d| d.to_string())).collect();
            return Err(Error::format(
                format!("#/arrays/{key}/shape"),
                format!("expected [{}], found {:?}", want.join(", "), a.shape),
            ));
        }
        Ok(a)
    }

    pub fn f64_values(&self, key: &str) -> Result<&[f64]> {
        match &self.array(key)?.values {
            Values::F64(v) => Ok(v),
            Values::I64(_) => Err(Error::format(format!("#/arrays/{key}/dtype"), "expected f64")),
        }
    }

    pub fn i64_values(&self, key: &str) -> Result<&[i64]> {
        match &self.array(key)?.values {
            Values::I64(v) => Ok(v),
            Values::F64(_) => Err(Error::format(format!("#/arrays/{key}/dtype"), "expected i64")),
        }
    }
}

fn read_array(loc: &Loc<'_>, base: &str, spec: &Value, dir: &Path) -> Result<Array> {
    let Value::Object(spec) = spec else {
        return Err(loc.err(base, "expected an object"));
    };
    let dtype = loc.string(spec, base, "dtype")?;
    let Value::Array(dims) = loc.get(spec, base, "shape")? else {
        return Err(loc.err(&format!("{base}/shape"), "expected an array of integers"));
    };
    let shape = dims
        .iter()
        .enumerate()
        .map(|(i, d)| loc.uint(d, &format!("{base}/shape/{i}")))
        .collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| loc.err(&format!("{base}/shape"), "element count overflows"))?;

    let values = match (spec.get("file"), spec.get("data")) {
        (Some(_), Some(_)) => return Err(loc.err(base, "give either \"file\" or \"data\", not both")),
        (None, None) => return Err(loc.err(base, "needs \"file\" or \"data\"")),
        (Some(Value::String(file)), None) => {
            let path = dir.join(file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != count * 8 {
                return Err(loc.err(
                    &format!("{base}/file"),
                    format!("{} holds {} bytes, shape {:?} needs {}", path.display(), bytes.len(), shape, count * 8),
                ));
            }
            let words = bytes.chunks_exact(8).map(|b| <[u8; 8]>::try_from(b).expect("8-byte chunk"));
            match dtype.as_str() {
                "f64" => Values::F64(words.map(f64::from_le_bytes).collect()),
                "i64" => Values::I64(words.map(i64::from_le_bytes).collect()),
                other => return Err(loc.err(&format!("{base}/dtype"), format!("unknown dtype \"{other}\""))),
            }
        }
        (Some(_), None) => return Err(loc.err(&format!("{base}/file"), "expected a string")),
        (None, Some(Value::Array(items))) => {
            if items.len() != count {
                return Err(loc.err(
                    &format!("{base}/data"),
                    format!("{} values, shape {:?} needs {count}", items.len(), shape),
                ));
            }
            let at = |i: usize| format!("{base}/data/{i}");
            match dtype.as_str() {
                "f64" => Values::F64(
                    items
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v.as_f64().ok_or_else(|| loc.err(&at(i), "expected a number")))
                        .collect::<Result<_>>()?,
                ),
                "i64" => Values::I64(
                    items
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v.as_i64().ok_or_else(|| loc.err(&at(i), "expected an integer")))
                        .collect::<Result<_>>()?,
                ),
                other => return Err(loc.err(&format!("{base}/dtype"), format!("unknown dtype \"{other}\""))),
            }
        }
        (None, Some(_)) => return Err(loc.err(&format!("{base}/data"), "expected a flat array")),
    };
    Ok(Array { shape, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Container> {
        Container::parse(text, Path::new("."), "m.json")
    }

    #[test]
    fn errors_carry_pointers() {
        let bad = r#"{"format":"adrgnn-dataset","schema_version":1,"kind":"graph","n_nodes":2,
            "arrays":{"edges":{"dtype":"i64","shape":[1,2],"data":[0,"x"]}}}"#;
        let msg = parse(bad).unwrap_err().to_string();
        assert!(msg.contains("m.json#/arrays/edges/data/1"), "{msg}");

        let missing = r#"{"format":"adrgnn-dataset","schema_version":1,"kind":"graph","arrays":{}}"#;
        assert!(parse(missing).unwrap_err().to_string().contains("#/n_nodes"));

        let count = r#"{"format":"adrgnn-dataset","schema_version":1,"kind":"graph","n_nodes":2,
            "arrays":{"x":{"dtype":"f64","shape":[2,2],"data":[1,2,3]}}}"#;
        assert!(parse(count).unwrap_err().to_string().contains("#/arrays/x/data"));
    }

    #[test]
    fn sidecar_and_inline_agree() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Container::new("graph", "t", 3);
        c.arrays.insert("a".into(), Array::f64(vec![3], vec![0.1, -2.5, f64::MIN_POSITIVE]));
        c.arrays.insert("b".into(), Array::i64(vec![1, 2], vec![-7, i64::MAX]));
        c.fields.insert("extra".into(), json!(4));
        c.write(&dir.path().join("bin"), false).unwrap();
        c.write(&dir.path().join("inl"), true).unwrap();
        assert_eq!(Container::read(&dir.path().join("bin")).unwrap(), c);
        assert_eq!(Container::read(&dir.path().join("inl")).unwrap(), c);
    }
}
