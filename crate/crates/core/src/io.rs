//! On-disk formats: the named-array container used for datasets and
//! checkpoints, JSON sidecars and summaries, and headed CSV tables.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "MCRA"
//! version    u32      1
//! meta_len   u32      byte length of the JSON metadata that follows
//! meta       UTF-8 JSON object
//! n_arrays   u32
//! per array:
//!   name_len u32, name UTF-8
//!   ndim     u32, dims u64 x ndim
//!   values   f64 x product(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{ModelSpec, MultimodalModel};
use crate::synthdata::{Dataset, RowKind, SyntheticData, SyntheticSpec};

pub const MAGIC: &[u8; 4] = b"MCRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too large".into()))?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            if a.dims.iter().product::<usize>() != a.values.len() {
                return Err(Error::Format(format!("array `{}` dims disagree with length", a.name)));
            }
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for d in &a.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an array container".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let meta: Value = serde_json::from_slice(&meta)?;
        let n = read_u32(r)?;
        let mut arrays = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let ndim = read_u32(r)?;
            let dims = (0..ndim)
                .map(|_| {
                    let mut b = [0u8; 8];
                    read_exact(r, &mut b)?;
                    Ok(u64::from_le_bytes(b) as usize)
                })
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            if len.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(Error::Format(format!("array `{name}` truncated")));
            }
            let values = (0..len)
                .map(|_| {
                    let mut b = [0u8; 8];
                    read_exact(r, &mut b)?;
                    Ok(f64::from_le_bytes(b))
                })
                .collect::<Result<Vec<_>>>()?;
            arrays.push(NamedArray { name, dims, values });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of container".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

static NO_CLOBBER: AtomicBool = AtomicBool::new(false);

/// When set, [`write_bytes`] leaves an existing file with identical bytes
/// alone and refuses to replace one with different bytes.
pub fn set_no_clobber(on: bool) {
    NO_CLOBBER.store(on, Ordering::Relaxed);
}

/// Writes `bytes`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if NO_CLOBBER.load(Ordering::Relaxed) && path.exists() {
        if fs::read(path)? == bytes {
            return Ok(());
        }
        return Err(Error::Config(format!(
            "refusing to overwrite {} with different contents",
            path.display()
        )));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// SHA-256 of the compact JSON form with object keys sorted, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let canonical = serde_json::to_string(&v)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Command-line value: JSON when it parses, otherwise a plain string.
pub fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `a.b.c` inside `root`, creating missing objects.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

/// Applies `key=value` overrides in order.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        set_dotted(root, k.trim(), parse_scalar(v.trim()))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

/// CSV table whose first line is `# config_hash=<hex> seed=<n>`; a sweep
/// writes its seeds joined by `;`.
#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    pub config_hash: String,
    pub seed: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(config_hash: impl Into<String>, seed: impl ToString, header: &[&str]) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed: seed.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Format(format!(
                "row has {} fields, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        if row.iter().any(|f| f.contains([',', '\n', '"'])) {
            return Err(Error::Format("CSV fields must not contain commas, quotes or newlines".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!("# config_hash={} seed={}\n", self.config_hash, self.seed);
        s.push_str(&self.header.join(","));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.render().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
        let rest = first
            .strip_prefix("# ")
            .ok_or_else(|| Error::Format("CSV lacks the config header line".into()))?;
        let mut hash = None;
        let mut seed = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("config_hash", v)) => hash = Some(v.to_string()),
                Some(("seed", v)) => seed = Some(v.to_string()),
                _ => {}
            }
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("CSV lacks a column header".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Ok(Self {
            config_hash: hash.ok_or_else(|| Error::Format("missing config_hash".into()))?,
            seed: seed.ok_or_else(|| Error::Format("missing seed".into()))?,
            header,
            rows,
        })
    }
}

/// Shortest round-trip text of a float; empty for `None`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn tensor_array(name: String, t: &Tensor) -> NamedArray {
    NamedArray {
        name,
        dims: t.shape().to_vec(),
        values: t.values().to_vec(),
    }
}

fn dataset_arrays(prefix: &str, d: &Dataset, out: &mut Vec<NamedArray>) {
    for (m, x) in d.x.iter().enumerate() {
        out.push(tensor_array(format!("{prefix}.x{}", m + 1), x));
    }
    out.push(NamedArray {
        name: format!("{prefix}.y"),
        dims: vec![d.len()],
        values: d.y.iter().map(|&v| v as f64).collect(),
    });
    out.push(NamedArray {
        name: format!("{prefix}.kind"),
        dims: vec![d.len()],
        values: d.kinds.iter().map(|k| k.code()).collect(),
    });
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Container plus sidecar for a generated dataset.
pub fn dataset_container(data: &SyntheticData) -> Result<Container> {
    let mut arrays = Vec::new();
    for (name, d) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        dataset_arrays(name, d, &mut arrays);
    }
    Ok(Container {
        meta: serde_json::json!({
            "kind": "dataset",
            "config_hash": config_hash(&data.spec)?,
            "seed": data.spec.seed,
            "spec": data.spec,
        }),
        arrays,
    })
}

fn dataset_from(c: &Container, prefix: &str, n_classes: usize) -> Result<Dataset> {
    let y = c.get(&format!("{prefix}.y"))?;
    let n = y.values.len();
    let mut x = Vec::new();
    for m in 1.. {
        let Ok(a) = c.get(&format!("{prefix}.x{m}")) else { break };
        if a.dims.len() != 2 || a.dims[0] != n {
            return Err(Error::Format(format!("array `{}` has bad shape", a.name)));
        }
        x.push(Tensor::matrix(a.dims[0], a.dims[1], a.values.clone())?);
    }
    let kinds = c
        .get(&format!("{prefix}.kind"))?
        .values
        .iter()
        .map(|v| RowKind::from_code(*v))
        .collect::<Result<_>>()?;
    let d = Dataset {
        x,
        y: y.values.iter().map(|v| *v as usize).collect(),
        kinds,
        n_classes,
    };
    d.validate()?;
    Ok(d)
}

pub fn dataset_from_container(c: &Container) -> Result<SyntheticData> {
    let spec: SyntheticSpec = serde_json::from_value(
        c.meta
            .get("spec")
            .cloned()
            .ok_or_else(|| Error::Format("dataset metadata has no spec".into()))?,
    )?;
    Ok(SyntheticData {
        train: dataset_from(c, "train", spec.n_classes)?,
        val: dataset_from(c, "val", spec.n_classes)?,
        test: dataset_from(c, "test", spec.n_classes)?,
        spec,
    })
}

/// Writes `<stem>.bin` and `<stem>.json` (sidecar echoing the spec).
pub fn save_dataset(data: &SyntheticData, dir: &Path, stem: &str) -> Result<()> {
    let c = dataset_container(data)?;
    c.write(&dir.join(format!("{stem}.bin")))?;
    let names: Vec<_> = c.arrays.iter().map(|a| serde_json::json!({"name": a.name, "dims": a.dims})).collect();
    let mut side = c.meta.clone();
    side["arrays"] = Value::Array(names);
    write_json(&dir.join(format!("{stem}.json")), &side)
}

pub fn load_dataset(path: &Path) -> Result<SyntheticData> {
    dataset_from_container(&Container::read(path)?)
}

/// Parameters by name with the model spec in the metadata.
pub fn checkpoint(model: &MultimodalModel, config_hash: &str, seed: u64) -> Container {
    Container {
        meta: serde_json::json!({
            "kind": "checkpoint",
            "config_hash": config_hash,
            "seed": seed,
            "model": model.spec,
        }),
        arrays: model
            .store
            .iter()
            .map(|(_, name, t)| tensor_array(name.to_string(), t))
            .collect(),
    }
}

pub fn load_checkpoint(c: &Container) -> Result<MultimodalModel> {
    let spec: ModelSpec = serde_json::from_value(
        c.meta
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint metadata has no model".into()))?,
    )?;
    let mut model = MultimodalModel::new(spec, 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let a = c.get(&name)?;
        let t = model.store.get_mut(id);
        if a.dims != t.shape() {
            return Err(Error::Format(format!("parameter `{name}` has shape {:?}", a.dims)));
        }
        t.values_mut().copy_from_slice(&a.values);
    }
    Ok(model)
}
