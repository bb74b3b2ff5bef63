//! Single-file model container.
//!
//! Layout: a key=value text manifest ending with a `---` line, then the
//! entity names of every dimension (and the property names of composed
//! dimensions), one per line, then the binary payload. The payload holds
//! little-endian f64 matrices in column-major order (feature matrices,
//! factorized weight vectors, property matrices) followed by the mixing
//! matrix triplets as `(u32 property, u32 entity, f64 strength)`. A SHA-256
//! of the payload is stored in the manifest and checked on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Cursor, Read};
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::als::{FactorModel, SolverKind, TrainConfig};
use crate::dataspace::{Dimension, DimensionSet, Vocabulary};
use crate::error::{Error, Result};
use crate::mdm::{ComposedParts, ExtendedModel, MixingMatrix};
use crate::model::{parse_model, Aliases};
use crate::weighting::{DimensionWeight, WeightingScheme};

const MAGIC: &str = "ctxrec-model";
pub const FORMAT_VERSION: u32 = 1;
const SEPARATOR: &str = "---";

/// Everything needed to score queries and continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub factors: FactorModel,
    pub space: DimensionSet,
    pub scheme: WeightingScheme,
    pub config: TrainConfig,
    /// Dimension evaluated with the user's last training item.
    pub sequential: Option<String>,
    /// One slot per dimension; `Some` for composed dimensions.
    pub composed: Vec<Option<ComposedParts>>,
}

impl ModelBundle {
    pub fn new(
        factors: FactorModel,
        space: DimensionSet,
        scheme: WeightingScheme,
        config: TrainConfig,
    ) -> Self {
        let n = factors.n_dims();
        ModelBundle {
            factors,
            space,
            scheme,
            config,
            sequential: None,
            composed: vec![None; n],
        }
    }

    pub fn from_extended(
        model: ExtendedModel,
        space: DimensionSet,
        scheme: WeightingScheme,
        config: TrainConfig,
    ) -> Self {
        ModelBundle {
            factors: model.factors,
            space,
            scheme,
            config,
            sequential: None,
            composed: model.composed,
        }
    }

    pub fn extended(&self) -> ExtendedModel {
        ExtendedModel {
            factors: self.factors.clone(),
            composed: self.composed.clone(),
        }
    }
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    if name.contains(['\n', '\r']) {
        return Err(Error::Format(format!("{kind} name {name:?} contains a line break")));
    }
    Ok(())
}

fn check_dimension_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['\n', '\r', '\t', '=', '+', '*', ',']) {
        return Err(Error::Format(format!("dimension name {name:?} cannot be stored")));
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_matrix(payload: &mut Vec<u8>, m: &DMatrix<f64>) {
    for v in m.as_slice() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a bundle into the container format.
pub fn encode_model(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let f = &bundle.factors;
    if bundle.space.names().as_slice() != f.dims() || bundle.space.sizes() != f.sizes() {
        return Err(Error::Format("vocabularies do not match the factor model".into()));
    }
    if bundle.composed.len() != f.n_dims() {
        return Err(Error::Format("one composition slot per dimension required".into()));
    }
    let mut manifest: Vec<(String, String)> = Vec::new();
    let mut put = |k: String, v: String| manifest.push((k, v));
    put("format_version".into(), FORMAT_VERSION.to_string());
    put("k".into(), f.k().to_string());
    put("dims".into(), f.n_dims().to_string());
    for (d, name) in f.dims().iter().enumerate() {
        check_dimension_name(name)?;
        put(format!("dim.{d}.name"), name.clone());
        put(format!("dim.{d}.size"), f.size(d).to_string());
    }
    put("user_dim".into(), bundle.space.user_dim().to_string());
    put("item_dim".into(), bundle.space.item_dim().to_string());
    put("model".into(), f.model().to_string());
    if let Some(seq) = &bundle.sequential {
        check_dimension_name(seq)?;
        put("sequential".into(), seq.clone());
    }

    let mut payload = Vec::new();
    for d in 0..f.n_dims() {
        put_matrix(&mut payload, f.matrix(d));
    }
    match &bundle.scheme {
        WeightingScheme::ImplicitSimple { alpha } => {
            put("weighting".into(), "implicit".into());
            put("alpha".into(), alpha.to_string());
        }
        WeightingScheme::Explicit => put("weighting".into(), "explicit".into()),
        WeightingScheme::ImplicitFactorized { alpha, dims } => {
            put("weighting".into(), "factorized".into());
            put("alpha".into(), alpha.to_string());
            for (d, w) in dims.iter().enumerate() {
                put(format!("weight.{d}.mu"), w.mu.to_string());
                put(format!("weight.{d}.gamma"), w.gamma.to_string());
                if let Some(values) = &w.values {
                    put(format!("weight.{d}.values"), values.len().to_string());
                    for v in values {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }

    let c = &bundle.config;
    put("epochs".into(), c.epochs.to_string());
    put("lambda".into(), c.lambda.to_string());
    for (dim, l) in &c.lambda_overrides {
        check_dimension_name(dim)?;
        put(format!("lambda.{dim}"), l.to_string());
    }
    put("solver".into(), c.solver.to_string());
    put("cg_iters".into(), c.cg_iters.to_string());
    put("cg_tol".into(), c.cg_tol.to_string());
    put("seed".into(), c.seed.to_string());
    put("init_scale".into(), c.init_scale.to_string());

    for (d, parts) in bundle.composed.iter().enumerate() {
        let Some(parts) = parts else { continue };
        let w = &parts.mixing;
        if w.n_entities() != f.size(d) || parts.properties.ncols() != w.n_properties() {
            return Err(Error::Format(format!("composition of dimension {d} is inconsistent")));
        }
        put(format!("composed.{d}.properties"), w.n_properties().to_string());
        put(format!("composed.{d}.nnz"), w.nnz().to_string());
        put(format!("composed.{d}.normalization"), w.normalization().to_string());
        put(format!("composed.{d}.learning"), parts.learning.to_string());
        put(format!("composed.{d}.ridge"), parts.ridge.to_string());
        put_matrix(&mut payload, &parts.properties);
        for (p, e, v) in w.triplets() {
            payload.extend_from_slice(&(p as u32).to_le_bytes());
            payload.extend_from_slice(&(e as u32).to_le_bytes());
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    put("payload_bytes".into(), payload.len().to_string());
    put("payload_sha256".into(), sha256_hex(&payload));

    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for (k, v) in &manifest {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out.push_str(SEPARATOR);
    out.push('\n');
    for dim in bundle.space.dims() {
        for name in dim.vocab.names() {
            check_name("entity", name)?;
            out.push_str(name);
            out.push('\n');
        }
    }
    for parts in bundle.composed.iter().flatten() {
        for name in parts.mixing.properties().names() {
            check_name("property", name)?;
            out.push_str(name);
            out.push('\n');
        }
    }
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&payload);
    Ok(bytes)
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(bundle)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Manifest(BTreeMap<String, String>);

impl Manifest {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("invalid value `{raw}` for `{key}`")))
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.0.contains_key(key) {
            self.parse(key).map(Some)
        } else {
            Ok(None)
        }
    }
}

struct Payload<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Payload<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated payload".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("size overflow".into()))?;
        Ok(DMatrix::from_vec(rows, cols, self.f64s(n)?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_line(cursor: &mut Cursor<&[u8]>) -> Result<String> {
    let mut buf = Vec::new();
    let n = cursor
        .read_until(b'\n', &mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    if n == 0 || buf.last() != Some(&b'\n') {
        return Err(Error::Format("truncated header".into()));
    }
    buf.pop();
    String::from_utf8(buf).map_err(|_| Error::Format("header is not UTF-8".into()))
}

/// Parses the container format.
pub fn decode_model(bytes: &[u8]) -> Result<ModelBundle> {
    let mut cursor = Cursor::new(bytes);
    if read_line(&mut cursor)? != MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let mut entries = BTreeMap::new();
    loop {
        let line = read_line(&mut cursor)?;
        if line == SEPARATOR {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed manifest line `{line}`")))?;
        entries.insert(k.to_string(), v.to_string());
    }
    let m = Manifest(entries);
    let version: u32 = m.parse("format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let k: usize = m.parse("k")?;
    let n_dims: usize = m.parse("dims")?;
    let mut names = Vec::with_capacity(n_dims);
    let mut sizes = Vec::with_capacity(n_dims);
    for d in 0..n_dims {
        names.push(m.get(&format!("dim.{d}.name"))?.to_string());
        sizes.push(m.parse::<usize>(&format!("dim.{d}.size"))?);
    }
    let mut composed_meta = Vec::new();
    for d in 0..n_dims {
        if let Some(n_props) = m.parse_opt::<usize>(&format!("composed.{d}.properties"))? {
            composed_meta.push((d, n_props, m.parse::<usize>(&format!("composed.{d}.nnz"))?));
        }
    }

    let mut dims = Vec::with_capacity(n_dims);
    for (name, &size) in names.iter().zip(&sizes) {
        let mut vocab = Vocabulary::new();
        for _ in 0..size {
            vocab.insert(read_line(&mut cursor)?);
        }
        if vocab.len() != size {
            return Err(Error::Format(format!("duplicate entity names in `{name}`")));
        }
        dims.push(Dimension {
            name: name.clone(),
            vocab,
        });
    }
    let mut property_vocabs = Vec::new();
    for &(_, n_props, _) in &composed_meta {
        let mut vocab = Vocabulary::new();
        for _ in 0..n_props {
            vocab.insert(read_line(&mut cursor)?);
        }
        property_vocabs.push(vocab);
    }
    let space = DimensionSet::new(dims, m.parse("user_dim")?, m.parse("item_dim")?)
        .map_err(|e| Error::Format(e.to_string()))?;

    let start = cursor.position() as usize;
    let payload_bytes = &bytes[start..];
    let expected_len: usize = m.parse("payload_bytes")?;
    if payload_bytes.len() < expected_len {
        return Err(Error::Format(format!(
            "truncated payload: {} of {expected_len} bytes",
            payload_bytes.len()
        )));
    }
    if payload_bytes.len() > expected_len {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    if sha256_hex(payload_bytes) != m.get("payload_sha256")? {
        return Err(Error::Format("payload checksum mismatch".into()));
    }
    let mut payload = Payload {
        bytes: payload_bytes,
        at: 0,
    };

    let matrices = sizes
        .iter()
        .map(|&s| payload.matrix(k, s))
        .collect::<Result<Vec<_>>>()?;
    let mut aliases = Aliases::empty();
    for name in &names {
        aliases.insert(name, name);
    }
    let model = parse_model(m.get("model")?, &aliases)?;
    let factors = FactorModel::from_matrices(names.clone(), model, matrices)?;

    let scheme = match m.get("weighting")? {
        "implicit" => WeightingScheme::ImplicitSimple {
            alpha: m.parse("alpha")?,
        },
        "explicit" => WeightingScheme::Explicit,
        "factorized" => {
            let mut weights = Vec::with_capacity(n_dims);
            for d in 0..n_dims {
                let values = match m.parse_opt::<usize>(&format!("weight.{d}.values"))? {
                    Some(n) => Some(payload.f64s(n)?),
                    None => None,
                };
                weights.push(DimensionWeight {
                    mu: m.parse(&format!("weight.{d}.mu"))?,
                    gamma: m.parse(&format!("weight.{d}.gamma"))?,
                    values,
                });
            }
            WeightingScheme::ImplicitFactorized {
                alpha: m.parse("alpha")?,
                dims: weights,
            }
        }
        other => return Err(Error::Format(format!("unknown weighting `{other}`"))),
    };

    let mut lambda_overrides = BTreeMap::new();
    for (key, _) in m.0.iter() {
        if let Some(dim) = key.strip_prefix("lambda.") {
            lambda_overrides.insert(dim.to_string(), m.parse(key)?);
        }
    }
    let config = TrainConfig {
        k,
        epochs: m.parse("epochs")?,
        lambda: m.parse("lambda")?,
        lambda_overrides,
        solver: m.get("solver")?.parse::<SolverKind>()?,
        cg_iters: m.parse("cg_iters")?,
        cg_tol: m.parse("cg_tol")?,
        seed: m.parse("seed")?,
        init_scale: m.parse("init_scale")?,
        threads: None,
        report_loss: false,
    };

    let mut composed = vec![None; n_dims];
    for ((d, n_props, nnz), vocab) in composed_meta.into_iter().zip(property_vocabs) {
        let properties = payload.matrix(k, n_props)?;
        let mut triplets = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let p = payload.u32()? as usize;
            let e = payload.u32()? as usize;
            let v = payload.f64s(1)?[0];
            triplets.push((p, e, v));
        }
        let normalization = m.get(&format!("composed.{d}.normalization"))?.parse()?;
        let mixing = MixingMatrix::restore(vocab, sizes[d], &triplets, normalization)?;
        composed[d] = Some(ComposedParts {
            mixing,
            properties,
            learning: m.get(&format!("composed.{d}.learning"))?.parse()?,
            ridge: m.parse(&format!("composed.{d}.ridge"))?,
        });
    }
    if payload.at != payload.bytes.len() {
        return Err(Error::Format("payload longer than the manifest describes".into()));
    }

    Ok(ModelBundle {
        factors,
        space,
        scheme,
        config,
        sequential: m.parse_opt("sequential")?,
        composed,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
