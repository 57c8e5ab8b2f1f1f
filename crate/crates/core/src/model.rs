//! The learned-model container.
//!
//! Layout: the 8-byte magic `DMST0001`, a little-endian `u64` byte length,
//! a JSON metadata block of that length, then little-endian `f64` arrays in
//! the order listed in the metadata (`arrays`). Writing is deterministic, so
//! save → load → save reproduces the file byte for byte.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::constraint::{ConstraintFamily, ConstraintParams};
use crate::embedding::{CoverageGate, PcaBasis};
use crate::error::{Error, Result};
use crate::features::{FeatureLibrary, SharedParams};
use crate::mapping::MappingParams;
use crate::sim::DynamicsModel;

pub const MAGIC: &[u8; 8] = b"DMST0001";
pub const MODEL_VERSION: &str = "demonstrate-model-1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub demoset_hash: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub loss_curve_tail: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedModel {
    pub version: String,
    pub pca: PcaBasis,
    pub mapping: MappingParams,
    pub m: SharedParams,
    pub rho: Option<ConstraintParams>,
    pub library: FeatureLibrary,
    pub dynamics: DynamicsModel,
    pub embedder_id: String,
    pub example_texts: Vec<String>,
    /// Raw example embeddings, one per row (`T × s`).
    pub example_embeddings: DMatrix<f64>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: String,
    s: usize,
    z: usize,
    p: usize,
    layer_sizes: Vec<usize>,
    library: FeatureLibrary,
    dynamics: DynamicsModel,
    rho_family: Option<ConstraintFamily>,
    embedder_id: String,
    example_texts: Vec<String>,
    provenance: Provenance,
    arrays: Vec<ArraySpec>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        v.extend(m.row(r).iter());
    }
    v
}

impl LearnedModel {
    pub fn z(&self) -> usize {
        self.pca.z
    }

    pub fn s(&self) -> usize {
        self.pca.s()
    }

    pub fn p(&self) -> usize {
        self.library.p()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::Version {
                expected: MODEL_VERSION.into(),
                found: self.version.clone(),
            });
        }
        self.mapping.validate()?;
        self.m.validate()?;
        if let Some(r) = &self.rho {
            r.validate()?;
        }
        let (s, z) = self.pca.components.shape();
        if z != self.pca.z || self.pca.singular_values.len() != z || self.pca.mean.len() != s {
            return Err(Error::Model("PCA basis has inconsistent shapes".into()));
        }
        if self.mapping.z() != z {
            return Err(Error::Model(format!(
                "mapping input width {} differs from z = {z}",
                self.mapping.z()
            )));
        }
        if self.mapping.p() != self.p() {
            return Err(Error::Model(format!(
                "mapping output width {} differs from p = {}",
                self.mapping.p(),
                self.p()
            )));
        }
        if self.example_embeddings.ncols() != s
            || self.example_embeddings.nrows() != self.example_texts.len()
        {
            return Err(Error::Model("example embeddings do not match s or the text list".into()));
        }
        Ok(())
    }

    /// Coverage gate over the stored example embeddings.
    pub fn coverage_gate(&self) -> Result<CoverageGate> {
        CoverageGate::new(&self.example_embeddings)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut arrays: Vec<(String, Vec<f64>)> = vec![
            ("pca.mean".into(), self.pca.mean.iter().copied().collect()),
            ("pca.components".into(), row_major(&self.pca.components)),
            ("pca.singular_values".into(), self.pca.singular_values.iter().copied().collect()),
        ];
        for (l, (w, b)) in self.mapping.weights.iter().zip(&self.mapping.biases).enumerate() {
            arrays.push((format!("mapping.{l}.weight"), row_major(w)));
            arrays.push((format!("mapping.{l}.bias"), b.iter().copied().collect()));
        }
        arrays.push(("mapping.input_scale".into(), self.mapping.input_scale.iter().copied().collect()));
        arrays.push(("mapping.output_scale".into(), self.mapping.output_scale.iter().copied().collect()));
        arrays.push(("m".into(), self.m.to_vec()));
        if let Some(r) = &self.rho {
            arrays.push(("rho".into(), r.to_vec()));
        }
        arrays.push(("examples".into(), row_major(&self.example_embeddings)));

        let meta = Meta {
            version: self.version.clone(),
            s: self.s(),
            z: self.z(),
            p: self.p(),
            layer_sizes: self.mapping.layer_sizes.clone(),
            library: self.library,
            dynamics: self.dynamics,
            rho_family: self.rho.map(|r| r.family),
            embedder_id: self.embedder_id.clone(),
            example_texts: self.example_texts.clone(),
            provenance: self.provenance.clone(),
            arrays: arrays
                .iter()
                .map(|(n, v)| ArraySpec {
                    name: n.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * arrays.iter().map(|a| a.1.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &arrays {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
            return Err(Error::Version {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found,
            });
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + n)
            .ok_or_else(|| Error::Model("truncated metadata block".into()))?;
        let meta: Meta = serde_json::from_slice(json)?;
        if meta.version != MODEL_VERSION {
            return Err(Error::Version {
                expected: MODEL_VERSION.into(),
                found: meta.version,
            });
        }
        let mut pos = 16 + n;
        let mut take = |name: &str, len: usize| -> Result<Vec<f64>> {
            let spec = meta
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Model(format!("missing array {name}")))?;
            if spec.len != len {
                return Err(Error::Model(format!(
                    "array {name} has {} values, expected {len}",
                    spec.len
                )));
            }
            let end = pos + 8 * len;
            let chunk = bytes
                .get(pos..end)
                .ok_or_else(|| Error::Model(format!("truncated array {name}")))?;
            pos = end;
            Ok(chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let (s, z) = (meta.s, meta.z);
        let mean = DVector::from_vec(take("pca.mean", s)?);
        let components = DMatrix::from_row_slice(s, z, &take("pca.components", s * z)?);
        let singular_values = DVector::from_vec(take("pca.singular_values", z)?);
        let sizes = &meta.layer_sizes;
        if sizes.len() < 2 {
            return Err(Error::Model("mapping needs at least two layer sizes".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            weights.push(DMatrix::from_row_slice(w[1], w[0], &take(&format!("mapping.{l}.weight"), w[0] * w[1])?));
            biases.push(DVector::from_vec(take(&format!("mapping.{l}.bias"), w[1])?));
        }
        let input_scale = DVector::from_vec(take("mapping.input_scale", sizes[0])?);
        let output_scale = DVector::from_vec(take("mapping.output_scale", *sizes.last().unwrap())?);
        let m = SharedParams::from_slice(&take("m", SharedParams::LEN)?)?;
        let rho = match meta.rho_family {
            Some(f) => {
                let mut r = ConstraintParams::from_slice(f, &take("rho", 6)?)?;
                r.family = f;
                Some(r)
            }
            None => None,
        };
        let t = meta.example_texts.len();
        let example_embeddings = DMatrix::from_row_slice(t, s, &take("examples", t * s)?);
        if pos != bytes.len() {
            return Err(Error::Model(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let model = Self {
            version: meta.version,
            pca: PcaBasis {
                mean,
                components,
                singular_values,
                z,
            },
            mapping: MappingParams {
                layer_sizes: meta.layer_sizes.clone(),
                weights,
                biases,
                input_scale,
                output_scale,
            },
            m,
            rho,
            library: meta.library,
            dynamics: meta.dynamics,
            embedder_id: meta.embedder_id,
            example_texts: meta.example_texts,
            example_embeddings,
            provenance: meta.provenance,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of arbitrary bytes (provenance hashes).
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Build and validate a current-version model from its parts.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    pca: PcaBasis,
    mapping: MappingParams,
    m: SharedParams,
    rho: Option<ConstraintParams>,
    library: FeatureLibrary,
    dynamics: DynamicsModel,
    embedder_id: &str,
    example_texts: Vec<String>,
    example_embeddings: DMatrix<f64>,
    provenance: Provenance,
) -> Result<LearnedModel> {
    let model = LearnedModel {
        version: MODEL_VERSION.into(),
        pca,
        mapping,
        m,
        rho,
        library,
        dynamics,
        embedder_id: embedder_id.into(),
        example_texts,
        example_embeddings,
        provenance,
    };
    model.validate()?;
    Ok(model)
}
