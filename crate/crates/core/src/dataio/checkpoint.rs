//! Checkpoint directories: a `manifest.json` plus one `FHT1` file per tensor.
//!
//! ```json
//! {
//!   "format": "fedhp-checkpoint/1",
//!   "round": 20,
//!   "config_hash": "<sha256 of the resolved config>",
//!   "tensors": [
//!     {"owner": "server", "group": "prompt", "name": "conv1.weight",
//!      "role": "param", "path": "server/prompt/param/conv1.weight.fht",
//!      "shape": [4, 1, 3, 3]}
//!   ]
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::tensorfile::{load_tensor, save_tensor};
use crate::error::{Error, Result};
use crate::learncore::{GroupKind, OptimizerState, ParamGroup};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "fedhp-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorRole {
    Param,
    AdamFirst,
    AdamSecond,
    ControlVariate,
    Mask,
    Cube,
}

impl TensorRole {
    fn dir(&self) -> &'static str {
        match self {
            TensorRole::Param => "param",
            TensorRole::AdamFirst => "adam-first",
            TensorRole::AdamSecond => "adam-second",
            TensorRole::ControlVariate => "control-variate",
            TensorRole::Mask => "mask",
            TensorRole::Cube => "cube",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub owner: String,
    pub group: String,
    pub name: String,
    pub role: TensorRole,
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub round: usize,
    pub config_hash: String,
    /// Optimizer step counters keyed by `owner/group`.
    #[serde(default)]
    pub steps: std::collections::BTreeMap<String, u64>,
    pub tensors: Vec<ManifestEntry>,
}

pub struct CheckpointWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl CheckpointWriter {
    pub fn new(
        dir: impl Into<PathBuf>,
        round: usize,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            manifest: Manifest {
                format: FORMAT.into(),
                round,
                config_hash: config_hash.into(),
                steps: Default::default(),
                tensors: Vec::new(),
            },
        })
    }

    pub fn add(
        &mut self,
        owner: &str,
        group: &str,
        name: &str,
        role: TensorRole,
        t: &Tensor<f32>,
    ) -> Result<()> {
        if self
            .manifest
            .tensors
            .iter()
            .any(|e| e.owner == owner && e.group == group && e.name == name && e.role == role)
        {
            return Err(Error::invalid(format!(
                "duplicate checkpoint entry {owner}/{group}/{name}"
            )));
        }
        let rel = format!("{owner}/{group}/{}/{name}.fht", role.dir());
        save_tensor(self.dir.join(&rel), t)?;
        self.manifest.tensors.push(ManifestEntry {
            owner: owner.into(),
            group: group.into(),
            name: name.into(),
            role,
            path: rel,
            shape: t.shape().to_vec(),
        });
        Ok(())
    }

    pub fn add_group(&mut self, owner: &str, group: &ParamGroup) -> Result<()> {
        let kind = group.kind().to_string();
        for (name, t) in group.iter() {
            self.add(owner, &kind, name, TensorRole::Param, t)?;
        }
        Ok(())
    }

    pub fn add_optimizer(
        &mut self,
        owner: &str,
        kind: GroupKind,
        state: &OptimizerState,
    ) -> Result<()> {
        let g = kind.to_string();
        for (name, t) in &state.first {
            self.add(owner, &g, name, TensorRole::AdamFirst, t)?;
        }
        for (name, t) in &state.second {
            self.add(owner, &g, name, TensorRole::AdamSecond, t)?;
        }
        self.manifest
            .steps
            .insert(format!("{owner}/{g}"), state.step);
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest> {
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    dir: PathBuf,
    pub manifest: Manifest,
}

impl Checkpoint {
    /// Reads the manifest and verifies every entry resolves to a tensor of
    /// the recorded shape.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format `{}`",
                manifest.format
            )));
        }
        for e in &manifest.tensors {
            let t = load_tensor(dir.join(&e.path))?;
            t.ensure_shape(&e.shape, &e.path)?;
        }
        Ok(Self { dir, manifest })
    }

    pub fn round(&self) -> usize {
        self.manifest.round
    }

    pub fn owners(&self) -> Vec<String> {
        let mut o: Vec<String> = self
            .manifest
            .tensors
            .iter()
            .map(|e| e.owner.clone())
            .collect();
        o.dedup();
        o.sort();
        o.dedup();
        o
    }

    pub fn tensor(
        &self,
        owner: &str,
        group: &str,
        name: &str,
        role: TensorRole,
    ) -> Result<Tensor<f32>> {
        let e = self
            .manifest
            .tensors
            .iter()
            .find(|e| e.owner == owner && e.group == group && e.name == name && e.role == role)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no {owner}/{group}/{name}")))?;
        load_tensor(self.dir.join(&e.path))
    }

    pub fn has_group(&self, owner: &str, kind: GroupKind) -> bool {
        let g = kind.to_string();
        self.manifest
            .tensors
            .iter()
            .any(|e| e.owner == owner && e.group == g && e.role == TensorRole::Param)
    }

    pub fn group(&self, owner: &str, kind: GroupKind) -> Result<ParamGroup> {
        let g = kind.to_string();
        let mut out = ParamGroup::new(kind);
        for e in self
            .manifest
            .tensors
            .iter()
            .filter(|e| e.owner == owner && e.group == g && e.role == TensorRole::Param)
        {
            out.insert(e.name.clone(), load_tensor(self.dir.join(&e.path))?)?;
        }
        if out.is_empty() {
            return Err(Error::invalid(format!(
                "checkpoint has no {owner}/{g} parameters"
            )));
        }
        Ok(out)
    }

    pub fn optimizer(&self, owner: &str, kind: GroupKind) -> Result<OptimizerState> {
        let params = self.group(owner, kind)?;
        let mut st = OptimizerState::new(&params);
        let g = kind.to_string();
        st.step = *self
            .manifest
            .steps
            .get(&format!("{owner}/{g}"))
            .ok_or_else(|| {
                Error::invalid(format!("checkpoint has no optimizer for {owner}/{g}"))
            })?;
        for name in params.names() {
            st.first.insert(
                name.clone(),
                self.tensor(owner, &g, name, TensorRole::AdamFirst)?,
            );
            st.second.insert(
                name.clone(),
                self.tensor(owner, &g, name, TensorRole::AdamSecond)?,
            );
        }
        Ok(st)
    }
}
