//! Checkpoint files: a safetensors archive of every parameter, buffer and
//! optimizer moment, plus a JSON header (schema version, architecture,
//! training configuration and counters) stored under the `header` metadata
//! key.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::{Adam, AdamConfig, Params};
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
const FORMAT: &str = "grainkit-checkpoint";
const HEADER_KEY: &str = "header";

/// Complete training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub g_opt: Adam,
    pub d_opt: Option<Adam>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    schema_version: u32,
    generator: GeneratorConfig,
    discriminator: Option<DiscriminatorConfig>,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    g_opt: OptimizerHeader,
    d_opt: Option<OptimizerHeader>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn collect_params(
    prefix: &str,
    module: &dyn Params,
    out: &mut BTreeMap<String, (Vec<usize>, Vec<u8>)>,
) {
    module.visit(prefix, &mut |name, p| {
        out.insert(name.to_string(), (p.shape.clone(), f32_bytes(&p.value)));
    });
}

fn collect_moments(
    prefix: &str,
    opt: &Adam,
    shapes: &HashMap<String, Vec<usize>>,
    out: &mut BTreeMap<String, (Vec<usize>, Vec<u8>)>,
) {
    for (name, (m, v)) in &opt.moments {
        let shape = shapes.get(name).cloned().unwrap_or_else(|| vec![m.len()]);
        out.insert(format!("{prefix}.m.{name}"), (shape.clone(), f32_bytes(m)));
        out.insert(format!("{prefix}.v.{name}"), (shape, f32_bytes(v)));
    }
}

fn shapes_of(module: &dyn Params) -> HashMap<String, Vec<usize>> {
    let mut s = HashMap::new();
    module.visit("", &mut |n, p| {
        s.insert(n.to_string(), p.shape.clone());
    });
    s
}

fn read_f32(view: &TensorView<'_>, name: &str) -> Result<Vec<f32>> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("tensor {name} is not f32")));
    }
    Ok(view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Fills every parameter of `module` from `prefix.<name>` tensors; fails on
/// missing tensors, shape mismatches and unused tensors under `prefix`.
fn restore_params(prefix: &str, module: &mut dyn Params, st: &SafeTensors<'_>) -> Result<()> {
    let mut err = None;
    let mut used = 0usize;
    module.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        let full = format!("{prefix}.{name}");
        match st.tensor(&full) {
            Ok(view) if view.shape() == p.shape.as_slice() => match read_f32(&view, &full) {
                Ok(v) => {
                    p.value = v;
                    used += 1;
                }
                Err(e) => err = Some(e),
            },
            Ok(view) => {
                err = Some(Error::Checkpoint(format!(
                    "architecture mismatch: {full} has shape {:?}, expected {:?}",
                    view.shape(),
                    p.shape
                )))
            }
            Err(_) => {
                err = Some(Error::Checkpoint(format!(
                    "architecture mismatch: missing {full}"
                )))
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let stored = st
        .names()
        .iter()
        .filter(|n| n.starts_with(&format!("{prefix}.")))
        .count();
    if stored != used {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: {stored} stored {prefix} tensors, model has {used}"
        )));
    }
    Ok(())
}

fn restore_optimizer(prefix: &str, h: &OptimizerHeader, st: &SafeTensors<'_>) -> Result<Adam> {
    let mut opt = Adam::new(h.config);
    opt.step = h.step;
    let m_prefix = format!("{prefix}.m.");
    for name in st.names() {
        if let Some(param) = name.strip_prefix(&m_prefix) {
            let m = read_f32(&st.tensor(name).map_err(ck)?, name)?;
            let vname = format!("{prefix}.v.{param}");
            let v = read_f32(
                &st.tensor(&vname)
                    .map_err(|_| Error::Checkpoint(format!("missing {vname}")))?,
                &vname,
            )?;
            opt.moments.insert(param.to_string(), (m, v));
        }
    }
    Ok(opt)
}

fn ck(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        collect_params("g", &self.generator, &mut tensors);
        collect_moments(
            "opt_g",
            &self.g_opt,
            &shapes_of(&self.generator),
            &mut tensors,
        );
        if let Some(d) = &self.discriminator {
            collect_params("d", d, &mut tensors);
            if let Some(o) = &self.d_opt {
                collect_moments("opt_d", o, &shapes_of(d), &mut tensors);
            }
        }
        let header = Header {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            generator: self.generator.config.clone(),
            discriminator: self.discriminator.as_ref().map(|d| d.config.clone()),
            train: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            g_opt: OptimizerHeader {
                config: self.g_opt.config,
                step: self.g_opt.step,
            },
            d_opt: self.d_opt.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
        };
        let views = tensors
            .iter()
            .map(|(n, (shape, bytes))| {
                TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (n.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(ck)?;
        let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
        safetensors::serialize(views, Some(meta)).map_err(ck)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(ck)?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
        let header: Header = serde_json::from_str(text)?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format {:?}",
                header.format
            )));
        }
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(ck)?;
        let mut generator = Generator::new(header.generator.clone())?;
        restore_params("g", &mut generator, &st)?;
        let discriminator = match &header.discriminator {
            Some(cfg) => {
                let mut d = Discriminator::new(cfg.clone());
                restore_params("d", &mut d, &st)?;
                Some(d)
            }
            None => None,
        };
        let g_opt = restore_optimizer("opt_g", &header.g_opt, &st)?;
        let d_opt = header
            .d_opt
            .as_ref()
            .map(|h| restore_optimizer("opt_d", h, &st))
            .transpose()?;
        Ok(Self {
            config: header.train,
            generator,
            discriminator,
            g_opt,
            d_opt,
            epoch: header.epoch,
            step: header.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored generator matches `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &GeneratorConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.generator.config != expected {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: stored {:?}, expected {:?}",
                ck.generator.config, expected
            )));
        }
        Ok(ck)
    }
}
