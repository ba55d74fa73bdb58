//! Versioned binary checkpoints: every parameter and state tensor by name,
//! both optimizer states, the global step, and the full model config. A
//! checkpoint restores training bit-exactly — saving, loading, and saving
//! again produces identical bytes.

use crate::config::{ConfigError, ModelConfig};
use crate::graph::Data;
use crate::model::LgGan;
use crate::nn::Adam;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"LGCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("embedded config is invalid: {0}")]
    Config(#[from] ConfigError),
}

/// One optimizer's complete state: step counter plus first and second
/// moment estimates, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub t: u64,
    pub m: Vec<(String, Data)>,
    pub v: Vec<(String, Data)>,
}

impl OptState {
    fn capture(opt: &Adam) -> OptState {
        let (t, m, v) = opt.state();
        let names: Vec<String> = opt.param_names().map(str::to_owned).collect();
        OptState {
            t,
            m: names.iter().cloned().zip(m.iter().cloned()).collect(),
            v: names.iter().cloned().zip(v.iter().cloned()).collect(),
        }
    }

    /// Reorder the stored moments to the optimizer's parameter order and
    /// install them.
    fn install(&self, opt: &mut Adam) -> Result<(), CheckpointError> {
        let m_by_name: HashMap<&str, &Data> =
            self.m.iter().map(|(n, d)| (n.as_str(), d)).collect();
        let v_by_name: HashMap<&str, &Data> =
            self.v.iter().map(|(n, d)| (n.as_str(), d)).collect();
        let names: Vec<String> = opt.param_names().map(str::to_owned).collect();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            let mm = m_by_name.get(name.as_str()).ok_or_else(|| {
                CheckpointError::Malformed(format!("missing optimizer moment for {name}"))
            })?;
            let vv = v_by_name.get(name.as_str()).ok_or_else(|| {
                CheckpointError::Malformed(format!("missing optimizer moment for {name}"))
            })?;
            m.push((*mm).clone());
            v.push((*vv).clone());
        }
        opt.load_state(self.t, m, v);
        Ok(())
    }
}

/// In-memory image of everything a training run needs to continue.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<(String, Data)>,
    pub buffers: Vec<(String, Data)>,
    pub g_opt: OptState,
    pub d_opt: OptState,
}

impl Checkpoint {
    /// Snapshot a live model and its optimizers.
    pub fn capture(model: &LgGan, g_opt: &Adam, d_opt: &Adam, step: u64) -> Checkpoint {
        let params = model
            .all_params()
            .into_iter()
            .map(|(n, t)| (n, t.data().clone()))
            .collect();
        let buffers = model
            .all_buffers()
            .into_iter()
            .map(|(n, t)| (n, t.data().clone()))
            .collect();
        Checkpoint {
            config: model.config.clone(),
            step,
            params,
            buffers,
            g_opt: OptState::capture(g_opt),
            d_opt: OptState::capture(d_opt),
        }
    }

    /// Rebuild the model and optimizers this checkpoint was captured from.
    pub fn restore(&self) -> Result<(LgGan, Adam, Adam), CheckpointError> {
        self.config.validate()?;
        // The seed only shapes the initial draw; every tensor is
        // overwritten below.
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let model = LgGan::new(&self.config, &mut rng);
        install_tensors(&model.all_params(), &self.params, "parameter")?;
        install_tensors(&model.all_buffers(), &self.buffers, "buffer")?;
        let cfg = &self.config;
        let mut g_opt = Adam::new(model.generator_params(), cfg.lr, cfg.beta1, cfg.beta2);
        let mut d_opt = Adam::new(model.discriminator_params(), cfg.lr, cfg.beta1, cfg.beta2);
        self.g_opt.install(&mut g_opt)?;
        self.d_opt.install(&mut d_opt)?;
        Ok((model, g_opt, d_opt))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let config_json = serde_json::to_vec(&self.config)
            .map_err(|e| CheckpointError::Malformed(format!("config serialization: {e}")))?;
        w.write_u32::<LittleEndian>(config_json.len() as u32)?;
        w.write_all(&config_json)?;
        w.write_u64::<LittleEndian>(self.step)?;
        write_blob_section(&mut w, &self.params)?;
        write_blob_section(&mut w, &self.buffers)?;
        write_opt_state(&mut w, &self.g_opt)?;
        write_opt_state(&mut w, &self.d_opt)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let json_len = r.read_u32::<LittleEndian>()? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let config: ModelConfig = serde_json::from_slice(&json)
            .map_err(|e| CheckpointError::Malformed(format!("embedded config: {e}")))?;
        let step = r.read_u64::<LittleEndian>()?;
        let params = read_blob_section(&mut r)?;
        let buffers = read_blob_section(&mut r)?;
        let g_opt = read_opt_state(&mut r)?;
        let d_opt = read_opt_state(&mut r)?;
        Ok(Checkpoint { config, step, params, buffers, g_opt, d_opt })
    }
}

/// Copy `stored` tensors into the live `targets` by name, checking shapes.
fn install_tensors(
    targets: &[(String, crate::graph::Tensor)],
    stored: &[(String, Data)],
    kind: &str,
) -> Result<(), CheckpointError> {
    let by_name: HashMap<&str, &Data> = stored.iter().map(|(n, d)| (n.as_str(), d)).collect();
    if by_name.len() != targets.len() {
        return Err(CheckpointError::Malformed(format!(
            "{kind} count mismatch: checkpoint has {}, model has {}",
            by_name.len(),
            targets.len()
        )));
    }
    for (name, tensor) in targets {
        let data = by_name.get(name.as_str()).ok_or_else(|| {
            CheckpointError::Malformed(format!("checkpoint is missing {kind} {name}"))
        })?;
        if data.shape() != tensor.shape().as_slice() {
            return Err(CheckpointError::Malformed(format!(
                "{kind} {name} has shape {:?} in the checkpoint but {:?} in the model",
                data.shape(),
                tensor.shape()
            )));
        }
        tensor.set_data((*data).clone());
    }
    Ok(())
}

fn write_blob(w: &mut impl Write, name: &str, data: &Data) -> Result<(), CheckpointError> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(data.ndim() as u32)?;
    for &d in data.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    let slice = data
        .as_slice()
        .expect("tensors are stored in standard layout");
    for &v in slice {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_blob(r: &mut impl Read) -> Result<(String, Data), CheckpointError> {
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    if name_len > 4096 {
        return Err(CheckpointError::Malformed(format!(
            "implausible name length {name_len}"
        )));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| CheckpointError::Malformed("non-utf8 tensor name".into()))?;
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    if ndim > 8 {
        return Err(CheckpointError::Malformed(format!(
            "implausible rank {ndim} for {name}"
        )));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let d = r.read_u64::<LittleEndian>()? as usize;
        numel = numel.checked_mul(d).ok_or_else(|| {
            CheckpointError::Malformed(format!("overflowing shape for {name}"))
        })?;
        dims.push(d);
    }
    let mut values = vec![0f32; numel];
    r.read_f32_into::<LittleEndian>(&mut values)?;
    let data = Data::from_shape_vec(IxDyn(&dims), values)
        .map_err(|e| CheckpointError::Malformed(format!("blob {name}: {e}")))?;
    Ok((name, data))
}

fn write_blob_section(
    w: &mut impl Write,
    blobs: &[(String, Data)],
) -> Result<(), CheckpointError> {
    w.write_u32::<LittleEndian>(blobs.len() as u32)?;
    for (name, data) in blobs {
        write_blob(w, name, data)?;
    }
    Ok(())
}

fn read_blob_section(r: &mut impl Read) -> Result<Vec<(String, Data)>, CheckpointError> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 100_000 {
        return Err(CheckpointError::Malformed(format!(
            "implausible blob count {n}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_blob(r)?);
    }
    Ok(out)
}

fn write_opt_state(w: &mut impl Write, state: &OptState) -> Result<(), CheckpointError> {
    w.write_u64::<LittleEndian>(state.t)?;
    write_blob_section(w, &state.m)?;
    write_blob_section(w, &state.v)?;
    Ok(())
}

fn read_opt_state(r: &mut impl Read) -> Result<OptState, CheckpointError> {
    let t = r.read_u64::<LittleEndian>()?;
    let m = read_blob_section(r)?;
    let v = read_blob_section(r)?;
    Ok(OptState { t, m, v })
}
