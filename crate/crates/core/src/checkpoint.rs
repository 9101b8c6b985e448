//! Versioned checkpoint files.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` header length,
//! a JSON header (config, step, camera, RNG position, tensor names and
//! shapes), raw `f32` payload for the generator weights and Adam moments,
//! the same for the discriminator, then the embedded morphable model.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use facetex_grad::{Adam, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MorphableModel;
use crate::networks::PerceptualExtractor;
use crate::pipeline::{ExperimentConfig, TrainState};
use crate::raster::Camera;

const MAGIC: &[u8; 8] = b"FTXCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    step: u64,
    camera: Camera,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// Decimal `u128`.
    rng_word_pos: String,
    extractor_fingerprint: u64,
    generator_opt_step: u64,
    discriminator_opt_step: u64,
    generator: Vec<TensorMeta>,
    discriminator: Vec<TensorMeta>,
}

fn metas(store: &ParamStore<f32>) -> Vec<TensorMeta> {
    store.iter().map(|(_, name, t)| TensorMeta { name: name.to_string(), shape: t.shape().to_vec() }).collect()
}

fn write_tensor(w: &mut impl Write, t: &Tensor<f32>) -> std::io::Result<()> {
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn write_group(w: &mut impl Write, store: &ParamStore<f32>, opt: &Adam) -> std::io::Result<()> {
    for (_, _, t) in store.iter() {
        write_tensor(w, t)?;
    }
    for t in opt.m.iter().chain(&opt.v) {
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, shape: &[usize]) -> Result<Tensor<f32>> {
    let n: usize = shape.iter().product();
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(Tensor::new(shape, data))
}

fn read_group(r: &mut impl Read, metas: &[TensorMeta], store: &mut ParamStore<f32>, opt: &mut Adam, step: u64) -> Result<()> {
    if metas.len() != store.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, architecture has {}", metas.len(), store.len())));
    }
    for (id, meta) in store.ids().collect::<Vec<_>>().into_iter().zip(metas) {
        if store.name(id) != meta.name || store.get(id).shape() != meta.shape.as_slice() {
            return Err(Error::Format(format!("tensor {} does not match the architecture", meta.name)));
        }
        *store.get_mut(id) = read_tensor(r, &meta.shape)?;
    }
    for moments in [&mut opt.m, &mut opt.v] {
        for (t, meta) in moments.iter_mut().zip(metas) {
            *t = read_tensor(r, &meta.shape)?;
        }
    }
    opt.step = step;
    Ok(())
}

impl TrainState {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            camera: self.camera,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            extractor_fingerprint: self.extractor.fingerprint(),
            generator_opt_step: self.generator_opt.step,
            discriminator_opt_step: self.discriminator_opt.step,
            generator: metas(&self.generator.store),
            discriminator: metas(&self.discriminator.store),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e: std::io::Error| Error::Format(format!("checkpoint write: {e}"));
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        write_group(w, &self.generator.store, &self.generator_opt).map_err(io)?;
        write_group(w, &self.discriminator.store, &self.discriminator_opt).map_err(io)?;
        self.model.write_to(w).map_err(io)?;
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(fmt)?;
        if len > 1 << 30 {
            return Err(Error::Format("implausible checkpoint header length".into()));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(fmt)?;
        let header: Header = serde_json::from_slice(&json)?;

        // The model comes last; read the payload into memory first.
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(fmt)?;
        let payload_len: usize = [&header.generator, &header.discriminator]
            .iter()
            .map(|ms| 3 * 4 * ms.iter().map(|m| m.shape.iter().product::<usize>()).sum::<usize>())
            .sum();
        if rest.len() < payload_len {
            return Err(Error::Format("truncated checkpoint payload".into()));
        }
        let model = MorphableModel::read_from(&mut &rest[payload_len..])?;
        let mut state = TrainState::new(&header.config, model, header.camera)?;
        if state.extractor.fingerprint() != header.extractor_fingerprint {
            return Err(Error::Format("perceptual extractor weights differ from the checkpoint".into()));
        }
        let mut payload = &rest[..payload_len];
        read_group(&mut payload, &header.generator, &mut state.generator.store, &mut state.generator_opt, header.generator_opt_step)?;
        read_group(
            &mut payload,
            &header.discriminator,
            &mut state.discriminator.store,
            &mut state.discriminator_opt,
            header.discriminator_opt_step,
        )?;
        let word_pos: u128 = header.rng_word_pos.parse().map_err(|_| Error::Format("bad RNG position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(header.rng_seed);
        rng.set_stream(header.rng_stream);
        rng.set_word_pos(word_pos);
        state.rng = rng;
        state.step = header.step;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}
