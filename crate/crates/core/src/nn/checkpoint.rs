//! MLP1 model checkpoints.
//!
//! Layout (little-endian): magic `MLP1`, version u32, layer count u32, then
//! per layer `out u32, in u32, weights (row-major f32), biases (f32)`.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{LayerParams, MlpModel, NnError};
use crate::codec::{ByteReader, ByteWriter, CodecError};

pub const MLP1_MAGIC: &[u8; 4] = b"MLP1";
pub const MLP1_VERSION: u32 = 1;

pub fn write_mlp1(model: &MlpModel<f32>) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(12 + 4 * model.num_parameters() + 8 * model.layers().len());
    w.bytes(MLP1_MAGIC);
    w.u32(MLP1_VERSION);
    w.u32(model.layers().len() as u32);
    for layer in model.layers() {
        w.u32(layer.out_dim() as u32);
        w.u32(layer.in_dim() as u32);
        // Standard-layout arrays iterate in row-major order.
        for v in layer.weights.iter() {
            w.bytes(&v.to_le_bytes());
        }
        for v in layer.biases.iter() {
            w.bytes(&v.to_le_bytes());
        }
    }
    w.into_inner()
}

pub fn read_mlp1(bytes: &[u8]) -> Result<MlpModel<f32>, NnError> {
    let mut r = ByteReader::new(bytes);
    let model = read_mlp1_from(&mut r)?;
    r.finish()?;
    Ok(model)
}

pub(crate) fn read_mlp1_from(r: &mut ByteReader<'_>) -> Result<MlpModel<f32>, NnError> {
    r.magic(MLP1_MAGIC)?;
    r.version(MLP1_VERSION)?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let out = r.u32()? as usize;
        let inp = r.u32()? as usize;
        let n = out
            .checked_mul(inp)
            .ok_or_else(|| CodecError::Invalid(format!("layer {out}x{inp} too large")))?;
        let weights = Array2::from_shape_vec((out, inp), r.finite_f32s(n)?)
            .map_err(|e| CodecError::Invalid(e.to_string()))?;
        let biases = Array1::from_vec(r.finite_f32s(out)?);
        layers.push(LayerParams { weights, biases });
    }
    MlpModel::from_layers(layers)
}

impl MlpModel<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        std::fs::write(path, write_mlp1(self))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        read_mlp1(&std::fs::read(path)?)
    }
}
