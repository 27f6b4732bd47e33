//! SKDM model files: magic, `u16` version, layer descriptors, then named
//! float32 parameter blobs. All integers little-endian.

use std::path::Path;

use super::{LayerSpec, Model, Param, ParamKind};
use crate::binio::{Reader, Writer};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"SKDM";
pub const MODEL_VERSION: u16 = 1;

fn write_layer(w: &mut Writer, layer: &LayerSpec) {
    let fields: Vec<usize> = match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => vec![in_channels, out_channels, kernel, stride, padding],
        LayerSpec::BatchNorm2d { features } => vec![features],
        LayerSpec::Relu | LayerSpec::Flatten => vec![],
        LayerSpec::BasicBlock {
            in_channels,
            out_channels,
            stride,
            shortcut_kernel,
        } => vec![in_channels, out_channels, stride, shortcut_kernel],
        LayerSpec::AdaptiveAvgPool2d { out_h, out_w } => vec![out_h, out_w],
        LayerSpec::Dense {
            in_features,
            out_features,
        } => vec![in_features, out_features],
    };
    let tag = match layer {
        LayerSpec::Conv2d { .. } => 0,
        LayerSpec::BatchNorm2d { .. } => 1,
        LayerSpec::Relu => 2,
        LayerSpec::BasicBlock { .. } => 3,
        LayerSpec::AdaptiveAvgPool2d { .. } => 4,
        LayerSpec::Flatten => 5,
        LayerSpec::Dense { .. } => 6,
    };
    w.u8(tag);
    for f in fields {
        w.u32(f as u32);
    }
}

fn read_layer(r: &mut Reader) -> Result<LayerSpec> {
    let tag = r.u8()?;
    let mut f = |n: usize| -> Result<Vec<usize>> { (0..n).map(|_| Ok(r.u32()? as usize)).collect() };
    Ok(match tag {
        0 => {
            let v = f(5)?;
            LayerSpec::Conv2d {
                in_channels: v[0],
                out_channels: v[1],
                kernel: v[2],
                stride: v[3],
                padding: v[4],
            }
        }
        1 => LayerSpec::BatchNorm2d { features: f(1)?[0] },
        2 => LayerSpec::Relu,
        3 => {
            let v = f(4)?;
            LayerSpec::BasicBlock {
                in_channels: v[0],
                out_channels: v[1],
                stride: v[2],
                shortcut_kernel: v[3],
            }
        }
        4 => {
            let v = f(2)?;
            LayerSpec::AdaptiveAvgPool2d { out_h: v[0], out_w: v[1] }
        }
        5 => LayerSpec::Flatten,
        6 => {
            let v = f(2)?;
            LayerSpec::Dense {
                in_features: v[0],
                out_features: v[1],
            }
        }
        t => return Err(r.corrupt(&format!("unknown layer tag {t}"))),
    })
}

impl<T: Element> Model<T> {
    /// Serialises the architecture and every parameter as float32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(MODEL_MAGIC, MODEL_VERSION);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            write_layer(&mut w, l);
        }
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u8(p.kind.code());
            w.u8(p.value.ndim() as u8);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            for &v in p.value.data() {
                w.f32(v.as_f64() as f32);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MODEL_MAGIC, MODEL_VERSION, "model file")?;
        let n_layers = r.u32()? as usize;
        if n_layers > r.remaining() {
            return Err(r.corrupt("layer count exceeds file size"));
        }
        let layers = (0..n_layers).map(|_| read_layer(&mut r)).collect::<Result<Vec<_>>>()?;
        let n_params = r.u32()? as usize;
        if n_params > r.remaining() {
            return Err(r.corrupt("parameter count exceeds file size"));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.str()?;
            let kind = ParamKind::from_code(r.u8()?).ok_or_else(|| r.corrupt("unknown parameter kind"))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| r.corrupt("parameter shape overflow"))?;
            let data = r.f32s(numel)?;
            params.push(Param {
                name,
                value: Tensor::new(shape, data.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect())?,
                kind,
            });
        }
        r.finish()?;
        Model::from_parts(layers, params)
    }
}

pub fn save_model<T: Element>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

/// Loads a model in eval mode.
pub fn load_model<T: Element>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Model::from_bytes(&std::fs::read(path)?)
}
