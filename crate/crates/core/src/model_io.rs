//! Binary model container. The byte layout is documented in
//! `docs/model-format.md`; all integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::classifier::{AdaptedNetwork, Ensemble, PriorPooling};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, Layer, MaxPool2d, Network, Shape};

pub const MAGIC: &[u8; 4] = b"SCNN";
pub const VERSION: u16 = 1;

const KIND_PLAIN: u8 = 0;
const KIND_ADAPTED: u8 = 1;
const KIND_ENSEMBLE: u8 = 2;

const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_DENSE: u8 = 3;
const TAG_RELU: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Plain(Network),
    Adapted(AdaptedNetwork),
    Ensemble(Ensemble),
}

pub fn write_model<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    match model {
        Model::Plain(net) => {
            w.write_all(&[KIND_PLAIN])?;
            write_network(w, net)
        }
        Model::Adapted(a) => {
            w.write_all(&[KIND_ADAPTED])?;
            write_network(w, &a.network)?;
            write_f64(w, a.t0)?;
            write_f64(w, a.reference_ppp)?;
            w.write_all(&[match a.pooling {
                PriorPooling::PerPixel => 0,
                PriorPooling::PerMap => 1,
            }])?;
            write_vec(w, &a.prior_mean)
        }
        Model::Ensemble(e) => {
            w.write_all(&[KIND_ENSEMBLE])?;
            write_u32(w, e.members.len())?;
            for (anchor, net) in &e.members {
                write_f64(w, *anchor)?;
                write_network(w, net)?;
            }
            Ok(())
        }
    }
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    match read_u8(r)? {
        KIND_PLAIN => Ok(Model::Plain(read_network(r)?)),
        KIND_ADAPTED => {
            let network = read_network(r)?;
            let t0 = read_f64(r)?;
            let reference_ppp = read_f64(r)?;
            let pooling = match read_u8(r)? {
                0 => PriorPooling::PerPixel,
                1 => PriorPooling::PerMap,
                p => return Err(Error::Format(format!("unknown pooling code {p}"))),
            };
            let prior = read_vec(r)?;
            Ok(Model::Adapted(AdaptedNetwork::new(network, prior, t0, reference_ppp, pooling)?))
        }
        KIND_ENSEMBLE => {
            let n = read_u32(r)?;
            let members = (0..n)
                .map(|_| Ok((read_f64(r)?, read_network(r)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Model::Ensemble(Ensemble::new(members)?))
        }
        k => Err(Error::Format(format!("unknown model kind {k}"))),
    }
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    read_model(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

fn write_network<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    write_shape(w, net.input)?;
    write_u32(w, net.layers.len())?;
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => {
                w.write_all(&[TAG_CONV])?;
                write_shape(w, c.input)?;
                write_u32(w, c.out_channels)?;
                write_u32(w, c.kernel)?;
                write_vec(w, &c.weights)?;
                write_vec(w, &c.bias)?;
            }
            Layer::Pool(p) => {
                w.write_all(&[TAG_POOL])?;
                write_shape(w, p.input)?;
                write_u32(w, p.size)?;
            }
            Layer::Dense(d) => {
                w.write_all(&[TAG_DENSE])?;
                write_u32(w, d.inputs)?;
                write_u32(w, d.outputs)?;
                write_vec(w, &d.weights)?;
                write_vec(w, &d.bias)?;
            }
            Layer::Relu { len } => {
                w.write_all(&[TAG_RELU])?;
                write_u32(w, *len)?;
            }
        }
    }
    Ok(())
}

fn read_network<R: Read>(r: &mut R) -> Result<Network> {
    let input = read_shape(r)?;
    let n = read_u32(r)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let layer = match read_u8(r)? {
            TAG_CONV => {
                let input = read_shape(r)?;
                let out_channels = read_u32(r)?;
                let kernel = read_u32(r)?;
                let weights = read_vec(r)?;
                let bias = read_vec(r)?;
                if kernel == 0 || kernel > input.height || kernel > input.width {
                    return Err(Error::Format(format!("kernel {kernel} does not fit {input}")));
                }
                if weights.len() != out_channels * input.channels * kernel * kernel
                    || bias.len() != out_channels
                {
                    return Err(Error::Format("convolution tensor sizes disagree".into()));
                }
                Layer::Conv(Conv2d {
                    input,
                    out_channels,
                    kernel,
                    weights,
                    bias,
                })
            }
            TAG_POOL => Layer::Pool(MaxPool2d {
                input: read_shape(r)?,
                size: read_u32(r)?,
            }),
            TAG_DENSE => {
                let inputs = read_u32(r)?;
                let outputs = read_u32(r)?;
                let weights = read_vec(r)?;
                let bias = read_vec(r)?;
                if weights.len() != inputs * outputs || bias.len() != outputs {
                    return Err(Error::Format("dense tensor sizes disagree".into()));
                }
                Layer::Dense(Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                })
            }
            TAG_RELU => Layer::Relu { len: read_u32(r)? },
            t => return Err(Error::Format(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    Network::from_layers(input, layers)
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_shape<W: Write>(w: &mut W, s: Shape) -> Result<()> {
    write_u32(w, s.channels)?;
    write_u32(w, s.height)?;
    write_u32(w, s.width)
}

fn write_vec<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    write_u32(w, v.len())?;
    for x in v {
        write_f64(w, *x)?;
    }
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_shape<R: Read>(r: &mut R) -> Result<Shape> {
    Ok(Shape::new(read_u32(r)?, read_u32(r)?, read_u32(r)?))
}

fn read_vec<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = read_u32(r)?;
    // Cap the pre-allocation so a corrupt length cannot exhaust memory.
    let mut v = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        v.push(read_f64(r)?);
    }
    Ok(v)
}
