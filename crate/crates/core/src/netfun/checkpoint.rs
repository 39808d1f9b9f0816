//! Checkpoint layout: a UTF-8 `key = value` header terminated by a line
//! `end`, then every layer's tensors in binary record form. Per layer the
//! tensors are its parameters (see [`Layer::params`]) followed by the
//! running mean and variance of each batch-norm it contains.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::layer::{Affine, BatchNorm, Layer, LayerSpec, ResidualBlock};
use super::network::{Delta, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "robustlip-checkpoint 1";

fn spec_line(spec: &LayerSpec) -> String {
    match *spec {
        LayerSpec::Affine { input, output } => format!("affine {input} {output}"),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::Batchnorm { dim } => format!("batchnorm {dim}"),
        LayerSpec::ResidualBlock { dim } => format!("residual-block {dim}"),
        LayerSpec::Softmax => "softmax".into(),
    }
}

fn parse_spec(line: &str) -> Result<LayerSpec> {
    let mut parts = line.split_whitespace();
    let kind = parts.next().unwrap_or("");
    let nums: Vec<usize> = parts
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Format(format!("bad layer extent `{p}`")))
        })
        .collect::<Result<_>>()?;
    let spec = match (kind, nums.as_slice()) {
        ("affine", &[input, output]) => LayerSpec::Affine { input, output },
        ("relu", &[]) => LayerSpec::Relu,
        ("batchnorm", &[dim]) => LayerSpec::Batchnorm { dim },
        ("residual-block", &[dim]) => LayerSpec::ResidualBlock { dim },
        ("softmax", &[]) => LayerSpec::Softmax,
        _ => return Err(Error::Format(format!("unrecognised layer `{line}`"))),
    };
    Ok(spec)
}

fn batchnorms(layer: &Layer) -> Vec<&BatchNorm> {
    match layer {
        Layer::BatchNorm(b) => vec![b],
        Layer::Residual(r) => vec![&r.bn1, &r.bn2],
        _ => vec![],
    }
}

pub fn write_checkpoint<W: Write>(net: &Network, w: &mut W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "input_dim = {}", net.input_dim())?;
    writeln!(w, "depth = {}", net.depth())?;
    writeln!(w, "seed = {}", net.seed)?;
    for (i, layer) in net.layers().iter().enumerate() {
        writeln!(w, "layer.{} = {}", i + 1, spec_line(&layer.spec()))?;
        for (k, bn) in batchnorms(layer).iter().enumerate() {
            writeln!(w, "layer.{}.bn{}.eps = {:?}", i + 1, k + 1, bn.eps)?;
            writeln!(
                w,
                "layer.{}.bn{}.momentum = {:?}",
                i + 1,
                k + 1,
                bn.momentum
            )?;
        }
    }
    if let Some(d) = net.delta {
        writeln!(w, "delta.l2 = {:?}", d.l2)?;
        writeln!(w, "delta.linf = {:?}", d.linf)?;
    }
    if let Some(echo) = &net.config_echo {
        writeln!(w, "config_echo = {}", echo.replace('\n', " "))?;
    }
    writeln!(w, "end")?;
    for layer in net.layers() {
        for p in layer.params() {
            p.write_to(w)?;
        }
        for bn in batchnorms(layer) {
            Tensor::vector(bn.running_mean.clone()).write_to(w)?;
            Tensor::vector(bn.running_var.clone()).write_to(w)?;
        }
    }
    Ok(())
}

struct Header {
    input_dim: usize,
    seed: u64,
    specs: Vec<LayerSpec>,
    bn: Vec<(usize, usize, &'static str, f64)>,
    delta: (Option<f64>, Option<f64>),
    config_echo: Option<String>,
}

fn field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Format(format!(
            "checkpoint key `{key}` has unparsable value `{value}`"
        ))
    })
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Format("not a checkpoint (bad first line)".into()));
    }
    let mut h = Header {
        input_dim: 0,
        seed: 0,
        specs: Vec::new(),
        bn: Vec::new(),
        delta: (None, None),
        config_echo: None,
    };
    let mut depth = None;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("checkpoint header has no `end` line".into()));
        }
        let text = line.trim_end_matches(['\n', '\r']);
        if text == "end" {
            break;
        }
        let (key, value) = text
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("malformed header line `{text}`")))?;
        match key {
            "input_dim" => h.input_dim = field(key, value)?,
            "depth" => depth = Some(field::<usize>(key, value)?),
            "seed" => h.seed = field(key, value)?,
            "delta.l2" => h.delta.0 = Some(field(key, value)?),
            "delta.linf" => h.delta.1 = Some(field(key, value)?),
            "config_echo" => h.config_echo = Some(value.to_string()),
            _ if key.starts_with("layer.") => {
                let rest: Vec<&str> = key["layer.".len()..].split('.').collect();
                let l: usize = field(key, rest[0])?;
                match rest.as_slice() {
                    [_] => {
                        if l != h.specs.len() + 1 {
                            return Err(Error::Format(format!("layer {l} out of order")));
                        }
                        h.specs.push(parse_spec(value)?);
                    }
                    [_, bn, attr] if bn.starts_with("bn") => {
                        let k: usize = field(key, &bn[2..])?;
                        let attr = match *attr {
                            "eps" => "eps",
                            "momentum" => "momentum",
                            _ => return Err(Error::Format(format!("unknown key `{key}`"))),
                        };
                        h.bn.push((l, k, attr, field(key, value)?));
                    }
                    _ => return Err(Error::Format(format!("unknown key `{key}`"))),
                }
            }
            _ => return Err(Error::Format(format!("unknown key `{key}`"))),
        }
    }
    if depth != Some(h.specs.len()) {
        return Err(Error::Format(format!(
            "depth {:?} disagrees with {} layer lines",
            depth,
            h.specs.len()
        )));
    }
    Ok(h)
}

fn expect_shape(t: Tensor, shape: &[usize], layer: usize) -> Result<Tensor> {
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "layer {layer}: tensor shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Network> {
    let mut r = BufReader::new(r);
    let h = read_header(&mut r)?;
    let mut layers = Vec::with_capacity(h.specs.len());
    let mut width = h.input_dim;
    for (i, spec) in h.specs.iter().enumerate() {
        let l = i + 1;
        let mut next = |shape: &[usize]| -> Result<Tensor> {
            expect_shape(Tensor::read_from(&mut r)?, shape, l)
        };
        let out_width = spec.output_dim(width).ok_or_else(|| {
            Error::Format(format!(
                "layer {l} ({}) cannot take width {width}",
                spec.kind()
            ))
        })?;
        let layer = match *spec {
            LayerSpec::Affine { input, output } => Layer::Affine(Affine {
                weight: next(&[output, input])?,
                bias: next(&[output])?,
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Softmax => Layer::Softmax,
            LayerSpec::Batchnorm { dim } => {
                let mut bn = BatchNorm::new(dim);
                bn.gamma = next(&[dim])?;
                bn.beta = next(&[dim])?;
                bn.running_mean = next(&[dim])?.into_data();
                bn.running_var = next(&[dim])?.into_data();
                Layer::BatchNorm(bn)
            }
            LayerSpec::ResidualBlock { dim } => {
                let fc1 = Affine {
                    weight: next(&[dim, dim])?,
                    bias: next(&[dim])?,
                };
                let mut bn1 = BatchNorm::new(dim);
                bn1.gamma = next(&[dim])?;
                bn1.beta = next(&[dim])?;
                let fc2 = Affine {
                    weight: next(&[dim, dim])?,
                    bias: next(&[dim])?,
                };
                let mut bn2 = BatchNorm::new(dim);
                bn2.gamma = next(&[dim])?;
                bn2.beta = next(&[dim])?;
                for bn in [&mut bn1, &mut bn2] {
                    bn.running_mean = next(&[dim])?.into_data();
                    bn.running_var = next(&[dim])?.into_data();
                }
                Layer::Residual(ResidualBlock { fc1, bn1, fc2, bn2 })
            }
        };
        layers.push(layer);
        width = out_width;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    for &(l, k, attr, v) in &h.bn {
        let bn = layers
            .get_mut(l - 1)
            .and_then(|layer| layer.batchnorms_mut().into_iter().nth(k - 1))
            .ok_or_else(|| Error::Format(format!("layer {l} has no batch-norm {k}")))?;
        match attr {
            "eps" => bn.eps = v,
            _ => bn.momentum = v,
        }
    }
    let mut net = Network::from_layers(h.input_dim, layers)?;
    net.seed = h.seed;
    net.config_echo = h.config_echo;
    net.delta = match h.delta {
        (Some(l2), Some(linf)) => Some(Delta { l2, linf }),
        (None, None) => None,
        _ => return Err(Error::Format("delta needs both l2 and linf".into())),
    };
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_checkpoint(net, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    read_checkpoint(fs::File::open(path)?)
}
