//! Plain-text model checkpoints.
//!
//! ```text
//! ueq-checkpoint 1
//! type cnn
//! layers 3
//! layer 1 3 21 10 1 1 relu
//! weights 0.12 -0.5 ...
//! ```
//!
//! Floats use the shortest representation that parses back to the same
//! value, so a save/load round trip is exact.

use crate::cnn::{Cnn, ConvLayer, ConvLayerSpec};
use crate::volterra::VolterraSpec;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ueq-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Cnn(Cnn),
    Volterra(VolterraSpec),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Cnn(_) => "cnn",
            Model::Volterra(_) => "volterra",
        }
    }
}

fn join(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:?}").unwrap();
    }
    s
}

pub fn to_text(model: &Model) -> String {
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\ntype {}\n", model.kind());
    match model {
        Model::Cnn(cnn) => {
            writeln!(out, "layers {}", cnn.layers().len()).unwrap();
            for l in cnn.layers() {
                let s = &l.spec;
                writeln!(
                    out,
                    "layer {} {} {} {} {} {} {}",
                    s.in_channels,
                    s.out_channels,
                    s.kernel_size,
                    s.padding,
                    s.stride,
                    s.dilation,
                    if s.relu { "relu" } else { "linear" }
                )
                .unwrap();
                writeln!(out, "weights {}", join(&l.weights)).unwrap();
            }
        }
        Model::Volterra(v) => {
            writeln!(out, "memory {} {} {}", v.memory[0], v.memory[1], v.memory[2]).unwrap();
            writeln!(out, "bias {} {:?}", v.include_bias, v.bias).unwrap();
            writeln!(out, "scale {}", join(&v.feature_scale)).unwrap();
            writeln!(out, "weights {}", join(&v.weights)).unwrap();
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    /// Next non-empty line, split into its keyword and the rest.
    fn expect(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        loop {
            let (no, line) = self
                .inner
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` line")))?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                None => continue,
                Some(k) if k == key => return Ok((no + 1, parts.collect())),
                Some(k) => {
                    return Err(Error::Checkpoint(format!(
                        "line {}: expected `{key}`, found `{k}`",
                        no + 1
                    )))
                }
            }
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("line {line}: cannot parse `{s}`")))
}

fn parse_floats(line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields.iter().map(|s| parse(line, s)).collect()
}

fn arity(line: usize, fields: &[&str], n: usize) -> Result<()> {
    if fields.len() != n {
        return Err(Error::Checkpoint(format!(
            "line {line}: expected {n} fields, found {}",
            fields.len()
        )));
    }
    Ok(())
}

pub fn from_text(text: &str) -> Result<Model> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (no, head) = lines.expect(MAGIC)?;
    arity(no, &head, 1)?;
    let version: u32 = parse(no, head[0])?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let (no, kind) = lines.expect("type")?;
    arity(no, &kind, 1)?;
    let model = match kind[0] {
        "cnn" => {
            let (no, n) = lines.expect("layers")?;
            arity(no, &n, 1)?;
            let count: usize = parse(no, n[0])?;
            let mut layers = Vec::with_capacity(count);
            for _ in 0..count {
                let (no, f) = lines.expect("layer")?;
                arity(no, &f, 7)?;
                let relu = match f[6] {
                    "relu" => true,
                    "linear" => false,
                    other => return Err(Error::Checkpoint(format!("line {no}: unknown activation `{other}`"))),
                };
                let spec = ConvLayerSpec {
                    in_channels: parse(no, f[0])?,
                    out_channels: parse(no, f[1])?,
                    kernel_size: parse(no, f[2])?,
                    padding: parse(no, f[3])?,
                    stride: parse(no, f[4])?,
                    dilation: parse(no, f[5])?,
                    relu,
                };
                let (no, w) = lines.expect("weights")?;
                let weights = parse_floats(no, &w)?;
                if weights.len() != spec.weight_count() {
                    return Err(Error::Checkpoint(format!(
                        "line {no}: {} weights for a layer of {}",
                        weights.len(),
                        spec.weight_count()
                    )));
                }
                layers.push(ConvLayer { spec, weights });
            }
            Model::Cnn(Cnn::new(layers)?)
        }
        "volterra" => {
            let (no, m) = lines.expect("memory")?;
            arity(no, &m, 3)?;
            let memory = [parse(no, m[0])?, parse(no, m[1])?, parse(no, m[2])?];
            let (no, b) = lines.expect("bias")?;
            arity(no, &b, 2)?;
            let include_bias: bool = parse(no, b[0])?;
            let bias: f64 = parse(no, b[1])?;
            let (no, s) = lines.expect("scale")?;
            let feature_scale = parse_floats(no, &s)?;
            let (no, w) = lines.expect("weights")?;
            let weights = parse_floats(no, &w)?;
            let spec = VolterraSpec {
                memory,
                weights,
                include_bias,
                bias,
                feature_scale,
            };
            spec.validate()
                .map_err(|e| Error::Checkpoint(format!("inconsistent Volterra model: {e}")))?;
            Model::Volterra(spec)
        }
        other => return Err(Error::Checkpoint(format!("line {no}: unknown model type `{other}`"))),
    };
    for (no, line) in lines.inner {
        if !line.trim().is_empty() {
            return Err(Error::Checkpoint(format!("line {}: trailing content", no + 1)));
        }
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_text(&std::fs::read_to_string(path)?)
}
