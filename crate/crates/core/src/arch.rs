//! Declarative network architecture: layer list, input shape, feature taps.
//!
//! The text format is one layer per line, `<index> <kind> key=value...`,
//! plus an `input CxHxW` line and a `taps i,j,...` line. Layer indices are
//! 1-based and consecutive. The bundled default config describes the
//! 23-layer reference network.

use crate::error::{Error, Result};
use crate::layers::LrnParams;
use crate::tensor::Shape;

/// Text of the bundled default architecture.
pub const DEFAULT_ARCH: &str = include_str!("default_arch.cfg");

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Lrn(LrnParams),
    Fc {
        out: usize,
    },
    Dropout {
        rate: f32,
    },
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Lrn(_) => "lrn",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    /// 1-based index, matching the numbering used in configs and errors.
    pub index: usize,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    /// Tap indices, ascending; each must name an fc layer.
    pub taps: Vec<usize>,
}

impl ArchSpec {
    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        self.layers.get(index.checked_sub(1)?)
    }

    /// Indices of all fully connected layers, ascending.
    pub fn fc_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Fc { .. }))
            .map(|l| l.index)
            .collect()
    }

    /// Index of the first fully connected layer, if any.
    pub fn first_fc_index(&self) -> Option<usize> {
        self.fc_indices().first().copied()
    }
}

/// Parse the bundled default architecture. Infallible by construction.
pub fn default_arch() -> ArchSpec {
    parse_arch(DEFAULT_ARCH).expect("bundled default config is valid")
}

struct KvLine<'a> {
    line_no: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> KvLine<'a> {
    fn parse(line_no: usize, tokens: &[&'a str]) -> Result<KvLine<'a>> {
        let mut pairs = Vec::new();
        for tok in tokens {
            let (key, value) = tok.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected key=value, got {tok:?}"),
            })?;
            pairs.push((key, value));
        }
        Ok(KvLine { line_no, pairs })
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(pos) = self.pairs.iter().position(|(k, _)| *k == key) else {
            return Ok(None);
        };
        let (_, value) = self.pairs.remove(pos);
        value.parse::<T>().map(Some).map_err(|_| Error::Parse {
            line: self.line_no,
            msg: format!("invalid value {value:?} for {key}"),
        })
    }

    fn require<T: std::str::FromStr>(&mut self, key: &str, kind: &str) -> Result<T> {
        self.take(key)?.ok_or_else(|| Error::Parse {
            line: self.line_no,
            msg: format!("{kind} layer is missing required param {key}"),
        })
    }

    fn finish(self) -> Result<()> {
        if let Some((key, _)) = self.pairs.first() {
            return Err(Error::Parse {
                line: self.line_no,
                msg: format!("unknown param {key:?}"),
            });
        }
        Ok(())
    }
}

/// Parse an architecture config. Blank lines and `#` comments are skipped.
pub fn parse_arch(text: &str) -> Result<ArchSpec> {
    let mut input: Option<(usize, Shape)> = None;
    let mut taps: Option<(usize, Vec<usize>)> = None;
    let mut layers: Vec<LayerSpec> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "input" => {
                if tokens.len() != 2 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "input expects one CxHxW value".into(),
                    });
                }
                let dims: Vec<usize> = tokens[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("invalid input shape {:?}", tokens[1]),
                    })?;
                let shape = Shape::new(&dims).map_err(|e| Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?;
                input = Some((line_no, shape));
            }
            "taps" => {
                if tokens.len() != 2 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "taps expects one comma list".into(),
                    });
                }
                let list: Vec<usize> = tokens[1]
                    .split(',')
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("invalid tap list {:?}", tokens[1]),
                    })?;
                taps = Some((line_no, list));
            }
            first => {
                let index: usize = first.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("expected a layer index or directive, got {first:?}"),
                })?;
                if index != layers.len() + 1 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!(
                            "layer index {index} out of order (expected {})",
                            layers.len() + 1
                        ),
                    });
                }
                if tokens.len() < 2 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "missing layer kind".into(),
                    });
                }
                let mut kv = KvLine::parse(line_no, &tokens[2..])?;
                let kind = match tokens[1] {
                    "conv" => LayerKind::Conv {
                        out: kv.require("out", "conv")?,
                        kernel: kv.require("k", "conv")?,
                        stride: kv.require("s", "conv")?,
                        pad: kv.take("p")?.unwrap_or(0),
                    },
                    "relu" => LayerKind::Relu,
                    "maxpool" => LayerKind::MaxPool {
                        kernel: kv.require("k", "maxpool")?,
                        stride: kv.require("s", "maxpool")?,
                    },
                    "lrn" => {
                        let d = LrnParams::default();
                        LayerKind::Lrn(
                            LrnParams::new(
                                kv.take("k")?.unwrap_or(d.k),
                                kv.take("n")?.unwrap_or(d.n),
                                kv.take("alpha")?.unwrap_or(d.alpha),
                                kv.take("beta")?.unwrap_or(d.beta),
                            )
                            .map_err(|e| Error::Parse {
                                line: line_no,
                                msg: e.to_string(),
                            })?,
                        )
                    }
                    "fc" => LayerKind::Fc {
                        out: kv.require("out", "fc")?,
                    },
                    "dropout" => {
                        let rate: f32 = kv.take("rate")?.unwrap_or(0.5);
                        if !(0.0..1.0).contains(&rate) {
                            return Err(Error::Parse {
                                line: line_no,
                                msg: format!("dropout rate must be in [0, 1), got {rate}"),
                            });
                        }
                        LayerKind::Dropout { rate }
                    }
                    "softmax" => LayerKind::Softmax,
                    other => {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("unknown layer kind {other:?}"),
                        })
                    }
                };
                kv.finish()?;
                if let LayerKind::Conv {
                    out,
                    kernel,
                    stride,
                    ..
                } = kind
                {
                    if out == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: "conv out, k, and s must be positive".into(),
                        });
                    }
                }
                layers.push(LayerSpec { index, kind });
            }
        }
    }

    let (_, input) = input.ok_or(Error::Parse {
        line: 0,
        msg: "missing input line".into(),
    })?;
    if layers.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "config declares no layers".into(),
        });
    }
    // Softmax may only close the network.
    for l in &layers[..layers.len() - 1] {
        if matches!(l.kind, LayerKind::Softmax) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("softmax at layer {} must be the final layer", l.index),
            });
        }
    }
    let (taps_line, mut taps) = taps.unwrap_or((0, Vec::new()));
    taps.sort_unstable();
    taps.dedup();
    for &t in &taps {
        let ok = matches!(
            layers.get(t.wrapping_sub(1)).map(|l| &l.kind),
            Some(LayerKind::Fc { .. })
        );
        if !ok {
            return Err(Error::Parse {
                line: taps_line,
                msg: format!("tap {t} does not name an fc layer"),
            });
        }
    }
    Ok(ArchSpec {
        input,
        layers,
        taps,
    })
}

/// Render a spec back to config text. `parse_arch(print_arch(s)) == s`.
pub fn print_arch(spec: &ArchSpec) -> String {
    let mut out = String::new();
    out.push_str(&format!("input {}\n", spec.input));
    if !spec.taps.is_empty() {
        let taps: Vec<String> = spec.taps.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!("taps {}\n", taps.join(",")));
    }
    for l in &spec.layers {
        let line = match &l.kind {
            LayerKind::Conv {
                out: o,
                kernel,
                stride,
                pad,
            } => {
                format!("{} conv out={o} k={kernel} s={stride} p={pad}", l.index)
            }
            LayerKind::Relu => format!("{} relu", l.index),
            LayerKind::MaxPool { kernel, stride } => {
                format!("{} maxpool k={kernel} s={stride}", l.index)
            }
            LayerKind::Lrn(p) => {
                format!(
                    "{} lrn k={} n={} alpha={} beta={}",
                    l.index, p.k, p.n, p.alpha, p.beta
                )
            }
            LayerKind::Fc { out: o } => format!("{} fc out={o}", l.index),
            LayerKind::Dropout { rate } => format!("{} dropout rate={rate}", l.index),
            LayerKind::Softmax => format!("{} softmax", l.index),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Output shape of every layer, in order. Errors name the offending layer.
pub fn infer_shapes(spec: &ArchSpec) -> Result<Vec<Shape>> {
    let mut shapes = Vec::with_capacity(spec.layers.len());
    let mut cur = spec.input.clone();
    for l in &spec.layers {
        let idx = l.index;
        let next = match &l.kind {
            LayerKind::Conv {
                out,
                kernel,
                stride,
                pad,
            } => {
                let d = require_map(&cur, idx, "conv")?;
                let oh = window_out(d[1], *kernel, *stride, *pad)
                    .ok_or_else(|| layer_err(idx, "conv kernel exceeds padded input"))?;
                let ow = window_out(d[2], *kernel, *stride, *pad)
                    .ok_or_else(|| layer_err(idx, "conv kernel exceeds padded input"))?;
                Shape::map(*out, oh, ow).map_err(|e| layer_err(idx, &e.to_string()))?
            }
            LayerKind::MaxPool { kernel, stride } => {
                let d = require_map(&cur, idx, "maxpool")?;
                let oh = window_out(d[1], *kernel, *stride, 0)
                    .ok_or_else(|| layer_err(idx, "pool window exceeds input"))?;
                let ow = window_out(d[2], *kernel, *stride, 0)
                    .ok_or_else(|| layer_err(idx, "pool window exceeds input"))?;
                Shape::map(d[0], oh, ow).map_err(|e| layer_err(idx, &e.to_string()))?
            }
            LayerKind::Lrn(_) => {
                require_map(&cur, idx, "lrn")?;
                cur.clone()
            }
            LayerKind::Relu | LayerKind::Dropout { .. } => cur.clone(),
            LayerKind::Fc { out } => {
                // An fc layer flattens whatever precedes it.
                Shape::vector(*out).map_err(|e| layer_err(idx, &e.to_string()))?
            }
            LayerKind::Softmax => {
                if cur.rank() != 1 {
                    return Err(layer_err(idx, "softmax requires a vector input"));
                }
                cur.clone()
            }
        };
        shapes.push(next.clone());
        cur = next;
    }
    Ok(shapes)
}

/// Input shape seen by each layer (the previous layer's output).
pub fn layer_inputs(spec: &ArchSpec) -> Result<Vec<Shape>> {
    let outs = infer_shapes(spec)?;
    let mut ins = Vec::with_capacity(outs.len());
    ins.push(spec.input.clone());
    ins.extend(outs[..outs.len() - 1].iter().cloned());
    Ok(ins)
}

fn require_map<'a>(shape: &'a Shape, idx: usize, kind: &str) -> Result<&'a [usize]> {
    if shape.rank() != 3 {
        return Err(layer_err(
            idx,
            &format!("{kind} requires a rank-3 input, got {shape}"),
        ));
    }
    Ok(shape.dims())
}

fn window_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn layer_err(idx: usize, msg: &str) -> Error {
    Error::Shape(format!("layer {idx}: {msg}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_has_23_layers_in_order() {
        let spec = default_arch();
        assert_eq!(spec.layers.len(), 23);
        let kinds: Vec<&str> = spec.layers.iter().map(|l| l.kind.name()).collect();
        assert_eq!(
            kinds,
            vec![
                "conv", "relu", "maxpool", "lrn", "conv", "relu", "maxpool", "lrn", "conv", "relu",
                "conv", "relu", "conv", "relu", "maxpool", "fc", "relu", "dropout", "fc", "relu",
                "dropout", "fc", "softmax"
            ]
        );
        assert_eq!(spec.taps, vec![16, 19, 22]);
        assert_eq!(spec.input.dims(), &[3, 227, 227]);
    }

    #[test]
    fn tap_on_conv_layer_is_rejected() {
        let text = "input 1x8x8\ntaps 1\n1 conv out=2 k=3 s=1 p=0\n2 fc out=4\n";
        match parse_arch(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("tap 1"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_structural_identity() {
        let spec = default_arch();
        let printed = print_arch(&spec);
        let reparsed = parse_arch(&printed).unwrap();
        assert_eq!(spec, reparsed);
    }

    #[test]
    fn unknown_kind_and_missing_param_report_line() {
        let bad_kind = "input 1x4x4\n1 wiggle out=2\n";
        match parse_arch(bad_kind) {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("wiggle")),
            other => panic!("unexpected {other:?}"),
        }
        let missing = "input 1x4x4\n1 conv k=3 s=1\n";
        match parse_arch(missing) {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("out")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn default_shape_chain() {
        let spec = default_arch();
        let shapes = infer_shapes(&spec).unwrap();
        assert_eq!(shapes[0].dims(), &[96, 55, 55]);
        assert_eq!(shapes[2].dims(), &[96, 27, 27]);
        assert_eq!(shapes[4].dims(), &[256, 27, 27]);
        assert_eq!(shapes[6].dims(), &[256, 13, 13]);
        assert_eq!(shapes[8].dims(), &[384, 13, 13]);
        assert_eq!(shapes[10].dims(), &[384, 13, 13]);
        assert_eq!(shapes[12].dims(), &[256, 13, 13]);
        assert_eq!(shapes[14].dims(), &[256, 6, 6]);
        assert_eq!(shapes[14].len(), 9216);
        assert_eq!(shapes[15].dims(), &[4096]);
        assert_eq!(shapes[18].dims(), &[4096]);
        assert_eq!(shapes[21].dims(), &[1000]);
    }

    #[test]
    fn widened_middle_fc_shifts_tap_lengths() {
        // fc19 widened to 6144 makes the 16+19 tap pair 4096 + 6144 = 10240.
        let mut spec = default_arch();
        for layer in &mut spec.layers {
            if layer.index == 19 {
                layer.kind = LayerKind::Fc { out: 6144 };
            }
        }
        let shapes = infer_shapes(&spec).unwrap();
        assert_eq!(shapes[15].len(), 4096);
        assert_eq!(shapes[18].len(), 6144);
        assert_eq!(shapes[15].len() + shapes[18].len(), 10240);
    }

    #[test]
    fn tiny_input_breaks_at_pool_layer_3() {
        let mut spec = default_arch();
        spec.input = Shape::map(3, 11, 11).unwrap();
        match infer_shapes(&spec) {
            Err(Error::Shape(msg)) => assert!(msg.starts_with("layer 3:"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_must_be_last() {
        let text = "input 1x4x4\n1 softmax\n2 fc out=3\n";
        assert!(parse_arch(text).is_err());
    }
}
