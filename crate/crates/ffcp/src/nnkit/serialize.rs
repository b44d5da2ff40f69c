//! Versioned text serialization for models.
//!
//! Line-oriented format, version `v1`:
//!
//! ```text
//! ffcp-model v1
//! output regression 1         (or: quantile_pair | logits <K>)
//! split <index>
//! layers <count>
//! layer <in> <out> <activation>
//! bias <out numbers>
//! row <in numbers>            (one line per weight row, out lines)
//! ...repeated per layer...
//! ```
//!
//! Numbers are written with Rust's shortest round-trip `f64` formatting, so a
//! save/load cycle reproduces the model bit-exactly.

use std::fs;
use std::path::Path;

use super::{Activation, Layer, MlpModel, OutputKind};
use crate::error::{Error, Result};

impl MlpModel {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("ffcp-model v1\n");
        match self.output_kind {
            OutputKind::Regression { dim } => out.push_str(&format!("output regression {dim}\n")),
            OutputKind::QuantilePair => out.push_str("output quantile_pair\n"),
            OutputKind::Logits { classes } => out.push_str(&format!("output logits {classes}\n")),
        }
        out.push_str(&format!("split {}\n", self.split_index));
        out.push_str(&format!("layers {}\n", self.layers.len()));
        for layer in &self.layers {
            out.push_str(&format!(
                "layer {} {} {}\n",
                layer.in_dim,
                layer.out_dim,
                layer.activation.name()
            ));
            out.push_str("bias");
            for b in &layer.bias {
                out.push_str(&format!(" {b}"));
            }
            out.push('\n');
            for o in 0..layer.out_dim {
                out.push_str("row");
                for w in layer.weight_row(o) {
                    out.push_str(&format!(" {w}"));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::ModelFormat(format!("missing {what} line")))
        };

        let header = next("header")?;
        if header != "ffcp-model v1" {
            return Err(Error::ModelFormat(format!("unknown header {header:?}")));
        }

        let output_line = next("output")?;
        let mut parts = output_line.split_whitespace();
        if parts.next() != Some("output") {
            return Err(Error::ModelFormat("expected output line".into()));
        }
        let output_kind = match parts.next() {
            Some("regression") => OutputKind::Regression {
                dim: parse_usize(parts.next(), "regression dim")?,
            },
            Some("quantile_pair") => OutputKind::QuantilePair,
            Some("logits") => OutputKind::Logits {
                classes: parse_usize(parts.next(), "logits classes")?,
            },
            other => return Err(Error::ModelFormat(format!("unknown output kind {other:?}"))),
        };

        let split_index = parse_tagged(next("split")?, "split")?;
        let n_layers = parse_tagged(next("layers")?, "layers")?;

        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let decl = next("layer")?;
            let mut parts = decl.split_whitespace();
            if parts.next() != Some("layer") {
                return Err(Error::ModelFormat(format!("expected layer line, got {decl:?}")));
            }
            let in_dim = parse_usize(parts.next(), "layer in dim")?;
            let out_dim = parse_usize(parts.next(), "layer out dim")?;
            let activation = match parts.next() {
                Some("relu") => Activation::Relu,
                Some("identity") => Activation::Identity,
                other => {
                    return Err(Error::ModelFormat(format!("unknown activation {other:?}")))
                }
            };
            let bias = parse_numbers(next("bias")?, "bias", out_dim)?;
            let mut weights = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..out_dim {
                weights.extend(parse_numbers(next("row")?, "row", in_dim)?);
            }
            layers.push(Layer {
                weights,
                bias,
                activation,
                in_dim,
                out_dim,
            });
        }

        // Reuse the constructor checks (dimension chain, split range, output).
        let dims: Vec<usize> = std::iter::once(layers[0].in_dim)
            .chain(layers.iter().map(|l| l.out_dim))
            .collect();
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::ModelFormat(format!(
                    "layer dims {} -> {} incompatible",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        let acts: Vec<Activation> = layers.iter().map(|l| l.activation).collect();
        let template = super::mlp_init(&dims, &acts, split_index, output_kind, 0)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let mut model = template;
        model.layers = layers;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

fn parse_usize(tok: Option<&str>, what: &str) -> Result<usize> {
    tok.ok_or_else(|| Error::ModelFormat(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::ModelFormat(format!("bad {what}")))
}

fn parse_tagged(line: &str, tag: &str) -> Result<usize> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(Error::ModelFormat(format!("expected {tag} line, got {line:?}")));
    }
    parse_usize(parts.next(), tag)
}

fn parse_numbers(line: &str, tag: &str, expect: usize) -> Result<Vec<f64>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(Error::ModelFormat(format!("expected {tag} line, got {line:?}")));
    }
    let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
    let vals = vals.map_err(|_| Error::ModelFormat(format!("bad number in {tag} line")))?;
    if vals.len() != expect {
        return Err(Error::ModelFormat(format!(
            "{tag} line has {} numbers, expected {expect}",
            vals.len()
        )));
    }
    Ok(vals)
}
