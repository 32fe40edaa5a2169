//! Plain-text model checkpoints.
//!
//! ```text
//! cclab-checkpoint 1
//! layers 2
//! hidden 64
//! features 5
//! classes 3
//! window 10
//! dropout 2e-1
//! feature throughput_kbps 1.2e1 9.8e1
//! ...                                   one line per input feature, in column order
//! tensor lstm.0.w_i 64 69
//! <64 lines of 69 space-separated values>
//! tensor lstm.0.b_i 1 64
//! <1 line>
//! ...                                   gates i, f, c, o for every layer
//! tensor dense.weights 3 64
//! tensor dense.bias 1 3
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip exponent formatting,
//! so a save/load cycle is bit-exact. Files are written to a sibling
//! temporary path and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use super::{Gate, LstmClassifier, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::telemetry::{Feature, FeatureRange, NormalizationStats};

const MAGIC: &str = "cclab-checkpoint 1";

/// A trained model together with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LstmClassifier,
    pub stats: NormalizationStats,
}

impl Checkpoint {
    pub fn new(model: LstmClassifier, stats: NormalizationStats) -> Result<Self> {
        if stats.len() != model.config.features {
            return Err(Error::Shape(format!(
                "model reads {} features, normalization covers {}",
                model.config.features,
                stats.len()
            )));
        }
        Ok(Self { model, stats })
    }

    pub fn to_text(&self) -> String {
        let c = &self.model.config;
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "layers {}", c.layers);
        let _ = writeln!(out, "hidden {}", c.hidden);
        let _ = writeln!(out, "features {}", c.features);
        let _ = writeln!(out, "classes {}", c.classes);
        let _ = writeln!(out, "window {}", c.window);
        let _ = writeln!(out, "dropout {:e}", c.dropout);
        for (f, r) in self.stats.features().iter().zip(self.stats.ranges()) {
            let _ = writeln!(out, "feature {} {:e} {:e}", f.name(), r.min, r.max);
        }
        for (l, layer) in self.model.params.layers.iter().enumerate() {
            for gate in Gate::ALL {
                let name = gate.short_name();
                write_matrix(&mut out, &format!("lstm.{l}.w_{name}"), layer.gate_weights(gate).rows());
                write_matrix(
                    &mut out,
                    &format!("lstm.{l}.b_{name}"),
                    layer.gate_bias(gate).insert_axis(ndarray::Axis(0)).rows(),
                );
            }
        }
        let dense = &self.model.params.dense;
        write_matrix(&mut out, "dense.weights", dense.weights.rows());
        write_matrix(
            &mut out,
            "dense.bias",
            dense.bias.view().insert_axis(ndarray::Axis(0)).rows(),
        );
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        Parser {
            lines: text.lines().enumerate(),
            origin,
        }
        .checkpoint()
    }
}

fn write_matrix<'a>(
    out: &mut String,
    name: &str,
    rows: ndarray::iter::Lanes<'a, f64, ndarray::Ix1>,
) {
    let rows: Vec<_> = rows.into_iter().collect();
    let cols = rows.first().map_or(0, |r| r.len());
    let _ = writeln!(out, "tensor {name} {} {cols}", rows.len());
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:e}");
        }
        out.push('\n');
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`. On any
/// failure the temporary file is removed and `path` is left untouched.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

struct Parser<'a, I: Iterator<Item = (usize, &'a str)>> {
    lines: I,
    origin: &'a Path,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Parser<'a, I> {
    fn fail(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.origin.to_path_buf(),
            message: format!("line {}: {}", line + 1, message.into()),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        for (n, line) in self.lines.by_ref() {
            if !line.trim().is_empty() {
                return Ok((n, line.trim()));
            }
        }
        Err(Error::Checkpoint {
            path: self.origin.to_path_buf(),
            message: "unexpected end of file".into(),
        })
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.fail(n, format!("expected `{key}`")));
        }
        Ok((n, parts.collect()))
    }

    fn usize_field(&mut self, key: &str) -> Result<usize> {
        let (n, rest) = self.keyed(key)?;
        match rest.as_slice() {
            [v] => v.parse().map_err(|_| self.fail(n, format!("bad {key} `{v}`"))),
            _ => Err(self.fail(n, format!("`{key}` takes one value"))),
        }
    }

    fn float(&self, n: usize, token: &str) -> Result<f64> {
        match token.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.fail(n, format!("bad number `{token}`"))),
        }
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let (n, rest) = self.keyed("tensor")?;
        let shape = match rest.as_slice() {
            [got, r, c] if *got == name => (r.parse::<usize>(), c.parse::<usize>()),
            _ => return Err(self.fail(n, format!("expected tensor `{name}`"))),
        };
        if shape != (Ok(rows), Ok(cols)) {
            return Err(self.fail(n, format!("tensor `{name}` should be {rows}x{cols}")));
        }
        let mut m = Array2::zeros((rows, cols));
        for r in 0..rows {
            let (n, line) = self.next_line()?;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != cols {
                return Err(self.fail(n, format!("expected {cols} values, found {}", values.len())));
            }
            for (c, token) in values.into_iter().enumerate() {
                m[[r, c]] = self.float(n, token)?;
            }
        }
        Ok(m)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        Ok(self.matrix(name, 1, len)?.row(0).to_owned())
    }

    fn checkpoint(mut self) -> Result<Checkpoint> {
        let (n, header) = self.next_line()?;
        if header != MAGIC {
            return Err(self.fail(n, "not a cclab checkpoint"));
        }
        let layers = self.usize_field("layers")?;
        let hidden = self.usize_field("hidden")?;
        let features = self.usize_field("features")?;
        let classes = self.usize_field("classes")?;
        let window = self.usize_field("window")?;
        let (n, rest) = self.keyed("dropout")?;
        let dropout = match rest.as_slice() {
            [v] => self.float(n, v)?,
            _ => return Err(self.fail(n, "`dropout` takes one value")),
        };
        let config = ModelConfig {
            layers,
            hidden,
            features,
            classes,
            window,
            dropout,
        };
        config.validate().map_err(|e| self.fail(n, e.to_string()))?;

        let mut names = Vec::with_capacity(features);
        let mut ranges = Vec::with_capacity(features);
        for _ in 0..features {
            let (n, rest) = self.keyed("feature")?;
            let [name, min, max] = rest.as_slice() else {
                return Err(self.fail(n, "`feature` takes a name, a minimum and a maximum"));
            };
            names.push(name.parse::<Feature>().map_err(|e| self.fail(n, e.to_string()))?);
            ranges.push(FeatureRange {
                min: self.float(n, min)?,
                max: self.float(n, max)?,
            });
        }
        let stats = NormalizationStats::from_parts(names, ranges).map_err(|e| Error::Checkpoint {
            path: self.origin.to_path_buf(),
            message: e.to_string(),
        })?;

        let mut params = Parameters::zeros(&config);
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let width = hidden + config.layer_input_width(l);
            for gate in Gate::ALL {
                let name = gate.short_name();
                let w = self.matrix(&format!("lstm.{l}.w_{name}"), hidden, width)?;
                let b = self.vector(&format!("lstm.{l}.b_{name}"), hidden)?;
                layer.gate_weights_mut(gate).assign(&w);
                layer.gate_bias_mut(gate).assign(&b);
            }
        }
        params.dense.weights = self.matrix("dense.weights", classes, hidden)?;
        params.dense.bias = self.vector("dense.bias", classes)?;
        let (n, tail) = self.next_line()?;
        if tail != "end" {
            return Err(self.fail(n, "expected `end`"));
        }
        Checkpoint::new(LstmClassifier::new(config, params)?, stats)
    }
}
