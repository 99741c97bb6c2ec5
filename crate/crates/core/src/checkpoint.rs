//! Plain-text checkpoint format.
//!
//! ```text
//! trend-checkpoint v1
//! config {"hidden_dim":16,...}
//! tensor w_self.0 5,16
//! <values separated by spaces>
//! ...
//! adam_step 120
//! adam_m w_self.0 5,16
//! <values>
//! adam_v w_self.0 5,16
//! <values>
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::adam::AdamState;
use crate::autodiff::ParamTensors;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::TrendParams;
use crate::tensor::Tensor;

pub const MAGIC: &str = "trend-checkpoint v1";

fn write_tensor(w: &mut impl Write, tag: &str, name: &str, t: &Tensor) -> std::io::Result<()> {
    let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "{tag} {name} {}", shape.join(","))?;
    let values: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
    writeln!(w, "{}", values.join(" "))
}

pub fn write_checkpoint(
    mut w: impl Write,
    config: &TrainConfig,
    params: &TrendParams,
) -> std::io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    let json = serde_json::to_string(config).map_err(std::io::Error::other)?;
    writeln!(w, "config {json}")?;
    let names = params.tensor_names();
    for (i, name) in names.iter().enumerate() {
        write_tensor(&mut w, "tensor", name, params.tensor(i))?;
    }
    writeln!(w, "adam_step {}", params.adam.step)?;
    for (i, name) in names.iter().enumerate() {
        write_tensor(&mut w, "adam_m", name, &params.adam.m[i])?;
        write_tensor(&mut w, "adam_v", name, &params.adam.v[i])?;
    }
    writeln!(w, "end")
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, params: &TrendParams) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, config, params).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Lines {
    lines: Vec<String>,
    pos: usize,
}

impl Lines {
    fn next(&mut self) -> Result<&str> {
        self.pos += 1;
        self.lines
            .get(self.pos - 1)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse {
                line: self.pos,
                message: "unexpected end of checkpoint".into(),
            })
    }

    fn err(&self, message: String) -> Error {
        Error::Parse {
            line: self.pos,
            message,
        }
    }

    fn tensor(&mut self, tag: &str, name: &str, expect: &[usize]) -> Result<Tensor> {
        let header = self.next()?.to_string();
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != tag || parts[1] != name {
            return Err(self.err(format!("expected `{tag} {name} <shape>`, found {header:?}")));
        }
        let shape: Vec<usize> = parts[2]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| self.err(format!("bad shape {:?}: {e}", parts[2])))?;
        if shape != expect {
            return Err(Error::Dimension(format!(
                "checkpoint tensor {name} has shape {shape:?}, config implies {expect:?}"
            )));
        }
        let data: Vec<f64> = self
            .next()?
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| self.err(format!("bad value in {name}: {e}")))?;
        Tensor::new(shape, data).map_err(|_| self.err(format!("wrong value count for {name}")))
    }
}

/// Reads a checkpoint written by [`write_checkpoint`]. Tensor shapes must
/// agree with those implied by the stored config.
pub fn read_checkpoint(r: impl BufRead) -> Result<(TrainConfig, TrendParams)> {
    let lines = r.lines().collect::<std::io::Result<Vec<_>>>().map_err(|e| Error::Parse {
        line: 0,
        message: format!("read failed: {e}"),
    })?;
    let mut lines = Lines { lines, pos: 0 };
    let magic = lines.next()?.trim().to_string();
    if magic != MAGIC {
        return Err(lines.err(format!("not a checkpoint (header {magic:?})")));
    }
    let cfg_line = lines.next()?.to_string();
    let json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| lines.err("missing config line".into()))?;
    let config: TrainConfig =
        serde_json::from_str(json).map_err(|e| lines.err(format!("bad config: {e}")))?;
    config.validate()?;

    // the first self-weight header carries the input dimension
    let input_dim = lines
        .lines
        .get(2)
        .and_then(|h| h.split_whitespace().nth(2))
        .and_then(|s| s.split(',').next())
        .and_then(|d| d.parse::<usize>().ok())
        .ok_or_else(|| Error::Parse {
            line: 3,
            message: "missing or malformed first tensor header".into(),
        })?;
    let mut params = TrendParams::init(&config, input_dim, 0)?;
    let names = params.tensor_names();
    for (i, name) in names.iter().enumerate() {
        let expect = params.tensor(i).shape().to_vec();
        *params.tensor_mut(i) = lines.tensor("tensor", name, &expect)?;
    }
    let step_line = lines.next()?.to_string();
    let step = step_line
        .strip_prefix("adam_step ")
        .and_then(|s| s.trim().parse::<u64>().ok())
        .ok_or_else(|| lines.err(format!("expected adam_step, found {step_line:?}")))?;
    let mut adam = AdamState::for_params(&params);
    adam.step = step;
    for (i, name) in names.iter().enumerate() {
        let expect = params.tensor(i).shape().to_vec();
        adam.m[i] = lines.tensor("adam_m", name, &expect)?;
        adam.v[i] = lines.tensor("adam_v", name, &expect)?;
    }
    params.adam = adam;
    if lines.next()?.trim() != "end" {
        return Err(lines.err("expected end marker".into()));
    }
    Ok((config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrendParams)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tgraph::{synth_hawkes_graph, SynthParams};
    use crate::trainer::train;

    fn trained() -> (TrainConfig, TrendParams) {
        let store = synth_hawkes_graph(&SynthParams {
            n_nodes: 8,
            horizon: 10.0,
            base_rate: 0.1,
            excitation: 0.3,
            decay: 1.0,
            seed: 1,
        })
        .unwrap();
        let c = TrainConfig {
            hidden_dim: 3,
            out_dim: 4,
            epochs: 2,
            lr: 0.01,
            per_layer_decay: true,
            ..TrainConfig::default()
        };
        let p = train(&store, &c).unwrap().params;
        (c, p)
    }

    #[test]
    fn round_trip_is_lossless() {
        let (c, p) = trained();
        assert!(p.adam.step > 0);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c, &p).unwrap();
        let (c2, p2) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(c, c2);
        assert_eq!(p, p2);
    }

    #[test]
    fn file_round_trip() {
        let (c, p) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &c, &p).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), (c, p));
        assert!(matches!(
            load_checkpoint(&dir.path().join("absent")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rejects_corruption() {
        let (c, p) = trained();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c, &p).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let bad_magic = text.replacen(MAGIC, "something else", 1);
        assert!(matches!(read_checkpoint(bad_magic.as_bytes()), Err(Error::Parse { .. })));

        let truncated = &text[..text.len() / 2];
        assert!(read_checkpoint(truncated.as_bytes()).is_err());

        let wrong_dim = text.replacen("\"out_dim\":4", "\"out_dim\":5", 1);
        assert!(matches!(read_checkpoint(wrong_dim.as_bytes()), Err(Error::Dimension(_))));
    }
}
