//! Checkpoint files.
//!
//! Layout: a UTF-8 text header of `key = value` lines, one `tensor <name>
//! <rows> <cols>` line per parameter tensor in declaration order, and a line
//! `end`. The payload follows immediately: every tensor's values as
//! little-endian `f64`, row-major, in the order the header lists them.
//!
//! ```text
//! hdc-checkpoint 1
//! levels = 2
//! input_dim = 32
//! block_layers = 64;64,32
//! embed_dim = 16,16
//! lambda = 1.0,1.0
//! hard_fraction = 100.0,50.0
//! margin = 1.0
//! seed = 7
//! tensor block1.layer1.weight 32 64
//! tensor block1.layer1.bias 1 64
//! ...
//! end
//! <payload>
//! ```
//!
//! `block_layers` separates levels with `;` and widths within a level with `,`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::cascade::{CascadeConfig, CascadeModel, ParamSet};
use crate::error::{HdcError, Result};

const MAGIC: &str = "hdc-checkpoint 1";
const HEADER_END: &[u8] = b"\nend\n";

fn join<T: std::fmt::Debug>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn encode_checkpoint(model: &CascadeModel) -> Vec<u8> {
    let c = &model.config;
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("levels = {}\n", c.levels));
    header.push_str(&format!("input_dim = {}\n", c.input_dim));
    let blocks: Vec<String> = c.block_layers.iter().map(|w| join(w)).collect();
    header.push_str(&format!("block_layers = {}\n", blocks.join(";")));
    header.push_str(&format!("embed_dim = {}\n", join(&c.embed_dim)));
    header.push_str(&format!("lambda = {}\n", join(&c.lambda)));
    header.push_str(&format!("hard_fraction = {}\n", join(&c.hard_fraction)));
    header.push_str(&format!("margin = {:?}\n", c.margin));
    header.push_str(&format!("seed = {}\n", c.seed));
    let tensors = model.params.tensors();
    for t in &tensors {
        header.push_str(&format!("tensor {} {} {}\n", t.name, t.shape.0, t.shape.1));
    }
    header.push_str("end\n");

    let mut bytes = header.into_bytes();
    for t in &tensors {
        for v in t.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn malformed(msg: impl Into<String>) -> HdcError {
    HdcError::MalformedCheckpoint(msg.into())
}

fn parse_list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| malformed(format!("bad value {s:?} for {key}")))
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| malformed(format!("bad value {raw:?} for {key}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CascadeModel> {
    let split = bytes
        .windows(HEADER_END.len())
        .position(|w| w == HEADER_END)
        .ok_or_else(|| malformed("header terminator not found"))?;
    let header =
        std::str::from_utf8(&bytes[..split]).map_err(|_| malformed("header is not valid UTF-8"))?;
    let payload = &bytes[split + HEADER_END.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(malformed("missing magic line"));
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut tensors: Vec<(String, (usize, usize))> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(malformed(format!("bad tensor line {line:?}")));
            };
            tensors.push((
                name.to_string(),
                (parse_scalar("rows", rows)?, parse_scalar("cols", cols)?),
            ));
        } else if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim(), v.trim());
        } else {
            return Err(malformed(format!("unrecognized header line {line:?}")));
        }
    }
    let get = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| malformed(format!("missing header field {key}")))
    };
    let block_layers = get("block_layers")?
        .split(';')
        .map(|level| parse_list::<usize>("block_layers", level))
        .collect::<Result<Vec<_>>>()?;
    let config = CascadeConfig {
        levels: parse_scalar("levels", get("levels")?)?,
        input_dim: parse_scalar("input_dim", get("input_dim")?)?,
        block_layers,
        embed_dim: parse_list("embed_dim", get("embed_dim")?)?,
        lambda: parse_list("lambda", get("lambda")?)?,
        hard_fraction: parse_list("hard_fraction", get("hard_fraction")?)?,
        margin: parse_scalar("margin", get("margin")?)?,
        seed: parse_scalar("seed", get("seed")?)?,
    };
    config.validate()?;

    let mut params = ParamSet::zeros(&config);
    let expected: Vec<(String, (usize, usize))> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected.len() != tensors.len() {
        return Err(malformed(format!(
            "header lists {} tensors, config implies {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((exp_name, exp_shape), (name, shape)) in expected.iter().zip(&tensors) {
        if exp_name != name {
            return Err(malformed(format!(
                "expected tensor {exp_name}, found {name}"
            )));
        }
        if exp_shape != shape {
            return Err(HdcError::CheckpointShape {
                name: name.clone(),
                expected: *exp_shape,
                found: *shape,
            });
        }
    }
    let count = params.len();
    if payload.len() != count * 8 {
        return Err(malformed(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * 8
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(malformed("non-finite parameter in payload"));
    }
    params.assign_flat(&flat)?;
    Ok(CascadeModel { config, params })
}

pub fn save_checkpoint(model: &CascadeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| HdcError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CascadeModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HdcError::io(path, e))?;
    decode_checkpoint(&bytes)
}
