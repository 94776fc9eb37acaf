//! Model checkpoints: `b"DDCK"`, a little-endian u32 header length, a JSON
//! header, then one `DDMX` record per slot in header order. Slots are the
//! parameters followed by `bn{k}.running_mean` / `bn{k}.running_var` rows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BatchNormState, ClassifierModel, MlpArchitecture, Mode, BN_EPS};
use crate::numerics::io::{decode_binary, write_binary};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: MlpArchitecture,
    mode: Mode,
    batch_norm: BatchNormMeta,
    slots: Vec<SlotMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchNormMeta {
    momentum: f64,
    eps: f64,
    layers: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SlotMeta {
    name: String,
    rows: usize,
    cols: usize,
}

fn stat_slots(bn: &BatchNormState) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    for (k, (mean, var)) in bn.running_mean.iter().zip(&bn.running_var).enumerate() {
        out.push((format!("bn{k}.running_mean"), Matrix::row_vector(mean)));
        out.push((format!("bn{k}.running_var"), Matrix::row_vector(var)));
    }
    out
}

pub fn encode_checkpoint(model: &ClassifierModel) -> Vec<u8> {
    let stats = stat_slots(&model.batch_norm);
    let slots: Vec<(&str, &Matrix)> = model
        .params()
        .iter()
        .chain(stats.iter())
        .map(|(n, m)| (n.as_str(), m))
        .collect();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        architecture: model.architecture.clone(),
        mode: model.mode,
        batch_norm: BatchNormMeta {
            momentum: model.batch_norm.momentum,
            eps: BN_EPS,
            layers: model.batch_norm.running_mean.len(),
        },
        slots: slots
            .iter()
            .map(|(n, m)| SlotMeta {
                name: n.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in slots {
        write_binary(m, &mut out).expect("writing to a Vec cannot fail");
    }
    out
}

/// Writes the checkpoint to a temporary sibling and renames it into place.
pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ddck.partial");
    std::fs::write(&tmp, encode_checkpoint(model))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Parses a checkpoint completely before building the model, so a corrupt or
/// truncated file never yields a partial model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ClassifierModel> {
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "truncated checkpoint preamble"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "missing DDCK magic"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| Error::format(8, format!("bad header json: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            8,
            format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.format_version
            ),
        ));
    }
    let mut offset = header_end;
    let mut slots = Vec::with_capacity(header.slots.len());
    for meta in &header.slots {
        let (m, used) = decode_binary(&bytes[offset..], offset as u64)?;
        if m.shape() != (meta.rows, meta.cols) {
            return Err(Error::format(
                offset as u64,
                format!(
                    "slot {} has shape {:?}, header says {:?}",
                    meta.name,
                    m.shape(),
                    (meta.rows, meta.cols)
                ),
            ));
        }
        slots.push((meta.name.clone(), m, offset));
        offset += used;
    }
    if offset != bytes.len() {
        return Err(Error::format(offset as u64, "trailing bytes after last slot"));
    }
    let layers = header.batch_norm.layers;
    let num_params = header.architecture.param_shapes().len();
    if slots.len() != num_params + 2 * layers {
        return Err(Error::format(8, "slot count does not match the architecture"));
    }
    let stats = slots.split_off(num_params);
    let mut running_mean = Vec::with_capacity(layers);
    let mut running_var = Vec::with_capacity(layers);
    for (k, pair) in stats.chunks(2).enumerate() {
        let (mean_name, mean, at) = &pair[0];
        let (var_name, var, _) = &pair[1];
        if *mean_name != format!("bn{k}.running_mean") || *var_name != format!("bn{k}.running_var") {
            return Err(Error::format(
                *at as u64,
                format!("unexpected statistics slot {mean_name}"),
            ));
        }
        running_mean.push(mean.as_slice().to_vec());
        running_var.push(var.as_slice().to_vec());
    }
    let first_param = slots.first().map_or(header_end, |s| s.2);
    let params = slots.into_iter().map(|(n, m, _)| (n, m)).collect();
    let bn = BatchNormState {
        running_mean,
        running_var,
        momentum: header.batch_norm.momentum,
    };
    ClassifierModel::from_parts(header.architecture, params, bn, header.mode)
        .map_err(|e| Error::format(first_param as u64, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::make_gaussian_mixture;
    use crate::models::{train_classifier, TrainConfig};
    use crate::numerics::RngStream;

    fn trained() -> ClassifierModel {
        let data = make_gaussian_mixture(3, 20, 4, 0.5, &mut RngStream::new(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        train_classifier(&MlpArchitecture::relu_128_64(4, 3), &data, &cfg)
            .unwrap()
            .0
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = trained();
        let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert_eq!(back, m);
        let x = Matrix::from_fn(7, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 1.0);
        let a = m.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode_checkpoint(&trained());
        for cut in [3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let bytes = encode_checkpoint(&trained());
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        let patched = header.replacen("\"format_version\":1", "\"format_version\":9", 1);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[8 + len..]);
        assert!(matches!(decode_checkpoint(&out), Err(Error::Format { offset: 8, .. })));
    }
}
