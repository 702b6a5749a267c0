//! Checkpoint files: architecture header plus little-endian `f64` payload,
//! one block per parameter group in encoder, classifier, detector order.

use std::path::Path;

use crate::container::{self, f64_from_hex, f64_to_hex, Header};
use crate::error::{Error, Result};
use crate::network::{init_params, ArchConfig, Group, ModelParams};

pub const MAGIC: &str = "MDMT-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Epoch (0-based) the parameters were captured after.
    pub epoch: usize,
    pub val_auc: f64,
    pub config_hash: String,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut h = Header::new();
    h.push(
        "arch",
        serde_json::to_string(&ckpt.params.arch).expect("arch serializes"),
    );
    h.push("config_hash", &ckpt.config_hash);
    h.push("epoch", ckpt.epoch);
    h.push("val_auc", f64_to_hex(ckpt.val_auc));
    let mut payload = Vec::new();
    for group in Group::ALL {
        let pg = ckpt.params.group(group);
        h.push(&format!("{}_values", group.name()), pg.count());
        for t in &pg.tensors {
            container::push_f64s(&mut payload, t.data());
        }
    }
    container::encode(MAGIC, FORMAT_VERSION, &h, &payload)
}

pub fn write(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let (h, payload) = container::read(path, MAGIC, FORMAT_VERSION)?;
    let arch: ArchConfig = serde_json::from_str(h.require("arch", path)?)
        .map_err(|e| Error::format(path, format!("bad arch header: {e}")))?;
    arch.validate()
        .map_err(|e| Error::format(path, format!("invalid arch in header: {e}")))?;
    let raw_auc = h.require("val_auc", path)?;
    let val_auc =
        f64_from_hex(raw_auc).ok_or_else(|| Error::format(path, format!("bad val_auc `{raw_auc}`")))?;
    // Tensor shapes come from the architecture; the payload only fills them.
    let mut params = init_params(&arch)?;
    let mut offset = 0;
    for group in Group::ALL {
        let declared: usize = h.parse(&format!("{}_values", group.name()), path)?;
        let pg = params.group_mut(group);
        if declared != pg.count() {
            return Err(Error::format(
                path,
                format!(
                    "{} group holds {declared} values, arch needs {}",
                    group.name(),
                    pg.count()
                ),
            ));
        }
        for t in &mut pg.tensors {
            let vals = container::take_f64s(path, &payload, &mut offset, t.len())?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(path, "non-finite parameter value"));
            }
            t.data_mut().copy_from_slice(&vals);
        }
    }
    if offset != payload.len() {
        return Err(Error::format(path, "trailing bytes after parameter payload"));
    }
    Ok(Checkpoint {
        params,
        epoch: h.parse("epoch", path)?,
        val_auc,
        config_hash: h.require("config_hash", path)?.to_string(),
    })
}
