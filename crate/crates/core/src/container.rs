//! Shared on-disk container for datasets and checkpoints.
//!
//! ```text
//! <MAGIC>\n
//! format_version=<u32>\n
//! <key>=<value>\n          (any number, order preserved)
//! payload_bytes=<n>\n
//! payload_sha256=<hex>\n
//! header_sha256=<hex>\n   (digest of every byte above this line)
//! end\n
//! <n raw payload bytes>
//! ```
//!
//! Keys are `[a-z0-9_]+`; values are single-line UTF-8. Numbers that must
//! round-trip exactly are written as the hex of their IEEE-754 bits.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const END: &str = "end";
/// Upper bound on header size; anything longer is treated as corrupt.
const MAX_HEADER: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(is_key(key) && !value.contains('\n'));
        self.entries.push((key.to_string(), value));
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Value of a required key, or a format error naming it.
    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(path, format!("missing header key `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self.require(key, path)?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("bad value `{raw}` for `{key}`")))
    }
}

fn is_key(k: &str) -> bool {
    !k.is_empty()
        && k
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

pub fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn f64_from_hex(s: &str) -> Option<f64> {
    if s.len() != 16 {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Serializes header + payload into the container byte layout.
pub fn encode(magic: &str, version: u32, header: &Header, payload: &[u8]) -> Vec<u8> {
    let mut text = format!("{magic}\nformat_version={version}\n");
    for (k, v) in &header.entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push_str(&format!("payload_bytes={}\n", payload.len()));
    text.push_str(&format!("payload_sha256={}\n", sha256_hex(payload)));
    let header_digest = sha256_hex(text.as_bytes());
    text.push_str(&format!("header_sha256={header_digest}\n"));
    text.push_str(END);
    text.push('\n');
    let mut out = text.into_bytes();
    out.extend_from_slice(payload);
    out
}

pub fn write(path: &Path, magic: &str, version: u32, header: &Header, payload: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(magic, version, header, payload)).map_err(|e| Error::io(path, e))
}

/// Parses container bytes, verifying magic, version, length and checksum.
/// The returned header excludes the bookkeeping keys.
pub fn decode(path: &Path, magic: &str, version: u32, bytes: &[u8]) -> Result<(Header, Vec<u8>)> {
    let bad = |msg: String| Error::format(path, msg);
    let magic_line = format!("{magic}\n");
    if !bytes.starts_with(magic_line.as_bytes()) {
        return Err(bad(format!("missing magic `{magic}`")));
    }
    let terminator = format!("\n{END}\n");
    let search = &bytes[..bytes.len().min(MAX_HEADER)];
    let end = search
        .windows(terminator.len())
        .position(|w| w == terminator.as_bytes())
        .ok_or_else(|| bad("header terminator not found (truncated?)".into()))?;
    let header_text = std::str::from_utf8(&bytes[magic_line.len()..end + 1])
        .map_err(|_| bad("header is not valid UTF-8".into()))?;
    let payload = &bytes[end + terminator.len()..];

    let mut entries = Vec::new();
    for line in header_text.lines() {
        let (k, v) = line
            .split_once('=')
            .filter(|(k, _)| is_key(k))
            .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        entries.push((k.to_string(), v.to_string()));
    }
    match entries.last() {
        Some((k, v)) if k == "header_sha256" => {
            let line_start = end + 1 - (k.len() + v.len() + 2);
            if *v != sha256_hex(&bytes[..line_start]) {
                return Err(bad("header checksum mismatch".into()));
            }
        }
        _ => return Err(bad("missing header checksum".into())),
    }
    let mut header = Header { entries };
    let found: u32 = header.parse("format_version", path)?;
    if found != version {
        return Err(bad(format!(
            "format version {found} not supported (expected {version})"
        )));
    }
    let expected_len: usize = header.parse("payload_bytes", path)?;
    if payload.len() != expected_len {
        return Err(bad(format!(
            "payload is {} bytes, header declares {expected_len}",
            payload.len()
        )));
    }
    let digest = header.require("payload_sha256", path)?;
    if digest != sha256_hex(payload) {
        return Err(bad("payload checksum mismatch".into()));
    }
    header
        .entries
        .retain(|(k, _)| !matches!(
            k.as_str(),
            "format_version" | "payload_bytes" | "payload_sha256" | "header_sha256"
        ));
    Ok((header, payload.to_vec()))
}

pub fn read(path: &Path, magic: &str, version: u32) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, magic, version, &bytes)
}

pub fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads `n` little-endian doubles starting at `*offset`, advancing it.
pub fn take_f64s(path: &Path, payload: &[u8], offset: &mut usize, n: usize) -> Result<Vec<f64>> {
    let end = offset
        .checked_add(n * 8)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| Error::format(path, "payload shorter than header declares"))?;
    let out = payload[*offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    *offset = end;
    Ok(out)
}
