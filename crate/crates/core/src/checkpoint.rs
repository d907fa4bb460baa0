//! Model-stack checkpoints: a directory holding `manifest.toml` plus one
//! binary blob per network (`g_{n}.bin`, `d_{n}.bin`) and `z_star.bin`.
//!
//! Blob layout: magic `HTDG`, u32 version, u64 value count, then the values
//! as f32 little-endian. Network blobs hold every tensor in
//! [`Network::all_tensors`] order, running statistics included, so loading
//! restores scores bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgpipe::Planes;
use crate::nets::Network;
use crate::trainer::{ModelStack, StackMeta};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"HTDG";
const MANIFEST: &str = "manifest.toml";

// Generous bounds so a hostile manifest cannot request absurd allocations.
const MAX_SIDE: usize = 4096;
const MAX_SCALES: usize = 64;
const MAX_WIDTH: usize = 1024;
const MAX_IMAGES: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub trained_scales: usize,
    pub sigmas: Vec<f64>,
    /// `[channels, height, width]` of the fixed reconstruction noise.
    pub z_star_shape: [usize; 3],
    pub meta: StackMeta,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::format(MANIFEST, reason));
        if self.format != FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.format));
        }
        let meta = &self.meta;
        meta.config.validate()?;
        if meta.sizes.is_empty() || meta.sizes.len() > MAX_SCALES {
            return bad(format!("{} scales", meta.sizes.len()));
        }
        if meta.sizes.iter().flatten().any(|&s| s == 0 || s > MAX_SIDE) {
            return bad("scale size out of range".into());
        }
        if meta.channels != 1 && meta.channels != 3 {
            return bad(format!("{} channels", meta.channels));
        }
        if meta.k == 0 || meta.k > MAX_IMAGES || meta.images.len() != meta.k {
            return bad("image list does not match k".into());
        }
        if meta.config.hidden_width > MAX_WIDTH {
            return bad("hidden width out of range".into());
        }
        if meta.transforms != meta.score_transforms().len() {
            return bad("transformation count does not match the variant".into());
        }
        if self.sigmas.len() != meta.sizes.len() {
            return bad("one noise amplitude per scale".into());
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise amplitudes must be finite and nonnegative".into());
        }
        if self.z_star_shape != [meta.channels, meta.sizes[0][0], meta.sizes[0][1]] {
            return bad("z* shape does not match the coarsest scale".into());
        }
        if self.trained_scales > meta.sizes.len() {
            return bad("more trained scales than scales".into());
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = toml::from_str(text).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    m.validate()?;
    Ok(m)
}

pub fn encode_blob(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<f32>> {
    let bad = |reason: &str| Error::format("blob", reason);
    if bytes.len() < 16 {
        return Err(bad("shorter than its header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) != FORMAT_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if (body.len() / 4) as u64 != count || body.len() % 4 != 0 {
        return Err(bad("payload length does not match the value count"));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn flatten(net: &Network<f32>) -> Vec<f32> {
    net.all_tensors().into_iter().flatten().copied().collect()
}

fn fill(net: &mut Network<f32>, values: &[f32], name: &str) -> Result<()> {
    let want: usize = net.all_tensors().iter().map(|t| t.len()).sum();
    if values.len() != want {
        return Err(Error::format(
            name,
            format!("holds {} values, the network needs {want}", values.len()),
        ));
    }
    let mut rest = values;
    for t in net.all_tensors_mut() {
        let (head, tail) = rest.split_at(t.len());
        t.copy_from_slice(head);
        rest = tail;
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Reads and decodes `dir/name`, naming the file in any error.
fn read_blob(dir: &Path, name: &str) -> Result<Vec<f32>> {
    decode_blob(&read(&dir.join(name))?).map_err(|e| match e {
        Error::Format { reason, .. } => Error::format(name, reason),
        other => other,
    })
}

pub fn save_stack(stack: &ModelStack, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: FORMAT_VERSION,
        trained_scales: stack.trained_scales,
        sigmas: stack.scales.iter().map(|s| s.sigma).collect(),
        z_star_shape: [stack.z_star.channels, stack.z_star.height, stack.z_star.width],
        meta: stack.meta.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    write(&dir.join(MANIFEST), text.as_bytes())?;
    for (n, s) in stack.scales.iter().enumerate() {
        if let Some(g) = &s.generator {
            write(&dir.join(format!("g_{n}.bin")), &encode_blob(&flatten(g)))?;
        }
        write(&dir.join(format!("d_{n}.bin")), &encode_blob(&flatten(&s.discriminator)))?;
    }
    write(&dir.join("z_star.bin"), &encode_blob(&stack.z_star.data))
}

pub fn load_stack(dir: &Path) -> Result<ModelStack> {
    let text = String::from_utf8(read(&dir.join(MANIFEST))?)
        .map_err(|_| Error::format(MANIFEST, "not UTF-8"))?;
    let manifest = parse_manifest(&text)?;
    let mut stack = ModelStack::zeros(manifest.meta)?;
    stack.trained_scales = manifest.trained_scales;
    for (n, (s, &sigma)) in stack.scales.iter_mut().zip(&manifest.sigmas).enumerate() {
        s.sigma = sigma;
        if let Some(g) = s.generator.as_mut() {
            let name = format!("g_{n}.bin");
            fill(g, &read_blob(dir, &name)?, &name)?;
        }
        let name = format!("d_{n}.bin");
        fill(&mut s.discriminator, &read_blob(dir, &name)?, &name)?;
    }
    let z = read_blob(dir, "z_star.bin")?;
    let (h, w) = stack.meta.size(0);
    stack.z_star = Planes::new(stack.meta.channels, h, w, z)
        .map_err(|_| Error::format("z_star.bin", "does not match the coarsest scale"))?;
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trips_and_rejects_damage() {
        let v = vec![0.0, -1.5, f32::MIN_POSITIVE, 3.25e7];
        let b = encode_blob(&v);
        assert_eq!(b.len(), 16 + 16);
        assert_eq!(decode_blob(&b).unwrap(), v);
        assert!(decode_blob(&b[..b.len() - 2]).is_err());
        let mut wrong_magic = b.clone();
        wrong_magic[0] = b'X';
        assert!(decode_blob(&wrong_magic).is_err());
        let mut wrong_count = b;
        wrong_count[8] = 9;
        assert!(decode_blob(&wrong_count).is_err());
    }

    #[test]
    fn manifest_rejects_garbage() {
        assert!(parse_manifest("").is_err());
        assert!(parse_manifest("format = 1").is_err());
        assert!(parse_manifest("not toml at all [").is_err());
    }
}
