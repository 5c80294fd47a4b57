//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` (format version, the generating
//! [`DatasetSpec`], and a scene index) plus one `scene_NNNNN.bin` blob per
//! scene. Blob layout, all integers and floats little-endian:
//!
//! ```text
//! magic      4 bytes  "MDSC"
//! version    u32      1
//! id         u64
//! size       u32      image side length S
//! pixels     f64 × S·S, row-major
//! n_objects  u32
//! object*    class u32, flags u8 (bit 0 jittered, bit 1 occluded),
//!            label box f64 × 4 (x, y, w, h),
//!            rendered box f64 × 4 (x, y, w, h)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSpec, Scene, SceneObject};
use crate::bbox::BoundingBox;
use crate::error::{MdalError, Result};

pub const SCENE_MAGIC: &[u8; 4] = b"MDSC";
pub const SCENE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: String,
    pub n_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub scenes: Vec<ManifestEntry>,
}

fn format_err(path: &str, detail: impl Into<String>) -> MdalError {
    MdalError::Format {
        path: path.to_string(),
        detail: detail.into(),
    }
}

pub fn scene_file_name(id: usize) -> String {
    format!("scene_{id:05}.bin")
}

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + scene.image.len() * 8 + scene.objects.len() * 69);
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scene.id as u64).to_le_bytes());
    buf.extend_from_slice(&(scene.size as u32).to_le_bytes());
    for v in &scene.image {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(scene.objects.len() as u32).to_le_bytes());
    for o in &scene.objects {
        buf.extend_from_slice(&(o.class as u32).to_le_bytes());
        buf.push(u8::from(o.jittered) | (u8::from(o.occluded) << 1));
        for b in [&o.bbox, &o.rendered] {
            for v in [b.x, b.y, b.w, b.h] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format_err(self.path, "unexpected end of scene blob"));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bbox(&mut self) -> Result<BoundingBox> {
        Ok(BoundingBox::new(self.f64()?, self.f64()?, self.f64()?, self.f64()?))
    }
}

pub fn decode_scene(bytes: &[u8], path: &str) -> Result<Scene> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != SCENE_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != SCENE_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let id = c.u64()? as usize;
    let size = c.u32()? as usize;
    let image = (0..size * size).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let n = c.u32()? as usize;
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let class = c.u32()? as usize;
        let flags = c.take(1)?[0];
        let bbox = c.bbox()?;
        let rendered = c.bbox()?;
        objects.push(SceneObject {
            class,
            bbox,
            rendered,
            jittered: flags & 1 != 0,
            occluded: flags & 2 != 0,
        });
    }
    if c.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after scene record"));
    }
    Ok(Scene {
        id,
        size,
        image,
        objects,
    })
}

pub fn write_dataset(dir: &Path, spec: &DatasetSpec, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for s in scenes {
        let file = scene_file_name(s.id);
        let mut f = std::fs::File::create(dir.join(&file))?;
        f.write_all(&encode_scene(s))?;
        entries.push(ManifestEntry {
            id: s.id,
            file,
            n_objects: s.objects.len(),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        spec: spec.clone(),
        scenes: entries,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<Scene>)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(format_err(
            &manifest_path.display().to_string(),
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for e in &manifest.scenes {
        let path = dir.join(&e.file);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let scene = decode_scene(&bytes, &path.display().to_string())?;
        if scene.id != e.id || scene.objects.len() != e.n_objects {
            return Err(format_err(
                &path.display().to_string(),
                "scene blob disagrees with manifest entry",
            ));
        }
        scenes.push(scene);
    }
    Ok((manifest.spec, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::generate_dataset;

    #[test]
    fn truncated_blob_is_rejected() {
        let spec = DatasetSpec {
            n_scenes: 1,
            ..DatasetSpec::default()
        };
        let s = &generate_dataset(&spec).unwrap()[0];
        let bytes = encode_scene(s);
        assert!(decode_scene(&bytes[..bytes.len() - 1], "x").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_scene(&bad, "x").is_err());
        assert_eq!(&decode_scene(&bytes, "x").unwrap(), s);
    }
}
