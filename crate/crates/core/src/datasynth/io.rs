//! Dataset file and manifest.
//!
//! ```text
//! b"SCML0001"  u32 scene_count, u32 channels, u32 height, u32 width, u32 classes
//! per scene:   u32 id, u8 seasons, seasons × C×H×W f32, H×W u8 pixel map, u16 label
//! ```
//!
//! Everything is little-endian.

use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, Scene, MAX_SEASONS};
use crate::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::labelsim::{aggregate_scene_labels, MultiHot, PixelMap};
use crate::numcore::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"SCML0001";

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let (c, n) = (ds.channels, ds.size);
    let per_scene = 5 + MAX_SEASONS * c * n * n * 4 + n * n + 2;
    let mut out = Vec::with_capacity(28 + ds.scenes.len() * per_scene);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [ds.scenes.len(), c, n, n, ds.num_classes] {
        let v = u32::try_from(v).map_err(|_| Error::Invalid("dataset header overflow".into()))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.scenes {
        if s.seasons.is_empty() || s.seasons.len() > MAX_SEASONS {
            return Err(Error::Invalid(format!(
                "scene {} has {} seasons",
                s.id,
                s.seasons.len()
            )));
        }
        out.extend_from_slice(&s.id.to_le_bytes());
        out.push(s.seasons.len() as u8);
        for im in &s.seasons {
            if im.dims() != [c, n, n] {
                return Err(Error::Invalid(format!("scene {} image dims {:?}", s.id, im.dims())));
            }
            for &v in im.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(s.pixel_map.classes());
        out.extend_from_slice(&s.label.bitmask().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != DATASET_MAGIC {
        return Err(r.error(0, "bad magic, not a dataset file"));
    }
    let count = r.u32("scene count")? as usize;
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let classes = r.u32("class count")? as usize;
    if h != w || h == 0 || c == 0 || classes == 0 || classes > 16 {
        return Err(r.error(12, &format!("unsupported geometry {c}×{h}×{w}, {classes} classes")));
    }
    let mut scenes = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let at = r.pos;
        let id = r.u32("scene id")?;
        let ns = r.take(1, "season count")?[0] as usize;
        if ns == 0 || ns > MAX_SEASONS {
            return Err(r.error(at + 4, &format!("season count {ns}")));
        }
        let mut seasons = Vec::with_capacity(ns);
        for _ in 0..ns {
            let data_at = r.pos;
            let raw = r.take(c * h * w * 4, "image data")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            seasons.push(
                Tensor::new(&[c, h, w], data)
                    .map_err(|e| r.error(data_at, &format!("scene {id}: {e}")))?,
            );
        }
        let map_at = r.pos;
        let map = r.take(h * w, "pixel map")?.to_vec();
        let pixel_map = PixelMap::new(h, w, map).map_err(|e| r.error(map_at, &e.to_string()))?;
        let label_at = r.pos;
        let bits = r.u16("label")?;
        let label = MultiHot::from_bitmask(classes, bits)
            .map_err(|e| r.error(label_at, &e.to_string()))?;
        let expected = aggregate_scene_labels(&pixel_map, classes, 0.0)
            .map_err(|e| r.error(map_at, &e.to_string()))?;
        if expected != label {
            return Err(r.error(label_at, &format!("scene {id} label disagrees with its pixel map")));
        }
        scenes.push(Scene {
            id,
            seasons,
            pixel_map,
            label,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.error(r.pos, "trailing bytes after last scene"));
    }
    Ok(Dataset {
        channels: c,
        size: h,
        num_classes: classes,
        scenes,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<usize> {
    let bytes = encode_dataset(ds)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

pub fn manifest_csv(ds: &Dataset) -> String {
    let mut out = String::from("id,num_labels,label_bits_hex,seasons,split\n");
    for s in &ds.scenes {
        let _ = writeln!(
            out,
            "{},{},{:04x},{},{}",
            s.id,
            s.label.count(),
            s.label.bitmask(),
            s.seasons.len(),
            s.split().as_str()
        );
    }
    out
}

pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, manifest_csv(ds)).map_err(|e| Error::io(path, e))
}
