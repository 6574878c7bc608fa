//! Episode container and the `.vtb` flat binary format.
//!
//! Layout: a 16-byte header — magic `VTB1`, little-endian u32 frame count,
//! and eight reserved zero bytes — followed per frame by 1600 f32 patch
//! values (row-major), 2 f32 action values, and 6 f32 pose values, all
//! little-endian.

use crate::error::{Error, Result};
use crate::sim::patch::PATCH_SIZE;
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

pub const VTB_MAGIC: &[u8; 4] = b"VTB1";
pub const FRAME_FLOATS: usize = PATCH_SIZE * PATCH_SIZE + 2 + 6;
/// A window of history plus one prediction target.
pub const MIN_FRAMES: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub patch: Array2<f32>,
    pub action: [f32; 2],
    pub pose: [f32; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub dt: f32,
    pub heightmap_seed: u64,
    pub frames: Vec<Frame>,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < MIN_FRAMES {
            return Err(Error::Data(format!(
                "episode needs at least {MIN_FRAMES} frames, got {}",
                self.frames.len()
            )));
        }
        for f in &self.frames {
            if f.patch.dim() != (PATCH_SIZE, PATCH_SIZE) {
                return Err(Error::Shape("frame patch shape".into()));
            }
        }
        Ok(())
    }
}

pub fn write_vtb(path: &Path, episode: &Episode) -> Result<()> {
    let mut buf: Vec<u8> =
        Vec::with_capacity(16 + episode.frames.len() * FRAME_FLOATS * 4);
    buf.extend_from_slice(VTB_MAGIC);
    buf.extend_from_slice(&(episode.frames.len() as u32).to_le_bytes());
    buf.extend_from_slice(&[0u8; 8]);
    for f in &episode.frames {
        for v in f.patch.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in f.action {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in f.pose {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::dataset(path, e))?;
    file.write_all(&buf).map_err(|e| Error::dataset(path, e))?;
    Ok(())
}

/// `dt` and `heightmap_seed` live in the dataset manifest, not the container.
pub fn read_vtb(path: &Path, dt: f32, heightmap_seed: u64) -> Result<Episode> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::dataset(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::dataset(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != VTB_MAGIC {
        return Err(Error::Data(format!("{}: not a VTB1 file", path.display())));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 16 + count * FRAME_FLOATS * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes for {count} frames, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(count);
    let mut off = 16;
    let mut next = |n: usize| {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        out
    };
    for _ in 0..count {
        let patch_vals = next(PATCH_SIZE * PATCH_SIZE);
        let action_vals = next(2);
        let pose_vals = next(6);
        frames.push(Frame {
            patch: Array2::from_shape_vec((PATCH_SIZE, PATCH_SIZE), patch_vals).unwrap(),
            action: [action_vals[0], action_vals[1]],
            pose: pose_vals.try_into().unwrap(),
        });
    }
    Ok(Episode {
        dt,
        heightmap_seed,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_episode(n: usize) -> Episode {
        let frames = (0..n)
            .map(|i| Frame {
                patch: Array2::from_elem((PATCH_SIZE, PATCH_SIZE), i as f32 * 0.01),
                action: [0.5, -0.1],
                pose: [i as f32, 0.0, 0.1, 0.0, 0.0, 0.2],
            })
            .collect();
        Episode {
            dt: 0.1,
            heightmap_seed: 9,
            frames,
        }
    }

    #[test]
    fn vtb_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.vtb");
        let ep = toy_episode(25);
        write_vtb(&path, &ep).unwrap();
        let back = read_vtb(&path, 0.1, 9).unwrap();
        assert_eq!(ep, back);
        // header layout: magic + count + reserved = 16 bytes
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"VTB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 25);
        assert_eq!(bytes.len(), 16 + 25 * FRAME_FLOATS * 4);
    }

    #[test]
    fn short_episode_rejected_by_validate() {
        assert!(toy_episode(20).validate().is_err());
        assert!(toy_episode(21).validate().is_ok());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.vtb");
        write_vtb(&path, &toy_episode(25)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_vtb(&path, 0.1, 9).is_err());
    }
}
