//! The SMLF v1 frame-stack container: a fixed little-endian header followed
//! by raw f32 pixels, row-major within each frame, frames consecutive.
//!
//! Layout: magic `SMLF`, u32 version (= 1), u32 width, u32 height,
//! u32 n_frames, f64 pixel_size_nm, then `width * height * n_frames` f32s.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use smlmforge_core::simulator::FrameStack;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SMLF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SmlfError {
    #[error("bad magic: not an SMLF file")]
    BadMagic,
    #[error("unsupported SMLF version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} pixels, file holds {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("dimension overflow: {0}x{1}x{2} frames")]
    DimensionOverflow(u32, u32, u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_smlf(stack: &FrameStack, path: &Path) -> Result<(), SmlfError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(stack.width as u32)?;
    w.write_u32::<LittleEndian>(stack.height as u32)?;
    w.write_u32::<LittleEndian>(stack.n_frames as u32)?;
    w.write_f64::<LittleEndian>(stack.pixel_size)?;
    for &v in &stack.data {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_smlf(path: &Path) -> Result<FrameStack, SmlfError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() {
        return Err(SmlfError::BadMagic);
    }
    if &magic != MAGIC {
        return Err(SmlfError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(SmlfError::UnsupportedVersion(version));
    }
    let width = r.read_u32::<LittleEndian>()?;
    let height = r.read_u32::<LittleEndian>()?;
    let n_frames = r.read_u32::<LittleEndian>()?;
    let pixel_size = r.read_f64::<LittleEndian>()?;
    let n_pixels = (width as u64)
        .checked_mul(height as u64)
        .and_then(|p| p.checked_mul(n_frames as u64))
        .filter(|&p| p.checked_mul(4).is_some() && p <= usize::MAX as u64)
        .ok_or(SmlfError::DimensionOverflow(width, height, n_frames))?;

    let mut data = vec![0f32; n_pixels as usize];
    let mut buf = vec![0u8; 4 * n_pixels as usize];
    let mut got = 0usize;
    while got < buf.len() {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return Err(SmlfError::Truncated {
                expected: n_pixels,
                got: got as u64 / 4,
            });
        }
        got += n;
    }
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        data[i] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(FrameStack {
        width: width as usize,
        height: height as usize,
        n_frames: n_frames as usize,
        pixel_size,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stack() -> FrameStack {
        FrameStack {
            width: 3,
            height: 2,
            n_frames: 2,
            pixel_size: 100.0,
            data: (0..12).map(|i| i as f32 * 1.5 + 0.25).collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack.smlf");
        let stack = sample_stack();
        write_smlf(&stack, &path).unwrap();
        let back = read_smlf(&path).unwrap();
        assert_eq!(stack, back);
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.smlf");
        std::fs::write(&path, b"JUNKxxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(read_smlf(&path), Err(SmlfError::BadMagic)));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.smlf");
        let stack = sample_stack();
        write_smlf(&stack, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_smlf(&path), Err(SmlfError::Truncated { .. })));
    }

    #[test]
    fn dimension_overflow_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("huge.smlf");
        let mut f = File::create(&path).unwrap();
        f.write_all(MAGIC).unwrap();
        f.write_u32::<LittleEndian>(VERSION).unwrap();
        f.write_u32::<LittleEndian>(u32::MAX).unwrap();
        f.write_u32::<LittleEndian>(u32::MAX).unwrap();
        f.write_u32::<LittleEndian>(u32::MAX).unwrap();
        f.write_f64::<LittleEndian>(100.0).unwrap();
        assert!(matches!(
            read_smlf(&path),
            Err(SmlfError::DimensionOverflow(..))
        ));
    }

    #[test]
    fn wrong_version_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.smlf");
        let mut f = File::create(&path).unwrap();
        f.write_all(MAGIC).unwrap();
        f.write_u32::<LittleEndian>(9).unwrap();
        assert!(matches!(
            read_smlf(&path),
            Err(SmlfError::UnsupportedVersion(9))
        ));
    }
}
