//! On-disk formats: the `SAVT` tensor container and binary PGM previews.
//!
//! Container layout, all little-endian:
//!
//! | field   | bytes                  |
//! |---------|------------------------|
//! | magic   | `SAVT`                 |
//! | version | u16 = 1                |
//! | rank    | u16                    |
//! | extents | u32 x rank             |
//! | payload | f32 x product(extents) |
//! | crc32   | u32 over payload bytes |
//!
//! Weight files are several containers written back to back.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::numerics::FloatGrid;

pub const MAGIC: &[u8; 4] = b"SAVT";
pub const VERSION: u16 = 1;

pub fn encode_container(grid: &FloatGrid, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.rank() as u16).to_le_bytes());
    for &e in grid.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    let start = out.len();
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Decodes one container from the front of `bytes`, returning the grid and
/// the number of bytes consumed.
pub fn decode_container(bytes: &[u8]) -> Result<(FloatGrid, usize)> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(Error::Format("truncated container".into()));
        }
        let (head, tail) = r.split_at(n);
        r = tail;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected SAVT".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("extent overflow".into()))?;
    let payload = take(
        n.checked_mul(4)
            .ok_or_else(|| Error::Format("extent overflow".into()))?,
    )?;
    let crc = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != crc {
        return Err(Error::Format("CRC mismatch".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let consumed = bytes.len() - r.len();
    Ok((FloatGrid::new(shape, data)?, consumed))
}

pub fn encode_all(grids: &[&FloatGrid]) -> Vec<u8> {
    let mut out = Vec::new();
    for g in grids {
        encode_container(g, &mut out);
    }
    out
}

pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<FloatGrid>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (g, used) = decode_container(bytes)?;
        out.push(g);
        bytes = &bytes[used..];
    }
    Ok(out)
}

/// Writes via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensor(path: &Path, grid: &FloatGrid) -> Result<()> {
    write_atomic(path, &encode_all(&[grid]))
}

pub fn load_tensor(path: &Path) -> Result<FloatGrid> {
    let bytes = fs::read(path)?;
    let (g, used) = decode_container(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format("trailing bytes after container".into()));
    }
    Ok(g)
}

pub fn save_tensors(path: &Path, grids: &[&FloatGrid]) -> Result<()> {
    write_atomic(path, &encode_all(grids))
}

pub fn load_tensors(path: &Path) -> Result<Vec<FloatGrid>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_all(&bytes)
}

/// Writes every parameter of `model` in its fixed order.
pub fn save_params<P: Parameters + ?Sized>(path: &Path, model: &P) -> Result<()> {
    save_tensors(path, &model.params())
}

/// Loads a file written by [`save_params`] into a model of matching shape.
pub fn load_params<P: Parameters + ?Sized>(path: &Path, model: &mut P) -> Result<()> {
    model.load_params(load_tensors(path)?)
}

/// Byte value for a pixel: `round(x * 255)` with halves rounded up.
pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary P5 PGM of a single-channel `[H, W]` (or `[1, H, W]`) grid.
pub fn encode_pgm(plane: &FloatGrid) -> Vec<u8> {
    let s = plane.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if plane.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        log::warn!("PGM export: values outside [0, 1] clipped");
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.data()[..h * w].iter().map(|&v| quantize(v)));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<FloatGrid> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format("only P5 with maxval 255 is supported".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM extent {s}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let px = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format("truncated PGM payload".into()))?;
    FloatGrid::new(vec![h, w], px.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Writes one PGM per frame (channel mean for colour frames) as
/// `{prefix}{index:04}.pgm`.
pub fn export_pgm(frames: &FloatGrid, dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let f = frames.shape()[0];
    let mut paths = Vec::with_capacity(f);
    for i in 0..f {
        let frame = frames.index0(i);
        let plane = luma(&frame);
        let path = dir.join(format!("{prefix}{i:04}.pgm"));
        write_atomic(&path, &encode_pgm(&plane))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Channel mean of a `[C, H, W]` frame as an `[H, W]` plane.
pub fn luma(frame: &FloatGrid) -> FloatGrid {
    if frame.rank() == 2 {
        return frame.clone();
    }
    let (c, h, w) = frame.chw();
    let mut out = vec![0.0; h * w];
    for plane in frame.data().chunks(h * w) {
        out.iter_mut().zip(plane).for_each(|(o, v)| *o += v / c as f64);
    }
    FloatGrid::from_parts(vec![h, w], out)
}
