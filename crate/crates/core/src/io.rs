//! Little-endian binary formats for the toolkit's artifacts: voxel volumes,
//! binary voxel masks, projection stacks, trace stacks, and network
//! parameters. Every format opens with a 4-byte ASCII magic; the reader
//! tracks its byte offset so malformed files report exactly where parsing
//! stopped.
//!
//! Layouts (all multi-byte values little-endian):
//! - `PVOL`: u32 version=1, u32 nx, ny, nz, 3×f32 spacing, 3×f32 origin,
//!   then nx·ny·nz f32 voxels, x-fastest.
//! - `PMSK`: header identical to `PVOL`, then one byte (0/1) per voxel.
//! - `PPRJ`: u32 version=1, u32 n_views, nu, nv, u8 domain tag (0 = raw
//!   energy, 1 = line integral), u64 seed, one f32 angle (rad) per view,
//!   then n_views·nv·nu f32 pixels, u-fastest.
//! - `PTRC`: u32 n_views, nu, nv, then one byte (0/1) per pixel.
//! - `PNET`: u32 version=1, u32 depth, u32 base_channels, then every
//!   parameter as f64 in the canonical flatten order of [`UNetParams`].
//!
//! Grid spacing/origin and view angles are stored at f32 precision: the
//! first write may round, after which write → read → write is byte-stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnseg::UNetParams;
use crate::traces::TraceStack;
use crate::voxvol::{Grid3, Mask3, Volume3};
use crate::xsim::{Domain, ProjectionStack};

const MAGIC_VOLUME: &[u8; 4] = b"PVOL";
const MAGIC_MASK: &[u8; 4] = b"PMSK";
const MAGIC_PROJECTIONS: &[u8; 4] = b"PPRJ";
const MAGIC_TRACES: &[u8; 4] = b"PTRC";
const MAGIC_NETWORK: &[u8; 4] = b"PNET";

const FORMAT_VERSION: u32 = 1;

/// Upper bound on any payload element count; a header implying more is
/// treated as corrupt rather than attempted as an allocation.
const MAX_ELEMENTS: u64 = 1 << 31;

// ---------------------------------------------------------------------------
// Offset-tracking reader
// ---------------------------------------------------------------------------

struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    fn fail(&self, msg: impl std::fmt::Display) -> Error {
        Error::Format { offset: self.offset, msg: msg.to_string() }
    }

    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => self.fail("unexpected end of file"),
                _ => Error::Io(e.to_string()),
            })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let mut got = [0u8; 4];
        self.bytes(&mut got)?;
        if &got != want {
            self.offset = 0;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.offset;
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported version {v}, expected {FORMAT_VERSION}"),
            });
        }
        Ok(())
    }

    /// Element count from header fields, guarded against overflow/absurdity.
    fn checked_count(&self, parts: &[usize]) -> Result<usize> {
        let mut n: u64 = 1;
        for &p in parts {
            n = n
                .checked_mul(p as u64)
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| self.fail("header implies an implausibly large payload"))?;
        }
        Ok(n as usize)
    }

    fn f32_payload(&mut self, count: usize) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; count * 4];
        self.bytes(&mut raw)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn f64_payload(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; count * 8];
        self.bytes(&mut raw)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    /// One byte per element, each 0 or 1.
    fn bit_payload(&mut self, count: usize) -> Result<Vec<u8>> {
        let start = self.offset;
        let mut raw = vec![0u8; count];
        self.bytes(&mut raw)?;
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(Error::Format {
                offset: start + i as u64,
                msg: format!("mask byte must be 0 or 1, found {}", raw[i]),
            });
        }
        Ok(raw)
    }

    /// All finite, reporting the offset of the first offender.
    fn require_finite(&self, values: &[f32], payload_start: u64) -> Result<()> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: payload_start + 4 * i as u64,
                msg: "non-finite value in payload".into(),
            });
        }
        Ok(())
    }

    /// The format must end exactly at the payload.
    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.fail("trailing bytes after payload")),
            Err(e) => Err(Error::Io(e.to_string())),
        }
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_grid_header<W: Write>(w: &mut W, magic: &[u8; 4], grid: &Grid3) -> Result<()> {
    w.write_all(magic)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u32(w, grid.nx as u32)?;
    put_u32(w, grid.ny as u32)?;
    put_u32(w, grid.nz as u32)?;
    for a in 0..3 {
        put_f32(w, grid.spacing[a] as f32)?;
    }
    for a in 0..3 {
        put_f32(w, grid.origin[a] as f32)?;
    }
    Ok(())
}

fn read_grid_header<R: Read>(r: &mut Reader<R>, magic: &[u8; 4]) -> Result<Grid3> {
    r.magic(magic)?;
    r.version()?;
    let at = r.offset;
    let nx = r.u32()? as usize;
    let ny = r.u32()? as usize;
    let nz = r.u32()? as usize;
    let mut spacing = [0.0f64; 3];
    let mut origin = [0.0f64; 3];
    for s in &mut spacing {
        *s = r.f32()? as f64;
    }
    for o in &mut origin {
        *o = r.f32()? as f64;
    }
    Grid3::new([nx, ny, nz], spacing, origin)
        .map_err(|e| Error::Format { offset: at, msg: e.to_string() })
}

// ---------------------------------------------------------------------------
// Volumes (PVOL)
// ---------------------------------------------------------------------------

/// Write a volume in the `PVOL` format.
pub fn write_volume<W: Write>(w: &mut W, vol: &Volume3<f32>) -> Result<()> {
    write_grid_header(w, MAGIC_VOLUME, &vol.grid)?;
    for &v in vol.data() {
        put_f32(w, v)?;
    }
    Ok(())
}

/// Read a `PVOL` volume.
pub fn read_volume<R: Read>(r: R) -> Result<Volume3<f32>> {
    let mut r = Reader::new(r);
    let grid = read_grid_header(&mut r, MAGIC_VOLUME)?;
    let n = r.checked_count(&[grid.nx, grid.ny, grid.nz])?;
    let payload_start = r.offset;
    let data = r.f32_payload(n)?;
    r.require_finite(&data, payload_start)?;
    r.expect_eof()?;
    Volume3::new(grid, data)
}

// ---------------------------------------------------------------------------
// Masks (PMSK)
// ---------------------------------------------------------------------------

/// Write a binary voxel mask in the `PMSK` format.
pub fn write_mask<W: Write>(w: &mut W, mask: &Mask3) -> Result<()> {
    write_grid_header(w, MAGIC_MASK, &mask.grid)?;
    w.write_all(mask.bits())?;
    Ok(())
}

/// Read a `PMSK` mask.
pub fn read_mask<R: Read>(r: R) -> Result<Mask3> {
    let mut r = Reader::new(r);
    let grid = read_grid_header(&mut r, MAGIC_MASK)?;
    let n = r.checked_count(&[grid.nx, grid.ny, grid.nz])?;
    let bits = r.bit_payload(n)?;
    r.expect_eof()?;
    Mask3::new(grid, bits)
}

// ---------------------------------------------------------------------------
// Projection stacks (PPRJ)
// ---------------------------------------------------------------------------

/// Write a projection stack in the `PPRJ` format. Flagged-pixel indices are
/// derived data and are not persisted.
pub fn write_projections<W: Write>(w: &mut W, p: &ProjectionStack<f32>) -> Result<()> {
    w.write_all(MAGIC_PROJECTIONS)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u32(w, p.n_views() as u32)?;
    put_u32(w, p.nu as u32)?;
    put_u32(w, p.nv as u32)?;
    w.write_all(&[p.domain as u8])?;
    w.write_all(&p.seed.to_le_bytes())?;
    for &a in &p.angles_rad {
        put_f32(w, a as f32)?;
    }
    for &v in p.data() {
        put_f32(w, v)?;
    }
    Ok(())
}

/// Read a `PPRJ` projection stack.
pub fn read_projections<R: Read>(r: R) -> Result<ProjectionStack<f32>> {
    let mut r = Reader::new(r);
    r.magic(MAGIC_PROJECTIONS)?;
    r.version()?;
    let n_views = r.u32()? as usize;
    let nu = r.u32()? as usize;
    let nv = r.u32()? as usize;
    let tag_at = r.offset;
    let tag = r.u8()?;
    let domain =
        Domain::from_tag(tag).map_err(|e| Error::Format { offset: tag_at, msg: e.to_string() })?;
    let seed = r.u64()?;
    let angle_start = r.offset;
    let angles: Vec<f64> =
        r.f32_payload(r.checked_count(&[n_views])?)?.iter().map(|&a| a as f64).collect();
    r.require_finite(&angles.iter().map(|&a| a as f32).collect::<Vec<_>>(), angle_start)?;
    let n = r.checked_count(&[n_views, nu, nv])?;
    let payload_start = r.offset;
    let data = r.f32_payload(n)?;
    r.require_finite(&data, payload_start)?;
    r.expect_eof()?;
    ProjectionStack::new(nu, nv, angles, domain, seed, data)
}

// ---------------------------------------------------------------------------
// Trace stacks (PTRC)
// ---------------------------------------------------------------------------

/// Write a binary trace stack in the `PTRC` format.
pub fn write_traces<W: Write>(w: &mut W, t: &TraceStack) -> Result<()> {
    w.write_all(MAGIC_TRACES)?;
    put_u32(w, t.n_views as u32)?;
    put_u32(w, t.nu as u32)?;
    put_u32(w, t.nv as u32)?;
    w.write_all(t.bits())?;
    Ok(())
}

/// Read a `PTRC` trace stack.
pub fn read_traces<R: Read>(r: R) -> Result<TraceStack> {
    let mut r = Reader::new(r);
    r.magic(MAGIC_TRACES)?;
    let n_views = r.u32()? as usize;
    let nu = r.u32()? as usize;
    let nv = r.u32()? as usize;
    let n = r.checked_count(&[n_views, nu, nv])?;
    let bits = r.bit_payload(n)?;
    r.expect_eof()?;
    TraceStack::new(n_views, nu, nv, bits)
}

// ---------------------------------------------------------------------------
// Network parameters (PNET)
// ---------------------------------------------------------------------------

/// Write network parameters in the `PNET` format.
pub fn write_params<W: Write>(w: &mut W, params: &UNetParams<f64>) -> Result<()> {
    w.write_all(MAGIC_NETWORK)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u32(w, params.depth as u32)?;
    put_u32(w, params.base_channels as u32)?;
    for v in params.flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a `PNET` parameter file.
pub fn read_params<R: Read>(r: R) -> Result<UNetParams<f64>> {
    let mut r = Reader::new(r);
    r.magic(MAGIC_NETWORK)?;
    r.version()?;
    let arch_at = r.offset;
    let depth = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let mut params = UNetParams::<f64>::zeros(depth, base_channels)
        .map_err(|e| Error::Format { offset: arch_at, msg: e.to_string() })?;
    let flat = r.f64_payload(params.param_count())?;
    r.expect_eof()?;
    params.assign_from_flat(&flat)?;
    Ok(params)
}

// ---------------------------------------------------------------------------
// Path-level wrappers
// ---------------------------------------------------------------------------

macro_rules! path_io {
    ($save:ident, $load:ident, $write:ident, $read:ident, $ty:ty) => {
        #[doc = concat!("Write via [`", stringify!($write), "`] to a file path.")]
        pub fn $save(path: impl AsRef<Path>, value: &$ty) -> Result<()> {
            let mut w = BufWriter::new(File::create(path)?);
            $write(&mut w, value)?;
            w.flush()?;
            Ok(())
        }

        #[doc = concat!("Read via [`", stringify!($read), "`] from a file path.")]
        pub fn $load(path: impl AsRef<Path>) -> Result<$ty> {
            $read(BufReader::new(File::open(path)?))
        }
    };
}

path_io!(save_volume, load_volume, write_volume, read_volume, Volume3<f32>);
path_io!(save_mask, load_mask, write_mask, read_mask, Mask3);
path_io!(save_projections, load_projections, write_projections, read_projections, ProjectionStack<f32>);
path_io!(save_traces, load_traces, write_traces, read_traces, TraceStack);
path_io!(save_params, load_params, write_params, read_params, UNetParams<f64>);

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes_of<F: FnOnce(&mut Vec<u8>) -> Result<()>>(f: F) -> Vec<u8> {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        buf
    }

    fn sample_volume() -> Volume3<f32> {
        let grid = Grid3::new([3, 4, 2], [1.5, 2.0, 2.5], [-1.0, 0.0, 3.0]).unwrap();
        let data = (0..grid.len()).map(|i| i as f32 * 0.25 - 2.0).collect();
        Volume3::new(grid, data).unwrap()
    }

    #[test]
    fn volume_roundtrip_is_byte_stable() {
        let vol = sample_volume();
        let b1 = bytes_of(|w| write_volume(w, &vol));
        let back = read_volume(&b1[..]).unwrap();
        assert_eq!(back, vol);
        let b2 = bytes_of(|w| write_volume(w, &back));
        assert_eq!(b1, b2);
    }

    #[test]
    fn mask_roundtrip_and_bad_byte_offset() {
        let grid = Grid3::centered([2, 3, 2], [1.0; 3]).unwrap();
        let mut mask = Mask3::empty(grid);
        mask.set(1, 2, 0, true);
        mask.set(0, 0, 1, true);
        let b1 = bytes_of(|w| write_mask(w, &mask));
        let back = read_mask(&b1[..]).unwrap();
        assert_eq!(back, mask);

        // Corrupt one payload byte: the error names its exact offset.
        let header_len = 4 + 4 + 12 + 12 + 12;
        let mut bad = b1.clone();
        bad[header_len + 5] = 7;
        match read_mask(&bad[..]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, header_len as u64 + 5),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn projections_roundtrip_keeps_domain_seed_angles() {
        let angles: Vec<f64> = vec![0.0, 0.5, 1.25];
        let data: Vec<f32> = (0..3 * 4 * 2).map(|i| (i as f32).sin()).collect();
        let p = ProjectionStack::new(4, 2, angles, Domain::LineIntegral, 99, data).unwrap();
        let b1 = bytes_of(|w| write_projections(w, &p));
        let back = read_projections(&b1[..]).unwrap();
        assert_eq!(back.nu, 4);
        assert_eq!(back.nv, 2);
        assert_eq!(back.domain, Domain::LineIntegral);
        assert_eq!(back.seed, 99);
        assert_eq!(back.angles_rad, p.angles_rad);
        assert_eq!(back.data(), p.data());
        let b2 = bytes_of(|w| write_projections(w, &back));
        assert_eq!(b1, b2);
    }

    #[test]
    fn truncated_and_oversized_files_are_rejected() {
        let p = ProjectionStack::<f32>::new(
            2,
            2,
            vec![0.0, 1.0],
            Domain::RawEnergy,
            0,
            vec![1.0; 8],
        )
        .unwrap();
        let b = bytes_of(|w| write_projections(w, &p));
        let cut = &b[..b.len() - 3];
        match read_projections(cut) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("end of file")),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut long = b.clone();
        long.push(0);
        match read_projections(&long[..]) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("trailing")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_reported_at_start() {
        let vol = sample_volume();
        let b = bytes_of(|w| write_volume(w, &vol));
        match read_mask(&b[..]) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn traces_roundtrip() {
        let mut t = TraceStack::empty(2, 5, 3);
        t.set(0, 4, 2, true);
        t.set(1, 0, 0, true);
        let b1 = bytes_of(|w| write_traces(w, &t));
        let back = read_traces(&b1[..]).unwrap();
        assert_eq!(back.bits(), t.bits());
        assert_eq!((back.n_views, back.nu, back.nv), (2, 5, 3));
    }

    #[test]
    fn params_roundtrip_bit_exact() {
        let p = UNetParams::<f64>::init_he_uniform(2, 2, 7).unwrap();
        let b1 = bytes_of(|w| write_params(w, &p));
        let back = read_params(&b1[..]).unwrap();
        assert_eq!(back.depth, p.depth);
        assert_eq!(back.base_channels, p.base_channels);
        assert_eq!(back.flatten(), p.flatten());
        let b2 = bytes_of(|w| write_params(w, &back));
        assert_eq!(b1, b2);
    }

    #[test]
    fn path_wrappers_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.pvol");
        let vol = sample_volume();
        save_volume(&path, &vol).unwrap();
        assert_eq!(load_volume(&path).unwrap(), vol);
    }
}
