//! Binary file formats.
//!
//! Every format opens with its own magic so each parser can reject every
//! other format's files:
//!
//! * `ALTINC01` — parameter files: config hash, then named tensor records
//!   (name length, name bytes, rank, dims as u64 LE, values as f64 LE).
//! * `ALTTEN01` — a single tensor record (dataset image dumps).
//! * `ALTPM001` — probability maps: `c, h, w` as u64 LE then channel-major
//!   row-major f64 LE values.
//! * `P5` / `P6` — 8-bit PGM label maps and PPM renders.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::maps::{LabelMap, ProbMap};
use crate::scalar::Scalar;

pub const PARAM_MAGIC: &[u8; 8] = b"ALTINC01";
pub const TENSOR_MAGIC: &[u8; 8] = b"ALTTEN01";
pub const PROBMAP_MAGIC: &[u8; 8] = b"ALTPM001";

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path_str(path),
        detail: detail.into(),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| malformed(path, format!("unexpected end of file reading {what}")))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path, what)?;
    Ok(u64::from_le_bytes(b))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 8], path: &Path) -> Result<()> {
    let mut got = [0u8; 8];
    read_exact(r, &mut got, path, "magic")?;
    if &got != magic {
        return Err(Error::BadMagic {
            path: path_str(path),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    Ok(())
}

// ── tensor records ───────────────────────────────────────────────────────

fn write_record<F: Scalar>(w: &mut impl Write, name: &str, t: &Tensor<F>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.values() {
        w.write_all(&v.to_f64().expect("scalar convertible to f64").to_le_bytes())?;
    }
    Ok(())
}

fn read_record<F: Scalar>(r: &mut impl Read, path: &Path) -> Result<(String, Tensor<F>)> {
    let name_len = read_u64(r, path, "record name length")? as usize;
    if name_len > 4096 {
        return Err(malformed(path, format!("record name length {name_len} implausible")));
    }
    let mut name = vec![0u8; name_len];
    read_exact(r, &mut name, path, "record name")?;
    let name = String::from_utf8(name).map_err(|_| malformed(path, "record name not UTF-8"))?;
    let rank = read_u64(r, path, "record rank")? as usize;
    if rank > 8 {
        return Err(malformed(path, format!("record rank {rank} implausible")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r, path, "record dim")? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > (1 << 28) {
        return Err(malformed(path, format!("record of {numel} values implausible")));
    }
    let mut values = Vec::with_capacity(numel);
    let mut b = [0u8; 8];
    for _ in 0..numel {
        read_exact(r, &mut b, path, "record values")?;
        values.push(F::from_f64_lit(f64::from_le_bytes(b)));
    }
    Ok((name, Tensor::new(shape, values)?))
}

// ── parameter files ──────────────────────────────────────────────────────

/// Writes named tensors under the `ALTINC01` magic.
pub fn save_param_file<F: Scalar>(
    path: &Path,
    config_hash: u64,
    tensors: &[(String, &Tensor<F>)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    w.write_all(PARAM_MAGIC).map_err(io_err)?;
    w.write_all(&config_hash.to_le_bytes()).map_err(io_err)?;
    for (name, t) in tensors {
        write_record(&mut w, name, t).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Config hash plus named tensors, as stored in an `ALTINC01` file.
pub type ParamFileContents<F> = (u64, Vec<(String, Tensor<F>)>);

/// Reads all records from a parameter file; validates magic and returns the
/// stored config hash alongside the tensors. Nothing is returned on any parse
/// failure.
pub fn load_param_file<F: Scalar>(path: &Path) -> Result<ParamFileContents<F>> {
    let file = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let size = file
        .metadata()
        .map_err(|e| Error::io(path_str(path), e))?
        .len();
    let mut r = BufReader::new(file);
    expect_magic(&mut r, PARAM_MAGIC, path)?;
    let hash = read_u64(&mut r, path, "config hash")?;
    let mut tensors = Vec::new();
    let mut consumed = 16u64;
    while consumed < size {
        let (name, t) = read_record(&mut r, path)?;
        consumed += 8 + name.len() as u64 + 8 + (t.shape().len() as u64) * 8 + (t.numel() as u64) * 8;
        tensors.push((name, t));
    }
    Ok((hash, tensors))
}

// ── single-tensor files (dataset image dumps) ────────────────────────────

pub fn save_tensor<F: Scalar>(path: &Path, name: &str, t: &Tensor<F>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    w.write_all(TENSOR_MAGIC).map_err(io_err)?;
    write_record(&mut w, name, t).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_tensor<F: Scalar>(path: &Path) -> Result<(String, Tensor<F>)> {
    let file = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, TENSOR_MAGIC, path)?;
    read_record(&mut r, path)
}

// ── probability maps ─────────────────────────────────────────────────────

pub fn save_probmap<F: Scalar>(path: &Path, p: &ProbMap<F>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    w.write_all(PROBMAP_MAGIC).map_err(io_err)?;
    for d in [p.channels(), p.height(), p.width()] {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    for &v in p.tensor().values() {
        w.write_all(&v.to_f64().expect("scalar convertible").to_le_bytes())
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Loads and validates a probability map; per-pixel channel sums more than
/// `1e-6` from 1 are rejected.
pub fn load_probmap<F: Scalar>(path: &Path) -> Result<ProbMap<F>> {
    let file = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, PROBMAP_MAGIC, path)?;
    let c = read_u64(&mut r, path, "channels")? as usize;
    let h = read_u64(&mut r, path, "height")? as usize;
    let w = read_u64(&mut r, path, "width")? as usize;
    if c == 0 || h == 0 || w == 0 || c * h * w > (1 << 28) {
        return Err(malformed(path, format!("implausible dims {c}x{h}x{w}")));
    }
    let mut values = Vec::with_capacity(c * h * w);
    let mut b = [0u8; 8];
    for _ in 0..c * h * w {
        read_exact(&mut r, &mut b, path, "probability values")?;
        values.push(F::from_f64_lit(f64::from_le_bytes(b)));
    }
    // ProbMap::new enforces the channel-sum tolerance (PROBMAP_SUM_TOL).
    ProbMap::new(Tensor::new(vec![c, h, w], values)?)
}

// ── PGM (P5) label maps ──────────────────────────────────────────────────

pub fn save_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    write!(w, "P5\n{} {}\n255\n", labels.width(), labels.height()).map_err(io_err)?;
    w.write_all(labels.labels()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_pgm(path: &Path) -> Result<LabelMap> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path_str(path), e))?;
    let (w, h, offset) = parse_netpbm_header(&bytes, b"P5", path)?;
    if bytes.len() < offset + w * h {
        return Err(malformed(path, "raster shorter than header promises"));
    }
    LabelMap::new(h, w, bytes[offset..offset + w * h].to_vec())
}

// ── PPM (P6) renders ─────────────────────────────────────────────────────

/// Writes `rgb` (row-major, 3 bytes per pixel) as binary PPM.
pub fn save_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::ShapeMismatch {
            left: vec![height, width, 3],
            right: vec![rgb.len()],
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    write!(w, "P6\n{width} {height}\n255\n").map_err(io_err)?;
    w.write_all(rgb).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Reads a binary PPM; returns `(width, height, rgb bytes)`.
pub fn load_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path_str(path), e))?;
    let (w, h, offset) = parse_netpbm_header(&bytes, b"P6", path)?;
    if bytes.len() < offset + 3 * w * h {
        return Err(malformed(path, "raster shorter than header promises"));
    }
    Ok((w, h, bytes[offset..offset + 3 * w * h].to_vec()))
}

/// Parses "Pn <w> <h> <maxval>" with `#` comments; returns (w, h, raster
/// offset). maxval must be 255.
fn parse_netpbm_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::BadMagic {
            path: path_str(path),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(malformed(path, "missing header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, "unparseable header field"))?;
    }
    if fields[2] != 255 {
        return Err(malformed(path, format!("maxval {} unsupported", fields[2])));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed(path, "missing raster separator"));
    }
    Ok((fields[0], fields[1], pos + 1))
}
