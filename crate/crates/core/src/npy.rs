//! Reading and writing the numpy `.npy` format (version 1.0).
//!
//! Only what the pipeline exchanges is supported: little-endian `float32`
//! (and `float64` on read), C order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "npy shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

fn header_dict(shape: &[usize]) -> String {
    let dims = match shape.len() {
        0 => String::new(),
        1 => format!("{},", shape[0]),
        _ => shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", "),
    };
    format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({dims}), }}")
}

pub fn write<W: Write>(w: &mut W, shape: &[usize], data: &[f32]) -> io::Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "npy shape does not match data length",
        ));
    }
    let mut dict = header_dict(shape);
    // magic(6) + version(2) + len(2) + dict + '\n' must be a multiple of 64.
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    w.write_all(MAGIC)?;
    w.write_all(&[1, 0])?;
    w.write_all(&(dict.len() as u16).to_le_bytes())?;
    w.write_all(dict.as_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_file(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, shape, data)?;
    w.flush()?;
    Ok(())
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("'{key}':");
    let start = dict.find(&pat)? + pat.len();
    Some(dict[start..].trim_start())
}

fn parse_header(dict: &str) -> std::result::Result<(String, bool, Vec<usize>), String> {
    let descr = dict_value(dict, "descr").ok_or("missing descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or("bad descr")?
        .to_string();

    let fortran = dict_value(dict, "fortran_order").ok_or("missing fortran_order")?;
    let fortran = if fortran.starts_with("True") {
        true
    } else if fortran.starts_with("False") {
        false
    } else {
        return Err("bad fortran_order".into());
    };

    let shape = dict_value(dict, "shape").ok_or("missing shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or("bad shape")?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((descr, fortran, shape))
}

pub fn read<R: Read>(r: &mut R) -> std::result::Result<NpyArray, String> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != MAGIC {
        return Err("not an npy file".into());
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver).map_err(|e| e.to_string())?;
    let header_len = match ver[0] {
        1 => {
            let mut b = [0u8; 2];
            r.read_exact(&mut b).map_err(|e| e.to_string())?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| e.to_string())?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(format!("unsupported npy version {v}")),
    };
    let mut dict = vec![0u8; header_len];
    r.read_exact(&mut dict).map_err(|e| e.to_string())?;
    let dict = String::from_utf8(dict).map_err(|e| e.to_string())?;
    let (descr, fortran, shape) = parse_header(&dict)?;
    if fortran {
        return Err("Fortran-order arrays are not supported".into());
    }
    let n: usize = shape.iter().product();
    let data = match descr.as_str() {
        "<f4" => {
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(|e| e.to_string())?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        "<f8" => {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(|e| e.to_string())?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect()
        }
        other => return Err(format!("unsupported dtype {other}")),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes after array data".into());
    }
    Ok(NpyArray { shape, data })
}

pub fn read_file(path: &Path) -> Result<NpyArray> {
    let mut r = BufReader::new(File::open(path)?);
    read(&mut r).map_err(|detail| Error::format(path, detail))
}
