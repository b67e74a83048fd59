//! Minimal `.npy` reader/writer: f64, little-endian, C-order, up to 3 axes.
//! Latent codes and edit directions travel in this format so they can be
//! produced or inspected with numpy directly.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

pub fn save(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::shape(format!(
            "npy save: shape {:?} holds {} elements, got {}",
            shape,
            n,
            data.len()
        )));
    }
    let shape_txt = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': {}, }}",
        shape_txt
    );
    // Total of magic(6) + version(2) + len(2) + header must be a multiple of 64.
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&[1, 0])?;
    f.write_all(&(header.len() as u16).to_le_bytes())?;
    f.write_all(header.as_bytes())?;
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic[..6] != MAGIC {
        return Err(Error::data(format!("{}: not an npy file", path.display())));
    }
    let header_len = match magic[6] {
        1 => {
            let mut b = [0u8; 2];
            f.read_exact(&mut b)?;
            u16::from_le_bytes(b) as usize
        }
        2 => {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::data(format!("npy version {v} unsupported"))),
    };
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header)?;
    let header = String::from_utf8_lossy(&header);

    if !header.contains("'<f8'") {
        return Err(Error::data(format!(
            "{}: expected dtype <f8, header {}",
            path.display(),
            header.trim()
        )));
    }
    if header.contains("'fortran_order': True") {
        return Err(Error::data("npy: fortran order unsupported".to_string()));
    }
    let shape = parse_shape(&header)
        .ok_or_else(|| Error::data(format!("npy: bad shape in header {}", header.trim())))?;

    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 8];
    f.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

fn parse_shape(header: &str) -> Option<Vec<usize>> {
    let start = header.find("'shape':")? + "'shape':".len();
    let rest = &header[start..];
    let open = rest.find('(')?;
    let close = rest.find(')')?;
    let inner = &rest[open + 1..close];
    let mut dims = Vec::new();
    for tok in inner.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        dims.push(tok.parse::<usize>().ok()?);
    }
    Some(dims)
}

pub fn save_array2(path: &Path, a: &Array2<f64>) -> Result<()> {
    let owned;
    let slice = match a.as_slice() {
        Some(s) => s,
        None => {
            owned = a.iter().copied().collect::<Vec<_>>();
            &owned
        }
    };
    save(path, &[a.nrows(), a.ncols()], slice)
}

pub fn load_array2(path: &Path) -> Result<Array2<f64>> {
    let (shape, data) = load(path)?;
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "{}: expected 2 axes, got {:?}",
            path.display(),
            shape
        )));
    }
    Array2::from_shape_vec((shape[0], shape[1]), data)
        .map_err(|e| Error::shape(e.to_string()))
}

pub fn load_dyn(path: &Path) -> Result<ArrayD<f64>> {
    let (shape, data) = load(path)?;
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_2d() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.npy");
        let a = Array2::from_shape_fn((18, 512), |(i, j)| (i * 1000 + j) as f64 * 0.25 - 3.0);
        save_array2(&p, &a).unwrap();
        let b = load_array2(&p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roundtrip_1d_and_3d() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.npy");
        save(&p, &[5], &[1.0, -2.0, 3.5, 0.0, f64::MIN_POSITIVE]).unwrap();
        let (shape, data) = load(&p).unwrap();
        assert_eq!(shape, vec![5]);
        assert_eq!(data[4], f64::MIN_POSITIVE);

        let p3 = dir.path().join("t.npy");
        let vals: Vec<f64> = (0..24).map(|i| i as f64).collect();
        save(&p3, &[2, 3, 4], &vals).unwrap();
        let (shape, data) = load(&p3).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(data, vals);
    }

    #[test]
    fn header_is_64_byte_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        save(&p, &[3], &[1.0, 2.0, 3.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[10 + header_len - 1], b'\n');
    }

    #[test]
    fn rejects_wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.npy");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
        let header = "{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }          \n";
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&p, bytes).unwrap();
        assert!(load(&p).is_err());
    }
}
