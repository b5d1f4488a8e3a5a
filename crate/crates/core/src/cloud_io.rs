//! Point cloud files: ASCII `.xyz` (one `x y z` per line) and binary `.pcb`
//! (`"EQPC"`, u32 version, u32 N, then 3N little-endian f64).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom3::Point3;
use crate::shapes::PointCloud;

pub const PCB_MAGIC: &[u8; 4] = b"EQPC";
pub const PCB_VERSION: u32 = 1;

pub fn to_pcb(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 24 * points.len());
    out.extend_from_slice(PCB_MAGIC);
    out.extend_from_slice(&PCB_VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for x in points.iter().flatten() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn from_pcb(bytes: &[u8]) -> Result<Vec<Point3>> {
    if bytes.len() < 12 || &bytes[..4] != PCB_MAGIC {
        return Err(Error::Integrity("not an EQPC cloud".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PCB_VERSION {
        return Err(Error::Integrity(format!("unsupported cloud version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 24 * n {
        return Err(Error::Integrity(format!(
            "cloud declares {n} points but holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(24)
        .map(|c| {
            let f = |i: usize| f64::from_le_bytes(c[8 * i..8 * i + 8].try_into().unwrap());
            [f(0), f(1), f(2)]
        })
        .collect())
}

/// 17 significant digits, enough to round-trip any f64.
pub fn to_xyz(points: &[Point3]) -> String {
    let mut s = String::with_capacity(points.len() * 72);
    for p in points {
        s.push_str(&format!("{:.16e} {:.16e} {:.16e}\n", p[0], p[1], p[2]));
    }
    s
}

pub fn from_xyz(text: &str) -> Result<Vec<Point3>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Integrity(format!("line {}: {e}", ln + 1)))?;
        if vals.len() != 3 {
            return Err(Error::Integrity(format!(
                "line {}: expected 3 values, found {}",
                ln + 1,
                vals.len()
            )));
        }
        out.push([vals[0], vals[1], vals[2]]);
    }
    Ok(out)
}

fn is_xyz(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("xyz")
}

/// Picks the format from the extension: `.xyz` is text, anything else binary.
pub fn write_cloud(path: impl AsRef<Path>, points: &[Point3]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path)?;
    if is_xyz(path) {
        f.write_all(to_xyz(points).as_bytes())?;
    } else {
        f.write_all(&to_pcb(points))?;
    }
    Ok(())
}

pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<Point3>> {
    let path = path.as_ref();
    if is_xyz(path) {
        from_xyz(&std::fs::read_to_string(path)?)
    } else {
        from_pcb(&std::fs::read(path)?)
    }
}

/// Reads and validates a cloud (at least 3 finite points).
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    PointCloud::new(read_points(path)?)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> Vec<Point3> {
        vec![
            [0.1, -2.5e-17, 1.0 / 3.0],
            [f64::MIN_POSITIVE, 1e300, -0.0],
            [std::f64::consts::PI, 2.0, -7.25],
        ]
    }

    #[test]
    fn pcb_round_trip_is_bit_exact() {
        let p = pts();
        let q = from_pcb(&to_pcb(&p)).unwrap();
        for (a, b) in p.iter().flatten().zip(q.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn xyz_round_trip() {
        let p = pts();
        let q = from_xyz(&to_xyz(&p)).unwrap();
        for (a, b) in p.iter().flatten().zip(q.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(from_pcb(b"EQPX\x01\0\0\0\0\0\0\0").is_err());
        let mut b = to_pcb(&pts());
        b.pop();
        assert!(from_pcb(&b).is_err());
        assert!(from_xyz("1 2\n").is_err());
        assert!(from_xyz("1 2 x\n").is_err());
    }
}
