//! Binary lattice snapshot used for test fixtures and cross-language golden
//! tests.
//!
//! Layout, all little-endian:
//!   header: d, k, v_d as u64
//!   keys:   k * (d+1) i32, row-major
//!   values: k * v_d f32, row-major

use std::io::{Read, Write};

use ndarray::Array2;

use super::{LatticeError, LatticeKey, SparseLattice};

pub fn write_snapshot<W: Write>(lattice: &SparseLattice, mut w: W) -> std::io::Result<()> {
    let d = lattice.dim() as u64;
    let k = lattice.len() as u64;
    let v_d = lattice.value_dim() as u64;
    w.write_all(&d.to_le_bytes())?;
    w.write_all(&k.to_le_bytes())?;
    w.write_all(&v_d.to_le_bytes())?;
    for key in lattice.keys() {
        for &c in key.coords() {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    for &v in lattice.values().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<SparseLattice, LatticeError> {
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut R| -> Result<u64, LatticeError> {
        r.read_exact(&mut u64buf)
            .map_err(|e| LatticeError::Snapshot(format!("header: {e}")))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let d = read_u64(&mut r)? as usize;
    let k = read_u64(&mut r)? as usize;
    let v_d = read_u64(&mut r)? as usize;

    let mut lattice = SparseLattice::with_default_sigma(d, v_d);
    let mut i32buf = [0u8; 4];
    for row in 0..k {
        let mut coords = Vec::with_capacity(d + 1);
        for _ in 0..=d {
            r.read_exact(&mut i32buf)
                .map_err(|e| LatticeError::Snapshot(format!("keys row {row}: {e}")))?;
            coords.push(i32::from_le_bytes(i32buf));
        }
        let key = LatticeKey::new(coords)?;
        let got = lattice.lookup_or_insert(&key);
        if got != row {
            return Err(LatticeError::Snapshot(format!(
                "duplicate key at row {row} (already at {got})"
            )));
        }
    }
    let mut values = Array2::<f32>::zeros((k, v_d));
    for row in 0..k {
        for col in 0..v_d {
            r.read_exact(&mut i32buf)
                .map_err(|e| LatticeError::Snapshot(format!("values row {row}: {e}")))?;
            values[(row, col)] = f32::from_le_bytes(i32buf);
        }
    }
    lattice.set_values(values);
    Ok(lattice)
}
