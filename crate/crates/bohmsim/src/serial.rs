//! Binary snapshot format for grids and wave functions.
//!
//! Layout (all integers and floats little-endian):
//!   magic   5 bytes  "BSIM1"
//!   D       u32      number of axes
//!   per axis: points u64, min f64, max f64, boundary u8 (0 periodic, 1 box)
//!   time    f64      snapshot time
//!   body    D-dim row-major complex pairs (re f64, im f64), one per cell

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{BsimError, Result};
use crate::grid::{AxisSpec, Boundary, Grid};
use crate::wavefunction::WaveFunction;

const MAGIC: &[u8; 5] = b"BSIM1";

pub fn write_wavefunction<W: Write>(w: &mut W, psi: &WaveFunction) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(psi.grid.ndim() as u32).to_le_bytes())?;
    for ax in psi.grid.axes() {
        w.write_all(&(ax.points as u64).to_le_bytes())?;
        w.write_all(&ax.min.to_le_bytes())?;
        w.write_all(&ax.max.to_le_bytes())?;
        let b: u8 = match ax.boundary {
            Boundary::Periodic => 0,
            Boundary::Box => 1,
        };
        w.write_all(&[b])?;
    }
    w.write_all(&psi.time.to_le_bytes())?;
    for c in &psi.amplitudes {
        w.write_all(&c.re.to_le_bytes())?;
        w.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_wavefunction<R: Read>(r: &mut R) -> Result<WaveFunction> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(BsimError::Serialization("bad magic".into()));
    }
    let mut db = [0u8; 4];
    r.read_exact(&mut db)?;
    let d = u32::from_le_bytes(db) as usize;
    let mut axes = Vec::with_capacity(d);
    for _ in 0..d {
        let points = read_u64(r)? as usize;
        let min = read_f64(r)?;
        let max = read_f64(r)?;
        let mut bb = [0u8; 1];
        r.read_exact(&mut bb)?;
        let boundary = match bb[0] {
            0 => Boundary::Periodic,
            1 => Boundary::Box,
            x => return Err(BsimError::Serialization(format!("bad boundary tag {x}"))),
        };
        axes.push(AxisSpec { points, min, max, boundary });
    }
    let grid = Arc::new(Grid::new(axes)?);
    let time = read_f64(r)?;
    let mut amplitudes = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        let re = read_f64(r)?;
        let im = read_f64(r)?;
        amplitudes.push(Complex64::new(re, im));
    }
    WaveFunction::new(grid, amplitudes, time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64 as C;

    #[test]
    fn roundtrip() {
        let grid = Arc::new(
            Grid::new(vec![
                AxisSpec::periodic(6, -1.0, 2.0),
                AxisSpec::boxed(4, 0.0, 1.0),
            ])
            .unwrap(),
        );
        let psi = WaveFunction::from_fn(grid, 1.25, |q| C::new(q[0], q[1] * 2.0));
        let mut buf = Vec::new();
        write_wavefunction(&mut buf, &psi).unwrap();
        let back = read_wavefunction(&mut buf.as_slice()).unwrap();
        assert_eq!(*back.grid, *psi.grid);
        assert_eq!(back.time, psi.time);
        assert_eq!(back.amplitudes, psi.amplitudes);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE!xxxxxxxxxxxxxxxx".to_vec();
        assert!(read_wavefunction(&mut buf.as_slice()).is_err());
    }
}
