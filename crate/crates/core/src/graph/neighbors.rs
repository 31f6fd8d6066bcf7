//! Cutoff neighbor search with minimum-image convention.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::structure::{cross, det3, inv3, norm, sub, Mat3, Structure, Vec3};

/// Atom counts above this use the cell list.
pub const BRUTE_FORCE_MAX_ATOMS: usize = 512;

/// A directed pair `src -> dst`. `vector = x_dst + shift - x_src`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub shift: Vec3,
    pub vector: Vec3,
    pub distance: f64,
}

struct Frame {
    cell: Option<Mat3>,
    inv: Option<Mat3>,
    pbc: [bool; 3],
}

impl Frame {
    fn new(s: &Structure, cutoff: f64) -> Result<Self> {
        if cutoff <= 0.0 || !cutoff.is_finite() {
            return Err(Error::Neighbors(format!("cutoff must be positive, got {cutoff}")));
        }
        let pbc = s.pbc();
        let cell = s.cell().copied();
        if let Some(c) = &cell {
            let t = thickness(c);
            for k in 0..3 {
                if pbc[k] && t[k] < 2.0 * cutoff {
                    return Err(Error::Neighbors(format!(
                        "cell thickness {:.4} Å along periodic axis {k} is below twice the cutoff ({cutoff} Å)",
                        t[k]
                    )));
                }
            }
        }
        Ok(Frame { inv: cell.as_ref().map(inv3), cell, pbc })
    }

    fn frac(&self, r: Vec3) -> Vec3 {
        match &self.inv {
            // f = (cellᵀ)⁻¹ r
            Some(inv) => [
                inv[0][0] * r[0] + inv[1][0] * r[1] + inv[2][0] * r[2],
                inv[0][1] * r[0] + inv[1][1] * r[1] + inv[2][1] * r[2],
                inv[0][2] * r[0] + inv[1][2] * r[1] + inv[2][2] * r[2],
            ],
            None => r,
        }
    }

    /// Minimum-image shift for the raw displacement `d = x_dst - x_src`.
    fn image_shift(&self, d: Vec3) -> Vec3 {
        let (Some(cell), true) = (&self.cell, self.pbc.iter().any(|&p| p)) else {
            return [0.0; 3];
        };
        let f = self.frac(d);
        let mut shift = [0.0; 3];
        for k in 0..3 {
            if self.pbc[k] {
                let n = f[k].round();
                for m in 0..3 {
                    shift[m] -= n * cell[k][m];
                }
            }
        }
        shift
    }

    fn edge(&self, s: &Structure, i: usize, j: usize) -> Edge {
        let p = s.positions();
        let raw = sub(p[j], p[i]);
        let shift = self.image_shift(raw);
        let vector = [raw[0] + shift[0], raw[1] + shift[1], raw[2] + shift[2]];
        Edge { src: i, dst: j, shift, vector, distance: norm(vector) }
    }
}

/// Perpendicular widths of a cell.
pub fn thickness(c: &Mat3) -> Vec3 {
    let v = det3(c).abs();
    [v / norm(cross(c[1], c[2])), v / norm(cross(c[2], c[0])), v / norm(cross(c[0], c[1]))]
}

/// Minimum-image vector from atom `i` to atom `j`.
pub fn minimum_image(s: &Structure, i: usize, j: usize) -> Vec3 {
    let frame = Frame { cell: s.cell().copied(), inv: s.cell().map(inv3), pbc: s.pbc() };
    frame.edge(s, i, j).vector
}

/// All ordered pairs with distance ≤ cutoff (boundary inclusive),
/// sorted by `(src, dst)`.
pub fn neighbor_list(s: &Structure, cutoff: f64) -> Result<Vec<Edge>> {
    if s.len() <= BRUTE_FORCE_MAX_ATOMS {
        neighbor_list_brute(s, cutoff)
    } else {
        neighbor_list_cells(s, cutoff)
    }
}

pub fn neighbor_list_brute(s: &Structure, cutoff: f64) -> Result<Vec<Edge>> {
    let frame = Frame::new(s, cutoff)?;
    let n = s.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let e = frame.edge(s, i, j);
                if e.distance <= cutoff {
                    out.push(e);
                }
            }
        }
    }
    Ok(out)
}

/// Binned search. Produces the same edges as [`neighbor_list_brute`].
pub fn neighbor_list_cells(s: &Structure, cutoff: f64) -> Result<Vec<Edge>> {
    let frame = Frame::new(s, cutoff)?;
    let n = s.len();
    let widths = frame.cell.as_ref().map(thickness).unwrap_or([1.0; 3]);
    let fracs: Vec<Vec3> = s.positions().iter().map(|&p| frame.frac(p)).collect();

    let mut lo = [0.0; 3];
    let mut nbins = [1usize; 3];
    let mut bin_width = [1.0; 3];
    for k in 0..3 {
        // bin width in fractional units that spans at least one cutoff
        let w = cutoff / widths[k];
        if frame.pbc[k] {
            nbins[k] = ((1.0 / w).floor() as usize).max(1);
            bin_width[k] = 1.0 / nbins[k] as f64;
        } else {
            let min = fracs.iter().map(|f| f[k]).fold(f64::INFINITY, f64::min);
            let max = fracs.iter().map(|f| f[k]).fold(f64::NEG_INFINITY, f64::max);
            lo[k] = min;
            nbins[k] = (((max - min) / w).floor() as usize + 1).max(1);
            bin_width[k] = w;
        }
    }
    let bin_of = |f: Vec3| -> [usize; 3] {
        let mut b = [0usize; 3];
        for k in 0..3 {
            let x = if frame.pbc[k] { f[k] - f[k].floor() } else { f[k] - lo[k] };
            b[k] = ((x / bin_width[k]).floor() as usize).min(nbins[k] - 1);
        }
        b
    };
    let flat = |b: [usize; 3]| (b[0] * nbins[1] + b[1]) * nbins[2] + b[2];
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); nbins[0] * nbins[1] * nbins[2]];
    let atom_bins: Vec<[usize; 3]> = fracs.iter().map(|&f| bin_of(f)).collect();
    for (i, &b) in atom_bins.iter().enumerate() {
        bins[flat(b)].push(i);
    }

    let mut out = Vec::new();
    for i in 0..n {
        let b = atom_bins[i];
        let mut visited = BTreeSet::new();
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    let mut nb = [0usize; 3];
                    let mut ok = true;
                    for (k, d) in [dx, dy, dz].into_iter().enumerate() {
                        let m = nbins[k] as i64;
                        let x = b[k] as i64 + d;
                        if frame.pbc[k] {
                            nb[k] = x.rem_euclid(m) as usize;
                        } else if x < 0 || x >= m {
                            ok = false;
                        } else {
                            nb[k] = x as usize;
                        }
                    }
                    if ok && visited.insert(flat(nb)) {
                        for &j in &bins[flat(nb)] {
                            if j != i {
                                let e = frame.edge(s, i, j);
                                if e.distance <= cutoff {
                                    out.push(e);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out.sort_by_key(|e| (e.src, e.dst));
    Ok(out)
}
