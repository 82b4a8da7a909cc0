//! Rigid-body superposition and small geometric primitives.
//!
//! Coordinates are flat `[x0, y0, z0, x1, ...]` slices with an explicit
//! `spatial_dim`. One-dimensional systems only get centered, two-dimensional
//! ones are rotated by a single angle, three-dimensional ones use SVD-based
//! Kabsch with the reflection correction.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Proper rigid transform mapping a configuration onto a reference:
/// `aligned_i = rotation * x_i + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidAlignment {
    pub spatial_dim: usize,
    /// Row-major `spatial_dim x spatial_dim`.
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
    pub rmsd: f64,
}

impl RigidAlignment {
    pub fn rotation_entry(&self, row: usize, col: usize) -> f64 {
        self.rotation[row * self.spatial_dim + col]
    }

    /// Apply the transform to every particle of `x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.spatial_dim;
        let mut out = vec![0.0; x.len()];
        for (p, q) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for r in 0..d {
                let mut acc = self.translation[r];
                for c in 0..d {
                    acc += self.rotation[r * d + c] * p[c];
                }
                q[r] = acc;
            }
        }
        out
    }

    /// Map a per-particle gradient taken with respect to aligned coordinates
    /// back to the input frame, holding the rotation fixed. The centroid
    /// dependence on `x` contributes the mean-subtraction term.
    pub fn pull_back_gradient(&self, grad_aligned: &[f64]) -> Vec<f64> {
        let d = self.spatial_dim;
        let n = grad_aligned.len() / d;
        let mut out = vec![0.0; grad_aligned.len()];
        let mut mean = vec![0.0; d];
        for (g, o) in grad_aligned.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for c in 0..d {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += self.rotation[r * d + c] * g[r];
                }
                o[c] = acc;
                mean[c] += acc;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for o in out.chunks_exact_mut(d) {
            for c in 0..d {
                o[c] -= mean[c];
            }
        }
        out
    }
}

fn particle_count(len: usize, spatial_dim: usize) -> Result<usize> {
    if spatial_dim == 0 || spatial_dim > 3 {
        return Err(Error::InvalidParameter(format!(
            "spatial_dim must be 1, 2 or 3 (got {spatial_dim})"
        )));
    }
    if len % spatial_dim != 0 || len == 0 {
        return Err(Error::DimensionMismatch {
            expected: spatial_dim * len.div_ceil(spatial_dim).max(1),
            got: len,
        });
    }
    Ok(len / spatial_dim)
}

pub fn centroid(x: &[f64], spatial_dim: usize) -> Vec<f64> {
    let n = x.len() / spatial_dim;
    let mut c = vec![0.0; spatial_dim];
    for p in x.chunks_exact(spatial_dim) {
        for (ci, pi) in c.iter_mut().zip(p) {
            *ci += pi;
        }
    }
    for ci in &mut c {
        *ci /= n as f64;
    }
    c
}

fn centered(x: &[f64], spatial_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let c = centroid(x, spatial_dim);
    let mut out = x.to_vec();
    for p in out.chunks_exact_mut(spatial_dim) {
        for (pi, ci) in p.iter_mut().zip(&c) {
            *pi -= ci;
        }
    }
    (out, c)
}

fn optimal_rotation(xc: &[f64], rc: &[f64], d: usize) -> Vec<f64> {
    match d {
        1 => vec![1.0],
        2 => {
            let (mut dot, mut cross) = (0.0, 0.0);
            for (p, q) in xc.chunks_exact(2).zip(rc.chunks_exact(2)) {
                dot += p[0] * q[0] + p[1] * q[1];
                cross += p[0] * q[1] - p[1] * q[0];
            }
            let theta = cross.atan2(dot);
            let (s, c) = theta.sin_cos();
            vec![c, -s, s, c]
        }
        _ => {
            // H = sum_i x_i r_i^T, R = V diag(1, 1, d) U^T.
            let mut h = Matrix3::<f64>::zeros();
            for (p, q) in xc.chunks_exact(3).zip(rc.chunks_exact(3)) {
                h += Vector3::new(p[0], p[1], p[2]) * Vector3::new(q[0], q[1], q[2]).transpose();
            }
            let svd = h.svd(true, true);
            let u = svd.u.expect("requested U");
            let v_t = svd.v_t.expect("requested V^T");
            let v = v_t.transpose();
            let det = (v * u.transpose()).determinant();
            let mut flip = Matrix3::<f64>::identity();
            if det < 0.0 {
                let (weakest, _) = svd
                    .singular_values
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
                flip[(weakest, weakest)] = -1.0;
            }
            let r = v * flip * u.transpose();
            (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| r[(i, j)])
                .collect()
        }
    }
}

/// Superimpose `x` onto `reference` with the proper rigid motion that
/// minimizes the summed squared residual.
pub fn kabsch_align(x: &[f64], reference: &[f64], spatial_dim: usize) -> Result<(Vec<f64>, RigidAlignment)> {
    let n = particle_count(reference.len(), spatial_dim)?;
    if x.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: x.len(),
        });
    }
    let (xc, cx) = centered(x, spatial_dim);
    let (rc, cr) = centered(reference, spatial_dim);
    let rotation = optimal_rotation(&xc, &rc, spatial_dim);
    let d = spatial_dim;
    let mut translation = cr.clone();
    for r in 0..d {
        for c in 0..d {
            translation[r] -= rotation[r * d + c] * cx[c];
        }
    }
    let mut transform = RigidAlignment {
        spatial_dim,
        rotation,
        translation,
        rmsd: 0.0,
    };
    let aligned = transform.apply(x);
    let sq: f64 = aligned.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    transform.rmsd = (sq / n as f64).sqrt();
    Ok((aligned, transform))
}

/// RMSD after optimal superposition.
pub fn rmsd(x: &[f64], y: &[f64], spatial_dim: usize) -> Result<f64> {
    Ok(kabsch_align(x, y, spatial_dim)?.1.rmsd)
}

/// Per-particle RMSD with no superposition at all.
pub fn rmsd_unaligned(x: &[f64], y: &[f64], spatial_dim: usize) -> Result<f64> {
    let n = particle_count(y.len(), spatial_dim)?;
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: x.len(),
        });
    }
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / n as f64).sqrt())
}

fn sub(a: &[f64], b: &[f64]) -> Vector3<f64> {
    Vector3::new(a[0] - b[0], a[1] - b[1], a[2] - b[2])
}

/// Signed torsion angle of four 3D points in `(-pi, pi]` (trans = pi, cis = 0).
pub fn dihedral(p1: &[f64], p2: &[f64], p3: &[f64], p4: &[f64]) -> Result<f64> {
    let b1 = sub(p2, p1);
    let b2 = sub(p3, p2);
    let b3 = sub(p4, p3);
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    let tol = 1e-10;
    if n1.norm() <= tol * b1.norm() * b2.norm() || n2.norm() <= tol * b2.norm() * b3.norm() {
        return Err(Error::DegenerateGeometry("collinear consecutive points in dihedral"));
    }
    let y = b2.norm() * b1.dot(&n2);
    let x = n1.dot(&n2);
    let phi = y.atan2(x);
    Ok(if phi <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        phi
    })
}

/// Gradient of the dihedral with respect to the four points (flat, 12 entries).
pub fn dihedral_gradient(p1: &[f64], p2: &[f64], p3: &[f64], p4: &[f64]) -> Result<[f64; 12]> {
    // Bekker / Blondel-Karplus closed form.
    let f = sub(p1, p2);
    let g = sub(p2, p3);
    let h = sub(p4, p3);
    let a = f.cross(&g);
    let b = h.cross(&g);
    let gn = g.norm();
    let a2 = a.norm_squared();
    let b2 = b.norm_squared();
    if a2 <= 1e-20 * (f.norm_squared() * g.norm_squared()).max(f64::MIN_POSITIVE)
        || b2 <= 1e-20 * (h.norm_squared() * g.norm_squared()).max(f64::MIN_POSITIVE)
    {
        return Err(Error::DegenerateGeometry("collinear consecutive points in dihedral"));
    }
    let d1 = -gn / a2 * a;
    let d4 = gn / b2 * b;
    let fg = f.dot(&g) / (a2 * gn);
    let hg = h.dot(&g) / (b2 * gn);
    let d2 = gn / a2 * a + fg * a - hg * b;
    let d3 = hg * b - fg * a - gn / b2 * b;
    let mut out = [0.0; 12];
    for (k, v) in [d1, d2, d3, d4].iter().enumerate() {
        out[3 * k] = v.x;
        out[3 * k + 1] = v.y;
        out[3 * k + 2] = v.z;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn self_alignment_is_identity() {
        let x = [0.1, 0.2, 0.3, 1.0, -0.5, 0.2, 0.7, 0.9, -1.1, -0.4, 0.3, 0.8];
        let (aligned, t) = kabsch_align(&x, &x, 3).unwrap();
        assert!(t.rmsd < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((t.rotation_entry(i, j) - want).abs() < 1e-10);
            }
        }
        for (a, b) in aligned.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_alignment_only_centers() {
        assert_eq!(rmsd(&[0.0], &[3.0], 1).unwrap(), 0.0);
        let (aligned, _) = kabsch_align(&[0.0, 2.0], &[5.0, 6.0], 1).unwrap();
        assert_eq!(aligned, vec![4.5, 6.5]);
    }

    #[test]
    fn two_dimensional_rotation_recovered() {
        let reference = [0.0, 0.0, 1.0, 0.0, 0.0, 2.0];
        let (s, c) = 0.7f64.sin_cos();
        let moved: Vec<f64> = reference
            .chunks(2)
            .flat_map(|p| [c * p[0] - s * p[1] + 3.0, s * p[0] + c * p[1] - 1.0])
            .collect();
        assert!(rmsd(&moved, &reference, 2).unwrap() < 1e-12);
    }

    #[test]
    fn planar_dihedrals() {
        let anti = dihedral(&[1.0, 1.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, -1.0, 0.0]);
        assert!((anti.unwrap() - PI).abs() < 1e-15);
        let syn = dihedral(&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]);
        assert!(syn.unwrap().abs() < 1e-15);
    }

    #[test]
    fn collinear_dihedral_is_an_error() {
        let r = dihedral(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0], &[2.0, 1.0, 0.0]);
        assert!(matches!(r, Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(matches!(
            kabsch_align(&[0.0; 6], &[0.0; 9], 3),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
