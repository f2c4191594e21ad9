//! Stationary velocity fields and dense deformations: exponentiation by
//! scaling and squaring, warping, cross-resolution velocity transfer and
//! displacement-unit conversions.
//!
//! Velocities and displacements are stored in voxel units of their grid,
//! channel order `(i, j, k)`; conversions to world mm happen at I/O.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::field::{idx3, Field};
use crate::geometry::GridGeometry;
use crate::kernels;
use crate::tape::{NodeId, Tape};
use crate::volume::{sample_trilinear, Volume};

#[derive(Clone, Debug)]
pub struct VelocityField {
    /// `[3, d, h, w]` displacement rate in voxels.
    pub data: Field,
    pub geom: GridGeometry,
}

impl VelocityField {
    pub fn zeros(geom: GridGeometry) -> Self {
        let [d, h, w] = geom.dims;
        VelocityField {
            data: Field::zeros(&[3, d, h, w]),
            geom,
        }
    }

    pub fn new(data: Field, geom: GridGeometry) -> Result<Self> {
        let [d, h, w] = geom.dims;
        if data.shape() != [3, d, h, w] {
            return Err(Error::ShapeMismatch {
                what: "velocity field",
                expected: vec![3, d, h, w],
                found: data.shape().to_vec(),
            });
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("velocity field".into()));
        }
        Ok(VelocityField { data, geom })
    }
}

#[derive(Clone, Debug)]
pub struct DeformationField {
    /// `[3, d, h, w]` displacement `d(x) - x` in voxels.
    pub disp: Field,
    pub geom: GridGeometry,
}

impl DeformationField {
    pub fn identity(geom: GridGeometry) -> Self {
        let [d, h, w] = geom.dims;
        DeformationField {
            disp: Field::zeros(&[3, d, h, w]),
            geom,
        }
    }
}

/// Number of squarings so the scaled initial step stays below half a
/// voxel, never below the requested minimum.
pub fn adaptive_steps(max_abs: f64, requested: usize) -> usize {
    let mut steps = requested.max(1);
    while max_abs / (1u64 << steps) as f64 >= 0.5 && steps < 30 {
        steps += 1;
    }
    steps
}

/// Exponentiates a stationary velocity field by scaling and squaring:
/// the initial displacement `v / 2^steps` is self-composed `steps` times
/// via trilinear resampling. Returns the forward and inverse deformations
/// (the inverse runs the identical path on `-v`).
pub fn exponentiate(
    v: &VelocityField,
    steps: usize,
) -> Result<(DeformationField, DeformationField)> {
    if steps < 1 {
        return Err(Error::invalid("exponentiate requires steps >= 1"));
    }
    let fwd = exponentiate_one_direction(&v.data, steps)?;
    let neg = v.data.map(|x| -x);
    let inv = exponentiate_one_direction(&neg, steps)?;
    Ok((
        DeformationField {
            disp: fwd,
            geom: v.geom.clone(),
        },
        DeformationField {
            disp: inv,
            geom: v.geom.clone(),
        },
    ))
}

fn exponentiate_one_direction(v: &Field, steps: usize) -> Result<Field> {
    let steps = adaptive_steps(v.max_abs(), steps);
    let mut u = v.map(|x| x / (1u64 << steps) as f64);
    for _ in 0..steps {
        let (sampled, _) = kernels::sample_disp_forward(&u, &u);
        u = u.zip_map(&sampled, |a, b| a + b);
        if !u.all_finite() {
            return Err(Error::NonFinite("exponentiate".into()));
        }
    }
    Ok(u)
}

/// Tape version of `exponentiate` for one direction; negate the velocity
/// node first for the inverse.
pub fn exponentiate_node(tape: &mut Tape, v: NodeId, steps: usize) -> NodeId {
    let steps = adaptive_steps(tape.value(v).max_abs(), steps.max(1));
    let mut u = tape.scale(v, 1.0 / (1u64 << steps) as f64);
    for _ in 0..steps {
        let sampled = tape.sample_disp(u, u);
        u = tape.add(u, sampled);
    }
    u
}

/// Warps a volume by a deformation: `out(x) = vol(x + d(x))` with the
/// sample position mapped through world coordinates when the grids
/// differ. The output mask is the warped input mask (all eight sampled
/// corners valid) intersected with the inside-domain indicator.
pub fn warp(vol: &Volume, d: &DeformationField) -> Result<Volume> {
    let [dd, dh, dw] = d.geom.dims;
    let n = dd * dh * dw;
    let same_grid = d.geom.approx_eq(&vol.geom);
    let to_vol = vol.geom.inverse_affine() * d.geom.affine;
    let mut points = Field::zeros(&[3, dd, dh, dw]);
    {
        let (di, dj, dk) = (d.disp.channel(0), d.disp.channel(1), d.disp.channel(2));
        let pts = points.data_mut();
        for z in 0..dd {
            for y in 0..dh {
                for x in 0..dw {
                    let idx = idx3(dh, dw, x, y, z);
                    let (px, py, pz) = (
                        x as f64 + di[idx],
                        y as f64 + dj[idx],
                        z as f64 + dk[idx],
                    );
                    let (px, py, pz) = if same_grid {
                        (px, py, pz)
                    } else {
                        let q = to_vol * nalgebra::Vector4::new(px, py, pz, 1.0);
                        (q[0], q[1], q[2])
                    };
                    pts[idx] = px;
                    pts[n + idx] = py;
                    pts[2 * n + idx] = pz;
                }
            }
        }
    }
    let (values, inside) = sample_trilinear(&vol.data, &points);
    let (mask_warp, _) = sample_trilinear(
        &vol.mask.clone().reshape(&[1, vol.geom.dims[0], vol.geom.dims[1], vol.geom.dims[2]])?,
        &points,
    );
    let mask = inside.zip_map(
        &mask_warp.reshape(&[dd, dh, dw])?,
        |ins, m| if ins == 1.0 && m >= 0.999 { 1.0 } else { 0.0 },
    );
    Volume::new(values, d.geom.affine, mask)
}

/// Warped validity mask of a volume under a voxel-unit displacement on
/// the same grid: inside-domain and all sampled corners valid.
pub fn warp_mask_same_grid(mask: &Field, disp: &Field) -> Field {
    let [d, h, w] = mask.dims3();
    let as4 = mask.clone().reshape(&[1, d, h, w]).expect("mask rank");
    let (values, inside) = kernels::sample_disp_forward(&as4, disp);
    inside.zip_map(
        &values.reshape(&[d, h, w]).expect("mask shape"),
        |ins, m| if ins == 1.0 && m >= 0.999 { 1.0 } else { 0.0 },
    )
}

/// Resamples a velocity field onto a finer grid, rescaling the voxel-unit
/// values so the world-space action is preserved.
pub fn upsample_velocity(v: &VelocityField, target: &GridGeometry) -> Result<VelocityField> {
    let src_spacing = v.geom.spacing();
    let tgt_spacing = target.spacing();
    if tgt_spacing.iter().zip(&src_spacing).any(|(t, s)| t > s) {
        return Err(Error::invalid(
            "upsample_velocity target must be at least as fine as the source",
        ));
    }
    // the grids must cover the same world box up to one coarse voxel
    let src_corner = v.geom.voxel_to_world([
        (v.geom.dims[2] - 1) as f64,
        (v.geom.dims[1] - 1) as f64,
        (v.geom.dims[0] - 1) as f64,
    ]);
    let tgt_corner = target.voxel_to_world([
        (target.dims[2] - 1) as f64,
        (target.dims[1] - 1) as f64,
        (target.dims[0] - 1) as f64,
    ]);
    let org_src = v.geom.voxel_to_world([0.0; 3]);
    let org_tgt = target.voxel_to_world([0.0; 3]);
    let slack: f64 = src_spacing.iter().cloned().fold(0.0, f64::max) * 2.0;
    for i in 0..3 {
        if (org_src[i] - org_tgt[i]).abs() > slack || (src_corner[i] - tgt_corner[i]).abs() > slack
        {
            return Err(Error::invalid(
                "upsample_velocity grids do not cover the same world extent",
            ));
        }
    }

    let [td, th, tw] = target.dims;
    let n = td * th * tw;
    let to_src = v.geom.inverse_affine() * target.affine;
    let mut points = Field::zeros(&[3, td, th, tw]);
    {
        let pts = points.data_mut();
        let [sd, sh, sw] = v.geom.dims;
        for z in 0..td {
            for y in 0..th {
                for x in 0..tw {
                    let q = to_src * nalgebra::Vector4::new(x as f64, y as f64, z as f64, 1.0);
                    let idx = idx3(th, tw, x, y, z);
                    // clamp to the source box: edge replication at the fringe
                    pts[idx] = q[0].clamp(0.0, (sw - 1) as f64);
                    pts[n + idx] = q[1].clamp(0.0, (sh - 1) as f64);
                    pts[2 * n + idx] = q[2].clamp(0.0, (sd - 1) as f64);
                }
            }
        }
    }
    let (mut values, _) = sample_trilinear(&v.data, &points);
    for c in 0..3 {
        let scale = src_spacing[c] / tgt_spacing[c];
        for val in values.channel_mut(c) {
            *val *= scale;
        }
    }
    VelocityField::new(values, target.clone())
}

/// Composition `T_outer(T_inner(x))` of two deformations on one grid:
/// `d(x) = d_in(x) + d_out(x + d_in(x))`.
pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    if !outer.geom.approx_eq(&inner.geom) {
        return Err(Error::invalid("compose requires matching grids"));
    }
    let (sampled, _) = kernels::sample_disp_forward(&outer.disp, &inner.disp);
    Ok(DeformationField {
        disp: inner.disp.zip_map(&sampled, |a, b| a + b),
        geom: inner.geom.clone(),
    })
}

/// Jacobian determinant of `x + d(x)` by central differences; border
/// voxels are reported as 1.
pub fn jacobian_determinant(d: &DeformationField) -> Field {
    let [dd, dh, dw] = d.geom.dims;
    let mut out = Field::filled(&[dd, dh, dw], 1.0);
    let (di, dj, dk) = (d.disp.channel(0), d.disp.channel(1), d.disp.channel(2));
    for z in 1..dd.saturating_sub(1) {
        for y in 1..dh.saturating_sub(1) {
            for x in 1..dw.saturating_sub(1) {
                let grad = |f: &[f64], axis: usize| -> f64 {
                    let (step, _) = match axis {
                        0 => (1isize, dw),
                        1 => (dw as isize, dh),
                        _ => ((dh * dw) as isize, dd),
                    };
                    let idx = idx3(dh, dw, x, y, z) as isize;
                    (f[(idx + step) as usize] - f[(idx - step) as usize]) / 2.0
                };
                let mut m = Matrix3::identity();
                for (row, f) in [di, dj, dk].iter().enumerate() {
                    for axis in 0..3 {
                        m[(row, axis)] += grad(f, axis);
                    }
                }
                out.data_mut()[idx3(dh, dw, x, y, z)] = m.determinant();
            }
        }
    }
    out
}

/// Converts voxel-unit displacements to world-mm vectors through the
/// linear part of the affine.
pub fn displacement_to_world(d: &DeformationField) -> Field {
    linear_map_channels(&d.disp, &d.geom.affine.fixed_view::<3, 3>(0, 0).into())
}

/// Converts world-mm displacement vectors to voxel units of `geom`.
pub fn displacement_to_voxels(disp_mm: &Field, geom: &GridGeometry) -> Field {
    let lin: Matrix3<f64> = geom.affine.fixed_view::<3, 3>(0, 0).into();
    let inv = lin.try_inverse().expect("invertible affine");
    linear_map_channels(disp_mm, &inv)
}

fn linear_map_channels(disp: &Field, m: &Matrix3<f64>) -> Field {
    let n = disp.channel_len();
    let mut out = Field::zeros(disp.shape());
    for i in 0..n {
        let v = Vector3::new(
            disp.channel(0)[i],
            disp.channel(1)[i],
            disp.channel(2)[i],
        );
        let r = m * v;
        out.channel_mut(0)[i] = r[0];
        out.channel_mut(1)[i] = r[1];
        out.channel_mut(2)[i] = r[2];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::smooth_masked;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_geom(dims: [usize; 3]) -> GridGeometry {
        GridGeometry::axis_aligned(dims, [1.0; 3]).unwrap()
    }

    fn smooth_velocity(dims: [usize; 3], sigma: f64, amplitude: f64, seed: u64) -> VelocityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [d, h, w] = dims;
        let ones = Field::filled(&[d, h, w], 1.0);
        let mut data = Field::zeros(&[3, d, h, w]);
        for c in 0..3 {
            let noise = Field::from_vec(
                &[d, h, w],
                (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let sm = smooth_masked(&noise, &ones, [sigma; 3]);
            data.channel_mut(c).copy_from_slice(sm.data());
        }
        let max = data.max_abs();
        data.scale_in_place(amplitude / max);
        VelocityField::new(data, unit_geom(dims)).unwrap()
    }

    #[test]
    fn zero_velocity_exponentiates_to_identity() {
        let v = VelocityField::zeros(unit_geom([6, 6, 6]));
        let (fwd, inv) = exponentiate(&v, 4).unwrap();
        assert!(fwd.disp.data().iter().all(|&x| x == 0.0));
        assert!(inv.disp.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_velocity_is_a_translation_in_the_interior() {
        // border bands are contaminated by the zero extension, roughly
        // one voxel per squaring plus the total travel; stay well inside
        let dims = [16, 16, 16];
        let c = [1.5, -1.0, 0.5];
        let mut data = Field::zeros(&[3, 16, 16, 16]);
        for ch in 0..3 {
            data.channel_mut(ch).fill(c[ch]);
        }
        let v = VelocityField::new(data, unit_geom(dims)).unwrap();
        let (fwd, inv) = exponentiate(&v, 4).unwrap();
        for z in 6..10 {
            for y in 6..10 {
                for x in 6..10 {
                    let idx = idx3(16, 16, x, y, z);
                    for ch in 0..3 {
                        assert!((fwd.disp.channel(ch)[idx] - c[ch]).abs() < 1e-9);
                        assert!((inv.disp.channel(ch)[idx] + c[ch]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_of_negated_equals_inverse_bitwise() {
        let v = smooth_velocity([10, 10, 10], 3.0, 1.0, 1);
        let (_, inv) = exponentiate(&v, 5).unwrap();
        let neg = VelocityField::new(v.data.map(|x| -x), v.geom.clone()).unwrap();
        let (fwd_neg, _) = exponentiate(&neg, 5).unwrap();
        assert_eq!(inv.disp.data(), fwd_neg.disp.data());
    }

    #[test]
    fn forward_inverse_composition_is_near_identity() {
        let v = smooth_velocity([16, 16, 16], 4.0, 1.0, 2);
        let (fwd, inv) = exponentiate(&v, 7).unwrap();
        let round = compose(&inv, &fwd).unwrap();
        let [_, dd, dh, dw] = round.disp.dims4();
        let mut max_err = 0.0_f64;
        for z in 2..dd - 2 {
            for y in 2..dh - 2 {
                for x in 2..dw - 2 {
                    let idx = idx3(dh, dw, x, y, z);
                    let e = (round.disp.channel(0)[idx].powi(2)
                        + round.disp.channel(1)[idx].powi(2)
                        + round.disp.channel(2)[idx].powi(2))
                    .sqrt();
                    max_err = max_err.max(e);
                }
            }
        }
        assert!(max_err < 0.05, "round-trip error {max_err}");
    }

    #[test]
    fn jacobian_stays_positive_for_moderate_fields() {
        let v = smooth_velocity([14, 14, 14], 2.0, 2.0, 3);
        let (fwd, _) = exponentiate(&v, 7).unwrap();
        let det = jacobian_determinant(&fwd);
        let [dd, dh, dw] = det.dims3();
        for z in 1..dd - 1 {
            for y in 1..dh - 1 {
                for x in 1..dw - 1 {
                    assert!(det.data()[idx3(dh, dw, x, y, z)] > 0.0);
                }
            }
        }
    }

    #[test]
    fn tape_exponentiate_matches_eager() {
        let v = smooth_velocity([9, 9, 9], 3.0, 0.8, 4);
        let (fwd, _) = exponentiate(&v, 4).unwrap();
        let mut tape = Tape::new();
        let nv = tape.leaf(v.data.clone());
        let node = exponentiate_node(&mut tape, nv, 4);
        assert_eq!(tape.value(node).data(), fwd.disp.data());
    }

    #[test]
    fn warp_identity_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Field::from_vec(
            &[2, 5, 5, 5],
            (0..2 * 125).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let vol = Volume::all_valid(data, Matrix4::identity()).unwrap();
        let d = DeformationField::identity(vol.geom.clone());
        let out = warp(&vol, &d).unwrap();
        assert_eq!(out.data.data(), vol.data.data());
        assert!(out.mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn warp_integer_translation_shifts_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = Field::from_vec(
            &[1, 4, 4, 6],
            (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let vol = Volume::all_valid(data, Matrix4::identity()).unwrap();
        let mut d = DeformationField::identity(vol.geom.clone());
        d.disp.channel_mut(0).fill(1.0); // sample from x+1
        let out = warp(&vol, &d).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..5 {
                    let got = out.data.channel(0)[idx3(4, 6, x, y, z)];
                    let expect = vol.data.channel(0)[idx3(4, 6, x + 1, y, z)];
                    assert_eq!(got, expect);
                    assert_eq!(out.mask.data()[idx3(4, 6, x, y, z)], 1.0);
                }
                // last column samples outside
                assert_eq!(out.mask.data()[idx3(4, 6, 5, y, z)], 0.0);
            }
        }
    }

    #[test]
    fn warp_matches_pointwise_trilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = Field::from_vec(
            &[1, 6, 6, 6],
            (0..216).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let vol = Volume::all_valid(data, Matrix4::identity()).unwrap();
        let mut d = DeformationField::identity(vol.geom.clone());
        for v in d.disp.data_mut() {
            *v = rng.gen_range(-1.3..1.3);
        }
        let out = warp(&vol, &d).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let idx = idx3(6, 6, x, y, z);
                    let p = [
                        x as f64 + d.disp.channel(0)[idx],
                        y as f64 + d.disp.channel(1)[idx],
                        z as f64 + d.disp.channel(2)[idx],
                    ];
                    let inside = p.iter().all(|&q| (0.0..=5.0).contains(&q));
                    if !inside {
                        assert_eq!(out.mask.data()[idx], 0.0);
                        continue;
                    }
                    // independent corner-blend oracle
                    let f = [p[0].fract(), p[1].fract(), p[2].fract()];
                    let c0 = [
                        (p[0].floor() as usize).min(4),
                        (p[1].floor() as usize).min(4),
                        (p[2].floor() as usize).min(4),
                    ];
                    let mut expect = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let wt = (if dx == 0 { 1.0 - f[0] } else { f[0] })
                                    * (if dy == 0 { 1.0 - f[1] } else { f[1] })
                                    * (if dz == 0 { 1.0 - f[2] } else { f[2] });
                                expect += wt
                                    * vol.data.channel(0)
                                        [idx3(6, 6, c0[0] + dx, c0[1] + dy, c0[2] + dz)];
                            }
                        }
                    }
                    assert!((out.data.channel(0)[idx] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_is_linear_in_volume_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            Volume::all_valid(
                Field::from_vec(&[1, 5, 5, 5], (0..125).map(|_| r.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
                Matrix4::identity(),
            )
            .unwrap()
        };
        let v1 = mk(80);
        let v2 = mk(81);
        let combo = Volume::all_valid(
            v1.data.zip_map(&v2.data, |a, b| 2.0 * a - 0.5 * b),
            Matrix4::identity(),
        )
        .unwrap();
        let mut d = DeformationField::identity(v1.geom.clone());
        for v in d.disp.data_mut() {
            *v = rng.gen_range(-0.9..0.9);
        }
        let w1 = warp(&v1, &d).unwrap();
        let w2 = warp(&v2, &d).unwrap();
        let wc = warp(&combo, &d).unwrap();
        for i in 0..125 {
            let expect = 2.0 * w1.data.data()[i] - 0.5 * w2.data.data()[i];
            assert!((wc.data.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_zero_and_constant_fields() {
        let coarse_geom = unit_geom([5, 5, 5]).subsampled(1).unwrap();
        let coarse = GridGeometry::axis_aligned([5, 5, 5], [2.0; 3]).unwrap();
        let fine = GridGeometry::axis_aligned([9, 9, 9], [1.0; 3]).unwrap();
        drop(coarse_geom);

        let zeros = VelocityField::zeros(coarse.clone());
        let up = upsample_velocity(&zeros, &fine).unwrap();
        assert!(up.data.data().iter().all(|&x| x == 0.0));

        let mut data = Field::zeros(&[3, 5, 5, 5]);
        for c in 0..3 {
            data.channel_mut(c).fill(0.75);
        }
        let v = VelocityField::new(data, coarse).unwrap();
        let up = upsample_velocity(&v, &fine).unwrap();
        // 0.75 coarse voxels = 1.5 fine voxels (same mm)
        for c in 0..3 {
            for &val in up.data.channel(c) {
                assert!((val - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_reproduces_linear_fields_exactly() {
        let coarse = GridGeometry::axis_aligned([5, 5, 5], [2.0; 3]).unwrap();
        let fine = GridGeometry::axis_aligned([9, 9, 9], [1.0; 3]).unwrap();
        let mut data = Field::zeros(&[3, 5, 5, 5]);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let idx = idx3(5, 5, x, y, z);
                    data.channel_mut(0)[idx] = 0.25 * x as f64 - 0.125 * y as f64;
                    data.channel_mut(1)[idx] = 0.5 * z as f64;
                    data.channel_mut(2)[idx] = 0.0625 * x as f64 + 0.25;
                }
            }
        }
        let v = VelocityField::new(data, coarse).unwrap();
        let up = upsample_velocity(&v, &fine).unwrap();
        for z in 0..9 {
            for y in 0..9 {
                for x in 0..9 {
                    let idx = idx3(9, 9, x, y, z);
                    // source voxel coordinates are half the fine ones
                    let (sx, sy, sz) = (x as f64 / 2.0, y as f64 / 2.0, z as f64 / 2.0);
                    let expect0 = (0.25 * sx - 0.125 * sy) * 2.0;
                    let expect1 = (0.5 * sz) * 2.0;
                    let expect2 = (0.0625 * sx + 0.25) * 2.0;
                    assert!((up.data.channel(0)[idx] - expect0).abs() < 1e-12);
                    assert!((up.data.channel(1)[idx] - expect1).abs() < 1e-12);
                    assert!((up.data.channel(2)[idx] - expect2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_rejects_mismatched_world_extent() {
        let coarse = GridGeometry::axis_aligned([5, 5, 5], [2.0; 3]).unwrap();
        let fine = GridGeometry::axis_aligned([30, 9, 9], [1.0; 3]).unwrap();
        let v = VelocityField::zeros(coarse);
        assert!(upsample_velocity(&v, &fine).is_err());
    }

    #[test]
    fn displacement_unit_round_trip() {
        let geom = GridGeometry::axis_aligned([4, 4, 4], [0.7, 1.3, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = DeformationField {
            disp: Field::from_vec(
                &[3, 4, 4, 4],
                (0..192).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap(),
            geom: geom.clone(),
        };
        let mm = displacement_to_world(&d);
        // voxel 1.0 along i equals spacing_i mm
        let vox = displacement_to_voxels(&mm, &geom);
        for (a, b) in vox.data().iter().zip(d.disp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
