//! Shared test oracles: a direct non-convolutional evaluation of the
//! similarity loss (explicit per-voxel fitted values, double loop over
//! centers and footprints) and small fixture builders.

use deformreg::basis::BasisModel;
use deformreg::field::{idx3, Field};
use deformreg::similarity::{LossVariant, SamplingGrid, WeightKernel};
use deformreg::volume::{smooth_masked, Volume};
use nalgebra::{DMatrix, DVector, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct NaiveLoss {
    pub value: f64,
    pub kept: usize,
    pub floor: f64,
}

/// Direct evaluation of the similarity loss: per center, gathers the
/// masked footprint voxels, solves the ridged normal equations with an
/// explicit inverse and accumulates the weighted squared residuals of
/// the fitted values voxel by voxel.
#[allow(clippy::too_many_arguments)]
pub fn naive_similarity_loss(
    target: &Field,
    target_mask: &Field,
    warped_moving: &Field,
    moving_mask: &Field,
    basis: &BasisModel,
    kernel: &WeightKernel,
    grid: &SamplingGrid,
    variant: LossVariant,
    ridge: f64,
    floor_rel: f64,
) -> NaiveLoss {
    let [ct, d, h, w] = target.dims4();
    let j = basis.terms;
    let feats = basis.eval(warped_moving).unwrap();
    let mask = target_mask.zip_map(moving_mask, |a, b| a * b);
    let taps = kernel.taps();
    let rad = kernel.radius();
    let cdims = grid.center_dims([d, h, w]);

    struct Center {
        res: Vec<f64>,
        tsq: Vec<f64>,
        var: Vec<f64>,
    }
    let mut centers: Vec<Center> = Vec::new();
    for zc in 0..cdims[0] {
        for yc in 0..cdims[1] {
            for xc in 0..cdims[2] {
                let (cz, cy, cx) = (
                    (grid.shift[0] + grid.stride[0] * zc) as isize,
                    (grid.shift[1] + grid.stride[1] * yc) as isize,
                    (grid.shift[2] + grid.stride[2] * xc) as isize,
                );
                if mask.data()[idx3(h, w, cx as usize, cy as usize, cz as usize)] != 1.0 {
                    continue;
                }
                // gather footprint voxels
                let mut rows: Vec<(f64, usize)> = Vec::new();
                for tz in -(rad[0] as isize)..=rad[0] as isize {
                    for ty in -(rad[1] as isize)..=rad[1] as isize {
                        for tx in -(rad[2] as isize)..=rad[2] as isize {
                            let (z, y, x) = (cz + tz, cy + ty, cx + tx);
                            if z < 0
                                || y < 0
                                || x < 0
                                || z >= d as isize
                                || y >= h as isize
                                || x >= w as isize
                            {
                                continue;
                            }
                            let idx = idx3(h, w, x as usize, y as usize, z as usize);
                            if mask.data()[idx] != 1.0 {
                                continue;
                            }
                            let wt = taps[0][(tz + rad[0] as isize) as usize]
                                * taps[1][(ty + rad[1] as isize) as usize]
                                * taps[2][(tx + rad[2] as isize) as usize];
                            rows.push((wt, idx));
                        }
                    }
                }
                if rows.is_empty() {
                    continue;
                }
                // ridged normal equations, explicit inverse
                let mut a = DMatrix::<f64>::zeros(j, j);
                for &(wt, idx) in &rows {
                    for r in 0..j {
                        for c in 0..j {
                            a[(r, c)] += wt * feats.channel(r)[idx] * feats.channel(c)[idx];
                        }
                    }
                }
                let tr: f64 = (0..j).map(|p| a[(p, p)]).sum();
                let ridged = &a + DMatrix::identity(j, j) * (ridge * tr / j as f64);
                let Some(inv) = ridged.try_inverse() else {
                    continue;
                };
                let wn: f64 = rows.iter().map(|&(wt, _)| wt).sum();
                let mut res = vec![0.0; ct];
                let mut tsq = vec![0.0; ct];
                let mut var = vec![0.0; ct];
                for c in 0..ct {
                    let mut b = DVector::<f64>::zeros(j);
                    let mut m1 = 0.0;
                    for &(wt, idx) in &rows {
                        let yv = target.channel(c)[idx];
                        tsq[c] += wt * yv * yv;
                        m1 += wt * yv;
                        for r in 0..j {
                            b[r] += wt * feats.channel(r)[idx] * yv;
                        }
                    }
                    let theta = &inv * b;
                    // explicit fitted value per voxel
                    for &(wt, idx) in &rows {
                        let mut f = 0.0;
                        for r in 0..j {
                            f += theta[r] * feats.channel(r)[idx];
                        }
                        let e = f - target.channel(c)[idx];
                        res[c] += wt * e * e;
                    }
                    var[c] = (tsq[c] - m1 * m1 / wn).max(0.0);
                }
                centers.push(Center { res, tsq, var });
            }
        }
    }

    let kept = centers.len();
    let mean_t: f64 = centers
        .iter()
        .map(|c| c.tsq.iter().sum::<f64>())
        .sum::<f64>()
        / kept as f64;
    let floor = floor_rel * mean_t + 1e-300;
    let value = match variant {
        LossVariant::Log => {
            centers
                .iter()
                .map(|c| (c.res.iter().sum::<f64>() + floor).ln())
                .sum::<f64>()
                / kept as f64
        }
        LossVariant::Normalized => {
            let mut acc = 0.0;
            for ch in 0..ct {
                let eps = floor_rel
                    * (centers.iter().map(|c| c.tsq[ch]).sum::<f64>() / kept as f64)
                    + 1e-300;
                acc += centers
                    .iter()
                    .map(|c| c.res[ch] / (c.var[ch] + eps))
                    .sum::<f64>();
            }
            acc / kept as f64
        }
    };
    NaiveLoss { value, kept, floor }
}

pub fn random_volume(c: usize, dims: [usize; 3], lo: f64, hi: f64, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = dims;
    Volume::all_valid(
        Field::from_vec(
            &[c, d, h, w],
            (0..c * d * h * w).map(|_| rng.gen_range(lo..hi)).collect(),
        )
        .unwrap(),
        Matrix4::identity(),
    )
    .unwrap()
}

/// Smooth random volume in [0, 1]: smoothed white noise, then affinely
/// mapped to the unit range.
pub fn smooth_volume(dims: [usize; 3], sigma: f64, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = dims;
    let ones = Field::filled(&[d, h, w], 1.0);
    let noise = Field::from_vec(
        &[d, h, w],
        (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let sm = smooth_masked(&noise, &ones, [sigma; 3]);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in sm.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let data = sm.map(|v| (v - lo) / (hi - lo));
    Volume::all_valid(
        data.reshape(&[1, d, h, w]).unwrap(),
        Matrix4::identity(),
    )
    .unwrap()
}

/// Smooth random 3-channel velocity with the requested max magnitude.
pub fn smooth_velocity_field(dims: [usize; 3], sigma: f64, amplitude: f64, seed: u64) -> Field {
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
    data
}
