//! Loss-level properties: equivalence of the convolutional evaluation
//! with the direct per-voxel form, scale invariance of the log variant,
//! grid-shift averaging, the weighted-correlation identity of the
//! normalized affine case, coefficient optimality, warp sensitivity and
//! the detached-vs-through-solve gradient agreement.

mod common;

use common::*;
use deformreg::basis::BasisModel;
use deformreg::field::{idx3, Field};
use deformreg::similarity::{
    bidirectional_loss_node, compute_moments, direction_loss_node, similarity_loss,
    solve_local_wls, LossOptions, LossVariant, SamplingGrid, WeightKernel,
};
use deformreg::svf::{exponentiate, exponentiate_node, warp, warp_mask_same_grid, VelocityField};
use deformreg::tape::Tape;
use deformreg::volume::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-30)
}

#[test]
fn convolutional_loss_matches_naive_evaluation() {
    for (seed, j, variant) in [
        (1u64, 2usize, LossVariant::Log),
        (2, 3, LossVariant::Log),
        (3, 4, LossVariant::Normalized),
        (4, 2, LossVariant::Normalized),
    ] {
        let dims = [16, 16, 16];
        let vol_a = smooth_volume(dims, 2.0, seed * 100);
        let vol_b = smooth_volume(dims, 2.0, seed * 100 + 1);
        // misalign B by a smooth warp
        let v = VelocityField::new(
            smooth_velocity_field(dims, 3.0, 1.0, seed * 100 + 2),
            vol_b.geom.clone(),
        )
        .unwrap();
        let (fwd, _) = exponentiate(&v, 4).unwrap();
        let warped_b = warp(&vol_b, &fwd).unwrap();

        let basis = if j == 4 {
            BasisModel::init_learned(j, 1, seed).unwrap()
        } else {
            BasisModel::polynomial(j - 1, 1).unwrap()
        };
        let kernel = WeightKernel::isotropic(1.5).unwrap();
        let mut opts = LossOptions::new(kernel.clone(), variant);
        opts.ridge = 1e-6;
        let grid = SamplingGrid::new([3; 3], [1, 0, 2]).unwrap();

        let got = similarity_loss(&vol_a, &warped_b, &basis, &opts, &grid).unwrap();
        let naive = naive_similarity_loss(
            &vol_a.data,
            &vol_a.mask,
            &warped_b.data,
            &warped_b.mask,
            &basis,
            &kernel,
            &grid,
            variant,
            opts.ridge,
            opts.floor_rel,
        );
        assert_eq!(got.kept, naive.kept);
        assert!(
            rel_err(got.value, naive.value) < 1e-9,
            "seed {seed} j {j}: conv {} vs naive {}",
            got.value,
            naive.value
        );
    }
}

#[test]
fn log_variant_is_scale_invariant_in_gradients() {
    let dims = [12, 12, 12];
    let vol_a = smooth_volume(dims, 2.0, 50);
    let vol_b = smooth_volume(dims, 2.0, 51);
    let vdata = smooth_velocity_field(dims, 3.0, 0.8, 52);
    let basis = BasisModel::init_learned(4, 1, 53).unwrap();
    let opts = LossOptions::new(WeightKernel::isotropic(2.0).unwrap(), LossVariant::Log);
    let grid = SamplingGrid::new([3; 3], [0, 1, 2]).unwrap();

    let run = |scale: f64| -> (f64, Field, Vec<f64>) {
        let scaled = Volume::new(
            vol_a.data.map(|x| scale * x),
            vol_a.geom.affine,
            vol_a.mask.clone(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(vdata.clone());
        let fwd = exponentiate_node(&mut tape, v, 4);
        let b_leaf = tape.constant(vol_b.data.clone());
        let warped = tape.sample_disp(b_leaf, fwd);
        let b_mask = warp_mask_same_grid(&vol_b.mask, tape.value(fwd));
        let params = basis.bind_params(&mut tape);
        let (loss, _) = direction_loss_node(
            &mut tape,
            &scaled.data,
            &scaled.mask,
            warped,
            &b_mask,
            &basis,
            &params,
            &opts,
            &grid,
        )
        .unwrap();
        let value = tape.value(loss).as_scalar();
        let mut grads = tape.backward(loss).unwrap();
        let dv = grads.take(v, vdata.shape());
        let domega = basis.collect_grad(&mut grads, &params);
        (value, dv, domega)
    };

    let (l1, dv1, dw1) = run(1.0);
    for c in [0.1, 10.0] {
        let (lc, dvc, dwc) = run(c);
        // additive shift 2 ln c per (channel-summed) log residual
        assert!(
            (lc - l1 - 2.0 * c.ln()).abs() < 1e-10 * lc.abs().max(1.0),
            "c={c}: loss shift {} vs {}",
            lc - l1,
            2.0 * c.ln()
        );
        let vmax = dv1.max_abs();
        for (a, b) in dv1.data().iter().zip(dvc.data()) {
            let denom = a.abs().max(b.abs()).max(1e-10 * vmax);
            assert!((a - b).abs() / denom < 1e-10, "velocity gradient changed: {a} vs {b}");
        }
        let wmax = dw1.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for (a, b) in dw1.iter().zip(&dwc) {
            let denom = a.abs().max(b.abs()).max(1e-10 * wmax);
            assert!((a - b).abs() / denom < 1e-10, "omega gradient changed: {a} vs {b}");
        }
    }
}

#[test]
fn shift_average_equals_dense_loss() {
    let dims = [12, 12, 12];
    let vol_a = smooth_volume(dims, 1.5, 60);
    let vol_b = smooth_volume(dims, 1.5, 61);
    let basis = BasisModel::polynomial(2, 1).unwrap();
    let kernel = WeightKernel::isotropic(1.0).unwrap();
    let mut opts = LossOptions::new(kernel, LossVariant::Log);
    opts.floor_rel = 0.0; // the floor depends on the center set; drop it

    let dense = similarity_loss(&vol_a, &vol_b, &basis, &opts, &SamplingGrid::dense()).unwrap();

    let stride = 2;
    let mut weighted = 0.0;
    let mut total_kept = 0usize;
    for sz in 0..stride {
        for sy in 0..stride {
            for sx in 0..stride {
                let grid = SamplingGrid::new([stride; 3], [sz, sy, sx]).unwrap();
                let lv = similarity_loss(&vol_a, &vol_b, &basis, &opts, &grid).unwrap();
                weighted += lv.value * lv.kept as f64;
                total_kept += lv.kept;
            }
        }
    }
    assert_eq!(total_kept, dense.kept);
    let averaged = weighted / total_kept as f64;
    assert!(
        rel_err(averaged, dense.value) < 1e-10,
        "averaged {averaged} vs dense {}",
        dense.value
    );
}

#[test]
fn normalized_affine_basis_equals_one_minus_squared_correlation() {
    let dims = [10, 10, 10];
    let vol_a = smooth_volume(dims, 1.2, 70);
    let vol_b = smooth_volume(dims, 1.2, 71);
    let basis = BasisModel::polynomial(1, 1).unwrap(); // {1, x}
    let kernel = WeightKernel::isotropic(1.5).unwrap();
    let mut opts = LossOptions::new(kernel.clone(), LossVariant::Normalized);
    opts.ridge = 0.0;
    opts.floor_rel = 0.0;
    let grid = SamplingGrid::uniform(2);
    let lv = similarity_loss(&vol_a, &vol_b, &basis, &opts, &grid).unwrap();

    // direct weighted-correlation oracle per center
    let [d, h, w] = dims;
    let rad = kernel.radius();
    let taps = kernel.taps();
    let cdims = grid.center_dims(dims);
    let mut acc = 0.0;
    let mut count = 0usize;
    for zc in 0..cdims[0] {
        for yc in 0..cdims[1] {
            for xc in 0..cdims[2] {
                let (cz, cy, cx) = (
                    (grid.stride[0] * zc) as isize,
                    (grid.stride[1] * yc) as isize,
                    (grid.stride[2] * xc) as isize,
                );
                let (mut sw, mut sx, mut sy, mut sxx, mut syy, mut sxy) =
                    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for tz in -(rad[0] as isize)..=rad[0] as isize {
                    for ty in -(rad[1] as isize)..=rad[1] as isize {
                        for tx in -(rad[2] as isize)..=rad[2] as isize {
                            let (z, y, x) = (cz + tz, cy + ty, cx + tx);
                            if z < 0 || y < 0 || x < 0
                                || z >= d as isize || y >= h as isize || x >= w as isize
                            {
                                continue;
                            }
                            let wt = taps[0][(tz + rad[0] as isize) as usize]
                                * taps[1][(ty + rad[1] as isize) as usize]
                                * taps[2][(tx + rad[2] as isize) as usize];
                            let idx = idx3(h, w, x as usize, y as usize, z as usize);
                            let xv = vol_b.data.channel(0)[idx];
                            let yv = vol_a.data.channel(0)[idx];
                            sw += wt;
                            sx += wt * xv;
                            sy += wt * yv;
                            sxx += wt * xv * xv;
                            syy += wt * yv * yv;
                            sxy += wt * xv * yv;
                        }
                    }
                }
                let vxx = sxx - sx * sx / sw;
                let vyy = syy - sy * sy / sw;
                let vxy = sxy - sx * sy / sw;
                let rho2 = vxy * vxy / (vxx * vyy);
                acc += 1.0 - rho2;
                count += 1;
            }
        }
    }
    let expect = acc / count as f64;
    assert_eq!(count, lv.kept);
    assert!(
        (lv.value - expect).abs() < 1e-8,
        "normalized loss {} vs 1 - rho^2 mean {expect}",
        lv.value
    );
}

#[test]
fn fitted_coefficients_minimize_per_center_residual() {
    let dims = [10, 10, 10];
    let vol_a = smooth_volume(dims, 1.2, 80);
    let vol_b = smooth_volume(dims, 1.2, 81);
    let basis = BasisModel::polynomial(2, 1).unwrap();
    let kernel = WeightKernel::isotropic(1.5).unwrap();
    let grid = SamplingGrid::uniform(3);
    let feats = basis.eval(&vol_b.data).unwrap();
    let m = compute_moments(&vol_a.data, &feats, &vol_a.mask, &kernel, &grid).unwrap();
    let sol = solve_local_wls(&m, 0.0).unwrap();
    assert_eq!(sol.dropped, 0);

    let j = basis.terms;
    let n = sol.solved.len();
    let res_at = |i: usize, th: &[f64]| -> f64 {
        let mut quad = 0.0;
        let mut dotc = 0.0;
        for r in 0..j {
            for c in 0..j {
                quad += th[r] * m.gram.data()[i * j * j + r * j + c] * th[c];
            }
            dotc += th[r] * m.cross.data()[i * j + r];
        }
        quad - 2.0 * dotc + m.target_sq.data()[i]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    for i in (0..n).step_by(7) {
        let theta = &sol.theta.data()[i * j..(i + 1) * j];
        let base = res_at(i, theta);
        for _ in 0..20 {
            let mut dir: Vec<f64> = (0..j).map(|_| rng.gen_range(-1.0..1.0_f64)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut dir {
                *v *= 1e-3 / norm;
            }
            for sign in [-1.0, 1.0] {
                let pert: Vec<f64> = theta
                    .iter()
                    .zip(&dir)
                    .map(|(t, d)| t + sign * d)
                    .collect();
                let r = res_at(i, &pert);
                assert!(
                    r >= base - 1e-12 * (1.0 + base.abs()),
                    "center {i}: perturbed residual {r} below optimum {base}"
                );
            }
        }
    }
}

#[test]
fn true_alignment_beats_perturbations() {
    let dims = [16, 16, 16];
    let vol_b = smooth_volume(dims, 2.0, 90);
    let vdata = smooth_velocity_field(dims, 4.0, 1.2, 91);
    let v_true = VelocityField::new(vdata.clone(), vol_b.geom.clone()).unwrap();
    let (fwd, _) = exponentiate(&v_true, 5).unwrap();
    let aligned_b = warp(&vol_b, &fwd).unwrap();
    // target: quadratic functional map of the aligned moving image
    let vol_a = Volume::new(
        aligned_b.data.map(|x| 0.15 + 0.5 * x + 0.35 * x * x),
        aligned_b.geom.affine,
        aligned_b.mask.clone(),
    )
    .unwrap();

    let basis = BasisModel::polynomial(2, 1).unwrap();
    let opts = LossOptions::new(WeightKernel::isotropic(2.0).unwrap(), LossVariant::Log);
    let grid = SamplingGrid::uniform(3);

    let loss_of = |vel: &VelocityField| -> f64 {
        let (f, _) = exponentiate(vel, 5).unwrap();
        let warped = warp(&vol_b, &f).unwrap();
        similarity_loss(&vol_a, &warped, &basis, &opts, &grid)
            .unwrap()
            .value
    };
    let at_truth = loss_of(&v_true);
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    for _ in 0..10 {
        let mut pert = vdata.clone();
        for v in pert.data_mut() {
            // Box-Muller normal perturbation, sigma = 0.5 voxel
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v += 0.5 * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
        let vp = VelocityField::new(pert, vol_b.geom.clone()).unwrap();
        let l = loss_of(&vp);
        assert!(
            at_truth < l,
            "true alignment {at_truth} should beat perturbation {l}"
        );
    }
}

#[test]
fn detached_and_through_solve_gradients_agree() {
    let dims = [12, 12, 12];
    let vol_a = smooth_volume(dims, 2.0, 95);
    let vol_b = smooth_volume(dims, 2.0, 96);
    let vdata = smooth_velocity_field(dims, 3.0, 0.7, 97);
    let basis_ab = BasisModel::init_learned(3, 1, 98).unwrap();
    let basis_ba = BasisModel::init_learned(3, 1, 99).unwrap();
    let grid_ab = SamplingGrid::new([3; 3], [1, 2, 0]).unwrap();
    let grid_ba = SamplingGrid::new([3; 3], [2, 0, 1]).unwrap();

    let run = |detach: bool| -> (Field, Vec<f64>) {
        let mut opts = LossOptions::new(WeightKernel::isotropic(2.0).unwrap(), LossVariant::Log);
        opts.detach_coefficients = detach;
        let mut tape = Tape::new();
        let v = tape.leaf(vdata.clone());
        let params_ab = basis_ab.bind_params(&mut tape);
        let params_ba = basis_ba.bind_params(&mut tape);
        let (loss, _, _) = bidirectional_loss_node(
            &mut tape, &vol_a, &vol_b, v, 4, &basis_ab, &params_ab, &basis_ba, &params_ba,
            &opts, &grid_ab, &grid_ba,
        )
        .unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let dv = grads.take(v, vdata.shape());
        let mut domega = basis_ab.collect_grad(&mut grads, &params_ab);
        domega.extend(basis_ba.collect_grad(&mut grads, &params_ba));
        (dv, domega)
    };

    let (dv_detached, dw_detached) = run(true);
    let (dv_through, dw_through) = run(false);
    let vmax = dv_through.max_abs();
    for (a, b) in dv_detached.data().iter().zip(dv_through.data()) {
        let denom = a.abs().max(b.abs()).max(1e-6 * vmax);
        assert!(
            (a - b).abs() / denom < 1e-4,
            "velocity gradient mismatch: {a} vs {b}"
        );
    }
    let wmax = dw_through.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for (a, b) in dw_detached.iter().zip(&dw_through) {
        let denom = a.abs().max(b.abs()).max(1e-6 * wmax);
        assert!(
            (a - b).abs() / denom < 1e-4,
            "omega gradient mismatch: {a} vs {b}"
        );
    }
}
