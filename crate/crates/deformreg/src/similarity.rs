//! The local functional-dependence similarity: per-center weighted least
//! squares over learned (or polynomial) basis features, fitted in closed
//! form from moments gathered by strided separable convolutions, and
//! aggregated into the log or normalized loss.
//!
//! Also hosts the exact discrete correlation-ratio reference used by the
//! test surface.

use std::collections::HashMap;

use crate::basis::BasisModel;
use crate::error::{Error, Result};
use crate::field::{idx3, Field};
use crate::kernels::{self, strided_count};
use crate::svf::{exponentiate_node, warp_mask_same_grid};
use crate::tape::{NodeId, Tape};
use crate::volume::{gaussian_taps, Volume};

/// Separable distance-weighting kernel: the stored taps are the
/// reciprocal weight `1/phi`, Gaussian per axis with the center tap
/// exactly 1, truncated at three standard deviations.
#[derive(Clone, Debug)]
pub struct WeightKernel {
    pub sigma: [f64; 3],
    taps: [Vec<f64>; 3],
}

impl WeightKernel {
    pub fn new(sigma: [f64; 3]) -> Result<Self> {
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("kernel sigma must be positive"));
        }
        let taps = sigma.map(|s| gaussian_taps(s, (3.0 * s).floor() as usize));
        Ok(WeightKernel { sigma, taps })
    }

    pub fn isotropic(sigma: f64) -> Result<Self> {
        WeightKernel::new([sigma; 3])
    }

    pub fn taps(&self) -> [&[f64]; 3] {
        [&self.taps[0], &self.taps[1], &self.taps[2]]
    }

    pub fn radius(&self) -> [usize; 3] {
        [
            self.taps[0].len() / 2,
            self.taps[1].len() / 2,
            self.taps[2].len() / 2,
        ]
    }
}

/// Strided sampling centers with a per-axis shift in `[0, stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingGrid {
    pub stride: [usize; 3],
    pub shift: [usize; 3],
}

impl SamplingGrid {
    pub fn new(stride: [usize; 3], shift: [usize; 3]) -> Result<Self> {
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if shift.iter().zip(&stride).any(|(&sh, &st)| sh >= st) {
            return Err(Error::invalid("shift must lie in [0, stride)"));
        }
        Ok(SamplingGrid { stride, shift })
    }

    pub fn dense() -> Self {
        SamplingGrid {
            stride: [1; 3],
            shift: [0; 3],
        }
    }

    pub fn uniform(stride: usize) -> Self {
        SamplingGrid {
            stride: [stride; 3],
            shift: [0; 3],
        }
    }

    pub fn with_random_shift(stride: usize, rng: &mut impl rand::Rng) -> Self {
        SamplingGrid {
            stride: [stride; 3],
            shift: [
                rng.gen_range(0..stride),
                rng.gen_range(0..stride),
                rng.gen_range(0..stride),
            ],
        }
    }

    /// Center-grid extents `[dc, hc, wc]` for a `[d, h, w]` volume.
    pub fn center_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        [
            strided_count(dims[0], self.stride[0], self.shift[0]),
            strided_count(dims[1], self.stride[1], self.shift[1]),
            strided_count(dims[2], self.stride[2], self.shift[2]),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Log,
    Normalized,
}

/// Fixed similarity knobs (the sampling grid varies per iteration).
#[derive(Clone, Debug)]
pub struct LossOptions {
    pub kernel: WeightKernel,
    pub variant: LossVariant,
    /// Relative ridge added to the local Gram matrices.
    pub ridge: f64,
    /// Scale of the residual floor relative to the mean local second
    /// moment of the target.
    pub floor_rel: f64,
    /// Treat the fitted coefficients as constants in the gradient (the
    /// envelope-theorem shortcut); switchable for cross-checks.
    pub detach_coefficients: bool,
}

impl LossOptions {
    pub fn new(kernel: WeightKernel, variant: LossVariant) -> Self {
        LossOptions {
            kernel,
            variant,
            ridge: 1e-6,
            floor_rel: 1e-8,
            detach_coefficients: true,
        }
    }
}

/// Convolved moments behind the local solves and the loss.
#[derive(Clone, Debug)]
pub struct MomentFields {
    pub terms: usize,
    pub target_channels: usize,
    pub center_dims: [usize; 3],
    /// `[n, j, j]` symmetric Gram matrices.
    pub gram: Field,
    /// `[ct, n, j]` feature-target moments.
    pub cross: Field,
    /// `[ct, n]` weighted target second moments.
    pub target_sq: Field,
    /// `[n]` convolved mask mass.
    pub weight_norm: Field,
    /// `[n]` joint-mask validity of the center voxel itself.
    pub center_valid: Field,
}

/// Locally fitted coefficients per center and target channel.
#[derive(Clone, Debug)]
pub struct LocalCoefficients {
    /// `[ct, n, j]`.
    pub theta: Field,
    /// Per-center solve success.
    pub solved: Vec<bool>,
    pub dropped: usize,
}

/// Loss value with per-center diagnostics.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    /// Channel-summed weighted residual per center, `[dc, hc, wc]`.
    pub per_center: Field,
    pub kept: usize,
    pub dropped_solve: usize,
    pub floor: f64,
}

/// Masked weighted moments at the strided centers, computed with
/// separable convolutions. Voxels outside the joint mask contribute
/// nothing, including to `weight_norm`.
pub fn compute_moments(
    target: &Field,
    features: &Field,
    mask: &Field,
    kernel: &WeightKernel,
    grid: &SamplingGrid,
) -> Result<MomentFields> {
    let [ct, d, h, w] = target.dims4();
    let [j, fd, fh, fw] = features.dims4();
    if [fd, fh, fw] != [d, h, w] || mask.shape() != [d, h, w] {
        return Err(Error::ShapeMismatch {
            what: "compute_moments inputs",
            expected: vec![d, h, w],
            found: vec![fd, fh, fw],
        });
    }
    if mask.sum() == 0.0 {
        return Err(Error::NoOverlap);
    }
    let taps = kernel.taps();
    let cdims = grid.center_dims([d, h, w]);
    let n = cdims[0] * cdims[1] * cdims[2];

    let masked: Vec<Field> = (0..j)
        .map(|t| {
            Field::from_vec(
                &[d, h, w],
                features
                    .channel(t)
                    .iter()
                    .zip(mask.data())
                    .map(|(&f, &m)| f * m)
                    .collect(),
            )
            .unwrap()
        })
        .collect();

    let mut gram = Field::zeros(&[n, j, j]);
    for row in 0..j {
        for col in row..j {
            let prod = Field::from_vec(
                &[d, h, w],
                masked[row]
                    .data()
                    .iter()
                    .zip(features.channel(col))
                    .map(|(&a, &b)| a * b)
                    .collect(),
            )?;
            let conv = kernels::conv3_strided(&prod, taps, grid.stride, grid.shift);
            for i in 0..n {
                gram.data_mut()[i * j * j + row * j + col] = conv.data()[i];
                gram.data_mut()[i * j * j + col * j + row] = conv.data()[i];
            }
        }
    }

    let mut cross = Field::zeros(&[ct, n, j]);
    let mut target_sq = Field::zeros(&[ct, n]);
    for c in 0..ct {
        let y = target.channel(c);
        for t in 0..j {
            let prod = Field::from_vec(
                &[d, h, w],
                masked[t].data().iter().zip(y).map(|(&a, &b)| a * b).collect(),
            )?;
            let conv = kernels::conv3_strided(&prod, taps, grid.stride, grid.shift);
            for i in 0..n {
                cross.data_mut()[(c * n + i) * j + t] = conv.data()[i];
            }
        }
        let ysq = Field::from_vec(
            &[d, h, w],
            y.iter().zip(mask.data()).map(|(&v, &m)| v * v * m).collect(),
        )?;
        let conv = kernels::conv3_strided(&ysq, taps, grid.stride, grid.shift);
        target_sq.channel_mut(c).copy_from_slice(conv.data());
    }

    let weight_norm = kernels::conv3_strided(mask, taps, grid.stride, grid.shift)
        .reshape(&[n])?;
    let mut center_valid = Field::zeros(&[n]);
    {
        let mut i = 0;
        for zc in 0..cdims[0] {
            for yc in 0..cdims[1] {
                for xc in 0..cdims[2] {
                    let (z, y, x) = (
                        grid.shift[0] + grid.stride[0] * zc,
                        grid.shift[1] + grid.stride[1] * yc,
                        grid.shift[2] + grid.stride[2] * xc,
                    );
                    center_valid.data_mut()[i] = mask.data()[idx3(h, w, x, y, z)];
                    i += 1;
                }
            }
        }
    }

    Ok(MomentFields {
        terms: j,
        target_channels: ct,
        center_dims: cdims,
        gram,
        cross,
        target_sq,
        weight_norm,
        center_valid,
    })
}

/// Closed-form local weighted least squares from the moments:
/// `(gram + ridge * trace/j * I) theta = cross` per center and channel.
/// Centers whose factorization fails are dropped and counted.
pub fn solve_local_wls(moments: &MomentFields, ridge: f64) -> Result<LocalCoefficients> {
    if !moments.gram.all_finite() {
        return Err(Error::NonFinite("gram moments".into()));
    }
    let j = moments.terms;
    let ct = moments.target_channels;
    let n = moments.gram.len() / (j * j);
    let mut theta = Field::zeros(&[ct, n, j]);
    let mut solved = vec![false; n];
    let mut dropped = 0;
    let mut fac = vec![0.0; j * j];
    for i in 0..n {
        let a = &moments.gram.data()[i * j * j..(i + 1) * j * j];
        fac.copy_from_slice(a);
        if ridge != 0.0 {
            let trace: f64 = (0..j).map(|p| a[p * j + p]).sum();
            let r = ridge * trace / j as f64;
            for p in 0..j {
                fac[p * j + p] += r;
            }
        }
        if !kernels::cholesky_in_place(&mut fac, j) {
            dropped += 1;
            continue;
        }
        solved[i] = true;
        for c in 0..ct {
            let src = &moments.cross.data()[(c * n + i) * j..(c * n + i + 1) * j];
            let dst = &mut theta.data_mut()[(c * n + i) * j..(c * n + i + 1) * j];
            dst.copy_from_slice(src);
            kernels::cholesky_solve(&fac, j, dst);
        }
    }
    Ok(LocalCoefficients {
        theta,
        solved,
        dropped,
    })
}

/// Diagnostics of one direction's loss construction.
#[derive(Clone, Debug)]
pub struct DirectionDiag {
    pub residuals: Field,
    pub kept: usize,
    pub dropped_solve: usize,
    pub floor: f64,
}

/// Builds one direction of the similarity loss on the tape. `target` and
/// its mask are constants of the level; `warped_moving` is a `[cs, d, h,
/// w]` node; `moving_mask` is the already-warped moving validity mask.
/// Returns the scalar loss node.
pub fn direction_loss_node(
    tape: &mut Tape,
    target: &Field,
    target_mask: &Field,
    warped_moving: NodeId,
    moving_mask: &Field,
    basis: &BasisModel,
    basis_params: &[NodeId],
    opts: &LossOptions,
    grid: &SamplingGrid,
) -> Result<(NodeId, DirectionDiag)> {
    let [ct, d, h, w] = target.dims4();
    let mask = target_mask.zip_map(moving_mask, |a, b| a * b);
    if mask.sum() == 0.0 {
        return Err(Error::NoOverlap);
    }
    let taps = opts.kernel.taps();
    let cdims = grid.center_dims([d, h, w]);
    let n = cdims[0] * cdims[1] * cdims[2];
    let j = basis.terms;

    // feature slices, masked copies
    let feats = basis.features(tape, warped_moving, basis_params);
    let mask_leaf = tape.constant(mask.clone());
    let mut f3d = Vec::with_capacity(j);
    let mut fm = Vec::with_capacity(j);
    for t in 0..j {
        let s = tape.slice_channel(feats, t);
        let s3 = tape.reshape(s, &[d, h, w]);
        f3d.push(s3);
        fm.push(tape.mul(s3, mask_leaf));
    }

    // gram moments
    let mut gram_parts = Vec::with_capacity(j * (j + 1) / 2);
    for row in 0..j {
        for col in row..j {
            let prod = tape.mul(fm[row], f3d[col]);
            let conv = tape.conv_strided(prod, taps, grid.stride, grid.shift);
            gram_parts.push(tape.reshape(conv, &[n]));
        }
    }
    let gram = tape.pack_sym(&gram_parts, j);

    // cross moments and constant target moments
    let mut cross_nodes = Vec::with_capacity(ct);
    let mut t_consts = Vec::with_capacity(ct);
    let mut m1_consts = Vec::with_capacity(ct);
    for c in 0..ct {
        let y = target.channel(c);
        let y_leaf = tape.constant(Field::from_vec(&[d, h, w], y.to_vec())?);
        let mut parts = Vec::with_capacity(j);
        for t in 0..j {
            let prod = tape.mul(fm[t], y_leaf);
            let conv = tape.conv_strided(prod, taps, grid.stride, grid.shift);
            parts.push(tape.reshape(conv, &[n]));
        }
        cross_nodes.push(tape.pack_vec(&parts));

        let ysq = Field::from_vec(
            &[d, h, w],
            y.iter().zip(mask.data()).map(|(&v, &m)| v * v * m).collect(),
        )?;
        t_consts.push(
            kernels::conv3_strided(&ysq, taps, grid.stride, grid.shift).reshape(&[n])?,
        );
        if opts.variant == LossVariant::Normalized {
            let ym = Field::from_vec(
                &[d, h, w],
                y.iter().zip(mask.data()).map(|(&v, &m)| v * m).collect(),
            )?;
            m1_consts.push(
                kernels::conv3_strided(&ym, taps, grid.stride, grid.shift).reshape(&[n])?,
            );
        }
    }
    let weight_norm = kernels::conv3_strided(&mask, taps, grid.stride, grid.shift);

    // local solves (per target channel, shared Gram)
    let mut theta_nodes = Vec::with_capacity(ct);
    let mut solved = vec![true; n];
    for c in 0..ct {
        let th = tape.solve_spd(gram, cross_nodes[c], opts.ridge);
        for (s, ok) in solved.iter_mut().zip(tape.solve_ok(th)) {
            *s &= *ok;
        }
        theta_nodes.push(if opts.detach_coefficients {
            tape.stop_gradient(th)
        } else {
            th
        });
    }
    let dropped_solve = solved.iter().filter(|&&s| !s).count();

    // keep mask over centers
    let mut keep = Field::zeros(&[n]);
    let mut kept = 0;
    {
        let mut i = 0;
        for zc in 0..cdims[0] {
            for yc in 0..cdims[1] {
                for xc in 0..cdims[2] {
                    let (z, y, x) = (
                        grid.shift[0] + grid.stride[0] * zc,
                        grid.shift[1] + grid.stride[1] * yc,
                        grid.shift[2] + grid.stride[2] * xc,
                    );
                    let ok = solved[i]
                        && weight_norm.data()[i] > 0.0
                        && mask.data()[idx3(h, w, x, y, z)] == 1.0;
                    if ok {
                        keep.data_mut()[i] = 1.0;
                        kept += 1;
                    }
                    i += 1;
                }
            }
        }
    }
    if kept == 0 {
        return Err(Error::AllCentersDropped);
    }

    // scale-aware residual floor from the kept target second moments
    let mean_t: f64 = (0..ct)
        .map(|c| {
            t_consts[c]
                .data()
                .iter()
                .zip(keep.data())
                .map(|(&t, &k)| t * k)
                .sum::<f64>()
        })
        .sum::<f64>()
        / kept as f64;
    let floor = opts.floor_rel * mean_t + 1e-300;

    // residual per center: theta^T G theta - 2 theta^T cross + t
    let mut res_total: Option<NodeId> = None;
    let mut contributions = Vec::with_capacity(ct);
    for c in 0..ct {
        let quad = tape.quad_form(gram, theta_nodes[c]);
        let dv = tape.dot_vec(cross_nodes[c], theta_nodes[c]);
        let dv2 = tape.scale(dv, -2.0);
        let partial = tape.add(quad, dv2);
        let t_leaf = tape.constant(t_consts[c].clone());
        let res_c = tape.add(partial, t_leaf);
        contributions.push(res_c);
        res_total = Some(match res_total {
            None => res_c,
            Some(acc) => tape.add(acc, res_c),
        });
    }
    let res_node = res_total.expect("at least one channel");

    let keep_leaf = tape.constant(keep.clone());
    let loss = match opts.variant {
        LossVariant::Log => {
            let shifted = tape.add_scalar(res_node, floor);
            let lv = tape.log(shifted);
            let masked_lv = tape.mul(lv, keep_leaf);
            let total = tape.sum_all(masked_lv);
            tape.scale(total, 1.0 / kept as f64)
        }
        LossVariant::Normalized => {
            // divide each channel's residual by the weighted centered
            // second moment of the target in the same footprint
            let mut acc: Option<NodeId> = None;
            for c in 0..ct {
                let eps_c = opts.floor_rel
                    * (t_consts[c]
                        .data()
                        .iter()
                        .zip(keep.data())
                        .map(|(&t, &k)| t * k)
                        .sum::<f64>()
                        / kept as f64)
                    + 1e-300;
                let recip = Field::from_vec(
                    &[n],
                    (0..n)
                        .map(|i| {
                            let wn = weight_norm.data()[i];
                            if keep.data()[i] == 0.0 || wn <= 0.0 {
                                return 0.0;
                            }
                            let var = t_consts[c].data()[i]
                                - m1_consts[c].data()[i] * m1_consts[c].data()[i] / wn;
                            keep.data()[i] / (var.max(0.0) + eps_c)
                        })
                        .collect(),
                )?;
                let recip_leaf = tape.constant(recip);
                let term = tape.mul(contributions[c], recip_leaf);
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term),
                });
            }
            let total = tape.sum_all(acc.expect("channel"));
            tape.scale(total, 1.0 / kept as f64)
        }
    };

    let residuals = tape
        .value(res_node)
        .clone()
        .zip_map(&keep, |r, k| r * k)
        .reshape(&cdims)?;
    Ok((
        loss,
        DirectionDiag {
            residuals,
            kept,
            dropped_solve,
            floor,
        },
    ))
}

/// Eager single-direction loss: `target` regressed on basis features of
/// `warped_moving`, both already on the same grid.
pub fn similarity_loss(
    target: &Volume,
    warped_moving: &Volume,
    basis: &BasisModel,
    opts: &LossOptions,
    grid: &SamplingGrid,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let moving_node = tape.constant(warped_moving.data.clone());
    let params = basis.bind_params(&mut tape);
    let (loss, diag) = direction_loss_node(
        &mut tape,
        &target.data,
        &target.mask,
        moving_node,
        &warped_moving.mask,
        basis,
        &params,
        opts,
        grid,
    )?;
    Ok(LossValue {
        value: tape.value(loss).as_scalar(),
        per_center: diag.residuals,
        kept: diag.kept,
        dropped_solve: diag.dropped_solve,
        floor: diag.floor,
    })
}

/// Builds the bidirectional loss on the tape: the average of the two
/// direction losses under a shared velocity node, each direction warping
/// the other image by `exp(v)` and `exp(-v)`.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_loss_node(
    tape: &mut Tape,
    vol_a: &Volume,
    vol_b: &Volume,
    velocity: NodeId,
    steps: usize,
    basis_ab: &BasisModel,
    params_ab: &[NodeId],
    basis_ba: &BasisModel,
    params_ba: &[NodeId],
    opts: &LossOptions,
    grid_ab: &SamplingGrid,
    grid_ba: &SamplingGrid,
) -> Result<(NodeId, DirectionDiag, DirectionDiag)> {
    let fwd = exponentiate_node(tape, velocity, steps);
    let neg = tape.neg(velocity);
    let inv = exponentiate_node(tape, neg, steps);

    let b_leaf = tape.constant(vol_b.data.clone());
    let warped_b = tape.sample_disp(b_leaf, fwd);
    let b_mask_w = warp_mask_same_grid(&vol_b.mask, tape.value(fwd));

    let a_leaf = tape.constant(vol_a.data.clone());
    let warped_a = tape.sample_disp(a_leaf, inv);
    let a_mask_w = warp_mask_same_grid(&vol_a.mask, tape.value(inv));

    let (loss_ab, diag_ab) = direction_loss_node(
        tape,
        &vol_a.data,
        &vol_a.mask,
        warped_b,
        &b_mask_w,
        basis_ab,
        params_ab,
        opts,
        grid_ab,
    )?;
    let (loss_ba, diag_ba) = direction_loss_node(
        tape,
        &vol_b.data,
        &vol_b.mask,
        warped_a,
        &a_mask_w,
        basis_ba,
        params_ba,
        opts,
        grid_ba,
    )?;
    let total = tape.add(loss_ab, loss_ba);
    let half = tape.scale(total, 0.5);
    Ok((half, diag_ab, diag_ba))
}

/// Eager bidirectional loss value.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_loss(
    vol_a: &Volume,
    vol_b: &Volume,
    velocity: &crate::svf::VelocityField,
    steps: usize,
    basis_ab: &BasisModel,
    basis_ba: &BasisModel,
    opts: &LossOptions,
    grid_ab: &SamplingGrid,
    grid_ba: &SamplingGrid,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(velocity.data.clone());
    let params_ab = basis_ab.bind_params(&mut tape);
    let params_ba = basis_ba.bind_params(&mut tape);
    let (node, _, _) = bidirectional_loss_node(
        &mut tape, vol_a, vol_b, v, steps, basis_ab, &params_ab, basis_ba, &params_ba, opts,
        grid_ab, grid_ba,
    )?;
    Ok(tape.value(node).as_scalar())
}

/// Exact `1 - CR(I_A, I_B)` over the isosets of a quantized `I_A`:
/// the variance of `I_B` within each isoset, summed and normalized by
/// the global variance of `I_B`. Both volumes must be single-channel;
/// computed over the joint valid mask.
pub fn correlation_ratio(i_a: &Volume, i_b: &Volume) -> Result<f64> {
    if i_a.channels() != 1 || i_b.channels() != 1 {
        return Err(Error::invalid("correlation ratio is single-channel"));
    }
    if i_a.spatial_dims() != i_b.spatial_dims() {
        return Err(Error::ShapeMismatch {
            what: "correlation_ratio grids",
            expected: i_a.spatial_dims().to_vec(),
            found: i_b.spatial_dims().to_vec(),
        });
    }
    let mut groups: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut all = Vec::new();
    for ((&a, &b), (&ma, &mb)) in i_a
        .data
        .channel(0)
        .iter()
        .zip(i_b.data.channel(0))
        .zip(i_a.mask.data().iter().zip(i_b.mask.data()))
    {
        if ma == 1.0 && mb == 1.0 {
            groups.entry(a.to_bits()).or_default().push(b);
            all.push(b);
        }
    }
    if all.is_empty() {
        return Err(Error::NoOverlap);
    }
    if groups.len() > 64 {
        return Err(Error::invalid(format!(
            "correlation ratio expects <= 64 intensity levels, found {}",
            groups.len()
        )));
    }
    let n = all.len() as f64;
    let mean_all = all.iter().sum::<f64>() / n;
    let var_all = all.iter().map(|v| (v - mean_all).powi(2)).sum::<f64>() / n;
    if var_all <= 0.0 {
        return Err(Error::invalid(
            "correlation ratio undefined: target image has zero variance",
        ));
    }
    let mut numerator = 0.0;
    for members in groups.values() {
        let m = members.iter().sum::<f64>() / members.len() as f64;
        numerator += members.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    Ok(numerator / (n * var_all))
}
