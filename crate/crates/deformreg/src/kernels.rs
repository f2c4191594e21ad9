//! Low-level numeric kernels shared by the tape operations and the eager
//! evaluation paths: strided separable convolution and its transpose,
//! trilinear displacement sampling with vector-Jacobian products, batched
//! small SPD solves, and the bending-energy stencils.

use crate::field::{idx3, Field};

/// Number of strided sample positions `shift + stride*c <= n-1`.
#[inline]
pub fn strided_count(n: usize, stride: usize, shift: usize) -> usize {
    if shift >= n {
        0
    } else {
        (n - 1 - shift) / stride + 1
    }
}

/// Separable 3D convolution of a `[d, h, w]` field evaluated at strided
/// centers, with zero padding. `taps` are per-axis in `(k, j, i)` order
/// and must have odd length. Output shape is the per-axis strided count.
///
/// The per-axis passes run innermost axis first so later passes work on
/// already reduced data.
pub fn conv3_strided(
    input: &Field,
    taps: [&[f64]; 3],
    stride: [usize; 3],
    shift: [usize; 3],
) -> Field {
    let [d, h, w] = input.dims3();
    let a = conv1d_strided_axis(input.data(), [d, h, w], taps[2], stride[2], shift[2], 2);
    let wc = strided_count(w, stride[2], shift[2]);
    let b = conv1d_strided_axis(&a, [d, h, wc], taps[1], stride[1], shift[1], 1);
    let hc = strided_count(h, stride[1], shift[1]);
    let c = conv1d_strided_axis(&b, [d, hc, wc], taps[0], stride[0], shift[0], 0);
    let dc = strided_count(d, stride[0], shift[0]);
    Field::from_vec(&[dc, hc, wc], c).expect("strided conv output shape")
}

/// Transpose (adjoint) of `conv3_strided`: maps a cotangent on the
/// strided output back to the input grid. Passes run in reverse order.
pub fn conv3_strided_transpose(
    dout: &Field,
    in_dims: [usize; 3],
    taps: [&[f64]; 3],
    stride: [usize; 3],
    shift: [usize; 3],
) -> Field {
    let [d, h, w] = in_dims;
    let wc = strided_count(w, stride[2], shift[2]);
    let hc = strided_count(h, stride[1], shift[1]);
    let dc = strided_count(d, stride[0], shift[0]);
    debug_assert_eq!(dout.dims3(), [dc, hc, wc]);
    let a = conv1d_strided_transpose_axis(dout.data(), [dc, hc, wc], d, taps[0], stride[0], shift[0], 0);
    let b = conv1d_strided_transpose_axis(&a, [d, hc, wc], h, taps[1], stride[1], shift[1], 1);
    let c = conv1d_strided_transpose_axis(&b, [d, h, wc], w, taps[2], stride[2], shift[2], 2);
    Field::from_vec(&[d, h, w], c).expect("transpose conv output shape")
}

/// One strided convolution pass along `axis` of a `[d, h, w]` block.
fn conv1d_strided_axis(
    src: &[f64],
    dims: [usize; 3],
    taps: &[f64],
    stride: usize,
    shift: usize,
    axis: usize,
) -> Vec<f64> {
    let [d, h, w] = dims;
    let radius = (taps.len() / 2) as isize;
    match axis {
        2 => {
            let wc = strided_count(w, stride, shift);
            let mut out = vec![0.0; d * h * wc];
            for row in 0..d * h {
                let src_base = row * w;
                let dst_base = row * wc;
                for c in 0..wc {
                    let center = (shift + stride * c) as isize;
                    let mut acc = 0.0;
                    let t_lo = (radius - center).max(0) as usize;
                    let t_hi = (w as isize - 1 - center + radius).min(2 * radius) as usize;
                    for t in t_lo..=t_hi {
                        acc += taps[t] * src[(src_base as isize + center + t as isize - radius) as usize];
                    }
                    out[dst_base + c] = acc;
                }
            }
            out
        }
        1 => {
            let hc = strided_count(h, stride, shift);
            let mut out = vec![0.0; d * hc * w];
            for z in 0..d {
                for c in 0..hc {
                    let center = (shift + stride * c) as isize;
                    let dst_base = (z * hc + c) * w;
                    let t_lo = (radius - center).max(0) as usize;
                    let t_hi = (h as isize - 1 - center + radius).min(2 * radius) as usize;
                    for t in t_lo..=t_hi {
                        let y = (center + t as isize - radius) as usize;
                        let src_base = (z * h + y) * w;
                        let tap = taps[t];
                        for x in 0..w {
                            out[dst_base + x] += tap * src[src_base + x];
                        }
                    }
                }
            }
            out
        }
        0 => {
            let dc = strided_count(d, stride, shift);
            let mut out = vec![0.0; dc * h * w];
            let plane = h * w;
            for c in 0..dc {
                let center = (shift + stride * c) as isize;
                let dst_base = c * plane;
                let t_lo = (radius - center).max(0) as usize;
                let t_hi = (d as isize - 1 - center + radius).min(2 * radius) as usize;
                for t in t_lo..=t_hi {
                    let z = (center + t as isize - radius) as usize;
                    let src_base = z * plane;
                    let tap = taps[t];
                    for x in 0..plane {
                        out[dst_base + x] += tap * src[src_base + x];
                    }
                }
            }
            out
        }
        _ => panic!("axis out of range"),
    }
}

/// Transpose of one strided pass: gathers from the strided side back to
/// the full extent along `axis`.
fn conv1d_strided_transpose_axis(
    src: &[f64],
    dims: [usize; 3],
    full: usize,
    taps: &[f64],
    stride: usize,
    shift: usize,
    axis: usize,
) -> Vec<f64> {
    let [d, h, w] = dims;
    let radius = (taps.len() / 2) as isize;
    // strided extent along `axis` in `dims`, full extent in output
    let centers = match axis {
        2 => w,
        1 => h,
        _ => d,
    };
    // range of center indices whose footprint touches position p:
    // |shift + stride*c - p| <= radius
    let c_range = |p: usize| -> (usize, usize) {
        let p = p as isize;
        let lo = (p - radius - shift as isize).div_euclid(stride as isize)
            + if (p - radius - shift as isize).rem_euclid(stride as isize) != 0 {
                1
            } else {
                0
            };
        let hi = (p + radius - shift as isize).div_euclid(stride as isize);
        let lo = lo.max(0) as usize;
        let hi_c = hi.min(centers as isize - 1);
        if hi_c < lo as isize {
            (1, 0)
        } else {
            (lo, hi_c as usize)
        }
    };
    match axis {
        2 => {
            let mut out = vec![0.0; d * h * full];
            for row in 0..d * h {
                let src_base = row * w;
                let dst_base = row * full;
                for p in 0..full {
                    let (lo, hi) = c_range(p);
                    if lo > hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for c in lo..=hi {
                        let t = p as isize - (shift + stride * c) as isize + radius;
                        acc += taps[t as usize] * src[src_base + c];
                    }
                    out[dst_base + p] = acc;
                }
            }
            out
        }
        1 => {
            let mut out = vec![0.0; d * full * w];
            for z in 0..d {
                for p in 0..full {
                    let (lo, hi) = c_range(p);
                    if lo > hi {
                        continue;
                    }
                    let dst_base = (z * full + p) * w;
                    for c in lo..=hi {
                        let t = (p as isize - (shift + stride * c) as isize + radius) as usize;
                        let tap = taps[t];
                        let src_base = (z * h + c) * w;
                        for x in 0..w {
                            out[dst_base + x] += tap * src[src_base + x];
                        }
                    }
                }
            }
            out
        }
        0 => {
            let mut out = vec![0.0; full * h * w];
            let plane = h * w;
            for p in 0..full {
                let (lo, hi) = c_range(p);
                if lo > hi {
                    continue;
                }
                let dst_base = p * plane;
                for c in lo..=hi {
                    let t = (p as isize - (shift + stride * c) as isize + radius) as usize;
                    let tap = taps[t];
                    let src_base = c * plane;
                    for x in 0..plane {
                        out[dst_base + x] += tap * src[src_base + x];
                    }
                }
            }
            out
        }
        _ => panic!("axis out of range"),
    }
}

/// Trilinear corner weights and indices for one sample position.
/// Returns None when the point is outside `[0, n-1]` per axis.
#[inline]
fn cell(x: f64, y: f64, z: f64, d: usize, h: usize, w: usize) -> Option<([usize; 6], [f64; 3])> {
    let ok = x.is_finite()
        && y.is_finite()
        && z.is_finite()
        && x >= 0.0
        && x <= (w - 1) as f64
        && y >= 0.0
        && y <= (h - 1) as f64
        && z >= 0.0
        && z <= (d - 1) as f64;
    if !ok {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let z0 = (z.floor() as usize).min(d.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let z1 = (z0 + 1).min(d - 1);
    Some((
        [x0, x1, y0, y1, z0, z1],
        [x - x0 as f64, y - y0 as f64, z - z0 as f64],
    ))
}

/// Samples `source` (`[c, d, h, w]`) at `(x, y, z) + disp(x, y, z)` where
/// `disp` is a 3-channel displacement on the same grid. Returns values and
/// the inside-domain indicator.
pub fn sample_disp_forward(source: &Field, disp: &Field) -> (Field, Field) {
    let [c, d, h, w] = source.dims4();
    let [dc, dd, dhh, dw] = disp.dims4();
    debug_assert_eq!(dc, 3);
    debug_assert_eq!([dd, dhh, dw], [d, h, w]);
    let n = d * h * w;
    let (di, dj, dk) = (disp.channel(0), disp.channel(1), disp.channel(2));
    let mut values = Field::zeros(&[c, d, h, w]);
    let mut inside = Field::zeros(&[d, h, w]);
    let src = source.data();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = idx3(h, w, x, y, z);
                let px = x as f64 + di[idx];
                let py = y as f64 + dj[idx];
                let pz = z as f64 + dk[idx];
                let Some((c6, f)) = cell(px, py, pz, d, h, w) else {
                    continue;
                };
                inside.data_mut()[idx] = 1.0;
                let [x0, x1, y0, y1, z0, z1] = c6;
                let [fx, fy, fz] = f;
                let out = values.data_mut();
                for ch in 0..c {
                    let base = ch * n;
                    let c00 = src[base + idx3(h, w, x0, y0, z0)] * (1.0 - fx)
                        + src[base + idx3(h, w, x1, y0, z0)] * fx;
                    let c10 = src[base + idx3(h, w, x0, y1, z0)] * (1.0 - fx)
                        + src[base + idx3(h, w, x1, y1, z0)] * fx;
                    let c01 = src[base + idx3(h, w, x0, y0, z1)] * (1.0 - fx)
                        + src[base + idx3(h, w, x1, y0, z1)] * fx;
                    let c11 = src[base + idx3(h, w, x0, y1, z1)] * (1.0 - fx)
                        + src[base + idx3(h, w, x1, y1, z1)] * fx;
                    let c0 = c00 * (1.0 - fy) + c10 * fy;
                    let c1 = c01 * (1.0 - fy) + c11 * fy;
                    out[base + idx] = c0 * (1.0 - fz) + c1 * fz;
                }
            }
        }
    }
    (values, inside)
}

/// Vector-Jacobian products of `sample_disp_forward` with respect to the
/// source values and/or the displacement.
pub fn sample_disp_vjp(
    source: &Field,
    disp: &Field,
    dout: &Field,
    want_dsource: bool,
    want_ddisp: bool,
) -> (Option<Field>, Option<Field>) {
    let [c, d, h, w] = source.dims4();
    let n = d * h * w;
    let (di, dj, dk) = (disp.channel(0), disp.channel(1), disp.channel(2));
    let src = source.data();
    let g = dout.data();
    let mut dsource = want_dsource.then(|| Field::zeros(&[c, d, h, w]));
    let mut ddisp = want_ddisp.then(|| Field::zeros(&[3, d, h, w]));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = idx3(h, w, x, y, z);
                let px = x as f64 + di[idx];
                let py = y as f64 + dj[idx];
                let pz = z as f64 + dk[idx];
                let Some((c6, f)) = cell(px, py, pz, d, h, w) else {
                    continue;
                };
                let [x0, x1, y0, y1, z0, z1] = c6;
                let [fx, fy, fz] = f;
                let corners = [
                    (x0, y0, z0, (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
                    (x1, y0, z0, fx * (1.0 - fy) * (1.0 - fz)),
                    (x0, y1, z0, (1.0 - fx) * fy * (1.0 - fz)),
                    (x1, y1, z0, fx * fy * (1.0 - fz)),
                    (x0, y0, z1, (1.0 - fx) * (1.0 - fy) * fz),
                    (x1, y0, z1, fx * (1.0 - fy) * fz),
                    (x0, y1, z1, (1.0 - fx) * fy * fz),
                    (x1, y1, z1, fx * fy * fz),
                ];
                let mut acc = [0.0_f64; 3];
                for ch in 0..c {
                    let base = ch * n;
                    let go = g[base + idx];
                    if go == 0.0 {
                        continue;
                    }
                    if let Some(ds) = dsource.as_mut() {
                        let dd = ds.data_mut();
                        for &(cx, cy, cz, wt) in &corners {
                            dd[base + idx3(h, w, cx, cy, cz)] += go * wt;
                        }
                    }
                    if want_ddisp {
                        let v = |cx: usize, cy: usize, cz: usize| src[base + idx3(h, w, cx, cy, cz)];
                        // partial derivatives of the trilinear blend
                        let gxv = ((v(x1, y0, z0) - v(x0, y0, z0)) * (1.0 - fy)
                            + (v(x1, y1, z0) - v(x0, y1, z0)) * fy)
                            * (1.0 - fz)
                            + ((v(x1, y0, z1) - v(x0, y0, z1)) * (1.0 - fy)
                                + (v(x1, y1, z1) - v(x0, y1, z1)) * fy)
                                * fz;
                        let gyv = ((v(x0, y1, z0) - v(x0, y0, z0)) * (1.0 - fx)
                            + (v(x1, y1, z0) - v(x1, y0, z0)) * fx)
                            * (1.0 - fz)
                            + ((v(x0, y1, z1) - v(x0, y0, z1)) * (1.0 - fx)
                                + (v(x1, y1, z1) - v(x1, y0, z1)) * fx)
                                * fz;
                        let gzv = ((v(x0, y0, z1) - v(x0, y0, z0)) * (1.0 - fx)
                            + (v(x1, y0, z1) - v(x1, y0, z0)) * fx)
                            * (1.0 - fy)
                            + ((v(x0, y1, z1) - v(x0, y1, z0)) * (1.0 - fx)
                                + (v(x1, y1, z1) - v(x1, y1, z0)) * fx)
                                * fy;
                        acc[0] += go * gxv;
                        acc[1] += go * gyv;
                        acc[2] += go * gzv;
                    }
                }
                if let Some(dd) = ddisp.as_mut() {
                    let buf = dd.data_mut();
                    buf[idx] += acc[0];
                    buf[n + idx] += acc[1];
                    buf[2 * n + idx] += acc[2];
                }
            }
        }
    }
    (dsource, ddisp)
}

/// In-place Cholesky factorization of a `j x j` symmetric matrix stored
/// row-major; returns false when a pivot is not strictly positive.
pub fn cholesky_in_place(a: &mut [f64], j: usize) -> bool {
    for col in 0..j {
        let mut diag = a[col * j + col];
        for k in 0..col {
            diag -= a[col * j + k] * a[col * j + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return false;
        }
        let l = diag.sqrt();
        a[col * j + col] = l;
        for row in col + 1..j {
            let mut v = a[row * j + col];
            for k in 0..col {
                v -= a[row * j + k] * a[col * j + k];
            }
            a[row * j + col] = v / l;
        }
    }
    true
}

/// Solves `L L^T x = b` in place given the lower factor from
/// `cholesky_in_place`.
pub fn cholesky_solve(l: &[f64], j: usize, b: &mut [f64]) {
    for row in 0..j {
        let mut v = b[row];
        for k in 0..row {
            v -= l[row * j + k] * b[k];
        }
        b[row] = v / l[row * j + row];
    }
    for row in (0..j).rev() {
        let mut v = b[row];
        for k in row + 1..j {
            v -= l[k * j + row] * b[k];
        }
        b[row] = v / l[row * j + row];
    }
}

/// Batched ridge-stabilized SPD solve. For each of the `n` systems,
/// factors `gram + ridge_rel * trace/j * I` and solves for `rhs`.
/// Failed factorizations leave a zero solution and a false flag.
pub struct BatchSolve {
    /// Solutions, shape `[n, j]`.
    pub theta: Field,
    /// Cached lower Cholesky factors, shape `[n, j, j]`.
    pub factors: Field,
    /// Per-system success.
    pub ok: Vec<bool>,
}

pub fn solve_spd_batch(gram: &Field, rhs: &Field, ridge_rel: f64) -> BatchSolve {
    let shape = gram.shape();
    let j = shape[shape.len() - 1];
    let n = gram.len() / (j * j);
    debug_assert_eq!(rhs.len(), n * j);
    let mut theta = Field::zeros(&[n, j]);
    let mut factors = Field::zeros(&[n, j, j]);
    let mut ok = vec![false; n];
    let g = gram.data();
    let r = rhs.data();
    for i in 0..n {
        let a_src = &g[i * j * j..(i + 1) * j * j];
        let fac = &mut factors.data_mut()[i * j * j..(i + 1) * j * j];
        fac.copy_from_slice(a_src);
        if ridge_rel != 0.0 {
            let trace: f64 = (0..j).map(|p| a_src[p * j + p]).sum();
            let ridge = ridge_rel * trace / j as f64;
            for p in 0..j {
                fac[p * j + p] += ridge;
            }
        }
        if !cholesky_in_place(fac, j) {
            fac.fill(0.0);
            continue;
        }
        ok[i] = true;
        let out = &mut theta.data_mut()[i * j..(i + 1) * j];
        out.copy_from_slice(&r[i * j..(i + 1) * j]);
        cholesky_solve(fac, j, out);
    }
    BatchSolve { theta, factors, ok }
}

const BENDING_AXES: [(usize, usize, f64); 6] = [
    (0, 0, 1.0),
    (1, 1, 1.0),
    (2, 2, 1.0),
    (0, 1, 2.0),
    (0, 2, 2.0),
    (1, 2, 2.0),
];

#[inline]
fn axis_step(axis: usize, h: usize, w: usize) -> usize {
    match axis {
        0 => 1,         // i: along w
        1 => w,         // j: along h
        _ => h * w,     // k: along d
    }
}

/// Bending energy of a 3-channel field: the mean over interior voxels of
/// the channel-summed squared second derivatives (mixed terms doubled),
/// in world units. Field values are voxel displacements; `spacing`
/// converts both values and derivative steps to mm.
pub fn bending_energy_forward(field: &Field, spacing: [f64; 3]) -> f64 {
    let [c, d, h, w] = field.dims4();
    debug_assert_eq!(c, 3);
    assert!(
        d >= 3 && h >= 3 && w >= 3,
        "bending energy requires extents >= 3"
    );
    let n_int = (d - 2) * (h - 2) * (w - 2);
    let mut total = 0.0;
    for ch in 0..3 {
        let v = field.channel(ch);
        let value_scale = spacing[ch];
        for z in 1..d - 1 {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let idx = idx3(h, w, x, y, z);
                    for &(a, b, coef) in &BENDING_AXES {
                        let sec = second_derivative(v, idx, a, b, h, w, spacing) * value_scale;
                        total += coef * sec * sec;
                    }
                }
            }
        }
    }
    total / n_int as f64
}

/// Gradient of `bending_energy_forward` scaled by the output cotangent.
pub fn bending_energy_vjp(field: &Field, spacing: [f64; 3], dout: f64) -> Field {
    let [_, d, h, w] = field.dims4();
    let n_int = (d - 2) * (h - 2) * (w - 2);
    let mut grad = Field::zeros(&[3, d, h, w]);
    for ch in 0..3 {
        let v = field.channel(ch);
        let value_scale = spacing[ch];
        let gch = grad.channel_mut(ch);
        for z in 1..d - 1 {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let idx = idx3(h, w, x, y, z);
                    for &(a, b, coef) in &BENDING_AXES {
                        let sec = second_derivative(v, idx, a, b, h, w, spacing) * value_scale;
                        let scale = dout * 2.0 * coef * sec * value_scale / n_int as f64;
                        scatter_second_derivative(gch, idx, a, b, h, w, spacing, scale);
                    }
                }
            }
        }
    }
    grad
}

/// Central-difference second derivative at `idx` along axes `a` and `b`
/// (equal axes give the pure term), in 1/mm^2 units before value scaling.
#[inline]
fn second_derivative(
    v: &[f64],
    idx: usize,
    a: usize,
    b: usize,
    h: usize,
    w: usize,
    spacing: [f64; 3],
) -> f64 {
    let sa = axis_step(a, h, w);
    let sb = axis_step(b, h, w);
    if a == b {
        (v[idx + sa] - 2.0 * v[idx] + v[idx - sa]) / (spacing[a] * spacing[a])
    } else {
        (v[idx + sa + sb] - v[idx + sa - sb] - v[idx - sa + sb] + v[idx - sa - sb])
            / (4.0 * spacing[a] * spacing[b])
    }
}

#[inline]
fn scatter_second_derivative(
    g: &mut [f64],
    idx: usize,
    a: usize,
    b: usize,
    h: usize,
    w: usize,
    spacing: [f64; 3],
    scale: f64,
) {
    let sa = axis_step(a, h, w);
    let sb = axis_step(b, h, w);
    if a == b {
        let s = scale / (spacing[a] * spacing[a]);
        g[idx + sa] += s;
        g[idx] -= 2.0 * s;
        g[idx - sa] += s;
    } else {
        let s = scale / (4.0 * spacing[a] * spacing[b]);
        g[idx + sa + sb] += s;
        g[idx + sa - sb] -= s;
        g[idx - sa + sb] -= s;
        g[idx - sa - sb] += s;
    }
}
