//! Multichannel volumes on regular grids: trilinear sampling, Gaussian
//! smoothing and pyramids, the spatial-derivative-magnitude channel and
//! percentile intensity normalization.

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::field::{idx3, Field};
use crate::geometry::GridGeometry;

/// A C-channel scalar field on a regular 3D grid with voxel-to-world
/// affine and a validity mask.
///
/// `data` has shape `[c, d, h, w]`, `mask` has shape `[d, h, w]` with
/// entries exactly 0 or 1.
#[derive(Clone, Debug)]
pub struct Volume {
    pub data: Field,
    pub geom: GridGeometry,
    pub mask: Field,
}

impl Volume {
    pub fn new(data: Field, affine: Matrix4<f64>, mask: Field) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                what: "Volume data rank",
                expected: vec![4],
                found: vec![data.shape().len()],
            });
        }
        let [_, d, h, w] = data.dims4();
        let geom = GridGeometry::new([d, h, w], affine)?;
        if mask.shape() != [d, h, w] {
            return Err(Error::ShapeMismatch {
                what: "Volume mask",
                expected: vec![d, h, w],
                found: mask.shape().to_vec(),
            });
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("volume data".into()));
        }
        if !mask.data().iter().all(|&m| m == 0.0 || m == 1.0) {
            return Err(Error::invalid("mask entries must be exactly 0 or 1"));
        }
        Ok(Volume { data, geom, mask })
    }

    /// Volume with an all-valid mask.
    pub fn all_valid(data: Field, affine: Matrix4<f64>) -> Result<Self> {
        let [_, d, h, w] = data.dims4();
        Volume::new(data, affine, Field::filled(&[d, h, w], 1.0))
    }

    pub fn channels(&self) -> usize {
        self.data.dims4()[0]
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        self.geom.dims
    }
}

/// Trilinear sampling of a `[c, d, h, w]` field at continuous voxel
/// coordinates.
///
/// `points` has shape `[3, ...]` with channels `(i, j, k)`. Returns the
/// sampled values (shape `[c, ...]`) and an inside-domain indicator
/// (shape `[...]`, 1 where the point lies in `[0, n-1]` per axis).
/// Outside points produce value 0.
pub fn sample_trilinear(source: &Field, points: &Field) -> (Field, Field) {
    let [c, d, h, w] = source.dims4();
    assert_eq!(points.shape()[0], 3, "points must have 3 channels");
    let out_spatial = &points.shape()[1..];
    let n = points.channel_len();
    let px = points.channel(0);
    let py = points.channel(1);
    let pz = points.channel(2);

    let mut values = Field::zeros(&[&[c], out_spatial].concat());
    let mut inside = Field::zeros(out_spatial);
    let chan_len = d * h * w;

    for idx in 0..n {
        let (x, y, z) = (px[idx], py[idx], pz[idx]);
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
            continue;
        }
        inside.data_mut()[idx] = 1.0;
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let z0 = (z.floor() as usize).min(d.saturating_sub(2));
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let fz = z - z0 as f64;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let z1 = (z0 + 1).min(d - 1);

        let w000 = (1.0 - fx) * (1.0 - fy) * (1.0 - fz);
        let w100 = fx * (1.0 - fy) * (1.0 - fz);
        let w010 = (1.0 - fx) * fy * (1.0 - fz);
        let w110 = fx * fy * (1.0 - fz);
        let w001 = (1.0 - fx) * (1.0 - fy) * fz;
        let w101 = fx * (1.0 - fy) * fz;
        let w011 = (1.0 - fx) * fy * fz;
        let w111 = fx * fy * fz;

        let src = source.data();
        let out = values.data_mut();
        for ch in 0..c {
            let base = ch * chan_len;
            let v = w000 * src[base + idx3(h, w, x0, y0, z0)]
                + w100 * src[base + idx3(h, w, x1, y0, z0)]
                + w010 * src[base + idx3(h, w, x0, y1, z0)]
                + w110 * src[base + idx3(h, w, x1, y1, z0)]
                + w001 * src[base + idx3(h, w, x0, y0, z1)]
                + w101 * src[base + idx3(h, w, x1, y0, z1)]
                + w011 * src[base + idx3(h, w, x0, y1, z1)]
                + w111 * src[base + idx3(h, w, x1, y1, z1)];
            out[ch * n + idx] = v;
        }
    }
    (values, inside)
}

/// Unnormalized Gaussian taps `exp(-t^2 / 2 sigma^2)` for offsets
/// `-radius..=radius`; the center tap is 1.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    (0..=2 * radius)
        .map(|i| {
            let t = i as f64 - radius as f64;
            (-0.5 * (t / sigma).powi(2)).exp()
        })
        .collect()
}

/// Zero-padded 1D convolution of a `[d, h, w]` field along `axis`
/// (0 = k/d, 1 = j/h, 2 = i/w) with symmetric `taps` of odd length.
pub fn conv1d_axis(input: &Field, taps: &[f64], axis: usize) -> Field {
    let [d, h, w] = input.dims3();
    let radius = taps.len() / 2;
    let mut out = Field::zeros(&[d, h, w]);
    let src = input.data();
    let dst = out.data_mut();
    match axis {
        2 => {
            for row in 0..d * h {
                let base = row * w;
                for (t, &tap) in taps.iter().enumerate() {
                    let off = t as isize - radius as isize;
                    let (x_lo, x_hi) = clip_range(off, w);
                    for x in x_lo..x_hi {
                        dst[base + x] += tap * src[(base as isize + x as isize + off) as usize];
                    }
                }
            }
        }
        1 => {
            for z in 0..d {
                for (t, &tap) in taps.iter().enumerate() {
                    let off = t as isize - radius as isize;
                    let (y_lo, y_hi) = clip_range(off, h);
                    for y in y_lo..y_hi {
                        let dst_base = (z * h + y) * w;
                        let src_base = (z * h + (y as isize + off) as usize) * w;
                        for x in 0..w {
                            dst[dst_base + x] += tap * src[src_base + x];
                        }
                    }
                }
            }
        }
        0 => {
            for (t, &tap) in taps.iter().enumerate() {
                let off = t as isize - radius as isize;
                let (z_lo, z_hi) = clip_range(off, d);
                for z in z_lo..z_hi {
                    let dst_base = z * h * w;
                    let src_base = (z as isize + off) as usize * h * w;
                    for x in 0..h * w {
                        dst[dst_base + x] += tap * src[src_base + x];
                    }
                }
            }
        }
        _ => panic!("axis out of range"),
    }
    out
}

/// Output index range for which `index + off` stays in `[0, n)`.
#[inline]
fn clip_range(off: isize, n: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((n as isize - off).min(n as isize)).max(0) as usize;
    (lo, hi)
}

/// Separable 3D convolution: one `conv1d_axis` pass per axis.
/// `taps` are listed per axis in `(k, j, i)` order.
pub fn conv3_separable(input: &Field, taps: [&[f64]; 3]) -> Field {
    let a = conv1d_axis(input, taps[2], 2);
    let b = conv1d_axis(&a, taps[1], 1);
    conv1d_axis(&b, taps[0], 0)
}

/// Mask-weighted Gaussian smoothing of a `[d, h, w]` field:
/// `conv(data * mask) / conv(mask)`, zero where the local mask mass
/// vanishes. Constants are preserved over valid regions and the kernel
/// is renormalized automatically at borders.
pub fn smooth_masked(data: &Field, mask: &Field, sigma: [f64; 3]) -> Field {
    let taps: Vec<Vec<f64>> = sigma
        .iter()
        .map(|&s| {
            if s > 0.0 {
                gaussian_taps(s, (3.0 * s).floor().max(1.0) as usize)
            } else {
                vec![1.0]
            }
        })
        .collect();
    let taps_ref = [&taps[0][..], &taps[1][..], &taps[2][..]];
    let weighted = data.zip_map(mask, |v, m| v * m);
    let num = conv3_separable(&weighted, taps_ref);
    let den = conv3_separable(mask, taps_ref);
    num.zip_map(&den, |n, d| if d > 1e-12 { n / d } else { 0.0 })
}

/// Gaussian smoothing + subsampling pyramid.
///
/// `factors` must be sorted descending and end with 1. Each level is the
/// input smoothed with std `factor/2` voxels per axis and subsampled by
/// `factor`; the affine is updated so world coordinates are preserved. A
/// coarse mask voxel is valid only when the majority of its footprint is
/// valid. The factor-1 level is the input itself.
pub fn gaussian_pyramid(vol: &Volume, factors: &[usize]) -> Result<Vec<Volume>> {
    if factors.is_empty() || *factors.last().unwrap() != 1 {
        return Err(Error::invalid("pyramid factors must end with 1"));
    }
    if factors.windows(2).any(|p| p[0] < p[1]) || factors.iter().any(|&f| f == 0) {
        return Err(Error::invalid(
            "pyramid factors must be >= 1 and sorted descending",
        ));
    }
    let [d, h, w] = vol.spatial_dims();
    let mut out = Vec::with_capacity(factors.len());
    for &f in factors {
        if f > d || f > h || f > w {
            return Err(Error::invalid(format!(
                "pyramid factor {f} exceeds a spatial extent of {:?}",
                [d, h, w]
            )));
        }
        if f == 1 {
            out.push(vol.clone());
            continue;
        }
        let sigma = f as f64 / 2.0;
        let c = vol.channels();
        let coarse_geom = vol.geom.subsampled(f)?;
        let [cd, ch, cw] = coarse_geom.dims;
        let mut data = Field::zeros(&[c, cd, ch, cw]);
        for chan in 0..c {
            let full = Field::from_vec(&[d, h, w], vol.data.channel(chan).to_vec())?;
            let smoothed = smooth_masked(&full, &vol.mask, [sigma; 3]);
            let dst = data.channel_mut(chan);
            for z in 0..cd {
                for y in 0..ch {
                    for x in 0..cw {
                        dst[idx3(ch, cw, x, y, z)] =
                            smoothed.data()[idx3(h, w, x * f, y * f, z * f)];
                    }
                }
            }
        }
        let mut mask = Field::zeros(&[cd, ch, cw]);
        for z in 0..cd {
            for y in 0..ch {
                for x in 0..cw {
                    let (x0, x1) = (x * f, ((x + 1) * f).min(w));
                    let (y0, y1) = (y * f, ((y + 1) * f).min(h));
                    let (z0, z1) = (z * f, ((z + 1) * f).min(d));
                    let mut valid = 0usize;
                    let mut total = 0usize;
                    for zz in z0..z1 {
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                total += 1;
                                if vol.mask.data()[idx3(h, w, xx, yy, zz)] == 1.0 {
                                    valid += 1;
                                }
                            }
                        }
                    }
                    if 2 * valid > total {
                        mask.data_mut()[idx3(ch, cw, x, y, z)] = 1.0;
                    }
                }
            }
        }
        out.push(Volume::new(data, coarse_geom.affine, mask)?);
    }
    Ok(out)
}

/// Appends per existing channel the Euclidean norm of the spatial
/// gradient, computed by central differences in world units (mm^-1 via
/// the voxel spacing; one-sided at the grid borders). Output has 2C
/// channels.
pub fn derivative_magnitude_channel(vol: &Volume) -> Result<Volume> {
    let [d, h, w] = vol.spatial_dims();
    if d < 3 || h < 3 || w < 3 {
        return Err(Error::invalid(
            "derivative channel requires extents >= 3 per axis",
        ));
    }
    let c = vol.channels();
    let [si, sj, sk] = vol.geom.spacing();
    let mut data = Field::zeros(&[2 * c, d, h, w]);
    data.data_mut()[..c * d * h * w].copy_from_slice(vol.data.data());
    for chan in 0..c {
        let src = vol.data.channel(chan).to_vec();
        let dst = data.channel_mut(c + chan);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let gi = axis_diff(&src, h, w, x, y, z, 2, w, si);
                    let gj = axis_diff(&src, h, w, x, y, z, 1, h, sj);
                    let gk = axis_diff(&src, h, w, x, y, z, 0, d, sk);
                    dst[idx3(h, w, x, y, z)] = (gi * gi + gj * gj + gk * gk).sqrt();
                }
            }
        }
    }
    Volume::new(data, vol.geom.affine, vol.mask.clone())
}

/// First derivative along one axis: central differences in the interior,
/// one-sided at the borders, scaled to world units.
#[inline]
fn axis_diff(
    src: &[f64],
    h: usize,
    w: usize,
    x: usize,
    y: usize,
    z: usize,
    axis: usize,
    extent: usize,
    spacing: f64,
) -> f64 {
    let pos = match axis {
        2 => x,
        1 => y,
        _ => z,
    };
    let at = |p: usize| -> f64 {
        match axis {
            2 => src[idx3(h, w, p, y, z)],
            1 => src[idx3(h, w, x, p, z)],
            _ => src[idx3(h, w, x, y, p)],
        }
    };
    if pos == 0 {
        (at(1) - at(0)) / spacing
    } else if pos == extent - 1 {
        (at(extent - 1) - at(extent - 2)) / spacing
    } else {
        (at(pos + 1) - at(pos - 1)) / (2.0 * spacing)
    }
}

/// Percentile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty; `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi.min(n - 1)] * frac
}

/// Affinely maps the [1st, 99th] percentile of valid-region intensities
/// to [0, 1] per channel, clamping outside.
pub fn normalize_intensities(vol: &Volume) -> Result<Volume> {
    let c = vol.channels();
    let mut data = vol.data.clone();
    for chan in 0..c {
        let mut valid: Vec<f64> = vol
            .data
            .channel(chan)
            .iter()
            .zip(vol.mask.data())
            .filter(|(_, &m)| m == 1.0)
            .map(|(&v, _)| v)
            .collect();
        if valid.is_empty() {
            return Err(Error::EmptyMask);
        }
        valid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p1 = percentile(&valid, 1.0);
        let p99 = percentile(&valid, 99.0);
        let span = p99 - p1;
        if span <= 1e-12 * p1.abs().max(p99.abs()).max(1.0) {
            return Err(Error::ConstantChannel(chan));
        }
        for v in data.channel_mut(chan) {
            *v = ((*v - p1) / span).clamp(0.0, 1.0);
        }
    }
    Volume::new(data, vol.geom.affine, vol.mask.clone())
}
