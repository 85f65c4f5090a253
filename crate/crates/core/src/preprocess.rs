//! Resampling, padding, resizing, normalization, denoising, rotation
//! augmentation, and patch extraction/stitching.
//!
//! The forward pipeline for one case is: resample to a common spacing, pad
//! (centered) to a common grid, resize to fixed final dims, optionally median
//! filter, then normalize. [`PreprocessPlan`] records every step so that
//! predictions can be mapped back to the original geometry.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::vio::KeyValues;
use crate::volcore::{Dims, LabelMap, ProbMap, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Interp {
    #[default]
    Trilinear,
    Nearest,
}

/// Source index pair and weight of the high neighbour for one output index.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Center-aligned mapping: output index `i` samples source position
/// `(i + 0.5) * scale - 0.5`, clamped to the source extent.
fn axis_taps(src: usize, dst: usize, scale: f64, mode: Interp) -> Vec<Tap> {
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            match mode {
                Interp::Nearest => {
                    let n = (pos.round() as usize).min(src - 1);
                    Tap { lo: n, hi: n, frac: 0.0 }
                }
                Interp::Trilinear => {
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(src - 1);
                    Tap {
                        lo,
                        hi,
                        frac: pos - lo as f64,
                    }
                }
            }
        })
        .collect()
}

fn sample_grid(v: &Volume, dims: Dims, scale: [f64; 3], spacing: Spacing, mode: Interp) -> Result<Volume> {
    let src = v.dims();
    let tx = axis_taps(src.w, dims.w, scale[0], mode);
    let ty = axis_taps(src.h, dims.h, scale[1], mode);
    let tz = axis_taps(src.d, dims.d, scale[2], mode);
    let data = v.data();
    let at = |x: usize, y: usize, z: usize| data[src.index(x, y, z)] as f64;
    let mut out = Vec::with_capacity(dims.len());
    for z in &tz {
        for y in &ty {
            for x in &tx {
                let plane = |zz: usize| {
                    let row = |yy: usize| at(x.lo, yy, zz) * (1.0 - x.frac) + at(x.hi, yy, zz) * x.frac;
                    row(y.lo) * (1.0 - y.frac) + row(y.hi) * y.frac
                };
                out.push((plane(z.lo) * (1.0 - z.frac) + plane(z.hi) * z.frac) as f32);
            }
        }
    }
    Volume::new(dims, spacing, out)
}

/// Dims after resampling `dims` at `spacing` onto `target`.
pub fn resampled_dims(dims: Dims, spacing: Spacing, target: Spacing) -> Result<Dims> {
    let axis = |n: usize, s: f64, t: f64| (n as f64 * s / t).round() as usize;
    let out = Dims::new(
        axis(dims.w, spacing.dx, target.dx),
        axis(dims.h, spacing.dy, target.dy),
        axis(dims.d, spacing.dz, target.dz),
    );
    if out.is_empty() {
        return Err(Error::invalid(format!(
            "resampling {dims} at {:?} to {:?} yields empty dims {out}",
            spacing.to_array(),
            target.to_array()
        )));
    }
    Ok(out)
}

/// Resamples onto a new voxel spacing; dims follow from the physical extent.
pub fn resample(v: &Volume, target: Spacing, mode: Interp) -> Result<Volume> {
    let dims = resampled_dims(v.dims(), v.spacing(), target)?;
    let s = v.spacing();
    let scale = [target.dx / s.dx, target.dy / s.dy, target.dz / s.dz];
    sample_grid(v, dims, scale, target, mode)
}

/// Resizes to exact dims, stretching the spacing to keep the physical extent.
pub fn resize_to(v: &Volume, dims: Dims, mode: Interp) -> Result<Volume> {
    if dims.is_empty() {
        return Err(Error::invalid(format!("cannot resize to empty dims {dims}")));
    }
    let src = v.dims();
    let s = v.spacing();
    let scale = [
        src.w as f64 / dims.w as f64,
        src.h as f64 / dims.h as f64,
        src.d as f64 / dims.d as f64,
    ];
    let spacing = Spacing::new(s.dx * scale[0], s.dy * scale[1], s.dz * scale[2])?;
    sample_grid(v, dims, scale, spacing, mode)
}

fn labels_as_volume(l: &LabelMap) -> Volume {
    Volume::new(l.dims(), l.spacing(), l.data().iter().map(|&b| b as f32).collect()).expect("labels are finite")
}

fn volume_as_labels(v: &Volume) -> Result<LabelMap> {
    LabelMap::new(v.dims(), v.spacing(), v.data().iter().map(|&x| x as u8).collect())
}

pub fn resample_labels(l: &LabelMap, target: Spacing) -> Result<LabelMap> {
    volume_as_labels(&resample(&labels_as_volume(l), target, Interp::Nearest)?)
}

pub fn resize_labels(l: &LabelMap, dims: Dims) -> Result<LabelMap> {
    volume_as_labels(&resize_to(&labels_as_volume(l), dims, Interp::Nearest)?)
}

/// Pad amounts `[x1, x2, y1, y2, z1, z2]` (low/high side per axis) for
/// centering `inner` in `outer`. Odd gaps put the extra voxel on the high side.
pub fn centered_offsets(inner: Dims, outer: Dims) -> Result<[usize; 6]> {
    if !inner.fits_within(outer) {
        return Err(Error::invalid(format!("cannot pad {inner} into smaller {outer}")));
    }
    let split = |a: usize, b: usize| {
        let gap = b - a;
        (gap / 2, gap - gap / 2)
    };
    let (x1, x2) = split(inner.w, outer.w);
    let (y1, y2) = split(inner.h, outer.h);
    let (z1, z2) = split(inner.d, outer.d);
    Ok([x1, x2, y1, y2, z1, z2])
}

fn pad_raw<T: Copy>(data: &[T], inner: Dims, outer: Dims, off: [usize; 6], fill: T) -> Vec<T> {
    let mut out = vec![fill; outer.len()];
    for z in 0..inner.d {
        for y in 0..inner.h {
            let src = inner.index(0, y, z);
            let dst = outer.index(off[0], y + off[2], z + off[4]);
            out[dst..dst + inner.w].copy_from_slice(&data[src..src + inner.w]);
        }
    }
    out
}

fn crop_raw<T: Copy>(data: &[T], outer: Dims, inner: Dims, off: [usize; 6]) -> Vec<T> {
    let mut out = Vec::with_capacity(inner.len());
    for z in 0..inner.d {
        for y in 0..inner.h {
            let src = outer.index(off[0], y + off[2], z + off[4]);
            out.extend_from_slice(&data[src..src + inner.w]);
        }
    }
    out
}

fn crop_dims(outer: Dims, off: [usize; 6]) -> Result<Dims> {
    let axis = |n: usize, a: usize, b: usize| n.checked_sub(a + b).filter(|&m| m > 0);
    match (axis(outer.w, off[0], off[1]), axis(outer.h, off[2], off[3]), axis(outer.d, off[4], off[5])) {
        (Some(w), Some(h), Some(d)) => Ok(Dims::new(w, h, d)),
        _ => Err(Error::invalid(format!("crop offsets {off:?} exceed {outer}"))),
    }
}

/// Centered zero padding; returns the padded volume and the crop offsets.
pub fn pad_to(v: &Volume, dims: Dims) -> Result<(Volume, [usize; 6])> {
    let off = centered_offsets(v.dims(), dims)?;
    let data = pad_raw(v.data(), v.dims(), dims, off, 0.0);
    Ok((Volume::new(dims, v.spacing(), data)?, off))
}

pub fn pad_labels(l: &LabelMap, dims: Dims) -> Result<(LabelMap, [usize; 6])> {
    let off = centered_offsets(l.dims(), dims)?;
    let data = pad_raw(l.data(), l.dims(), dims, off, 0);
    Ok((LabelMap::new(dims, l.spacing(), data)?, off))
}

/// Removes `[x1, x2, y1, y2, z1, z2]` voxels from the low/high sides.
pub fn crop(v: &Volume, off: [usize; 6]) -> Result<Volume> {
    let inner = crop_dims(v.dims(), off)?;
    Volume::new(inner, v.spacing(), crop_raw(v.data(), v.dims(), inner, off))
}

pub fn crop_labels(l: &LabelMap, off: [usize; 6]) -> Result<LabelMap> {
    let inner = crop_dims(l.dims(), off)?;
    LabelMap::new(inner, l.spacing(), crop_raw(l.data(), l.dims(), inner, off))
}

/// Zero mean, unit population standard deviation.
pub fn normalize(v: &Volume) -> Result<Volume> {
    let n = v.data().len() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || v.min_value() == v.max_value() {
        return Err(Error::invalid("cannot normalize a constant volume"));
    }
    let data = v.data().iter().map(|&x| ((x as f64 - mean) / std) as f32).collect();
    Volume::new(v.dims(), v.spacing(), data)
}

/// 3x3x3 median with replicated borders.
pub fn median_denoise(v: &Volume) -> Volume {
    let d = v.dims();
    let data = v.data();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(d.len());
    let mut window = [0f32; 27];
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let mut k = 0;
                for dz in -1..=1isize {
                    let zz = clamp(z as isize + dz, d.d);
                    for dy in -1..=1isize {
                        let yy = clamp(y as isize + dy, d.h);
                        for dx in -1..=1isize {
                            window[k] = data[d.index(clamp(x as isize + dx, d.w), yy, zz)];
                            k += 1;
                        }
                    }
                }
                let (_, median, _) = window.select_nth_unstable_by(13, f32::total_cmp);
                out.push(*median);
            }
        }
    }
    Volume::new(d, v.spacing(), out).expect("median of finite values is finite")
}

/// Rotates every axial (x-y) slice by `degrees` about the slice center.
/// Samples falling outside the slice take the volume's minimum value.
pub fn rotate_axial(v: &Volume, degrees: f64, mode: Interp) -> Volume {
    if degrees == 0.0 {
        return v.clone();
    }
    let d = v.dims();
    let fill = v.min_value();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (d.w as f64 - 1.0) / 2.0;
    let cy = (d.h as f64 - 1.0) / 2.0;
    let data = v.data();
    let tol = 1e-9;
    let mut out = Vec::with_capacity(d.len());
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                // inverse rotation: where does this output voxel come from
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                let sx = cos * px + sin * py + cx;
                let sy = -sin * px + cos * py + cy;
                let inside = sx >= -tol && sy >= -tol && sx <= d.w as f64 - 1.0 + tol && sy <= d.h as f64 - 1.0 + tol;
                if !inside {
                    out.push(fill);
                    continue;
                }
                let sx = sx.clamp(0.0, d.w as f64 - 1.0);
                let sy = sy.clamp(0.0, d.h as f64 - 1.0);
                let value = match mode {
                    Interp::Nearest => data[d.index(sx.round() as usize, sy.round() as usize, z)],
                    Interp::Trilinear => {
                        let x0 = sx.floor() as usize;
                        let y0 = sy.floor() as usize;
                        let x1 = (x0 + 1).min(d.w - 1);
                        let y1 = (y0 + 1).min(d.h - 1);
                        let fx = sx - x0 as f64;
                        let fy = sy - y0 as f64;
                        let at = |xx: usize, yy: usize| data[d.index(xx, yy, z)] as f64;
                        let lo = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                        let hi = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                        (lo * (1.0 - fy) + hi * fy) as f32
                    }
                };
                out.push(value);
            }
        }
    }
    Volume::new(d, v.spacing(), out).expect("rotation preserves finiteness")
}

pub fn rotate_labels(l: &LabelMap, degrees: f64) -> LabelMap {
    volume_as_labels(&rotate_axial(&labels_as_volume(l), degrees, Interp::Nearest)).expect("labels stay in range")
}

/// Draws one angle uniformly from `[-max_degrees, max_degrees]` and rotates
/// the image (interpolated) and its labels (nearest) together.
pub fn augment_rotate<R: Rng>(image: &Volume, labels: &LabelMap, max_degrees: f64, rng: &mut R) -> Result<(Volume, LabelMap, f64)> {
    if !(max_degrees >= 0.0) {
        return Err(Error::invalid(format!("rotation bound must be >= 0, got {max_degrees}")));
    }
    Dims::check_same(image.dims(), labels.dims())?;
    let angle = if max_degrees == 0.0 {
        0.0
    } else {
        rng.random_range(-max_degrees..=max_degrees)
    };
    Ok((rotate_axial(image, angle, Interp::Trilinear), rotate_labels(labels, angle), angle))
}

/// Averages non-overlapping `factor`-cubes. Dims must be divisible.
pub fn block_average(v: &Volume, factor: usize) -> Result<Volume> {
    let d = v.dims();
    if factor == 0 || d.w % factor != 0 || d.h % factor != 0 || d.d % factor != 0 {
        return Err(Error::invalid(format!("{d} is not divisible by {factor}")));
    }
    if factor == 1 {
        return Ok(v.clone());
    }
    let out_dims = Dims::new(d.w / factor, d.h / factor, d.d / factor);
    let s = v.spacing();
    let f = factor as f64;
    let spacing = Spacing::new(s.dx * f, s.dy * f, s.dz * f)?;
    let norm = 1.0 / (factor * factor * factor) as f64;
    let data = v.data();
    let out = Volume::from_fn(out_dims, spacing, |x, y, z| {
        let mut acc = 0.0f64;
        for zz in z * factor..(z + 1) * factor {
            for yy in y * factor..(y + 1) * factor {
                let row = d.index(x * factor, yy, zz);
                acc += data[row..row + factor].iter().map(|&q| q as f64).sum::<f64>();
            }
        }
        (acc * norm) as f32
    });
    Ok(out)
}

/// Full preprocessing settings shared by every case of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// Common spacing; the default of 1 mm isotropic is an arbitrary choice.
    pub target_spacing: Spacing,
    pub final_dims: Dims,
    pub median: bool,
}

impl PreprocessConfig {
    pub const FULL_DIMS: Dims = Dims { w: 256, h: 256, d: 128 };

    /// Final dims of 256x256x128 divided by `divisor`.
    pub fn desk_scale(divisor: usize) -> Result<Self> {
        let f = Self::FULL_DIMS;
        if divisor == 0 || f.w % divisor != 0 || f.d % divisor != 0 {
            return Err(Error::invalid(format!("divisor {divisor} does not divide {f}")));
        }
        Ok(PreprocessConfig {
            target_spacing: Spacing::isotropic_unit(),
            final_dims: Dims::new(f.w / divisor, f.h / divisor, f.d / divisor),
            median: false,
        })
    }
}

/// Everything needed to reproduce or invert one case's preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessPlan {
    pub original_dims: Dims,
    pub original_spacing: Spacing,
    pub target_spacing: Spacing,
    pub resampled_dims: Dims,
    pub padded_dims: Dims,
    /// `[x1, x2, y1, y2, z1, z2]` padding added on the low/high sides.
    pub offsets: [usize; 6],
    pub final_dims: Dims,
    pub median: bool,
}

/// Smallest grid holding every resampled case.
pub fn common_grid(resampled: impl IntoIterator<Item = Dims>) -> Option<Dims> {
    resampled.into_iter().reduce(|a, b| Dims::new(a.w.max(b.w), a.h.max(b.h), a.d.max(b.d)))
}

impl PreprocessPlan {
    pub fn new(original_dims: Dims, original_spacing: Spacing, config: &PreprocessConfig, padded_dims: Dims) -> Result<Self> {
        let resampled_dims = resampled_dims(original_dims, original_spacing, config.target_spacing)?;
        let offsets = centered_offsets(resampled_dims, padded_dims)?;
        if config.final_dims.is_empty() {
            return Err(Error::invalid("final dims must be positive"));
        }
        Ok(PreprocessPlan {
            original_dims,
            original_spacing,
            target_spacing: config.target_spacing,
            resampled_dims,
            padded_dims,
            offsets,
            final_dims: config.final_dims,
            median: config.median,
        })
    }

    fn check_input(&self, dims: Dims, spacing: Spacing) -> Result<()> {
        Dims::check_same(dims, self.original_dims)?;
        if spacing != self.original_spacing {
            return Err(Error::invalid(format!(
                "spacing {:?} differs from planned {:?}",
                spacing.to_array(),
                self.original_spacing.to_array()
            )));
        }
        Ok(())
    }

    /// Resample, pad, resize, optional median, normalize.
    pub fn apply_image(&self, image: &Volume) -> Result<Volume> {
        self.check_input(image.dims(), image.spacing())?;
        let resampled = resample(image, self.target_spacing, Interp::Trilinear)?;
        let (padded, _) = pad_to(&resampled, self.padded_dims)?;
        let mut out = resize_to(&padded, self.final_dims, Interp::Trilinear)?;
        if self.median {
            out = median_denoise(&out);
        }
        normalize(&out)
    }

    pub fn apply_labels(&self, labels: &LabelMap) -> Result<LabelMap> {
        self.check_input(labels.dims(), labels.spacing())?;
        let resampled = resample_labels(labels, self.target_spacing)?;
        let (padded, _) = pad_labels(&resampled, self.padded_dims)?;
        resize_labels(&padded, self.final_dims)
    }

    /// Maps a final-grid probability map back onto the original grid.
    pub fn invert_prob(&self, p: &ProbMap) -> Result<ProbMap> {
        let v = self.invert_volume(p.as_volume(), Interp::Trilinear)?;
        let clamped = v.data().iter().map(|x| x.clamp(0.0, 1.0)).collect();
        ProbMap::new(Volume::new(v.dims(), v.spacing(), clamped)?)
    }

    pub fn invert_labels(&self, l: &LabelMap) -> Result<LabelMap> {
        volume_as_labels(&self.invert_volume(&labels_as_volume(l), Interp::Nearest)?)
    }

    fn invert_volume(&self, v: &Volume, mode: Interp) -> Result<Volume> {
        Dims::check_same(v.dims(), self.final_dims)?;
        let padded = resize_to(v, self.padded_dims, mode)?;
        let cropped = crop(&padded, self.offsets)?;
        let back = resize_to(&cropped, self.original_dims, mode)?;
        Ok(back.with_spacing(self.original_spacing))
    }

    pub fn to_key_values(&self) -> KeyValues {
        let dims = |d: Dims| format!("{},{},{}", d.w, d.h, d.d);
        let sp = |s: Spacing| format!("{},{},{}", s.dx, s.dy, s.dz);
        let mut kv = KeyValues::new();
        kv.set("original_dims", dims(self.original_dims))
            .set("original_spacing", sp(self.original_spacing))
            .set("target_spacing", sp(self.target_spacing))
            .set("resampled_dims", dims(self.resampled_dims))
            .set("padded_dims", dims(self.padded_dims))
            .set("offsets", self.offsets.map(|o| o.to_string()).join(","))
            .set("final_dims", dims(self.final_dims))
            .set("median", self.median);
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let dims = |k: &str| -> Result<Dims> {
            let v: Vec<usize> = kv.require_list(k)?;
            let arr: [usize; 3] = v.try_into().map_err(|_| Error::invalid(format!("`{k}` needs 3 values")))?;
            Ok(Dims::from_array(arr))
        };
        let sp = |k: &str| -> Result<Spacing> {
            let v: Vec<f64> = kv.require_list(k)?;
            match v[..] {
                [a, b, c] => Spacing::new(a, b, c),
                _ => Err(Error::invalid(format!("`{k}` needs 3 values"))),
            }
        };
        let offsets: Vec<usize> = kv.require_list("offsets")?;
        Ok(PreprocessPlan {
            original_dims: dims("original_dims")?,
            original_spacing: sp("original_spacing")?,
            target_spacing: sp("target_spacing")?,
            resampled_dims: dims("resampled_dims")?,
            padded_dims: dims("padded_dims")?,
            offsets: offsets.try_into().map_err(|_| Error::invalid("`offsets` needs 6 values"))?,
            final_dims: dims("final_dims")?,
            median: kv.require("median")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_key_values().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }
}

/// Sliding-window layout over a volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    dims: Dims,
    shape: Dims,
    stride: Dims,
    origins: Vec<[usize; 3]>,
}

fn axis_origins(dim: usize, shape: usize, stride: usize) -> Vec<usize> {
    let mut o: Vec<usize> = (0..=(dim - shape) / stride).map(|i| i * stride).collect();
    let last = dim - shape;
    if *o.last().unwrap() != last {
        o.push(last);
    }
    o
}

impl PatchGrid {
    /// Patches of `shape` overlapping by `overlap`; the last patch per axis
    /// is shifted flush with the boundary when the stride does not land on it.
    pub fn new(dims: Dims, shape: Dims, overlap: Dims) -> Result<Self> {
        if shape.is_empty() || !shape.fits_within(dims) {
            return Err(Error::invalid(format!("patch {shape} does not fit in volume {dims}")));
        }
        if overlap.w >= shape.w || overlap.h >= shape.h || overlap.d >= shape.d {
            return Err(Error::invalid(format!("overlap {overlap} leaves no stride for patch {shape}")));
        }
        let stride = Dims::new(shape.w - overlap.w, shape.h - overlap.h, shape.d - overlap.d);
        let xs = axis_origins(dims.w, shape.w, stride.w);
        let ys = axis_origins(dims.h, shape.h, stride.h);
        let zs = axis_origins(dims.d, shape.d, stride.d);
        let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &x in &xs {
            for &y in &ys {
                for &z in &zs {
                    origins.push([x, y, z]);
                }
            }
        }
        Ok(PatchGrid {
            dims,
            shape,
            stride,
            origins,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn shape(&self) -> Dims {
        self.shape
    }

    pub fn stride(&self) -> Dims {
        self.stride
    }

    /// `[x, y, z]` origins in lexicographic order.
    pub fn origins(&self) -> &[[usize; 3]] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub data: Volume,
}

fn copy_region<T: Copy>(src: &[T], src_dims: Dims, origin: [usize; 3], shape: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(shape.len());
    for z in 0..shape.d {
        for y in 0..shape.h {
            let start = src_dims.index(origin[0], origin[1] + y, origin[2] + z);
            out.extend_from_slice(&src[start..start + shape.w]);
        }
    }
    out
}

pub fn extract_region(v: &Volume, origin: [usize; 3], shape: Dims) -> Result<Volume> {
    let d = v.dims();
    if origin[0] + shape.w > d.w || origin[1] + shape.h > d.h || origin[2] + shape.d > d.d {
        return Err(Error::invalid(format!("region {shape} at {origin:?} exceeds {d}")));
    }
    Volume::new(shape, v.spacing(), copy_region(v.data(), d, origin, shape))
}

pub fn extract_label_region(l: &LabelMap, origin: [usize; 3], shape: Dims) -> Result<LabelMap> {
    let d = l.dims();
    if origin[0] + shape.w > d.w || origin[1] + shape.h > d.h || origin[2] + shape.d > d.d {
        return Err(Error::invalid(format!("region {shape} at {origin:?} exceeds {d}")));
    }
    LabelMap::new(shape, l.spacing(), copy_region(l.data(), d, origin, shape))
}

pub fn extract_patches(v: &Volume, grid: &PatchGrid) -> Result<Vec<Patch>> {
    Dims::check_same(v.dims(), grid.dims())?;
    grid.origins()
        .iter()
        .map(|&origin| {
            Ok(Patch {
                origin,
                data: extract_region(v, origin, grid.shape())?,
            })
        })
        .collect()
}

/// Per-voxel mean of every patch covering the voxel. Accumulates in f64 in
/// patch order, so a constant input reconstructs exactly.
pub fn stitch_mean(patches: &[Patch], dims: Dims, spacing: Spacing) -> Result<Volume> {
    let mut sum = vec![0f64; dims.len()];
    let mut count = vec![0u32; dims.len()];
    for p in patches {
        let s = p.data.dims();
        let o = p.origin;
        if o[0] + s.w > dims.w || o[1] + s.h > dims.h || o[2] + s.d > dims.d {
            return Err(Error::invalid(format!("patch {s} at {o:?} exceeds {dims}")));
        }
        for z in 0..s.d {
            for y in 0..s.h {
                let dst = dims.index(o[0], o[1] + y, o[2] + z);
                let src = s.index(0, y, z);
                for (i, &v) in p.data.data()[src..src + s.w].iter().enumerate() {
                    sum[dst + i] += v as f64;
                    count[dst + i] += 1;
                }
            }
        }
    }
    if let Some(hole) = count.iter().position(|&c| c == 0) {
        let (x, y, z) = dims.coords(hole);
        return Err(Error::invalid(format!("voxel ({x}, {y}, {z}) is not covered by any patch")));
    }
    let data = sum.iter().zip(&count).map(|(&s, &c)| (s / c as f64) as f32).collect();
    Volume::new(dims, spacing, data)
}

pub fn stitch_patches(patches: &[Patch], dims: Dims, spacing: Spacing) -> Result<ProbMap> {
    ProbMap::new(stitch_mean(patches, dims, spacing)?)
}
