//! Volumetric data types shared by the whole pipeline.
//!
//! Every grid is stored flat with x varying fastest, then y, then z:
//! `index = x + W * (y + H * z)`. The same order is used by the tensor
//! engine, where a single-channel volume maps onto `(1, 1, D, H, W)`.

use crate::error::{Error, Result};

/// Label value for background voxels.
pub const BACKGROUND: u8 = 0;
/// Label value for kidney voxels.
pub const KIDNEY: u8 = 1;
/// Label value for tumor voxels.
pub const TUMOR: u8 = 2;

/// Grid extent as (width, height, depth).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl Dims {
    pub const fn new(w: usize, h: usize, d: usize) -> Self {
        Dims { w, h, d }
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [usize; 3] {
        [self.w, self.h, self.d]
    }

    /// Number of voxels.
    pub fn len(self) -> usize {
        self.w * self.h * self.d
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(self, x: usize, y: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    #[inline]
    pub fn coords(self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        (x, y, z)
    }

    pub fn fits_within(self, other: Dims) -> bool {
        self.w <= other.w && self.h <= other.h && self.d <= other.d
    }

    pub fn check_same(self, other: Dims) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::DimMismatch {
                left: self.to_array(),
                right: other.to_array(),
            })
        }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.w, self.h, self.d)
    }
}

/// Physical voxel size in millimeters along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(dx) && ok(dy) && ok(dz) {
            Ok(Spacing { dx, dy, dz })
        } else {
            Err(Error::invalid(format!(
                "spacing must be positive and finite, got ({dx}, {dy}, {dz})"
            )))
        }
    }

    pub const fn isotropic_unit() -> Self {
        Spacing {
            dx: 1.0,
            dy: 1.0,
            dz: 1.0,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::isotropic_unit()
    }
}

/// A scalar 3D grid with physical spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "volume {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel {i}")));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![value; dims.len()],
        }
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume {
            dims,
            spacing,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// A volume whose values are probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Volume);

impl ProbMap {
    pub fn new(volume: Volume) -> Result<Self> {
        if let Some(i) = volume.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "probability map voxel {i} = {} outside [0, 1]",
                volume.data[i]
            )));
        }
        Ok(ProbMap(volume))
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        ProbMap::new(Volume::filled(dims, spacing, value))
    }

    pub fn dims(&self) -> Dims {
        self.0.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.0.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn as_volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

/// One flag per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    dims: Dims,
    spacing: Spacing,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "mask {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(BinaryMask {
            dims,
            spacing,
            data,
        })
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        BinaryMask {
            dims,
            spacing,
            data: vec![false; dims.len()],
        }
    }

    pub fn full(dims: Dims, spacing: Spacing) -> Self {
        BinaryMask {
            dims,
            spacing,
            data: vec![true; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.dims.check_same(other.dims)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect();
        Ok(BinaryMask {
            dims: self.dims,
            spacing: self.spacing,
            data,
        })
    }

    /// Mask as 0/1 floats.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Per-voxel class labels from {background, kidney, tumor}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "label map {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&l| l > TUMOR) {
            return Err(Error::invalid(format!("label {} at voxel {i} is not in {{0,1,2}}", data[i])));
        }
        Ok(LabelMap {
            dims,
            spacing,
            data,
        })
    }

    pub fn background(dims: Dims, spacing: Spacing) -> Self {
        LabelMap {
            dims,
            spacing,
            data: vec![BACKGROUND; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Kidney plus tumor.
    pub fn whole_mask(&self) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&l| l >= KIDNEY).collect(),
        }
    }

    pub fn tumor_mask(&self) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&l| l == TUMOR).collect(),
        }
    }
}

/// A binarization threshold strictly inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Threshold(f32);

impl Threshold {
    pub fn new(t: f32) -> Result<Self> {
        if t > 0.0 && t < 1.0 {
            Ok(Threshold(t))
        } else {
            Err(Error::invalid(format!("threshold {t} not in (0, 1)")))
        }
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

/// Foreground where `p >= t`.
pub fn binarize(p: &ProbMap, t: Threshold) -> BinaryMask {
    BinaryMask {
        dims: p.dims(),
        spacing: p.spacing(),
        data: p.data().iter().map(|&v| v >= t.0).collect(),
    }
}

pub fn count_foreground(m: &BinaryMask) -> usize {
    m.data.iter().filter(|&&b| b).count()
}

/// Neighborhood used when grouping foreground voxels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge and corner neighbors.
    #[default]
    TwentySix,
}

impl Connectivity {
    /// Neighbor offsets that precede a voxel in scan order.
    fn backward_offsets(self) -> &'static [(isize, isize, isize)] {
        const SIX: [(isize, isize, isize); 3] = [(-1, 0, 0), (0, -1, 0), (0, 0, -1)];
        const TWENTY_SIX: [(isize, isize, isize); 13] = [
            (-1, 0, 0),
            (-1, -1, 0),
            (0, -1, 0),
            (1, -1, 0),
            (-1, -1, -1),
            (0, -1, -1),
            (1, -1, -1),
            (-1, 0, -1),
            (0, 0, -1),
            (1, 0, -1),
            (-1, 1, -1),
            (0, 1, -1),
            (1, 1, -1),
        ];
        match self {
            Connectivity::Six => &SIX,
            Connectivity::TwentySix => &TWENTY_SIX,
        }
    }
}

/// Component index per voxel: 0 for background, `1..=count` for foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub dims: Dims,
    pub ids: Vec<u32>,
    pub count: usize,
}

impl Components {
    /// Size of each component, indexed by `id - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &id in &self.ids {
            if id > 0 {
                sizes[id as usize - 1] += 1;
            }
        }
        sizes
    }
}

/// Labels 26-connected foreground regions. Ids follow first appearance in scan order.
pub fn connected_components(m: &BinaryMask) -> Components {
    connected_components_with(m, Connectivity::TwentySix)
}

pub fn connected_components_with(m: &BinaryMask, conn: Connectivity) -> Components {
    let dims = m.dims;
    let n = dims.len();
    // provisional labels with a union-find forest over them
    let mut provisional = vec![0u32; n];
    let mut parent: Vec<u32> = vec![0];

    fn find(parent: &mut [u32], mut a: u32) -> u32 {
        while parent[a as usize] != a {
            let up = parent[parent[a as usize] as usize];
            parent[a as usize] = up;
            a = up;
        }
        a
    }

    let offsets = conn.backward_offsets();
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let i = dims.index(x, y, z);
                if !m.data[i] {
                    continue;
                }
                let mut label = 0u32;
                for &(ox, oy, oz) in offsets {
                    let (nx, ny, nz) = (x as isize + ox, y as isize + oy, z as isize + oz);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= dims.w as isize || ny >= dims.h as isize {
                        continue;
                    }
                    let j = dims.index(nx as usize, ny as usize, nz as usize);
                    let other = provisional[j];
                    if other == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = find(&mut parent, other);
                    } else {
                        let (ra, rb) = (find(&mut parent, label), find(&mut parent, other));
                        if ra != rb {
                            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut ids = vec![0u32; n];
    for i in 0..n {
        let p = provisional[i];
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if remap[root] == 0 {
            count += 1;
            remap[root] = count;
        }
        ids[i] = remap[root];
    }
    Components {
        dims,
        ids,
        count: count as usize,
    }
}

/// Voxelwise product with a binary mask.
pub trait Maskable: Sized {
    fn mask_with(&self, mask: &BinaryMask) -> Result<Self>;
}

impl Maskable for ProbMap {
    fn mask_with(&self, mask: &BinaryMask) -> Result<Self> {
        self.dims().check_same(mask.dims)?;
        let data = self
            .data()
            .iter()
            .zip(&mask.data)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        Ok(ProbMap(Volume {
            dims: self.dims(),
            spacing: self.spacing(),
            data,
        }))
    }
}

impl Maskable for LabelMap {
    fn mask_with(&self, mask: &BinaryMask) -> Result<Self> {
        self.dims.check_same(mask.dims)?;
        let data = self
            .data
            .iter()
            .zip(&mask.data)
            .map(|(&l, &keep)| if keep { l } else { BACKGROUND })
            .collect();
        Ok(LabelMap {
            dims: self.dims,
            spacing: self.spacing,
            data,
        })
    }
}

/// Zeroes `a` wherever `b` is background.
pub fn mask_multiply<A: Maskable>(a: &A, b: &BinaryMask) -> Result<A> {
    a.mask_with(b)
}
