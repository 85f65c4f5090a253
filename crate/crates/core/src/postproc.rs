//! Adaptive thresholding with region growing, whole/tumor merging,
//! localization gating, and ensemble averaging.

use crate::error::{Error, Result};
use crate::volcore::{
    binarize, connected_components, count_foreground, BinaryMask, Dims, LabelMap, ProbMap, Threshold, Volume, KIDNEY,
    TUMOR,
};

/// Thresholds and size rule for [`postprocess_case`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdPolicy {
    /// Global threshold `T`.
    pub t: f32,
    /// Whole region: fallback when nothing passes `T`.
    pub whole_fallback: f32,
    /// Whole region: region-growing low threshold.
    pub whole_low: f32,
    /// Tumor: fallback threshold and its region-growing low threshold.
    pub tumor_empty_low: f32,
    /// Tumor: low threshold for regions under `small_cutoff` voxels.
    pub tumor_small_low: f32,
    /// Tumor: low threshold otherwise.
    pub tumor_default_low: f32,
    pub small_cutoff: usize,
    /// Binarization threshold for the localization map.
    pub loc_threshold: f32,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            t: 0.5,
            whole_fallback: 0.1,
            whole_low: 0.4,
            tumor_empty_low: 0.1,
            tumor_small_low: 0.2,
            tumor_default_low: 0.3,
            small_cutoff: 100,
            loc_threshold: 0.5,
        }
    }
}

impl ThresholdPolicy {
    pub const REFERENCE_VOXELS: usize = 256 * 256 * 128;

    /// Default policy with the 100-voxel cutoff scaled by the ratio of `dims`
    /// to a 256x256x128 volume, never below 1.
    pub fn scaled_for(dims: Dims) -> Self {
        let scaled = (100.0 * dims.len() as f64 / Self::REFERENCE_VOXELS as f64).round() as usize;
        ThresholdPolicy {
            small_cutoff: scaled.max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.t,
            self.whole_fallback,
            self.whole_low,
            self.tumor_empty_low,
            self.tumor_small_low,
            self.tumor_default_low,
            self.loc_threshold,
        ];
        if all.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::invalid(format!("thresholds must lie in (0, 1): {self:?}")));
        }
        let lows = [
            self.whole_fallback,
            self.whole_low,
            self.tumor_empty_low,
            self.tumor_small_low,
            self.tumor_default_low,
        ];
        if lows.iter().any(|&t| t >= self.t) {
            return Err(Error::invalid(format!("low thresholds must be below T = {}", self.t)));
        }
        Ok(())
    }
}

/// `seed` plus every component of `p >= t_low` that touches it.
pub fn grow_from_seed(seed: &BinaryMask, p: &ProbMap, t_low: Threshold) -> Result<BinaryMask> {
    Dims::check_same(seed.dims(), p.dims())?;
    let low = binarize(p, t_low);
    let comps = connected_components(&low);
    let mut keep = vec![false; comps.count + 1];
    for (i, &s) in seed.data().iter().enumerate() {
        if s {
            keep[comps.ids[i] as usize] = true;
        }
    }
    keep[0] = false;
    let data = seed
        .data()
        .iter()
        .zip(&comps.ids)
        .map(|(&s, &id)| s || keep[id as usize])
        .collect();
    BinaryMask::new(seed.dims(), seed.spacing(), data)
}

/// `A = p >= t_high` grown by the components of `p >= t_low` that touch `A`.
pub fn region_grow_refine(p: &ProbMap, t_high: Threshold, t_low: Threshold) -> Result<BinaryMask> {
    if t_low.value() >= t_high.value() {
        return Err(Error::invalid(format!(
            "low threshold {} must be below high threshold {}",
            t_low.value(),
            t_high.value()
        )));
    }
    grow_from_seed(&binarize(p, t_high), p, t_low)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WholeBranch {
    /// Nothing passed `T`; fell back to the low threshold.
    Empty,
    Refined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TumorBranch {
    /// Nothing passed `T`, something passed the fallback threshold.
    Empty,
    /// Nothing passed either threshold; the whole region was used.
    StillEmpty,
    Small,
    Default,
}

/// Which branches one [`postprocess_case`] call took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PostprocTrace {
    pub whole: WholeBranch,
    pub tumor: TumorBranch,
}

fn threshold(t: f32) -> Result<Threshold> {
    Threshold::new(t)
}

/// Nearest-neighbour upsampling of a coarse mask by per-axis integer factors.
pub fn upsample_mask(mask: &BinaryMask, dims: Dims) -> Result<BinaryMask> {
    let c = mask.dims();
    if c == dims {
        return Ok(mask.clone());
    }
    if c.is_empty() || dims.w % c.w != 0 || dims.h % c.h != 0 || dims.d % c.d != 0 {
        return Err(Error::invalid(format!("cannot upsample {c} to {dims} by integer factors")));
    }
    let (fx, fy, fz) = (dims.w / c.w, dims.h / c.h, dims.d / c.d);
    let mut data = Vec::with_capacity(dims.len());
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                data.push(mask.get(x / fx, y / fy, z / fz));
            }
        }
    }
    BinaryMask::new(dims, mask.spacing(), data)
}

/// Whole mask, tumor mask, and branch trace before merging.
pub fn threshold_regions(whole: &ProbMap, tumor: &ProbMap, policy: &ThresholdPolicy) -> Result<(BinaryMask, BinaryMask, PostprocTrace)> {
    policy.validate()?;
    Dims::check_same(whole.dims(), tumor.dims())?;
    let t = threshold(policy.t)?;

    let whole_hi = binarize(whole, t);
    let (whole_mask, whole_branch) = if count_foreground(&whole_hi) == 0 {
        (binarize(whole, threshold(policy.whole_fallback)?), WholeBranch::Empty)
    } else {
        (grow_from_seed(&whole_hi, whole, threshold(policy.whole_low)?)?, WholeBranch::Refined)
    };

    let tumor_hi = binarize(tumor, t);
    let tumor_count = count_foreground(&tumor_hi);
    let (tumor_mask, tumor_branch) = if tumor_count == 0 {
        let low = threshold(policy.tumor_empty_low)?;
        let fallback = binarize(tumor, low);
        let (seed, branch) = if count_foreground(&fallback) == 0 {
            (whole_mask.clone(), TumorBranch::StillEmpty)
        } else {
            (fallback, TumorBranch::Empty)
        };
        (grow_from_seed(&seed, tumor, low)?, branch)
    } else if tumor_count < policy.small_cutoff {
        (grow_from_seed(&tumor_hi, tumor, threshold(policy.tumor_small_low)?)?, TumorBranch::Small)
    } else {
        (grow_from_seed(&tumor_hi, tumor, threshold(policy.tumor_default_low)?)?, TumorBranch::Default)
    };

    Ok((
        whole_mask,
        tumor_mask,
        PostprocTrace {
            whole: whole_branch,
            tumor: tumor_branch,
        },
    ))
}

/// Tumor (2) where `tumor`, kidney (1) where only `whole`, then zeroed
/// outside `gate`.
pub fn merge_regions(whole: &BinaryMask, tumor: &BinaryMask, gate: &BinaryMask) -> Result<LabelMap> {
    Dims::check_same(whole.dims(), tumor.dims())?;
    Dims::check_same(whole.dims(), gate.dims())?;
    let data = whole
        .data()
        .iter()
        .zip(tumor.data())
        .zip(gate.data())
        .map(|((&w, &t), &g)| match (g, t, w) {
            (false, _, _) => 0,
            (true, true, _) => TUMOR,
            (true, false, true) => KIDNEY,
            (true, false, false) => 0,
        })
        .collect();
    LabelMap::new(whole.dims(), whole.spacing(), data)
}

/// Full post-processing of one case. `loc` may be coarser than the other
/// maps by integer factors; it is binarized and nearest-upsampled.
pub fn postprocess_case(whole: &ProbMap, tumor: &ProbMap, loc: &ProbMap, policy: &ThresholdPolicy) -> Result<LabelMap> {
    Ok(postprocess_case_traced(whole, tumor, loc, policy)?.0)
}

pub fn postprocess_case_traced(
    whole: &ProbMap,
    tumor: &ProbMap,
    loc: &ProbMap,
    policy: &ThresholdPolicy,
) -> Result<(LabelMap, PostprocTrace)> {
    let (w, t, trace) = threshold_regions(whole, tumor, policy)?;
    let gate = upsample_mask(&binarize(loc, threshold(policy.loc_threshold)?), whole.dims())?;
    Ok((merge_regions(&w, &t, &gate)?, trace))
}

/// Labels from plain 0.5 binarization: no region growing, no gating.
pub fn plain_labels(whole: &ProbMap, tumor: &ProbMap) -> Result<LabelMap> {
    Dims::check_same(whole.dims(), tumor.dims())?;
    let t = threshold(0.5)?;
    let gate = BinaryMask::full(whole.dims(), whole.spacing());
    merge_regions(&binarize(whole, t), &binarize(tumor, t), &gate)
}

/// Voxelwise mean of `maps`. Each voxel's values are summed in sorted order,
/// so the result does not depend on the order of the list.
pub fn ensemble_average(maps: &[&ProbMap]) -> Result<ProbMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("ensemble needs at least one map"))?;
    for m in maps {
        Dims::check_same(m.dims(), first.dims())?;
    }
    if maps.len() == 1 {
        return Ok((*first).clone());
    }
    let n = maps.len() as f64;
    let mut scratch = vec![0f32; maps.len()];
    let data = (0..first.data().len())
        .map(|i| {
            for (s, m) in scratch.iter_mut().zip(maps) {
                *s = m.data()[i];
            }
            scratch.sort_by(f32::total_cmp);
            let sum: f64 = scratch.iter().map(|&v| v as f64).sum();
            ((sum / n) as f32).clamp(0.0, 1.0)
        })
        .collect();
    ProbMap::new(Volume::new(first.dims(), first.spacing(), data)?)
}
