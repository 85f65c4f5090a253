//! U-Net graphs and the localization / whole / tumor cascade.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{GraphBuilder, ModelGraph, NodeId, ParamSet, Tensor5};
use crate::preprocess::{block_average, extract_region, stitch_mean, Patch, PatchGrid};
use crate::vio::{load_params_for, save_params, KeyValues};
use crate::volcore::{Dims, ProbMap, Volume};

/// Architecture of one U-Net.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetSpec {
    /// Encoder levels above the bottleneck.
    pub depth: usize,
    /// Channels at level 0; level `i` has `base_channels << i`.
    pub base_channels: usize,
    pub in_channels: usize,
    /// Concatenate the raw input, average-pooled by `2^i`, at encoder level `i >= 1`.
    pub input_pyramid: bool,
    /// Squeeze-and-excitation reduction ratio; `None` disables SE blocks.
    pub se_reduction: Option<usize>,
}

impl UNetSpec {
    pub const DESK_DEPTH: usize = 3;
    pub const DESK_BASE: usize = 8;
    pub const DESK_SE_REDUCTION: usize = 2;

    /// Localization net: one input channel, no pyramid.
    pub fn lnet(depth: usize, base_channels: usize) -> Self {
        UNetSpec {
            depth,
            base_channels,
            in_channels: 1,
            input_pyramid: false,
            se_reduction: None,
        }
    }

    /// Whole-region net: one input channel, pyramid and SE on.
    pub fn wnet(depth: usize, base_channels: usize) -> Self {
        UNetSpec {
            depth,
            base_channels,
            in_channels: 1,
            input_pyramid: true,
            se_reduction: Some(Self::DESK_SE_REDUCTION),
        }
    }

    /// Tumor net: image plus whole-region probability.
    pub fn tnet(depth: usize, base_channels: usize) -> Self {
        UNetSpec {
            in_channels: 2,
            ..Self::wnet(depth, base_channels)
        }
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 6 {
            return Err(Error::invalid(format!("depth must be in 1..=6, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if let Some(r) = self.se_reduction {
            if r == 0 || self.base_channels % r != 0 {
                return Err(Error::invalid(format!(
                    "SE reduction {r} must divide the base channel count {}",
                    self.base_channels
                )));
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("depth", self.depth)
            .set("base_channels", self.base_channels)
            .set("in_channels", self.in_channels)
            .set("input_pyramid", self.input_pyramid)
            .set("se_reduction", self.se_reduction.unwrap_or(0));
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let se: usize = kv.require("se_reduction")?;
        let spec = UNetSpec {
            depth: kv.require("depth")?,
            base_channels: kv.require("base_channels")?,
            in_channels: kv.require("in_channels")?,
            input_pyramid: kv.require("input_pyramid")?,
            se_reduction: (se > 0).then_some(se),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn conv_relu(b: &mut GraphBuilder, name: &str, input: NodeId, channels: usize) -> Result<NodeId> {
    let c = b.conv3d(name, input, channels)?;
    Ok(b.relu(&format!("{name}.relu"), c))
}

/// Encoder-decoder with skip connections and a 1-channel sigmoid head.
///
/// Encoder level `i`: (pyramid concat) -> conv-ReLU x2 -> (SE) -> skip, maxpool.
/// Decoder level `i`: upsample -> conv-ReLU -> concat skip -> conv-ReLU x2.
pub fn build_unet(name: &str, spec: &UNetSpec) -> Result<ModelGraph> {
    spec.validate()?;
    let (mut b, input) = GraphBuilder::new(spec.in_channels);
    let mut x = input;
    let mut skips = Vec::with_capacity(spec.depth);
    for level in 0..=spec.depth {
        let channels = spec.base_channels << level;
        if level > 0 && spec.input_pyramid {
            let pooled = b.downsample_input(&format!("enc{level}.pyramid"), input, 1 << level)?;
            x = b.concat(&format!("enc{level}.concat"), &[x, pooled])?;
        }
        x = conv_relu(&mut b, &format!("enc{level}.conv0"), x, channels)?;
        x = conv_relu(&mut b, &format!("enc{level}.conv1"), x, channels)?;
        if let Some(r) = spec.se_reduction {
            x = b.se_block(&format!("enc{level}.se"), x, r)?;
        }
        if level < spec.depth {
            skips.push(x);
            x = b.maxpool(&format!("enc{level}.pool"), x)?;
        }
    }
    for level in (0..spec.depth).rev() {
        let channels = spec.base_channels << level;
        let up = b.upsample(&format!("dec{level}.up"), x)?;
        let up = conv_relu(&mut b, &format!("dec{level}.upconv"), up, channels)?;
        let cat = b.concat(&format!("dec{level}.concat"), &[skips[level], up])?;
        x = conv_relu(&mut b, &format!("dec{level}.conv0"), cat, channels)?;
        x = conv_relu(&mut b, &format!("dec{level}.conv1"), x, channels)?;
    }
    let head = b.conv3d("head", x, 1)?;
    let out = b.sigmoid("head.sigmoid", head);
    b.finish(name, out)
}

/// A volume as a `(1, 1, D, H, W)` tensor; the memory layout is shared.
pub fn volume_to_tensor(v: &Volume) -> Tensor5<f32> {
    let d = v.dims();
    Tensor5::from_vec([1, 1, d.d, d.h, d.w], v.data().to_vec()).expect("volume length matches dims")
}

/// Stacks equally sized volumes as channels of one tensor.
pub fn volumes_to_tensor(channels: &[&Volume]) -> Result<Tensor5<f32>> {
    let first = channels.first().ok_or_else(|| Error::invalid("no channels"))?;
    let d = first.dims();
    let mut data = Vec::with_capacity(d.len() * channels.len());
    for v in channels {
        Dims::check_same(v.dims(), d)?;
        data.extend_from_slice(v.data());
    }
    Tensor5::from_vec([1, channels.len(), d.d, d.h, d.w], data)
}

/// One channel of a batch-1 tensor as a volume.
pub fn tensor_channel_to_volume(t: &Tensor5<f32>, channel: usize, like: &Volume) -> Result<Volume> {
    let [_, _, d, h, w] = t.shape();
    let dims = Dims::new(w, h, d);
    Dims::check_same(dims, like.dims())?;
    Volume::new(dims, like.spacing(), t.channel(0, channel).to_vec())
}

/// An architecture with its graph and `f32` parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: UNetSpec,
    pub graph: ModelGraph,
    pub params: ParamSet<f32>,
}

impl Network {
    pub fn new(name: &str, spec: UNetSpec, seed: u64) -> Result<Self> {
        let graph = build_unet(name, &spec)?;
        let params = graph.init_params(seed);
        Ok(Network { spec, graph, params })
    }

    /// Every parameter zero, so the output is 0.5 everywhere.
    pub fn zeros(name: &str, spec: UNetSpec) -> Result<Self> {
        let graph = build_unet(name, &spec)?;
        let params = ParamSet::zeros(graph.param_specs());
        Ok(Network { spec, graph, params })
    }

    /// Runs on stacked input channels and returns the probability volume.
    pub fn predict_volume(&self, channels: &[&Volume]) -> Result<ProbMap> {
        let x = volumes_to_tensor(channels)?;
        let y = self.graph.predict(&self.params, &x)?;
        ProbMap::new(tensor_channel_to_volume(&y, 0, channels[0])?)
    }

    /// Sliding-window prediction, averaged where windows overlap.
    pub fn predict_patchwise(&self, channels: &[&Volume], grid: &PatchGrid) -> Result<ProbMap> {
        let first = channels.first().ok_or_else(|| Error::invalid("no channels"))?;
        Dims::check_same(first.dims(), grid.dims())?;
        let mut patches = Vec::with_capacity(grid.len());
        for &origin in grid.origins() {
            let parts = channels
                .iter()
                .map(|v| extract_region(v, origin, grid.shape()))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Volume> = parts.iter().collect();
            patches.push(Patch {
                origin,
                data: self.predict_volume(&refs)?.into_volume(),
            });
        }
        ProbMap::new(stitch_mean(&patches, first.dims(), first.spacing())?)
    }

    /// Writes `<stem>.mpar` (parameters) and `<stem>.arch` (architecture).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_params(&self.params, &dir.join(format!("{stem}.mpar")))?;
        self.spec.to_key_values().save(&dir.join(format!("{stem}.arch")))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let spec = UNetSpec::from_key_values(&KeyValues::load(&dir.join(format!("{stem}.arch")))?)?;
        let graph = build_unet(stem, &spec)?;
        let params = load_params_for(&dir.join(format!("{stem}.mpar")), graph.param_specs())?;
        Ok(Network { spec, graph, params })
    }
}

/// Patch layout used by the cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub shape: Dims,
    pub overlap: Dims,
}

impl PatchConfig {
    pub fn grid(&self, dims: Dims) -> Result<PatchGrid> {
        PatchGrid::new(dims, self.shape, self.overlap)
    }
}

/// The three trained networks plus the geometry they were trained for.
#[derive(Clone, Debug)]
pub struct CascadeBundle {
    pub lnet: Network,
    pub wnet: Network,
    pub tnet: Network,
    /// Final (preprocessed) volume dims.
    pub final_dims: Dims,
    /// Localization net input dims; `final_dims` must be an integer multiple.
    pub lnet_dims: Dims,
    pub patches: PatchConfig,
}

/// Probability maps produced by one cascade pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub whole: ProbMap,
    pub tumor: ProbMap,
    /// At `lnet_dims`.
    pub loc: ProbMap,
}

/// Uniform integer factor from `fine` down to `coarse`.
pub fn downsample_factor(fine: Dims, coarse: Dims) -> Result<usize> {
    let f = fine.w / coarse.w.max(1);
    if coarse.is_empty() || f == 0 || coarse.w * f != fine.w || coarse.h * f != fine.h || coarse.d * f != fine.d {
        return Err(Error::invalid(format!("{fine} is not a uniform integer multiple of {coarse}")));
    }
    Ok(f)
}

impl CascadeBundle {
    pub fn new(
        lnet: Network,
        wnet: Network,
        tnet: Network,
        final_dims: Dims,
        lnet_dims: Dims,
        patches: PatchConfig,
    ) -> Result<Self> {
        let bundle = CascadeBundle {
            lnet,
            wnet,
            tnet,
            final_dims,
            lnet_dims,
            patches,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lnet.spec.in_channels != 1 || self.wnet.spec.in_channels != 1 || self.tnet.spec.in_channels != 2 {
            return Err(Error::invalid("cascade needs 1-channel L-Net/W-Net and a 2-channel T-Net"));
        }
        downsample_factor(self.final_dims, self.lnet_dims)?;
        let check = |d: Dims, k: usize, what: &str| {
            if d.w % k != 0 || d.h % k != 0 || d.d % k != 0 {
                Err(Error::invalid(format!("{what} {d} not divisible by {k}")))
            } else {
                Ok(())
            }
        };
        check(self.lnet_dims, self.lnet.spec.divisor(), "L-Net dims")?;
        check(self.patches.shape, self.wnet.spec.divisor(), "patch shape")?;
        check(self.patches.shape, self.tnet.spec.divisor(), "patch shape")?;
        self.patches.grid(self.final_dims)?;
        Ok(())
    }

    /// Localization map from the block-averaged image.
    pub fn localize(&self, image: &Volume) -> Result<ProbMap> {
        let factor = downsample_factor(image.dims(), self.lnet_dims)?;
        let small = block_average(image, factor)?;
        self.lnet.predict_volume(&[&small])
    }

    pub fn forward(&self, image: &Volume) -> Result<CascadeOutput> {
        Dims::check_same(image.dims(), self.final_dims)?;
        let grid = self.patches.grid(image.dims())?;
        let whole = self.wnet.predict_patchwise(&[image], &grid)?;
        let tumor = self.tnet.predict_patchwise(&[image, whole.as_volume()], &grid)?;
        let loc = self.localize(image)?;
        Ok(CascadeOutput { whole, tumor, loc })
    }

    /// Writes the three networks and a `cascade.txt` geometry file into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.lnet.save(dir, "lnet")?;
        self.wnet.save(dir, "wnet")?;
        self.tnet.save(dir, "tnet")?;
        let dims = |d: Dims| format!("{},{},{}", d.w, d.h, d.d);
        let mut kv = KeyValues::new();
        kv.set("final_dims", dims(self.final_dims))
            .set("lnet_dims", dims(self.lnet_dims))
            .set("patch_shape", dims(self.patches.shape))
            .set("patch_overlap", dims(self.patches.overlap));
        kv.save(&dir.join("cascade.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::load(&dir.join("cascade.txt"))?;
        let dims = |k: &str| -> Result<Dims> {
            let v: Vec<usize> = kv.require_list(k)?;
            let a: [usize; 3] = v.try_into().map_err(|_| Error::invalid(format!("`{k}` needs 3 values")))?;
            Ok(Dims::from_array(a))
        };
        CascadeBundle::new(
            Network::load(dir, "lnet")?,
            Network::load(dir, "wnet")?,
            Network::load(dir, "tnet")?,
            dims("final_dims")?,
            dims("lnet_dims")?,
            PatchConfig {
                shape: dims("patch_shape")?,
                overlap: dims("patch_overlap")?,
            },
        )
    }
}
