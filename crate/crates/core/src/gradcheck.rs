//! Central finite-difference checks of the engine's analytic gradients, in
//! `f64`, for each layer type and for the joint W-Net/T-Net loss.
//!
//! Coordinates whose `±h` perturbation changes a relu sign or a maxpool
//! winner are skipped: the function is not differentiable across them.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::models::{build_unet, UNetSpec};
use crate::nn::ops::concat_forward;
use crate::nn::{GraphBuilder, ModelGraph, ParamSet, Tensor5};
use crate::trainer::{joint_loss, soft_dice_value};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with the denominator floored at 1e-8.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub name: String,
    pub seed: u64,
    pub rel_err: f64,
    pub checked: usize,
    /// Coordinates excluded because a perturbation crossed a kink.
    pub skipped: usize,
}

impl FdReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.rel_err < tolerance
    }
}

/// Where a checked scalar lives.
#[derive(Clone, Copy, Debug)]
enum Coord {
    Input(usize),
    Param(usize, usize),
}

fn all_coords(input_len: usize, params: &ParamSet<f64>) -> Vec<Coord> {
    let mut coords: Vec<Coord> = (0..input_len).map(Coord::Input).collect();
    for (b, block) in params.blocks().iter().enumerate() {
        coords.extend((0..block.value.len()).map(|i| Coord::Param(b, i)));
    }
    coords
}

fn slot<'a>(coord: Coord, input: &'a mut Tensor5<f64>, params: &'a mut [&mut ParamSet<f64>]) -> &'a mut f64 {
    match coord {
        Coord::Input(i) => &mut input.data_mut()[i],
        Coord::Param(b, i) => {
            // blocks of several sets are numbered consecutively
            let mut b = b;
            for set in params.iter_mut() {
                if b < set.len() {
                    return &mut set.blocks_mut()[b].value[i];
                }
                b -= set.len();
            }
            unreachable!("coordinate outside every parameter set")
        }
    }
}

/// Evaluates `loss` at `±h` along each coordinate and compares with
/// `analytic`.
fn compare(
    name: &str,
    seed: u64,
    h: f64,
    coords: &[Coord],
    analytic: &[f64],
    input: &mut Tensor5<f64>,
    params: &mut [&mut ParamSet<f64>],
    mut loss: impl FnMut(&Tensor5<f64>, &[&mut ParamSet<f64>]) -> Result<(f64, u64)>,
) -> Result<FdReport> {
    let (_, base_sig) = loss(input, params)?;
    let mut ana = Vec::with_capacity(coords.len());
    let mut num = Vec::with_capacity(coords.len());
    let mut skipped = 0;
    for (&c, &a) in coords.iter().zip(analytic) {
        let orig = *slot(c, input, params);
        *slot(c, input, params) = orig + h;
        let (lp, sp) = loss(input, params)?;
        *slot(c, input, params) = orig - h;
        let (lm, sm) = loss(input, params)?;
        *slot(c, input, params) = orig;
        if sp != base_sig || sm != base_sig {
            skipped += 1;
            continue;
        }
        ana.push(a);
        num.push((lp - lm) / (2.0 * h));
    }
    Ok(FdReport {
        name: name.to_string(),
        seed,
        rel_err: relative_error(&ana, &num),
        checked: ana.len(),
        skipped,
    })
}

fn random_tensor(shape: [usize; 5], rng: &mut SplitMix64) -> Tensor5<f64> {
    let len = shape.iter().product();
    Tensor5::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("length matches shape")
}

/// Parameters drawn uniformly from `[-scale, scale)`, biases included.
pub fn random_params(graph: &ModelGraph, scale: f64, rng: &mut SplitMix64) -> ParamSet<f64> {
    let mut params = ParamSet::<f64>::zeros(graph.param_specs());
    for block in params.blocks_mut() {
        for v in &mut block.value {
            *v = rng.random_range(-scale..scale);
        }
    }
    params
}

/// Loss `Σ output · r` for a fixed random `r`, differentiated with respect
/// to the input and every parameter.
pub fn check_graph(graph: &ModelGraph, input_shape: [usize; 5], seed: u64, h: f64) -> Result<FdReport> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut params = random_params(graph, 0.5, &mut rng);
    let mut input = random_tensor(input_shape, &mut rng);
    let pass = graph.forward(&params, &input)?;
    let weights = random_tensor(pass.output().shape(), &mut rng);
    let input_grad = graph.backward(&mut params, &pass, &weights)?;
    let mut analytic = input_grad.into_data();
    for block in params.blocks() {
        analytic.extend_from_slice(&block.grad);
    }
    let coords = all_coords(input.len(), &params);
    compare(graph.name(), seed, h, &coords, &analytic, &mut input, &mut [&mut params], |x, p| {
        let pass = graph.forward(p[0], x)?;
        let l = pass.output().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok((l, pass.kink_signature(graph)))
    })
}

/// One small graph per layer type, with the input shape it is checked on.
pub fn layer_graphs() -> Result<Vec<(ModelGraph, [usize; 5])>> {
    let shape = [1, 2, 4, 4, 4];
    let mut out = Vec::new();
    let single = |name: &str, f: &dyn Fn(&mut GraphBuilder, crate::nn::NodeId) -> Result<crate::nn::NodeId>| -> Result<ModelGraph> {
        let (mut b, x) = GraphBuilder::new(2);
        let y = f(&mut b, x)?;
        b.finish(name, y)
    };
    out.push((single("conv3d", &|b, x| b.conv3d("conv", x, 3))?, shape));
    out.push((single("relu", &|b, x| Ok(b.relu("relu", x)))?, shape));
    out.push((single("sigmoid", &|b, x| Ok(b.sigmoid("sigmoid", x)))?, shape));
    out.push((single("maxpool", &|b, x| b.maxpool("pool", x))?, shape));
    out.push((
        single("upsample", &|b, x| {
            let p = b.downsample_input("pyr", x, 2)?;
            b.upsample("up", p)
        })?,
        shape,
    ));
    out.push((
        single("concat", &|b, x| {
            let c = b.conv3d("conv", x, 1)?;
            b.concat("cat", &[c, x])
        })?,
        shape,
    ));
    out.push((
        single("se_block", &|b, x| {
            let c = b.conv3d("conv", x, 4)?;
            b.se_block("se", c, 2)
        })?,
        shape,
    ));
    out.push((single("global_avg_pool", &|b, x| b.global_avg_pool("gap", x))?, shape));
    out.push((
        single("dense", &|b, x| {
            let g = b.global_avg_pool("gap", x)?;
            b.dense("fc", g, 3, true)
        })?,
        shape,
    ));
    out.push((
        single("downsample_input", &|b, x| {
            let c = b.conv3d("conv", x, 2)?;
            let d = b.downsample_input("pyr", x, 2)?;
            let p = b.maxpool("pool", c)?;
            b.concat("cat", &[p, d])
        })?,
        shape,
    ));
    Ok(out)
}

/// The joint soft Dice loss of a depth-1 W-Net/T-Net cascade on a 4³ input,
/// differentiated with respect to every parameter of both nets.
pub fn check_cascade(seed: u64, h: f64) -> Result<FdReport> {
    let wnet = build_unet("wnet", &UNetSpec::wnet(1, 2))?;
    let tnet = build_unet("tnet", &UNetSpec::tnet(1, 2))?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut wp = random_params(&wnet, 0.5, &mut rng);
    let mut tp = random_params(&tnet, 0.5, &mut rng);
    let mut input = random_tensor([1, 1, 4, 4, 4], &mut rng);
    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
    let whole: Vec<f64> = labels.iter().map(|&l| (l > 0) as u8 as f64).collect();
    let tumor: Vec<f64> = labels.iter().map(|&l| (l == 2) as u8 as f64).collect();

    joint_loss(&wnet, &mut wp, &tnet, &mut tp, &input, &whole, &tumor, true)?;
    let mut analytic = Vec::new();
    for block in wp.blocks().iter().chain(tp.blocks()) {
        analytic.extend_from_slice(&block.grad);
    }
    let coords: Vec<Coord> = all_coords(0, &wp)
        .into_iter()
        .chain(all_coords(0, &tp).into_iter().map(|c| match c {
            Coord::Param(b, i) => Coord::Param(b + wp.len(), i),
            other => other,
        }))
        .collect();
    compare("cascade", seed, h, &coords, &analytic, &mut input, &mut [&mut wp, &mut tp], |x, p| {
        let wpass = wnet.forward(p[0], x)?;
        let tin = concat_forward(&[x, wpass.output()])?;
        let tpass = tnet.forward(p[1], &tin)?;
        let l = soft_dice_value(wpass.output().data(), &whole) + soft_dice_value(tpass.output().data(), &tumor);
        Ok((l, wpass.kink_signature(&wnet) ^ tpass.kink_signature(&tnet).rotate_left(1)))
    })
}

/// Every layer check and the cascade check for seeds `0..seeds`.
pub fn run_all(seeds: u64, h: f64) -> Result<Vec<FdReport>> {
    if seeds == 0 {
        return Err(Error::invalid("need at least one seed"));
    }
    let mut reports = Vec::new();
    for (graph, shape) in layer_graphs()? {
        for seed in 0..seeds {
            reports.push(check_graph(&graph, shape, seed, h)?);
        }
    }
    for seed in 0..seeds {
        reports.push(check_cascade(seed, h)?);
    }
    Ok(reports)
}
