//! Learned transform coding of residual frames.
//!
//! The analysis transform `g_a` maps `concat(residual, mask)` through three
//! stride-2 stages (each a conv + residual block) to latents `y`; a
//! hyper-analysis `h_a` maps `y` to side latents `z`. Both are rounded at
//! inference. `z` is coded under a per-channel (mean, scale) Gaussian prior;
//! the decoded `z` runs through the hyper-synthesis `h_s` to produce the
//! per-element Gaussian scales under which `y` is coded. The synthesis
//! transform `g_s` mirrors `g_a` and has the mask multiplied into its last
//! layer. Training replaces rounding with additive uniform noise and
//! minimizes rate + lambda * MSE.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::ResidualFrame;
use crate::entropy::{GaussianTable, RangeDecoder, RangeEncoder, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::nn::{
    sigmoid, softplus, AdamState, ExecMode, Graph, GraphBuilder, Grid4, Init, ModelParams, NodeId,
};
use crate::projection::Mask;

/// Rate-distortion tradeoff ladder exposed by the CLI; the container stores
/// the index.
pub const LAMBDA_LADDER: [f32; 5] = [0.003, 0.01, 0.03, 0.1, 0.3];

const GA_CHANNELS: [usize; 3] = [32, 64, 96];
const HYPER_CHANNELS: usize = 32;
const HS_MID_CHANNELS: usize = 64;
/// Largest latent magnitude coded without an escape.
const Y_MAX_SYMBOL: i32 = 255;
/// Scale grid for the per-element Gaussian tables of y.
const SIGMA_LEVELS: usize = 64;
const SIGMA_MAX: f64 = 64.0;

const META_NAME: &str = "meta.hyperprior";

fn y_channels() -> usize {
    GA_CHANNELS[2]
}

fn pad_to(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Latent spatial dims for a padded input of `h8 x w8`.
fn latent_dims(h8: usize, w8: usize) -> ((usize, usize), (usize, usize)) {
    let y = (h8 / 8, w8 / 8);
    let z1 = crate::nn::conv_out_spatial(y.0, y.1, 3, 2);
    let z = crate::nn::conv_out_spatial(z1.0, z1.1, 3, 2);
    (y, z)
}

fn res_block(b: &mut GraphBuilder, x: NodeId, name: &str, channels: usize) -> Result<NodeId> {
    let c1 = b.conv2d(x, &format!("{name}.c1"), channels, 3, 1)?;
    let a = b.leaky_relu(c1, 0.2);
    let c2 = b.conv2d(a, &format!("{name}.c2"), channels, 3, 1)?;
    b.add(x, c2)
}

fn ga_body(b: &mut GraphBuilder, x: NodeId) -> Result<NodeId> {
    let mut cur = x;
    for (i, &ch) in GA_CHANNELS.iter().enumerate() {
        let down = b.conv2d(cur, &format!("ga{i}"), ch, 3, 2)?;
        let act = b.leaky_relu(down, 0.2);
        cur = res_block(b, act, &format!("ga{i}.rb"), ch)?;
    }
    Ok(cur)
}

fn ha_body(b: &mut GraphBuilder, y: NodeId) -> Result<NodeId> {
    let c0 = b.conv2d(y, "ha0", HYPER_CHANNELS, 3, 2)?;
    let a = b.leaky_relu(c0, 0.2);
    b.conv2d(a, "ha1", HYPER_CHANNELS, 3, 2)
}

/// Produces softplus-positive raw scales at 4x the spatial size of z; the
/// caller crops to the y dims and adds the scale floor.
fn hs_body(b: &mut GraphBuilder, z: NodeId) -> Result<NodeId> {
    let u0 = b.upsample2x(z);
    let c0 = b.conv2d(u0, "hs0", HS_MID_CHANNELS, 3, 1)?;
    let a0 = b.leaky_relu(c0, 0.2);
    let u1 = b.upsample2x(a0);
    let c1 = b.conv2d(u1, "hs1", y_channels(), 3, 1)?;
    Ok(b.softplus(c1))
}

fn gs_body(b: &mut GraphBuilder, y: NodeId) -> Result<NodeId> {
    let mut cur = res_block(b, y, "gs0.rb", GA_CHANNELS[2])?;
    let u0 = b.upsample2x(cur);
    let c0 = b.conv2d(u0, "gs0", GA_CHANNELS[1], 3, 1)?;
    cur = b.leaky_relu(c0, 0.2);
    cur = res_block(b, cur, "gs1.rb", GA_CHANNELS[1])?;
    let u1 = b.upsample2x(cur);
    let c1 = b.conv2d(u1, "gs1", GA_CHANNELS[0], 3, 1)?;
    cur = b.leaky_relu(c1, 0.2);
    cur = res_block(b, cur, "gs2.rb", GA_CHANNELS[0])?;
    let u2 = b.upsample2x(cur);
    // Final projection, no activation: residuals are signed.
    b.conv2d(u2, "gs2", 1, 3, 1)
}

fn register_zprior(params: &mut ModelParams) -> Result<()> {
    params.register("zprior.mean", [1, HYPER_CHANNELS, 1, 1], Init::Zero)?;
    let fresh = params.get("zprior.scale_raw").is_none();
    params.register("zprior.scale_raw", [1, HYPER_CHANNELS, 1, 1], Init::Zero)?;
    if fresh {
        // softplus(0.5) + floor starts the prior scale near 1.
        params
            .get_mut("zprior.scale_raw")
            .unwrap()
            .data_mut()
            .fill(0.5);
    }
    Ok(())
}

/// Sub-stream bit accounting from one encode, with the cross-entropy the
/// model assigned to the symbols it coded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    pub z_bits: u64,
    pub y_bits: u64,
    pub z_cross_entropy: f64,
    pub y_cross_entropy: f64,
}

impl RateReport {
    pub fn total_bits(&self) -> u64 {
        self.z_bits + self.y_bits
    }

    pub fn total_cross_entropy(&self) -> f64 {
        self.z_cross_entropy + self.y_cross_entropy
    }
}

pub struct HyperpriorModel {
    pub params: ModelParams,
    pub lambda: f32,
    enc_graphs: HashMap<(usize, usize), Graph>,
    hs_graphs: HashMap<(usize, usize), Graph>,
    dec_graphs: HashMap<(usize, usize), Graph>,
    train_graphs: HashMap<(usize, usize), Graph>,
    table_cache: HashMap<usize, GaussianTable>,
}

impl HyperpriorModel {
    pub fn new(lambda: f32, seed: u64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidParameter("lambda must be > 0".into()));
        }
        let mut params = ModelParams::new(seed);
        params.register(META_NAME, [1, 1, 1, 2], Init::Zero)?;
        params
            .get_mut(META_NAME)
            .unwrap()
            .data_mut()
            .copy_from_slice(&[lambda, 1.0]);
        let mut model = HyperpriorModel {
            params,
            lambda,
            enc_graphs: HashMap::new(),
            hs_graphs: HashMap::new(),
            dec_graphs: HashMap::new(),
            train_graphs: HashMap::new(),
            table_cache: HashMap::new(),
        };
        // Materialize all weights now so saving an untrained model works.
        model.ensure_train_graph(32, 32)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = ModelParams::load(path)?;
        let lambda = params
            .get(META_NAME)
            .ok_or_else(|| Error::ModelMismatch("weight file is not a residual model".into()))?
            .data()[0];
        Ok(HyperpriorModel {
            params,
            lambda,
            enc_graphs: HashMap::new(),
            hs_graphs: HashMap::new(),
            dec_graphs: HashMap::new(),
            train_graphs: HashMap::new(),
            table_cache: HashMap::new(),
        })
    }

    fn ensure_enc_graph(&mut self, h8: usize, w8: usize) -> Result<()> {
        if !self.enc_graphs.contains_key(&(h8, w8)) {
            let mut b = GraphBuilder::new(&mut self.params);
            let r = b.input([1, 1, h8, w8]);
            let m = b.input([1, 1, h8, w8]);
            let x = b.concat(r, m)?;
            let y = ga_body(&mut b, x)?;
            let z = ha_body(&mut b, y)?;
            self.enc_graphs.insert((h8, w8), b.build(vec![y, z]));
        }
        Ok(())
    }

    fn ensure_hs_graph(&mut self, hz: usize, wz: usize) -> Result<()> {
        if !self.hs_graphs.contains_key(&(hz, wz)) {
            let mut b = GraphBuilder::new(&mut self.params);
            let z = b.input([1, HYPER_CHANNELS, hz, wz]);
            let s = hs_body(&mut b, z)?;
            self.hs_graphs.insert((hz, wz), b.build(vec![s]));
        }
        Ok(())
    }

    fn ensure_dec_graph(&mut self, h8: usize, w8: usize) -> Result<()> {
        if !self.dec_graphs.contains_key(&(h8, w8)) {
            let (ydims, _) = latent_dims(h8, w8);
            let mut b = GraphBuilder::new(&mut self.params);
            let y = b.input([1, y_channels(), ydims.0, ydims.1]);
            let m = b.input([1, 1, h8, w8]);
            let raw = gs_body(&mut b, y)?;
            let out = b.mul(raw, m)?;
            self.dec_graphs.insert((h8, w8), b.build(vec![out]));
        }
        Ok(())
    }

    /// Training graph outputs: [y_noisy, z_noisy, sigma_softplus, r_hat].
    fn ensure_train_graph(&mut self, h8: usize, w8: usize) -> Result<()> {
        if !self.train_graphs.contains_key(&(h8, w8)) {
            register_zprior(&mut self.params)?;
            let mut b = GraphBuilder::new(&mut self.params);
            let r = b.input([1, 1, h8, w8]);
            let m = b.input([1, 1, h8, w8]);
            let x = b.concat(r, m)?;
            let y = ga_body(&mut b, x)?;
            let y_noisy = b.add_noise(y);
            let z = ha_body(&mut b, y)?;
            let z_noisy = b.add_noise(z);
            let sigma = hs_body(&mut b, z_noisy)?;
            let raw = gs_body(&mut b, y_noisy)?;
            let r_hat = b.mul(raw, m)?;
            self.train_graphs
                .insert((h8, w8), b.build(vec![y_noisy, z_noisy, sigma, r_hat]));
        }
        Ok(())
    }

    fn z_prior(&self) -> (Vec<f64>, Vec<f64>) {
        let means = self
            .params
            .get("zprior.mean")
            .expect("registered at construction")
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let sigmas = self
            .params
            .get("zprior.scale_raw")
            .expect("registered at construction")
            .data()
            .iter()
            .map(|&v| f64::from(softplus(v)) + f64::from(SIGMA_MIN))
            .collect();
        (means, sigmas)
    }

    fn table_for_level(&mut self, level: usize) -> &GaussianTable {
        self.table_cache
            .entry(level)
            .or_insert_with(|| GaussianTable::new(sigma_of_level(level) as f32, Y_MAX_SYMBOL))
    }

    /// Encode one residual frame. The stream is `len_z u32 | z bytes |
    /// len_y u32 | y bytes`; every spatial dimension is derived from the
    /// mask size, so the stream carries no geometry.
    pub fn encode(&mut self, residual: &ResidualFrame, mask: &Mask) -> Result<(Vec<u8>, RateReport)> {
        let (h, w) = (residual.height(), residual.width());
        if mask.height() != h || mask.width() != w {
            return Err(Error::InvalidParameter("mask/residual shape mismatch".into()));
        }
        let (h8, w8) = (pad_to(h, 8), pad_to(w, 8));
        let r_grid = pad_residual(residual, h8, w8);
        let m_grid = pad_mask(mask, h8, w8);

        register_zprior(&mut self.params)?;
        self.ensure_enc_graph(h8, w8)?;
        let (y, z) = {
            let graph = &self.enc_graphs[&(h8, w8)];
            let tape = graph.forward(&self.params, &[&r_grid, &m_grid], ExecMode::Infer)?;
            (
                tape.value(graph.outputs()[0]).clone(),
                tape.value(graph.outputs()[1]).clone(),
            )
        };

        // Side stream: z under the per-channel factorized prior.
        let (z_hat, z_bytes, z_ce) = self.code_z(&z)?;

        // Scales for y from the decoded side stream.
        let sigma = self.sigma_map(&z_hat, y.shape())?;

        // Main stream: y under per-element Gaussian tables.
        let mut enc = RangeEncoder::new();
        let mut y_ce = 0.0f64;
        for (i, &v) in y.data().iter().enumerate() {
            let symbol = f64::from(v).round() as i32;
            let level = sigma_level(sigma[i]);
            let table = self.table_for_level(level);
            y_ce += table.cost_bits(symbol);
            table.encode_symbol(&mut enc, symbol);
        }
        let y_bytes = enc.finish();

        let mut out = Vec::with_capacity(8 + z_bytes.len() + y_bytes.len());
        out.write_u32::<LittleEndian>(z_bytes.len() as u32).unwrap();
        out.extend_from_slice(&z_bytes);
        out.write_u32::<LittleEndian>(y_bytes.len() as u32).unwrap();
        out.extend_from_slice(&y_bytes);
        let report = RateReport {
            z_bits: 8 * z_bytes.len() as u64,
            y_bits: 8 * y_bytes.len() as u64,
            z_cross_entropy: z_ce,
            y_cross_entropy: y_ce,
        };
        Ok((out, report))
    }

    pub fn decode(&mut self, bytes: &[u8], mask: &Mask) -> Result<ResidualFrame> {
        let (h, w) = (mask.height(), mask.width());
        let (h8, w8) = (pad_to(h, 8), pad_to(w, 8));
        let (ydims, zdims) = latent_dims(h8, w8);

        let mut input = bytes;
        let err = |what: &str| Error::EntropyStream(format!("residual stream: {what}"));
        let len_z = input
            .read_u32::<LittleEndian>()
            .map_err(|_| err("missing z length"))? as usize;
        let mut z_bytes = vec![0u8; len_z];
        input.read_exact(&mut z_bytes).map_err(|_| err("z bytes"))?;
        let len_y = input
            .read_u32::<LittleEndian>()
            .map_err(|_| err("missing y length"))? as usize;
        let mut y_bytes = vec![0u8; len_y];
        input.read_exact(&mut y_bytes).map_err(|_| err("y bytes"))?;

        register_zprior(&mut self.params)?;
        let z_hat = self.decode_z(&z_bytes, zdims)?;
        let sigma = self.sigma_map(&z_hat, [1, y_channels(), ydims.0, ydims.1])?;

        let mut y_hat = Grid4::zeros([1, y_channels(), ydims.0, ydims.1]);
        {
            let mut dec = RangeDecoder::new(&y_bytes)?;
            let data = y_hat.data_mut();
            for i in 0..data.len() {
                let level = sigma_level(sigma[i]);
                let table = self.table_for_level(level);
                data[i] = table.decode_symbol(&mut dec)? as f32;
            }
        }

        let m_grid = pad_mask(mask, h8, w8);
        self.ensure_dec_graph(h8, w8)?;
        let graph = &self.dec_graphs[&(h8, w8)];
        let tape = graph.forward(&self.params, &[&y_hat, &m_grid], ExecMode::Infer)?;
        let out = tape.value(graph.outputs()[0]);
        let mut values = vec![0.0f32; h * w];
        for row in 0..h {
            for col in 0..w {
                values[row * w + col] = out.at(0, 0, row, col);
            }
        }
        Ok(ResidualFrame::from_values(h, w, values))
    }

    fn code_z(&mut self, z: &Grid4) -> Result<(Grid4, Vec<u8>, f64)> {
        let (means, sigmas) = self.z_prior();
        let [_, channels, hz, wz] = z.shape();
        let mut z_hat = Grid4::zeros(z.shape());
        let mut enc = RangeEncoder::new();
        let mut ce = 0.0f64;
        for c in 0..channels {
            let table = GaussianTable::new(sigmas[c] as f32, Y_MAX_SYMBOL);
            let shift = means[c].round() as i32;
            for yy in 0..hz {
                for xx in 0..wz {
                    let v = f64::from(z.at(0, c, yy, xx)).round() as i32;
                    z_hat.set(0, c, yy, xx, v as f32);
                    let symbol = v - shift;
                    ce += table.cost_bits(symbol);
                    table.encode_symbol(&mut enc, symbol);
                }
            }
        }
        Ok((z_hat, enc.finish(), ce))
    }

    fn decode_z(&mut self, bytes: &[u8], zdims: (usize, usize)) -> Result<Grid4> {
        let (means, sigmas) = self.z_prior();
        let (hz, wz) = zdims;
        let mut z_hat = Grid4::zeros([1, HYPER_CHANNELS, hz, wz]);
        let mut dec = RangeDecoder::new(bytes)?;
        for c in 0..HYPER_CHANNELS {
            let table = GaussianTable::new(sigmas[c] as f32, Y_MAX_SYMBOL);
            let shift = means[c].round() as i32;
            for yy in 0..hz {
                for xx in 0..wz {
                    let symbol = table.decode_symbol(&mut dec)?;
                    z_hat.set(0, c, yy, xx, (symbol + shift) as f32);
                }
            }
        }
        Ok(z_hat)
    }

    /// Per-element scales for y, row-major over `y_shape`, cropped from the
    /// hyper-synthesis output and floored at `SIGMA_MIN`.
    fn sigma_map(&mut self, z_hat: &Grid4, y_shape: [usize; 4]) -> Result<Vec<f64>> {
        let [_, _, hz, wz] = z_hat.shape();
        self.ensure_hs_graph(hz, wz)?;
        let graph = &self.hs_graphs[&(hz, wz)];
        let tape = graph.forward(&self.params, &[z_hat], ExecMode::Infer)?;
        let raw = tape.value(graph.outputs()[0]);
        let [_, channels, hy, wy] = y_shape;
        let mut out = Vec::with_capacity(channels * hy * wy);
        for c in 0..channels {
            for yy in 0..hy {
                for xx in 0..wy {
                    out.push(f64::from(raw.at(0, c, yy, xx)) + f64::from(SIGMA_MIN));
                }
            }
        }
        Ok(out)
    }
}

/// Edge-replicated padding of the residual to `h8 x w8`.
fn pad_residual(residual: &ResidualFrame, h8: usize, w8: usize) -> Grid4 {
    let (h, w) = (residual.height(), residual.width());
    let mut grid = Grid4::zeros([1, 1, h8, w8]);
    for row in 0..h8 {
        for col in 0..w8 {
            let v = residual.get(row.min(h - 1), col.min(w - 1));
            grid.set(0, 0, row, col, v);
        }
    }
    grid
}

/// Zero padding of the mask to `h8 x w8`.
fn pad_mask(mask: &Mask, h8: usize, w8: usize) -> Grid4 {
    let (h, w) = (mask.height(), mask.width());
    let mut grid = Grid4::zeros([1, 1, h8, w8]);
    for row in 0..h {
        for col in 0..w {
            grid.set(0, 0, row, col, f32::from(mask.get(row, col)));
        }
    }
    grid
}

/// Log-spaced scale grid shared by encoder and decoder.
fn sigma_of_level(level: usize) -> f64 {
    let ratio = (SIGMA_MAX / f64::from(SIGMA_MIN)).powf(1.0 / (SIGMA_LEVELS - 1) as f64);
    f64::from(SIGMA_MIN) * ratio.powi(level as i32)
}

fn sigma_level(sigma: f64) -> usize {
    let ratio = (SIGMA_MAX / f64::from(SIGMA_MIN)).powf(1.0 / (SIGMA_LEVELS - 1) as f64);
    let level = (sigma.max(f64::from(SIGMA_MIN)) / f64::from(SIGMA_MIN)).ln() / ratio.ln();
    (level.round() as usize).min(SIGMA_LEVELS - 1)
}

const LN2: f64 = std::f64::consts::LN_2;
const P_MIN: f64 = 1e-9;

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Code length in bits of value `v` under a unit-width bin of N(0, sigma),
/// with its partial derivatives wrt `v` and `sigma`.
pub(crate) fn gaussian_bits_grad(v: f64, sigma: f64) -> (f64, f64, f64) {
    // Symmetric complementary form keeps the difference accurate in the
    // tails: P = cdf((0.5 - |v|)/s) - cdf(-(0.5 + |v|)/s).
    let a = (0.5 - v.abs()) / sigma;
    let b = -(0.5 + v.abs()) / sigma;
    let p = (normal_cdf(a) - normal_cdf(b)).max(P_MIN);
    let bits = -p.ln() / LN2;
    let u = (v + 0.5) / sigma;
    let w = (v - 0.5) / sigma;
    let dp_dv = (normal_pdf(u) - normal_pdf(w)) / sigma;
    let dp_dsigma = -(u * normal_pdf(u) - w * normal_pdf(w)) / sigma;
    let dbits_dv = -dp_dv / (p * LN2);
    let dbits_dsigma = -dp_dsigma / (p * LN2);
    (bits, dbits_dv, dbits_dsigma)
}

/// One training example.
#[derive(Debug, Clone)]
pub struct ResidualSample {
    pub residual: ResidualFrame,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ResidualTrainConfig {
    fn default() -> Self {
        ResidualTrainConfig {
            epochs: 10,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Minimize `rate + lambda * distortion` with noise-surrogate quantization.
/// Returns per-epoch `(rate bits/pixel, distortion MSE)` averages.
pub fn train_residual(
    model: &mut HyperpriorModel,
    dataset: &[ResidualSample],
    config: ResidualTrainConfig,
) -> Result<Vec<(f64, f64)>> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let lambda = f64::from(model.lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_rate = 0.0f64;
        let mut epoch_dist = 0.0f64;
        for &si in &order {
            step += 1;
            let sample = &dataset[si];
            let (h, w) = (sample.residual.height(), sample.residual.width());
            let (h8, w8) = (pad_to(h, 8), pad_to(w, 8));
            let r_grid = pad_residual(&sample.residual, h8, w8);
            let m_grid = pad_mask(&sample.mask, h8, w8);
            let npix = (h * w) as f64;

            model.ensure_train_graph(h8, w8)?;
            let graph = &model.train_graphs[&(h8, w8)];
            let tape = graph.forward(
                &model.params,
                &[&r_grid, &m_grid],
                ExecMode::Train {
                    noise_seed: config.seed ^ step.wrapping_mul(0x9E3779B97F4A7C15),
                },
            )?;
            let y_noisy = tape.value(graph.outputs()[0]);
            let z_noisy = tape.value(graph.outputs()[1]);
            let sigma_raw = tape.value(graph.outputs()[2]);
            let r_hat = tape.value(graph.outputs()[3]);

            // Rate of y under the hyperprior scales.
            let [_, yc, hy, wy] = y_noisy.shape();
            let mut y_seed = Grid4::zeros(y_noisy.shape());
            let mut sigma_seed = Grid4::zeros(sigma_raw.shape());
            let mut rate_bits = 0.0f64;
            for c in 0..yc {
                for yy in 0..hy {
                    for xx in 0..wy {
                        let v = f64::from(y_noisy.at(0, c, yy, xx));
                        let s = f64::from(sigma_raw.at(0, c, yy, xx)) + f64::from(SIGMA_MIN);
                        let (bits, dv, ds) = gaussian_bits_grad(v, s);
                        rate_bits += bits;
                        y_seed.set(0, c, yy, xx, (dv / npix) as f32);
                        sigma_seed.set(0, c, yy, xx, (ds / npix) as f32);
                    }
                }
            }

            // Rate of z under the per-channel prior, with gradients for the
            // prior parameters (handled outside the graph).
            let (means, sigmas) = model.z_prior();
            let scale_raw = model.params.get("zprior.scale_raw").unwrap().clone();
            let [_, zc, hz, wz] = z_noisy.shape();
            let mut z_seed = Grid4::zeros(z_noisy.shape());
            let mut mean_grad = Grid4::zeros([1, HYPER_CHANNELS, 1, 1]);
            let mut scale_grad = Grid4::zeros([1, HYPER_CHANNELS, 1, 1]);
            for c in 0..zc {
                let mut dmu = 0.0f64;
                let mut dsig = 0.0f64;
                for yy in 0..hz {
                    for xx in 0..wz {
                        let v = f64::from(z_noisy.at(0, c, yy, xx)) - means[c];
                        let (bits, dv, ds) = gaussian_bits_grad(v, sigmas[c]);
                        rate_bits += bits;
                        z_seed.set(0, c, yy, xx, (dv / npix) as f32);
                        dmu -= dv / npix;
                        dsig += ds / npix;
                    }
                }
                mean_grad.set(0, c, 0, 0, dmu as f32);
                let gate = f64::from(sigmoid(scale_raw.data()[c]));
                scale_grad.set(0, c, 0, 0, (dsig * gate) as f32);
            }

            // Distortion over the original (uncropped) region.
            let mut r_seed = Grid4::zeros(r_hat.shape());
            let mut dist = 0.0f64;
            for row in 0..h {
                for col in 0..w {
                    let d = f64::from(r_hat.at(0, 0, row, col))
                        - f64::from(sample.residual.get(row, col));
                    dist += d * d;
                    r_seed.set(0, 0, row, col, (lambda * 2.0 * d / npix) as f32);
                }
            }
            dist /= npix;
            let rate = rate_bits / npix;
            if !(rate.is_finite() && dist.is_finite()) {
                return Err(Error::TrainingDiverged("loss".into()));
            }
            epoch_rate += rate;
            epoch_dist += dist;

            let mut grads = graph.backward(
                &model.params,
                &tape,
                &[(0, y_seed), (1, z_seed), (2, sigma_seed), (3, r_seed)],
            )?;
            grads.accumulate("zprior.mean", mean_grad);
            grads.accumulate("zprior.scale_raw", scale_grad);
            adam.step(&mut model.params, &grads, config.lr)?;
        }
        history.push((
            epoch_rate / dataset.len() as f64,
            epoch_dist / dataset.len() as f64,
        ));
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_sample(seed: u64, h: usize, w: usize) -> ResidualSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = Mask::zeros(h, w);
        let mut values = vec![0.0f32; h * w];
        for row in 0..h {
            for col in 0..w {
                if rng.gen_bool(0.8) {
                    mask.set(row, col, 1);
                    values[row * w + col] = rng.gen_range(-1.5..1.5);
                }
            }
        }
        ResidualSample {
            residual: ResidualFrame::from_values(h, w, values),
            mask,
        }
    }

    #[test]
    fn gaussian_bits_gradients_match_finite_differences() {
        let h = 1e-5;
        for &(v, s) in &[(0.0, 1.0), (0.7, 0.3), (-2.5, 1.7), (4.0, 0.09), (0.2, 5.0)] {
            let (_, dv, ds) = gaussian_bits_grad(v, s);
            let num_v = (gaussian_bits_grad(v + h, s).0 - gaussian_bits_grad(v - h, s).0) / (2.0 * h);
            let num_s = (gaussian_bits_grad(v, s + h).0 - gaussian_bits_grad(v, s - h).0) / (2.0 * h);
            assert!(
                (dv - num_v).abs() / dv.abs().max(num_v.abs()).max(1e-3) < 1e-4,
                "dv {dv} vs {num_v} at ({v},{s})"
            );
            assert!(
                (ds - num_s).abs() / ds.abs().max(num_s.abs()).max(1e-3) < 1e-4,
                "ds {ds} vs {num_s} at ({v},{s})"
            );
        }
    }

    #[test]
    fn encode_decode_roundtrip_is_deterministic() {
        let mut model = HyperpriorModel::new(0.01, 3).unwrap();
        let sample = random_sample(5, 16, 32);
        let (bytes_a, report) = model.encode(&sample.residual, &sample.mask).unwrap();
        let (bytes_b, _) = model.encode(&sample.residual, &sample.mask).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert!(report.total_bits() > 0);

        let dec_a = model.decode(&bytes_a, &sample.mask).unwrap();
        let dec_b = model.decode(&bytes_a, &sample.mask).unwrap();
        assert_eq!(dec_a, dec_b);
        assert_eq!(dec_a.height(), 16);
        assert_eq!(dec_a.width(), 32);
        assert!(dec_a.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decoded_residual_is_zero_on_invalid_pixels() {
        let mut model = HyperpriorModel::new(0.01, 4).unwrap();
        let sample = random_sample(6, 16, 32);
        let (bytes, _) = model.encode(&sample.residual, &sample.mask).unwrap();
        let decoded = model.decode(&bytes, &sample.mask).unwrap();
        for row in 0..16 {
            for col in 0..32 {
                if sample.mask.get(row, col) == 0 {
                    assert_eq!(decoded.get(row, col), 0.0);
                }
            }
        }

        // All-zero mask: all-zero reconstruction regardless of stream.
        let zero_mask = Mask::zeros(16, 32);
        let (bytes, _) = model.encode(&sample.residual, &zero_mask).unwrap();
        let decoded = model.decode(&bytes, &zero_mask).unwrap();
        assert!(decoded.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stream_bits_track_model_cross_entropy() {
        let mut model = HyperpriorModel::new(0.01, 7).unwrap();
        for seed in 0..3 {
            let sample = random_sample(seed, 24, 40); // exercises padding
            let (bytes, report) = model.encode(&sample.residual, &sample.mask).unwrap();
            assert_eq!(bytes.len() as u64, 8 + report.total_bits() / 8);
            let payload_bits = report.total_bits() as f64;
            let ce = report.total_cross_entropy();
            assert!(
                payload_bits <= 1.02 * ce + 64.0,
                "bits {payload_bits} vs ce {ce}"
            );
            let decoded = model.decode(&bytes, &sample.mask).unwrap();
            assert_eq!(decoded.height(), 24);
        }
    }

    #[test]
    fn truncated_stream_errors() {
        let mut model = HyperpriorModel::new(0.01, 9).unwrap();
        let sample = random_sample(11, 16, 32);
        let (bytes, _) = model.encode(&sample.residual, &sample.mask).unwrap();
        assert!(model.decode(&bytes[..6], &sample.mask).is_err());
    }

    #[test]
    fn high_lambda_drives_zero_residual_distortion_down() {
        let mut model = HyperpriorModel::new(100.0, 11).unwrap();
        let mask = Mask::from_bits(16, 32, vec![1; 16 * 32]);
        let dataset: Vec<ResidualSample> = (0..4)
            .map(|_| ResidualSample {
                residual: ResidualFrame::zeros(16, 32),
                mask: mask.clone(),
            })
            .collect();
        let history = train_residual(
            &mut model,
            &dataset,
            ResidualTrainConfig {
                epochs: 30,
                lr: 3e-3,
                seed: 1,
            },
        )
        .unwrap();
        let final_d = history.last().unwrap().1;
        assert!(final_d < 1e-4, "final distortion {final_d}");
    }
}
