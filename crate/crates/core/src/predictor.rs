//! Inter-frame prediction. The reference baseline averages the two
//! reference frames per pixel; the learned predictor is a small U-Net that
//! sees both references (plus, optionally, the target frame's validity mask
//! as an input channel) and has that mask applied multiplicatively to its
//! last layer.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    AdamState, ExecMode, Graph, GraphBuilder, Grid4, Init, ModelParams, NodeId,
};
use crate::projection::{Mask, RangeImage, SensorConfig};

/// Smallest range a predicted valid pixel may take (the 0 sentinel is
/// reserved for invalid pixels).
pub(crate) const MIN_VALID_RANGE: f32 = 1e-6;

/// Reference selection for the learned predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionMode {
    /// References are the decoded intra frames on both sides of the target.
    Bidirectional,
    /// References are the two frames preceding the target.
    Unidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetSpec {
    /// Number of stride-2 encoder levels.
    pub depth: usize,
    /// Channels after the stem; doubled per level.
    pub base_channels: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            depth: 3,
            base_channels: 16,
        }
    }
}

/// Per-pixel average of the two references: mean where both are valid, the
/// valid one where only one is, 0 where neither. The result is filtered by
/// `mask`.
pub fn predict_average(ref_a: &RangeImage, ref_b: &RangeImage, mask: &Mask) -> RangeImage {
    assert_eq!(ref_a.height(), ref_b.height());
    assert_eq!(ref_a.width(), ref_b.width());
    let mut out = RangeImage::zeros(ref_a.sensor, ref_a.frame_index);
    for row in 0..out.height() {
        for col in 0..out.width() {
            if mask.get(row, col) == 0 {
                continue;
            }
            let (a, b) = (ref_a.get(row, col), ref_b.get(row, col));
            let value = match (a != 0.0, b != 0.0) {
                (true, true) => (a + b) * 0.5,
                (true, false) => a,
                (false, true) => b,
                (false, false) => 0.0,
            };
            out.set(row, col, value);
        }
    }
    out
}

/// U-Net predictor with lazily built per-resolution graphs. Weights are
/// shared across resolutions since convolutions are size-agnostic.
pub struct PredictorModel {
    pub mode: PredictionMode,
    pub use_mask: bool,
    pub spec: UNetSpec,
    pub params: ModelParams,
    graphs: HashMap<(usize, usize), Graph>,
}

const META_NAME: &str = "meta.predictor";

impl PredictorModel {
    pub fn new(mode: PredictionMode, use_mask: bool, spec: UNetSpec, seed: u64) -> Result<Self> {
        let mut params = ModelParams::new(seed);
        params.register(META_NAME, [1, 1, 1, 4], Init::Zero)?;
        let meta = params.get_mut(META_NAME).unwrap();
        meta.data_mut().copy_from_slice(&[
            match mode {
                PredictionMode::Bidirectional => 0.0,
                PredictionMode::Unidirectional => 1.0,
            },
            f32::from(u8::from(use_mask)),
            spec.depth as f32,
            spec.base_channels as f32,
        ]);
        let mut model = PredictorModel {
            mode,
            use_mask,
            spec,
            params,
            graphs: HashMap::new(),
        };
        // Materialize the weights immediately so save/load round-trips do
        // not depend on having predicted first.
        model.ensure_graph(1 << spec.depth, 1 << spec.depth)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = ModelParams::load(path)?;
        let meta = params
            .get(META_NAME)
            .ok_or_else(|| Error::ModelMismatch("weight file is not a predictor model".into()))?
            .clone();
        let m = meta.data();
        let mode = if m[0] == 0.0 {
            PredictionMode::Bidirectional
        } else {
            PredictionMode::Unidirectional
        };
        Ok(PredictorModel {
            mode,
            use_mask: m[1] != 0.0,
            spec: UNetSpec {
                depth: m[2] as usize,
                base_channels: m[3] as usize,
            },
            params,
            graphs: HashMap::new(),
        })
    }

    fn in_channels(&self) -> usize {
        if self.use_mask {
            3
        } else {
            2
        }
    }

    fn ensure_graph(&mut self, height: usize, width: usize) -> Result<()> {
        if !self.graphs.contains_key(&(height, width)) {
            let in_channels = self.in_channels();
            let graph = build_unet(
                &mut self.params,
                &self.spec,
                in_channels,
                self.use_mask,
                height,
                width,
            )?;
            self.graphs.insert((height, width), graph);
        }
        Ok(())
    }

    /// Raw network output for (refs, mask); used by training and `predict`.
    fn forward_grid(
        &mut self,
        ref_a: &RangeImage,
        ref_b: &RangeImage,
        mask: &Mask,
    ) -> Result<(Grid4, Tape2)> {
        let (h, w) = (ref_a.height(), ref_a.width());
        let stacked = stack_inputs(ref_a, ref_b, mask, self.use_mask);
        let mask_grid = mask_to_grid(mask);
        self.ensure_graph(h, w)?;
        let graph = &self.graphs[&(h, w)];
        let inputs: Vec<&Grid4> = if graph.input_count() == 2 {
            vec![&stacked, &mask_grid]
        } else {
            vec![&stacked]
        };
        let tape = graph.forward(&self.params, &inputs, ExecMode::Infer)?;
        let out = tape.value(graph.outputs()[0]).clone();
        Ok((
            out,
            Tape2 {
                tape,
                size: (h, w),
            },
        ))
    }

    /// Predict the target frame from two references and its mask.
    pub fn predict(
        &mut self,
        ref_a: &RangeImage,
        ref_b: &RangeImage,
        mask: &Mask,
    ) -> Result<RangeImage> {
        if ref_a.height() != ref_b.height()
            || ref_a.width() != ref_b.width()
            || mask.height() != ref_a.height()
            || mask.width() != ref_a.width()
        {
            return Err(Error::GraphState("reference/mask shape mismatch".into()));
        }
        let (grid, _tape) = self.forward_grid(ref_a, ref_b, mask)?;
        Ok(grid_to_image(
            &grid,
            ref_a.sensor,
            ref_a.frame_index,
            if self.use_mask { Some(mask) } else { None },
        ))
    }
}

/// Forward tape plus the resolution it belongs to (private helper).
struct Tape2 {
    tape: crate::nn::Tape,
    size: (usize, usize),
}

/// One training example: two references, the target's mask, the target.
#[derive(Debug, Clone)]
pub struct PredictorSample {
    pub refs: [RangeImage; 2],
    pub mask: Mask,
    pub target: RangeImage,
}

/// Build (refs, mask, target) triples from a frame sequence. Targets run
/// over `2..frames.len() - 1` in both modes so the two modes train and
/// evaluate on identical targets.
pub fn build_dataset(frames: &[RangeImage], mode: PredictionMode) -> Vec<PredictorSample> {
    let mut out = Vec::new();
    if frames.len() < 4 {
        return out;
    }
    for t in 2..frames.len() - 1 {
        let target = frames[t].clone();
        let mask = crate::projection::extract_mask(&target);
        let refs = match mode {
            PredictionMode::Bidirectional => [frames[t - 1].clone(), frames[t + 1].clone()],
            PredictionMode::Unidirectional => [frames[t - 2].clone(), frames[t - 1].clone()],
        };
        out.push(PredictorSample { refs, mask, target });
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Mean absolute error over valid pixels between a prediction grid and the
/// target image, plus the matching gradient seed.
fn masked_l1(pred: &Grid4, target: &RangeImage, mask: &Mask) -> (f64, Grid4) {
    let n_valid = mask.count_ones().max(1) as f64;
    let mut seed = Grid4::zeros(pred.shape());
    let mut loss = 0.0f64;
    let (h, w) = (target.height(), target.width());
    for row in 0..h {
        for col in 0..w {
            if mask.get(row, col) == 0 {
                continue;
            }
            let d = f64::from(pred.at(0, 0, row, col)) - f64::from(target.get(row, col));
            loss += d.abs();
            let g = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            } / n_valid;
            seed.set(0, 0, row, col, g as f32);
        }
    }
    (loss / n_valid, seed)
}

/// Masked-L1 of the model on a sample without training (for held-out eval).
pub fn eval_masked_l1(model: &mut PredictorModel, sample: &PredictorSample) -> Result<f64> {
    let (grid, _) = model.forward_grid(&sample.refs[0], &sample.refs[1], &sample.mask)?;
    Ok(masked_l1(&grid, &sample.target, &sample.mask).0)
}

/// Masked-L1 of the averaging baseline on a sample.
pub fn eval_average_l1(sample: &PredictorSample) -> f64 {
    let pred = predict_average(&sample.refs[0], &sample.refs[1], &sample.mask);
    let grid = image_to_grid(&pred);
    masked_l1(&grid, &sample.target, &sample.mask).0
}

/// Train with the adaptive-moment optimizer on the masked-L1 objective.
/// Returns the mean training loss per epoch.
pub fn train_predictor(
    model: &mut PredictorModel,
    dataset: &[PredictorSample],
    config: TrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(config.epochs);
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for &i in &order {
            let sample = &dataset[i];
            let (pred, tape2) = model.forward_grid(&sample.refs[0], &sample.refs[1], &sample.mask)?;
            let (loss, seed) = masked_l1(&pred, &sample.target, &sample.mask);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged("loss".into()));
            }
            epoch_loss += loss;
            let graph = &model.graphs[&tape2.size];
            let grads = graph.backward(&model.params, &tape2.tape, &[(0, seed)])?;
            adam.step(&mut model.params, &grads, config.lr)?;
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok(history)
}

/// Stack references (and optionally the mask) as input channels.
fn stack_inputs(ref_a: &RangeImage, ref_b: &RangeImage, mask: &Mask, use_mask: bool) -> Grid4 {
    let (h, w) = (ref_a.height(), ref_a.width());
    let channels = if use_mask { 3 } else { 2 };
    let mut grid = Grid4::zeros([1, channels, h, w]);
    grid.data_mut()[..h * w].copy_from_slice(ref_a.values());
    grid.data_mut()[h * w..2 * h * w].copy_from_slice(ref_b.values());
    if use_mask {
        for (dst, bit) in grid.data_mut()[2 * h * w..].iter_mut().zip(mask.bits()) {
            *dst = f32::from(*bit);
        }
    }
    grid
}

pub(crate) fn image_to_grid(image: &RangeImage) -> Grid4 {
    Grid4::from_vec(
        [1, 1, image.height(), image.width()],
        image.values().to_vec(),
    )
}

pub(crate) fn mask_to_grid(mask: &Mask) -> Grid4 {
    Grid4::from_vec(
        [1, 1, mask.height(), mask.width()],
        mask.bits().iter().map(|b| f32::from(*b)).collect(),
    )
}

/// Materialize a network output as a range image: valid pixels are clamped
/// to a small positive floor, invalid pixels are forced to exactly 0 when a
/// mask is given.
fn grid_to_image(
    grid: &Grid4,
    sensor: SensorConfig,
    frame_index: u32,
    mask: Option<&Mask>,
) -> RangeImage {
    let mut out = RangeImage::zeros(sensor, frame_index);
    for row in 0..sensor.height {
        for col in 0..sensor.width {
            let v = grid.at(0, 0, row, col);
            let v = match mask {
                Some(m) if m.get(row, col) == 0 => 0.0,
                Some(_) => v.max(MIN_VALID_RANGE),
                None => v.max(0.0),
            };
            out.set(row, col, v);
        }
    }
    out
}

/// U-Net with `spec.depth` stride-2 levels, concatenation skips, 3x3
/// kernels, leaky rectifiers, and a softplus head. When `use_mask` is set
/// the graph takes the mask as a second input and multiplies it into the
/// last layer.
fn build_unet(
    params: &mut ModelParams,
    spec: &UNetSpec,
    in_channels: usize,
    use_mask: bool,
    height: usize,
    width: usize,
) -> Result<Graph> {
    let factor = 1 << spec.depth;
    if height % factor != 0 || width % factor != 0 {
        return Err(Error::GraphConstruction(format!(
            "input {height}x{width} not divisible by 2^depth = {factor}"
        )));
    }
    let mut b = GraphBuilder::new(params);
    let x = b.input([1, in_channels, height, width]);
    let mask_in = use_mask.then(|| b.input([1, 1, height, width]));

    let stem = b.conv2d(x, "stem", spec.base_channels, 3, 1)?;
    let mut cur = b.leaky_relu(stem, 0.2);
    let mut skips: Vec<NodeId> = Vec::with_capacity(spec.depth);
    for level in 0..spec.depth {
        skips.push(cur);
        let ch = spec.base_channels << (level + 1);
        let down = b.conv2d(cur, &format!("enc{level}"), ch, 3, 2)?;
        cur = b.leaky_relu(down, 0.2);
    }
    for level in (0..spec.depth).rev() {
        let ch = spec.base_channels << level;
        let up = b.upsample2x(cur);
        let shrink = b.conv2d(up, &format!("up{level}"), ch, 3, 1)?;
        let shrink = b.leaky_relu(shrink, 0.2);
        let joined = b.concat(shrink, skips[level])?;
        let fused = b.conv2d(joined, &format!("dec{level}"), ch, 3, 1)?;
        cur = b.leaky_relu(fused, 0.2);
    }
    let head = b.conv2d(cur, "head", 1, 3, 1)?;
    let mut out = b.softplus(head);
    if let Some(mask) = mask_in {
        out = b.mul(out, mask)?;
    }
    Ok(b.build(vec![out]))
}
