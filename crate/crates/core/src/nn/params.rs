//! Named parameter store with deterministic initialization and the "BPNN"
//! weight container.
//!
//! Container layout (little-endian):
//! `magic "BPNN" | version u8 | seed u64 | array count u32 | per array:
//!  name length u16 | name bytes | 4 x dim u32 | raw f32 data`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::Grid4;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"BPNN";
pub const WEIGHTS_VERSION: u8 = 1;

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zero,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform { fan_in: usize },
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    entries: Vec<(String, Grid4)>,
    index: HashMap<String, usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ModelParams {
    pub fn new(seed: u64) -> Self {
        ModelParams {
            entries: Vec::new(),
            index: HashMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fetch an existing parameter or create it with the given initializer.
    /// The RNG stream advances in registration order, so a fixed
    /// architecture always initializes identically.
    pub fn register(&mut self, name: &str, shape: [usize; 4], init: Init) -> Result<usize> {
        if let Some(&idx) = self.index.get(name) {
            let existing = self.entries[idx].1.shape();
            if existing != shape {
                return Err(Error::ModelMismatch(format!(
                    "parameter {name} has shape {existing:?}, expected {shape:?}"
                )));
            }
            return Ok(idx);
        }
        let mut grid = Grid4::zeros(shape);
        if let Init::FanInUniform { fan_in } = init {
            let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
            for v in grid.data_mut() {
                *v = self.rng.gen_range(-bound..=bound);
            }
        }
        let idx = self.entries.len();
        self.entries.push((name.to_string(), grid));
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn get(&self, name: &str) -> Option<&Grid4> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Grid4> {
        let idx = *self.index.get(name)?;
        Some(&mut self.entries[idx].1)
    }

    pub(crate) fn by_index(&self, idx: usize) -> &Grid4 {
        &self.entries[idx].1
    }

    pub(crate) fn name_of(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid4)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, g)| g.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&WEIGHTS_MAGIC)?;
        out.write_u8(WEIGHTS_VERSION)?;
        out.write_u64::<LittleEndian>(self.seed)?;
        out.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, grid) in &self.entries {
            out.write_u16::<LittleEndian>(name.len() as u16)?;
            out.write_all(name.as_bytes())?;
            for d in grid.shape() {
                out.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in grid.data() {
                out.write_f32::<LittleEndian>(v)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::UnsupportedFormat("weight file shorter than header".into()))?;
        if magic != WEIGHTS_MAGIC {
            return Err(Error::UnsupportedFormat(format!(
                "bad weights magic {magic:02x?}"
            )));
        }
        let version = input.read_u8()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "unsupported weights version {version}"
            )));
        }
        let seed = input.read_u64::<LittleEndian>()?;
        let count = input.read_u32::<LittleEndian>()? as usize;
        let mut params = ModelParams::new(seed);
        for _ in 0..count {
            let name_len = input.read_u16::<LittleEndian>()? as usize;
            let mut name_bytes = vec![0u8; name_len];
            input.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::UnsupportedFormat("non-utf8 parameter name".into()))?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = input.read_u32::<LittleEndian>()? as usize;
            }
            let mut data = vec![0.0f32; shape.iter().product()];
            for v in &mut data {
                *v = input.read_f32::<LittleEndian>()?;
            }
            let idx = params.entries.len();
            params.entries.push((name.clone(), Grid4::from_vec(shape, data)));
            params.index.insert(name, idx);
        }
        Ok(params)
    }
}

/// Per-parameter gradients keyed by name, plus gradients for graph inputs.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: HashMap<String, Grid4>,
    pub inputs: Vec<Grid4>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Grid4> {
        self.by_name.get(name)
    }

    /// Add `grad` into the entry for `name` (creating it at zero).
    pub fn accumulate(&mut self, name: &str, grad: Grid4) {
        match self.by_name.get_mut(name) {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), grad.shape());
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += g;
                }
            }
            None => {
                self.by_name.insert(name.to_string(), grad);
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }
}

/// Adaptive-moment optimizer state; one slot pair per parameter, addressed
/// by name.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            m: HashMap::new(),
            v: HashMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One update over every parameter that received a gradient. Fails on
    /// non-finite gradients, naming the parameter.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &Gradients,
        lr: f32,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.entries.len() {
            let name = params.entries[i].0.clone();
            let Some(grad) = grads.param(&name) else {
                continue;
            };
            if !grad.all_finite() {
                return Err(Error::TrainingDiverged(format!("gradient for {name}")));
            }
            let values = params.entries[i].1.data_mut();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; values.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; values.len()]);
            for ((w, g), (m_i, v_i)) in values
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = f64::from(*g);
                let m_new = self.beta1 * f64::from(*m_i) + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * f64::from(*v_i) + (1.0 - self.beta2) * g * g;
                *m_i = m_new as f32;
                *v_i = v_new as f32;
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                *w -= (f64::from(lr) * m_hat / (v_hat.sqrt() + self.epsilon)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn registration_is_deterministic_and_idempotent() {
        let mut a = ModelParams::new(7);
        let mut b = ModelParams::new(7);
        for p in [&mut a, &mut b] {
            p.register("w0", [4, 2, 3, 3], Init::FanInUniform { fan_in: 18 })
                .unwrap();
            p.register("b0", [1, 4, 1, 1], Init::Zero).unwrap();
        }
        assert_eq!(a.get("w0"), b.get("w0"));
        assert!(a.get("b0").unwrap().data().iter().all(|v| *v == 0.0));
        // Re-registering binds, it does not reinitialize.
        let before = a.get("w0").unwrap().clone();
        a.register("w0", [4, 2, 3, 3], Init::FanInUniform { fan_in: 18 })
            .unwrap();
        assert_eq!(a.get("w0"), Some(&before));
        // Shape mismatch is an error.
        assert!(a.register("w0", [4, 2, 1, 1], Init::Zero).is_err());
    }

    #[test]
    fn save_load_roundtrip_rejects_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("weights.bpnn");
        let mut p = ModelParams::new(3);
        p.register("enc.w", [8, 3, 3, 3], Init::FanInUniform { fan_in: 27 })
            .unwrap();
        p.register("enc.b", [1, 8, 1, 1], Init::Zero).unwrap();
        p.save(&path).unwrap();

        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(loaded.seed(), 3);
        assert_eq!(loaded.get("enc.w"), p.get("enc.w"));
        assert_eq!(loaded.get("enc.b"), p.get("enc.b"));

        // Binding a loaded store against a different shape fails.
        let mut loaded = loaded;
        assert!(loaded
            .register("enc.w", [8, 4, 3, 3], Init::Zero)
            .is_err());

        // Corrupt magic.
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(ModelParams::load(&path).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut p = ModelParams::new(1);
        p.register("w", [1, 1, 2, 2], Init::FanInUniform { fan_in: 4 })
            .unwrap();
        let before = p.get("w").unwrap().clone();
        let mut grads = Gradients::default();
        grads.accumulate("w", Grid4::zeros([1, 1, 2, 2]));
        let mut state = AdamState::new();
        state.step(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p.get("w"), Some(&before));
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = ModelParams::new(1);
        p.register("w", [1, 1, 1, 1], Init::Zero).unwrap();
        let mut grads = Gradients::default();
        grads.accumulate("w", Grid4::filled([1, 1, 1, 1], 1.0));
        let mut state = AdamState::new();
        state.step(&mut p, &grads, 0.1).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ModelParams::new(1);
        p.register("w", [1, 1, 1, 1], Init::Zero).unwrap();
        let mut state = AdamState::new();
        for _ in 0..100 {
            let w = p.get("w").unwrap().data()[0];
            let mut grads = Gradients::default();
            grads.accumulate("w", Grid4::filled([1, 1, 1, 1], 2.0 * (w - 3.0)));
            state.step(&mut p, &grads, 0.1).unwrap();
        }
        let w = p.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = ModelParams::new(1);
        p.register("w", [1, 1, 1, 1], Init::Zero).unwrap();
        let mut grads = Gradients::default();
        grads.accumulate("w", Grid4::filled([1, 1, 1, 1], f32::NAN));
        let mut state = AdamState::new();
        match state.step(&mut p, &grads, 0.1) {
            Err(Error::TrainingDiverged(what)) => assert!(what.contains('w')),
            other => panic!("expected divergence error, got {other:?}"),
        }
    }
}
