//! Dense batch x channels x height x width tensor of f32.

/// 4D activation/parameter array, row-major with width contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid4 {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Grid4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "degenerate shape {shape:?}");
        Grid4 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Grid4 { shape, data }
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        let mut g = Self::zeros(shape);
        g.data.fill(value);
        g
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(
            b < self.shape[0] && c < self.shape[1] && y < self.shape[2] && x < self.shape[3]
        );
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(b, c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
