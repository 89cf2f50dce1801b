use rand::Rng;

use crate::seed::rng_for;
use crate::seed_parts;

/// Half-width of the uniform initialisation range.
const INIT_SCALE: f64 = 0.01;

/// Parameters laid out as `rows × width`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RowParams {
    pub width: usize,
    pub data: Vec<f64>,
}

impl RowParams {
    pub fn init(rows: usize, width: usize, seed: u64, tag: &str) -> Self {
        let mut rng = rng_for(&seed_parts![seed, "init", tag]);
        let data = (0..rows * width).map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE)).collect();
        Self { width, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }
}

/// Row-sparse gradient accumulator; only touched rows are applied and cleared.
#[derive(Debug, Clone)]
pub(crate) struct RowGrad {
    width: usize,
    data: Vec<f64>,
    touched: Vec<bool>,
    touched_rows: Vec<usize>,
}

impl RowGrad {
    pub fn new(rows: usize, width: usize) -> Self {
        Self { width, data: vec![0.0; rows * width], touched: vec![false; rows], touched_rows: Vec::new() }
    }

    pub fn add_scaled(&mut self, row: usize, values: &[f64], scale: f64) {
        if !self.touched[row] {
            self.touched[row] = true;
            self.touched_rows.push(row);
        }
        let dst = &mut self.data[row * self.width..(row + 1) * self.width];
        for (d, v) in dst.iter_mut().zip(values) {
            *d += scale * v;
        }
    }

    /// `params -= step * grad`, then clears the buffer. Rows are applied in
    /// ascending order.
    pub fn apply(&mut self, params: &mut RowParams, step: f64) {
        self.touched_rows.sort_unstable();
        for &row in &self.touched_rows {
            let range = row * self.width..(row + 1) * self.width;
            for (p, g) in params.data[range.clone()].iter_mut().zip(&mut self.data[range]) {
                *p -= step * *g;
                *g = 0.0;
            }
            self.touched[row] = false;
        }
        self.touched_rows.clear();
    }

    pub fn into_dense(self) -> Vec<f64> {
        self.data
    }
}
