//! Minimal differentiable compute engine: a fixed vocabulary of 2D nodes
//! (convolution, leaky rectifier, softplus, nearest upsampling, concat,
//! elementwise add/multiply, and the two quantizer surrogates), reverse-mode
//! gradients over a static graph, and an adaptive-moment optimizer.

mod conv;
mod grid;
mod graph;
mod params;

pub use conv::out_spatial as conv_out_spatial;
pub use graph::{sigmoid, softplus, ExecMode, Graph, GraphBuilder, NodeId, Tape};
pub use grid::Grid4;
pub use params::{AdamState, Gradients, Init, ModelParams, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Numeric gradient verification: compares the analytic gradients of a
/// random linear scalarization of the graph outputs against central finite
/// differences. Returns the largest semi-relative error observed.
///
/// Parameters with many elements are probed on a seeded random subset. Not
/// applicable to graphs containing rounding nodes (piecewise-constant
/// forward), whose straight-through gradient is checked separately.
pub fn grad_check(
    graph: &Graph,
    params: &mut ModelParams,
    inputs: &[&Grid4],
    mode: ExecMode,
    check_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(check_seed);
    let weights: Vec<Grid4> = (0..graph.outputs().len())
        .map(|i| {
            let shape = graph.output_shape(i);
            let data = (0..shape.iter().product::<usize>())
                .map(|_| {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * rng.gen_range(0.5..1.5)
                })
                .collect();
            Grid4::from_vec(shape, data)
        })
        .collect();

    // Loss evaluations for the finite differences run on the double
    // precision shadow pass; f32 storage noise would otherwise dominate the
    // differences at this step size.
    let loss = |params: &ModelParams, inputs: &[&Grid4]| -> Result<f64> {
        let values = graph.forward_f64(params, inputs, mode)?;
        let mut total = 0.0f64;
        for (i, w) in weights.iter().enumerate() {
            let out = &values[graph.node_index(graph.outputs()[i])];
            for (v, c) in out.iter().zip(w.data()) {
                total += v * f64::from(*c);
            }
        }
        Ok(total)
    };

    let tape = graph.forward(params, inputs, mode)?;
    let seeds: Vec<(usize, Grid4)> = weights.iter().cloned().enumerate().collect();
    let analytic = graph.backward(params, &tape, &seeds)?;

    const H: f32 = 1e-3;
    let mut max_err = 0.0f64;
    let mut check_element = |params: &mut ModelParams,
                             inputs: &[&Grid4],
                             name: Option<&str>,
                             elem: usize,
                             analytic_g: f64|
     -> Result<()> {
        // Perturb either a parameter element or an input element.
        let mut owned_inputs: Vec<Grid4>;
        let (f_plus, f_minus, actual_h);
        match name {
            Some(name) => {
                let original = params.get(name).unwrap().data()[elem];
                let (lo, hi) = (original - H, original + H);
                params.get_mut(name).unwrap().data_mut()[elem] = hi;
                f_plus = loss(params, inputs)?;
                params.get_mut(name).unwrap().data_mut()[elem] = lo;
                f_minus = loss(params, inputs)?;
                params.get_mut(name).unwrap().data_mut()[elem] = original;
                actual_h = f64::from(hi) - f64::from(lo);
            }
            None => {
                owned_inputs = inputs.iter().map(|g| (*g).clone()).collect();
                let original = owned_inputs[0].data()[elem];
                let (lo, hi) = (original - H, original + H);
                owned_inputs[0].data_mut()[elem] = hi;
                let refs: Vec<&Grid4> = owned_inputs.iter().collect();
                f_plus = loss(params, &refs)?;
                owned_inputs[0].data_mut()[elem] = lo;
                let refs: Vec<&Grid4> = owned_inputs.iter().collect();
                f_minus = loss(params, &refs)?;
                actual_h = f64::from(hi) - f64::from(lo);
            }
        }
        let numeric = (f_plus - f_minus) / actual_h;
        let err = (analytic_g - numeric).abs() / analytic_g.abs().max(numeric.abs()).max(1e-2);
        if err > max_err {
            max_err = err;
        }
        Ok(())
    };

    let param_names: Vec<String> = analytic.names().map(str::to_string).collect();
    for name in &param_names {
        let grad = analytic.param(name).unwrap().clone();
        let n = grad.len();
        let elems: Vec<usize> = if n <= 64 {
            (0..n).collect()
        } else {
            (0..32).map(|_| rng.gen_range(0..n)).collect()
        };
        for e in elems {
            check_element(params, inputs, Some(name), e, f64::from(grad.data()[e]))?;
        }
    }
    // Input gradients, probed on the first input.
    if !inputs.is_empty() {
        let grad = analytic.inputs[0].clone();
        let n = grad.len();
        let elems: Vec<usize> = if n <= 64 {
            (0..n).collect()
        } else {
            (0..32).map(|_| rng.gen_range(0..n)).collect()
        };
        for e in elems {
            check_element(params, inputs, None, e, f64::from(grad.data()[e]))?;
        }
    }
    Ok(max_err)
}
