//! Small building blocks shared by the learned components.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// 2D convolution followed by a per-channel bias ([O,1,1]).
pub fn conv2d_bias(tape: &Tape, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
    let y = tape.conv2d(x, w, stride, padding)?;
    tape.add(y, b)
}

/// 3D convolution followed by a per-channel bias ([O,1,1,1]).
pub fn conv3d_bias(tape: &Tape, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
    let y = tape.conv3d(x, w, padding)?;
    tape.add(y, b)
}

/// Keeps every `factor`-th row and column of a [C,H,W] map, starting at (0,0).
/// Pixel `i` of the output sits at pixel `factor·i` of the input, matching
/// intrinsics scaled by `1/factor`.
pub fn subsample(tape: &Tape, x: Var, factor: usize) -> Result<Var> {
    let s = tape.shape(x);
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(crate::error::MvsError::invalid(format!(
            "cannot subsample {h}x{w} by {factor}"
        )));
    }
    let r = tape.reshape(x, &[c, h / factor, factor, w / factor, factor])?;
    let r = tape.slice(r, 2, 0, 1)?;
    let r = tape.slice(r, 4, 0, 1)?;
    tape.reshape(r, &[c, h / factor, w / factor])
}

/// Per-channel centred tent blur (support `2·factor − 1`, zero padded)
/// followed by [`subsample`], so each output pixel averages the neighbourhood
/// of the input pixel it sits on.
pub fn blur_subsample(tape: &Tape, x: Var, factor: usize) -> Result<Var> {
    let s = tape.shape(x);
    let k = 2 * factor - 1;
    let taps: Vec<f64> = (0..k).map(|i| (factor - i.abs_diff(factor - 1)) as f64).collect();
    let norm = (factor * factor) as f64;
    let kernel = tape.constant(Tensor::from_fn(&[1, 1, k, k], |i| taps[i / k] * taps[i % k] / (norm * norm)));
    let channels = (0..s[0])
        .map(|c| tape.conv2d(tape.slice(x, 0, c, c + 1)?, kernel, 1, factor - 1))
        .collect::<Result<Vec<_>>>()?;
    subsample(tape, tape.concat(&channels, 0)?, factor)
}

/// Kaiming-uniform initialisation for a ReLU network: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
