//! Procedural scenes with exactly known motion, used for training smoke tests,
//! demos and the synthetic benchmark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Frame, Tensor, TimeStep};

#[derive(Clone, Debug)]
struct Wave {
    freq_x: f64,
    freq_y: f64,
    phase: f64,
    amplitude: [f64; 3],
}

/// Smooth band-limited texture defined on the continuous plane, so shifted
/// copies can be evaluated exactly at sub-pixel offsets.
#[derive(Clone, Debug)]
pub struct Texture {
    waves: Vec<Wave>,
}

impl Texture {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..6)
            .map(|_| {
                // periods between roughly 6 and 24 pixels
                let period = rng.gen_range(6.0..24.0);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let freq = std::f64::consts::TAU / period;
                Wave {
                    freq_x: freq * angle.cos(),
                    freq_y: freq * angle.sin(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amplitude: [
                        rng.gen_range(0.02..0.065),
                        rng.gen_range(0.02..0.065),
                        rng.gen_range(0.02..0.065),
                    ],
                }
            })
            .collect();
        Texture { waves }
    }

    /// Value at continuous position `(x, y)` in channel `c`; always in `(0.1, 0.9)`.
    pub fn eval(&self, x: f64, y: f64, c: usize) -> f64 {
        0.5 + self
            .waves
            .iter()
            .map(|w| w.amplitude[c] * (w.freq_x * x + w.freq_y * y + w.phase).sin())
            .sum::<f64>()
    }

    /// Renders the texture translated by `(dx, dy)` pixels:
    /// `out(i, j) = texture(j - dx, i - dy)`.
    pub fn render(&self, height: usize, width: usize, channels: usize, dx: f64, dy: f64) -> Frame {
        let t = Tensor::from_fn(height, width, channels, |i, j, c| {
            self.eval(j as f64 - dx, i as f64 - dy, c)
        });
        Frame::new(t).expect("texture values are finite")
    }
}

/// `n_frames` frames of a texture moving at constant `velocity = (vx, vy)` px/frame.
pub fn constant_velocity_sequence(
    height: usize,
    width: usize,
    channels: usize,
    n_frames: usize,
    velocity: (f64, f64),
    seed: u64,
) -> Vec<Frame> {
    let texture = Texture::random(seed);
    (0..n_frames)
        .map(|k| {
            let t = k as f64;
            texture.render(height, width, channels, velocity.0 * t, velocity.1 * t)
        })
        .collect()
}

/// A `(first, middle, last)` triplet where the middle frame sits at `alpha`
/// between the outer frames, which are `displacement` pixels apart.
pub fn translation_triplet(
    height: usize,
    width: usize,
    channels: usize,
    displacement: (f64, f64),
    alpha: TimeStep,
    seed: u64,
) -> Result<[Frame; 3]> {
    let texture = Texture::random(seed);
    let a = alpha.value();
    Ok([
        texture.render(height, width, channels, 0.0, 0.0),
        texture.render(height, width, channels, a * displacement.0, a * displacement.1),
        texture.render(height, width, channels, displacement.0, displacement.1),
    ])
}
