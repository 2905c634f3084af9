//! Random-crop augmentation on `channels x height x width` observations.

use rand::Rng;

/// Zero-pads each spatial side by `pad` and crops back to `height x width`
/// at offset `(dy, dx)` in `[0, 2 pad]^2`.
pub fn crop_at(obs: &[f64], shape: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    debug_assert_eq!(obs.len(), c * h * w);
    if pad == 0 {
        return obs.to_vec();
    }
    let mut out = vec![0.0; obs.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = obs[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Random crop with a uniformly drawn offset, returned alongside the result.
pub fn augment<R: Rng + ?Sized>(obs: &[f64], shape: [usize; 3], pad: usize, rng: &mut R) -> (Vec<f64>, (usize, usize)) {
    if pad == 0 {
        return (obs.to_vec(), (0, 0));
    }
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    (crop_at(obs, shape, pad, dy, dx), (dy, dx))
}
