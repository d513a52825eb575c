//! Helpers shared by the training loops.

use rand::Rng;

use crate::error::{Error, Result};

/// Top-left corner of a `size x size` window inside a `w x h` image, centred
/// near `focus` (jittered by up to `jitter` px) or uniform when `focus` is
/// `None`.
pub fn crop_origin<R: Rng + ?Sized>(
    w: usize,
    h: usize,
    size: usize,
    focus: Option<(f64, f64)>,
    jitter: f64,
    rng: &mut R,
) -> (usize, usize) {
    let max_x = w.saturating_sub(size);
    let max_y = h.saturating_sub(size);
    match focus {
        Some((cx, cy)) => {
            let jx = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            let jy = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            let x = (cx + jx - size as f64 / 2.0).round().clamp(0.0, max_x as f64) as usize;
            let y = (cy + jy - size as f64 / 2.0).round().clamp(0.0, max_y as f64) as usize;
            (x, y)
        }
        None => (rng.random_range(0..=max_x), rng.random_range(0..=max_y)),
    }
}

pub fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// Sample `n` indices in `0..len` with replacement.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..len)).collect()
}
