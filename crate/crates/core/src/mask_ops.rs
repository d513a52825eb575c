//! Sketch to interior mask and background reference map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{close, erode, flood_fill_background, StructuringElement};
use crate::raster::{BinaryImage, Raster};
use crate::scalar::Scalar;

/// Enclosed (non-stroke) pixels needed before a sketch counts as closed.
pub const MIN_ENCLOSED_PIXELS: usize = 4;
const MAX_CLOSING_ITERATIONS: usize = 3;

/// Region enclosed by a sketch, stroke pixels included.
#[derive(Clone, Debug, PartialEq)]
pub struct InteriorMask(pub BinaryImage);

impl InteriorMask {
    pub fn pixels(&self) -> &BinaryImage {
        &self.0
    }
}

/// Which part of the source image the reference map keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// `(1 - interior) * X`: background context, tumor region blanked.
    #[default]
    Complement,
    /// `interior * X`.
    Literal,
}

pub fn close_boundaries(sketch: &BinaryImage, kernel: usize, iterations: usize) -> BinaryImage {
    close(sketch, StructuringElement::Square(kernel), iterations)
}

fn fill_interior(sketch: &BinaryImage) -> BinaryImage {
    let (w, h) = sketch.dims();
    let framed = BinaryImage::from_fn(w + 2, h + 2, |x, y| {
        x > 0 && y > 0 && x <= w && y <= h && sketch.get(x - 1, y - 1)
    });
    let outside = flood_fill_background(&framed, (0, 0));
    outside.not().crop(1, 1, w, h)
}

fn enclosed_count(interior: &BinaryImage, sketch: &BinaryImage) -> usize {
    interior
        .data()
        .iter()
        .zip(sketch.data())
        .filter(|(&i, &s)| i && !s)
        .count()
}

/// Flood fill the background from outside the frame and invert.
///
/// Sketches enclosing fewer than [`MIN_ENCLOSED_PIXELS`] pixels are closed
/// morphologically with growing reach. Failing that, a solid region (most of
/// it survives one erosion, so it is not a broken stroke) is accepted as
/// already filled; otherwise the result is `OpenContour`.
pub fn interior_mask(sketch: &BinaryImage) -> Result<InteriorMask> {
    let interior = fill_interior(sketch);
    if enclosed_count(&interior, sketch) >= MIN_ENCLOSED_PIXELS {
        return Ok(InteriorMask(interior));
    }
    for iterations in 1..=MAX_CLOSING_ITERATIONS {
        let closed = close_boundaries(sketch, 3, iterations);
        let interior = fill_interior(&closed);
        if enclosed_count(&interior, &closed) >= MIN_ENCLOSED_PIXELS {
            return Ok(InteriorMask(interior));
        }
    }
    // a solid blob is its own interior
    let solid = erode(&interior, StructuringElement::Cross);
    if solid.count() >= MIN_ENCLOSED_PIXELS && 2 * solid.count() >= interior.count() {
        return Ok(InteriorMask(interior));
    }
    Err(Error::OpenContour)
}

pub fn reference_map<T: Scalar>(
    image: &Raster<T>,
    interior: &InteriorMask,
    mode: ReferenceMode,
) -> Result<Raster<T>> {
    image.zip_map(&interior.0, |v, inside| {
        let keep = match mode {
            ReferenceMode::Complement => !inside,
            ReferenceMode::Literal => inside,
        };
        if keep {
            v
        } else {
            T::zero()
        }
    })
}
