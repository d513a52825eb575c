//! Binary morphology and flood fill.
//!
//! Pixels outside the raster are background for both erosion and dilation.

use std::collections::VecDeque;

use crate::raster::BinaryImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructuringElement {
    /// `size x size` square, `size` odd.
    Square(usize),
    /// 3x3 plus-shaped neighbourhood.
    Cross,
}

impl StructuringElement {
    fn offsets(self) -> Vec<(isize, isize)> {
        match self {
            StructuringElement::Square(size) => {
                assert!(size % 2 == 1, "structuring element size must be odd");
                let r = (size / 2) as isize;
                let mut v = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        v.push((dx, dy));
                    }
                }
                v
            }
            StructuringElement::Cross => vec![(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)],
        }
    }
}

pub fn dilate(img: &BinaryImage, se: StructuringElement) -> BinaryImage {
    let offs = se.offsets();
    BinaryImage::from_fn(img.width(), img.height(), |x, y| {
        offs.iter().any(|&(dx, dy)| {
            img.get_signed(x as isize + dx, y as isize + dy)
                .unwrap_or(false)
        })
    })
}

pub fn erode(img: &BinaryImage, se: StructuringElement) -> BinaryImage {
    let offs = se.offsets();
    BinaryImage::from_fn(img.width(), img.height(), |x, y| {
        offs.iter().all(|&(dx, dy)| {
            img.get_signed(x as isize + dx, y as isize + dy)
                .unwrap_or(false)
        })
    })
}

pub fn dilate_n(img: &BinaryImage, se: StructuringElement, n: usize) -> BinaryImage {
    (0..n).fold(img.clone(), |acc, _| dilate(&acc, se))
}

pub fn erode_n(img: &BinaryImage, se: StructuringElement, n: usize) -> BinaryImage {
    (0..n).fold(img.clone(), |acc, _| erode(&acc, se))
}

/// Closing with `iterations` dilations followed by as many erosions.
///
/// The image is padded by the closing reach first so strokes touching the
/// frame are not eaten by the erosion; the result always contains the input.
pub fn close(img: &BinaryImage, se: StructuringElement, iterations: usize) -> BinaryImage {
    if iterations == 0 {
        return img.clone();
    }
    let reach = match se {
        StructuringElement::Square(s) => s / 2,
        StructuringElement::Cross => 1,
    } * iterations;
    let (w, h) = img.dims();
    let padded = BinaryImage::from_fn(w + 2 * reach, h + 2 * reach, |x, y| {
        x >= reach && y >= reach && x < w + reach && y < h + reach && img.get(x - reach, y - reach)
    });
    let closed = erode_n(&dilate_n(&padded, se, iterations), se, iterations);
    closed.crop(reach, reach, w, h)
}

/// 4-connected flood fill over background (`false`) pixels from `seed`.
///
/// Returns the set of reached pixels; a foreground seed reaches nothing.
pub fn flood_fill_background(img: &BinaryImage, seed: (usize, usize)) -> BinaryImage {
    let (w, h) = img.dims();
    let mut reached = BinaryImage::filled(w, h, false);
    if img.get(seed.0, seed.1) {
        return reached;
    }
    let mut queue = VecDeque::new();
    reached.set(seed.0, seed.1, true);
    queue.push_back(seed);
    while let Some((x, y)) = queue.pop_front() {
        let neighbours = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbours {
            if nx < w && ny < h && !img.get(nx, ny) && !reached.get(nx, ny) {
                reached.set(nx, ny, true);
                queue.push_back((nx, ny));
            }
        }
    }
    reached
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(w: usize, h: usize, y: usize, x0: usize, x1: usize) -> BinaryImage {
        BinaryImage::from_fn(w, h, |x, yy| yy == y && x >= x0 && x <= x1)
    }

    #[test]
    fn dilating_a_line_gives_three_rows() {
        let l = line(20, 9, 4, 5, 14);
        let d = dilate(&l, StructuringElement::Square(3));
        assert_eq!(d.count(), 3 * 12);
        assert!((3..=5).all(|y| d.get(10, y)));
        assert!(!d.get(10, 2) && !d.get(10, 6));
    }

    #[test]
    fn eroding_a_thin_line_removes_it() {
        let l = line(20, 9, 4, 5, 14);
        assert_eq!(erode(&l, StructuringElement::Square(3)).count(), 0);
    }

    #[test]
    fn closing_bridges_one_pixel_gap_and_contains_input() {
        let mut l = line(20, 9, 4, 3, 16);
        l.set(10, 4, false);
        let c = close(&l, StructuringElement::Square(3), 1);
        assert!(c.get(10, 4));
        assert!(l.data().iter().zip(c.data()).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn closing_keeps_border_strokes() {
        let l = BinaryImage::from_fn(8, 8, |x, _| x == 0);
        let c = close(&l, StructuringElement::Square(3), 2);
        assert!((0..8).all(|y| c.get(0, y)));
    }

    #[test]
    fn flood_fill_stops_at_diagonal_walls() {
        // 8-connected diagonal wall from (0,3) to (3,0) separates the corner
        let wall = BinaryImage::from_fn(6, 6, |x, y| x + y == 3);
        let reached = flood_fill_background(&wall, (0, 0));
        assert_eq!(reached.count(), 6); // (0,0),(1,0),(2,0),(0,1),(1,1),(0,2)
    }
}
