//! Align-corners bilinear resampling for embedding grids and images.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Source coordinate and blend weight for each output index along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn check_target(new_h: usize, new_w: usize) -> Result<()> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Argument(format!("resample target {new_h}x{new_w} must be at least 1x1")));
    }
    Ok(())
}

/// Resamples a `[h, w, d]` grid to `[new_h, new_w, d]`, each channel
/// independently. Output corners equal input corners exactly.
pub fn bilinear_resample_grid(grid: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    check_target(new_h, new_w)?;
    let [h, w, d] = grid.shape()[..] else {
        return Err(shape_err!("expected a [h, w, d] grid, got {:?}", grid.shape()));
    };
    let src = grid.data();
    let at = |y: usize, x: usize, c: usize| src[(y * w + x) * d + c];
    let (ty, tx) = (axis_taps(h, new_h), axis_taps(w, new_w));
    let mut out = Vec::with_capacity(new_h * new_w * d);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            for c in 0..d {
                let top = lerp(at(y0, x0, c), at(y0, x1, c), fx);
                let bottom = lerp(at(y1, x0, c), at(y1, x1, c), fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    Tensor::new(vec![new_h, new_w, d], out)
}

/// Resizes a `[c, h, w]` image with the same kernel as
/// [`bilinear_resample_grid`].
pub fn resize_image(img: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    check_target(new_h, new_w)?;
    let [c, h, w] = img.shape()[..] else {
        return Err(shape_err!("expected a [c, h, w] image, got {:?}", img.shape()));
    };
    if (h, w) == (new_h, new_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let (ty, tx) = (axis_taps(h, new_h), axis_taps(w, new_w));
    let mut out = Vec::with_capacity(c * new_h * new_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    Tensor::new(vec![c, new_h, new_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_is_bit_exact() {
        let g = Tensor::from_fn(&[3, 4, 2], |i| (i as f64 * 0.37).sin());
        assert_eq!(bilinear_resample_grid(&g, 3, 4).unwrap(), g);
    }

    #[test]
    fn two_by_two_to_three_by_three() {
        let g = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = bilinear_resample_grid(&g, 3, 3).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn zero_target_rejected() {
        let g = Tensor::zeros(&[2, 2, 1]);
        assert!(matches!(bilinear_resample_grid(&g, 0, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn checker_center_is_mean_of_corners() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = resize_image(&img, 3, 3).unwrap();
        assert_eq!(r.get(&[0, 1, 1]), 0.5);
    }

    proptest! {
        #[test]
        fn constant_grid_stays_constant(c in -5.0f64..5.0, h in 1usize..6, w in 1usize..6, nh in 1usize..12, nw in 1usize..12) {
            let g = Tensor::full(&[h, w, 2], c);
            let r = bilinear_resample_grid(&g, nh, nw).unwrap();
            prop_assert!(r.data().iter().all(|&v| v == c));
        }

        #[test]
        fn corners_preserved(h in 2usize..6, w in 2usize..6, nh in 2usize..14, nw in 2usize..14, seed in 0u64..1000) {
            let g = Tensor::from_fn(&[h, w, 3], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 100.0);
            let r = bilinear_resample_grid(&g, nh, nw).unwrap();
            for &(y, x, ny, nx) in &[(0, 0, 0, 0), (0, w - 1, 0, nw - 1), (h - 1, 0, nh - 1, 0), (h - 1, w - 1, nh - 1, nw - 1)] {
                for c in 0..3 {
                    prop_assert_eq!(r.get(&[ny, nx, c]), g.get(&[y, x, c]));
                }
            }
        }
    }
}
