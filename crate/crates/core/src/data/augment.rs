//! Centre-preserving nearest-neighbour zoom applied to image and mask together.

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const ZOOM_RANGE: (f64, f64) = (0.9, 1.1);

/// Magnifies `1×H×W` tensors by `scale` about the image centre. Pixels that
/// map outside the source are zero.
pub fn zoom(image: &Tensor, scale: f64) -> Tensor {
    let (_, h, w) = image.dims3().expect("zoom takes a 1×H×W tensor");
    let src = image.data();
    let map = |i: usize, n: usize| -> Option<usize> {
        let centre = n as f64 / 2.0;
        let s = ((i as f64 + 0.5 - centre) / scale + centre - 0.5).round();
        (s >= 0.0 && s < n as f64).then_some(s as usize)
    };
    Tensor::from_fn(image.shape().to_vec(), |i| {
        let (r, c) = (i / w % h, i % w);
        match (map(r, h), map(c, w)) {
            (Some(sr), Some(sc)) => src[sr * w + sc],
            _ => 0.0,
        }
    })
}

/// With probability `p`, zooms image and mask by one factor drawn from
/// [`ZOOM_RANGE`]; otherwise returns them unchanged.
pub fn random_zoom(image: &Tensor, mask: &Tensor, rng: &mut Rng, p: f64) -> (Tensor, Tensor) {
    if rng.bernoulli(p) {
        let scale = rng.uniform(ZOOM_RANGE.0, ZOOM_RANGE.1);
        (zoom(image, scale), zoom(mask, scale))
    } else {
        (image.clone(), mask.clone())
    }
}
