//! Rasterization of a scene into an image and its ground-truth mask.

use crate::data::scene::SceneSpec;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Peak brightness added at a blob centre on top of the plateau.
const BLOB_PEAK: f64 = 0.35;
const BLOB_PLATEAU: f64 = 0.5;
const NOISE_FLOOR: f64 = 0.12;

/// Renders every blob with the same intensity profile; the mask is the union
/// of infected blobs only. Values are quantized to multiples of 1/255.
pub fn render_sample(scene: &SceneSpec) -> (Tensor, Tensor) {
    let side = scene.side;
    let mut rng = Rng::new(scene.noise_seed);
    let mut image = vec![0.0f32; side * side];
    let mut mask = vec![0.0f32; side * side];
    for r in 0..side {
        for c in 0..side {
            let mut v = rng.uniform(0.0, NOISE_FLOOR);
            let mut positive = false;
            for (i, blob) in scene.blobs.iter().enumerate() {
                let rho2 = blob.rho2(r, c);
                if rho2 <= 1.0 {
                    v += BLOB_PLATEAU + BLOB_PEAK * (1.0 - rho2);
                    positive |= scene.infected.contains(&i);
                }
            }
            image[r * side + c] = quantize(v.clamp(0.0, 1.0));
            mask[r * side + c] = if positive { 1.0 } else { 0.0 };
        }
    }
    (
        Tensor::new([1, side, side], image).expect("side is non-zero"),
        Tensor::new([1, side, side], mask).expect("side is non-zero"),
    )
}

pub fn quantize(v: f64) -> f32 {
    ((v * 255.0).round() / 255.0) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{gen_scene, SceneConfig};

    #[test]
    fn all_infected_mask_is_union_of_supports() {
        let cfg = SceneConfig::default();
        let mut s = gen_scene(&mut Rng::new(9), &cfg).unwrap();
        s.infected = (0..s.blobs.len()).collect();
        let (_, mask) = render_sample(&s);
        for r in 0..64 {
            for c in 0..64 {
                let inside = s.blobs.iter().any(|b| b.rho2(r, c) <= 1.0);
                assert_eq!(mask.data()[r * 64 + c] == 1.0, inside);
            }
        }
    }

    #[test]
    fn distractor_is_bright_but_unmasked() {
        let cfg = SceneConfig { min_blobs: 3, max_blobs: 3, min_infected: 1, max_infected: 1, ..SceneConfig::default() };
        let s = gen_scene(&mut Rng::new(2), &cfg).unwrap();
        let (image, mask) = render_sample(&s);
        let found = (0..64 * 64).any(|i| image.data()[i] >= 0.5 && mask.data()[i] == 0.0);
        assert!(found);
    }

    #[test]
    fn values_are_quantized_and_in_range() {
        let s = gen_scene(&mut Rng::new(5), &SceneConfig::default()).unwrap();
        let (image, mask) = render_sample(&s);
        for &v in image.data() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(quantize(v as f64), v);
        }
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
