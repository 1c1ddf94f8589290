use langseg::loss::combined_loss;
use langseg::{Graph, Tensor};

/// Lowest combined loss any prediction that is constant over 4×4 blocks can
/// reach on `mask`, found by Adam on per-block logits.
pub fn block_loss_floor(mask: &Tensor) -> f32 {
    let (_, h, w) = mask.dims3().expect("1×H×W mask");
    let n = (h / 4) * (w / 4);
    let mut z = Tensor::zeros([1, h / 4, w / 4]);
    let (mut m, mut v) = (vec![0f32; n], vec![0f32; n]);
    let mut best = f32::INFINITY;
    for t in 1..=3000 {
        let mut g = Graph::new();
        let zv = g.param(z.clone());
        let up = g.upsample_nearest2x(zv).unwrap();
        let up = g.upsample_nearest2x(up).unwrap();
        let p = g.sigmoid(up);
        let loss = combined_loss(&mut g, p, mask).unwrap();
        best = best.min(g.value(loss).item());
        g.backward(loss).unwrap();
        let grad = g.grad(zv).unwrap();
        for i in 0..n {
            m[i] = 0.9 * m[i] + 0.1 * grad[i];
            v[i] = 0.999 * v[i] + 0.001 * grad[i] * grad[i];
            let step = (m[i] / (1.0 - 0.9f32.powi(t))) / ((v[i] / (1.0 - 0.999f32.powi(t))).sqrt() + 1e-8);
            z.data_mut()[i] -= 0.05 * step;
        }
    }
    best
}
