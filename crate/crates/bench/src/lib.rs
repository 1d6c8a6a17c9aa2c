//! Shared fixtures for the convolution benchmarks.

use ncconv::{randn, ConvGeometry, Rng, Tensor};

/// CIFAR-scale layer shapes: stem, strided stages and a 1x1 projection.
pub fn geometries() -> Vec<(&'static str, ConvGeometry)> {
    let g = |c, o, k, s, size| ConvGeometry::square(c, o, k, s, k / 2, (size, size)).expect("valid geometry");
    vec![
        ("stem_3x16_k3_32px", g(3, 16, 3, 1, 32)),
        ("stage_16x32_k3s2_32px", g(16, 32, 3, 2, 32)),
        ("stage_32x64_k3s2_16px", g(32, 64, 3, 2, 16)),
        ("proj_64x64_k1_8px", g(64, 64, 1, 1, 8)),
    ]
}

/// Input batch and fan-in scaled weights for `g`.
pub fn inputs(g: &ConvGeometry, batch: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = Rng::new(seed);
    let x = randn(&[batch, g.in_channels, g.input.0, g.input.1], &mut rng, 0.0, 1.0);
    let w = randn(&[g.out_channels, g.patch_len()], &mut rng, 0.0, 1.0 / (g.patch_len() as f64).sqrt());
    (x, w)
}
