//! The im2col path against an independent direct convolution, and the
//! fused normalized convolution against explicit standardize-then-multiply.

use ncconv::{matmul, randn, standardize_columns, unfold, Conv, ConvGeometry, NcConv, Rng, Tensor};

/// Zero-pad explicitly, then correlate. Shares no indexing code with the
/// library.
fn oracle(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeometry) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], g.in_channels, g.input.0, g.input.1);
    let (ph, pw) = g.padding;
    let (hp, wp) = (h + 2 * ph, wd + 2 * pw);
    let mut padded = vec![0.0; n * c * hp * wp];
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    padded[((s * c + ch) * hp + y + ph) * wp + xx + pw] = x.get(&[s, ch, y, xx]);
                }
            }
        }
    }
    let (kh, kw) = g.kernel;
    let oh = (hp - kh) / g.stride.0 + 1;
    let ow = (wp - kw) / g.stride.1 + 1;
    let mut out = Tensor::zeros(&[n, g.out_channels, oh, ow]);
    for s in 0..n {
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let v = padded[((s * c + ch) * hp + oy * g.stride.0 + i) * wp + ox * g.stride.1 + j];
                                acc += v * w.get(&[o, (ch * kh + i) * kw + j]);
                            }
                        }
                    }
                    out.set(&[s, o, oy, ox], acc);
                }
            }
        }
    }
    out
}

fn random_geometry(rng: &mut Rng) -> ConvGeometry {
    loop {
        let kh = 1 + rng.below(4);
        let kw = 1 + rng.below(4);
        let g = ConvGeometry::new(
            1 + rng.below(4),
            1 + rng.below(5),
            (kh, kw),
            (1 + rng.below(3), 1 + rng.below(3)),
            (rng.below(kh), rng.below(kw)),
            (3 + rng.below(8), 3 + rng.below(8)),
        );
        if let Ok(g) = g {
            return g;
        }
    }
}

#[test]
fn im2col_conv_matches_direct_oracle_on_ten_geometries() {
    let mut rng = Rng::new(2024);
    for case in 0..10 {
        let g = random_geometry(&mut rng);
        let x = randn::<f64>(&[2, g.in_channels, g.input.0, g.input.1], &mut rng, 0.0, 1.0);
        let w = randn::<f64>(&[g.out_channels, g.patch_len()], &mut rng, 0.0, 1.0);
        let fast = Conv::with_weights(g, w.clone()).unwrap().forward(&x).unwrap();
        let slow = oracle(&x, &w, &g);
        assert_eq!(fast.shape(), slow.shape(), "case {case}: {g:?}");
        let scale = slow.max_abs().max(1.0);
        let err = fast.sub(&slow).unwrap().max_abs() / scale;
        assert!(err < 1e-10, "case {case}: {g:?} err {err:e}");
        let naive = ncconv::naive_conv2d(&x, &w, &g).unwrap();
        assert!(naive.sub(&slow).unwrap().max_abs() < 1e-10 * scale);
    }
}

#[test]
fn nc_equals_explicit_standardize_then_multiply() {
    let mut rng = Rng::new(7);
    for _ in 0..10 {
        let g = random_geometry(&mut rng);
        if g.patch_len() < 2 {
            continue;
        }
        let x = randn::<f64>(&[3, g.in_channels, g.input.0, g.input.1], &mut rng, 0.5, 2.0);
        let mut layer = NcConv::<f64>::new(g, Default::default(), 1e-5, &mut rng).unwrap();
        let y = layer.forward(&x).unwrap();
        let (oh, ow) = g.output();
        for (s, cols) in unfold(&x, &g).unwrap().iter().enumerate() {
            let (xhat, _) = standardize_columns(cols, 1e-5);
            let z = matmul(&layer.weights, &xhat.data).unwrap();
            let got = y.outer(s).reshape(&[g.out_channels, oh * ow]).unwrap();
            assert_eq!(got, z);
        }
    }
}

#[test]
fn nc_matches_explicit_path_in_f32() {
    let mut rng = Rng::new(8);
    let g = ConvGeometry::square(3, 4, 3, 1, 1, (6, 6)).unwrap();
    let x = randn::<f32>(&[2, 3, 6, 6], &mut rng, 0.0, 1.0);
    let mut layer = NcConv::<f32>::new(g, Default::default(), 1e-5, &mut rng).unwrap();
    let y = layer.forward(&x).unwrap();
    let cols = unfold(&x, &g).unwrap();
    let (xhat, _) = standardize_columns(&cols[1], 1e-5f32);
    let z = matmul(&layer.weights, &xhat.data).unwrap();
    assert_eq!(y.outer(1).reshape(&[4, 36]).unwrap(), z);
}
