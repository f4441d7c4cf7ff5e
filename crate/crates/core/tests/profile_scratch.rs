//! Temporary timing probe (will be removed).
use ildiff_core::autograd::Graph;
use ildiff_core::config::ModelConfig;
use ildiff_core::nn::{GraphCtx, Params};
use ildiff_core::rng::{derive_rng, normal_array};
use ildiff_core::tensor::*;
use ndarray::{Array1, Array4};
use std::time::Instant;

fn timeit(label: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let iters = 5;
    for _ in 0..iters { f(); }
    println!("{label}: {:.1} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
}

#[test]
fn profile_pieces() {
    let mut rng = derive_rng(1, "prof");
    let x_img: Array4<f64> = normal_array(&mut rng, &[8, 3, 64, 64]).into_dimensionality().unwrap();
    let w1: Array4<f64> = normal_array(&mut rng, &[16, 3, 3, 3]).into_dimensionality().unwrap();
    let b1 = Array1::zeros(16);

    timeit("im2col 8x3x64x64 k3 s2", || { let _ = im2col_2d(&x_img.view(), 3, 3, 2, 1); });
    timeit("conv2d fwd 3->16 s2 @64", || { let _ = conv2d(&x_img.view(), &w1.view(), Some(&b1), 2, 1); });
    let y = conv2d(&x_img.view(), &w1.view(), Some(&b1), 2, 1);
    timeit("conv2d bwd 3->16 s2 @64", || { let _ = conv2d_backward(&x_img.view(), &w1.view(), &y.view(), 2, 1); });

    let x32: Array4<f64> = normal_array(&mut rng, &[8, 16, 32, 32]).into_dimensionality().unwrap();
    let w2: Array4<f64> = normal_array(&mut rng, &[32, 16, 3, 3]).into_dimensionality().unwrap();
    let b2 = Array1::zeros(32);
    timeit("conv2d fwd 16->32 s2 @32", || { let _ = conv2d(&x32.view(), &w2.view(), Some(&b2), 2, 1); });
    let y2 = conv2d(&x32.view(), &w2.view(), Some(&b2), 2, 1);
    timeit("conv2d bwd 16->32 s2 @32", || { let _ = conv2d_backward(&x32.view(), &w2.view(), &y2.view(), 2, 1); });

    // Temporal conv3d at clip scale.
    let feats: Array4<f64> = normal_array(&mut rng, &[32, 8, 16, 16]).into_dimensionality().unwrap();
    let w3: ndarray::Array5<f64> = normal_array(&mut rng, &[32, 32, 3, 3, 3]).into_dimensionality().unwrap();
    let b3 = Array1::zeros(32);
    timeit("conv3d fwd 32->32 @(8,16,16)", || { let _ = conv3d(&feats.view(), &w3.view(), Some(&b3), (1,1,1)); });
    let y3 = conv3d(&feats.view(), &w3.view(), Some(&b3), (1,1,1));
    timeit("conv3d bwd 32->32 @(8,16,16)", || { let _ = conv3d_backward(&feats.view(), &w3.view(), &y3.view(), (1,1,1)); });

    // Raw dgemm comparison.
    let a: ndarray::Array2<f64> = normal_array(&mut rng, &[864, 2048]).into_dimensionality().unwrap();
    let wmat: ndarray::Array2<f64> = normal_array(&mut rng, &[32, 864]).into_dimensionality().unwrap();
    timeit("dgemm 32x864 * 864x2048", || { let _ = wmat.dot(&a); });

    // GroupNorm fwd+bwd at clip scale.
    let gn_in: Array4<f64> = normal_array(&mut rng, &[8, 32, 16, 16]).into_dimensionality().unwrap();
    timeit("groupnorm fwd+bwd @(8,32,16,16)", || {
        let mut g = Graph::new();
        let x = g.leaf(gn_in.clone().into_dyn(), true);
        let gamma = g.leaf(ndarray::ArrayD::ones(ndarray::IxDyn(&[32])), true);
        let beta = g.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[32])), true);
        let y = g.group_norm(x, gamma, beta, 8, 1e-5);
        let t = g.constant(ndarray::ArrayD::zeros(g.value(y).raw_dim()));
        let loss = g.mse_loss(y, t);
        let _ = g.backward(loss);
    });

    // Upsample fwd at decoder scale.
    let up_in: Array4<f64> = normal_array(&mut rng, &[8, 16, 32, 32]).into_dimensionality().unwrap();
    timeit("upsample2x fwd @(8,16,32,32)", || { let _ = upsample_nearest_2x(&up_in.view()); });

    // Full VAE train step (batch 8 @64).
    let config = ModelConfig::default();
    let mut params = Params::new();
    ildiff_core::latent::init_vae(&mut params, 1, &config);
    timeit("vae graph fwd+bwd batch8 @64", || {
        let mut ctx = GraphCtx::new(&params, &["vae."]);
        let input = ctx.input(x_img.clone().into_dyn());
        let z = ildiff_core::latent::vae_encode_graph(&mut ctx, input);
        let recon = ildiff_core::latent::vae_decode_graph(&mut ctx, z);
        let loss = ctx.graph.mse_loss(recon, input);
        let grads = ctx.graph.backward(loss);
        let _ = ctx.grads_by_name(&grads);
    });
}

#[test]
fn profile_decoder_convs() {
    let mut rng = derive_rng(2, "prof2");
    let config = ModelConfig::default();
    let mut params = Params::new();
    ildiff_core::latent::init_vae(&mut params, 1, &config);

    // Individual decoder convs at batch 8.
    for (label, dims, cin, cout, stride) in [
        ("enc1 3->16 @64 s2", (8usize, 3usize, 64usize, 64usize), 3usize, 16usize, 2usize),
        ("enc2 16->32 @32 s2", (8, 16, 32, 32), 16, 32, 2),
        ("enc3 32->4 @16 s1", (8, 32, 16, 16), 32, 4, 1),
        ("dec1 4->32 @16", (8, 4, 16, 16), 4, 32, 1),
        ("dec2 32->16 @32", (8, 32, 32, 32), 32, 16, 1),
        ("dec3 16->8 @64", (8, 16, 64, 64), 16, 8, 1),
        ("dec4 8->3 @64", (8, 8, 64, 64), 8, 3, 1),
    ] {
        let x: Array4<f64> = normal_array(&mut rng, &[dims.0, dims.1, dims.2, dims.3]).into_dimensionality().unwrap();
        let w: Array4<f64> = normal_array(&mut rng, &[cout, cin, 3, 3]).into_dimensionality().unwrap();
        let b = Array1::zeros(cout);
        let y = conv2d(&x.view(), &w.view(), Some(&b), stride, 1);
        timeit(&format!("{label} fwd"), || { let _ = conv2d(&x.view(), &w.view(), Some(&b), stride, 1); });
        timeit(&format!("{label} bwd"), || { let _ = conv2d_backward(&x.view(), &w.view(), &y.view(), stride, 1); });
    }

    // Graph forward only vs full step.
    let x_img: Array4<f64> = normal_array(&mut rng, &[8, 3, 64, 64]).into_dimensionality().unwrap();
    timeit("vae graph fwd only", || {
        let mut ctx = GraphCtx::new(&params, &["vae."]);
        let input = ctx.input(x_img.clone().into_dyn());
        let z = ildiff_core::latent::vae_encode_graph(&mut ctx, input);
        let recon = ildiff_core::latent::vae_decode_graph(&mut ctx, z);
        let _ = ctx.graph.mse_loss(recon, input);
    });
}
