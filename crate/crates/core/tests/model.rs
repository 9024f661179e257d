use std::f64::consts::PI;

use lpr_core::model::{
    encode_image, load_checkpoint, param_layout, save_checkpoint, Bound, ModelConfig, ModelParams, OverlapTransformer,
};
use lpr_core::pointcloud::{apply_pose, simulate_scan, Pose, ScanConfig, SyntheticWorld, WorldSpec};
use lpr_core::range_image::{column_shift, project_cloud, ProjectionConfig, RangeImage, SENTINEL};
use lpr_core::tensor::{Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
}

/// Circular shift along `axis` of a rank-2 or rank-3 tensor whose last
/// axis or first axis holds columns: output index `j` takes input `(j - s) mod n`.
fn roll<T: Real>(t: &Tensor<T>, axis: usize, s: usize) -> Tensor<T> {
    let shape = t.shape().to_vec();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = t.clone();
    for o in 0..outer {
        for j in 0..n {
            let src = (j + n - s % n) % n;
            for r in 0..inner {
                out.data_mut()[(o * n + j) * inner + r] = t.data()[(o * n + src) * inner + r];
            }
        }
    }
    out
}

fn max_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
        .fold(0.0, f64::max)
}

fn random_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> RangeImage {
    let pc = ProjectionConfig::new(cfg.w, cfg.h, 15.0, 15.0, 50.0).unwrap();
    let data = (0..cfg.h * cfg.w)
        .map(|_| if rng.random_bool(0.2) { SENTINEL } else { rng.random_range(0.5f32..50.0) })
        .collect();
    RangeImage::from_data(&pc, data).unwrap()
}

/// Replaces every parameter with small random values so no unit sits on a
/// ReLU kink and biases are exercised.
fn jitter<T: Real>(params: &mut ModelParams<T>, rng: &mut ChaCha8Rng) {
    for i in 0..params.len() {
        let t = params.tensor_mut(i);
        for v in t.data_mut() {
            *v = *v + T::lit(rng.random_range(-0.1..0.1));
        }
    }
}

#[test]
fn rie_of_zero_image_is_zero() {
    let model = OverlapTransformer::<f32>::new(ModelConfig::small(), 1).unwrap();
    let out = model.rie_forward(&Tensor::zeros(&[1, 32, 360])).unwrap();
    assert_eq!(out.shape(), &[360, 32]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn rie_is_bit_exactly_shift_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for cfg in [ModelConfig::small(), ModelConfig::tiny()] {
        let mut model = OverlapTransformer::<f32>::new(cfg.clone(), 3).unwrap();
        jitter(&mut model.params, &mut rng);
        let x: Tensor<f32> = random_tensor(&[1, cfg.h, cfg.w], &mut rng, 0.0, 1.0);
        let base = model.rie_forward(&x).unwrap();
        assert_eq!(base.shape(), &[cfg.w, cfg.d_model]);
        for _ in 0..10 {
            let s = rng.random_range(0..cfg.w);
            let shifted = model.rie_forward(&roll(&x, 2, s)).unwrap();
            assert_eq!(shifted, roll(&base, 0, s), "shift {s}");
        }
    }
}

#[test]
fn single_column_attention_is_the_value_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    jitter(&mut params, &mut rng);
    let c = cfg.d_model;
    let f: Tensor<f64> = random_tensor(&[1, c], &mut rng, -1.0, 1.0);

    let tape = Tape::<f64>::inference();
    let bound = Bound::new(&tape, &cfg, &params);
    let a = bound.attention(0, tape.constant(f.clone())).unwrap().value();

    let affine = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        (0..d_out)
            .map(|j| b.data()[j] + (0..d_in).map(|i| x[i] * w.data()[i * d_out + j]).sum::<f64>())
            .collect()
    };
    let p = |n: &str| params.get(n).unwrap();
    let v = affine(f.data(), p("tm.0.attn.value.weight"), p("tm.0.attn.value.bias"));
    let expected = affine(&v, p("tm.0.attn.out.weight"), p("tm.0.attn.out.bias"));
    for (got, want) in a.data().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn tm_is_shift_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for blocks in [1, 2] {
        let mut cfg = ModelConfig::small();
        cfg.num_tm_blocks = blocks;
        let mut model = OverlapTransformer::<f32>::new(cfg.clone(), 7).unwrap();
        jitter(&mut model.params, &mut rng);
        let f: Tensor<f32> = random_tensor(&[cfg.w, cfg.d_model], &mut rng, -1.0, 1.0);
        let base = model.tm_forward(&f).unwrap();
        for _ in 0..5 {
            let s = rng.random_range(0..cfg.w);
            let err = max_abs_diff(&model.tm_forward(&roll(&f, 0, s)).unwrap(), &roll(&base, 0, s));
            assert!(err < 1e-5, "blocks {blocks}, shift {s}: {err:e}");
        }
    }
}

#[test]
fn tm_output_rows_are_layer_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = ModelConfig::small();
    let mut params = ModelParams::<f32>::init(&cfg, 9).unwrap();
    let bias: Vec<f32> = (0..2 * cfg.d_model).map(|_| rng.random_range(-0.5..0.5)).collect();
    params.get_mut("tm.0.ln_b.bias").unwrap().data_mut().copy_from_slice(&bias);
    let bias_mean = bias.iter().map(|&b| f64::from(b)).sum::<f64>() / bias.len() as f64;

    let tape = Tape::<f32>::inference();
    let bound = Bound::new(&tape, &cfg, &params);
    let f = tape.constant(random_tensor::<f32>(&[cfg.w, cfg.d_model], &mut rng, -2.0, 2.0));
    let s = bound.tm_block_s(0, f).unwrap().value();
    assert_eq!(s.shape(), &[cfg.w, 2 * cfg.d_model]);
    for row in s.data().chunks(2 * cfg.d_model) {
        assert!(row.iter().all(|v| v.is_finite()));
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / row.len() as f64;
        assert!((mean - bias_mean).abs() < 1e-4, "{mean} vs {bias_mean}");
    }
}

#[test]
fn gdg_ignores_column_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = ModelConfig::small();
    let model = OverlapTransformer::<f32>::new(cfg.clone(), 11).unwrap();
    let s: Tensor<f32> = random_tensor(&[cfg.w, cfg.d_model], &mut rng, -1.0, 1.0);
    let base = model.gdg_forward(&s).unwrap();
    assert_eq!(base.shape(), &[cfg.d_output]);

    let mut perm: Vec<usize> = (0..cfg.w).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let c = cfg.d_model;
    let permuted = Tensor::from_fn(&[cfg.w, c], |i| s.data()[perm[i / c] * c + i % c]);
    assert!(max_abs_diff(&model.gdg_forward(&permuted).unwrap(), &base) < 1e-5);
    for sh in [1, 90, 359] {
        assert!(max_abs_diff(&model.gdg_forward(&roll(&s, 0, sh)).unwrap(), &base) < 1e-5);
    }
}

#[test]
fn columns_on_a_cluster_center_give_zero_residuals() {
    let cfg = ModelConfig::tiny();
    let mut model = OverlapTransformer::<f32>::new(cfg.clone(), 12).unwrap();
    let (c, k) = (cfg.d_model, cfg.k_clusters);
    // A basis vector is its own normalization and sums of copies are exact.
    let center: Vec<f32> = (0..c).map(|i| if i == 3 { 1.0 } else { 0.0 }).collect();
    let p = &mut model.params;
    p.get_mut("gdg.centers").unwrap().data_mut()[..c].copy_from_slice(&center);
    p.get_mut("gdg.assign.weight").unwrap().data_mut().fill(0.0);
    let bias = p.get_mut("gdg.assign.bias").unwrap().data_mut();
    bias.fill(-200.0);
    bias[0] = 200.0;

    let s = Tensor::from_fn(&[cfg.w, c], |i| center[i % c]);
    let tape = Tape::<f32>::inference();
    let bound = Bound::new(&tape, &cfg, &model.params);
    let vlad = bound.netvlad(tape.constant(s.clone())).unwrap().value();
    assert_eq!(vlad.shape(), &[1, k * c]);
    assert!(vlad.data().iter().all(|&v| v == 0.0));

    let d = model.gdg_forward(&s).unwrap();
    assert!(d.all_finite());
    // MLP image of the zero vector: relu(b0) W1 + b1, normalized.
    let zero = Tensor::<f32>::zeros(&[1, k * c]);
    let t2 = Tape::<f32>::inference();
    let w0 = t2.constant(model.params.get("gdg.mlp.0.weight").unwrap().clone());
    let b0 = t2.constant(model.params.get("gdg.mlp.0.bias").unwrap().clone());
    let w1 = t2.constant(model.params.get("gdg.mlp.1.weight").unwrap().clone());
    let b1 = t2.constant(model.params.get("gdg.mlp.1.bias").unwrap().clone());
    let h = t2.constant(zero).matmul(w0).unwrap().add_along(b0, 1).unwrap().relu();
    let out = h.matmul(w1).unwrap().add_along(b1, 1).unwrap().l2_normalize(1, 1e-10).unwrap();
    assert_eq!(out.value().data(), d.data());
}

#[test]
fn descriptor_is_invariant_to_column_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = ModelConfig::small();
    let mut model = OverlapTransformer::<f32>::new(cfg.clone(), 14).unwrap();
    jitter(&mut model.params, &mut rng);
    let img = random_image(&cfg, &mut rng);
    let base = model.descriptor(&img).unwrap();
    assert!((base.norm() - 1.0).abs() < 1e-5);
    for _ in 0..20 {
        let s = rng.random_range(0..cfg.w as i64);
        let d = model.descriptor(&column_shift(&img, s)).unwrap();
        assert!(d.distance(&base) < 1e-4, "shift {s}: {}", d.distance(&base));
        let max = d.values.iter().zip(&base.values).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max < 1e-5, "shift {s}: {max:e}");
    }
}

#[test]
fn descriptor_is_invariant_to_sensor_yaw() {
    let cfg = ModelConfig::small();
    let model = OverlapTransformer::<f32>::new(cfg.clone(), 15).unwrap();
    let world = SyntheticWorld::generate(&WorldSpec::default()).unwrap();
    let scan_cfg = ScanConfig::new(cfg.h, cfg.w, 15.0, 15.0, 50.0);
    let proj = ProjectionConfig::from(&scan_cfg);
    let cloud = simulate_scan(&world, &Pose::from_yaw_translation(0.0, [80.0, 0.0, 1.8]), &scan_cfg).unwrap();
    let img = project_cloud(&cloud, &proj).unwrap();
    let base = model.descriptor(&img).unwrap();
    for k in [1usize, 45, 90, 180, 300] {
        let theta = 2.0 * PI * k as f64 / cfg.w as f64;
        let rotated = project_cloud(&apply_pose(&cloud, &Pose::yaw_rotation(theta)), &proj).unwrap();
        let d = model.descriptor(&rotated).unwrap();
        let max = d.values.iter().zip(&base.values).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max < 1e-4, "k={k}: {max:e}");
    }
}

#[test]
fn published_dimensions_give_unit_256_descriptors() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for cfg in [ModelConfig::full(), ModelConfig::desk()] {
        let model = OverlapTransformer::<f32>::new(cfg.clone(), 17).unwrap();
        let d = model.descriptor(&random_image(&cfg, &mut rng)).unwrap();
        assert_eq!(d.dim(), 256);
        assert!((d.norm() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn wrong_image_size_is_rejected() {
    let model = OverlapTransformer::<f32>::new(ModelConfig::tiny(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = random_image(&ModelConfig::small(), &mut rng);
    assert!(model.descriptor(&img).is_err());
}

/// `sum(descriptor * r)` and its gradient for every parameter, in `f64`.
fn objective(cfg: &ModelConfig, params: &ModelParams<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let tape = Tape::<f64>::inference();
    let bound = Bound::new(&tape, cfg, params);
    let d = bound.forward(tape.constant(x.clone())).unwrap();
    d.mul(tape.constant(r.clone())).unwrap().sum_all().item().unwrap()
}

/// Worst per-tensor relative error `max |analytic - numeric| / max |analytic|`
/// of central differences with step `step`, on the tiny configuration.
///
/// ReLU makes the objective piecewise smooth. An element whose stencil
/// straddles a kink gives different central differences at `step` and
/// `step / 2`; such elements are excluded (at most 1% of all parameters).
/// A wrong analytic gradient still fails, since it disagrees with two
/// mutually consistent estimates.
fn gradient_check(step: f64, tol: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut cfg = ModelConfig::tiny();
    cfg.num_tm_blocks = 2;
    let mut params = ModelParams::<f64>::init(&cfg, 19).unwrap();
    jitter(&mut params, &mut rng);
    let x: Tensor<f64> = random_tensor(&[1, cfg.h, cfg.w], &mut rng, 0.05, 1.0);
    let r: Tensor<f64> = random_tensor(&[cfg.d_output], &mut rng, -1.0, 1.0);

    let tape = Tape::<f64>::new();
    let bound = Bound::new(&tape, &cfg, &params);
    let loss = bound
        .forward(tape.constant(x.clone()))
        .unwrap()
        .mul(tape.constant(r.clone()))
        .unwrap()
        .sum_all();
    let grads = loss.backward().unwrap();
    let analytic: Vec<Tensor<f64>> = bound.vars().iter().map(|v| grads.get(v).unwrap().clone()).collect();
    drop(bound);

    let names = params.names().to_vec();
    let total = params.numel();
    let mut central = |p: usize, i: usize, h: f64| {
        let orig = params.tensors()[p].data()[i];
        params.tensor_mut(p).data_mut()[i] = orig + h;
        let plus = objective(&cfg, &params, &x, &r);
        params.tensor_mut(p).data_mut()[i] = orig - h;
        let minus = objective(&cfg, &params, &x, &r);
        params.tensor_mut(p).data_mut()[i] = orig;
        (plus - minus) / (2.0 * h)
    };

    let mut excluded = 0usize;
    let mut worst = 0.0f64;
    for (p, name) in names.iter().enumerate() {
        let a = analytic[p].data();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if name.ends_with("attn.key.bias") {
            // Softmax ignores a constant added to every score of a row, so
            // the key bias has no effect on the output.
            for i in 0..a.len() {
                assert!(central(p, i, step).abs() < 1e-8 && a[i].abs() < 1e-8, "{name}[{i}]");
            }
            continue;
        }
        assert!(scale > 1e-6, "{name}: vanishing gradient {scale:e}");
        let mut abs_err = 0.0f64;
        for (i, &ai) in a.iter().enumerate() {
            let d_full = central(p, i, step);
            let d_half = central(p, i, step / 2.0);
            if (d_full - d_half).abs() > 0.5 * tol * scale {
                excluded += 1;
                continue;
            }
            abs_err = abs_err.max((ai - d_full).abs());
        }
        worst = worst.max(abs_err / scale);
    }
    assert!(
        excluded * 100 <= total,
        "{excluded} of {total} elements straddle a kink"
    );
    worst
}

#[test]
fn full_model_gradients_match_finite_differences_tightly() {
    let err = gradient_check(1e-5, 1e-6);
    assert!(err < 1e-6, "worst per-tensor relative error {err:e}");
}

#[test]
fn full_model_gradients_match_coarse_finite_differences() {
    let err = gradient_check(1e-3, 1e-4);
    assert!(err < 1e-4, "worst per-tensor relative error {err:e}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lprw");
    let mut cfg = ModelConfig::tiny();
    cfg.num_tm_blocks = 2;
    let model = OverlapTransformer::<f32>::new(cfg.clone(), 20).unwrap();
    save_checkpoint(&path, &cfg, &model.params).unwrap();
    let (cfg2, params2) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(params2.names(), model.params.names());
    for (a, b) in params2.tensors().iter().zip(model.params.tensors()) {
        assert_eq!(a, b);
    }
    assert_eq!(param_layout(&cfg).len(), params2.len());

    // A sidecar that disagrees with the weights is rejected.
    let other = ModelConfig::small();
    std::fs::write(lpr_core::model::sidecar_path(&path), other.to_sidecar()).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn encoding_scales_valid_pixels_and_zeroes_invalid_ones() {
    let pc = ProjectionConfig::new(2, 1, 10.0, 10.0, 40.0).unwrap();
    let img = RangeImage::from_data(&pc, vec![20.0, SENTINEL]).unwrap();
    let t = encode_image::<f32>(&img);
    assert_eq!(t.shape(), &[1, 1, 2]);
    assert_eq!(t.data(), &[0.5, 0.0]);
}

#[test]
fn zero_blocks_make_the_transformer_an_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cfg = ModelConfig::tiny();
    cfg.num_tm_blocks = 0;
    let model = OverlapTransformer::<f32>::new(cfg.clone(), 22).unwrap();
    let f: Tensor<f32> = random_tensor(&[cfg.w, cfg.d_model], &mut rng, -1.0, 1.0);
    assert_eq!(model.tm_forward(&f).unwrap(), f);
}
