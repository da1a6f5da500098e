use accent_core::frontend::FeatureMatrix;
use accent_nn::model::build_model_with;
use accent_nn::{build_model, ChannelGate, Classifier, GateKind, ModelConfig, Variant};
use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_features(rng: &mut ChaCha8Rng, frames: usize) -> FeatureMatrix {
    FeatureMatrix {
        values: (0..60 * frames).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        n_bins: 60,
        n_frames: frames,
        frame_hop_sec: 0.01,
    }
}

fn nll(model: &Classifier, x: &Tensor, y: &Tensor) -> Tensor {
    let lp = model.forward_t(x, false).unwrap();
    candle_nn::loss::nll(&lp, y).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Central differences on sampled coordinates; returns the fraction whose
/// relative error is within `tol`.
fn finite_difference_agreement(variant: Variant, samples: usize, tol: f64) -> f64 {
    let mut cfg = ModelConfig::toy(variant);
    cfg.width = vec![8, 16];
    cfg.recurrent_hidden = 6;
    let model = build_model_with(&cfg, 5, DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let feats: Vec<FeatureMatrix> = (0..4).map(|_| random_features(&mut rng, 12)).collect();
    let refs: Vec<&FeatureMatrix> = feats.iter().collect();
    let x = model.batch_tensor(&refs).unwrap();
    let y = Tensor::new(&[0u32, 1, 1, 0], &Device::Cpu).unwrap();

    let loss = nll(&model, &x, &y);
    let grads = loss.backward().unwrap();
    let params = model.parameters();
    let total: usize = params.iter().map(|(_, v)| v.elem_count()).sum();
    let h = 1e-6;
    let mut ok = 0;
    for _ in 0..samples {
        let mut k = rng.gen_range(0..total);
        let (name, var) = params
            .iter()
            .find(|(_, v)| {
                if k < v.elem_count() {
                    true
                } else {
                    k -= v.elem_count();
                    false
                }
            })
            .unwrap();
        let shape = var.shape().clone();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: f64 = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[k])
            .unwrap_or(0.0);
        let eval_at = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
            scalar(&nll(&model, &x, &y))
        };
        let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        if rel <= tol {
            ok += 1;
        } else {
            eprintln!("{name}[{k}]: analytic {analytic:e} numeric {numeric:e}");
        }
    }
    ok as f64 / samples as f64
}

#[test]
fn gradients_match_finite_differences() {
    for v in [Variant::SeRes2net, Variant::MlcgRes2net, Variant::Senet, Variant::SslRecurrent] {
        let frac = finite_difference_agreement(v, 60, 1e-3);
        assert!(frac >= 0.95, "{v:?}: {frac}");
    }
}

fn gate(kind: GateKind, c: usize) -> (ChannelGate, accent_nn::store::SeededVarStore) {
    let store = accent_nn::store::SeededVarStore::new(3);
    let vb: VarBuilder = store.var_builder(DType::F32, &Device::Cpu);
    (ChannelGate::new(kind, c, 2, vb).unwrap(), store)
}

fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

#[test]
fn saturated_gate_is_identity() {
    for kind in [GateKind::Se, GateKind::Scg, GateKind::Mlcg] {
        let (g, _s) = gate(kind, 6);
        g.saturate().unwrap();
        let x = randn((2, 6, 5, 7), 1);
        let ctx = randn((2, 6, 5, 7), 2);
        let y = g.gate_channels(&x, Some(&ctx)).unwrap();
        let a: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b, "{kind:?}");
    }
}

#[test]
fn zero_input_gives_zero_output() {
    for kind in [GateKind::Se, GateKind::Scg, GateKind::Mlcg] {
        let (g, _s) = gate(kind, 4);
        let x = Tensor::zeros((3, 4, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let ctx = randn((3, 4, 2, 2), 5);
        let y = g.gate_channels(&x, Some(&ctx)).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn gate_never_grows_channel_norms() {
    for seed in 0..20 {
        let (g, _s) = gate(GateKind::Se, 8);
        let x = randn((2, 8, 4, 6), seed);
        let m = g.multipliers(&x, None).unwrap().to_vec2::<f32>().unwrap();
        assert!(m.iter().flatten().all(|v| *v > 0.0 && *v < 1.0));
        let y = g.gate_channels(&x, None).unwrap();
        let norms = |t: &Tensor| t.sqr().unwrap().sum((2, 3)).unwrap().sqrt().unwrap().to_vec2::<f32>().unwrap();
        for (a, b) in norms(&x).iter().flatten().zip(norms(&y).iter().flatten()) {
            assert!(b <= a, "{b} > {a}");
        }
    }
}

#[test]
fn stub_encoder_head_shape() {
    let mut cfg = ModelConfig::toy(Variant::SslRecurrent);
    cfg.ssl_dim = 8;
    let m = build_model(&cfg, 0).unwrap();
    assert_eq!(m.config().recurrent_hidden, 192);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f: Vec<FeatureMatrix> = (0..3).map(|_| random_features(&mut rng, 10)).collect();
    let refs: Vec<&FeatureMatrix> = f.iter().collect();
    assert_eq!(m.forward(&refs).unwrap().dims(), &[3, 2]);
}
