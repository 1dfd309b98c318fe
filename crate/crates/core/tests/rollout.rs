use mret::model::{predict, ForwardTrace, ModelConfig, ModelParams, PredictOptions};
use mret::numerics::Tensor;
use mret::rollout::{residual_correct, rollout_matrix, spatial_heatmap, temporal_profile};
use mret::videoio::{synth_video, Distortion, Pattern, SynthSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softmax_rows(logits: &[Vec<f64>]) -> Tensor<f64> {
    let s = logits.len();
    let mut data = Vec::with_capacity(s * s);
    for row in logits {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|l| (l - max).exp()).sum();
        data.extend(row.iter().map(|l| (l - max).exp() / total));
    }
    Tensor::new(vec![s, s], data).unwrap()
}

fn random_stochastic(s: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let logits: Vec<Vec<f64>> = (0..s).map(|_| (0..s).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    softmax_rows(&logits)
}

fn naive_product(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = a.shape()[0];
    Tensor::from_fn(&[s, s], |idx| {
        let (i, j) = (idx / s, idx % s);
        (0..s).map(|k| a.at2(i, k) * b.at2(k, j)).sum()
    })
}

fn trace_with(spatial: Vec<Vec<Tensor<f64>>>, temporal: Vec<Vec<Tensor<f64>>>, tokens: usize, groups: usize) -> ForwardTrace {
    ForwardTrace {
        spatial_attention: vec![spatial],
        temporal_attention: temporal,
        attention_retained: true,
        tokens,
        groups,
        ..ForwardTrace::default()
    }
}

#[test]
fn two_layers_match_explicit_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random_stochastic(6, &mut rng), random_stochastic(6, &mut rng));
    let expected = naive_product(&residual_correct(&b).unwrap(), &residual_correct(&a).unwrap());
    let got = rollout_matrix(&[a.clone(), b.clone()], true, 6).unwrap();
    assert!(got.max_abs_diff(&expected) < 1e-14);
    let raw = rollout_matrix(&[a.clone(), b.clone()], false, 6).unwrap();
    assert!(raw.max_abs_diff(&naive_product(&b, &a)) < 1e-14);
}

#[test]
fn composition_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layers: Vec<Tensor<f64>> = (0..5).map(|_| random_stochastic(4, &mut rng)).collect();
    let full = rollout_matrix(&layers, true, 4).unwrap();
    let head = rollout_matrix(&layers[..3], true, 4).unwrap();
    let tail = rollout_matrix(&layers[3..], true, 4).unwrap();
    assert!(full.max_abs_diff(&naive_product(&tail, &head)) < 1e-14);
}

#[test]
fn identity_attention_gives_uniform_map() {
    let eye = Tensor::from_fn(&[5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
    let trace = trace_with(vec![vec![eye.clone()], vec![eye]], Vec::new(), 4, 1);
    let map = spatial_heatmap(&trace, 0, true).unwrap();
    assert_eq!(map.values, vec![0.25; 4]);
}

#[test]
fn dominant_token_wins() {
    let s = 10;
    for target in 1..s {
        let logits: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..s).map(|j| if j == target { 12.0 } else { 0.3 * j as f64 }).collect())
            .collect();
        let layer = softmax_rows(&logits);
        let heads = vec![layer.clone(), layer];
        let trace = trace_with(vec![heads.clone(), heads.clone(), heads], Vec::new(), 9, 1);
        for residual in [true, false] {
            let map = spatial_heatmap(&trace, 0, residual).unwrap();
            assert_eq!(map.argmax(), ((target - 1) / 3, (target - 1) % 3));
        }

        // shifted logits give the same maps
        let shifted: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|l| l + 40.0).collect()).collect();
        let layer = softmax_rows(&shifted);
        let trace2 = trace_with(vec![vec![layer.clone(), layer]], Vec::new(), 9, 1);
        let map = spatial_heatmap(&trace2, 0, true).unwrap();
        assert_eq!(map.argmax(), ((target - 1) / 3, (target - 1) % 3));
    }
}

#[test]
fn temporal_profiles() {
    let one = Tensor::full(&[2, 2], 0.5);
    let trace = trace_with(Vec::new(), vec![vec![one]], 4, 1);
    assert_eq!(temporal_profile(&trace, true).unwrap(), vec![1.0]);

    let t = 4;
    let uniform = Tensor::full(&[t + 1, t + 1], 1.0 / (t + 1) as f64);
    let trace = trace_with(Vec::new(), vec![vec![uniform.clone()]; 3], 4, t);
    for v in temporal_profile(&trace, true).unwrap() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn maps_from_random_models_sum_to_one() {
    let mut cfg = ModelConfig::tiny();
    cfg.multires.grid_size = 4;
    cfg.multires.patch_size = 2;
    let params = ModelParams::<f32>::init_random(&cfg, 4).unwrap();
    let spec = SynthSpec {
        pattern: Pattern::Checker,
        distortion: Distortion::GaussianBlur,
        severity: 0.4,
        frames: 4,
        height: 16,
        width: 20,
    };
    let video = synth_video(&spec, 3).unwrap();
    let opts = PredictOptions {
        retain_attention: true,
        ..PredictOptions::default()
    };
    let pred = predict(&video, &params, &opts).unwrap();
    for g in 0..2 {
        let map = spatial_heatmap(&pred.trace, g, true).unwrap();
        assert_eq!(map.values.len(), 16);
        assert!((map.values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(map.values.iter().all(|&v| v >= 0.0));
    }
    assert!(spatial_heatmap(&pred.trace, 2, true).is_err());
    let profile = temporal_profile(&pred.trace, false).unwrap();
    assert_eq!(profile.len(), 2);
    assert!((profile.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn deep_rollout_stays_stochastic(seed in any::<u64>(), s in 2usize..12, layers in 12usize..20, residual in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ls: Vec<Tensor<f64>> = (0..layers).map(|_| random_stochastic(s, &mut rng)).collect();
        let r = rollout_matrix(&ls, residual, s).unwrap();
        for i in 0..s {
            let sum: f64 = r.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(r.row(i).iter().all(|&v| v >= 0.0));
        }
    }
}
