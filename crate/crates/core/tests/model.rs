mod common;

use mret::model::{
    count_flops, count_macs, count_params, embed_group, init_central_frame, predict, spatial_encode, temporal_encode,
    Graph, ModelConfig, ModelParams, PredictOptions,
};
use mret::multires::{clip_tubes, CenterMode, ClipOptions, MultiResConfig, SamplingMode, TubeBatch};
use mret::numerics::{relative_error, Tensor};
use mret::videoio::{synth_video, Distortion, FrameSequence, FrameStrategy, Pattern, SynthSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Parameters with every tensor (biases, gains, tokens included) drawn at
/// a scale where all paths contribute.
fn randomized(cfg: &ModelConfig, seed: u64, std: f64) -> ModelParams<f64> {
    let base = ModelParams::<f64>::init_random(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let normal = Normal::new(0.0, std).unwrap();
    let tensors = base
        .tensors()
        .iter()
        .map(|(n, t)| {
            let offset = if n.ends_with("gamma") { 1.0 } else { 0.0 };
            (n.clone(), Tensor::from_fn(t.shape(), |_| offset + normal.sample(&mut rng)))
        })
        .collect();
    ModelParams::from_tensors(cfg.clone(), tensors).unwrap()
}

fn video(severity: f64, seed: u64, frames: usize) -> FrameSequence {
    let spec = SynthSpec {
        pattern: Pattern::MovingDisc,
        distortion: Distortion::AdditiveNoise,
        severity,
        frames,
        height: 16,
        width: 24,
    };
    synth_video(&spec, seed).unwrap()
}

fn tubes_for(cfg: &ModelConfig, seq: &FrameSequence) -> Vec<TubeBatch> {
    let opts = ClipOptions {
        frames: cfg.clip_frames(),
        strategy: FrameStrategy::Uniform,
        mode: SamplingMode::Mret,
    };
    clip_tubes(seq, &cfg.multires, &opts, CenterMode::Infer, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap()
        .groups
}

fn hand_config() -> ModelConfig {
    ModelConfig {
        dim: 2,
        spatial_layers: 1,
        temporal_layers: 1,
        heads: 1,
        mlp_dim: 4,
        groups: 2,
        head_hidden: None,
        multires: MultiResConfig {
            scales: 1,
            largest_side: 2,
            patch_size: 1,
            grid_size: 2,
        },
        output_scale: 1.0,
        input_norm: None,
    }
}

#[test]
fn hand_tally_counts() {
    let cfg = hand_config();
    // embed 8, spatial 70, temporal 66, head 9
    assert_eq!(count_params(&cfg), 153);
    // two groups of (embed 24 + spatial 282), temporal 146, head 6
    assert_eq!(count_macs(&cfg, 2), 764.0);
    assert_eq!(count_flops(&cfg, 2), 1528.0);
}

#[test]
fn full_parameter_count_in_range() {
    let p = count_params(&ModelConfig::default()) as f64;
    assert!((139.7e6..=148.3e6).contains(&p), "{p}");
}

#[test]
fn reference_forward_matches() {
    let cfg = ModelConfig::tiny();
    let params = randomized(&cfg, 1, 0.3);
    let seq = video(0.3, 2, 4);
    let groups = tubes_for(&cfg, &seq);
    let reference = common::forward(&params, &groups);
    let got = predict(&seq, &params, &PredictOptions::default()).unwrap().score;
    assert!((got - reference).abs() < 1e-6, "{got} vs {reference}");
}

#[test]
fn zero_inputs_give_zero_tokens() {
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::<f64>::init_random(&cfg, 0).unwrap();
    *params.get_mut("spatial.pos").unwrap() = Tensor::zeros(&[5, 8]);
    let tubes = TubeBatch {
        grid: 2,
        scales: 2,
        patch: 4,
        data: vec![0.0; 4 * 96],
        boxes: Vec::new(),
        center: 0.5,
    };
    let z = embed_group(&tubes, &params).unwrap();
    assert_eq!(z.shape(), &[5, 8]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn sequence_length_for_full_grid() {
    let mr = MultiResConfig::default();
    assert_eq!(mr.tokens() + 1, 197);
}

#[test]
fn central_init_ignores_other_scales() {
    let cfg = ModelConfig::tiny();
    let mut params = randomized(&cfg, 3, 0.3);
    let e_image = Tensor::<f64>::from_fn(&[8, 48], |i| ((i * 7) % 13) as f64 * 0.1 - 0.6);
    params.set_image_embedding(&e_image).unwrap();
    *params.get_mut("embed.bias").unwrap() = Tensor::zeros(&[8]);
    *params.get_mut("spatial.pos").unwrap() = Tensor::zeros(&[5, 8]);
    *params.get_mut("spatial.cls").unwrap() = Tensor::zeros(&[8]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data: Vec<f32> = (0..4 * 96).map(|_| rng.gen()).collect();
    let tubes = |data: Vec<f32>| TubeBatch {
        grid: 2,
        scales: 2,
        patch: 4,
        data,
        boxes: Vec::new(),
        center: 0.5,
    };
    let a = embed_group(&tubes(data.clone()), &params).unwrap();
    for k in 0..4 {
        for v in &mut data[k * 96..k * 96 + 48] {
            *v = 0.5;
        }
    }
    let b = embed_group(&tubes(data.clone()), &params).unwrap();
    assert_eq!(a, b);
    // token = 2-D projection of the centre-scale patch
    for k in 0..4 {
        let patch = &data[k * 96 + 48..(k + 1) * 96];
        for o in 0..8 {
            let mut acc = 0.0;
            for (j, &x) in patch.iter().enumerate() {
                acc += x as f64 * e_image.row(o)[j];
            }
            assert!((b.at2(k + 1, o) - acc).abs() < 1e-12);
        }
    }
    assert_eq!(init_central_frame(&e_image, 2).unwrap().shape(), &[8, 96]);
}

#[test]
fn zero_blocks_reduce_to_normalized_input() {
    let cfg = ModelConfig::tiny();
    let mut params = randomized(&cfg, 4, 0.3);
    for k in 0..cfg.spatial_layers {
        for n in ["attn.wo", "attn.bo", "mlp.w2", "mlp.b2"] {
            let t = params.get_mut(&format!("spatial.layers.{k}.{n}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }
    *params.get_mut("spatial.ln.gamma").unwrap() = Tensor::full(&[8], 1.0);
    *params.get_mut("spatial.ln.beta").unwrap() = Tensor::zeros(&[8]);
    let z0 = Tensor::<f64>::from_fn(&[5, 8], |i| (i as f64 * 0.37).sin());
    let h = spatial_encode(&z0, &params).unwrap();
    let row = z0.row(0);
    let mean = row.iter().sum::<f64>() / 8.0;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
    for (i, &v) in h.data().iter().enumerate() {
        assert!((v - (row[i] - mean) / (var + 1e-6).sqrt()).abs() < 1e-12);
    }

    let mut no_layers = cfg.clone();
    no_layers.spatial_layers = 0;
    let p0 = ModelParams::<f64>::init_random(&no_layers, 0).unwrap();
    let h0 = spatial_encode(&z0, &p0).unwrap();
    assert!(h0.max_abs_diff(&h) < 1e-12);
}

#[test]
fn zero_head_output_scores_zero() {
    let cfg = ModelConfig::tiny();
    let mut params = randomized(&cfg, 5, 0.3);
    *params.get_mut("head.w2").unwrap() = Tensor::zeros(&[1, 8]);
    *params.get_mut("head.b2").unwrap() = Tensor::zeros(&[1]);
    for s in [0.0, 0.5, 1.0] {
        assert_eq!(predict(&video(s, 1, 4), &params, &PredictOptions::default()).unwrap().score, 0.0);
    }
}

#[test]
fn uniform_temporal_attention_for_identical_steps() {
    let cfg = ModelConfig::tiny();
    let mut params = randomized(&cfg, 6, 0.3);
    *params.get_mut("temporal.pos").unwrap() = Tensor::zeros(&[3, 8]);
    let h = Tensor::<f64>::from_fn(&[1, 8], |i| i as f64 * 0.1);
    *params.get_mut("temporal.cls").unwrap() = Tensor::new(vec![8], h.data().to_vec()).unwrap();
    let mut g = Graph::new(&params, false, true);
    let vars: Vec<_> = (0..2).map(|_| g.tape.constant(h.clone())).collect();
    g.temporal_encode(&vars).unwrap();
    for head in &g.trace.temporal_attention[0] {
        assert!(head.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let cfg = ModelConfig::tiny();
    let params = randomized(&cfg, 7, 0.5);
    let pred = predict(
        &video(0.4, 3, 4),
        &params,
        &PredictOptions {
            retain_attention: true,
            ..PredictOptions::default()
        },
    )
    .unwrap();
    let t = &pred.trace;
    assert_eq!(t.spatial_attention.len(), 2);
    assert_eq!(t.temporal_attention.len(), cfg.temporal_layers);
    let maps = t.spatial_attention.iter().flatten().flatten().chain(t.temporal_attention.iter().flatten());
    for m in maps {
        let (r, c) = m.dims2().unwrap();
        for i in 0..r {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(r, c);
    }
}

#[test]
fn predict_is_deterministic_and_respects_frames() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f32>::init_random(&cfg, 8).unwrap();
    let seq = video(0.5, 4, 10);
    let a = predict(&seq, &params, &PredictOptions::default()).unwrap();
    let b = predict(&seq, &params, &PredictOptions::default()).unwrap();
    assert_eq!(a.score.to_bits(), b.score.to_bits());
    let short = PredictOptions {
        frames: Some(2),
        ..PredictOptions::default()
    };
    let c = predict(&seq, &params, &short).unwrap();
    assert_eq!((c.trace.frames, c.trace.groups), (2, 1));
    let long = PredictOptions {
        frames: Some(6),
        ..PredictOptions::default()
    };
    assert!(predict(&seq, &params, &long).is_err());
}

#[test]
fn counted_params_match_allocation_for_small_configs() {
    for (d, heads, k, q, g, n, p, t) in [(8, 2, 2, 1, 2, 2, 4, 2), (12, 3, 0, 2, 3, 1, 2, 5), (6, 1, 1, 0, 1, 3, 1, 1)] {
        let cfg = ModelConfig {
            dim: d,
            spatial_layers: k,
            temporal_layers: q,
            heads,
            mlp_dim: 2 * d + 1,
            groups: t,
            head_hidden: Some(d + 3),
            multires: MultiResConfig {
                scales: n,
                largest_side: n * g * p,
                patch_size: p,
                grid_size: g,
            },
            output_scale: 1.0,
            input_norm: None,
        };
        let params = ModelParams::<f32>::init_random(&cfg, 0).unwrap();
        assert_eq!(count_params(&cfg), params.scalar_count() as u64);
    }
}

#[test]
fn gradients_match_finite_differences_on_sampled_entries() {
    let cfg = ModelConfig::tiny();
    let params = randomized(&cfg, 11, 0.3);
    let seq = video(0.6, 5, 4);
    let groups = tubes_for(&cfg, &seq);
    let clip = mret::multires::ClipTubes {
        groups: groups.clone(),
        center: mret::multires::realize_center(
            &mret::multires::build_pyramid(&[&seq.frames()[0], &seq.frames()[1]], &cfg.multires).unwrap(),
            2,
            0.5,
        ),
        frames: 4,
    };
    // small residual keeps the loss, and so its rounding noise, small
    let target = common::forward(&params, &groups) + 0.03;
    let loss = |p: &ModelParams<f64>| (common::forward(p, &groups) - target).powi(2);

    let mut g = Graph::new(&params, true, false);
    let out = g.clip(&clip).unwrap();
    let t = g.tape.constant(Tensor::new(vec![1, 1], vec![target]).unwrap());
    let diff = g.tape.sub(out, t).unwrap();
    let sq = g.tape.mul(diff, diff).unwrap();
    let l = g.tape.sum(sq).unwrap();
    let grads = g.tape.backward(l).unwrap();
    let vars = g.param_vars().to_vec();

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, (name, t)) in params.tensors().iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        for j in [0, t.len() / 2, t.len() - 1] {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize], offset: usize) -> Tensor<f64> {
    let (r, c) = t.dims2().unwrap();
    let mut rows: Vec<Vec<f64>> = (0..r).map(|i| t.row(i).to_vec()).collect();
    let orig = rows.clone();
    for (k, &p) in perm.iter().enumerate() {
        rows[offset + k] = orig[offset + p].clone();
    }
    Tensor::new(vec![r, c], rows.concat()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spatial_permutation_invariance(seed in any::<u64>(), perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle()) {
        let cfg = ModelConfig::tiny();
        let params = randomized(&cfg, seed, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..4 * 96).map(|_| rng.gen()).collect();
        let tubes = TubeBatch { grid: 2, scales: 2, patch: 4, data: data.clone(), boxes: Vec::new(), center: 0.5 };
        let h = spatial_encode(&embed_group(&tubes, &params).unwrap(), &params).unwrap();

        let mut permuted = params.clone();
        let pos = params.get("spatial.pos").unwrap().clone();
        *permuted.get_mut("spatial.pos").unwrap() = permute_rows(&pos, &perm, 1);
        let pdata: Vec<f32> = perm.iter().flat_map(|&k| data[k * 96..(k + 1) * 96].to_vec()).collect();
        let ptubes = TubeBatch { data: pdata, ..tubes };
        let hp = spatial_encode(&embed_group(&ptubes, &permuted).unwrap(), &permuted).unwrap();
        prop_assert!(h.max_abs_diff(&hp) < 1e-6);
    }

    #[test]
    fn temporal_order_carried_by_position(seed in any::<u64>()) {
        let mut cfg = ModelConfig::tiny();
        cfg.groups = 3;
        let params = randomized(&cfg, seed, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[1, 8], |_| rng.gen_range(-1.0..1.0))).collect();
        let v = temporal_encode(&hs, &params).unwrap();

        let perm = [2usize, 0, 1];
        let shuffled: Vec<Tensor<f64>> = perm.iter().map(|&i| hs[i].clone()).collect();
        let mut moved = params.clone();
        let pos = params.get("temporal.pos").unwrap().clone();
        *moved.get_mut("temporal.pos").unwrap() = permute_rows(&pos, &perm, 1);
        let vp = temporal_encode(&shuffled, &moved).unwrap();
        prop_assert!(v.max_abs_diff(&vp) < 1e-6);

        let adversarial = [hs[1].clone(), hs[0].clone(), hs[2].clone()];
        let va = temporal_encode(&adversarial, &params).unwrap();
        prop_assert!(v.max_abs_diff(&va) > 1e-6);
    }

    #[test]
    fn single_group_is_deterministic(seed in any::<u64>()) {
        let mut cfg = ModelConfig::tiny();
        cfg.groups = 1;
        let params = randomized(&cfg, seed, 0.3);
        let h = Tensor::<f64>::from_fn(&[1, 8], |i| i as f64 * 0.2 - 0.5);
        let a = temporal_encode(std::slice::from_ref(&h), &params).unwrap();
        let b = temporal_encode(&[h], &params).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn reference_embedding_matches_on_random_tubes() {
    let cfg = ModelConfig::tiny();
    let params = randomized(&cfg, 12, 0.3);
    let seq = video(0.1, 6, 4);
    for g in tubes_for(&cfg, &seq) {
        let z = embed_group(&g, &params).unwrap();
        let r = common::embed(&params, &g);
        for (i, row) in r.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((z.at2(i, j) - v).abs() < 1e-12);
            }
        }
        let h = spatial_encode(&z, &params).unwrap();
        let (rh, _) = common::encoder(&params, r, "spatial", cfg.spatial_layers);
        for (a, b) in h.data().iter().zip(&rh) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn ablation_modes_produce_finite_scores() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f32>::init_random(&cfg, 2).unwrap();
    let seq = video(0.3, 7, 9);
    for mode in [SamplingMode::Mret, SamplingMode::Random, SamplingMode::HighresLast, SamplingMode::Fixed] {
        for strategy in [FrameStrategy::Uniform, FrameStrategy::Front, FrameStrategy::Center] {
            let opts = PredictOptions {
                mode,
                strategy,
                ..PredictOptions::default()
            };
            assert!(predict(&seq, &params, &opts).unwrap().score.is_finite());
        }
    }
}

#[test]
fn input_norm_matches_prenormalized_tubes() {
    let norm = mret::videoio::ChannelNorm {
        mean: [0.5, 0.25, 0.125],
        std: [0.25, 0.5, 2.0],
    };
    let plain = ModelConfig::tiny();
    let normed = ModelConfig {
        input_norm: Some(norm),
        ..plain.clone()
    };
    let params = randomized(&plain, 6, 0.3);
    let with_norm = ModelParams::from_tensors(normed.clone(), params.tensors().to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw: Vec<f32> = (0..4 * 96).map(|_| rng.gen_range(0u8..=255) as f32 / 256.0).collect();
    let tubes = |data: Vec<f32>| TubeBatch {
        grid: 2,
        scales: 2,
        patch: 4,
        data,
        boxes: Vec::new(),
        center: 0.5,
    };
    let pre: Vec<f32> = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| ((v as f64 - norm.mean[i % 3]) / norm.std[i % 3]) as f32)
        .collect();
    let a = embed_group(&tubes(raw), &with_norm).unwrap();
    let b = embed_group(&tubes(pre), &params).unwrap();
    assert_eq!(a, b);

    let json = serde_json::to_string(&normed).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), normed);
    assert!(!serde_json::to_string(&plain).unwrap().contains("input_norm"));
    let bad = ModelConfig {
        input_norm: Some(mret::videoio::ChannelNorm { mean: [0.0; 3], std: [1.0, 0.0, 1.0] }),
        ..plain
    };
    assert!(bad.validate().is_err());
}
