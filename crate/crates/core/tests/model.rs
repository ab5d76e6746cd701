use rand::Rng;
use rand_distr::StandardNormal;

use taml::diffcore::{finite_diff_check, FdConfig, Optimizer, OptimizerKind, ParamSet, Tape, Tensor};
use taml::model::{
    bias_path, encode_from_layer, encode_to_layer, episode_loss, head_logits, init_params, predict, task_loss,
    weight_path, EncoderConfig, EpisodeInput, HeadConfig, HeadKind, ModelConfig, LOG_TAU_PATH,
};
use taml::rng::{stream, Purpose};
use taml::worldgen::{make_benchmark, BenchmarkSpec, TaskLayout};
use taml::Error;

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = stream(seed, Purpose::Diagnostic, 8);
    let data = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn small_model(head: HeadConfig) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::new(6, vec![8, 7, 5], vec![1, 2]).unwrap(),
        head,
    }
}

fn tau_only(tau: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(LOG_TAU_PATH, Tensor::vector(vec![tau.ln()])).unwrap();
    p
}

#[test]
fn eligible_layers_exclude_input_and_last() {
    assert!(EncoderConfig::new(4, vec![8, 8], vec![1]).is_ok());
    assert!(matches!(EncoderConfig::new(4, vec![8, 8], vec![2]), Err(Error::Config(_))));
    assert!(matches!(EncoderConfig::new(4, vec![8, 8], vec![0]), Err(Error::Config(_))));
    assert!(matches!(EncoderConfig::new(4, vec![8, 8], vec![]), Err(Error::Config(_))));
    let d = EncoderConfig::default_for(16);
    assert_eq!(d.layer_widths, vec![64; 4]);
    assert_eq!(d.eligible_layers, vec![1, 2]);
}

#[test]
fn layer_zero_is_rejected() {
    let m = small_model(HeadConfig::matching_cosine());
    let p = init_params(&m, &mut stream(0, Purpose::Init, 0)).unwrap();
    let mut t = Tape::new();
    let x = t.constant(randn(3, 6, 0));
    assert!(matches!(encode_to_layer(&mut t, &p, &m.encoder, x, 0), Err(Error::Index(_))));
    assert!(encode_to_layer(&mut t, &p, &m.encoder, x, 4).is_err());
}

#[test]
fn identity_layer_is_relu() {
    let enc = EncoderConfig::new(3, vec![3, 2], vec![1]).unwrap();
    let mut p = ParamSet::new();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    p.insert(weight_path(1), eye).unwrap();
    p.insert(bias_path(1), Tensor::zeros(&[3])).unwrap();
    let raw = randn(4, 3, 1);
    let mut t = Tape::new();
    let x = t.constant(raw.clone());
    let h = encode_to_layer(&mut t, &p, &enc, x, 1).unwrap();
    let relu: Vec<f64> = raw.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(t.value(h).data(), &relu[..]);
}

#[test]
fn split_forward_is_exact_at_every_layer() {
    let m = small_model(HeadConfig::matching_cosine());
    let p = init_params(&m, &mut stream(1, Purpose::Init, 0)).unwrap();
    let raw = randn(9, 6, 2);
    let mut t = Tape::new();
    let x = t.constant(raw);
    let full = encode_to_layer(&mut t, &p, &m.encoder, x, 3).unwrap();
    for l in 1..=3 {
        let h = encode_to_layer(&mut t, &p, &m.encoder, x, l).unwrap();
        assert_eq!(t.shape(h), &[9, m.encoder.width(l)]);
        let f = encode_from_layer(&mut t, &p, &m.encoder, h, l).unwrap();
        assert_eq!(t.shape(f), &[9, 5]);
        assert_eq!(t.value(f).data(), t.value(full).data());
    }
    let wrong = t.constant(randn(9, 3, 0));
    assert!(matches!(
        encode_from_layer(&mut t, &p, &m.encoder, wrong, 1),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn split_path_gradient_matches_finite_differences() {
    let m = small_model(HeadConfig::matching_cosine());
    let p = init_params(&m, &mut stream(2, Purpose::Init, 0)).unwrap();
    let raw = randn(7, 6, 3);
    let proj = randn(7, 5, 4);
    let rep = finite_diff_check(
        |t, p| {
            let x = t.constant(raw.clone());
            let h = encode_to_layer(t, p, &m.encoder, x, 2)?;
            let f = encode_from_layer(t, p, &m.encoder, h, 2)?;
            let w = t.constant(proj.clone());
            let y = t.mul(f, w)?;
            t.sum(y)
        },
        &p,
        &FdConfig {
            kink_tol: 1e-4,
            ..FdConfig::default()
        },
    )
    .unwrap();
    assert!(rep.checked > 50, "{rep:?}");
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn cosine_head_picks_the_matching_exemplar() {
    let p = tau_only(10.0);
    let mut t = Tape::new();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let s = t.constant(eye);
    let q = t.constant(Tensor::from_rows(&[vec![0.0, 0.0, 2.5]]).unwrap());
    let logits = head_logits(&mut t, &p, HeadKind::MatchingCosine, s, &[0, 1, 2], q, 3).unwrap();
    let row = t.value(logits).data();
    assert!((row[2] - 10.0).abs() < 1e-9 && row[0].abs() < 1e-12 && row[1].abs() < 1e-12);
}

#[test]
fn identical_supports_give_uniform_logits() {
    let p = tau_only(3.0);
    for kind in [HeadKind::MatchingCosine, HeadKind::Prototypical] {
        let mut t = Tape::new();
        let row = vec![0.3, -1.0, 2.0];
        let s = t.constant(Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap());
        let q = t.constant(randn(5, 3, 9));
        let logits = head_logits(&mut t, &p, kind, s, &[0, 0, 1, 1], q, 2).unwrap();
        for r in t.value(logits).data().chunks(2) {
            assert!((r[0] - r[1]).abs() < 1e-12);
        }
    }
}

#[test]
fn prototypical_hand_example() {
    let p = tau_only(1.0);
    let mut t = Tape::new();
    let s = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let q = t.constant(Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap());
    let logits = head_logits(&mut t, &p, HeadKind::Prototypical, s, &[0, 1], q, 2).unwrap();
    let v = t.value(logits).data();
    assert!((v[0] + 0.02).abs() < 1e-12 && (v[1] + 1.62).abs() < 1e-12, "{v:?}");
}

#[test]
fn class_without_shots_is_a_contract_error() {
    let p = tau_only(1.0);
    let mut t = Tape::new();
    let s = t.constant(randn(2, 3, 0));
    let q = t.constant(randn(2, 3, 1));
    let res = head_logits(&mut t, &p, HeadKind::Prototypical, s, &[0, 0], q, 2);
    assert!(matches!(res, Err(Error::Contract(_))));
}

#[test]
fn cosine_logits_ignore_feature_scale() {
    let p = tau_only(10.0);
    let (s, q) = (randn(6, 4, 1), randn(4, 4, 2));
    let logits = |k: f64| {
        let mut t = Tape::new();
        let sv = t.constant(s.clone());
        let qv = t.constant(q.clone());
        let sv = t.scale(sv, k).unwrap();
        let qv = t.scale(qv, k).unwrap();
        let l = head_logits(&mut t, &p, HeadKind::MatchingCosine, sv, &[0, 0, 1, 1, 2, 2], qv, 3).unwrap();
        t.value(l).data().to_vec()
    };
    for (a, b) in logits(1.0).iter().zip(logits(37.5)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn prototypical_logits_ignore_translation() {
    let p = tau_only(2.0);
    let (s, q) = (randn(6, 4, 3), randn(4, 4, 4));
    let shift = Tensor::vector(vec![5.0, -3.0, 0.5, 11.0]);
    let logits = |shifted: bool| {
        let mut t = Tape::new();
        let mut sv = t.constant(s.clone());
        let mut qv = t.constant(q.clone());
        if shifted {
            let d = t.constant(shift.clone());
            sv = t.add_row(sv, d).unwrap();
            qv = t.add_row(qv, d).unwrap();
        }
        let l = head_logits(&mut t, &p, HeadKind::Prototypical, sv, &[0, 0, 1, 1, 2, 2], qv, 3).unwrap();
        t.value(l).data().to_vec()
    };
    for (a, b) in logits(false).iter().zip(logits(true)) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn benchmark_task(seed: u64) -> (ModelConfig, taml::worldgen::EpisodeTask) {
    let b = make_benchmark(&BenchmarkSpec::default()).unwrap();
    let layout = TaskLayout {
        n_way: 5,
        k_shot: 1,
        k_query: 15,
    };
    let task = b.sample_task(&b.source[0], layout, &mut stream(seed, Purpose::TrainTasks, 0)).unwrap();
    let model = ModelConfig {
        encoder: EncoderConfig::default_for(b.dim()),
        head: HeadConfig::matching_cosine(),
    };
    (model, task)
}

#[test]
fn untrained_loss_is_near_chance() {
    // Single 1-shot episodes swing widely, so compare the episode average.
    let b = make_benchmark(&BenchmarkSpec::default()).unwrap();
    let layout = TaskLayout {
        n_way: 5,
        k_shot: 1,
        k_query: 15,
    };
    let model = ModelConfig {
        encoder: EncoderConfig::default_for(b.dim()),
        head: HeadConfig::matching_cosine(),
    };
    for seed in 0..5 {
        let p = init_params(&model, &mut stream(seed, Purpose::Init, 0)).unwrap();
        let mut total = 0.0;
        for i in 0..100 {
            let task = b.sample_task(&b.source[i % 4], layout, &mut stream(seed, Purpose::TrainTasks, i as u64)).unwrap();
            let mut t = Tape::new();
            let loss = task_loss(&mut t, &p, &model, &task).unwrap();
            total += t.value(loss).item().unwrap();
        }
        let v = total / 100.0;
        assert!((v - 5f64.ln()).abs() < 0.5, "seed {seed}: {v}");
    }
}

#[test]
fn a_single_episode_can_be_overfit() {
    let (model, task) = benchmark_task(11);
    let mut p = init_params(&model, &mut stream(11, Purpose::Init, 0)).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::adam(1e-2));
    let scope: Vec<String> = p.paths().cloned().collect();
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        p.zero_grad();
        let mut t = Tape::new();
        let loss = task_loss(&mut t, &p, &model, &task).unwrap();
        last = t.value(loss).item().unwrap();
        t.backward(loss, &mut p).unwrap();
        opt.step(&mut p, &scope).unwrap();
    }
    assert!(last < 0.1, "{last}");
    let pred = predict(&p, &model, &task).unwrap();
    let correct = pred.iter().zip(&task.query_y).filter(|(a, b)| a == b).count();
    assert!(correct as f64 / pred.len() as f64 > 0.9);
}

#[test]
fn episode_loss_gradient_matches_finite_differences() {
    for head in [HeadConfig::matching_cosine(), HeadConfig::prototypical()] {
        let model = ModelConfig {
            encoder: EncoderConfig::new(6, vec![8, 6, 5], vec![1]).unwrap(),
            head,
        };
        let p = init_params(&model, &mut stream(3, Purpose::Init, 0)).unwrap();
        let layout = TaskLayout {
            n_way: 3,
            k_shot: 2,
            k_query: 2,
        };
        let raw = randn(layout.rows(), 6, 5);
        let rep = finite_diff_check(
            |t, p| {
                let x = t.constant(raw.clone());
                let h = encode_to_layer(t, p, &model.encoder, x, 1)?;
                let input = EpisodeInput { x: h, layout, layer: 1 };
                episode_loss(t, p, &model, &input)
            },
            &p,
            &FdConfig {
                kink_tol: 1e-4,
                ..FdConfig::default()
            },
        )
        .unwrap();
        assert!(rep.checked > 50, "{rep:?}");
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}

#[test]
fn row_count_must_match_layout() {
    let m = small_model(HeadConfig::prototypical());
    let p = init_params(&m, &mut stream(0, Purpose::Init, 0)).unwrap();
    let mut t = Tape::new();
    let x = t.constant(randn(5, 6, 0));
    let input = EpisodeInput {
        x,
        layout: TaskLayout {
            n_way: 2,
            k_shot: 1,
            k_query: 2,
        },
        layer: 0,
    };
    assert!(matches!(episode_loss(&mut t, &p, &m, &input), Err(Error::Contract(_))));
}
