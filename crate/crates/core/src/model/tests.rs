use super::*;
use crate::audio::StftParams;
use crate::geometry::SphericalPos;
use crate::query::build_query;
use crate::sim::{generate, Activity, MeetingSpec, ParticipantSpec};

fn tiny_frontend() -> FrontendConfig {
    FrontendConfig { patch_height: 8, patch_width: 12, ..Default::default() }
}

fn tiny_model_config(audio: AudioBackbone) -> ModelConfig {
    ModelConfig {
        visual: ConvStackConfig { channels: vec![4, 6], kernel: 3, stride: 2 },
        audio,
        audio_dim: 6,
        query_hidden: 5,
        query_dim: 4,
        max_background: 2,
        tcn_channels: 6,
        tcn_kernel: 3,
        tcn_dilations: vec![1, 2],
        head_hidden: vec![5, 4],
        ..Default::default()
    }
}

fn cross_spectral() -> AudioBackbone {
    AudioBackbone::CrossSpectral { bands: 4, bins_per_band: 3, hidden: 7 }
}

fn tiny(seed: u64) -> AsdModel<f64> {
    AsdModel::new(&tiny_frontend(), &tiny_model_config(cross_spectral()), seed).unwrap()
}

fn query(az: f64) -> Query {
    let me = SphericalPos::new(az, 0.0, 0.1).unwrap();
    let others = [(2, SphericalPos::new(az + 1.0, 0.05, 0.12).unwrap()), (3, SphericalPos::new(az + 2.5, -0.05, 0.09).unwrap())];
    build_query(&me, &others, 2)
}

fn ramp(n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.37 + scale).sin() * 0.5 + 0.5).collect()
}

fn toy_batch(model: &AsdModel<f64>, batch: usize, window: usize, labelled: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Query>, Vec<Option<(usize, usize)>>, Vec<Option<usize>>) {
    let fe = &model.frontend;
    let g = &fe.geometry;
    let cs = CrossSpectralParams { bands: 4, bins_per_band: 3, single_channel: false };
    let audio: Vec<Vec<f64>> = (0..window).map(|t| ramp(cs.dim(g), t as f64)).collect();
    let stack_len = fe.stack_depth * fe.patch_height * fe.patch_width;
    let stacks: Vec<Vec<f64>> = (0..batch * window).map(|r| ramp(stack_len, 0.1 * r as f64)).collect();
    let queries: Vec<Query> = (0..batch * window).map(|r| query(0.3 * r as f64)).collect();
    let mut steps = Vec::new();
    for b in 0..batch {
        for t in 0..window {
            // the first step of odd windows lies before the meeting start
            steps.push(if b % 2 == 1 && t == 0 { None } else { Some((b * window + t, t)) });
        }
    }
    let labels = (0..batch * labelled).map(|i| if i % 5 == 4 { None } else { Some(i % 2) }).collect();
    (audio, stacks, queries, steps, labels)
}

fn batch_view<'a>(
    parts: &'a (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Query>, Vec<Option<(usize, usize)>>, Vec<Option<usize>>),
    batch: usize,
    window: usize,
) -> Batch<'a> {
    Batch {
        audio: parts.0.iter().map(Vec::as_slice).collect(),
        stacks: parts.1.iter().map(Vec::as_slice).collect(),
        queries: parts.2.iter().collect(),
        steps: parts.3.clone(),
        batch,
        window,
        labels: parts.4.clone(),
    }
}

#[test]
fn default_embedding_is_144_wide() {
    let m = AsdModel::<f32>::new(&FrontendConfig::default(), &ModelConfig::default(), 0).unwrap();
    assert_eq!(m.embedding_dim(), 144);
    assert_eq!(m.receptive_field(), 15);
}

#[test]
fn audio_backbone_runs_once_per_tick() {
    let m = tiny(1);
    let n_audio = CrossSpectralParams { bands: 4, bins_per_band: 3, single_channel: false }.dim(&m.frontend.geometry);
    let audio = ramp(n_audio, 0.0);
    let stack = ramp(3 * 8 * 12, 1.0);
    let (q1, q2, q3) = (query(0.1), query(2.0), query(4.0));
    let before = m.audio_backbone_runs();
    let e = m.embed(Some(&audio), &[(&stack, &q1), (&stack, &q2), (&stack, &q3)]).unwrap();
    assert_eq!(m.audio_backbone_runs() - before, 1);
    assert_eq!(e.len(), 3);
    // shared audio part is identical across participants
    let a = m.config.visual_dim()..m.config.visual_dim() + m.config.audio_dim;
    assert_eq!(e[0][a.clone()], e[1][a.clone()]);
    assert_eq!(e[1][a.clone()], e[2][a]);
}

#[test]
fn zero_inputs_give_finite_embeddings() {
    let m = tiny(2);
    let n_audio = CrossSpectralParams { bands: 4, bins_per_band: 3, single_channel: false }.dim(&m.frontend.geometry);
    let audio = vec![0.0; n_audio];
    let stack = vec![0.0; 3 * 8 * 12];
    let q = Query { reference: crate::query::QueryVector([0.0; 6]), background: vec![] };
    let e = m.embed(Some(&audio), &[(&stack, &q)]).unwrap();
    assert!(e[0].iter().all(|x| x.is_finite()));
}

#[test]
fn prediction_window_rules() {
    let mut m = tiny(3);
    let d = m.embedding_dim();
    let r = m.receptive_field();
    let seq: Vec<Vec<f64>> = (0..r + 6).map(|t| ramp(d, t as f64)).collect();
    let tail: Vec<&[f64]> = seq[6..].iter().map(Vec::as_slice).collect();
    let all: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
    let p = m.predict_windows(&[tail, all]).unwrap();
    assert_eq!(p[0], p[1]);
    assert!((0.0..=1.0).contains(&p[0]));

    // cold start equals explicit zero padding
    let short: Vec<&[f64]> = seq[..3].iter().map(Vec::as_slice).collect();
    let zero = vec![0.0; d];
    let mut padded: Vec<&[f64]> = vec![zero.as_slice(); r - 3];
    padded.extend(short.iter().copied());
    let p = m.predict_windows(&[short, padded]).unwrap();
    assert_eq!(p[0], p[1]);

    // full-sequence inference agrees with windowed inference at every step
    let batch = m.predict_sequence(&seq).unwrap();
    for t in 0..seq.len() {
        let w: Vec<&[f64]> = seq[..=t].iter().map(Vec::as_slice).collect();
        assert_eq!(m.predict_windows(&[w]).unwrap()[0], batch[t]);
    }

    m.zero_output_layers();
    let w: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
    assert_eq!(m.predict_windows(&[w]).unwrap()[0], 0.5);
}

#[test]
fn symmetric_heads_give_ln2_terms_and_lambdas_weight_them() {
    let mut m = tiny(4);
    m.zero_output_layers();
    let (b, w, l) = (3, 5, 2);
    let parts = toy_batch(&m, b, w, l);
    let mut g = Graph::new();
    let p = m.bind(&mut g, true);
    let (_, v) = m.loss_graph(&mut g, &p, &batch_view(&parts, b, w)).unwrap();
    let ln2 = std::f64::consts::LN_2;
    for x in [v.main, v.visual, v.audio_spatial] {
        assert!((x - ln2).abs() < 1e-12);
    }
    assert!((v.total - ln2 * 1.6).abs() < 1e-12);

    let mut cfg = tiny_model_config(cross_spectral());
    cfg.lambda_v = 0.0;
    cfg.lambda_as = 0.0;
    let m = AsdModel::<f64>::new(&tiny_frontend(), &cfg, 4).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g, true);
    let (_, v) = m.loss_graph(&mut g, &p, &batch_view(&parts, b, w)).unwrap();
    assert_eq!(v.total, v.main);
    assert!(v.visual >= 0.0 && v.audio_spatial >= 0.0);
}

#[test]
fn every_parameter_receives_gradient() {
    let m = tiny(5);
    let (b, w, l) = (4, 5, 3);
    let parts = toy_batch(&m, b, w, l);
    let (_, grads) = m.loss_and_grads(&batch_view(&parts, b, w)).unwrap();
    for (name, g) in m.params().names().iter().zip(&grads) {
        let g = g.as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|x| x.abs() > 1e-12), "{name} has zero gradient");
    }
}

#[test]
fn composite_loss_matches_finite_differences() {
    let mut m = tiny(6);
    // move biases off zero so no ReLU sits exactly at its kink
    for (k, t) in m.params_mut().tensors_mut().iter_mut().enumerate() {
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += 0.05 * ((k * 31 + i) as f64 * 0.71).sin();
        }
    }
    let (b, w, l) = (2, 5, 2);
    let parts = toy_batch(&m, b, w, l);
    let batch = batch_view(&parts, b, w);
    let (_, grads) = m.loss_and_grads(&batch).unwrap();
    let loss_at = |model: &AsdModel<f64>| {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        model.loss_graph(&mut g, &p, &batch).unwrap().1.total
    };
    let h = 1e-6;
    for (pi, g) in grads.iter().enumerate() {
        let g = g.as_ref().unwrap();
        for j in [0, g.len() / 2, g.len() - 1] {
            let mut plus = m.clone();
            plus.params_mut().by_id_mut(pi).data_mut()[j] += h;
            let mut minus = m.clone();
            minus.params_mut().by_id_mut(pi).data_mut()[j] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-4);
            assert!(err < 1e-5, "param {pi} entry {j}: fd {fd} vs {}", g[j]);
        }
    }
}

#[test]
fn cnn_audio_and_single_channel_paths() {
    let audio = AudioBackbone::Cnn { channels: vec![4, 6], kernel: 3, stride: 4 };
    let mut fe = tiny_frontend();
    fe.stft = StftParams { window: 256, hop: 128, fft_bins: 256 };
    fe.audio_window_ms = 100;
    let mut cfg = tiny_model_config(audio);
    let m = AsdModel::<f64>::new(&fe, &cfg, 7).unwrap();
    let spec = MeetingSpec::new(3, 1.0, vec![ParticipantSpec { id: 1, azimuth: 1.0, altitude: 0.0, distance: 1.0, head_width: 0.16, activity: Activity::Always }]);
    let rec = generate(&spec).unwrap();
    let stft = Stft::new(fe.stft).unwrap();
    let input = m.audio_input(&rec.audio_window(5, fe.audio_samples()), &stft).unwrap();
    assert_eq!(input.len(), 14 * 11 * 129);
    let swapped = m.swap_audio_input(&input, 1).unwrap();
    assert_eq!(swapped.len(), input.len());
    assert_ne!(swapped, input);
    let stack = vec![0.5; 3 * 8 * 12];
    let q = query(1.0);
    assert!(m.embed(Some(&input), &[(&stack, &q)]).unwrap()[0].iter().all(|x| x.is_finite()));

    cfg.toggles = Toggles::preset("C3").unwrap();
    let single = AsdModel::<f64>::new(&fe, &cfg, 7).unwrap();
    let e = single.embed(Some(&input), &[(&stack, &q)]).unwrap();
    assert_eq!(e[0].len(), 6 + 6);
    // only the reference microphone's planes matter
    let mut other = input.clone();
    let plane = 11 * 129;
    other[0] += 1.0;
    let r = fe.geometry.reference_mic();
    other[2 * r * plane] += 1.0;
    assert_eq!(single.audio_slice(&other)[0], input[2 * r * plane] + 1.0);
    let e2 = single.embed(Some(&other[..]), &[(&stack, &q)]).unwrap();
    assert_ne!(e, e2);
}

#[test]
fn presets_and_validation() {
    assert!(Toggles::preset("C0").is_err());
    for (name, dim) in [("C1", 6), ("C2", 12), ("C4", 6), ("C5", 10), ("C8", 16)] {
        let mut cfg = tiny_model_config(cross_spectral());
        cfg.toggles = Toggles::preset(name).unwrap();
        let m = AsdModel::<f64>::new(&tiny_frontend(), &cfg, 0).unwrap();
        assert_eq!(m.embedding_dim(), dim, "{name}");
    }
    assert!(!AsdModel::<f64>::new(&tiny_frontend(), &{
        let mut c = tiny_model_config(cross_spectral());
        c.toggles = Toggles::preset("C9").unwrap();
        c
    }, 0)
    .unwrap()
    .has_aux_heads());
    let bad = Toggles { visual: false, audio: false, ..Toggles::default() };
    assert!(bad.validate().is_err());
    let bad = Toggles { audio: false, single_channel_audio: true, ..Toggles::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = tiny(8);
    let mut buf = Vec::new();
    m.save(&mut buf).unwrap();
    let back = AsdModel::<f64>::load(&buf[..]).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.params().tensors(), m.params().tensors());
    let f32_model = AsdModel::<f32>::load(&buf[..]).unwrap();
    assert_eq!(f32_model.params().len(), m.params().len());
}

#[test]
fn flop_accounting_covers_receptive_field() {
    let m = tiny(9);
    let (shared, per) = m.flops().unwrap();
    assert_eq!(shared.per_layer.len(), 2);
    let tcn0 = per.per_layer.iter().find(|(n, _)| n == "head.tcn0").unwrap().1;
    let r = m.receptive_field() as u64;
    assert_eq!(tcn0, (2 * 16 * 6 * 3 + 6) * r);
}

mod training {
    use super::*;
    use crate::model::{evaluate_dataset, train, Dataset, TrainConfig};

    fn records() -> Vec<crate::sim::MeetingRecord> {
        (0..2)
            .map(|s| {
                let participants = (0..3)
                    .map(|i| ParticipantSpec {
                        id: i + 1,
                        azimuth: 0.4 + 2.1 * i as f64,
                        altitude: 0.0,
                        distance: 1.1,
                        head_width: 0.16,
                        activity: Activity::Markov,
                    })
                    .collect();
                generate(&MeetingSpec::new(100 + s, 4.0, participants)).unwrap()
            })
            .collect()
    }

    #[test]
    fn dataset_windows_cover_every_tick() {
        let m = tiny(10);
        let data = Dataset::build(&records(), &m).unwrap();
        assert_eq!(data.meetings[0].ticks, 31);
        let w = data.windows(8);
        // ends 7, 15, 23, 30 for each of 3 participants in 2 meetings
        assert_eq!(w.len(), 4 * 3 * 2);
        let s = data.stack(0, 1, 0);
        assert_eq!(s.len(), 3 * 96);
        assert_eq!(s[..96], s[96..192]);
    }

    #[test]
    fn one_epoch_one_step_and_determinism() {
        let recs = records();
        let m0 = tiny(11);
        let data = Dataset::build(&recs, &m0).unwrap();
        let n = data.windows(4).len();
        let cfg = TrainConfig { epochs: 1, batch_size: n, label_steps: 4, ..Default::default() };
        let mut a = tiny(11);
        let out = train(&mut a, &data, Some(&data), &cfg, 5, |_| {}).unwrap();
        assert_eq!(out.optimizer_steps, 1);
        let mut b = tiny(11);
        train(&mut b, &data, Some(&data), &cfg, 5, |_| {}).unwrap();
        assert_eq!(a.params().tensors(), b.params().tensors());
        assert_ne!(a.params().tensors(), m0.params().tensors());
        let pairs = evaluate_dataset(&a, &data).unwrap();
        assert_eq!(pairs.len(), data.num_labels());
    }

    #[test]
    fn separable_toy_loss_decreases() {
        // label = whether the reference azimuth lies in the upper half plane
        let mut cfg = tiny_model_config(cross_spectral());
        cfg.toggles = Toggles::preset("C5").unwrap();
        let mut m = AsdModel::<f64>::new(&tiny_frontend(), &cfg, 12).unwrap();
        let n_audio = CrossSpectralParams { bands: 4, bins_per_band: 3, single_channel: false }.dim(&m.frontend.geometry);
        let audio = [vec![0.0; n_audio]];
        let w = m.receptive_field();
        let queries: Vec<Query> = (0..32).map(|i| query(i as f64 * 0.19)).collect();
        let mut steps = Vec::new();
        let mut labels = Vec::new();
        for (i, q) in queries.iter().enumerate() {
            for _ in 0..w {
                steps.push(Some((i, 0)));
            }
            labels.push(Some(usize::from(q.reference.0[0] > 0.0)));
        }
        let stacks: Vec<&[f64]> = vec![&[]; queries.len()];
        let batch = Batch {
            audio: audio.iter().map(Vec::as_slice).collect(),
            stacks,
            queries: queries.iter().collect(),
            steps,
            batch: queries.len(),
            window: w,
            labels,
        };
        let mut opt = crate::tensor::SgdNesterov::new(0.01, 0.9);
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let (v, g) = m.loss_and_grads(&batch).unwrap();
            assert!(v.total < last, "loss went up: {} -> {}", last, v.total);
            last = v.total;
            opt.step(m.params_mut().tensors_mut(), &g).unwrap();
        }
    }
}
