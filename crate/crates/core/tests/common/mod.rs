//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use asd_core::error::Result;
use asd_core::tensor::{check_gradients, GradCheck, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Fixed random projection to a scalar, so every output element matters.
pub fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let coeffs = (0..g.value(v).len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    g.dot(v, coeffs)
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// One finite-difference case per differentiable graph operation.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut t = |s: &[usize]| random_tensor(&mut r, s);
    vec![
        (
            "conv2d",
            vec![t(&[2, 3, 6, 5]), t(&[4, 3, 3, 3]), t(&[4])],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                project(g, y, 1)
            }),
        ),
        (
            "causal_conv1d",
            vec![t(&[2, 3, 9]), t(&[4, 3, 3]), t(&[4])],
            Box::new(|g, v| {
                let y = g.causal_conv1d(v[0], v[1], v[2], 2)?;
                project(g, y, 2)
            }),
        ),
        (
            "linear",
            vec![t(&[5, 7]), t(&[3, 7]), t(&[3])],
            Box::new(|g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y, 3)
            }),
        ),
        (
            "relu",
            vec![t(&[4, 6])],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                project(g, y, 4)
            }),
        ),
        (
            "global_avg_pool",
            vec![t(&[2, 3, 4, 5])],
            Box::new(|g, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y, 5)
            }),
        ),
        (
            "concat",
            vec![t(&[3, 2]), t(&[3, 4])],
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                project(g, y, 6)
            }),
        ),
        (
            "gather_rows",
            vec![t(&[4, 3])],
            Box::new(|g, v| {
                let y = g.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2)])?;
                project(g, y, 7)
            }),
        ),
        (
            "segment_mean",
            vec![t(&[6, 3])],
            Box::new(|g, v| {
                let y = g.segment_mean(v[0], vec![0..2, 2..2, 1..6])?;
                project(g, y, 8)
            }),
        ),
        (
            "rows_to_seq",
            vec![t(&[6, 4])],
            Box::new(|g, v| {
                let y = g.rows_to_seq(v[0], 2, 3)?;
                project(g, y, 9)
            }),
        ),
        (
            "seq_to_rows",
            vec![t(&[2, 3, 5])],
            Box::new(|g, v| {
                let y = g.seq_to_rows(v[0], 2)?;
                project(g, y, 10)
            }),
        ),
        (
            "softmax_ce",
            vec![t(&[5, 2])],
            Box::new(|g, v| g.softmax_ce(v[0], vec![Some(0), Some(1), None, Some(1), Some(0)])),
        ),
        (
            "weighted_sum",
            vec![t(&[3]), t(&[2])],
            Box::new(|g, v| {
                let a = project(g, v[0], 11)?;
                let b = project(g, v[1], 12)?;
                g.weighted_sum(&[(a, 0.7), (b, -1.3)])
            }),
        ),
    ]
}

pub fn run_case(case: &OpCase) -> GradCheck {
    check_gradients(&case.1, 1e-6, &case.2).unwrap_or_else(|e| panic!("{}: {e}", case.0))
}

use asd_core::config::{Config, FrontendConfig};
use asd_core::eval::BenchmarkSpec;
use asd_core::model::{training_batch, AsdModel, AudioBackbone, ConvStackConfig, Dataset, ModelConfig, TrainConfig};
use asd_core::sim::{generate, MeetingRecord, MeetingSpec};
use asd_core::tensor::relative_error;

/// A model small enough for exhaustive checks, with every component enabled.
pub fn tiny_config() -> Config {
    Config {
        frontend: FrontendConfig { patch_height: 8, patch_width: 12, ..Default::default() },
        model: ModelConfig {
            visual: ConvStackConfig { channels: vec![4, 6], kernel: 3, stride: 2 },
            audio: AudioBackbone::CrossSpectral { bands: 4, bins_per_band: 8, hidden: 8 },
            audio_dim: 6,
            query_hidden: 5,
            query_dim: 4,
            max_background: 2,
            tcn_channels: 6,
            head_hidden: vec![5, 4],
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Short benchmark-style meeting.
pub fn short_meeting(seed: u64, participants: usize, duration_s: f64) -> MeetingSpec {
    let b = BenchmarkSpec {
        min_participants: participants,
        max_participants: participants,
        min_duration_s: duration_s,
        max_duration_s: duration_s,
        ..Default::default()
    };
    b.meeting(seed)
}

pub fn short_record(seed: u64, participants: usize, duration_s: f64) -> MeetingRecord {
    generate(&short_meeting(seed, participants, duration_s)).unwrap()
}

/// Central differences of the full training loss against the tape gradient,
/// on a real batch with augmentation, for up to `per_tensor` entries of
/// every parameter tensor.
pub fn composite_check(seed: u64, per_tensor: usize) -> GradCheck {
    let cfg = tiny_config();
    let mut model: AsdModel<f64> = AsdModel::new(&cfg.frontend, &cfg.model, seed).unwrap();
    let mut r = rng(seed);
    // random biases keep ReLUs away from their kinks
    for t in model.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.1..0.1));
    }
    let record = short_record(seed, 3, 3.0);
    let data = Dataset::build(std::slice::from_ref(&record), &model).unwrap();
    let tc = TrainConfig { label_steps: 4, channel_swap_prob: 0.5, visual_augment_prob: 0.5, ..Default::default() };
    let windows = data.windows(tc.label_steps);
    let picked: Vec<_> = windows.iter().step_by((windows.len() / 4).max(1)).copied().take(4).collect();
    let owned = training_batch(&model, &data, &picked, &tc, &mut r).unwrap();
    let batch = owned.view();
    let (_, grads) = model.loss_and_grads(&batch).unwrap();
    let loss_at = |m: &AsdModel<f64>| {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        m.loss_graph(&mut g, &p, &batch).unwrap().1.total
    };
    let h = 1e-6;
    let mut report = GradCheck { max_rel_error: 0.0, checked: 0 };
    for (pi, g) in grads.iter().enumerate() {
        let g = g.as_ref().expect("every parameter receives a gradient");
        let stride = (g.len() / per_tensor).max(1);
        for j in (0..g.len()).step_by(stride) {
            let mut plus = model.clone();
            plus.params_mut().by_id_mut(pi).data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut().by_id_mut(pi).data_mut()[j] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            report.max_rel_error = report.max_rel_error.max(relative_error(fd, g[j], 1e-4));
            report.checked += 1;
        }
    }
    report
}

use std::collections::BTreeMap;

use asd_core::query::Query;
use asd_core::scalar::Scalar;
use asd_core::streaming::{Detection, StreamingConfig, StreamingPipeline, TickInput, TickOutput};
use asd_core::visual::Raster;

/// Ground-truth head tracks of one tick as detections.
pub fn detections(record: &MeetingRecord, tick: usize) -> Vec<Detection> {
    record.tracks[tick].iter().map(|tp| Detection { bbox: tp.bbox, truth_id: Some(tp.participant_id) }).collect()
}

/// Stream a meeting with tracing on; `budget(tick)` gives the tick budget.
pub fn stream_traced<T: Scalar>(
    model: &AsdModel<T>,
    record: &MeetingRecord,
    cfg: &StreamingConfig,
    mut budget: impl FnMut(u64) -> u64,
) -> (Vec<TickOutput>, Vec<asd_core::streaming::TraceStep>) {
    let mut p = StreamingPipeline::new(model.clone(), cfg).unwrap().with_trace();
    let window = model.frontend.audio_samples();
    let mut out = Vec::new();
    for tick in 0..record.tracks.len() {
        let det = detections(record, tick);
        let frame = record.frame(tick);
        let audio = record.audio_window(tick, window);
        out.push(p.process(&TickInput { frame: &frame, audio: &audio, detections: &det, budget_kflops: budget(tick as u64) }).unwrap());
    }
    let trace = p.trace().unwrap().to_vec();
    (out, trace)
}

/// Re-run every tracklet's traced inputs as one batch over its full history
/// and compare with the streamed probabilities bit for bit.
/// Returns (predictions compared, mismatches).
pub fn batch_reinference_mismatches<T: Scalar>(
    model: &AsdModel<T>,
    outputs: &[TickOutput],
    trace: &[asd_core::streaming::TraceStep],
) -> (usize, usize) {
    let streamed: BTreeMap<(u64, u64), f64> = outputs
        .iter()
        .flat_map(|o| o.rows.iter().filter(|r| r.predicted).map(|r| ((r.tick, r.tracklet_id), r.probability.unwrap())))
        .collect();
    let mut by_id: BTreeMap<u64, Vec<&asd_core::streaming::TraceStep>> = BTreeMap::new();
    for s in trace {
        by_id.entry(s.tracklet_id).or_default().push(s);
    }
    let (mut compared, mut mismatches) = (0, 0);
    for (id, steps) in by_id {
        let audio: Vec<&[f64]> =
            if model.config.toggles.audio { steps.iter().map(|s| s.audio.as_slice()).collect() } else { Vec::new() };
        let rows: Vec<(usize, &[f64], &Query)> =
            steps.iter().enumerate().map(|(i, s)| (if audio.is_empty() { 0 } else { i }, s.stack.as_slice(), &s.query)).collect();
        let emb = model.embed_batch(&audio, &rows).unwrap();
        let probs = model.predict_sequence(&emb).unwrap();
        for (s, p) in steps.iter().zip(probs) {
            compared += 1;
            if streamed[&(s.tick, id)].to_bits() != p.to_bits() {
                mismatches += 1;
            }
        }
    }
    assert_eq!(compared, streamed.len());
    (compared, mismatches)
}

/// Deterministic noise image of the given size, for replacing frames.
pub struct NoiseFrame {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Raster for NoiseFrame {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let mut h = self.seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        h ^= h >> 29;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 32;
        let v = (h % 1000) as f64 / 999.0;
        [v, 1.0 - v, 0.5]
    }
}

/// Stream a meeting, replacing frames after `noise_after` with noise.
pub fn stream_outputs<T: Scalar>(
    model: &AsdModel<T>,
    record: &MeetingRecord,
    cfg: &StreamingConfig,
    budgets: &[u64],
    noise_after: Option<(usize, u64)>,
) -> Vec<TickOutput> {
    let mut p = StreamingPipeline::new(model.clone(), cfg).unwrap();
    let window = model.frontend.audio_samples();
    let pano = record.spec.panorama;
    (0..record.tracks.len())
        .map(|tick| {
            let det = detections(record, tick);
            let audio = record.audio_window(tick, window);
            let view = record.frame(tick);
            let noise = NoiseFrame { width: pano.width, height: pano.height, seed: noise_after.map_or(0, |n| n.1 + tick as u64) };
            let frame: &dyn Raster = match noise_after {
                Some((t, _)) if tick > t => &noise,
                _ => &view,
            };
            p.process(&TickInput { frame, audio: &audio, detections: &det, budget_kflops: budgets[tick] }).unwrap()
        })
        .collect()
}

fn same_output(a: &TickOutput, b: &TickOutput) -> bool {
    a.tick == b.tick
        && a.spent_kflops == b.spent_kflops
        && a.rows.len() == b.rows.len()
        && a.rows.iter().zip(&b.rows).all(|(x, y)| {
            (x.tick, x.time_ms, x.tracklet_id, x.truth_id, x.predicted) == (y.tick, y.time_ms, y.tracklet_id, y.truth_id, y.predicted)
                && x.probability.map(f64::to_bits) == y.probability.map(f64::to_bits)
        })
}

/// Outcome of one randomized causality trial.
pub struct CausalityTrial {
    pub cut: usize,
    /// Outputs up to and including the cut are bit-identical.
    pub prefix_identical: bool,
    /// Some later output changed, so the mutation was observable.
    pub suffix_changed: bool,
}

/// Mutate audio, frames, detections and budgets strictly after a random
/// tick and compare the streamed outputs.
pub fn causality_trial(records: &[MeetingRecord], seed: u64) -> CausalityTrial {
    let mut r = rng(seed);
    let cfg = tiny_config();
    let model: AsdModel<f64> = AsdModel::new(&cfg.frontend, &cfg.model, seed).unwrap();
    let record = &records[r.gen_range(0..records.len())];
    let ticks = record.tracks.len();
    let cut = r.gen_range(0..ticks - 1);
    let full = cfg.streaming.budget.tick_budget_kflops;
    let cost = cfg.streaming.budget.cost_model();
    let budgets: Vec<u64> = (0..ticks).map(|_| if r.gen_bool(0.5) { full } else { cost.budget_for(r.gen_range(0..4)) }).collect();

    let mut mutated = record.clone();
    let mut mut_budgets = budgets.clone();
    let kind = r.gen_range(0..5);
    let end = (record.spec.tick_time_s(cut) * record.spec.sample_rate as f64).round() as usize;
    if kind == 0 || kind == 4 {
        for ch in &mut mutated.audio.channels {
            ch[end..].iter_mut().for_each(|x| *x = r.gen_range(-0.5..0.5));
        }
    }
    if kind == 1 || kind == 4 {
        for row in &mut mutated.tracks[cut + 1..] {
            for tp in row.iter_mut() {
                tp.bbox.x = (tp.bbox.x + r.gen_range(-40.0..40.0)).rem_euclid(record.spec.panorama.width as f64);
            }
            if r.gen_bool(0.3) && !row.is_empty() {
                row.pop();
            }
        }
    }
    if kind == 2 || kind == 4 {
        mut_budgets[cut + 1..].iter_mut().for_each(|b| *b = cost.budget_for(r.gen_range(0..3)));
    }
    let noise = (kind == 3 || kind == 4).then_some((cut, seed));
    let a = stream_outputs(&model, record, &cfg.streaming, &budgets, None);
    let b = stream_outputs(&model, &mutated, &cfg.streaming, &mut_budgets, noise);
    CausalityTrial {
        cut,
        prefix_identical: a[..=cut].iter().zip(&b[..=cut]).all(|(x, y)| same_output(x, y)),
        suffix_changed: a[cut + 1..].iter().zip(&b[cut + 1..]).any(|(x, y)| !same_output(x, y)),
    }
}

use asd_core::audio::{channel_swap_features, extract_features, hann, Stft, StftParams, DEFAULT_EPS};
use asd_core::sim::{rotate_scene, Activity, ParticipantSpec};

/// RMS between the features of the ring-rotated scene and the channel-swapped
/// features of the original, for one audio window per `tick_step` ticks.
pub fn swap_rotation_rms(spec: &MeetingSpec, k: usize, tick_step: usize) -> f64 {
    let geom = spec.geometry;
    let original = generate(spec).unwrap();
    let rotated = generate(&rotate_scene(spec, std::f64::consts::TAU * k as f64 / geom.ring_count as f64)).unwrap();
    let stft = Stft::new(StftParams::default()).unwrap();
    let window = 4800;
    let (mut sum, mut n) = (0.0, 0usize);
    for tick in (0..original.tracks.len()).step_by(tick_step) {
        let a = extract_features(&original.audio_window(tick, window), &stft, DEFAULT_EPS).unwrap();
        let (swapped, _) = channel_swap_features(&a, k, &geom).unwrap();
        let b = extract_features(&rotated.audio_window(tick, window), &stft, DEFAULT_EPS).unwrap();
        for (x, y) in swapped.data.iter().zip(&b.data) {
            // phases are compared on the circle
            let d = x - y;
            let d = d - std::f64::consts::TAU * (d / std::f64::consts::TAU).round();
            sum += d * d;
            n += 1;
        }
    }
    (sum / n as f64).sqrt()
}

/// A meeting with one always-speaking participant.
pub fn single_source(seed: u64, azimuth: f64, altitude: f64, snr_db: Option<f64>) -> MeetingSpec {
    let p = ParticipantSpec { id: 1, azimuth, altitude, distance: 1.5, head_width: 0.16, activity: Activity::Always };
    let mut s = MeetingSpec::new(seed, 2.0, vec![p]);
    s.snr_db = snr_db;
    s
}

/// Largest deviation (radians) between measured inter-mic phase differences
/// and the plane-wave model, over high-SNR bins. The phase difference of a
/// bin is the argument of the cross-spectrum averaged over the STFT frames
/// of one audio window; a bin is high-SNR when it is a spectral peak of the
/// averaged reference power and both channels exceed ten times the expected
/// noise magnitude. Returns (max error, bins checked).
pub fn doa_phase_error(spec: &MeetingSpec) -> (f64, usize) {
    use asd_core::audio::Complex64;
    use asd_core::sim::NOMINAL_SOURCE_POWER;
    let rec = generate(spec).unwrap();
    let params = StftParams::default();
    let stft = Stft::new(params).unwrap();
    let geom = spec.geometry;
    let sigma = spec.snr_db.map_or(0.0, |snr| (NOMINAL_SOURCE_POWER * 10f64.powf(-snr / 10.0)).sqrt());
    // f32 storage bounds the floor of a noiseless meeting
    let floor = sigma.max(1e-7) * hann(params.window).iter().map(|w| w * w).sum::<f64>().sqrt();
    let pos = spec.participants[0].position();
    let delays = geom.far_field_delays(pos.azimuth, pos.altitude);
    let reference = geom.reference_mic();
    let (mut worst, mut checked) = (0.0f64, 0);
    for tick in (8..rec.tracks.len()).step_by(4) {
        let audio = rec.audio_window(tick, 4800);
        let spectra: Vec<_> = audio.channels.iter().map(|ch| stft.process(ch).unwrap()).collect();
        let frames = spectra[0].len() as f64;
        let bins = params.bins();
        let power = |m: usize| -> Vec<f64> {
            (0..bins).map(|b| spectra[m].iter().map(|row| row[b].norm_sqr()).sum::<f64>() / frames).collect()
        };
        let p_ref = power(reference);
        for m in 0..geom.num_mics() {
            if m == reference {
                continue;
            }
            let p_m = power(m);
            for bin in 1..bins - 1 {
                let peak = p_ref[bin - 1] <= p_ref[bin] && p_ref[bin + 1] <= p_ref[bin];
                if !peak || p_ref[bin].sqrt() < 10.0 * floor || p_m[bin].sqrt() < 10.0 * floor {
                    continue;
                }
                let cross: Complex64 = spectra[m].iter().zip(&spectra[reference]).map(|(a, r)| a[bin] * r[bin].conj()).sum();
                let f = bin as f64 * spec.sample_rate as f64 / params.fft_bins as f64;
                let model = -std::f64::consts::TAU * f * (delays[m] - delays[reference]);
                let d = cross.arg() - model;
                let d = d - std::f64::consts::TAU * (d / std::f64::consts::TAU).round();
                worst = worst.max(d.abs());
                checked += 1;
            }
        }
    }
    (worst, checked)
}

use asd_core::geometry::{Panorama, PixelBox};
use asd_core::streaming::{TrackerConfig, TrackletManager};

/// What a long randomized tracker run observed.
#[derive(Clone, Debug, Default)]
pub struct TrackerRun {
    pub appearances: usize,
    /// Worst ticks from a still head appearing to its tracklet existing.
    /// Swaying heads can cross stripe borders and are not bounded.
    pub max_creation_delay: u64,
    /// Ticks at which one tracklet carried two people, or one person two tracklets.
    pub merges: usize,
    pub splits: usize,
    /// Ids that came back after being retired, or were issued out of order.
    pub reused_ids: usize,
    /// Ticks at which a still head's tracklet box changed bits or was flagged as moving.
    pub unstable_still_boxes: usize,
}

struct Seat {
    base_x: f64,
    base_y: f64,
    /// 0 still, 1 jittering below the motion threshold, 2 swaying
    mode: u8,
    present: Option<(u64, u64)>,
    next_change: u64,
}

/// Ten seats 1000 px apart; people come and go, and every arrival is a new
/// person. Absences outlast retirement so a seat's next occupant cannot
/// legitimately inherit the previous tracklet.
pub fn tracker_run(seed: u64, ticks: u64) -> TrackerRun {
    let cfg = TrackerConfig::default();
    let tick_rate = 7.5;
    let retire = (cfg.retire_after_s * tick_rate).round() as u64;
    let mut r = rng(seed);
    let mut m = TrackletManager::new(cfg, Panorama::default(), tick_rate);
    let mut seats: Vec<Seat> = (0..10)
        .map(|i| Seat {
            base_x: (i as f64 * 1000.0 + r.gen_range(0.0..200.0) + 9_900.0) % 10_000.0,
            base_y: r.gen_range(500.0..1100.0),
            mode: 0,
            present: None,
            next_change: r.gen_range(0..60),
        })
        .collect();
    let mut run = TrackerRun::default();
    let mut next_truth = 0u64;
    let mut appeared_at: BTreeMap<u64, u64> = BTreeMap::new();
    let mut first_seen: BTreeMap<u64, u64> = BTreeMap::new();
    let mut owner: BTreeMap<u64, u64> = BTreeMap::new();
    let mut track_of: BTreeMap<u64, u64> = BTreeMap::new();
    let mut retired: std::collections::BTreeSet<u64> = Default::default();
    let mut alive: std::collections::BTreeSet<u64> = Default::default();
    let mut last_box: BTreeMap<u64, PixelBox> = BTreeMap::new();
    let mut max_id: Option<u64> = None;
    for tick in 0..ticks {
        let mut dets = Vec::new();
        let mut still = std::collections::BTreeSet::new();
        for s in seats.iter_mut() {
            if tick >= s.next_change {
                s.present = match s.present {
                    Some(_) => {
                        s.next_change = tick + retire + 2 + r.gen_range(0..40);
                        None
                    }
                    None => {
                        s.mode = r.gen_range(0..3);
                        s.next_change = tick + r.gen_range(20..400);
                        if s.mode == 0 {
                            appeared_at.insert(next_truth, tick);
                        }
                        run.appearances += 1;
                        next_truth += 1;
                        Some((next_truth - 1, tick))
                    }
                };
            }
            let Some((truth, since)) = s.present else { continue };
            let (dx, dy) = match s.mode {
                0 => (0.0, 0.0),
                1 => (r.gen_range(-0.7..0.7), r.gen_range(-0.7..0.7)),
                _ => (80.0 * ((tick - since) as f64 * 0.2).sin(), 0.0),
            };
            if s.mode == 0 {
                still.insert(truth);
            }
            let cx = (s.base_x + dx).rem_euclid(10_000.0);
            dets.push(Detection { bbox: PixelBox::from_center(cx, s.base_y + dy, 200.0, 260.0), truth_id: Some(truth) });
        }
        let tracklets = m.step(&dets).to_vec();
        let now: std::collections::BTreeSet<u64> = tracklets.iter().map(|t| t.id).collect();
        for id in alive.difference(&now) {
            retired.insert(*id);
        }
        for t in &tracklets {
            if retired.contains(&t.id) {
                run.reused_ids += 1;
            }
            if !alive.contains(&t.id) {
                if max_id.is_some_and(|mx| t.id <= mx) {
                    run.reused_ids += 1;
                }
                max_id = Some(max_id.map_or(t.id, |mx| mx.max(t.id)));
            }
            let Some(truth) = t.truth_id else { continue };
            if t.last_seen_tick != tick {
                continue;
            }
            first_seen.entry(truth).or_insert(tick);
            if *owner.entry(t.id).or_insert(truth) != truth {
                run.merges += 1;
            }
            if *track_of.entry(truth).or_insert(t.id) != t.id {
                run.splits += 1;
            }
            if still.contains(&truth) {
                if let Some(prev) = last_box.get(&t.id) {
                    let same = [prev.x, prev.y, prev.w, prev.h].map(f64::to_bits) == [t.bbox.x, t.bbox.y, t.bbox.w, t.bbox.h].map(f64::to_bits);
                    if !same || t.moving {
                        run.unstable_still_boxes += 1;
                    }
                }
            }
            last_box.insert(t.id, t.bbox);
        }
        alive = now;
    }
    for (truth, at) in &appeared_at {
        // people still unseen at the end of the run only count once S ticks have passed
        let seen = first_seen.get(truth).copied().unwrap_or(ticks);
        run.max_creation_delay = run.max_creation_delay.max(seen - at);
    }
    run
}

use asd_core::eval::ScoredPair;
use asd_core::streaming::{CostModel, Scheduler};

pub fn scored(v: &[(f64, bool)]) -> Vec<ScoredPair> {
    v.iter().enumerate().map(|(i, &(score, label))| ScoredPair { meeting: 0, tick: i, participant: 0, score, label }).collect()
}

/// EER by evaluating every threshold with direct counting, interpolated on
/// the segment where the false-negative rate drops to the false-positive rate.
pub fn brute_force_eer(p: &[ScoredPair]) -> f64 {
    let pos = p.iter().filter(|x| x.label).count();
    let neg = p.len() - pos;
    let mut thresholds: Vec<f64> = p.iter().map(|x| x.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let rates = |th: f64| {
        let fp = p.iter().filter(|x| !x.label && x.score >= th).count();
        let fneg = p.iter().filter(|x| x.label && x.score < th).count();
        (fp as f64 / neg as f64, fneg as f64 / pos as f64)
    };
    let mut prev = rates(f64::INFINITY);
    for th in thresholds {
        let cur = rates(th);
        if cur.1 <= cur.0 {
            let (d0, d1) = (prev.1 - prev.0, cur.1 - cur.0);
            if d0 == d1 {
                return 100.0 * prev.0;
            }
            return 100.0 * (prev.0 + d0 / (d0 - d1) * (cur.0 - prev.0));
        }
        prev = cur;
    }
    unreachable!("the lowest threshold accepts everything")
}

/// A random score set with both classes, coarse enough to contain ties.
pub fn random_scores(r: &mut ChaCha8Rng) -> Vec<ScoredPair> {
    let n = r.gen_range(2..120);
    let levels = r.gen_range(2..40);
    let mut v: Vec<(f64, bool)> = (0..n).map(|_| (r.gen_range(0..levels) as f64 / levels as f64, r.gen_bool(0.4))).collect();
    v[0].1 = true;
    v[1].1 = false;
    scored(&v)
}

/// Gaps between consecutive predictions and budget overruns of the
/// scheduler with `k` participants and room for `c` per tick.
pub struct SchedulerRun {
    pub gaps: std::collections::BTreeSet<u64>,
    pub overruns: usize,
    pub mischarged: usize,
}

pub fn scheduler_run(k: u64, c: u64, ticks: u64) -> SchedulerRun {
    let cost = CostModel::default();
    let budget = cost.budget_for(c);
    let mut s = Scheduler::new(cost);
    let active: Vec<u64> = (100..100 + k).collect();
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let mut run = SchedulerRun { gaps: Default::default(), overruns: 0, mischarged: 0 };
    for tick in 0..ticks {
        let t = s.schedule_tick(tick, &active, budget);
        run.overruns += usize::from(t.spent_kflops > budget);
        run.mischarged += usize::from(t.spent_kflops != cost.tick_cost(t.selected.len() as u64));
        for id in t.selected {
            // warm-up: everyone has been predicted once by tick k
            if let Some(prev) = last.insert(id, tick) {
                if tick >= k {
                    run.gaps.insert(tick - prev);
                }
            }
        }
    }
    run
}
