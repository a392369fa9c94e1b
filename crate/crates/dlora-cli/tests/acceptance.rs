//! Whole-system checks of the guarantees the split tuning runtime makes:
//! the wire protocol never changes the math, gradients are exact, the
//! scheduler honors its budget, costs scale linearly in the active-module
//! count, quantization saves what it should and errs no more than its grid,
//! kill-and-revive learns competitively, both transports log identically,
//! malformed frames die loudly, and no raw tokens ever cross the link.

use std::io::BufRead;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use dlora_core::cost::EpochCosts;
use dlora_core::model::{Backbone, ModelConfig};
use dlora_core::peft::{PeftConfig, PeftKind, PeftModule};
use dlora_core::protocol::{
    decode_frame, dequantize, encode_frame, quantize, FrameTransport, FrozenPolicy, QuantBits,
    Site, TransportError, WireMessage,
};
use dlora_core::rng::{normal_tensor, Rng};
use dlora_core::runtime::{
    edge_train_session, finetune_local, pretrain_backbone, serve_cloud, CloudOutcome, EdgeCompute,
    EpochRecord, Exchange, MetricsSink, NoMetrics, PretrainSpec, RuntimeError, Sample, StepRecord,
    TrainSpec,
};
use dlora_core::scalar::Dtype;
use dlora_core::scheduler::{select_active, ModuleStatus, TuneMode};
use dlora_core::tensor::Tensor;

// ---- shared plumbing ----

/// In-process frame link: two of these, cross-wired over mpsc channels,
/// behave like a lossless ordered socket.
struct ChannelTransport {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        ChannelTransport { tx: a_tx, rx: a_rx },
        ChannelTransport { tx: b_tx, rx: b_rx },
    )
}

impl FrameTransport for ChannelTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        self.rx.recv().map_err(|_| TransportError::Closed)
    }
}

/// Records every frame that crosses the link, in both directions.
struct CaptureTransport<T: FrameTransport> {
    inner: T,
    frames: Vec<Vec<u8>>,
}

impl<T: FrameTransport> FrameTransport for CaptureTransport<T> {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.frames.push(frame.to_vec());
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        let frame = self.inner.recv()?;
        self.frames.push(frame.clone());
        Ok(frame)
    }
}

fn spawn_cloud(
    backbone: &Backbone<f32>,
    mut transport: ChannelTransport,
) -> JoinHandle<Result<CloudOutcome, RuntimeError>> {
    let cloud = backbone.cloud.clone();
    let config = backbone.config;
    std::thread::spawn(move || serve_cloud(&mut transport, &cloud, &config))
}

#[derive(Default)]
struct VecSink {
    steps: Vec<StepRecord>,
    epochs: Vec<EpochSnapshot>,
}

struct EpochSnapshot {
    epoch: u32,
    status: Vec<ModuleStatus>,
    costs: EpochCosts,
}

impl MetricsSink for VecSink {
    fn on_step(&mut self, rec: &StepRecord) {
        self.steps.push(*rec);
    }

    fn on_epoch(&mut self, rec: &EpochRecord<'_>) {
        self.epochs.push(EpochSnapshot {
            epoch: rec.epoch,
            status: rec.status.to_vec(),
            costs: rec.costs,
        });
    }
}

fn active_count(status: &[ModuleStatus]) -> usize {
    status
        .iter()
        .filter(|s| **s == ModuleStatus::Active)
        .count()
}

/// `[segment, separator, segment]` rows; scoring starts at the separator, so
/// the model is graded exactly on reproducing the segment.
fn copy_samples(seed: u64, n: usize, vocab: usize, seg_len: usize) -> Vec<Sample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let seg: Vec<u32> = (0..seg_len)
                .map(|_| rng.next_below(vocab as u64 - 1) as u32)
                .collect();
            let mut tokens = seg.clone();
            tokens.push(vocab as u32 - 1);
            tokens.extend_from_slice(&seg);
            Sample::new(tokens, seg_len).expect("well-formed copy sample")
        })
        .collect()
}

/// Rows of uniform random tokens over the whole vocabulary, scored over the
/// second half. A worst-case traffic pattern with no learnable structure.
fn random_samples(seed: u64, n: usize, vocab: usize, len: usize) -> Vec<Sample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let tokens: Vec<u32> = (0..len)
                .map(|_| rng.next_below(vocab as u64) as u32)
                .collect();
            Sample::new(tokens, len / 2).expect("well-formed random sample")
        })
        .collect()
}

fn lora4() -> PeftConfig {
    PeftConfig {
        kind: PeftKind::Lora,
        rank: 4,
        adapter_dim: 16,
        alpha: 1.0,
    }
}

fn small_8_layer() -> ModelConfig {
    ModelConfig {
        vocab: 16,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 8,
        max_seq: 16,
    }
}

// ---- split vs monolithic ----

/// The message-passing runtime must not change the math: the same job run
/// once in-process and once as two nodes exchanging frames produces
/// bit-identical per-step losses for all 50 steps.
#[test]
fn split_runtime_matches_monolithic_reference_bit_for_bit() {
    let started = Instant::now();
    let config = ModelConfig::desk();
    let backbone = Backbone::<f32>::init(config, 7).expect("init backbone");
    // 80 samples / batch 8 = 10 steps per pass; 10 warmup + 4 epochs = 50.
    let samples = random_samples(42, 80, config.vocab, config.max_seq);
    let spec = TrainSpec {
        peft: lora4(),
        mode: TuneMode::Ft,
        budget: config.n_layers,
        policy: FrozenPolicy::SkipFrozen,
        quant: QuantBits::Bits32,
        lr: 3e-4,
        epochs: 4,
        warmup_steps: 10,
        batch_size: 8,
        module_seed: 42 ^ 0x9e37_79b9_7f4a_7c15,
        model_seed: 7,
        initial_status: None,
    };

    let mut mono_sink = VecSink::default();
    let (mono, _) = finetune_local(&backbone, &spec, &samples, Exchange::Direct, &mut mono_sink)
        .expect("monolithic run");

    let (mut edge_t, cloud_t) = channel_pair();
    let cloud = spawn_cloud(&backbone, cloud_t);
    let mut split_sink = VecSink::default();
    let split = edge_train_session(
        &mut edge_t,
        &backbone.edge,
        &config,
        &spec,
        &samples,
        &mut split_sink,
    );
    drop(edge_t); // unblock the cloud if the edge failed mid-session
    cloud.join().expect("cloud thread").expect("cloud session");
    let split = split.expect("split run");

    assert_eq!(mono_sink.steps.len(), 50);
    assert_eq!(split_sink.steps.len(), 50);
    for (a, b) in mono_sink.steps.iter().zip(&split_sink.steps) {
        assert_eq!(
            a.loss.to_bits(),
            b.loss.to_bits(),
            "step {} loss diverged: {} vs {}",
            a.step,
            a.loss,
            b.loss
        );
    }
    assert_eq!(
        mono.final_loss.map(f64::to_bits),
        split.final_loss.map(f64::to_bits)
    );
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(120),
        "both runs took {elapsed:?}, budget is two minutes"
    );
}

// ---- gradient correctness ----

/// Every module parameter's analytic gradient agrees with a central finite
/// difference of the loss, for both module families, in 64-bit arithmetic.
#[test]
fn module_gradients_match_finite_differences() {
    let started = Instant::now();
    let config = ModelConfig {
        vocab: 16,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 2,
        max_seq: 16,
    };
    let backbone = Backbone::<f64>::init(config, 11).expect("init backbone");
    let batch = random_samples(5, 2, config.vocab, 8);
    let policy = FrozenPolicy::SkipFrozen;
    let all_active = vec![ModuleStatus::Active; config.n_layers];

    let families = [
        PeftConfig {
            kind: PeftKind::Lora,
            rank: 4,
            adapter_dim: 16,
            alpha: 1.0,
        },
        PeftConfig {
            kind: PeftKind::Adapter,
            rank: 4,
            adapter_dim: 8,
            alpha: 1.0,
        },
    ];
    for peft in families {
        let mut compute = EdgeCompute::<f64>::new(config, peft, policy, 99, 1e-3, 100);
        // Both families initialize their up/output weights to zero so a fresh
        // module is a no-op; redraw everything so no gradient is structurally
        // zero and the check is non-vacuous.
        let mut rng = Rng::new(17);
        for module in compute.modules_mut() {
            for p in module.params_mut() {
                let dims = p.dims().to_vec();
                *p = normal_tensor(&mut rng, &dims, 0.3);
            }
        }
        let reference: Vec<PeftModule<f64>> = compute.modules().to_vec();

        let (_, grads) = compute
            .batch_grads(&backbone.edge, &backbone.cloud, &batch)
            .expect("analytic gradients");

        let loss_at = |modules: Vec<PeftModule<f64>>| -> f64 {
            let mut probe =
                EdgeCompute::for_eval(config, peft, policy, modules, all_active.clone())
                    .expect("probe compute");
            probe
                .batch_loss(&backbone.edge, &backbone.cloud, &batch)
                .expect("probe loss")
        };

        let h = 1e-4;
        let mut checked = 0usize;
        for (layer, layer_grads) in grads.iter().enumerate() {
            let layer_grads = layer_grads
                .as_ref()
                .expect("every active module reports gradients");
            for (pi, g) in layer_grads.iter().enumerate() {
                for i in 0..g.numel() {
                    let mut plus = reference.clone();
                    plus[layer].params_mut()[pi].data_mut()[i] += h;
                    let mut minus = reference.clone();
                    minus[layer].params_mut()[pi].data_mut()[i] -= h;
                    let fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
                    let a = g.data()[i];
                    // Below 1e-4 the difference quotient's own truncation and
                    // cancellation noise (~1e-9 here) dominates any genuine
                    // relative comparison, so tiny gradients are held to an
                    // absolute 1e-9 instead.
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                    assert!(
                        rel <= 1e-5,
                        "{:?} layer {layer} param {pi} [{i}]: analytic {a:e} vs fd {fd:e} (rel {rel:e})",
                        peft.kind
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 500, "{:?}: only {checked} parameters", peft.kind);
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "gradient check took {elapsed:?}, budget is one minute"
    );
}

// ---- scheduler budget ----

/// Kill-and-revive holds exactly its budget after every epoch boundary of a
/// real training run, for both budgets.
#[test]
fn kr_keeps_exactly_the_budget_active_after_every_epoch() {
    let config = small_8_layer();
    let backbone = Backbone::<f32>::init(config, 3).expect("init backbone");
    let samples = copy_samples(42, 16, config.vocab, 3);
    for budget in [2usize, 4] {
        let spec = TrainSpec {
            peft: lora4(),
            mode: TuneMode::Kr,
            budget,
            policy: FrozenPolicy::SkipFrozen,
            quant: QuantBits::Bits32,
            lr: 1e-3,
            epochs: 4,
            warmup_steps: 4,
            batch_size: 4,
            module_seed: 42 ^ 0x9e37_79b9_7f4a_7c15,
            model_seed: 3,
            initial_status: None,
        };
        let mut sink = VecSink::default();
        let (result, _) = finetune_local(&backbone, &spec, &samples, Exchange::Direct, &mut sink)
            .expect("kr run");
        assert_eq!(sink.epochs.len(), 5, "warmup boundary plus four epochs");
        for ep in &sink.epochs {
            assert_eq!(
                active_count(&ep.status),
                budget,
                "epoch {} boundary left {} modules active, budget {budget}",
                ep.epoch,
                active_count(&ep.status)
            );
        }
        assert_eq!(active_count(&result.status), budget);
    }
}

/// The selection rule agrees with an exhaustive search over every subset of
/// the given size, across 1,000 random score vectors of every length up to 8.
#[test]
fn selection_matches_a_brute_force_top_b_oracle() {
    fn brute_force(scores: &[f64], budget: usize) -> Vec<usize> {
        let l = scores.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << l) {
            if mask.count_ones() as usize != budget {
                continue;
            }
            let idx: Vec<usize> = (0..l).filter(|i| mask >> i & 1 == 1).collect();
            let total: f64 = idx.iter().map(|&i| scores[i]).sum();
            if best.as_ref().is_none_or(|(t, _)| total > *t) {
                best = Some((total, idx));
            }
        }
        best.expect("budget is at most the length").1
    }

    let mut rng = Rng::new(7);
    for trial in 0..1000 {
        let l = 1 + rng.next_below(8) as usize;
        let budget = 1 + rng.next_below(l as u64) as usize;
        let scores: Vec<f64> = (0..l).map(|_| rng.next_f64()).collect();
        let picked: Vec<usize> = select_active(&scores, budget)
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == ModuleStatus::Active)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(picked.len(), budget, "trial {trial}");
        assert_eq!(
            picked,
            brute_force(&scores, budget),
            "trial {trial}: scores {scores:?}, budget {budget}"
        );
    }

    // Ties break toward the lower module index.
    assert_eq!(
        select_active(&[1.0, 1.0, 1.0], 2),
        vec![
            ModuleStatus::Active,
            ModuleStatus::Active,
            ModuleStatus::Killed
        ]
    );
}

// ---- linear cost scaling ----

/// With frozen modules skipped, the per-epoch module traffic and module
/// FLOPs are affine in the active count: running half the modules costs
/// exactly half, once the B-independent floor (embedding upload, logits,
/// loss gradient, boundary frames) is measured and subtracted.
#[test]
fn per_epoch_module_costs_scale_exactly_with_the_active_count() {
    let config = small_8_layer();
    let backbone = Backbone::<f32>::init(config, 3).expect("init backbone");
    let samples = copy_samples(42, 8, config.vocab, 3);
    let base = TrainSpec {
        peft: lora4(),
        mode: TuneMode::Ft,
        budget: config.n_layers,
        policy: FrozenPolicy::SkipFrozen,
        quant: QuantBits::Bits32,
        lr: 3e-4,
        epochs: 2,
        warmup_steps: 2,
        batch_size: 4,
        module_seed: 42 ^ 0x9e37_79b9_7f4a_7c15,
        model_seed: 3,
        initial_status: None,
    };
    let run = |spec: &TrainSpec| -> Vec<EpochSnapshot> {
        let mut sink = VecSink::default();
        finetune_local(
            &backbone,
            spec,
            &samples,
            Exchange::Codec(QuantBits::Bits32),
            &mut sink,
        )
        .expect("cost run");
        sink.epochs
    };

    let all_eight = run(&base);
    let mut none_spec = base.clone();
    none_spec.initial_status = Some(vec![ModuleStatus::Killed; config.n_layers]);
    let none = run(&none_spec);
    let mut kr_spec = base.clone();
    kr_spec.mode = TuneMode::Kr;
    kr_spec.budget = 4;
    let kr_half = run(&kr_spec);

    // The scheduler's boundary frames depend only on the layer count; measure
    // them once. They exist in scheduled modes but not in full tuning.
    let report_len = encode_frame::<f32>(
        &WireMessage::NormReport {
            norms: vec![1.0; config.n_layers],
        },
        QuantBits::Bits32,
    )
    .len() as u64;
    let command_len = encode_frame::<f32>(
        &WireMessage::Command {
            status: vec![ModuleStatus::Active; config.n_layers],
        },
        QuantBits::Bits32,
    )
    .len() as u64;

    for e in 1..=2usize {
        assert_eq!(active_count(&kr_half[e].status), 4);
        let (full, floor, half) = (&all_eight[e].costs, &none[e].costs, &kr_half[e].costs);

        let full_flops = full.edge_flops - floor.edge_flops;
        assert_eq!(full_flops % 2, 0);
        assert_eq!(
            half.edge_flops - floor.edge_flops,
            full_flops / 2,
            "epoch {e}: module FLOPs are not half of full tuning's"
        );

        let full_up = full.bytes_to_cloud - floor.bytes_to_cloud;
        assert_eq!(full_up % 2, 0);
        assert_eq!(
            half.bytes_to_cloud - report_len - floor.bytes_to_cloud,
            full_up / 2,
            "epoch {e}: edge-to-cloud module bytes are not half of full tuning's"
        );

        let full_down = full.bytes_to_edge - floor.bytes_to_edge;
        assert_eq!(full_down % 2, 0);
        assert_eq!(
            half.bytes_to_edge - command_len - floor.bytes_to_edge,
            full_down / 2,
            "epoch {e}: cloud-to-edge module bytes are not half of full tuning's"
        );

        let full_frames = full.frames_sent - floor.frames_sent;
        assert_eq!(full_frames % 2, 0);
        // One extra edge-sent frame per boundary: the norm report.
        assert_eq!(half.frames_sent - 1 - floor.frames_sent, full_frames / 2);
    }
}

// ---- quantization ----

/// Swapping the codec from 32-bit to 8-bit on the very same job shrinks the
/// total link traffic by at least 3.9x (headers and the f32 scale keep it
/// just under 4).
#[test]
fn eight_bit_quantization_shrinks_link_traffic_by_nearly_four_x() {
    let config = ModelConfig::desk();
    let backbone = Backbone::<f32>::init(config, 7).expect("init backbone");
    let samples = random_samples(9, 16, config.vocab, config.max_seq);
    let run = |quant: QuantBits| -> u64 {
        let spec = TrainSpec {
            peft: lora4(),
            mode: TuneMode::Ft,
            budget: config.n_layers,
            policy: FrozenPolicy::SkipFrozen,
            quant,
            lr: 3e-4,
            epochs: 1,
            warmup_steps: 2,
            batch_size: 8,
            module_seed: 42 ^ 0x9e37_79b9_7f4a_7c15,
            model_seed: 7,
            initial_status: None,
        };
        let (result, _) = finetune_local(
            &backbone,
            &spec,
            &samples,
            Exchange::Codec(quant),
            &mut NoMetrics,
        )
        .expect("quant run");
        result.ledger.bytes_to_cloud + result.ledger.bytes_to_edge
    };
    let wide = run(QuantBits::Bits32);
    let narrow = run(QuantBits::Bits8);
    let ratio = wide as f64 / narrow as f64;
    assert!(
        ratio >= 3.9,
        "32-bit moved {wide} bytes, 8-bit moved {narrow}: ratio {ratio:.3}"
    );
}

/// Symmetric 8-bit quantization's round-trip error never exceeds half a
/// grid cell, max|x|/254, on ten thousand random tensors.
#[test]
fn quantization_round_trip_error_stays_inside_the_grid_bound() {
    let mut rng = Rng::new(12);
    for trial in 0..10_000 {
        let rank = 1 + rng.next_below(3) as usize;
        let dims: Vec<usize> = (0..rank).map(|_| 1 + rng.next_below(6) as usize).collect();
        // Magnitudes from 1e-3 to 1e+3 so the bound is exercised across scales.
        let magnitude = 10f64.powf(rng.next_f64() * 6.0 - 3.0);
        let t: Tensor<f64> = normal_tensor(&mut rng, &dims, magnitude);
        let max_abs = t.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let (scale, codes) = quantize(&t);
        let back: Tensor<f64> = dequantize(t.dims().to_vec(), scale, &codes);
        for (i, (a, b)) in t.data().iter().zip(back.data()).enumerate() {
            assert!(
                (a - b).abs() <= max_abs / 254.0,
                "trial {trial} [{i}]: {a} came back as {b}, max_abs {max_abs}"
            );
        }
    }

    // An all-zero tensor survives exactly.
    let zero: Tensor<f64> = Tensor::zeros(&[3, 4]);
    let (scale, codes) = quantize(&zero);
    assert_eq!(scale, 0.0);
    let back: Tensor<f64> = dequantize(vec![3, 4], scale, &codes);
    assert!(back.data().iter().all(|&v| v == 0.0));
}

// ---- learning dynamics ----

/// On the copy task from a pretrained backbone, kill-and-revive at half
/// budget stays within 1.2x of full tuning's final loss, and killing without
/// revival never beats kill-and-revive.
#[test]
fn revival_tracks_full_tuning_and_beats_permanent_killing() {
    // A four-block model pretrained partway into copy-task competence: the
    // loss still falls steeply, so which blocks get tuned matters. A one-step
    // warmup then gives the scheduler a deliberately noisy first ranking.
    // Killing on that ranking alone locks onto blocks that soon saturate;
    // revival notices the saturation and rotates the killed pair back in.
    let config = ModelConfig {
        vocab: 32,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        n_layers: 4,
        max_seq: 16,
    };
    let mut backbone = Backbone::<f32>::init(config, 7).expect("init backbone");
    let pretrain_data = copy_samples(999, 1024, config.vocab, 6);
    pretrain_backbone(
        &mut backbone,
        &PretrainSpec {
            lr: 1e-2,
            epochs: 4,
            batch_size: 16,
        },
        &pretrain_data,
        &mut NoMetrics,
    )
    .expect("pretrain");

    // Fresh draws from the same task: the fine-tune data is disjoint from the
    // pretraining set, so improvements mean adaptation rather than recall.
    let samples = copy_samples(42, 256, config.vocab, 6);
    let run = |mode: TuneMode, budget: usize| -> (f64, Vec<EpochSnapshot>) {
        let spec = TrainSpec {
            peft: lora4(),
            mode,
            budget,
            policy: FrozenPolicy::SkipFrozen,
            quant: QuantBits::Bits32,
            lr: 3e-2,
            epochs: 4,
            warmup_steps: 1,
            batch_size: 16,
            module_seed: 42 ^ 0x9e37_79b9_7f4a_7c15,
            model_seed: 7,
            initial_status: None,
        };
        let mut sink = VecSink::default();
        let (result, _) = finetune_local(&backbone, &spec, &samples, Exchange::Direct, &mut sink)
            .expect("dynamics run");
        (
            result.final_loss.expect("final epoch has steps"),
            sink.epochs,
        )
    };

    let (ft, _) = run(TuneMode::Ft, config.n_layers);
    let (kr, kr_epochs) = run(TuneMode::Kr, config.n_layers / 2);
    let (ek, ek_epochs) = run(TuneMode::Ek, config.n_layers / 2);

    assert!(
        kr <= 1.2 * ft,
        "half-budget revival fell behind: kr {kr:.6} vs ft {ft:.6}"
    );
    assert!(
        ek >= kr,
        "permanent killing beat revival: ek {ek:.6} vs kr {kr:.6}"
    );

    // Guard against a hollow pass: the comparison only means something if the
    // runs learned and the two schedules actually diverged.
    assert!(ft < 2.55 && kr < 2.55, "fine-tuning barely moved the loss");
    assert!(kr != ek, "revival and permanent killing never diverged");
    let ek_final = &ek_epochs.last().expect("ek epochs").status;
    let revived = kr_epochs.iter().skip(1).any(|e| {
        e.status
            .iter()
            .zip(ek_final.iter())
            .any(|(k, e)| *k == ModuleStatus::Active && *e == ModuleStatus::Killed)
    });
    assert!(
        revived,
        "revival never reactivated a block that permanent killing discarded"
    );
}

// ---- transport equivalence and robustness ----

/// Kills the server if the test dies before it finishes.
struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn dlora(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dlora"));
    cmd.args(args);
    cmd
}

fn run_ok(mut cmd: Command) {
    let out = cmd.output().expect("spawn dlora");
    assert!(
        out.status.success(),
        "command failed: {cmd:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A session over TCP loopback and the same session in one process write
/// byte-identical metrics logs.
#[test]
fn tcp_and_local_transports_write_identical_metrics() {
    let dir = tempfile::tempdir().expect("tempdir");
    let backbone = dir.path().join("backbone.dlbk");
    let backbone = backbone.to_str().expect("utf-8 path");
    run_ok(dlora(&[
        "init-backbone",
        "--out",
        backbone,
        "--seed",
        "7",
        "--n-layers",
        "2",
        "--d-model",
        "16",
        "--n-heads",
        "2",
        "--d-ff",
        "32",
        "--vocab",
        "16",
        "--max-seq",
        "16",
    ]));

    let session = |extra: &[&str], metrics: &str| {
        let mut args = vec![
            "finetune",
            "--backbone",
            backbone,
            "--mode",
            "kr",
            "--budget",
            "1",
            "--epochs",
            "2",
            "--n-samples",
            "8",
            "--batch-size",
            "4",
            "--seg-len",
            "3",
            "--quant-bits",
            "8",
            "--metrics",
            metrics,
        ];
        args.extend_from_slice(extra);
        run_ok(dlora(&args));
    };

    let local_log = dir.path().join("local.ndjson");
    session(&[], local_log.to_str().expect("utf-8 path"));

    let mut server = KillOnDrop(
        dlora(&[
            "serve-cloud",
            "--backbone",
            backbone,
            "--addr",
            "127.0.0.1:0",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .expect("spawn serve-cloud"),
    );
    let addr = {
        let stdout = server.0.stdout.take().expect("piped stdout");
        let mut line = String::new();
        std::io::BufReader::new(stdout)
            .read_line(&mut line)
            .expect("read listen line");
        line.trim()
            .strip_prefix("listening on ")
            .expect("listen line")
            .to_string()
    };

    let tcp_log = dir.path().join("tcp.ndjson");
    session(&["--addr", &addr], tcp_log.to_str().expect("utf-8 path"));
    let status = server.0.wait().expect("server exit");
    assert!(status.success(), "serve-cloud exited with {status}");

    let local_bytes = std::fs::read(&local_log).expect("read local log");
    let tcp_bytes = std::fs::read(&tcp_log).expect("read tcp log");
    assert!(!local_bytes.is_empty());
    assert_eq!(
        local_bytes, tcp_bytes,
        "metrics logs differ across transports"
    );
}

/// A thousand mutated frames — corrupted magic, truncations, bit flips,
/// byte splats — every one either decodes or returns an error; none panic,
/// and the magic/truncation classes are always rejected.
#[test]
fn corrupted_and_truncated_frames_fail_cleanly() {
    let tensor: Tensor<f32> = normal_tensor(&mut Rng::new(3), &[2, 4], 1.0);
    let config_spec = TrainSpec {
        peft: lora4(),
        mode: TuneMode::Kr,
        budget: 4,
        policy: FrozenPolicy::SkipFrozen,
        quant: QuantBits::Bits32,
        lr: 1e-3,
        epochs: 2,
        warmup_steps: 2,
        batch_size: 4,
        module_seed: 1,
        model_seed: 3,
        initial_status: None,
    };
    let messages: Vec<WireMessage<f32>> = vec![
        WireMessage::Config(config_spec.wire_config(&small_8_layer(), Dtype::F32)),
        WireMessage::FwdActivation {
            layer: 0,
            site: Site::QkvInput,
            tensor: tensor.clone(),
        },
        WireMessage::FwdDelta {
            layer: 1,
            tensors: vec![tensor.clone(), tensor.clone(), tensor.clone()],
        },
        WireMessage::LogitsToEdge {
            tensor: tensor.clone(),
        },
        WireMessage::LossGradToCloud {
            loss: 1.25,
            tensor: tensor.clone(),
        },
        WireMessage::BwdGrad {
            layer: 0,
            site: Site::QkvInput,
            tensors: vec![tensor.clone(), tensor.clone(), tensor.clone()],
        },
        WireMessage::BwdDeltaGrad {
            layer: 2,
            tensor: tensor.clone(),
        },
        WireMessage::NormReport {
            norms: vec![0.5; 8],
        },
        WireMessage::Command {
            status: vec![ModuleStatus::Active; 8],
        },
        WireMessage::EpochEnd { epoch: 3 },
        WireMessage::Shutdown,
    ];
    let mut base: Vec<Vec<u8>> = Vec::new();
    for m in &messages {
        base.push(encode_frame(m, QuantBits::Bits32));
        base.push(encode_frame(m, QuantBits::Bits8));
    }

    let mut rng = Rng::new(2024);
    let mut rejected = 0usize;
    for trial in 0..1000 {
        let mut frame = base[rng.next_below(base.len() as u64) as usize].clone();
        let class = rng.next_below(4);
        match class {
            0 => frame[..4].copy_from_slice(b"XXXX"),
            1 => {
                let keep = rng.next_below(frame.len() as u64) as usize;
                frame.truncate(keep);
            }
            2 => {
                let i = rng.next_below(frame.len() as u64) as usize;
                frame[i] ^= 1 << rng.next_below(8);
            }
            _ => {
                let i = rng.next_below(frame.len() as u64) as usize;
                frame[i] = rng.next_u64() as u8;
            }
        }
        let outcome = decode_frame::<f32>(&frame);
        match class {
            0 => assert!(outcome.is_err(), "trial {trial}: corrupted magic decoded"),
            1 => assert!(outcome.is_err(), "trial {trial}: truncated frame decoded"),
            // A flipped payload bit can still be a valid frame; it only must
            // not panic (reaching this line at all proves that).
            _ => {}
        }
        if outcome.is_err() {
            rejected += 1;
        }
    }
    assert!(rejected >= 500, "only {rejected} of 1000 mutants rejected");

    // End to end: a serving cloud confronted with a corrupted handshake
    // aborts with an error instead of hanging or crashing.
    let backbone = Backbone::<f32>::init(small_8_layer(), 3).expect("init backbone");
    let (mut edge_t, cloud_t) = channel_pair();
    let cloud = spawn_cloud(&backbone, cloud_t);
    let mut bad = base[0].clone();
    bad[..4].copy_from_slice(b"XXXX");
    edge_t.send(&bad).expect("send corrupt frame");
    drop(edge_t);
    let outcome = cloud.join().expect("cloud thread");
    assert!(outcome.is_err(), "cloud accepted a corrupted handshake");
}

// ---- privacy ----

/// Captures every frame of a full kill-and-revive session and verifies none
/// of them contains the raw token ids or labels, in any byte rendering.
#[test]
fn no_frame_carries_raw_tokens_or_labels() {
    fn contains(haystack: &[u8], needle: &[u8]) -> bool {
        !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
    }

    let config = small_8_layer();
    let backbone = Backbone::<f32>::init(config, 3).expect("init backbone");
    let samples = copy_samples(42, 8, config.vocab, 3);
    let spec = TrainSpec {
        peft: lora4(),
        mode: TuneMode::Kr,
        budget: 4,
        policy: FrozenPolicy::SkipFrozen,
        quant: QuantBits::Bits32,
        lr: 1e-3,
        epochs: 4,
        warmup_steps: 2,
        batch_size: 4,
        module_seed: 42 ^ 0x9e37_79b9_7f4a_7c15,
        model_seed: 3,
        initial_status: None,
    };

    let (edge_t, cloud_t) = channel_pair();
    let cloud = spawn_cloud(&backbone, cloud_t);
    let mut capture = CaptureTransport {
        inner: edge_t,
        frames: Vec::new(),
    };
    let result = edge_train_session(
        &mut capture,
        &backbone.edge,
        &config,
        &spec,
        &samples,
        &mut VecSink::default(),
    );
    let frames = capture.frames;
    drop(capture.inner);
    cloud.join().expect("cloud thread").expect("cloud session");
    result.expect("edge session");

    assert!(frames.len() > 100, "expected a full session's traffic");
    for (i, frame) in frames.iter().enumerate() {
        decode_frame::<f32>(frame).unwrap_or_else(|e| panic!("frame {i} malformed: {e}"));
    }
    for sample in &samples {
        let as_u32: Vec<u8> = sample.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        let as_u8: Vec<u8> = sample.tokens.iter().map(|&t| t as u8).collect();
        for (i, frame) in frames.iter().enumerate() {
            assert!(
                !contains(frame, &as_u32),
                "frame {i} carries a token sequence as little-endian words"
            );
            assert!(
                !contains(frame, &as_u8),
                "frame {i} carries a token sequence as bytes"
            );
        }
    }
}
