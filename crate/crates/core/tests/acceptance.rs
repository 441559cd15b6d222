//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! ```bash
//! cargo test --test acceptance
//! ```

use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use gpt_stain::autograd::Tape;
use gpt_stain::checkpoint::Checkpoint;
use gpt_stain::cli::{run, Cli};
use gpt_stain::data_io::{decode_pgm, encode_pgm, GrayImage};
use gpt_stain::dense_block::{concat_width, dense_forward, DenseBlockParams, DEFAULT_GROWTH};
use gpt_stain::evaluation::{pearson, sampled_pearson_pooled, value_bin, EvalOptions, TaskReport};
use gpt_stain::gpt_layer::{gpt_forward, gpt_layer, GptLayerParams, GptVariant};
use gpt_stain::gradcheck::{end_to_end_checks, op_checks};
use gpt_stain::inference::{coverage_map, predict_image};
use gpt_stain::network::{Network, NetworkConfig};
use gpt_stain::params::{ConvParams, Mode};
use gpt_stain::tensor::{conv2d, decode_gptt, encode_gptt, RawTensor};
use gpt_stain::training::{read_loss_log, TrainConfig, Trainer};
use gpt_stain::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn shape_ledger() -> Outcome {
    let config = NetworkConfig::default();
    let ledger = config.ledger();
    let spatial: Vec<usize> = ledger.iter().map(|r| r.spatial).collect();
    let channels: Vec<usize> = ledger.iter().map(|r| r.channels).collect();
    ensure(spatial == [128, 64, 32, 16, 16, 32, 64, 128, 128], || {
        format!("spatial {spatial:?}")
    })?;
    let head = config.task_count * 256;
    ensure(channels == [32, 64, 128, 256, 384, 288, 165, 90, head], || {
        format!("channels {channels:?}")
    })?;

    // The allocated parameters must agree with the ledger.
    let net = Network::<f32>::new(config.clone(), 0).map_err(|e| e.to_string())?;
    let cout = |name: &str| net.params.get(name).map(|t| t.shape().c);
    let built = [
        "stem.conv.weight",
        "enc0.db.out.weight",
        "enc1.db.out.weight",
        "enc2.db.out.weight",
        "bottom.db.out.weight",
        "dec0.db.out.weight",
        "dec1.db.out.weight",
        "dec2.db.out.weight",
        "head.conv.weight",
    ]
    .map(cout);
    ensure(built.iter().zip(&channels).all(|(b, &c)| *b == Some(c)), || {
        format!("built widths {built:?}")
    })?;
    Ok(format!(
        "{} stages, {} parameters",
        ledger.len(),
        config.parameter_count()
    ))
}

/// Generator output at one query position, computed tap by tap.
fn query_at(x: &Tensor<f32>, p: &ConvParams<f32>, variant: GptVariant, oy: usize, ox: usize) -> Vec<f64> {
    let s = x.shape();
    let (k, cin, cq) = (p.kernel(), p.cin(), p.cout());
    let w = |ky: usize, kx: usize, ci: usize, co: usize| {
        p.weight.data()[((ky * k + kx) * cin + ci) * cq + co] as f64
    };
    let mut q: Vec<f64> = p.bias.data().iter().map(|&b| b as f64).collect();
    let mut tap = |iy: isize, ix: isize, ky: usize, kx: usize| {
        if iy < 0 || ix < 0 || iy as usize >= s.h || ix as usize >= s.w {
            return;
        }
        for ci in 0..cin {
            let v = x.get(0, iy as usize, ix as usize, ci) as f64;
            for (co, qv) in q.iter_mut().enumerate() {
                *qv += v * w(ky, kx, ci, co);
            }
        }
    };
    match variant {
        GptVariant::Same | GptVariant::Down => {
            let stride = if variant == GptVariant::Same { 1 } else { 2 };
            // Same padding: output ceil(L / stride), surplus padding on the far side.
            let pad =
                |len: usize| (((len.div_ceil(stride) - 1) * stride + k).saturating_sub(len) / 2) as isize;
            let (pt, pl) = (pad(s.h), pad(s.w));
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pt;
                    let ix = (ox * stride + kx) as isize - pl;
                    tap(iy, ix, ky, kx);
                }
            }
        }
        GptVariant::Up => {
            // Transpose of a stride-2 same convolution on the 2H x 2W grid:
            // input pixel i scatters to output 2i + t - pad.
            let pad = |len: usize| (((len - 1) * 2 + k).saturating_sub(2 * len) / 2) as isize;
            let (pt, pl) = (pad(s.h), pad(s.w));
            for ky in 0..k {
                for kx in 0..k {
                    let ny = oy as isize + pt - ky as isize;
                    let nx = ox as isize + pl - kx as isize;
                    if ny >= 0 && nx >= 0 && ny % 2 == 0 && nx % 2 == 0 {
                        tap(ny / 2, nx / 2, ky, kx);
                    }
                }
            }
        }
    }
    q
}

fn pointwise(x: &Tensor<f32>, p: &ConvParams<f32>, y: usize, xx: usize) -> Vec<f64> {
    let (cin, cout) = (p.cin(), p.cout());
    (0..cout)
        .map(|co| {
            p.bias.data()[co] as f64
                + (0..cin)
                    .map(|ci| x.get(0, y, xx, ci) as f64 * p.weight.data()[ci * cout + co] as f64)
                    .sum::<f64>()
        })
        .collect()
}

/// Scalar reference: each output position is the softmax-weighted average
/// of the value vectors at all input positions.
fn reference_layer(x: &Tensor<f32>, p: &GptLayerParams<f32>) -> Tensor<f64> {
    let s = x.shape();
    let positions: Vec<(usize, usize)> = (0..s.h).flat_map(|y| (0..s.w).map(move |x| (y, x))).collect();
    let keys: Vec<Vec<f64>> = positions
        .iter()
        .map(|&(y, xx)| pointwise(x, &p.key, y, xx))
        .collect();
    let values: Vec<Vec<f64>> = positions
        .iter()
        .map(|&(y, xx)| pointwise(x, &p.value, y, xx))
        .collect();
    let (oh, ow) = p.variant.output_size(s.h, s.w);
    let cv = p.cv();
    let mut out = Tensor::zeros(Shape::new(1, oh, ow, cv));
    for oy in 0..oh {
        for ox in 0..ow {
            let q = query_at(x, &p.generator, p.variant, oy, ox);
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = weights.iter().sum();
            for c in 0..cv {
                let v: f64 = weights.iter().zip(&values).map(|(a, v)| a / z * v[c]).sum();
                out.set(0, oy, ox, c, v);
            }
        }
    }
    out
}

fn random_layer(variant: GptVariant, cin: usize, rng: &mut ChaCha8Rng) -> GptLayerParams<f32> {
    let cq = rng.random_range(1..=4);
    let cv = rng.random_range(1..=4);
    let mut p = GptLayerParams::init(variant, cin, cq, cv, rng);
    for conv in [&mut p.generator, &mut p.key, &mut p.value] {
        let s = conv.bias.shape();
        conv.bias = uniform(s, rng).map(|v| 0.2 * v);
    }
    p
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let trials = 120;
    for variant in [GptVariant::Down, GptVariant::Same, GptVariant::Up] {
        for _ in 0..trials {
            let (h, w, c) = (
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=4),
            );
            let x = uniform(Shape::new(1, h, w, c), &mut rng);
            let p = random_layer(variant, c, &mut rng);
            let got = gpt_forward(&x, &p).map_err(|e| e.to_string())?;
            let want = reference_layer(&x, &p);
            ensure(got.shape() == want.shape(), || {
                format!("{variant:?} shape {} vs {}", got.shape(), want.shape())
            })?;
            for (a, b) in got.data().iter().zip(want.data()) {
                worst = worst.max((*a as f64 - b).abs());
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max abs deviation {worst:.3e}"))?;
    Ok(format!(
        "{trials} trials per variant, max abs deviation {worst:.2e}"
    ))
}

fn gradient_suite() -> Outcome {
    let mut rows = op_checks(0).map_err(|e| e.to_string())?;
    let ops = rows.len();
    rows.extend(end_to_end_checks(&NetworkConfig::gradcheck(), 0).map_err(|e| e.to_string())?);
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    ensure(failed.is_empty(), || format!("failed rows {failed:?}"))?;
    let worst_op = rows[..ops].iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let worst_net = rows[ops..].iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(format!(
        "{ops} op rows (worst {worst_op:.1e} <= 1e-4), {} network rows (worst {worst_net:.1e} <= 1e-3)",
        rows.len() - ops
    ))
}

fn convexity_and_globality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for variant in [GptVariant::Down, GptVariant::Same, GptVariant::Up] {
        for _ in 0..100 {
            let (h, w, c) = (
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=4),
            );
            let x = uniform(Shape::new(1, h, w, c), &mut rng).map(|v| 3.0 * v);
            let p = random_layer(variant, c, &mut rng);
            let out = gpt_forward(&x, &p).map_err(|e| e.to_string())?;
            let values = conv2d(&x, &p.value.weight, Some(&p.value.bias), 1).map_err(|e| e.to_string())?;
            let cv = p.cv();
            for ch in 0..cv {
                let col = values.data().iter().skip(ch).step_by(cv);
                let (lo, hi) = col.fold((f32::MAX, f32::MIN), |(l, u), &v| (l.min(v), u.max(v)));
                for &o in out.data().iter().skip(ch).step_by(cv) {
                    ensure(o >= lo - 1e-6 && o <= hi + 1e-6, || {
                        format!("{variant:?}: output {o} outside [{lo}, {hi}]")
                    })?;
                }
            }
        }
    }

    // Every output of a same-size layer depends on one perturbed input pixel.
    let (h, w, c) = (8, 8, 4);
    let x = Tensor::<f64>::from_fn(Shape::new(1, h, w, c), |_, _, _, _| rng.random_range(-1.0..1.0));
    let p = GptLayerParams::<f64>::init_default(GptVariant::Same, c, &mut rng);
    let probe = (5usize, 2usize);
    let mut smallest = f64::MAX;
    for oy in 0..h {
        for ox in 0..w {
            let mut tape = Tape::new(0);
            let xv = tape.param(x.clone());
            let vars = p.bind(&mut tape, false);
            let y = gpt_layer(&mut tape, xv, &vars).map_err(|e| e.to_string())?;
            let sel = Tensor::from_fn(Shape::new(1, h, w, p.cv()), |_, yy, xx, _| {
                ((yy, xx) == (oy, ox)) as u8 as f64
            });
            let l = tape.weighted_sum(y, sel).map_err(|e| e.to_string())?;
            let grads = tape.backward(l).map_err(|e| e.to_string())?;
            let g = grads.get(xv).ok_or("no input gradient")?;
            let norm: f64 = (0..c)
                .map(|ch| g.get(0, probe.0, probe.1, ch).powi(2))
                .sum::<f64>()
                .sqrt();
            smallest = smallest.min(norm);
        }
    }
    ensure(smallest > 0.0, || {
        "an output ignores the probed input pixel".into()
    })?;
    Ok(format!(
        "300 layers within value range; min gradient norm over 64 outputs {smallest:.2e}"
    ))
}

fn dense_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (c0, l, k) = (
            rng.random_range(1..=12),
            rng.random_range(0..=5),
            rng.random_range(1..=8),
        );
        let block = DenseBlockParams::<f32>::init(c0, l, k, 3, 0.5, &mut rng);
        ensure(block.out.cin() == c0 + l * k, || {
            format!("({c0}, {l}, {k}) -> {}", block.out.cin())
        })?;
        let x = uniform(Shape::new(1, 3, 3, c0), &mut rng);
        dense_forward(&x, &block, Mode::Train, 0).map_err(|e| format!("({c0}, {l}, {k}): {e}"))?;
    }
    for (c0, l, want) in [(32, 2, 64), (64, 4, 128), (128, 8, 256), (256, 8, 384)] {
        ensure(concat_width(c0, l, DEFAULT_GROWTH) == want, || {
            format!("{c0}+{l}*16")
        })?;
        let block = DenseBlockParams::<f32>::init(c0, l, DEFAULT_GROWTH, want, 0.5, &mut rng);
        ensure(block.out.cin() == want, || {
            format!("{c0}+{l}*16 built {}", block.out.cin())
        })?;
        let x = uniform(Shape::new(1, 2, 2, c0), &mut rng);
        dense_forward(&x, &block, Mode::Eval, 0).map_err(|e| e.to_string())?;
    }
    let net = NetworkConfig::default();
    let built = Network::<f32>::new(net, 0).map_err(|e| e.to_string())?;
    let widths: Vec<usize> = ["enc0", "enc1", "enc2", "bottom"]
        .iter()
        .map(|b| {
            built
                .params
                .get(&format!("{b}.db.out.weight"))
                .map_or(0, |t| t.shape().w)
        })
        .collect();
    ensure(widths == [64, 128, 256, 384], || {
        format!("default network concat widths {widths:?}")
    })?;
    Ok("50 random blocks plus 64 / 128 / 256 / 384".into())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["gpt-stain", "--threads", "1"];
    argv.extend_from_slice(args);
    let parsed = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
    run(parsed).map_err(|e| e.to_string())
}

fn overfit_run() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |s: &str| dir.path().join(s).display().to_string();
    let data = path("data");
    cli(&[
        "synth",
        "--out",
        &data,
        "--samples",
        "4",
        "--size",
        "128",
        "--tasks",
        "0,1",
        "--seed",
        "0",
    ])?;
    let manifest = format!("{data}/manifest.json");
    let mut runs = Vec::new();
    for name in ["run_a", "run_b"] {
        let out = path(name);
        cli(&[
            "train",
            "--manifest",
            &manifest,
            "--preset",
            "tiny",
            "--steps",
            "200",
            "--seed",
            "0",
            "--out",
            &out,
        ])?;
        let log = read_loss_log(Path::new(&out).join("loss.csv")).map_err(|e| e.to_string())?;
        runs.push(log.iter().map(|r| r.loss.to_bits()).collect::<Vec<u64>>());
    }
    ensure(runs[0] == runs[1], || "reruns logged different losses".into())?;
    let losses: Vec<f64> = runs[0].iter().map(|&b| f64::from_bits(b)).collect();
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    let ratio = tail / head;
    ensure(ratio <= 0.5, || {
        format!("first-10 {head:.3}, last-10 {tail:.3}, ratio {ratio:.3}")
    })?;
    Ok(format!(
        "{} steps, first-10 mean {head:.3}, last-10 mean {tail:.3}, ratio {ratio:.3}, reruns bit-identical",
        losses.len()
    ))
}

fn tiling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let patch = 2 * rng.random_range(1..=16);
        let (h, w) = (patch + rng.random_range(0..60), patch + rng.random_range(0..60));
        let step = rng.random_range(1..=patch);
        let map = coverage_map(h, w, patch, step).map_err(|e| e.to_string())?;
        ensure(map.iter().all(|&n| n >= 1), || {
            format!("{h}x{w} patch {patch} step {step} leaves a gap")
        })?;
    }

    // A narrow network with the full 128 patch keeps the run short.
    let config = NetworkConfig {
        patch: 128,
        value_classes: 16,
        ..NetworkConfig::gradcheck()
    };
    let net = Network::<f32>::new(config, 1).map_err(|e| e.to_string())?;
    let image = Tensor::from_fn(Shape::new(1, 256, 256, 1), |_, _, _, _| {
        rng.random_range(0..=255) as f32
    });
    let pred = predict_image(&net, &image, 64).map_err(|e| e.to_string())?;
    ensure(pred.windows == 9, || format!("{} windows", pred.windows))?;
    let worst = pred
        .distributions
        .data()
        .chunks(pred.value_classes)
        .map(|d| (d.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("distribution mass off by {worst:.2e}"))?;
    Ok(format!(
        "200 random geometries covered; 256x256 step 64 used 9 windows, mass error {worst:.1e}"
    ))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pred: Vec<u8> = (0..5000).map(|_| rng.random()).collect();
    let truth: Vec<u8> = pred
        .iter()
        .map(|&p| p.saturating_add(rng.random_range(0..40)))
        .collect();
    let full = sampled_pearson_pooled(&pred, &truth, pred.len(), 3, 0).map_err(|e| e.to_string())?;
    let as_f64 = |v: &[u8]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let direct = pearson(&as_f64(&pred), &as_f64(&truth)).map_err(|e| e.to_string())?;
    ensure(full.mean == direct && full.std == 0.0, || {
        format!("sampled {} vs direct {direct}", full.mean)
    })?;

    let bins = [0u8, 25, 26, 255].map(value_bin);
    ensure(bins == [0, 0, 1, 9], || format!("bins {bins:?}"))?;

    let img = GrayImage::new(64, 64, (0..4096).map(|_| rng.random()).collect()).map_err(|e| e.to_string())?;
    let perfect = TaskReport::compute(
        0,
        std::slice::from_ref(&img),
        std::slice::from_ref(&img),
        &EvalOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let p = perfect.pearson.ok_or("no pearson for a perfect prediction")?;
    ensure(perfect.overall_accuracy == Some(1.0), || {
        format!("accuracy {:?}", perfect.overall_accuracy)
    })?;
    ensure(p.mean == 1.0 && p.std == 0.0 && p.repetitions == 30, || {
        format!("pearson {p:?}")
    })?;
    Ok(format!("full-population Pearson {direct:.6} matches exactly; perfect prediction scores 1.0 +- 0 over 30 draws"))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sample =
        gpt_stain::data_io::generate_synthetic(&gpt_stain::data_io::SyntheticSceneSpec::new(48, 2, 3))
            .map_err(|e| e.to_string())?;
    let training = gpt_stain::multiscale::TrainingSample {
        id: "s".into(),
        image: sample.input.to_tensor(),
        targets: sample
            .targets
            .iter()
            .map(|t| t.as_ref().map(|i| i.pixels.clone()))
            .collect(),
    };
    // A few steps give non-trivial running statistics and moments.
    let net = Network::<f32>::new(NetworkConfig::tiny(), 3).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        batch_size: 2,
        ..TrainConfig::tiny()
    };
    let mut trainer = Trainer::new(net, cfg, vec![training]).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        trainer.step().map_err(|(e, _)| e.to_string())?;
    }
    let path = dir.path().join("model.gptc");
    trainer.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded == trainer.checkpoint(), || {
        "checkpoint changed on reload".into()
    })?;
    let restored: Network<f32> = loaded.network().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform(Shape::new(2, 32, 32, 3), &mut rng);
    let a = trainer
        .network
        .forward(&x, Mode::Eval, 0)
        .map_err(|e| e.to_string())?;
    let b = restored.forward(&x, Mode::Eval, 0).map_err(|e| e.to_string())?;
    let same = |a: &Tensor<f32>, b: &Tensor<f32>| {
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    };
    ensure(same(&a, &b), || "forward outputs differ after reload".into())?;
    let ta = trainer
        .network
        .forward(&x, Mode::Train, 11)
        .map_err(|e| e.to_string())?;
    let tb = restored.forward(&x, Mode::Train, 11).map_err(|e| e.to_string())?;
    ensure(same(&ta, &tb), || {
        "training-mode outputs differ after reload".into()
    })?;

    let img = GrayImage::new(17, 9, (0..153).map(|_| rng.random()).collect()).map_err(|e| e.to_string())?;
    let bytes = encode_pgm(&img);
    let back = decode_pgm(&bytes).map_err(|e| e.to_string())?;
    ensure(back == img && encode_pgm(&back) == bytes, || {
        "PGM round trip".into()
    })?;

    let mut data: Vec<f32> = (0..60).map(|_| rng.random_range(-1e6..1e6)).collect();
    data.extend([0.0, -0.0, f32::MAX, f32::MIN_POSITIVE, 1.0 / 3.0]);
    let raw = RawTensor::new(vec![5, 13], data).map_err(|e| e.to_string())?;
    let bytes = encode_gptt(&raw).map_err(|e| e.to_string())?;
    let (back, used) = decode_gptt(&bytes).map_err(|e| e.to_string())?;
    let exact = used == bytes.len()
        && back.dims == raw.dims
        && back
            .data
            .iter()
            .zip(&raw.data)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(exact, || "GPTT round trip".into())?;
    Ok(format!(
        "checkpoint of {} tensors, PGM and GPTT bit-exact",
        trainer.network.params.len()
    ))
}

fn masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut zeros = 0usize;
    for _ in 0..200 {
        let (n, hw, tasks, classes) = (
            rng.random_range(1..=4),
            rng.random_range(1..=6),
            rng.random_range(1..=4),
            rng.random_range(2..=9),
        );
        let logits = Tensor::<f64>::from_fn(Shape::new(n, hw, hw, tasks * classes), |_, _, _, _| {
            rng.random_range(-5.0..5.0)
        });
        let targets: Vec<u8> = (0..n * hw * hw * tasks)
            .map(|_| rng.random_range(0..classes) as u8)
            .collect();
        let mask: Vec<bool> = (0..n * tasks).map(|_| rng.random_bool(0.5)).collect();
        let mut tape = Tape::new(0);
        let x = tape.param(logits);
        let loss = tape
            .masked_cross_entropy(x, &targets, &mask, tasks, classes)
            .map_err(|e| e.to_string())?;
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        let g = grads.get(x).ok_or("no logit gradient")?;
        for (i, cell) in g.data().chunks(classes).enumerate() {
            let item = i / (hw * hw * tasks);
            let task = i % tasks;
            if !mask[item * tasks + task] {
                ensure(cell.iter().all(|&v| v.to_bits() == 0), || {
                    format!("masked cell {i} has gradient {cell:?}")
                })?;
                zeros += cell.len();
            } else {
                ensure(cell.iter().any(|&v| v != 0.0), || {
                    format!("active cell {i} has no gradient")
                })?;
            }
        }
    }
    Ok(format!(
        "200 random batches, {zeros} masked logits with gradient exactly +0"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("shape ledger", Duration::from_secs(1), shape_ledger),
        ("attention oracle", Duration::from_secs(30), attention_oracle),
        ("gradient suite", Duration::from_secs(300), gradient_suite),
        (
            "convexity and globality",
            Duration::from_secs(60),
            convexity_and_globality,
        ),
        (
            "dense-block arithmetic",
            Duration::from_secs(10),
            dense_arithmetic,
        ),
        ("overfit run", Duration::from_secs(600), overfit_run),
        ("tiling", Duration::from_secs(60), tiling),
        ("metric oracles", Duration::from_secs(30), metric_oracles),
        ("persistence", Duration::from_secs(10), persistence),
        ("masking", Duration::from_secs(30), masking),
    ];
    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut outcome = check();
        let elapsed = start.elapsed();
        if outcome.is_ok() && elapsed > *budget {
            outcome = Err(format!("took {elapsed:.1?}, budget {budget:?}"));
        }
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({elapsed:.2?}): {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} FAIL  {name} ({elapsed:.2?}): {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
