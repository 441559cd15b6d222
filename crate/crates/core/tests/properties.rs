//! Property tests over randomly drawn shapes and values.

use gpt_stain::autograd::Tape;
use gpt_stain::data_io::{decode_pgm, encode_pgm, GrayImage};
use gpt_stain::dense_block::{concat_width, dense_forward, DenseBlockParams};
use gpt_stain::evaluation::{confusion, pearson, value_bin, BINS};
use gpt_stain::gpt_layer::{gpt_forward, GptLayerParams, GptVariant};
use gpt_stain::inference::{coverage_map, merge_windows, windows};
use gpt_stain::params::Mode;
use gpt_stain::tensor::{crop_reflect, decode_gptt, encode_gptt, mirror_pad, RawTensor};
use gpt_stain::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_reflect_extends_mirror_pad(
        h in 2usize..7, w in 2usize..7, c in 1usize..3,
        top in 0usize..6, bottom in 0usize..6, left in 0usize..6, right in 0usize..6,
        seed in any::<u64>(),
    ) {
        prop_assume!(top < h && bottom < h && left < w && right < w);
        let x = random_tensor(Shape::new(1, h, w, c), seed);
        let padded = mirror_pad(&x, top, bottom, left, right).unwrap();
        let cropped = crop_reflect(&x, -(top as isize), -(left as isize), h + top + bottom, w + left + right).unwrap();
        prop_assert_eq!(padded, cropped);
    }

    #[test]
    fn pearson_is_affine_invariant(
        xs in prop::collection::vec(-100.0f64..100.0, 3..40),
        noise in prop::collection::vec(-5.0f64..5.0, 40),
        a in 0.1f64..10.0,
        b in -50.0f64..50.0,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| 0.5 * x + n).collect();
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
        let scaled: Vec<f64> = ys.iter().map(|y| a * y + b).collect();
        let flipped: Vec<f64> = ys.iter().map(|y| -a * y + b).collect();
        prop_assert!((pearson(&xs, &scaled).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(&xs, &flipped).unwrap() + r).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn windows_cover_every_pixel(
        patch_half in 1usize..9, extra_h in 0usize..40, extra_w in 0usize..40, step_seed in any::<usize>(),
    ) {
        let patch = 2 * patch_half;
        let (h, w) = (patch + extra_h, patch + extra_w);
        let step = 1 + step_seed % patch;
        let map = coverage_map(h, w, patch, step).unwrap();
        prop_assert!(map.iter().all(|&n| n >= 1));
        let total: u32 = map.iter().sum();
        prop_assert_eq!(total as usize, windows(h, w, patch, step).unwrap().len() * patch * patch);
    }

    #[test]
    fn confusion_margins_are_histograms(
        pairs in prop::collection::vec((any::<u8>(), any::<u8>()), 1..300),
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let m = confusion(&pred, &truth).unwrap();
        let mut by_truth = [0u64; BINS];
        let mut by_pred = [0u64; BINS];
        for (&p, &t) in pred.iter().zip(&truth) {
            by_truth[value_bin(t)] += 1;
            by_pred[value_bin(p)] += 1;
        }
        prop_assert_eq!(m.row_sums(), by_truth);
        prop_assert_eq!(m.column_sums(), by_pred);
        prop_assert_eq!(m.total(), pred.len() as u64);
        let per_thousand: f64 = m.per_thousand().iter().flatten().sum();
        prop_assert!((per_thousand - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn merged_distributions_have_unit_mass(
        h in 4usize..14, w in 4usize..14, step in 1usize..5, group in 1usize..5, seed in any::<u64>(),
    ) {
        let patch = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<_> = windows(h, w, patch, step)
            .unwrap()
            .into_iter()
            .map(|corner| {
                let mut data: Vec<f64> = (0..patch * patch * 2 * group).map(|_| rng.random_range(0.01..1.0)).collect();
                for d in data.chunks_mut(group) {
                    let s: f64 = d.iter().sum();
                    d.iter_mut().for_each(|v| *v /= s);
                }
                (corner, Tensor::new(Shape::new(1, patch, patch, 2 * group), data).unwrap())
            })
            .collect();
        let merged = merge_windows(h, w, group, parts).unwrap();
        for d in merged.data().chunks(group) {
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_ignores_per_cell_logit_shifts(
        n in 1usize..3, hw in 1usize..4, tasks in 1usize..3, classes in 2usize..5, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(n, hw, hw, tasks * classes);
        let logits = random_tensor(shape, seed ^ 1);
        let targets: Vec<u8> = (0..n * hw * hw * tasks).map(|_| rng.random_range(0..classes) as u8).collect();
        let mask: Vec<bool> = (0..n * tasks).map(|_| rng.random_bool(0.7)).collect();
        let shifts: Vec<f64> = (0..n * hw * hw * tasks).map(|_| rng.random_range(-30.0..30.0)).collect();
        let shifted = Tensor::new(
            shape,
            logits.data().iter().enumerate().map(|(i, &v)| v + shifts[i / classes]).collect(),
        ).unwrap();
        let loss = |t: &Tensor<f64>| {
            let mut tape = Tape::new(0);
            let x = tape.input(t.clone());
            let l = tape.masked_cross_entropy(x, &targets, &mask, tasks, classes).unwrap();
            tape.value(l).data()[0]
        };
        prop_assert!((loss(&logits) - loss(&shifted)).abs() < 1e-10);
    }

    #[test]
    fn dense_block_concatenates_growth_maps(
        c0 in 1usize..6, layers in 0usize..4, growth in 1usize..5, cout in 1usize..5, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = DenseBlockParams::<f64>::init(c0, layers, growth, cout, 0.5, &mut rng);
        prop_assert_eq!(block.concat_channels(), concat_width(c0, layers, growth));
        prop_assert_eq!(block.out.cin(), c0 + layers * growth);
        let x = random_tensor(Shape::new(2, 4, 3, c0), seed);
        let y = dense_forward(&x, &block, Mode::Train, seed).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(2, 4, 3, cout));
    }

    #[test]
    fn gpt_output_grid_follows_variant(
        h in 1usize..7, w in 1usize..7, cin in 1usize..5, v in 0usize..3, seed in any::<u64>(),
    ) {
        let variant = [GptVariant::Down, GptVariant::Same, GptVariant::Up][v];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GptLayerParams::<f64>::init_default(variant, cin, &mut rng);
        let y = gpt_forward(&random_tensor(Shape::new(1, h, w, cin), seed), &params).unwrap();
        let (oh, ow) = variant.output_size(h, w);
        prop_assert_eq!(y.shape(), Shape::new(1, oh, ow, params.cv()));
    }

    #[test]
    fn pgm_round_trip(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = GrayImage::new(h, w, (0..h * w).map(|_| rng.random()).collect()).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn gptt_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = dims.iter().product();
        let data: Vec<f32> = (0..len).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
        let raw = RawTensor::new(dims, data).unwrap();
        let bytes = encode_gptt(&raw).unwrap();
        let (back, used) = decode_gptt(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back.dims, raw.dims);
        prop_assert!(back.data.iter().zip(&raw.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn value_bins_are_monotone(a in any::<u8>(), b in any::<u8>()) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(value_bin(lo) <= value_bin(hi));
        prop_assert!(value_bin(hi) < BINS);
    }
}
