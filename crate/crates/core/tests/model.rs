use albalance::metrics::{argmax_map, evaluate};
use albalance::model::{
    contrastive_loss, extract_features, fit, forward, loss_and_grad, loss_value, predict, ContrastiveBatch,
    ContrastiveConfig, ContrastivePlan, ModelParams, PixelSet, Sgd, TrainConfig,
};
use albalance::raster::RasterImage;
use albalance::synth::{synth_dataset, ClassStyle, ShapeFamily, SynthSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, h: usize, w: usize, ch: usize) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RasterImage::new(h, w, ch, (0..h * w * ch).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn window_statistics_match_brute_force() {
    for seed in 0..5 {
        let img = random_image(seed, 7 + seed as usize, 9, 3);
        let fm = extract_features(&img);
        let (h, w) = (img.height(), img.width());
        for i in 0..h {
            for j in 0..w {
                let f = fm.pixel(i * w + j);
                for c in 0..3 {
                    let mut vals = Vec::new();
                    for di in -2i64..=2 {
                        for dj in -2i64..=2 {
                            let r = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                            let q = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                            vals.push(f64::from(img.sample(r, q, c)) / 255.0);
                        }
                    }
                    let mean = vals.iter().sum::<f64>() / 25.0;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
                    let raw = f64::from(img.sample(i, j, c)) / 255.0;
                    assert!((f[c] - (2.0 * raw - 1.0)).abs() < 1e-12);
                    assert!((f[3 + c] - (2.0 * mean - 1.0)).abs() < 1e-12);
                    assert!((f[6 + c] - 4.0 * var.sqrt()).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn flat_image_has_no_gradient_or_spread() {
    let fm = extract_features(&RasterImage::filled(6, 6, 3, 90).unwrap());
    for i in 0..fm.num_pixels() {
        assert!(fm.pixel(i)[6..].iter().all(|&v| v.abs() < 1e-6));
    }
}

fn blob_spec() -> SynthSpec {
    let style = |name: &str, color, shape| ClassStyle {
        name: name.into(),
        color,
        noise: 10.0,
        shape,
    };
    SynthSpec {
        classes: vec![
            style("ground", [190, 60, 50], ShapeFamily::Mosaic),
            style("trees", [50, 170, 70], ShapeFamily::Blob),
            style("water", [50, 70, 200], ShapeFamily::Blob),
        ],
        proportions: vec![0.5, 0.3, 0.2],
        train_images: 3,
        test_images: 2,
        height: 48,
        width: 48,
        brightness_jitter: 0.0,
        ..SynthSpec::default()
    }
}

#[test]
fn fits_separable_blobs() {
    let data = synth_dataset(3, &blob_spec()).unwrap();
    let mut set = PixelSet::new(10);
    for s in &data.train {
        set.extend_from(&extract_features(&s.image), &s.truth).unwrap();
    }
    let mut params = ModelParams::init(10, 8, 3, 1);
    let cfg = TrainConfig {
        lr: 0.1,
        epochs: 60,
        batch_size: 256,
        max_steps_per_epoch: 8,
        ..TrainConfig::default()
    };
    let report = fit(&mut params, &set, None, &cfg, 0, 2).unwrap();
    assert!(report.epoch_loss.last() < report.epoch_loss.first());
    for s in &data.test {
        let pred = argmax_map(&predict(&params, &extract_features(&s.image)).unwrap());
        let m = evaluate(&pred, &s.truth, 3).unwrap();
        assert!(m.miou >= 0.9, "mIoU {}", m.miou);
    }
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #[test]
    fn contrastive_is_non_negative_and_order_free(seed in any::<u64>(), d in 2usize..6, np in 1usize..5, nn in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor = unit_vec(&mut rng, d);
        let pos: Vec<Vec<f64>> = (0..np).map(|_| unit_vec(&mut rng, d)).collect();
        let neg: Vec<Vec<f64>> = (0..nn).map(|_| unit_vec(&mut rng, d)).collect();
        let batch = |p: Vec<Vec<f64>>, n: Vec<Vec<f64>>| ContrastiveBatch {
            anchors: vec![anchor.clone()],
            positives: vec![p],
            negatives: vec![n],
            tau: 0.1,
        };
        let a = contrastive_loss(&batch(pos.clone(), neg.clone())).unwrap().value;
        let (mut rp, mut rn) = (pos, neg);
        rp.reverse();
        rn.rotate_left(1);
        let b = contrastive_loss(&batch(rp, rn)).unwrap().value;
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn zero_weight_leaves_plain_cross_entropy(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = PixelSet::new(4);
        for _ in 0..n {
            let f: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            set.push(&f, rng.random_range(0..3), true);
        }
        let params = ModelParams::init(4, 5, 3, seed);
        let cfg = ContrastiveConfig { weight: 0.0, ..ContrastiveConfig::default() };
        let plan = ContrastivePlan {
            anchors: vec![0],
            positives: vec![vec![]],
            negatives: vec![vec![]],
        };
        let (_, prob) = forward(&params, &set.features).unwrap();
        let ce = set
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -prob[i * 3 + usize::from(l)].ln())
            .sum::<f64>()
            / n as f64;
        let got = loss_value(&params, &set, &plan, &cfg).unwrap();
        prop_assert!((got - ce).abs() < 1e-12 * ce.max(1.0));
    }
}

#[test]
fn one_pixel_step_moves_downhill() {
    let mut set = PixelSet::new(3);
    set.push(&[0.5, -0.2, 0.8], 1, true);
    let mut params = ModelParams::init(3, 4, 2, 7);
    let cfg = ContrastiveConfig::default();
    let plan = ContrastivePlan::default();
    let (before, grad) = loss_and_grad(&params, &set, &plan, &cfg).unwrap();
    let expected: Vec<f64> = params
        .to_flat()
        .iter()
        .zip(grad.to_flat())
        .map(|(t, g)| t - 0.05 * g)
        .collect();
    Sgd::new(&params).step(&mut params, &grad, 0.05, 0.9, 0.0);
    assert_eq!(params.to_flat(), expected);
    let after = loss_value(&params, &set, &plan, &cfg).unwrap();
    assert!(after < before.total);
    assert_eq!(before.anchors_used, 0);
}
