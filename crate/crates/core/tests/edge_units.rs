use albalance::edge::{edge_mask, EdgeConfig};
use albalance::raster::RasterImage;
use albalance::synth::polygon_scene;
use albalance::units::{partition_units, UnitKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> EdgeConfig {
    EdgeConfig {
        gaussian_kernel: 5,
        dilation_kernel: 3,
        max_unit_pixels: 64,
        ..EdgeConfig::default()
    }
}

fn image_strategy() -> impl Strategy<Value = RasterImage> {
    (16usize..40, 16usize..40, any::<u64>()).prop_map(|(h, w, seed)| {
        // Blocky random scene: a few flat rectangles so edges exist.
        let mut data = vec![0u8; h * w];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
            let (rh, rw) = (rng.random_range(1..=h - r), rng.random_range(1..=w - c));
            let v: u8 = rng.random();
            for i in r..r + rh {
                for j in c..c + rw {
                    data[i * w + j] = v;
                }
            }
        }
        RasterImage::new(h, w, 1, data).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_is_disjoint_cover(img in image_strategy(), region in 8usize..20, bf in 0.0f64..0.3) {
        let cfg = small_cfg();
        let units = partition_units("im", &img, &cfg, region, bf).unwrap();
        let mut hits = vec![0u32; img.height() * img.width()];
        for u in &units {
            prop_assert!(!u.mask.is_empty());
            for &p in &u.mask {
                hits[p] += 1;
            }
            if u.kind == UnitKind::Edge {
                prop_assert!(u.mask.len() <= cfg.max_unit_pixels);
            }
        }
        prop_assert!(hits.iter().all(|&k| k == 1));
        let total: u64 = units.iter().map(|u| u.cost()).sum();
        prop_assert_eq!(total, (img.height() * img.width()) as u64);
    }

    #[test]
    fn lower_high_threshold_only_adds_edges(img in image_strategy(), high in 20.0f64..200.0, drop in 0.0f64..100.0) {
        let strict = EdgeConfig { canny_high: high, ..small_cfg() };
        let loose = EdgeConfig { canny_high: (high - drop).max(strict.canny_low + 1.0), ..small_cfg() };
        let a = edge_mask(&img, &strict, 0.0).unwrap();
        let b = edge_mask(&img, &loose, 0.0).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(&x, &y)| !x || y));
    }
}

#[test]
fn polygon_boundaries_fall_in_edge_units() {
    let scene = polygon_scene(1, 96).unwrap();
    let units = partition_units(&scene.id, &scene.image, &small_cfg(), 16, 0.05).unwrap();
    let mut edge = vec![false; 96 * 96];
    for u in units.iter().filter(|u| u.kind == UnitKind::Edge) {
        u.mask.iter().for_each(|&p| edge[p] = true);
    }
    let boundary = albalance::synth::boundary_pixels(&scene.truth);
    let hit = boundary.iter().filter(|&&p| edge[p]).count();
    assert!(hit as f64 >= 0.95 * boundary.len() as f64, "{hit} of {}", boundary.len());
}
