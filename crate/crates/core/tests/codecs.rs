use provmark::attack::{attack_brightness, attack_crop};
use provmark::corpus::{gen_cover, CorpusSpec};
use provmark::latent::{self, LatentField};
use provmark::raster;
use provmark::spatial::{self, Payload};
use provmark::{Image, RingKey};

fn covers(count: usize, seed: u64) -> Vec<Image> {
    let spec = CorpusSpec::synthetic(count, 256, seed);
    (0..count).map(|i| gen_cover(&spec, i).unwrap()).collect()
}

fn calibrated_key(covers: &[Image]) -> RingKey {
    let key = latent::make_ring_key::<f64>(1, 64, 4, 12).unwrap();
    latent::calibrate_sigma_sq(&key, covers).unwrap()
}

fn marked(key: &RingKey, noise: u64) -> Image {
    latent::render(&latent::embed(key, noise), 256).unwrap()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (raster::mean(a), raster::mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn render_invert_round_trip_correlation() {
    // mean over 1000 latents from an independent implementation: 0.94802,
    // standard error of a 100-latent mean ≈ 1.1e-4
    let r = mean((0..100).map(|s| {
        let z = LatentField::gaussian(64, s).unwrap();
        let back = latent::invert(&latent::render(&z, 256).unwrap(), 64).unwrap();
        pearson(z.values(), back.values())
    }));
    assert!((r - 0.94802).abs() < 1e-3, "{r}");
}

#[test]
fn clean_floor_and_unwatermarked_ceiling() {
    let pool = covers(200, 11);
    let key = calibrated_key(&pool);
    let clean = mean((0..100).map(|s| latent::detect(&marked(&key, 1000 + s), &key).unwrap().value()));
    assert!(clean >= 0.90, "{clean}");
    let fresh = covers(40, 12);
    let unmarked = mean(fresh.iter().map(|c| latent::detect(c, &key).unwrap().value()));
    assert!(unmarked <= 0.35, "{unmarked}");
}

#[test]
fn crop_desynchronizes_rings() {
    let key = calibrated_key(&covers(50, 11));
    let (mut before, mut after) = (0.0, 0.0);
    for s in 0..100 {
        let img = marked(&key, s);
        before += latent::detect(&img, &key).unwrap().value();
        after += latent::detect(&attack_crop(&img, 0.40).unwrap(), &key).unwrap().value();
    }
    assert!((before - after) / 100.0 >= 0.30, "{} -> {}", before / 100.0, after / 100.0);
}

#[test]
fn low_pass_leaves_rings_intact() {
    let key = calibrated_key(&covers(50, 11));
    let mut delta = 0.0;
    for s in 0..50 {
        let img = marked(&key, s);
        let planes: Vec<Vec<f64>> = img.planes().iter().map(|p| raster::gaussian_blur(p, 256, 256, 2.0)).collect();
        let data: Vec<f64> = (0..256 * 256 * 3).map(|i| planes[i % 3][i / 3]).collect();
        let blurred = Image::new(256, 256, 3, data).unwrap();
        delta += latent::detect(&img, &key).unwrap().value() - latent::detect(&blurred, &key).unwrap().value();
    }
    assert!((delta / 50.0).abs() <= 0.15, "{}", delta / 50.0);
}

#[test]
fn brightness_invariance_below_saturation() {
    let key = calibrated_key(&covers(50, 11));
    for s in 0..10 {
        let img = marked(&key, s);
        let low = img.map(|v| 0.25 + 0.5 * (v - 0.5));
        let a = latent::detect(&low, &key).unwrap().value();
        let b = latent::detect(&attack_brightness(&low, 1.5).unwrap(), &key).unwrap().value();
        assert!((a - b).abs() <= 0.10, "{a} {b}");
    }
}

#[test]
fn spatial_clean_decoding_on_covers() {
    let pool = covers(20, 21);
    let key = spatial::make_spread_key(3, 256, 8, 32, 0.002).unwrap();
    for (i, c) in pool.iter().enumerate() {
        let p = Payload::random(i as u64, 32).unwrap();
        let m = spatial::embed(c, &key, &p).unwrap();
        assert_eq!(spatial::extract(&m, &key).unwrap(), p);
        assert_eq!(spatial::detect(&m, &key, &p).unwrap().value(), 1.0);
        let unmarked = spatial::detect(c, &key, &p).unwrap().value();
        assert!(unmarked < 0.6, "{unmarked}");
    }
}

#[test]
fn spatial_mid_gray_is_clean_at_default_alpha() {
    let key = spatial::make_spread_key(9, 256, 8, 32, spatial::DEFAULT_ALPHA).unwrap();
    let gray = Image::filled(256, 256, 3, 0.5);
    for s in 0..5 {
        let p = Payload::random(s, 32).unwrap();
        let m = spatial::embed(&gray, &key, &p).unwrap();
        assert_eq!(spatial::detect(&m, &key, &p).unwrap().value(), 1.0);
    }
}
