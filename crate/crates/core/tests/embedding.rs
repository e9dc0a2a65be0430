use candle_core::Tensor;
use lfmark_core::adapters::{FeatureEncoder, IdentityCodec, LatentCodec, PatchProjEncoder, SmoothL2, TinyAe, TinyAeTraining};
use lfmark_core::corpus;
use lfmark_core::detect::decode;
use lfmark_core::embed::{
    apply_perturbation, embed, perturbed_views, perturbed_views_draw, Domain, EmbedConfig, Objective, Perturbation, PixelView,
    ViewDraw,
};
use lfmark_core::keys::{generate_key, random_message, KeyScheme, Message, WatermarkKey};
use lfmark_core::metrics::bit_accuracy;
use lfmark_core::ImageGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn texture(seed: u64) -> ImageGrid {
    corpus::synthetic_textures(1, 64, seed).unwrap().remove(0)
}

fn small_ae() -> TinyAe {
    let imgs = corpus::synthetic_textures(16, 64, 3).unwrap();
    TinyAe::train(&imgs, &TinyAeTraining { steps: 3, ..TinyAeTraining::default() }).unwrap()
}

/// Minimum distance of any hinge argument `μ − p·m` from its kink, over
/// the given views.
fn hinge_clearance(views: &[ImageGrid], key: &WatermarkKey, msg: &Message, feat: &dyn FeatureEncoder) -> f64 {
    views
        .iter()
        .flat_map(|v| {
            let p = key.project(&feat.features(v).unwrap()).unwrap();
            p.into_iter()
                .zip(msg.values().to_vec())
                .map(|(p, m)| (key.margin() - p * m as f64).abs())
                .collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min)
}

fn gradient_check(objective: &Objective, delta: &Perturbation, draw: &ViewDraw, domain: Domain, seed: u64) -> f64 {
    let (_, grad) = objective.loss_and_gradient(delta, draw).unwrap();
    let grad = grad.to_vec().unwrap();
    let base = delta.to_vec().unwrap();
    let shape = delta.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..32 {
        let i = rng.random_range(0..base.len());
        let h = 1e-4 * base[i].abs().max(1.0);
        let eval = |x: f64| {
            let mut v = base.clone();
            v[i] = x;
            objective.loss(&Perturbation::from_vec(domain, shape, v).unwrap(), draw).unwrap().total
        };
        let fd = (eval(base[i] + h) - eval(base[i] - h)) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        if scale < 1e-9 {
            continue;
        }
        worst = worst.max((grad[i] - fd).abs() / scale);
    }
    worst
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let feat = PatchProjEncoder::new(64).unwrap();
    let perc = SmoothL2::default();
    let key = generate_key(16, 64, KeyScheme::RandomOrthonormal, 2, 5.0).unwrap();
    let msg = random_message(16, 3).unwrap();
    let img = ImageGrid::from_tensor((texture(5).tensor() * 0.8).unwrap().affine(1.0, 0.1).unwrap()).unwrap();
    let cfg = EmbedConfig { domain: Domain::PixelFrequency, ..EmbedConfig::default() };
    let objective = Objective::new(&img, &key, &msg, &IdentityCodec, &feat, &perc, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draw = objective.draw(&mut rng).unwrap();
    let shape = objective.parameter_shape();
    let n = shape.0 * shape.1 * shape.2;
    let mut checked = false;
    for attempt in 0..20u64 {
        let values: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let delta = Perturbation::from_vec(Domain::PixelFrequency, shape, values).unwrap();
        let w = objective.render(&delta).unwrap();
        let v = w.to_vec().unwrap();
        if v.iter().any(|&x| x < 1e-3 || x > 1.0 - 1e-3) {
            continue;
        }
        let noisy = |t: &Option<Tensor>| ImageGrid::from_tensor((w.tensor() + t.as_ref().unwrap()).unwrap()).unwrap();
        let p2 = match &draw.pixel_view {
            PixelView::Noise(e) => noisy(&Some(e.clone())),
            _ => unreachable!("spatial augmentation is off"),
        };
        let views = [w.clone(), noisy(&draw.latent_noise), p2];
        if hinge_clearance(&views, &key, &msg, &feat) < 0.05 {
            continue;
        }
        let err = gradient_check(&objective, &delta, &draw, Domain::PixelFrequency, attempt);
        eprintln!("max relative error {err:.2e}");
        assert!(err < 1e-3, "relative error {err}");
        checked = true;
        break;
    }
    assert!(checked, "no hinge-smooth point found");
}

#[test]
fn analytic_gradient_through_a_learned_codec() {
    let ae = small_ae();
    let feat = PatchProjEncoder::new(64).unwrap();
    let perc = SmoothL2::default();
    let key = generate_key(8, 64, KeyScheme::RandomOrthonormal, 2, 5.0).unwrap();
    let msg = random_message(8, 3).unwrap();
    let img = texture(6);
    let cfg = EmbedConfig { domain: Domain::LatentFrequency, ..EmbedConfig::default().without_augmentation() };
    let objective = Objective::new(&img, &key, &msg, &ae, &feat, &perc, &cfg).unwrap();
    let shape = objective.parameter_shape();
    let n = shape.0 * shape.1 * shape.2;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = false;
    for attempt in 0..20u64 {
        let values: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let delta = Perturbation::from_vec(Domain::LatentFrequency, shape, values).unwrap();
        let w = objective.render(&delta).unwrap();
        if w.to_vec().unwrap().iter().any(|&x| x < 1e-3 || x > 1.0 - 1e-3) {
            continue;
        }
        if hinge_clearance(&[w], &key, &msg, &feat) < 0.05 {
            continue;
        }
        let err = gradient_check(&objective, &delta, &ViewDraw::none(), Domain::LatentFrequency, attempt);
        eprintln!("max relative error {err:.2e}");
        assert!(err < 1e-3, "relative error {err}");
        checked = true;
        break;
    }
    assert!(checked, "no hinge-smooth point found");
}

#[test]
fn converged_embeddings_decode_to_the_message() {
    let feat = PatchProjEncoder::new(64).unwrap();
    let perc = SmoothL2::default();
    for (i, bits) in [8usize, 16, 32, 48].into_iter().enumerate() {
        let key = generate_key(bits, 64, KeyScheme::RandomOrthonormal, 10 + i as u64, 5.0).unwrap();
        let msg = random_message(bits, 20 + i as u64).unwrap();
        let cfg = EmbedConfig { steps: 400, ..EmbedConfig::desk_scale().without_augmentation() };
        let r = embed(&texture(30 + i as u64), &key, &msg, &IdentityCodec, &feat, &perc, &cfg).unwrap();
        assert_eq!(r.loss_trace.len(), 400);
        assert_eq!(decode(&r.quantized().unwrap(), &key, &feat).unwrap(), msg, "{bits} bits");
        assert_eq!(r.final_bit_accuracy_clean, 1.0);
        assert!(r.watermarked.to_vec().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn hinge_reaches_zero_on_a_short_message() {
    let feat = PatchProjEncoder::new(64).unwrap();
    let key = generate_key(16, 64, KeyScheme::RandomOrthonormal, 1, 5.0).unwrap();
    let msg = random_message(16, 1).unwrap();
    let cfg = EmbedConfig { steps: 200, ..EmbedConfig::desk_scale().without_augmentation() };
    let r = embed(&texture(1), &key, &msg, &IdentityCodec, &feat, &SmoothL2::default(), &cfg).unwrap();
    assert_eq!(r.loss_trace.last().unwrap().message_clean, 0.0);
    assert_eq!(r.final_bit_accuracy_clean, 1.0);
}

#[test]
fn embedding_is_deterministic_with_augmentation() {
    let feat = PatchProjEncoder::new(64).unwrap();
    let key = generate_key(16, 64, KeyScheme::RandomOrthonormal, 1, 5.0).unwrap();
    let msg = random_message(16, 2).unwrap();
    let cfg = EmbedConfig { steps: 25, spatial_augs: true, seed: 9, ..EmbedConfig::desk_scale() };
    let run = || {
        embed(&texture(2), &key, &msg, &IdentityCodec, &feat, &SmoothL2::default(), &cfg)
            .unwrap()
            .watermarked
            .to_vec()
            .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn identity_codec_makes_latent_and_pixel_domains_agree() {
    let feat = PatchProjEncoder::new(64).unwrap();
    let key = generate_key(16, 64, KeyScheme::RandomOrthonormal, 1, 5.0).unwrap();
    let msg = random_message(16, 4).unwrap();
    let img = texture(3);
    for (latent, pixel) in [(Domain::LatentFrequency, Domain::PixelFrequency), (Domain::Latent, Domain::Pixel)] {
        let run = |domain| {
            let cfg = EmbedConfig { domain, steps: 30, ..EmbedConfig::desk_scale() };
            embed(&img, &key, &msg, &IdentityCodec, &feat, &SmoothL2::default(), &cfg).unwrap()
        };
        let (a, b) = (run(latent), run(pixel));
        assert_eq!(a.watermarked.to_vec().unwrap(), b.watermarked.to_vec().unwrap(), "{latent} vs {pixel}");
        assert_eq!(a.loss_trace, b.loss_trace);
    }
}

#[test]
fn zero_steps_reconstructs_through_the_codec_and_leaves_chance_accuracy() {
    let ae = small_ae();
    let feat = PatchProjEncoder::new(64).unwrap();
    let key = generate_key(32, 64, KeyScheme::RandomOrthonormal, 6, 5.0).unwrap();
    let img = texture(8);
    let cfg = EmbedConfig { steps: 0, ..EmbedConfig::default() };
    let msg = random_message(32, 0).unwrap();
    let r = embed(&img, &key, &msg, &ae, &feat, &SmoothL2::default(), &cfg).unwrap();
    let recon = ae.decode(&ae.encode(img.tensor()).unwrap()).unwrap().clamp(0.0, 1.0).unwrap();
    for (a, b) in r.watermarked.to_vec().unwrap().iter().zip(flat(&recon)) {
        assert!((a - b).abs() < 1e-9);
    }

    let mut total = 0.0;
    let images = corpus::synthetic_textures(50, 64, 404).unwrap();
    for (i, img) in images.iter().enumerate() {
        let msg = random_message(32, 1000 + i as u64).unwrap();
        let r = embed(img, &key, &msg, &IdentityCodec, &feat, &SmoothL2::default(), &cfg).unwrap();
        total += bit_accuracy(&msg, &r.decoded).unwrap();
    }
    let mean = total / images.len() as f64;
    assert!((0.4..=0.6).contains(&mean), "mean accuracy {mean}");
}

#[test]
fn pixel_noise_view_has_the_configured_std() {
    let cfg = EmbedConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let draw = perturbed_views_draw((3, 8, 8), (200, 200), &EmbedConfig { latent_noise_std: 0.0, ..cfg }, &mut rng).unwrap();
    let w = ImageGrid::filled(200, 200, 0.5).unwrap();
    let (_, p2) = perturbed_views(&IdentityCodec, w.tensor(), w.tensor(), &draw).unwrap();
    let d: Vec<f64> = flat(&p2).iter().map(|v| v - 0.5).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std / 0.06 - 1.0).abs() < 0.02, "{std}");
}

#[test]
fn total_loss_trends_down() {
    let feat = PatchProjEncoder::new(64).unwrap();
    let key = generate_key(48, 64, KeyScheme::RandomOrthonormal, 3, 5.0).unwrap();
    let msg = random_message(48, 5).unwrap();
    let r = embed(&texture(10), &key, &msg, &IdentityCodec, &feat, &SmoothL2::default(), &EmbedConfig::desk_scale()).unwrap();
    let totals: Vec<f64> = r.loss_trace.iter().map(|s| s.total).collect();
    let median = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let tenth = totals.len() / 10;
    let (head, tail) = (median(&totals[..tenth]), median(&totals[totals.len() - tenth..]));
    assert!(tail < head, "first {head}, last {tail}");
}

#[test]
fn dc_perturbation_matches_codec_free_oracle() {
    let img = texture(11);
    let c = 0.05;
    let (h, w) = (img.height(), img.width());
    let mut values = vec![0.0; 2 * 3 * h * w];
    for ch in 0..3 {
        values[ch * h * w] = c * (h * w) as f64;
    }
    let delta = Perturbation::from_vec(Domain::PixelFrequency, (3, h, w), values).unwrap();
    let out = apply_perturbation(Domain::PixelFrequency, &img, &delta, &IdentityCodec).unwrap();
    for (o, i) in out.to_vec().unwrap().iter().zip(img.to_vec().unwrap()) {
        assert!((o - (i + c).clamp(0.0, 1.0)).abs() < 1e-9);
    }
}

#[test]
fn mismatched_latent_shape_is_a_config_error() {
    let ae = small_ae();
    let img = texture(1);
    let delta = Perturbation::zeros((3, 64, 64), Domain::Latent).unwrap();
    assert!(matches!(
        apply_perturbation(Domain::Latent, &img, &delta, &ae),
        Err(lfmark_core::Error::Config(_))
    ));
}
