use illumfield::checkpoint::Checkpoint;
use illumfield::equivariance::EquivarianceMode;
use illumfield::eval::hdr_psnr;
use illumfield::field::{FieldConfig, FieldModel};
use illumfield::fitting::{decode_environment, fit_latent, FitConfig};
use illumfield::geometry::Rotation;
use illumfield::hdr_io::{
    generate_synthetic_env, load_hdr, lower_hemisphere_mask, save_hdr, EnvironmentImage,
};
use illumfield::inverse_render::{invert_lighting, InverseConfig, Material, Renderer};
use illumfield::training::{train, LatentBank, TrainConfig};

fn linear(image: &EnvironmentImage) -> Vec<[f64; 3]> {
    image.pixels().iter().map(|p| p.map(f64::from)).collect()
}

#[test]
fn data_to_model_to_fit_to_inversion() {
    let dir = tempfile::tempdir().unwrap();
    let mut images = Vec::new();
    for seed in 0..4 {
        let path = dir.path().join(format!("env_{seed}.hdr"));
        save_hdr(&generate_synthetic_env(seed, 8, 16).unwrap(), &path).unwrap();
        images.push(load_hdr(&path).unwrap());
    }

    let mut cfg = TrainConfig::with_steps(120);
    cfg.batch_size = 256;
    let out = train::<f32>(&images, FieldConfig::small(3, EquivarianceMode::So2), &cfg).unwrap();
    let early = out.history.window_mean(1, 10, |r| r.total);
    let late = out.history.window_mean(111, 120, |r| r.total);
    assert!(late < early, "loss {early} -> {late}");

    let mut ck = Checkpoint::new();
    out.model.write_checkpoint(&mut ck);
    out.bank.write_checkpoint(&mut ck);
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let model = FieldModel::<f32>::from_checkpoint(&ck).unwrap();
    let bank = LatentBank::from_checkpoint(&ck).unwrap();
    assert_eq!(bank.len(), 4);

    let z = bank.code(2).unwrap();
    let decoded = decode_environment(&model, &z, 8, 16).unwrap();
    assert_eq!(
        linear(&decoded),
        linear(&decode_environment(&out.model, &z, 8, 16).unwrap())
    );

    // Turning the code a quarter turn turns the decoded map by four columns.
    let turned = decode_environment(
        &model,
        &z.rotated(&Rotation::about_y(std::f64::consts::FRAC_PI_2)),
        8,
        16,
    )
    .unwrap();
    assert!(
        hdr_psnr(
            &linear(&turned),
            &linear(&decoded.rotated(&Rotation::about_y(std::f64::consts::FRAC_PI_2)))
        )
        .unwrap()
            > 60.0
    );

    // A masked fit sees only the lower half but predicts the whole sphere.
    let masked = decoded
        .clone()
        .with_mask(lower_hemisphere_mask(16, 8))
        .unwrap();
    assert_eq!(masked.observed_count(), 64);
    let fit_cfg = FitConfig {
        steps: 150,
        batch_size: 128,
        ..FitConfig::default()
    };
    let fit = fit_latent(&model, &masked, &fit_cfg).unwrap();
    assert_eq!(fit.history.len(), 150);
    assert!(fit.history[149] < fit.history[0]);
    let completed = decode_environment(&model, &fit.code, 8, 16).unwrap();
    assert!(completed
        .pixels()
        .iter()
        .flatten()
        .all(|v| v.is_finite() && *v > 0.0));

    let renderer = Renderer::<f32>::new(16, 8, Material::glossy(0.6).unwrap()).unwrap();
    let target = renderer.render_latent(&model, &z, 2.0).unwrap();
    let inv = invert_lighting(
        &target,
        &renderer,
        &model,
        &InverseConfig {
            steps: 60,
            ..InverseConfig::default()
        },
    )
    .unwrap();
    assert!(inv.history[59] < inv.history[0]);
    assert!(inv.exposure.is_finite() && inv.exposure > 0.0);
    let rerender = renderer
        .render_latent(&model, &inv.code, inv.exposure)
        .unwrap();
    let start = renderer
        .render_latent(&model, &illumfield::equivariance::LatentCode::zeros(3), 1.0)
        .unwrap();
    assert!(
        renderer.render_psnr(&rerender, &target).unwrap()
            > renderer.render_psnr(&start, &target).unwrap()
    );
}
