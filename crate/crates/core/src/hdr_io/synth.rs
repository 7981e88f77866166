//! Procedural outdoor environments: sky gradient, ground band and one sun.

use rand::Rng;

use super::EnvironmentImage;
use crate::error::{Error, Result};
use crate::geometry::Direction;
use crate::rng::seeded;

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Deterministic synthetic sky for `seed` on an `height x width` grid.
///
/// The sky fades from a blue zenith to a white horizon, the lower hemisphere
/// is a brown/green ground band, and one sun disc above the horizon carries
/// a peak radiance drawn log-uniformly from `[1e2, 1e4]`. The whole image is
/// then scaled by an exposure drawn log-uniformly from `[0.1, 10]`.
pub fn generate_synthetic_env(seed: u64, height: usize, width: usize) -> Result<EnvironmentImage> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic environments need at least 8x8 pixels, got {height}x{width}"
        )));
    }
    let mut rng = seeded(seed);

    let zenith = [
        rng.random_range(0.15..0.35),
        rng.random_range(0.35..0.55),
        rng.random_range(0.75..1.0),
    ];
    let horizon_level = rng.random_range(0.8..1.1);
    let horizon = [
        horizon_level,
        horizon_level,
        horizon_level * rng.random_range(0.95..1.05),
    ];
    let sky_exponent = rng.random_range(0.3..0.8);

    let brown = [0.30, 0.22, 0.14];
    let green = [0.16, 0.26, 0.10];
    let ground = lerp(brown, green, rng.random::<f64>());
    let ground_gain = rng.random_range(0.6..1.2);

    let peak = log_uniform(&mut rng, 1e2, 1e4);
    let sun_azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let sun_elevation = rng.random_range(5f64.to_radians()..75f64.to_radians());
    let sun_dir = Direction::from_angles(std::f64::consts::FRAC_PI_2 - sun_elevation, sun_azimuth);
    let warmth = rng.random_range(0.0..0.2);
    let sun_colour = [1.0, 1.0 - 0.5 * warmth, 1.0 - warmth];
    // The disc must cover at least one pixel centre at any resolution.
    let sun_radius = 3f64
        .to_radians()
        .max(0.8 * std::f64::consts::PI / height as f64);
    let glow_width = rng.random_range(0.08..0.2);
    let glow_gain = rng.random_range(0.5..2.0);

    let exposure = log_uniform(&mut rng, 0.1, 10.0);

    EnvironmentImage::from_fn(width, height, |_, _, d| {
        let y = d.y();
        let mut c = if y >= 0.0 {
            lerp(horizon, zenith, y.powf(sky_exponent))
        } else {
            // Ground darkens slightly toward the nadir.
            let t = (-y).sqrt();
            ground.map(|g| g * ground_gain * (1.0 - 0.3 * t))
        };
        let cos_angle = d.vector().dot(sun_dir.vector()).clamp(-1.0, 1.0);
        let angle = cos_angle.acos();
        if y >= 0.0 {
            let glow = glow_gain * (-0.5 * (angle / glow_width).powi(2)).exp();
            for k in 0..3 {
                c[k] += glow * sun_colour[k];
            }
        }
        if angle <= sun_radius {
            c = sun_colour.map(|s| s * peak);
        }
        c.map(|v| (v * exposure) as f32)
    })
}
