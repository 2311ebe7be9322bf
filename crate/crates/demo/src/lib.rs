//! Browser bindings for the latent geometry: noise-angle curves, refinement
//! noise schedules, and 3-D projections of uniform vs clustered latents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use sphere_core::geometry::{
    angle_between, angle_to_sigma, gaussian_vec, noisy_spherify, project_to_3d, sample_sphere_uniform, spherify,
    sliced_wasserstein_to_uniform, LatentShape, SphereVector,
};
use sphere_core::sampling::decay_r;

fn js_err(e: sphere_core::SphereError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// For `points` target angles evenly spaced in `[0, max_angle_deg]`, perturbs a
/// random sphere point with `σ = tan(angle)` and measures the angle actually
/// moved. Returns `[target_0, measured_0, target_1, measured_1, …]`.
#[wasm_bindgen]
pub fn noisy_angle_curve(len: usize, max_angle_deg: f64, points: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
    if len == 0 || points < 2 {
        return Err(JsValue::from_str("need len >= 1 and points >= 2"));
    }
    let shape = LatentShape::flat(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * points);
    for i in 0..points {
        let target = max_angle_deg * i as f64 / (points - 1) as f64;
        let sigma = angle_to_sigma(target).map_err(js_err)?;
        let v = sample_sphere_uniform(shape, &mut rng, None);
        let e = gaussian_vec(len, &mut rng);
        let noisy = noisy_spherify(&v, &e, sigma).map_err(js_err)?;
        out.push(target);
        out.push(angle_between(v.values(), noisy.values()));
    }
    Ok(out)
}

/// Noise strength multiplier `r` for refinement steps `2..=steps` of a
/// `steps`-step sampler (empty below two steps).
#[wasm_bindgen]
pub fn decay_schedule(steps: usize, gamma: f64) -> Vec<f64> {
    if steps < 2 {
        return Vec::new();
    }
    (2..=steps).map(|t| decay_r(t, steps, gamma)).collect()
}

/// Projects `n` uniform latents and `n` latents clustered around one point
/// (isotropic spread `spread`) to 3-D. Returns
/// `[swd_uniform, swd_clustered, uniform xyz…, clustered xyz…]`.
#[wasm_bindgen]
pub fn projection_demo(n: usize, len: usize, spread: f64, seed: u64) -> Result<Vec<f64>, JsValue> {
    if n < 2 || len < 3 {
        return Err(JsValue::from_str("need n >= 2 and len >= 3"));
    }
    let shape = LatentShape::flat(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform: Vec<SphereVector> = (0..n).map(|_| sample_sphere_uniform(shape, &mut rng, None)).collect();
    let centre = gaussian_vec(len, &mut rng);
    let clustered = (0..n)
        .map(|_| {
            let z: Vec<f64> = centre
                .iter()
                .zip(gaussian_vec(len, &mut rng))
                .map(|(c, e)| c + spread * e)
                .collect();
            spherify(&z, shape)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(js_err)?;

    let mut out = vec![
        sliced_wasserstein_to_uniform(&uniform, 32, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).map_err(js_err)?,
        sliced_wasserstein_to_uniform(&clustered, 32, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).map_err(js_err)?,
    ];
    // Same projection for both sets so the pictures are comparable.
    let mut both = uniform;
    both.extend(clustered);
    let pts = project_to_3d(&both, &mut ChaCha8Rng::seed_from_u64(seed ^ 2)).map_err(js_err)?;
    out.extend(pts.iter().flatten());
    Ok(out)
}
