//! Browser demo: glyph warping, the Jensen gap bound and posterior
//! shrinkage under replication, exported through wasm-bindgen.

use optima_core::augmentation::bilinear_affine_warp;
use optima_core::data::{render_glyph, Glyph};
use optima_core::distributions::{DiagonalGaussian, NoiseSource};
use optima_core::theory::{jensen_gap_check, posterior_shrinkage, ConjugateGaussianModel};
use optima_core::Tensor;
use wasm_bindgen::prelude::*;

fn js_err(e: optima_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major `size x size` raster of glyph `index` (0..4) after an affine
/// warp by rotation `omega` and translation `(tx, ty)`.
#[wasm_bindgen]
pub fn warp_glyph(
    index: usize,
    size: usize,
    omega: f64,
    tx: f64,
    ty: f64,
) -> Result<Vec<f64>, JsError> {
    let glyph = *Glyph::ALL
        .get(index)
        .ok_or_else(|| JsError::new("glyph index must be 0..4"))?;
    if !(8..=64).contains(&size) {
        return Err(JsError::new("size must be in 8..=64"));
    }
    let image =
        Tensor::matrix(size, size, render_glyph(glyph, size, 0.0, (0.0, 0.0))).map_err(js_err)?;
    Ok(bilinear_affine_warp(&image, omega, (tx, ty)).into_data())
}

/// `[gap, standard_error, bound]` for `f(g) = amp sin(freq g)` with
/// `g ~ N(0, sigma^2)`, whose Lipschitz constant is `|amp freq|`.
#[wasm_bindgen]
pub fn jensen_gap(
    amp: f64,
    freq: f64,
    sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    if !(sigma > 0.0) || !(n_samples >= 2) || n_samples > 2_000_000 {
        return Err(JsError::new("need sigma > 0 and 2 <= n_samples <= 2e6"));
    }
    let dist = DiagonalGaussian::isotropic(vec![0.0], sigma);
    let f = |g: &[f64]| amp * (freq * g[0]).sin();
    let r = jensen_gap_check(
        &f,
        (amp * freq).abs(),
        &dist,
        n_samples,
        NoiseSource::new(seed),
    )
    .map_err(js_err)?;
    Ok(vec![
        r.quantities["gap"],
        r.quantities["standard_error"],
        r.quantities["bound"],
    ])
}

/// Posterior variance ratio `var_naive / var_true` for `K = 1..=k_max`
/// replicas of `n_obs` observations in the conjugate Gaussian model.
#[wasm_bindgen]
pub fn shrinkage_curve(
    n_obs: usize,
    prior_var: f64,
    obs_var: f64,
    k_max: usize,
) -> Result<Vec<f64>, JsError> {
    if n_obs == 0 || k_max == 0 || k_max > 1000 {
        return Err(JsError::new("need n_obs >= 1 and 1 <= k_max <= 1000"));
    }
    let model =
        ConjugateGaussianModel::new(0.0, prior_var, obs_var, vec![0.0; n_obs]).map_err(js_err)?;
    (1..=k_max)
        .map(|k| {
            posterior_shrinkage(&model, k)
                .map(|s| s.ratio)
                .map_err(js_err)
        })
        .collect()
}
