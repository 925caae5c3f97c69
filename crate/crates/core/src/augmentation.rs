//! Transformation families `T_gamma` and the distribution `p(gamma | phi)`.
//!
//! Every family stores `phi` in a flat, kind-specific layout:
//!
//! | kind              | layout                                              |
//! |-------------------|-----------------------------------------------------|
//! | additive shift    | `[mu_1..mu_D, log_sigma_1..log_sigma_D]`            |
//! | affine image      | `[mu_w, ls_w, mu_tx, ls_tx, mu_ty, ls_ty]`          |
//! | categorical       | `[logit_1..logit_M]` (temperature is fixed)         |
//! | mixup             | `[mu, log_sigma]` of a Gaussian over `log(alpha)`   |
//!
//! Rotations are in radians about the geometric image centre, translations
//! are fractions of the image width (x) and height (y).

use serde::{Deserialize, Serialize};

use crate::distributions::{clamp_log_std, DiagonalGaussian, NoiseSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ALPHA_MIN: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 100.0;
pub const LAMBDA_EPS: f64 = 1e-6;

/// Discrete transforms selectable by the categorical family. Vectors are
/// treated as `1 x D` rasters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscreteTransform {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate180,
}

impl DiscreteTransform {
    pub fn apply(self, x: &[f64], height: usize, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..height {
            for c in 0..width {
                let (sr, sc) = match self {
                    DiscreteTransform::Identity => (r, c),
                    DiscreteTransform::FlipHorizontal => (r, width - 1 - c),
                    DiscreteTransform::FlipVertical => (height - 1 - r, c),
                    DiscreteTransform::Rotate180 => (height - 1 - r, width - 1 - c),
                };
                out[r * width + c] = x[sr * width + sc];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FamilyKind {
    AdditiveShift {
        dim: usize,
    },
    AffineImage {
        height: usize,
        width: usize,
    },
    CategoricalChoice {
        transforms: Vec<DiscreteTransform>,
        temperature: f64,
        height: usize,
        width: usize,
    },
    MixupBeta,
}

impl FamilyKind {
    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::AdditiveShift { .. } => "additive-shift",
            FamilyKind::AffineImage { .. } => "affine-image",
            FamilyKind::CategoricalChoice { .. } => "categorical-choice",
            FamilyKind::MixupBeta => "mixup-beta",
        }
    }

    pub fn phi_len(&self) -> usize {
        match self {
            FamilyKind::AdditiveShift { dim } => 2 * dim,
            FamilyKind::AffineImage { .. } => 6,
            FamilyKind::CategoricalChoice { transforms, .. } => transforms.len(),
            FamilyKind::MixupBeta => 2,
        }
    }

    /// Indices of `phi` entries that are log standard deviations.
    pub fn log_std_slots(&self) -> Vec<usize> {
        match self {
            FamilyKind::AdditiveShift { dim } => (*dim..2 * dim).collect(),
            FamilyKind::AffineImage { .. } => vec![1, 3, 5],
            FamilyKind::CategoricalChoice { .. } => vec![],
            FamilyKind::MixupBeta => vec![1],
        }
    }

    /// Names of the transformation coordinates that carry a Gaussian
    /// (mean, log_std) pair in `phi`, in layout order.
    pub fn coordinate_names(&self) -> Vec<String> {
        match self {
            FamilyKind::AdditiveShift { dim } => (0..*dim).map(|i| format!("shift{i}")).collect(),
            FamilyKind::AffineImage { .. } => vec!["omega".into(), "tx".into(), "ty".into()],
            FamilyKind::CategoricalChoice { transforms, .. } => {
                (0..transforms.len()).map(|i| format!("logit{i}")).collect()
            }
            FamilyKind::MixupBeta => vec!["log_alpha".into()],
        }
    }

    /// `(mean slot, log_std slot)` for each Gaussian coordinate.
    pub fn gaussian_pairs(&self) -> Vec<(usize, usize)> {
        match self {
            FamilyKind::AdditiveShift { dim } => (0..*dim).map(|i| (i, dim + i)).collect(),
            FamilyKind::AffineImage { .. } => vec![(0, 1), (2, 3), (4, 5)],
            FamilyKind::CategoricalChoice { .. } => vec![],
            FamilyKind::MixupBeta => vec![(0, 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationFamily {
    pub kind: FamilyKind,
    pub phi: Vec<f64>,
    pub phi_prior: DiagonalGaussian,
}

impl AugmentationFamily {
    pub fn new(kind: FamilyKind, phi: Vec<f64>, phi_prior: DiagonalGaussian) -> Result<Self> {
        let n = kind.phi_len();
        if phi.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: phi.len(),
            });
        }
        if phi_prior.dim() != n {
            return Err(Error::Dimension {
                expected: n,
                got: phi_prior.dim(),
            });
        }
        if let FamilyKind::CategoricalChoice {
            transforms,
            temperature,
            ..
        } = &kind
        {
            if transforms.is_empty() {
                return Err(Error::InvalidArgument(
                    "categorical family needs at least one transform".into(),
                ));
            }
            if !(*temperature > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
        }
        Ok(Self {
            kind,
            phi,
            phi_prior,
        })
    }

    /// Additive Gaussian shift starting at `N(0, init_sigma^2)` with a prior
    /// centred on `N(0, prior_sigma^2)`.
    pub fn additive_shift(
        dim: usize,
        init_sigma: f64,
        prior_sigma: f64,
        prior_spread: (f64, f64),
    ) -> Self {
        let mut phi = vec![0.0; dim];
        phi.extend(std::iter::repeat_n(init_sigma.ln(), dim));
        let mut mean = vec![0.0; dim];
        mean.extend(std::iter::repeat_n(prior_sigma.ln(), dim));
        let mut log_std = vec![prior_spread.0.ln(); dim];
        log_std.extend(std::iter::repeat_n(prior_spread.1.ln(), dim));
        Self {
            kind: FamilyKind::AdditiveShift { dim },
            phi,
            phi_prior: DiagonalGaussian { mean, log_std },
        }
    }

    pub fn affine_image(height: usize, width: usize, init_sigma: f64, prior_spread: f64) -> Self {
        let ls = init_sigma.ln();
        let phi = vec![0.0, ls, 0.0, ls, 0.0, ls];
        let prior = DiagonalGaussian {
            mean: phi.clone(),
            log_std: vec![prior_spread.ln(); 6],
        };
        Self {
            kind: FamilyKind::AffineImage { height, width },
            phi,
            phi_prior: prior,
        }
    }

    pub fn categorical(
        transforms: Vec<DiscreteTransform>,
        temperature: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let m = transforms.len();
        Self::new(
            FamilyKind::CategoricalChoice {
                transforms,
                temperature,
                height,
                width,
            },
            vec![0.0; m],
            DiagonalGaussian::standard(m),
        )
    }

    /// Mixup with `Beta(alpha, alpha)`; `log(alpha)` starts at `ln(init_alpha)`.
    pub fn mixup(init_alpha: f64, prior_spread: f64) -> Self {
        let phi = vec![init_alpha.ln(), 0.1f64.ln()];
        let prior = DiagonalGaussian {
            mean: phi.clone(),
            log_std: vec![prior_spread.ln(), 0.0],
        };
        Self {
            kind: FamilyKind::MixupBeta,
            phi,
            phi_prior: prior,
        }
    }

    pub fn with_phi(&self, phi: Vec<f64>) -> Self {
        Self {
            kind: self.kind.clone(),
            phi,
            phi_prior: self.phi_prior.clone(),
        }
    }

    /// `phi` with log-std slots clamped; fails on NaN or infinite means.
    pub fn sanitized_phi(&self) -> Result<Vec<f64>> {
        let ls = self.kind.log_std_slots();
        let mut out = self.phi.clone();
        for (i, v) in out.iter_mut().enumerate() {
            if v.is_nan() {
                return Err(Error::InvalidArgument(format!("phi[{i}] is NaN")));
            }
            if ls.contains(&i) {
                *v = clamp_log_std(*v);
            } else if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("phi[{i}] is not finite")));
            }
        }
        Ok(out)
    }

    /// Per-coordinate `(mean, sigma)` of `p(gamma | phi)` for logging.
    pub fn summary(&self) -> Vec<(String, f64, f64)> {
        let names = self.kind.coordinate_names();
        match &self.kind {
            FamilyKind::CategoricalChoice { .. } => {
                let probs = softmax(&self.phi);
                names
                    .into_iter()
                    .zip(probs)
                    .map(|(n, p)| (n, p, 0.0))
                    .collect()
            }
            kind => names
                .into_iter()
                .zip(kind.gaussian_pairs())
                .map(|(n, (m, s))| (n, self.phi[m], clamp_log_std(self.phi[s]).exp()))
                .collect(),
        }
    }
}

/// Kind-specific transformation parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Gamma {
    Shift(Vec<f64>),
    Affine {
        omega: f64,
        tx: f64,
        ty: f64,
    },
    /// Relaxed one-hot weights over the family's transforms.
    Choice(Vec<f64>),
    Mixup {
        log_alpha: f64,
        alpha: f64,
        lambda: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformSample {
    pub gamma: Gamma,
    /// Exogenous noise behind a pathwise draw (standard normal, or Gumbel for
    /// the categorical family).
    pub noise: Vec<f64>,
    /// `log p(log_alpha | phi)`, recorded for score-function gradients.
    pub log_density_q: Option<f64>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn sample_gamma(family: &AugmentationFamily, noise: NoiseSource) -> Result<TransformSample> {
    let phi = family.sanitized_phi()?;
    let mut stream = noise.stream();
    match &family.kind {
        FamilyKind::AdditiveShift { dim } => {
            let eps = stream.normal_vec(*dim);
            let gamma = (0..*dim)
                .map(|i| phi[i] + phi[dim + i].exp() * eps[i])
                .collect();
            Ok(TransformSample {
                gamma: Gamma::Shift(gamma),
                noise: eps,
                log_density_q: None,
            })
        }
        FamilyKind::AffineImage { .. } => {
            let eps = stream.normal_vec(3);
            let at = |k: usize| phi[2 * k] + phi[2 * k + 1].exp() * eps[k];
            Ok(TransformSample {
                gamma: Gamma::Affine {
                    omega: at(0),
                    tx: at(1),
                    ty: at(2),
                },
                noise: eps,
                log_density_q: None,
            })
        }
        FamilyKind::CategoricalChoice { temperature, .. } => {
            let g: Vec<f64> = (0..phi.len()).map(|_| stream.gumbel()).collect();
            let weights = relaxed_one_hot(&phi, &g, *temperature)?;
            Ok(TransformSample {
                gamma: Gamma::Choice(weights),
                noise: g,
                log_density_q: None,
            })
        }
        FamilyKind::MixupBeta => {
            let (lambda, info) = mixup_from_phi(&phi, &mut stream);
            Ok(TransformSample {
                gamma: Gamma::Mixup {
                    log_alpha: info.log_alpha,
                    alpha: info.alpha,
                    lambda,
                },
                noise: vec![info.noise],
                log_density_q: Some(info.log_density),
            })
        }
    }
}

/// Applies `T_gamma` to one example. Mixup needs a partner; use [`mix_pair`].
pub fn apply_transform(
    family: &AugmentationFamily,
    sample: &TransformSample,
    x: &[f64],
) -> Result<Vec<f64>> {
    match (&family.kind, &sample.gamma) {
        (FamilyKind::AdditiveShift { dim }, Gamma::Shift(g)) => {
            if x.len() != *dim || g.len() != *dim {
                return Err(Error::Dimension {
                    expected: *dim,
                    got: x.len(),
                });
            }
            Ok(x.iter().zip(g).map(|(a, b)| a + b).collect())
        }
        (FamilyKind::AffineImage { height, width }, Gamma::Affine { omega, tx, ty }) => {
            if x.len() != height * width {
                return Err(Error::Dimension {
                    expected: height * width,
                    got: x.len(),
                });
            }
            let image = Tensor::matrix(*height, *width, x.to_vec())?;
            Ok(bilinear_affine_warp(&image, *omega, (*tx, *ty)).into_data())
        }
        (
            FamilyKind::CategoricalChoice {
                transforms,
                height,
                width,
                ..
            },
            Gamma::Choice(w),
        ) => {
            if x.len() != height * width {
                return Err(Error::Dimension {
                    expected: height * width,
                    got: x.len(),
                });
            }
            let mut out = vec![0.0; x.len()];
            for (t, &wm) in transforms.iter().zip(w) {
                for (o, v) in out.iter_mut().zip(t.apply(x, *height, *width)) {
                    *o += wm * v;
                }
            }
            Ok(out)
        }
        (FamilyKind::MixupBeta, _) => Err(Error::InvalidArgument(
            "mixup needs a partner example; use mix_pair".into(),
        )),
        (kind, _) => Err(Error::InvalidArgument(format!(
            "sample does not belong to a {} family",
            kind.name()
        ))),
    }
}

/// `lambda * a + (1 - lambda) * b`.
pub fn mix_pair(lambda: f64, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect())
}

/// Maps an output pixel to its source location: inverse rotation about the
/// centre after removing the translation.
fn source_coords(
    r: usize,
    c: usize,
    centre: (f64, f64),
    cos: f64,
    sin: f64,
    shift: (f64, f64),
) -> (f64, f64) {
    let dx = c as f64 - centre.1 - shift.0;
    let dy = r as f64 - centre.0 - shift.1;
    (
        centre.1 + cos * dx + sin * dy,
        centre.0 - sin * dx + cos * dy,
    )
}

/// Bilinear sample with zero padding, plus its partial derivatives in `x`
/// and `y`.
fn bilinear(image: &Tensor, sx: f64, sy: f64) -> (f64, f64, f64) {
    let (h, w) = (image.rows() as isize, image.cols() as isize);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |r: isize, c: isize| {
        if r >= 0 && r < h && c >= 0 && c < w {
            image.get2(r as usize, c as usize)
        } else {
            0.0
        }
    };
    let (a, b) = (px(y0, x0), px(y0, x0 + 1));
    let (c, d) = (px(y0 + 1, x0), px(y0 + 1, x0 + 1));
    let top = a + fx * (b - a);
    let bottom = c + fx * (d - c);
    let value = top + fy * (bottom - top);
    let ddx = (1.0 - fy) * (b - a) + fy * (d - c);
    let ddy = bottom - top;
    (value, ddx, ddy)
}

/// Rotates by `omega` about the image centre, then translates by
/// `(t_x * W, t_y * H)` pixels. Out-of-bounds reads are zero.
pub fn bilinear_affine_warp(image: &Tensor, omega: f64, t: (f64, f64)) -> Tensor {
    warp_impl(image, omega, t, None).0
}

/// Warp plus the vector-Jacobian product `upstream . d warp / d(omega, t_x, t_y)`.
pub fn bilinear_affine_warp_vjp(
    image: &Tensor,
    omega: f64,
    t: (f64, f64),
    upstream: &[f64],
) -> (Tensor, [f64; 3]) {
    warp_impl(image, omega, t, Some(upstream))
}

fn warp_impl(
    image: &Tensor,
    omega: f64,
    t: (f64, f64),
    upstream: Option<&[f64]>,
) -> (Tensor, [f64; 3]) {
    let (h, w) = (image.rows(), image.cols());
    let centre = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = omega.sin_cos();
    let shift = (t.0 * w as f64, t.1 * h as f64);
    let mut out = vec![0.0; h * w];
    let mut grad = [0.0; 3];
    for r in 0..h {
        for c in 0..w {
            let (sx, sy) = source_coords(r, c, centre, cos, sin, shift);
            let (v, ddx, ddy) = bilinear(image, sx, sy);
            out[r * w + c] = v;
            if let Some(up) = upstream {
                let g = up[r * w + c];
                if g == 0.0 {
                    continue;
                }
                let dx = c as f64 - centre.1 - shift.0;
                let dy = r as f64 - centre.0 - shift.1;
                // d(sx, sy)/d omega, d/d t_x, d/d t_y
                let dsx_dw = -sin * dx + cos * dy;
                let dsy_dw = -cos * dx - sin * dy;
                let (dsx_dtx, dsy_dtx) = (-cos * w as f64, sin * w as f64);
                let (dsx_dty, dsy_dty) = (-sin * h as f64, -cos * h as f64);
                grad[0] += g * (ddx * dsx_dw + ddy * dsy_dw);
                grad[1] += g * (ddx * dsx_dtx + ddy * dsy_dtx);
                grad[2] += g * (ddx * dsx_dty + ddy * dsy_dty);
            }
        }
    }
    (Tensor::matrix(h, w, out).expect("h*w values"), grad)
}

/// `softmax((logits + gumbel) / temperature)` for given Gumbel noise.
pub fn relaxed_one_hot(logits: &[f64], gumbel: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.len() != gumbel.len() {
        return Err(Error::Dimension {
            expected: logits.len(),
            got: gumbel.len(),
        });
    }
    let z: Vec<f64> = logits
        .iter()
        .zip(gumbel)
        .map(|(l, g)| (l + g) / temperature)
        .collect();
    Ok(softmax(&z))
}

pub fn gumbel_softmax_sample(
    logits: &[f64],
    temperature: f64,
    noise: NoiseSource,
) -> Result<Vec<f64>> {
    let mut stream = noise.stream();
    let g: Vec<f64> = (0..logits.len()).map(|_| stream.gumbel()).collect();
    relaxed_one_hot(logits, &g, temperature)
}

/// What a mixup draw needs for its score-function gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixupScore {
    pub log_alpha: f64,
    pub alpha: f64,
    /// Standard-normal noise behind `log_alpha`.
    pub noise: f64,
    /// `log N(log_alpha; mu, sigma^2)`.
    pub log_density: f64,
}

fn mixup_from_phi(
    phi: &[f64],
    stream: &mut crate::distributions::NoiseStream,
) -> (f64, MixupScore) {
    let (mu, ls) = (phi[0], clamp_log_std(phi[1]));
    let eps = stream.standard_normal();
    let log_alpha = mu + ls.exp() * eps;
    let alpha = log_alpha.exp().clamp(ALPHA_MIN, ALPHA_MAX);
    let lambda = stream
        .beta(alpha, alpha)
        .clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS);
    let log_density = -crate::distributions::HALF_LN_2PI - ls - 0.5 * eps * eps;
    (
        lambda,
        MixupScore {
            log_alpha,
            alpha,
            noise: eps,
            log_density,
        },
    )
}

pub fn sample_mixup_lambda(
    family: &AugmentationFamily,
    noise: NoiseSource,
) -> Result<(f64, MixupScore)> {
    if family.kind != FamilyKind::MixupBeta {
        return Err(Error::InvalidArgument(format!(
            "expected a mixup-beta family, got {}",
            family.kind.name()
        )));
    }
    let phi = family.sanitized_phi()?;
    Ok(mixup_from_phi(&phi, &mut noise.stream()))
}
