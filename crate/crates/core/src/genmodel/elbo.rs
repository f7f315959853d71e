use super::GenError;
use std::f64::consts::PI;

/// Negative-ELBO terms for a Gaussian decoder with fixed scale and a diagonal
/// Gaussian encoder: reconstruction `-log N(x; mu_dec, sigma^2 I)` and the
/// closed-form KL to the standard normal.
pub fn gaussian_elbo_terms(
    x: &[f64],
    mu_dec: &[f64],
    sigma: f64,
    mu_enc: &[f64],
    logvar_enc: &[f64],
) -> Result<(f64, f64), GenError> {
    if !(sigma > 0.0) {
        return Err(GenError::BadRange(format!("decoder sigma must be positive, got {sigma}")));
    }
    if x.len() != mu_dec.len() {
        return Err(GenError::DimMismatch {
            expected: x.len(),
            got: mu_dec.len(),
        });
    }
    if mu_enc.len() != logvar_enc.len() {
        return Err(GenError::DimMismatch {
            expected: mu_enc.len(),
            got: logvar_enc.len(),
        });
    }
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mu_dec).map(|(a, b)| (a - b).powi(2)).sum();
    let var = sigma * sigma;
    let rec = sq / (2.0 * var) + 0.5 * d * (2.0 * PI * var).ln();
    let reg = 0.5
        * mu_enc
            .iter()
            .zip(logvar_enc)
            .map(|(m, lv)| lv.exp_m1() - lv + m * m)
            .sum::<f64>();
    Ok((rec, reg))
}
