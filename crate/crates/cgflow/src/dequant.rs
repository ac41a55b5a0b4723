//! Dequantization of binary states.
//!
//! Binary values are lifted to continuous ones by adding noise
//! `u in (0, 1)` per coordinate: either plain uniform noise, or a
//! sigmoid-squashed draw from a single learnable Gaussian shared by all
//! coordinates. The returned correction is the log-density of the noise
//! under its own distribution, i.e. the term subtracted from the model
//! log-likelihood in the usual lower bound.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEQ_MEAN: &str = "deq.mean";
pub const DEQ_LOG_STD: &str = "deq.log_std";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DequantMode {
    Uniform,
    Variational,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DequantConfig {
    pub mode: DequantMode,
}

impl DequantConfig {
    pub fn uniform() -> Self {
        Self { mode: DequantMode::Uniform }
    }

    pub fn variational() -> Self {
        Self { mode: DequantMode::Variational }
    }

    /// Registers the learnable noise parameters (variational mode only).
    pub fn register_params(&self, params: &mut ParamStore) -> Result<()> {
        if self.mode == DequantMode::Variational {
            params.insert(DEQ_MEAN, Tensor::scalar(0.0))?;
            params.insert(DEQ_LOG_STD, Tensor::scalar(0.0))?;
        }
        Ok(())
    }
}

/// Per-coordinate reparameterization record kept for gradients.
#[derive(Debug, Clone)]
pub struct Dequantized {
    /// x + u, strictly inside (x, x+1) per coordinate.
    pub states: Tensor,
    /// Sum over coordinates of log q(u); zero in uniform mode.
    pub correction: f64,
    draw: Option<VariationalDraw>,
}

#[derive(Debug, Clone)]
struct VariationalDraw {
    zeta: Tensor,
    sig: Tensor,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Lifts binary states to continuous ones. `params` supplies the
/// learnable mean/log-std in variational mode.
pub fn dequantize<R: Rng>(
    states: &Tensor,
    cfg: &DequantConfig,
    params: &ParamStore,
    rng: &mut R,
) -> Result<Dequantized> {
    if states.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CgError::Config("dequantize expects binary states".into()));
    }
    match cfg.mode {
        DequantMode::Uniform => {
            let mut out = states.clone();
            for v in out.data_mut() {
                let mut u = rng.random::<f64>();
                while u == 0.0 {
                    u = rng.random::<f64>();
                }
                *v += u;
            }
            Ok(Dequantized { states: out, correction: 0.0, draw: None })
        }
        DequantMode::Variational => {
            let mean = scalar_param(params, DEQ_MEAN)?;
            let log_std = scalar_param(params, DEQ_LOG_STD)?;
            if !log_std.is_finite() {
                return Err(CgError::NonFinite { context: "dequant log-std".into() });
            }
            let std = log_std.exp();
            let mut out = states.clone();
            let mut zeta = Tensor::zeros(states.rows(), states.cols());
            let mut sig = Tensor::zeros(states.rows(), states.cols());
            let mut correction = 0.0;
            let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
            for i in 0..out.len() {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let g = mean + std * z;
                let s = sigmoid(g);
                zeta.data_mut()[i] = z;
                sig.data_mut()[i] = s;
                out.data_mut()[i] += s;
                // log N(g; mean, std) - log sigmoid'(g)
                correction +=
                    -0.5 * z * z - half_ln_2pi - log_std - (s.ln() + (1.0 - s).ln());
            }
            if !correction.is_finite() {
                return Err(CgError::NonFinite { context: "dequant correction".into() });
            }
            Ok(Dequantized {
                states: out,
                correction,
                draw: Some(VariationalDraw { zeta, sig }),
            })
        }
    }
}

impl Dequantized {
    /// Accumulates gradients for the learnable noise parameters.
    ///
    /// `state_cot` is the loss cotangent with respect to the dequantized
    /// states; `correction_weight` is the coefficient the loss puts on
    /// the correction term. Both already carry any normalization.
    pub fn accumulate_param_grads(
        &self,
        params: &ParamStore,
        state_cot: &Tensor,
        correction_weight: f64,
        grads: &mut ParamStore,
    ) -> Result<()> {
        let Some(draw) = &self.draw else {
            return Ok(());
        };
        let log_std = scalar_param(params, DEQ_LOG_STD)?;
        let std = log_std.exp();
        let mut g_mean = 0.0;
        let mut g_logstd = 0.0;
        for i in 0..draw.zeta.len() {
            let z = draw.zeta.data()[i];
            let s = draw.sig.data()[i];
            let dsig = s * (1.0 - s);
            let dlog_sig = 1.0 - 2.0 * s; // d log sigmoid'(g) / dg
            let xbar = state_cot.data()[i];
            // d g / d mean = 1, d g / d log_std = z * std.
            g_mean += xbar * dsig + correction_weight * (-dlog_sig);
            g_logstd += xbar * dsig * z * std
                + correction_weight * (-1.0 - dlog_sig * z * std);
        }
        grads.accumulate(DEQ_MEAN, &Tensor::scalar(g_mean));
        grads.accumulate(DEQ_LOG_STD, &Tensor::scalar(g_logstd));
        Ok(())
    }
}

fn scalar_param(params: &ParamStore, name: &str) -> Result<f64> {
    params
        .get(name)
        .map(|t| t.at(0, 0))
        .ok_or_else(|| CgError::Config(format!("missing parameter {name:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn variational_params() -> ParamStore {
        let mut p = ParamStore::new();
        DequantConfig::variational().register_params(&mut p).unwrap();
        p
    }

    #[test]
    fn output_stays_strictly_inside_unit_bins() {
        let states = Tensor::new(6, 1, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let params = variational_params();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for cfg in [DequantConfig::uniform(), DequantConfig::variational()] {
            for _ in 0..200 {
                let d = dequantize(&states, &cfg, &params, &mut rng).unwrap();
                for (orig, deq) in states.data().iter().zip(d.states.data()) {
                    assert!(*deq > *orig && *deq < *orig + 1.0);
                }
                assert!(d.correction.is_finite());
            }
        }
    }

    #[test]
    fn uniform_mode_has_zero_correction() {
        let states = Tensor::new(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let d = dequantize(&states, &DequantConfig::uniform(), &ParamStore::new(), &mut rng)
            .unwrap();
        assert_eq!(d.correction, 0.0);
    }

    #[test]
    fn non_binary_input_rejected() {
        let states = Tensor::new(1, 1, vec![0.25]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        assert!(dequantize(&states, &DequantConfig::uniform(), &ParamStore::new(), &mut rng)
            .is_err());
    }

    /// Monte-Carlo mean of the correction against 1-D quadrature of
    /// E[log N(g) - log sigmoid'(g)] for the standard-normal noise.
    #[test]
    fn variational_correction_matches_quadrature_oracle() {
        // Simpson's rule over g in [-12, 12].
        let f = |g: f64| {
            let phi = (-0.5 * g * g).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let s = sigmoid(g);
            let log_q = phi.ln() - (s.ln() + (1.0 - s).ln());
            phi * log_q
        };
        let (a, b, steps) = (-12.0f64, 12.0f64, 4000usize);
        let h = (b - a) / steps as f64;
        let mut integral = f(a) + f(b);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += w * f(a + i as f64 * h);
        }
        integral *= h / 3.0;

        let params = variational_params();
        let states = Tensor::new(1, 1, vec![0.0]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 100_000usize;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                dequantize(&states, &DequantConfig::variational(), &params, &mut rng)
                    .unwrap()
                    .correction
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - integral).abs() < 3.0 * se,
            "mc {mean} vs quadrature {integral} (se {se})"
        );
    }

    /// Reparameterized gradients for the noise parameters against central
    /// finite differences on a fixed noise draw.
    #[test]
    fn noise_parameter_gradients_match_finite_differences() {
        let states = Tensor::new(4, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let cfg = DequantConfig::variational();

        // Objective: sum(weights * states) + 0.7 * correction, fixed zeta.
        let weights = Tensor::new(4, 1, vec![0.3, -1.1, 0.55, 2.0]).unwrap();
        let cw = 0.7;
        let objective = |mean: f64, log_std: f64| -> f64 {
            let mut p = ParamStore::new();
            p.insert(DEQ_MEAN, Tensor::scalar(mean)).unwrap();
            p.insert(DEQ_LOG_STD, Tensor::scalar(log_std)).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(77);
            let d = dequantize(&states, &cfg, &p, &mut rng).unwrap();
            d.states.dot(&weights) + cw * d.correction
        };

        let (m0, l0) = (0.2, -0.4);
        let mut p = ParamStore::new();
        p.insert(DEQ_MEAN, Tensor::scalar(m0)).unwrap();
        p.insert(DEQ_LOG_STD, Tensor::scalar(l0)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let d = dequantize(&states, &cfg, &p, &mut rng).unwrap();
        let mut grads = p.zeros_like();
        d.accumulate_param_grads(&p, &weights, cw, &mut grads).unwrap();

        let h = 1e-6;
        let fd_mean = (objective(m0 + h, l0) - objective(m0 - h, l0)) / (2.0 * h);
        let fd_logstd = (objective(m0, l0 + h) - objective(m0, l0 - h)) / (2.0 * h);
        let g_mean = grads.get(DEQ_MEAN).unwrap().at(0, 0);
        let g_logstd = grads.get(DEQ_LOG_STD).unwrap().at(0, 0);
        assert!((g_mean - fd_mean).abs() < 1e-6, "{g_mean} vs {fd_mean}");
        assert!((g_logstd - fd_logstd).abs() < 1e-6, "{g_logstd} vs {fd_logstd}");
    }
}
