//! Weighted sum of the base denoising loss and the auxiliary terms.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::contrastive::scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// λ1, text contrastive.
    pub text: f64,
    /// λ2, edge.
    pub edge: f64,
    /// λ3, perceptual.
    pub perceptual: f64,
    /// Min-SNR clamp γ.
    pub snr_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            text: 0.3,
            edge: 0.3,
            perceptual: 0.1,
            snr_gamma: 5.0,
        }
    }
}

impl LossWeights {
    pub fn base_only() -> Self {
        Self {
            text: 0.0,
            edge: 0.0,
            perceptual: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("text", self.text),
            ("edge", self.edge),
            ("perceptual", self.perceptual),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.snr_gamma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "snr gamma must be > 0, got {}",
                self.snr_gamma
            )));
        }
        Ok(())
    }
}

/// Scalar loss tensors; absent auxiliary terms contribute nothing.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub sd: Tensor,
    pub text: Option<Tensor>,
    pub edge: Option<Tensor>,
    pub perceptual: Option<Tensor>,
}

/// Per-term values as logged.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValues {
    pub sd: f64,
    pub text: Option<f64>,
    pub edge: Option<f64>,
    pub perceptual: Option<f64>,
    pub total: f64,
}

impl TermValues {
    /// `sd + λ1 text + λ2 edge + λ3 perceptual` over the present terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.sd
            + w.text * self.text.unwrap_or(0.0)
            + w.edge * self.edge.unwrap_or(0.0)
            + w.perceptual * self.perceptual.unwrap_or(0.0)
    }
}

pub struct CombinedLoss {
    pub total: Tensor,
    pub values: TermValues,
}

fn checked(name: &str, t: &Tensor) -> Result<f64> {
    let v = scalar(t)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss term {name} ({v})")))
    }
}

pub fn combined_loss(terms: &LossTerms, weights: &LossWeights) -> Result<CombinedLoss> {
    weights.validate()?;
    let sd = checked("sd", &terms.sd)?;
    let mut total = terms.sd.clone();
    let mut values = TermValues {
        sd,
        ..Default::default()
    };
    for (name, term, w, slot) in [
        ("text", &terms.text, weights.text, &mut values.text),
        ("edge", &terms.edge, weights.edge, &mut values.edge),
        (
            "perceptual",
            &terms.perceptual,
            weights.perceptual,
            &mut values.perceptual,
        ),
    ] {
        if let Some(t) = term {
            *slot = Some(checked(name, t)?);
            total = (total + (t * w)?)?;
        }
    }
    values.total = values.weighted_sum(weights);
    Ok(CombinedLoss { total, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn s(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn default_weights_give_worked_total() {
        let terms = LossTerms {
            sd: s(1.0),
            text: Some(s(2.0)),
            edge: Some(s(3.0)),
            perceptual: Some(s(4.0)),
        };
        let out = combined_loss(&terms, &LossWeights::default()).unwrap();
        assert!((out.values.total - 2.9).abs() < 1e-12);
        assert!((scalar(&out.total).unwrap() - 2.9).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_reduce_to_base() {
        let terms = LossTerms {
            sd: s(1.25),
            text: Some(s(2.0)),
            edge: Some(s(3.0)),
            perceptual: None,
        };
        let out = combined_loss(&terms, &LossWeights::base_only()).unwrap();
        assert_eq!(out.values.total, 1.25);
        assert_eq!(scalar(&out.total).unwrap(), 1.25);
    }

    #[test]
    fn non_finite_term_is_named() {
        let terms = LossTerms {
            sd: s(1.0),
            text: None,
            edge: Some(s(f64::NAN)),
            perceptual: None,
        };
        let err = combined_loss(&terms, &LossWeights::default()).err().unwrap();
        assert!(err.to_string().contains("edge"), "{err}");
    }

    #[test]
    fn gradient_is_linear_in_terms() {
        let theta = Var::new(&[0.7f64, -1.3], &Device::Cpu).unwrap();
        let x = theta.as_tensor();
        let sd = x.sqr().unwrap().sum_all().unwrap();
        let text = x.exp().unwrap().sum_all().unwrap();
        let edge = (x * 3.0).unwrap().sin().unwrap().sum_all().unwrap();
        let perc = x.sqr().unwrap().sqr().unwrap().sum_all().unwrap();
        let w = LossWeights::default();
        let out = combined_loss(
            &LossTerms {
                sd: sd.clone(),
                text: Some(text.clone()),
                edge: Some(edge.clone()),
                perceptual: Some(perc.clone()),
            },
            &w,
        )
        .unwrap();
        let g = |t: &Tensor| t.backward().unwrap().get(x).unwrap().to_vec1::<f64>().unwrap();
        let total = g(&out.total);
        let parts = [g(&sd), g(&text), g(&edge), g(&perc)];
        for i in 0..2 {
            let expected = parts[0][i] + w.text * parts[1][i] + w.edge * parts[2][i] + w.perceptual * parts[3][i];
            assert!((total[i] - expected).abs() < 1e-6);
        }
    }
}
