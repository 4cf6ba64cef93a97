use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl ScheduleParams {
    /// Full-scale default: 1000 linear steps from 0.00085 to 0.012.
    pub fn full_scale() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            kind: ScheduleKind::Linear,
        }
    }

    /// Desk-scale default: 50 steps with the full-scale β range stretched by
    /// 1000/50, so that ᾱ_T is close to zero as at full scale.
    pub fn desk() -> Self {
        let full = Self::full_scale();
        let stretch = full.timesteps as f64 / 50.0;
        Self {
            timesteps: 50,
            beta_start: full.beta_start * stretch,
            beta_end: full.beta_end * stretch,
            kind: ScheduleKind::Linear,
        }
    }

    pub fn build(&self) -> Result<VarianceSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

/// β, α = 1 − β and ᾱ = Πα over timesteps `1..=T`. Accessors take the
/// 1-based timestep; `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<VarianceSchedule> {
    if timesteps < 1 {
        return Err(Error::InvalidParameter("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(VarianceSchedule {
        params: ScheduleParams {
            timesteps,
            beta_start,
            beta_end,
            kind,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl VarianceSchedule {
    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidParameter(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// σ_t² = β_t.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// ᾱ_t / (1 − ᾱ_t).
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }
}
