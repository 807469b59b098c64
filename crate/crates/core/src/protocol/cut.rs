//! Timestep ownership under a cut-ratio.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CutError {
    #[error("cut-ratio must lie in [0, 1], got {0}")]
    RatioOutOfRange(f64),
    #[error("total timesteps must be positive")]
    NoSteps,
    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
}

/// Which party runs (and trains) a denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ownership {
    Server,
    Client,
}

impl fmt::Display for Ownership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ownership::Server => "server",
            Ownership::Client => "client",
        })
    }
}

/// Split of `1..=T` between the shared server model (high-noise steps
/// `t > t_split`, run first when sampling) and the client-local models
/// (`t <= t_split`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutConfig {
    steps: usize,
    ratio: f64,
    t_split: usize,
}

impl CutConfig {
    /// `t_split = round_half_up(c·T)`.
    pub fn new(steps: usize, ratio: f64) -> Result<Self, CutError> {
        if steps == 0 {
            return Err(CutError::NoSteps);
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(CutError::RatioOutOfRange(ratio));
        }
        // the small bias keeps exact halves (e.g. 0.03·50) rounding up
        // despite binary representation error
        let t_split = ((ratio * steps as f64) + 0.5 + 1e-9).floor() as usize;
        Ok(Self {
            steps,
            ratio,
            t_split: t_split.min(steps),
        })
    }

    /// Rebuild from an explicit split, e.g. one received over the wire.
    pub fn from_split(steps: usize, t_split: usize) -> Result<Self, CutError> {
        if steps == 0 {
            return Err(CutError::NoSteps);
        }
        if t_split > steps {
            return Err(CutError::TimestepOutOfRange { t: t_split, steps });
        }
        Ok(Self {
            steps,
            ratio: t_split as f64 / steps as f64,
            t_split,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn t_split(&self) -> usize {
        self.t_split
    }

    pub fn server_steps(&self) -> usize {
        self.steps - self.t_split
    }

    pub fn client_steps(&self) -> usize {
        self.t_split
    }

    pub fn ownership(&self, t: usize) -> Result<Ownership, CutError> {
        if t == 0 || t > self.steps {
            return Err(CutError::TimestepOutOfRange { t, steps: self.steps });
        }
        Ok(if t > self.t_split {
            Ownership::Server
        } else {
            Ownership::Client
        })
    }

    pub fn is_server_step(&self, t: usize) -> bool {
        t > self.t_split && t <= self.steps
    }
}
