//! Dynamic loss scaling.

/// What to do with the update computed at the current scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDecision {
    Apply,
    Skip,
}

/// Multiplies the loss seed by a power-of-two scale that backs off on a
/// backward overflow and grows after a run of clean steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossScaler {
    scale: f64,
    growth_factor: f64,
    backoff_factor: f64,
    growth_interval: usize,
    clean_steps: usize,
    enabled: bool,
}

impl LossScaler {
    pub fn new(init: f64, growth_factor: f64, backoff_factor: f64, growth_interval: usize) -> Self {
        LossScaler {
            scale: init,
            growth_factor,
            backoff_factor,
            growth_interval: growth_interval.max(1),
            clean_steps: 0,
            enabled: true,
        }
    }

    /// A fixed scale of one that never skips.
    pub fn disabled() -> Self {
        LossScaler {
            scale: 1.0,
            growth_factor: 1.0,
            backoff_factor: 1.0,
            growth_interval: usize::MAX,
            clean_steps: 0,
            enabled: false,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Updates the scale after a step. Backoff takes precedence over growth.
    pub fn update(&mut self, backward_overflow: bool) -> ScaleDecision {
        if !self.enabled {
            return ScaleDecision::Apply;
        }
        if backward_overflow {
            self.scale *= self.backoff_factor;
            self.clean_steps = 0;
            return ScaleDecision::Skip;
        }
        self.clean_steps += 1;
        if self.clean_steps >= self.growth_interval {
            self.scale *= self.growth_factor;
            self.clean_steps = 0;
        }
        ScaleDecision::Apply
    }
}
