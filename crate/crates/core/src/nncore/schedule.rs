use crate::error::{Error, Result};

/// Staircase learning-rate decay: `lr0 * decay_factor^floor(epoch / decay_period)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_period: u32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { lr0: 1e-3, decay_factor: 0.1, decay_period: 20 }
    }
}

impl LrSchedule {
    pub fn constant(lr0: f64) -> Self {
        Self { lr0, decay_factor: 1.0, decay_period: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_period == 0 {
            return Err(Error::Config("decay_period must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: i64) -> Result<f64> {
        lr_at(self, epoch)
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::InvalidArgument(format!("epoch must be non-negative, got {epoch}")));
    }
    if schedule.decay_period == 0 {
        return Err(Error::InvalidArgument("decay_period must be positive".into()));
    }
    let drops = (epoch as u64 / schedule.decay_period as u64) as i32;
    Ok(schedule.lr0 * schedule.decay_factor.powi(drops))
}
