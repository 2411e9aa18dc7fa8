//! Reduce-on-plateau learning rate control.
//!
//! The rate halves once the validation score has failed to improve for
//! more than `patience` consecutive epochs, then the stall counter starts
//! over. Improvement means strictly lower.

pub struct Plateau {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
    pub best: f64,
    pub stall: usize,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, factor: f64, floor: f64) -> Self {
        Plateau {
            lr,
            patience,
            factor,
            floor,
            best: f64::INFINITY,
            stall: 0,
        }
    }

    /// Feeds one epoch's validation score. Returns true when the score is a
    /// new best; `self.lr` afterwards is the rate for the next epoch.
    pub fn observe(&mut self, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.stall = 0;
            return true;
        }
        self.stall += 1;
        if self.stall > self.patience {
            self.lr = (self.lr * self.factor).max(self.floor);
            self.stall = 0;
        }
        false
    }
}
