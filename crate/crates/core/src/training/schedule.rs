use crate::error::{Error, Result};

/// Triangular cyclical learning rate with period `2 * step_size`.
pub fn cyclical_lr(t: u64, base_lr: f64, max_lr: f64, step_size: u64) -> Result<f64> {
    if step_size == 0 {
        return Err(Error::Config("step_size must be positive".into()));
    }
    let s = step_size as f64;
    let t = t as f64;
    let cycle = (1.0 + t / (2.0 * s)).floor();
    let x = (t / s - 2.0 * cycle + 1.0).abs();
    Ok(base_lr + (max_lr - base_lr) * (1.0 - x).max(0.0))
}

/// Stops once the number of consecutive non-improving evaluations exceeds
/// `patience`. Improvement is a strict decrease.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, stale: 0 }
    }

    /// Records a loss; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, b)) if loss >= b => self.stale += 1,
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
            }
        }
        self.stale > self.patience
    }

    pub fn is_best(&self, epoch: usize) -> bool {
        self.best.map(|(e, _)| e) == Some(epoch)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn triangle_examples() {
        assert_eq!(cyclical_lr(0, 1e-3, 6e-3, 1000).unwrap(), 1e-3);
        assert!((cyclical_lr(1000, 1e-3, 6e-3, 1000).unwrap() - 6e-3).abs() < 1e-18);
        assert!((cyclical_lr(2000, 1e-3, 6e-3, 1000).unwrap() - 1e-3).abs() < 1e-18);
        assert!((cyclical_lr(500, 1e-3, 6e-3, 1000).unwrap() - 3.5e-3).abs() < 1e-18);
        assert!(cyclical_lr(3, 1e-3, 6e-3, 0).is_err());
    }

    #[test]
    fn patience_example() {
        let mut es = EarlyStopping::new(1);
        let losses = [(0, 1.0), (1, 0.9), (2, 0.8), (3, 0.85), (4, 0.86)];
        let stops: Vec<bool> = losses.iter().map(|&(e, l)| es.observe(e, l)).collect();
        assert_eq!(stops, vec![false, false, false, false, true]);
        assert_eq!(es.best(), Some((2, 0.8)));
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut es = EarlyStopping::new(1);
        es.observe(0, 0.5);
        assert!(!es.observe(1, 0.5));
        assert!(es.observe(2, 0.5));
        assert_eq!(es.best(), Some((0, 0.5)));
    }

    proptest! {
        #[test]
        fn lr_in_range_and_periodic(t in 0u64..1_000_000, step in 1u64..5000) {
            let lr = cyclical_lr(t, 1e-3, 6e-3, step).unwrap();
            prop_assert!((1e-3..=6e-3).contains(&lr));
            let later = cyclical_lr(t + 2 * step, 1e-3, 6e-3, step).unwrap();
            prop_assert!((lr - later).abs() < 1e-15);
        }

        #[test]
        fn best_is_minimum_observed(losses in proptest::collection::vec(0.0f64..10.0, 1..40), patience in 1usize..5) {
            let mut es = EarlyStopping::new(patience);
            let mut seen = Vec::new();
            for (e, &l) in losses.iter().enumerate() {
                seen.push(l);
                if es.observe(e, l) { break; }
            }
            let min = seen.iter().cloned().fold(f64::INFINITY, f64::min);
            let (epoch, best) = es.best().unwrap();
            prop_assert_eq!(best, min);
            prop_assert_eq!(seen.iter().position(|&l| l == min).unwrap(), epoch);
        }
    }
}
