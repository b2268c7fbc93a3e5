use std::str::FromStr;

/// An evenly spaced rate axis, written `start:stop:steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn new(start: f64, stop: f64, steps: usize) -> Result<Self, String> {
        // stop may reach 1 so that saturated cells appear as error rows.
        if !(0.0 <= start && start <= stop && stop <= 1.0) {
            return Err(format!(
                "grid needs 0 <= start <= stop <= 1, got {start}:{stop}"
            ));
        }
        if steps == 0 {
            return Err("grid needs at least one step".into());
        }
        if steps == 1 && start != stop {
            return Err("a one-step grid needs start == stop".into());
        }
        Ok(GridSpec { start, stop, steps })
    }

    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.start];
        }
        let h = (self.stop - self.start) / (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| {
                if i + 1 == self.steps {
                    self.stop
                } else {
                    self.start + h * i as f64
                }
            })
            .collect()
    }
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, stop, steps] = parts[..] else {
            return Err(format!("expected start:stop:steps, got '{s}'"));
        };
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad number '{v}': {e}"))
        };
        let steps = steps
            .trim()
            .parse::<usize>()
            .map_err(|e| format!("bad step count '{steps}': {e}"))?;
        GridSpec::new(num(start)?, num(stop)?, steps)
    }
}
