//! Weight schedules: JSON lines of `{"step": n, "weights": [...]}`
//! keyframes, linearly interpolated in between and held constant outside.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub step: u64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSchedule {
    keys: Vec<Keyframe>,
}

impl WeightSchedule {
    pub fn new(keys: Vec<Keyframe>) -> Result<Self, String> {
        let first = keys.first().ok_or("schedule is empty")?;
        let n = first.weights.len();
        for (i, k) in keys.iter().enumerate() {
            if k.weights.len() != n {
                return Err(format!("keyframe {i} has {} weights, expected {n}", k.weights.len()));
            }
            if k.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(format!("keyframe {i} has a negative or non-finite weight"));
            }
            if i > 0 && k.step <= keys[i - 1].step {
                return Err(format!("keyframe {i}: steps must increase"));
            }
        }
        Ok(Self { keys })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let keys = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<Result<Vec<Keyframe>, _>>()?;
        Self::new(keys)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn len(&self) -> usize {
        self.keys[0].weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, step: u64) -> Vec<f64> {
        let after = self.keys.partition_point(|k| k.step <= step);
        if after == 0 {
            return self.keys[0].weights.clone();
        }
        let a = &self.keys[after - 1];
        let Some(b) = self.keys.get(after) else {
            return a.weights.clone();
        };
        if step == a.step {
            return a.weights.clone();
        }
        let t = (step - a.step) as f64 / (b.step - a.step) as f64;
        a.weights
            .iter()
            .zip(&b.weights)
            .map(|(x, y)| x + t * (y - x))
            .collect()
    }
}
