use serde::{Deserialize, Serialize};

use super::ModelError;

/// Default global-norm clip for gradient steps.
pub const DEFAULT_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `theta - eta * g`
    Descent,
    /// `theta + eta * g`
    Ascent,
}

/// L2 norm over several slices taken as one vector.
pub fn global_norm(parts: &[&[f64]]) -> f64 {
    parts.iter().flat_map(|p| p.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// In-place SGD step. With `clip`, the gradient is rescaled to norm `clip`
/// when larger.
pub fn apply_update(
    params: &mut [f64],
    grads: &[f64],
    eta: f64,
    dir: Direction,
    clip: Option<f64>,
) -> Result<(), ModelError> {
    if params.len() != grads.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(ModelError::InvalidConfig(format!("learning rate {eta}")));
    }
    let mut step = match dir {
        Direction::Descent => -eta,
        Direction::Ascent => eta,
    };
    if let Some(c) = clip {
        let n = global_norm(&[grads]);
        if n > c && n > 0.0 {
            step *= c / n;
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p += step * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_caps_step_length() {
        let mut p = vec![0.0, 0.0];
        apply_update(&mut p, &[30.0, 40.0], 1.0, Direction::Descent, Some(5.0)).unwrap();
        assert!((p[0] + 3.0).abs() < 1e-12 && (p[1] + 4.0).abs() < 1e-12);
        assert!(apply_update(&mut p, &[1.0], 1.0, Direction::Descent, None).is_err());
        assert!(apply_update(&mut p, &[1.0, 1.0], f64::NAN, Direction::Descent, None).is_err());
    }

    proptest! {
        #[test]
        fn ascent_undoes_descent(
            p in prop::collection::vec(-10.0f64..10.0, 1..20),
            seed in 0u64..1000,
            eta in 0.0f64..2.0,
        ) {
            let g: Vec<f64> = p.iter().enumerate().map(|(i, _)| ((seed + i as u64) % 7) as f64 - 3.0).collect();
            let mut q = p.clone();
            apply_update(&mut q, &g, eta, Direction::Descent, None).unwrap();
            apply_update(&mut q, &g, eta, Direction::Ascent, None).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
