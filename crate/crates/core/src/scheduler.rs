//! Client-side upload censoring.
//!
//! A client uploads when its gradient has drifted far enough from the one
//! it last reported, measured against the recent movement of the global
//! model:
//!
//! ```text
//! N^2 eta^2 ||grad f_i(w^t) - grad f_i(w~_i)||^2  >=  sum_k delta_k ||w^{t+1-k} - w^{t-k}||^2
//! ```
//!
//! A staleness clock forces an upload once a client has gone `T0 - 1`
//! rounds without being heard.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::fedmath::{sq_dist, ModelVector};

/// Default censoring intensity `xi`.
pub const DEFAULT_INTENSITY: f64 = 0.8;
pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_MAX_STALENESS: usize = 50;

/// What a client remembers about its last upload.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientCache {
    /// Broadcast model at the last upload, `w~_i`.
    pub stale_model: ModelVector,
    /// `grad f_i(w~_i)`.
    pub stale_gradient: Vec<f64>,
    /// Rounds since the server last received this client's model.
    pub clock: usize,
}

impl ClientCache {
    pub fn new(stale_model: ModelVector, stale_gradient: Vec<f64>) -> Self {
        Self {
            stale_model,
            stale_gradient,
            clock: 0,
        }
    }
}

/// Squared norms of the last `K` global model steps, most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffHistory {
    window: VecDeque<f64>,
    capacity: usize,
}

impl DiffHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Records `||w_new - w_old||^2`, evicting the oldest entry beyond `K`.
    pub fn push(&mut self, w_new: &ModelVector, w_old: &ModelVector) -> Result<()> {
        if w_new.dim() != w_old.dim() {
            return Err(Error::DimensionMismatch {
                expected: w_old.dim(),
                actual: w_new.dim(),
            });
        }
        self.push_value(sq_dist(w_new, w_old));
        Ok(())
    }

    fn push_value(&mut self, value: f64) {
        if self.capacity == 0 {
            return;
        }
        if self.window.len() == self.capacity {
            self.window.pop_back();
        }
        self.window.push_front(value);
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Entry `k` (0-based, most recent first); missing entries read as 0.
    pub fn get(&self, k: usize) -> f64 {
        self.window.get(k).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }
}

/// Functional form of [`DiffHistory::push`].
pub fn push_history(
    mut hist: DiffHistory,
    w_new: &ModelVector,
    w_old: &ModelVector,
) -> Result<DiffHistory> {
    hist.push(w_new, w_old)?;
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CensorConfig {
    /// Weights `delta_1..delta_K`.
    pub delta: Vec<f64>,
    /// Staleness limit `T0`.
    pub max_staleness: usize,
    /// Client count `N`.
    pub clients: usize,
    pub eta: f64,
}

impl CensorConfig {
    pub fn new(delta: Vec<f64>, max_staleness: usize, clients: usize, eta: f64) -> Result<Self> {
        if delta.is_empty() {
            return Err(Error::invalid("censoring window K must be positive"));
        }
        if delta.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::invalid("censoring weights must be finite and >= 0"));
        }
        if max_staleness == 0 || clients == 0 {
            return Err(Error::invalid("T0 and N must be positive"));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {eta}"
            )));
        }
        Ok(Self {
            delta,
            max_staleness,
            clients,
            eta,
        })
    }

    /// `delta_k = xi / (K N^2)` for all `k`.
    pub fn with_intensity(
        intensity: f64,
        window: usize,
        max_staleness: usize,
        clients: usize,
        eta: f64,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("censoring window K must be positive"));
        }
        let weight = intensity / (window as f64 * (clients as f64).powi(2));
        Self::new(vec![weight; window], max_staleness, clients, eta)
    }

    pub fn window(&self) -> usize {
        self.delta.len()
    }
}

/// Both sides of the censoring test and the verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UploadDecision {
    pub upload: bool,
    /// The staleness clock forced the upload.
    pub forced: bool,
    pub lhs: f64,
    pub rhs: f64,
}

pub fn evaluate(
    grad_new: &[f64],
    cache: &ClientCache,
    hist: &DiffHistory,
    cfg: &CensorConfig,
) -> UploadDecision {
    let n = cfg.clients as f64;
    let lhs = n * n * cfg.eta * cfg.eta * sq_dist(grad_new, &cache.stale_gradient);
    let rhs: f64 = cfg
        .delta
        .iter()
        .enumerate()
        .map(|(k, d)| d * hist.get(k))
        .sum();
    let informative = lhs >= rhs;
    let forced = cache.clock + 1 >= cfg.max_staleness;
    UploadDecision {
        upload: informative || forced,
        forced: forced && !informative,
        lhs,
        rhs,
    }
}

/// Censoring test; equality uploads.
pub fn should_upload(
    grad_new: &[f64],
    cache: &ClientCache,
    hist: &DiffHistory,
    cfg: &CensorConfig,
) -> bool {
    evaluate(grad_new, cache, hist, cfg).upload
}

/// Resets on a received upload, otherwise counts up to `T0`.
pub fn advance_clock(
    mut cache: ClientCache,
    uploaded: bool,
    received: bool,
    max_staleness: usize,
) -> ClientCache {
    cache.clock = if uploaded && received {
        0
    } else {
        (cache.clock + 1).min(max_staleness)
    };
    cache
}

/// On upload the client's reference point moves to the broadcast model.
pub fn refresh_cache(
    mut cache: ClientCache,
    w_broadcast: &ModelVector,
    grad_at_broadcast: &[f64],
    uploaded: bool,
) -> ClientCache {
    if uploaded {
        cache.stale_model = w_broadcast.clone();
        cache.stale_gradient = grad_at_broadcast.to_vec();
    }
    cache
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(v: &[f64]) -> ModelVector {
        ModelVector::new(v.to_vec()).unwrap()
    }

    fn cache(grad: &[f64]) -> ClientCache {
        ClientCache::new(mv(&vec![0.0; grad.len()]), grad.to_vec())
    }

    fn cfg(delta: Vec<f64>, n: usize, eta: f64) -> CensorConfig {
        CensorConfig::new(delta, 50, n, eta).unwrap()
    }

    #[test]
    fn unchanged_gradient_with_movement_is_censored() {
        let mut hist = DiffHistory::new(2);
        hist.push(&mv(&[1.0, 0.0]), &mv(&[0.0, 0.0])).unwrap();
        let c = cache(&[0.5, 0.5]);
        assert!(!should_upload(
            &[0.5, 0.5],
            &c,
            &hist,
            &cfg(vec![0.1, 0.1], 3, 0.1)
        ));
    }

    #[test]
    fn unchanged_gradient_without_movement_uploads() {
        let hist = DiffHistory::new(2);
        let c = cache(&[0.5, 0.5]);
        assert!(should_upload(
            &[0.5, 0.5],
            &c,
            &hist,
            &cfg(vec![0.1, 0.1], 3, 0.1)
        ));
    }

    #[test]
    fn worked_example() {
        // N = 2, eta = 0.5: LHS = 4 * 0.25 * 1 = 1 >= 0.9 * 1.
        let mut hist = DiffHistory::new(1);
        hist.push(&mv(&[1.0]), &mv(&[0.0])).unwrap();
        let c = cache(&[0.0]);
        let d = evaluate(&[1.0], &c, &hist, &cfg(vec![0.9], 2, 0.5));
        assert_eq!((d.lhs, d.rhs), (1.0, 0.9));
        assert!(d.upload && !d.forced);
        // Just above the threshold the client stays silent.
        assert!(!should_upload(
            &[1.0],
            &c,
            &hist,
            &cfg(vec![1.0 + 1e-12], 2, 0.5)
        ));
    }

    #[test]
    fn clock_forces_upload_at_t0_minus_one() {
        let mut hist = DiffHistory::new(1);
        hist.push(&mv(&[5.0]), &mv(&[0.0])).unwrap();
        let config = CensorConfig::new(vec![1.0], 4, 2, 0.5).unwrap();
        let mut c = cache(&[0.0]);
        c.clock = 2;
        assert!(!should_upload(&[0.0], &c, &hist, &config));
        c.clock = 3;
        let d = evaluate(&[0.0], &c, &hist, &config);
        assert!(d.upload && d.forced);
    }

    #[test]
    fn clock_transitions() {
        let c = cache(&[0.0]);
        let c = advance_clock(c, false, false, 3);
        assert_eq!(c.clock, 1);
        let c = advance_clock(c, true, false, 3);
        assert_eq!(c.clock, 2);
        let c = advance_clock(c, false, false, 3);
        let c = advance_clock(c, false, false, 3);
        assert_eq!(c.clock, 3);
        assert_eq!(advance_clock(c, true, true, 3).clock, 0);
    }

    #[test]
    fn history_window() {
        let zero = mv(&[0.0, 0.0]);
        let mut hist = DiffHistory::new(2);
        hist.push(&zero, &zero).unwrap();
        assert_eq!(hist.get(0), 0.0);
        hist.push(&mv(&[3.0, 4.0]), &zero).unwrap();
        hist.push(&mv(&[1.0, 1.0]), &zero).unwrap();
        assert_eq!(hist.iter().collect::<Vec<_>>(), vec![2.0, 25.0]);
        assert_eq!(hist.get(5), 0.0);
        assert!(hist.push(&mv(&[1.0]), &zero).is_err());
    }

    #[test]
    fn pushed_value_is_squared_distance() {
        let a = mv(&[0.1, -2.5, 3.3]);
        let b = mv(&[1.7, 0.25, -0.4]);
        let hist = push_history(DiffHistory::new(3), &a, &b).unwrap();
        let direct = (0.1f64 - 1.7).powi(2) + (-2.5f64 - 0.25).powi(2) + (3.3f64 + 0.4).powi(2);
        assert!((hist.get(0) - direct).abs() <= 1e-12);
    }

    #[test]
    fn refresh_semantics() {
        let c = cache(&[1.0, 2.0]);
        let w = mv(&[0.3, 0.4]);
        assert_eq!(refresh_cache(c.clone(), &w, &[9.0, 9.0], false), c);
        let fresh = refresh_cache(c, &w, &[9.0, 9.0], true);
        assert_eq!(fresh.stale_model, w);
        let hist = DiffHistory::new(1);
        let d = evaluate(&[9.0, 9.0], &fresh, &hist, &cfg(vec![1.0], 2, 0.5));
        assert_eq!(d.lhs, 0.0);
    }

    #[test]
    fn upload_skip_skip_leaves_two_round_old_reference() {
        // Hand trace: broadcasts w1, w2, w3; upload at round 1 only.
        let w = [mv(&[1.0]), mv(&[2.0]), mv(&[3.0])];
        let mut c = cache(&[0.0]);
        for (t, uploaded) in [true, false, false].into_iter().enumerate() {
            c = refresh_cache(c, &w[t], &[10.0 * (t + 1) as f64], uploaded);
        }
        assert_eq!(c.stale_model, w[0]);
        assert_eq!(c.stale_gradient, vec![10.0]);
    }

    #[test]
    fn intensity_weights() {
        let c = CensorConfig::with_intensity(0.8, 10, 50, 10, 0.1).unwrap();
        assert_eq!(c.window(), 10);
        assert!(c.delta.iter().all(|d| (*d - 0.8 / 1000.0).abs() < 1e-18));
        assert!(CensorConfig::with_intensity(0.8, 0, 50, 10, 0.1).is_err());
        assert!(CensorConfig::new(vec![-1.0], 5, 2, 0.1).is_err());
    }
}
