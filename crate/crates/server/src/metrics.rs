//! Wall-clock cadence measurements taken by the session loop.

/// Timestamps in seconds since the session loop started.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionMetrics {
    pub tick_times: Vec<f64>,
    /// One entry per broadcast `state_update`.
    pub state_times: Vec<f64>,
    /// One entry per recorded transition, stamped with its tick's wall time.
    pub record_times: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cadence {
    pub samples: usize,
    pub mean_hz: f64,
    /// RMS deviation of the intervals from the nominal period, as a fraction of it.
    pub jitter: f64,
    /// Largest single interval, seconds.
    pub max_interval: f64,
}

impl Cadence {
    /// Measures `times` against `nominal_hz`; `None` with fewer than two samples.
    pub fn measure(times: &[f64], nominal_hz: f64) -> Option<Self> {
        if times.len() < 2 {
            return None;
        }
        let period = 1.0 / nominal_hz;
        let intervals: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let n = intervals.len() as f64;
        let span = times[times.len() - 1] - times[0];
        let ms = intervals.iter().map(|i| (i - period).powi(2)).sum::<f64>() / n;
        Some(Self {
            samples: times.len(),
            mean_hz: n / span,
            jitter: ms.sqrt() / period,
            max_interval: intervals.iter().copied().fold(0.0, f64::max),
        })
    }

    /// Mean rate within `tol` of nominal and jitter below `tol`.
    pub fn within(&self, nominal_hz: f64, tol: f64) -> bool {
        ((self.mean_hz - nominal_hz) / nominal_hz).abs() < tol && self.jitter < tol
    }
}

/// Times at which a recording cadence fired: one per distinct stamp.
pub fn distinct(times: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(times.len());
    for &t in times {
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_cadence_has_no_jitter() {
        let times: Vec<f64> = (0..100).map(|i| i as f64 / 20.0).collect();
        let c = Cadence::measure(&times, 20.0).unwrap();
        assert!((c.mean_hz - 20.0).abs() < 1e-9);
        assert!(c.jitter < 1e-9);
        assert!(c.within(20.0, 0.05));
    }

    #[test]
    fn alternating_intervals_measure_as_jitter() {
        // 40 ms, 60 ms, ... : RMS deviation 10 ms of a 50 ms period.
        let mut t = 0.0;
        let mut times = vec![t];
        for i in 0..100 {
            t += if i % 2 == 0 { 0.04 } else { 0.06 };
            times.push(t);
        }
        let c = Cadence::measure(&times, 20.0).unwrap();
        assert!((c.jitter - 0.2).abs() < 1e-9);
        assert!(!c.within(20.0, 0.05));
    }
}
