//! Per-stream MANE buffer, the two-slot delay pipeline and the
//! buffering-delay estimator.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// kbit/s times seconds to bits.
pub const BITS_PER_KBIT: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    /// Duration of one video unit (and of one control slot), seconds.
    pub slot_duration: f64,
    /// Buffer capacity, bits.
    pub buffer_capacity: f64,
    /// Buffer reference level, bits.
    pub buffer_reference: f64,
    /// Buffering-delay reference, seconds.
    pub delay_reference: f64,
    /// Smoothing factor of the rate estimate.
    pub alpha: f64,
    /// Video units preloaded in every buffer at start.
    pub initial_buffer_vus: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            slot_duration: 1.0 / 3.0,
            buffer_capacity: 4e6,
            buffer_reference: 4e5,
            delay_reference: 1.5,
            alpha: 0.2,
            initial_buffer_vus: 3,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.slot_duration) {
            return Err(Error::Config(format!("slot_duration must be positive, got {}", self.slot_duration)));
        }
        if !pos(self.delay_reference) {
            return Err(Error::Config(format!("delay_reference must be positive, got {}", self.delay_reference)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.buffer_reference >= 0.0 && self.buffer_reference < self.buffer_capacity && self.buffer_capacity.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= buffer_reference < buffer_capacity, got {} and {}",
                self.buffer_reference, self.buffer_capacity
            )));
        }
        Ok(())
    }
}

/// Two-slot shift register: `recent` is the value from one slot ago,
/// `oldest` the value from two slots ago.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayLine {
    pub recent: f64,
    pub oldest: f64,
}

impl DelayLine {
    pub fn filled(v: f64) -> Self {
        DelayLine { recent: v, oldest: v }
    }

    /// Shifts in `v` and returns the value that falls off the end.
    pub fn push(&mut self, v: f64) -> f64 {
        let out = self.oldest;
        self.oldest = self.recent;
        self.recent = v;
        out
    }

    /// The two-slot delayed value.
    pub fn dd(&self) -> f64 {
        self.oldest
    }
}

/// One video unit waiting in a MANE buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VuRecord {
    pub size_bits: f64,
    pub remaining_bits: f64,
    pub enc_rate: f64,
    pub utility: f64,
}

/// Outcome of one buffer update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BufferStep {
    pub drained_bits: f64,
    pub dropped_bits: f64,
    pub underflow: bool,
    pub overflow: bool,
}

/// Dynamic state of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub buffer_bits: f64,
    /// Commanded encoding rates, kbit/s.
    pub enc_rates: DelayLine,
    /// Utilities of encoded units.
    pub utilities: DelayLine,
    /// Cumulated utility discrepancy.
    pub phi: f64,
    /// Cumulated buffer (kbit) or delay (s) discrepancy.
    pub pi_acc: f64,
    /// Smoothed arriving rate, kbit/s.
    pub rate_estimate: f64,
    pub vu_queue: VecDeque<VuRecord>,
}

impl StreamState {
    /// A stream whose pipeline has been running at `rate` with `utility`,
    /// holding `vus` preloaded units.
    pub fn bootstrap(rate: f64, utility: f64, vus: usize, slot_duration: f64) -> Self {
        let mut s = StreamState {
            buffer_bits: 0.0,
            enc_rates: DelayLine::filled(rate),
            utilities: DelayLine::filled(utility),
            phi: 0.0,
            pi_acc: 0.0,
            rate_estimate: rate,
            vu_queue: VecDeque::new(),
        };
        for _ in 0..vus {
            s.deposit(rate, utility, slot_duration);
        }
        s
    }

    fn deposit(&mut self, rate: f64, utility: f64, slot_duration: f64) {
        let size = rate * slot_duration * BITS_PER_KBIT;
        if size > 0.0 {
            self.vu_queue.push_back(VuRecord { size_bits: size, remaining_bits: size, enc_rate: rate, utility });
            self.buffer_bits += size;
        }
    }

    /// Deposits one unit encoded at `arriving_rate` and drains at `drain_rate`
    /// for one slot, saturating at empty and at `capacity` bits.
    pub fn buffer_step(
        &mut self,
        arriving_rate: f64,
        arriving_utility: f64,
        drain_rate: f64,
        slot_duration: f64,
        capacity: f64,
    ) -> BufferStep {
        let mut out = BufferStep::default();
        self.deposit(arriving_rate.max(0.0), arriving_utility, slot_duration);

        let request = drain_rate.max(0.0) * slot_duration * BITS_PER_KBIT;
        if request > self.buffer_bits {
            out.underflow = true;
        }
        let mut left = request.min(self.buffer_bits);
        out.drained_bits = left;
        while left > 0.0 {
            let Some(head) = self.vu_queue.front_mut() else { break };
            if head.remaining_bits <= left {
                left -= head.remaining_bits;
                self.vu_queue.pop_front();
            } else {
                head.remaining_bits -= left;
                left = 0.0;
            }
        }
        self.buffer_bits -= out.drained_bits;
        if self.vu_queue.is_empty() || self.buffer_bits < 0.0 {
            self.buffer_bits = self.buffer_bits.max(0.0);
        }

        if self.buffer_bits > capacity {
            out.overflow = true;
            let mut excess = self.buffer_bits - capacity;
            out.dropped_bits = excess;
            while excess > 0.0 {
                let Some(tail) = self.vu_queue.back_mut() else { break };
                if tail.remaining_bits <= excess {
                    excess -= tail.remaining_bits;
                    self.vu_queue.pop_back();
                } else {
                    tail.remaining_bits -= excess;
                    excess = 0.0;
                }
            }
            self.buffer_bits = capacity;
        }
        out
    }

    /// Sum of the bits still queued, for reconciliation with `buffer_bits`.
    pub fn queued_bits(&self) -> f64 {
        self.vu_queue.iter().map(|v| v.remaining_bits).sum()
    }

    /// Buffering-delay estimate `B / R~`, seconds.
    pub fn estimate_delay(&self) -> Result<f64> {
        if !(self.rate_estimate > 0.0) {
            return Err(Error::Domain(format!("rate estimate {} is not positive", self.rate_estimate)));
        }
        Ok(self.buffer_bits / (self.rate_estimate * BITS_PER_KBIT))
    }

    /// Buffering delay from the queued units: whole units plus the
    /// remaining fraction of partial ones, times the slot duration.
    pub fn exact_delay(&self, slot_duration: f64) -> f64 {
        let h: f64 = self.vu_queue.iter().map(|v| v.remaining_bits / v.size_bits).sum();
        h * slot_duration
    }
}

/// Next value of the smoothed rate estimate.
///
/// `age` is the 1-based slot count of the stream. While the estimate for
/// the next slot still falls in the bootstrap window it tracks the current
/// encoding target.
pub fn next_rate_estimate(current: f64, arriving_rate: f64, current_target: f64, alpha: f64, age: usize) -> f64 {
    if age + 1 <= 2 {
        current_target
    } else {
        alpha * arriving_rate + (1.0 - alpha) * current
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const T: f64 = 1.0 / 3.0;

    fn with_buffer(bits: f64) -> StreamState {
        let mut s = StreamState::bootstrap(500.0, 1.0, 0, T);
        if bits > 0.0 {
            s.vu_queue.push_back(VuRecord { size_bits: bits, remaining_bits: bits, enc_rate: 500.0, utility: 1.0 });
            s.buffer_bits = bits;
        }
        s
    }

    #[test]
    fn balance_keeps_level() {
        let mut s = with_buffer(400e3);
        let r = s.buffer_step(667.0, 1.0, 667.0, 0.333, 4e6);
        assert_relative_eq!(s.buffer_bits, 400e3, max_relative = 1e-12);
        assert!(!r.underflow && !r.overflow);
    }

    #[test]
    fn empty_buffer_underflows() {
        let mut s = with_buffer(0.0);
        let r = s.buffer_step(0.0, 1.0, 667.0, 0.333, 4e6);
        assert_eq!(s.buffer_bits, 0.0);
        assert!(r.underflow);
        assert_eq!(r.drained_bits, 0.0);
    }

    #[test]
    fn capacity_overflows() {
        let mut s = with_buffer(100e3);
        let r = s.buffer_step(1000.0, 1.0, 0.0, 0.333, 200e3);
        assert_eq!(s.buffer_bits, 200e3);
        assert!(r.overflow);
        assert_relative_eq!(r.dropped_bits, 233e3, max_relative = 1e-12);
        assert_relative_eq!(s.queued_bits(), 200e3, max_relative = 1e-12);
    }

    #[test]
    fn delay_line_shifts() {
        let mut d = DelayLine { recent: 1.0, oldest: 2.0 };
        assert_eq!(d.push(3.0), 2.0);
        assert_eq!((d.recent, d.dd()), (3.0, 1.0));
        let mut d = DelayLine::filled(0.0);
        let mut seen = vec![];
        for j in 0..6 {
            seen.push(d.dd());
            d.push(if j == 2 { 1.0 } else { 0.0 });
        }
        assert_eq!(seen, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let mut c = DelayLine::filled(9.0);
        c.push(4.0);
        c.push(4.0);
        assert_eq!(c.dd(), 4.0);
    }

    #[test]
    fn estimate_examples() {
        let mut s = with_buffer(600e3);
        s.rate_estimate = 400.0;
        assert_relative_eq!(s.estimate_delay().unwrap(), 1.5, max_relative = 1e-15);
        let e = with_buffer(0.0);
        assert_eq!(e.estimate_delay().unwrap(), 0.0);
        s.rate_estimate = 0.0;
        assert!(s.estimate_delay().is_err());
    }

    #[test]
    fn rate_estimate_recursion() {
        // Constant input is a fixed point.
        let mut r = 700.0;
        for age in 1..20 {
            r = next_rate_estimate(r, 700.0, 700.0, 0.3, age);
            assert_eq!(r, 700.0);
        }
        // alpha = 1 tracks the arriving rate.
        assert_eq!(next_rate_estimate(100.0, 555.0, 1.0, 1.0, 5), 555.0);
        // Bootstrap then smoothing: targets 600, 600, 900, ...
        let targets = [600.0, 600.0, 900.0, 900.0];
        let mut est = 600.0;
        let mut hist = vec![est];
        for (k, &t) in targets.iter().enumerate() {
            let age = k + 1;
            let arriving = if k >= 2 { targets[k - 2] } else { 600.0 };
            est = next_rate_estimate(est, arriving, t, 0.2, age);
            hist.push(est);
        }
        assert_eq!(hist[2], 0.2 * 600.0 + 0.8 * 600.0);
        assert_relative_eq!(hist[4], 0.2 * 600.0 + 0.8 * hist[3], max_relative = 1e-15);
    }

    #[test]
    fn exact_delay_examples() {
        let s = StreamState::bootstrap(500.0, 1.0, 3, T);
        assert_relative_eq!(s.exact_delay(T), 1.0, max_relative = 1e-12);
        assert_eq!(with_buffer(0.0).exact_delay(T), 0.0);
        let mut h = StreamState::bootstrap(600.0, 1.0, 3, T);
        // Drain half a unit.
        h.buffer_step(0.0, 1.0, 300.0, T, 4e6);
        assert_relative_eq!(h.exact_delay(T), 2.5 * T, max_relative = 1e-12);
    }

    #[test]
    fn scripted_estimate_oracle() {
        // Steps with known arrivals: estimate follows the hand recursion and B/R~.
        let mut s = StreamState::bootstrap(600.0, 1.0, 3, T);
        let arrivals = [600.0, 600.0, 900.0, 300.0, 750.0];
        let mut manual = 600.0;
        for (k, &a) in arrivals.iter().enumerate() {
            s.buffer_step(a, 1.0, 600.0, T, 4e6);
            s.rate_estimate = next_rate_estimate(s.rate_estimate, a, 600.0, 0.25, k + 3);
            manual = 0.25 * a + 0.75 * manual;
            assert_relative_eq!(s.rate_estimate, manual, max_relative = 1e-14);
            assert_relative_eq!(s.estimate_delay().unwrap(), s.buffer_bits / (manual * 1000.0), max_relative = 1e-14);
        }
    }

    #[test]
    fn constant_rate_estimate_matches_exact_delay() {
        let mut s = StreamState::bootstrap(400.0, 1.0, 3, T);
        s.rate_estimate = 900.0;
        for age in 1..200 {
            s.buffer_step(400.0, 1.0, 400.0, T, 4e6);
            s.rate_estimate = next_rate_estimate(s.rate_estimate, 400.0, 400.0, 0.2, age + 3);
        }
        let est = s.estimate_delay().unwrap();
        assert_relative_eq!(est, s.buffer_bits / 400e3, max_relative = 1e-6);
        assert!((est - s.exact_delay(T)).abs() <= T);
    }

    proptest! {
        #[test]
        fn bits_are_conserved_and_reconciled(
            steps in proptest::collection::vec((0.0f64..2000.0, 0.0f64..2000.0), 1..60)
        ) {
            let mut s = StreamState::bootstrap(600.0, 1.0, 3, T);
            let start = s.buffer_bits;
            let (mut inflow, mut outflow, mut clamped) = (0.0, 0.0, false);
            for (a, d) in steps {
                let r = s.buffer_step(a, 1.0, d, T, 4e6);
                inflow += a * T * 1000.0;
                outflow += r.drained_bits;
                clamped |= r.underflow || r.overflow;
                prop_assert!(s.buffer_bits >= 0.0 && s.buffer_bits <= 4e6);
                prop_assert!((s.queued_bits() - s.buffer_bits).abs() <= 1.0);
            }
            if !clamped {
                prop_assert!((s.buffer_bits - (start + inflow - outflow)).abs() <= 1e-6 * (start + inflow));
            }
        }
    }
}
