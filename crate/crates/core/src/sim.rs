//! Closed-loop simulation of `N` streams sharing one channel.
//!
//! Slot `j` runs, in order: parameter evolution, encoding of the unit
//! commanded one slot earlier, arrival at the MANE of the unit commanded two
//! slots earlier, the controllers, the accumulator updates, the buffer update
//! and the rate-estimate update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{
    encoding_discrepancy, qf_encoding_rate, qf_transmission_rates, trf_rates, ummf_encoding_rates, ummf_transmission_rates,
    update_pi_acc, utility_discrepancies, ControlMode, ControllerGains, Policy, RateLimits,
};
use crate::equilibrium::EquilibriumPoint;
use crate::error::{Error, Result};
use crate::linearization::StateLayout;
use crate::plant::{next_rate_estimate, PlantConfig, StreamState, VuRecord, BITS_PER_KBIT};
use crate::source::{step_params, ParamNoiseSpec, SourceParams};

/// One stream of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub id: usize,
    pub params: SourceParams,
    pub noise: ParamNoiseSpec,
    /// First slot in which the stream is active (slots start at 1).
    pub join_slot: usize,
    /// First slot in which the stream is gone.
    pub leave_slot: Option<usize>,
}

impl StreamSpec {
    pub fn new(id: usize, params: SourceParams, noise: ParamNoiseSpec) -> Self {
        StreamSpec { id, params, noise, join_slot: 1, leave_slot: None }
    }

    fn active_at(&self, slot: usize) -> bool {
        slot >= self.join_slot && self.leave_slot.is_none_or(|l| slot < l)
    }
}

/// Channel rate change taking effect at the start of `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStep {
    pub slot: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub horizon: usize,
    pub policy: Policy,
    pub gains: ControllerGains,
    pub plant: PlantConfig,
    pub limits: RateLimits,
    pub channel_rate: f64,
    pub channel_changes: Vec<ChannelStep>,
    pub streams: Vec<StreamSpec>,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 4 {
            return Err(Error::Config(format!("horizon must be at least 4 slots, got {}", self.horizon)));
        }
        if !(self.channel_rate.is_finite() && self.channel_rate > 0.0) {
            return Err(Error::Config(format!("channel rate must be positive, got {}", self.channel_rate)));
        }
        if let Some(c) = self.channel_changes.iter().find(|c| !(c.rate.is_finite() && c.rate > 0.0) || c.slot == 0) {
            return Err(Error::Config(format!("invalid channel change at slot {} to {}", c.slot, c.rate)));
        }
        self.gains.validate()?;
        self.plant.validate()?;
        self.limits.validate()?;
        if self.streams.is_empty() {
            return Err(Error::Config("scenario has no streams".into()));
        }
        // An id may appear several times (a program that leaves and comes back)
        // as long as its active intervals do not overlap.
        for (k, a) in self.streams.iter().enumerate() {
            for b in &self.streams[k + 1..] {
                let a_end = a.leave_slot.unwrap_or(usize::MAX);
                let b_end = b.leave_slot.unwrap_or(usize::MAX);
                if a.id == b.id && a.join_slot < b_end && b.join_slot < a_end {
                    return Err(Error::Config(format!("stream {} has overlapping active intervals", a.id)));
                }
            }
        }
        for s in &self.streams {
            s.params.validate().map_err(|e| Error::Config(format!("stream {}: {e}", s.id)))?;
            s.noise.validate().map_err(|e| Error::Config(format!("stream {}: {e}", s.id)))?;
            if s.join_slot == 0 || s.leave_slot.is_some_and(|l| l <= s.join_slot) {
                return Err(Error::Config(format!("stream {}: invalid join/leave slots", s.id)));
            }
        }
        if !self.streams.iter().any(|s| s.join_slot == 1) {
            return Err(Error::Config("at least one stream must be active in slot 1".into()));
        }
        Ok(())
    }

    /// Channel rate in force during `slot`.
    pub fn channel_rate_at(&self, slot: usize) -> f64 {
        let mut rate = self.channel_rate;
        let mut best = 0;
        for c in &self.channel_changes {
            if c.slot <= slot && c.slot >= best {
                best = c.slot;
                rate = c.rate;
            }
        }
        rate
    }
}

/// Deliberate disturbances, for causality checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    /// Added to the encoding target commanded in `slot`.
    EncodingRate { stream: usize, slot: usize, delta: f64 },
    /// Added to the utility of the unit commanded in `slot`.
    Utility { stream: usize, slot: usize, delta: f64 },
}

/// Per-slot, per-stream log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub stream_id: usize,
    /// Encoding rate commanded this slot, kbit/s.
    pub enc_target: f64,
    /// Encoding rate of the unit encoded this slot, kbit/s.
    pub enc_applied: f64,
    pub trans_rate: f64,
    /// Buffer at the end of the slot, bits.
    pub buffer_bits: f64,
    pub tau_exact: f64,
    pub tau_est: f64,
    /// Utility of the unit encoded this slot.
    pub utility: f64,
    pub phi: f64,
    pub pi_acc: f64,
    pub underflow: bool,
    pub overflow: bool,
}

/// Channel-level view of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotSummary {
    pub slot: usize,
    pub channel_rate: f64,
    pub n_active: usize,
    pub total_trans_rate: f64,
}

#[derive(Debug, Clone)]
pub struct Stream {
    pub id: usize,
    pub params: SourceParams,
    pub params_delayed: SourceParams,
    pub noise: ParamNoiseSpec,
    pub state: StreamState,
    /// Slots this stream has been stepped, including the current one.
    pub age: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(spec: &StreamSpec, seed: u64, rate: f64, preload: usize, slot_duration: f64) -> Result<Self> {
        let u = spec.params.utility(rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(spec.id as u64);
        Ok(Stream {
            id: spec.id,
            params: spec.params,
            params_delayed: spec.params,
            noise: spec.noise,
            state: StreamState::bootstrap(rate, u, preload, slot_duration),
            age: 0,
            rng,
        })
    }
}

pub struct World {
    pub scenario: Scenario,
    /// Next slot to run.
    pub slot: usize,
    pub streams: Vec<Stream>,
    pub channel_rate: f64,
    perturbations: Vec<Perturbation>,
}

impl World {
    /// Bootstraps every stream active in slot 1 at the equal share of the channel.
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let rc = scenario.channel_rate_at(1);
        let n = scenario.streams.iter().filter(|s| s.active_at(1)).count();
        let r0 = rc / n as f64;
        let streams = scenario
            .streams
            .iter()
            .filter(|s| s.active_at(1))
            .map(|s| Stream::new(s, scenario.seed, r0, scenario.plant.initial_buffer_vus, scenario.plant.slot_duration))
            .collect::<Result<Vec<_>>>()?;
        Ok(World { slot: 1, channel_rate: rc, streams, scenario, perturbations: Vec::new() })
    }

    /// Places every stream at the given equilibrium, past the start-up window.
    pub fn at_equilibrium(scenario: Scenario, eq: &EquilibriumPoint) -> Result<Self> {
        let mut w = World::new(scenario)?;
        if eq.n_streams() != w.streams.len() {
            return Err(Error::Config(format!("equilibrium has {} streams, scenario {}", eq.n_streams(), w.streams.len())));
        }
        let t = w.scenario.plant.slot_duration;
        for (i, s) in w.streams.iter_mut().enumerate() {
            let r = eq.r_eq[i];
            s.state = StreamState::bootstrap(r, eq.u_eq, 0, t);
            s.state.phi = eq.phi_eq[i];
            s.state.pi_acc = eq.pi_eq[i];
            fill_queue(&mut s.state, eq.b_eq[i], r, eq.u_eq, t);
            s.age = 3;
        }
        Ok(w)
    }

    pub fn inject(&mut self, p: Perturbation) {
        self.perturbations.push(p);
    }

    fn apply_events(&mut self, slot: usize) -> Result<()> {
        self.channel_rate = self.scenario.channel_rate_at(slot);
        let before = self.streams.len();
        self.streams.retain(|s| self.scenario.streams.iter().any(|x| x.id == s.id && x.active_at(slot)));
        let left = self.streams.len() != before;
        let joining: Vec<StreamSpec> = self.scenario.streams.iter().filter(|s| s.join_slot == slot && slot > 1).cloned().collect();
        if !joining.is_empty() {
            let n = self.streams.len() + joining.len();
            let r0 = self.channel_rate / n as f64;
            for spec in &joining {
                let s = Stream::new(spec, self.scenario.seed, r0, 0, self.scenario.plant.slot_duration)?;
                self.streams.push(s);
            }
            self.streams.sort_by_key(|s| s.id);
        }
        if left && !self.streams.is_empty() {
            let mean = self.streams.iter().map(|s| s.state.phi).sum::<f64>() / self.streams.len() as f64;
            self.streams.iter_mut().for_each(|s| s.state.phi -= mean);
        }
        Ok(())
    }

    /// Runs one slot and returns one record per active stream.
    pub fn step(&mut self) -> Result<Vec<SlotRecord>> {
        let j = self.slot;
        self.step_inner(j).map_err(|e| Error::AtSlot { slot: j, source: Box::new(e) })
    }

    fn step_inner(&mut self, j: usize) -> Result<Vec<SlotRecord>> {
        self.apply_events(j)?;
        let n = self.streams.len();
        self.slot += 1;
        if n == 0 {
            return Ok(Vec::new());
        }
        let sc = &self.scenario;
        let plant = sc.plant;
        let gains = sc.gains;
        let t = plant.slot_duration;
        let rc = self.channel_rate;
        let r0 = rc / n as f64;
        let perturb = std::mem::take(&mut self.perturbations);
        let (mut keep, mut now): (Vec<_>, Vec<_>) = (Vec::new(), Vec::new());
        for p in perturb {
            let due = match p {
                Perturbation::EncodingRate { slot, .. } => slot == j,
                Perturbation::Utility { slot, .. } => slot + 1 == j,
            };
            if due {
                now.push(p)
            } else {
                keep.push(p)
            }
        }
        self.perturbations = keep;

        // Sources: evolve, then encode the unit commanded last slot.
        let mut vu_params = Vec::with_capacity(n);
        let mut applied = Vec::with_capacity(n);
        let mut utility = Vec::with_capacity(n);
        for s in self.streams.iter_mut() {
            s.age += 1;
            let vp = s.params_delayed;
            s.params_delayed = s.params;
            if !s.noise.is_frozen() {
                s.params = step_params(&s.params, &s.noise, &mut s.rng);
            }
            let rate = s.state.enc_rates.recent;
            let mut u = vp.utility(rate)?;
            for p in &now {
                if let Perturbation::Utility { stream, delta, .. } = *p {
                    if stream == s.id {
                        u += delta;
                    }
                }
            }
            s.state.utilities.push(u);
            vu_params.push(vp);
            applied.push(rate);
            utility.push(u);
        }

        // Controllers.
        let udd: Vec<f64> = self.streams.iter().map(|s| s.state.utilities.dd()).collect();
        let phi: Vec<f64> = self.streams.iter().map(|s| s.state.phi).collect();
        let buffers: Vec<f64> = self.streams.iter().map(|s| s.state.buffer_bits).collect();
        let trans = match sc.policy {
            Policy::Qf => qf_transmission_rates(&udd, &phi, rc, &gains, &sc.limits)?,
            Policy::Trf => trf_rates(n, rc),
            Policy::Ummf => ummf_transmission_rates(&buffers, plant.buffer_reference, gains.kp_t, r0, sc.limits.floor),
        };
        let ummf = match sc.policy {
            Policy::Ummf => Some(ummf_encoding_rates(&vu_params, rc)?),
            _ => None,
        };
        // Streams still in their start-up hold neither feed nor take part in the
        // fairness integration, which keeps the accumulators summing to zero.
        let live: Vec<usize> = (0..n).filter(|&i| self.streams[i].age > 2).collect();
        let live_u: Vec<f64> = live.iter().map(|&i| udd[i]).collect();
        let mut delta_u = vec![0.0; n];
        for (&i, d) in live.iter().zip(utility_discrepancies(&live_u)) {
            delta_u[i] = d;
        }

        let mut out = Vec::with_capacity(n);
        for (i, s) in self.streams.iter_mut().enumerate() {
            let st = &mut s.state;
            let tau_est = st.estimate_delay()?;
            let err = encoding_discrepancy(gains.mode, st.buffer_bits, plant.buffer_reference, tau_est, plant.delay_reference);
            let mut target = match &ummf {
                Some(r) => r[i],
                None => qf_encoding_rate(err, st.pi_acc, r0, &gains, t),
            };
            for p in &now {
                if let Perturbation::EncodingRate { stream, delta, .. } = *p {
                    if stream == s.id {
                        target += delta;
                    }
                }
            }
            let target = sc.limits.clamp(target, rc);

            st.phi = if s.age <= 2 { 0.0 } else { st.phi + delta_u[i] };
            st.pi_acc = update_pi_acc(st.pi_acc, err, s.age);

            let arriving = st.enc_rates.dd();
            let arriving_u = st.utilities.dd();
            let flow = st.buffer_step(arriving, arriving_u, trans[i], t, plant.buffer_capacity);
            st.rate_estimate = next_rate_estimate(st.rate_estimate, arriving, target, plant.alpha, s.age);
            st.enc_rates.push(target);

            out.push(SlotRecord {
                slot: j,
                stream_id: s.id,
                enc_target: target,
                enc_applied: applied[i],
                trans_rate: trans[i],
                buffer_bits: st.buffer_bits,
                tau_exact: st.exact_delay(t),
                tau_est: st.estimate_delay()?,
                utility: utility[i],
                phi: st.phi,
                pi_acc: st.pi_acc,
                underflow: flow.underflow,
                overflow: flow.overflow,
            });
        }
        Ok(out)
    }

    /// State vector in the order used by the linear model.
    pub fn state_vector(&self) -> Vec<f64> {
        let lay = StateLayout::new(self.streams.len(), self.scenario.gains.mode);
        let mut x = vec![0.0; lay.dim()];
        for (i, s) in self.streams.iter().enumerate() {
            x[lay.a() + 2 * i] = s.params.a1;
            x[lay.a() + 2 * i + 1] = s.params.a2;
            x[lay.ad() + 2 * i] = s.params_delayed.a1;
            x[lay.ad() + 2 * i + 1] = s.params_delayed.a2;
            x[lay.phi() + i] = s.state.phi;
            x[lay.pi() + i] = s.state.pi_acc;
            if let Some(rt) = lay.rate_estimate() {
                x[rt + i] = s.state.rate_estimate;
            }
            x[lay.red() + i] = s.state.enc_rates.recent;
            x[lay.redd() + i] = s.state.enc_rates.oldest;
            x[lay.udd() + i] = s.state.utilities.recent;
            x[lay.b() + i] = s.state.buffer_bits;
        }
        x
    }

    /// Overwrites the dynamic state from a vector laid out as in [`World::state_vector`].
    pub fn set_state_vector(&mut self, x: &[f64]) -> Result<()> {
        let lay = StateLayout::new(self.streams.len(), self.scenario.gains.mode);
        if x.len() != lay.dim() {
            return Err(Error::Assembly(format!("state vector of length {} for dimension {}", x.len(), lay.dim())));
        }
        let t = self.scenario.plant.slot_duration;
        for (i, s) in self.streams.iter_mut().enumerate() {
            s.params = SourceParams::new(s.params.model, x[lay.a() + 2 * i], x[lay.a() + 2 * i + 1])?;
            s.params_delayed = SourceParams::new(s.params.model, x[lay.ad() + 2 * i], x[lay.ad() + 2 * i + 1])?;
            let st = &mut s.state;
            st.phi = x[lay.phi() + i];
            st.pi_acc = x[lay.pi() + i];
            if let Some(rt) = lay.rate_estimate() {
                st.rate_estimate = x[rt + i];
            }
            st.enc_rates.recent = x[lay.red() + i];
            st.enc_rates.oldest = x[lay.redd() + i];
            st.utilities.recent = x[lay.udd() + i];
            let r = st.enc_rates.recent;
            fill_queue(st, x[lay.b() + i], r, st.utilities.recent, t);
        }
        Ok(())
    }
}

// Rebuilds the queue with `bits` worth of units of rate `rate`; the head unit is partial.
fn fill_queue(st: &mut StreamState, bits: f64, rate: f64, utility: f64, slot_duration: f64) {
    st.vu_queue.clear();
    st.buffer_bits = bits.max(0.0);
    let size = rate * slot_duration * BITS_PER_KBIT;
    if size <= 0.0 || bits <= 0.0 {
        return;
    }
    let whole = (bits / size).floor();
    let rest = bits - whole * size;
    if rest > 0.0 {
        st.vu_queue.push_back(VuRecord { size_bits: size, remaining_bits: rest, enc_rate: rate, utility });
    }
    for _ in 0..whole as usize {
        st.vu_queue.push_back(VuRecord { size_bits: size, remaining_bits: size, enc_rate: rate, utility });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Mean buffer excess over the reference, kbit.
    pub delta_b: f64,
    pub sigma2_b: f64,
    /// Mean absolute deviation of utility from the per-slot average.
    pub delta_p: f64,
    /// Mean squared deviation of utility from the per-slot average.
    pub sigma2_p: f64,
    /// Mean buffering-delay excess over the reference, seconds.
    pub delta_tau: f64,
    pub sigma2_tau: f64,
    pub underflows: usize,
    pub overflows: usize,
    pub samples: usize,
}

/// Aggregate quality and buffer metrics over a run.
///
/// Means and variances are taken over all (slot, stream) samples. Utility
/// deviations are measured against the average over the streams active in
/// the same slot.
pub fn compute_metrics(records: &[SlotRecord], buffer_reference: f64, delay_reference: f64) -> MetricsSummary {
    let m = records.len();
    if m == 0 {
        return MetricsSummary::default();
    }
    let nm = m as f64;
    let mut slot_sum: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in records {
        let e = slot_sum.entry(r.slot).or_insert((0.0, 0));
        e.0 += r.utility;
        e.1 += 1;
    }
    let pbar = |slot: usize| {
        let (s, c) = slot_sum[&slot];
        s / c as f64
    };
    let db: Vec<f64> = records.iter().map(|r| (r.buffer_bits - buffer_reference) / BITS_PER_KBIT).collect();
    let dp: Vec<f64> = records.iter().map(|r| r.utility - pbar(r.slot)).collect();
    let dt: Vec<f64> = records.iter().map(|r| r.tau_exact - delay_reference).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / nm;
    let var = |v: &[f64], mu: f64| v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / nm;
    let (mb, mt) = (mean(&db), mean(&dt));
    MetricsSummary {
        delta_b: mb,
        sigma2_b: var(&db, mb),
        delta_p: dp.iter().map(|x| x.abs()).sum::<f64>() / nm,
        sigma2_p: var(&dp, 0.0),
        delta_tau: mt,
        sigma2_tau: var(&dt, mt),
        underflows: records.iter().filter(|r| r.underflow).count(),
        overflows: records.iter().filter(|r| r.overflow).count(),
        samples: m,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<SlotRecord>,
    pub slots: Vec<SlotSummary>,
    pub metrics: MetricsSummary,
}

/// Runs a scenario over its horizon.
pub fn run(scenario: &Scenario) -> Result<RunOutput> {
    run_world(World::new(scenario.clone())?)
}

/// Runs an already initialized world to the scenario horizon.
pub fn run_world(mut world: World) -> Result<RunOutput> {
    let mut records = Vec::new();
    let mut slots = Vec::new();
    while world.slot <= world.scenario.horizon {
        let slot = world.slot;
        let rows = world.step()?;
        slots.push(SlotSummary {
            slot,
            channel_rate: world.channel_rate,
            n_active: rows.len(),
            total_trans_rate: rows.iter().map(|r| r.trans_rate).sum(),
        });
        records.extend(rows);
    }
    let metrics = compute_metrics(&records, world.scenario.plant.buffer_reference, world.scenario.plant.delay_reference);
    Ok(RunOutput { records, slots, metrics })
}

/// Mean squared error between estimated and exact buffering delay, for each
/// smoothing factor, skipping the first `warmup` slots.
pub fn delay_estimator_sweep(scenario: &Scenario, alphas: &[f64], warmup: usize) -> Result<Vec<(f64, f64)>> {
    alphas
        .iter()
        .map(|&alpha| {
            let mut sc = scenario.clone();
            sc.plant.alpha = alpha;
            let out = run(&sc)?;
            let e: Vec<f64> = out.records.iter().filter(|r| r.slot > warmup).map(|r| (r.tau_est - r.tau_exact).powi(2)).collect();
            Ok((alpha, e.iter().sum::<f64>() / e.len().max(1) as f64))
        })
        .collect()
}

impl Scenario {
    /// Streams sharing one parameter set and noise model, delay-mode reference gains.
    pub fn uniform(params: &[SourceParams], noise: ParamNoiseSpec, channel_rate: f64, horizon: usize, policy: Policy) -> Self {
        Scenario {
            horizon,
            policy,
            gains: ControllerGains::reference_delay(),
            plant: PlantConfig::default(),
            limits: RateLimits::default(),
            channel_rate,
            channel_changes: Vec::new(),
            streams: params.iter().enumerate().map(|(i, p)| StreamSpec::new(i, *p, noise)).collect(),
            seed: 0,
        }
    }

    pub fn with_mode(mut self, mode: ControlMode) -> Self {
        self.gains.mode = mode;
        self
    }
}
