//! The round loop: broadcast, local training, censoring, allocation, lossy
//! uplink, stale-copy aggregation.
//!
//! A round is a pure function of the previous [`ServerState`], the client
//! caches and the named random streams, so traces are reproducible and
//! client-side work can be evaluated in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{linear_search_allocate, uniform_allocate, AllocationPlan, ResourceBudget};
use crate::channel::{
    outage_probability, sample_gain, sample_transmission, ChannelParams, ChannelRealization,
};
use crate::error::{Error, Result};
use crate::fedmath::{
    data_weights, global_gradient, global_loss, local_gradient, local_update_with_gradient,
    optimality_gap, ClientDataset, LossSpec, ModelVector, Optimum, SmoothnessConstants,
};
use crate::harness::config::SimConfig;
use crate::rng::{Purpose, Streams};
use crate::scheduler::{
    advance_clock, evaluate, refresh_cache, CensorConfig, ClientCache, DiffHistory,
};

/// Which scheduling and allocation rules run each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Censored uploads, linear-search allocation.
    Cefl,
    /// Every client uploads every round with an equal bandwidth split.
    FedavgUniform,
    /// Censored uploads with an equal bandwidth split.
    CeflUniform,
}

impl Algorithm {
    pub fn censors(self) -> bool {
        !matches!(self, Algorithm::FedavgUniform)
    }
}

/// How the server fills in clients it did not hear from this round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StaleAggregation {
    /// Average the last received local models as they are.
    #[default]
    StaleModels,
    /// Re-apply the client's last received local update to the current
    /// model: the effective copy is `w^t + (w_hat_i - origin_i)`. Under this
    /// reading the global step is a gradient step with a stale-gradient
    /// error term, which is what [`implicit_gradient_error`] and
    /// [`explicit_gradient_error`] compare.
    StaleUpdates,
}

/// Everything that stays fixed across rounds.
#[derive(Debug, Clone)]
pub struct Federation {
    pub datasets: Vec<ClientDataset>,
    /// `D_i / D`.
    pub weights: Vec<f64>,
    pub distances: Vec<f64>,
    pub spec: LossSpec,
    pub constants: SmoothnessConstants,
    pub eta: f64,
    pub epochs: usize,
    pub censor: CensorConfig,
    pub budget: ResourceBudget,
    pub channel: ChannelParams,
    pub outage_enabled: bool,
    pub algorithm: Algorithm,
    pub aggregation: StaleAggregation,
    pub optimum: Option<Optimum>,
}

impl Federation {
    pub fn clients(&self) -> usize {
        self.datasets.len()
    }

    pub fn dim(&self) -> usize {
        self.datasets[0].dim()
    }

    fn validate(&self) -> Result<()> {
        let n = self.datasets.len();
        if n == 0 {
            return Err(Error::invalid("a federation needs at least one client"));
        }
        if self.weights.len() != n || self.distances.len() != n {
            return Err(Error::invalid(
                "weights and distances must have one entry per client",
            ));
        }
        if self.censor.clients != n {
            return Err(Error::invalid(format!(
                "censor config is for {} clients, federation has {n}",
                self.censor.clients
            )));
        }
        if self.epochs == 0 || !(self.eta > 0.0) {
            return Err(Error::invalid(
                "need a positive learning rate and at least one epoch",
            ));
        }
        Ok(())
    }
}

/// Parameter server state at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: ModelVector,
    /// Last received local model per client, `w_hat_i`.
    pub copies: Vec<ModelVector>,
    /// Broadcast model each copy was trained from.
    pub origins: Vec<ModelVector>,
    pub history: DiffHistory,
    /// Completed rounds.
    pub round: usize,
}

impl ServerState {
    /// Every copy starts at the initial model.
    pub fn new(initial: ModelVector, clients: usize, window: usize) -> Self {
        Self {
            copies: vec![initial.clone(); clients],
            origins: vec![initial.clone(); clients],
            global: initial,
            history: DiffHistory::new(window),
            round: 0,
        }
    }
}

/// Per-client record of one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client_id: usize,
    pub scheduled: bool,
    pub forced: bool,
    pub gain: f64,
    pub admitted: bool,
    pub bandwidth: f64,
    pub power: f64,
    pub outage_probability: f64,
    pub received: bool,
}

/// Metrics of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// 1-based round index.
    pub round: usize,
    /// `f(w^t)` at broadcast.
    pub loss_before: f64,
    /// `f(w^{t+1})` after aggregation.
    pub loss: f64,
    /// `f(w^t) - f*`, when the optimum is known.
    pub gap_before: Option<f64>,
    /// `f(w^{t+1}) - f*`, when the optimum is known.
    pub gap: Option<f64>,
    pub scheduled: usize,
    pub forced: usize,
    /// Transmissions that were granted resources.
    pub uploads_attempted: usize,
    pub uploads_received: usize,
    pub outages: usize,
    pub admitted: Vec<usize>,
    pub bandwidth_used: f64,
    pub clients: Vec<ClientRound>,
}

impl RoundTrace {
    /// Percentage of clients that transmitted this round.
    pub fn participation_pct(&self) -> f64 {
        100.0 * self.uploads_attempted as f64 / self.clients.len().max(1) as f64
    }
}

/// `sum_i (D_i / D) w_hat_i`, reduced in client order.
pub fn aggregate(copies: &[ModelVector], data_sizes: &[f64]) -> Result<ModelVector> {
    if copies.is_empty() || copies.len() != data_sizes.len() {
        return Err(Error::invalid(format!(
            "{} copies for {} weights",
            copies.len(),
            data_sizes.len()
        )));
    }
    if data_sizes.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("aggregation weights must be positive"));
    }
    let dim = copies[0].dim();
    let total: f64 = data_sizes.iter().sum();
    let mut acc = vec![0.0; dim];
    for (copy, size) in copies.iter().zip(data_sizes) {
        if copy.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: copy.dim(),
            });
        }
        let c = size / total;
        for (a, v) in acc.iter_mut().zip(copy.iter()) {
            *a += c * v;
        }
    }
    ModelVector::new(acc)
}

/// A received local model together with the broadcast it was trained from.
#[derive(Debug, Clone, PartialEq)]
pub struct Receipt {
    pub client_id: usize,
    pub model: ModelVector,
    pub origin: ModelVector,
}

/// Replaces the copies of clients whose upload arrived; all others are left
/// untouched.
pub fn apply_receipts(mut state: ServerState, receipts: Vec<Receipt>) -> Result<ServerState> {
    let mut seen = vec![false; state.copies.len()];
    for r in &receipts {
        let slot = seen
            .get_mut(r.client_id)
            .ok_or_else(|| Error::invalid(format!("receipt for unknown client {}", r.client_id)))?;
        if *slot {
            return Err(Error::invalid(format!(
                "duplicate receipt for client {}",
                r.client_id
            )));
        }
        *slot = true;
        if r.model.dim() != state.global.dim() {
            return Err(Error::DimensionMismatch {
                expected: state.global.dim(),
                actual: r.model.dim(),
            });
        }
    }
    for r in receipts {
        state.copies[r.client_id] = r.model;
        state.origins[r.client_id] = r.origin;
    }
    Ok(state)
}

/// Copies the aggregation step averages.
pub fn effective_copies(state: &ServerState, mode: StaleAggregation) -> Vec<ModelVector> {
    match mode {
        StaleAggregation::StaleModels => state.copies.clone(),
        StaleAggregation::StaleUpdates => state
            .copies
            .iter()
            .zip(&state.origins)
            .map(|(copy, origin)| {
                let coords = state
                    .global
                    .iter()
                    .zip(copy.iter().zip(origin.iter()))
                    .map(|(w, (c, o))| w + (c - o))
                    .collect();
                ModelVector::new(coords).expect("finite inputs give finite copies")
            })
            .collect(),
    }
}

/// Result of [`run_round`].
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub state: ServerState,
    pub caches: Vec<ClientCache>,
    pub trace: RoundTrace,
}

struct ClientWork {
    gradient: Vec<f64>,
    local: ModelVector,
    scheduled: bool,
    forced: bool,
}

/// Initial client caches: reference point and gradient at the initial model.
pub fn initial_caches(fed: &Federation, initial: &ModelVector) -> Result<Vec<ClientCache>> {
    fed.datasets
        .iter()
        .map(|ds| {
            Ok(ClientCache::new(
                initial.clone(),
                local_gradient(initial, ds, &fed.spec)?,
            ))
        })
        .collect()
}

/// One communication round.
pub fn run_round(
    fed: &Federation,
    state: &ServerState,
    caches: &[ClientCache],
    streams: &Streams,
) -> Result<RoundOutcome> {
    let n = fed.clients();
    if caches.len() != n || state.copies.len() != n {
        return Err(Error::invalid("state does not match the federation size"));
    }
    let t = state.round as u64;
    let w = &state.global;

    // Local training and the upload decision.
    let work: Vec<ClientWork> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ds = &fed.datasets[i];
            let gradient = local_gradient(w, ds, &fed.spec)?;
            let local =
                local_update_with_gradient(w, &gradient, ds, &fed.spec, fed.eta, fed.epochs)?;
            let (scheduled, forced) = if fed.algorithm.censors() {
                let d = evaluate(&gradient, &caches[i], &state.history, &fed.censor);
                (d.upload, d.forced)
            } else {
                (true, false)
            };
            Ok(ClientWork {
                gradient,
                local,
                scheduled,
                forced,
            })
        })
        .collect::<Result<_>>()?;

    // Fresh block fading for everyone.
    let realizations: Vec<ChannelRealization> = (0..n)
        .map(|i| {
            let mut rng = streams.stream(Purpose::Fading, i as u64, t);
            sample_gain(&mut rng, i, fed.distances[i], &fed.channel)
        })
        .collect::<Result<_>>()?;

    let scheduled: Vec<ChannelRealization> = realizations
        .iter()
        .filter(|r| work[r.client_id].scheduled)
        .copied()
        .collect();
    let plan: AllocationPlan = match fed.algorithm {
        Algorithm::Cefl => linear_search_allocate(&scheduled, &fed.budget, fed.channel.noise_psd),
        Algorithm::FedavgUniform | Algorithm::CeflUniform => {
            uniform_allocate(&scheduled, &fed.budget, n)
        }
    };

    let mut records = Vec::with_capacity(n);
    let mut receipts = Vec::new();
    for (i, real) in realizations.iter().enumerate() {
        let alloc = plan.get(i).filter(|a| a.admitted);
        let (admitted, bandwidth, power) =
            alloc.map_or((false, 0.0, 0.0), |a| (true, a.bandwidth, a.power));
        let p = if !admitted {
            1.0
        } else if fed.outage_enabled {
            outage_probability(
                bandwidth,
                power,
                fed.distances[i],
                &fed.channel,
                fed.budget.packet_bits,
                fed.budget.deadline,
            )?
        } else {
            0.0
        };
        let received = admitted && {
            let mut rng = streams.stream(Purpose::Outage, i as u64, t);
            sample_transmission(&mut rng, p)
        };
        if received {
            receipts.push(Receipt {
                client_id: i,
                model: work[i].local.clone(),
                origin: w.clone(),
            });
        }
        records.push(ClientRound {
            client_id: i,
            scheduled: work[i].scheduled,
            forced: work[i].forced,
            gain: real.gain,
            admitted,
            bandwidth,
            power,
            outage_probability: if admitted { p } else { 1.0 },
            received,
        });
    }

    let mut next = apply_receipts(state.clone(), receipts)?;
    let copies = effective_copies(&next, fed.aggregation);
    let sizes: Vec<f64> = fed.datasets.iter().map(|d| d.count() as f64).collect();
    let w_next = aggregate(&copies, &sizes)?;
    next.history.push(&w_next, w)?;
    next.global = w_next;
    next.round += 1;

    let caches = caches
        .iter()
        .zip(&work)
        .zip(&records)
        .map(|((cache, wk), rec)| {
            let c = refresh_cache(cache.clone(), w, &wk.gradient, wk.scheduled);
            advance_clock(c, wk.scheduled, rec.received, fed.censor.max_staleness)
        })
        .collect();

    let loss_before = global_loss(w, &fed.datasets, &fed.spec)?;
    let loss = global_loss(&next.global, &fed.datasets, &fed.spec)?;
    let gap_of = |m: &ModelVector| {
        fed.optimum
            .as_ref()
            .map(|opt| optimality_gap(m, opt, &fed.datasets, &fed.spec))
            .transpose()
    };
    let gap_before = gap_of(w)?;
    let gap = gap_of(&next.global)?;
    let attempted = records.iter().filter(|r| r.admitted).count();
    let received = records.iter().filter(|r| r.received).count();
    let trace = RoundTrace {
        round: next.round,
        loss_before,
        loss,
        gap_before,
        gap,
        scheduled: records.iter().filter(|r| r.scheduled).count(),
        forced: records.iter().filter(|r| r.forced).count(),
        uploads_attempted: attempted,
        uploads_received: received,
        outages: attempted - received,
        admitted: plan.admitted_ids(),
        bandwidth_used: plan.bandwidth_used(),
        clients: records,
    };
    Ok(RoundOutcome {
        state: next,
        caches,
        trace,
    })
}

/// When a run ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub max_rounds: usize,
    /// Stop after the first round whose gap is at most this.
    pub target_gap: Option<f64>,
}

/// A federation in motion.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub federation: Federation,
    pub state: ServerState,
    pub caches: Vec<ClientCache>,
    pub streams: Streams,
}

impl Simulation {
    /// Starts from the all-zero model.
    pub fn new(federation: Federation, streams: Streams) -> Result<Self> {
        federation.validate()?;
        let initial = ModelVector::zeros(federation.dim());
        let caches = initial_caches(&federation, &initial)?;
        let state = ServerState::new(initial, federation.clients(), federation.censor.window());
        Ok(Self {
            federation,
            state,
            caches,
            streams,
        })
    }

    pub fn step(&mut self) -> Result<RoundTrace> {
        let out = run_round(&self.federation, &self.state, &self.caches, &self.streams)?;
        self.state = out.state;
        self.caches = out.caches;
        Ok(out.trace)
    }

    pub fn run(&mut self, stop: StopRule) -> Result<Vec<RoundTrace>> {
        let mut traces = Vec::with_capacity(stop.max_rounds);
        for _ in 0..stop.max_rounds {
            let trace = self.step()?;
            let done = matches!((stop.target_gap, trace.gap), (Some(eps), Some(g)) if g <= eps);
            traces.push(trace);
            if done {
                break;
            }
        }
        Ok(traces)
    }

    /// Gap of the current global model.
    pub fn current_gap(&self) -> Option<f64> {
        let fed = &self.federation;
        fed.optimum
            .as_ref()
            .and_then(|opt| optimality_gap(&self.state.global, opt, &fed.datasets, &fed.spec).ok())
    }
}

/// Full run for a configuration, deterministic in its seed.
pub fn run_simulation(config: &SimConfig) -> Result<Vec<RoundTrace>> {
    let mut sim = crate::harness::build_simulation(config)?;
    sim.run(config.stop_rule())
}

/// The same configuration run as FedAvg with an equal bandwidth split.
pub fn run_fedavg_baseline(config: &SimConfig) -> Result<Vec<RoundTrace>> {
    let mut baseline = config.clone();
    baseline.algorithm = Algorithm::FedavgUniform;
    run_simulation(&baseline)
}

/// Gradient error implied by an update: `-(w^{t+1} - w^t) / eta - grad f(w^t)`.
pub fn implicit_gradient_error(
    w_prev: &ModelVector,
    w_next: &ModelVector,
    eta: f64,
    datasets: &[ClientDataset],
    spec: &LossSpec,
) -> Result<Vec<f64>> {
    let g = global_gradient(w_prev, datasets, spec)?;
    Ok(w_prev
        .iter()
        .zip(w_next.iter())
        .zip(&g)
        .map(|((a, b), gj)| -(b - a) / eta - gj)
        .collect())
}

/// Stale-gradient error `sum_{i not fresh} (D_i / D) (grad f_i(ref_i) - grad f_i(w^t))`,
/// where `ref_i` is the model client `i`'s server-side contribution was
/// computed from.
pub fn explicit_gradient_error(
    w_prev: &ModelVector,
    references: &[ModelVector],
    fresh: &[bool],
    datasets: &[ClientDataset],
    spec: &LossSpec,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; w_prev.dim()];
    for (((ds, weight), reference), is_fresh) in datasets
        .iter()
        .zip(data_weights(datasets))
        .zip(references)
        .zip(fresh)
    {
        if *is_fresh {
            continue;
        }
        let stale = local_gradient(reference, ds, spec)?;
        let now = local_gradient(w_prev, ds, spec)?;
        for ((a, s), c) in acc.iter_mut().zip(&stale).zip(&now) {
            *a += weight * (s - c);
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(v: &[f64]) -> ModelVector {
        ModelVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn aggregate_of_equal_copies_is_identity() {
        let w = mv(&[0.3, -1.2, 4.0]);
        let out = aggregate(&[w.clone(), w.clone(), w.clone()], &[1.0, 2.0, 5.0]).unwrap();
        for (a, b) in out.iter().zip(w.iter()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn aggregate_hand_example() {
        let v = mv(&[4.0, -8.0]);
        let out = aggregate(&[mv(&[0.0, 0.0]), v], &[1.0, 3.0]).unwrap();
        assert_eq!(out.as_slice(), &[3.0, -6.0]);
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        assert!(aggregate(&[mv(&[1.0])], &[1.0, 2.0]).is_err());
        assert!(aggregate(&[mv(&[1.0]), mv(&[1.0, 2.0])], &[1.0, 1.0]).is_err());
        assert!(aggregate(&[mv(&[1.0])], &[0.0]).is_err());
    }

    #[test]
    fn receipts_replace_only_their_copies() {
        let state = ServerState::new(mv(&[0.0, 0.0]), 3, 2);
        assert_eq!(apply_receipts(state.clone(), vec![]).unwrap(), state);

        let r = Receipt {
            client_id: 1,
            model: mv(&[1.0, 2.0]),
            origin: mv(&[0.5, 0.5]),
        };
        let next = apply_receipts(state.clone(), vec![r.clone()]).unwrap();
        assert_eq!(next.copies[1], r.model);
        assert_eq!(next.origins[1], r.origin);
        assert_eq!(next.copies[0], state.copies[0]);
        assert_eq!(next.copies[2], state.copies[2]);

        assert!(apply_receipts(state.clone(), vec![r.clone(), r.clone()]).is_err());
        let stray = Receipt { client_id: 9, ..r };
        assert!(apply_receipts(state, vec![stray]).is_err());
    }

    #[test]
    fn all_receipts_give_fresh_copies() {
        let state = ServerState::new(mv(&[0.0]), 2, 1);
        let receipts = (0..2)
            .map(|i| Receipt {
                client_id: i,
                model: mv(&[i as f64 + 1.0]),
                origin: mv(&[0.0]),
            })
            .collect();
        let next = apply_receipts(state, receipts).unwrap();
        assert_eq!(next.copies, vec![mv(&[1.0]), mv(&[2.0])]);
    }

    #[test]
    fn stale_update_copies_rebase_on_the_current_model() {
        let mut state = ServerState::new(mv(&[0.0]), 1, 1);
        state.copies[0] = mv(&[0.75]);
        state.origins[0] = mv(&[1.0]);
        state.global = mv(&[2.0]);
        assert_eq!(
            effective_copies(&state, StaleAggregation::StaleUpdates),
            vec![mv(&[1.75])]
        );
        assert_eq!(
            effective_copies(&state, StaleAggregation::StaleModels),
            vec![mv(&[0.75])]
        );
    }
}
