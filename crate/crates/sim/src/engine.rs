//! Deterministic discrete-event execution of a scenario.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use orbitfl_core::contacts::{ContactOracle, ContactPlan};
use orbitfl_core::flcore::{client_opt, compute_time, evaluate, load_idx, partition_dataset, synthetic_digits, LogisticRegression, Model};
use orbitfl_core::links::link_rate;
use orbitfl_core::orbital::{satellite_position, SatelliteId, SPEED_OF_LIGHT};
use orbitfl_core::orchestration::{AsyncPs, ClusterSet, PlaneContext, PsMessage, PsOutcome, PsReply, SatAction, SatEvent, SatProc, SyncPs, TerminationTracker};
use orbitfl_core::rng::{purpose, stream, StreamRng};
use orbitfl_core::routing::{estimate_aggregation_time, GradientSize, Handoff};
use orbitfl_core::sparsify::{expected_nnz, index_bits};
use orbitfl_core::{Data, Error, GradientCompressor, Params, Rates, Result};

use crate::config::{DataSource, Orchestration, ScenarioConfig};
use crate::delay::StochasticDelayModel;
use crate::metrics::{FailureRecord, Metrics};

/// Size of REQUEST and ACK messages.
pub const CONTROL_BITS: u64 = 64;

#[derive(Debug, Clone)]
enum Kind {
    WindowOpen { sat: usize },
    Poll { sat: usize, until: f64 },
    Sat { sat: usize, ev: SatEvent },
    PsReceived { sat: usize, msg: PsMessage },
    ModelDelivered { sat: usize, iteration: u64, model: Arc<Params> },
}

#[derive(Debug)]
struct Queued {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed: BinaryHeap pops the earliest (time, seq) first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

/// Min-queue of events ordered by `(time, insertion order)`.
#[derive(Debug, Default)]
struct EventQueue {
    heap: BinaryHeap<Queued>,
    seq: u64,
    now: f64,
}

impl EventQueue {
    fn push(&mut self, time: f64, kind: Kind) {
        debug_assert!(time >= self.now, "event at {time} scheduled from {}", self.now);
        self.seq += 1;
        self.heap.push(Queued { time: time.max(self.now), seq: self.seq, kind });
    }

    fn pop(&mut self) -> Option<(f64, Kind)> {
        let q = self.heap.pop()?;
        self.now = q.time;
        Some((q.time, q.kind))
    }
}

enum Ps {
    Sync(SyncPs),
    Async(AsyncPs),
}

/// Run-level facts written next to the metrics.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub config: ScenarioConfig,
    pub rates: Rates,
    pub clusters: usize,
    pub workers: usize,
    pub n_params: usize,
    pub planned_aggregation_s: Vec<f64>,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    contacts: ContactPlan,
    clusters: ClusterSet,
    /// Cluster and ring position of every flat satellite index.
    place: Vec<(usize, usize)>,
    procs: Vec<SatProc>,
    data: Vec<Data>,
    test: Data,
    model: LogisticRegression,
    compressors: Vec<GradientCompressor>,
    ps: Ps,
    tracker: TerminationTracker,
    rates: Rates,
    delays: Option<StochasticDelayModel>,
    learn_rng: Vec<StreamRng>,
    comm_rng: Vec<StreamRng>,
    t_hat: Vec<f64>,
    upload_time: f64,
    handoff: Handoff,
    isl_distance_m: f64,
    queue: EventQueue,
    ps_queue: VecDeque<(usize, PsMessage)>,
    ps_busy: bool,
    metrics: Metrics,
    open_failures: BTreeMap<(usize, u64), usize>,
    /// Every global model, when tracing.
    model_log: Option<Vec<Params>>,
}

fn load_data(cfg: &ScenarioConfig) -> Result<(Data, Data)> {
    match &cfg.data.source {
        DataSource::Synthetic { spec, test_samples } => {
            let mut all_spec = *spec;
            all_spec.samples = spec.samples + test_samples;
            let all: Data = synthetic_digits(&all_spec, &mut stream(cfg.seed, purpose::DATASET, 0, 0));
            Ok(all.split_at(spec.samples))
        }
        DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
            Ok((load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?))
        }
    }
}

/// Local datasets, indexed by flat satellite index, and the shared test set.
pub fn datasets(cfg: &ScenarioConfig) -> Result<(Vec<Data>, Data)> {
    let (train, test) = load_data(cfg)?;
    let shares = partition_dataset(&train, cfg.constellation.total(), cfg.data.partition, &mut stream(cfg.seed, purpose::PARTITION, 0, 0))?;
    Ok((shares, test))
}

impl Simulation {
    /// Builds the scenario with contact windows from the orbital model.
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let contacts = if cfg.constellation.total() == 0 {
            ContactPlan::from_windows(0, cfg.constellation.sats_per_plane, cfg.horizon_s, Vec::new())?
        } else {
            ContactPlan::from_geometry(&cfg.constellation, &cfg.ps, 0.0, cfg.horizon_s + cfg.search_horizon_s)?
        };
        Self::with_contacts(cfg, contacts)
    }

    /// Builds the scenario on a given contact plan, e.g. a scripted trace.
    pub fn with_contacts(cfg: ScenarioConfig, contacts: ContactPlan) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg.constellation;
        if contacts.windows.len() != c.total() {
            return Err(Error::DimensionMismatch { expected: c.total(), got: contacts.windows.len() });
        }
        let clusters = if cfg.isl { ClusterSet::per_plane(c) } else { ClusterSet::per_satellite(c) };
        let n = c.total();
        let mut place = vec![(0, 0); n];
        for (ci, members) in clusters.clusters.iter().enumerate() {
            for (i, id) in members.iter().enumerate() {
                place[c.index_of(*id)] = (ci, i + 1);
            }
        }
        let procs = (0..n).map(|s| SatProc::new(place[s].1, clusters.clusters[place[s].0].len())).collect();

        let (data, test) = if n == 0 { (Vec::new(), Data::new(1, 1, vec![0.0], vec![0])?) } else { datasets(&cfg)? };
        let model = LogisticRegression::new(test.n_features, test.n_classes);
        let n_d = Model::<f64>::num_params(&model);
        let w0 = Params { values: vec![0.0; n_d], elem_bits: cfg.elem_bits };
        let total_weight: f64 = data.iter().map(|d| d.len() as f64).sum::<f64>().max(1.0);
        let ps = match cfg.orchestration {
            Orchestration::Sync => Ps::Sync(SyncPs::new(w0, clusters.len(), total_weight, cfg.server_lr)?),
            Orchestration::Async { .. } => Ps::Async(AsyncPs::new(w0, clusters.len(), total_weight, cfg.server_lr)?),
        };
        let compressors = (0..n)
            .map(|_| match cfg.sparsify_q {
                Some(q) if q < 1.0 => GradientCompressor::top_q(q),
                _ => GradientCompressor::Identity,
            })
            .collect();

        let isl_distance_m = c.neighbor_distance_km() * 1e3;
        let ps_distance_m = cfg.ps.max_link_distance_km(c.altitude_km)? * 1e3;
        let rates = Rates { isl_rate: link_rate(&cfg.link, isl_distance_m.max(1.0))?, ps_rate: link_rate(&cfg.link, ps_distance_m)? };
        let delays = cfg.delays.as_ref().map(StochasticDelayModel::new).transpose()?;

        let elem = cfg.elem_bits;
        let param_bits = (n_d as u64 * u64::from(elem)) as f64;
        let gradient = match cfg.sparsify_q {
            Some(q) if q < 1.0 => GradientSize::Sparse { n_d, elem_bits: elem, q },
            _ => GradientSize::Fixed(param_bits),
        };
        let max_k = clusters.clusters.iter().map(Vec::len).max().unwrap_or(1);
        let aggregate_bits = match gradient {
            GradientSize::Sparse { q, .. } => expected_nnz(n_d, q, max_k as u32) * f64::from(elem + index_bits(n_d)),
            GradientSize::Fixed(b) => b,
        };
        let upload_time = aggregate_bits / rates.ps_rate + ps_distance_m / SPEED_OF_LIGHT;
        let (learn_mean, comm_mean) = cfg.delays.map_or((0.0, 0.0), |d| (d.learn_shape * d.learn_scale_s, 1.0 / d.comm_rate));
        let t_hat = clusters
            .clusters
            .iter()
            .map(|members| {
                let t_l = members
                    .iter()
                    .map(|id| compute_time(&cfg.compute, data[c.index_of(*id)].len(), n_d, cfg.train.epochs, cfg.train.batch_size))
                    .fold(0.0, f64::max)
                    + learn_mean;
                if members.len() == 1 {
                    return Ok(t_l);
                }
                let h = members.len().div_ceil(2) as f64;
                Ok(estimate_aggregation_time(t_l, members.len(), param_bits, gradient, rates.isl_rate, isl_distance_m)? + 2.0 * h * comm_mean)
            })
            .collect::<Result<Vec<f64>>>()?;
        let handoff = Handoff { aggregate_bits, rho: rates.isl_rate, d_m: isl_distance_m, t_g: 0.0, upload_time, search_horizon: cfg.search_horizon_s };
        let learn_rng = (0..n).map(|s| stream(cfg.seed, purpose::LEARN_JITTER, s as u64, 0)).collect();
        let comm_rng = (0..n).map(|s| stream(cfg.seed, purpose::COMM_JITTER, s as u64, 0)).collect();
        let tracker = TerminationTracker::new(cfg.termination);

        let mut sim = Self {
            cfg,
            contacts,
            clusters,
            place,
            procs,
            data,
            test,
            model,
            compressors,
            ps,
            tracker,
            rates,
            delays,
            learn_rng,
            comm_rng,
            t_hat,
            upload_time,
            handoff,
            isl_distance_m,
            queue: EventQueue::default(),
            ps_queue: VecDeque::new(),
            ps_busy: false,
            metrics: Metrics::default(),
            open_failures: BTreeMap::new(),
            model_log: None,
        };
        for s in 0..n {
            sim.schedule_window_open(s, 0.0);
        }
        Ok(sim)
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            config: self.cfg.clone(),
            rates: self.rates,
            clusters: self.clusters.len(),
            workers: self.clusters.workers(),
            n_params: Model::<f64>::num_params(&self.model),
            planned_aggregation_s: self.t_hat.clone(),
        }
    }

    pub fn contacts(&self) -> &ContactPlan {
        &self.contacts
    }

    fn id(&self, sat: usize) -> SatelliteId {
        self.cfg.constellation.id_of(sat)
    }

    fn finished(&self) -> bool {
        match &self.ps {
            Ps::Sync(p) => p.finished,
            Ps::Async(p) => p.finished,
        }
    }

    fn schedule_window_open(&mut self, sat: usize, from: f64) {
        let id = self.id(sat);
        if let Some(w) = self.contacts.next_window(id, from, self.cfg.horizon_s - from) {
            self.queue.push(w.begin.max(from), Kind::WindowOpen { sat });
        }
    }

    /// Runs until the PS stops training or the horizon is reached.
    pub fn run(mut self) -> Result<Metrics> {
        self.advance()?;
        Ok(self.metrics)
    }

    /// Like [`Simulation::run`], also returning every global model in order.
    pub fn run_traced(mut self) -> Result<(Metrics, Vec<Params>)> {
        self.model_log = Some(Vec::new());
        self.advance()?;
        Ok((self.metrics, self.model_log.unwrap_or_default()))
    }

    fn advance(&mut self) -> Result<()> {
        if self.clusters.is_empty() || self.finished() {
            self.metrics.finished = true;
            return Ok(());
        }
        while let Some((t, kind)) = self.queue.pop() {
            if t > self.cfg.horizon_s {
                self.metrics.end_time = self.cfg.horizon_s;
                return Ok(());
            }
            self.dispatch(t, kind)?;
            if self.finished() {
                self.metrics.finished = true;
                self.metrics.end_time = t;
                return Ok(());
            }
        }
        let states: Vec<String> = self
            .procs
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.wants_model())
            .map(|(s, p)| format!("{}: role {:?} iteration {} holding {}", self.id(s), p.role, p.iteration, p.holding.is_some()))
            .collect();
        Err(Error::Protocol(format!(
            "no events left at t = {:.1} s before the horizon and training is not finished; busy satellites: [{}]",
            self.queue.now,
            states.join("; ")
        )))
    }

    fn dispatch(&mut self, t: f64, kind: Kind) -> Result<()> {
        match kind {
            Kind::WindowOpen { sat } => {
                let id = self.id(sat);
                let end = self.contacts.next_window(id, t, 0.0).map_or(t, |w| w.end);
                self.deliver(t, sat, SatEvent::PsContact)?;
                if t + self.cfg.retry_s < end {
                    self.queue.push(t + self.cfg.retry_s, Kind::Poll { sat, until: end });
                }
                self.schedule_window_open(sat, end + orbitfl_core::orbital::CONTACT_TOLERANCE);
            }
            Kind::Poll { sat, until } => {
                if self.procs[sat].wants_model() {
                    self.deliver(t, sat, SatEvent::PsContact)?;
                }
                if t + self.cfg.retry_s < until {
                    self.queue.push(t + self.cfg.retry_s, Kind::Poll { sat, until });
                }
            }
            Kind::Sat { sat, ev } => self.deliver(t, sat, ev)?,
            Kind::PsReceived { sat, msg } => self.ps_received(t, sat, msg)?,
            Kind::ModelDelivered { sat, iteration, model } => {
                let cluster = self.place[sat].0;
                if self.contacts.visible(self.id(sat), t) {
                    match &mut self.ps {
                        Ps::Sync(p) => p.confirm_transfer(cluster, iteration),
                        Ps::Async(p) => p.confirm_transfer(cluster, iteration),
                    }
                    self.metrics.traffic.entry(iteration).or_default().ps_bits += model.wire_bits();
                    self.deliver(t, sat, SatEvent::ModelFromPs { iteration, model })?;
                } else {
                    self.metrics.rejected_requests += 1;
                    self.deliver(t, sat, SatEvent::RequestRejected)?;
                }
                self.ps_busy = false;
                self.next_ps_session(t)?;
            }
        }
        Ok(())
    }

    fn deliver(&mut self, t: f64, sat: usize, ev: SatEvent) -> Result<()> {
        let (cluster, _) = self.place[sat];
        let ctx = PlaneContext {
            oracle: &self.contacts,
            ring: &self.clusters.clusters[cluster],
            t_hat: self.t_hat[cluster],
            upload_time: self.upload_time,
            search_horizon: self.cfg.search_horizon_s,
            t_u: match self.cfg.orchestration {
                Orchestration::Async { t_u_s } => t_u_s,
                Orchestration::Sync => 0.0,
            },
            scheme: self.cfg.failure,
            handoff: self.handoff,
        };
        let actions = self.procs[sat].step(&ctx, t, ev)?;
        for a in actions {
            self.execute(t, sat, a)?;
        }
        Ok(())
    }

    fn ring_member(&self, sat: usize, pos: usize) -> usize {
        let (cluster, _) = self.place[sat];
        self.cfg.constellation.index_of(self.clusters.clusters[cluster][pos - 1])
    }

    fn execute(&mut self, t: f64, sat: usize, action: SatAction) -> Result<()> {
        match action {
            SatAction::SendIsl { to, msg } => {
                let bits = msg.wire_bits(self.cfg.elem_bits);
                let tag = match &msg {
                    orbitfl_core::orchestration::IslMessage::Params { iteration, .. } => *iteration,
                    orbitfl_core::orchestration::IslMessage::Partial(a)
                    | orbitfl_core::orchestration::IslMessage::NewSink { aggregate: a, .. }
                    | orbitfl_core::orchestration::IslMessage::Pass { aggregate: a, .. } => a.iteration,
                };
                self.metrics.traffic.entry(tag).or_default().isl_bits += bits;
                let jitter = self.delays.map_or(0.0, |d| d.comm_jitter(&mut self.comm_rng[sat]));
                let dt = bits as f64 / self.rates.isl_rate + self.isl_distance_m / SPEED_OF_LIGHT + jitter;
                let dest = self.ring_member(sat, to);
                self.queue.push(t + dt, Kind::Sat { sat: dest, ev: SatEvent::Isl(msg) });
            }
            SatAction::StartLearning { iteration, model } => {
                let mut rng = stream(self.cfg.seed, purpose::SHUFFLE, sat as u64, iteration);
                let update = client_opt(&self.model, &model.values, &self.data[sat], &self.cfg.train, &mut self.compressors[sat], &mut rng)?;
                let n_d = model.values.len();
                let mut dt = compute_time(&self.cfg.compute, self.data[sat].len(), n_d, self.cfg.train.epochs, self.cfg.train.batch_size);
                if let Some(d) = self.delays {
                    dt += d.learn_jitter(&mut self.learn_rng[sat]);
                }
                self.queue.push(t + dt, Kind::Sat { sat, ev: SatEvent::LearningDone { iteration, update } });
            }
            SatAction::RequestModel => self.enqueue_ps(t, sat, PsMessage::Request)?,
            SatAction::Upload { aggregate } => {
                let msg = PsMessage::Aggregate { iteration: aggregate.iteration, payload: aggregate.payload, weight: aggregate.weight };
                self.enqueue_ps(t, sat, msg)?;
            }
            SatAction::WakeAt(at) => self.queue.push(at.max(t), Kind::Sat { sat, ev: SatEvent::PsContact }),
            SatAction::FailureDetected { iteration } => {
                let cluster = self.place[sat].0;
                self.open_failures.insert((cluster, iteration), self.metrics.failures.len());
                self.metrics.failures.push(FailureRecord { cluster, iteration, detected_at: t, delivered_at: None });
            }
            SatAction::Dropped(why) => {
                log::debug!("{} dropped: {why}", self.id(sat));
                self.metrics.dropped_messages += 1;
            }
        }
        Ok(())
    }

    fn enqueue_ps(&mut self, t: f64, sat: usize, msg: PsMessage) -> Result<()> {
        self.ps_queue.push_back((sat, msg));
        if !self.ps_busy {
            self.next_ps_session(t)?;
        }
        Ok(())
    }

    fn ps_distance_m(&self, sat: usize, t: f64) -> f64 {
        let p = satellite_position(&self.cfg.constellation, self.id(sat), t);
        p.distance(&self.cfg.ps.position(t)) * 1e3
    }

    fn msg_bits(&self, msg: &PsMessage) -> u64 {
        match msg {
            PsMessage::Request => CONTROL_BITS,
            PsMessage::Aggregate { payload, .. } => payload.wire_bits(self.cfg.elem_bits),
        }
    }

    /// Opens the next queued PS connection; the PS serves one at a time.
    fn next_ps_session(&mut self, t: f64) -> Result<()> {
        while let Some((sat, msg)) = self.ps_queue.pop_front() {
            if !self.contacts.visible(self.id(sat), t) {
                self.abort_session(t, sat, &msg)?;
                continue;
            }
            let dt = self.msg_bits(&msg) as f64 / self.rates.ps_rate + self.ps_distance_m(sat, t) / SPEED_OF_LIGHT;
            self.ps_busy = true;
            self.queue.push(t + dt, Kind::PsReceived { sat, msg });
            return Ok(());
        }
        self.ps_busy = false;
        Ok(())
    }

    fn abort_session(&mut self, t: f64, sat: usize, msg: &PsMessage) -> Result<()> {
        match msg {
            PsMessage::Request => {
                self.metrics.rejected_requests += 1;
                self.deliver(t, sat, SatEvent::RequestRejected)
            }
            PsMessage::Aggregate { .. } => self.deliver(t, sat, SatEvent::UploadAborted),
        }
    }

    fn ps_tag(&self) -> u64 {
        match &self.ps {
            Ps::Sync(p) => p.n,
            Ps::Async(p) => p.n + 1,
        }
    }

    fn ps_received(&mut self, t: f64, sat: usize, msg: PsMessage) -> Result<()> {
        if !self.contacts.visible(self.id(sat), t) {
            self.abort_session(t, sat, &msg)?;
            return self.next_ps_session(t);
        }
        let cluster = self.place[sat].0;
        let bits = self.msg_bits(&msg);
        let tag = match &msg {
            PsMessage::Aggregate { iteration, .. } => *iteration,
            PsMessage::Request => self.ps_tag(),
        };
        self.metrics.traffic.entry(tag).or_default().ps_bits += bits;
        let is_request = matches!(msg, PsMessage::Request);
        let outcome = {
            let Simulation { ps, model, test, tracker, metrics, model_log, .. } = self;
            let mut criterion = |w: &Params| {
                if let Some(log) = model_log.as_mut() {
                    log.push(w.clone());
                }
                let acc = evaluate(model, &w.values, test).unwrap_or(0.0);
                metrics.accuracy.push((t, acc));
                metrics.update_times.push(t);
                tracker.observe(Some(acc))
            };
            match ps {
                Ps::Sync(p) => p.handle(cluster, msg, &mut criterion)?,
                Ps::Async(p) => p.handle(cluster, msg, &mut criterion)?,
            }
        };
        let PsOutcome { reply, .. } = outcome;
        log::debug!(
            "t={t:.0} PS <- {} (cluster {cluster}): {}",
            self.id(sat),
            match &reply {
                PsReply::Transmit { iteration, .. } => format!("transmit {iteration}"),
                PsReply::Ack { iteration } => format!("ack {iteration}"),
                PsReply::Terminate => "terminate".into(),
                PsReply::Reject(w) => format!("reject: {w}"),
            }
        );
        match reply {
            PsReply::Transmit { iteration, model } => {
                let dt = model.wire_bits() as f64 / self.rates.ps_rate + self.ps_distance_m(sat, t) / SPEED_OF_LIGHT;
                self.queue.push(t + dt, Kind::ModelDelivered { sat, iteration, model });
                return Ok(());
            }
            PsReply::Ack { iteration } => {
                self.metrics.traffic.entry(iteration).or_default().ps_bits += CONTROL_BITS;
                if let Some(i) = self.open_failures.remove(&(cluster, iteration)) {
                    self.metrics.failures[i].delivered_at = Some(t);
                }
                self.deliver(t, sat, SatEvent::UploadAcked)?;
            }
            PsReply::Terminate if is_request => {
                self.metrics.rejected_requests += 1;
                self.deliver(t, sat, SatEvent::RequestRejected)?;
            }
            PsReply::Terminate => self.deliver(t, sat, SatEvent::UploadAborted)?,
            PsReply::Reject(why) => {
                log::warn!("PS rejected aggregate from {}: {why}", self.id(sat));
                self.metrics.rejected_aggregates += 1;
                // the aggregate can never be accepted; release the satellite
                self.deliver(t, sat, SatEvent::UploadAcked)?;
            }
        }
        self.ps_busy = false;
        self.next_ps_session(t)
    }
}

/// Builds and runs a scenario.
pub fn run(cfg: &ScenarioConfig) -> Result<Metrics> {
    Simulation::new(cfg.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::default();
        q.push(5.0, Kind::WindowOpen { sat: 1 });
        q.push(1.0, Kind::WindowOpen { sat: 2 });
        q.push(5.0, Kind::WindowOpen { sat: 3 });
        let order: Vec<usize> = std::iter::from_fn(|| q.pop())
            .map(|(_, k)| match k {
                Kind::WindowOpen { sat } => sat,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![2, 1, 3]);
    }
}
