//! Parameter-server and satellite processes as pure state machines.
//!
//! Each `handle`/`step` call consumes one message or event and returns the
//! actions the caller (normally the simulator) has to carry out. Time only
//! enters through the `t` argument.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::contacts::{ContactOracle, Window};
use crate::error::{Error, Result};
use crate::flcore::{ModelParams, WeightedUpdate};
use crate::orbital::{ConstellationConfig, SatelliteId};
use crate::routing::{
    build_aggregation_tree, determine_new_sink, flood_params, next_hop_toward, partial_aggregate, select_sink, Handoff, PartialAggregate, RingDirection,
    SinkPlan,
};
use crate::sparsify::Payload;

/// Worker groups served by the PS; by default one per orbital plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSet {
    /// Members of each cluster in ring order.
    pub clusters: Vec<Vec<SatelliteId>>,
}

impl ClusterSet {
    pub fn per_plane(cfg: &ConstellationConfig<f64>) -> Self {
        let clusters = (1..=cfg.num_planes).map(|p| (1..=cfg.sats_per_plane).map(|s| SatelliteId::new(p, s)).collect()).collect();
        Self { clusters }
    }

    /// Every satellite on its own, as without inter-satellite links.
    pub fn per_satellite(cfg: &ConstellationConfig<f64>) -> Self {
        Self { clusters: cfg.ids().map(|id| vec![id]).collect() }
    }

    pub fn from_clusters(clusters: Vec<Vec<SatelliteId>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &clusters {
            if c.is_empty() {
                return Err(Error::Config("empty cluster".into()));
            }
            for id in c {
                if !seen.insert(*id) {
                    return Err(Error::Config(format!("{id} belongs to two clusters")));
                }
            }
        }
        Ok(Self { clusters })
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster index and ring position (1-based) of `id`.
    pub fn locate(&self, id: SatelliteId) -> Option<(usize, usize)> {
        self.clusters.iter().enumerate().find_map(|(c, members)| members.iter().position(|m| *m == id).map(|i| (c, i + 1)))
    }

    pub fn workers(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }
}

/// When the PS stops training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Termination {
    /// Stop after this many global updates.
    pub max_updates: Option<u64>,
    /// Stop once test accuracy reaches this value ...
    pub target_accuracy: Option<f64>,
    /// ... on this many consecutive evaluations.
    #[serde(default = "default_sustain")]
    pub sustain: usize,
}

fn default_sustain() -> usize {
    3
}

impl Default for Termination {
    fn default() -> Self {
        Self { max_updates: None, target_accuracy: None, sustain: default_sustain() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminationTracker {
    pub cfg: Termination,
    updates: u64,
    streak: usize,
}

impl TerminationTracker {
    pub fn new(cfg: Termination) -> Self {
        Self { cfg, updates: 0, streak: 0 }
    }

    /// Records one global update and its accuracy; true once the criterion holds.
    pub fn observe(&mut self, accuracy: Option<f64>) -> bool {
        self.updates += 1;
        if let (Some(target), Some(acc)) = (self.cfg.target_accuracy, accuracy) {
            self.streak = if acc >= target { self.streak + 1 } else { 0 };
        }
        let by_count = self.cfg.max_updates.is_some_and(|m| self.updates >= m);
        let by_accuracy = self.cfg.target_accuracy.is_some() && self.streak >= self.cfg.sustain.max(1);
        by_count || by_accuracy
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }
}

/// Message from a cluster member to the PS.
#[derive(Debug, Clone, PartialEq)]
pub enum PsMessage {
    Request,
    Aggregate { iteration: u64, payload: Payload<f64>, weight: f64 },
}

/// PS reply on the open connection.
#[derive(Debug, Clone, PartialEq)]
pub enum PsReply {
    /// Send this model; the caller confirms with `confirm_transfer` once it arrived.
    Transmit {
        iteration: u64,
        model: Arc<ModelParams<f64>>,
    },
    Ack {
        iteration: u64,
    },
    Terminate,
    /// Aggregate dropped.
    Reject(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsOutcome {
    pub reply: PsReply,
    /// The global model changed.
    pub updated: bool,
    /// Training is over.
    pub finished: bool,
}

impl PsOutcome {
    fn reply(reply: PsReply) -> Self {
        Self { reply, updated: false, finished: false }
    }
}

fn accumulate(w: &mut [f64], payload: &Payload<f64>, scale: f64) -> Result<()> {
    if payload.dim() != w.len() {
        return Err(Error::DimensionMismatch { expected: w.len(), got: payload.dim() });
    }
    match payload {
        Payload::Dense(v) => w.iter_mut().zip(v).for_each(|(a, b)| *a += scale * b),
        Payload::Sparse(s) => {
            if !s.is_well_formed() {
                return Err(Error::Malformed("sparse aggregate indices".into()));
            }
            for (&i, &v) in s.indices.iter().zip(&s.values) {
                w[i as usize] += scale * v;
            }
        }
    }
    Ok(())
}

/// Synchronous PS: one global iteration waits for every cluster.
#[derive(Debug, Clone)]
pub struct SyncPs {
    /// Current iteration, starting at 1.
    pub n: u64,
    /// `w^{n-1}`, the model handed out during iteration `n`.
    pub previous: Arc<ModelParams<f64>>,
    /// `w^n`, built up incrementally.
    pub current: ModelParams<f64>,
    pub transmitted: BTreeSet<usize>,
    pub received: BTreeSet<usize>,
    pub clusters: usize,
    pub total_weight: f64,
    pub server_lr: f64,
    pub finished: bool,
}

impl SyncPs {
    pub fn new(w0: ModelParams<f64>, clusters: usize, total_weight: f64, server_lr: f64) -> Result<Self> {
        if !(total_weight > 0.0) {
            return Err(Error::Config(format!("total sample count {total_weight} must be positive")));
        }
        Ok(Self {
            n: 1,
            previous: Arc::new(w0.clone()),
            current: w0,
            transmitted: BTreeSet::new(),
            received: BTreeSet::new(),
            clusters,
            total_weight,
            server_lr,
            finished: clusters == 0,
        })
    }

    /// Handles one message on a connection from `cluster`. `criterion` sees each
    /// completed global model and returns true to stop.
    pub fn handle(&mut self, cluster: usize, msg: PsMessage, criterion: &mut dyn FnMut(&ModelParams<f64>) -> bool) -> Result<PsOutcome> {
        if cluster >= self.clusters {
            return Err(Error::Protocol(format!("unknown cluster {cluster}")));
        }
        if self.finished {
            return Ok(PsOutcome { reply: PsReply::Terminate, updated: false, finished: true });
        }
        match msg {
            PsMessage::Request if !self.transmitted.contains(&cluster) => {
                Ok(PsOutcome::reply(PsReply::Transmit { iteration: self.n, model: Arc::clone(&self.previous) }))
            }
            PsMessage::Request => Ok(PsOutcome::reply(PsReply::Terminate)),
            PsMessage::Aggregate { iteration, payload, .. } => {
                if self.received.contains(&cluster) {
                    return Ok(PsOutcome::reply(PsReply::Reject(format!("cluster {cluster} already aggregated in iteration {}", self.n))));
                }
                if iteration != self.n {
                    return Ok(PsOutcome::reply(PsReply::Reject(format!("aggregate for iteration {iteration} during {}", self.n))));
                }
                if let Err(e) = accumulate(&mut self.current.values, &payload, self.server_lr / self.total_weight) {
                    return Ok(PsOutcome::reply(PsReply::Reject(e.to_string())));
                }
                self.transmitted.insert(cluster);
                self.received.insert(cluster);
                let mut out = PsOutcome::reply(PsReply::Ack { iteration });
                if self.received.len() == self.clusters {
                    out.updated = true;
                    if criterion(&self.current) {
                        self.finished = true;
                        out.finished = true;
                    } else {
                        self.n += 1;
                        self.transmitted.clear();
                        self.received.clear();
                        self.previous = Arc::new(self.current.clone());
                    }
                }
                Ok(out)
            }
        }
    }

    /// The model reached the cluster.
    pub fn confirm_transfer(&mut self, cluster: usize, iteration: u64) {
        if iteration == self.n {
            self.transmitted.insert(cluster);
        }
    }

    /// Latest complete global model.
    pub fn model(&self) -> &ModelParams<f64> {
        if self.finished {
            &self.current
        } else {
            &self.previous
        }
    }
}

/// Asynchronous PS: every aggregate is applied on arrival.
#[derive(Debug, Clone)]
pub struct AsyncPs {
    /// Number of incorporated aggregates.
    pub n: u64,
    pub model: Arc<ModelParams<f64>>,
    pub active: BTreeSet<usize>,
    pub blocked: BTreeSet<usize>,
    /// Model version each active cluster started from.
    pub base_version: Vec<u64>,
    pub clusters: usize,
    pub total_weight: f64,
    pub server_lr: f64,
    pub criterion_met: bool,
    pub finished: bool,
}

impl AsyncPs {
    pub fn new(w0: ModelParams<f64>, clusters: usize, total_weight: f64, server_lr: f64) -> Result<Self> {
        if !(total_weight > 0.0) {
            return Err(Error::Config(format!("total sample count {total_weight} must be positive")));
        }
        Ok(Self {
            n: 0,
            model: Arc::new(w0),
            active: BTreeSet::new(),
            blocked: BTreeSet::new(),
            base_version: vec![0; clusters],
            clusters,
            total_weight,
            server_lr,
            criterion_met: false,
            finished: clusters == 0,
        })
    }

    pub fn handle(&mut self, cluster: usize, msg: PsMessage, criterion: &mut dyn FnMut(&ModelParams<f64>) -> bool) -> Result<PsOutcome> {
        if cluster >= self.clusters {
            return Err(Error::Protocol(format!("unknown cluster {cluster}")));
        }
        if self.finished {
            return Ok(PsOutcome { reply: PsReply::Terminate, updated: false, finished: true });
        }
        match msg {
            PsMessage::Request => {
                if self.active.contains(&cluster) || self.blocked.contains(&cluster) {
                    Ok(PsOutcome::reply(PsReply::Terminate))
                } else {
                    Ok(PsOutcome::reply(PsReply::Transmit { iteration: self.n + 1, model: Arc::clone(&self.model) }))
                }
            }
            PsMessage::Aggregate { iteration, payload, .. } => {
                if !self.active.contains(&cluster) {
                    return Ok(PsOutcome::reply(PsReply::Reject(format!("cluster {cluster} is not active"))));
                }
                let mut next = (*self.model).clone();
                if let Err(e) = accumulate(&mut next.values, &payload, self.server_lr / self.total_weight) {
                    return Ok(PsOutcome::reply(PsReply::Reject(e.to_string())));
                }
                self.model = Arc::new(next);
                self.active.remove(&cluster);
                self.n += 1;
                let mut out = PsOutcome::reply(PsReply::Ack { iteration });
                out.updated = true;
                self.criterion_met = criterion(&self.model);
                if self.criterion_met {
                    self.blocked = (0..self.clusters).filter(|c| !self.active.contains(c)).collect();
                    if self.active.is_empty() {
                        self.finished = true;
                        out.finished = true;
                    }
                } else {
                    self.blocked.clear();
                }
                Ok(out)
            }
        }
    }

    pub fn confirm_transfer(&mut self, cluster: usize, iteration: u64) {
        if self.finished || self.blocked.contains(&cluster) {
            return;
        }
        self.active.insert(cluster);
        self.base_version[cluster] = iteration - 1;
    }

    /// Versions elapsed since `cluster` fetched its model.
    pub fn staleness(&self, cluster: usize) -> u64 {
        self.n - self.base_version[cluster]
    }
}

/// Planning horizon and upload stamp under a minimum update spacing `t_u`.
pub fn async_rate_limit(mut plan: SinkPlan, t_hat: f64, t_u: f64, t_now: f64) -> (f64, SinkPlan) {
    if t_u <= 0.0 {
        return (t_hat, plan);
    }
    plan.rate_limit_stamp = Some(t_now + t_u);
    (t_hat.max(t_u), plan)
}

/// Earliest upload start for an aggregate ready at `ready`: the stamp, unless
/// waiting for it would miss the planned window.
pub fn upload_release_time(ready: f64, stamp: Option<f64>, window: Window, upload_time: f64) -> f64 {
    match stamp {
        Some(s) if s > ready && s <= window.end - upload_time => s,
        _ => ready,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum FailureScheme {
    /// Keep the aggregate and upload at the sink's next contact.
    Wait,
    #[default]
    DetermineNewSink,
    PassToNeighbor {
        direction: RingDirection,
    },
}

/// Per-cluster knowledge a satellite needs to plan.
pub struct PlaneContext<'a> {
    pub oracle: &'a dyn ContactOracle,
    /// Cluster members in ring order.
    pub ring: &'a [SatelliteId],
    /// Estimated time from custody to a complete aggregate.
    pub t_hat: f64,
    /// PS upload duration assumed for planning.
    pub upload_time: f64,
    pub search_horizon: f64,
    /// Minimum spacing between uploads of this cluster; zero disables rate limiting.
    pub t_u: f64,
    pub scheme: FailureScheme,
    pub handoff: Handoff,
}

impl PlaneContext<'_> {
    fn fits_now(&self, pos: usize, t: f64) -> bool {
        self.oracle.next_window(self.ring[pos - 1], t, 0.0).is_some_and(|w| w.begin <= t && w.end - t >= self.upload_time)
    }
}

/// Inter-satellite message.
#[derive(Debug, Clone, PartialEq)]
pub enum IslMessage {
    Params {
        iteration: u64,
        origin: usize,
        plan: SinkPlan,
        model: Arc<ModelParams<f64>>,
    },
    Partial(PartialAggregate),
    /// Aggregate routed to a newly chosen sink.
    NewSink {
        target: usize,
        aggregate: PartialAggregate,
    },
    /// Aggregate relayed around the ring until someone can upload it.
    Pass {
        origin: usize,
        direction: RingDirection,
        aggregate: PartialAggregate,
    },
}

impl IslMessage {
    /// Bits on the wire; model elements use their own width, gradients `elem_bits`.
    pub fn wire_bits(&self, elem_bits: u32) -> u64 {
        match self {
            IslMessage::Params { model, .. } => model.wire_bits(),
            IslMessage::Partial(a) | IslMessage::NewSink { aggregate: a, .. } | IslMessage::Pass { aggregate: a, .. } => a.payload.wire_bits(elem_bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SatEvent {
    /// Custody: the PS transfer of iteration `iteration` completed.
    ModelFromPs {
        iteration: u64,
        model: Arc<ModelParams<f64>>,
    },
    Isl(IslMessage),
    /// The satellite may talk to the PS now.
    PsContact,
    LearningDone {
        iteration: u64,
        update: WeightedUpdate<f64>,
    },
    UploadAcked,
    /// Upload cut short or refused; keep the aggregate.
    UploadAborted,
    /// The PS declined a model request.
    RequestRejected,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SatAction {
    SendIsl {
        to: usize,
        msg: IslMessage,
    },
    StartLearning {
        iteration: u64,
        model: Arc<ModelParams<f64>>,
    },
    RequestModel,
    Upload {
        aggregate: PartialAggregate,
    },
    /// Deliver a `PsContact` no earlier than this time.
    WakeAt(f64),
    /// The sink missed its planned window.
    FailureDetected {
        iteration: u64,
    },
    Dropped(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Role {
    #[default]
    Idle,
    Relay,
    Sink,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeldAggregate {
    pub aggregate: PartialAggregate,
    pub release: f64,
}

/// One satellite's protocol state.
#[derive(Debug, Clone, PartialEq)]
pub struct SatProc {
    /// Ring position, 1-based.
    pub pos: usize,
    pub k_p: usize,
    /// Latest iteration whose parameters were processed.
    pub iteration: u64,
    pub role: Role,
    pub custodian: bool,
    pub learning: bool,
    pub requesting: bool,
    pub uploading: bool,
    pub plan: Option<SinkPlan>,
    pub holding: Option<HeldAggregate>,
    parent: Option<usize>,
    expected: usize,
    own: Option<PartialAggregate>,
    incoming: Vec<PartialAggregate>,
}

impl SatProc {
    pub fn new(pos: usize, k_p: usize) -> Self {
        Self {
            pos,
            k_p,
            iteration: 0,
            role: Role::Idle,
            custodian: false,
            learning: false,
            requesting: false,
            uploading: false,
            plan: None,
            holding: None,
            parent: None,
            expected: 0,
            own: None,
            incoming: Vec::new(),
        }
    }

    /// Nothing in flight; a model request makes sense.
    pub fn wants_model(&self) -> bool {
        self.role == Role::Idle && !self.learning && !self.requesting && self.holding.is_none() && self.own.is_none()
    }

    pub fn wants_ps(&self) -> bool {
        self.wants_model() || (self.holding.is_some() && !self.uploading)
    }

    pub fn step(&mut self, ctx: &PlaneContext<'_>, t: f64, event: SatEvent) -> Result<Vec<SatAction>> {
        let mut out = Vec::new();
        match event {
            SatEvent::ModelFromPs { iteration, model } => {
                self.requesting = false;
                if iteration <= self.iteration {
                    out.push(SatAction::Dropped(format!("model {iteration} already seen")));
                    return Ok(out);
                }
                let horizon = if ctx.t_u > 0.0 { ctx.t_hat.max(ctx.t_u) } else { ctx.t_hat };
                let plan = select_sink(ctx.oracle, ctx.ring, t, horizon, ctx.upload_time, ctx.search_horizon)?;
                let (_, plan) = async_rate_limit(plan, ctx.t_hat, ctx.t_u, t);
                self.custodian = true;
                self.on_params(iteration, self.pos, plan, model, &mut out)?;
            }
            SatEvent::Isl(IslMessage::Params { iteration, origin, plan, model }) => {
                if iteration <= self.iteration {
                    out.push(SatAction::Dropped(format!("duplicate parameters for iteration {iteration}")));
                    return Ok(out);
                }
                self.custodian = false;
                self.on_params(iteration, origin, plan, model, &mut out)?;
            }
            SatEvent::LearningDone { iteration, update } => {
                if iteration != self.iteration || !self.learning {
                    out.push(SatAction::Dropped(format!("learning result of iteration {iteration} is stale")));
                    return Ok(out);
                }
                self.learning = false;
                self.own = Some(PartialAggregate::own(self.pos, update, iteration));
                self.try_complete(ctx, t, &mut out)?;
            }
            SatEvent::Isl(IslMessage::Partial(p)) => {
                if p.iteration != self.iteration || self.role == Role::Idle {
                    out.push(SatAction::Dropped(format!("partial for iteration {} at {}", p.iteration, self.iteration)));
                    return Ok(out);
                }
                let mut seen: BTreeSet<usize> = self.own.iter().flat_map(|o| o.contributors.iter().copied()).collect();
                for q in &self.incoming {
                    seen.extend(q.contributors.iter().copied());
                }
                if let Some(dup) = p.contributors.iter().find(|c| seen.contains(c)) {
                    return Err(Error::Protocol(format!("slot {dup} contributed twice in iteration {}", p.iteration)));
                }
                self.incoming.push(p);
                self.try_complete(ctx, t, &mut out)?;
            }
            SatEvent::Isl(IslMessage::NewSink { target, aggregate }) => {
                if target == self.pos {
                    self.hold(ctx, t, aggregate, t, &mut out)?;
                } else {
                    let to = next_hop_toward(self.k_p, self.pos, target);
                    out.push(SatAction::SendIsl { to, msg: IslMessage::NewSink { target, aggregate } });
                }
            }
            SatEvent::Isl(IslMessage::Pass { origin, direction, aggregate }) => {
                if self.pos == origin || ctx.fits_now(self.pos, t) {
                    self.hold(ctx, t, aggregate, t, &mut out)?;
                } else {
                    let to = direction.step(self.k_p, self.pos);
                    out.push(SatAction::SendIsl { to, msg: IslMessage::Pass { origin, direction, aggregate } });
                }
            }
            SatEvent::PsContact => {
                if self.holding.is_some() {
                    self.try_upload(ctx, t, &mut out)?;
                } else if self.wants_model() && ctx.oracle.visible(ctx.ring[self.pos - 1], t) {
                    self.requesting = true;
                    out.push(SatAction::RequestModel);
                }
            }
            SatEvent::UploadAcked => {
                self.uploading = false;
                self.holding = None;
            }
            SatEvent::UploadAborted => {
                self.uploading = false;
                // never retry inside the same instant
                self.try_upload(ctx, t + crate::orbital::CONTACT_TOLERANCE, &mut out)?;
            }
            SatEvent::RequestRejected => self.requesting = false,
        }
        Ok(out)
    }

    fn on_params(&mut self, iteration: u64, origin: usize, plan: SinkPlan, model: Arc<ModelParams<f64>>, out: &mut Vec<SatAction>) -> Result<()> {
        if self.own.is_some() || !self.incoming.is_empty() || self.learning {
            out.push(SatAction::Dropped(format!("iteration {} abandoned for {iteration}", self.iteration)));
        }
        self.iteration = iteration;
        self.own = None;
        self.incoming.clear();
        for hop in flood_params(self.k_p, origin)?.transmissions.iter().filter(|h| h.from == self.pos) {
            let msg = IslMessage::Params { iteration, origin, plan, model: Arc::clone(&model) };
            out.push(SatAction::SendIsl { to: hop.to, msg });
        }
        let tree = build_aggregation_tree(self.k_p, plan.sink)?;
        self.parent = tree.parent(self.pos);
        self.expected = tree.children(self.pos).len();
        self.role = if plan.sink == self.pos { Role::Sink } else { Role::Relay };
        self.plan = Some(plan);
        self.learning = true;
        out.push(SatAction::StartLearning { iteration, model });
        Ok(())
    }

    fn try_complete(&mut self, ctx: &PlaneContext<'_>, t: f64, out: &mut Vec<SatAction>) -> Result<()> {
        if self.own.is_none() || self.incoming.len() < self.expected {
            return Ok(());
        }
        let own = self.own.take().expect("checked above");
        let agg = partial_aggregate(own, std::mem::take(&mut self.incoming))?;
        let role = std::mem::take(&mut self.role);
        match (role, self.parent) {
            (Role::Relay, Some(parent)) => out.push(SatAction::SendIsl { to: parent, msg: IslMessage::Partial(agg) }),
            (Role::Sink, _) => {
                let plan = self.plan.expect("sink has a plan");
                if t <= plan.window.end - ctx.upload_time {
                    let release = upload_release_time(t, plan.rate_limit_stamp, plan.window, ctx.upload_time);
                    self.hold(ctx, t, agg, release, out)?;
                } else {
                    out.push(SatAction::FailureDetected { iteration: agg.iteration });
                    self.recover(ctx, t, agg, out)?;
                }
            }
            (r, p) => return Err(Error::Protocol(format!("aggregate complete in role {r:?} with parent {p:?}"))),
        }
        Ok(())
    }

    fn recover(&mut self, ctx: &PlaneContext<'_>, t: f64, agg: PartialAggregate, out: &mut Vec<SatAction>) -> Result<()> {
        match ctx.scheme {
            FailureScheme::Wait => self.hold(ctx, t, agg, t, out),
            FailureScheme::DetermineNewSink => {
                let ns = determine_new_sink(ctx.oracle, ctx.ring, self.pos, t, &ctx.handoff)?;
                if ns.sink == self.pos {
                    self.hold(ctx, t, agg, t, out)
                } else {
                    let to = next_hop_toward(self.k_p, self.pos, ns.sink);
                    out.push(SatAction::SendIsl { to, msg: IslMessage::NewSink { target: ns.sink, aggregate: agg } });
                    Ok(())
                }
            }
            FailureScheme::PassToNeighbor { direction } => {
                if self.k_p == 1 || ctx.fits_now(self.pos, t) {
                    self.hold(ctx, t, agg, t, out)
                } else {
                    let to = direction.step(self.k_p, self.pos);
                    out.push(SatAction::SendIsl { to, msg: IslMessage::Pass { origin: self.pos, direction, aggregate: agg } });
                    Ok(())
                }
            }
        }
    }

    fn hold(&mut self, ctx: &PlaneContext<'_>, t: f64, aggregate: PartialAggregate, release: f64, out: &mut Vec<SatAction>) -> Result<()> {
        if let Some(h) = &self.holding {
            return Err(Error::Protocol(format!(
                "slot {} already holds the aggregate of iteration {} when {} arrives",
                self.pos, h.aggregate.iteration, aggregate.iteration
            )));
        }
        self.holding = Some(HeldAggregate { aggregate, release });
        self.try_upload(ctx, t, out)
    }

    fn try_upload(&mut self, ctx: &PlaneContext<'_>, t: f64, out: &mut Vec<SatAction>) -> Result<()> {
        let Some(held) = &self.holding else {
            return Ok(());
        };
        if self.uploading {
            return Ok(());
        }
        if t >= held.release && ctx.fits_now(self.pos, t) {
            self.uploading = true;
            out.push(SatAction::Upload { aggregate: held.aggregate.clone() });
            return Ok(());
        }
        let from = t.max(held.release);
        let w = ctx
            .oracle
            .next_fitting_window(ctx.ring[self.pos - 1], from, ctx.search_horizon, ctx.upload_time)
            .ok_or_else(|| Error::Planning(format!("{} has no PS window after {from}", ctx.ring[self.pos - 1])))?;
        out.push(SatAction::WakeAt(w.begin.max(from)));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contacts::ContactPlan;
    use crate::sparsify::SparseGradient;
    use approx::assert_relative_eq;

    fn never(_: &ModelParams<f64>) -> bool {
        false
    }

    fn dense(v: Vec<f64>) -> Payload<f64> {
        Payload::Dense(v)
    }

    fn agg(n: u64, v: Vec<f64>, w: f64) -> PsMessage {
        PsMessage::Aggregate { iteration: n, payload: dense(v), weight: w }
    }

    #[test]
    fn sync_ps_one_step_after_all_clusters() {
        let mut ps = SyncPs::new(ModelParams { values: vec![1.0, 2.0], elem_bits: 32 }, 5, 10.0, 1.0).unwrap();
        for c in 0..5 {
            let out = ps.handle(c, PsMessage::Request, &mut never).unwrap();
            assert!(matches!(out.reply, PsReply::Transmit { iteration: 1, .. }));
            ps.confirm_transfer(c, 1);
        }
        assert_eq!(ps.handle(2, PsMessage::Request, &mut never).unwrap().reply, PsReply::Terminate);
        for c in 0..5 {
            let out = ps.handle(c, agg(1, vec![2.0, -1.0], 2.0), &mut never).unwrap();
            assert_eq!(out.reply, PsReply::Ack { iteration: 1 });
            assert_eq!(out.updated, c == 4);
        }
        assert_eq!(ps.n, 2);
        // w + 1/10 * 5 * (2, -1)
        assert_relative_eq!(ps.previous.values[0], 2.0, max_relative = 1e-12);
        assert_relative_eq!(ps.previous.values[1], 1.5, max_relative = 1e-12);
        assert!(ps.transmitted.is_empty() && ps.received.is_empty());
    }

    #[test]
    fn sync_ps_rejects_duplicates_and_stale() {
        let mut ps = SyncPs::new(ModelParams::zeros(1), 2, 1.0, 1.0).unwrap();
        ps.handle(0, agg(1, vec![1.0], 1.0), &mut never).unwrap();
        assert!(matches!(ps.handle(0, agg(1, vec![1.0], 1.0), &mut never).unwrap().reply, PsReply::Reject(_)));
        assert!(matches!(ps.handle(1, agg(3, vec![1.0], 1.0), &mut never).unwrap().reply, PsReply::Reject(_)));
        assert!(matches!(ps.handle(1, agg(1, vec![1.0, 2.0], 1.0), &mut never).unwrap().reply, PsReply::Reject(_)));
        assert_eq!(ps.current.values, vec![1.0]);
        assert!(ps.handle(7, PsMessage::Request, &mut never).is_err());
    }

    #[test]
    fn sync_ps_single_cluster_is_fedavg() {
        let mut ps = SyncPs::new(ModelParams::zeros(2), 1, 4.0, 1.0).unwrap();
        let mut w = vec![0.0, 0.0];
        for n in 1..=3 {
            let g = vec![n as f64, -2.0];
            ps.handle(0, PsMessage::Request, &mut never).unwrap();
            ps.confirm_transfer(0, n);
            ps.handle(0, agg(n, g.clone(), 4.0), &mut never).unwrap();
            w.iter_mut().zip(&g).for_each(|(a, b)| *a += b / 4.0);
            assert_eq!(ps.previous.values, w);
        }
        let mut stop = |_: &ModelParams<f64>| true;
        ps.handle(0, agg(4, vec![0.0, 0.0], 1.0), &mut stop).unwrap();
        assert!(ps.finished);
        assert_eq!(ps.handle(0, PsMessage::Request, &mut never).unwrap().reply, PsReply::Terminate);
    }

    #[test]
    fn sync_ps_sparse_and_order_invariant() {
        let s = |i: Vec<u32>, v: Vec<f64>| Payload::Sparse(SparseGradient { n_d: 4, indices: i, values: v });
        let parts = [s(vec![0, 3], vec![0.1, 0.7]), dense(vec![0.3, 0.2, 0.1, 0.0]), s(vec![2], vec![1e-3])];
        let run = |order: [usize; 3]| {
            let mut ps = SyncPs::new(ModelParams::zeros(4), 3, 3.0, 1.0).unwrap();
            for c in order {
                ps.handle(c, PsMessage::Aggregate { iteration: 1, payload: parts[c].clone(), weight: 1.0 }, &mut never).unwrap();
            }
            ps.previous.values.clone()
        };
        let a = run([0, 1, 2]);
        let b = run([2, 0, 1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-12));
        }
        let bad = Payload::Sparse(SparseGradient { n_d: 4, indices: vec![3, 1], values: vec![1.0, 1.0] });
        let mut ps = SyncPs::new(ModelParams::zeros(4), 1, 1.0, 1.0).unwrap();
        let out = ps.handle(0, PsMessage::Aggregate { iteration: 1, payload: bad, weight: 1.0 }, &mut never).unwrap();
        assert!(matches!(out.reply, PsReply::Reject(_)));
    }

    #[test]
    fn async_ps_interleaves_without_barrier() {
        let mut ps = AsyncPs::new(ModelParams::zeros(1), 2, 1.0, 1.0).unwrap();
        for c in 0..2 {
            ps.handle(c, PsMessage::Request, &mut never).unwrap();
            ps.confirm_transfer(c, 1);
        }
        assert_eq!(ps.handle(0, PsMessage::Request, &mut never).unwrap().reply, PsReply::Terminate);
        ps.handle(0, agg(1, vec![1.0], 1.0), &mut never).unwrap();
        match ps.handle(0, PsMessage::Request, &mut never).unwrap().reply {
            PsReply::Transmit { iteration, model } => {
                assert_eq!(iteration, 2);
                assert_eq!(model.values, vec![1.0]);
            }
            r => panic!("{r:?}"),
        }
        ps.confirm_transfer(0, 2);
        ps.handle(1, agg(1, vec![2.0], 1.0), &mut never).unwrap();
        assert_eq!(ps.model.values, vec![3.0]);
        assert_eq!(ps.staleness(0), 1);
        assert!(matches!(ps.handle(1, agg(2, vec![1.0], 1.0), &mut never).unwrap().reply, PsReply::Reject(_)));
    }

    #[test]
    fn async_ps_blocks_then_unblocks() {
        let mut ps = AsyncPs::new(ModelParams::zeros(1), 3, 1.0, 1.0).unwrap();
        for c in 0..2 {
            ps.handle(c, PsMessage::Request, &mut never).unwrap();
            ps.confirm_transfer(c, 1);
        }
        let mut met = |_: &ModelParams<f64>| true;
        let out = ps.handle(0, agg(1, vec![1.0], 1.0), &mut met).unwrap();
        assert!(!out.finished);
        assert_eq!(ps.blocked, BTreeSet::from([0, 2]));
        assert_eq!(ps.handle(2, PsMessage::Request, &mut never).unwrap().reply, PsReply::Terminate);
        // the remaining active cluster spoils the criterion
        ps.handle(1, agg(1, vec![-5.0], 1.0), &mut never).unwrap();
        assert!(ps.blocked.is_empty());
        assert!(matches!(ps.handle(2, PsMessage::Request, &mut never).unwrap().reply, PsReply::Transmit { .. }));
        ps.confirm_transfer(2, 3);
        let out = ps.handle(2, agg(3, vec![0.0], 1.0), &mut met).unwrap();
        assert!(out.finished);
    }

    #[test]
    fn termination_tracker() {
        let mut t = TerminationTracker::new(Termination { max_updates: Some(10), target_accuracy: Some(0.9), sustain: 3 });
        assert!(!t.observe(Some(0.95)));
        assert!(!t.observe(Some(0.95)));
        assert!(!t.observe(Some(0.5)));
        assert!(!t.observe(Some(0.91)));
        assert!(!t.observe(Some(0.92)));
        assert!(t.observe(Some(0.93)));
        let mut c = TerminationTracker::new(Termination { max_updates: Some(2), ..Termination::default() });
        assert!(!c.observe(None));
        assert!(c.observe(None));
    }

    #[test]
    fn rate_limit_rules() {
        let plan = SinkPlan { sink: 1, decided_at: 0.0, planned_epoch: 60.0, window: Window::new(50.0, 500.0), rate_limit_stamp: None };
        assert_eq!(async_rate_limit(plan, 60.0, 0.0, 0.0), (60.0, plan));
        let (h, p) = async_rate_limit(plan, 60.0, 147.0 * 60.0, 100.0);
        assert_eq!(h, 8820.0);
        assert_eq!(p.rate_limit_stamp, Some(8920.0));
        assert_eq!(upload_release_time(100.0, Some(50.0), plan.window, 10.0), 100.0);
        assert_eq!(upload_release_time(100.0, Some(200.0), plan.window, 10.0), 200.0);
        assert_eq!(upload_release_time(100.0, Some(495.0), plan.window, 10.0), 100.0);
        assert_eq!(upload_release_time(100.0, None, plan.window, 10.0), 100.0);
    }

    fn ring(k: usize) -> Vec<SatelliteId> {
        (1..=k).map(|s| SatelliteId::new(1, s)).collect()
    }

    fn ctx<'a>(oracle: &'a ContactPlan, ring: &'a [SatelliteId], scheme: FailureScheme) -> PlaneContext<'a> {
        PlaneContext {
            oracle,
            ring,
            t_hat: 100.0,
            upload_time: 1.0,
            search_horizon: 1e6,
            t_u: 0.0,
            scheme,
            handoff: Handoff { aggregate_bits: 1.0, rho: 1.0, d_m: 0.0, t_g: 0.0, upload_time: 1.0, search_horizon: 1e6 },
        }
    }

    fn update(v: f64) -> WeightedUpdate<f64> {
        WeightedUpdate { payload: dense(vec![v]), weight: 1.0 }
    }

    /// Delivers ISL messages instantly, in FIFO order, and counts them.
    fn drive(sats: &mut [SatProc], c: &PlaneContext<'_>, t: f64, first: usize, ev: SatEvent, log: &mut Vec<(usize, SatAction)>) {
        let mut queue = vec![(first, ev)];
        while !queue.is_empty() {
            let (who, ev) = queue.remove(0);
            for a in sats[who - 1].step(c, t, ev).unwrap() {
                if let SatAction::SendIsl { to, msg } = &a {
                    queue.push((*to, SatEvent::Isl(msg.clone())));
                }
                log.push((who, a));
            }
        }
    }

    #[test]
    fn three_satellite_iteration_trace() {
        let plan = ContactPlan::from_windows(1, 3, 1e6, vec![vec![Window::new(0.0, 1e6)]; 3]).unwrap();
        let r = ring(3);
        let c = ctx(&plan, &r, FailureScheme::DetermineNewSink);
        let mut sats: Vec<SatProc> = (1..=3).map(|p| SatProc::new(p, 3)).collect();
        let mut log = Vec::new();
        let model = Arc::new(ModelParams::zeros(1));
        drive(&mut sats, &c, 0.0, 1, SatEvent::PsContact, &mut log);
        assert_eq!(log[0].1, SatAction::RequestModel);
        drive(&mut sats, &c, 1.0, 1, SatEvent::ModelFromPs { iteration: 1, model }, &mut log);
        let params = log.iter().filter(|(_, a)| matches!(a, SatAction::SendIsl { msg: IslMessage::Params { .. }, .. })).count();
        assert_eq!(params, 2);
        let sink = sats[0].plan.unwrap().sink;
        assert_eq!(sink, 1);
        for s in [2, 3, 1] {
            drive(&mut sats, &c, 50.0, s, SatEvent::LearningDone { iteration: 1, update: update(s as f64) }, &mut log);
        }
        let partials = log.iter().filter(|(_, a)| matches!(a, SatAction::SendIsl { msg: IslMessage::Partial(_), .. })).count();
        assert_eq!(partials, 2);
        let uploads: Vec<_> = log
            .iter()
            .filter_map(|(w, a)| match a {
                SatAction::Upload { aggregate } => Some((*w, aggregate.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(uploads.len(), 1);
        assert_eq!(uploads[0].0, 1);
        assert_eq!(uploads[0].1.contributors, BTreeSet::from([1, 2, 3]));
        assert_eq!(uploads[0].1.payload, dense(vec![6.0]));
        drive(&mut sats, &c, 51.0, 1, SatEvent::UploadAcked, &mut log);
        assert!(sats.iter().all(SatProc::wants_model));
    }

    #[test]
    fn leaf_relay_forwards_immediately_and_stale_partials_drop() {
        let plan = ContactPlan::from_windows(1, 3, 1e6, vec![vec![Window::new(0.0, 1e6)]; 3]).unwrap();
        let r = ring(3);
        let c = ctx(&plan, &r, FailureScheme::DetermineNewSink);
        let mut relay = SatProc::new(2, 3);
        let sp = SinkPlan { sink: 1, decided_at: 0.0, planned_epoch: 100.0, window: Window::new(0.0, 1e6), rate_limit_stamp: None };
        let msg = IslMessage::Params { iteration: 4, origin: 1, plan: sp, model: Arc::new(ModelParams::zeros(1)) };
        relay.step(&c, 0.0, SatEvent::Isl(msg.clone())).unwrap();
        let dup = relay.step(&c, 0.0, SatEvent::Isl(msg)).unwrap();
        assert!(matches!(dup[..], [SatAction::Dropped(_)]));
        let acts = relay.step(&c, 10.0, SatEvent::LearningDone { iteration: 4, update: update(1.0) }).unwrap();
        assert!(matches!(&acts[..], [SatAction::SendIsl { to: 1, msg: IslMessage::Partial(_) }]));
        let stale = PartialAggregate::own(3, update(1.0), 3);
        assert!(matches!(relay.step(&c, 11.0, SatEvent::Isl(IslMessage::Partial(stale))).unwrap()[..], [SatAction::Dropped(_)]));
    }

    #[test]
    fn missed_window_goes_to_new_sink() {
        // the planned sink's window closes before the aggregate is ready; slot 3 sees the PS later
        let plan = ContactPlan::from_windows(1, 3, 1e6, vec![vec![Window::new(0.0, 40.0)], vec![], vec![Window::new(200.0, 400.0)]]).unwrap();
        let r = ring(3);
        let c = ctx(&plan, &r, FailureScheme::DetermineNewSink);
        let mut sats: Vec<SatProc> = (1..=3).map(|p| SatProc::new(p, 3)).collect();
        let mut log = Vec::new();
        let mut c2 = ctx(&plan, &r, FailureScheme::DetermineNewSink);
        c2.t_hat = 10.0;
        drive(&mut sats, &c2, 0.0, 1, SatEvent::ModelFromPs { iteration: 1, model: Arc::new(ModelParams::zeros(1)) }, &mut log);
        assert_eq!(sats[0].plan.unwrap().sink, 1);
        for s in [2, 3, 1] {
            drive(&mut sats, &c, 60.0, s, SatEvent::LearningDone { iteration: 1, update: update(1.0) }, &mut log);
        }
        assert!(log.iter().any(|(w, a)| *w == 1 && matches!(a, SatAction::FailureDetected { iteration: 1 })));
        let held = sats[2].holding.as_ref().expect("slot 3 holds the aggregate");
        assert_eq!(held.aggregate.contributors, BTreeSet::from([1, 2, 3]));
        assert!(log.iter().any(|(w, a)| *w == 3 && *a == SatAction::WakeAt(200.0)));
        let acts = sats[2].step(&c, 200.0, SatEvent::PsContact).unwrap();
        assert!(matches!(acts[..], [SatAction::Upload { .. }]));
    }

    #[test]
    fn pass_to_neighbor_relays_until_visible() {
        let plan = ContactPlan::from_windows(1, 4, 1e6, vec![vec![Window::new(0.0, 40.0)], vec![], vec![Window::new(50.0, 1e6)], vec![]]).unwrap();
        let r = ring(4);
        let mut c = ctx(&plan, &r, FailureScheme::PassToNeighbor { direction: RingDirection::Ascending });
        c.t_hat = 10.0;
        let mut sats: Vec<SatProc> = (1..=4).map(|p| SatProc::new(p, 4)).collect();
        let mut log = Vec::new();
        drive(&mut sats, &c, 0.0, 1, SatEvent::ModelFromPs { iteration: 1, model: Arc::new(ModelParams::zeros(1)) }, &mut log);
        for s in [2, 3, 4, 1] {
            drive(&mut sats, &c, 60.0, s, SatEvent::LearningDone { iteration: 1, update: update(1.0) }, &mut log);
        }
        let passes: Vec<usize> = log
            .iter()
            .filter_map(|(_, a)| match a {
                SatAction::SendIsl { to, msg: IslMessage::Pass { .. } } => Some(*to),
                _ => None,
            })
            .collect();
        assert_eq!(passes, vec![2, 3]);
        assert!(log.iter().any(|(w, a)| *w == 3 && matches!(a, SatAction::Upload { .. })));
    }

    #[test]
    fn rate_limited_sink_withholds_upload() {
        let plan = ContactPlan::from_windows(1, 1, 1e6, vec![vec![Window::new(0.0, 1e6)]]).unwrap();
        let r = ring(1);
        let mut c = ctx(&plan, &r, FailureScheme::Wait);
        c.t_u = 500.0;
        let mut s = SatProc::new(1, 1);
        s.step(&c, 0.0, SatEvent::ModelFromPs { iteration: 1, model: Arc::new(ModelParams::zeros(1)) }).unwrap();
        assert_eq!(s.plan.unwrap().rate_limit_stamp, Some(500.0));
        let acts = s.step(&c, 100.0, SatEvent::LearningDone { iteration: 1, update: update(1.0) }).unwrap();
        assert_eq!(acts, vec![SatAction::WakeAt(500.0)]);
        assert!(s.step(&c, 500.0, SatEvent::PsContact).unwrap().iter().any(|a| matches!(a, SatAction::Upload { .. })));
        // still in contact, so the retry starts right away
        let retry = s.step(&c, 501.0, SatEvent::UploadAborted).unwrap();
        assert!(matches!(retry[..], [SatAction::Upload { .. }]));
    }

    #[test]
    fn cluster_sets() {
        let cfg = ConstellationConfig::walker(crate::orbital::WalkerPattern::Delta, 60.0, 2000.0, 6, 2, 1);
        let planes = ClusterSet::per_plane(&cfg);
        assert_eq!((planes.len(), planes.workers()), (2, 6));
        assert_eq!(planes.locate(SatelliteId::new(2, 3)), Some((1, 3)));
        let singles = ClusterSet::per_satellite(&cfg);
        assert_eq!((singles.len(), singles.workers()), (6, 6));
        assert!(ClusterSet::from_clusters(vec![vec![SatelliteId::new(1, 1)], vec![SatelliteId::new(1, 1)]]).is_err());
    }
}
