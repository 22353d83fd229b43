//! Intra-plane routing: aggregation trees, parameter flooding, partial
//! aggregation, predictive sink selection and sink-failure recovery.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::contacts::{ContactOracle, Window};
use crate::error::{Error, Result};
use crate::flcore::WeightedUpdate;
use crate::orbital::{SatelliteId, SPEED_OF_LIGHT};
use crate::sparsify::{sparse_routing_size, Payload};

/// Hops between two slots of a `k_p` ring.
pub fn ring_distance(k_p: usize, a: usize, b: usize) -> usize {
    let fwd = (b + k_p - a) % k_p;
    fwd.min(k_p - fwd)
}

fn succ(k_p: usize, slot: usize) -> usize {
    slot % k_p + 1
}

fn pred(k_p: usize, slot: usize) -> usize {
    (slot + k_p - 2) % k_p + 1
}

/// Shortest-path in-tree of a ring, rooted at the sink. Slots are 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationTree {
    pub k_p: usize,
    pub sink: usize,
    parent: Vec<Option<usize>>,
}

impl AggregationTree {
    pub fn parent(&self, slot: usize) -> Option<usize> {
        self.parent[slot - 1]
    }

    pub fn children(&self, slot: usize) -> Vec<usize> {
        (1..=self.k_p).filter(|&s| self.parent(s) == Some(slot)).collect()
    }

    /// Hops from `slot` to the sink along parent pointers.
    pub fn depth(&self, slot: usize) -> usize {
        let mut d = 0;
        let mut s = slot;
        while let Some(p) = self.parent(s) {
            s = p;
            d += 1;
            assert!(d <= self.k_p, "cycle in aggregation tree");
        }
        d
    }
}

/// Ring in-tree toward `sink_slot`; the even-ring antipode hangs off its successor.
pub fn build_aggregation_tree(k_p: usize, sink_slot: usize) -> Result<AggregationTree> {
    if k_p == 0 || sink_slot == 0 || sink_slot > k_p {
        return Err(Error::Domain(format!("sink slot {sink_slot} invalid for a ring of {k_p}")));
    }
    let parent = (1..=k_p)
        .map(|i| {
            if i == sink_slot {
                return None;
            }
            let fwd = (sink_slot + k_p - i) % k_p;
            let back = k_p - fwd;
            Some(if fwd <= back { succ(k_p, i) } else { pred(k_p, i) })
        })
        .collect();
    Ok(AggregationTree { k_p, sink: sink_slot, parent })
}

/// One ISL transmission of the flooding phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FloodHop {
    pub from: usize,
    pub to: usize,
    /// Sequential hop index, starting at 1.
    pub hop: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FloodSchedule {
    pub transmissions: Vec<FloodHop>,
    /// Hops after which each slot (index `slot - 1`) first holds the parameters.
    pub hops_to: Vec<usize>,
}

/// Bidirectional flood from `origin`. A satellite forwards to the neighbour
/// away from the sender unless that neighbour is no farther from the origin;
/// on even rings both sides reach the antipode, which drops the second copy.
pub fn flood_params(k_p: usize, origin: usize) -> Result<FloodSchedule> {
    if origin == 0 || origin > k_p {
        return Err(Error::Domain(format!("origin slot {origin} invalid for a ring of {k_p}")));
    }
    let hops_to: Vec<usize> = (1..=k_p).map(|s| ring_distance(k_p, origin, s)).collect();
    let mut transmissions = Vec::new();
    if k_p == 1 {
        return Ok(FloodSchedule { transmissions, hops_to });
    }
    for step in [succ as fn(usize, usize) -> usize, pred] {
        let mut from = origin;
        let mut hop = 1;
        loop {
            let to = step(k_p, from);
            if to == origin || hops_to[to - 1] < hop {
                break;
            }
            transmissions.push(FloodHop { from, to, hop });
            if (k_p.is_multiple_of(2) && hops_to[to - 1] == k_p / 2) || hops_to[step(k_p, to) - 1] <= hop {
                break;
            }
            from = to;
            hop += 1;
        }
    }
    transmissions.sort_by_key(|t| (t.hop, t.from));
    Ok(FloodSchedule { transmissions, hops_to })
}

/// Sum of weighted gradients from a set of plane members.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAggregate {
    pub payload: Payload<f64>,
    pub weight: f64,
    pub contributors: BTreeSet<usize>,
    pub iteration: u64,
}

impl PartialAggregate {
    pub fn own(slot: usize, update: WeightedUpdate<f64>, iteration: u64) -> Self {
        Self { payload: update.payload, weight: update.weight, contributors: BTreeSet::from([slot]), iteration }
    }
}

/// Own contribution plus every incoming partial aggregate.
pub fn partial_aggregate(own: PartialAggregate, incoming: Vec<PartialAggregate>) -> Result<PartialAggregate> {
    let mut acc = own;
    for inc in incoming {
        if inc.iteration != acc.iteration {
            return Err(Error::Protocol(format!("partial for iteration {} merged into {}", inc.iteration, acc.iteration)));
        }
        if let Some(dup) = inc.contributors.intersection(&acc.contributors).next() {
            return Err(Error::Protocol(format!("slot {dup} contributed twice")));
        }
        acc.payload = acc.payload.add(&inc.payload)?;
        acc.weight += inc.weight;
        acc.contributors.extend(inc.contributors);
    }
    Ok(acc)
}

/// How gradient size enters the aggregation-time estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GradientSize {
    /// Every hop carries this many bits.
    Fixed(f64),
    /// Sparse incremental aggregation of Top-q vectors.
    Sparse { n_d: usize, elem_bits: u32, q: f64 },
}

impl GradientSize {
    /// Bits carried along a `ceil(k_p / 2)`-hop chain.
    pub fn chain_bits(&self, k_p: usize) -> f64 {
        match *self {
            GradientSize::Fixed(b) => k_p.div_ceil(2) as f64 * b,
            GradientSize::Sparse { n_d, elem_bits, q } => sparse_routing_size(n_d, elem_bits, q, k_p),
        }
    }
}

/// Worst-case time from custody to a complete plane aggregate:
/// `t_l + ceil(K/2) (S(w) + S(g)) / rho + ceil(K/2) 2 d / c`.
pub fn estimate_aggregation_time(t_l: f64, k_p: usize, param_bits: f64, gradient: GradientSize, rho: f64, d_m: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InfeasibleLink(format!("ISL rate {rho}")));
    }
    let h = k_p.div_ceil(2) as f64;
    Ok(t_l + (h * param_bits + gradient.chain_bits(k_p)) / rho + h * 2.0 * d_m / SPEED_OF_LIGHT)
}

/// Sink decision carried with the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkPlan {
    /// Ring position (1-based) of the sink.
    pub sink: usize,
    /// Time the decision was taken.
    pub decided_at: f64,
    /// Expected completion of in-plane aggregation.
    pub planned_epoch: f64,
    /// PS window the sink is expected to use.
    pub window: Window,
    /// Earliest upload time under async rate limiting.
    pub rate_limit_stamp: Option<f64>,
}

/// Picks the sink among `ring` (members in ring order) given the estimated
/// aggregation time `t_hat`.
///
/// Among satellites that see the PS at `t_now + t_hat` and can still carry the
/// upload in the rest of their window, the longest remaining window wins;
/// otherwise the first satellite whose next window fits the upload.
pub fn select_sink(oracle: &dyn ContactOracle, ring: &[SatelliteId], t_now: f64, t_hat: f64, upload_time: f64, search_horizon: f64) -> Result<SinkPlan> {
    let epoch = t_now + t_hat;
    let mut best_visible: Option<(usize, Window)> = None;
    let mut best_next: Option<(usize, Window)> = None;
    for (i, &id) in ring.iter().enumerate() {
        let Some(w) = oracle.next_fitting_window(id, epoch, search_horizon, upload_time) else {
            continue;
        };
        if w.begin <= epoch {
            if best_visible.is_none_or(|(_, b)| w.end > b.end) {
                best_visible = Some((i + 1, w));
            }
        } else if best_next.is_none_or(|(_, b)| w.begin < b.begin) {
            best_next = Some((i + 1, w));
        }
    }
    let (sink, window) = best_visible
        .or(best_next)
        .ok_or_else(|| Error::Planning(format!("no member of {:?} contacts the PS within {search_horizon} s of {epoch}", ring.first())))?;
    Ok(SinkPlan { sink, decided_at: t_now, planned_epoch: epoch, window, rate_limit_stamp: None })
}

/// `t_0 + h (S / rho + d / c) + t_g`: when the aggregate could reach a satellite `h` hops away.
pub fn failure_time_estimate(hops: usize, aggregate_bits: f64, rho: f64, d_m: f64, t0: f64, t_g: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InfeasibleLink(format!("ISL rate {rho}")));
    }
    Ok(t0 + hops as f64 * (aggregate_bits / rho + d_m / SPEED_OF_LIGHT) + t_g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewSink {
    /// Ring position of the new sink.
    pub sink: usize,
    pub hops: usize,
    /// Earliest time the new sink can start the upload.
    pub delivery: f64,
    pub window: Window,
}

/// Failure parameters shared by the recovery schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Handoff {
    pub aggregate_bits: f64,
    pub rho: f64,
    pub d_m: f64,
    pub t_g: f64,
    pub upload_time: f64,
    pub search_horizon: f64,
}

/// Chooses the plane member whose earliest PS contact after the aggregate
/// could reach it is soonest; ties go to fewer hops, then the lower slot.
pub fn determine_new_sink(oracle: &dyn ContactOracle, ring: &[SatelliteId], current_sink: usize, t0: f64, h: &Handoff) -> Result<NewSink> {
    let k_p = ring.len();
    let mut best: Option<NewSink> = None;
    for (i, &id) in ring.iter().enumerate() {
        let slot = i + 1;
        let hops = ring_distance(k_p, current_sink, slot);
        let reach = failure_time_estimate(hops, h.aggregate_bits, h.rho, h.d_m, t0, h.t_g)?;
        let Some(w) = oracle.next_fitting_window(id, reach, h.search_horizon, h.upload_time) else {
            continue;
        };
        let cand = NewSink { sink: slot, hops, delivery: w.begin.max(reach), window: w };
        let better = match best {
            None => true,
            Some(b) => (cand.delivery, cand.hops, slot) < (b.delivery, b.hops, b.sink),
        };
        if better {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| Error::Planning(format!("no member of {:?} reaches the PS within {} s", ring.first(), h.search_horizon)))
}

/// Next slot on the shortest path from `from` toward `to` (successor on ties).
pub fn next_hop_toward(k_p: usize, from: usize, to: usize) -> usize {
    let fwd = (to + k_p - from) % k_p;
    if fwd <= k_p - fwd {
        succ(k_p, from)
    } else {
        pred(k_p, from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingDirection {
    /// Toward higher slots, i.e. trailing satellites.
    Ascending,
    /// Toward lower slots, i.e. leading satellites.
    #[default]
    Descending,
}

impl RingDirection {
    pub fn step(self, k_p: usize, slot: usize) -> usize {
        match self {
            RingDirection::Ascending => succ(k_p, slot),
            RingDirection::Descending => pred(k_p, slot),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassTrace {
    /// Holders in order, starting with the failed sink.
    pub holders: Vec<usize>,
    pub delivery: f64,
}

/// Relays the aggregate around the ring in `direction` until a holder sees
/// the PS with enough window left; after a full loop it waits at the origin.
#[allow(clippy::too_many_arguments)]
pub fn pass_to_neighbor(
    oracle: &dyn ContactOracle,
    ring: &[SatelliteId],
    current_sink: usize,
    direction: RingDirection,
    t0: f64,
    upload_time: f64,
    search_horizon: f64,
    mut hop_time: impl FnMut() -> f64,
) -> Result<PassTrace> {
    let k_p = ring.len();
    let fits = |slot: usize, t: f64| oracle.next_window(ring[slot - 1], t, 0.0).is_some_and(|w| w.begin <= t && w.end - t >= upload_time);
    let mut holders = vec![current_sink];
    let mut t = t0;
    let mut slot = current_sink;
    for _ in 0..k_p {
        if fits(slot, t) {
            return Ok(PassTrace { holders, delivery: t });
        }
        if k_p == 1 {
            break;
        }
        slot = direction.step(k_p, slot);
        t += hop_time();
        holders.push(slot);
    }
    // back at the origin: wait for its next usable window
    let w = oracle
        .next_fitting_window(ring[slot - 1], t, search_horizon, upload_time)
        .ok_or_else(|| Error::Planning(format!("{} never reaches the PS", ring[slot - 1])))?;
    Ok(PassTrace { holders, delivery: w.begin.max(t) })
}
