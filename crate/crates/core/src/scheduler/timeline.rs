//! Per-node step functions of processors in use over `[now, +inf)`.

use std::collections::BTreeMap;

use crate::model::{eval_property, JobId, Node, NodeAllocation, NodeHealth, PropertyExpr, Time};
use crate::store::Occupation;

/// Processors held on one node over `[start, end)` on behalf of `owner`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interval {
    pub start: Time,
    pub end: Time,
    pub procs: u32,
    pub owner: JobId,
}

#[derive(Debug, Clone)]
struct NodeProfile {
    node: Node,
    /// Net change of processors in use at each instant; zero entries removed.
    deltas: BTreeMap<Time, i64>,
    intervals: Vec<Interval>,
}

impl NodeProfile {
    fn add(&mut self, iv: Interval) {
        let p = i64::from(iv.procs);
        *self.deltas.entry(iv.start).or_insert(0) += p;
        *self.deltas.entry(iv.end).or_insert(0) -= p;
        self.deltas.retain(|_, d| *d != 0);
        self.intervals.push(iv);
    }

    fn remove_owner(&mut self, owner: JobId) {
        let (gone, kept): (Vec<_>, Vec<_>) = self.intervals.drain(..).partition(|iv| iv.owner == owner);
        self.intervals = kept;
        for iv in gone {
            let p = i64::from(iv.procs);
            *self.deltas.entry(iv.start).or_insert(0) -= p;
            *self.deltas.entry(iv.end).or_insert(0) += p;
        }
        self.deltas.retain(|_, d| *d != 0);
    }

    fn used_at(&self, t: Time) -> i64 {
        self.deltas.range(..=t).map(|(_, d)| d).sum()
    }

    /// Earliest `s >= from` such that `procs` more processors fit over
    /// `[s, s + duration)`. None when `procs` exceeds the capacity.
    fn earliest_fit(&self, procs: u32, duration: Time, from: Time) -> Option<Time> {
        let limit = i64::from(self.node.capacity) - i64::from(procs);
        if limit < 0 {
            return None;
        }
        let mut s = from;
        let mut used = 0i64;
        let mut points = self.deltas.iter().peekable();
        // Level in force before the first breakpoint after `from` counts too.
        while let Some((&t, &d)) = points.peek() {
            if t > s {
                break;
            }
            used += d;
            points.next();
        }
        // `used` is the level on [prev breakpoint, next breakpoint) containing s.
        loop {
            let next = points.peek().map(|(&t, _)| t);
            if used > limit {
                match next {
                    Some(t) => s = t,
                    // Intervals are finite, so the final level is zero.
                    None => unreachable!("open-ended occupation"),
                }
            } else if next.is_none_or(|t| t >= s + duration) {
                return Some(s);
            }
            match points.next() {
                Some((_, &d)) => used += d,
                None => return Some(s),
            }
        }
    }
}

/// A request for `nb_nodes` distinct nodes with `weight` processors each,
/// held for `duration`, starting no earlier than `not_before`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotRequest {
    pub nb_nodes: u32,
    pub weight: u32,
    pub duration: Time,
    pub properties: PropertyExpr,
    pub not_before: Time,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TimelineError {
    #[error("occupation of job {job} references unknown node '{node}'")]
    UnknownNode { job: JobId, node: String },
}

/// The planning surface: one profile per node, iterated by node name.
#[derive(Debug, Clone)]
pub struct GanttTimeline {
    now: Time,
    nodes: BTreeMap<String, NodeProfile>,
}

/// Builds the timeline from store occupations, clipping each to `[now, +inf)`.
pub fn build_timeline(now: Time, occupations: &[Occupation], nodes: &[Node]) -> Result<GanttTimeline, TimelineError> {
    let mut timeline = GanttTimeline::empty(now, nodes);
    for occ in occupations {
        let profile = timeline
            .nodes
            .get_mut(&occ.node)
            .ok_or_else(|| TimelineError::UnknownNode {
                job: occ.job,
                node: occ.node.clone(),
            })?;
        let start = occ.start.max(now);
        if occ.end <= start || occ.procs == 0 {
            continue;
        }
        profile.add(Interval {
            start,
            end: occ.end,
            procs: occ.procs,
            owner: occ.job,
        });
    }
    Ok(timeline)
}

impl GanttTimeline {
    pub fn empty(now: Time, nodes: &[Node]) -> GanttTimeline {
        GanttTimeline {
            now,
            nodes: nodes
                .iter()
                .map(|n| {
                    (
                        n.name.clone(),
                        NodeProfile {
                            node: n.clone(),
                            deltas: BTreeMap::new(),
                            intervals: Vec::new(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn node_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn capacity(&self, node: &str) -> Option<u32> {
        self.nodes.get(node).map(|p| p.node.capacity)
    }

    /// Processors in use on `node` at instant `t`.
    pub fn used(&self, node: &str, t: Time) -> Option<i64> {
        self.nodes.get(node).map(|p| p.used_at(t))
    }

    /// Capacity minus processors in use; negative when over-subscribed.
    pub fn free(&self, node: &str, t: Time) -> Option<i64> {
        self.nodes.get(node).map(|p| i64::from(p.node.capacity) - p.used_at(t))
    }

    pub fn intervals(&self) -> impl Iterator<Item = (&str, &Interval)> {
        self.nodes
            .iter()
            .flat_map(|(name, p)| p.intervals.iter().map(move |iv| (name.as_str(), iv)))
    }

    /// Allocations held by `owner`, ordered by node name.
    pub fn allocation_of(&self, owner: JobId) -> Vec<NodeAllocation> {
        self.nodes
            .iter()
            .filter_map(|(name, p)| {
                let procs: u32 = p
                    .intervals
                    .iter()
                    .filter(|iv| iv.owner == owner)
                    .map(|iv| iv.procs)
                    .sum();
                (procs > 0).then(|| NodeAllocation::new(name.clone(), procs))
            })
            .collect()
    }

    pub fn has_owner(&self, owner: JobId) -> bool {
        self.nodes
            .values()
            .any(|p| p.intervals.iter().any(|iv| iv.owner == owner))
    }

    /// Every (node, instant) at which processors in use exceed capacity,
    /// checked at each breakpoint.
    pub fn oversubscriptions(&self) -> Vec<(String, Time)> {
        let mut out = Vec::new();
        for (name, p) in &self.nodes {
            let mut used = 0i64;
            for (&t, &d) in &p.deltas {
                used += d;
                if used > i64::from(p.node.capacity) {
                    out.push((name.clone(), t));
                }
            }
        }
        out
    }

    fn eligible<'a>(&'a self, req: &'a SlotRequest) -> impl Iterator<Item = &'a NodeProfile> + 'a {
        self.nodes.values().filter(move |p| {
            p.node.health == NodeHealth::Alive
                && p.node.capacity >= req.weight
                && eval_property(&req.properties, &p.node)
        })
    }

    /// Number of nodes that could ever host one part of the request.
    pub fn eligible_count(&self, req: &SlotRequest) -> usize {
        self.eligible(req).count()
    }

    /// Earliest start at or after `max(not_before, now)` with `nb_nodes`
    /// nodes free for the whole duration. Among the nodes that fit at that
    /// start, the first ones by name are chosen.
    pub fn find_earliest_slot(&self, req: &SlotRequest) -> Option<(Time, Vec<NodeAllocation>)> {
        let n = req.nb_nodes as usize;
        if n == 0 || req.duration < 1 {
            return None;
        }
        let nodes: Vec<&NodeProfile> = self.eligible(req).collect();
        if nodes.len() < n {
            return None;
        }
        let mut t = req.not_before.max(self.now);
        loop {
            // A node fitting at s >= t has its earliest fit from t at or
            // before s, so no start before the n-th smallest is feasible.
            let mut fits: Vec<Time> = nodes
                .iter()
                .map(|p| p.earliest_fit(req.weight, req.duration, t).expect("eligible node"))
                .collect();
            fits.sort_unstable();
            let candidate = fits[n - 1];
            if candidate == t {
                return self.fit_at(req, t).map(|a| (t, a));
            }
            t = candidate;
        }
    }

    /// Assignment for a start exactly at `start`, or None.
    pub fn fit_at(&self, req: &SlotRequest, start: Time) -> Option<Vec<NodeAllocation>> {
        let n = req.nb_nodes as usize;
        if n == 0 || req.duration < 1 || start < self.now {
            return None;
        }
        let chosen: Vec<NodeAllocation> = self
            .eligible(req)
            .filter(|p| p.earliest_fit(req.weight, req.duration, start) == Some(start))
            .take(n)
            .map(|p| NodeAllocation::new(p.node.name.clone(), req.weight))
            .collect();
        (chosen.len() == n).then_some(chosen)
    }

    /// Records `owner` on each allocation over `[start, start + duration)`.
    pub fn commit(&mut self, owner: JobId, start: Time, duration: Time, assignment: &[NodeAllocation]) {
        for a in assignment {
            if let Some(p) = self.nodes.get_mut(&a.node) {
                p.add(Interval {
                    start,
                    end: start + duration,
                    procs: a.procs,
                    owner,
                });
            }
        }
    }

    /// Drops every interval held by `owner`.
    pub fn release(&mut self, owner: JobId) {
        for p in self.nodes.values_mut() {
            p.remove_owner(owner);
        }
    }
}
