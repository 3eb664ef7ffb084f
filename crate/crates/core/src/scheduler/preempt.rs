//! Victim selection among running best-effort jobs.

use serde::{Deserialize, Serialize};

use super::timeline::{GanttTimeline, SlotRequest};
use crate::model::{Job, JobId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimPolicy {
    /// Most recently started first, then pruned to an inclusion-minimal set.
    #[default]
    YoungestFirst,
    /// Fewest victims; among equal counts, the youngest set.
    MinimalCount,
}

/// Above this many candidates `MinimalCount` falls back to youngest-first.
const EXHAUSTIVE_LIMIT: usize = 16;

/// Candidates youngest first: latest start, unstarted jobs before any
/// started one, then highest id.
fn by_youth(running_best_effort: &[Job], timeline: &GanttTimeline) -> Vec<JobId> {
    let mut v: Vec<&Job> = running_best_effort
        .iter()
        .filter(|j| j.best_effort && timeline.has_owner(j.id))
        .collect();
    v.sort_by(|a, b| {
        let key = |j: &Job| (j.start_time.map_or(i64::MAX, |t| t), j.id);
        key(b).cmp(&key(a))
    });
    v.into_iter().map(|j| j.id).collect()
}

fn feasible_without(timeline: &GanttTimeline, req: &SlotRequest, victims: &[JobId]) -> bool {
    let mut tl = timeline.clone();
    for v in victims {
        tl.release(*v);
    }
    tl.fit_at(req, req.not_before).is_some()
}

/// Best-effort jobs to cancel so that `req` fits exactly at
/// `req.not_before`. None when no subset of them suffices.
pub fn plan_preemption(
    timeline: &GanttTimeline,
    req: &SlotRequest,
    running_best_effort: &[Job],
    policy: VictimPolicy,
) -> Option<Vec<JobId>> {
    let order = by_youth(running_best_effort, timeline);
    if order.is_empty() || !feasible_without(timeline, req, &order) {
        return None;
    }
    if policy == VictimPolicy::MinimalCount && order.len() <= EXHAUSTIVE_LIMIT {
        return minimal_count(timeline, req, &order);
    }
    let mut chosen = Vec::new();
    for id in &order {
        chosen.push(*id);
        if feasible_without(timeline, req, &chosen) {
            break;
        }
    }
    // Try dropping the oldest picks first so the set stays as young as possible.
    let mut i = chosen.len();
    while i > 0 {
        i -= 1;
        let mut trial = chosen.clone();
        trial.remove(i);
        if feasible_without(timeline, req, &trial) {
            chosen = trial;
        }
    }
    Some(chosen)
}

fn minimal_count(timeline: &GanttTimeline, req: &SlotRequest, order: &[JobId]) -> Option<Vec<JobId>> {
    let n = order.len();
    for k in 1..=n {
        // Combinations in lexicographic index order, so younger sets come first.
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let set: Vec<JobId> = idx.iter().map(|&i| order[i]).collect();
            if feasible_without(timeline, req, &set) {
                return Some(set);
            }
            let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else {
                break;
            };
            idx[pos] += 1;
            for q in pos + 1..k {
                idx[q] = idx[q - 1] + 1;
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Node, NodeAllocation, PropertyExpr, Time};

    fn be_job(id: u64, start: Time) -> Job {
        let mut j = Job::new("u", "x", "besteffort");
        j.id = JobId(id);
        j.best_effort = true;
        j.start_time = Some(start);
        j
    }

    fn req(nb: u32, w: u32, now: Time) -> SlotRequest {
        SlotRequest {
            nb_nodes: nb,
            weight: w,
            duration: 10,
            properties: PropertyExpr::all(),
            not_before: now,
        }
    }

    fn timeline(nodes: usize, cap: u32, jobs: &[(u64, &str, u32)]) -> GanttTimeline {
        let cluster: Vec<Node> = (0..nodes).map(|i| Node::new(format!("n{i}"), cap)).collect();
        let mut tl = GanttTimeline::empty(0, &cluster);
        for (id, node, procs) in jobs {
            tl.commit(JobId(*id), 0, 100, &[NodeAllocation::new(*node, *procs)]);
        }
        tl
    }

    #[test]
    fn none_without_best_effort() {
        let tl = timeline(1, 1, &[(1, "n0", 1)]);
        assert_eq!(
            plan_preemption(&tl, &req(1, 1, 0), &[], VictimPolicy::YoungestFirst),
            None
        );
    }

    #[test]
    fn single_victim() {
        let tl = timeline(1, 1, &[(1, "n0", 1)]);
        assert_eq!(
            plan_preemption(&tl, &req(1, 1, 0), &[be_job(1, 0)], VictimPolicy::YoungestFirst),
            Some(vec![JobId(1)])
        );
    }

    #[test]
    fn youngest_is_cancelled_first() {
        let tl = timeline(2, 1, &[(1, "n0", 1), (2, "n1", 1)]);
        let running = [be_job(1, 5), be_job(2, 3)];
        assert_eq!(
            plan_preemption(&tl, &req(1, 1, 0), &running, VictimPolicy::YoungestFirst),
            Some(vec![JobId(1)])
        );
    }

    #[test]
    fn infeasible_even_after_all_victims() {
        // Regular job 3 holds the second node.
        let tl = timeline(2, 1, &[(1, "n0", 1), (3, "n1", 1)]);
        assert_eq!(
            plan_preemption(&tl, &req(2, 1, 0), &[be_job(1, 0)], VictimPolicy::YoungestFirst),
            None
        );
    }

    #[test]
    fn redundant_young_victims_are_pruned() {
        // A young 1-proc job and an old 2-proc job share a 3-proc node; only
        // removing the old one frees the node for a weight-2 request.
        let tl = timeline(1, 3, &[(1, "n0", 1), (2, "n0", 2)]);
        let running = [be_job(1, 9), be_job(2, 1)];
        assert_eq!(
            plan_preemption(&tl, &req(1, 2, 0), &running, VictimPolicy::YoungestFirst),
            Some(vec![JobId(2)])
        );
    }

    #[test]
    fn minimal_count_prefers_one_big_victim() {
        // Youngest-first needs the two small young jobs; one old job suffices.
        let tl = timeline(2, 2, &[(1, "n0", 1), (2, "n0", 1), (3, "n1", 2)]);
        let running = [be_job(1, 9), be_job(2, 8), be_job(3, 1)];
        let youngest = plan_preemption(&tl, &req(1, 2, 0), &running, VictimPolicy::YoungestFirst).unwrap();
        assert_eq!(youngest, vec![JobId(1), JobId(2)]);
        let minimal = plan_preemption(&tl, &req(1, 2, 0), &running, VictimPolicy::MinimalCount).unwrap();
        assert_eq!(minimal, vec![JobId(3)]);
    }
}
