//! The planner. Each pass rebuilds the Gantt timeline from running jobs and
//! fixed reservations, then gives every waiting job a hold on it, queue by
//! queue in decreasing priority (conservative backfilling). The planner
//! only reads: it returns decisions that the kernel applies to the store.

mod preempt;
mod timeline;

pub use preempt::{plan_preemption, VictimPolicy};
pub use timeline::{build_timeline, GanttTimeline, Interval, SlotRequest, TimelineError};

use std::collections::BTreeSet;

use crate::model::{Job, JobId, JobState, NodeAllocation, Policy, Queue, ReservationStatus, Time};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    /// Start now on these nodes.
    LaunchNow(Vec<NodeAllocation>),
    /// Hold for a later start. For a reservation request this is the
    /// accepted slot.
    PlannedAt {
        start: Time,
        assignment: Vec<NodeAllocation>,
    },
    Reject(String),
    /// Best-effort job to cancel so a regular job can start.
    FlagForCancellation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub job: JobId,
    pub verdict: Verdict,
}

impl Decision {
    fn new(job: JobId, verdict: Verdict) -> Decision {
        Decision { job, verdict }
    }
}

/// Slot request for a job: its size and walltime, from `not_before`.
pub fn slot_request(job: &Job, not_before: Time) -> SlotRequest {
    SlotRequest {
        nb_nodes: job.nb_nodes,
        weight: job.weight,
        duration: job.max_time,
        properties: job.properties.clone(),
        not_before,
    }
}

/// FIFO sorts by id; SAF by requested processors, then id.
pub fn order_jobs(jobs: &[Job], policy: Policy) -> Vec<&Job> {
    let mut v: Vec<&Job> = jobs.iter().collect();
    match policy {
        Policy::Fifo => v.sort_by_key(|j| j.id),
        Policy::Saf => v.sort_by_key(|j| (j.procs(), j.id)),
    }
    v
}

fn unsatisfiable(timeline: &GanttTimeline, job: &Job) -> String {
    let req = slot_request(job, timeline.now());
    let eligible = timeline.eligible_count(&req);
    let props = if job.properties.is_empty() {
        String::new()
    } else {
        format!(" matching '{}'", job.properties)
    };
    format!(
        "needs {} node(s) with {} processor(s){props}, only {eligible} available node(s) qualify",
        job.nb_nodes, job.weight
    )
}

/// Places a reservation exactly at `desired_start` or rejects it; never
/// slides. On success the slot is committed to the timeline.
pub fn place_reservation(timeline: &mut GanttTimeline, job: &Job, desired_start: Time) -> Decision {
    if desired_start < timeline.now() {
        return Decision::new(
            job.id,
            Verdict::Reject(format!(
                "reservation start {desired_start} is before now ({})",
                timeline.now()
            )),
        );
    }
    let req = slot_request(job, desired_start);
    match timeline.fit_at(&req, desired_start) {
        Some(assignment) => {
            timeline.commit(job.id, desired_start, job.max_time, &assignment);
            Decision::new(
                job.id,
                Verdict::PlannedAt {
                    start: desired_start,
                    assignment,
                },
            )
        }
        None if timeline.find_earliest_slot(&req).is_none() => {
            Decision::new(job.id, Verdict::Reject(unsatisfiable(timeline, job)))
        }
        None => Decision::new(
            job.id,
            Verdict::Reject(format!("resources are not free at the requested start {desired_start}")),
        ),
    }
}

/// One planning pass over the waiting jobs.
///
/// Order: scheduled reservations that are due, then new reservation
/// requests by id, then each active queue by decreasing priority (ties by
/// name) in its policy order. A regular job that cannot start now may
/// displace running best-effort jobs: they are flagged and the job is held
/// at `now`, to be launched by the pass that follows their cancellation.
pub fn schedule_pass(
    queues: &[Queue],
    waiting: &[Job],
    timeline: &mut GanttTimeline,
    running_best_effort: &[Job],
    victim_policy: VictimPolicy,
) -> Vec<Decision> {
    let now = timeline.now();
    let active = |job: &Job| queues.iter().any(|q| q.name == job.queue && q.active);
    let candidates: Vec<&Job> = waiting
        .iter()
        .filter(|j| j.state == JobState::Waiting && active(j))
        .collect();
    let mut decisions = Vec::new();

    for job in candidates
        .iter()
        .filter(|j| j.reservation == ReservationStatus::Scheduled)
    {
        let Some(start) = job.reserved_start else {
            continue;
        };
        let assignment = timeline.allocation_of(job.id);
        if start > now {
            decisions.push(Decision::new(job.id, Verdict::PlannedAt { start, assignment }));
        } else if assignment.is_empty() {
            decisions.push(Decision::new(
                job.id,
                Verdict::Reject(format!("reservation window starting at {start} has passed")),
            ));
        } else if assignment
            .iter()
            .all(|a| timeline.free(&a.node, now).is_some_and(|f| f >= 0))
        {
            decisions.push(Decision::new(job.id, Verdict::LaunchNow(assignment)));
        }
        // Otherwise a job overrunning into the window still holds the
        // processors; the launch waits for the next pass.
    }

    let mut requests: Vec<&Job> = candidates
        .iter()
        .copied()
        .filter(|j| j.reservation == ReservationStatus::ToSchedule)
        .collect();
    requests.sort_by_key(|j| j.id);
    for job in requests {
        let decision = match job.reserved_start {
            Some(start) => place_reservation(timeline, job, start),
            None => Decision::new(job.id, Verdict::Reject("reservation without a start time".into())),
        };
        decisions.push(decision);
    }

    let mut ordered_queues: Vec<&Queue> = queues.iter().filter(|q| q.active).collect();
    ordered_queues.sort_by(|a, b| b.priority.cmp(&a.priority).then_with(|| a.name.cmp(&b.name)));
    let mut flagged = BTreeSet::new();
    for queue in ordered_queues {
        let jobs: Vec<Job> = candidates
            .iter()
            .filter(|j| j.queue == queue.name && j.reservation == ReservationStatus::None)
            .map(|j| (*j).clone())
            .collect();
        for job in order_jobs(&jobs, queue.policy) {
            let req = slot_request(job, now);
            let Some((start, assignment)) = timeline.find_earliest_slot(&req) else {
                decisions.push(Decision::new(job.id, Verdict::Reject(unsatisfiable(timeline, job))));
                continue;
            };
            if start == now {
                timeline.commit(job.id, now, job.max_time, &assignment);
                decisions.push(Decision::new(job.id, Verdict::LaunchNow(assignment)));
                continue;
            }
            if !job.best_effort {
                if let Some(victims) = plan_preemption(timeline, &req, running_best_effort, victim_policy) {
                    for v in &victims {
                        timeline.release(*v);
                        if flagged.insert(*v) {
                            decisions.push(Decision::new(*v, Verdict::FlagForCancellation));
                        }
                    }
                    let assignment = timeline.fit_at(&req, now).expect("feasible once victims are released");
                    timeline.commit(job.id, now, job.max_time, &assignment);
                    decisions.push(Decision::new(job.id, Verdict::PlannedAt { start: now, assignment }));
                    continue;
                }
            }
            timeline.commit(job.id, start, job.max_time, &assignment);
            decisions.push(Decision::new(job.id, Verdict::PlannedAt { start, assignment }));
        }
    }
    decisions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Node, PropertyExpr};
    use crate::store::Occupation;

    fn cluster(n: usize, cap: u32) -> Vec<Node> {
        (0..n).map(|i| Node::new(format!("n{i}"), cap)).collect()
    }

    fn job(id: u64, nb: u32, w: u32, max: Time) -> Job {
        let mut j = Job::new("u", "x", "default");
        j.id = JobId(id);
        j.nb_nodes = nb;
        j.weight = w;
        j.max_time = max;
        j
    }

    fn fifo() -> Vec<Queue> {
        vec![Queue::new("default", 0, Policy::Fifo)]
    }

    fn start_of(decisions: &[Decision], id: u64, now: Time) -> Option<Time> {
        decisions
            .iter()
            .find(|d| d.job == JobId(id))
            .and_then(|d| match &d.verdict {
                Verdict::LaunchNow(_) => Some(now),
                Verdict::PlannedAt { start, .. } => Some(*start),
                _ => None,
            })
    }

    fn pass(nodes: &[Node], occs: &[Occupation], jobs: &[Job]) -> Vec<Decision> {
        let mut tl = build_timeline(0, occs, nodes).unwrap();
        schedule_pass(&fifo(), jobs, &mut tl, &[], VictimPolicy::YoungestFirst)
    }

    #[test]
    fn fifo_sorts_by_id() {
        let jobs = [job(3, 1, 1, 1), job(1, 1, 1, 1), job(2, 1, 1, 1)];
        let ids: Vec<u64> = order_jobs(&jobs, Policy::Fifo).iter().map(|j| j.id.0).collect();
        assert_eq!(ids, [1, 2, 3]);
    }

    #[test]
    fn saf_sorts_by_area_then_id() {
        let jobs = [job(1, 2, 2, 1), job(2, 1, 1, 1), job(3, 1, 1, 1)];
        let ids: Vec<u64> = order_jobs(&jobs, Policy::Saf).iter().map(|j| j.id.0).collect();
        assert_eq!(ids, [2, 3, 1]);
    }

    #[test]
    fn big_then_small_on_idle_cluster() {
        let nodes = cluster(3, 1);
        let d = pass(&nodes, &[], &[job(1, 3, 1, 100), job(2, 1, 1, 50)]);
        assert_eq!(start_of(&d, 1, 0), Some(0));
        assert!(matches!(d[0].verdict, Verdict::LaunchNow(_)));
        assert_eq!(start_of(&d, 2, 0), Some(100));

        let d = pass(&nodes, &[], &[job(1, 1, 1, 50), job(2, 3, 1, 100)]);
        assert_eq!(start_of(&d, 1, 0), Some(0));
        assert_eq!(start_of(&d, 2, 0), Some(50));
    }

    #[test]
    fn backfill_only_into_real_holes() {
        let nodes = cluster(3, 1);
        let all_busy: Vec<Occupation> = (0..3)
            .map(|i| Occupation {
                job: JobId(9),
                node: format!("n{i}"),
                procs: 1,
                start: 0,
                end: 100,
            })
            .collect();
        let jobs = [job(1, 3, 1, 100), job(2, 1, 1, 50)];
        let d = pass(&nodes, &all_busy, &jobs);
        assert_eq!(start_of(&d, 1, 0), Some(100));
        assert_eq!(start_of(&d, 2, 0), Some(200));

        let d = pass(&nodes, &all_busy[..2], &jobs);
        assert_eq!(start_of(&d, 1, 0), Some(100));
        assert_eq!(start_of(&d, 2, 0), Some(0));
    }

    #[test]
    fn higher_priority_queue_first() {
        let queues = vec![Queue::new("low", 0, Policy::Fifo), Queue::new("high", 5, Policy::Fifo)];
        let mut a = job(1, 1, 1, 100);
        a.queue = "low".into();
        let mut b = job(2, 1, 1, 100);
        b.queue = "high".into();
        let mut tl = GanttTimeline::empty(0, &cluster(1, 1));
        let d = schedule_pass(&queues, &[a, b], &mut tl, &[], VictimPolicy::YoungestFirst);
        assert_eq!(start_of(&d, 2, 0), Some(0));
        assert_eq!(start_of(&d, 1, 0), Some(100));
    }

    #[test]
    fn inactive_queue_contributes_nothing() {
        let mut queues = fifo();
        queues[0].active = false;
        let mut tl = GanttTimeline::empty(0, &cluster(1, 1));
        assert!(schedule_pass(&queues, &[job(1, 1, 1, 10)], &mut tl, &[], VictimPolicy::YoungestFirst).is_empty());
    }

    #[test]
    fn impossible_properties_rejected() {
        let mut j = job(1, 1, 1, 10);
        j.properties = "gpu=true".parse::<PropertyExpr>().unwrap();
        let d = pass(&cluster(2, 1), &[], &[j]);
        match &d[0].verdict {
            Verdict::Reject(msg) => assert!(msg.contains("gpu = true"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    fn reservation(id: u64, start: Time, nb: u32, max: Time) -> Job {
        let mut j = job(id, nb, 1, max);
        j.reservation = ReservationStatus::ToSchedule;
        j.reserved_start = Some(start);
        j
    }

    #[test]
    fn reservation_placed_exactly() {
        let mut tl = GanttTimeline::empty(0, &cluster(2, 1));
        let d = place_reservation(&mut tl, &reservation(1, 500, 1, 60), 500);
        assert_eq!(
            d.verdict,
            Verdict::PlannedAt {
                start: 500,
                assignment: vec![NodeAllocation::new("n0", 1)]
            }
        );
    }

    #[test]
    fn occupied_reservation_slot_never_slides() {
        let mut tl = GanttTimeline::empty(0, &cluster(1, 1));
        tl.commit(JobId(9), 450, 100, &[NodeAllocation::new("n0", 1)]);
        let d = place_reservation(&mut tl, &reservation(1, 500, 1, 60), 500);
        assert!(matches!(d.verdict, Verdict::Reject(_)));
        assert!(!tl.has_owner(JobId(1)));
    }

    #[test]
    fn past_reservation_rejected() {
        let mut tl = GanttTimeline::empty(100, &cluster(1, 1));
        assert!(matches!(
            place_reservation(&mut tl, &reservation(1, 99, 1, 60), 99).verdict,
            Verdict::Reject(_)
        ));
    }

    #[test]
    fn simultaneous_reservations_on_disjoint_nodes() {
        let mut tl = GanttTimeline::empty(0, &cluster(2, 1));
        let a = place_reservation(&mut tl, &reservation(1, 500, 1, 60), 500);
        let b = place_reservation(&mut tl, &reservation(2, 500, 1, 60), 500);
        let c = place_reservation(&mut tl, &reservation(3, 500, 1, 60), 500);
        assert!(matches!(a.verdict, Verdict::PlannedAt { start: 500, .. }));
        assert!(matches!(b.verdict, Verdict::PlannedAt { start: 500, .. }));
        assert!(matches!(c.verdict, Verdict::Reject(_)));
    }

    #[test]
    fn due_reservation_launches_on_its_nodes() {
        let nodes = cluster(2, 1);
        let mut j = job(1, 1, 1, 60);
        j.reservation = ReservationStatus::Scheduled;
        j.reserved_start = Some(100);
        let occ = Occupation {
            job: JobId(1),
            node: "n1".into(),
            procs: 1,
            start: 100,
            end: 160,
        };
        let mut tl = build_timeline(100, std::slice::from_ref(&occ), &nodes).unwrap();
        let d = schedule_pass(&fifo(), &[j.clone()], &mut tl, &[], VictimPolicy::YoungestFirst);
        assert_eq!(
            d,
            vec![Decision::new(
                JobId(1),
                Verdict::LaunchNow(vec![NodeAllocation::new("n1", 1)])
            )]
        );

        let mut tl = build_timeline(40, &[occ], &nodes).unwrap();
        let d = schedule_pass(&fifo(), &[j], &mut tl, &[], VictimPolicy::YoungestFirst);
        assert!(matches!(d[0].verdict, Verdict::PlannedAt { start: 100, .. }));
    }

    #[test]
    fn regular_job_preempts_best_effort() {
        let queues = vec![
            Queue::new("default", 0, Policy::Fifo),
            Queue::best_effort("besteffort", -10),
        ];
        let mut be = job(1, 1, 1, 1000);
        be.queue = "besteffort".into();
        be.best_effort = true;
        be.state = JobState::Running;
        be.start_time = Some(0);
        let occ = Occupation {
            job: JobId(1),
            node: "n0".into(),
            procs: 1,
            start: 0,
            end: 1000,
        };
        let mut tl = build_timeline(10, &[occ], &cluster(1, 1)).unwrap();
        let d = schedule_pass(
            &queues,
            &[job(2, 1, 1, 50)],
            &mut tl,
            &[be],
            VictimPolicy::YoungestFirst,
        );
        assert_eq!(d[0], Decision::new(JobId(1), Verdict::FlagForCancellation));
        assert!(matches!(d[1].verdict, Verdict::PlannedAt { start: 10, .. }));
        assert!(tl.oversubscriptions().is_empty());
    }

    #[test]
    fn best_effort_jobs_do_not_preempt() {
        let queues = vec![Queue::best_effort("besteffort", -10)];
        let mut running = job(1, 1, 1, 100);
        running.best_effort = true;
        running.start_time = Some(0);
        let mut waiting = job(2, 1, 1, 10);
        waiting.queue = "besteffort".into();
        waiting.best_effort = true;
        let mut tl = GanttTimeline::empty(0, &cluster(1, 1));
        tl.commit(JobId(1), 0, 100, &[NodeAllocation::new("n0", 1)]);
        let d = schedule_pass(&queues, &[waiting], &mut tl, &[running], VictimPolicy::YoungestFirst);
        assert_eq!(start_of(&d, 2, 0), Some(100));
    }

    /// One node of capacity 1; X holds [3,10). L (1 s) sits in another
    /// queue; Q holds Q1 (3 s) then Q2 (2 s). With Q below L's queue, L takes
    /// [0,1), Q1 cannot fit before X and Q2 backfills at 1. With Q on top, Q1
    /// takes [0,3) and Q2 moves to 10. Raising a priority can delay a later
    /// job of the raised queue; the raised queue's plan is its plan alone.
    #[test]
    fn raising_priority_can_move_a_later_job() {
        let nodes = cluster(1, 1);
        let x = Occupation {
            job: JobId(99),
            node: "n0".into(),
            procs: 1,
            start: 3,
            end: 10,
        };
        let mut other = job(1, 1, 1, 1);
        other.queue = "other".into();
        let mut q1 = job(2, 1, 1, 3);
        q1.queue = "q".into();
        let mut q2 = job(3, 1, 1, 2);
        q2.queue = "q".into();
        let jobs = [other, q1, q2];
        let run = |q_prio: i32| {
            let queues = vec![
                Queue::new("other", 1, Policy::Fifo),
                Queue::new("q", q_prio, Policy::Fifo),
            ];
            let mut tl = build_timeline(0, std::slice::from_ref(&x), &nodes).unwrap();
            schedule_pass(&queues, &jobs, &mut tl, &[], VictimPolicy::YoungestFirst)
        };
        let low = run(0);
        let high = run(2);
        assert_eq!((start_of(&low, 2, 0), start_of(&low, 3, 0)), (Some(10), Some(1)));
        assert_eq!((start_of(&high, 2, 0), start_of(&high, 3, 0)), (Some(0), Some(10)));
        let alone = {
            let queues = vec![Queue::new("q", 0, Policy::Fifo)];
            let mut tl = build_timeline(0, std::slice::from_ref(&x), &nodes).unwrap();
            schedule_pass(&queues, &jobs[1..], &mut tl, &[], VictimPolicy::YoungestFirst)
        };
        assert_eq!(start_of(&alone, 2, 0), Some(0));
        assert_eq!(start_of(&alone, 3, 0), Some(10));
    }
}
