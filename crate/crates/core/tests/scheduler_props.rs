use std::collections::BTreeMap;

use batchsched::model::{Job, JobId, Node, Policy, Queue, ReservationStatus, Time};
use batchsched::scheduler::{build_timeline, place_reservation, schedule_pass, Decision, Verdict, VictimPolicy};
use batchsched::store::Occupation;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    caps: Vec<u32>,
    running: Vec<(usize, u32, Time)>,
    jobs: Vec<(u32, u32, Time, bool)>,
}

fn instance() -> impl Strategy<Value = Instance> {
    prop::collection::vec(1u32..=3, 1..=4).prop_flat_map(|caps| {
        let n = caps.len();
        let max_cap = *caps.iter().max().expect("non-empty");
        (
            Just(caps),
            prop::collection::vec((0..n, 1..=max_cap, 1i64..15), 0..4),
            prop::collection::vec((1..=n as u32, 1..=max_cap, 1i64..12, any::<bool>()), 1..8),
        )
            .prop_map(|(caps, running, jobs)| Instance { caps, running, jobs })
    })
}

fn cluster(caps: &[u32]) -> Vec<Node> {
    caps.iter()
        .enumerate()
        .map(|(i, c)| Node::new(format!("n{i}"), *c))
        .collect()
}

/// Running jobs, trimmed so no node is over capacity.
fn running(inst: &Instance) -> Vec<Occupation> {
    let mut left = inst.caps.clone();
    let mut occ = Vec::new();
    for (i, (node, procs, end)) in inst.running.iter().enumerate() {
        let procs = (*procs).min(left[*node]);
        if procs == 0 {
            continue;
        }
        left[*node] -= procs;
        occ.push(Occupation {
            job: JobId(1000 + i as u64),
            node: format!("n{node}"),
            procs,
            start: 0,
            end: *end,
        });
    }
    occ
}

/// Jobs flagged `true` go to queue "a", the rest to "b".
fn jobs(inst: &Instance) -> Vec<Job> {
    inst.jobs
        .iter()
        .enumerate()
        .map(|(i, (nb, w, d, in_a))| {
            let mut j = Job::new("u", "run", if *in_a { "a" } else { "b" });
            j.id = JobId(i as u64 + 1);
            j.nb_nodes = *nb;
            j.weight = *w;
            j.max_time = *d;
            j
        })
        .collect()
}

fn starts(decisions: &[Decision], now: Time) -> BTreeMap<JobId, Option<Time>> {
    decisions
        .iter()
        .map(|d| {
            let s = match &d.verdict {
                Verdict::LaunchNow(_) => Some(now),
                Verdict::PlannedAt { start, .. } => Some(*start),
                _ => None,
            };
            (d.job, s)
        })
        .collect()
}

fn plan(inst: &Instance, queues: &[Queue], only: Option<&str>) -> (BTreeMap<JobId, Option<Time>>, usize) {
    let nodes = cluster(&inst.caps);
    let mut tl = build_timeline(0, &running(inst), &nodes).expect("valid instance");
    let js: Vec<Job> = jobs(inst)
        .into_iter()
        .filter(|j| only.is_none_or(|q| j.queue == q))
        .collect();
    let d = schedule_pass(queues, &js, &mut tl, &[], VictimPolicy::YoungestFirst);
    (starts(&d, 0), tl.oversubscriptions().len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn no_oversubscription_after_any_pass(inst in instance(), saf in any::<bool>()) {
        let policy = if saf { Policy::Saf } else { Policy::Fifo };
        let queues = vec![Queue::new("a", 1, policy), Queue::new("b", 0, Policy::Fifo)];
        let (_, over) = plan(&inst, &queues, None);
        prop_assert_eq!(over, 0);
    }

    #[test]
    fn every_job_planned_or_unsatisfiable(inst in instance()) {
        let queues = vec![Queue::new("a", 1, Policy::Fifo), Queue::new("b", 0, Policy::Fifo)];
        let (s, _) = plan(&inst, &queues, None);
        for (i, (nb, w, _, _)) in inst.jobs.iter().enumerate() {
            let fits = inst.caps.iter().filter(|c| *c >= w).count() >= *nb as usize;
            prop_assert_eq!(s[&JobId(i as u64 + 1)].is_some(), fits);
        }
    }

    /// A queue raised above all others plans exactly as if it were alone,
    /// and its head job never starts later than before the raise.
    #[test]
    fn raised_queue_plans_as_if_alone(inst in instance(), low in -5i32..5) {
        let before_q = vec![Queue::new("a", low, Policy::Fifo), Queue::new("b", 5, Policy::Fifo)];
        let raised_q = vec![Queue::new("a", 6, Policy::Fifo), Queue::new("b", 5, Policy::Fifo)];
        let (before, _) = plan(&inst, &before_q, None);
        let (raised, _) = plan(&inst, &raised_q, None);
        let (alone, _) = plan(&inst, &raised_q, Some("a"));
        let a_ids: Vec<JobId> = jobs(&inst).iter().filter(|j| j.queue == "a").map(|j| j.id).collect();
        for id in &a_ids {
            prop_assert_eq!(raised[id], alone[id]);
        }
        if let Some(head) = a_ids.first() {
            if let (Some(b), Some(r)) = (before[head], raised[head]) {
                prop_assert!(r <= b, "head job moved from {} to {}", b, r);
            }
        }
    }

    /// Once placed, a reservation keeps its start and nodes in every later
    /// pass, whatever else is waiting.
    #[test]
    fn scheduled_reservation_never_moves(inst in instance(), desired in 0i64..20, later in 0i64..20, extra in instance()) {
        let nodes = cluster(&inst.caps);
        let occ = running(&inst);
        let mut tl = build_timeline(0, &occ, &nodes).expect("valid instance");
        let mut r = Job::new("u", "run", "a");
        r.id = JobId(500);
        r.max_time = 5;
        r.reservation = ReservationStatus::ToSchedule;
        let placed = place_reservation(&mut tl, &r, desired);
        let Verdict::PlannedAt { start, assignment } = placed.verdict else {
            return Ok(());
        };

        let now = later.min(start);
        r.reservation = ReservationStatus::Scheduled;
        r.reserved_start = Some(start);
        let mut occ2: Vec<Occupation> = occ.into_iter().filter(|o| o.end > now).collect();
        for a in &assignment {
            occ2.push(Occupation { job: r.id, node: a.node.clone(), procs: a.procs, start, end: start + r.max_time });
        }
        let mut tl2 = build_timeline(now, &occ2, &nodes).expect("valid instance");
        let mut waiting = vec![r.clone()];
        // Other jobs only where the extra instance's node indices exist here.
        waiting.extend(jobs(&extra).into_iter().filter(|j| j.nb_nodes as usize <= nodes.len()));
        let queues = vec![Queue::new("a", 0, Policy::Fifo), Queue::new("b", 1, Policy::Saf)];
        let d = schedule_pass(&queues, &waiting, &mut tl2, &[], VictimPolicy::YoungestFirst);
        let mine = d.iter().find(|d| d.job == r.id).expect("reservation decided");
        let expected = if start == now {
            Verdict::LaunchNow(assignment.clone())
        } else {
            Verdict::PlannedAt { start, assignment: assignment.clone() }
        };
        prop_assert_eq!(&mine.verdict, &expected);
        prop_assert!(tl2.oversubscriptions().is_empty());
    }
}
