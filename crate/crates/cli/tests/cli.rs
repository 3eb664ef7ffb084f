use std::path::Path;
use std::process::{Child, Command, Output};
use std::thread;
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_batchsched");

fn cli(socket: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--socket")
        .arg(socket)
        .args(args)
        .env_remove("BATCHSCHED_SOCKET")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Engine {
    child: Child,
}

impl Drop for Engine {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_engine(socket: &Path) -> Engine {
    let child = Command::new(BIN)
        .arg("--socket")
        .arg(socket)
        .args(["daemon", "--node", "a:2", "--node", "b:2"])
        .spawn()
        .unwrap();
    let limit = Instant::now() + Duration::from_secs(20);
    while cli(socket, &["stat"]).status.code() != Some(0) {
        assert!(Instant::now() < limit, "engine did not come up");
        thread::sleep(Duration::from_millis(20));
    }
    Engine { child }
}

fn wait_for_state(socket: &Path, id: &str, state: &str) -> Vec<String> {
    let limit = Instant::now() + Duration::from_secs(20);
    loop {
        let out = text(&cli(socket, &["stat"]));
        let row = out
            .lines()
            .find(|l| l.split('\t').next() == Some(id))
            .map(|l| l.split('\t').map(String::from).collect::<Vec<_>>());
        if let Some(r) = row.filter(|r| r[3] == state) {
            return r;
        }
        assert!(Instant::now() < limit, "job {id} never reached {state}:\n{out}");
        thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn submit_stat_del_against_daemon() {
    let dir = tempfile::tempdir().unwrap();
    let sock = dir.path().join("e.sock");
    let mut engine = start_engine(&sock);

    let empty = cli(&sock, &["stat"]);
    assert_eq!(text(&empty).lines().count(), 1);

    let first = cli(
        &sock,
        &["submit", "-n", "2", "-w", "1", "-t", "300", "--user", "ann", "true"],
    );
    assert_eq!((text(&first).as_str(), first.status.code()), ("1\n", Some(0)));
    let row = wait_for_state(&sock, "1", "Terminated");
    assert_eq!((row[1].as_str(), row[4].as_str()), ("ann", "2x1"));

    let long = cli(&sock, &["submit", "-t", "60", "--user", "bob", "sleep", "30"]);
    assert_eq!(text(&long), "2\n");
    let row = wait_for_state(&sock, "2", "Running");
    assert_eq!(row[7], "", "running job has no stop time");

    let by_user = text(&cli(&sock, &["stat", "-u", "bob"]));
    assert_eq!(by_user.lines().count(), 2);

    assert_eq!(cli(&sock, &["del", "2"]).status.code(), Some(0));
    wait_for_state(&sock, "2", "Error");
    let again = cli(&sock, &["del", "2"]);
    assert_eq!(again.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already Error"));
    assert_eq!(cli(&sock, &["del", "99"]).status.code(), Some(1));

    let rejected = cli(&sock, &["submit", "-q", "nowhere", "true"]);
    assert_eq!(rejected.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&rejected.stderr).contains("nowhere"));

    let past = cli(&sock, &["submit", "-r", "10", "true"]);
    assert_eq!(past.status.code(), Some(1));
    assert_eq!(text(&cli(&sock, &["stat"])).lines().count(), 3);

    assert_eq!(cli(&sock, &["shutdown"]).status.code(), Some(0));
    let status = engine.child.wait().unwrap();
    assert!(status.success());
    assert!(!sock.exists());
}

#[test]
fn unreachable_engine_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let sock = dir.path().join("none.sock");
    for args in [&["stat"][..], &["del", "1"], &["submit", "true"], &["shutdown"]] {
        assert_eq!(cli(&sock, args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn bench_burst_reports_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let plot = dir.path().join("u.tsv");
    let out = Command::new(BIN)
        .args([
            "bench-burst",
            "-n",
            "2",
            "--cluster-nodes",
            "1",
            "--capacity",
            "1",
            "--duration",
            "10",
            "--plot",
        ])
        .arg(&plot)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = text(&out);
    assert!(report.contains("Mean response time (sec)  15.0"), "{report}");
    assert_eq!(
        std::fs::read_to_string(&plot).unwrap(),
        "time\tbusy_procs\n0\t1\n20\t0\n"
    );
}

#[test]
fn bench_run_reads_workload() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.txt");
    std::fs::write(&w, "node a 1\njob 0 passive default 1 1 100 100 0 -\n").unwrap();
    let out = Command::new(BIN)
        .arg("bench-run")
        .arg(&w)
        .args(["--policy", "saf"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = text(&out);
    assert!(report.contains("Efficiency                1.0000"), "{report}");
    let bad = Command::new(BIN)
        .args(["bench-run", "/nonexistent/workload"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
