use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slicefuzz"))
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn slicefuzz")
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "{cmd:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dst = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &dst);
        } else {
            fs::copy(e.path(), dst).unwrap();
        }
    }
}

/// A scratch workspace holding copies of the sample configs and seeds.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&repo_root().join("configs"), &dir.path().join("configs"));
    copy_dir(&repo_root().join("seeds"), &dir.path().join("seeds"));
    fs::create_dir_all(dir.path().join("runs")).unwrap();
    dir
}

fn readme_commands() -> Vec<Vec<String>> {
    let readme = fs::read_to_string(repo_root().join("README.md")).unwrap();
    let mut in_sh = false;
    let mut cmds = Vec::new();
    for line in readme.lines() {
        if line.starts_with("```") {
            in_sh = line == "```sh";
            continue;
        }
        if in_sh && line.starts_with("slicefuzz ") {
            cmds.push(line.split_whitespace().skip(1).map(str::to_string).collect());
        }
    }
    cmds
}

#[test]
fn version_and_usage_errors() {
    let v = ok(bin().arg("--version"));
    assert!(v.starts_with("slicefuzz "));
    assert_eq!(run(bin().arg("frobnicate")).status.code(), Some(2));
    assert_eq!(run(bin().args(["eval", "passk"])).status.code(), Some(2));
}

#[test]
fn help_json_describes_the_command_tree() {
    let out = ok(bin().arg("--help-json"));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let text = v.to_string();
    for name in ["dataset", "fuzz", "eval", "reward", "stats", "passk", "ablation", "serve"] {
        assert!(text.contains(&format!("\"{name}\"")), "missing {name}");
    }
}

#[test]
fn config_errors_name_the_field() {
    let ws = workspace();
    let cfg = ws.path().join("configs/bad.toml");
    fs::write(&cfg, "target = \"mini-calc\"\noutput = \"out\"\nconsumer_intervall = 3\n").unwrap();
    let out = run(bin().args(["fuzz", "run", "--config"]).arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("consumer_intervall"));

    fs::write(&cfg, "target = \"mini-calc\"\noutput = \"out\"\ntrain_ratio = 1.5\n").unwrap();
    let out = run(bin().args(["fuzz", "run", "--config"]).arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train_ratio"));

    fs::write(&cfg, "target = \"mini-calc\"\noutput = \"out\"\n[model]\nbackend = \"scripted\"\n").unwrap();
    let out = run(bin().args(["fuzz", "run", "--config"]).arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.script"));
}

#[test]
fn readme_examples_run() {
    let ws = workspace();
    let cmds = readme_commands();
    assert!(cmds.len() >= 10, "only {} commands found", cmds.len());
    for args in cmds.iter().filter(|a| a[..2] != ["reward", "serve"]) {
        let mut args = args.clone();
        // Keep campaigns short; the configs themselves are left as written.
        if args[..2] == ["fuzz", "run"] {
            args.extend(["--iterations".into(), "3000".into()]);
        }
        let start = Instant::now();
        ok(bin().current_dir(ws.path()).args(&args));
        assert!(start.elapsed() < Duration::from_secs(60), "{args:?} took {:?}", start.elapsed());
    }

    for run_dir in ["runs/baseline", "runs/oracle"] {
        let dir = ws.path().join(run_dir);
        for f in ["stats.json", "coverage.csv", "queue.json", "corpus/index.json"] {
            assert!(dir.join(f).exists(), "{run_dir}/{f}");
        }
    }
    let oracle = ws.path().join("runs/oracle");
    assert!(oracle.join("train.jsonl").exists() && oracle.join("test.jsonl").exists());
    let stats: serde_json::Value =
        serde_json::from_str(&ok(bin().args(["stats", "show", "--json"]).arg(&oracle))).unwrap();
    assert_eq!(stats["leaked_questions"], 0);
    assert!(stats["questions_asked"].as_u64().unwrap() > 0);
    let base: serde_json::Value =
        serde_json::from_str(&ok(bin().args(["stats", "show", "--json"]).arg(ws.path().join("runs/baseline"))))
            .unwrap();
    assert_eq!(base["questions_asked"], 0);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path().join("runs/passk.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 5);

    let total = fs::read_to_string(ws.path().join("runs/calc.jsonl")).unwrap().lines().count();
    let train = fs::read_to_string(ws.path().join("runs/train.jsonl")).unwrap().lines().count();
    let test = fs::read_to_string(ws.path().join("runs/test.jsonl")).unwrap().lines().count();
    assert!(total > 0);
    assert_eq!(train + test, total);
}

#[test]
fn scripted_replay_passes_every_question() {
    let ws = workspace();
    let p = |s: &str| ws.path().join(s);
    ok(bin().args(["dataset", "build", "--target", "mini-json", "--seeds"])
        .arg(p("seeds/mini-json"))
        .arg("--out")
        .arg(p("runs/json.jsonl")));
    ok(bin().args(["dataset", "script", "--dataset"]).arg(p("runs/json.jsonl")).arg("--out").arg(p("runs/s.jsonl")));
    ok(bin()
        .args(["eval", "passk", "--k", "1", "--dataset"])
        .arg(p("runs/json.jsonl"))
        .arg("--model")
        .arg(format!("scripted:{}", p("runs/s.jsonl").display()))
        .arg("--report")
        .arg(p("runs/r.json")));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("runs/r.json")).unwrap()).unwrap();
    assert!(report["total"]["questions"].as_u64().unwrap() > 0, "{report}");
    assert_eq!(report["total"]["pass_at_1_ratio"], 1.0, "{report}");
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http(addr: &str, request: &str) -> Option<String> {
    let mut s = TcpStream::connect(addr).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    s.write_all(request.as_bytes()).ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn reward_service_answers_over_http() {
    let ws = workspace();
    let data = ws.path().join("runs/calc.jsonl");
    ok(bin().args(["dataset", "build", "--target", "mini-calc", "--seeds"])
        .arg(ws.path().join("seeds/mini-calc"))
        .arg("--out")
        .arg(&data));
    let first = fs::read_to_string(&data).unwrap().lines().next().unwrap().to_string();
    let rec: serde_json::Value = serde_json::from_str(&first).unwrap();

    let addr = format!("127.0.0.1:{}", free_port());
    let mut child = bin()
        .args(["reward", "serve", "--target", "mini-calc", "--pool", "2", "--dataset"])
        .arg(&data)
        .args(["--addr", &addr])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();

    let deadline = Instant::now() + Duration::from_secs(30);
    let health = loop {
        if let Some(r) = http(&addr, "GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n") {
            break r;
        }
        assert!(Instant::now() < deadline, "service did not start");
        std::thread::sleep(Duration::from_millis(100));
    };
    assert!(health.starts_with("HTTP/1.1 200") && health.ends_with("ok"));

    let body = serde_json::json!({
        "question_id": rec["id"],
        "generated_input_b64": rec["original_input_b64"],
    })
    .to_string();
    let req = format!(
        "POST /reward HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let resp = http(&addr, &req).unwrap();
    child.kill().ok();
    child.wait().ok();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    let json: serde_json::Value = serde_json::from_str(resp.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(json["score"], 0.1);
}
