//! Subprocess targets that report coverage through an export file.

use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

use super::export::parse_coverage_export;
use super::{ProgramIndex, TargetAdapter};
use crate::coverage::{CrashInfo, ExecutionFeedback, ExitStatus};
use crate::error::TargetError;

/// Environment variable holding the path the target must write its export to.
pub const COVERAGE_OUT_ENV: &str = "SLICEFUZZ_COVERAGE_OUT";

/// An argument equal to this is replaced by the path of a file holding the
/// input; without one, the input is piped to stdin.
pub const INPUT_PLACEHOLDER: &str = "@@";

#[derive(Debug, Clone)]
pub struct ExternalTarget {
    name: String,
    program: PathBuf,
    args: Vec<String>,
    index: ProgramIndex,
}

impl ExternalTarget {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, index: ProgramIndex) -> Result<Self, TargetError> {
        let program = program.into();
        index.validate()?;
        if !program.exists() {
            return Err(TargetError::AdapterFailure(format!(
                "target binary {} not found",
                program.display()
            )));
        }
        let name = program
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| program.display().to_string());
        Ok(ExternalTarget {
            name,
            program,
            args,
            index,
        })
    }
}

impl TargetAdapter for ExternalTarget {
    fn name(&self) -> &str {
        &self.name
    }

    fn execute(&self, input: &[u8], time_limit: Duration) -> Result<ExecutionFeedback, TargetError> {
        if time_limit.is_zero() {
            return Err(TargetError::InvalidTimeLimit);
        }
        let scratch = tempfile::tempdir()?;
        let export_path = scratch.path().join("coverage.json");
        let input_path = scratch.path().join("input");
        let file_arg = self.args.iter().any(|a| a == INPUT_PLACEHOLDER);
        if file_arg {
            std::fs::write(&input_path, input)?;
        }
        let args = self.args.iter().map(|a| {
            if a == INPUT_PLACEHOLDER {
                input_path.as_os_str().to_owned()
            } else {
                a.into()
            }
        });

        let started = Instant::now();
        let mut child = Command::new(&self.program)
            .args(args)
            .env(COVERAGE_OUT_ENV, &export_path)
            .stdin(if file_arg { Stdio::null() } else { Stdio::piped() })
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| TargetError::AdapterFailure(format!("{}: {e}", self.program.display())))?;
        if let Some(mut stdin) = child.stdin.take() {
            // The target may exit without reading; a broken pipe is not our failure.
            let _ = stdin.write_all(input);
        }
        let exit = child.wait_timeout(time_limit)?;
        let wall_time = started.elapsed();

        let exit = match exit {
            Some(exit) => exit,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                let mut fb = match std::fs::read(&export_path) {
                    Ok(raw) => parse_coverage_export(&raw, &self.index).unwrap_or_else(|_| empty()),
                    Err(_) => empty(),
                };
                fb.status = ExitStatus::Timeout;
                fb.wall_time = wall_time;
                return Ok(fb);
            }
        };

        let signal = death_signal(&exit);
        let raw = match std::fs::read(&export_path) {
            Ok(raw) => Some(raw),
            Err(_) if signal.is_some() => None,
            Err(e) => {
                return Err(TargetError::AdapterFailure(format!(
                    "{} exited with {exit} without a readable export: {e}",
                    self.name
                )))
            }
        };
        let mut fb = match raw {
            Some(raw) => parse_coverage_export(&raw, &self.index)?,
            None => empty(),
        };
        if let (Some(sig), ExitStatus::Ok) = (signal, &fb.status) {
            let function = fb.trace.last().cloned().unwrap_or_else(|| self.index.entry.clone());
            fb.status = ExitStatus::Crash(CrashInfo::new(format!("signal-{sig}"), function, None));
        }
        fb.wall_time = wall_time;
        Ok(fb)
    }

    fn index(&self) -> &ProgramIndex {
        &self.index
    }
}

fn empty() -> ExecutionFeedback {
    ExecutionFeedback {
        status: ExitStatus::Ok,
        trace: Vec::new(),
        covered: Default::default(),
        uncovered: Vec::new(),
        wall_time: Duration::ZERO,
    }
}

#[cfg(unix)]
fn death_signal(exit: &std::process::ExitStatus) -> Option<i32> {
    use std::os::unix::process::ExitStatusExt;
    exit.signal()
}

#[cfg(not(unix))]
fn death_signal(_exit: &std::process::ExitStatus) -> Option<i32> {
    None
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::targets::FunctionInfo;
    use std::collections::BTreeMap;
    use std::os::unix::fs::PermissionsExt;

    fn index() -> ProgramIndex {
        let info = FunctionInfo {
            file: "t.sh".into(),
            start_line: 1,
            end_line: 9,
            source: String::new(),
            opaque: false,
        };
        ProgramIndex {
            entry: "main".into(),
            functions: BTreeMap::from([("main".to_string(), info)]),
            call_sites: vec![],
            branches: vec![],
        }
    }

    /// A shell target: reads one byte, branches on whether it is `a`.
    fn script(dir: &std::path::Path, body: &str) -> PathBuf {
        let path = dir.join("target.sh");
        std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        path
    }

    const BRANCHING: &str = r#"
if [ -n "$1" ]; then c=$(head -c1 "$1"); else c=$(head -c1); fi
if [ "$c" = "a" ]; then t=true; f=false; else t=false; f=true; fi
printf '{"trace":["main"],"branches":[{"file":"t.sh","line":3,"column":1,"function":"main","condition":"c = a","true_taken":%s,"false_taken":%s,"stack":["main"]}],"status":"ok"}' $t $f > "$SLICEFUZZ_COVERAGE_OUT"
"#;

    #[test]
    fn stdin_and_file_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let prog = script(dir.path(), BRANCHING);
        let stdin_target = ExternalTarget::new(&prog, vec![], index()).unwrap();
        let fb = stdin_target.execute(b"a", Duration::from_secs(5)).unwrap();
        assert_eq!(fb.status, ExitStatus::Ok);
        assert_eq!(fb.uncovered[0].desired_key().to_string(), "t.sh:3:1:F");

        let file_target = ExternalTarget::new(&prog, vec!["@@".into()], index()).unwrap();
        let fb = file_target.execute(b"b", Duration::from_secs(5)).unwrap();
        assert_eq!(fb.uncovered[0].desired_key().to_string(), "t.sh:3:1:T");
    }

    #[test]
    fn timeout_signal_and_missing_binary() {
        let dir = tempfile::tempdir().unwrap();
        let slow = ExternalTarget::new(script(dir.path(), "sleep 5"), vec![], index()).unwrap();
        let fb = slow.execute(b"", Duration::from_millis(100)).unwrap();
        assert_eq!(fb.status, ExitStatus::Timeout);

        let killer = ExternalTarget::new(script(dir.path(), "kill -SEGV $$"), vec![], index()).unwrap();
        match killer.execute(b"", Duration::from_secs(5)).unwrap().status {
            ExitStatus::Crash(c) => assert_eq!(c.category, "signal-11"),
            other => panic!("{other:?}"),
        }

        let silent = ExternalTarget::new(script(dir.path(), "exit 0"), vec![], index()).unwrap();
        assert!(matches!(
            silent.execute(b"", Duration::from_secs(5)),
            Err(TargetError::AdapterFailure(_))
        ));

        assert!(matches!(
            ExternalTarget::new(dir.path().join("absent"), vec![], index()),
            Err(TargetError::AdapterFailure(_))
        ));
    }
}
