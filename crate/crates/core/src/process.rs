//! Child-process execution with a hard timeout.
//!
//! Every child runs in its own process group so that a timeout kills the
//! whole tree (shell wrappers, compilers, the measured binary) and no
//! orphan keeps the output pipes open.

use std::collections::BTreeMap;
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Bytes of stdout/stderr retained per stream; anything beyond is drained and dropped.
pub const CAPTURE_LIMIT: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ProcessSpec {
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub env: BTreeMap<String, String>,
    pub timeout: Duration,
}

impl ProcessSpec {
    pub fn new(argv: Vec<String>, cwd: impl AsRef<Path>, timeout: Duration) -> Self {
        ProcessSpec {
            argv,
            cwd: cwd.as_ref().to_path_buf(),
            env: BTreeMap::new(),
            timeout,
        }
    }

    pub fn env(mut self, env: &BTreeMap<String, String>) -> Self {
        self.env.extend(env.iter().map(|(k, v)| (k.clone(), v.clone())));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "code", rename_all = "snake_case")]
pub enum ExitKind {
    Exited(i32),
    Signaled(i32),
    TimedOut,
}

impl ExitKind {
    pub fn success(self) -> bool {
        self == ExitKind::Exited(0)
    }

    pub fn describe(self, timeout: Duration) -> String {
        match self {
            ExitKind::Exited(code) => format!("exit status: {code}"),
            ExitKind::Signaled(sig) => format!("terminated by signal {sig}"),
            ExitKind::TimedOut => format!("timed out after {:.3}s", timeout.as_secs_f64()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProcessOutput {
    pub exit: ExitKind,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub elapsed: Duration,
}

impl ProcessOutput {
    pub fn success(&self) -> bool {
        self.exit.success()
    }

    pub fn stdout_lossy(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }

    pub fn stderr_lossy(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }

    /// stdout followed by stderr, as one log blob.
    pub fn combined_log(&self) -> String {
        let mut log = self.stdout_lossy();
        if !log.is_empty() && !log.ends_with('\n') {
            log.push('\n');
        }
        log.push_str(&self.stderr_lossy());
        log
    }
}

/// Runs `spec` to completion or until its timeout elapses.
///
/// Returns `Err` only when the process cannot be spawned at all.
pub fn run(spec: &ProcessSpec) -> std::io::Result<ProcessOutput> {
    let (program, args) = spec
        .argv
        .split_first()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty argv"))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(&spec.cwd)
        .envs(&spec.env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);

    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");
    let out_reader = thread::spawn(move || drain(stdout));
    let err_reader = thread::spawn(move || drain(stderr));

    let pgid = child.id() as libc::pid_t;
    let mut delay = Duration::from_micros(200);
    let exit = loop {
        if let Some(status) = child.try_wait()? {
            break match (status.code(), status.signal()) {
                (Some(code), _) => ExitKind::Exited(code),
                (None, Some(sig)) => ExitKind::Signaled(sig),
                (None, None) => ExitKind::Exited(-1),
            };
        }
        if start.elapsed() >= spec.timeout {
            kill_group(pgid);
            let _ = child.wait();
            break ExitKind::TimedOut;
        }
        thread::sleep(delay.min(spec.timeout.saturating_sub(start.elapsed())));
        delay = (delay * 2).min(Duration::from_millis(20));
    };
    // Reap anything left in the group (e.g. background jobs of a shell).
    kill_group(pgid);
    let elapsed = start.elapsed();

    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    Ok(ProcessOutput {
        exit,
        stdout,
        stderr,
        elapsed,
    })
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: kill(2) with a negative pid signals the process group we created
    // via process_group(0); it has no memory-safety preconditions.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

fn drain(mut r: impl Read) -> Vec<u8> {
    let mut kept = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match r.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = CAPTURE_LIMIT.saturating_sub(kept.len());
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    kept
}
